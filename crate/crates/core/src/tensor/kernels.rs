// Raw row-major kernels shared by the forward and backward passes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_abt_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_atb_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a single-clip 3-d cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub in_channels: usize,
    pub in_dims: [usize; 3],
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub out_dims: [usize; 3],
}

impl Conv3dGeom {
    /// Validates shapes and derives output dims with the floor formula.
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        if input_shape.len() != 4 || kernel_shape.len() != 5 {
            return Err(Error::dim(format!(
                "conv3d expects C×T×H×W input and O×C×kT×kH×kW kernel, got {input_shape:?} and {kernel_shape:?}"
            )));
        }
        if input_shape[0] != kernel_shape[1] {
            return Err(Error::dim(format!(
                "conv3d channel mismatch: input has {}, kernel expects {}",
                input_shape[0], kernel_shape[1]
            )));
        }
        if stride.contains(&0) {
            return Err(Error::dim("conv3d stride must be positive"));
        }
        let mut out_dims = [0; 3];
        for d in 0..3 {
            let padded = input_shape[d + 1] + 2 * padding[d];
            let k = kernel_shape[d + 2];
            if k > padded {
                return Err(Error::dim(format!(
                    "conv3d kernel extent {k} exceeds padded input {padded} on axis {d}"
                )));
            }
            out_dims[d] = (padded - k) / stride[d] + 1;
        }
        Ok(Self {
            in_channels: input_shape[0],
            in_dims: [input_shape[1], input_shape[2], input_shape[3]],
            out_channels: kernel_shape[0],
            kernel: [kernel_shape[2], kernel_shape[3], kernel_shape[4]],
            stride,
            padding,
            out_dims,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.out_dims[0],
            self.out_dims[1],
            self.out_dims[2],
        ]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Calls `f(col_row, position, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [it, ih, iw] = self.in_dims;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.out_dims;
        let p = self.positions();
        for c in 0..self.in_channels {
            for a in 0..kt {
                for b in 0..kh {
                    for e in 0..kw {
                        let row = ((c * kt + a) * kh + b) * kw + e;
                        for zt in 0..ot {
                            let t = (zt * self.stride[0] + a) as isize - self.padding[0] as isize;
                            if t < 0 || t >= it as isize {
                                continue;
                            }
                            for zh in 0..oh {
                                let h = (zh * self.stride[1] + b) as isize - self.padding[1] as isize;
                                if h < 0 || h >= ih as isize {
                                    continue;
                                }
                                for zw in 0..ow {
                                    let w = (zw * self.stride[2] + e) as isize
                                        - self.padding[2] as isize;
                                    if w < 0 || w >= iw as isize {
                                        continue;
                                    }
                                    let pos = (zt * oh + zh) * ow + zw;
                                    let idx = ((c * it + t as usize) * ih + h as usize) * iw
                                        + w as usize;
                                    f(row, pos, idx);
                                }
                            }
                        }
                    }
                }
            }
        }
        debug_assert!(p > 0);
    }

    fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let p = self.positions();
        let mut cols = vec![T::zero(); self.patch_len() * p];
        self.for_each_tap(|row, pos, idx| cols[row * p + pos] = input[idx]);
        cols
    }

    fn col2im_acc<T: Scalar>(&self, cols: &[T], grad_input: &mut [T]) {
        let p = self.positions();
        self.for_each_tap(|row, pos, idx| grad_input[idx] += cols[row * p + pos]);
    }

    pub(crate) fn forward<T: Scalar>(&self, input: &[T], kernel: &[T]) -> Vec<T> {
        let cols = self.im2col(input);
        let p = self.positions();
        let mut out = vec![T::zero(); self.out_channels * p];
        gemm_acc(kernel, &cols, &mut out, self.out_channels, self.patch_len(), p);
        out
    }

    /// Accumulates input and/or kernel gradients given the output gradient.
    pub(crate) fn backward<T: Scalar>(
        &self,
        input: &[T],
        kernel: &[T],
        grad_out: &[T],
        grad_input: Option<&mut [T]>,
        grad_kernel: Option<&mut [T]>,
    ) {
        let p = self.positions();
        let ck = self.patch_len();
        if let Some(gk) = grad_kernel {
            let cols = self.im2col(input);
            gemm_abt_acc(grad_out, &cols, gk, self.out_channels, p, ck);
        }
        if let Some(gi) = grad_input {
            let mut dcols = vec![T::zero(); ck * p];
            gemm_atb_acc(kernel, grad_out, &mut dcols, ck, self.out_channels, p);
            self.col2im_acc(&dcols, gi);
        }
    }
}
