use super::kernels::{gemm_abt_acc, gemm_acc, gemm_atb_acc, Conv3dGeom};
use super::{Tensor, NORM_EPS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Conv3d { input: Var, kernel: Var, geom: Conv3dGeom },
    Relu(Var),
    Add(Var, Var),
    BiasAdd(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    Sum(Var),
    MeanPoolGlobal(Var),
    L2Normalize { input: Var, norm: T },
    Dot(Var, Var),
    Reshape(Var),
    InfoNce {
        query: Var,
        positive: Var,
        negatives: Option<Var>,
        inv_tau: f64,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// Nodes only reference earlier nodes, so the tape is acyclic by
/// construction and a reverse sweep over indices is a valid topological
/// order for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dim(format!(
                "matmul {:?} · {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let geom = Conv3dGeom::new(
            self.nodes[input.0].value.shape(),
            self.nodes[kernel.0].value.shape(),
            stride,
            padding,
        )?;
        let out = geom.forward(
            self.nodes[input.0].value.data(),
            self.nodes[kernel.0].value.data(),
        );
        let value = Tensor::new(&geom.out_shape(), out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                kernel,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|v| v.max(T::zero()));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`d` bias to every row of an `n×d` (or length-`d`) input.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let d = *xv.shape().last().expect("non-empty shape");
        if bv.ndim() != 1 || bv.shape()[0] != d {
            return Err(Error::dim(format!(
                "bias {:?} does not match trailing dim of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % d])
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::BiasAdd(x, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|v| v * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "mul {:?} * {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Averages a `C×…` tensor over everything but the leading axis.
    pub fn mean_pool_global(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let c = av.shape()[0];
        let per = av.numel() / c;
        let inv = T::one() / T::of(per as f64);
        let data = av
            .data()
            .chunks(per)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(data), Op::MeanPoolGlobal(a), rg)
    }

    /// Unit-normalizes `a`, erroring on a (near-)zero vector.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let norm = self.nodes[a.0].value.norm().as_f64();
        if norm <= NORM_EPS {
            return Err(Error::Degenerate {
                norm,
                eps: NORM_EPS,
            });
        }
        Ok(self.l2_normalize_clamped(a))
    }

    /// Unit-normalizes `a` with its norm clamped below at [`NORM_EPS`].
    pub fn l2_normalize_clamped(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let norm = av.norm().max(T::of(NORM_EPS));
        let value = av.map(|v| v / norm);
        let rg = self.rg(a);
        self.push(value, Op::L2Normalize { input: a, norm }, rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.numel() != bv.numel() {
            return Err(Error::dim(format!(
                "dot {:?} · {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let s = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Cross-entropy of the positive among `{positive} ∪ negatives` under
    /// temperature-scaled dot-product logits.
    ///
    /// `query` and `positive` are length-`d` vectors and `negatives` an
    /// `n×d` matrix. Logits, the log-sum-exp and its max shift are evaluated
    /// in `f64` regardless of `T`.
    pub fn info_nce(
        &mut self,
        query: Var,
        positive: Var,
        negatives: Option<Var>,
        tau: f64,
    ) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        let d = self.nodes[query.0].value.numel();
        if self.nodes[positive.0].value.numel() != d {
            return Err(Error::dim("info_nce positive/query length mismatch"));
        }
        if let Some(n) = negatives {
            let nv = &self.nodes[n.0].value;
            if nv.ndim() != 2 || nv.shape()[1] != d {
                return Err(Error::dim(format!(
                    "info_nce negatives {:?} must be n×{d}",
                    nv.shape()
                )));
            }
        }
        let inv_tau = 1.0 / tau;
        let logits = self.nce_logits(query, positive, negatives, inv_tau);
        let loss = log_sum_exp_minus_first(&logits);
        let rg = self.rg(query) || self.rg(positive) || negatives.is_some_and(|n| self.rg(n));
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::InfoNce {
                query,
                positive,
                negatives,
                inv_tau,
            },
            rg,
        ))
    }

    fn nce_logits(&self, q: Var, k: Var, negs: Option<Var>, inv_tau: f64) -> Vec<f64> {
        let qd = self.nodes[q.0].value.data();
        let dotf = |row: &[T]| -> f64 {
            qd.iter()
                .zip(row)
                .map(|(&a, &b)| a.as_f64() * b.as_f64())
                .sum::<f64>()
                * inv_tau
        };
        let mut logits = vec![dotf(self.nodes[k.0].value.data())];
        if let Some(n) = negs {
            let nv = &self.nodes[n.0].value;
            logits.extend(nv.data().chunks(qd.len()).map(dotf));
        }
        logits
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape(), vec![T::one()])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn ensure_buf(&self, grads: &mut [Option<Tensor<T>>], v: Var) {
        if self.rg(v) && grads[v.0].is_none() {
            grads[v.0] = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_abt_acc(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, a, Tensor::new(av.shape(), da).unwrap());
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_atb_acc(av.data(), g.data(), &mut db, k, m, n);
                    self.accumulate(grads, b, Tensor::new(bv.shape(), db).unwrap());
                }
            }
            Op::Conv3d {
                input,
                kernel,
                geom,
            } => {
                self.ensure_buf(grads, input);
                self.ensure_buf(grads, kernel);
                let (gi, gk) = pair_mut(grads, input.0, kernel.0);
                let gi = gi.as_mut().map(|t| t.data_mut());
                let gk = gk.as_mut().map(|t| t.data_mut());
                geom.backward(val(input).data(), val(kernel).data(), g.data(), gi, gk);
            }
            Op::Relu(a) => {
                let av = val(a);
                let data = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, Tensor::new(av.shape(), data).unwrap());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::BiasAdd(x, b) => {
                self.accumulate(grads, x, g.clone());
                if self.rg(b) {
                    let d = val(b).numel();
                    let mut db = vec![T::zero(); d];
                    for (i, &v) in g.data().iter().enumerate() {
                        db[i % d] += v;
                    }
                    self.accumulate(grads, b, Tensor::vector(db));
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, a, g.map(|v| v * c));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if self.rg(a) {
                    let data = g.data().iter().zip(bv.data()).map(|(&d, &y)| d * y).collect();
                    self.accumulate(grads, a, Tensor::new(av.shape(), data).unwrap());
                }
                if self.rg(b) {
                    let data = g.data().iter().zip(av.data()).map(|(&d, &x)| d * x).collect();
                    self.accumulate(grads, b, Tensor::new(bv.shape(), data).unwrap());
                }
            }
            Op::Sum(a) => {
                let av = val(a);
                self.accumulate(grads, a, Tensor::full(av.shape(), g.item()));
            }
            Op::MeanPoolGlobal(a) => {
                let av = val(a);
                let c = av.shape()[0];
                let per = av.numel() / c;
                let inv = T::one() / T::of(per as f64);
                let mut data = Vec::with_capacity(av.numel());
                for &d in g.data() {
                    data.extend(std::iter::repeat_n(d * inv, per));
                }
                self.accumulate(grads, a, Tensor::new(av.shape(), data).unwrap());
            }
            Op::L2Normalize { input, norm } => {
                let y = node.value.data();
                let clamped = norm <= T::of(NORM_EPS);
                let proj: T = if clamped {
                    T::zero()
                } else {
                    y.iter().zip(g.data()).map(|(&a, &b)| a * b).sum()
                };
                let data = y
                    .iter()
                    .zip(g.data())
                    .map(|(&yi, &di)| (di - yi * proj) / norm)
                    .collect();
                self.accumulate(grads, input, Tensor::new(node.value.shape(), data).unwrap());
            }
            Op::Dot(a, b) => {
                let s = g.item();
                if self.rg(a) {
                    self.accumulate(grads, a, val(b).map(|v| v * s).reshaped(val(a).shape()).unwrap());
                }
                if self.rg(b) {
                    self.accumulate(grads, b, val(a).map(|v| v * s).reshaped(val(b).shape()).unwrap());
                }
            }
            Op::Reshape(a) => {
                self.accumulate(grads, a, g.clone().reshaped(val(a).shape()).unwrap());
            }
            Op::InfoNce {
                query,
                positive,
                negatives,
                inv_tau,
            } => {
                let logits = self.nce_logits(query, positive, negatives, inv_tau);
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let upstream = g.item().as_f64();
                // dL/dlogit_j = softmax_j - [j == 0]
                let coef: Vec<f64> = exps
                    .iter()
                    .enumerate()
                    .map(|(j, &e)| (e / z - if j == 0 { 1.0 } else { 0.0 }) * inv_tau * upstream)
                    .collect();
                let qv = val(query);
                let kv = val(positive);
                let d = qv.numel();
                if self.rg(query) {
                    let mut dq = vec![0.0f64; d];
                    for (x, &kx) in dq.iter_mut().zip(kv.data()) {
                        *x += coef[0] * kx.as_f64();
                    }
                    if let Some(n) = negatives {
                        for (row, &c) in val(n).data().chunks(d).zip(&coef[1..]) {
                            for (x, &nx) in dq.iter_mut().zip(row) {
                                *x += c * nx.as_f64();
                            }
                        }
                    }
                    let data = dq.into_iter().map(T::of).collect();
                    self.accumulate(grads, query, Tensor::new(qv.shape(), data).unwrap());
                }
                if self.rg(positive) {
                    let data = qv.data().iter().map(|&x| T::of(coef[0] * x.as_f64())).collect();
                    self.accumulate(grads, positive, Tensor::new(kv.shape(), data).unwrap());
                }
                if let Some(n) = negatives.filter(|&n| self.rg(n)) {
                    let nv = val(n);
                    let mut data = Vec::with_capacity(nv.numel());
                    for &c in &coef[1..] {
                        data.extend(qv.data().iter().map(|&x| T::of(c * x.as_f64())));
                    }
                    self.accumulate(grads, n, Tensor::new(nv.shape(), data).unwrap());
                }
            }
        }
    }
}

fn pair_mut<X>(v: &mut [X], i: usize, j: usize) -> (&mut X, &mut X) {
    assert_ne!(i, j, "conv3d input and kernel must be distinct nodes");
    if i < j {
        let (lo, hi) = v.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

/// `logsumexp(logits) − logits[0]`, shifted by the max logit.
fn log_sum_exp_minus_first(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let argmax = logits.iter().position(|&l| l == m).unwrap_or(0);
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != argmax)
        .map(|(_, &l)| (l - m).exp())
        .sum();
    rest.ln_1p() + (m - logits[0])
}
