use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and coupled L2 weight decay.
///
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamSet<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: Vec<Tensor<T>>) -> Result<()> {
        if buffers.len() != self.buffers.len()
            || buffers
                .iter()
                .zip(&self.buffers)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::config("optimizer buffers do not match parameters"));
        }
        self.buffers = buffers;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.buffers.len() {
            return Err(Error::contract("gradient count does not match parameters"));
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for ((w, g), v) in params.tensors_mut().zip(grads).zip(&mut self.buffers) {
            if w.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "gradient {:?} does not match parameter {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}
