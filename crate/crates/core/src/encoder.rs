//! Spatiotemporal backbone, the two projection heads and the momentum twin.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Conv3dGeom, Tape, Tensor, Var};

/// Which projection head an embedding goes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Intra,
    Nn,
}

/// Which encoder of the pair produces an embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Query,
    Key,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Clip shape `C×T×H×W`.
    pub input_shape: [usize; 4],
    pub conv: Vec<ConvLayerSpec>,
    /// Output width of each projection-head layer; the last entry is the
    /// embedding dimension.
    pub head_dims: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let layer = |out_channels, stride| ConvLayerSpec {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        };
        Self {
            input_shape: [1, 4, 16, 16],
            conv: vec![layer(8, 1), layer(16, 2), layer(32, 2)],
            head_dims: vec![32, 16],
        }
    }
}

impl EncoderConfig {
    /// Walks the conv stack and returns each layer's geometry.
    pub fn geometries(&self) -> Result<Vec<Conv3dGeom>> {
        if self.conv.is_empty() {
            return Err(Error::config("encoder needs at least one conv layer"));
        }
        if self.head_dims.is_empty() || self.head_dims.contains(&0) {
            return Err(Error::config("projection head dims must be non-empty and positive"));
        }
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.conv.len());
        for (i, l) in self.conv.iter().enumerate() {
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::config(format!("conv layer {i} has a zero field")));
            }
            let kshape = [l.out_channels, shape[0], l.kernel, l.kernel, l.kernel];
            let g = Conv3dGeom::new(&shape, &kshape, [l.stride; 3], [l.padding; 3])
                .map_err(|e| Error::config(format!("conv layer {i}: {e}")))?;
            shape = g.out_shape().to_vec();
            out.push(g);
        }
        Ok(out)
    }

    pub fn backbone_dim(&self) -> usize {
        self.conv.last().map_or(0, |l| l.out_channels)
    }

    pub fn embedding_dim(&self) -> usize {
        self.head_dims.last().copied().unwrap_or(0)
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// Euclidean distance over all scalars, accumulated in `f64`.
    pub fn distance(&self, other: &Self) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// True when names and shapes agree pairwise.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }
}

/// Parameters bound to a tape as leaves, in `ParamSet` order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// One encoder `f` with its heads `g_intra` and `g_nn`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    config: EncoderConfig,
    geoms: Vec<Conv3dGeom>,
    params: ParamSet<T>,
}

fn head_prefix(branch: Branch) -> &'static str {
    match branch {
        Branch::Intra => "head_intra",
        Branch::Nn => "head_nn",
    }
}

fn he_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("positive dims")
}

impl<T: Scalar> Encoder<T> {
    /// Parameter names, shapes and fan-in, in binding order.
    fn layout(config: &EncoderConfig, geoms: &[Conv3dGeom]) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        for (i, g) in geoms.iter().enumerate() {
            let fan_in = g.in_channels * g.kernel.iter().product::<usize>();
            let shape = vec![g.out_channels, g.in_channels, g.kernel[0], g.kernel[1], g.kernel[2]];
            out.push((format!("backbone.conv{i}.weight"), shape, fan_in));
        }
        for branch in [Branch::Intra, Branch::Nn] {
            let p = head_prefix(branch);
            let mut width = config.backbone_dim();
            for (i, &dim) in config.head_dims.iter().enumerate() {
                out.push((format!("{p}.fc{i}.weight"), vec![width, dim], width));
                out.push((format!("{p}.fc{i}.bias"), vec![dim], 0));
                width = dim;
            }
        }
        out
    }

    /// He-initialized weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let geoms = config.geometries()?;
        let entries = Self::layout(&config, &geoms)
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let t = if fan_in == 0 {
                    Tensor::zeros(&shape)
                } else {
                    he_tensor(&shape, fan_in, rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            geoms,
            params: ParamSet::new(entries),
        })
    }

    /// Rebuilds an encoder around existing parameters, checking the layout.
    pub fn from_params(config: EncoderConfig, params: ParamSet<T>) -> Result<Self> {
        let geoms = config.geometries()?;
        let layout = Self::layout(&config, &geoms);
        let matches = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.iter())
                .all(|((n, s, _), (pn, t))| n == pn && s.as_slice() == t.shape());
        if !matches {
            return Err(Error::config("parameter layout does not match encoder config"));
        }
        Ok(Self {
            config,
            geoms,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .tensors()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    fn check_clip(&self, clip: &Tensor<T>) -> Result<()> {
        if clip.shape() != self.config.input_shape {
            return Err(Error::dim(format!(
                "clip shape {:?} does not match configured {:?}",
                clip.shape(),
                self.config.input_shape
            )));
        }
        Ok(())
    }

    /// Backbone features after global average pooling.
    pub fn features(&self, tape: &mut Tape<T>, bound: &BoundParams, clip: Var) -> Result<Var> {
        self.check_clip(tape.value(clip))?;
        let mut x = clip;
        for (i, g) in self.geoms.iter().enumerate() {
            x = tape.conv3d(x, bound.vars[i], g.stride, g.padding)?;
            x = tape.relu(x);
        }
        Ok(tape.mean_pool_global(x))
    }

    /// Projection through one head followed by (clamped) l2 normalization.
    pub fn project(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        features: Var,
        branch: Branch,
    ) -> Result<Var> {
        let n_layers = self.config.head_dims.len();
        let base = self.geoms.len()
            + match branch {
                Branch::Intra => 0,
                Branch::Nn => 2 * n_layers,
            };
        let width = tape.value(features).numel();
        let mut h = tape.reshape(features, &[1, width])?;
        for i in 0..n_layers {
            let w = bound.vars[base + 2 * i];
            let b = bound.vars[base + 2 * i + 1];
            h = tape.matmul(h, w)?;
            h = tape.bias_add(h, b)?;
            if i + 1 < n_layers {
                h = tape.relu(h);
            }
        }
        let out = self.config.embedding_dim();
        let h = tape.reshape(h, &[out])?;
        Ok(tape.l2_normalize_clamped(h))
    }

    /// Gradient-free embedding of one clip.
    pub fn embed_value(&self, clip: &Tensor<T>, branch: Branch) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(clip.clone());
        let f = self.features(&mut tape, &bound, x)?;
        let z = self.project(&mut tape, &bound, f, branch)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Gradient-free embeddings through both heads, sharing one backbone pass.
    pub fn embed_both(&self, clip: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(clip.clone());
        let f = self.features(&mut tape, &bound, x)?;
        let zi = self.project(&mut tape, &bound, f, Branch::Intra)?;
        let zn = self.project(&mut tape, &bound, f, Branch::Nn)?;
        Ok((tape.value(zi).data().to_vec(), tape.value(zn).data().to_vec()))
    }

    /// Gradient-free backbone features (heads bypassed).
    pub fn features_value(&self, clip: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(clip.clone());
        let f = self.features(&mut tape, &bound, x)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Normalized head output for precomputed backbone features.
    pub fn head_value(&self, features: &[T], branch: Branch) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = tape.constant(Tensor::vector(features.to_vec()));
        let z = self.project(&mut tape, &bound, f, branch)?;
        Ok(tape.value(z).data().to_vec())
    }
}

/// Query encoder plus its momentum-updated key twin.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair<T> {
    pub query: Encoder<T>,
    pub key: Encoder<T>,
}

impl<T: Scalar> EncoderPair<T> {
    /// Initializes the query encoder and copies it into the key encoder.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let query = Encoder::init(config, rng)?;
        Ok(Self {
            key: query.clone(),
            query,
        })
    }

    pub fn encoder(&self, side: Side) -> &Encoder<T> {
        match side {
            Side::Query => &self.query,
            Side::Key => &self.key,
        }
    }

    /// Unit-norm embedding of `clip`; no tape survives the call.
    pub fn embed(&self, clip: &Tensor<T>, branch: Branch, side: Side) -> Result<Vec<T>> {
        self.encoder(side).embed_value(clip, branch)
    }

    /// `θ_k ← m·θ_k + (1−m)·θ_q` over every backbone and head tensor.
    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::config(format!("momentum {m} outside [0, 1]")));
        }
        let mt = T::of(m);
        let qt = T::one() - mt;
        for (k, q) in self.key.params.tensors_mut().zip(self.query.params.tensors()) {
            for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
                *kv = mt * *kv + qt * qv;
            }
        }
        Ok(())
    }

    /// Forces `θ_k := θ_q`.
    pub fn sync_key(&mut self) {
        self.key.params = self.query.params.clone();
    }
}

/// How the EMA coefficient moves from `m₀` to 1 over training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnnealShape {
    #[default]
    Cosine,
    Linear,
    Constant,
}

/// Momentum coefficient at training progress `t ∈ [0, 1]`.
pub fn anneal_momentum(progress: f64, m0: f64, shape: AnnealShape) -> f64 {
    let t = progress.clamp(0.0, 1.0);
    match shape {
        AnnealShape::Cosine => 1.0 - (1.0 - m0) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0,
        AnnealShape::Linear => m0 + (1.0 - m0) * t,
        AnnealShape::Constant => m0,
    }
}
