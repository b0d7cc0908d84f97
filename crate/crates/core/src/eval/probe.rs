use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::features::{group_by_class, FrozenFeatures};
use crate::error::{Error, Result};

const STD_FLOOR: f64 = 1e-8;
const MAX_HALVINGS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// Test top-1 accuracy.
    pub accuracy: f64,
    /// Training cross-entropy before each step and after the last one.
    pub train_loss: Vec<f64>,
}

struct Softmax {
    dim: usize,
    classes: usize,
    /// `dim x classes`, then `classes` biases.
    w: Vec<f64>,
}

impl Softmax {
    fn logits(&self, x: &[f64], out: &mut [f64]) {
        let (d, c) = (self.dim, self.classes);
        out.copy_from_slice(&self.w[d * c..]);
        for (j, &xj) in x.iter().enumerate() {
            for (o, &wjk) in out.iter_mut().zip(&self.w[j * c..(j + 1) * c]) {
                *o += xj * wjk;
            }
        }
    }

    /// Mean cross-entropy and, if requested, its gradient.
    fn loss(&self, xs: &[f64], ys: &[usize], grad: Option<&mut Vec<f64>>) -> f64 {
        let (d, c) = (self.dim, self.classes);
        let n = ys.len() as f64;
        let mut z = vec![0.0; c];
        let mut total = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        for (x, &y) in xs.chunks_exact(d).zip(ys) {
            self.logits(x, &mut z);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            total += m + s.ln() - z[y];
            if let Some(g) = g.as_deref_mut() {
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk = ((*zk - m).exp() / s - f64::from(k == y)) / n;
                }
                for (j, &xj) in x.iter().enumerate() {
                    for (gk, &pk) in g[j * c..(j + 1) * c].iter_mut().zip(z.iter()) {
                        *gk += xj * pk;
                    }
                }
                for (gk, &pk) in g[d * c..].iter_mut().zip(z.iter()) {
                    *gk += pk;
                }
            }
        }
        total / n
    }

    fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.classes];
        self.logits(x, &mut z);
        // first maximum wins
        (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best })
    }
}

fn standardize(train: &FrozenFeatures) -> (Vec<f64>, Vec<f64>) {
    let (d, n) = (train.dim, train.len() as f64);
    let mut mean = vec![0.0; d];
    for i in 0..train.len() {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for i in 0..train.len() {
        for ((s, v), m) in std.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    (mean, std.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect())
}

fn apply(f: &FrozenFeatures, mean: &[f64], std: &[f64]) -> Vec<f64> {
    f.data
        .chunks_exact(f.dim)
        .flat_map(|r| r.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s))
        .collect()
}

/// Multinomial logistic regression on standardized frozen features, trained
/// by full-batch gradient descent from zero weights.
///
/// A step that would raise the training loss is retried at half the step
/// size, so the recorded loss never increases.
pub fn linear_probe(
    train: &FrozenFeatures,
    test: &FrozenFeatures,
    epochs: usize,
    lr: f64,
) -> Result<ProbeResult> {
    if train.dim != test.dim {
        return Err(Error::config(format!(
            "train width {} differs from test width {}",
            train.dim, test.dim
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("probe lr {lr} must be positive")));
    }
    let mut labels: Vec<u32> = train.class_ids.clone();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::config("linear probe needs at least two training classes"));
    }
    let index = |c: u32| labels.binary_search(&c).ok();
    let ys: Vec<usize> = train.class_ids.iter().map(|&c| index(c).unwrap()).collect();
    let (mean, std) = standardize(train);
    let xs = apply(train, &mean, &std);

    let mut model = Softmax {
        dim: train.dim,
        classes: labels.len(),
        w: vec![0.0; (train.dim + 1) * labels.len()],
    };
    let mut grad = vec![0.0; model.w.len()];
    let mut loss = model.loss(&xs, &ys, Some(&mut grad));
    let mut train_loss = vec![loss];
    for _ in 0..epochs {
        let start = model.w.clone();
        let mut step = lr;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            for ((w, w0), g) in model.w.iter_mut().zip(&start).zip(&grad) {
                *w = w0 - step * g;
            }
            let trial = model.loss(&xs, &ys, None);
            if trial <= loss {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            model.w = start;
            break;
        }
        loss = model.loss(&xs, &ys, Some(&mut grad));
        train_loss.push(loss);
    }

    let accuracy = if test.is_empty() {
        0.0
    } else {
        let xt = apply(test, &mean, &std);
        let hits = xt
            .chunks_exact(test.dim)
            .zip(&test.class_ids)
            .filter(|(x, &c)| index(c) == Some(model.predict(x)))
            .count();
        hits as f64 / test.len() as f64
    };
    Ok(ProbeResult {
        accuracy,
        train_loss,
    })
}

/// Class-stratified deterministic subsample keeping `floor(n_c * fraction)`
/// rows of every class, in the original row order.
pub fn few_shot_subset(features: &FrozenFeatures, fraction: f64, seed: u64) -> Result<FrozenFeatures> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction {fraction} must lie in (0, 1]")));
    }
    let mut keep = Vec::new();
    for (class, mut members) in group_by_class(&features.class_ids) {
        let m = (members.len() as f64 * fraction + 1e-9).floor() as usize;
        if m == 0 {
            return Err(Error::config(format!(
                "fraction {fraction} leaves class {class} ({} rows) empty",
                members.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..m]);
    }
    keep.sort_unstable();
    Ok(features.select(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Split;

    fn toy() -> (FrozenFeatures, FrozenFeatures) {
        // class 0 left of the y axis, class 1 right of it
        let data: Vec<f64> = (0..10)
            .flat_map(|i| {
                let side = if i % 2 == 0 { -1.0 } else { 1.0 };
                [side * (0.5 + i as f64 * 0.1), i as f64 * 0.3 - 1.0]
            })
            .collect();
        let classes = (0..10).map(|i| (i % 2) as u32).collect();
        let f = FrozenFeatures::new(2, data, classes, (0..10).collect(), Split::Train).unwrap();
        (f.clone(), FrozenFeatures { split: Split::Test, ..f })
    }

    #[test]
    fn separable_toy_is_solved_with_monotone_loss() {
        let (train, test) = toy();
        let r = linear_probe(&train, &test, 200, 1.0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.train_loss.windows(2).all(|w| w[1] <= w[0]));
        assert!((r.train_loss[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_rejected() {
        let (mut train, test) = toy();
        train.class_ids.iter_mut().for_each(|c| *c = 0);
        assert!(matches!(linear_probe(&train, &test, 5, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn few_shot_fractions() {
        let n = 64;
        let f = FrozenFeatures::new(
            1,
            (0..n).map(f64::from).collect(),
            (0..n).map(|i| (i % 16) as u32).collect(),
            (0..n as u64).collect(),
            Split::Train,
        )
        .unwrap();
        assert_eq!(few_shot_subset(&f, 1.0, 3).unwrap(), f);
        let half = few_shot_subset(&f, 0.5, 3).unwrap();
        for c in 0..16 {
            assert_eq!(half.class_ids.iter().filter(|&&x| x == c).count(), 2);
        }
        assert_eq!(half, few_shot_subset(&f, 0.5, 3).unwrap());
        assert!(few_shot_subset(&f, 0.1, 3).is_err());
        assert!(few_shot_subset(&f, 0.0, 3).is_err());
    }
}
