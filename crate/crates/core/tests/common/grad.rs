//! Finite-difference harness for single ops and the full training loss.

use iivcl::data::generate_dataset;
use iivcl::encoder::Encoder;
use iivcl::queue::{EmbeddingQueue, QueueEntry};
use iivcl::tensor::{Tape, Tensor, Var};
use iivcl::train::{batch_for_step, Config, TrainState};
use iivcl::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub const SEEDS: u64 = 20;
pub const OP_TOL: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-3;

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Loss `Σ r ⊙ op(inputs)` so every output element gets its own weight.
fn projected(build: &Build, inputs: &[Tensor<f64>], r: &[f64], grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let rv = tape.constant(Tensor::new(&shape, r.to_vec()).unwrap());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod);
    let value = tape.value(loss).item();
    if !grads {
        return (value, Vec::new());
    }
    let g = tape.backward(loss).unwrap();
    let gs = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match g.get(v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    (value, gs)
}

fn output_len(build: &Build, inputs: &[Tensor<f64>]) -> usize {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).numel()
}

/// Worst relative error over all inputs of one op instance.
pub fn check_op(build: &Build, inputs: Vec<Tensor<f64>>, seed: u64) -> f64 {
    let mut rng = rng(seed ^ 0x9e37);
    let r = gaussian(&mut rng, output_len(build, &inputs));
    let (_, analytic) = projected(build, &inputs, &r, true);
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let fd = central_diff(inputs[i].data(), |x| {
            let mut perturbed = inputs.clone();
            perturbed[i] = Tensor::new(inputs[i].shape(), x.to_vec()).unwrap();
            projected(build, &perturbed, &r, false).0
        });
        worst = worst.max(vec_rel_err(a, &fd));
    }
    worst
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::new(shape, gaussian(rng, shape.iter().product())).unwrap()
}

/// Gaussian entries pushed at least `gap` away from zero, so a relu kink
/// never lies within the difference stencil.
pub fn off_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    random_tensor(rng, shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}


pub type Make = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;

pub struct OpCase {
    pub name: &'static str,
    pub build: Box<Build>,
    pub make: Box<Make>,
}

fn case(
    name: &'static str,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
) -> OpCase {
    OpCase {
        name,
        build: Box::new(build),
        make: Box::new(make),
    }
}

/// Every differentiable tape op, each with an input generator.
pub fn op_cases() -> Vec<OpCase> {
    let mut v = vec![
        case("matmul", |t, v| t.matmul(v[0], v[1]), |r| {
            let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            vec![random_tensor(r, &[m, k]), random_tensor(r, &[k, n])]
        }),
        case("relu", |t, v| Ok(t.relu(v[0])), |r| vec![off_zero(r, &[3, 4], 0.05)]),
        case("add", |t, v| t.add(v[0], v[1]), |r| {
            vec![random_tensor(r, &[2, 3]), random_tensor(r, &[2, 3])]
        }),
        case("bias_add", |t, v| t.bias_add(v[0], v[1]), |r| {
            vec![random_tensor(r, &[3, 4]), random_tensor(r, &[4])]
        }),
        case("scale", |t, v| Ok(t.scale(v[0], -1.7)), |r| vec![random_tensor(r, &[5])]),
        case("mul", |t, v| t.mul(v[0], v[1]), |r| {
            vec![random_tensor(r, &[2, 3]), random_tensor(r, &[2, 3])]
        }),
        case("sum", |t, v| Ok(t.sum(v[0])), |r| vec![random_tensor(r, &[2, 3, 2])]),
        case("mean_pool_global", |t, v| Ok(t.mean_pool_global(v[0])), |r| {
            vec![random_tensor(r, &[3, 2, 3, 3])]
        }),
        case("l2_normalize", |t, v| t.l2_normalize(v[0]), |r| vec![random_tensor(r, &[6])]),
        case("l2_normalize_clamped", |t, v| Ok(t.l2_normalize_clamped(v[0])), |r| {
            vec![random_tensor(r, &[6])]
        }),
        case("dot", |t, v| t.dot(v[0], v[1]), |r| {
            vec![random_tensor(r, &[7]), random_tensor(r, &[7])]
        }),
        case("reshape", |t, v| t.reshape(v[0], &[3, 2]), |r| vec![random_tensor(r, &[2, 3])]),
        // Unnormalized inputs keep every direction of the difference live.
        case("info_nce", |t, v| t.info_nce(v[0], v[1], Some(v[2]), 0.1), |r| {
            let n = r.random_range(1..9);
            vec![
                random_tensor(r, &[8]).map(|x| x * 0.3),
                random_tensor(r, &[8]).map(|x| x * 0.3),
                random_tensor(r, &[n, 8]).map(|x| x * 0.3),
            ]
        }),
        case("info_nce without negatives", |t, v| t.info_nce(v[0], v[1], None, 0.5), |r| {
            vec![random_tensor(r, &[4]), random_tensor(r, &[4])]
        }),
        case(
            "normalize then info_nce",
            |t, v| {
                let q = t.l2_normalize(v[0])?;
                let k = t.l2_normalize(v[1])?;
                t.info_nce(q, k, Some(v[2]), 0.1)
            },
            |r| {
                let negs: Vec<f64> = (0..5).flat_map(|_| unit(r, 6)).collect();
                vec![
                    random_tensor(r, &[6]),
                    random_tensor(r, &[6]),
                    Tensor::new(&[5, 6], negs).unwrap(),
                ]
            },
        ),
    ];
    let geometries = [
        ("conv3d stride 1", [1, 1, 1], [1, 1, 1]),
        ("conv3d stride 1x2x2", [1, 2, 2], [1, 1, 1]),
        ("conv3d mixed stride and padding", [2, 1, 2], [0, 1, 0]),
    ];
    for (name, stride, padding) in geometries {
        v.push(case(name, move |t, v| t.conv3d(v[0], v[1], stride, padding), |r| {
            let (c, o) = (r.random_range(1..3), r.random_range(1..3));
            vec![random_tensor(r, &[c, 4, 5, 5]), random_tensor(r, &[o, c, 3, 3, 3])]
        }));
    }
    v
}

/// Relative error of `op` at each seed.
pub fn op_errors(op: &OpCase) -> Vec<f64> {
    (0..SEEDS)
        .map(|seed| {
            let mut r = rng(seed);
            let inputs = (op.make)(&mut r);
            check_op(op.build.as_ref(), inputs, seed)
        })
        .collect()
}

/// Tiny architecture so every parameter can be differenced. The hidden
/// head layer is wide enough that it never dies completely, which would put
/// the normalization on its clamp where it has no derivative.
pub fn e2e_config(seed: u64) -> Config {
    Config {
        seed,
        data_seed: seed + 1000,
        batch_size: 2,
        n_videos: 16,
        clip_size: 8,
        conv_channels: vec![2, 3],
        conv_strides: vec![1, 2],
        head_dims: vec![8, 4],
        queue_capacity: 16,
        min_nn_pool: 4,
        ..Config::default()
    }
}

pub fn filled_queue(rng: &mut impl Rng, cap: usize, dim: usize, n: usize) -> EmbeddingQueue<f64> {
    let mut q = EmbeddingQueue::new(cap, dim).unwrap();
    let entries = (0..n).map(|i| QueueEntry::new(unit(rng, dim), 10_000 + i as u64)).collect();
    q.enqueue_batch(entries).unwrap();
    q
}

/// Sign of every relu input the query encoder sees on `clips`.
fn relu_pattern(enc: &Encoder<f64>, clips: &[&Tensor<f64>]) -> Vec<bool> {
    let cfg = enc.config();
    let geoms = cfg.geometries().unwrap();
    let p = |name: &str| enc.params().get(name).unwrap().clone();
    let mut signs = Vec::new();
    for clip in clips {
        let mut tape = Tape::new();
        let mut x = tape.constant((*clip).clone());
        for (i, g) in geoms.iter().enumerate() {
            let w = tape.constant(p(&format!("backbone.conv{i}.weight")));
            x = tape.conv3d(x, w, g.stride, g.padding).unwrap();
            signs.extend(tape.value(x).data().iter().map(|&v| v > 0.0));
            x = tape.relu(x);
        }
        let f = tape.mean_pool_global(x);
        let width = tape.value(f).numel();
        for head in ["head_intra", "head_nn"] {
            let mut h = tape.reshape(f, &[1, width]).unwrap();
            for i in 0..cfg.head_dims.len() - 1 {
                let w = tape.constant(p(&format!("{head}.fc{i}.weight")));
                let b = tape.constant(p(&format!("{head}.fc{i}.bias")));
                h = tape.matmul(h, w).unwrap();
                h = tape.bias_add(h, b).unwrap();
                signs.extend(tape.value(h).data().iter().map(|&v| v > 0.0));
                h = tape.relu(h);
            }
        }
    }
    signs
}

fn with_params(state: &TrainState<f64>, x: &[f64]) -> TrainState<f64> {
    let mut s = state.clone();
    let mut off = 0;
    for t in s.pair.query.params_mut().tensors_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&x[off..off + n]);
        off += n;
    }
    s
}

/// Coordinates whose difference stencil keeps every relu on the same side.
/// Elsewhere the loss is not differentiable on `[x-ε, x+ε]` and central
/// differences measure the kink, not the derivative.
fn smooth_coordinates(state: &TrainState<f64>, flat: &[f64], clips: &[&Tensor<f64>]) -> Vec<bool> {
    let base = relu_pattern(&state.pair.query, clips);
    let mut x = flat.to_vec();
    (0..flat.len())
        .map(|i| {
            let orig = x[i];
            let mut same = true;
            for delta in [FD_EPS, -FD_EPS] {
                x[i] = orig + delta;
                same &= relu_pattern(&with_params(state, &x).pair.query, clips) == base;
            }
            x[i] = orig;
            same
        })
        .collect()
}


pub struct EndToEnd {
    /// Relative error over smooth coordinates, per seed.
    pub errors: Vec<f64>,
    pub skipped: usize,
    pub total: usize,
    /// Smallest per-seed fraction of smooth coordinates.
    pub min_smooth_fraction: f64,
}

/// Gradient of the batch loss w.r.t. every query-encoder parameter against
/// central differences, with queues holding enough entries that both the
/// intra and NN terms are live.
pub fn end_to_end() -> EndToEnd {
    let mut out = EndToEnd {
        errors: Vec::new(),
        skipped: 0,
        total: 0,
        min_smooth_fraction: 1.0,
    };
    for seed in 0..SEEDS {
        let config = e2e_config(seed);
        let mut state = TrainState::<f64>::new(config.clone()).unwrap();
        let mut r = rng(seed + 77);
        let dim = *config.head_dims.last().unwrap();
        state.q_intra = filled_queue(&mut r, config.queue_capacity, dim, 8);
        state.q_nn = filled_queue(&mut r, config.queue_capacity, dim, 8);
        let videos = generate_dataset(config.data_seed, config.n_videos, config.n_classes).unwrap();
        let batch = batch_for_step::<f64>(&config, &videos, seed).unwrap();
        let clips: Vec<&Tensor<f64>> = batch.iter().flat_map(|p| [&p.x1, &p.x2]).collect();

        let bg = state.loss_and_gradients(&batch).unwrap();
        assert!(bg.loss.nn_term > 0.0, "nn path must be active");
        let analytic: Vec<f64> = bg.grads.iter().flat_map(|g| g.data().iter().copied()).collect();
        let flat: Vec<f64> = state
            .pair
            .query
            .params()
            .tensors()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        let fd = central_diff(&flat, |x| with_params(&state, x).loss_and_gradients(&batch).unwrap().loss.total);
        let keep = smooth_coordinates(&state, &flat, &clips);
        let n_keep = keep.iter().filter(|&&k| k).count();
        let pick = |v: &[f64]| -> Vec<f64> { v.iter().zip(&keep).filter(|(_, &k)| k).map(|(x, _)| *x).collect() };
        out.errors.push(vec_rel_err(&pick(&analytic), &pick(&fd)));
        out.skipped += flat.len() - n_keep;
        out.total += flat.len();
        out.min_smooth_fraction = out.min_smooth_fraction.min(n_keep as f64 / flat.len() as f64);
    }
    out
}
