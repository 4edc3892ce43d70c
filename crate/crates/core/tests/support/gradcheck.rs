//! Central finite differences against reverse-mode gradients, in f64.

use lesiondet::autodiff::{BatchNormMode, BatchNormStats, Graph, NodeId, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

/// Builds a scalar from leaves that are recorded in the given order.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId + 'a;

fn evaluate(inputs: &[Tensor<f64>], f: &Builder<'_>) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &ids);
    g.value(out).data()[0]
}

/// Largest relative error `|a - n|_2 / max(|a|_2, |n|_2)` over the inputs.
pub fn max_relative_error(inputs: &[Tensor<f64>], f: &Builder<'_>) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids);
    let grads = g.backward(out).expect("scalar output");
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]).expect("gradient reaches every input");
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (evaluate(&plus, f) - evaluate(&minus, f)) / (2.0 * STEP);
            let a = analytic.data()[j];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 0.0 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero (ReLU kink).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.01 apart (no max-pool ties).
fn distinct(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..shape.numel()).map(|i| i as f64 * 0.01 - 0.3).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

fn small_shape(rng: &mut ChaCha8Rng, even: bool) -> Shape {
    let mut side = || {
        let s = rng.random_range(2..=5usize);
        if even {
            s & !1
        } else {
            s
        }
    };
    let (h, w) = (side(), side());
    Shape::new(rng.random_range(1..=2), rng.random_range(1..=3), h, w)
}

/// Reduce a tensor node to a scalar with a fixed random probe.
fn probe_dot(g: &mut Graph<f64>, y: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = uniform(&mut rng, g.value(y).shape());
    g.dot(y, &probe).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Conv3,
    Conv1,
    BatchNorm,
    BatchNormEval,
    Relu,
    MaxPool,
    UpConv,
    Concat,
    Sigmoid,
    Loss,
}

impl Op {
    pub const ALL: [Op; 10] = [
        Op::Conv3,
        Op::Conv1,
        Op::BatchNorm,
        Op::BatchNormEval,
        Op::Relu,
        Op::MaxPool,
        Op::UpConv,
        Op::Concat,
        Op::Sigmoid,
        Op::Loss,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv3 => "conv 3x3",
            Op::Conv1 => "conv 1x1",
            Op::BatchNorm => "batch norm (train)",
            Op::BatchNormEval => "batch norm (eval)",
            Op::Relu => "relu",
            Op::MaxPool => "max-pool",
            Op::UpConv => "up-conv",
            Op::Concat => "concat",
            Op::Sigmoid => "sigmoid",
            Op::Loss => "weighted logistic loss",
        }
    }

    pub fn tolerance(&self) -> f64 {
        match self {
            Op::BatchNorm | Op::BatchNormEval => 1e-3,
            _ => 1e-4,
        }
    }
}

/// Worst relative error of `op` over `trials` random instances.
pub fn check_op(op: Op, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let probe_seed = seed.wrapping_mul(1000) + trial as u64;
        let err = match op {
            Op::Conv3 | Op::Conv1 => {
                let k = if op == Op::Conv3 { 3 } else { 1 };
                let xs = small_shape(&mut rng, false);
                let cout = rng.random_range(1..=3);
                let inputs = [
                    uniform(&mut rng, xs),
                    uniform(&mut rng, Shape::new(cout, xs.channels, k, k)),
                    uniform(&mut rng, Shape::new(1, cout, 1, 1)),
                ];
                max_relative_error(&inputs, &|g, p| {
                    let y = g.conv2d(p[0], p[1], p[2]).unwrap();
                    probe_dot(g, y, probe_seed)
                })
            }
            Op::BatchNorm | Op::BatchNormEval => {
                let mut xs = small_shape(&mut rng, false);
                xs.batch = 2;
                let c = xs.channels;
                let gamma = Tensor::from_fn(Shape::new(1, c, 1, 1), |_| rng.random_range(0.5..1.5));
                let mut stats = BatchNormStats::new(c);
                for v in stats.var.iter_mut() {
                    *v = rng.random_range(0.5..2.0);
                }
                for m in stats.mean.iter_mut() {
                    *m = rng.random_range(-0.5..0.5);
                }
                let inputs = [uniform(&mut rng, xs), gamma, uniform(&mut rng, Shape::new(1, c, 1, 1))];
                let train = op == Op::BatchNorm;
                max_relative_error(&inputs, &|g, p| {
                    let y = if train {
                        let mut s = BatchNormStats::new(c);
                        g.batch_norm(p[0], p[1], p[2], BatchNormMode::Train(&mut s)).unwrap()
                    } else {
                        g.batch_norm(p[0], p[1], p[2], BatchNormMode::Eval(&stats)).unwrap()
                    };
                    probe_dot(g, y, probe_seed)
                })
            }
            Op::Relu => {
                let s = small_shape(&mut rng, false);
                let inputs = [away_from_zero(&mut rng, s)];
                max_relative_error(&inputs, &|g, p| {
                    let y = g.relu(p[0]);
                    probe_dot(g, y, probe_seed)
                })
            }
            Op::MaxPool => {
                let s = small_shape(&mut rng, true);
                let inputs = [distinct(&mut rng, s)];
                max_relative_error(&inputs, &|g, p| {
                    let y = g.max_pool2(p[0]).unwrap();
                    probe_dot(g, y, probe_seed)
                })
            }
            Op::UpConv => {
                let xs = small_shape(&mut rng, false);
                let cout = rng.random_range(1..=3);
                let inputs = [uniform(&mut rng, xs), uniform(&mut rng, Shape::new(xs.channels, cout, 2, 2))];
                max_relative_error(&inputs, &|g, p| {
                    let y = g.up_conv2(p[0], p[1]).unwrap();
                    probe_dot(g, y, probe_seed)
                })
            }
            Op::Concat => {
                let a = small_shape(&mut rng, false);
                let b = a.with_channels(rng.random_range(1..=3));
                let inputs = [uniform(&mut rng, a), uniform(&mut rng, b)];
                max_relative_error(&inputs, &|g, p| {
                    let y = g.concat_channels(p[0], p[1]).unwrap();
                    probe_dot(g, y, probe_seed)
                })
            }
            Op::Sigmoid => {
                let xs = small_shape(&mut rng, false);
                let inputs = [Tensor::from_fn(xs, |_| rng.random_range(-4.0..4.0))];
                max_relative_error(&inputs, &|g, p| {
                    let y = g.sigmoid(p[0]);
                    probe_dot(g, y, probe_seed)
                })
            }
            Op::Loss => {
                let xs = small_shape(&mut rng, false);
                let target = Tensor::from_fn(xs, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
                let inputs = [Tensor::from_fn(xs, |_| rng.random_range(-4.0..4.0))];
                let nw = rng.random_range(0.1..1.0);
                max_relative_error(&inputs, &|g, p| g.weighted_logistic_loss(p[0], &target, nw).unwrap())
            }
        };
        worst = worst.max(err);
    }
    worst
}
