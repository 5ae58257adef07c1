//! Finite-difference oracles shared by the integration tests.
#![allow(dead_code)]

use mzsr::meta::{meta_objective, MetaTask};
use mzsr::network::{forward, ArchDescriptor};
use mzsr::tensor::{backward, conv2d, l1_loss, Array, Graph, Tensor};
use mzsr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Entries drawn from `±[0.1, 1]`, away from the ReLU and |·| kinks.
pub fn random_array(seed: u64, shape: &[usize]) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// A scalar function of several arrays, expressed on a fresh graph.
pub type ScalarFn<'a> = dyn Fn(&Graph, &[Tensor]) -> Result<Tensor> + 'a;

fn evaluate(f: &ScalarFn<'_>, inputs: &[Array]) -> f64 {
    let g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    f(&g, &leaves).unwrap().item()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over every input.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` with respect to every input element.
pub fn numeric_gradient(f: &ScalarFn<'_>, inputs: &[Array]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut work = inputs.to_vec();
    for k in 0..work.len() {
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let plus = evaluate(f, &work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let minus = evaluate(f, &work);
            work[k].data_mut()[i] = orig;
            out.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    out
}

pub fn analytic_gradient(f: &ScalarFn<'_>, inputs: &[Array]) -> Vec<f64> {
    let g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let y = f(&g, &leaves).unwrap();
    backward(&y, &leaves, false)
        .unwrap()
        .iter()
        .flat_map(|t| t.value().data().to_vec())
        .collect()
}

/// Relative error between the autodiff gradient and central differences.
pub fn gradient_error(f: &ScalarFn<'_>, inputs: &[Array]) -> f64 {
    relative_error(&analytic_gradient(f, inputs), &numeric_gradient(f, inputs))
}

/// `Σ_k ⟨v_k, ∂f/∂x_k⟩` with the gradient recorded on the tape.
pub fn directional_gradient<'a>(
    f: &'a ScalarFn<'a>,
    directions: Vec<Array>,
) -> impl Fn(&Graph, &[Tensor]) -> Result<Tensor> + 'a {
    move |g, xs| {
        let y = f(g, xs)?;
        let grads = backward(&y, xs, true)?;
        let mut total: Option<Tensor> = None;
        for (gk, v) in grads.iter().zip(&directions) {
            let term = gk.mul(&g.constant(v.clone()))?.sum();
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one input"))
    }
}

/// Gradient check of the gradient: differentiates `⟨v, ∇f⟩` once more.
pub fn second_order_error(f: &ScalarFn<'_>, inputs: &[Array], seed: u64) -> f64 {
    let dirs: Vec<Array> = inputs
        .iter()
        .enumerate()
        .map(|(k, a)| random_array(seed + k as u64, a.shape()))
        .collect();
    let h = directional_gradient(f, dirs);
    gradient_error(&h, inputs)
}

/// One named scalar function with its inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Array>,
    pub f: Box<ScalarFn<'static>>,
}

fn weighted_sum(g: &Graph, y: &Tensor, seed: u64) -> Result<Tensor> {
    let w = random_array(seed, &y.shape());
    Ok(y.mul(&g.constant(w))?.sum())
}

/// Every differentiable primitive, each reduced to a scalar through a fixed
/// random weighting so that no gradient is trivially uniform.
pub fn op_cases() -> Vec<OpCase> {
    let s = [2, 3];
    let x4 = [2, 2, 5, 4];
    vec![
        OpCase {
            name: "add",
            inputs: vec![random_array(1, &s), random_array(2, &s)],
            f: Box::new(|g, x| weighted_sum(g, &x[0].add(&x[1])?, 100)),
        },
        OpCase {
            name: "sub",
            inputs: vec![random_array(3, &s), random_array(4, &s)],
            f: Box::new(|g, x| weighted_sum(g, &x[0].sub(&x[1])?, 101)),
        },
        OpCase {
            name: "mul",
            inputs: vec![random_array(5, &s), random_array(6, &s)],
            f: Box::new(|g, x| weighted_sum(g, &x[0].mul(&x[1])?, 102)),
        },
        OpCase {
            name: "mul_scalar",
            inputs: vec![random_array(7, &s)],
            f: Box::new(|g, x| weighted_sum(g, &x[0].mul_scalar(-1.7), 103)),
        },
        OpCase {
            name: "relu",
            inputs: vec![random_array(8, &s)],
            f: Box::new(|g, x| weighted_sum(g, &x[0].relu(), 104)),
        },
        OpCase {
            name: "abs",
            inputs: vec![random_array(9, &s)],
            f: Box::new(|g, x| weighted_sum(g, &x[0].abs(), 105)),
        },
        OpCase {
            name: "sum",
            inputs: vec![random_array(10, &s)],
            f: Box::new(|_, x| x[0].sum().mul(&x[0].sum())),
        },
        OpCase {
            name: "mean",
            inputs: vec![random_array(11, &s)],
            f: Box::new(|_, x| x[0].mean().mul(&x[0].mean())),
        },
        OpCase {
            name: "conv2d",
            inputs: vec![
                random_array(12, &x4),
                random_array(13, &[3, 2, 3, 3]),
                random_array(14, &[3]),
            ],
            f: Box::new(|g, x| weighted_sum(g, &conv2d(&x[0], &x[1], &x[2], 1)?, 106)),
        },
        OpCase {
            name: "conv2d_valid",
            inputs: vec![
                random_array(15, &x4),
                random_array(16, &[2, 2, 3, 3]),
                random_array(17, &[2]),
            ],
            f: Box::new(|g, x| weighted_sum(g, &conv2d(&x[0], &x[1], &x[2], 0)?, 107)),
        },
        OpCase {
            name: "l1_loss",
            inputs: vec![random_array(18, &x4), random_array(19, &x4)],
            f: Box::new(|_, x| l1_loss(&x[0], &x[1])),
        },
        OpCase {
            name: "network_2_layer",
            inputs: tiny_net_inputs(20),
            f: Box::new(|g, x| {
                let arch = ArchDescriptor::new(2, 4);
                let out = forward(arch, &x[1..], &x[0])?;
                weighted_sum(g, &out, 108)
            }),
        },
    ]
}

/// `[input, w0, b0, w1, b1]` for a depth-2, 4-feature RGB network.
pub fn tiny_net_inputs(seed: u64) -> Vec<Array> {
    let arch = ArchDescriptor::new(2, 4);
    let mut v = vec![random_array(seed, &[1, 3, 6, 5])];
    for layer in 0..2 {
        let shape = arch.weight_shape(layer);
        v.push(random_array(seed + 1 + 2 * layer as u64, &shape).map(|w| 0.3 * w));
        v.push(random_array(seed + 2 + 2 * layer as u64, &[shape[0]]).map(|b| 0.1 * b));
    }
    v
}

/// Grayscale depth-2 network with 2 features: 39 parameters.
pub fn micro_arch() -> ArchDescriptor {
    ArchDescriptor {
        depth: 2,
        features: 2,
        kernel_size: 3,
        channels: 1,
    }
}

/// Regression task on fixed random grayscale patches.
pub struct MicroTask {
    pub arch: ArchDescriptor,
    pub train: (Array, Array),
    pub test: (Array, Array),
}

impl MicroTask {
    pub fn new(seed: u64) -> Self {
        let shape = [2, 1, 5, 5];
        MicroTask {
            arch: micro_arch(),
            train: (random_array(seed, &shape), random_array(seed + 1, &shape)),
            test: (random_array(seed + 2, &shape), random_array(seed + 3, &shape)),
        }
    }

    fn loss(&self, params: &[Tensor], pair: &(Array, Array)) -> Result<Tensor> {
        let g = params[0].graph();
        let x = g.constant(pair.0.clone());
        let y = g.constant(pair.1.clone());
        l1_loss(&forward(self.arch, params, &x)?, &y)
    }
}

impl MetaTask for MicroTask {
    fn train_loss(&self, params: &[Tensor]) -> Result<Tensor> {
        self.loss(params, &self.train)
    }

    fn test_loss(&self, params: &[Tensor]) -> Result<Tensor> {
        self.loss(params, &self.test)
    }
}

/// Random parameters for [`micro_arch`].
pub fn micro_params(seed: u64) -> Vec<Array> {
    let arch = micro_arch();
    let mut v = Vec::new();
    for layer in 0..arch.depth {
        let shape = arch.weight_shape(layer);
        v.push(random_array(seed + 2 * layer as u64, &shape).map(|w| 0.4 * w));
        v.push(random_array(seed + 1 + 2 * layer as u64, &[shape[0]]).map(|b| 0.1 * b));
    }
    v
}

/// Relative error of the meta-gradient against central differences of the
/// meta-objective on the micro network.
pub fn meta_gradient_error(first_order: bool) -> f64 {
    let tasks = vec![MicroTask::new(40), MicroTask::new(50)];
    let weights = vec![0.3, 0.7];
    let f = move |_: &Graph, theta: &[Tensor]| meta_objective(theta, &tasks, 0.05, &weights, first_order);
    gradient_error(&f, &micro_params(60))
}
