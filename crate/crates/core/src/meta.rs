//! Bicubic pretraining and meta-transfer training.
//!
//! Meta-training differentiates a task's test loss through `K` unrolled
//! gradient-descent steps on its train loss. The inner gradients are recorded
//! with `create_graph`, so the outer gradient includes the second-order
//! terms unless `first_order` is set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TaskTrain};
use crate::degrade::{bicubic_resize, degrade_noise_free, DegradeSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernel::{sample_kernel_params, Kernel, KernelSpec, SubsampleMode};
use crate::network::{forward, ArchDescriptor, ModelParams};
use crate::tensor::{backward, l1_loss, sgd_update, AdamState, Array, Graph, Tensor};

const PRETRAIN_STREAM: u64 = 1;
const META_STREAM: u64 = 2;

/// Progress reported by the training loops.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Step { iter: usize, loss: f64 },
    Checkpoint { iter: usize, params: &'a ModelParams },
}

/// A batch of `(input, target)` patches: both N×C×P×P.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub input: Array,
    pub target: Array,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_pairs(pairs: &[(Image, Image)]) -> Result<Self> {
        let inputs: Vec<Image> = pairs.iter().map(|p| p.0.clone()).collect();
        let targets: Vec<Image> = pairs.iter().map(|p| p.1.clone()).collect();
        Ok(PatchSet {
            input: Image::batch(&inputs)?,
            target: Image::batch(&targets)?,
        })
    }

    /// Mean L1 between the network output and the targets.
    pub fn loss(&self, arch: ArchDescriptor, params: &[Tensor]) -> Result<Tensor> {
        let graph = params.first().ok_or(Error::Empty("parameters"))?.graph();
        let x = graph.constant(self.input.clone());
        let y = graph.constant(self.target.clone());
        l1_loss(&forward(arch, params, &x)?, &y)
    }
}

/// One super-resolution task: a blur kernel and disjoint train/test crops.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub spec: KernelSpec,
    pub kernel: Kernel,
    pub mode: SubsampleMode,
    pub scale: usize,
    pub train: PatchSet,
    pub test: PatchSet,
}

/// Anything with a train and a test loss over a shared parameter list.
pub trait MetaTask {
    fn train_loss(&self, params: &[Tensor]) -> Result<Tensor>;
    fn test_loss(&self, params: &[Tensor]) -> Result<Tensor>;
}

/// A [`Task`] bound to the network architecture that scores it.
#[derive(Clone, Copy, Debug)]
pub struct SrTask<'a> {
    pub arch: ArchDescriptor,
    pub task: &'a Task,
}

impl MetaTask for SrTask<'_> {
    fn train_loss(&self, params: &[Tensor]) -> Result<Tensor> {
        self.task.train.loss(self.arch, params)
    }

    fn test_loss(&self, params: &[Tensor]) -> Result<Tensor> {
        self.task.test.loss(self.arch, params)
    }
}

fn check_corpus(corpus: &[Image], patch: usize) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Empty("image corpus"));
    }
    if let Some(small) = corpus.iter().find(|i| i.height() < patch || i.width() < patch) {
        return Err(Error::Config(format!(
            "patch {patch} is larger than a {}×{} corpus image",
            small.height(),
            small.width()
        )));
    }
    Ok(())
}

fn random_crop<R: Rng + ?Sized>(corpus: &[Image], patch: usize, rng: &mut R) -> Result<Image> {
    let img = &corpus[rng.random_range(0..corpus.len())];
    let top = rng.random_range(0..=img.height() - patch);
    let left = rng.random_range(0..=img.width() - patch);
    img.crop(top, left, patch, patch)
}

/// `(bicubic up(bicubic down(hr)), hr)` for one HR patch.
fn bicubic_pair(hr: Image, scale: usize) -> Result<(Image, Image)> {
    let (h, w) = (hr.height(), hr.width());
    let lr = bicubic_resize(&hr, h / scale, w / scale)?;
    Ok((bicubic_resize(&lr, h, w)?, hr))
}

/// Large-scale training on bicubic degradation with Adam. Returns θ_T.
pub fn pretrain(corpus: &[Image], cfg: &RunConfig, observer: &mut dyn FnMut(TrainEvent<'_>)) -> Result<ModelParams> {
    cfg.validate()?;
    check_corpus(corpus, cfg.patch)?;
    let mut params = ModelParams::build(cfg.arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PRETRAIN_STREAM);
    let mut adam = AdamState::new(params.tensors());
    let every = cfg.checkpoint_every(cfg.pretrain_iters);
    for iter in 0..cfg.pretrain_iters {
        let pairs = (0..cfg.pretrain_batch)
            .map(|_| bicubic_pair(random_crop(corpus, cfg.patch, &mut rng)?, cfg.scale))
            .collect::<Result<Vec<_>>>()?;
        let batch = PatchSet::from_pairs(&pairs)?;
        let graph = Graph::new();
        let theta = params.attach(&graph);
        let loss = batch.loss(cfg.arch, &theta)?;
        let grads: Vec<Array> = backward(&loss, &theta, false)?
            .iter()
            .map(|g| (*g.value()).clone())
            .collect();
        adam.step(params.tensors_mut(), &grads, cfg.pretrain_lr)?;
        observer(TrainEvent::Step {
            iter,
            loss: loss.item(),
        });
        if (iter + 1) % every == 0 || iter + 1 == cfg.pretrain_iters {
            observer(TrainEvent::Checkpoint {
                iter: iter + 1,
                params: &params,
            });
        }
    }
    Ok(params)
}

/// Pick `count` crops that never overlap within the same image.
fn disjoint_crops<R: Rng + ?Sized>(corpus: &[Image], patch: usize, count: usize, rng: &mut R) -> Result<Vec<Image>> {
    let mut placed: Vec<(usize, usize, usize)> = Vec::with_capacity(count);
    let mut attempts = 0;
    while placed.len() < count {
        attempts += 1;
        if attempts > 1000 * count {
            return Err(Error::Config(format!(
                "cannot place {count} disjoint {patch}×{patch} crops in the corpus"
            )));
        }
        let idx = rng.random_range(0..corpus.len());
        let img = &corpus[idx];
        let top = rng.random_range(0..=img.height() - patch);
        let left = rng.random_range(0..=img.width() - patch);
        let overlaps = placed
            .iter()
            .any(|&(i, t, l)| i == idx && t < top + patch && top < t + patch && l < left + patch && left < l + patch);
        if !overlaps {
            placed.push((idx, top, left));
        }
    }
    placed
        .into_iter()
        .map(|(i, t, l)| corpus[i].crop(t, l, patch, patch))
        .collect()
}

/// Draw a kernel, crop disjoint HR patches and synthesize their LR inputs.
///
/// With [`TaskTrain::Son`] the train split holds each crop's son→LR pair at
/// LR size and the test split the same crop's LR→HR pair.
pub fn sample_task<R: Rng + ?Sized>(corpus: &[Image], cfg: &RunConfig, rng: &mut R) -> Result<Task> {
    check_corpus(corpus, cfg.patch)?;
    let scale = match cfg.scale_range {
        Some((lo, hi)) => rng.random_range(lo..=hi),
        None => cfg.scale,
    };
    let spec = sample_kernel_params(scale as f64, rng);
    let kernel = spec.rasterize()?;
    let degradation = DegradeSpec::new(kernel.clone(), scale, cfg.mode);
    let (train, test) = match cfg.task_train {
        TaskTrain::Hr => {
            let crops = disjoint_crops(corpus, cfg.patch, 2 * cfg.task_pairs, rng)?;
            let pairs = crops
                .into_iter()
                .map(|hr| {
                    let lr = degrade_noise_free(&hr, &degradation)?;
                    Ok((bicubic_resize(&lr, cfg.patch, cfg.patch)?, hr))
                })
                .collect::<Result<Vec<_>>>()?;
            let (train, test) = pairs.split_at(cfg.task_pairs);
            (PatchSet::from_pairs(train)?, PatchSet::from_pairs(test)?)
        }
        TaskTrain::Son => {
            let crops = disjoint_crops(corpus, cfg.patch, cfg.task_pairs, rng)?;
            let mut train = Vec::with_capacity(crops.len());
            let mut test = Vec::with_capacity(crops.len());
            for hr in crops {
                let lr = degrade_noise_free(&hr, &degradation)?;
                let son = degrade_noise_free(&lr, &degradation)?;
                train.push((bicubic_resize(&son, lr.height(), lr.width())?, lr.clone()));
                test.push((bicubic_resize(&lr, cfg.patch, cfg.patch)?, hr));
            }
            (PatchSet::from_pairs(&train)?, PatchSet::from_pairs(&test)?)
        }
    };
    Ok(Task {
        spec,
        kernel,
        mode: cfg.mode,
        scale,
        train,
        test,
    })
}

/// Parameters after each inner step and the train loss measured before it.
#[derive(Debug)]
pub struct Adapted {
    pub params: Vec<Vec<Tensor>>,
    pub train_losses: Vec<f64>,
}

/// `steps` chained functional updates `θ ← θ - α ∇ L_tr(θ)`.
///
/// The chain stays differentiable with respect to `theta`; with
/// `first_order` the inner gradients are treated as constants.
pub fn inner_adapt<T: MetaTask + ?Sized>(
    theta: &[Tensor],
    task: &T,
    alpha: f64,
    steps: usize,
    first_order: bool,
) -> Result<Adapted> {
    let mut current = theta.to_vec();
    let mut params = Vec::with_capacity(steps);
    let mut train_losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let loss = task.train_loss(&current)?;
        train_losses.push(loss.item());
        let grads = backward(&loss, &current, !first_order)?;
        current = sgd_update(&current, &grads, alpha)?;
        params.push(current.clone());
    }
    Ok(Adapted { params, train_losses })
}

/// Per-step loss weights for meta iteration `iter`.
///
/// Uniform at the start; the non-final weights decay linearly to zero over
/// `horizon` iterations and their mass moves to the final step.
pub fn step_loss_weights(iter: usize, steps: usize, horizon: usize) -> Vec<f64> {
    if steps == 0 {
        return Vec::new();
    }
    let progress = if horizon == 0 {
        1.0
    } else {
        (iter as f64 / horizon as f64).min(1.0)
    };
    let k = steps as f64;
    let mut w = vec![(1.0 - progress) / k; steps];
    w[steps - 1] = (1.0 + (k - 1.0) * progress) / k;
    w
}

/// `Σ_tasks Σ_k w_k · L_te(θ^(k))`, summed in task order.
pub fn meta_objective<T: MetaTask>(
    theta: &[Tensor],
    tasks: &[T],
    alpha: f64,
    weights: &[f64],
    first_order: bool,
) -> Result<Tensor> {
    if tasks.is_empty() {
        return Err(Error::Empty("task batch"));
    }
    if weights.is_empty() {
        return Err(Error::Config("need at least one inner step".into()));
    }
    let mut total: Option<Tensor> = None;
    for task in tasks {
        let adapted = inner_adapt(theta, task, alpha, weights.len(), first_order)?;
        for (w, params) in weights.iter().zip(&adapted.params) {
            if *w == 0.0 {
                continue;
            }
            let term = task.test_loss(params)?.mul_scalar(*w);
            total = Some(match total {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| Error::Config("every step weight is zero".into()))
}

/// Meta-objective value and gradient for a single task on its own graph.
fn task_meta_gradient(
    params: &ModelParams,
    task: &Task,
    alpha: f64,
    weights: &[f64],
    first_order: bool,
) -> Result<(f64, Vec<Array>)> {
    let graph = Graph::new();
    let theta = params.attach(&graph);
    let bound = SrTask {
        arch: params.arch(),
        task,
    };
    let objective = meta_objective(&theta, std::slice::from_ref(&bound), alpha, weights, first_order)?;
    let grads = backward(&objective, &theta, false)?;
    Ok((objective.item(), grads.iter().map(|g| (*g.value()).clone()).collect()))
}

fn reduce_in_order(parts: Vec<Result<(f64, Vec<Array>)>>) -> Result<(f64, Vec<Array>)> {
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or(Error::Empty("task batch"))??;
    for part in iter {
        let (l, g) = part?;
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, grads))
}

/// Meta-gradient of the batch, one task after another.
pub fn meta_gradient_sequential(
    params: &ModelParams,
    tasks: &[Task],
    alpha: f64,
    weights: &[f64],
    first_order: bool,
) -> Result<(f64, Vec<Array>)> {
    let parts = tasks
        .iter()
        .map(|t| task_meta_gradient(params, t, alpha, weights, first_order))
        .collect();
    reduce_in_order(parts)
}

/// Meta-gradient of the batch with one graph per task on the rayon pool.
///
/// Task results are summed in task-index order, so the output is
/// bit-identical to [`meta_gradient_sequential`].
#[cfg(feature = "parallel")]
pub fn meta_gradient_parallel(
    params: &ModelParams,
    tasks: &[Task],
    alpha: f64,
    weights: &[f64],
    first_order: bool,
) -> Result<(f64, Vec<Array>)> {
    use rayon::prelude::*;
    let parts = tasks
        .par_iter()
        .map(|t| task_meta_gradient(params, t, alpha, weights, first_order))
        .collect();
    reduce_in_order(parts)
}

/// Meta-gradient using the parallel path when the `parallel` feature is on.
pub fn meta_gradient(
    params: &ModelParams,
    tasks: &[Task],
    alpha: f64,
    weights: &[f64],
    first_order: bool,
) -> Result<(f64, Vec<Array>)> {
    #[cfg(feature = "parallel")]
    {
        meta_gradient_parallel(params, tasks, alpha, weights, first_order)
    }
    #[cfg(not(feature = "parallel"))]
    {
        meta_gradient_sequential(params, tasks, alpha, weights, first_order)
    }
}

/// Meta-transfer training from `theta_t`. Returns θ_M.
pub fn meta_train(
    theta_t: &ModelParams,
    corpus: &[Image],
    cfg: &RunConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<ModelParams> {
    cfg.validate()?;
    check_corpus(corpus, cfg.patch)?;
    if theta_t.arch() != cfg.arch {
        return Err(Error::Arch(format!(
            "initial parameters have {:?} but the config asks for {:?}",
            theta_t.arch(),
            cfg.arch
        )));
    }
    let mut params = theta_t.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(META_STREAM);
    let mut adam = AdamState::new(params.tensors());
    let horizon = cfg.weight_decay_horizon();
    let every = cfg.checkpoint_every(cfg.meta_iters);
    for iter in 0..cfg.meta_iters {
        let tasks = (0..cfg.task_batch)
            .map(|_| sample_task(corpus, cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let weights = step_loss_weights(iter, cfg.unroll_steps, horizon);
        let (loss, grads) = meta_gradient(&params, &tasks, cfg.alpha, &weights, cfg.first_order)?;
        adam.step(params.tensors_mut(), &grads, cfg.beta)?;
        observer(TrainEvent::Step { iter, loss });
        if (iter + 1) % every == 0 || iter + 1 == cfg.meta_iters {
            observer(TrainEvent::Checkpoint {
                iter: iter + 1,
                params: &params,
            });
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    /// L_tr = ½θ², L_te = ½(θ - c)² on a scalar.
    struct Quadratic {
        c: f64,
    }

    impl MetaTask for Quadratic {
        fn train_loss(&self, p: &[Tensor]) -> Result<Tensor> {
            Ok(p[0].mul(&p[0])?.mul_scalar(0.5))
        }

        fn test_loss(&self, p: &[Tensor]) -> Result<Tensor> {
            let c = p[0].graph().constant(Array::scalar(self.c));
            let d = p[0].sub(&c)?;
            Ok(d.mul(&d)?.mul_scalar(0.5))
        }
    }

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            arch: ArchDescriptor::new(2, 2),
            patch: 16,
            task_pairs: 2,
            task_batch: 2,
            unroll_steps: 2,
            ..Default::default()
        }
    }

    #[test]
    fn inner_adapt_closed_forms() {
        let g = Graph::new();
        let theta = vec![g.scalar(1.0)];
        let task = Quadratic { c: 0.0 };
        let one = inner_adapt(&theta, &task, 0.1, 1, false).unwrap();
        assert!((one.params[0][0].item() - 0.9).abs() < 1e-15);
        let two = inner_adapt(&theta, &task, 0.1, 2, false).unwrap();
        assert!((two.params[1][0].item() - 0.81).abs() < 1e-15);
        let frozen = inner_adapt(&theta, &task, 0.0, 3, false).unwrap();
        assert!(frozen.params.iter().all(|p| p[0].item() == 1.0));
    }

    #[test]
    fn toy_meta_gradient_second_vs_first_order() {
        let (alpha, theta0, c) = (0.1, 1.0, 0.0);
        for (first_order, expected) in [(false, 0.81), (true, 0.9)] {
            let g = Graph::new();
            let theta = vec![g.scalar(theta0)];
            let obj = meta_objective(&theta, &[Quadratic { c }], alpha, &[1.0], first_order).unwrap();
            let value: f64 = 0.5 * ((1.0 - alpha) * theta0 - c).powi(2);
            assert!((obj.item() - value).abs() < 1e-15);
            let grad = backward(&obj, &theta, false).unwrap()[0].item();
            assert!((grad - expected).abs() < 1e-12, "first_order={first_order}: {grad}");
        }
    }

    #[test]
    fn zero_alpha_reduces_to_test_loss() {
        let g = Graph::new();
        let theta = vec![g.scalar(0.7)];
        let obj = meta_objective(&theta, &[Quadratic { c: 0.2 }], 0.0, &[1.0], false).unwrap();
        assert!((obj.item() - 0.5 * 0.5f64.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let g = Graph::new();
        let theta = vec![g.scalar(0.7)];
        let none: [Quadratic; 0] = [];
        assert!(meta_objective(&theta, &none, 0.1, &[1.0], false).is_err());
    }

    #[test]
    fn loss_weight_schedule() {
        assert_eq!(step_loss_weights(0, 5, 100), vec![0.2; 5]);
        assert_eq!(step_loss_weights(100, 5, 100), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(step_loss_weights(250, 5, 100), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        let mid = step_loss_weights(50, 5, 100);
        assert!((mid[0] - 0.1).abs() < 1e-15);
        assert!((mid[4] - 0.6).abs() < 1e-15);
        assert_eq!(step_loss_weights(0, 1, 10), vec![1.0]);
        assert_eq!(step_loss_weights(0, 3, 0), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sampled_task_shapes_and_determinism() {
        let cfg = tiny_cfg();
        let corpus = synth::corpus(1, 3, 40, 40);
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        let a = sample_task(&corpus, &cfg, &mut r1).unwrap();
        let b = sample_task(&corpus, &cfg, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.input.shape(), &[2, 3, 16, 16]);
        assert_eq!(a.test.target.shape(), &[2, 3, 16, 16]);
        assert!((0.0..=std::f64::consts::PI).contains(&a.spec.theta));
        assert!(a.spec.lambda1 <= 5.0 && a.spec.lambda2 <= a.spec.lambda1);
        assert_ne!(a.train.target, a.test.target);
    }

    #[test]
    fn son_tasks_pair_each_crop_with_itself() {
        let cfg = RunConfig {
            task_train: TaskTrain::Son,
            ..tiny_cfg()
        };
        let corpus = synth::corpus(1, 3, 40, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = sample_task(&corpus, &cfg, &mut rng).unwrap();
        assert_eq!(t.train.input.shape(), &[2, 3, 8, 8]);
        assert_eq!(t.test.input.shape(), &[2, 3, 16, 16]);
        let lr =
            Image::from_array(&Array::new(vec![1, 3, 8, 8], t.train.target.data()[..192].to_vec()).unwrap()).unwrap();
        let hr =
            Image::from_array(&Array::new(vec![1, 3, 16, 16], t.test.target.data()[..768].to_vec()).unwrap()).unwrap();
        let spec = DegradeSpec::new(t.kernel.clone(), 2, cfg.mode);
        assert_eq!(degrade_noise_free(&hr, &spec).unwrap(), lr);
    }

    #[test]
    fn disjoint_crops_fail_cleanly_when_impossible() {
        let corpus = synth::corpus(1, 1, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(disjoint_crops(&corpus, 16, 2, &mut rng).is_err());
    }

    #[test]
    fn corpus_validation() {
        let cfg = tiny_cfg();
        assert!(matches!(pretrain(&[], &cfg, &mut |_| {}), Err(Error::Empty(_))));
        let small = synth::corpus(0, 1, 8, 8);
        assert!(pretrain(&small, &cfg, &mut |_| {}).is_err());
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let mut cfg = tiny_cfg();
        cfg.pretrain_iters = 0;
        cfg.meta_iters = 0;
        let corpus = synth::corpus(2, 2, 32, 32);
        let theta_t = pretrain(&corpus, &cfg, &mut |_| {}).unwrap();
        assert_eq!(theta_t, ModelParams::build(cfg.arch, cfg.seed).unwrap());
        let theta_m = meta_train(&theta_t, &corpus, &cfg, &mut |_| {}).unwrap();
        assert_eq!(theta_m, theta_t);
    }

    #[test]
    fn sequential_and_default_paths_agree_bitwise() {
        let cfg = tiny_cfg();
        let corpus = synth::corpus(3, 2, 48, 48);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tasks: Vec<Task> = (0..3).map(|_| sample_task(&corpus, &cfg, &mut rng).unwrap()).collect();
        let params = ModelParams::build(cfg.arch, 4).unwrap();
        let w = step_loss_weights(0, 2, 10);
        let a = meta_gradient_sequential(&params, &tasks, 0.01, &w, false).unwrap();
        let b = meta_gradient(&params, &tasks, 0.01, &w, false).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }
}
