use mzsr::config::RunConfig;
use mzsr::meta::{
    meta_gradient_sequential, meta_objective, meta_train, pretrain, sample_task, step_loss_weights, MetaTask, Task,
};
use mzsr::network::{ArchDescriptor, ModelParams};
use mzsr::synth;
use mzsr::tensor::{backward, Array, Graph, Tensor};
use mzsr::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Quadratic {
    c: f64,
}

impl MetaTask for Quadratic {
    fn train_loss(&self, p: &[Tensor]) -> Result<Tensor> {
        Ok(p[0].mul(&p[0])?.mul_scalar(0.5))
    }

    fn test_loss(&self, p: &[Tensor]) -> Result<Tensor> {
        let d = p[0].sub(&p[0].graph().constant(Array::scalar(self.c)))?;
        Ok(d.mul(&d)?.mul_scalar(0.5))
    }
}

fn toy_gradient(theta0: f64, alpha: f64, c: f64, first_order: bool) -> f64 {
    let g = Graph::new();
    let theta = vec![g.scalar(theta0)];
    let obj = meta_objective(&theta, &[Quadratic { c }], alpha, &[1.0], first_order).unwrap();
    backward(&obj, &theta, false).unwrap()[0].item()
}

#[test]
fn toy_outer_loop_converges_to_fixed_point() {
    // Gradient descent on ½((1-α)θ - c)² settles at θ = c / (1 - α).
    let (alpha, c) = (0.1, 0.45);
    let mut theta = 2.0;
    for _ in 0..2000 {
        theta -= 0.5 * toy_gradient(theta, alpha, c, false);
    }
    assert!((theta - c / (1.0 - alpha)).abs() < 1e-9);
}

fn tiny_cfg() -> RunConfig {
    RunConfig {
        arch: ArchDescriptor::new(2, 3),
        patch: 16,
        task_pairs: 2,
        task_batch: 3,
        unroll_steps: 2,
        pretrain_iters: 4,
        meta_iters: 3,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = tiny_cfg();
    let corpus = synth::corpus(9, 3, 48, 48);
    let run = || {
        let t = pretrain(&corpus, &cfg, &mut |_| {}).unwrap();
        let m = meta_train(&t, &corpus, &cfg, &mut |_| {}).unwrap();
        (t, m)
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoints_every_tenth_and_at_the_end() {
    let mut cfg = tiny_cfg();
    cfg.pretrain_iters = 25;
    let corpus = synth::corpus(9, 2, 32, 32);
    let mut seen = Vec::new();
    let mut losses = 0;
    pretrain(&corpus, &cfg, &mut |e| match e {
        mzsr::meta::TrainEvent::Checkpoint { iter, .. } => seen.push(iter),
        mzsr::meta::TrainEvent::Step { loss, .. } => {
            assert!(loss.is_finite());
            losses += 1;
        }
    })
    .unwrap();
    assert_eq!(losses, 25);
    assert_eq!(seen, vec![2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22, 24, 25]);
}

#[test]
fn meta_train_rejects_mismatched_architecture() {
    let cfg = tiny_cfg();
    let corpus = synth::corpus(9, 2, 32, 32);
    let other = ModelParams::build(ArchDescriptor::new(3, 3), 0).unwrap();
    assert!(meta_train(&other, &corpus, &cfg, &mut |_| {}).is_err());
}

#[test]
fn multi_scale_tasks_cover_the_range() {
    let mut cfg = tiny_cfg();
    cfg.patch = 24;
    cfg.scale_range = Some((2, 4));
    cfg.validate().unwrap();
    let corpus = synth::corpus(2, 2, 64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut scales: Vec<usize> = (0..40)
        .map(|_| sample_task(&corpus, &cfg, &mut rng).unwrap().scale)
        .collect();
    scales.sort();
    scales.dedup();
    assert_eq!(scales, vec![2, 3, 4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_weights_lie_on_the_simplex(iter in 0usize..5000, k in 1usize..9, horizon in 0usize..3000) {
        let w = step_loss_weights(iter, k, horizon);
        prop_assert_eq!(w.len(), k);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        if iter >= horizon {
            prop_assert_eq!(w[k - 1], 1.0);
        }
    }

    #[test]
    fn toy_second_order_factor(theta in -3.0f64..3.0, alpha in 0.0f64..0.9, c in -3.0f64..3.0) {
        let full = toy_gradient(theta, alpha, c, false);
        let first = toy_gradient(theta, alpha, c, true);
        let inner = (1.0 - alpha) * theta - c;
        prop_assert!((full - (1.0 - alpha) * inner).abs() <= 1e-9);
        prop_assert!((first - inner).abs() <= 1e-9);
    }
}

#[test]
fn task_order_does_not_change_the_objective() {
    let cfg = tiny_cfg();
    let corpus = synth::corpus(4, 3, 48, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tasks: Vec<Task> = (0..3).map(|_| sample_task(&corpus, &cfg, &mut rng).unwrap()).collect();
    let params = ModelParams::build(cfg.arch, 1).unwrap();
    let w = step_loss_weights(0, 2, 4);
    let (forward_loss, _) = meta_gradient_sequential(&params, &tasks, 0.01, &w, false).unwrap();
    let reversed: Vec<Task> = tasks.iter().rev().cloned().collect();
    let (reverse_loss, _) = meta_gradient_sequential(&params, &reversed, 0.01, &w, false).unwrap();
    assert!((forward_loss - reverse_loss).abs() < 1e-12);
}

#[test]
fn pretraining_overfits_a_single_patch() {
    let cfg = RunConfig {
        patch: 16,
        pretrain_iters: 500,
        pretrain_batch: 1,
        ..Default::default()
    };
    let corpus = synth::corpus(12, 1, 16, 16);
    let mut losses = Vec::new();
    pretrain(&corpus, &cfg, &mut |e| {
        if let mzsr::meta::TrainEvent::Step { loss, .. } = e {
            losses.push(loss);
        }
    })
    .unwrap();
    let (first, last) = (losses[0], losses[losses.len() - 1]);
    assert!(last < 0.1 * first, "{first} -> {last}");
}
