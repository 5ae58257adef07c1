//! Zero-shot adaptation to a single LR image.
//!
//! The image is degraded once more with its own kernel (the "son"), the
//! network is fitted to map the upscaled son back to the image, and the
//! adapted network then super-resolves the image itself.

use crate::degrade::{bicubic_resize, make_lr_son};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernel::{Kernel, SubsampleMode};
use crate::metrics::psnr_y;
use crate::network::{ArchDescriptor, ModelParams};
use crate::tensor::{backward, l1_loss, AdamState, Array, Graph};

#[derive(Clone, Debug)]
pub struct Adaptation {
    pub sr: Image,
    /// Self-supervised L1 loss measured before each update.
    pub losses: Vec<f64>,
    pub params: ModelParams,
}

enum Optimizer {
    Sgd(f64),
    Adam(AdamState, f64),
}

/// The son→image training pair as network input and target.
fn self_pair(lr: &Image, kernel: &Kernel, mode: SubsampleMode, scale: usize) -> Result<(Array, Array)> {
    if scale == 0 || !lr.height().is_multiple_of(scale) || !lr.width().is_multiple_of(scale) {
        return Err(Error::Dimension {
            op: "meta_test",
            msg: format!("{}×{} input is not divisible by scale {scale}", lr.height(), lr.width()),
        });
    }
    let son = make_lr_son(lr, kernel, scale, mode)?;
    let son_up = bicubic_resize(&son, lr.height(), lr.width())?;
    Ok((son_up.to_array(), lr.to_array()))
}

fn upscale_and_run(params: &ModelParams, lr: &Image, scale: usize) -> Result<Image> {
    let up = bicubic_resize(lr, lr.height() * scale, lr.width() * scale)?;
    Image::from_array(&params.forward(&up.to_array())?)
}

fn adapt(
    mut params: ModelParams,
    lr: &Image,
    kernel: &Kernel,
    mode: SubsampleMode,
    scale: usize,
    steps: usize,
    mut optimizer: Optimizer,
) -> Result<Adaptation> {
    let (input, target) = self_pair(lr, kernel, mode, scale)?;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let graph = Graph::new();
        let theta = params.attach(&graph);
        let x = graph.constant(input.clone());
        let y = graph.constant(target.clone());
        let out = crate::network::forward(params.arch(), &theta, &x)?;
        let loss = l1_loss(&out, &y)?;
        losses.push(loss.item());
        let grads = backward(&loss, &theta, false)?;
        match &mut optimizer {
            Optimizer::Sgd(rate) => {
                for (p, g) in params.tensors_mut().iter_mut().zip(&grads) {
                    let g = g.value();
                    p.data_mut().iter_mut().zip(g.data()).for_each(|(v, d)| *v -= *rate * d);
                }
            }
            Optimizer::Adam(state, rate) => {
                let grads: Vec<Array> = grads.iter().map(|g| (*g.value()).clone()).collect();
                state.step(params.tensors_mut(), &grads, *rate)?;
            }
        }
    }
    let sr = upscale_and_run(&params, lr, scale)?;
    Ok(Adaptation { sr, losses, params })
}

/// `steps` plain gradient-descent updates from `theta_m` at rate `alpha`,
/// then super-resolve `lr` by `scale`.
pub fn meta_test(
    lr: &Image,
    kernel: &Kernel,
    mode: SubsampleMode,
    scale: usize,
    theta_m: &ModelParams,
    steps: usize,
    alpha: f64,
) -> Result<Adaptation> {
    adapt(theta_m.clone(), lr, kernel, mode, scale, steps, Optimizer::Sgd(alpha))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZssrConfig {
    pub arch: ArchDescriptor,
    pub steps: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ZssrConfig {
    fn default() -> Self {
        ZssrConfig {
            arch: ArchDescriptor::default(),
            steps: 2000,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Same self-supervision as [`meta_test`], but from a random initialization
/// and optimized with Adam.
pub fn zssr_baseline(
    lr: &Image,
    kernel: &Kernel,
    mode: SubsampleMode,
    scale: usize,
    cfg: &ZssrConfig,
) -> Result<Adaptation> {
    let params = ModelParams::build(cfg.arch, cfg.seed)?;
    let adam = AdamState::new(params.tensors());
    adapt(
        params,
        lr,
        kernel,
        mode,
        scale,
        cfg.steps,
        Optimizer::Adam(adam, cfg.learning_rate),
    )
}

/// Settings shared by every probe in [`mismatch_probe`].
#[derive(Clone, Copy, Debug)]
pub struct ProbeSetup<'a> {
    pub theta_m: &'a ModelParams,
    pub mode: SubsampleMode,
    pub scale: usize,
    pub steps: usize,
    pub alpha: f64,
    pub border: usize,
}

/// Y-PSNR against `hr` after adapting with each candidate kernel.
pub fn mismatch_probe(lr: &Image, hr: &Image, probes: &[Kernel], setup: &ProbeSetup<'_>) -> Result<Vec<f64>> {
    let run = |k: &Kernel| -> Result<f64> {
        let out = meta_test(lr, k, setup.mode, setup.scale, setup.theta_m, setup.steps, setup.alpha)?;
        psnr_y(&out.sr, hr, setup.border)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        probes.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        probes.iter().map(run).collect()
    }
}
