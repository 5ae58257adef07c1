//! Run configuration and its flat `key = value` file format.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernel::SubsampleMode;
use crate::network::ArchDescriptor;

/// What a task's inner loop trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TaskTrain {
    /// `(bicubic up(LR), HR)` crops, disjoint from the test crops.
    #[default]
    Hr,
    /// `(bicubic up(son), LR)` on the same crops the test split scores against
    /// their HR, so the inner step is the self-supervised meta-test update.
    Son,
}

impl fmt::Display for TaskTrain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskTrain::Hr => "hr",
            TaskTrain::Son => "son",
        })
    }
}

impl FromStr for TaskTrain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hr" => Ok(TaskTrain::Hr),
            "son" => Ok(TaskTrain::Son),
            other => Err(Error::Config(format!(
                "unknown task_train `{other}` (expected hr or son)"
            ))),
        }
    }
}

/// Every hyperparameter of the three training stages.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchDescriptor,
    /// Task-level (inner and meta-test) learning rate.
    pub alpha: f64,
    /// Meta learning rate.
    pub beta: f64,
    /// Inner gradient steps per task.
    pub unroll_steps: usize,
    /// HR patch side.
    pub patch: usize,
    pub scale: usize,
    pub mode: SubsampleMode,
    /// Tasks per meta batch.
    pub task_batch: usize,
    /// Patch pairs in each of a task's train and test splits.
    pub task_pairs: usize,
    pub pretrain_iters: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub meta_iters: usize,
    pub seed: u64,
    /// Fraction of `meta_iters` over which the per-step loss weights decay.
    pub weight_decay_fraction: f64,
    /// Drop second-order terms through the inner updates.
    pub first_order: bool,
    /// Inclusive integer range of scales for multi-scale tasks.
    pub scale_range: Option<(usize, usize)>,
    pub task_train: TaskTrain,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchDescriptor::default(),
            alpha: 0.01,
            beta: 1e-4,
            unroll_steps: 5,
            patch: 64,
            scale: 2,
            mode: SubsampleMode::Direct,
            task_batch: 4,
            task_pairs: 4,
            pretrain_iters: 1000,
            pretrain_batch: 4,
            pretrain_lr: 1e-4,
            meta_iters: 2000,
            seed: 0,
            weight_decay_fraction: 0.5,
            first_order: false,
            scale_range: None,
            task_train: TaskTrain::Hr,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        positive("pretrain_lr", self.pretrain_lr)?;
        if self.unroll_steps == 0 {
            return Err(Error::Config("unroll_steps must be at least 1".into()));
        }
        if self.task_batch == 0 || self.task_pairs == 0 || self.pretrain_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.weight_decay_fraction) {
            return Err(Error::Config(format!(
                "weight_decay_fraction must lie in [0, 1], got {}",
                self.weight_decay_fraction
            )));
        }
        for s in self.scales() {
            let divisor = match self.task_train {
                TaskTrain::Hr => s,
                TaskTrain::Son => s * s,
            };
            if s == 0 || !self.patch.is_multiple_of(divisor) || self.patch / divisor == 0 {
                return Err(Error::Config(format!(
                    "patch {} is not divisible by {divisor} (scale {s}, task_train {})",
                    self.patch, self.task_train
                )));
            }
        }
        if let Some((lo, hi)) = self.scale_range {
            if lo > hi {
                return Err(Error::Config(format!("empty scale range {lo}..={hi}")));
            }
        }
        Ok(())
    }

    /// Every scale a task may use.
    pub fn scales(&self) -> Vec<usize> {
        match self.scale_range {
            Some((lo, hi)) => (lo..=hi).collect(),
            None => vec![self.scale],
        }
    }

    /// Meta iteration at which only the final step's loss remains weighted.
    pub fn weight_decay_horizon(&self) -> usize {
        (self.weight_decay_fraction * self.meta_iters as f64).ceil() as usize
    }

    /// Checkpoint every tenth of the run (at least every iteration).
    pub fn checkpoint_every(&self, iters: usize) -> usize {
        (iters / 10).max(1)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "depth" => self.arch.depth = parse(key, value)?,
            "features" => self.arch.features = parse(key, value)?,
            "kernel_size" => self.arch.kernel_size = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "unroll_steps" => self.unroll_steps = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "scale" => self.scale = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "task_batch" => self.task_batch = parse(key, value)?,
            "task_pairs" => self.task_pairs = parse(key, value)?,
            "pretrain_iters" => self.pretrain_iters = parse(key, value)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "meta_iters" => self.meta_iters = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "weight_decay_fraction" => self.weight_decay_fraction = parse(key, value)?,
            "first_order" => self.first_order = parse(key, value)?,
            "task_train" => self.task_train = value.parse()?,
            "scale_range" => {
                self.scale_range = if value.is_empty() || value == "none" {
                    None
                } else {
                    let (lo, hi) = value
                        .split_once(['-', ','])
                        .ok_or_else(|| Error::Config(format!("scale_range must look like `2-4`, got `{value}`")))?;
                    Some((parse(key, lo.trim())?, parse(key, hi.trim())?))
                }
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_str(&text)
    }

    /// The resolved configuration in the same format [`RunConfig::merge_str`] reads.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "depth = {}", self.arch.depth);
        let _ = writeln!(s, "features = {}", self.arch.features);
        let _ = writeln!(s, "kernel_size = {}", self.arch.kernel_size);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "unroll_steps = {}", self.unroll_steps);
        let _ = writeln!(s, "patch = {}", self.patch);
        let _ = writeln!(s, "scale = {}", self.scale);
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "task_batch = {}", self.task_batch);
        let _ = writeln!(s, "task_pairs = {}", self.task_pairs);
        let _ = writeln!(s, "pretrain_iters = {}", self.pretrain_iters);
        let _ = writeln!(s, "pretrain_batch = {}", self.pretrain_batch);
        let _ = writeln!(s, "pretrain_lr = {}", self.pretrain_lr);
        let _ = writeln!(s, "meta_iters = {}", self.meta_iters);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "weight_decay_fraction = {}", self.weight_decay_fraction);
        let _ = writeln!(s, "first_order = {}", self.first_order);
        let range = match self.scale_range {
            Some((lo, hi)) => format!("{lo}-{hi}"),
            None => "none".into(),
        };
        let _ = writeln!(s, "scale_range = {range}");
        let _ = writeln!(s, "task_train = {}", self.task_train);
        s
    }
}
