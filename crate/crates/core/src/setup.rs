//! Problem instances shared by the sweeps, RACT runs and the CLI.
//!
//! Every random ingredient of an instance is drawn from its own stream
//! derived from the run seed, so changing one ingredient (say the noise
//! rate) leaves the others untouched.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datagen::{
    inject_symmetric_noise, load_mnist_idx, make_teacher, random_label_dataset, sample_dataset,
    train_eval_split, NoisyDataset, Task, Teacher,
};
use crate::error::{ensure, Result};
use crate::model::{lora_init, LoraModel};
use crate::numerics::{Matrix, Rng};

/// Seed streams. Training order uses the run seed directly.
pub mod stream {
    pub const TEACHER: u64 = 10;
    pub const SAMPLES: u64 = 11;
    pub const NOISE: u64 = 12;
    pub const BASE: u64 = 13;
    pub const SPLIT: u64 = 14;
    pub const INIT: u64 = 20;
    pub const INIT_LOW: u64 = 21;
    pub const INIT_HIGH: u64 = 22;
    pub const INIT_RETRAIN: u64 = 23;
}

/// A 64-bit seed for stream `stream` of run `seed`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    Rng::derive(seed, stream).next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Teacher,
    Random,
}

/// Synthetic instance: inputs in `R^k`, `d` output units read as `C`
/// classes, labels from a low-rank teacher or uniformly random.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub d: usize,
    pub k: usize,
    pub num_classes: usize,
    pub n: usize,
    pub labels: LabelSource,
    pub teacher_rank: usize,
    pub teacher_alpha: f64,
    /// Entries of the frozen base are `N(0, w0_scale²)`.
    pub w0_scale: f64,
    pub lora_alpha: f64,
    /// Held-out share scored against clean labels; 0 disables the split.
    pub eval_fraction: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            d: 32,
            k: 32,
            num_classes: 4,
            n: 1000,
            labels: LabelSource::Teacher,
            teacher_rank: 4,
            teacher_alpha: 1.0,
            w0_scale: 0.1,
            lora_alpha: 16.0,
            eval_fraction: 0.0,
        }
    }
}

/// A ready-to-train instance.
#[derive(Clone, Debug)]
pub struct Instance {
    pub train: NoisyDataset,
    pub eval: Option<NoisyDataset>,
    pub w0: Matrix,
    pub task: Task,
    pub lora_alpha: f64,
    pub teacher: Option<Teacher>,
}

impl Instance {
    /// Fresh adapter of rank `rank` on this instance's frozen base.
    pub fn adapter(&self, rank: usize, seed: u64) -> Result<LoraModel> {
        lora_init(self.w0.clone(), rank, self.lora_alpha, seed)?.with_task(self.task)
    }

    pub fn max_rank(&self) -> usize {
        self.w0.rows().min(self.w0.cols())
    }
}

fn validate_eval_fraction(f: f64) -> Result<()> {
    ensure!(
        (0.0..1.0).contains(&f),
        Config,
        "eval_fraction must be in [0, 1), got {f}"
    );
    Ok(())
}

fn random_base(d: usize, k: usize, scale: f64, seed: u64) -> Matrix {
    Rng::derive(seed, stream::BASE).gaussian(d, k).scale(scale)
}

/// Splits off the eval share (if any) and corrupts the training labels.
fn finish(
    full: NoisyDataset,
    eta: f64,
    eval_fraction: f64,
    seed: u64,
) -> Result<(NoisyDataset, Option<NoisyDataset>)> {
    let (train, eval) = if eval_fraction > 0.0 {
        let (t, e) = train_eval_split(&full, eval_fraction, sub_seed(seed, stream::SPLIT))?;
        (t, Some(e))
    } else {
        (full, None)
    };
    let train = inject_symmetric_noise(&train, eta, sub_seed(seed, stream::NOISE))?;
    Ok((train, eval))
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.d >= 1 && self.k >= 1, Config, "d and k must be positive");
        ensure!(self.n >= 2, Config, "n must be at least 2");
        ensure!(
            self.num_classes >= 2 && self.num_classes <= self.d,
            Config,
            "num_classes must be in [2, d={}], got {}",
            self.d,
            self.num_classes
        );
        ensure!(
            self.w0_scale.is_finite() && self.w0_scale >= 0.0,
            Config,
            "w0_scale must be non-negative"
        );
        ensure!(
            self.lora_alpha.is_finite() && self.lora_alpha > 0.0,
            Config,
            "lora_alpha must be positive"
        );
        validate_eval_fraction(self.eval_fraction)
    }

    pub fn task(&self) -> Task {
        Task::Classification {
            num_classes: self.num_classes,
        }
    }

    /// Builds the instance for run `seed` with label-noise rate `eta`.
    pub fn build(&self, eta: f64, seed: u64) -> Result<Instance> {
        self.validate()?;
        let task = self.task();
        let (full, teacher) = match self.labels {
            LabelSource::Teacher => {
                let teacher = make_teacher(
                    self.d,
                    self.k,
                    self.teacher_rank,
                    self.teacher_alpha,
                    sub_seed(seed, stream::TEACHER),
                )?;
                let ds = sample_dataset(&teacher, self.n, sub_seed(seed, stream::SAMPLES), task)?;
                (ds, Some(teacher))
            }
            LabelSource::Random => {
                let ds = random_label_dataset(
                    self.n,
                    self.k,
                    self.num_classes,
                    sub_seed(seed, stream::SAMPLES),
                )?;
                (ds, None)
            }
        };
        let (train, eval) = finish(full, eta, self.eval_fraction, seed)?;
        Ok(Instance {
            train,
            eval,
            w0: random_base(self.d, self.k, self.w0_scale, seed),
            task,
            lora_alpha: self.lora_alpha,
            teacher,
        })
    }
}

/// MNIST instance: IDX files, a leading subset, and a grouped readout
/// with `units_per_class` output units per digit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistTask {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "MnistTask::default_limit")]
    pub limit: Option<usize>,
    #[serde(default = "MnistTask::default_units")]
    pub units_per_class: usize,
    #[serde(default = "MnistTask::default_w0_scale")]
    pub w0_scale: f64,
    #[serde(default = "MnistTask::default_lora_alpha")]
    pub lora_alpha: f64,
    #[serde(default = "MnistTask::default_eval_fraction")]
    pub eval_fraction: f64,
}

impl MnistTask {
    fn default_limit() -> Option<usize> {
        Some(10_000)
    }
    fn default_units() -> usize {
        4
    }
    fn default_w0_scale() -> f64 {
        0.1
    }
    fn default_lora_alpha() -> f64 {
        16.0
    }
    fn default_eval_fraction() -> f64 {
        0.2
    }

    pub fn new(images: impl Into<PathBuf>, labels: impl Into<PathBuf>) -> Self {
        Self {
            images: images.into(),
            labels: labels.into(),
            limit: Self::default_limit(),
            units_per_class: Self::default_units(),
            w0_scale: Self::default_w0_scale(),
            lora_alpha: Self::default_lora_alpha(),
            eval_fraction: Self::default_eval_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.units_per_class >= 1, Config, "units_per_class must be positive");
        ensure!(
            self.w0_scale.is_finite() && self.w0_scale >= 0.0,
            Config,
            "w0_scale must be non-negative"
        );
        ensure!(
            self.lora_alpha.is_finite() && self.lora_alpha > 0.0,
            Config,
            "lora_alpha must be positive"
        );
        validate_eval_fraction(self.eval_fraction)
    }

    pub fn load(&self) -> Result<NoisyDataset> {
        self.validate()?;
        load_mnist_idx(&self.images, &self.labels, self.limit)
    }

    /// Builds the instance for run `seed` from an already loaded dataset.
    pub fn build_from(&self, full: &NoisyDataset, eta: f64, seed: u64) -> Result<Instance> {
        self.validate()?;
        let classes = full.num_classes().unwrap_or(10);
        let d = classes * self.units_per_class;
        let (train, eval) = finish(full.clone(), eta, self.eval_fraction, seed)?;
        Ok(Instance {
            train,
            eval,
            w0: random_base(d, full.input_dim(), self.w0_scale, seed),
            task: Task::Classification {
                num_classes: classes,
            },
            lora_alpha: self.lora_alpha,
            teacher: None,
        })
    }
}
