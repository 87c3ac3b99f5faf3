//! Synthetic teacher tasks, label noise, and dataset plumbing.

mod idx;

pub use idx::{load_mnist_idx, write_idx_images, write_idx_labels, IMAGE_MAGIC, LABEL_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::matrix::{argmax, dot, norm};
use crate::numerics::{Matrix, Rng};

/// What the model's outputs mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Output unit `j` votes for class `j % num_classes`.
    Classification { num_classes: usize },
    /// Outputs are real targets under squared loss.
    Regression,
}

impl Task {
    pub fn num_classes(&self) -> Option<usize> {
        match *self {
            Task::Classification { num_classes } => Some(num_classes),
            Task::Regression => None,
        }
    }
}

/// Class index of output unit `unit` under the grouped readout.
#[inline]
pub fn unit_class(unit: usize, num_classes: usize) -> usize {
    unit % num_classes
}

/// Ground-truth low-rank map `w_star = Σ σ_i u_i v_iᵀ` with `σ_i = i^-(α+½)`.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub w_star: Matrix,
    pub intrinsic_rank: usize,
    pub smooth_alpha: f64,
    /// Descending.
    pub singular_values: Vec<f64>,
    /// `d × r⋆`, orthonormal columns.
    pub u: Matrix,
    /// `k × r⋆`, orthonormal columns.
    pub v: Matrix,
}

impl Teacher {
    pub fn dims(&self) -> (usize, usize) {
        self.w_star.shape()
    }

    /// Energy outside the best rank-`r` approximation: `Σ_{i>r} σ_i²`.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.singular_values.iter().skip(r).map(|s| s * s).sum()
    }

    /// Frobenius error of the truncated-SVD rank-`r` approximation,
    /// computed by materializing it.
    pub fn rank_r_error(&self, r: usize) -> f64 {
        let (d, k) = self.dims();
        let keep = r.min(self.intrinsic_rank);
        let approx = Matrix::from_fn(d, k, |i, j| {
            (0..keep)
                .map(|p| self.singular_values[p] * self.u[(i, p)] * self.v[(j, p)])
                .sum()
        });
        self.w_star.sub(&approx).expect("same shape").frobenius_norm()
    }
}

/// Orthonormal columns by modified Gram-Schmidt on gaussian draws.
fn random_orthonormal(rng: &mut Rng, dim: usize, count: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(count);
    while cols.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        for _ in 0..2 {
            for u in &cols {
                let c = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, ui)| *x -= c * ui);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_fn(dim, count, |i, j| cols[j][i])
}

pub fn make_teacher(d: usize, k: usize, rank: usize, alpha: f64, seed: u64) -> Result<Teacher> {
    ensure!(d > 0 && k > 0, Argument, "teacher shape {d}x{k} is empty");
    ensure!(
        rank >= 1 && rank <= d.min(k),
        Argument,
        "teacher rank {rank} outside [1, {}]",
        d.min(k)
    );
    ensure!(
        alpha > 0.0 && alpha.is_finite(),
        Argument,
        "smoothness exponent must be positive, got {alpha}"
    );
    let mut rng = Rng::new(seed);
    let u = random_orthonormal(&mut rng, d, rank);
    let v = random_orthonormal(&mut rng, k, rank);
    let singular_values: Vec<f64> = (1..=rank).map(|i| (i as f64).powf(-(alpha + 0.5))).collect();
    let w_star = Matrix::from_fn(d, k, |i, j| {
        (0..rank).map(|p| singular_values[p] * u[(i, p)] * v[(j, p)]).sum()
    });
    Ok(Teacher {
        w_star,
        intrinsic_rank: rank,
        smooth_alpha: alpha,
        singular_values,
        u,
        v,
    })
}

/// Inputs with observed labels, the clean labels behind them, and which
/// ones were corrupted. `clean` and `noise_mask` are evaluation-only.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyDataset {
    pub x: Matrix,
    pub observed: Vec<usize>,
    pub clean: Vec<usize>,
    pub noise_mask: Vec<bool>,
    /// Regression targets (`n × d`); absent for classification.
    pub targets: Option<Matrix>,
    pub task: Task,
    pub noise_rate: f64,
}

impl NoisyDataset {
    pub fn classification(x: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        ensure!(
            labels.len() == x.rows(),
            Consistency,
            "{} labels for {} inputs",
            labels.len(),
            x.rows()
        );
        ensure!(num_classes >= 1, Argument, "need at least one class");
        ensure!(
            labels.iter().all(|&l| l < num_classes),
            Argument,
            "label outside [0, {num_classes})"
        );
        let n = labels.len();
        Ok(Self {
            x,
            observed: labels.clone(),
            clean: labels,
            noise_mask: vec![false; n],
            targets: None,
            task: Task::Classification { num_classes },
            noise_rate: 0.0,
        })
    }

    pub fn regression(x: Matrix, targets: Matrix) -> Result<Self> {
        ensure!(
            targets.rows() == x.rows(),
            Consistency,
            "{} targets for {} inputs",
            targets.rows(),
            x.rows()
        );
        let n = x.rows();
        Ok(Self {
            x,
            observed: vec![0; n],
            clean: vec![0; n],
            noise_mask: vec![false; n],
            targets: Some(targets),
            task: Task::Regression,
            noise_rate: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.task.num_classes()
    }

    pub fn num_noisy(&self) -> usize {
        self.noise_mask.iter().filter(|&&m| m).count()
    }

    /// Samples `indices`, in order. The stored noise rate is recomputed from
    /// the subset's mask.
    pub fn subset(&self, indices: &[usize]) -> Result<NoisyDataset> {
        let x = self.x.select_rows(indices)?;
        let pick = |v: &[usize]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let noise_mask: Vec<bool> = indices.iter().map(|&i| self.noise_mask[i]).collect();
        let targets = match &self.targets {
            Some(t) => Some(t.select_rows(indices)?),
            None => None,
        };
        let noisy = noise_mask.iter().filter(|&&m| m).count();
        Ok(NoisyDataset {
            x,
            observed: pick(&self.observed),
            clean: pick(&self.clean),
            noise_rate: noisy as f64 / indices.len() as f64,
            noise_mask,
            targets,
            task: self.task,
        })
    }
}

/// Draws `n` inputs `x ~ N(0, I_k)/√k` and labels them with the teacher.
pub fn sample_dataset(teacher: &Teacher, n: usize, seed: u64, task: Task) -> Result<NoisyDataset> {
    ensure!(n >= 1, Argument, "need at least one sample");
    let (d, k) = teacher.dims();
    let mut rng = Rng::new(seed);
    let x = rng.gaussian(n, k).scale(1.0 / (k as f64).sqrt());
    match task {
        Task::Classification { num_classes } => {
            ensure!(
                num_classes >= 2 && num_classes <= d,
                Argument,
                "{num_classes} classes for a teacher with {d} outputs"
            );
            let labels = (0..n)
                .map(|i| {
                    let out = teacher.w_star.matvec_unchecked(x.row(i));
                    unit_class(argmax(&out), num_classes)
                })
                .collect();
            NoisyDataset::classification(x, labels, num_classes)
        }
        Task::Regression => {
            let targets = x.matmul(&teacher.w_star.transpose())?;
            NoisyDataset::regression(x, targets)
        }
    }
}

/// Random labels for the memorization experiments: inputs as in
/// [`sample_dataset`], labels uniform over classes, no teacher.
pub fn random_label_dataset(n: usize, k: usize, num_classes: usize, seed: u64) -> Result<NoisyDataset> {
    ensure!(n >= 1 && k >= 1, Argument, "empty random-label dataset");
    ensure!(num_classes >= 2, Argument, "need at least 2 classes");
    let mut rng = Rng::new(seed);
    let x = rng.gaussian(n, k).scale(1.0 / (k as f64).sqrt());
    let labels = (0..n).map(|_| rng.below(num_classes)).collect();
    NoisyDataset::classification(x, labels, num_classes)
}

/// Flips exactly `floor(η·n)` labels, chosen uniformly without replacement,
/// each to a uniformly drawn different class. Starts from the clean labels.
pub fn inject_symmetric_noise(ds: &NoisyDataset, eta: f64, seed: u64) -> Result<NoisyDataset> {
    ensure!(
        (0.0..1.0).contains(&eta),
        Argument,
        "noise rate {eta} outside [0, 1)"
    );
    let n = ds.len();
    let flips = (eta * n as f64).floor() as usize;
    let mut out = ds.clone();
    out.observed = ds.clean.clone();
    out.noise_mask = vec![false; n];
    out.noise_rate = eta;
    if flips == 0 {
        return Ok(out);
    }
    let classes = match ds.task {
        Task::Classification { num_classes } if num_classes >= 2 => num_classes,
        Task::Classification { num_classes } => {
            return Err(Error::Argument(format!(
                "cannot flip labels with {num_classes} class(es)"
            )))
        }
        Task::Regression => {
            return Err(Error::Argument("label noise needs a classification task".into()))
        }
    };
    let mut rng = Rng::new(seed);
    let mut picked = rng.sample_indices(n, flips);
    picked.sort_unstable();
    for i in picked {
        let orig = ds.clean[i];
        // uniform over the other C-1 classes
        let mut new = rng.below(classes - 1);
        if new >= orig {
            new += 1;
        }
        out.observed[i] = new;
        out.noise_mask[i] = true;
    }
    Ok(out)
}

/// Deterministic shuffled split into (train, eval).
pub fn train_eval_split(
    ds: &NoisyDataset,
    eval_fraction: f64,
    seed: u64,
) -> Result<(NoisyDataset, NoisyDataset)> {
    ensure!(
        eval_fraction > 0.0 && eval_fraction < 1.0,
        Argument,
        "eval fraction {eval_fraction} outside (0, 1)"
    );
    let n = ds.len();
    let n_eval = (eval_fraction * n as f64).round() as usize;
    ensure!(
        n_eval >= 1 && n_eval < n,
        Argument,
        "eval fraction {eval_fraction} of {n} samples leaves an empty side"
    );
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let (eval_idx, train_idx) = order.split_at(n_eval);
    Ok((ds.subset(train_idx)?, ds.subset(eval_idx)?))
}
