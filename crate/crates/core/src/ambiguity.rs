//! Model ambiguity between principle tasks.
//!
//! Each task's population is the inclusive singleton class `{t}`. Pairwise KL
//! divergences between those Gaussians form a nonsymmetric matrix (row = true
//! population, column = the population used for inference); adding its
//! transpose gives a symmetric matrix whose spectrum summarises the overall
//! ambiguity. Pinsker's inequality turns each divergence into an upper bound
//! on total variation distance.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{fit_with, GaussianError, GaussianParams};
use crate::taskmodel::{FitConfig, LabeledSample, MultiTaskModel, TaskSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmbiguityError {
    #[error("gaussians have dimensions {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("KL divergence must be nonnegative, got {0}")]
    NegativeDivergence(f64),
    #[error("layout has no class for task {0}; pass training data to fit its population")]
    MissingTaskClass(String),
    #[error("no samples cover task {0}")]
    NoTaskSamples(String),
    #[error("population of task {task}: {source}")]
    Population {
        task: String,
        #[source]
        source: GaussianError,
    },
}

/// `KL(P ‖ Q)` between two multivariate normals, clamped at zero.
///
/// Evaluated through the Cholesky factors: with `A = L_Q⁻¹ L_P` and
/// `b = L_Q⁻¹(μ_Q − μ_P)`, `KL = ½(‖A‖²_F + ‖b‖² − d + ln|Σ_Q| − ln|Σ_P|)`.
pub fn kl_gauss(p: &GaussianParams, q: &GaussianParams) -> Result<f64, AmbiguityError> {
    if p.dim() != q.dim() {
        return Err(AmbiguityError::DimensionMismatch(p.dim(), q.dim()));
    }
    let lq = q.factor();
    let a = lq
        .solve_lower_triangular(&p.factor())
        .expect("Cholesky factor has a positive diagonal");
    let b = lq
        .solve_lower_triangular(&(q.mean() - p.mean()))
        .expect("Cholesky factor has a positive diagonal");
    let d = p.dim() as f64;
    let kl = 0.5 * (a.norm_squared() + b.norm_squared() - d + q.log_det() - p.log_det());
    Ok(kl.max(0.0))
}

/// `δ = √(KL / 2)`.
pub fn pinsker_bound(kl: f64) -> Result<f64, AmbiguityError> {
    if kl < 0.0 || kl.is_nan() {
        return Err(AmbiguityError::NegativeDivergence(kl));
    }
    Ok((kl / 2.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub tasks: Vec<String>,
    /// `nonsymmetric[i][j] = KL(task_i ‖ task_j)`.
    pub nonsymmetric: Vec<Vec<f64>>,
    pub symmetric: Vec<Vec<f64>>,
    pub pinsker: Vec<Vec<f64>>,
    /// Eigenvalues of `symmetric`, descending.
    pub eigenvalues: Vec<f64>,
    /// Tasks whose population was fitted from data because the layout lacks
    /// the singleton class.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub substituted: Vec<String>,
}

impl DivergenceReport {
    /// Builds every derived matrix from the nonsymmetric one.
    pub fn from_nonsymmetric(tasks: Vec<String>, nonsymmetric: Vec<Vec<f64>>) -> Result<Self, AmbiguityError> {
        let m = tasks.len();
        let mut symmetric = vec![vec![0.0; m]; m];
        let mut pinsker = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                symmetric[i][j] = nonsymmetric[i][j] + nonsymmetric[j][i];
                pinsker[i][j] = pinsker_bound(nonsymmetric[i][j])?;
            }
        }
        let eigenvalues = spectrum(&symmetric);
        Ok(Self {
            tasks,
            nonsymmetric,
            symmetric,
            pinsker,
            eigenvalues,
            substituted: Vec::new(),
        })
    }

    /// Singular values of the nonsymmetric matrix, descending.
    pub fn nonsymmetric_singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = to_matrix(&self.nonsymmetric)
            .singular_values()
            .iter()
            .copied()
            .collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    pub fn index_of(&self, task: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == task)
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let m = rows.len();
    DMatrix::from_fn(m, m, |i, j| rows[i][j])
}

fn spectrum(symmetric: &[Vec<f64>]) -> Vec<f64> {
    if symmetric.is_empty() {
        return Vec::new();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(to_matrix(symmetric))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Eigenvalues of the report's symmetric matrix, descending.
pub fn divergence_spectrum(report: &DivergenceReport) -> Vec<f64> {
    spectrum(&report.symmetric)
}

fn report_for(tasks: Vec<String>, populations: &[GaussianParams]) -> Result<DivergenceReport, AmbiguityError> {
    let m = populations.len();
    let mut a = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                a[i][j] = kl_gauss(&populations[i], &populations[j])?;
            }
        }
    }
    DivergenceReport::from_nonsymmetric(tasks, a)
}

/// Divergences between the model's singleton classes. Every principle task
/// needs its own class.
pub fn divergence_matrices(model: &MultiTaskModel) -> Result<DivergenceReport, AmbiguityError> {
    let layout = model.layout();
    let populations = (0..layout.num_tasks())
        .map(|t| {
            model
                .class(TaskSet::single(t))
                .map(|c| c.gaussian.clone())
                .ok_or_else(|| AmbiguityError::MissingTaskClass(layout.tasks()[t].clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    report_for(layout.tasks().to_vec(), &populations)
}

/// Like [`divergence_matrices`], but a task without a singleton class gets a
/// population fitted on every sample whose zone contains it. Such tasks are
/// listed in [`DivergenceReport::substituted`].
pub fn divergence_matrices_with_data(
    model: &MultiTaskModel,
    samples: &[LabeledSample],
    config: &FitConfig,
) -> Result<DivergenceReport, AmbiguityError> {
    let layout = model.layout();
    let mut substituted = Vec::new();
    let mut populations = Vec::with_capacity(layout.num_tasks());
    for (t, name) in layout.tasks().iter().enumerate() {
        let single = TaskSet::single(t);
        if let Some(c) = model.class(single) {
            populations.push(c.gaussian.clone());
            continue;
        }
        let xs: Vec<_> = samples
            .iter()
            .filter(|s| s.zone.is_superset_of(single))
            .map(|s| s.x.clone())
            .collect();
        if xs.is_empty() {
            return Err(AmbiguityError::NoTaskSamples(name.clone()));
        }
        let g = fit_with(&xs, &config.gaussian).map_err(|source| AmbiguityError::Population {
            task: name.clone(),
            source,
        })?;
        populations.push(g);
        substituted.push(name.clone());
    }
    let mut report = report_for(layout.tasks().to_vec(), &populations)?;
    report.substituted = substituted;
    Ok(report)
}
