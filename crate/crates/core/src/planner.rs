//! Probability-matching grasp planner.
//!
//! Given a target vector `v` over the model's zones, find a pose `x` whose
//! posterior `P(x)` is closest to `v` in least squares,
//!
//! ```text
//! minimise  ½ Σ_k (v_k − P_k(x))²
//! subject to  L ≤ x ≤ U,  ‖x_g‖ = 1 for every unit-norm group g.
//! ```
//!
//! The problem is non-convex, so the search is local: it starts from the
//! demonstrated pose that best matches `v` within the most likely class and
//! never returns anything worse than that start.
//!
//! Two strategies are provided so results can be cross-checked:
//! [`Solver::ProjectedGradient`] (scaled steepest descent with an Armijo
//! search and a retraction onto the constraint set) and
//! [`Solver::AugmentedLagrangian`] (box-constrained BFGS on an augmented
//! Lagrangian of the unit-norm equalities). Both use the same diagonal
//! metric, the average class variance per feature, so that metres, unit
//! vectors and newtons are stepped on comparable scales.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::FeatureVector;
use crate::intent::TargetProbabilityVector;
use crate::taskmodel::{FeatureBounds, LabeledSample, ModelError, MultiTaskModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("target vector has {actual} entries, model has {expected} classes")]
    TargetLength { expected: usize, actual: usize },
    #[error("bounds have {actual} features, model has {expected}")]
    BoundsDimension { expected: usize, actual: usize },
    #[error("invalid unit-norm group: {0}")]
    InvalidGroup(String),
    #[error("infeasible constraints: {0}")]
    Infeasible(String),
    #[error("no candidate poses to start from")]
    NoCandidates,
    #[error("invalid planner configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    ProjectedGradient,
    AugmentedLagrangian,
}

impl Solver {
    pub fn id(self) -> &'static str {
        match self {
            Solver::ProjectedGradient => "projected_gradient",
            Solver::AugmentedLagrangian => "augmented_lagrangian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub solver: Solver,
    /// Stationarity tolerance on the metric-scaled projected gradient.
    pub tol_g: f64,
    /// Relative objective-change tolerance: stop when `|Δf| ≤ tol_f·|f|`.
    pub tol_f: f64,
    pub max_iter: usize,
    /// Extra seeded starts; the run with the lowest residual is kept. Each
    /// start gets its own `max_iter` budget.
    pub restarts: usize,
    pub seed: u64,
    #[serde(skip)]
    pub time_limit: Option<Duration>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            solver: Solver::ProjectedGradient,
            tol_g: 1e-8,
            tol_f: 1e-12,
            max_iter: 10_000,
            restarts: 0,
            seed: 0,
            time_limit: None,
        }
    }
}

impl PlanConfig {
    pub fn with_solver(solver: Solver) -> Self {
        Self {
            solver,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), PlanError> {
        if !(self.tol_g >= 0.0 && self.tol_f >= 0.0) {
            return Err(PlanError::InvalidConfig("tolerances must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Everything the planner needs besides the configuration.
#[derive(Debug, Clone)]
pub struct PlanningProblem<'a> {
    pub model: &'a MultiTaskModel,
    pub target: Vec<f64>,
    pub bounds: FeatureBounds,
    pub unit_norm_groups: Vec<Vec<usize>>,
    /// Demonstrated poses to start from; class means when empty.
    pub candidates: Vec<LabeledSample>,
    /// Overrides initial pose selection.
    pub initial: Option<FeatureVector>,
}

impl<'a> PlanningProblem<'a> {
    /// Uses the model's recorded bounds (or a ±3σ envelope around the class
    /// means) and the schema's unit-norm groups.
    pub fn new(model: &'a MultiTaskModel, target: &TargetProbabilityVector) -> Result<Self, PlanError> {
        if target.len() != model.len() {
            return Err(PlanError::TargetLength {
                expected: model.len(),
                actual: target.len(),
            });
        }
        let bounds = model.bounds().cloned().unwrap_or_else(|| envelope_bounds(model, 3.0));
        Ok(Self {
            model,
            target: target.v.clone(),
            bounds,
            unit_norm_groups: model.schema().unit_norm_groups().to_vec(),
            candidates: Vec::new(),
            initial: None,
        })
    }

    pub fn with_bounds(mut self, bounds: FeatureBounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn with_candidates(mut self, candidates: Vec<LabeledSample>) -> Self {
        self.candidates = candidates;
        self
    }

    pub fn with_initial(mut self, x: FeatureVector) -> Self {
        self.initial = Some(x);
        self
    }

    fn validate(&self) -> Result<(), PlanError> {
        let d = self.model.dim();
        if self.target.len() != self.model.len() {
            return Err(PlanError::TargetLength {
                expected: self.model.len(),
                actual: self.target.len(),
            });
        }
        if self.bounds.len() != d {
            return Err(PlanError::BoundsDimension {
                expected: d,
                actual: self.bounds.len(),
            });
        }
        for (i, (l, u)) in self.bounds.lower.iter().zip(&self.bounds.upper).enumerate() {
            if !(l.is_finite() && u.is_finite()) || l > u {
                return Err(PlanError::Infeasible(format!("feature {i} has bounds [{l}, {u}]")));
            }
        }
        let mut seen = vec![false; d];
        for g in &self.unit_norm_groups {
            if g.is_empty() {
                return Err(PlanError::InvalidGroup("empty group".into()));
            }
            for &i in g {
                if i >= d || seen[i] {
                    return Err(PlanError::InvalidGroup(format!("index {i} out of range or shared")));
                }
                seen[i] = true;
            }
            let near: f64 = g
                .iter()
                .map(|&i| clip(0.0, self.bounds.lower[i], self.bounds.upper[i]).powi(2))
                .sum();
            let far: f64 = g
                .iter()
                .map(|&i| self.bounds.lower[i].abs().max(self.bounds.upper[i].abs()).powi(2))
                .sum();
            if near > 1.0 || far < 1.0 {
                return Err(PlanError::Infeasible(format!(
                    "box around group {g:?} does not meet the unit sphere"
                )));
            }
        }
        if let Some(x) = &self.initial {
            self.model.check_features(x)?;
        }
        Ok(())
    }
}

/// Per-feature `[min_k(μ_k − sσ_k), max_k(μ_k + sσ_k)]` over the classes.
pub fn envelope_bounds(model: &MultiTaskModel, s: f64) -> FeatureBounds {
    let d = model.dim();
    let mut lower = vec![f64::INFINITY; d];
    let mut upper = vec![f64::NEG_INFINITY; d];
    for c in model.classes() {
        let mu = c.gaussian.mean();
        let cov = c.gaussian.covariance();
        for i in 0..d {
            let sd = cov[(i, i)].sqrt();
            lower[i] = lower[i].min(mu[i] - s * sd);
            upper[i] = upper[i].max(mu[i] + s * sd);
        }
    }
    FeatureBounds { lower, upper }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub x: Vec<f64>,
    pub posterior: Vec<f64>,
    pub residual: f64,
    pub initial_residual: f64,
    pub initial_pose: Vec<f64>,
    pub iterations: usize,
    pub solver: Solver,
    /// Objective value at the start and after every iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl PlanResult {
    /// Largest violation of the box and unit-norm constraints.
    pub fn constraint_violation(&self, bounds: &FeatureBounds, groups: &[Vec<usize>]) -> f64 {
        constraint_violation(&DVector::from_column_slice(&self.x), bounds, groups)
    }
}

pub fn constraint_violation(x: &FeatureVector, bounds: &FeatureBounds, groups: &[Vec<usize>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        worst = worst.max(bounds.lower[i] - x[i]).max(x[i] - bounds.upper[i]);
    }
    for g in groups {
        let n: f64 = g.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt();
        worst = worst.max((n - 1.0).abs());
    }
    worst
}

fn check_target(model: &MultiTaskModel, v: &[f64]) -> Result<(), PlanError> {
    if v.len() != model.len() {
        return Err(PlanError::TargetLength {
            expected: model.len(),
            actual: v.len(),
        });
    }
    Ok(())
}

/// `½ Σ_k (v_k − P_k(x))²`.
pub fn objective(model: &MultiTaskModel, v: &[f64], x: &FeatureVector) -> Result<f64, PlanError> {
    check_target(model, v)?;
    let p = model.posterior_vector(x)?;
    Ok(half_sq_dist(v, &p))
}

fn half_sq_dist(v: &[f64], p: &DVector<f64>) -> f64 {
    0.5 * v.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

struct Derivatives {
    p: DVector<f64>,
    /// Gradients of the class log-likelihoods, one per class.
    g: Vec<DVector<f64>>,
    /// `Σ_j P_j g_j`.
    gbar: DVector<f64>,
}

fn derivatives(model: &MultiTaskModel, x: &FeatureVector) -> Result<Derivatives, PlanError> {
    let p = model.posterior_vector(x)?;
    let g: Vec<DVector<f64>> = model
        .classes()
        .iter()
        .map(|c| {
            c.gaussian.log_pdf_grad(x).map_err(|e| {
                PlanError::Model(ModelError::ClassFit {
                    class: model.layout().label(c.zone),
                    source: e,
                })
            })
        })
        .collect::<Result<_, _>>()?;
    let mut gbar = DVector::zeros(x.len());
    for (pk, gk) in p.iter().zip(&g) {
        gbar.axpy(*pk, gk, 1.0);
    }
    Ok(Derivatives { p, g, gbar })
}

/// `∂P_k/∂x_i` as a `K × d` matrix: row `k` is `P_k (g_k − Σ_j P_j g_j)ᵀ`
/// with `g_k = −Σ_k⁻¹(x − μ_k)`.
pub fn posterior_jacobian(model: &MultiTaskModel, x: &FeatureVector) -> Result<DMatrix<f64>, PlanError> {
    let dv = derivatives(model, x)?;
    let mut j = DMatrix::zeros(model.len(), x.len());
    for k in 0..model.len() {
        let row = (&dv.g[k] - &dv.gbar) * dv.p[k];
        j.set_row(k, &row.transpose());
    }
    Ok(j)
}

/// Gradient of [`objective`]: `−Jᵀ(v − P)`.
pub fn objective_gradient(model: &MultiTaskModel, v: &[f64], x: &FeatureVector) -> Result<FeatureVector, PlanError> {
    check_target(model, v)?;
    Ok(value_and_gradient(model, v, x)?.1)
}

fn value_and_gradient(model: &MultiTaskModel, v: &[f64], x: &FeatureVector) -> Result<(f64, FeatureVector), PlanError> {
    let dv = derivatives(model, x)?;
    let mut grad = DVector::zeros(x.len());
    for (k, &vk) in v.iter().enumerate().take(model.len()) {
        let w = (dv.p[k] - vk) * dv.p[k];
        if w != 0.0 {
            grad.axpy(w, &dv.g[k], 1.0);
            grad.axpy(-w, &dv.gbar, 1.0);
        }
    }
    Ok((half_sq_dist(v, &dv.p), grad))
}

/// Picks the starting pose: among candidates whose zone covers the most likely
/// target class, the one with the smallest objective (lowest index on ties).
/// Falls back to all candidates when none cover that class.
pub fn select_initial_pose(
    model: &MultiTaskModel,
    v: &[f64],
    candidates: &[LabeledSample],
) -> Result<FeatureVector, PlanError> {
    Ok(candidates[select_initial_index(model, v, candidates)?].x.clone())
}

pub fn select_initial_index(
    model: &MultiTaskModel,
    v: &[f64],
    candidates: &[LabeledSample],
) -> Result<usize, PlanError> {
    check_target(model, v)?;
    if candidates.is_empty() {
        return Err(PlanError::NoCandidates);
    }
    let mut top = 0;
    for (k, &p) in v.iter().enumerate() {
        if p > v[top] {
            top = k;
        }
    }
    let class = model.layout().zones()[top];
    let best_among = |pred: &dyn Fn(&LabeledSample) -> bool| -> Result<Option<usize>, PlanError> {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in candidates.iter().enumerate() {
            if !pred(c) {
                continue;
            }
            let f = objective(model, v, &c.x)?;
            if best.is_none_or(|(_, bf)| f < bf) {
                best = Some((i, f));
            }
        }
        Ok(best.map(|(i, _)| i))
    };
    if let Some(i) = best_among(&|c| c.zone.is_superset_of(class))? {
        return Ok(i);
    }
    Ok(best_among(&|_| true)?.expect("nonempty"))
}

fn clip(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// Constraint set and metric shared by both strategies.
struct Geometry<'p> {
    lower: &'p [f64],
    upper: &'p [f64],
    groups: &'p [Vec<usize>],
    /// Diagonal metric `D`.
    metric: DVector<f64>,
}

impl<'p> Geometry<'p> {
    fn new(problem: &'p PlanningProblem<'_>) -> Self {
        let model = problem.model;
        let d = model.dim();
        let k = model.len() as f64;
        let mut metric = DVector::from_fn(d, |i, _| {
            model
                .classes()
                .iter()
                .map(|c| c.gaussian.covariance()[(i, i)])
                .sum::<f64>()
                / k
        });
        for g in &problem.unit_norm_groups {
            let mean = g.iter().map(|&i| metric[i]).sum::<f64>() / g.len() as f64;
            for &i in g {
                metric[i] = mean;
            }
        }
        for m in metric.iter_mut() {
            if !(*m > 0.0 && m.is_finite()) {
                *m = 1.0;
            }
        }
        Self {
            lower: &problem.bounds.lower,
            upper: &problem.bounds.upper,
            groups: &problem.unit_norm_groups,
            metric,
        }
    }

    fn clip_box(&self, x: &mut FeatureVector) {
        for i in 0..x.len() {
            x[i] = clip(x[i], self.lower[i], self.upper[i]);
        }
    }

    /// Clips to the box and moves every unit-norm group onto the sphere
    /// along the ray through its (clipped) direction.
    fn project(&self, x: &FeatureVector) -> FeatureVector {
        let mut y = x.clone();
        self.clip_box(&mut y);
        for g in self.groups {
            let dir: Vec<f64> = g.iter().map(|&i| x[i]).collect();
            let placed = self
                .onto_sphere(g, &dir)
                .or_else(|| {
                    let far: Vec<f64> = g
                        .iter()
                        .map(|&i| {
                            if self.upper[i].abs() >= self.lower[i].abs() {
                                self.upper[i]
                            } else {
                                self.lower[i]
                            }
                        })
                        .collect();
                    self.onto_sphere(g, &far)
                })
                .expect("feasibility checked up front");
            for (&i, v) in g.iter().zip(placed) {
                y[i] = v;
            }
        }
        y
    }

    /// Finds `t ≥ 0` with `‖clip(t·dir)‖ = 1` by bisection.
    fn onto_sphere(&self, g: &[usize], dir: &[f64]) -> Option<Vec<f64>> {
        let at = |t: f64| -> Vec<f64> {
            g.iter()
                .zip(dir)
                .map(|(&i, &v)| clip(t * v, self.lower[i], self.upper[i]))
                .collect()
        };
        let norm = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let lo_point = at(0.0);
        if norm(&lo_point) > 1.0 {
            return None;
        }
        let dn = norm(dir);
        if dn == 0.0 || !dn.is_finite() {
            return None;
        }
        // Past this scale every nonzero coordinate sits on its bound.
        let reach = g
            .iter()
            .map(|&i| self.lower[i].abs().max(self.upper[i].abs()))
            .fold(0.0, f64::max);
        let min_abs = dir
            .iter()
            .filter(|v| **v != 0.0)
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min);
        let mut hi = (reach / min_abs).max(1.0 / dn) * 2.0 + 1.0;
        if norm(&at(hi)) < 1.0 {
            return None;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if norm(&at(mid)) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut p = at(hi);
        // Remove the last rounding error when the group is interior.
        let n = norm(&p);
        if g.iter().zip(&p).all(|(&i, v)| *v > self.lower[i] && *v < self.upper[i]) {
            let scaled: Vec<f64> = p.iter().map(|v| v / n).collect();
            if g.iter()
                .zip(&scaled)
                .all(|(&i, v)| *v >= self.lower[i] && *v <= self.upper[i])
            {
                p = scaled;
            }
        }
        Some(p)
    }

    /// Removes the radial component of `g` within each unit-norm group.
    fn tangent(&self, x: &FeatureVector, g: &FeatureVector) -> FeatureVector {
        let mut t = g.clone();
        for grp in self.groups {
            let dot: f64 = grp.iter().map(|&i| x[i] * g[i]).sum();
            let nn: f64 = grp.iter().map(|&i| x[i] * x[i]).sum();
            if nn > 0.0 {
                for &i in grp {
                    t[i] -= dot / nn * x[i];
                }
            }
        }
        t
    }

    /// Solves `(Q B Q + I − Q) d = −Q g` with `B = JᵀJ + μD⁻¹`, where `Q`
    /// projects onto coordinates not held at a bound and tangent to each
    /// unit-norm sphere. `None` when the system cannot be factored.
    fn gauss_newton_direction(
        &self,
        x: &FeatureVector,
        g: &FeatureVector,
        jac: &DMatrix<f64>,
        mu: f64,
    ) -> Option<FeatureVector> {
        let n = x.len();
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= self.lower[i] && g[i] > 0.0) || (x[i] >= self.upper[i] && g[i] < 0.0)))
            .collect();
        let mut q = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| if free[i] { 1.0 } else { 0.0 }));
        for grp in self.groups {
            let a = DVector::from_fn(n, |i, _| if free[i] && grp.contains(&i) { x[i] } else { 0.0 });
            let aa = a.dot(&a);
            if aa > 0.0 {
                q -= &a * a.transpose() / aa;
            }
        }
        let mut b = jac.transpose() * jac;
        for i in 0..n {
            b[(i, i)] += mu / self.metric[i];
        }
        let m = &q * b * &q + DMatrix::identity(n, n) - &q;
        let rhs = -(&q * g);
        let d = m.cholesky()?.solve(&rhs);
        (d.iter().all(|v| v.is_finite()) && d.dot(g) < 0.0).then_some(d)
    }

    /// `‖D^{-1/2}(x − Π(x − D g))‖`, zero exactly at constrained stationary points.
    fn stationarity(&self, x: &FeatureVector, g: &FeatureVector, with_groups: bool) -> f64 {
        let step = x - self.metric.component_mul(g);
        let y = if with_groups {
            self.project(&step)
        } else {
            let mut s = step;
            self.clip_box(&mut s);
            s
        };
        (x - y).component_div(&self.metric.map(f64::sqrt)).norm()
    }
}

struct Budget {
    max_iter: usize,
    used: usize,
    deadline: Option<Instant>,
}

impl Budget {
    fn exhausted(&self) -> bool {
        self.used >= self.max_iter || self.deadline.is_some_and(|d| Instant::now() >= d)
    }
}

struct RunOutcome {
    x: FeatureVector,
    f: f64,
    trace: Vec<f64>,
    converged: bool,
}

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MIN_STEP: f64 = 1e-16;

fn relative_stall(prev: f64, next: f64, tol_f: f64) -> bool {
    (prev - next).abs() <= tol_f * prev.abs()
}

/// Scaled projected gradient.
///
/// The step is taken in the subspace of free coordinates tangent to every
/// unit-norm sphere, scaled by the damped Gauss-Newton matrix
/// `JᵀJ + μD⁻¹`, then mapped back onto the feasible set. Each iteration starts
/// from step 1 and backtracks until the Armijo condition holds and `f` does not
/// increase. `μ` shrinks after full steps and grows after backtracking; if the
/// scaled direction fails, the plain `D`-scaled gradient is tried before
/// giving up.
fn projected_gradient(
    model: &MultiTaskModel,
    v: &[f64],
    geo: &Geometry<'_>,
    x0: FeatureVector,
    config: &PlanConfig,
    budget: &mut Budget,
) -> Result<RunOutcome, PlanError> {
    let mut x = x0;
    let (mut f, mut grad) = value_and_gradient(model, v, &x)?;
    let mut trace = vec![f];
    let mut mu = LM_MU0;
    loop {
        let gt = geo.tangent(&x, &grad);
        if geo.stationarity(&x, &gt, true) <= config.tol_g {
            return Ok(RunOutcome {
                x,
                f,
                trace,
                converged: true,
            });
        }
        if budget.exhausted() {
            return Ok(RunOutcome {
                x,
                f,
                trace,
                converged: false,
            });
        }
        budget.used += 1;
        let jac = posterior_jacobian(model, &x)?;
        let scaled = geo.gauss_newton_direction(&x, &grad, &jac, mu);
        let plain = -geo.metric.component_mul(&gt);
        let mut accepted = None;
        for (attempt, dir) in scaled.iter().chain(std::iter::once(&plain)).enumerate() {
            let mut alpha = 1.0;
            while alpha >= MIN_STEP {
                let y = geo.project(&(&x + dir * alpha));
                let fy = objective(model, v, &y)?;
                if fy <= f + ARMIJO_C * grad.dot(&(&y - &x)) && fy <= f {
                    accepted = Some((y, fy, alpha, attempt));
                    break;
                }
                alpha *= SHRINK;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((y, fy, alpha, attempt)) = accepted else {
            // No representable step improves f: numerical floor.
            return Ok(RunOutcome {
                x,
                f,
                trace,
                converged: true,
            });
        };
        mu = if attempt == 0 && alpha == 1.0 {
            (mu * LM_SHRINK).max(LM_MU_MIN)
        } else {
            (mu * LM_GROW).min(LM_MU_MAX)
        };
        let stalled = relative_stall(f, fy, config.tol_f);
        grad = value_and_gradient(model, v, &y)?.1;
        x = y;
        f = fy;
        trace.push(f);
        if stalled {
            return Ok(RunOutcome {
                x,
                f,
                trace,
                converged: true,
            });
        }
    }
}

const LM_MU0: f64 = 1e-2;
const LM_MU_MIN: f64 = 1e-12;
const LM_MU_MAX: f64 = 1e8;
const LM_SHRINK: f64 = 0.25;
const LM_GROW: f64 = 4.0;

/// Augmented Lagrangian of the unit-norm equalities `c_g = ‖x_g‖² − 1`.
struct Lagrangian<'m> {
    model: &'m MultiTaskModel,
    v: &'m [f64],
    groups: &'m [Vec<usize>],
    lambda: Vec<f64>,
    rho: f64,
}

impl Lagrangian<'_> {
    fn constraints(&self, x: &FeatureVector) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| g.iter().map(|&i| x[i] * x[i]).sum::<f64>() - 1.0)
            .collect()
    }

    fn value_and_gradient(&self, x: &FeatureVector) -> Result<(f64, f64, FeatureVector), PlanError> {
        let (f, mut grad) = value_and_gradient(self.model, self.v, x)?;
        let mut l = f;
        for ((g, c), lam) in self.groups.iter().zip(self.constraints(x)).zip(&self.lambda) {
            l += lam * c + 0.5 * self.rho * c * c;
            let w = 2.0 * (lam + self.rho * c);
            for &i in g {
                grad[i] += w * x[i];
            }
        }
        Ok((l, f, grad))
    }

    fn value(&self, x: &FeatureVector) -> Result<(f64, f64), PlanError> {
        let f = objective(self.model, self.v, x)?;
        let l = self
            .constraints(x)
            .iter()
            .zip(&self.lambda)
            .fold(f, |acc, (c, lam)| acc + lam * c + 0.5 * self.rho * c * c);
        Ok((l, f))
    }
}

const AL_MAX_OUTER: usize = 60;
const AL_FEASIBILITY: f64 = 1e-10;
const AL_RHO0: f64 = 10.0;
const AL_RHO_MAX: f64 = 1e12;

fn augmented_lagrangian(
    model: &MultiTaskModel,
    v: &[f64],
    geo: &Geometry<'_>,
    x0: FeatureVector,
    config: &PlanConfig,
    budget: &mut Budget,
) -> Result<RunOutcome, PlanError> {
    let mut lag = Lagrangian {
        model,
        v,
        groups: geo.groups,
        lambda: vec![0.0; geo.groups.len()],
        rho: AL_RHO0,
    };
    let mut x = x0;
    let mut trace = vec![objective(model, v, &x)?];
    let mut prev_violation = f64::INFINITY;
    let mut converged = false;
    for _ in 0..AL_MAX_OUTER {
        let inner_ok = box_bfgs(&lag, geo, &mut x, config, budget, &mut trace)?;
        let c = lag.constraints(&x);
        let violation = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if inner_ok && violation <= AL_FEASIBILITY {
            converged = true;
            break;
        }
        if budget.exhausted() {
            break;
        }
        for (lam, ci) in lag.lambda.iter_mut().zip(&c) {
            *lam += lag.rho * ci;
        }
        if violation > 0.25 * prev_violation {
            lag.rho = (lag.rho * 10.0).min(AL_RHO_MAX);
        }
        prev_violation = violation;
    }
    let x = geo.project(&x);
    let f = objective(model, v, &x)?;
    Ok(RunOutcome { x, f, trace, converged })
}

/// Minimises the augmented Lagrangian over the box with an active-set BFGS.
/// Returns whether the inner problem reached stationarity.
fn box_bfgs(
    lag: &Lagrangian<'_>,
    geo: &Geometry<'_>,
    x: &mut FeatureVector,
    config: &PlanConfig,
    budget: &mut Budget,
    trace: &mut Vec<f64>,
) -> Result<bool, PlanError> {
    let n = x.len();
    let h0 = DMatrix::from_diagonal(&geo.metric);
    let mut h = h0.clone();
    let (mut l, _, mut grad) = lag.value_and_gradient(x)?;
    let mut fresh = true;
    let mut prev_active = vec![false; n];
    loop {
        if geo.stationarity(x, &grad, false) <= config.tol_g {
            return Ok(true);
        }
        if budget.exhausted() {
            return Ok(false);
        }
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= geo.lower[i] && grad[i] > 0.0) || (x[i] >= geo.upper[i] && grad[i] < 0.0))
            .collect();
        if active != prev_active {
            // curvature pairs from the old face do not describe the new one
            h = h0.clone();
            fresh = true;
            prev_active.clone_from(&active);
        }
        let mut gf = grad.clone();
        for i in 0..n {
            if active[i] {
                gf[i] = 0.0;
            }
        }
        let mut d = -(&h * &gf);
        for i in 0..n {
            if active[i] {
                d[i] = 0.0;
            }
        }
        if d.dot(&gf) >= 0.0 {
            h = h0.clone();
            fresh = true;
            d = -geo.metric.component_mul(&gf);
        }
        budget.used += 1;
        let mut alpha = 1.0;
        let step = loop {
            let mut y = &*x + &d * alpha;
            geo.clip_box(&mut y);
            let (ly, fy) = lag.value(&y)?;
            if ly <= l + ARMIJO_C * grad.dot(&(&y - &*x)) && ly <= l {
                break Some((y, ly, fy));
            }
            alpha *= SHRINK;
            if alpha < MIN_STEP {
                break None;
            }
        };
        let Some((y, ly, fy)) = step else {
            if fresh {
                return Ok(true);
            }
            h = h0.clone();
            fresh = true;
            continue;
        };
        let (_, _, gy) = lag.value_and_gradient(&y)?;
        let s = &y - &*x;
        let mut yv = &gy - &grad;
        for i in 0..n {
            if active[i] {
                yv[i] = 0.0;
            }
        }
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let r = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H ← (I − r s yᵀ) H (I − r y sᵀ) + r s sᵀ
            h += (&s * s.transpose()) * (r * r * yhy + r) - (&hy * s.transpose() + &s * hy.transpose()) * r;
            fresh = false;
        }
        let stalled = relative_stall(l, ly, config.tol_f);
        *x = y;
        l = ly;
        grad = gy;
        trace.push(fy);
        if stalled {
            return Ok(true);
        }
    }
}

fn run_solver(
    problem: &PlanningProblem<'_>,
    geo: &Geometry<'_>,
    x0: FeatureVector,
    config: &PlanConfig,
    budget: &mut Budget,
) -> Result<RunOutcome, PlanError> {
    match config.solver {
        Solver::ProjectedGradient => projected_gradient(problem.model, &problem.target, geo, x0, config, budget),
        Solver::AugmentedLagrangian => augmented_lagrangian(problem.model, &problem.target, geo, x0, config, budget),
    }
}

/// Default starting candidates: each class mean labelled with its zone.
pub fn class_mean_candidates(model: &MultiTaskModel) -> Vec<LabeledSample> {
    model
        .classes()
        .iter()
        .map(|c| LabeledSample::new(c.gaussian.mean().clone(), c.zone))
        .collect()
}

/// Extra starting poses drawn from the class Gaussians, each class picked with
/// probability equal to its target mass.
fn restart_points(model: &MultiTaskModel, v: &[f64], n: usize, seed: u64) -> Result<Vec<FeatureVector>, PlanError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = WeightedIndex::new(v).map_err(|e| PlanError::InvalidConfig(e.to_string()))?;
    Ok((0..n)
        .map(|_| {
            let k = pick.sample(&mut rng);
            model.classes()[k].gaussian.sample_with(&mut rng, 1).remove(0)
        })
        .collect())
}

/// Matches the model posterior to the target under the problem's constraints.
///
/// Running out of iterations or time is reported through
/// [`PlanResult::converged`], not as an error.
pub fn plan(problem: &PlanningProblem<'_>, config: &PlanConfig) -> Result<PlanResult, PlanError> {
    problem.validate()?;
    config.validate()?;
    let model = problem.model;
    let v = problem.target.as_slice();
    let geo = Geometry::new(problem);

    let start = match &problem.initial {
        Some(x) => x.clone(),
        None if problem.candidates.is_empty() => select_initial_pose(model, v, &class_mean_candidates(model))?,
        None => select_initial_pose(model, v, &problem.candidates)?,
    };
    let x0 = geo.project(&start);
    let f0 = objective(model, v, &x0)?;

    let mut budget = Budget {
        max_iter: config.max_iter,
        used: 0,
        deadline: config.time_limit.map(|t| Instant::now() + t),
    };
    let mut best = run_solver(problem, &geo, x0.clone(), config, &mut budget)?;

    if config.restarts > 0 {
        let draws = restart_points(model, v, config.restarts, config.seed)?;
        for draw in draws {
            if budget.deadline.is_some_and(|d| Instant::now() >= d) {
                break;
            }
            budget.used = 0;
            let run = run_solver(problem, &geo, geo.project(&draw), config, &mut budget)?;
            if run.f < best.f {
                best = run;
            }
        }
    }

    let iterations = best.trace.len() - 1;
    let RunOutcome {
        mut x,
        mut f,
        trace,
        converged,
    } = best;
    if f > f0 {
        x = x0.clone();
        f = f0;
    }
    let posterior = model.posterior_vector(&x)?;
    Ok(PlanResult {
        x: x.as_slice().to_vec(),
        posterior: posterior.as_slice().to_vec(),
        residual: f,
        initial_residual: f0,
        initial_pose: x0.as_slice().to_vec(),
        iterations,
        solver: config.solver,
        trace,
        converged,
    })
}
