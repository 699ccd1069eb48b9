//! Intent interpretation.
//!
//! An upstream system reports, for each principle task, the probability that
//! the operator wants it. Treating the tasks as independent gives a joint
//! probability for every task combination, the human probability vector `u`.
//! Dropping the inaction event (no task at all) and every combination the
//! model has no zone for, then renormalising, gives the target vector `v` the
//! planner tries to match.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskmodel::{TaskSet, ZoneLayout, MAX_TASKS};

/// Sum tolerance for probability vectors handed to [`reconstruct_intent`].
/// Loose enough to accept four-decimal reference values.
pub const RECONSTRUCTION_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntentError {
    #[error("intent probability w[{index}] = {value} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("need 1..={MAX_TASKS} task probabilities, got {0}")]
    TaskCount(usize),
    #[error("{actual} task probabilities for a layout with {expected} tasks")]
    TaskMismatch { expected: usize, actual: usize },
    #[error("inaction probability {inaction} reaches the clarification threshold {threshold}")]
    ClarificationNeeded { inaction: f64, threshold: f64 },
    #[error("no zone of the layout has positive probability")]
    DegenerateIntent,
    #[error("probability vector has {actual} entries, layout has {expected} zones")]
    Length { expected: usize, actual: usize },
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
}

/// Per-task intent probabilities `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassificationInput(Vec<f64>);

impl ClassificationInput {
    pub fn new(w: Vec<f64>) -> Result<Self, IntentError> {
        if w.is_empty() || w.len() > MAX_TASKS {
            return Err(IntentError::TaskCount(w.len()));
        }
        for (index, &value) in w.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(IntentError::OutOfRange { index, value });
            }
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for ClassificationInput {
    type Error = IntentError;
    fn try_from(w: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(w)
    }
}

impl From<ClassificationInput> for Vec<f64> {
    fn from(w: ClassificationInput) -> Self {
        w.0
    }
}

/// Joint probabilities of all `2^m` task combinations, indexed by bitmask.
/// Entry 0 is the inaction event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanProbabilityVector(Vec<f64>);

impl HumanProbabilityVector {
    pub fn get(&self, s: TaskSet) -> f64 {
        self.0.get(s.bits() as usize).copied().unwrap_or(0.0)
    }

    pub fn inaction(&self) -> f64 {
        self.0[0]
    }

    pub fn num_tasks(&self) -> usize {
        self.0.len().trailing_zeros() as usize
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Target probabilities aligned with a layout's zones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetProbabilityVector {
    pub v: Vec<f64>,
    /// Mass of the eliminated inaction event.
    pub inaction_probability: f64,
}

impl TargetProbabilityVector {
    /// Wraps an arbitrary probability vector, e.g. one chosen by hand.
    pub fn from_probabilities(v: Vec<f64>) -> Result<Self, IntentError> {
        check_distribution(&v, 1e-12)?;
        Ok(Self {
            v,
            inaction_probability: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.v.iter().enumerate() {
            if p > self.v[best] {
                best = k;
            }
        }
        best
    }
}

fn check_distribution(p: &[f64], tol: f64) -> Result<(), IntentError> {
    if let Some(bad) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(IntentError::InvalidProbabilities(format!(
            "entry {bad} is not a probability"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(IntentError::InvalidProbabilities(format!("entries sum to {sum}")));
    }
    Ok(())
}

/// `u(S) = Π_{i∈S} w_i · Π_{j∉S} (1 − w_j)` for every subset `S`.
pub fn joint_events(w: &ClassificationInput) -> HumanProbabilityVector {
    let m = w.len();
    let u = (0..1usize << m)
        .map(|s| {
            w.as_slice()
                .iter()
                .enumerate()
                .map(|(i, &wi)| if s & (1 << i) != 0 { wi } else { 1.0 - wi })
                .product()
        })
        .collect();
    HumanProbabilityVector(u)
}

/// Restricts `u` to the layout's zones and renormalises.
///
/// With a threshold set, an inaction probability at or above it is reported as
/// [`IntentError::ClarificationNeeded`] instead of producing a target.
pub fn target_vector(
    u: &HumanProbabilityVector,
    layout: &ZoneLayout,
    clarification_threshold: Option<f64>,
) -> Result<TargetProbabilityVector, IntentError> {
    if u.num_tasks() != layout.num_tasks() {
        return Err(IntentError::TaskMismatch {
            expected: layout.num_tasks(),
            actual: u.num_tasks(),
        });
    }
    let inaction = u.inaction();
    if let Some(threshold) = clarification_threshold {
        if inaction >= threshold {
            return Err(IntentError::ClarificationNeeded { inaction, threshold });
        }
    }
    let mass: Vec<f64> = layout.zones().iter().map(|&z| u.get(z)).collect();
    let denom: f64 = mass.iter().sum();
    if denom <= 0.0 {
        return Err(IntentError::DegenerateIntent);
    }
    Ok(TargetProbabilityVector {
        v: mass.iter().map(|p| p / denom).collect(),
        inaction_probability: inaction,
    })
}

/// Convenience for `target_vector(joint_events(w), ...)` with a task-count check.
pub fn interpret(
    w: &ClassificationInput,
    layout: &ZoneLayout,
    clarification_threshold: Option<f64>,
) -> Result<(HumanProbabilityVector, TargetProbabilityVector), IntentError> {
    if w.len() != layout.num_tasks() {
        return Err(IntentError::TaskMismatch {
            expected: layout.num_tasks(),
            actual: w.len(),
        });
    }
    let u = joint_events(w);
    let v = target_vector(&u, layout, clarification_threshold)?;
    Ok((u, v))
}

/// Per-task marginal `w'_t = Σ_{zones ∋ t} p_k / Σ_k p_k`.
///
/// Dividing by the actual sum (rather than assuming exactly one) makes a task
/// present in every zone reconstruct to exactly `1.0`.
pub fn reconstruct_intent(p: &[f64], layout: &ZoneLayout) -> Result<ClassificationInput, IntentError> {
    if p.len() != layout.len() {
        return Err(IntentError::Length {
            expected: layout.len(),
            actual: p.len(),
        });
    }
    check_distribution(p, RECONSTRUCTION_SUM_TOLERANCE)?;
    let total: f64 = p.iter().sum();
    let w = (0..layout.num_tasks())
        .map(|t| {
            let s: f64 = layout
                .zones()
                .iter()
                .zip(p)
                .filter(|(z, _)| z.contains(t))
                .map(|(_, pk)| pk)
                .sum();
            (s / total).clamp(0.0, 1.0)
        })
        .collect();
    ClassificationInput::new(w)
}
