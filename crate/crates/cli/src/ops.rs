//! Operations shared by the command line and the HTTP service, with the
//! serialisable reports they produce.

use std::time::Duration;

use intentgrasp_core::planner::constraint_violation;
use intentgrasp_core::taskmodel::{FeatureSchema, TaskSet};
use intentgrasp_core::{
    divergence_matrices, divergence_matrices_with_data, fit_model, interpret, plan, reconstruct_intent,
    ClassificationInput, Dataset, DivergenceReport, FeatureBounds, FeatureVector, FitConfig, IntentError,
    LabeledSample, MultiTaskModel, PlanConfig, PlanResult, PlanningProblem, Solver, ZoneLayout,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Server-side ceiling on `max_iter` for a single planning request.
pub const MAX_ITER_CAP: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneInfo {
    pub bits: u8,
    pub label: String,
}

fn zone_infos(layout: &ZoneLayout) -> Vec<ZoneInfo> {
    layout
        .zones()
        .iter()
        .map(|&z| ZoneInfo {
            bits: z.bits(),
            label: layout.label(z),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub zone: ZoneInfo,
    pub prior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub tasks: Vec<String>,
    pub zones: Vec<ZoneInfo>,
    pub schema: FeatureSchema,
    pub classes: Vec<ClassSummary>,
    pub prior_sum: f64,
}

impl ModelSummary {
    pub fn of(name: &str, model: &MultiTaskModel) -> Self {
        let layout = model.layout();
        let classes: Vec<ClassSummary> = model
            .classes()
            .iter()
            .map(|c| ClassSummary {
                zone: ZoneInfo {
                    bits: c.zone.bits(),
                    label: layout.label(c.zone),
                },
                prior: c.prior,
            })
            .collect();
        Self {
            name: name.to_string(),
            tasks: layout.tasks().to_vec(),
            zones: zone_infos(layout),
            schema: model.schema().clone(),
            prior_sum: classes.iter().map(|c| c.prior).sum(),
            classes,
        }
    }
}

/// Resolves a layout choice against the tasks a dataset was recorded with.
///
/// `dataset` keeps the recorded layout, `full` uses every task combination,
/// `seven`, `five` and `four` reuse the zone sets of the three reference cup
/// layouts, and a comma list of bitmasks names the zones directly.
pub fn resolve_layout(recorded: &ZoneLayout, choice: &str) -> Result<ZoneLayout, CliError> {
    let tasks = recorded.tasks().to_vec();
    let zones_of = |l: ZoneLayout| l.zones().to_vec();
    let zones = match choice {
        "dataset" => return Ok(recorded.clone()),
        "full" => return ZoneLayout::full(tasks).map_err(CliError::from),
        "seven" => zones_of(ZoneLayout::seven_zone()),
        "five" => zones_of(ZoneLayout::five_zone()),
        "four" => zones_of(ZoneLayout::four_zone()),
        list => list
            .split(',')
            .map(|s| s.trim().parse::<u8>().map(TaskSet::from_bits))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::validation(format!("unknown layout {list:?}")))?,
    };
    ZoneLayout::new(tasks, zones).map_err(CliError::from)
}

pub fn fit_dataset(dataset: &Dataset, layout: &ZoneLayout) -> Result<MultiTaskModel, CliError> {
    Ok(fit_model(
        &dataset.samples,
        layout,
        &dataset.schema,
        &FitConfig::default(),
    )?)
}

/// Everything derived from one intent reading `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentReport {
    pub w: Vec<f64>,
    pub tasks: Vec<String>,
    pub zones: Vec<ZoneInfo>,
    /// Joint probabilities indexed by task bitmask; entry 0 is inaction.
    pub u: Vec<f64>,
    /// Target over the zones, absent when clarification is needed.
    pub v: Option<Vec<f64>>,
    pub inaction: f64,
    pub clarification_needed: bool,
    pub reconstruction_of_v: Option<Vec<f64>>,
}

pub fn intent_report(layout: &ZoneLayout, w: &[f64], threshold: Option<f64>) -> Result<IntentReport, CliError> {
    if let Some(t) = threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::validation(format!(
                "clarification threshold {t} is outside [0, 1]"
            )));
        }
    }
    let input = ClassificationInput::new(w.to_vec())?;
    let (u, v) = match interpret(&input, layout, threshold) {
        Ok((u, v)) => (u.as_slice().to_vec(), Some(v)),
        Err(IntentError::ClarificationNeeded { .. }) => {
            let (u, _) = interpret(&input, layout, None)?;
            (u.as_slice().to_vec(), None)
        }
        Err(e) => return Err(e.into()),
    };
    let reconstruction_of_v = match &v {
        Some(v) => Some(reconstruct_intent(&v.v, layout)?.as_slice().to_vec()),
        None => None,
    };
    Ok(IntentReport {
        w: w.to_vec(),
        tasks: layout.tasks().to_vec(),
        zones: zone_infos(layout),
        inaction: u[0],
        u,
        clarification_needed: v.is_none(),
        v: v.map(|v| v.v),
        reconstruction_of_v,
    })
}

/// Planning request as accepted by both front-ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub w: Vec<f64>,
    #[serde(default)]
    pub solver: Solver,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub restarts: usize,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub bounds: Option<FeatureBounds>,
    #[serde(default)]
    pub clarification_threshold: Option<f64>,
}

impl PlanRequest {
    pub fn new(w: Vec<f64>) -> Self {
        Self {
            w,
            solver: Solver::default(),
            seed: 0,
            restarts: 0,
            max_iter: None,
            bounds: None,
            clarification_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub intent: IntentReport,
    /// Absent when clarification is needed.
    pub plan: Option<PlanResult>,
    pub reconstructed_intent: Option<Vec<f64>>,
    pub constraint_violation: Option<f64>,
    pub non_converged: bool,
}

/// Interprets `w` and plans against the model. Candidate start poses come
/// from `candidates` when given, class means otherwise.
pub fn plan_report(
    model: &MultiTaskModel,
    candidates: &[LabeledSample],
    request: &PlanRequest,
    time_limit: Option<Duration>,
) -> Result<PlanReport, CliError> {
    let intent = intent_report(model.layout(), &request.w, request.clarification_threshold)?;
    let Some(v) = &intent.v else {
        return Ok(PlanReport {
            intent,
            plan: None,
            reconstructed_intent: None,
            constraint_violation: None,
            non_converged: false,
        });
    };
    let target = intentgrasp_core::TargetProbabilityVector {
        v: v.clone(),
        inaction_probability: intent.inaction,
    };
    let mut problem = PlanningProblem::new(model, &target)?.with_candidates(candidates.to_vec());
    if let Some(b) = &request.bounds {
        let b = FeatureBounds::new(b.lower.clone(), b.upper.clone())?;
        problem = problem.with_bounds(b);
    }
    let defaults = PlanConfig::default();
    let config = PlanConfig {
        solver: request.solver,
        max_iter: request.max_iter.unwrap_or(defaults.max_iter).min(MAX_ITER_CAP),
        restarts: request.restarts,
        seed: request.seed,
        time_limit,
        ..defaults
    };
    let result = plan(&problem, &config)?;
    let reconstructed = reconstruct_intent(&result.posterior, model.layout())?
        .as_slice()
        .to_vec();
    let violation = constraint_violation(
        &FeatureVector::from_column_slice(&result.x),
        &problem.bounds,
        &problem.unit_norm_groups,
    );
    Ok(PlanReport {
        intent,
        non_converged: !result.converged,
        plan: Some(result),
        reconstructed_intent: Some(reconstructed),
        constraint_violation: Some(violation),
    })
}

/// Divergence report, fitting substitute populations from `samples` when the
/// layout lacks a singleton class.
pub fn ambiguity_report(
    model: &MultiTaskModel,
    samples: Option<&[LabeledSample]>,
) -> Result<DivergenceReport, CliError> {
    Ok(match samples {
        Some(s) => divergence_matrices_with_data(model, s, &FitConfig::default())?,
        None => divergence_matrices(model)?,
    })
}

/// Comma-separated floats, as given to `-w`, `--lower` and `--upper`.
pub fn parse_floats(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::validation(format!("{p:?} is not a number")))
        })
        .collect()
}
