//! Intent-uncertainty-aware grasp planning.
//!
//! The crate is organised bottom-up:
//!
//! * [`gaussian`]: multivariate normal density, gradient, fitting and sampling.
//! * [`taskmodel`]: task sets, zone layouts, inclusive labelling and the
//!   multi-task Gaussian classifier that produces the robot probability vector.
//! * [`intent`]: per-task intent probabilities to joint events and the target
//!   probability vector over a layout's zones.
//! * [`planner`]: least-squares matching of the model posterior to a target
//!   vector under box and unit-norm constraints.
//! * [`ambiguity`]: KL divergence matrices between task populations.
//! * [`dataset`]: synthetic grasp datasets and the built-in object models.
//! * [`persist`]: versioned dataset and model files.

pub mod ambiguity;
pub mod dataset;
pub mod gaussian;
pub mod intent;
pub mod persist;
pub mod planner;
pub mod taskmodel;

pub use ambiguity::{
    divergence_matrices, divergence_matrices_with_data, divergence_spectrum, kl_gauss, pinsker_bound, AmbiguityError,
    DivergenceReport,
};
pub use dataset::{builtin_spec, builtin_specs, generate, DatasetError, GeneratorSpec};
pub use gaussian::{fit_mle, FeatureVector, GaussianError, GaussianParams};
pub use intent::{
    interpret, joint_events, reconstruct_intent, target_vector, ClassificationInput, HumanProbabilityVector,
    IntentError, TargetProbabilityVector,
};
pub use persist::{load_dataset, load_model, save_dataset, save_model, Dataset, PersistError};
pub use planner::{
    objective, objective_gradient, plan, posterior_jacobian, select_initial_pose, PlanConfig, PlanError, PlanResult,
    PlanningProblem, Solver,
};
pub use taskmodel::{
    fit_model, FeatureBounds, FeatureSchema, FitConfig, LabeledSample, ModelError, MultiTaskModel, TaskSet, ZoneLayout,
};
