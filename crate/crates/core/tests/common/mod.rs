#![allow(dead_code)]

use intentgrasp_core::dataset::{builtin_spec, generate};
use intentgrasp_core::persist::Dataset;
use intentgrasp_core::taskmodel::{fit_model, FitConfig, MultiTaskModel};

pub const MODELS: [&str; 4] = ["cup7", "cup5", "cup4", "flashlight7"];

pub fn builtin_dataset(name: &str) -> Dataset {
    let spec = builtin_spec(name).unwrap();
    Dataset {
        object: spec.object.clone(),
        layout: spec.layout.clone(),
        schema: spec.schema.clone(),
        samples: generate(&spec).unwrap(),
    }
}

pub fn builtin_model(name: &str) -> (MultiTaskModel, Dataset) {
    let data = builtin_dataset(name);
    let model = fit_model(&data.samples, &data.layout, &data.schema, &FitConfig::default()).unwrap();
    (model, data)
}

use intentgrasp_core::intent::{interpret, ClassificationInput, TargetProbabilityVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference intents: one, two and three likely tasks.
pub const INTENT_CASES: [[f64; 3]; 3] = [[0.9, 0.1, 0.1], [0.9, 0.9, 0.1], [0.9, 0.9, 0.9]];

pub fn target(model: &MultiTaskModel, w: &[f64]) -> TargetProbabilityVector {
    interpret(&ClassificationInput::new(w.to_vec()).unwrap(), model.layout(), None)
        .unwrap()
        .1
}

/// Seeded planning problems: models in round-robin order, `w` uniform in `[0,1]³`.
pub fn seeded_targets(n: usize, seed: u64) -> Vec<(usize, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| (i % MODELS.len(), (0..3).map(|_| rng.random::<f64>()).collect()))
        .collect()
}
