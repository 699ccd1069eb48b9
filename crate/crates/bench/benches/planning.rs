//! Timing for the hot paths: posterior evaluation, its Jacobian, full
//! planning runs and the pairwise divergence matrices.

use criterion::{criterion_group, criterion_main, Criterion};
use intentgrasp_core::dataset::BUILTIN_NAMES;
use intentgrasp_core::{
    builtin_spec, divergence_matrices_with_data, fit_model, generate, interpret, plan, posterior_jacobian,
    ClassificationInput, FitConfig, LabeledSample, MultiTaskModel, PlanConfig, PlanningProblem, Solver,
};
use nalgebra::DVector;

fn fitted(name: &str) -> (MultiTaskModel, Vec<LabeledSample>) {
    let spec = builtin_spec(name).expect("builtin spec");
    let samples = generate(&spec).expect("generate");
    let model = fit_model(&samples, &spec.layout, &spec.schema, &FitConfig::default()).expect("fit");
    (model, samples)
}

fn probe(model: &MultiTaskModel) -> DVector<f64> {
    let classes = model.classes();
    let sum = classes
        .iter()
        .fold(DVector::zeros(classes[0].gaussian.mean().len()), |acc, c| {
            acc + c.gaussian.mean()
        });
    sum / classes.len() as f64
}

fn posterior(c: &mut Criterion) {
    let mut group = c.benchmark_group("posterior");
    for name in BUILTIN_NAMES {
        let (model, _) = fitted(name);
        let x = probe(&model);
        group.bench_function(name, |b| {
            b.iter(|| model.posterior_vector(std::hint::black_box(&x)).unwrap())
        });
    }
    group.finish();
}

fn jacobian(c: &mut Criterion) {
    let mut group = c.benchmark_group("jacobian");
    for name in BUILTIN_NAMES {
        let (model, _) = fitted(name);
        let x = probe(&model);
        group.bench_function(name, |b| {
            b.iter(|| posterior_jacobian(&model, std::hint::black_box(&x)).unwrap())
        });
    }
    group.finish();
}

fn planning(c: &mut Criterion) {
    let (model, samples) = fitted("cup7");
    let w = ClassificationInput::new(vec![0.8, 0.3, 0.6]).unwrap();
    let (_, target) = interpret(&w, model.layout(), None).unwrap();
    let problem = PlanningProblem::new(&model, &target).unwrap().with_candidates(samples);
    let mut group = c.benchmark_group("plan");
    group.sample_size(20);
    for solver in [Solver::ProjectedGradient, Solver::AugmentedLagrangian] {
        let config = PlanConfig::with_solver(solver);
        group.bench_function(solver.id(), |b| b.iter(|| plan(&problem, &config).unwrap()));
    }
    group.finish();
}

fn divergence(c: &mut Criterion) {
    let mut group = c.benchmark_group("divergence");
    for name in BUILTIN_NAMES {
        let (model, samples) = fitted(name);
        let config = FitConfig::default();
        group.bench_function(name, |b| {
            b.iter(|| divergence_matrices_with_data(&model, &samples, &config).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, posterior, jacobian, planning, divergence);
criterion_main!(benches);
