//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Each criterion is checked with its own oracle rather than through the
//! unit tests, so this target can be run on its own:
//! `cargo test -p intentgrasp-cli --test acceptance`.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use intentgrasp_core::ambiguity::{divergence_matrices_with_data, kl_gauss, pinsker_bound, DivergenceReport};
use intentgrasp_core::persist::dataset_to_string;
use intentgrasp_core::planner::{
    constraint_violation, objective, objective_gradient, plan, posterior_jacobian, PlanConfig, PlanningProblem, Solver,
};
use intentgrasp_core::taskmodel::{ClassModel, FeatureDescriptor, FeatureSchema, FitConfig, MultiTaskModel, TaskSet};
use intentgrasp_core::{
    builtin_spec, fit_model, generate, interpret, joint_events, load_model, reconstruct_intent, save_model,
    ClassificationInput, Dataset, FeatureBounds, GaussianParams, TargetProbabilityVector, ZoneLayout,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODELS: [&str; 4] = ["cup7", "cup5", "cup4", "flashlight7"];
const INTENT_CASES: [[f64; 3]; 3] = [[0.9, 0.1, 0.1], [0.9, 0.9, 0.1], [0.9, 0.9, 0.9]];

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn dataset(name: &str) -> Dataset {
    let spec = builtin_spec(name).unwrap();
    Dataset {
        object: spec.object.clone(),
        layout: spec.layout.clone(),
        schema: spec.schema.clone(),
        samples: generate(&spec).unwrap(),
    }
}

fn model(name: &str) -> (MultiTaskModel, Dataset) {
    let data = dataset(name);
    let m = fit_model(&data.samples, &data.layout, &data.schema, &FitConfig::default()).unwrap();
    (m, data)
}

fn target(layout: &ZoneLayout, w: &[f64]) -> TargetProbabilityVector {
    interpret(&ClassificationInput::new(w.to_vec()).unwrap(), layout, None)
        .unwrap()
        .1
}

fn intent_arithmetic() -> Outcome {
    let seven = ZoneLayout::seven_zone();
    let cases: [(&ZoneLayout, [f64; 3], &[f64]); 3] = [
        (
            &seven,
            [0.9, 0.1, 0.1],
            &[0.7933, 0.0098, 0.0098, 0.0881, 0.0881, 0.0011, 0.0098],
        ),
        (
            &seven,
            [0.9, 0.9, 0.1],
            &[0.0817, 0.0817, 0.0010, 0.7356, 0.0091, 0.0091, 0.0817],
        ),
        (
            &seven,
            [0.9, 0.9, 0.9],
            &[0.0090, 0.0090, 0.0090, 0.0811, 0.0811, 0.0811, 0.7297],
        ),
    ];
    let five = ZoneLayout::five_zone();
    let four = ZoneLayout::four_zone();
    let reduced: [(&ZoneLayout, [f64; 3], &[f64]); 2] = [
        (&five, [0.9, 0.1, 0.9], &[0.4475, 0.0055, 0.0497, 0.0497, 0.4475]),
        (&four, [0.9, 0.1, 0.9], &[0.0100, 0.0900, 0.0900, 0.8100]),
    ];
    for (layout, w, expected) in cases.iter().chain(&reduced) {
        let v = target(layout, w).v;
        let got: Vec<f64> = v.iter().map(|x| round4(*x)).collect();
        ensure(got == *expected, || {
            format!("w = {w:?}: got {got:?}, expected {expected:?}")
        })?;
    }
    Ok("three seven-zone targets, five- and four-zone targets to 4 decimals".into())
}

fn reconstruction_rule() -> Outcome {
    let p = [0.7950, 0.0113, 0.0117, 0.0899, 0.0898, 0.0023, 0.0000];
    let w = reconstruct_intent(&p, &ZoneLayout::seven_zone()).map_err(|e| e.to_string())?;
    let got: Vec<f64> = w.as_slice().iter().map(|x| round4(*x)).collect();
    ensure(got == [0.9747, 0.1035, 0.1038], || {
        format!("single-task reconstruction {got:?}")
    })?;

    let four = ZoneLayout::four_zone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        // Every tenth vector has exact zeros.
        let mut raw: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        if i % 10 == 0 {
            raw[rng.random_range(0..4)] = 0.0;
        }
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let t = reconstruct_intent(&p, &four).map_err(|e| e.to_string())?.as_slice()[1];
        ensure(round4(t) == 1.0, || format!("vector {i}: Transfer reconstructs to {t}"))?;
    }
    Ok("single-task column reproduced; four-zone Transfer = 1.0000 on 1000 random vectors".into())
}

fn worked_example() -> Outcome {
    let u = joint_events(&ClassificationInput::new(vec![0.88, 0.9, 0.2]).unwrap());
    let (a, b) = (u.get(TaskSet::from_bits(0b001)), u.get(TaskSet::from_bits(0b011)));
    ensure((a - 0.0704).abs() < 1e-15 && (b - 0.6336).abs() < 1e-15, || {
        format!("u({{U}}) = {a}, u({{U,T}}) = {b}")
    })?;
    Ok(format!("u({{U}}) = {a}, u({{U,T}}) = {b}"))
}

/// Difference steps of `1e-5` average class standard deviations per feature.
fn steps(model: &MultiTaskModel) -> DVector<f64> {
    DVector::from_fn(model.dim(), |i, _| {
        let k = model.len() as f64;
        1e-5 * model
            .classes()
            .iter()
            .map(|c| c.gaussian.covariance()[(i, i)].sqrt())
            .sum::<f64>()
            / k
    })
}

/// Predicted roundoff of a central difference of the posterior with steps
/// `h`. Each `P_k = exp(s_k - lse)` carries an absolute error of about
/// `eps * P_k * (|s_k| + |lse|)`; dividing by the step gives the floor below
/// which differences carry no information about the derivative.
fn roundoff_floor(model: &MultiTaskModel, x: &DVector<f64>, h: &DVector<f64>) -> f64 {
    let s = model.log_scores(x).unwrap();
    let top = s.max();
    let lse = top + s.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
    let scale = s
        .iter()
        .map(|v| (v - lse).exp() * (v.abs() + lse.abs()))
        .map(|e| e * e)
        .sum::<f64>()
        .sqrt();
    let inv_h = h.map(|v| 1.0 / v).norm();
    f64::EPSILON * scale * inv_h
}

fn gradient_correctness() -> Outcome {
    let models: Vec<MultiTaskModel> = MODELS.iter().map(|n| model(n).0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut checked, mut skipped) = (0, 0);
    let (mut worst_j, mut worst_g): (f64, f64) = (0.0, 0.0);
    while checked < 100 {
        let m = &models[checked % models.len()];
        let w: Vec<f64> = (0..3).map(|_| rng.random()).collect();
        let v = target(m.layout(), &w).v;
        let k = rng.random_range(0..m.len());
        let x = m.classes()[k].gaussian.sample_with(&mut rng, 1).remove(0);
        let jac = posterior_jacobian(m, &x).unwrap();
        let grad = objective_gradient(m, &v, &x).unwrap();
        let h = steps(m);
        // Only probes the oracle can resolve to a tenth of the tolerance count.
        let floor = roundoff_floor(m, &x, &h);
        if floor > 1e-6 * jac.norm() || floor > 1e-6 * grad.norm() {
            skipped += 1;
            continue;
        }
        let mut fd_j = DMatrix::zeros(m.len(), x.len());
        let mut fd_g = DVector::zeros(x.len());
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h[i];
            xm[i] -= h[i];
            let col = (m.posterior_vector(&xp).unwrap() - m.posterior_vector(&xm).unwrap()) / (2.0 * h[i]);
            fd_j.set_column(i, &col);
            fd_g[i] = (objective(m, &v, &xp).unwrap() - objective(m, &v, &xm).unwrap()) / (2.0 * h[i]);
        }
        worst_j = worst_j.max((fd_j - &jac).norm() / jac.norm());
        worst_g = worst_g.max((fd_g - &grad).norm() / grad.norm());
        checked += 1;
    }
    ensure(worst_j < 1e-5 && worst_g < 1e-5, || {
        format!("worst relative error: jacobian {worst_j:.2e}, gradient {worst_g:.2e}")
    })?;
    Ok(format!(
        "100 cases ({skipped} probes below the difference roundoff floor skipped), worst relative error jacobian {worst_j:.2e}, gradient {worst_g:.2e}"
    ))
}

fn two_class_line() -> MultiTaskModel {
    let layout = ZoneLayout::new(
        vec!["A".into(), "B".into()],
        vec![TaskSet::from_bits(1), TaskSet::from_bits(2)],
    )
    .unwrap();
    let schema = FeatureSchema::new(
        vec![FeatureDescriptor {
            name: "x".into(),
            unit: "m".into(),
        }],
        vec![],
    )
    .unwrap();
    let classes = layout
        .zones()
        .iter()
        .zip([-1.0, 1.0])
        .map(|(&zone, m)| ClassModel {
            zone,
            gaussian: GaussianParams::diagonal(DVector::from_vec(vec![m]), &[1.0]).unwrap(),
            prior: 0.5,
        })
        .collect();
    MultiTaskModel::new(
        layout,
        schema,
        classes,
        Some(FeatureBounds::new(vec![-5.0], vec![5.0]).unwrap()),
    )
    .unwrap()
}

/// Seeded problems shared by the agreement checks: models round-robin,
/// `w` uniform in the unit cube.
fn agreement(models: &[(MultiTaskModel, Dataset)], restarts: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut agree = 0;
    for i in 0..50 {
        let w: Vec<f64> = (0..3).map(|_| rng.random()).collect();
        let (m, data) = &models[i % models.len()];
        let v = target(m.layout(), &w);
        let problem = PlanningProblem::new(m, &v)
            .unwrap()
            .with_candidates(data.samples.clone());
        let config = |solver| PlanConfig {
            restarts,
            seed: i as u64,
            ..PlanConfig::with_solver(solver)
        };
        let a = plan(&problem, &config(Solver::ProjectedGradient)).unwrap();
        let b = plan(&problem, &config(Solver::AugmentedLagrangian)).unwrap();
        if (a.residual - b.residual).abs() <= 1e-6 {
            agree += 1;
        }
    }
    agree
}

fn planner_quality(info: &mut Vec<String>) -> Outcome {
    let models: Vec<(MultiTaskModel, Dataset)> = MODELS.iter().map(|n| model(n)).collect();
    let mut runs = 0;
    for ((m, data), name) in models.iter().zip(MODELS) {
        for w in INTENT_CASES {
            let v = target(m.layout(), &w);
            let problem = PlanningProblem::new(m, &v)
                .unwrap()
                .with_candidates(data.samples.clone());
            for solver in [Solver::ProjectedGradient, Solver::AugmentedLagrangian] {
                let r = plan(&problem, &PlanConfig::with_solver(solver)).map_err(|e| e.to_string())?;
                let start = objective(m, &v.v, &DVector::from_column_slice(&r.initial_pose)).unwrap();
                ensure(r.residual <= start, || {
                    format!("{name} {w:?} {solver:?}: residual {} above start {start}", r.residual)
                })?;
                if r.converged {
                    let x = DVector::from_column_slice(&r.x);
                    let viol = constraint_violation(&x, &problem.bounds, &problem.unit_norm_groups);
                    ensure(viol <= 1e-9, || format!("{name} {w:?} {solver:?}: violation {viol:e}"))?;
                }
                runs += 1;
            }
        }
    }

    let agree = agreement(&models, 64);
    ensure(agree >= 48, || format!("solvers agree on {agree}/50 problems"))?;
    info.push(format!(
        "single-start solver agreement: {}/50 (64 restarts: {agree}/50)",
        agreement(&models, 0)
    ));

    let line = two_class_line();
    let oracle = 0.5 * (3.0f64 / 7.0).ln();
    for solver in [Solver::ProjectedGradient, Solver::AugmentedLagrangian] {
        let t = TargetProbabilityVector::from_probabilities(vec![0.7, 0.3]).unwrap();
        let r = plan(
            &PlanningProblem::new(&line, &t).unwrap(),
            &PlanConfig::with_solver(solver),
        )
        .unwrap();
        ensure((r.posterior[0] - 0.7).abs() <= 1e-6, || {
            format!("{solver:?}: P_1 = {}", r.posterior[0])
        })?;
        let bisected = bisect_p1(&line, 0.7);
        ensure((bisected - oracle).abs() < 1e-12, || {
            format!("bisection gave {bisected}, closed form {oracle}")
        })?;
    }
    Ok(format!(
        "{runs} runs never worse than their start, converged runs feasible to 1e-9; solvers agree on {agree}/50; 1-D oracle P_1 = 0.7"
    ))
}

/// `P_1` falls monotonically along the line, so bisection finds where it is `p`.
fn bisect_p1(model: &MultiTaskModel, p: f64) -> f64 {
    let (mut lo, mut hi) = (-5.0, 5.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if model.posterior_vector(&DVector::from_vec(vec![mid])).unwrap()[0] > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> GaussianParams {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.3;
    GaussianParams::new(DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5)), cov).unwrap()
}

fn symmetric_between(r: &DivergenceReport, a: &str, b: &str) -> f64 {
    r.symmetric[r.index_of(a).unwrap()][r.index_of(b).unwrap()]
}

fn kl_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let p = random_gaussian(&mut rng, 3);
        let self_kl = kl_gauss(&p, &p).unwrap();
        ensure(self_kl.abs() <= 1e-12, || format!("self-divergence {self_kl:e}"))?;
    }
    let unit = |m: f64| GaussianParams::diagonal(DVector::from_vec(vec![m]), &[1.0]).unwrap();
    let half = kl_gauss(&unit(0.0), &unit(1.0)).unwrap();
    ensure(half == 0.5, || format!("KL(N(0,1) || N(1,1)) = {half}"))?;

    let mut pairs = 0;
    let mut worst: f64 = 0.0;
    while pairs < 10 {
        let (p, q) = (random_gaussian(&mut rng, 2), random_gaussian(&mut rng, 2));
        let exact = kl_gauss(&p, &q).unwrap();
        // A relative tolerance says nothing about near-identical pairs.
        if exact < 0.2 {
            continue;
        }
        let n = 400_000;
        let draws = p.sample(n, 1000 + pairs);
        let mc = draws
            .iter()
            .map(|x| p.log_pdf(x).unwrap() - q.log_pdf(x).unwrap())
            .sum::<f64>()
            / n as f64;
        worst = worst.max((mc - exact).abs() / exact);
        pairs += 1;
    }
    ensure(worst <= 0.01, || format!("Monte Carlo relative error {worst:.4}"))?;

    let mut reports = Vec::new();
    for name in MODELS {
        let (m, data) = model(name);
        let r = divergence_matrices_with_data(&m, &data.samples, &FitConfig::default()).map_err(|e| e.to_string())?;
        for i in 0..r.tasks.len() {
            for j in 0..r.tasks.len() {
                ensure(r.symmetric[i][j] == r.nonsymmetric[i][j] + r.nonsymmetric[j][i], || {
                    format!("{name}: symmetric[{i}][{j}] is not the sum")
                })?;
                ensure(r.pinsker[i][j] == pinsker_bound(r.nonsymmetric[i][j]).unwrap(), || {
                    format!("{name}: pinsker[{i}][{j}]")
                })?;
                ensure(r.pinsker[i][j] == (r.nonsymmetric[i][j] / 2.0).sqrt(), || {
                    format!("{name}: pinsker[{i}][{j}]")
                })?;
            }
        }
        reports.push(r);
    }
    let (seven, five) = (&reports[0], &reports[1]);
    let th = (
        symmetric_between(seven, "Transfer", "Handover"),
        symmetric_between(five, "Transfer", "Handover"),
    );
    let uh = (
        symmetric_between(seven, "Usage", "Handover"),
        symmetric_between(five, "Usage", "Handover"),
    );
    ensure(th.1 < th.0, || {
        format!("Transfer-Handover {:.2} -> {:.2} did not decrease", th.0, th.1)
    })?;
    ensure(uh.1 > uh.0, || {
        format!("Usage-Handover {:.2} -> {:.2} did not increase", uh.0, uh.1)
    })?;
    Ok(format!(
        "Monte Carlo worst relative error {worst:.4}; cup7 -> cup5 Transfer-Handover {:.2} -> {:.2}, Usage-Handover {:.2} -> {:.2}",
        th.0, th.1, uh.0, uh.1
    ))
}

fn determinism_and_persistence() -> Outcome {
    for name in MODELS {
        ensure(
            dataset_to_string(&dataset(name)) == dataset_to_string(&dataset(name)),
            || format!("{name}: regenerated dataset differs"),
        )?;
    }
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for name in MODELS {
        let (m, _) = model(name);
        let path = dir.path().join(format!("{name}.model"));
        save_model(&path, &m).map_err(|e| e.to_string())?;
        let loaded = load_model(&path, None).map_err(|e| e.to_string())?;
        let bounds = m.bounds().unwrap();
        for _ in 0..100 {
            let x = DVector::from_fn(m.dim(), |i, _| rng.random_range(bounds.lower[i]..=bounds.upper[i]));
            match (m.posterior_vector(&x), loaded.posterior_vector(&x)) {
                (Ok(a), Ok(b)) => {
                    let diff = (a - b).amax();
                    ensure(diff <= 1e-15, || format!("{name}: posterior drift {diff:e}"))?;
                }
                (Err(a), Err(b)) => ensure(a == b, || format!("{name}: errors differ"))?,
                _ => return Err(format!("{name}: one copy failed where the other did not")),
            }
        }
    }
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_intentgrasp"))
        .arg("reproduce-tables")
        .output()
        .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    ensure(out.status.success(), || {
        String::from_utf8_lossy(&out.stdout).into_owned()
    })?;
    ensure(took < Duration::from_secs(60), || {
        format!("reproduce-tables took {took:?}")
    })?;
    Ok(format!(
        "datasets byte-identical; 400 probes preserved to 1e-15; reproduce-tables passed in {:.3} s",
        took.as_secs_f64()
    ))
}

type Criterion = (&'static str, Duration, Box<dyn FnOnce(&mut Vec<String>) -> Outcome>);

fn main() -> ExitCode {
    let mut info = Vec::new();
    let criteria: Vec<Criterion> = vec![
        (
            "power-set intent arithmetic",
            Duration::from_secs(1),
            Box::new(|_| intent_arithmetic()),
        ),
        (
            "reconstruction rule",
            Duration::MAX,
            Box::new(|_| reconstruction_rule()),
        ),
        (
            "worked joint-event example",
            Duration::MAX,
            Box::new(|_| worked_example()),
        ),
        (
            "gradient correctness",
            Duration::from_secs(30),
            Box::new(|_| gradient_correctness()),
        ),
        ("planner quality", Duration::MAX, Box::new(planner_quality)),
        ("KL suite", Duration::MAX, Box::new(|_| kl_suite())),
        (
            "determinism and persistence",
            Duration::MAX,
            Box::new(|_| determinism_and_persistence()),
        ),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = check(&mut info);
        let took = start.elapsed();
        let outcome = outcome
            .and_then(|detail| ensure(took < limit, || format!("took {took:?}, limit {limit:?}")).map(|_| detail));
        match outcome {
            Ok(detail) => println!("PASS [{}] {name} ({:.2} s): {detail}", i + 1, took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name} ({:.2} s): {detail}", i + 1, took.as_secs_f64());
            }
        }
    }
    for line in info {
        println!("INFO {line}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
