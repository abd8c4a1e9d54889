//! Acceptance suite. Each test checks one criterion and writes one
//! `criterion N: PASS|FAIL ...` line to stderr (unbuffered, so it shows up
//! even when the test harness captures output).
//!
//! The robot batches are shared between criteria and computed once.

use std::io::Write as _;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use cbf_placement::barrier::{BarrierFunction, BarrierSet};
use cbf_placement::bounds::{check_proposition, local_tolerance, remote_tolerance, ToleranceInputs};
use cbf_placement::closed_loop::{run, Architecture, LoopSetup, NoDisturbance};
use cbf_placement::commands::{cmd_batch, cmd_run};
use cbf_placement::config::{DisturbanceSection, ScenarioFile};
use cbf_placement::dynamics::{FnDynamics, InputSet, State, SystemModel};
use cbf_placement::montecarlo::{
    run_batch, BatchReport, Calibration, DisturbanceMode, DisturbanceSpec, Experiment, Plant, HIGH_CLIP, LOW_CLIP,
};
use cbf_placement::mpc::{shooting_problem, solve, MpcConfig, MpcVariant, QuadraticCost, RobustSpec};
use cbf_placement::qp::{fd_gradient, fd_jacobian, solve_qp, sqp_derivatives, Nlp, QpProblem, SolveStatus};
use cbf_placement::safety::{filter, FilterConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const N_RUNS: usize = 20;
const BATCH_SEED: u64 = 42;

fn report(n: u32, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {}", detail.as_ref());
}

struct Shared {
    exp: Experiment,
    plant: Plant,
    calibration: Result<Calibration, String>,
}

fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| {
        let exp = Experiment::default();
        let plant = exp.plant().expect("bundled experiment builds");
        let calibration = exp.calibrate(&plant, BATCH_SEED).map_err(|e| e.to_string());
        Shared { exp, plant, calibration }
    })
}

fn calibration() -> &'static Calibration {
    shared().calibration.as_ref().expect("calibration of the bundled scenario")
}

fn batch(clip: f64) -> &'static BatchReport {
    static LOW: OnceLock<BatchReport> = OnceLock::new();
    static HIGH: OnceLock<BatchReport> = OnceLock::new();
    let (cell, spec) = if clip == LOW_CLIP {
        (&LOW, DisturbanceSpec::low(BATCH_SEED))
    } else {
        (&HIGH, DisturbanceSpec::high(BATCH_SEED))
    };
    cell.get_or_init(|| {
        let s = shared();
        run_batch(&s.exp, &s.plant, Some(calibration()), &Architecture::CBF, spec, N_RUNS).expect("batch runs")
    })
}

fn rates(r: &BatchReport) -> String {
    r.stats
        .iter()
        .map(|s| {
            format!(
                "{} safe {:.2} reach {:.2} t {} jerk {:.1}",
                s.architecture,
                s.safe_rate,
                s.reach_rate,
                s.avg_reach_time_s.map_or_else(|| "-".into(), |t| format!("{t:.2}")),
                s.peak_jerk_mean
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

// Criterion 1

#[test]
fn criterion_01_tolerance_comparison_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();
    // Half-open ranges (0, b] are drawn as b·(1 − U[0, 1)).
    let open = |rng: &mut ChaCha8Rng, b: f64| b * (1.0 - rng.random::<f64>());
    for i in 0..1000 {
        let t = ToleranceInputs::new(
            open(&mut rng, 10.0),
            open(&mut rng, 1.0),
            open(&mut rng, 10.0),
            rng.random_range(0.0..=3.0),
            rng.random_range(0.0..=3.0),
            open(&mut rng, 5.0),
            rng.random_range(1..=10),
            rng.random_range(1..=8),
        )
        .unwrap();
        if !check_proposition(&t).all() {
            failures.push(i);
        }
        let undelayed = t.with_tau(0);
        if remote_tolerance(&undelayed, 1) != local_tolerance(&t) {
            failures.push(i);
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(1);
    report(1, pass, format!("1000 tuples, {} failing, {:.1} ms", failures.len(), elapsed.as_secs_f64() * 1e3));
    assert!(pass, "failing tuples {failures:?}, {elapsed:?}");
}

// Criterion 2

/// Filters `samples` random safe states and pushes each filtered successor
/// by `w̄_l(x)` in the direction `worst(x⁺)`. Returns (checked, exits,
/// skipped infeasible, smallest h after the push).
fn adversarial_single_steps(
    cfg: &FilterConfig,
    samples: usize,
    mut draw: impl FnMut() -> (State, DVector<f64>),
    worst: impl Fn(&State) -> State,
) -> (usize, usize, usize, f64) {
    let (mut checked, mut exits, mut skipped, mut min_h) = (0, 0, 0, f64::INFINITY);
    let b = &cfg.barriers;
    let l_h = b.lipschitz();
    let gamma = b.gamma();
    let mut attempts = 0;
    while checked < samples {
        attempts += 1;
        assert!(attempts < 20 * samples, "too few feasible samples");
        let (x, u_ref) = draw();
        let h = b.evaluate(&x);
        if !(h > 0.0) {
            continue;
        }
        let r = filter(cfg, &x, &u_ref).unwrap();
        if r.status != SolveStatus::Optimal {
            skipped += 1;
            continue;
        }
        let x_nom = cfg.model.nominal_step(&x, &r.u_applied).unwrap();
        let w_bar = (1.0 - gamma) * h / l_h;
        let dir = worst(&x_nom);
        let w = dir.normalize() * w_bar;
        let h_next = b.evaluate(&(x_nom + w));
        min_h = min_h.min(h_next);
        if h_next < -1e-9 {
            exits += 1;
        }
        checked += 1;
    }
    (checked, exits, skipped, min_h)
}

#[test]
fn criterion_02_local_filter_single_step_invariance() {
    let start = Instant::now();

    // Integrator x⁺ = x + u, h(x) = x: the worst push is straight down.
    let model = SystemModel::integrator(1.0).unwrap();
    let barriers = BarrierSet::new(vec![BarrierFunction::new("x", 1.0, |x: &State| x[0]).unwrap()], 0.3).unwrap();
    let cfg = FilterConfig::new(model, barriers, InputSet::uniform(1, 1.0).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n1, e1, s1, m1) = adversarial_single_steps(
        &cfg,
        10_000,
        || (DVector::from_element(1, rng.random_range(0.0..3.0)), DVector::from_element(1, rng.random_range(-1.0..1.0))),
        |_| DVector::from_element(1, -1.0),
    );

    // Arm: push against the gradient of the closest barrier member.
    let s = shared();
    let cfg = s.exp.setup(&s.plant, None).unwrap().filter;
    let b = cfg.barriers.clone();
    let x0 = s.exp.scenario.initial_state();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let limit = s.exp.scenario.input_limit;
    let (n2, e2, s2, m2) = adversarial_single_steps(
        &cfg,
        10_000,
        || {
            let x = DVector::from_fn(6, |i, _| {
                if i < 3 {
                    x0[i] + rng.random_range(-0.8..0.8)
                } else {
                    rng.random_range(-1.5..1.5)
                }
            });
            let u = DVector::from_fn(3, |_, _| rng.random_range(-limit..limit));
            (x, u)
        },
        |x| {
            let values = b.values(x);
            let (k, _) = values.iter().enumerate().fold((0, f64::INFINITY), |a, (i, &v)| if v < a.1 { (i, v) } else { a });
            let member = &b.members()[k];
            -fd_gradient(|z| member.value(z), x, 1e-7)
        },
    );

    let elapsed = start.elapsed();
    let pass = e1 == 0 && e2 == 0 && n1 == 10_000 && n2 == 10_000 && elapsed < Duration::from_secs(60);
    report(
        2,
        pass,
        format!(
            "integrator {n1} steps {e1} exits (min h {m1:.2e}, {s1} infeasible skipped); arm {n2} steps {e2} exits (min h {m2:.2e}, {s2} infeasible skipped); {:.1} s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// Criterion 3

#[test]
fn criterion_03_mpc_cbf_within_remote_tolerance() {
    let start = Instant::now();
    let s = shared();
    let cal = calibration();
    let spec = DisturbanceSpec::with_clip(cal.w_bar_r, DisturbanceMode::Custom, BATCH_SEED).unwrap();
    let r = run_batch(&s.exp, &s.plant, Some(cal), &[Architecture::RemoteMPCCBF], spec, N_RUNS).unwrap();
    let st = r.stats(Architecture::RemoteMPCCBF).unwrap();
    let elapsed = start.elapsed();
    let pass = st.safe_rate == 1.0 && st.n_runs == N_RUNS && elapsed < Duration::from_secs(600);
    report(
        3,
        pass,
        format!("w_bar_r {:.3e}, {} seeds, safe_rate {:.2}, {:.0} s", cal.w_bar_r, st.n_runs, st.safe_rate, elapsed.as_secs_f64()),
    );
    assert!(pass);
}

// Criteria 4–6

/// `a ≤ b` up to a relative slack.
fn at_most(a: f64, b: f64, slack: f64) -> bool {
    a <= b * (1.0 + slack)
}

#[test]
fn criterion_04_low_disturbance_table() {
    let start = Instant::now();
    let r = batch(LOW_CLIP);
    let st = |a| r.stats(a).unwrap();
    let all_safe = Architecture::CBF.iter().all(|&a| st(a).safe_rate == 1.0);
    let all_reach = Architecture::CBF.iter().all(|&a| st(a).reach_rate >= 0.8);
    let t = |a| st(a).avg_reach_time_s.unwrap_or(f64::INFINITY);
    let (t_mpc, t_comb, t_loc) = (t(Architecture::RemoteMPCCBF), t(Architecture::Combined), t(Architecture::LocalCBF));
    let order = at_most(t_mpc, t_comb, 0.05) && at_most(t_comb, t_loc, 0.05);
    let pass = all_safe && all_reach && order;
    report(
        4,
        pass,
        format!(
            "clip {LOW_CLIP}: {} | safe {all_safe} reach {all_reach} time order {order} ({:.0} s)",
            rates(r),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_high_disturbance_table() {
    let r = batch(HIGH_CLIP);
    let safe = |a| r.stats(a).unwrap().safe_rate;
    let pass = safe(Architecture::LocalCBF) == 1.0 && safe(Architecture::Combined) == 1.0 && safe(Architecture::RemoteMPCCBF) < 1.0;
    report(5, pass, format!("clip {HIGH_CLIP}: {}", rates(r)));
    assert!(pass);
}

#[test]
fn criterion_06_jerk_ordering() {
    let mut pass = true;
    let mut detail = Vec::new();
    for clip in [LOW_CLIP, HIGH_CLIP] {
        let r = batch(clip);
        let j = |a| r.stats(a).unwrap().peak_jerk_mean;
        let (comb, mpc, loc) = (j(Architecture::Combined), j(Architecture::RemoteMPCCBF), j(Architecture::LocalCBF));
        let ok = at_most(comb, mpc, 0.10) && at_most(mpc, loc, 0.10);
        pass &= ok;
        detail.push(format!("clip {clip}: combined {comb:.1} mpc-cbf {mpc:.1} local-cbf {loc:.1} ({})", if ok { "ok" } else { "out of order" }));
    }
    report(6, pass, detail.join("; "));
    assert!(pass);
}

// Criterion 7

#[test]
fn criterion_07_calibrated_tolerances() {
    let s = shared();
    let (pass, detail) = match &s.calibration {
        Ok(c) => {
            let ratio = c.ratio();
            (
                c.w_bar_r < c.w_bar_l && (2.0..=10.0).contains(&ratio),
                format!(
                    "w_bar_l {:.3e} w_bar_r {:.3e} ratio {ratio:.3e} (L_h {:.3} L_f {:.3} L_g {:.3} u_max {:.3}, L_d {:.3})",
                    c.w_bar_l,
                    c.w_bar_r,
                    c.l_h,
                    c.l_f,
                    c.l_g,
                    c.u_max,
                    c.l_f + c.l_g * c.u_max
                ),
            )
        }
        Err(e) => (false, format!("calibration failed: {e}")),
    };
    report(7, pass, detail);
    assert!(pass);
}

// Criterion 8

/// Random strictly convex QP in `n ≤ 2` variables on the box `[-2, 2]ⁿ` with
/// rows that keep a known point feasible.
fn random_qp(rng: &mut ChaCha8Rng, n: usize) -> QpProblem {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &a * a.transpose() + DMatrix::identity(n, n) * 0.2;
    let c = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let anchor = DVector::from_fn(n, |_, _| rng.random_range(-1.5..1.5));
    let m = rng.random_range(0..4);
    let rows = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let slack = DVector::from_fn(m, |_, _| rng.random_range(0.0..0.5));
    let rhs = &rows * &anchor - slack;
    QpProblem::new(h, c)
        .with_constraints(rows, rhs)
        .with_bounds(DVector::from_element(n, -2.0), DVector::from_element(n, 2.0))
}

fn qp_grid_minimum(p: &QpProblem, step: f64) -> f64 {
    let n = p.num_vars();
    let k = (4.0 / step).round() as usize;
    let at = |i: usize| -2.0 + step * i as f64;
    let (h, c, a, b) = (&p.hessian, &p.linear, &p.ineq_matrix, &p.ineq_rhs);
    let mut best = f64::INFINITY;
    let mut visit = |z: [f64; 2]| {
        let feasible = (0..a.nrows()).all(|r| (0..n).map(|j| a[(r, j)] * z[j]).sum::<f64>() >= b[r]);
        if feasible {
            let mut f = 0.0;
            for i in 0..n {
                f += c[i] * z[i];
                for j in 0..n {
                    f += 0.5 * z[i] * h[(i, j)] * z[j];
                }
            }
            best = best.min(f);
        }
    };
    for i in 0..=k {
        if n == 1 {
            visit([at(i), 0.0]);
        } else {
            for j in 0..=k {
                visit([at(i), at(j)]);
            }
        }
    }
    best
}

/// Scalar plant used for the SQP oracle: linear or mildly nonlinear.
fn scalar_model(nonlinear: bool, u_max: f64) -> SystemModel {
    if nonlinear {
        let dynamics = FnDynamics::new(
            1,
            1,
            |x: &State| DVector::from_element(1, x[0] + 0.2 * x[0].sin()),
            |x: &State| DMatrix::from_element(1, 1, 1.0 + 0.3 * x[0].cos()),
        );
        SystemModel::new(Arc::new(dynamics), 1.2, 0.3, u_max).unwrap()
    } else {
        SystemModel::integrator(u_max).unwrap()
    }
}

#[test]
fn criterion_08_solver_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    // QP against a dense grid.
    let mut qp_gap: f64 = 0.0;
    for i in 0..50 {
        let n = if i < 10 { 1 } else { 2 };
        let p = random_qp(&mut rng, n);
        let r = solve_qp(&p).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal, "instance {i}");
        assert!(p.max_violation(&r.solution) < 1e-9, "instance {i}");
        let grid = qp_grid_minimum(&p, 1e-3);
        // Grid points are feasible, so the solver may only be better.
        assert!(r.objective <= grid + 1e-9, "instance {i}: {} vs grid {grid}", r.objective);
        qp_gap = qp_gap.max(grid - r.objective);
    }

    // SQP on one-dimensional MPC instances against an input grid.
    let mut sqp_gap: f64 = 0.0;
    for i in 0..40 {
        let nonlinear = i % 2 == 1;
        let horizon = 1 + (i / 2) % 2;
        let u_max = 1.0;
        let model = scalar_model(nonlinear, u_max);
        let reference = rng.random_range(-1.5..1.0);
        let (wx, wu) = (rng.random_range(0.5..2.0), rng.random_range(0.01..0.5));
        let gamma = rng.random_range(0.1..0.9);
        let wall = rng.random_range(-0.5..0.2);
        let x0 = rng.random_range(wall + 0.05..wall + 1.5);
        let barriers = BarrierSet::new(vec![BarrierFunction::new("wall", 1.0, move |x: &State| x[0] - wall).unwrap()], gamma).unwrap();
        let cost = QuadraticCost::new(DVector::from_element(1, reference), DVector::from_element(1, wx), DVector::from_element(1, wu)).unwrap();
        let cfg = MpcConfig::new(model.clone(), horizon, Arc::new(cost), InputSet::uniform(1, u_max).unwrap())
            .unwrap()
            .with_barriers(barriers)
            .with_terminal_cost(Arc::new(
                QuadraticCost::new(DVector::from_element(1, reference), DVector::from_element(1, wx), DVector::zeros(0)).unwrap(),
            ));
        let x0v = DVector::from_element(1, x0);
        let sol = solve(&cfg, MpcVariant::Cbf, &x0v, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "instance {i}");

        // Independent rollout: Σ q(x_i, u_i) + p(x_N) subject to the chained
        // barrier condition and the input box.
        let evaluate = |u: &[f64]| -> Option<f64> {
            let mut x = x0;
            let mut cost = 0.0;
            for &ui in u {
                if ui.abs() > u_max + 1e-12 {
                    return None;
                }
                cost += wx * (x - reference).powi(2) + wu * ui * ui;
                let next = if nonlinear { x + 0.2 * x.sin() + (1.0 + 0.3 * x.cos()) * ui } else { x + ui };
                if (next - wall) < (1.0 - gamma) * (x - wall) - 1e-9 {
                    return None;
                }
                x = next;
            }
            Some(cost + wx * (x - reference).powi(2))
        };
        let got: Vec<f64> = sol.inputs.iter().map(|u| u[0]).collect();
        let j_sqp = evaluate(&got).expect("SQP solution is feasible");
        let grid: Vec<f64> = (0..=800).map(|k| -u_max + 2.0 * u_max * k as f64 / 800.0).collect();
        let mut best = f64::INFINITY;
        if horizon == 1 {
            for &a in &grid {
                best = evaluate(&[a]).map_or(best, |v| best.min(v));
            }
        } else {
            for &a in &grid {
                for &b in &grid {
                    best = evaluate(&[a, b]).map_or(best, |v| best.min(v));
                }
            }
        }
        assert!(best.is_finite(), "instance {i}: empty grid");
        sqp_gap = sqp_gap.max(j_sqp - best);
    }

    // Derivatives used by the SQP on the arm MPC against differences at two
    // step sizes.
    let s = shared();
    let base = s.exp.setup(&s.plant, None).unwrap().mpc;
    let robust = base.clone().with_robust(RobustSpec::new(1e-4, 2e-3, 1e3, 0.5).unwrap());
    let x0 = s.exp.scenario.initial_state();
    let mut grad_err: f64 = 0.0;
    for (cfg, variant) in [(&base, MpcVariant::Cbf), (&robust, MpcVariant::RobustCbf)] {
        let p = shooting_problem(cfg, &x0, variant).unwrap();
        for _ in 0..5 {
            let (lo, hi) = p.bounds();
            let z = DVector::from_fn(p.num_vars(), |j, _| {
                let (l, h) = (lo[j].max(-5.0), hi[j].min(5.0));
                rng.random_range(l..=h) * 0.8
            });
            let d = sqp_derivatives(&p, &z, 1e-6);
            for step in [1e-4, 1e-6] {
                let g = fd_gradient(|v| p.evaluate(v).objective, &z, step);
                let jc = fd_jacobian(|v| p.evaluate(v).constraints, &z, step);
                let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / b.norm().max(1e-8);
                let eg = (&d.gradient - &g).norm() / g.norm().max(1e-8);
                let ej = rel(&d.constraint_jacobian, &jc);
                grad_err = grad_err.max(eg).max(ej);
            }
        }
    }

    let pass = qp_gap <= 1e-2 && sqp_gap <= 1e-2 && grad_err <= 1e-3;
    report(8, pass, format!("QP grid gap {qp_gap:.2e}, SQP grid gap {sqp_gap:.2e}, derivative rel. error {grad_err:.2e}"));
    assert!(pass);
}

// Criterion 9

fn hash_dir(dir: &std::path::Path) -> String {
    let mut files: Vec<_> = walk(dir);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn criterion_09_determinism() {
    let mut exp = Experiment::default();
    exp.scenario.sim_horizon_steps = 500;
    let file = ScenarioFile::from_experiment(&exp, DisturbanceSection::preset(DisturbanceMode::High, 7), 2, Architecture::CBF.to_vec());
    let tmp = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for rep in 0..2 {
        let run_dir = tmp.path().join(format!("run{rep}"));
        cmd_run(file.clone(), Architecture::Combined, Some(42), &run_dir).unwrap();
        let batch_dir = tmp.path().join(format!("batch{rep}"));
        cmd_batch(file.clone(), &batch_dir, true).unwrap();
        hashes.push((hash_dir(&run_dir), hash_dir(&batch_dir)));
    }
    let pass = hashes[0] == hashes[1];
    report(9, pass, format!("run {} batch {}", &hashes[0].0[..16], &hashes[0].1[..16]));
    assert!(pass, "{hashes:?}");
}

// Criterion 10

fn integrator_loop(tau: usize) -> LoopSetup {
    let model = SystemModel::integrator(1.0).unwrap();
    let barriers = BarrierSet::new(vec![BarrierFunction::new("x", 1.0, |x: &State| x[0]).unwrap()], 0.4).unwrap();
    let input_set = InputSet::uniform(1, 1.0).unwrap();
    let cost = QuadraticCost::new(DVector::from_element(1, -1.0), DVector::from_element(1, 1.0), DVector::from_element(1, 0.1)).unwrap();
    let x0 = DVector::from_element(1, 2.0);
    let mpc = MpcConfig::new(model.clone(), 3, Arc::new(cost), input_set.clone())
        .unwrap()
        .with_barriers(barriers.clone())
        .with_robust(RobustSpec::new(0.01, 0.1, 1e3, 0.1).unwrap());
    let filter = FilterConfig::new(model.clone(), barriers, input_set).unwrap().with_robust_tolerance(0.1, &x0).unwrap();
    LoopSetup {
        model,
        tau,
        max_steps: 40,
        ts: 1.0,
        x0,
        standby: DVector::zeros(1),
        filter,
        mpc,
        task: None,
    }
}

#[test]
fn criterion_10_predictor_exactness() {
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for tau in 0..=10 {
        let setup = integrator_loop(tau);
        for arch in Architecture::ALL {
            let rec = run(arch, &setup, &mut NoDisturbance::new(1)).unwrap();
            assert!(rec.aborted.is_none());
            worst = worst.max(rec.max_prediction_error);
            runs += 1;
        }
    }
    let s = shared();
    let mut exp = s.exp.clone();
    exp.scenario.sim_horizon_steps = 400;
    for tau in [0, 1, 4, 7, 10] {
        exp.tau = tau;
        let setup = exp.setup(&s.plant, Some(calibration())).unwrap();
        for arch in Architecture::ALL {
            let rec = run(arch, &setup, &mut NoDisturbance::new(6)).unwrap();
            assert!(rec.aborted.is_none(), "{arch} tau {tau}: {:?}", rec.aborted);
            worst = worst.max(rec.max_prediction_error);
            runs += 1;
        }
    }
    let pass = worst <= 1e-9;
    report(10, pass, format!("{runs} disturbance-free runs, tau 0..=10, max |x - x_hat| {worst:.2e}"));
    assert!(pass);
}
