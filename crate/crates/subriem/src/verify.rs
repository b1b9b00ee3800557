//! Seeded verification suite: a battery of residual checks over the bundled
//! examples and randomized configurations, reported as named records. The
//! CLI `verify` command runs this and writes the residuals into its
//! manifest; identical seeds give identical residuals.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::frame::{frame_by_id, BracketWord};
use crate::hamiltonian::{
    abnormal_residual, hamiltonian, shoot, symplectic_gradient, LandmarkState,
};
use crate::kernel::{check_distinct, gram_matrix, kernel_apply, KernelSpec};
use crate::matching::match_landmarks;
use crate::moser::moser_transport;
use crate::presets;
use crate::steering::{steer_sweep, taylor_order_check, SteerConfig};
use crate::Result;

/// One verification record: the measured residual against its bound.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub residual: f64,
    pub threshold: f64,
    /// Whether `residual` must stay below (`true`) or above (`false`) the
    /// threshold.
    pub upper_bound: bool,
    pub pass: bool,
}

impl CheckResult {
    fn below(name: &str, residual: f64, threshold: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            residual,
            threshold,
            upper_bound: true,
            pass: residual <= threshold,
        }
    }

    fn above(name: &str, residual: f64, threshold: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            residual,
            threshold,
            upper_bound: false,
            pass: residual > threshold,
        }
    }
}

fn random_state(rng: &mut ChaCha8Rng, d: usize, n: usize) -> LandmarkState {
    loop {
        let q = DMatrix::from_fn(d, n, |_, _| rng.gen_range(-1.5..1.5));
        let p = DMatrix::from_fn(d, n, |_, _| rng.gen_range(-1.0..1.0));
        if let Ok(s) = LandmarkState::new(q, p) {
            return s;
        }
    }
}

/// Runs the whole battery. Deterministic for a fixed seed.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = vec![
        kernel_psd_check(&mut rng, KernelSpec::full(0.7), "kernel_psd_full")?,
        kernel_psd_check(
            &mut rng,
            KernelSpec::constrained(0.7, "heisenberg"),
            "kernel_psd_heisenberg",
        )?,
        kernel_symmetry_check(&mut rng)?,
        gradient_fd_check(&mut rng)?,
    ];
    results.extend(conservation_checks()?);
    results.push(pushforward_check()?);
    results.extend(abnormal_checks(&mut rng)?);
    results.push(taylor_check()?);
    results.push(matching_check()?);
    results.push(ball_box_check()?);
    results.push(moser_smoke_check()?);
    Ok(results)
}

fn kernel_psd_check(
    rng: &mut ChaCha8Rng,
    spec: KernelSpec,
    name: &str,
) -> Result<CheckResult> {
    let d = match spec.mode() {
        crate::kernel::KernelMode::FrameConstrained(id) if id == "heisenberg" => 3,
        _ => 2,
    };
    let mut worst = 0.0_f64;
    let mut done = 0;
    while done < 100 {
        let n = rng.gen_range(1..6);
        let points = DMatrix::from_fn(d, n, |_, _| rng.gen_range(-1.5..1.5));
        if check_distinct(&points).is_err() {
            continue;
        }
        done += 1;
        let g = gram_matrix(&spec, &points)?;
        let min_eig = g
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((-min_eig).max(0.0));
    }
    Ok(CheckResult::below(name, worst, 1e-12))
}

fn kernel_symmetry_check(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for spec in [KernelSpec::full(0.9), KernelSpec::constrained(0.9, "heisenberg")] {
        for _ in 0..100 {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-1.5..1.5));
            let y = DVector::from_fn(3, |_, _| rng.gen_range(-1.5..1.5));
            let p = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let q = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let lhs = kernel_apply(&spec, &x, &y, &p)?.dot(&q);
            let rhs = kernel_apply(&spec, &y, &x, &q)?.dot(&p);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(CheckResult::below("kernel_symmetry", worst, 1e-12))
}

fn gradient_fd_check(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for spec in [KernelSpec::full(0.8), KernelSpec::constrained(0.8, "grushin")] {
        for _ in 0..20 {
            let s = random_state(rng, 2, 3);
            let (dq, dp) = symplectic_gradient(&spec, &s)?;
            let h = 1e-6;
            let scale = dq.norm().max(dp.norm()).max(1.0);
            for i in 0..3 {
                for a in 0..2 {
                    let mut qp = s.positions().clone();
                    let mut qm = s.positions().clone();
                    qp[(a, i)] += h;
                    qm[(a, i)] -= h;
                    let fd = -(hamiltonian(&spec, &LandmarkState::new(qp, s.covectors().clone())?)?
                        - hamiltonian(&spec, &LandmarkState::new(qm, s.covectors().clone())?)?)
                        / (2.0 * h);
                    worst = worst.max((dp[(a, i)] - fd).abs() / scale);

                    let mut pp = s.covectors().clone();
                    let mut pm = s.covectors().clone();
                    pp[(a, i)] += h;
                    pm[(a, i)] -= h;
                    let fd = (hamiltonian(&spec, &LandmarkState::new(s.positions().clone(), pp)?)?
                        - hamiltonian(&spec, &LandmarkState::new(s.positions().clone(), pm)?)?)
                        / (2.0 * h);
                    worst = worst.max((dq[(a, i)] - fd).abs() / scale);
                }
            }
        }
    }
    Ok(CheckResult::below("gradient_finite_difference", worst, 1e-5))
}

fn conservation_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, spec, state) in presets::conservation_examples() {
        let traj = shoot(&spec, &state, 1.0, 1000)?;
        let h = traj.inner.monitor("hamiltonian").expect("monitored");
        let h0 = h[0];
        let drift = h
            .iter()
            .map(|v| (v - h0).abs())
            .fold(0.0_f64, f64::max)
            / h0.abs().max(1e-12);
        out.push(CheckResult::below(
            &format!("energy_conservation_{name}"),
            drift,
            1e-8,
        ));
    }
    Ok(out)
}

fn pushforward_check() -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for (_, spec, state) in presets::conservation_examples() {
        let seeds: Vec<DVector<f64>> = (0..state.len())
            .map(|i| state.positions().column(i).into_owned())
            .collect();
        let record = crate::flow::advect(&spec, &state, &seeds, 1.0, 1000)?;
        worst = worst.max(crate::flow::pushforward_residual(&record)?);
    }
    Ok(CheckResult::below("momentum_pushforward", worst, 1e-5))
}

fn abnormal_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let (frame, traj) = presets::grushin_singular();
    let singular = abnormal_residual(&frame, &traj)?;
    let mut min_random = f64::INFINITY;
    for _ in 0..20 {
        let spec = KernelSpec::constrained(0.8, "grushin");
        let state = random_state(rng, 2, 2);
        let t = shoot(&spec, &state, 0.5, 50)?;
        min_random = min_random.min(abnormal_residual(&frame, &t.states())?);
    }
    Ok(vec![
        CheckResult::below("abnormal_singular_grushin", singular, 1e-12),
        CheckResult::above("abnormal_random_nonsingular", min_random, 1e-3),
    ])
}

fn taylor_check() -> Result<CheckResult> {
    let frame = frame_by_id("heisenberg", 3)?;
    let point = DVector::from_column_slice(&[0.0, 0.0, 0.0]);
    let ts: Vec<f64> = (0..7).map(|k| 0.1 / 1.5_f64.powi(k)).collect();
    let mut worst = 0.0_f64;
    for (word, order) in [
        (BracketWord::new(vec![1])?, 1.0),
        (BracketWord::new(vec![2])?, 1.0),
        (BracketWord::new(vec![1, 2])?, 2.0),
        (BracketWord::new(vec![2, 1])?, 2.0),
    ] {
        let amps = vec![1.0; word.len()];
        let fit = taylor_order_check(&frame, &word, &amps, &point, &ts)?;
        if let Some(slope) = fit.slope {
            worst = worst.max((slope - order).abs());
        }
    }
    Ok(CheckResult::below("commutator_taylor_order", worst, 0.15))
}

fn matching_check() -> Result<CheckResult> {
    let outcome = match_landmarks(&presets::match_line(1.0))?;
    let residual = (outcome.p0[(0, 0)] - 0.5).abs();
    Ok(CheckResult::below("matching_closed_form", residual, 1e-6))
}

fn ball_box_check() -> Result<CheckResult> {
    let (frame, families) = presets::heisenberg_steering();
    let start = DVector::from_column_slice(&[0.0, 0.0, 0.0]);
    let vertical = DVector::from_column_slice(&[0.0, 0.0, 1.0]);
    let rows = steer_sweep(
        &frame,
        &start,
        &vertical,
        &[1e-2, 1e-3, 1e-4],
        &families,
        &SteerConfig::default(),
    )?;
    let ratios: Vec<f64> = rows.iter().map(|r| r.length_bound / r.delta.sqrt()).collect();
    let spread = ratios.iter().cloned().fold(0.0_f64, f64::max)
        / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(CheckResult::below("ball_box_vertical_spread", spread, 2.0))
}

fn moser_smoke_check() -> Result<CheckResult> {
    let frame = frame_by_id("translation", 2)?;
    let (f0, f1) = presets::moser_translation_densities(32);
    let result = moser_transport(&frame, &f0, &f1, 8)?;
    Ok(CheckResult::below("moser_translation_smoke", result.error, 5e-3))
}
