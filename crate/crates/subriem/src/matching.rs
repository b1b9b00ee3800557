//! Inexact landmark matching by geodesic shooting: the penalized objective,
//! its exact discrete gradient through a reverse sweep over the RK4
//! trajectory, and a backtracking gradient descent from zero momentum.
//!
//! The objective is J(p0) = 2·h(q0, p0) + λ Σ_i |q_i(1) − target_i|². For a
//! geodesic the action integral equals the conserved initial value 2·h(0),
//! so no quadrature in time is needed. At a minimizer the final covector
//! satisfies p_i(1) = λ(target_i − q_i(1)).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::hamiltonian::{
    hamiltonian, rhs_vjp, shoot, symplectic_gradient, LandmarkState, LandmarkTrajectory,
};
use crate::kernel::KernelSpec;
use crate::{Error, Result};

/// Gradient-descent settings: backtracking line search with Armijo control.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Optimizer {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Line-search shrink factor.
    pub shrink: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer {
            max_iters: 500,
            grad_tol: 1e-6,
            shrink: 0.5,
            armijo: 1e-4,
        }
    }
}

/// A source/target landmark pair with kernel, penalty weight and
/// discretization.
#[derive(Debug, Clone)]
pub struct MatchProblem {
    pub q0: DMatrix<f64>,
    pub q_target: DMatrix<f64>,
    pub spec: KernelSpec,
    pub lambda: f64,
    pub steps: usize,
    pub optimizer: Optimizer,
}

impl MatchProblem {
    pub fn validate(&self) -> Result<()> {
        if self.q0.shape() != self.q_target.shape() {
            return Err(Error::InvalidInput(format!(
                "source shape {:?} does not match target shape {:?}",
                self.q0.shape(),
                self.q_target.shape()
            )));
        }
        if self.lambda.is_nan() || self.lambda <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "penalty weight must be positive, got {}",
                self.lambda
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidInput("steps must be >= 1".into()));
        }
        crate::kernel::check_distinct(&self.q0)?;
        Ok(())
    }

    fn state(&self, p0: &DMatrix<f64>) -> Result<LandmarkState> {
        LandmarkState::new(self.q0.clone(), p0.clone())
    }
}

// JSON form keeps the matrices as row-per-landmark lists.
#[derive(Serialize, Deserialize)]
struct MatchProblemRepr {
    q0: Vec<Vec<f64>>,
    q_target: Vec<Vec<f64>>,
    kernel: KernelSpec,
    lambda: f64,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default)]
    optimizer: Option<Optimizer>,
}

fn default_steps() -> usize {
    1000
}

impl Serialize for MatchProblem {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.ncols())
                .map(|i| m.column(i).iter().cloned().collect())
                .collect()
        };
        MatchProblemRepr {
            q0: rows(&self.q0),
            q_target: rows(&self.q_target),
            kernel: self.spec.clone(),
            lambda: self.lambda,
            steps: self.steps,
            optimizer: Some(self.optimizer.clone()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MatchProblem {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MatchProblemRepr::deserialize(d)?;
        let to_matrix = |rows: &[Vec<f64>]| -> std::result::Result<DMatrix<f64>, D::Error> {
            let n = rows.len();
            if n == 0 {
                return Err(serde::de::Error::custom("empty landmark list"));
            }
            let dim = rows[0].len();
            if rows.iter().any(|r| r.len() != dim) {
                return Err(serde::de::Error::custom("ragged landmark rows"));
            }
            Ok(DMatrix::from_fn(dim, n, |a, i| rows[i][a]))
        };
        let problem = MatchProblem {
            q0: to_matrix(&repr.q0)?,
            q_target: to_matrix(&repr.q_target)?,
            spec: repr.kernel,
            lambda: repr.lambda,
            steps: repr.steps,
            optimizer: repr.optimizer.unwrap_or_default(),
        };
        problem.validate().map_err(serde::de::Error::custom)?;
        Ok(problem)
    }
}

/// J(p0) = 2h(q0,p0) + λ Σ |q_i(1) − target_i|².
pub fn shoot_objective(prob: &MatchProblem, p0: &DMatrix<f64>) -> Result<f64> {
    prob.validate()?;
    let state0 = prob.state(p0)?;
    let action = 2.0 * hamiltonian(&prob.spec, &state0)?;
    let traj = shoot(&prob.spec, &state0, 1.0, prob.steps)?;
    let end = traj.landmark_state(traj.len() - 1);
    Ok(action + prob.lambda * mismatch(end.positions(), &prob.q_target))
}

fn mismatch(q: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    (q - target).iter().map(|v| v * v).sum()
}

/// Exact gradient of [`shoot_objective`] with respect to the initial
/// covectors: a reverse sweep over the stored RK4 stages
/// (differentiate-the-discretization).
pub fn shoot_gradient(prob: &MatchProblem, p0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    prob.validate()?;
    let d = prob.q0.nrows();
    let n = prob.q0.ncols();
    let state0 = prob.state(p0)?;
    let traj = shoot(&prob.spec, &state0, 1.0, prob.steps)?;
    let dt = 1.0 / prob.steps as f64;

    // endpoint cotangent: λ·∂|q(1)−target|²/∂q(1), nothing on p(1)
    let end = traj.landmark_state(traj.len() - 1);
    let mut lam_q = (end.positions() - &prob.q_target) * (2.0 * prob.lambda);
    let mut lam_p = DMatrix::zeros(d, n);

    // sweep the steps backwards, transposing each RK4 update
    for k in (0..prob.steps).rev() {
        let state = traj.landmark_state(k);
        let (aq, ap) = rk4_step_vjp(&prob.spec, &state, dt, &lam_q, &lam_p)?;
        lam_q = aq;
        lam_p = ap;
    }

    // action term: 2h contributes 2·∂h/∂p0 = 2·dq(q0,p0)
    let (dq0, _) = symplectic_gradient(&prob.spec, &state0)?;
    Ok(lam_p + dq0 * 2.0)
}

/// Transposed one-step update: given the cotangent of the step output,
/// accumulates the cotangent of the step input by recomputing the forward
/// stages and applying the analytic right-hand-side transpose at each one.
fn rk4_step_vjp(
    spec: &KernelSpec,
    state: &LandmarkState,
    dt: f64,
    out_q: &DMatrix<f64>,
    out_p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let t = state.time();
    let q = state.positions().clone();
    let p = state.covectors().clone();

    // forward stages
    let (k1q, k1p) = symplectic_gradient(spec, state)?;
    let z2 = LandmarkState::unpack_raw(t, &q + &k1q * (0.5 * dt), &p + &k1p * (0.5 * dt));
    let (k2q, k2p) = symplectic_gradient(spec, &z2)?;
    let z3 = LandmarkState::unpack_raw(t, &q + &k2q * (0.5 * dt), &p + &k2p * (0.5 * dt));
    let (k3q, k3p) = symplectic_gradient(spec, &z3)?;
    let z4 = LandmarkState::unpack_raw(t, &q + &k3q * dt, &p + &k3p * dt);

    let sixth = dt / 6.0;

    // stage 4 cotangent
    let a4q = out_q * sixth;
    let a4p = out_p * sixth;
    let (v4q, v4p) = rhs_vjp(spec, &z4, &a4q, &a4p)?;

    // stage 3: weight 2, plus dt-coupling from stage 4
    let a3q = out_q * (2.0 * sixth) + &v4q * dt;
    let a3p = out_p * (2.0 * sixth) + &v4p * dt;
    let (v3q, v3p) = rhs_vjp(spec, &z3, &a3q, &a3p)?;

    // stage 2: weight 2, plus dt/2-coupling from stage 3
    let a2q = out_q * (2.0 * sixth) + &v3q * (0.5 * dt);
    let a2p = out_p * (2.0 * sixth) + &v3p * (0.5 * dt);
    let (v2q, v2p) = rhs_vjp(spec, &z2, &a2q, &a2p)?;

    // stage 1: weight 1, plus dt/2-coupling from stage 2
    let a1q = out_q * sixth + &v2q * (0.5 * dt);
    let a1p = out_p * sixth + &v2p * (0.5 * dt);
    let (v1q, v1p) = rhs_vjp(spec, state, &a1q, &a1p)?;

    Ok((
        out_q + v1q + v2q + v3q + v4q,
        out_p + v1p + v2p + v3p + v4p,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_objective: f64,
    pub grad_norm: f64,
    /// max_i |p_i(1) − λ(target_i − q_i(1))| / λ.
    pub transversality_residual: f64,
    pub endpoint_mismatch: f64,
    pub log: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub p0: DMatrix<f64>,
    pub trajectory: LandmarkTrajectory,
    pub report: MatchReport,
}

/// Gradient descent with backtracking line search, started from zero
/// momentum. Hitting `max_iters` yields a non-converged report, not an
/// error.
pub fn match_landmarks(prob: &MatchProblem) -> Result<MatchOutcome> {
    prob.validate()?;
    let d = prob.q0.nrows();
    let n = prob.q0.ncols();
    let opt = &prob.optimizer;

    let mut p0 = DMatrix::zeros(d, n);
    let mut objective = shoot_objective(prob, &p0)?;
    let mut log = Vec::new();
    let mut eta = 1.0_f64;
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::NAN;

    for iter in 0..opt.max_iters {
        iterations = iter;
        let grad = shoot_gradient(prob, &p0)?;
        grad_norm = grad.norm();
        if grad_norm <= opt.grad_tol {
            converged = true;
            break;
        }
        // backtracking with a mildly growing initial step
        eta = (eta * 2.0).min(1e3);
        let mut accepted = false;
        while eta > 1e-16 {
            let candidate = &p0 - &grad * eta;
            let value = shoot_objective(prob, &candidate)?;
            if value <= objective - opt.armijo * eta * grad_norm * grad_norm {
                p0 = candidate;
                objective = value;
                accepted = true;
                break;
            }
            eta *= opt.shrink;
        }
        log.push(IterationRecord {
            iteration: iter,
            objective,
            grad_norm,
            step_size: eta,
        });
        if !accepted {
            break; // line search stagnated at machine precision
        }
    }
    if !converged {
        // stagnation can still mean the gradient criterion holds
        let grad = shoot_gradient(prob, &p0)?;
        grad_norm = grad.norm();
        converged = grad_norm <= opt.grad_tol;
    }

    let trajectory = shoot(&prob.spec, &prob.state(&p0)?, 1.0, prob.steps)?;
    let end = trajectory.landmark_state(trajectory.len() - 1);
    let transversality_residual = transversality(prob, &end);
    let endpoint_mismatch = mismatch(end.positions(), &prob.q_target);

    Ok(MatchOutcome {
        p0,
        trajectory,
        report: MatchReport {
            converged,
            iterations,
            final_objective: objective,
            grad_norm,
            transversality_residual,
            endpoint_mismatch,
            log,
        },
    })
}

/// max_i |p_i(1) − λ(target_i − q_i(1))| / λ.
fn transversality(prob: &MatchProblem, end: &LandmarkState) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..end.len() {
        let expected = (prob.q_target.column(i) - end.positions().column(i)) * prob.lambda;
        worst = worst.max((end.covectors().column(i) - expected).norm());
    }
    worst / prob.lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem_1d(lambda: f64) -> MatchProblem {
        MatchProblem {
            q0: DMatrix::from_column_slice(1, 1, &[0.0]),
            q_target: DMatrix::from_column_slice(1, 1, &[1.0]),
            spec: KernelSpec::full(1.0),
            lambda,
            steps: 200,
            optimizer: Optimizer {
                grad_tol: 1e-10,
                ..Optimizer::default()
            },
        }
    }

    fn crossing_pair(lambda: f64) -> MatchProblem {
        crate::presets::match_crossing_pair(lambda)
    }

    #[test]
    fn zero_momentum_objective_is_pure_penalty() {
        let prob = problem_1d(2.5);
        let p0 = DMatrix::zeros(1, 1);
        let val = shoot_objective(&prob, &p0).unwrap();
        assert!((val - 2.5).abs() < 1e-12);
    }

    #[test]
    fn coincident_targets_give_zero_minimum() {
        let mut prob = problem_1d(1.0);
        prob.q_target = prob.q0.clone();
        let p0 = DMatrix::zeros(1, 1);
        assert!(shoot_objective(&prob, &p0).unwrap().abs() < 1e-15);
        assert!(shoot_gradient(&prob, &p0).unwrap().norm() < 1e-15);
        let outcome = match_landmarks(&prob).unwrap();
        assert!(outcome.report.converged);
        assert!(outcome.p0.norm() < 1e-12);
    }

    #[test]
    fn one_dimensional_closed_form() {
        // single landmark: objective(a) = a² + λ(a−1)², optimum λ/(1+λ)
        let lambda = 1.0;
        let prob = problem_1d(lambda);
        for a in [0.2, 0.5, 0.9] {
            let p0 = DMatrix::from_column_slice(1, 1, &[a]);
            let val = shoot_objective(&prob, &p0).unwrap();
            let expect = a * a + lambda * (a - 1.0) * (a - 1.0);
            assert!((val - expect).abs() < 1e-10, "objective at {a}");
        }
        let best = DMatrix::from_column_slice(1, 1, &[lambda / (1.0 + lambda)]);
        assert!(shoot_gradient(&prob, &best).unwrap().norm() < 1e-6);

        let outcome = match_landmarks(&prob).unwrap();
        assert!(outcome.report.converged);
        assert!((outcome.p0[(0, 0)] - 0.5).abs() < 1e-6);
        let end = outcome
            .trajectory
            .landmark_state(outcome.trajectory.len() - 1);
        assert!((end.positions()[(0, 0)] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for spec in [
            KernelSpec::full(0.5),
            KernelSpec::constrained(0.5, "grushin"),
        ] {
            for _ in 0..5 {
                let n = rng.gen_range(1..4);
                let prob = MatchProblem {
                    q0: DMatrix::from_fn(2, n, |_, _| rng.gen_range(-1.0..1.0)),
                    q_target: DMatrix::from_fn(2, n, |_, _| rng.gen_range(-1.0..1.0)),
                    spec: spec.clone(),
                    lambda: rng.gen_range(0.5..5.0),
                    steps: 50,
                    optimizer: Optimizer::default(),
                };
                if prob.validate().is_err() {
                    continue;
                }
                let p0 = DMatrix::from_fn(2, n, |_, _| rng.gen_range(-0.8..0.8));
                let grad = shoot_gradient(&prob, &p0).unwrap();
                let h = 1e-5;
                for i in 0..n {
                    for a in 0..2 {
                        let mut plus = p0.clone();
                        let mut minus = p0.clone();
                        plus[(a, i)] += h;
                        minus[(a, i)] -= h;
                        let fd = (shoot_objective(&prob, &plus).unwrap()
                            - shoot_objective(&prob, &minus).unwrap())
                            / (2.0 * h);
                        let rel = (grad[(a, i)] - fd).abs() / fd.abs().max(1.0);
                        assert!(rel < 1e-4, "({a},{i}) {} vs {fd}", grad[(a, i)]);
                    }
                }
            }
        }
    }

    #[test]
    fn transversality_at_convergence() {
        let prob = crossing_pair(10.0);
        let outcome = match_landmarks(&prob).unwrap();
        assert!(outcome.report.converged, "{:?}", outcome.report.grad_norm);
        assert!(
            outcome.report.transversality_residual <= 10.0 * prob.optimizer.grad_tol,
            "residual {}",
            outcome.report.transversality_residual
        );
    }

    #[test]
    fn objective_monotone_along_accepted_iterations() {
        let prob = crossing_pair(5.0);
        let outcome = match_landmarks(&prob).unwrap();
        let values: Vec<f64> = outcome.report.log.iter().map(|r| r.objective).collect();
        for w in values.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn endpoint_mismatch_decreases_with_lambda() {
        let mut last = f64::INFINITY;
        for lambda in [0.1, 1.0, 10.0, 100.0] {
            let outcome = match_landmarks(&crossing_pair(lambda)).unwrap();
            assert!(
                outcome.report.endpoint_mismatch <= last * (1.0 + 1e-9),
                "mismatch grew at λ={lambda}"
            );
            last = outcome.report.endpoint_mismatch;
        }
    }

    #[test]
    fn matched_geodesic_time_reverses() {
        // negating the optimal final covector and flowing back reproduces the
        // matched path
        let prob = crossing_pair(10.0);
        let outcome = match_landmarks(&prob).unwrap();
        let end = outcome
            .trajectory
            .landmark_state(outcome.trajectory.len() - 1);
        let reversed_start =
            LandmarkState::new(end.positions().clone(), -end.covectors().clone()).unwrap();
        let back = shoot(&prob.spec, &reversed_start, 1.0, prob.steps).unwrap();
        let m = back.len() - 1;
        for k in 0..=m {
            let fwd = outcome.trajectory.landmark_state(m - k);
            let bwd = back.landmark_state(k);
            assert!(
                (fwd.positions() - bwd.positions()).norm() < 1e-4,
                "position mismatch at sample {k}"
            );
            assert!((fwd.covectors() + bwd.covectors()).norm() < 1e-4);
        }
    }

    #[test]
    fn match_problem_json_round_trip() {
        let prob = crossing_pair(3.0);
        let json = serde_json::to_string(&prob).unwrap();
        let back: MatchProblem = serde_json::from_str(&json).unwrap();
        assert_eq!(back.q0, prob.q0);
        assert_eq!(back.q_target, prob.q_target);
        assert_eq!(back.lambda, prob.lambda);
        assert_eq!(back.steps, prob.steps);
    }
}
