//! Point steering with bracket-generating frames: elementary horizontal
//! flows, commutator compositions, Taylor-order verification of the leading
//! bracket term, the fractionally scaled chart map, damped-Newton steering,
//! and the resulting length bounds with their box exponents.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::frame::{frame_by_id, BracketWord, FrameField};
use crate::{Error, Result};

/// Steering knobs. The length constant scales every reported bound; the
/// chart radius limits each chart coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteerConfig {
    pub chart_radius: f64,
    pub damping: f64,
    pub max_iters: usize,
    pub fd_step: f64,
    pub target_tol: f64,
    pub length_constant: f64,
}

impl Default for SteerConfig {
    fn default() -> Self {
        SteerConfig {
            chart_radius: 0.1,
            damping: 0.5,
            max_iters: 50,
            fd_step: 1e-6,
            target_tol: 1e-6,
            length_constant: 1.0,
        }
    }
}

/// Amplitude of a control: a constant, or a polynomial in position of
/// degree at most 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Amplitude {
    Constant(f64),
    Polynomial {
        constant: f64,
        linear: Vec<f64>,
        quadratic: Vec<Vec<f64>>,
    },
}

impl Amplitude {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            Amplitude::Constant(c) => *c,
            Amplitude::Polynomial {
                constant,
                linear,
                quadratic,
            } => {
                let mut acc = *constant;
                for (a, la) in linear.iter().enumerate() {
                    acc += la * x[a];
                }
                for (a, row) in quadratic.iter().enumerate() {
                    for (b, qab) in row.iter().enumerate() {
                        acc += qab * x[a] * x[b];
                    }
                }
                acc
            }
        }
    }

    /// Coefficient-sum bound used in plan lengths.
    pub fn magnitude(&self) -> f64 {
        match self {
            Amplitude::Constant(c) => c.abs(),
            Amplitude::Polynomial {
                constant,
                linear,
                quadratic,
            } => {
                constant.abs()
                    + linear.iter().map(|v| v.abs()).sum::<f64>()
                    + quadratic
                        .iter()
                        .flat_map(|row| row.iter())
                        .map(|v| v.abs())
                        .sum::<f64>()
            }
        }
    }
}

/// One elementary control: flow the `frame_index`-th field, scaled by the
/// amplitude, for the duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProfile {
    pub frame_index: usize,
    pub amplitude: Amplitude,
    pub duration: f64,
}

impl ControlProfile {
    pub fn constant(frame_index: usize, amplitude: f64, duration: f64) -> Self {
        ControlProfile {
            frame_index,
            amplitude: Amplitude::Constant(amplitude),
            duration,
        }
    }
}

/// An ordered sequence of elementary controls with the length bound of the
/// path they trace: Σ |u|·duration·C over the profiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub frame: String,
    pub profiles: Vec<ControlProfile>,
    pub total_length_bound: f64,
}

impl SteeringPlan {
    pub fn new(frame: &FrameField, profiles: Vec<ControlProfile>, constant: f64) -> Self {
        let total_length_bound = profiles
            .iter()
            .map(|p| p.amplitude.magnitude() * p.duration * constant)
            .sum();
        SteeringPlan {
            frame: frame.id().to_string(),
            profiles,
            total_length_bound,
        }
    }

    /// Applies every profile in order to the points.
    pub fn replay(&self, points: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let dim = points
            .first()
            .map(|p| p.len())
            .ok_or_else(|| Error::InvalidInput("no points".into()))?;
        let frame = frame_by_id(&self.frame, dim)?;
        let mut current = points.to_vec();
        for profile in &self.profiles {
            current = elementary_flow(&frame, profile, &current)?;
        }
        Ok(current)
    }
}

/// Integrates ẏ = u(y)·X_i(y) for the profile's duration with RK4 at 1000
/// steps per unit time, acting on each point independently.
pub fn elementary_flow(
    frame: &FrameField,
    profile: &ControlProfile,
    points: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    if profile.frame_index < 1 || profile.frame_index > frame.count() {
        return Err(Error::InvalidInput(format!(
            "frame index {} out of range 1..={}",
            profile.frame_index,
            frame.count()
        )));
    }
    if profile.duration < 0.0 {
        return Err(Error::InvalidInput("duration must be nonnegative".into()));
    }
    if profile.duration == 0.0 {
        return Ok(points.to_vec());
    }
    let steps = ((1000.0 * profile.duration).round() as usize).max(1);
    let dt = profile.duration / steps as f64;
    let j = profile.frame_index;
    let vel = |x: &DVector<f64>| frame.field(j, x) * profile.amplitude.eval(x);

    let mut out = Vec::with_capacity(points.len());
    for point in points {
        let mut y = point.clone();
        for step in 0..steps {
            let k1 = vel(&y);
            let k2 = vel(&(&y + &k1 * (0.5 * dt)));
            let k3 = vel(&(&y + &k2 * (0.5 * dt)));
            let k4 = vel(&(&y + &k3 * dt));
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            if !y.iter().all(|v| v.is_finite() && v.abs() <= crate::integrator::BLOWUP_THRESHOLD)
            {
                return Err(Error::BlowUp {
                    step,
                    partial: Box::new(crate::integrator::Trajectory::default()),
                });
            }
        }
        out.push(y);
    }
    Ok(out)
}

/// Profiles of the commutator composition for a word I = (i_1,...,i_j) at
/// time parameter t: the group commutator of the first field's flow with
/// the composition of the remaining word, nested to the right. A singleton
/// word is the plain elementary flow; a pair unfolds to the classical
/// four-flow square. The displacement of the full composition is
/// t^j·u_1···u_j·X_I to leading order, and zeroing any amplitude collapses
/// it to the identity.
pub fn commutator_profiles(
    word: &BracketWord,
    amplitudes: &[f64],
    t: f64,
) -> Result<Vec<ControlProfile>> {
    if amplitudes.len() != word.len() {
        return Err(Error::InvalidInput(format!(
            "word length {} needs as many amplitudes, got {}",
            word.len(),
            amplitudes.len()
        )));
    }
    if t < 0.0 {
        return Err(Error::InvalidInput("time must be nonnegative".into()));
    }
    Ok(nested_profiles(word.indices(), amplitudes, t))
}

fn nested_profiles(indices: &[usize], amplitudes: &[f64], t: f64) -> Vec<ControlProfile> {
    if indices.len() == 1 {
        return vec![ControlProfile::constant(indices[0], amplitudes[0], t)];
    }
    let head = ControlProfile::constant(indices[0], amplitudes[0], t);
    let inner = nested_profiles(&indices[1..], &amplitudes[1..], t);
    let mut profiles = Vec::with_capacity(2 * inner.len() + 2);
    profiles.push(head.clone());
    profiles.extend(inner.iter().cloned());
    profiles.push(ControlProfile {
        amplitude: negate(&head.amplitude),
        ..head
    });
    profiles.extend(inner.iter().rev().map(|p| ControlProfile {
        frame_index: p.frame_index,
        amplitude: negate(&p.amplitude),
        duration: p.duration,
    }));
    profiles
}

fn negate(a: &Amplitude) -> Amplitude {
    match a {
        Amplitude::Constant(c) => Amplitude::Constant(-c),
        Amplitude::Polynomial {
            constant,
            linear,
            quadratic,
        } => Amplitude::Polynomial {
            constant: -constant,
            linear: linear.iter().map(|v| -v).collect(),
            quadratic: quadratic
                .iter()
                .map(|row| row.iter().map(|v| -v).collect())
                .collect(),
        },
    }
}

/// Applies the commutator composition to the points.
pub fn commutator_flow(
    frame: &FrameField,
    word: &BracketWord,
    amplitudes: &[f64],
    t: f64,
    points: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let mut current = points.to_vec();
    for profile in commutator_profiles(word, amplitudes, t)? {
        current = elementary_flow(frame, &profile, &current)?;
    }
    Ok(current)
}

/// Least-squares fit of the displacement order of a commutator composition.
#[derive(Debug, Clone)]
pub struct TaylorOrderFit {
    /// Fitted slope of log‖displacement‖ against log t; None when fewer
    /// than two samples survive the underflow cut.
    pub slope: Option<f64>,
    /// Displacement at the smallest kept t, rescaled by t^j·Πu; estimates
    /// the iterated bracket at the point.
    pub coefficient: Option<DVector<f64>>,
    /// Largest displacement norm across the sampled times, kept or not;
    /// distinguishes genuine decay from flows that never left roundoff.
    pub max_displacement: f64,
    pub kept: usize,
    pub dropped: usize,
}

/// Measures the displacement of the commutator composition across the given
/// decreasing time values. Displacements below 10 machine epsilons are
/// dropped as underflow.
pub fn taylor_order_check(
    frame: &FrameField,
    word: &BracketWord,
    amplitudes: &[f64],
    point: &DVector<f64>,
    t_values: &[f64],
) -> Result<TaylorOrderFit> {
    if t_values.len() < 2 {
        return Err(Error::InvalidInput("need at least two time values".into()));
    }
    if t_values.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("time values must decrease".into()));
    }
    let (max, min) = (t_values[0], *t_values.last().unwrap());
    if min.is_nan() || min <= 0.0 || max / min < 10.0 {
        return Err(Error::InvalidInput(
            "time values must span at least one decade".into(),
        ));
    }

    let cut = 10.0 * f64::EPSILON;
    let mut kept_logs: Vec<(f64, f64)> = Vec::new();
    let mut smallest: Option<(f64, DVector<f64>)> = None;
    let mut dropped = 0usize;
    let mut max_displacement = 0.0_f64;
    for &t in t_values {
        let moved = commutator_flow(frame, word, amplitudes, t, std::slice::from_ref(point))?;
        let disp = &moved[0] - point;
        let norm = disp.norm();
        max_displacement = max_displacement.max(norm);
        if norm < cut {
            dropped += 1;
            continue;
        }
        kept_logs.push((t.ln(), norm.ln()));
        match &smallest {
            Some((ts, _)) if *ts <= t => {}
            _ => smallest = Some((t, disp)),
        }
    }

    let kept = kept_logs.len();
    if kept < 2 {
        return Ok(TaylorOrderFit {
            slope: None,
            coefficient: None,
            max_displacement,
            kept,
            dropped,
        });
    }
    let n = kept as f64;
    let sx: f64 = kept_logs.iter().map(|(x, _)| x).sum();
    let sy: f64 = kept_logs.iter().map(|(_, y)| y).sum();
    let sxx: f64 = kept_logs.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = kept_logs.iter().map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);

    let coefficient = smallest.map(|(t, disp)| {
        let factor = t.powi(word.len() as i32) * amplitudes.iter().product::<f64>();
        disp / factor
    });

    Ok(TaylorOrderFit {
        slope: Some(slope),
        coefficient,
        max_displacement,
        kept,
        dropped,
    })
}

/// Flattens the chart map into elementary profiles: for each family, the
/// commutator composition at t = 1 with amplitudes scaled so their product
/// is the chart coordinate and each has magnitude |u|^(1/j).
pub fn chart_profiles(
    families: &[BracketWord],
    u: &[f64],
    config: &SteerConfig,
) -> Result<Vec<ControlProfile>> {
    if families.len() != u.len() {
        return Err(Error::InvalidInput(format!(
            "{} families need as many coordinates, got {}",
            families.len(),
            u.len()
        )));
    }
    let mut profiles = Vec::new();
    for (k, (word, &uk)) in families.iter().zip(u).enumerate() {
        if uk.abs() > config.chart_radius {
            return Err(Error::OutOfChart {
                index: k,
                norm: uk.abs(),
                radius: config.chart_radius,
            });
        }
        if uk == 0.0 {
            continue;
        }
        let j = word.len();
        let scale = uk.abs().powf(1.0 / j as f64);
        let mut amplitudes = vec![scale; j];
        amplitudes[0] = uk.signum() * scale;
        profiles.extend(commutator_profiles(word, &amplitudes, 1.0)?);
    }
    Ok(profiles)
}

/// The chart map: applies the fractionally scaled commutator flows of each
/// family, in family order, to the point. Differentiable at u = 0 with the
/// family bracket values as columns of its differential.
pub fn chart_map(
    frame: &FrameField,
    families: &[BracketWord],
    u: &[f64],
    point: &DVector<f64>,
    config: &SteerConfig,
) -> Result<DVector<f64>> {
    let mut current = vec![point.clone()];
    for profile in chart_profiles(families, u, config)? {
        current = elementary_flow(frame, &profile, &current)?;
    }
    Ok(current.into_iter().next().unwrap())
}

#[derive(Debug, Clone)]
pub struct SteerOutcome {
    pub plan: SteeringPlan,
    pub achieved: DVector<f64>,
    pub chart_coords: Vec<f64>,
    pub target_error: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Damped-Newton steering of one point to a nearby target through the chart
/// map. Newton stagnation yields a non-converged outcome with the best
/// iterate rather than an error.
pub fn steer_point(
    frame: &FrameField,
    start: &DVector<f64>,
    target: &DVector<f64>,
    families: &[BracketWord],
    config: &SteerConfig,
) -> Result<SteerOutcome> {
    let d = frame.dim();
    if start.len() != d || target.len() != d {
        return Err(Error::InvalidInput("point dimension mismatch".into()));
    }
    if families.len() != d {
        return Err(Error::InvalidInput(format!(
            "need exactly {d} families spanning the tangent space, got {}",
            families.len()
        )));
    }
    if (target - start).norm() > config.chart_radius {
        return Err(Error::OutOfChart {
            index: 0,
            norm: (target - start).norm(),
            radius: config.chart_radius,
        });
    }

    let m = families.len();
    let mut u = vec![0.0_f64; m];
    let eval = |u: &[f64]| -> Result<DVector<f64>> { chart_map(frame, families, u, start, config) };
    let mut achieved = eval(&u)?;
    let mut residual = &achieved - target;
    // drive well past the acceptance threshold so leftover coordinates do
    // not pollute the fractional-power length bound
    let inner_tol = (1e-13_f64).max(1e-13 * target.norm());
    let mut iterations = 0;

    for _ in 0..config.max_iters {
        if residual.norm() <= inner_tol {
            break;
        }
        iterations += 1;
        // finite-difference Jacobian of the chart at u
        let mut jac = DMatrix::zeros(d, m);
        for k in 0..m {
            let h = config.fd_step;
            let mut up = u.clone();
            let mut dn = u.clone();
            up[k] = (up[k] + h).clamp(-config.chart_radius, config.chart_radius);
            dn[k] = (dn[k] - h).clamp(-config.chart_radius, config.chart_radius);
            let span = up[k] - dn[k];
            let col = (eval(&up)? - eval(&dn)?) / span;
            jac.set_column(k, &col);
        }
        let delta = match jac.clone().lu().solve(&residual) {
            Some(sol) => sol,
            None => break,
        };
        // backtracking damping on the residual norm
        let mut scale = 1.0_f64;
        let mut improved = false;
        while scale > 1e-6 {
            let mut candidate = u.clone();
            for k in 0..m {
                candidate[k] =
                    (candidate[k] - scale * delta[k]).clamp(-config.chart_radius, config.chart_radius);
            }
            let cand_achieved = eval(&candidate)?;
            let cand_residual = &cand_achieved - target;
            if cand_residual.norm() < residual.norm() {
                u = candidate;
                achieved = cand_achieved;
                residual = cand_residual;
                improved = true;
                break;
            }
            scale *= config.damping;
        }
        if !improved {
            break;
        }
    }

    // sub-roundoff chart coordinates are numerical zeros; keep them out of
    // the fractional-power length bound
    for uk in u.iter_mut() {
        if uk.abs() < 1e-14 {
            *uk = 0.0;
        }
    }
    let profiles = chart_profiles(families, &u, config)?;
    let plan = SteeringPlan::new(frame, profiles, config.length_constant);
    let target_error = residual.norm();
    Ok(SteerOutcome {
        plan,
        achieved,
        chart_coords: u,
        target_error,
        converged: target_error <= config.target_tol,
        iterations,
    })
}

/// One row of a steering sweep: displacement size, reached error, length
/// bound.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub delta: f64,
    pub target_error: f64,
    pub length_bound: f64,
}

/// Steers from `start` to `start + δ·direction` for each δ.
pub fn steer_sweep(
    frame: &FrameField,
    start: &DVector<f64>,
    direction: &DVector<f64>,
    deltas: &[f64],
    families: &[BracketWord],
    config: &SteerConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let target = start + direction * delta;
        let outcome = steer_point(frame, start, &target, families, config)?;
        rows.push(SweepRow {
            delta,
            target_error: outcome.target_error,
            length_bound: outcome.plan.total_length_bound,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::bracket_generating_rank;

    fn v(c: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(c)
    }

    fn heisenberg_families() -> Vec<BracketWord> {
        let frame = FrameField::Heisenberg;
        let (rank, fams) =
            bracket_generating_rank(&frame, &v(&[0.0, 0.0, 0.0]), 2).unwrap();
        assert_eq!(rank, 3);
        fams
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let frame = FrameField::Heisenberg;
        let profile = ControlProfile::constant(1, 0.0, 1.0);
        let pts = vec![v(&[0.3, -0.4, 0.9])];
        let out = elementary_flow(&frame, &profile, &pts).unwrap();
        assert_eq!(out[0], pts[0]);
    }

    #[test]
    fn heisenberg_elementary_flows_are_exact() {
        let frame = FrameField::Heisenberg;
        let out = elementary_flow(
            &frame,
            &ControlProfile::constant(1, 1.0, 1.0),
            &[v(&[0.0, 0.0, 0.0])],
        )
        .unwrap();
        assert!((out[0].clone() - v(&[1.0, 0.0, 0.0])).norm() < 1e-13);

        // flowing the second field from (c,0,0) shears the third coordinate
        let c = 0.7;
        let out = elementary_flow(
            &frame,
            &ControlProfile::constant(2, 1.0, 1.0),
            &[v(&[c, 0.0, 0.0])],
        )
        .unwrap();
        assert!((out[0].clone() - v(&[c, 1.0, c])).norm() < 1e-12);
    }

    #[test]
    fn polynomial_amplitude_flow() {
        // u(y) = y_0 on the first translation field: ẏ0 = y0, exponential
        let frame = FrameField::Translation { dim: 2 };
        let profile = ControlProfile {
            frame_index: 1,
            amplitude: Amplitude::Polynomial {
                constant: 0.0,
                linear: vec![1.0, 0.0],
                quadratic: vec![vec![0.0; 2]; 2],
            },
            duration: 1.0,
        };
        let out = elementary_flow(&frame, &profile, &[v(&[1.0, 0.5])]).unwrap();
        assert!((out[0][0] - 1.0_f64.exp()).abs() < 1e-10);
        assert_eq!(out[0][1], 0.5);
    }

    #[test]
    fn commutator_zero_time_is_identity() {
        let frame = FrameField::Heisenberg;
        let word = BracketWord::new(vec![1, 2]).unwrap();
        let pts = vec![v(&[0.1, 0.2, 0.3])];
        let out = commutator_flow(&frame, &word, &[1.0, 1.0], 0.0, &pts).unwrap();
        assert_eq!(out[0], pts[0]);
    }

    #[test]
    fn commutator_zero_amplitude_cancels() {
        let frame = FrameField::Heisenberg;
        let pts = vec![v(&[0.4, -0.1, 0.2])];
        // singleton
        let w1 = BracketWord::new(vec![2]).unwrap();
        let out = commutator_flow(&frame, &w1, &[0.0], 0.8, &pts).unwrap();
        assert!((out[0].clone() - pts[0].clone()).norm() < 1e-9);
        // pair with either amplitude zeroed
        let w2 = BracketWord::new(vec![1, 2]).unwrap();
        for amps in [[0.0, 1.0], [1.0, 0.0]] {
            let out = commutator_flow(&frame, &w2, &amps, 0.8, &pts).unwrap();
            assert!((out[0].clone() - pts[0].clone()).norm() < 1e-9);
        }
        // depth three with any single amplitude zeroed
        let w3 = BracketWord::new(vec![1, 1, 2]).unwrap();
        for amps in [[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]] {
            let out = commutator_flow(&frame, &w3, &amps, 0.5, &pts).unwrap();
            assert!(
                (out[0].clone() - pts[0].clone()).norm() < 1e-9,
                "amps {amps:?}"
            );
        }
    }

    #[test]
    fn taylor_third_order_on_the_sine_frame() {
        // [X_1,[X_1,X_2]] = (0, −4π² sin 2πx) does not vanish off the
        // characteristic lines, so the depth-3 composition is third order
        let frame = FrameField::TorusSine;
        let point = v(&[0.15, 0.4]);
        let word = BracketWord::new(vec![1, 1, 2]).unwrap();
        let ts: Vec<f64> = (0..7).map(|k| 0.08 / 1.8_f64.powi(k)).collect();
        let fit = taylor_order_check(&frame, &word, &[1.0, 1.0, 1.0], &point, &ts).unwrap();
        let slope = fit.slope.unwrap();
        assert!((2.85..=3.15).contains(&slope), "slope {slope}");
        let expect = crate::frame::iterated_bracket(&frame, &word, &point).unwrap();
        let coeff = fit.coefficient.unwrap();
        assert!(
            (coeff.clone() - &expect).norm() < 0.05 * expect.norm(),
            "{coeff:?} vs {expect:?}"
        );
    }

    #[test]
    fn heisenberg_commutator_vertical_displacement() {
        let frame = FrameField::Heisenberg;
        let word = BracketWord::new(vec![1, 2]).unwrap();
        let start = v(&[0.0, 0.0, 0.0]);
        for t in [0.1, 0.02] {
            let out =
                commutator_flow(&frame, &word, &[1.0, 1.0], t, std::slice::from_ref(&start))
                    .unwrap();
            let expect = v(&[0.0, 0.0, t * t]);
            assert!(
                (out[0].clone() - expect).norm() < 1e-10,
                "t={t}: {:?}",
                out[0]
            );
        }
    }

    #[test]
    fn taylor_orders_on_heisenberg() {
        let frame = FrameField::Heisenberg;
        let point = v(&[0.0, 0.0, 0.0]);
        let ts: Vec<f64> = (0..7).map(|k| 0.1 / 1.5_f64.powi(k)).collect();

        let word = BracketWord::new(vec![1, 2]).unwrap();
        let fit = taylor_order_check(&frame, &word, &[1.0, 1.0], &point, &ts).unwrap();
        let slope = fit.slope.unwrap();
        assert!((1.9..=2.1).contains(&slope), "slope {slope}");
        let coeff = fit.coefficient.unwrap();
        assert!((coeff - v(&[0.0, 0.0, 1.0])).norm() < 0.05);

        // singleton word: first order with the field itself
        let word = BracketWord::new(vec![1]).unwrap();
        let fit = taylor_order_check(&frame, &word, &[1.0], &point, &ts).unwrap();
        assert!((fit.slope.unwrap() - 1.0).abs() < 0.05);
        assert!((fit.coefficient.unwrap() - v(&[1.0, 0.0, 0.0])).norm() < 0.05);

        // repeated index: the bracket vanishes, displacement underflows
        let word = BracketWord::new(vec![1, 1]).unwrap();
        let fit = taylor_order_check(&frame, &word, &[1.0, 1.0], &point, &ts).unwrap();
        assert!(
            fit.slope.is_none() || fit.slope.unwrap() >= 2.9,
            "{fit:?}"
        );
    }

    #[test]
    fn taylor_check_validates_decade_span() {
        let frame = FrameField::Heisenberg;
        let word = BracketWord::new(vec![1, 2]).unwrap();
        let err = taylor_order_check(
            &frame,
            &word,
            &[1.0, 1.0],
            &v(&[0.0, 0.0, 0.0]),
            &[0.1, 0.05],
        );
        assert!(err.is_err());
    }

    #[test]
    fn chart_map_at_zero_and_out_of_chart() {
        let frame = FrameField::Heisenberg;
        let families = heisenberg_families();
        let config = SteerConfig::default();
        let point = v(&[0.2, 0.1, -0.3]);
        let out = chart_map(&frame, &families, &[0.0, 0.0, 0.0], &point, &config).unwrap();
        assert_eq!(out, point);
        let err = chart_map(&frame, &families, &[0.0, 0.2, 0.0], &point, &config);
        assert!(matches!(err, Err(Error::OutOfChart { index: 1, .. })));
    }

    #[test]
    fn chart_map_third_coordinate_moves_vertically() {
        let frame = FrameField::Heisenberg;
        let families = heisenberg_families();
        let config = SteerConfig::default();
        let point = v(&[0.0, 0.0, 0.0]);
        let eps = 1e-3;
        let out = chart_map(&frame, &families, &[0.0, 0.0, eps], &point, &config).unwrap();
        let disp = out - &point;
        assert!((disp.clone() - v(&[0.0, 0.0, eps])).norm() < 0.1 * eps, "{disp:?}");
    }

    #[test]
    fn chart_differential_matches_family_brackets() {
        for frame in [FrameField::Heisenberg, FrameField::Grushin] {
            let d = frame.dim();
            let point = DVector::from_fn(d, |a, _| 0.15 + 0.2 * a as f64);
            let (rank, families) = bracket_generating_rank(&frame, &point, 2).unwrap();
            assert_eq!(rank, d);
            let config = SteerConfig::default();
            for (k, word) in families.iter().enumerate() {
                let h = if word.len() == 1 { 1e-6 } else { 1e-9 };
                let mut up = vec![0.0; d];
                let mut dn = vec![0.0; d];
                up[k] = h;
                dn[k] = -h;
                let col = (chart_map(&frame, &families, &up, &point, &config).unwrap()
                    - chart_map(&frame, &families, &dn, &point, &config).unwrap())
                    / (2.0 * h);
                let expect = crate::frame::iterated_bracket(&frame, word, &point).unwrap();
                assert!(
                    (col.clone() - &expect).norm() <= 1e-4 * expect.norm().max(1.0),
                    "family {k} of {}: {col:?} vs {expect:?}",
                    frame.id()
                );
            }
        }
    }

    #[test]
    fn steer_to_self_is_empty_plan() {
        let frame = FrameField::Heisenberg;
        let families = heisenberg_families();
        let start = v(&[0.1, -0.2, 0.05]);
        let outcome =
            steer_point(&frame, &start, &start, &families, &SteerConfig::default()).unwrap();
        assert!(outcome.converged);
        assert!(outcome.plan.profiles.is_empty());
        assert_eq!(outcome.plan.total_length_bound, 0.0);
    }

    #[test]
    fn steer_vertical_and_replay() {
        let frame = FrameField::Heisenberg;
        let families = heisenberg_families();
        let config = SteerConfig::default();
        let start = v(&[0.0, 0.0, 0.0]);
        let target = v(&[0.0, 0.0, 0.01]);
        let outcome = steer_point(&frame, &start, &target, &families, &config).unwrap();
        assert!(outcome.converged, "error {}", outcome.target_error);
        assert!(outcome.target_error <= 1e-6);

        // the plan replays to the achieved endpoint
        let replayed = outcome.plan.replay(std::slice::from_ref(&start)).unwrap();
        assert!((replayed[0].clone() - &outcome.achieved).norm() < 1e-9);
    }

    #[test]
    fn ball_box_exponents() {
        let frame = FrameField::Heisenberg;
        let families = heisenberg_families();
        let config = SteerConfig::default();
        let start = v(&[0.0, 0.0, 0.0]);
        let deltas = [1e-2, 1e-3, 1e-4];

        // vertical direction: bound ~ sqrt(delta)
        let rows = steer_sweep(&frame, &start, &v(&[0.0, 0.0, 1.0]), &deltas, &families, &config)
            .unwrap();
        let ratios: Vec<f64> = rows
            .iter()
            .map(|r| r.length_bound / r.delta.sqrt())
            .collect();
        let spread = ratios.iter().cloned().fold(0.0_f64, f64::max)
            / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 2.0, "vertical ratios {ratios:?}");

        // horizontal direction: bound ~ delta
        let rows = steer_sweep(&frame, &start, &v(&[1.0, 0.0, 0.0]), &deltas, &families, &config)
            .unwrap();
        let ratios: Vec<f64> = rows.iter().map(|r| r.length_bound / r.delta).collect();
        let spread = ratios.iter().cloned().fold(0.0_f64, f64::max)
            / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 2.0, "horizontal ratios {ratios:?}");
    }

    #[test]
    fn steering_plan_json_round_trip() {
        let frame = FrameField::Heisenberg;
        let plan = SteeringPlan::new(
            &frame,
            vec![
                ControlProfile::constant(1, 0.5, 1.0),
                ControlProfile::constant(2, -0.25, 2.0),
            ],
            1.0,
        );
        assert!((plan.total_length_bound - 1.0).abs() < 1e-15);
        let json = serde_json::to_string(&plan).unwrap();
        let back: SteeringPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back.profiles, plan.profiles);
        assert_eq!(back.frame, "heisenberg");
    }
}
