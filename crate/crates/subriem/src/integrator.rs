//! Deterministic fixed-step explicit RK4 on flat state vectors, with
//! per-step monitor records and blow-up detection.

use nalgebra::DVector;
use serde::Serialize;

use crate::{Error, Result};

/// Any state component beyond this magnitude (or non-finite) aborts the
/// integration.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Default resolution: steps per unit of integration time.
pub const DEFAULT_STEPS_PER_UNIT_TIME: u32 = 1000;

/// Right-hand side of an autonomous-in-form ODE ẏ = f(t, y).
pub trait OdeRhs {
    fn eval(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<F> OdeRhs for F
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    fn eval(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        self(t, y)
    }
}

pub type MonitorFn<'a> = Box<dyn Fn(f64, &DVector<f64>) -> f64 + 'a>;

/// A named scalar recorded at every step of a trajectory.
pub struct Monitor<'a> {
    pub name: String,
    pub eval: MonitorFn<'a>,
}

impl<'a> Monitor<'a> {
    pub fn new(name: impl Into<String>, eval: impl Fn(f64, &DVector<f64>) -> f64 + 'a) -> Self {
        Monitor {
            name: name.into(),
            eval: Box::new(eval),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MonitorSeries {
    pub name: String,
    pub values: Vec<f64>,
}

/// Uniformly sampled states from 0 to T, one monitor value per sample.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub monitors: Vec<MonitorSeries>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("nonempty trajectory")
    }

    pub fn monitor(&self, name: &str) -> Option<&[f64]> {
        self.monitors
            .iter()
            .find(|m| m.name == name)
            .map(|m| m.values.as_slice())
    }
}

/// One classical 4-stage explicit step.
pub fn rk4_step<R: OdeRhs>(rhs: &R, t: f64, y: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
    let k1 = rhs.eval(t, y)?;
    let k2 = rhs.eval(t + 0.5 * dt, &(y + &k1 * (0.5 * dt)))?;
    let k3 = rhs.eval(t + 0.5 * dt, &(y + &k2 * (0.5 * dt)))?;
    let k4 = rhs.eval(t + dt, &(y + &k3 * dt))?;
    let next = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if !state_ok(&next) {
        return Err(Error::BlowUp {
            step: 0,
            partial: Box::new(Trajectory::default()),
        });
    }
    Ok(next)
}

pub(crate) fn state_ok(y: &DVector<f64>) -> bool {
    y.iter().all(|v| v.is_finite() && v.abs() <= BLOWUP_THRESHOLD)
}

/// Integrates from t=0 to t=T in `steps` uniform RK4 steps, recording every
/// state and monitor value. A blow-up error carries the partial trajectory.
pub fn integrate<R: OdeRhs>(
    rhs: &R,
    y0: &DVector<f64>,
    t_final: f64,
    steps: usize,
    monitors: &[Monitor],
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be >= 1".into()));
    }
    if !state_ok(y0) {
        return Err(Error::InvalidInput("initial state is not finite".into()));
    }

    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        monitors: monitors
            .iter()
            .map(|m| MonitorSeries {
                name: m.name.clone(),
                values: Vec::with_capacity(steps + 1),
            })
            .collect(),
    };

    let record = |traj: &mut Trajectory, t: f64, y: &DVector<f64>| {
        traj.times.push(t);
        traj.states.push(y.clone());
        for (series, monitor) in traj.monitors.iter_mut().zip(monitors) {
            series.values.push((monitor.eval)(t, y));
        }
    };

    record(&mut traj, 0.0, y0);
    if t_final == 0.0 {
        return Ok(traj);
    }

    let dt = t_final / steps as f64;
    let mut y = y0.clone();
    for k in 0..steps {
        let t = k as f64 * dt;
        match rk4_step(rhs, t, &y, dt) {
            Ok(next) => y = next,
            Err(Error::BlowUp { .. }) => {
                return Err(Error::BlowUp {
                    step: k,
                    partial: Box::new(traj),
                })
            }
            Err(e) => return Err(e),
        }
        record(&mut traj, (k + 1) as f64 * dt, &y);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_rhs(_: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(y.len()))
    }

    #[test]
    fn zero_rhs_fixes_state() {
        let y = DVector::from_column_slice(&[1.0, -2.0]);
        let next = rk4_step(&zero_rhs, 0.0, &y, 0.3).unwrap();
        assert_eq!(next, y);
    }

    #[test]
    fn exponential_local_accuracy() {
        let rhs = |_t: f64, y: &DVector<f64>| Ok(y.clone());
        let y = DVector::from_column_slice(&[1.0]);
        let next = rk4_step(&rhs, 0.0, &y, 0.1).unwrap();
        assert!((next[0] - 0.1_f64.exp()).abs() < 1e-7);
    }

    #[test]
    fn t_zero_returns_initial_state_only() {
        let y = DVector::from_column_slice(&[4.0]);
        let traj = integrate(&zero_rhs, &y, 0.0, 10, &[]).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.states[0], y);
        assert_eq!(traj.times, vec![0.0]);
    }

    #[test]
    fn monitors_are_recorded_each_step() {
        let rhs = |_t: f64, y: &DVector<f64>| Ok(y.clone());
        let y = DVector::from_column_slice(&[1.0]);
        let monitors = [Monitor::new("value", |_t, y: &DVector<f64>| y[0])];
        let traj = integrate(&rhs, &y, 1.0, 100, &monitors).unwrap();
        let series = traj.monitor("value").unwrap();
        assert_eq!(series.len(), 101);
        assert!((series[100] - 1.0_f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn blow_up_carries_partial_trajectory() {
        // doubling each step overflows the threshold quickly
        let rhs = |_t: f64, y: &DVector<f64>| Ok(y * 60.0);
        let y = DVector::from_column_slice(&[1.0]);
        match integrate(&rhs, &y, 10.0, 10, &[]) {
            Err(Error::BlowUp { step, partial }) => {
                assert!(step < 10);
                assert_eq!(partial.len(), step + 1);
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let rhs = |t: f64, y: &DVector<f64>| {
            Ok(DVector::from_fn(y.len(), |i, _| (y[i] * 0.7 + t).sin()))
        };
        let y = DVector::from_column_slice(&[0.3, 0.9, -1.1]);
        let a = integrate(&rhs, &y, 2.0, 200, &[]).unwrap();
        let b = integrate(&rhs, &y, 2.0, 200, &[]).unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            for (va, vb) in sa.iter().zip(sb.iter()) {
                assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
    }
}
