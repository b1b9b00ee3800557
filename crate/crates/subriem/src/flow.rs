//! Full particle flows driven by landmark momenta: passive seeds, Jacobian
//! transport through the variational equation, the momentum pushforward
//! identity, and Lagrangian density transport.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::grid::GridField;
use crate::hamiltonian::{
    field_from_momenta, field_jacobian, symplectic_gradient, LandmarkState,
};
use crate::integrator::{self, Monitor};
use crate::kernel::KernelSpec;
use crate::{Error, Result};

/// Time-sampled passive-particle paths with per-particle Jacobians, together
/// with the driving landmark trajectory.
#[derive(Debug, Clone)]
pub struct FlowRecord {
    pub times: Vec<f64>,
    pub landmarks: Vec<LandmarkState>,
    /// `paths[i][k]`: position of particle i at time sample k.
    pub paths: Vec<Vec<DVector<f64>>>,
    /// `jacobians[i][k]`: Dφ at particle i, time sample k (identity at k = 0).
    pub jacobians: Vec<Vec<DMatrix<f64>>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowSummary {
    pub particles: usize,
    pub steps: usize,
    pub pushforward_residual: Option<f64>,
    pub det_min: f64,
    pub det_max: f64,
}

impl FlowRecord {
    pub fn particle_count(&self) -> usize {
        self.paths.len()
    }

    pub fn sample_count(&self) -> usize {
        self.times.len()
    }

    pub fn final_position(&self, particle: usize) -> &DVector<f64> {
        self.paths[particle].last().expect("nonempty path")
    }

    pub fn final_jacobian(&self, particle: usize) -> &DMatrix<f64> {
        self.jacobians[particle].last().expect("nonempty path")
    }

    pub fn det_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for jac_path in &self.jacobians {
            for j in jac_path {
                let det = j.determinant();
                lo = lo.min(det);
                hi = hi.max(det);
            }
        }
        (lo, hi)
    }

    /// One row per (time, particle): t, particle id, position components.
    pub fn paths_to_csv(&self) -> String {
        let dim = self.paths.first().map(|p| p[0].len()).unwrap_or(0);
        let mut out = String::from("t,particle");
        for a in 0..dim {
            out.push_str(&format!(",x{a}"));
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            for (i, path) in self.paths.iter().enumerate() {
                out.push_str(&format!("{t},{i}"));
                for v in path[k].iter() {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn summary(&self) -> FlowSummary {
        let (det_min, det_max) = self.det_range();
        FlowSummary {
            particles: self.particle_count(),
            steps: self.sample_count().saturating_sub(1),
            pushforward_residual: pushforward_residual(self).ok(),
            det_min,
            det_max,
        }
    }
}

/// Integrates the coupled system: landmark geodesics, passive seeds
/// ẏ = X(t, y), and the variational equation J̇ = DX(t, y)·J with the
/// analytic field Jacobian.
pub fn advect(
    spec: &KernelSpec,
    state0: &LandmarkState,
    seeds: &[DVector<f64>],
    t_final: f64,
    steps: usize,
) -> Result<FlowRecord> {
    let d = state0.dim();
    let n = state0.len();
    if seeds.iter().any(|s| s.len() != d || s.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput(
            "seeds must be finite and of the landmark dimension".into(),
        ));
    }
    let m = seeds.len();
    let nd = d * n;
    let block = d + d * d; // position + jacobian per seed
    let mut y0 = DVector::zeros(2 * nd + m * block);
    y0.rows_mut(0, nd).copy_from_slice(state0.positions().as_slice());
    y0.rows_mut(nd, nd).copy_from_slice(state0.covectors().as_slice());
    for (i, seed) in seeds.iter().enumerate() {
        let off = 2 * nd + i * block;
        y0.rows_mut(off, d).copy_from(seed);
        let eye = DMatrix::<f64>::identity(d, d);
        y0.rows_mut(off + d, d * d).copy_from_slice(eye.as_slice());
    }

    let spec_c = spec.clone();
    let rhs = move |t: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let state = LandmarkState::unpack(t, d, n, y);
        let (dq, dp) = symplectic_gradient(&spec_c, &state)?;
        let mut out = DVector::zeros(y.len());
        out.rows_mut(0, nd).copy_from_slice(dq.as_slice());
        out.rows_mut(nd, nd).copy_from_slice(dp.as_slice());
        for i in 0..m {
            let off = 2 * nd + i * block;
            let pos = y.rows(off, d).into_owned();
            let vel = field_from_momenta(&spec_c, &state, &pos)?;
            out.rows_mut(off, d).copy_from(&vel);
            let dx = field_jacobian(&spec_c, &state, &pos)?;
            let jac = DMatrix::from_column_slice(d, d, &y.as_slice()[off + d..off + d + d * d]);
            let djac = dx * jac;
            out.rows_mut(off + d, d * d).copy_from_slice(djac.as_slice());
        }
        Ok(out)
    };

    let spec_h = spec.clone();
    let monitors = [Monitor::new("hamiltonian", move |t, y: &DVector<f64>| {
        let st = LandmarkState::unpack(t, d, n, y);
        crate::hamiltonian::hamiltonian(&spec_h, &st).unwrap_or(f64::NAN)
    })];
    let traj = integrator::integrate(&rhs, &y0, t_final, steps, &monitors)?;

    let samples = traj.len();
    let mut landmarks = Vec::with_capacity(samples);
    let mut paths = vec![Vec::with_capacity(samples); m];
    let mut jacobians = vec![Vec::with_capacity(samples); m];
    for k in 0..samples {
        let y = &traj.states[k];
        landmarks.push(LandmarkState::unpack(traj.times[k], d, n, y));
        for i in 0..m {
            let off = 2 * nd + i * block;
            paths[i].push(y.rows(off, d).into_owned());
            jacobians[i].push(DMatrix::from_column_slice(
                d,
                d,
                &y.as_slice()[off + d..off + d + d * d],
            ));
        }
    }
    Ok(FlowRecord {
        times: traj.times,
        landmarks,
        paths,
        jacobians,
    })
}

/// Residual of the momentum transport identity: for each landmark i and time
/// sample, |p_i(t)·J_i(t) − p_i(0)| / |p_i(0)|, maximized. Requires the first
/// n seeds to sit at the initial landmark positions.
pub fn pushforward_residual(record: &FlowRecord) -> Result<f64> {
    let first = record
        .landmarks
        .first()
        .ok_or_else(|| Error::InvalidInput("empty flow record".into()))?;
    let n = first.len();
    if record.paths.len() < n {
        return Err(Error::Configuration(format!(
            "flow record has {} particles but the driving system has {n} landmarks; \
             seed the landmark base points first",
            record.paths.len()
        )));
    }
    for i in 0..n {
        if (&record.paths[i][0] - first.positions().column(i)).norm() > 1e-12 {
            return Err(Error::Configuration(format!(
                "particle {i} does not start at landmark {i}"
            )));
        }
    }
    let mut worst = 0.0_f64;
    for i in 0..n {
        let p0 = first.covectors().column(i).into_owned();
        let p0_norm = p0.norm();
        if p0_norm == 0.0 {
            continue;
        }
        for (k, state) in record.landmarks.iter().enumerate() {
            let pt = state.covectors().column(i);
            let jac = &record.jacobians[i][k];
            // row covector times J
            let transported = jac.transpose() * pt;
            worst = worst.max((transported - &p0).norm() / p0_norm);
        }
    }
    Ok(worst)
}

/// Pushes a density forward through a finished flow: each node value becomes
/// f0 / det Dφ at the deformed node position. The deformed quadrature
/// Σ f1 · det Dφ · cellvol reproduces the initial mass.
pub fn transport_density(record: &FlowRecord, f0: &GridField) -> Result<GridField> {
    if record.paths.len() != f0.node_count() {
        return Err(Error::Configuration(format!(
            "flow record has {} particles, grid has {} nodes",
            record.paths.len(),
            f0.node_count()
        )));
    }
    for node in 0..f0.node_count() {
        if (record.paths[node][0].clone() - f0.coord(node)).norm() > 1e-12 {
            return Err(Error::Configuration(format!(
                "particle {node} was not seeded at its grid node"
            )));
        }
    }
    let mut out = f0.clone();
    for node in 0..f0.node_count() {
        let det = record.final_jacobian(node).determinant();
        if det <= 0.0 {
            return Err(Error::Orientation(det));
        }
        out.set(node, 0, f0.get(node, 0) / det);
    }
    Ok(out)
}

/// Relative drift between the deformed-quadrature mass of the transported
/// density and the initial mass.
pub fn transport_mass_drift(record: &FlowRecord, f0: &GridField, f1: &GridField) -> f64 {
    let cell = f0.cell_volume();
    let mass0: f64 = (0..f0.node_count()).map(|i| f0.get(i, 0)).sum::<f64>() * cell;
    let mass1: f64 = (0..f0.node_count())
        .map(|i| f1.get(i, 0) * record.final_jacobian(i).determinant())
        .sum::<f64>()
        * cell;
    ((mass1 - mass0) / mass0).abs()
}
