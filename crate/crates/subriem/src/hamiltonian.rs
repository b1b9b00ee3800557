//! Reduced normal Hamiltonian on landmark phase space, its symplectic
//! gradient, the reconstructed velocity field, and the singular-curve
//! residual.
//!
//! With Dirac momenta the continuum equations close exactly on finitely many
//! position/covector pairs, so every right-hand side here is a finite sum
//! over landmark pairs. The adjoint ([`rhs_vjp`]) is the analytic transpose
//! of the symplectic gradient's linearization and backs the discrete adjoint
//! sweep of the matching module.

use nalgebra::{DMatrix, DVector};
use serde::de::Error as _;
use serde::{Deserialize, Serialize};

use crate::frame::FrameField;
use crate::integrator::{self, Monitor, Trajectory};
use crate::kernel::{check_distinct, gaussian_unchecked, quadratic_form, KernelSpec};
use crate::{Error, Result};

/// Landmark positions and covectors at a fixed time.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkState {
    time: f64,
    q: DMatrix<f64>,
    p: DMatrix<f64>,
}

impl LandmarkState {
    /// Columns of `q` are positions, columns of `p` the paired covectors.
    pub fn new(q: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        Self::at_time(0.0, q, p)
    }

    pub fn at_time(time: f64, q: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        if q.ncols() == 0 {
            return Err(Error::InvalidInput("need at least one landmark".into()));
        }
        if q.shape() != p.shape() {
            return Err(Error::InvalidInput(format!(
                "positions are {:?} but covectors are {:?}",
                q.shape(),
                p.shape()
            )));
        }
        if q.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite state entry".into()));
        }
        check_distinct(&q)?;
        Ok(LandmarkState { time, q, p })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn len(&self) -> usize {
        self.q.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn positions(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn covectors(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Flat phase-space vector [vec(q); vec(p)], column-major.
    pub fn pack(&self) -> DVector<f64> {
        let nd = self.q.len();
        let mut y = DVector::zeros(2 * nd);
        y.rows_mut(0, nd).copy_from_slice(self.q.as_slice());
        y.rows_mut(nd, nd).copy_from_slice(self.p.as_slice());
        y
    }

    /// Inverse of [`Self::pack`]; does not re-validate the landmark condition.
    pub fn unpack(time: f64, dim: usize, n: usize, y: &DVector<f64>) -> Self {
        let nd = dim * n;
        let q = DMatrix::from_column_slice(dim, n, &y.as_slice()[..nd]);
        let p = DMatrix::from_column_slice(dim, n, &y.as_slice()[nd..2 * nd]);
        LandmarkState { time, q, p }
    }

    /// Builds a state without the landmark-distinctness check, for transient
    /// integration stages.
    pub fn unpack_raw(time: f64, q: DMatrix<f64>, p: DMatrix<f64>) -> Self {
        LandmarkState { time, q, p }
    }
}

// JSON form: {"t": float, "q": [[...]], "p": [[...]]}, one row per landmark.
impl Serialize for LandmarkState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            t: f64,
            q: Vec<Vec<f64>>,
            p: Vec<Vec<f64>>,
        }
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.ncols())
                .map(|i| m.column(i).iter().cloned().collect())
                .collect()
        };
        Repr {
            t: self.time,
            q: rows(&self.q),
            p: rows(&self.p),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LandmarkState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            t: f64,
            q: Vec<Vec<f64>>,
            p: Vec<Vec<f64>>,
        }
        let repr = Repr::deserialize(d)?;
        let to_matrix = |rows: &[Vec<f64>]| -> std::result::Result<DMatrix<f64>, D::Error> {
            let n = rows.len();
            if n == 0 {
                return Err(D::Error::custom("empty landmark list"));
            }
            let dim = rows[0].len();
            if rows.iter().any(|r| r.len() != dim) {
                return Err(D::Error::custom("ragged landmark rows"));
            }
            Ok(DMatrix::from_fn(dim, n, |a, i| rows[i][a]))
        };
        LandmarkState::at_time(repr.t, to_matrix(&repr.q)?, to_matrix(&repr.p)?)
            .map_err(D::Error::custom)
    }
}

/// Reduced Hamiltonian h(q,p); equals half the kernel quadratic form.
pub fn hamiltonian(spec: &KernelSpec, state: &LandmarkState) -> Result<f64> {
    Ok(0.5 * quadratic_form(spec, state.positions(), state.covectors())?)
}

/// (∂h/∂p, −∂h/∂q): the geodesic right-hand side (dq, dp).
pub fn symplectic_gradient(
    spec: &KernelSpec,
    state: &LandmarkState,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = state.positions();
    let p = state.covectors();
    let d = q.nrows();
    let n = q.ncols();
    let sigma = spec.sigma();
    let mut dq = DMatrix::zeros(d, n);
    let mut dp = DMatrix::zeros(d, n);

    match spec.resolve_frame(d)? {
        None => {
            for i in 0..n {
                let qi = q.column(i);
                let pi = p.column(i);
                for j in 0..n {
                    let qj = q.column(j);
                    let pj = p.column(j);
                    let e = gaussian_pair(&qi, &qj, sigma);
                    let pij = pi.dot(&pj);
                    for a in 0..d {
                        dq[(a, i)] += e * pj[a];
                        dp[(a, i)] += (e / sigma) * (qi[a] - qj[a]) * pij;
                    }
                }
            }
        }
        Some(frame) => {
            let data = FrameData::assemble(&frame, q, p, sigma);
            for i in 0..n {
                let qi = q.column(i);
                let pi = p.column(i);
                for k in 0..data.r {
                    // dq_i = Σ_k s_{k,i} X_k(q_i)
                    let ski = data.s[k][i];
                    for a in 0..d {
                        dq[(a, i)] += ski * data.x[k][i][a];
                    }
                    // dp_i, first piece: kernel decay against pair couplings
                    for j in 0..n {
                        let qj = q.column(j);
                        let coef = data.e[(i, j)] / sigma * data.c[k][j] * data.c[k][i];
                        for a in 0..d {
                            dp[(a, i)] += coef * (qi[a] - qj[a]);
                        }
                    }
                    // dp_i, second piece: −Σ_k s_{k,i} p_i ∘ DX_k(q_i)
                    let pdx = data.dx[k][i].transpose() * pi;
                    for a in 0..d {
                        dp[(a, i)] -= ski * pdx[a];
                    }
                }
            }
        }
    }
    Ok((dq, dp))
}

/// The reconstructed velocity field at an arbitrary point.
pub fn field_from_momenta(
    spec: &KernelSpec,
    state: &LandmarkState,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let q = state.positions();
    let p = state.covectors();
    let d = q.nrows();
    let n = q.ncols();
    let sigma = spec.sigma();
    let mut out = DVector::zeros(d);
    match spec.resolve_frame(d)? {
        None => {
            for j in 0..n {
                let e = gaussian_unchecked(x, &q.column(j).into_owned(), sigma);
                out += p.column(j) * e;
            }
        }
        Some(frame) => {
            for k in 1..=frame.count() {
                let mut s = 0.0;
                for j in 0..n {
                    let qj = q.column(j).into_owned();
                    let e = gaussian_unchecked(x, &qj, sigma);
                    s += e * p.column(j).dot(&frame.field(k, &qj));
                }
                out += frame.field(k, x) * s;
            }
        }
    }
    Ok(out)
}

/// Spatial Jacobian of the reconstructed velocity field, used by the
/// variational equation of particle flows.
pub fn field_jacobian(
    spec: &KernelSpec,
    state: &LandmarkState,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let q = state.positions();
    let p = state.covectors();
    let d = q.nrows();
    let n = q.ncols();
    let sigma = spec.sigma();
    let mut out = DMatrix::zeros(d, d);
    match spec.resolve_frame(d)? {
        None => {
            for j in 0..n {
                let qj = q.column(j).into_owned();
                let e = gaussian_unchecked(x, &qj, sigma);
                let diff = x - &qj;
                for a in 0..d {
                    for b in 0..d {
                        out[(a, b)] -= (e / sigma) * p[(a, j)] * diff[b];
                    }
                }
            }
        }
        Some(frame) => {
            for k in 1..=frame.count() {
                let mut s = 0.0;
                let mut grad_s = DVector::zeros(d);
                for j in 0..n {
                    let qj = q.column(j).into_owned();
                    let e = gaussian_unchecked(x, &qj, sigma);
                    let c = p.column(j).dot(&frame.field(k, &qj));
                    s += e * c;
                    grad_s -= (x - &qj) * (e * c / sigma);
                }
                let xk = frame.field(k, x);
                out += xk * grad_s.transpose() + frame.jacobian(k, x) * s;
            }
        }
    }
    Ok(out)
}

/// Transpose of the linearized geodesic right-hand side.
///
/// Given cotangents (aq, ap) against (dq, dp), returns the gradients of
/// S = Σ_i aq_i·dq_i + ap_i·dp_i with respect to q and p.
pub fn rhs_vjp(
    spec: &KernelSpec,
    state: &LandmarkState,
    aq: &DMatrix<f64>,
    ap: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = state.positions();
    let p = state.covectors();
    let d = q.nrows();
    let n = q.ncols();
    let sigma = spec.sigma();
    let mut gq = DMatrix::zeros(d, n);
    let mut gp = DMatrix::zeros(d, n);

    match spec.resolve_frame(d)? {
        None => {
            for m in 0..n {
                let qm = q.column(m);
                let pm = p.column(m);
                let am = aq.column(m);
                let bm = ap.column(m);
                for j in 0..n {
                    let qj = q.column(j);
                    let pj = p.column(j);
                    let aj = aq.column(j);
                    let bj = ap.column(j);
                    let e = gaussian_pair(&qm, &qj, sigma);
                    let rmj = qm - qj;
                    let bdiff_r = (bm - bj).dot(&rmj);
                    let pmj = pm.dot(&pj);

                    // ∂S/∂p_m
                    for a in 0..d {
                        gp[(a, m)] += e * aj[a] + (e / sigma) * bdiff_r * pj[a];
                    }
                    // ∂S/∂q_m
                    let am_pj = am.dot(&pj);
                    let aj_pm = aj.dot(&pm);
                    for a in 0..d {
                        gq[(a, m)] += -(e / sigma) * rmj[a] * (am_pj + aj_pm)
                            - (e / (sigma * sigma)) * pmj * bdiff_r * rmj[a]
                            + (e / sigma) * pmj * (bm[a] - bj[a]);
                    }
                }
            }
        }
        Some(frame) => {
            let data = FrameData::assemble(&frame, q, p, sigma);
            let r = data.r;
            // α_{k,i} = aq_i·X_k(q_i), β_{k,i} = p_iᵀ DX_k(q_i) ap_i, and their
            // kernel-smoothed sums.
            let mut alpha = vec![vec![0.0; n]; r];
            let mut beta = vec![vec![0.0; n]; r];
            for i in 0..n {
                for k in 0..r {
                    alpha[k][i] = aq.column(i).dot(&data.x[k][i]);
                    beta[k][i] = (data.dx[k][i].transpose() * p.column(i)).dot(&ap.column(i));
                }
            }
            let smooth = |vals: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                (0..r)
                    .map(|k| {
                        (0..n)
                            .map(|i| (0..n).map(|j| data.e[(i, j)] * vals[k][j]).sum())
                            .collect()
                    })
                    .collect()
            };
            let alpha_s = smooth(&alpha);
            let beta_s = smooth(&beta);

            for m in 0..n {
                let qm = q.column(m);
                let pm = p.column(m).into_owned();
                let am = aq.column(m).into_owned();
                let bm = ap.column(m).into_owned();
                for k in 0..r {
                    let xkm = &data.x[k][m];
                    let dxm = &data.dx[k][m];
                    let dxt_p = dxm.transpose() * &pm;
                    let dxt_a = dxm.transpose() * &am;
                    let dx_b = dxm * &bm;

                    // w_{k,m} = Σ_j e_{mj} c_{k,j} (b_m−b_j)·r_{mj}
                    let mut w = 0.0;
                    for j in 0..n {
                        let rmj = qm - q.column(j);
                        w += data.e[(m, j)]
                            * data.c[k][j]
                            * (&bm - &ap.column(j).into_owned()).dot(&rmj);
                    }

                    for a in 0..d {
                        gp[(a, m)] += alpha_s[k][m] * xkm[a] + (w / sigma) * xkm[a]
                            - beta_s[k][m] * xkm[a]
                            - data.s[k][m] * dx_b[a];
                        gq[(a, m)] += data.s[k][m] * dxt_a[a]
                            + alpha_s[k][m] * dxt_p[a]
                            + (w / sigma) * dxt_p[a]
                            - beta_s[k][m] * dxt_p[a];
                    }

                    // pairwise pieces of ∂S/∂q_m
                    for j in 0..n {
                        let e = data.e[(m, j)];
                        let rmj = qm - q.column(j);
                        let bdiff = &bm - &ap.column(j).into_owned();
                        let bdiff_r = bdiff.dot(&rmj);
                        let ckm = data.c[k][m];
                        let ckj = data.c[k][j];
                        let coef_dq = -(e / sigma) * (alpha[k][m] * ckj + alpha[k][j] * ckm);
                        let coef_s1e = -(e / (sigma * sigma)) * ckm * ckj * bdiff_r;
                        let coef_s2e = (e / sigma) * (ckj * beta[k][m] + ckm * beta[k][j]);
                        for a in 0..d {
                            gq[(a, m)] += (coef_dq + coef_s1e + coef_s2e) * rmj[a]
                                + (e / sigma) * ckm * ckj * bdiff[a];
                        }
                    }

                    // second-derivative piece: −Σ_k s_{k,m} p_mᵀ D²X_k(q_m) b_m
                    let d2 = frame.second_derivative(k + 1, &qm.into_owned());
                    for c in 0..d {
                        let mut acc = 0.0;
                        for a in 0..d {
                            for b in 0..d {
                                acc += pm[a] * d2[a][(b, c)] * bm[b];
                            }
                        }
                        gq[(c, m)] -= data.s[k][m] * acc;
                    }
                }
            }
        }
    }
    Ok((gq, gp))
}

/// Per-landmark frame evaluations shared by the constrained right-hand sides.
struct FrameData {
    r: usize,
    e: DMatrix<f64>,
    /// x[k][i] = X_{k+1}(q_i)
    x: Vec<Vec<DVector<f64>>>,
    /// dx[k][i] = DX_{k+1}(q_i)
    dx: Vec<Vec<DMatrix<f64>>>,
    /// c[k][i] = ⟨p_i, X_{k+1}(q_i)⟩
    c: Vec<Vec<f64>>,
    /// s[k][i] = Σ_j e_{ij} c[k][j]
    s: Vec<Vec<f64>>,
}

impl FrameData {
    fn assemble(frame: &FrameField, q: &DMatrix<f64>, p: &DMatrix<f64>, sigma: f64) -> Self {
        let n = q.ncols();
        let r = frame.count();
        let mut e = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                e[(i, j)] = gaussian_pair(&q.column(i), &q.column(j), sigma);
            }
        }
        let mut x = vec![Vec::with_capacity(n); r];
        let mut dx = vec![Vec::with_capacity(n); r];
        let mut c = vec![vec![0.0; n]; r];
        for i in 0..n {
            let qi = q.column(i).into_owned();
            for k in 0..r {
                let f = frame.field(k + 1, &qi);
                c[k][i] = p.column(i).dot(&f);
                x[k].push(f);
                dx[k].push(frame.jacobian(k + 1, &qi));
            }
        }
        let mut s = vec![vec![0.0; n]; r];
        for (k, sk) in s.iter_mut().enumerate() {
            for i in 0..n {
                sk[i] = (0..n).map(|j| e[(i, j)] * c[k][j]).sum();
            }
        }
        FrameData { r, e, x, dx, c, s }
    }
}

#[inline]
fn gaussian_pair(
    x: &nalgebra::DVectorView<f64>,
    y: &nalgebra::DVectorView<f64>,
    sigma: f64,
) -> f64 {
    let mut sq = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        let d = a - b;
        sq += d * d;
    }
    (-sq / (2.0 * sigma)).exp()
}

/// How close a trajectory with covectors comes to annihilating the frame:
/// max over samples, landmarks and fields of |⟨p_i, X_k(x_i)⟩|, normalized by
/// the largest covector norm. Near zero certifies the singular-curve
/// condition for Dirac momenta.
pub fn abnormal_residual(frame: &FrameField, trajectory: &[LandmarkState]) -> Result<f64> {
    if trajectory.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    let mut pairing_max = 0.0_f64;
    let mut cov_max = 0.0_f64;
    for state in trajectory {
        let q = state.positions();
        let p = state.covectors();
        for i in 0..q.ncols() {
            cov_max = cov_max.max(p.column(i).norm());
            let xi = q.column(i).into_owned();
            for k in 1..=frame.count() {
                pairing_max = pairing_max.max(p.column(i).dot(&frame.field(k, &xi)).abs());
            }
        }
    }
    if cov_max == 0.0 {
        return Err(Error::DegenerateCovector(
            "covectors vanish identically; a singular covector must be nonzero".into(),
        ));
    }
    Ok(pairing_max / cov_max)
}

/// Geodesic right-hand side as a flat-vector ODE.
pub struct LandmarkSystem {
    spec: KernelSpec,
    dim: usize,
    n: usize,
}

impl LandmarkSystem {
    pub fn new(spec: KernelSpec, dim: usize, n: usize) -> Self {
        LandmarkSystem { spec, dim, n }
    }

    pub fn state(&self, t: f64, y: &DVector<f64>) -> LandmarkState {
        LandmarkState::unpack(t, self.dim, self.n, y)
    }
}

impl integrator::OdeRhs for LandmarkSystem {
    fn eval(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let state = self.state(t, y);
        let (dq, dp) = symplectic_gradient(&self.spec, &state)?;
        let nd = self.dim * self.n;
        let mut out = DVector::zeros(2 * nd);
        out.rows_mut(0, nd).copy_from_slice(dq.as_slice());
        out.rows_mut(nd, nd).copy_from_slice(dp.as_slice());
        Ok(out)
    }
}

/// A landmark trajectory with its layout, for unpacking and export.
#[derive(Debug, Clone)]
pub struct LandmarkTrajectory {
    pub dim: usize,
    pub n: usize,
    pub inner: Trajectory,
}

impl LandmarkTrajectory {
    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn landmark_state(&self, k: usize) -> LandmarkState {
        LandmarkState::unpack(self.inner.times[k], self.dim, self.n, &self.inner.states[k])
    }

    pub fn states(&self) -> Vec<LandmarkState> {
        (0..self.len()).map(|k| self.landmark_state(k)).collect()
    }

    /// One row per step: t, flattened q, flattened p, h.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 0..self.n {
            for a in 0..self.dim {
                out.push_str(&format!(",q{i}_{a}"));
            }
        }
        for i in 0..self.n {
            for a in 0..self.dim {
                out.push_str(&format!(",p{i}_{a}"));
            }
        }
        out.push_str(",h\n");
        let h = self.inner.monitor("hamiltonian");
        for k in 0..self.len() {
            out.push_str(&format!("{}", self.inner.times[k]));
            for v in self.inner.states[k].iter() {
                out.push_str(&format!(",{v}"));
            }
            let hv = h.map(|s| s[k]).unwrap_or(f64::NAN);
            out.push_str(&format!(",{hv}\n"));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let states: Vec<LandmarkState> = self.states();
        Ok(serde_json::to_string_pretty(&states)?)
    }
}

/// Integrates the geodesic flow from `state0` over [0, T].
pub fn shoot(
    spec: &KernelSpec,
    state0: &LandmarkState,
    t_final: f64,
    steps: usize,
) -> Result<LandmarkTrajectory> {
    let dim = state0.dim();
    let n = state0.len();
    let system = LandmarkSystem::new(spec.clone(), dim, n);
    let spec_h = spec.clone();
    let monitors = [
        Monitor::new("hamiltonian", move |t, y: &DVector<f64>| {
            let st = LandmarkState::unpack(t, dim, n, y);
            hamiltonian(&spec_h, &st).unwrap_or(f64::NAN)
        }),
        Monitor::new("max_covector_norm", move |_t, y: &DVector<f64>| {
            let nd = dim * n;
            (0..n)
                .map(|i| y.rows(nd + i * dim, dim).norm())
                .fold(0.0_f64, f64::max)
        }),
    ];
    let traj = integrator::integrate(&system, &state0.pack(), t_final, steps, &monitors)?;
    Ok(LandmarkTrajectory {
        dim,
        n,
        inner: traj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(d: usize, q: &[f64], p: &[f64]) -> LandmarkState {
        let n = q.len() / d;
        LandmarkState::new(
            DMatrix::from_column_slice(d, n, q),
            DMatrix::from_column_slice(d, n, p),
        )
        .unwrap()
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

    fn specs_for_dim(d: usize) -> Vec<KernelSpec> {
        let mut specs = vec![KernelSpec::full(0.8), KernelSpec::constrained(0.8, "translation")];
        if d == 2 {
            specs.push(KernelSpec::constrained(0.8, "grushin"));
            // the sine frame is the one registered frame with nonzero second
            // derivatives, which only the adjoint sweep consumes
            specs.push(KernelSpec::constrained(0.8, "torus_sine"));
        }
        if d == 3 {
            specs.push(KernelSpec::constrained(0.8, "heisenberg"));
        }
        specs
    }

    #[test]
    fn single_landmark_full_hamiltonian() {
        let spec = KernelSpec::full(1.0);
        let s = state(2, &[0.3, -0.7], &[3.0, 4.0]);
        assert!((hamiltonian(&spec, &s).unwrap() - 12.5).abs() < 1e-14);
    }

    #[test]
    fn single_landmark_constrained_hamiltonian() {
        // h = ½ Σ_j ⟨a, X_j(x₀)⟩²
        let spec = KernelSpec::constrained(1.0, "heisenberg");
        let x0 = [0.4, 0.0, 0.0];
        let a = [0.2, -1.0, 0.5];
        let s = state(3, &x0, &a);
        // X_1 = (1,0,0), X_2 = (0,1,0.4): pairings 0.2 and -1.0 + 0.5*0.4
        let expect = 0.5 * (0.2_f64.powi(2) + (-0.8_f64).powi(2));
        assert!((hamiltonian(&spec, &s).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn zero_covectors_zero_energy() {
        let spec = KernelSpec::full(0.5);
        let s = state(1, &[0.0, 1.0], &[0.0, 0.0]);
        assert_eq!(hamiltonian(&spec, &s).unwrap(), 0.0);
    }

    #[test]
    fn h_is_half_the_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in [1usize, 2, 3] {
            for spec in specs_for_dim(d) {
                let s = random_state(&mut rng, d, 4);
                let h = hamiltonian(&spec, &s).unwrap();
                let q = crate::kernel::quadratic_form(&spec, s.positions(), s.covectors()).unwrap();
                assert!((2.0 * h - q).abs() <= 1e-12 * q.abs().max(1.0));
            }
        }
    }

    #[test]
    fn single_landmark_full_gradient() {
        let spec = KernelSpec::full(0.7);
        let s = state(2, &[1.0, 2.0], &[0.5, -0.25]);
        let (dq, dp) = symplectic_gradient(&spec, &s).unwrap();
        assert_eq!(dq.as_slice(), s.covectors().as_slice());
        assert_eq!(dp, DMatrix::zeros(2, 1));
    }

    #[test]
    fn single_landmark_constrained_gradient() {
        // dq = Σ_j ⟨a,X_j⟩ X_j, dp = −Σ_j ⟨a,X_j⟩ a∘DX_j
        let spec = KernelSpec::constrained(1.0, "heisenberg");
        let frame = crate::frame::frame_by_id("heisenberg", 3).unwrap();
        let x0 = DVector::from_column_slice(&[0.4, -0.2, 0.1]);
        let a = DVector::from_column_slice(&[0.3, -0.9, 0.6]);
        let s = state(3, x0.as_slice(), a.as_slice());
        let (dq, dp) = symplectic_gradient(&spec, &s).unwrap();
        let mut expect_dq = DVector::zeros(3);
        let mut expect_dp = DVector::zeros(3);
        for j in 1..=2 {
            let xj = frame.field(j, &x0);
            let coef = a.dot(&xj);
            expect_dq += xj * coef;
            expect_dp -= frame.jacobian(j, &x0).transpose() * &a * coef;
        }
        assert!((DVector::from_column_slice(dq.as_slice()) - expect_dq).norm() < 1e-14);
        assert!((DVector::from_column_slice(dp.as_slice()) - expect_dp).norm() < 1e-14);
    }

    /// Finite-difference oracle for the symplectic gradient.
    fn fd_symplectic_gradient(
        spec: &KernelSpec,
        s: &LandmarkState,
        h: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = s.dim();
        let n = s.len();
        let mut dq = DMatrix::zeros(d, n);
        let mut dp = DMatrix::zeros(d, n);
        for i in 0..n {
            for a in 0..d {
                let mut qp = s.positions().clone();
                let mut qm = s.positions().clone();
                qp[(a, i)] += h;
                qm[(a, i)] -= h;
                let hp = hamiltonian(
                    spec,
                    &LandmarkState::new(qp, s.covectors().clone()).unwrap(),
                )
                .unwrap();
                let hm = hamiltonian(
                    spec,
                    &LandmarkState::new(qm, s.covectors().clone()).unwrap(),
                )
                .unwrap();
                dp[(a, i)] = -(hp - hm) / (2.0 * h);

                let mut pp = s.covectors().clone();
                let mut pm = s.covectors().clone();
                pp[(a, i)] += h;
                pm[(a, i)] -= h;
                let hp = hamiltonian(spec, &LandmarkState::new(s.positions().clone(), pp).unwrap())
                    .unwrap();
                let hm = hamiltonian(spec, &LandmarkState::new(s.positions().clone(), pm).unwrap())
                    .unwrap();
                dq[(a, i)] = (hp - hm) / (2.0 * h);
            }
        }
        (dq, dp)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for d in [1usize, 2, 3] {
            for spec in specs_for_dim(d) {
                for _ in 0..12 {
                    let s = random_state(&mut rng, d, 3);
                    let (dq, dp) = symplectic_gradient(&spec, &s).unwrap();
                    let (fq, fp) = fd_symplectic_gradient(&spec, &s, 1e-6);
                    let scale = dq.norm().max(dp.norm()).max(1.0);
                    assert!(
                        (&dq - &fq).norm() / scale < 1e-5,
                        "dq mismatch for {spec:?} d={d}"
                    );
                    assert!(
                        (&dp - &fp).norm() / scale < 1e-5,
                        "dp mismatch for {spec:?} d={d}"
                    );
                }
            }
        }
    }

    #[test]
    fn translation_equivariance_full_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = KernelSpec::full(0.9);
        let s = random_state(&mut rng, 3, 4);
        let shift = DVector::from_column_slice(&[0.7, -1.1, 0.4]);
        let mut q2 = s.positions().clone();
        for i in 0..q2.ncols() {
            let shifted = q2.column(i) + &shift;
            q2.set_column(i, &shifted);
        }
        let s2 = LandmarkState::new(q2, s.covectors().clone()).unwrap();
        let h1 = hamiltonian(&spec, &s).unwrap();
        let h2 = hamiltonian(&spec, &s2).unwrap();
        assert!((h1 - h2).abs() < 1e-12 * h1.abs().max(1.0));
        let (dq1, dp1) = symplectic_gradient(&spec, &s).unwrap();
        let (dq2, dp2) = symplectic_gradient(&spec, &s2).unwrap();
        assert!((dq1 - dq2).norm() < 1e-12);
        assert!((dp1 - dp2).norm() < 1e-12);
    }

    #[test]
    fn exchange_symmetry() {
        let spec = KernelSpec::full(0.6);
        let s = state(2, &[0.0, 0.0, 1.0, 0.5, -0.5, 0.25], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        let perm = [2usize, 0, 1];
        let qp = DMatrix::from_fn(2, 3, |a, i| s.positions()[(a, perm[i])]);
        let pp = DMatrix::from_fn(2, 3, |a, i| s.covectors()[(a, perm[i])]);
        let sp = LandmarkState::new(qp, pp).unwrap();
        let (dq, dp) = symplectic_gradient(&spec, &s).unwrap();
        let (dqp, dpp) = symplectic_gradient(&spec, &sp).unwrap();
        for i in 0..3 {
            assert!((dqp.column(i) - dq.column(perm[i])).norm() < 1e-14);
            assert!((dpp.column(i) - dp.column(perm[i])).norm() < 1e-14);
        }
    }

    #[test]
    fn field_far_from_landmarks_decays() {
        let spec = KernelSpec::full(1.0);
        let s = state(2, &[0.0, 0.0, 1.0, 0.0], &[2.0, 1.0, -1.0, 0.5]);
        let x = DVector::from_column_slice(&[25.0, 0.0]);
        let v = field_from_momenta(&spec, &s, &x).unwrap();
        let p_total: f64 = (0..2).map(|i| s.covectors().column(i).norm()).sum();
        assert!(v.norm() <= (-50.0_f64).exp() * p_total);
    }

    #[test]
    fn field_at_landmarks_reproduces_dq() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for d in [2usize, 3] {
            for spec in specs_for_dim(d) {
                let s = random_state(&mut rng, d, 4);
                let (dq, _) = symplectic_gradient(&spec, &s).unwrap();
                for i in 0..s.len() {
                    let v =
                        field_from_momenta(&spec, &s, &s.positions().column(i).into_owned())
                            .unwrap();
                    assert!((v - dq.column(i)).norm() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn field_single_landmark_gaussian_profile() {
        let sigma = 0.8;
        let spec = KernelSpec::full(sigma);
        let s = state(2, &[0.25, -0.5], &[1.5, -2.0]);
        let offset: DVector<f64> = DVector::from_column_slice(&[0.3, 0.4]);
        let x = DVector::from_column_slice(&[0.55, -0.1]);
        let v = field_from_momenta(&spec, &s, &x).unwrap();
        let scale: f64 = (-offset.norm_squared() / (2.0 * sigma)).exp();
        let expect = DVector::from_column_slice(&[1.5 * scale, -2.0 * scale]);
        assert!((v - expect).norm() < 1e-14);
    }

    #[test]
    fn field_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for d in [2usize, 3] {
            for spec in specs_for_dim(d) {
                let s = random_state(&mut rng, d, 3);
                let x = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
                let jac = field_jacobian(&spec, &s, &x).unwrap();
                let h = 1e-6;
                for b in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[b] += h;
                    xm[b] -= h;
                    let col = (field_from_momenta(&spec, &s, &xp).unwrap()
                        - field_from_momenta(&spec, &s, &xm).unwrap())
                        / (2.0 * h);
                    for a in 0..d {
                        assert!((jac[(a, b)] - col[a]).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for d in [1usize, 2, 3] {
            for spec in specs_for_dim(d) {
                for _ in 0..8 {
                    let s = random_state(&mut rng, d, 3);
                    let n = s.len();
                    let aq = DMatrix::from_fn(d, n, |_, _| rng.gen_range(-1.0..1.0));
                    let ap = DMatrix::from_fn(d, n, |_, _| rng.gen_range(-1.0..1.0));
                    let (gq, gp) = rhs_vjp(&spec, &s, &aq, &ap).unwrap();

                    let scalar = |st: &LandmarkState| -> f64 {
                        let (dq, dp) = symplectic_gradient(&spec, st).unwrap();
                        (0..n)
                            .map(|i| {
                                aq.column(i).dot(&dq.column(i)) + ap.column(i).dot(&dp.column(i))
                            })
                            .sum()
                    };
                    let h = 1e-6;
                    for i in 0..n {
                        for a in 0..d {
                            let mut qp = s.positions().clone();
                            let mut qm = s.positions().clone();
                            qp[(a, i)] += h;
                            qm[(a, i)] -= h;
                            let fd = (scalar(
                                &LandmarkState::new(qp, s.covectors().clone()).unwrap(),
                            ) - scalar(
                                &LandmarkState::new(qm, s.covectors().clone()).unwrap(),
                            )) / (2.0 * h);
                            assert!(
                                (gq[(a, i)] - fd).abs() < 2e-5 * fd.abs().max(1.0),
                                "gq ({a},{i}) {spec:?}: {} vs {fd}",
                                gq[(a, i)]
                            );

                            let mut pp = s.covectors().clone();
                            let mut pm = s.covectors().clone();
                            pp[(a, i)] += h;
                            pm[(a, i)] -= h;
                            let fd = (scalar(
                                &LandmarkState::new(s.positions().clone(), pp).unwrap(),
                            ) - scalar(
                                &LandmarkState::new(s.positions().clone(), pm).unwrap(),
                            )) / (2.0 * h);
                            assert!(
                                (gp[(a, i)] - fd).abs() < 2e-5 * fd.abs().max(1.0),
                                "gp ({a},{i}) {spec:?}: {} vs {fd}",
                                gp[(a, i)]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn grushin_stationary_landmark_is_singular() {
        let frame = crate::frame::frame_by_id("grushin", 2).unwrap();
        let s = state(2, &[0.0, 0.7], &[0.0, 1.0]);
        let traj: Vec<LandmarkState> = (0..10).map(|_| s.clone()).collect();
        let residual = abnormal_residual(&frame, &traj).unwrap();
        assert!(residual <= 1e-15);
    }

    #[test]
    fn abnormal_residual_scale_invariant() {
        let frame = crate::frame::frame_by_id("heisenberg", 3).unwrap();
        let s1 = state(3, &[0.2, 0.3, -0.1], &[1.0, -0.5, 0.25]);
        let s2 = state(3, &[0.2, 0.3, -0.1], &[3.0, -1.5, 0.75]);
        let r1 = abnormal_residual(&frame, &[s1]).unwrap();
        let r2 = abnormal_residual(&frame, &[s2]).unwrap();
        assert!((r1 - r2).abs() < 1e-14);
        assert!(r1 > 0.1);
    }

    #[test]
    fn abnormal_residual_rejects_zero_covectors() {
        let frame = crate::frame::frame_by_id("grushin", 2).unwrap();
        let s = state(2, &[0.0, 0.7], &[0.0, 0.0]);
        assert!(matches!(
            abnormal_residual(&frame, &[s]),
            Err(Error::DegenerateCovector(_))
        ));
    }

    #[test]
    fn landmark_state_json_round_trip() {
        let s = state(2, &[0.0, 1.0, 2.0, 3.0], &[0.5, -0.5, 0.25, 0.75]);
        let json = serde_json::to_string(&s).unwrap();
        let back: LandmarkState = serde_json::from_str(&json).unwrap();
        assert_eq!(back.positions(), s.positions());
        assert_eq!(back.covectors(), s.covectors());
    }

    #[test]
    fn shoot_single_landmark_straight_line() {
        let spec = KernelSpec::full(1.0);
        let s = state(2, &[0.0, 0.0], &[1.0, 0.0]);
        let traj = shoot(&spec, &s, 1.0, 1000).unwrap();
        let end = traj.landmark_state(traj.len() - 1);
        assert!((end.positions()[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((end.covectors().column(0) - s.covectors().column(0)).norm() < 1e-14);
    }
}
