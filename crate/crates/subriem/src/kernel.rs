//! Reproducing kernels of the velocity-field space, Gram matrices and the
//! kernel quadratic form on Dirac momenta.
//!
//! The metric on velocity fields is represented entirely through its kernel:
//! either the plain Gaussian `K(x,y)p = e(x−y) pᵀ` with
//! `e(u) = exp(−|u|²/2σ)`, or the frame-constrained variant
//! `K(x,y)p = e(x−y) Σ_j ⟨p, X_j(y)⟩ X_j(x)`, whose values stay in the span
//! of the frame.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::frame::{frame_by_id, FrameField};
use crate::{Error, Result};

/// Two points closer than `DUPLICATE_TOLERANCE * (1 + max |x|)` count as a
/// collision of the landmark configuration.
pub const DUPLICATE_TOLERANCE: f64 = 1e-10;

/// Kernel choice: plain Gaussian or Gaussian times a frame projection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KernelMode {
    Full,
    /// References a registered frame by id.
    FrameConstrained(String),
}

/// Kernel width and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    sigma: f64,
    mode: KernelMode,
}

impl KernelSpec {
    pub fn new(sigma: f64, mode: KernelMode) -> Result<Self> {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "kernel width must be positive and finite, got {sigma}"
            )));
        }
        Ok(KernelSpec { sigma, mode })
    }

    pub fn full(sigma: f64) -> Self {
        KernelSpec::new(sigma, KernelMode::Full).expect("positive sigma")
    }

    pub fn constrained(sigma: f64, frame_id: &str) -> Self {
        KernelSpec::new(sigma, KernelMode::FrameConstrained(frame_id.to_string()))
            .expect("positive sigma")
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mode(&self) -> &KernelMode {
        &self.mode
    }

    /// Resolves the constraining frame for data of dimension `dim`, if any.
    pub fn resolve_frame(&self, dim: usize) -> Result<Option<FrameField>> {
        match &self.mode {
            KernelMode::Full => Ok(None),
            KernelMode::FrameConstrained(id) => {
                let frame = frame_by_id(id, dim)?;
                if frame.count() < 1 {
                    return Err(Error::Configuration(format!(
                        "frame {id:?} has no fields"
                    )));
                }
                Ok(Some(frame))
            }
        }
    }
}

// External JSON form: {"sigma": f, "mode": "full" | {"frame": "<id>"}}.
#[derive(Serialize, Deserialize)]
struct KernelSpecRepr {
    sigma: f64,
    mode: ModeRepr,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ModeRepr {
    Name(String),
    Frame { frame: String },
}

impl Serialize for KernelSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mode = match &self.mode {
            KernelMode::Full => ModeRepr::Name("full".to_string()),
            KernelMode::FrameConstrained(id) => ModeRepr::Frame { frame: id.clone() },
        };
        KernelSpecRepr { sigma: self.sigma, mode }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for KernelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = KernelSpecRepr::deserialize(d)?;
        let mode = match repr.mode {
            ModeRepr::Name(name) if name == "full" => KernelMode::Full,
            ModeRepr::Name(name) => {
                return Err(serde::de::Error::custom(format!(
                    "unknown kernel mode {name:?}"
                )))
            }
            ModeRepr::Frame { frame } => KernelMode::FrameConstrained(frame),
        };
        KernelSpec::new(repr.sigma, mode).map_err(serde::de::Error::custom)
    }
}

/// A finite sum of point covectors: positions x_i paired with covectors p_i.
#[derive(Debug, Clone, PartialEq)]
pub struct DiracMomentum {
    points: DMatrix<f64>,
    covectors: DMatrix<f64>,
}

impl DiracMomentum {
    /// Columns of `points` are positions, columns of `covectors` the paired
    /// covectors. Positions must be pairwise distinct.
    pub fn new(points: DMatrix<f64>, covectors: DMatrix<f64>) -> Result<Self> {
        if points.ncols() == 0 {
            return Err(Error::InvalidInput("need at least one landmark".into()));
        }
        if points.shape() != covectors.shape() {
            return Err(Error::InvalidInput(format!(
                "points are {:?} but covectors are {:?}",
                points.shape(),
                covectors.shape()
            )));
        }
        if points.iter().chain(covectors.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        check_distinct(&points)?;
        Ok(DiracMomentum { points, covectors })
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn covectors(&self) -> &DMatrix<f64> {
        &self.covectors
    }
}

/// Errors unless the columns of `points` are pairwise distinct under the
/// landmark collision threshold.
pub fn check_distinct(points: &DMatrix<f64>) -> Result<()> {
    let n = points.ncols();
    let scale = 1.0
        + (0..n)
            .map(|i| points.column(i).norm())
            .fold(0.0_f64, f64::max);
    let tol = DUPLICATE_TOLERANCE * scale;
    for i in 0..n {
        for j in (i + 1)..n {
            if (points.column(i) - points.column(j)).norm() < tol {
                return Err(Error::DegenerateConfiguration(format!(
                    "landmarks {i} and {j} coincide"
                )));
            }
        }
    }
    Ok(())
}

/// e(x−y) = exp(−|x−y|²/2σ).
pub fn gaussian_scalar(x: &DVector<f64>, y: &DVector<f64>, sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite coordinate".into()));
    }
    Ok(gaussian_unchecked(x, y, sigma))
}

#[inline]
pub(crate) fn gaussian_unchecked(x: &DVector<f64>, y: &DVector<f64>, sigma: f64) -> f64 {
    let mut sq = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        let d = a - b;
        sq += d * d;
    }
    (-sq / (2.0 * sigma)).exp()
}

/// K(x,y)p as a vector.
pub fn kernel_apply(
    spec: &KernelSpec,
    x: &DVector<f64>,
    y: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<DVector<f64>> {
    let e = gaussian_scalar(x, y, spec.sigma)?;
    match spec.resolve_frame(x.len())? {
        None => Ok(p * e),
        Some(frame) => {
            let mut out = DVector::zeros(x.len());
            for j in 1..=frame.count() {
                let c = p.dot(&frame.field(j, y));
                out += frame.field(j, x) * (e * c);
            }
            Ok(out)
        }
    }
}

/// Dense (nd)×(nd) kernel matrix; block (i,j) maps a covector at x_j to a
/// vector at x_i. Assembly order is row-major over (i,j).
pub fn gram_matrix(spec: &KernelSpec, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_distinct(points)?;
    let d = points.nrows();
    let n = points.ncols();
    let frame = spec.resolve_frame(d)?;
    let mut g = DMatrix::zeros(n * d, n * d);
    for i in 0..n {
        for j in 0..n {
            let xi = points.column(i).into_owned();
            let xj = points.column(j).into_owned();
            let e = gaussian_unchecked(&xi, &xj, spec.sigma);
            match &frame {
                None => {
                    for a in 0..d {
                        g[(i * d + a, j * d + a)] = e;
                    }
                }
                Some(fr) => {
                    for k in 1..=fr.count() {
                        let xk_i = fr.field(k, &xi);
                        let xk_j = fr.field(k, &xj);
                        for a in 0..d {
                            for b in 0..d {
                                g[(i * d + a, j * d + b)] += e * xk_i[a] * xk_j[b];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(g)
}

/// The kernel quadratic form Σ_{i,j} p_i · K(x_i, x_j) p_j. Nonnegative; twice
/// the reduced Hamiltonian.
pub fn rkhs_norm_sq(spec: &KernelSpec, mom: &DiracMomentum) -> Result<f64> {
    quadratic_form(spec, mom.points(), mom.covectors())
}

pub(crate) fn quadratic_form(
    spec: &KernelSpec,
    points: &DMatrix<f64>,
    covectors: &DMatrix<f64>,
) -> Result<f64> {
    let d = points.nrows();
    let n = points.ncols();
    let frame = spec.resolve_frame(d)?;
    let mut acc = 0.0;
    match frame {
        None => {
            for i in 0..n {
                for j in 0..n {
                    let e = gaussian_unchecked(
                        &points.column(i).into_owned(),
                        &points.column(j).into_owned(),
                        spec.sigma,
                    );
                    acc += e * covectors.column(i).dot(&covectors.column(j));
                }
            }
        }
        Some(fr) => {
            // c[k][i] = <p_i, X_k(x_i)>
            let r = fr.count();
            let mut c = vec![vec![0.0; n]; r];
            for i in 0..n {
                let xi = points.column(i).into_owned();
                for (k, ck) in c.iter_mut().enumerate() {
                    ck[i] = covectors.column(i).dot(&fr.field(k + 1, &xi));
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let e = gaussian_unchecked(
                        &points.column(i).into_owned(),
                        &points.column(j).into_owned(),
                        spec.sigma,
                    );
                    for ck in c.iter() {
                        acc += e * ck[i] * ck[j];
                    }
                }
            }
        }
    }
    Ok(acc)
}
