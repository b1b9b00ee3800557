//! Closed registry of analytic vector-field frames with exact Jacobians,
//! Lie brackets, iterated brackets and bracket-generating rank checks.
//!
//! Frames are a fixed catalogue rather than user-supplied code because the
//! geodesic right-hand sides and the adjoint sweeps consume analytic first
//! and second derivatives of the fields.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

use crate::{Error, Result};

/// Maximum bracket-word length accepted by default. Words of length 3 use
/// analytic second derivatives; length 4 falls back to one level of centered
/// finite differences (step [`FD_BRACKET_STEP`]).
pub const DEFAULT_MAX_DEPTH: usize = 4;

/// Step for the finite-difference Jacobians of deep bracket fields.
pub const FD_BRACKET_STEP: f64 = 1e-4;

/// Relative singular-value threshold for span/rank decisions.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Where a frame's fields live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Euclidean(usize),
    Torus(usize),
}

/// A registered family of analytic vector fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameField {
    /// The coordinate frame e_1, ..., e_d on R^d.
    Translation { dim: usize },
    /// (1,0,0) and (0,1,x) on R^3.
    Heisenberg,
    /// (1,0) and (0,x) on R^2.
    Grushin,
    /// (1,0) and (0,sin 2πx) on the unit 2-torus.
    TorusSine,
}

/// Looks a frame up by its external id, checking dimension compatibility.
pub fn frame_by_id(id: &str, dim: usize) -> Result<FrameField> {
    let frame = match id {
        "translation" => {
            if dim == 0 {
                return Err(Error::Configuration("translation frame needs dim >= 1".into()));
            }
            FrameField::Translation { dim }
        }
        "heisenberg" => FrameField::Heisenberg,
        "grushin" => FrameField::Grushin,
        "torus_sine" => FrameField::TorusSine,
        other => {
            return Err(Error::Configuration(format!(
                "unknown frame id {other:?} (known: translation, heisenberg, grushin, torus_sine)"
            )))
        }
    };
    if frame.dim() != dim {
        return Err(Error::Configuration(format!(
            "frame {id:?} lives in dimension {}, requested {dim}",
            frame.dim()
        )));
    }
    Ok(frame)
}

impl FrameField {
    pub fn id(&self) -> &'static str {
        match self {
            FrameField::Translation { .. } => "translation",
            FrameField::Heisenberg => "heisenberg",
            FrameField::Grushin => "grushin",
            FrameField::TorusSine => "torus_sine",
        }
    }

    /// Ambient dimension d.
    pub fn dim(&self) -> usize {
        match self {
            FrameField::Translation { dim } => *dim,
            FrameField::Heisenberg => 3,
            FrameField::Grushin | FrameField::TorusSine => 2,
        }
    }

    /// Number of fields r.
    pub fn count(&self) -> usize {
        match self {
            FrameField::Translation { dim } => *dim,
            _ => 2,
        }
    }

    pub fn domain(&self) -> Domain {
        match self {
            FrameField::Translation { dim } => Domain::Euclidean(*dim),
            FrameField::Heisenberg => Domain::Euclidean(3),
            FrameField::Grushin => Domain::Euclidean(2),
            FrameField::TorusSine => Domain::Torus(2),
        }
    }

    /// True when every field is 1-periodic in each coordinate, so the frame
    /// can act on torus grids.
    pub fn is_periodic(&self) -> bool {
        matches!(self, FrameField::Translation { .. } | FrameField::TorusSine)
    }

    /// X_j(x) for the 1-based field index `j`.
    pub fn field(&self, j: usize, x: &DVector<f64>) -> DVector<f64> {
        self.check_index(j);
        let d = self.dim();
        let mut v = DVector::zeros(d);
        match self {
            FrameField::Translation { .. } => v[j - 1] = 1.0,
            FrameField::Heisenberg => {
                if j == 1 {
                    v[0] = 1.0;
                } else {
                    v[1] = 1.0;
                    v[2] = x[0];
                }
            }
            FrameField::Grushin => {
                if j == 1 {
                    v[0] = 1.0;
                } else {
                    v[1] = x[0];
                }
            }
            FrameField::TorusSine => {
                if j == 1 {
                    v[0] = 1.0;
                } else {
                    v[1] = (2.0 * PI * x[0]).sin();
                }
            }
        }
        v
    }

    /// Analytic Jacobian DX_j(x), entry (a,b) = ∂X_j^a/∂x^b.
    pub fn jacobian(&self, j: usize, x: &DVector<f64>) -> DMatrix<f64> {
        self.check_index(j);
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        match self {
            FrameField::Translation { .. } => {}
            FrameField::Heisenberg => {
                if j == 2 {
                    m[(2, 0)] = 1.0;
                }
            }
            FrameField::Grushin => {
                if j == 2 {
                    m[(1, 0)] = 1.0;
                }
            }
            FrameField::TorusSine => {
                if j == 2 {
                    m[(1, 0)] = 2.0 * PI * (2.0 * PI * x[0]).cos();
                }
            }
        }
        m
    }

    /// Analytic second derivative, returned as one Hessian per component:
    /// `out[a][(b,c)]` = ∂²X_j^a/∂x^b∂x^c.
    pub fn second_derivative(&self, j: usize, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.check_index(j);
        let d = self.dim();
        let mut out = vec![DMatrix::zeros(d, d); d];
        if let FrameField::TorusSine = self {
            if j == 2 {
                out[1][(0, 0)] = -4.0 * PI * PI * (2.0 * PI * x[0]).sin();
            }
        }
        out
    }

    fn check_index(&self, j: usize) {
        assert!(
            j >= 1 && j <= self.count(),
            "field index {j} out of range 1..={}",
            self.count()
        );
    }
}

/// An iterated-bracket word I = (i_1, ..., i_j) with 1-based field indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BracketWord(Vec<usize>);

impl BracketWord {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("bracket word must be nonempty".into()));
        }
        Ok(BracketWord(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl std::fmt::Display for BracketWord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, ")")
    }
}

/// `[X_1(x), ..., X_r(x)]`.
pub fn eval_frame(frame: &FrameField, x: &DVector<f64>) -> Vec<DVector<f64>> {
    (1..=frame.count()).map(|j| frame.field(j, x)).collect()
}

/// Pointwise Lie bracket `[X_i, X_j](x) = DX_j(x)X_i(x) − DX_i(x)X_j(x)`.
pub fn lie_bracket(frame: &FrameField, i: usize, j: usize, x: &DVector<f64>) -> DVector<f64> {
    frame.jacobian(j, x) * frame.field(i, x) - frame.jacobian(i, x) * frame.field(j, x)
}

/// Right-nested iterated bracket X_I = [X_{i_1},[...,[X_{i_{j-1}},X_{i_j}]...].
pub fn iterated_bracket(
    frame: &FrameField,
    word: &BracketWord,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    iterated_bracket_with_depth(frame, word, x, DEFAULT_MAX_DEPTH)
}

pub fn iterated_bracket_with_depth(
    frame: &FrameField,
    word: &BracketWord,
    x: &DVector<f64>,
    max_depth: usize,
) -> Result<DVector<f64>> {
    if word.len() > max_depth {
        return Err(Error::UnsupportedDepth {
            depth: word.len(),
            max: max_depth,
        });
    }
    Ok(eval_word(frame, word.indices(), x))
}

fn eval_word(frame: &FrameField, indices: &[usize], x: &DVector<f64>) -> DVector<f64> {
    match indices.len() {
        1 => frame.field(indices[0], x),
        _ => {
            let head = indices[0];
            let rest = &indices[1..];
            let inner = eval_word(frame, rest, x);
            jac_word(frame, rest, x) * frame.field(head, x) - frame.jacobian(head, x) * inner
        }
    }
}

/// Jacobian of a bracket field: analytic up to length 2 (uses the frame's
/// second derivatives), centered finite differences beyond.
fn jac_word(frame: &FrameField, indices: &[usize], x: &DVector<f64>) -> DMatrix<f64> {
    let d = frame.dim();
    match indices.len() {
        1 => frame.jacobian(indices[0], x),
        2 => {
            let (i, j) = (indices[0], indices[1]);
            let xi = frame.field(i, x);
            let xj = frame.field(j, x);
            let dxi = frame.jacobian(i, x);
            let dxj = frame.jacobian(j, x);
            let d2i = frame.second_derivative(i, x);
            let d2j = frame.second_derivative(j, x);
            // D(DX_j·X_i − DX_i·X_j): product rule with the component Hessians.
            let mut m = &dxj * &dxi - &dxi * &dxj;
            for a in 0..d {
                for c in 0..d {
                    let mut acc = 0.0;
                    for b in 0..d {
                        acc += d2j[a][(b, c)] * xi[b] - d2i[a][(b, c)] * xj[b];
                    }
                    m[(a, c)] += acc;
                }
            }
            m
        }
        _ => {
            let h = FD_BRACKET_STEP;
            let mut m = DMatrix::zeros(d, d);
            for c in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let fp = eval_word(frame, indices, &xp);
                let fm = eval_word(frame, indices, &xm);
                for a in 0..d {
                    m[(a, c)] = (fp[a] - fm[a]) / (2.0 * h);
                }
            }
            m
        }
    }
}

/// Greedy bracket-generating rank check at a point.
///
/// Enumerates words by increasing length (lexicographically within a length),
/// keeping each word whose value at `x` enlarges the span. Returns the
/// reached rank and the selected words, ordered by nondecreasing length.
pub fn bracket_generating_rank(
    frame: &FrameField,
    x: &DVector<f64>,
    max_depth: usize,
) -> Result<(usize, Vec<BracketWord>)> {
    if max_depth < 1 {
        return Err(Error::InvalidInput("max_depth must be >= 1".into()));
    }
    let d = frame.dim();
    let r = frame.count();
    let mut selected: Vec<BracketWord> = Vec::new();
    let mut vectors: Vec<DVector<f64>> = Vec::new();

    for len in 1..=max_depth {
        let mut word = vec![1usize; len];
        loop {
            let bw = BracketWord(word.clone());
            let v = eval_word(frame, &word, x);
            if increases_rank(&vectors, &v) {
                vectors.push(v);
                selected.push(bw);
                if vectors.len() == d {
                    return Ok((d, selected));
                }
            }
            // next word in lexicographic order
            let mut k = len;
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                if word[k] < r {
                    word[k] += 1;
                    for w in word.iter_mut().skip(k + 1) {
                        *w = 1;
                    }
                    break;
                }
                if k == 0 {
                    word.clear();
                    break;
                }
            }
            if word.is_empty() {
                break;
            }
        }
    }
    Ok((vectors.len(), selected))
}

fn increases_rank(basis: &[DVector<f64>], candidate: &DVector<f64>) -> bool {
    let d = candidate.len();
    let cols = basis.len() + 1;
    let mut m = DMatrix::zeros(d, cols);
    for (c, v) in basis.iter().enumerate() {
        m.set_column(c, v);
    }
    m.set_column(cols - 1, candidate);
    matrix_rank(&m) > basis.len()
}

/// Rank via singular values with the relative threshold [`RANK_TOLERANCE`].
pub fn matrix_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOLERANCE * max).count()
}
