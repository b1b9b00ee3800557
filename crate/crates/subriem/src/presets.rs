//! Bundled example configurations shared by the verification suite, the CLI
//! and the integration tests.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

use crate::frame::{frame_by_id, BracketWord, FrameField};
use crate::grid::GridField;
use crate::hamiltonian::LandmarkState;
use crate::kernel::KernelSpec;
use crate::matching::{MatchProblem, Optimizer};

fn state(d: usize, q: &[f64], p: &[f64]) -> LandmarkState {
    let n = q.len() / d;
    LandmarkState::new(
        DMatrix::from_column_slice(d, n, q),
        DMatrix::from_column_slice(d, n, p),
    )
    .expect("preset state")
}

/// One landmark in the plane shot along the x-axis; travels on a straight
/// line with constant covector.
pub fn single_landmark() -> (KernelSpec, LandmarkState) {
    (KernelSpec::full(1.0), state(2, &[0.0, 0.0], &[1.0, 0.0]))
}

/// Two landmarks on the line, shot head-on.
pub fn two_landmark_headon() -> (KernelSpec, LandmarkState) {
    (
        KernelSpec::full(1.0),
        state(1, &[-1.0, 1.0], &[1.0, -1.0]),
    )
}

/// Five landmarks on a circle with a swirl of momenta.
pub fn five_landmark_ring() -> (KernelSpec, LandmarkState) {
    let n = 5;
    let mut q = Vec::with_capacity(2 * n);
    let mut p = Vec::with_capacity(2 * n);
    for i in 0..n {
        let angle = 2.0 * PI * i as f64 / n as f64;
        q.push(angle.cos());
        q.push(angle.sin());
        p.push(-0.4 * angle.sin() + 0.1 * angle.cos());
        p.push(0.4 * angle.cos() + 0.1 * angle.sin());
    }
    (KernelSpec::full(0.5), state(2, &q, &p))
}

/// Twenty landmarks on a 5×4 grid with a smooth momentum pattern.
pub fn twenty_landmark_grid() -> (KernelSpec, LandmarkState) {
    let mut q = Vec::with_capacity(40);
    let mut p = Vec::with_capacity(40);
    for i in 0..5 {
        for j in 0..4 {
            let x = i as f64 * 0.5 - 1.0;
            let y = j as f64 * 0.5 - 0.75;
            q.push(x);
            q.push(y);
            p.push(0.3 * (PI * y).sin());
            p.push(-0.3 * (PI * x).sin());
        }
    }
    (KernelSpec::full(0.4), state(2, &q, &p))
}

/// One landmark under the Heisenberg-constrained kernel.
pub fn heisenberg_single() -> (KernelSpec, LandmarkState) {
    (
        KernelSpec::constrained(1.0, "heisenberg"),
        state(3, &[0.2, -0.1, 0.3], &[0.5, -0.3, 0.8]),
    )
}

/// Two landmarks under the Heisenberg-constrained kernel.
pub fn heisenberg_two() -> (KernelSpec, LandmarkState) {
    (
        KernelSpec::constrained(1.0, "heisenberg"),
        state(
            3,
            &[-0.5, 0.0, 0.1, 0.5, 0.2, -0.1],
            &[0.4, 0.2, -0.3, -0.2, 0.5, 0.1],
        ),
    )
}

/// Five landmarks under the Heisenberg-constrained kernel.
pub fn heisenberg_five() -> (KernelSpec, LandmarkState) {
    let n = 5;
    let mut q = Vec::with_capacity(3 * n);
    let mut p = Vec::with_capacity(3 * n);
    for i in 0..n {
        let angle = 2.0 * PI * i as f64 / n as f64;
        q.extend_from_slice(&[0.8 * angle.cos(), 0.8 * angle.sin(), 0.1 * i as f64]);
        p.extend_from_slice(&[
            -0.25 * angle.sin(),
            0.25 * angle.cos(),
            0.2 * (angle * 2.0).cos(),
        ]);
    }
    (KernelSpec::constrained(0.8, "heisenberg"), state(3, &q, &p))
}

/// Twenty landmarks under the Heisenberg-constrained kernel.
pub fn heisenberg_twenty() -> (KernelSpec, LandmarkState) {
    let mut q = Vec::with_capacity(60);
    let mut p = Vec::with_capacity(60);
    for i in 0..5 {
        for j in 0..4 {
            let x = i as f64 * 0.45 - 0.9;
            let y = j as f64 * 0.45 - 0.675;
            q.extend_from_slice(&[x, y, 0.2 * (x + y)]);
            p.extend_from_slice(&[
                0.2 * (PI * y).sin(),
                -0.2 * (PI * x).sin(),
                0.15 * (PI * (x - y)).cos(),
            ]);
        }
    }
    (KernelSpec::constrained(0.5, "heisenberg"), state(3, &q, &p))
}

/// Every bundled geodesic example used by the conservation and pushforward
/// checks, keyed by a short name.
pub fn conservation_examples() -> Vec<(&'static str, KernelSpec, LandmarkState)> {
    let mut out = Vec::new();
    let (s, st) = two_landmark_headon();
    out.push(("full_two_headon", s, st));
    let (s, st) = five_landmark_ring();
    out.push(("full_five_ring", s, st));
    let (s, st) = twenty_landmark_grid();
    out.push(("full_twenty_grid", s, st));
    let (s, st) = heisenberg_two();
    out.push(("heisenberg_two", s, st));
    let (s, st) = heisenberg_five();
    out.push(("heisenberg_five", s, st));
    let (s, st) = heisenberg_twenty();
    out.push(("heisenberg_twenty", s, st));
    out
}

/// The stationary singular configuration on the Grushin frame: a landmark
/// pinned on the degeneracy line with the covector annihilating the frame.
pub fn grushin_singular() -> (FrameField, Vec<LandmarkState>) {
    let frame = frame_by_id("grushin", 2).expect("registered frame");
    let s = state(2, &[0.0, 0.7], &[0.0, 1.0]);
    (frame, (0..11).map(|_| s.clone()).collect())
}

/// 1-D matching problem with a closed-form optimum at λ/(1+λ).
pub fn match_line(lambda: f64) -> MatchProblem {
    MatchProblem {
        q0: DMatrix::from_column_slice(1, 1, &[0.0]),
        q_target: DMatrix::from_column_slice(1, 1, &[1.0]),
        spec: KernelSpec::full(1.0),
        lambda,
        steps: 1000,
        optimizer: Optimizer::default(),
    }
}

/// Two landmarks whose matched paths cross, a genuinely interacting match.
/// The slight lateral offset keeps the zero-momentum start inside the
/// basin of the good optimum.
pub fn match_crossing_pair(lambda: f64) -> MatchProblem {
    MatchProblem {
        q0: DMatrix::from_column_slice(2, 2, &[-0.5, -0.5, -0.3, 0.5]),
        q_target: DMatrix::from_column_slice(2, 2, &[0.5, 0.5, 0.7, -0.5]),
        spec: KernelSpec::full(0.25),
        lambda,
        steps: 200,
        optimizer: Optimizer::default(),
    }
}

/// Sinusoidal density against the flat one, for the translation frame.
pub fn moser_translation_densities(resolution: usize) -> (GridField, GridField) {
    (
        GridField::sample_scalar(resolution, 2, |x| 1.0 + 0.3 * (2.0 * PI * x[0]).sin()),
        GridField::sample_scalar(resolution, 2, |_| 1.0),
    )
}

/// Cosine density in the degenerate direction of the sine frame.
pub fn moser_torus_sine_densities(resolution: usize) -> (GridField, GridField) {
    (
        GridField::sample_scalar(resolution, 2, |x| 1.0 + 0.2 * (2.0 * PI * x[1]).cos()),
        GridField::sample_scalar(resolution, 2, |_| 1.0),
    )
}

/// The Heisenberg frame with its depth-2 spanning families at the origin.
pub fn heisenberg_steering() -> (FrameField, Vec<BracketWord>) {
    let frame = frame_by_id("heisenberg", 3).expect("registered frame");
    let (rank, families) = crate::frame::bracket_generating_rank(
        &frame,
        &DVector::from_column_slice(&[0.0, 0.0, 0.0]),
        2,
    )
    .expect("rank check");
    assert_eq!(rank, 3);
    (frame, families)
}
