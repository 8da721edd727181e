//! Optimizer stack: heavy-ball momentum, the Muon step, gradient projection,
//! the SIFT subspace-controlled direction, and the training loops.
//!
//! Every primitive here works on one parameter block. The loops in [`train`]
//! apply them blockwise and record one alignment score per block per step.

mod adamw;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::spectral::{
    compact_svd, cosine_alignment, msign_newton_schulz_with, top_k_factors, NsSchedule,
    DEFAULT_NS_ITERATIONS, DEFAULT_RANK_TOL,
};

pub use adamw::{AdamWParams, AdamWState};
pub use train::{baseline_train, sift_train, train, Baseline, Method};

/// Subspace dimension `K` kept from each momentum before stacking.
///
/// Serialized as `"full"` or a positive integer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SubspaceDimRepr", into = "SubspaceDimRepr")]
pub enum SubspaceDim {
    /// Keep every nonzero singular component.
    #[default]
    Full,
    Top(usize),
}

impl SubspaceDim {
    /// `K = 128`, a common choice for large weight matrices.
    pub const PRESET_128: SubspaceDim = SubspaceDim::Top(128);

    /// Number of components to request from a matrix of the given shape.
    pub fn resolve(self, rows: usize, cols: usize) -> usize {
        match self {
            SubspaceDim::Full => rows.min(cols),
            SubspaceDim::Top(k) => k,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SubspaceDimRepr {
    Count(usize),
    Name(String),
}

impl TryFrom<SubspaceDimRepr> for SubspaceDim {
    type Error = String;

    fn try_from(r: SubspaceDimRepr) -> std::result::Result<Self, String> {
        match r {
            SubspaceDimRepr::Count(k) => Ok(SubspaceDim::Top(k)),
            SubspaceDimRepr::Name(s) if s == "full" => Ok(SubspaceDim::Full),
            SubspaceDimRepr::Name(s) => Err(format!("k must be \"full\" or an integer, got {s:?}")),
        }
    }
}

impl From<SubspaceDim> for SubspaceDimRepr {
    fn from(k: SubspaceDim) -> Self {
        match k {
            SubspaceDim::Full => SubspaceDimRepr::Name("full".into()),
            SubspaceDim::Top(k) => SubspaceDimRepr::Count(k),
        }
    }
}

/// Step-size schedule `η_t`.
///
/// Serialized as a plain number (constant) or a table
/// `{ initial, factor, every }`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "StepScheduleRepr", into = "StepScheduleRepr")]
pub enum StepSchedule {
    Constant(f64),
    /// `initial · factor^(t / every)`.
    StepDecay {
        initial: f64,
        factor: f64,
        every: usize,
    },
}

impl StepSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            StepSchedule::Constant(eta) => eta,
            StepSchedule::StepDecay {
                initial,
                factor,
                every,
            } => initial * factor.powi((step / every.max(1)) as i32),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant(eta) => eta > 0.0 && eta.is_finite(),
            StepSchedule::StepDecay {
                initial,
                factor,
                every,
            } => initial > 0.0 && initial.is_finite() && factor > 0.0 && factor.is_finite() && every > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "step sizes must be positive and finite: {self:?}"
            )))
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepDecayRepr {
    initial: f64,
    factor: f64,
    every: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StepScheduleRepr {
    Constant(f64),
    StepDecay(StepDecayRepr),
}

impl From<StepScheduleRepr> for StepSchedule {
    fn from(r: StepScheduleRepr) -> Self {
        match r {
            StepScheduleRepr::Constant(eta) => StepSchedule::Constant(eta),
            StepScheduleRepr::StepDecay(d) => StepSchedule::StepDecay {
                initial: d.initial,
                factor: d.factor,
                every: d.every,
            },
        }
    }
}

impl From<StepSchedule> for StepScheduleRepr {
    fn from(s: StepSchedule) -> Self {
        match s {
            StepSchedule::Constant(eta) => StepScheduleRepr::Constant(eta),
            StepSchedule::StepDecay {
                initial,
                factor,
                every,
            } => StepScheduleRepr::StepDecay(StepDecayRepr {
                initial,
                factor,
                every,
            }),
        }
    }
}

/// Which pair of per-block signals the alignment score compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentSource {
    #[default]
    Gradient,
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub k: SubspaceDim,
    /// Misalignment threshold; SIFT intervenes on a block when `τ < epsilon`.
    pub epsilon: f64,
    pub beta: f64,
    pub eta: StepSchedule,
    /// Weight of the primary objective in `λ f + g`.
    pub lambda: f64,
    pub ns_iterations: usize,
    pub ns_schedule: NsSchedule,
    pub alignment_source: AlignmentSource,
    pub adamw: AdamWParams,
    /// When set, the effective rank of each block's combined momentum at this
    /// energy level is recorded every step.
    pub rank_alpha: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            k: SubspaceDim::Full,
            epsilon: -0.1,
            beta: 0.95,
            eta: StepSchedule::Constant(0.02),
            lambda: 1.0,
            ns_iterations: DEFAULT_NS_ITERATIONS,
            ns_schedule: NsSchedule::default(),
            alignment_source: AlignmentSource::Gradient,
            adamw: AdamWParams::default(),
            rank_alpha: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidInput(msg));
        if !(self.epsilon < 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be negative, got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.ns_iterations == 0 {
            return fail("ns_iterations must be positive".into());
        }
        if self.k == SubspaceDim::Top(0) {
            return fail("subspace dimension k must be positive".into());
        }
        if let Some(alpha) = self.rank_alpha {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return fail(format!("rank_alpha must lie in (0, 1], got {alpha}"));
            }
        }
        self.adamw.validate()?;
        self.eta.validate()
    }
}

/// Per-block momenta of the primary (`m_f`) and constraint (`m_g`) objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct DualMomentum {
    pub m_f: Matrix,
    pub m_g: Matrix,
}

impl DualMomentum {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m_f: Matrix::zeros(rows, cols),
            m_g: Matrix::zeros(rows, cols),
        }
    }

    pub fn update(&mut self, grad_f: &Matrix, grad_g: &Matrix, beta: f64) -> Result<()> {
        self.m_f = momentum_update(&self.m_f, grad_f, beta)?;
        self.m_g = momentum_update(&self.m_g, grad_g, beta)?;
        Ok(())
    }

    /// Momentum of the regularized objective `λ f + g`.
    pub fn combined(&self, lambda: f64) -> Matrix {
        let mut m = self.m_f.scale(lambda);
        m.axpy(1.0, &self.m_g);
        m
    }
}

/// Heavy-ball accumulation `beta · m_prev + grad`.
pub fn momentum_update(m_prev: &Matrix, grad: &Matrix, beta: f64) -> Result<Matrix> {
    if m_prev.shape() != grad.shape() {
        return Err(Error::InvalidInput(format!(
            "momentum is {:?} but gradient is {:?}",
            m_prev.shape(),
            grad.shape()
        )));
    }
    Ok(m_prev.zip_map(grad, |m, g| beta * m + g))
}

/// `theta − eta · msign(m)` with msign from Newton–Schulz.
pub fn muon_step(theta: &Matrix, m: &Matrix, eta: f64, ns_iterations: usize) -> Result<Matrix> {
    muon_step_with(theta, m, eta, ns_iterations, NsSchedule::default())
}

pub fn muon_step_with(
    theta: &Matrix,
    m: &Matrix,
    eta: f64,
    ns_iterations: usize,
    schedule: NsSchedule,
) -> Result<Matrix> {
    if theta.shape() != m.shape() {
        return Err(Error::InvalidInput(format!(
            "parameter is {:?} but momentum is {:?}",
            theta.shape(),
            m.shape()
        )));
    }
    if m.is_zero() {
        return Err(Error::Degenerate(
            "zero momentum defines no Muon direction".into(),
        ));
    }
    let dir = msign_newton_schulz_with(m, ns_iterations, schedule)?;
    let mut out = theta.clone();
    out.axpy(-eta, &dir);
    Ok(out)
}

fn projection_coefficient(grad_f: &Matrix, grad_g: &Matrix) -> Result<f64> {
    let dot = grad_f.try_dot(grad_g)?;
    let gg = grad_g.dot(grad_g);
    if gg == 0.0 {
        return Err(Error::Degenerate(
            "projection onto a zero constraint gradient is undefined".into(),
        ));
    }
    Ok(dot / gg)
}

/// `grad_f` with its component along `grad_g` removed (vectorized projection).
pub fn gradient_projection(grad_f: &Matrix, grad_g: &Matrix) -> Result<Matrix> {
    let c = projection_coefficient(grad_f, grad_g)?;
    let mut out = grad_f.clone();
    out.axpy(-c, grad_g);
    Ok(out)
}

/// The component of `grad_f` that [`gradient_projection`] discards:
/// `grad_f − gradient_projection(grad_f, grad_g)`.
pub fn removed_component(grad_f: &Matrix, grad_g: &Matrix) -> Result<Matrix> {
    let projected = gradient_projection(grad_f, grad_g)?;
    Ok(grad_f - &projected)
}

/// SIFT descent direction from the two momenta.
///
/// Takes the top-`k` singular bases of each momentum, stacks them side by side
/// (`[U_f, U_g]`, `[V_f, V_g]`), orthogonalizes each stack with msign and
/// returns `Û* (V̂*)ᵀ`. Singular values are only used to select the top
/// components. Wide stacks (more than `rows` columns) go through msign's
/// transpose convention, and shared directions collapse inside msign, so
/// overlapping subspaces never fail.
pub fn sift_direction(m_f: &Matrix, m_g: &Matrix, k: usize, ns_iterations: usize) -> Result<Matrix> {
    sift_direction_with(m_f, m_g, k, ns_iterations, NsSchedule::default())
}

pub fn sift_direction_with(
    m_f: &Matrix,
    m_g: &Matrix,
    k: usize,
    ns_iterations: usize,
    schedule: NsSchedule,
) -> Result<Matrix> {
    if m_f.shape() != m_g.shape() {
        return Err(Error::InvalidInput(format!(
            "momenta shapes differ: {:?} vs {:?}",
            m_f.shape(),
            m_g.shape()
        )));
    }
    if m_f.is_zero() || m_g.is_zero() {
        return Err(Error::Degenerate(
            "SIFT direction needs two nonzero momenta".into(),
        ));
    }
    let f = top_k_factors(&compact_svd(m_f, DEFAULT_RANK_TOL)?, k)?;
    let g = top_k_factors(&compact_svd(m_g, DEFAULT_RANK_TOL)?, k)?;
    let u_stack = Matrix::hstack(&[&f.u, &g.u])?;
    let v_stack = Matrix::hstack(&[&f.v, &g.v])?;
    let u_star = msign_newton_schulz_with(&u_stack, ns_iterations, schedule)?;
    let v_star = msign_newton_schulz_with(&v_stack, ns_iterations, schedule)?;
    Ok(u_star.matmul_transpose(&v_star))
}

/// Alignment score `τ` of one block. A zero operand cannot conflict, so it
/// scores 0.
pub fn alignment_score(
    grad_f: &Matrix,
    grad_g: &Matrix,
    momentum: &DualMomentum,
    source: AlignmentSource,
) -> Result<f64> {
    let (a, b) = match source {
        AlignmentSource::Gradient => (grad_f, grad_g),
        AlignmentSource::Momentum => (&momentum.m_f, &momentum.m_g),
    };
    match cosine_alignment(a, b) {
        Ok(tau) => Ok(tau),
        Err(Error::Degenerate(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}
