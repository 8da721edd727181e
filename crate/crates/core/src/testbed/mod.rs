//! Synthetic constrained problems with analytic per-block gradients.
//!
//! An [`ObjectivePair`] bundles a primary objective `f`, a constraint objective
//! `g`, the initial model and, for tasks with injected conflict, the ground
//! truth of where that conflict lives. Generators verify their own gradients
//! against central finite differences before returning.

mod generators;
mod probe;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ModelState;

pub use generators::{
    make_conflicting_quadratics, make_localized_conflict_task, make_orthogonal_quadratics,
    make_two_layer_linear_task, LocalizedConflictTask, TwoLayerLinearTask,
};
pub use probe::{direction_probe, ProbeDirection};

/// Central-difference step used by the self-test.
pub const FD_STEP: f64 = 1e-5;
/// Largest relative gradient error the self-test accepts.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Loss and per-block gradients at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grads: Vec<Matrix>,
}

/// A differentiable objective over a [`ModelState`]. `step` lets a task vary
/// its targets over time; stationary objectives ignore it.
pub trait Objective: Send + Sync {
    fn evaluate(&self, state: &ModelState, step: usize) -> Result<Evaluation>;

    /// Loss only; the default discards the gradients.
    fn loss(&self, state: &ModelState, step: usize) -> Result<f64> {
        self.evaluate(state, step).map(|e| e.loss)
    }
}

/// Inclusive step range on one block where conflict is injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictWindow {
    pub block: usize,
    pub first_step: usize,
    pub last_step: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictMask {
    pub windows: Vec<ConflictWindow>,
}

impl ConflictMask {
    pub fn contains(&self, step: usize, block: usize) -> bool {
        self.windows
            .iter()
            .any(|w| w.block == block && (w.first_step..=w.last_step).contains(&step))
    }

    /// Every `(step, block)` pair in the mask that falls below `steps`.
    pub fn pairs(&self, steps: usize) -> BTreeSet<(usize, usize)> {
        self.windows
            .iter()
            .flat_map(|w| (w.first_step..=w.last_step.min(steps.saturating_sub(1))).map(move |t| (t, w.block)))
            .collect()
    }

    /// Precision and recall of `activations` against the mask over `steps`
    /// steps. An empty activation set has precision 0 unless the mask is also
    /// empty.
    pub fn score(&self, activations: &BTreeSet<(usize, usize)>, steps: usize) -> (f64, f64) {
        let truth = self.pairs(steps);
        if truth.is_empty() && activations.is_empty() {
            return (1.0, 1.0);
        }
        let hits = activations.intersection(&truth).count() as f64;
        let ratio = |den: usize| if den == 0 { 0.0 } else { hits / den as f64 };
        (ratio(activations.len()), ratio(truth.len()))
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    /// Worst relative error `‖analytic − fd‖ / max(‖analytic‖, ‖fd‖)` over
    /// both objectives and all blocks.
    pub max_rel_error: f64,
    pub worst_objective: &'static str,
    pub worst_block: usize,
}

impl GradientCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

#[derive(Clone)]
pub struct ObjectivePair {
    pub name: String,
    f: Arc<dyn Objective>,
    g: Arc<dyn Objective>,
    initial: ModelState,
    pub conflict_mask: Option<ConflictMask>,
}

impl fmt::Debug for ObjectivePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectivePair")
            .field("name", &self.name)
            .field("layout", &self.initial.layout())
            .field("conflict_mask", &self.conflict_mask)
            .finish()
    }
}

impl ObjectivePair {
    pub fn new(
        name: impl Into<String>,
        f: Arc<dyn Objective>,
        g: Arc<dyn Objective>,
        initial: ModelState,
        conflict_mask: Option<ConflictMask>,
    ) -> Self {
        Self {
            name: name.into(),
            f,
            g,
            initial,
            conflict_mask,
        }
    }

    pub fn initial_state(&self) -> &ModelState {
        &self.initial
    }

    pub fn eval_f(&self, state: &ModelState, step: usize) -> Result<Evaluation> {
        checked(self.f.as_ref(), state, step, "f")
    }

    pub fn eval_g(&self, state: &ModelState, step: usize) -> Result<Evaluation> {
        checked(self.g.as_ref(), state, step, "g")
    }

    /// The initial state plus i.i.d. `N(0, scale²)` noise on every entry.
    pub fn random_state<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> ModelState {
        let mut state = self.initial.clone();
        for block in state.blocks_mut() {
            block.matrix = block
                .matrix
                .map(|x| x + scale * rng.sample::<f64, _>(StandardNormal));
        }
        state
    }

    /// Compares analytic gradients of both objectives with central finite
    /// differences of step `h` at `state`.
    pub fn gradient_check(&self, state: &ModelState, step: usize, h: f64) -> Result<GradientCheck> {
        let mut report = GradientCheck {
            max_rel_error: 0.0,
            worst_objective: "f",
            worst_block: 0,
        };
        for (label, obj) in [("f", &self.f), ("g", &self.g)] {
            let analytic = checked(obj.as_ref(), state, step, label)?;
            for (l, grad) in analytic.grads.iter().enumerate() {
                let fd = finite_difference(obj.as_ref(), state, step, l, h)?;
                let err = relative_error(grad, &fd);
                if err > report.max_rel_error {
                    report = GradientCheck {
                        max_rel_error: err,
                        worst_objective: label,
                        worst_block: l,
                    };
                }
            }
        }
        Ok(report)
    }

    /// Gradient check at the initial state for each of `steps`; fails with a
    /// numerical error when any check exceeds [`FD_TOLERANCE`].
    pub fn self_test(&self, steps: &[usize]) -> Result<()> {
        for &t in steps {
            let check = self.gradient_check(&self.initial, t, FD_STEP)?;
            if !check.passes(FD_TOLERANCE) {
                return Err(Error::Numerical(format!(
                    "{}: gradient self-test failed at step {t}: relative error {:.3e} on {} block {}",
                    self.name, check.max_rel_error, check.worst_objective, check.worst_block
                )));
            }
        }
        Ok(())
    }
}

fn checked(obj: &dyn Objective, state: &ModelState, step: usize, label: &str) -> Result<Evaluation> {
    let e = obj.evaluate(state, step)?;
    let shapes_ok = e.grads.len() == state.len()
        && e.grads
            .iter()
            .zip(state.matrices())
            .all(|(g, m)| g.shape() == m.shape());
    if !shapes_ok {
        return Err(Error::InvalidInput(format!(
            "objective {label} returned gradients that do not match the model layout"
        )));
    }
    Ok(e)
}

fn finite_difference(
    obj: &dyn Objective,
    state: &ModelState,
    step: usize,
    block: usize,
    h: f64,
) -> Result<Matrix> {
    let (rows, cols) = state.block(block).shape();
    let mut probe = state.clone();
    let mut fd = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let x = state.block(block).get(i, j);
            probe.blocks_mut()[block].matrix.set(i, j, x + h);
            let plus = obj.loss(&probe, step)?;
            probe.blocks_mut()[block].matrix.set(i, j, x - h);
            let minus = obj.loss(&probe, step)?;
            probe.blocks_mut()[block].matrix.set(i, j, x);
            fd.set(i, j, (plus - minus) / (2.0 * h));
        }
    }
    Ok(fd)
}

fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale < 1e-12 {
        0.0
    } else {
        a.distance(b) / scale
    }
}
