use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ObjectivePair;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::optim::{gradient_projection, removed_component};

/// Which part of `∇f` a probe descends along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeDirection {
    /// The full gradient `∇f`.
    Full,
    /// `∇f` with its component along `∇g` removed.
    Projected,
    /// Only the component of `∇f` along `∇g`.
    Removed,
}

impl ProbeDirection {
    pub const ALL: [ProbeDirection; 3] = [
        ProbeDirection::Full,
        ProbeDirection::Projected,
        ProbeDirection::Removed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeDirection::Full => "full",
            ProbeDirection::Projected => "projected",
            ProbeDirection::Removed => "removed",
        }
    }
}

impl fmt::Display for ProbeDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeDirection::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown probe direction {s:?} (expected full, projected or removed)"
                ))
            })
    }
}

/// Takes `steps` fixed-size steps along `direction` (computed per block) and
/// returns `f` at the start and after every step, so the curve has
/// `steps + 1` entries.
///
/// Blocks whose `∇g` vanishes have nothing to project out: the projected
/// direction is the full gradient and the removed one is zero.
pub fn direction_probe(
    state: &ModelState,
    objectives: &ObjectivePair,
    direction: ProbeDirection,
    eta: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidInput("probe needs at least one step".into()));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidInput(format!("probe step size must be positive, got {eta}")));
    }
    let mut state = state.clone();
    let mut curve = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let ef = objectives.eval_f(&state, t)?;
        if !ef.loss.is_finite() {
            return Err(Error::Numerical(format!("probe step {t}: f is {}", ef.loss)));
        }
        curve.push(ef.loss);
        if t == steps {
            break;
        }
        let eg = match direction {
            ProbeDirection::Full => None,
            _ => Some(objectives.eval_g(&state, t)?),
        };
        for (l, grad_f) in ef.grads.iter().enumerate() {
            if !grad_f.is_finite() {
                return Err(Error::Numerical(format!(
                    "probe step {t}, block {l} ({}): non-finite gradient",
                    state.name(l)
                )));
            }
            let projected = direction == ProbeDirection::Projected;
            let dir = match &eg {
                None => grad_f.clone(),
                Some(eg) if eg.grads[l].is_zero() => {
                    if projected {
                        grad_f.clone()
                    } else {
                        grad_f.scale(0.0)
                    }
                }
                Some(eg) if projected => gradient_projection(grad_f, &eg.grads[l])?,
                Some(eg) => removed_component(grad_f, &eg.grads[l])?,
            };
            state.blocks_mut()[l].matrix.axpy(-eta, &dir);
        }
    }
    Ok(curve)
}
