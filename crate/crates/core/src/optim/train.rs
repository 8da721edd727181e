//! Blockwise training loops (SIFT and the baselines share one driver).

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    alignment_score, gradient_projection, muon_step_with, sift_direction_with, AdamWState,
    DualMomentum, OptimizerConfig,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelState, ParamBlock};
use crate::telemetry::{momentum_rank, AlignmentRecord, LossRecord, RankRecord, RunTelemetry};
use crate::testbed::ObjectivePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sift,
    Muon,
    AdamW,
    Projection,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sift, Method::Muon, Method::AdamW, Method::Projection];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sift => "sift",
            Method::Muon => "muon",
            Method::AdamW => "adamw",
            Method::Projection => "projection",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown optimizer {s:?} (expected sift, muon, adamw or projection)"
                ))
            })
    }
}

/// Reference methods SIFT is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Baseline {
    AdamW,
    Muon,
    Projection,
}

impl From<Baseline> for Method {
    fn from(b: Baseline) -> Self {
        match b {
            Baseline::AdamW => Method::AdamW,
            Baseline::Muon => Method::Muon,
            Baseline::Projection => Method::Projection,
        }
    }
}

/// Runs `steps` steps of SIFT: per block, misaligned blocks
/// (`τ < ε`) step along the SIFT direction, all others take a Muon step on
/// the combined momentum `λ M_f + M_g`.
pub fn sift_train(
    model: ModelState,
    objectives: &ObjectivePair,
    config: &OptimizerConfig,
    steps: usize,
) -> Result<(ModelState, RunTelemetry)> {
    train(model, objectives, config, steps, Method::Sift)
}

pub fn baseline_train(
    model: ModelState,
    objectives: &ObjectivePair,
    config: &OptimizerConfig,
    steps: usize,
    method: Baseline,
) -> Result<(ModelState, RunTelemetry)> {
    train(model, objectives, config, steps, method.into())
}

struct BlockState {
    momentum: DualMomentum,
    adam: AdamWState,
}

struct BlockOutcome {
    tau: f64,
    activated: bool,
    rank: Option<(usize, bool)>,
}

/// Shared driver. Losses are recorded for steps `0..=steps` (the last entry is
/// the returned state); alignment records cover steps `0..steps`.
pub fn train(
    mut model: ModelState,
    objectives: &ObjectivePair,
    config: &OptimizerConfig,
    steps: usize,
    method: Method,
) -> Result<(ModelState, RunTelemetry)> {
    config.validate()?;
    let bad = model.layout_mismatches(objectives.initial_state());
    if !bad.is_empty() {
        return Err(Error::InvalidInput(format!(
            "model layout does not match the objectives: {}",
            bad.join(", ")
        )));
    }
    let mut states: Vec<BlockState> = model
        .matrices()
        .map(|m| BlockState {
            momentum: DualMomentum::zeros(m.rows(), m.cols()),
            adam: AdamWState::zeros(m.rows(), m.cols()),
        })
        .collect();
    let mut telemetry = RunTelemetry::new(method, config);
    if config.rank_alpha.is_some() {
        telemetry.rank_trace = Some(Vec::new());
    }

    for t in 0..steps {
        let (ef, eg) = evaluate(objectives, &model, t)?;
        telemetry.losses.push(LossRecord {
            step: t,
            f_loss: ef.loss,
            g_loss: eg.loss,
        });
        let eta = config.eta.at(t);
        let outcomes: Vec<Result<BlockOutcome>> = model
            .blocks_mut()
            .par_iter_mut()
            .zip(states.par_iter_mut())
            .enumerate()
            .map(|(l, (block, state))| {
                update_block(block, state, &ef.grads[l], &eg.grads[l], eta, config, method)
                    .map_err(|e| e.context(format!("step {t}, block {l} ({})", block.name)))
            })
            .collect();
        for (l, outcome) in outcomes.into_iter().enumerate() {
            let o = outcome?;
            telemetry.alignment.push(AlignmentRecord {
                step: t,
                block_index: l,
                block_name: model.name(l).to_string(),
                tau: o.tau,
                activated: o.activated,
            });
            if let (Some(trace), Some((rank, zero)), Some(alpha)) =
                (telemetry.rank_trace.as_mut(), o.rank, config.rank_alpha)
            {
                trace.push(RankRecord {
                    step: t,
                    block_index: l,
                    alpha,
                    effective_rank: rank,
                    zero_momentum: zero,
                });
            }
        }
    }

    let (ef, eg) = evaluate(objectives, &model, steps)?;
    telemetry.losses.push(LossRecord {
        step: steps,
        f_loss: ef.loss,
        g_loss: eg.loss,
    });
    model.step += steps;
    Ok((model, telemetry))
}

fn evaluate(
    objectives: &ObjectivePair,
    model: &ModelState,
    step: usize,
) -> Result<(crate::testbed::Evaluation, crate::testbed::Evaluation)> {
    let (ef, eg) = rayon::join(
        || objectives.eval_f(model, step),
        || objectives.eval_g(model, step),
    );
    let (ef, eg) = (ef?, eg?);
    for (label, e) in [("f", &ef), ("g", &eg)] {
        if !e.loss.is_finite() {
            return Err(Error::Numerical(format!(
                "step {step}: loss of {label} is {}",
                e.loss
            )));
        }
        if let Some(l) = e.grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "step {step}, block {l} ({}): non-finite gradient of {label}",
                model.name(l)
            )));
        }
    }
    Ok((ef, eg))
}

fn update_block(
    block: &mut ParamBlock,
    state: &mut BlockState,
    grad_f: &Matrix,
    grad_g: &Matrix,
    eta: f64,
    config: &OptimizerConfig,
    method: Method,
) -> Result<BlockOutcome> {
    state.momentum.update(grad_f, grad_g, config.beta)?;
    let tau = alignment_score(grad_f, grad_g, &state.momentum, config.alignment_source)?;
    let activated = method == Method::Sift && tau < config.epsilon;
    let theta = &block.matrix;
    let (rows, cols) = theta.shape();

    let combined = || state.momentum.combined(config.lambda);
    let updated = match method {
        Method::Sift if activated => {
            let dir = sift_direction_with(
                &state.momentum.m_f,
                &state.momentum.m_g,
                config.k.resolve(rows, cols),
                config.ns_iterations,
                config.ns_schedule,
            )?;
            let mut out = theta.clone();
            out.axpy(-eta, &dir);
            Some(out)
        }
        Method::Sift | Method::Muon => {
            let m = combined();
            if m.is_zero() {
                None
            } else {
                Some(muon_step_with(theta, &m, eta, config.ns_iterations, config.ns_schedule)?)
            }
        }
        Method::AdamW => {
            let mut g = grad_f.scale(config.lambda);
            g.axpy(1.0, grad_g);
            Some(state.adam.step(theta, &g, eta, &config.adamw))
        }
        Method::Projection => {
            let mut dir = if grad_g.is_zero() {
                grad_f.clone()
            } else {
                gradient_projection(grad_f, grad_g)?
            };
            dir = dir.scale(config.lambda);
            dir.axpy(1.0, grad_g);
            let mut out = theta.clone();
            out.axpy(-eta, &dir);
            Some(out)
        }
    };
    if let Some(next) = updated {
        if !next.is_finite() {
            return Err(Error::Numerical("update produced non-finite parameters".into()));
        }
        block.matrix = next;
    }

    let rank = match config.rank_alpha {
        Some(alpha) => Some(momentum_rank(&combined(), alpha)?),
        None => None,
    };
    Ok(BlockOutcome {
        tau,
        activated,
        rank,
    })
}
