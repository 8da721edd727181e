//! One-shot task-vector merging: direct superposition, singular-interference
//! measurement and the Procrustes-whitened interference-free merge.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{layout_mismatches, ModelState};
use crate::spectral::{compact_svd, msign_exact, procrustes_orthogonalize, SvdFactors, DEFAULT_RANK_TOL};

/// Per-block parameter differences against a base model.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    deltas: ModelState,
}

impl TaskVector {
    pub fn new(blocks: Vec<(String, Matrix)>) -> Result<Self> {
        Ok(Self {
            deltas: ModelState::new(blocks)?,
        })
    }

    pub fn from_state(deltas: ModelState) -> Self {
        Self { deltas }
    }

    /// The deltas as a model (useful for archiving).
    pub fn as_state(&self) -> &ModelState {
        &self.deltas
    }

    pub fn into_state(self) -> ModelState {
        self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn delta(&self, index: usize) -> &Matrix {
        self.deltas.block(index)
    }

    pub fn name(&self, index: usize) -> &str {
        self.deltas.name(index)
    }

    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        self.deltas.layout()
    }

    pub fn scaled(&self, c: f64) -> TaskVector {
        let mut out = self.clone();
        for block in out.deltas.blocks_mut() {
            block.matrix = block.matrix.scale(c);
        }
        out
    }

    fn zip_with(
        &self,
        other: &TaskVector,
        f: impl Fn(&Matrix, &Matrix) -> Matrix,
    ) -> Result<TaskVector> {
        check_layouts(&self.layout(), &other.layout())?;
        let mut out = self.clone();
        for (block, o) in out.deltas.blocks_mut().iter_mut().zip(other.deltas.matrices()) {
            block.matrix = f(&block.matrix, o);
        }
        Ok(out)
    }
}

fn check_layouts(a: &[(String, usize, usize)], b: &[(String, usize, usize)]) -> Result<()> {
    let bad = layout_mismatches(a, b);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("layout mismatch: {}", bad.join(", "))))
    }
}

/// `finetuned − base`, blockwise.
pub fn compute_task_vector(base: &ModelState, finetuned: &ModelState) -> Result<TaskVector> {
    check_layouts(&finetuned.layout(), &base.layout())?;
    let mut deltas = finetuned.clone();
    deltas.step = 0;
    for (block, b) in deltas.blocks_mut().iter_mut().zip(base.matrices()) {
        block.matrix = &block.matrix - b;
    }
    Ok(TaskVector { deltas })
}

/// `base + delta`, blockwise.
pub fn apply_task_vector(base: &ModelState, delta: &TaskVector) -> Result<ModelState> {
    check_layouts(&base.layout(), &delta.layout())?;
    let mut out = base.clone();
    for (block, d) in out.blocks_mut().iter_mut().zip(delta.deltas.matrices()) {
        block.matrix = &block.matrix + d;
    }
    Ok(out)
}

/// `Δ_f + Δ_g`.
pub fn direct_merge(delta_f: &TaskVector, delta_g: &TaskVector) -> Result<TaskVector> {
    delta_f.zip_with(delta_g, |a, b| a + b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInterference {
    pub name: String,
    pub value: f64,
    /// One of the deltas was zero; `value` is then reported as 0.
    pub zero_delta: bool,
}

fn factors(m: &Matrix) -> Result<Option<SvdFactors>> {
    if m.is_zero() {
        Ok(None)
    } else {
        compact_svd(m, DEFAULT_RANK_TOL).map(Some)
    }
}

/// `‖ÛᵀÛ − I‖_F + ‖V̂ᵀV̂ − I‖_F` per block, with `Û = [U_f, U_g]` and
/// `V̂ = [V_f, V_g]` from the compact SVDs of the two deltas.
pub fn singular_interference(delta_f: &TaskVector, delta_g: &TaskVector) -> Result<Vec<BlockInterference>> {
    check_layouts(&delta_f.layout(), &delta_g.layout())?;
    (0..delta_f.len())
        .into_par_iter()
        .map(|l| {
            let name = delta_f.name(l).to_string();
            match (factors(delta_f.delta(l))?, factors(delta_g.delta(l))?) {
                (Some(f), Some(g)) => Ok(BlockInterference {
                    name,
                    value: stack_interference(&f.u, &g.u, &f.v, &g.v)?,
                    zero_delta: false,
                }),
                _ => Ok(BlockInterference {
                    name,
                    value: 0.0,
                    zero_delta: true,
                }),
            }
        })
        .collect()
}

fn stack_interference(uf: &Matrix, ug: &Matrix, vf: &Matrix, vg: &Matrix) -> Result<f64> {
    let u = Matrix::hstack(&[uf, ug])?;
    let v = Matrix::hstack(&[vf, vg])?;
    Ok(u.orthonormality_defect() + v.orthonormality_defect())
}

/// Whitened factors of one block: `Û* · diag(core) · V̂*ᵀ` is the merged delta.
#[derive(Clone, Debug, PartialEq)]
pub struct WhitenedBlock {
    pub u_star: Matrix,
    pub v_star: Matrix,
    /// `Σ_f` followed by `Σ_g`.
    pub core: Vec<f64>,
    /// Number of leading core entries that belong to `Δ_f`.
    pub f_rank: usize,
    /// The stack was rank deficient (or wider than tall) and was orthogonalized
    /// with msign instead of Procrustes.
    pub fallback: bool,
}

impl WhitenedBlock {
    pub fn merged(&self) -> Matrix {
        let scaled = Matrix::from_fn(self.u_star.rows(), self.u_star.cols(), |i, j| {
            self.u_star.get(i, j) * self.core[j]
        });
        scaled.matmul_transpose(&self.v_star)
    }

    /// `‖Û*ᵀÛ* − I‖_F + ‖V̂*ᵀV̂* − I‖_F`.
    pub fn interference(&self) -> f64 {
        self.u_star.orthonormality_defect() + self.v_star.orthonormality_defect()
    }
}

/// Whitens one block pair. `None` when both deltas are zero.
pub fn whiten_block(delta_f: &Matrix, delta_g: &Matrix) -> Result<Option<WhitenedBlock>> {
    let parts: Vec<SvdFactors> = [factors(delta_f)?, factors(delta_g)?]
        .into_iter()
        .flatten()
        .collect();
    if parts.is_empty() {
        return Ok(None);
    }
    let f_rank = if delta_f.is_zero() { 0 } else { parts[0].rank() };
    let u_hat = Matrix::hstack(&parts.iter().map(|p| &p.u).collect::<Vec<_>>())?;
    let v_hat = Matrix::hstack(&parts.iter().map(|p| &p.v).collect::<Vec<_>>())?;
    let core: Vec<f64> = parts.iter().flat_map(|p| p.sigma.iter().copied()).collect();
    let (u_star, v_star, fallback) =
        match (procrustes_orthogonalize(&u_hat), procrustes_orthogonalize(&v_hat)) {
            (Ok(u), Ok(v)) => (u, v, false),
            (Err(Error::Degenerate(_) | Error::InvalidInput(_)), _)
            | (_, Err(Error::Degenerate(_) | Error::InvalidInput(_))) => {
                (msign_exact(&u_hat)?, msign_exact(&v_hat)?, true)
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
    Ok(Some(WhitenedBlock {
        u_star,
        v_star,
        core,
        f_rank,
        fallback,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMergeReport {
    pub name: String,
    pub interference_before: f64,
    pub interference_after: f64,
    pub fallback: bool,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeOutcome {
    pub merged: TaskVector,
    pub reports: Vec<BlockMergeReport>,
}

/// Blockwise `Û* · blockdiag(Σ_f, Σ_g) · V̂*ᵀ` with `Û*`, `V̂*` the Procrustes
/// orthogonalizations of the stacked singular bases. A zero delta counts as an
/// absent task. Rank-deficient stacks fall back to msign of the stack and are
/// flagged in the report.
pub fn interference_free_merge(delta_f: &TaskVector, delta_g: &TaskVector) -> Result<MergeOutcome> {
    let before = singular_interference(delta_f, delta_g)?;
    let blocks: Vec<(Matrix, BlockMergeReport)> = (0..delta_f.len())
        .into_par_iter()
        .map(|l| {
            let (df, dg) = (delta_f.delta(l), delta_g.delta(l));
            let name = delta_f.name(l).to_string();
            let whitened = whiten_block(df, dg).map_err(|e| e.context(format!("block {name}")))?;
            let mut warning = before[l]
                .zero_delta
                .then(|| "a task delta is zero; treated as absent".to_string());
            let (merged, after, fallback) = match whitened {
                None => (Matrix::zeros(df.rows(), df.cols()), 0.0, false),
                Some(w) => {
                    if w.fallback {
                        warning = Some(format!(
                            "stacked bases are rank deficient ({} columns in {}x{}); used msign fallback",
                            w.core.len(),
                            df.rows(),
                            df.cols()
                        ));
                    }
                    (w.merged(), w.interference(), w.fallback)
                }
            };
            Ok((
                merged,
                BlockMergeReport {
                    name,
                    interference_before: before[l].value,
                    interference_after: after,
                    fallback,
                    warning,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let (matrices, reports): (Vec<Matrix>, Vec<BlockMergeReport>) = blocks.into_iter().unzip();
    let merged = TaskVector::new(
        delta_f
            .layout()
            .into_iter()
            .zip(matrices)
            .map(|((name, _, _), m)| (name, m))
            .collect(),
    )?;
    Ok(MergeOutcome { merged, reports })
}
