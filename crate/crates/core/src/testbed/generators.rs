use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};

use super::{ConflictMask, ConflictWindow, Evaluation, Objective, ObjectivePair};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ModelState;
use crate::spectral::cosine_alignment;

const MAX_DRAWS: usize = 1000;
const OVERLAP_TOLERANCE: f64 = 0.05;

/// Matrix of i.i.d. `N(0, scale²)` entries.
pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn require(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput(msg()))
    }
}

fn single_block(m: Matrix) -> ModelState {
    ModelState::new(vec![("w".to_string(), m)]).expect("one block is a valid model")
}

/// `½‖(AΘ − B) ∘ mask‖²` on a single block; the mask zeroes whole columns.
struct Quadratic {
    a: Matrix,
    b: Matrix,
    columns: Option<Vec<bool>>,
}

impl Objective for Quadratic {
    fn evaluate(&self, state: &ModelState, _step: usize) -> Result<Evaluation> {
        let mut r = self.a.try_matmul(state.block(0))?.try_sub(&self.b)?;
        if let Some(cols) = &self.columns {
            r = Matrix::from_fn(r.rows(), r.cols(), |i, j| if cols[j] { r.get(i, j) } else { 0.0 });
        }
        Ok(Evaluation {
            loss: 0.5 * r.dot(&r),
            grads: vec![self.a.transpose_matmul(&r)],
        })
    }
}

/// Solves `Aᵀ X = H` for square `A`; `None` when `A` is numerically singular.
fn solve_transposed(a: &Matrix, h: &Matrix) -> Option<Matrix> {
    let at = Mat::<f64>::from_fn(a.cols(), a.rows(), |i, j| a.get(j, i));
    let rhs = Mat::<f64>::from_fn(h.rows(), h.cols(), |i, j| h.get(i, j));
    let x = at.partial_piv_lu().solve(&rhs);
    let out = Matrix::from_fn(h.rows(), h.cols(), |i, j| x[(i, j)]);
    out.is_finite().then_some(out)
}

/// Two quadratics `f = ½‖AΘ − B‖²`, `g = ½‖AΘ − D‖²` on one `n × p` block
/// whose gradients at `Θ = 0` have cosine `−overlap`.
///
/// `D` is solved for so that `∇g(0)` hits a target built from `∇f(0)` and a
/// random orthogonal direction; the measured alignment is verified and the
/// draw repeated (up to 1000 times) if it misses by more than 0.05.
pub fn make_conflicting_quadratics(n: usize, p: usize, overlap: f64, seed: u64) -> Result<ObjectivePair> {
    require(n >= 2 && p >= 2, || format!("quadratic task needs n, p >= 2, got {n}x{p}"))?;
    require((0.0..=1.0).contains(&overlap), || {
        format!("overlap must lie in [0, 1], got {overlap}")
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = single_block(Matrix::zeros(n, p));
    for _ in 0..MAX_DRAWS {
        let noise = gaussian(&mut rng, n, n, 0.3 / (n as f64).sqrt());
        let a = &Matrix::identity(n) + &noise;
        let b = gaussian(&mut rng, n, p, 1.0);
        let ortho = gaussian(&mut rng, n, p, 1.0);

        let grad_f = a.transpose_matmul(&b).scale(-1.0);
        let gf_norm = grad_f.frobenius_norm();
        if gf_norm == 0.0 {
            continue;
        }
        let unit_f = grad_f.scale(1.0 / gf_norm);
        let mut perp = ortho.clone();
        perp.axpy(-perp.dot(&unit_f), &unit_f);
        let perp_norm = perp.frobenius_norm();
        if perp_norm < 1e-8 {
            continue;
        }
        let mut target = unit_f.scale(-overlap * gf_norm);
        target.axpy((1.0 - overlap * overlap).max(0.0).sqrt() * gf_norm / perp_norm, &perp);
        // ∇g(0) = −Aᵀ D, so D = −A⁻ᵀ · target.
        let Some(d) = solve_transposed(&a, &target) else {
            continue;
        };
        let d = d.scale(-1.0);

        let pair = ObjectivePair::new(
            format!("conflicting_quadratics(overlap={overlap})"),
            Arc::new(Quadratic { a: a.clone(), b, columns: None }),
            Arc::new(Quadratic { a, b: d, columns: None }),
            origin.clone(),
            None,
        );
        let gf = pair.eval_f(&origin, 0)?;
        let gg = pair.eval_g(&origin, 0)?;
        let tau = match cosine_alignment(&gf.grads[0], &gg.grads[0]) {
            Ok(tau) => tau,
            Err(_) => continue,
        };
        if (tau + overlap).abs() <= OVERLAP_TOLERANCE {
            pair.self_test(&[0])?;
            return Ok(pair);
        }
    }
    Err(Error::Numerical(format!(
        "no quadratic pair with overlap {overlap} found in {MAX_DRAWS} draws"
    )))
}

/// Quadratics on disjoint column sets: `f` sees the first `⌈p/2⌉` columns of
/// the residual and `g` the rest, so `⟨∇f, ∇g⟩ = 0` at every state.
pub fn make_orthogonal_quadratics(n: usize, p: usize, seed: u64) -> Result<ObjectivePair> {
    require(n >= 2 && p >= 2, || format!("quadratic task needs n, p >= 2, got {n}x{p}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = p.div_ceil(2);
    let mut draw = |first: bool| {
        let noise = gaussian(&mut rng, n, n, 0.3 / (n as f64).sqrt());
        Quadratic {
            a: &Matrix::identity(n) + &noise,
            b: gaussian(&mut rng, n, p, 1.0),
            columns: Some((0..p).map(|j| (j < split) == first).collect()),
        }
    };
    let f = draw(true);
    let g = draw(false);
    let pair = ObjectivePair::new(
        "orthogonal_quadratics",
        Arc::new(f),
        Arc::new(g),
        single_block(Matrix::zeros(n, p)),
        None,
    );
    pair.self_test(&[0])?;
    Ok(pair)
}

/// Multi-block task whose constraint flips against the primary objective on
/// one block during one step window.
///
/// Every block `l` has `f_l = ½‖Θ_l − F_l‖² / (rows·cols)` and
/// `g_l = ½‖(Θ_l − G_l(t)) D_l‖² / (rows·cols)` with a random positive diagonal
/// `D_l`. Outside the window `G_l = F_l`, so both objectives pull the same
/// way; inside it the designated block's target becomes `−c·F_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizedConflictTask {
    pub layers: usize,
    pub rows: usize,
    pub cols: usize,
    /// Inclusive step window `(t0, t1)`.
    pub window: (usize, usize),
    pub block: usize,
    /// `c` in the in-window target `−c·F`.
    pub conflict_strength: f64,
    pub seed: u64,
}

impl LocalizedConflictTask {
    pub fn new(layers: usize, window: (usize, usize), block: usize, seed: u64) -> Self {
        Self {
            layers,
            rows: 8,
            cols: 8,
            window,
            block,
            conflict_strength: 5.0,
            seed,
        }
    }

    pub fn build(&self) -> Result<ObjectivePair> {
        let (t0, t1) = self.window;
        require(self.layers >= 2, || format!("need at least 2 layers, got {}", self.layers))?;
        require(t0 < t1, || format!("conflict window ({t0}, {t1}) must have t0 < t1"))?;
        require(self.block < self.layers, || {
            format!("conflict block {} out of range for {} layers", self.block, self.layers)
        })?;
        require(self.rows >= 2 && self.cols >= 2, || "blocks must be at least 2x2".into())?;
        require(self.conflict_strength > 0.0 && self.conflict_strength.is_finite(), || {
            format!("conflict_strength must be positive, got {}", self.conflict_strength)
        })?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (n, p) = (self.rows, self.cols);
        let diag_dist = Uniform::new(0.5, 1.5).expect("valid range");
        let mut targets = Vec::with_capacity(self.layers);
        let mut diags = Vec::with_capacity(self.layers);
        let mut init = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            targets.push(gaussian(&mut rng, n, p, 1.0));
            diags.push((0..p).map(|_| rng.sample(diag_dist)).collect::<Vec<f64>>());
            init.push((format!("layer{l}"), gaussian(&mut rng, n, p, 0.1)));
        }
        let scale = 1.0 / (n * p) as f64;
        let mask = ConflictMask {
            windows: vec![ConflictWindow {
                block: self.block,
                first_step: t0,
                last_step: t1,
            }],
        };
        let f = LocalizedF {
            targets: targets.clone(),
            scale,
        };
        let g = LocalizedG {
            targets,
            diags,
            scale,
            mask: mask.clone(),
            strength: self.conflict_strength,
        };
        let pair = ObjectivePair::new(
            format!("localized_conflict(block={}, steps={t0}..={t1})", self.block),
            Arc::new(f),
            Arc::new(g),
            ModelState::new(init)?,
            Some(mask),
        );
        pair.self_test(&[0, t0])?;
        Ok(pair)
    }
}

pub fn make_localized_conflict_task(
    layers: usize,
    steps_conflict: (usize, usize),
    block_conflict: usize,
    seed: u64,
) -> Result<ObjectivePair> {
    LocalizedConflictTask::new(layers, steps_conflict, block_conflict, seed).build()
}

struct LocalizedF {
    targets: Vec<Matrix>,
    scale: f64,
}

impl Objective for LocalizedF {
    fn evaluate(&self, state: &ModelState, _step: usize) -> Result<Evaluation> {
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(self.targets.len());
        for (theta, target) in state.matrices().zip(&self.targets) {
            let r = theta.try_sub(target)?;
            loss += 0.5 * self.scale * r.dot(&r);
            grads.push(r.scale(self.scale));
        }
        Ok(Evaluation { loss, grads })
    }
}

struct LocalizedG {
    targets: Vec<Matrix>,
    diags: Vec<Vec<f64>>,
    scale: f64,
    mask: ConflictMask,
    strength: f64,
}

impl Objective for LocalizedG {
    fn evaluate(&self, state: &ModelState, step: usize) -> Result<Evaluation> {
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(self.targets.len());
        for (l, theta) in state.matrices().enumerate() {
            let c = if self.mask.contains(step, l) { -self.strength } else { 1.0 };
            let mut r = theta.clone();
            r.axpy(-c, &self.targets[l]);
            let d = &self.diags[l];
            let weighted = Matrix::from_fn(r.rows(), r.cols(), |i, j| r.get(i, j) * d[j]);
            loss += 0.5 * self.scale * weighted.dot(&weighted);
            grads.push(Matrix::from_fn(r.rows(), r.cols(), |i, j| {
                self.scale * weighted.get(i, j) * d[j]
            }));
        }
        Ok(Evaluation { loss, grads })
    }
}

/// Linear two-layer model `W2·W1` fit to two target sets on shared inputs.
///
/// Blocks are `w1` (`d_hidden × d_in`) and `w2` (`d_out × d_hidden`); both
/// losses are `½‖W2 W1 X − Y‖² / samples`. `Y_f` is realizable: it is produced
/// by the factor pair returned from [`TwoLayerLinearTask::f_solution`].
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerLinearTask {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub samples: usize,
    /// Use `Y_g = Y_f` (no conflict anywhere).
    pub identical_targets: bool,
    pub seed: u64,
}

struct TwoLayerDraw {
    x: Matrix,
    f_factors: (Matrix, Matrix),
    y_f: Matrix,
    y_g: Matrix,
    init: (Matrix, Matrix),
}

impl TwoLayerLinearTask {
    pub fn new(d_in: usize, d_hidden: usize, d_out: usize, seed: u64) -> Self {
        Self {
            d_in,
            d_hidden,
            d_out,
            samples: 4 * d_in,
            identical_targets: false,
            seed,
        }
    }

    fn draw(&self) -> Result<TwoLayerDraw> {
        let (i, h, o) = (self.d_in, self.d_hidden, self.d_out);
        require(i >= 2 && h >= 2 && o >= 2, || {
            format!("two-layer task needs all dims >= 2, got {i}, {h}, {o}")
        })?;
        require(self.samples >= 1, || "samples must be positive".into())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let x = gaussian(&mut rng, i, self.samples, 1.0);
        let w1f = gaussian(&mut rng, h, i, 1.0 / (i as f64).sqrt());
        let w2f = gaussian(&mut rng, o, h, 1.0 / (h as f64).sqrt());
        let w1g = gaussian(&mut rng, h, i, 1.0 / (i as f64).sqrt());
        let w2g = gaussian(&mut rng, o, h, 1.0 / (h as f64).sqrt());
        let init = (
            gaussian(&mut rng, h, i, 0.5 / (i as f64).sqrt()),
            gaussian(&mut rng, o, h, 0.5 / (h as f64).sqrt()),
        );
        let y_f = w2f.matmul(&w1f).matmul(&x);
        let y_g = if self.identical_targets {
            y_f.clone()
        } else {
            w2g.matmul(&w1g).matmul(&x)
        };
        Ok(TwoLayerDraw {
            x,
            f_factors: (w1f, w2f),
            y_f,
            y_g,
            init,
        })
    }

    fn state(w1: Matrix, w2: Matrix) -> ModelState {
        ModelState::new(vec![("w1".into(), w1), ("w2".into(), w2)]).expect("distinct names")
    }

    /// Factor pair at which `f` vanishes.
    pub fn f_solution(&self) -> Result<ModelState> {
        let d = self.draw()?;
        Ok(Self::state(d.f_factors.0, d.f_factors.1))
    }

    pub fn build(&self) -> Result<ObjectivePair> {
        let d = self.draw()?;
        let x = Arc::new(d.x);
        let f = TwoLayerLoss {
            x: Arc::clone(&x),
            y: d.y_f,
        };
        let g = TwoLayerLoss { x, y: d.y_g };
        let pair = ObjectivePair::new(
            format!("two_layer_linear({}-{}-{})", self.d_in, self.d_hidden, self.d_out),
            Arc::new(f),
            Arc::new(g),
            Self::state(d.init.0, d.init.1),
            None,
        );
        pair.self_test(&[0])?;
        Ok(pair)
    }
}

pub fn make_two_layer_linear_task(d_in: usize, d_hidden: usize, d_out: usize, seed: u64) -> Result<ObjectivePair> {
    TwoLayerLinearTask::new(d_in, d_hidden, d_out, seed).build()
}

struct TwoLayerLoss {
    x: Arc<Matrix>,
    y: Matrix,
}

impl Objective for TwoLayerLoss {
    fn evaluate(&self, state: &ModelState, _step: usize) -> Result<Evaluation> {
        let (w1, w2) = (state.block(0), state.block(1));
        let hidden = w1.try_matmul(&self.x)?;
        let n = self.x.cols() as f64;
        let r = w2.try_matmul(&hidden)?.try_sub(&self.y)?.scale(1.0 / n);
        let loss = 0.5 * n * r.dot(&r);
        let grad_w2 = r.matmul_transpose(&hidden);
        let grad_w1 = w2.transpose_matmul(&r).matmul_transpose(&self.x);
        Ok(Evaluation {
            loss,
            grads: vec![grad_w1, grad_w2],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_targets_are_met() {
        for overlap in [0.0, 0.3, 0.8, 1.0] {
            let pair = make_conflicting_quadratics(6, 4, overlap, 7).unwrap();
            let s = pair.initial_state();
            let tau = cosine_alignment(
                &pair.eval_f(s, 0).unwrap().grads[0],
                &pair.eval_g(s, 0).unwrap().grads[0],
            )
            .unwrap();
            assert!((tau + overlap).abs() <= 0.05, "overlap {overlap}: tau {tau}");
        }
    }

    #[test]
    fn full_overlap_is_antiparallel() {
        let pair = make_conflicting_quadratics(5, 3, 1.0, 1).unwrap();
        let s = pair.initial_state();
        let gf = &pair.eval_f(s, 0).unwrap().grads[0];
        let gg = &pair.eval_g(s, 0).unwrap().grads[0];
        let proj = crate::optim::gradient_projection(gf, gg).unwrap();
        assert!(proj.frobenius_norm() < 1e-10 * gf.frobenius_norm());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_conflicting_quadratics(1, 3, 0.5, 0).is_err());
        assert!(make_conflicting_quadratics(3, 3, 1.5, 0).is_err());
        assert!(make_localized_conflict_task(1, (1, 2), 0, 0).is_err());
        assert!(make_localized_conflict_task(4, (5, 5), 0, 0).is_err());
        assert!(make_localized_conflict_task(4, (1, 5), 4, 0).is_err());
        assert!(make_two_layer_linear_task(1, 3, 3, 0).is_err());
    }

    #[test]
    fn localized_mask_matches_arguments() {
        let pair = make_localized_conflict_task(6, (10, 20), 2, 3).unwrap();
        let mask = pair.conflict_mask.as_ref().unwrap();
        assert_eq!(
            mask.windows,
            vec![ConflictWindow { block: 2, first_step: 10, last_step: 20 }]
        );
    }

    #[test]
    fn orthogonal_gradients_stay_orthogonal() {
        let pair = make_orthogonal_quadratics(5, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let s = pair.random_state(&mut rng, 1.0);
            let gf = &pair.eval_f(&s, 0).unwrap().grads[0];
            let gg = &pair.eval_g(&s, 0).unwrap().grads[0];
            assert_eq!(gf.dot(gg), 0.0);
        }
    }

    #[test]
    fn two_layer_solution_zeroes_f() {
        let task = TwoLayerLinearTask::new(4, 3, 5, 11);
        let pair = task.build().unwrap();
        let sol = task.f_solution().unwrap();
        assert!(pair.eval_f(&sol, 0).unwrap().loss < 1e-20);
    }

    #[test]
    fn same_seed_same_task() {
        let a = make_localized_conflict_task(3, (1, 4), 1, 5).unwrap();
        let b = make_localized_conflict_task(3, (1, 4), 1, 5).unwrap();
        assert_eq!(a.initial_state(), b.initial_state());
        let s = a.initial_state();
        assert_eq!(a.eval_g(s, 2).unwrap(), b.eval_g(s, 2).unwrap());
    }
}
