//! Dense spectral primitives: compact SVD, the matrix sign function (exact and
//! by Newton–Schulz iteration), Procrustes orthogonalization, energy/effective
//! rank analysis and cosine alignment.
//!
//! All functions are pure; identical inputs give bit-identical outputs.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Singular values at or below `DEFAULT_RANK_TOL * sigma_max` are treated as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Default number of Newton–Schulz iterations.
pub const DEFAULT_NS_ITERATIONS: usize = 5;

/// Compact SVD `U · diag(sigma) · Vᵀ` with `sigma` nonincreasing and strictly
/// positive. `u` is `rows x r`, `v` is `cols x r`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U · diag(sigma) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                us.set(i, j, us.get(i, j) * s);
            }
        }
        us.matmul_transpose(&self.v)
    }
}

/// Compact SVD of `m`, keeping singular values strictly above
/// `rank_tol * sigma_max`.
///
/// Each retained pair of singular vectors is sign-normalized so that the
/// largest-magnitude entry of the left vector is positive, which makes the
/// factors a deterministic function of the input. An all-zero input has no
/// compact SVD and is reported as degenerate.
pub fn compact_svd(m: &Matrix, rank_tol: f64) -> Result<SvdFactors> {
    if !(rank_tol >= 0.0 && rank_tol.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "rank tolerance must be finite and nonnegative, got {rank_tol}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("compact_svd: non-finite input".into()));
    }
    let (rows, cols) = m.shape();
    if m.is_zero() {
        return Err(Error::Degenerate(format!(
            "compact_svd: {rows}x{cols} zero matrix has rank 0"
        )));
    }
    let svd = Mat::<f64>::from_fn(rows, cols, |i, j| m.get(i, j))
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD of {rows}x{cols} matrix failed: {e:?}")))?;
    let u_full = svd.U();
    let v_full = svd.V();
    let sv = svd.S().column_vector();

    let mut order: Vec<usize> = (0..sv.nrows()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let sigma_max = sv[order[0]];
    if !sigma_max.is_finite() {
        return Err(Error::Numerical(format!(
            "SVD of {rows}x{cols} matrix produced non-finite singular values"
        )));
    }
    let cutoff = rank_tol * sigma_max;
    let kept: Vec<usize> = order.into_iter().filter(|&i| sv[i] > cutoff).collect();
    let r = kept.len();
    if r == 0 {
        return Err(Error::Degenerate(format!(
            "compact_svd: {rows}x{cols} matrix has numerical rank 0"
        )));
    }

    let mut u = Matrix::zeros(rows, r);
    let mut v = Matrix::zeros(cols, r);
    let mut sigma = Vec::with_capacity(r);
    for (c, &idx) in kept.iter().enumerate() {
        let mut pivot = 0.0f64;
        for i in 0..rows {
            let val = u_full[(i, idx)];
            if val.abs() > pivot.abs() {
                pivot = val;
            }
        }
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            u.set(i, c, sign * u_full[(i, idx)]);
        }
        for j in 0..cols {
            v.set(j, c, sign * v_full[(j, idx)]);
        }
        sigma.push(sv[idx]);
    }
    Ok(SvdFactors { u, sigma, v })
}

/// Exact matrix sign `Ψ Φᵀ` from the compact SVD `m = Ψ Σ Φᵀ`.
pub fn msign_exact(m: &Matrix) -> Result<Matrix> {
    if m.is_zero() {
        return Err(Error::Degenerate(
            "msign of the zero matrix is undefined".into(),
        ));
    }
    let f = compact_svd(m, DEFAULT_RANK_TOL)?;
    Ok(f.u.matmul_transpose(&f.v))
}

/// Polynomial schedule for the Newton–Schulz iteration.
///
/// Every step maps the Frobenius-normalized iterate `X` to `X · q(XᵀX)` for an
/// even polynomial `q`, i.e. applies an odd polynomial to each singular value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NsSchedule {
    /// Degree-9 steps: four minimax steps for singular values in `[1e-3, 1]`,
    /// then the classical degree-9 Newton–Schulz step (repeated as needed).
    /// Five iterations land every singular value in that interval within 1e-9
    /// of one.
    #[default]
    Nonic,
    /// The fixed quintic `aX + b(XXᵀ)X + c(XXᵀ)²X` with
    /// `(a, b, c) = (3.4445, −4.7750, 2.0315)` used by Muon. Cheap, but it only
    /// pushes singular values into roughly `[0.7, 1.2]`; it does not converge
    /// to the exact sign.
    MuonQuintic,
}

const NONIC_MINIMAX: [[f64; 5]; 4] = [
    [
        15.076013393444368,
        -148.07176175949812,
        493.1781087644784,
        -634.1868061044103,
        275.9893696933258,
    ],
    [
        7.156002997341037,
        -17.470975228968282,
        14.67876750483995,
        -4.7767064379440685,
        0.5266928160110753,
    ],
    [
        5.241845720280903,
        -11.95687628401568,
        10.488332406479111,
        -3.6596442625509353,
        0.43723789263872387,
    ],
    [
        2.782910085147763,
        -4.301228580373825,
        3.9868078601589607,
        -1.7723283224751523,
        0.29709803992730105,
    ],
];

// x · Σ_{j≤4} C(2j, j) 4^{-j} (1 − x²)^j, expanded in odd powers.
const NONIC_TAIL: [f64; 5] = [
    315.0 / 128.0,
    -420.0 / 128.0,
    378.0 / 128.0,
    -180.0 / 128.0,
    35.0 / 128.0,
];

const MUON_QUINTIC: [f64; 3] = [3.4445, -4.7750, 2.0315];

impl NsSchedule {
    /// Odd-power coefficients `[c1, c3, c5, ...]` of step `iteration` (0-based).
    pub fn coefficients(self, iteration: usize) -> &'static [f64] {
        match self {
            NsSchedule::Nonic => NONIC_MINIMAX
                .get(iteration)
                .map(|c| c.as_slice())
                .unwrap_or(&NONIC_TAIL),
            NsSchedule::MuonQuintic => &MUON_QUINTIC,
        }
    }

    /// Scalar map applied to one (normalized) singular value by `iterations` steps.
    pub fn apply_scalar(self, mut x: f64, iterations: usize) -> f64 {
        for it in 0..iterations {
            let c = self.coefficients(it);
            let x2 = x * x;
            let mut acc = 0.0;
            for &ci in c.iter().rev() {
                acc = acc * x2 + ci;
            }
            x *= acc;
        }
        x
    }
}

/// Newton–Schulz approximation of [`msign_exact`] with the default schedule.
pub fn msign_newton_schulz(m: &Matrix, iterations: usize) -> Result<Matrix> {
    msign_newton_schulz_with(m, iterations, NsSchedule::default())
}

/// Newton–Schulz approximation of the matrix sign.
///
/// The input is scaled by `1/‖m‖_F` so all singular values lie in `(0, 1]`.
/// Wide inputs are processed through their transpose so the Gram matrix is
/// always formed on the short side.
pub fn msign_newton_schulz_with(
    m: &Matrix,
    iterations: usize,
    schedule: NsSchedule,
) -> Result<Matrix> {
    if iterations == 0 {
        return Err(Error::InvalidInput(
            "Newton-Schulz needs at least one iteration".into(),
        ));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("msign: non-finite input".into()));
    }
    if m.is_zero() {
        return Err(Error::Degenerate(
            "msign of the zero matrix is undefined".into(),
        ));
    }
    let transposed = m.rows() < m.cols();
    let mut x = if transposed { m.transpose() } else { m.clone() };
    let norm = x.frobenius_norm();
    x = x.scale(1.0 / norm);
    let short = x.cols();
    let limit = 10.0 * (short as f64).sqrt();

    for it in 0..iterations {
        let coeffs = schedule.coefficients(it);
        let gram = x.transpose_matmul(&x);
        let q = even_polynomial(&gram, coeffs);
        x = x.matmul(&q);
        let n = x.frobenius_norm();
        if !n.is_finite() || n > limit {
            return Err(Error::Numerical(format!(
                "Newton-Schulz diverged on {}x{} input at iteration {} (norm {n:e})",
                m.rows(),
                m.cols(),
                it + 1
            )));
        }
    }
    Ok(if transposed { x.transpose() } else { x })
}

/// `c0 I + c1 A + c2 A² + ...` by Horner's rule.
fn even_polynomial(a: &Matrix, coeffs: &[f64]) -> Matrix {
    let n = a.rows();
    let (last, rest) = coeffs.split_last().expect("nonempty coefficients");
    let mut q = a.scale(*last);
    let mut rest = rest.iter().rev();
    if let Some(&c) = rest.next() {
        for i in 0..n {
            q.set(i, i, q.get(i, i) + c);
        }
    } else {
        return Matrix::identity(n).scale(*last);
    }
    for &c in rest {
        q = q.matmul(a);
        for i in 0..n {
            q.set(i, i, q.get(i, i) + c);
        }
    }
    q
}

/// Nearest column-orthonormal matrix to `u_hat` in Frobenius norm: `P Qᵀ` from
/// the compact SVD `u_hat = P S Qᵀ`.
pub fn procrustes_orthogonalize(u_hat: &Matrix) -> Result<Matrix> {
    let (rows, cols) = u_hat.shape();
    if rows < cols {
        return Err(Error::InvalidInput(format!(
            "procrustes needs rows >= cols, got {rows}x{cols}"
        )));
    }
    if u_hat.is_zero() {
        return Err(Error::Degenerate(format!(
            "procrustes: {rows}x{cols} input has numerical rank 0"
        )));
    }
    let f = compact_svd(u_hat, DEFAULT_RANK_TOL)?;
    if f.rank() < cols {
        return Err(Error::Degenerate(format!(
            "procrustes: {rows}x{cols} input has numerical rank {} < {cols}",
            f.rank()
        )));
    }
    Ok(f.u.matmul_transpose(&f.v))
}

/// `⟨vec a, vec b⟩ / (‖a‖_F ‖b‖_F)`, clamped to `[-1, 1]`.
pub fn cosine_alignment(a: &Matrix, b: &Matrix) -> Result<f64> {
    let dot = a.try_dot(b)?;
    let na = a.dot(a);
    let nb = b.dot(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine alignment with a zero operand is undefined".into(),
        ));
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Leading `min(k, rank)` components of `f`.
pub fn top_k_factors(f: &SvdFactors, k: usize) -> Result<SvdFactors> {
    if k == 0 {
        return Err(Error::InvalidInput("top_k_factors needs k >= 1".into()));
    }
    let r = k.min(f.rank());
    if r == f.rank() {
        return Ok(f.clone());
    }
    Ok(SvdFactors {
        u: f.u.columns(0, r),
        sigma: f.sigma[..r].to_vec(),
        v: f.v.columns(0, r),
    })
}

/// Relative slack used when comparing an energy fraction against a threshold,
/// so that spectra equal up to rounding (e.g. an identity) land on the
/// mathematically expected rank.
const ENERGY_SLACK: f64 = 1e-12;

/// Cumulative squared singular values.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyProfile {
    cumsum: Vec<f64>,
    total: f64,
}

impl EnergyProfile {
    pub fn from_sigma(sigma: &[f64]) -> Result<Self> {
        if sigma.is_empty() {
            return Err(Error::InvalidInput("empty spectrum".into()));
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidInput(
                "singular values must be finite and nonnegative".into(),
            ));
        }
        if sigma.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput(
                "singular values must be nonincreasing".into(),
            ));
        }
        let mut acc = 0.0;
        let cumsum: Vec<f64> = sigma
            .iter()
            .map(|s| {
                acc += s * s;
                acc
            })
            .collect();
        let total = acc;
        if total == 0.0 {
            return Err(Error::Degenerate("all singular values are zero".into()));
        }
        Ok(Self { cumsum, total })
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumsum
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// `E(k)`: fraction of energy in the leading `k` values (`E(0) = 0`).
    pub fn fraction(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            k if k >= self.cumsum.len() => 1.0,
            k => self.cumsum[k - 1] / self.total,
        }
    }

    /// Smallest `k` with `E(k) >= alpha`.
    pub fn effective_rank(&self, alpha: f64) -> Result<usize> {
        check_alpha(alpha)?;
        let target = alpha * self.total * (1.0 - ENERGY_SLACK);
        Ok(self
            .cumsum
            .iter()
            .position(|&c| c >= target)
            .map_or(self.cumsum.len(), |i| i + 1))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "energy level must lie in (0, 1], got {alpha}"
        )))
    }
}

/// Smallest `K` whose cumulative squared-singular-value fraction reaches `alpha`.
pub fn effective_rank(sigma: &[f64], alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    EnergyProfile::from_sigma(sigma)?.effective_rank(alpha)
}
