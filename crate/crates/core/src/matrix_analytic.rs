//! Censoring, the UL-type RG-factorization and structured R/G solvers.
//!
//! Censoring to levels `0..=n` eliminates levels `L, L-1, ..., n+1` one at a
//! time:
//!
//! ```text
//! φ'_{i,j} = φ_{i,j} + φ_{i,t} (-φ_{t,t})^{-1} φ_{t,j}      (t = eliminated level)
//! ```
//!
//! Recording the pivot blocks on the way down gives the factors
//!
//! ```text
//! Ψ_n = φ^{(n)}_{n,n},
//! R_{i,j} = φ^{(j)}_{i,j} (-Ψ_j)^{-1}   (i < j),
//! G_{i,j} = (-Ψ_i)^{-1} φ^{(i)}_{i,j}   (j < i),
//! ```
//!
//! with `Γ = (I - R_U) Ψ_D (I - G_L)`. After every elimination the diagonal of
//! the reduced matrix is reset to the negative off-diagonal row sums
//! (Grassmann–Taksar–Heyman), which keeps every pivot free of cancellation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Family, GeneratorSpec, NumericBlocks};
use crate::state_space::{BlockGenerator, LevelPhaseLayout, ProbabilityVector};

/// Entrywise change at which R and G iterations stop.
pub const MATRIX_ITERATION_TOL: f64 = 1e-12;
/// Iteration cap for R and G successive substitution.
pub const MATRIX_ITERATION_CAP: usize = 100_000;

/// Inverse of `-psi` for a pivot block, or `None` if numerically singular.
fn neg_inverse(psi: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let w = -psi;
    let scale = w.amax();
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    let lu = w.lu();
    let u = lu.u();
    let min_pivot = u.diagonal().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-13 * scale {
        return None;
    }
    lu.try_inverse()
}

fn reset_diagonal(m: &mut DMatrix<f64>, n: usize) {
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            if j != i {
                s += m[(i, j)];
            }
        }
        m[(i, i)] = -s;
    }
}

/// Generator of the chain censored to levels `0..=n`, flattened over those
/// levels.
pub fn censor(gamma: &BlockGenerator, n: usize) -> Result<DMatrix<f64>> {
    let layout = gamma.layout();
    let top = layout.truncation_level();
    if n > top {
        return Err(Error::InvalidArgument(format!(
            "cannot censor to level {n} of a layout with top level {top}"
        )));
    }
    let mut phi = gamma.matrix().clone();
    for t in (n + 1..=top).rev() {
        let r = layout.level_range(t);
        let s = r.start;
        let w_inv = neg_inverse(&phi.view((s, s), (r.len(), r.len())).into_owned())
            .ok_or(Error::Censoring { level: t })?;
        let g = &w_inv * phi.view((s, 0), (r.len(), s));
        let upd = phi.view((0, s), (s, r.len())) * g;
        let mut lead = phi.view_mut((0, 0), (s, s));
        lead += upd;
        reset_diagonal(&mut phi, s);
    }
    let keep = layout.offset(n + 1);
    Ok(phi.view((0, 0), (keep, keep)).into_owned())
}

/// The factors `(R_U, Ψ_D, G_L)` of a UL-type RG-factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct RGFactors {
    layout: LevelPhaseLayout,
    r_upper: DMatrix<f64>,
    psi: Vec<DMatrix<f64>>,
    g_lower: DMatrix<f64>,
}

impl RGFactors {
    pub fn layout(&self) -> &LevelPhaseLayout {
        &self.layout
    }

    /// `R_{i,j}` for `i < j`.
    pub fn r_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        assert!(i < j, "R blocks live strictly above the diagonal");
        let (ri, rj) = (self.layout.level_range(i), self.layout.level_range(j));
        self.r_upper
            .view((ri.start, rj.start), (ri.len(), rj.len()))
            .into_owned()
    }

    /// `G_{i,j}` for `j < i`.
    pub fn g_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        assert!(j < i, "G blocks live strictly below the diagonal");
        let (ri, rj) = (self.layout.level_range(i), self.layout.level_range(j));
        self.g_lower
            .view((ri.start, rj.start), (ri.len(), rj.len()))
            .into_owned()
    }

    /// `Ψ_n`.
    pub fn psi(&self, n: usize) -> &DMatrix<f64> {
        &self.psi[n]
    }

    /// The flattened block upper-triangular `R_U`.
    pub fn r_upper(&self) -> &DMatrix<f64> {
        &self.r_upper
    }

    /// The flattened block lower-triangular `G_L`.
    pub fn g_lower(&self) -> &DMatrix<f64> {
        &self.g_lower
    }

    /// `Ψ_D` as a flattened block-diagonal matrix.
    pub fn psi_diagonal(&self) -> DMatrix<f64> {
        let d = self.layout.dim();
        let mut m = DMatrix::zeros(d, d);
        for (n, p) in self.psi.iter().enumerate() {
            let o = self.layout.offset(n);
            m.view_mut((o, o), p.shape()).copy_from(p);
        }
        m
    }
}

/// UL-type RG-factorization `Γ = (I - R_U) Ψ_D (I - G_L)`.
pub fn rg_factorize(gamma: &BlockGenerator) -> Result<RGFactors> {
    let layout = gamma.layout().clone();
    let d = layout.dim();
    let top = layout.truncation_level();
    let mut phi = gamma.matrix().clone();
    let mut r_upper = DMatrix::zeros(d, d);
    let mut g_lower = DMatrix::zeros(d, d);
    let mut psi = vec![DMatrix::zeros(0, 0); top + 1];
    for t in (0..=top).rev() {
        let r = layout.level_range(t);
        let s = r.start;
        let pivot = phi.view((s, s), (r.len(), r.len())).into_owned();
        if t == 0 {
            psi[0] = pivot;
            break;
        }
        psi[t] = pivot;
        let up = phi.view((0, s), (s, r.len()));
        let down = phi.view((s, 0), (r.len(), s));
        if up.iter().chain(down.iter()).all(|v| *v == 0.0) {
            // no coupling: R and G blocks vanish whatever the pivot
            continue;
        }
        let w_inv = neg_inverse(&psi[t]).ok_or(Error::Factorization { level: t })?;
        let rcol = phi.view((0, s), (s, r.len())) * &w_inv;
        let grow = &w_inv * phi.view((s, 0), (r.len(), s));
        let upd = phi.view((0, s), (s, r.len())) * &grow;
        r_upper.view_mut((0, s), (s, r.len())).copy_from(&rcol);
        g_lower.view_mut((s, 0), (r.len(), s)).copy_from(&grow);
        let mut lead = phi.view_mut((0, 0), (s, s));
        lead += upd;
        reset_diagonal(&mut phi, s);
    }
    Ok(RGFactors {
        layout,
        r_upper,
        psi,
        g_lower,
    })
}

/// `(I - R_U) Ψ_D (I - G_L)`.
pub fn reconstruct(factors: &RGFactors) -> BlockGenerator {
    let d = factors.layout.dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let m = (&eye - &factors.r_upper) * factors.psi_diagonal() * (&eye - &factors.g_lower);
    BlockGenerator::from_parts_unchecked(factors.layout.clone(), m)
}

/// Stationary vector `x Q = 0`, `x 1 = 1` of an irreducible generator, by the
/// GTH elimination (uses off-diagonal entries only).
pub fn stationary_of(q: &DMatrix<f64>) -> Result<DVector<f64>> {
    let m = q.nrows();
    if m == 0 || q.ncols() != m {
        return Err(Error::Stationary("generator must be square and nonempty".into()));
    }
    let mut a = q.clone();
    for n in (1..m).rev() {
        let s: f64 = (0..n).map(|j| a[(n, j)]).sum();
        if !(s > 0.0) {
            return Err(Error::Stationary(format!(
                "state {n} cannot reach lower-indexed states: generator is reducible"
            )));
        }
        for i in 0..n {
            a[(i, n)] /= s;
        }
        for i in 0..n {
            let ain = a[(i, n)];
            if ain != 0.0 {
                for j in 0..n {
                    a[(i, j)] += ain * a[(n, j)];
                }
            }
        }
    }
    let mut x = DVector::zeros(m);
    x[0] = 1.0;
    for n in 1..m {
        x[n] = (0..n).map(|i| x[i] * a[(i, n)]).sum();
    }
    let total = x.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Stationary("degenerate stationary vector".into()));
    }
    Ok(x / total)
}

fn to_probability(layout: LevelPhaseLayout, mut values: Vec<f64>) -> Result<ProbabilityVector> {
    let total: f64 = values.iter().sum();
    for v in values.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-10 * total.abs().max(1.0) {
                return Err(Error::Stationary(format!(
                    "stationary vector has a negative entry {v}"
                )));
            }
            *v = 0.0;
        }
    }
    ProbabilityVector::from_weights(layout, values)
}

/// `π_0 = τ x_0`, `π_k = Σ_{i<k} π_i R_{i,k}`, with `x_0` stationary for `Ψ_0`
/// and `τ` fixed by normalization.
pub fn stationary_from_rg(factors: &RGFactors) -> Result<ProbabilityVector> {
    let layout = &factors.layout;
    let x0 = stationary_of(&factors.psi[0])?;
    let d = layout.dim();
    let mut pi = vec![0.0; d];
    pi[..x0.len()].copy_from_slice(x0.as_slice());
    for k in 1..layout.num_levels() {
        let rk = layout.level_range(k);
        // π_k = π_{0..k} · R_U[0..s, level k]
        let s = rk.start;
        let head = DVector::from_column_slice(&pi[..s]);
        let block = factors.r_upper.view((0, s), (s, rk.len()));
        let v = block.tr_mul(&head);
        pi[rk].copy_from_slice(v.as_slice());
    }
    to_probability(layout.clone(), pi)
}

/// Result of [`solve_r_gim1`].
#[derive(Debug, Clone)]
pub struct Gim1Solution {
    pub r: DMatrix<f64>,
    pub pi: ProbabilityVector,
    pub iterations: usize,
    /// `max |Σ R^k A_k|`.
    pub residual: f64,
}

fn max_row_sum(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().sum::<f64>())
        .fold(0.0, f64::max)
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

fn check_square_sequence(blocks: &[DMatrix<f64>], what: &str) -> Result<usize> {
    let m = blocks
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("empty {what} sequence")))?
        .nrows();
    if blocks.len() < 2 || blocks.iter().any(|b| b.shape() != (m, m)) {
        return Err(Error::InvalidArgument(format!(
            "{what} needs at least two square blocks of one size"
        )));
    }
    Ok(m)
}

/// Successive substitution `X ← (A_0 + Σ_{k>=2} X^k A_k)(-A_1)^{-1}` (or its
/// transpose-ordered M/G/1 twin) from `X = 0`.
fn substitute(
    a: &[DMatrix<f64>],
    left: bool,
    on_iterate: &mut dyn FnMut(&DMatrix<f64>),
) -> Result<(DMatrix<f64>, usize)> {
    let m = a[0].nrows();
    let inv = neg_inverse(&a[1]).ok_or_else(|| Error::Instability("A_1 is singular".into()))?;
    let mut x = DMatrix::zeros(m, m);
    for it in 1..=MATRIX_ITERATION_CAP {
        let mut acc = a[0].clone();
        let mut power = x.clone();
        for ak in &a[2..] {
            power = if left { &power * &x } else { &x * &power };
            acc += if left { &power * ak } else { ak * &power };
        }
        // the first product above computed X^2
        let next = if left { acc * &inv } else { &inv * acc };
        let change = (&next - &x).amax();
        x = next;
        on_iterate(&x);
        if !change.is_finite() {
            return Err(Error::Instability("iteration diverged".into()));
        }
        if change <= MATRIX_ITERATION_TOL {
            return Ok((x, it));
        }
    }
    Err(Error::NonConvergence {
        iterations: MATRIX_ITERATION_CAP,
        last_change: f64::NAN,
    })
}

fn r_series(r: &DMatrix<f64>, blocks: &[DMatrix<f64>], start: usize) -> DMatrix<f64> {
    // Σ_{k >= 0} R^k blocks[start + k]
    let m = r.nrows();
    let mut acc = DMatrix::zeros(m, blocks.get(start).map_or(m, |b| b.ncols()));
    let mut power = DMatrix::identity(m, m);
    for b in blocks.iter().skip(start) {
        acc += &power * b;
        power = &power * r;
    }
    acc
}

/// Minimal nonnegative `R` with `Σ R^k A_k = 0` and the stationary vector of
/// the GI/M/1-type chain, folded onto levels `0..=L`.
pub fn solve_r_gim1(
    repeating: &[DMatrix<f64>],
    boundary: &[DMatrix<f64>],
    truncation_level: usize,
) -> Result<Gim1Solution> {
    solve_r_gim1_traced(repeating, boundary, truncation_level, &mut |_| {})
}

/// [`solve_r_gim1`], calling `on_iterate` with every R iterate.
pub fn solve_r_gim1_traced(
    repeating: &[DMatrix<f64>],
    boundary: &[DMatrix<f64>],
    truncation_level: usize,
    on_iterate: &mut dyn FnMut(&DMatrix<f64>),
) -> Result<Gim1Solution> {
    let m = check_square_sequence(repeating, "repeating")?;
    if boundary.len() < 2 {
        return Err(Error::InvalidArgument("need boundary blocks B0 and B1".into()));
    }
    let m0 = boundary[1].nrows();
    check_gim1_boundary(repeating, boundary)?;
    let (r, iterations) = match substitute(repeating, true, on_iterate) {
        Ok(v) => v,
        Err(Error::NonConvergence { iterations, .. }) => {
            return Err(Error::Instability(format!(
                "R iteration did not settle in {iterations} steps (spectral radius of R >= 1)"
            )))
        }
        Err(e) => return Err(e),
    };
    if max_row_sum(&r) >= 1.0 - 1e-9 && spectral_radius(&r) >= 1.0 - 1e-9 {
        return Err(Error::Instability(format!(
            "spectral radius of R is {:.12} (>= 1)",
            spectral_radius(&r)
        )));
    }
    let residual = r_series(&r, repeating, 0).amax();

    // (π_0, π_1) [[B_1, B_0], [Σ R^k B_{k+2}, Σ R^k A_{k+1}]] = 0
    let n = m0 + m;
    let mut sys = DMatrix::zeros(n, n);
    sys.view_mut((0, 0), (m0, m0)).copy_from(&boundary[1]);
    sys.view_mut((0, m0), (m0, m)).copy_from(&boundary[0]);
    let lower_left = if boundary.len() > 2 {
        r_series(&r, boundary, 2)
    } else {
        DMatrix::zeros(m, m0)
    };
    sys.view_mut((m0, 0), (m, m0)).copy_from(&lower_left);
    sys.view_mut((m0, m0), (m, m)).copy_from(&r_series(&r, repeating, 1));
    let eye = DMatrix::<f64>::identity(m, m);
    let tail_inv = (&eye - &r)
        .try_inverse()
        .ok_or_else(|| Error::Instability("I - R is singular".into()))?;
    let tail_sum = &tail_inv * DVector::from_element(m, 1.0);
    // replace the last column by the normalization π_0 e + π_1 (I-R)^{-1} e = 1
    for i in 0..m0 {
        sys[(i, n - 1)] = 1.0;
    }
    for i in 0..m {
        sys[(m0 + i, n - 1)] = tail_sum[i];
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let x = sys
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Stationary("boundary system is singular".into()))?;

    let layout = LevelPhaseLayout::with_boundary(m0, m, truncation_level)?;
    let mut pi = Vec::with_capacity(layout.dim());
    pi.extend_from_slice(&x.as_slice()[..m0]);
    let mut level = DVector::from_column_slice(&x.as_slice()[m0..]).transpose();
    for k in 1..=truncation_level {
        if k == truncation_level {
            // fold the geometric tail π_1 R^{L-1} (I - R)^{-1}
            level = &level * &tail_inv;
        }
        pi.extend_from_slice(level.as_slice());
        level = &level * &r;
    }
    Ok(Gim1Solution {
        r,
        pi: to_probability(layout, pi)?,
        iterations,
        residual,
    })
}

fn check_gim1_boundary(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> Result<()> {
    // level k >= 1 row: B_{k+1} e must equal Σ_{j > k} A_j e
    let m = a[0].nrows();
    let scale = a.iter().chain(b).map(|x| x.amax()).fold(1.0, f64::max);
    for k in 1..a.len().max(b.len()) {
        let mut need = DVector::zeros(m);
        for aj in a.iter().skip(k + 1) {
            need += aj.column_sum();
        }
        let have = b.get(k + 1).map_or(DVector::zeros(m), |bk| bk.column_sum());
        if (&need - &have).amax() > 1e-10 * scale {
            return Err(Error::Model(format!(
                "boundary block B{} does not balance the repeating rows of level {k}",
                k + 1
            )));
        }
    }
    Ok(())
}

/// Minimal nonnegative `G` with `Σ A_k G^k = 0` (M/G/1 convention).
pub fn solve_g_mg1(repeating: &[DMatrix<f64>]) -> Result<(DMatrix<f64>, usize)> {
    check_square_sequence(repeating, "repeating")?;
    substitute(repeating, false, &mut |_| {})
}

/// `max |Σ A_k G^k|`.
pub fn g_residual(repeating: &[DMatrix<f64>], g: &DMatrix<f64>) -> f64 {
    let m = g.nrows();
    let mut acc = DMatrix::zeros(m, m);
    let mut power = DMatrix::identity(m, m);
    for a in repeating {
        acc += a * &power;
        power = &power * g;
    }
    acc.amax()
}

/// Censored quantities of an M/G/1-type chain.
#[derive(Debug, Clone)]
pub struct Mg1Measures {
    /// `Ψ = A_1 + Σ_{k>=2} A_k G^{k-1}`.
    pub psi: DMatrix<f64>,
    /// `G_1 = (-Ψ)^{-1} B_0`, first passage from level 1 to level 0.
    pub g1: DMatrix<f64>,
    /// `Ψ_0 = B_1 + Σ_{k>=2} B_k G^{k-2} G_1`.
    pub psi0: DMatrix<f64>,
    /// `r0[j - 1] = R_{0,j} = [Σ_{k>=j+1} B_k G^{k-1-j}] (-Ψ)^{-1}`.
    pub r0: Vec<DMatrix<f64>>,
    /// `r[j - 1] = R_j = [Σ_{k>=j+1} A_k G^{k-1-j}] (-Ψ)^{-1}`.
    pub r: Vec<DMatrix<f64>>,
}

/// R-measure of an M/G/1-type chain from its `G` matrix.
pub fn mg1_r_measure(
    g: &DMatrix<f64>,
    repeating: &[DMatrix<f64>],
    boundary: &[DMatrix<f64>],
) -> Result<Mg1Measures> {
    let m = check_square_sequence(repeating, "repeating")?;
    if boundary.len() < 2 {
        return Err(Error::InvalidArgument("need boundary blocks B0 and B1".into()));
    }
    let powers: Vec<DMatrix<f64>> = {
        let n = repeating.len().max(boundary.len());
        let mut v = Vec::with_capacity(n);
        let mut p = DMatrix::identity(m, m);
        for _ in 0..n {
            v.push(p.clone());
            p = &p * g;
        }
        v
    };
    let mut psi = repeating[1].clone();
    for (k, a) in repeating.iter().enumerate().skip(2) {
        psi += a * &powers[k - 1];
    }
    let inv = neg_inverse(&psi).ok_or_else(|| Error::Stationary("Ψ is singular".into()))?;
    let g1 = &inv * &boundary[0];
    let mut psi0 = boundary[1].clone();
    for (k, b) in boundary.iter().enumerate().skip(2) {
        psi0 += b * &powers[k - 2] * &g1;
    }
    let series = |blocks: &[DMatrix<f64>], j: usize| {
        let rows = blocks[blocks.len() - 1].nrows();
        let mut acc = DMatrix::zeros(rows, m);
        for (k, b) in blocks.iter().enumerate().skip(j + 1) {
            acc += b * &powers[k - 1 - j];
        }
        acc * &inv
    };
    let r0 = (1..boundary.len().saturating_sub(1))
        .map(|j| series(boundary, j))
        .collect();
    let r = (1..repeating.len().saturating_sub(1))
        .map(|j| series(repeating, j))
        .collect();
    Ok(Mg1Measures {
        psi,
        g1,
        psi0,
        r0,
        r,
    })
}

/// `π_0 = τ x_0`, `π_k = π_0 R_{0,k} + Σ_{i=1}^{k-1} π_i R_{k-i}` on levels
/// `0..=L`, normalized over the retained levels.
pub fn mg1_stationary(measures: &Mg1Measures, truncation_level: usize) -> Result<ProbabilityVector> {
    let m0 = measures.psi0.nrows();
    let m = measures.psi.nrows();
    let layout = LevelPhaseLayout::with_boundary(m0, m, truncation_level)?;
    let x0 = stationary_of(&measures.psi0)?;
    let mut levels: Vec<DVector<f64>> = vec![x0.clone()];
    for k in 1..=truncation_level {
        let mut v = DVector::zeros(m);
        if let Some(r0k) = measures.r0.get(k - 1) {
            v += r0k.tr_mul(&x0);
        }
        for i in 1..k {
            if let Some(rk) = measures.r.get(k - i - 1) {
                v += rk.tr_mul(&levels[i]);
            }
        }
        levels.push(v);
    }
    let flat: Vec<f64> = levels.iter().flat_map(|v| v.iter().copied()).collect();
    to_probability(layout, flat)
}

/// Output of [`characteristic_verify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub det_value: f64,
    /// `None` when `m_0 = 1` (the rank condition is then `rank = 0`).
    pub second_smallest_singular_value: Option<f64>,
    pub tol_det: f64,
    pub tol_rank: f64,
    pub pass: bool,
}

/// Default rank tolerance for [`characteristic_verify`].
pub const DEFAULT_TOL_RANK: f64 = 1e-6;

/// `1e-8 · max(1, max|Ψ_0|)^{m_0}`.
pub fn default_tol_det(psi0: &DMatrix<f64>) -> f64 {
    1e-8 * psi0.amax().max(1.0).powi(psi0.nrows() as i32)
}

/// Determinant from an LU factorization, accumulated in log space.
fn stable_det(m: &DMatrix<f64>) -> f64 {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut log_abs = 0.0;
    let mut sign = if lu.p().determinant::<f64>() < 0.0 { -1.0 } else { 1.0 };
    for v in u.diagonal().iter() {
        if *v == 0.0 {
            return 0.0;
        }
        if *v < 0.0 {
            sign = -sign;
        }
        log_abs += v.abs().ln();
    }
    sign * log_abs.exp()
}

/// Checks `det Ψ_0 = 0` and `rank Ψ_0 = m_0 - 1`.
pub fn characteristic_verify(psi0: &DMatrix<f64>, tol_det: f64, tol_rank: f64) -> Certificate {
    let det_value = stable_det(psi0);
    let mut sv: Vec<f64> = psi0.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(f64::total_cmp);
    let second = sv.get(1).copied();
    let rank_ok = second.map_or(true, |s| s >= tol_rank);
    Certificate {
        det_value,
        second_smallest_singular_value: second,
        tol_det,
        tol_rank,
        pass: det_value.abs() <= tol_det && rank_ok,
    }
}

/// Output of [`qbd_mean_drift`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanDrift {
    pub theta: Vec<f64>,
    /// `θ_p A_0(p) e`.
    pub up_rate: f64,
    /// `θ_p A_2(p) e`.
    pub down_rate: f64,
    pub stable: bool,
}

/// Mean-drift stability test of a QBD at `p`.
pub fn qbd_mean_drift(spec: &GeneratorSpec, p: &ProbabilityVector) -> Result<MeanDrift> {
    if !matches!(spec.family(), Family::Qbd(_)) {
        return Err(Error::Model(format!(
            "mean drift needs a QBD model, got `{}`",
            spec.family_name()
        )));
    }
    let NumericBlocks { repeating, .. } = spec.qbd_blocks(p)?;
    mean_drift_of(&repeating[0], &repeating[1], &repeating[2])
}

/// Mean drift from numeric `A_0, A_1, A_2`; the diagonal of `A_1` is
/// rederived so `A = A_0 + A_1 + A_2` is conservative.
pub fn mean_drift_of(a0: &DMatrix<f64>, a1: &DMatrix<f64>, a2: &DMatrix<f64>) -> Result<MeanDrift> {
    let mut a = a0 + a1 + a2;
    let m = a.nrows();
    reset_diagonal(&mut a, m);
    let theta = stationary_of(&a)?;
    let up_rate = a0.tr_mul(&theta).sum();
    let down_rate = a2.tr_mul(&theta).sum();
    Ok(MeanDrift {
        theta: theta.as_slice().to_vec(),
        up_rate,
        down_rate,
        stable: down_rate > up_rate,
    })
}
