//! Level-phase state spaces, probability vectors on them, and block
//! generators.
//!
//! A state is a pair `(level, phase)` with `0 <= level <= L` and
//! `1 <= phase <= m_level`. Every vector and matrix in the crate is stored
//! flattened in lexicographic `(level, phase)` order; [`LevelPhaseLayout`]
//! owns the mapping between the two views.

use nalgebra::{DMatrix, DMatrixView, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a [`ProbabilityVector`].
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Tolerance on generator row sums, scaled by `max(1, |diagonal|)`.
pub const ROW_SUM_TOL: f64 = 1e-10;

/// The truncated state space `{(k, j) : 0 <= k <= L, 1 <= j <= m_k}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LevelPhaseLayout {
    phase_counts: Vec<usize>,
    offsets: Vec<usize>,
}

impl LevelPhaseLayout {
    /// Builds a layout from the phase counts `m_0, ..., m_L`.
    pub fn new(phase_counts: Vec<usize>) -> Result<Self> {
        if phase_counts.len() < 2 {
            return Err(Error::Layout(format!(
                "need at least two levels (L >= 1), got {}",
                phase_counts.len()
            )));
        }
        if let Some(level) = phase_counts.iter().position(|&m| m == 0) {
            return Err(Error::Layout(format!("level {level} has no phases")));
        }
        let mut offsets = Vec::with_capacity(phase_counts.len() + 1);
        let mut acc = 0;
        for &m in &phase_counts {
            offsets.push(acc);
            acc += m;
        }
        offsets.push(acc);
        Ok(Self {
            phase_counts,
            offsets,
        })
    }

    /// `L + 1` levels, each with `m` phases.
    pub fn uniform(truncation_level: usize, m: usize) -> Result<Self> {
        Self::new(vec![m; truncation_level + 1])
    }

    /// Level 0 with `m0` phases and levels `1..=L` with `m` phases each.
    pub fn with_boundary(m0: usize, m: usize, truncation_level: usize) -> Result<Self> {
        let mut counts = vec![m; truncation_level + 1];
        counts[0] = m0;
        Self::new(counts)
    }

    pub fn phase_counts(&self) -> &[usize] {
        &self.phase_counts
    }

    /// Index `L` of the last retained level.
    pub fn truncation_level(&self) -> usize {
        self.phase_counts.len() - 1
    }

    pub fn num_levels(&self) -> usize {
        self.phase_counts.len()
    }

    pub fn phases(&self, level: usize) -> usize {
        self.phase_counts[level]
    }

    /// Total number of states `D`.
    pub fn dim(&self) -> usize {
        self.offsets[self.phase_counts.len()]
    }

    /// Flat index of the first phase of `level`.
    pub fn offset(&self, level: usize) -> usize {
        self.offsets[level]
    }

    /// Flat index range of `level`.
    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        self.offsets[level]..self.offsets[level + 1]
    }

    /// Position of `(level, phase)` (phase is 1-based) in flattened order.
    pub fn flatten_index(&self, level: usize, phase: usize) -> Result<usize> {
        if level >= self.phase_counts.len() || phase == 0 || phase > self.phase_counts[level] {
            return Err(Error::Index { level, phase });
        }
        Ok(self.offsets[level] + phase - 1)
    }

    /// Inverse of [`flatten_index`](Self::flatten_index); returns a 1-based phase.
    pub fn state_of(&self, index: usize) -> Result<(usize, usize)> {
        if index >= self.dim() {
            return Err(Error::Index {
                level: self.num_levels(),
                phase: index,
            });
        }
        let level = self.level_of(index);
        Ok((level, index - self.offsets[level] + 1))
    }

    /// Level containing a flat index. Panics when out of range.
    pub(crate) fn level_of(&self, index: usize) -> usize {
        // offsets is sorted; partition_point finds the first offset > index
        self.offsets.partition_point(|&o| o <= index) - 1
    }

    /// Errors unless both layouts have the same phase counts.
    pub fn ensure_same(&self, other: &Self) -> Result<()> {
        if self != other {
            return Err(Error::LayoutMismatch(format!(
                "{:?} vs {:?}",
                self.phase_counts, other.phase_counts
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for LevelPhaseLayout {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LevelPhaseLayout> for Vec<usize> {
    fn from(l: LevelPhaseLayout) -> Self {
        l.phase_counts
    }
}

/// A probability vector on a [`LevelPhaseLayout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProbability")]
pub struct ProbabilityVector {
    layout: LevelPhaseLayout,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawProbability {
    layout: LevelPhaseLayout,
    values: Vec<f64>,
}

impl TryFrom<RawProbability> for ProbabilityVector {
    type Error = Error;

    fn try_from(raw: RawProbability) -> Result<Self> {
        Self::new(raw.layout, raw.values)
    }
}

impl ProbabilityVector {
    /// Validates `values` as a probability vector. Totals within `1e-9` of one
    /// are accepted and rescaled so the mass is one to `1e-12`.
    pub fn new(layout: LevelPhaseLayout, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::LayoutMismatch(format!(
                "vector of length {} on a layout of dimension {}",
                values.len(),
                layout.dim()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Probability(format!(
                "entry {i} is {} (must be finite and >= 0)",
                values[i]
            )));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Probability(format!("entries sum to {total}")));
        }
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            values.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Self { layout, values })
    }

    /// Normalizes nonnegative weights into a probability vector.
    pub fn from_weights(layout: LevelPhaseLayout, mut weights: Vec<f64>) -> Result<Self> {
        if weights.len() != layout.dim() {
            return Err(Error::LayoutMismatch(format!(
                "vector of length {} on a layout of dimension {}",
                weights.len(),
                layout.dim()
            )));
        }
        if weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Probability("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Probability("weights have zero total mass".into()));
        }
        weights.iter_mut().for_each(|v| *v /= total);
        Ok(Self {
            layout,
            values: weights,
        })
    }

    /// Clips negative entries to zero and rescales. Returns the vector and the
    /// largest absolute correction applied to any entry.
    pub fn project(layout: LevelPhaseLayout, raw: &[f64]) -> Result<(Self, f64)> {
        let clipped: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
        let pv = Self::from_weights(layout, clipped)?;
        let correction = raw
            .iter()
            .zip(&pv.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok((pv, correction))
    }

    /// Point mass on a flat index.
    pub fn dirac(layout: LevelPhaseLayout, index: usize) -> Result<Self> {
        let mut v = vec![0.0; layout.dim()];
        *v.get_mut(index).ok_or(Error::Index {
            level: usize::MAX,
            phase: index,
        })? = 1.0;
        Ok(Self { layout, values: v })
    }

    pub fn layout(&self) -> &LevelPhaseLayout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// The block `p_level`.
    pub fn level(&self, level: usize) -> &[f64] {
        &self.values[self.layout.level_range(level)]
    }

    /// `p_level · 1`.
    pub fn level_mass(&self, level: usize) -> f64 {
        self.level(level).iter().sum()
    }

    /// Component at `(level, phase)`, phase 1-based.
    pub fn get(&self, level: usize, phase: usize) -> Result<f64> {
        Ok(self.values[self.layout.flatten_index(level, phase)?])
    }

    /// Tail mass `T_k = sum_{l >= k} p_l · 1`, for `0 <= k <= L + 1`.
    pub fn tail_mass(&self, k: usize) -> Result<f64> {
        if k > self.layout.num_levels() {
            return Err(Error::Index { level: k, phase: 0 });
        }
        if k == 0 {
            return Ok(1.0);
        }
        Ok(self.values[self.layout.offset(k)..].iter().sum())
    }

    /// All tail masses `T_0, ..., T_{L+1}`, accumulated from the top level.
    pub fn tail_masses(&self) -> Vec<f64> {
        tail_masses(&self.layout, &self.values)
    }

    /// Mean level `sum_k k p_k · 1`.
    pub fn mean_level(&self) -> f64 {
        (0..self.layout.num_levels())
            .map(|k| k as f64 * self.level_mass(k))
            .sum()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

/// Tail masses of a raw flattened vector (not necessarily normalized).
pub(crate) fn tail_masses(layout: &LevelPhaseLayout, values: &[f64]) -> Vec<f64> {
    let n = layout.num_levels();
    let mut tails = vec![0.0; n + 1];
    for k in (0..n).rev() {
        let mass: f64 = values[layout.level_range(k)].iter().sum();
        tails[k] = tails[k + 1] + mass;
    }
    // T_0 is exactly one for a probability vector; keep the identity exact.
    tails[0] = 1.0;
    tails
}

/// Relative entropy `R(p || q) = sum_x p_x ln(p_x / q_x)` with `0 ln 0 = 0`.
pub fn relative_entropy(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    p.layout.ensure_same(&q.layout)?;
    let mut total = 0.0;
    for (i, (&px, &qx)) in p.values.iter().zip(&q.values).enumerate() {
        if px > 0.0 {
            if qx <= 0.0 {
                return Err(Error::Support { index: i });
            }
            total += px * (px / qx).ln();
        }
    }
    // Rounding can leave a tiny negative value when p == q.
    Ok(total.max(0.0))
}

/// `sum_x |p_x - q_x|`.
pub fn l1_distance(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    p.layout.ensure_same(&q.layout)?;
    Ok(l1_slices(&p.values, &q.values))
}

pub(crate) fn l1_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// A conservative generator on a layout: nonnegative off-diagonal entries and
/// zero row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGenerator {
    layout: LevelPhaseLayout,
    matrix: DMatrix<f64>,
}

impl BlockGenerator {
    /// Validates a full generator matrix.
    pub fn new(layout: LevelPhaseLayout, matrix: DMatrix<f64>) -> Result<Self> {
        let d = layout.dim();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::LayoutMismatch(format!(
                "{}x{} matrix on a layout of dimension {d}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        for i in 0..d {
            let mut sum = 0.0;
            for j in 0..d {
                let v = matrix[(i, j)];
                if !v.is_finite() {
                    return Err(Error::Generator(format!("entry ({i},{j}) is {v}")));
                }
                if i != j && v < 0.0 {
                    return Err(Error::Generator(format!(
                        "off-diagonal entry ({i},{j}) = {v} is negative"
                    )));
                }
                sum += v;
            }
            let scale = matrix[(i, i)].abs().max(1.0);
            if sum.abs() > ROW_SUM_TOL * scale {
                return Err(Error::Generator(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { layout, matrix })
    }

    /// Builds a generator from off-diagonal rates; the diagonal of `rates` is
    /// ignored and replaced by negative row sums.
    pub fn from_off_diagonal(layout: LevelPhaseLayout, mut rates: DMatrix<f64>) -> Result<Self> {
        let d = rates.nrows();
        if d != rates.ncols() {
            return Err(Error::Generator("rate matrix is not square".into()));
        }
        for i in 0..d {
            rates[(i, i)] = 0.0;
            let s: f64 = rates.row(i).iter().sum();
            rates[(i, i)] = -s;
        }
        Self::new(layout, rates)
    }

    /// Wraps a matrix without validation. Callers guarantee the invariants.
    pub(crate) fn from_parts_unchecked(layout: LevelPhaseLayout, matrix: DMatrix<f64>) -> Self {
        Self { layout, matrix }
    }

    pub fn layout(&self) -> &LevelPhaseLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// Block `Γ_{i,j}` of shape `m_i x m_j`.
    pub fn block(&self, i: usize, j: usize) -> DMatrixView<'_, f64> {
        let (r, c) = (self.layout.offset(i), self.layout.offset(j));
        self.matrix
            .view((r, c), (self.layout.phases(i), self.layout.phases(j)))
    }

    /// Row vector `p Γ`.
    pub fn left_mul(&self, p: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(p);
        (self.matrix.tr_mul(&v)).as_slice().to_vec()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.matrix.amax()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pv(values: &[f64]) -> ProbabilityVector {
        let layout = LevelPhaseLayout::uniform(values.len() - 1, 1).unwrap();
        ProbabilityVector::new(layout, values.to_vec()).unwrap()
    }

    #[test]
    fn flatten_index_examples() {
        let l = LevelPhaseLayout::new(vec![1, 1, 1]).unwrap();
        assert_eq!(l.flatten_index(0, 1).unwrap(), 0);
        let l = LevelPhaseLayout::new(vec![2, 3]).unwrap();
        assert_eq!(l.flatten_index(1, 2).unwrap(), 3);
        assert_eq!(l.flatten_index(1, 3).unwrap(), 4);
        assert!(matches!(l.flatten_index(2, 1), Err(Error::Index { .. })));
        assert!(matches!(l.flatten_index(1, 4), Err(Error::Index { .. })));
        assert!(matches!(l.flatten_index(0, 0), Err(Error::Index { .. })));
    }

    #[test]
    fn layout_rejects_degenerate_shapes() {
        assert!(LevelPhaseLayout::new(vec![3]).is_err());
        assert!(LevelPhaseLayout::new(vec![1, 0, 2]).is_err());
    }

    #[test]
    fn tail_mass_examples() {
        assert_eq!(pv(&[1.0, 0.0, 0.0]).tail_mass(0).unwrap(), 1.0);
        assert_abs_diff_eq!(pv(&[0.5, 0.25, 0.25]).tail_mass(1).unwrap(), 0.5);
        assert_eq!(pv(&[0.5, 0.25, 0.25]).tail_mass(3).unwrap(), 0.0);
        assert!(pv(&[0.5, 0.25, 0.25]).tail_mass(4).is_err());
    }

    #[test]
    fn relative_entropy_examples() {
        let p = pv(&[0.5, 0.5]);
        assert_eq!(relative_entropy(&p, &p).unwrap(), 0.0);
        let q = pv(&[0.25, 0.75]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_abs_diff_eq!(relative_entropy(&p, &q).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.143841, epsilon = 1e-6);
        let p = pv(&[1.0, 0.0]);
        assert_abs_diff_eq!(
            relative_entropy(&p, &pv(&[0.5, 0.5])).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert!(matches!(
            relative_entropy(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])),
            Err(Error::Support { index: 1 })
        ));
    }

    #[test]
    fn l1_examples() {
        let p = pv(&[0.5, 0.5]);
        assert_eq!(l1_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(l1_distance(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), 2.0);
        assert_abs_diff_eq!(l1_distance(&p, &pv(&[0.25, 0.75])).unwrap(), 0.5);
        assert!(l1_distance(&p, &pv(&[0.5, 0.25, 0.25])).is_err());
    }

    #[test]
    fn probability_vector_validation() {
        let l = LevelPhaseLayout::uniform(1, 1).unwrap();
        assert!(ProbabilityVector::new(l.clone(), vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(l.clone(), vec![-0.1, 1.1]).is_err());
        assert!(ProbabilityVector::new(l.clone(), vec![1.0]).is_err());
        let p = ProbabilityVector::new(l, vec![0.5, 0.5 + 5e-10]).unwrap();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() <= NORMALIZATION_TOL);
    }

    #[test]
    fn generator_validation() {
        let l = LevelPhaseLayout::uniform(1, 1).unwrap();
        let ok = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0]);
        assert!(BlockGenerator::new(l.clone(), ok).is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -1.0]);
        assert!(BlockGenerator::new(l.clone(), bad).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 2.0, -2.0]);
        assert!(BlockGenerator::new(l, neg).is_err());
    }

    fn arb_layout() -> impl Strategy<Value = LevelPhaseLayout> {
        prop::collection::vec(1usize..4, 2..7).prop_map(|v| LevelPhaseLayout::new(v).unwrap())
    }

    fn arb_pair() -> impl Strategy<Value = (ProbabilityVector, ProbabilityVector)> {
        arb_layout().prop_flat_map(|l| {
            let d = l.dim();
            (
                prop::collection::vec(0.0f64..1.0, d),
                prop::collection::vec(0.01f64..1.0, d),
            )
                .prop_map(move |(a, b)| {
                    let mut a = a;
                    a[0] += 1e-3;
                    (
                        ProbabilityVector::from_weights(l.clone(), a).unwrap(),
                        ProbabilityVector::from_weights(l.clone(), b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn flatten_round_trips(layout in arb_layout()) {
            for i in 0..layout.dim() {
                let (k, j) = layout.state_of(i).unwrap();
                prop_assert_eq!(layout.flatten_index(k, j).unwrap(), i);
            }
        }

        #[test]
        fn tail_mass_telescopes((p, _q) in arb_pair()) {
            let l = p.layout().truncation_level();
            for k in 0..=l {
                let diff = p.tail_mass(k).unwrap() - p.tail_mass(k + 1).unwrap();
                prop_assert!((diff - p.level_mass(k)).abs() < 1e-12);
                prop_assert!(p.tail_mass(k + 1).unwrap() <= p.tail_mass(k).unwrap() + 1e-15);
            }
            let tails = p.tail_masses();
            for k in 0..=l + 1 {
                prop_assert!((tails[k] - p.tail_mass(k).unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_vanishes_only_on_equality((p, q) in arb_pair()) {
            let r = relative_entropy(&p, &q).unwrap();
            let d = l1_distance(&p, &q).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert!(d <= 2.0 + 1e-12);
            if d > 1e-6 { prop_assert!(r > 0.0); }
            prop_assert_eq!(relative_entropy(&p, &p).unwrap(), 0.0);
            prop_assert_eq!(l1_distance(&p, &q).unwrap(), l1_distance(&q, &p).unwrap());
        }
    }
}
