//! The nonlinear generator map `p ↦ Γ(p)`.
//!
//! A [`GeneratorSpec`] pairs a [`LevelPhaseLayout`] with a model
//! [`Family`]. Every family reports, for a source state and the features of
//! the current measure, the off-diagonal rates out of that state
//! ([`GeneratorSpec::out_rates`]). Dense generators, the mean-field drift and
//! the particle simulator are all built on that one primitive, so they
//! cannot disagree about the rates.
//!
//! Transitions that would leave the top level `L` are redirected into level
//! `L` (same target phase); a redirected transition that lands on its own
//! source state is dropped. Diagonal entries are always the negative row
//! sums.

mod config;
pub mod expr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state_space::{l1_slices, BlockGenerator, LevelPhaseLayout, ProbabilityVector};
pub use expr::{FeatureExpression, Features, DIV_GUARD};

/// Default maximal jump size for GI/M/1 and M/G/1 block sequences.
pub const DEFAULT_MAX_JUMP: usize = 16;

/// A matrix of rate expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<FeatureExpression>,
}

impl ExprMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<FeatureExpression>) -> Result<Self> {
        if entries.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::Model(format!(
                "expression matrix {rows}x{cols} given {} entries",
                entries.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn from_constants(m: &DMatrix<f64>) -> Self {
        let mut entries = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                entries.push(FeatureExpression::constant(m[(i, j)]));
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            entries,
        }
    }

    /// Constant matrix from row-major values.
    pub fn from_rows(rows: usize, cols: usize, values: &[f64]) -> Self {
        Self::from_constants(&DMatrix::from_row_slice(rows, cols, values))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn entry(&self, i: usize, j: usize) -> &FeatureExpression {
        &self.entries[i * self.cols + j]
    }

    pub fn is_constant(&self) -> bool {
        self.entries.iter().all(FeatureExpression::is_constant)
    }

    pub fn eval(&self, f: &Features<'_>) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.entry(i, j).eval(f))
    }

    fn validate(&self, layout: &LevelPhaseLayout) -> Result<()> {
        self.entries.iter().try_for_each(|e| e.validate(layout))
    }
}

/// Blocks of a structured (QBD, GI/M/1 or M/G/1) family.
///
/// Naming follows the usual matrix-analytic convention.
///
/// * QBD and GI/M/1: `repeating[k] = A_k`, where `A_0` moves one level up,
///   `A_1` stays and `A_k` (k >= 2) moves `k - 1` levels down.
///   `boundary[0] = B_0` (level 0 to 1), `boundary[1] = B_1` (within level 0)
///   and `boundary[k] = B_k` (level `k - 1` to level 0).
/// * M/G/1: `repeating[0] = A_0` moves one level down, `A_1` stays and `A_k`
///   moves `k - 1` levels up. `B_0` is level 1 to 0, `B_1` within level 0 and
///   `B_k` level 0 to level `k - 1`.
///
/// Diagonal entries of `A_1` and `B_1` are derived from row sums; any values
/// given for them are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredBlocks {
    pub boundary: Vec<ExprMatrix>,
    pub repeating: Vec<ExprMatrix>,
}

impl StructuredBlocks {
    pub fn constant(boundary: &[DMatrix<f64>], repeating: &[DMatrix<f64>]) -> Self {
        Self {
            boundary: boundary.iter().map(ExprMatrix::from_constants).collect(),
            repeating: repeating.iter().map(ExprMatrix::from_constants).collect(),
        }
    }

    fn is_constant(&self) -> bool {
        self.boundary.iter().chain(&self.repeating).all(ExprMatrix::is_constant)
    }
}

/// Numeric blocks evaluated at a measure, with derived diagonals of the
/// infinite (untruncated) structure.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericBlocks {
    pub boundary: Vec<DMatrix<f64>>,
    pub repeating: Vec<DMatrix<f64>>,
}

/// Power-of-d choices (supermarket) model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupermarketParams {
    pub d: u32,
    pub lambda: f64,
    pub mu: f64,
}

/// Two-phase level process whose upward rates grow with the busy fraction
/// `T_1` through a Hill function.
///
/// From `(k, j)`: up to `(k + 1, j)` at `base[j] + gain * T_1^n / (K^n + T_1^n)`,
/// down to `(k - 1, j)` at `mu` and to the other phase of the same level at
/// `switching`.
///
/// The [`Default`] parameters are the calibrated bistable point: the
/// mean-field ODE has two locally stable fixed points (busy fractions near
/// 0.11 and 0.79) separated by an unstable one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BistableParams {
    pub base: [f64; 2],
    pub gain: f64,
    pub half_saturation: f64,
    pub hill: u32,
    pub mu: f64,
    pub switching: f64,
}

impl Default for BistableParams {
    fn default() -> Self {
        Self {
            base: [0.05, 0.15],
            gain: 0.8,
            half_saturation: 0.5,
            hill: 4,
            mu: 1.0,
            switching: 1.0,
        }
    }
}

/// One transition rule of an expression-defined model.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRule {
    /// Source `(level, phase)`, phase 1-based.
    pub from: (usize, usize),
    /// Target `(level, phase)`, phase 1-based.
    pub to: (usize, usize),
    pub rate: FeatureExpression,
}

#[derive(Debug, Clone, PartialEq)]
struct ResolvedRule {
    from: usize,
    to: usize,
    rate: FeatureExpression,
}

/// Model families.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// A constant generator; stored as sparse off-diagonal rows.
    Linear { rows: Vec<Vec<(usize, f64)>> },
    Qbd(StructuredBlocks),
    Gim1(StructuredBlocks),
    Mg1(StructuredBlocks),
    Supermarket(SupermarketParams),
    Bistable(BistableParams),
    Expression { rules: Vec<RuleSet> },
}

/// Rules grouped by source state (flat index order).
#[derive(Debug, Clone, PartialEq)]
pub struct RuleSet {
    rules: Vec<ResolvedRule>,
}

/// Banded-width metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureTag {
    /// Largest upward level jump.
    pub max_up: usize,
    /// Largest downward level jump.
    pub max_down: usize,
}

/// Declarative description of `p ↦ Γ(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    layout: LevelPhaseLayout,
    family: Family,
    max_jump: usize,
    structure: StructureTag,
}

impl GeneratorSpec {
    /// A constant generator.
    pub fn linear(generator: &BlockGenerator) -> Self {
        let m = generator.matrix();
        let d = m.nrows();
        let mut rows = vec![Vec::new(); d];
        let mut up = 0;
        let mut down = 0;
        let layout = generator.layout().clone();
        for (i, row) in rows.iter_mut().enumerate() {
            let li = layout.level_of(i);
            for j in 0..d {
                let v = m[(i, j)];
                if i != j && v != 0.0 {
                    row.push((j, v));
                    let lj = layout.level_of(j);
                    up = up.max(lj.saturating_sub(li));
                    down = down.max(li.saturating_sub(lj));
                }
            }
        }
        Self {
            layout,
            family: Family::Linear { rows },
            max_jump: DEFAULT_MAX_JUMP,
            structure: StructureTag {
                max_up: up,
                max_down: down,
            },
        }
    }

    /// Linear birth-death (M/M/1) chain on levels `0..=L`, one phase each.
    pub fn birth_death(lambda: f64, mu: f64, truncation_level: usize) -> Result<Self> {
        if !(lambda >= 0.0 && mu >= 0.0) {
            return Err(Error::Model("birth-death rates must be nonnegative".into()));
        }
        let layout = LevelPhaseLayout::uniform(truncation_level, 1)?;
        let d = layout.dim();
        let mut m = DMatrix::zeros(d, d);
        for k in 0..d {
            if k + 1 < d {
                m[(k, k + 1)] = lambda;
            }
            if k > 0 {
                m[(k, k - 1)] = mu;
            }
        }
        Ok(Self::linear(&BlockGenerator::from_off_diagonal(layout, m)?))
    }

    pub fn qbd(layout: LevelPhaseLayout, blocks: StructuredBlocks) -> Result<Self> {
        if blocks.repeating.len() != 3 || blocks.boundary.len() != 3 {
            return Err(Error::Model(
                "a QBD needs blocks A0, A1, A2 and B0, B1, B2".into(),
            ));
        }
        validate_gim1_shapes(&layout, &blocks)?;
        Ok(Self {
            layout,
            family: Family::Qbd(blocks),
            max_jump: DEFAULT_MAX_JUMP,
            structure: StructureTag {
                max_up: 1,
                max_down: 1,
            },
        })
    }

    pub fn gim1(layout: LevelPhaseLayout, blocks: StructuredBlocks) -> Result<Self> {
        validate_gim1_shapes(&layout, &blocks)?;
        let max_down = (blocks.repeating.len().saturating_sub(2)).max(blocks.boundary.len().saturating_sub(1));
        let spec = Self {
            layout,
            family: Family::Gim1(blocks),
            max_jump: DEFAULT_MAX_JUMP,
            structure: StructureTag {
                max_up: 1,
                max_down,
            },
        };
        spec.check_max_jump()?;
        Ok(spec)
    }

    pub fn mg1(layout: LevelPhaseLayout, blocks: StructuredBlocks) -> Result<Self> {
        validate_mg1_shapes(&layout, &blocks)?;
        let max_up = (blocks.repeating.len().saturating_sub(2)).max(blocks.boundary.len().saturating_sub(1));
        let spec = Self {
            layout,
            family: Family::Mg1(blocks),
            max_jump: DEFAULT_MAX_JUMP,
            structure: StructureTag {
                max_up,
                max_down: 1,
            },
        };
        spec.check_max_jump()?;
        Ok(spec)
    }

    pub fn supermarket(params: SupermarketParams, truncation_level: usize) -> Result<Self> {
        if params.d == 0 || !(params.lambda >= 0.0) || !(params.mu >= 0.0) {
            return Err(Error::Model(
                "supermarket needs d >= 1 and nonnegative rates".into(),
            ));
        }
        Ok(Self {
            layout: LevelPhaseLayout::uniform(truncation_level, 1)?,
            family: Family::Supermarket(params),
            max_jump: DEFAULT_MAX_JUMP,
            structure: StructureTag {
                max_up: 1,
                max_down: 1,
            },
        })
    }

    pub fn bistable(params: BistableParams, truncation_level: usize) -> Result<Self> {
        let all = [
            params.base[0],
            params.base[1],
            params.gain,
            params.mu,
            params.switching,
        ];
        if all.iter().any(|v| !(*v >= 0.0)) || !(params.half_saturation > 0.0) {
            return Err(Error::Model("bistable rates must be nonnegative".into()));
        }
        Ok(Self {
            layout: LevelPhaseLayout::uniform(truncation_level, 2)?,
            family: Family::Bistable(params),
            max_jump: DEFAULT_MAX_JUMP,
            structure: StructureTag {
                max_up: 1,
                max_down: 1,
            },
        })
    }

    /// A model given by explicit transition rules.
    pub fn expression(layout: LevelPhaseLayout, rules: Vec<RateRule>) -> Result<Self> {
        let mut by_source = vec![RuleSet { rules: Vec::new() }; layout.dim()];
        let mut up = 0;
        let mut down = 0;
        for rule in rules {
            let from = layout.flatten_index(rule.from.0, rule.from.1)?;
            let to = layout.flatten_index(rule.to.0, rule.to.1)?;
            if from == to {
                return Err(Error::Model(format!(
                    "rule {:?} -> {:?} is a self-loop",
                    rule.from, rule.to
                )));
            }
            rule.rate.validate(&layout)?;
            up = up.max(rule.to.0.saturating_sub(rule.from.0));
            down = down.max(rule.from.0.saturating_sub(rule.to.0));
            by_source[from].rules.push(ResolvedRule {
                from,
                to,
                rate: rule.rate,
            });
        }
        Ok(Self {
            layout,
            family: Family::Expression { rules: by_source },
            max_jump: DEFAULT_MAX_JUMP,
            structure: StructureTag {
                max_up: up,
                max_down: down,
            },
        })
    }

    /// Parses a model config file (see the crate documentation for the grammar).
    pub fn from_config_str(text: &str) -> Result<Self> {
        config::parse(text)
    }

    pub fn from_config_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Io(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_config_str(&text)
    }

    /// Sets the maximal jump size `K` that block sequences may use.
    pub fn with_max_jump(mut self, k: usize) -> Result<Self> {
        self.max_jump = k;
        self.check_max_jump()?;
        Ok(self)
    }

    fn check_max_jump(&self) -> Result<()> {
        if let Family::Gim1(b) | Family::Mg1(b) = &self.family {
            let longest = b.repeating.len().max(b.boundary.len()).saturating_sub(1);
            if longest > self.max_jump + 1 {
                return Err(Error::Model(format!(
                    "block sequence of length {} exceeds max_jump = {}",
                    longest + 1,
                    self.max_jump
                )));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> &LevelPhaseLayout {
        &self.layout
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            Family::Linear { .. } => "linear",
            Family::Qbd(_) => "qbd",
            Family::Gim1(_) => "gim1",
            Family::Mg1(_) => "mg1",
            Family::Supermarket(_) => "supermarket",
            Family::Bistable(_) => "bistable",
            Family::Expression { .. } => "expression",
        }
    }

    pub fn max_jump(&self) -> usize {
        self.max_jump
    }

    pub fn structure(&self) -> StructureTag {
        self.structure
    }

    /// True when `Γ(p)` does not depend on `p`.
    pub fn is_linear(&self) -> bool {
        match &self.family {
            Family::Linear { .. } => true,
            Family::Qbd(b) | Family::Gim1(b) | Family::Mg1(b) => b.is_constant(),
            Family::Supermarket(s) => s.d == 1,
            Family::Bistable(b) => b.gain == 0.0,
            Family::Expression { rules } => rules
                .iter()
                .flat_map(|r| &r.rules)
                .all(|r| r.rate.is_constant()),
        }
    }

    /// Appends the off-diagonal rates out of flat state `from`, evaluated at
    /// the features `f`. Targets may repeat; self-loops are never emitted.
    pub fn out_rates(&self, f: &Features<'_>, from: usize, out: &mut Vec<(usize, f64)>) {
        let layout = &self.layout;
        let top = layout.truncation_level();
        let level = layout.level_of(from);
        let phase = from - layout.offset(level);
        let mut push = |to_level: usize, to_phase: usize, rate: f64| {
            let to = layout.offset(to_level.min(top)) + to_phase;
            if to != from {
                out.push((to, rate));
            }
        };
        match &self.family {
            Family::Linear { rows } => out.extend(rows[from].iter().copied()),
            Family::Qbd(b) | Family::Gim1(b) => {
                let row = |m: &ExprMatrix, push: &mut dyn FnMut(usize, usize, f64), lvl: usize| {
                    for c in 0..m.cols {
                        push(lvl, c, m.entry(phase, c).eval(f));
                    }
                };
                if level == 0 {
                    row(&b.boundary[1], &mut push, 0);
                    row(&b.boundary[0], &mut push, 1);
                } else {
                    if let Some(bk) = b.boundary.get(level + 1) {
                        row(bk, &mut push, 0);
                    }
                    for (j, a) in b.repeating.iter().enumerate() {
                        // A_j moves from level k to k + 1 - j
                        if j <= level {
                            let target = level + 1 - j;
                            if target >= 1 {
                                row(a, &mut push, target);
                            }
                        }
                    }
                }
            }
            Family::Mg1(b) => {
                let row = |m: &ExprMatrix, push: &mut dyn FnMut(usize, usize, f64), lvl: usize| {
                    for c in 0..m.cols {
                        push(lvl, c, m.entry(phase, c).eval(f));
                    }
                };
                if level == 0 {
                    row(&b.boundary[1], &mut push, 0);
                    for (j, bj) in b.boundary.iter().enumerate().skip(2) {
                        row(bj, &mut push, j - 1);
                    }
                } else {
                    if level == 1 {
                        row(&b.boundary[0], &mut push, 0);
                    } else {
                        row(&b.repeating[0], &mut push, level - 1);
                    }
                    for (j, a) in b.repeating.iter().enumerate().skip(1) {
                        row(a, &mut push, level + j - 1);
                    }
                }
            }
            Family::Supermarket(s) => {
                if level < top {
                    // λ (T_k^d - T_{k+1}^d) / p_k, with p_k = T_k - T_{k+1}
                    // divided out exactly so the rate is defined at p_k = 0.
                    let (tk, tk1) = (f.tail(level), f.tail(level + 1));
                    let mut acc = 0.0;
                    for i in 0..s.d {
                        acc += tk.powi(i as i32) * tk1.powi((s.d - 1 - i) as i32);
                    }
                    push(level + 1, 0, s.lambda * acc);
                }
                if level > 0 {
                    push(level - 1, 0, s.mu);
                }
            }
            Family::Bistable(b) => {
                let t1 = f.tail(1);
                let n = b.hill as i32;
                let hill = t1.powi(n) / (b.half_saturation.powi(n) + t1.powi(n));
                if level < top {
                    push(level + 1, phase, b.base[phase] + b.gain * hill);
                }
                if level > 0 {
                    push(level - 1, phase, b.mu);
                }
                push(level, 1 - phase, b.switching);
            }
            Family::Expression { rules } => {
                for r in &rules[from].rules {
                    debug_assert_eq!(r.from, from);
                    out.push((r.to, r.rate.eval(f)));
                }
            }
        }
    }

    /// `Γ(p)` as a validated generator.
    pub fn evaluate_generator(&self, p: &ProbabilityVector) -> Result<BlockGenerator> {
        self.layout.ensure_same(p.layout())?;
        self.evaluate_raw(p.as_slice())
    }

    /// `Γ(x)` for a raw vector on the layout (used at intermediate integrator
    /// stages that sit marginally off the simplex).
    pub fn evaluate_raw(&self, values: &[f64]) -> Result<BlockGenerator> {
        let f = Features::new(&self.layout, values);
        let d = self.layout.dim();
        let mut m = DMatrix::zeros(d, d);
        let mut buf = Vec::new();
        for from in 0..d {
            buf.clear();
            self.out_rates(&f, from, &mut buf);
            let mut total = 0.0;
            for &(to, rate) in &buf {
                self.check_rate(from, to, rate)?;
                m[(from, to)] += rate;
                total += rate;
            }
            m[(from, from)] = -total;
        }
        Ok(BlockGenerator::from_parts_unchecked(self.layout.clone(), m))
    }

    pub(crate) fn check_rate(&self, from: usize, to: usize, rate: f64) -> Result<()> {
        if rate >= 0.0 && rate.is_finite() {
            return Ok(());
        }
        let (from_level, from_phase) = self.layout.state_of(from)?;
        let (to_level, to_phase) = self.layout.state_of(to)?;
        if !rate.is_finite() {
            return Err(Error::Model(format!(
                "rate from ({from_level},{from_phase}) to ({to_level},{to_phase}) is {rate}"
            )));
        }
        Err(Error::NegativeRate {
            rate,
            from_level,
            from_phase,
            to_level,
            to_phase,
        })
    }

    /// `x Γ(x)` written into `out`, computed from the sparse rates.
    pub(crate) fn drift_into(&self, values: &[f64], out: &mut [f64]) -> Result<()> {
        let f = Features::new(&self.layout, values);
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut buf = Vec::new();
        for (from, &mass) in values.iter().enumerate() {
            buf.clear();
            self.out_rates(&f, from, &mut buf);
            for &(to, rate) in &buf {
                self.check_rate(from, to, rate)?;
                let flow = mass * rate;
                out[to] += flow;
                out[from] -= flow;
            }
        }
        Ok(())
    }

    /// Numeric structured blocks at `p` with diagonals derived from the
    /// repeating rows (QBD and GI/M/1 use the GI/M/1 convention).
    pub fn numeric_blocks(&self, p: &ProbabilityVector) -> Result<NumericBlocks> {
        self.layout.ensure_same(p.layout())?;
        let f = Features::new(&self.layout, p.as_slice());
        let (blocks, mg1) = match &self.family {
            Family::Qbd(b) | Family::Gim1(b) => (b, false),
            Family::Mg1(b) => (b, true),
            _ => {
                return Err(Error::Model(format!(
                    "family `{}` has no block-sequence structure",
                    self.family_name()
                )))
            }
        };
        let mut boundary: Vec<DMatrix<f64>> = blocks.boundary.iter().map(|m| m.eval(&f)).collect();
        let mut repeating: Vec<DMatrix<f64>> =
            blocks.repeating.iter().map(|m| m.eval(&f)).collect();
        for m in boundary.iter().chain(&repeating) {
            if let Some(v) = m.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::Model(format!("block entry evaluates to {v}")));
            }
        }
        let set_diag = |local: &mut DMatrix<f64>, others: &[&DMatrix<f64>]| {
            for i in 0..local.nrows() {
                local[(i, i)] = 0.0;
                let mut s: f64 = local.row(i).iter().sum();
                for o in others {
                    s += o.row(i).iter().sum::<f64>();
                }
                local[(i, i)] = -s;
            }
        };
        // A_1
        let mut a1 = repeating[1].clone();
        {
            let others: Vec<&DMatrix<f64>> = repeating
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != 1)
                .map(|(_, m)| m)
                .collect();
            set_diag(&mut a1, &others);
        }
        repeating[1] = a1;
        // B_1
        let mut b1 = boundary[1].clone();
        {
            let others: Vec<&DMatrix<f64>> = if mg1 {
                boundary.iter().skip(2).collect()
            } else {
                vec![&boundary[0]]
            };
            set_diag(&mut b1, &others);
        }
        boundary[1] = b1;
        Ok(NumericBlocks {
            boundary,
            repeating,
        })
    }

    /// `A(p) = A_0(p) + A_1(p) + A_2(p)` blocks of a QBD at `p`.
    pub(crate) fn qbd_blocks(&self, p: &ProbabilityVector) -> Result<NumericBlocks> {
        match self.family {
            Family::Qbd(_) => self.numeric_blocks(p),
            _ => Err(Error::Model(format!(
                "mean drift needs a QBD model, got `{}`",
                self.family_name()
            ))),
        }
    }
}

fn shape_err(name: &str, got: (usize, usize), want: (usize, usize)) -> Error {
    Error::Model(format!(
        "block {name} is {}x{}, expected {}x{}",
        got.0, got.1, want.0, want.1
    ))
}

fn structured_phases(layout: &LevelPhaseLayout) -> Result<(usize, usize)> {
    let m0 = layout.phases(0);
    let m = layout.phases(1);
    if layout.phase_counts()[1..].iter().any(|&x| x != m) {
        return Err(Error::Model(
            "structured families need the same phase count on every level >= 1".into(),
        ));
    }
    Ok((m0, m))
}

fn validate_gim1_shapes(layout: &LevelPhaseLayout, b: &StructuredBlocks) -> Result<()> {
    let (m0, m) = structured_phases(layout)?;
    if b.repeating.len() < 2 || b.boundary.len() < 2 {
        return Err(Error::Model("need at least A0, A1 and B0, B1".into()));
    }
    for (k, a) in b.repeating.iter().enumerate() {
        if a.shape() != (m, m) {
            return Err(shape_err(&format!("A{k}"), a.shape(), (m, m)));
        }
        a.validate(layout)?;
    }
    for (k, bk) in b.boundary.iter().enumerate() {
        let want = match k {
            0 => (m0, m),
            1 => (m0, m0),
            _ => (m, m0),
        };
        if bk.shape() != want {
            return Err(shape_err(&format!("B{k}"), bk.shape(), want));
        }
        bk.validate(layout)?;
    }
    Ok(())
}

fn validate_mg1_shapes(layout: &LevelPhaseLayout, b: &StructuredBlocks) -> Result<()> {
    let (m0, m) = structured_phases(layout)?;
    if b.repeating.len() < 2 || b.boundary.len() < 2 {
        return Err(Error::Model("need at least A0, A1 and B0, B1".into()));
    }
    for (k, a) in b.repeating.iter().enumerate() {
        if a.shape() != (m, m) {
            return Err(shape_err(&format!("A{k}"), a.shape(), (m, m)));
        }
        a.validate(layout)?;
    }
    for (k, bk) in b.boundary.iter().enumerate() {
        let want = match k {
            0 => (m, m0),
            1 => (m0, m0),
            _ => (m0, m),
        };
        if bk.shape() != want {
            return Err(shape_err(&format!("B{k}"), bk.shape(), want));
        }
        bk.validate(layout)?;
    }
    Ok(())
}

/// Uniform sample from the simplex (flat Dirichlet).
pub(crate) fn sample_simplex<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Lower bound on the Lipschitz constant of `Γ`: the largest observed ratio
/// `max|Γ(x) - Γ(y)| / ||x - y||_1` over seeded sample pairs.
///
/// Pairs cycle through three kinds: two uniform simplex points, two distinct
/// vertices, and a uniform point against a vertex.
pub fn lipschitz_estimate(spec: &GeneratorSpec, sample_count: usize, seed: u64) -> Result<f64> {
    if sample_count < 2 {
        return Err(Error::InvalidArgument("sample_count must be >= 2".into()));
    }
    let layout = spec.layout();
    let d = layout.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vertex = |i: usize| {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    };
    let mut best: f64 = 0.0;
    for n in 0..sample_count {
        let (x, y) = match n % 3 {
            0 => (sample_simplex(&mut rng, d), sample_simplex(&mut rng, d)),
            1 => {
                let i = rng.random_range(0..d);
                let j = (i + 1 + rng.random_range(0..d - 1)) % d;
                (vertex(i), vertex(j))
            }
            _ => (sample_simplex(&mut rng, d), vertex(rng.random_range(0..d))),
        };
        let dist = l1_slices(&x, &y);
        if dist <= 0.0 {
            continue;
        }
        let gx = spec.evaluate_raw(&x)?;
        let gy = spec.evaluate_raw(&y)?;
        let diff = (gx.matrix() - gy.matrix()).amax();
        best = best.max(diff / dist);
    }
    Ok(best)
}
