//! Fixed points `π Γ(π) = 0`: the censoring-based fixed-point iteration,
//! certification, initial vectors, basin scans and metastability summaries.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_analytic::{
    censor, characteristic_verify, default_tol_det, mg1_r_measure, mg1_stationary, rg_factorize,
    solve_g_mg1, solve_r_gim1, stationary_from_rg, Certificate, DEFAULT_TOL_RANK,
};
use crate::meanfield_ode::{drift_norm, integrate, IntegratorConfig, Trajectory};
use crate::model::{sample_simplex, Family, GeneratorSpec};
use crate::particle_sim::{simulate_observed, ParticleSystem, stream_rng};
use crate::state_space::{l1_distance, l1_slices, LevelPhaseLayout, ProbabilityVector};

/// Version of every JSON document written by this module.
pub const FORMAT_VERSION: u32 = 1;

/// Initial-vector recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "recipe", content = "value", rename_all = "snake_case")]
pub enum Recipe {
    /// Mass `1/m` on each of levels `0..m`.
    Uniform(usize),
    /// `(1 - ρ) ρ^k` on level `k`.
    Geometric(f64),
    /// `e^{-λ} λ^k / k!` on level `k`.
    Poisson(f64),
    /// Level masses (length `L + 1`) or a full vector (length `D`),
    /// normalized.
    Custom(Vec<f64>),
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Recipe::Uniform(m) => write!(f, "uniform:{m}"),
            Recipe::Geometric(r) => write!(f, "geometric:{r}"),
            Recipe::Poisson(l) => write!(f, "poisson:{l}"),
            Recipe::Custom(v) => {
                let parts: Vec<String> = v.iter().map(f64::to_string).collect();
                write!(f, "custom:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for Recipe {
    type Err = Error;

    /// `uniform:4`, `geometric:0.5`, `poisson:1` or `custom:0.5,0.25,0.25`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse recipe `{s}`"));
        let (name, arg) = s.split_once(':').ok_or_else(bad)?;
        let num = |a: &str| a.trim().parse::<f64>().map_err(|_| bad());
        match name.trim() {
            "uniform" => Ok(Recipe::Uniform(arg.trim().parse().map_err(|_| bad())?)),
            "geometric" => Ok(Recipe::Geometric(num(arg)?)),
            "poisson" => Ok(Recipe::Poisson(num(arg)?)),
            "custom" => Ok(Recipe::Custom(arg.split(',').map(num).collect::<Result<_>>()?)),
            _ => Err(bad()),
        }
    }
}

/// Level masses of a recipe with the tail beyond `L` folded into level `L`.
fn level_masses(recipe: &Recipe, top: usize) -> Result<Vec<f64>> {
    let mut mass = vec![0.0; top + 1];
    match *recipe {
        Recipe::Uniform(m) => {
            if m < 1 {
                return Err(Error::InvalidArgument("uniform recipe needs m >= 1".into()));
            }
            for k in 0..m {
                mass[k.min(top)] += 1.0 / m as f64;
            }
        }
        Recipe::Geometric(rho) => {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(Error::InvalidArgument(format!("geometric needs 0 < ρ < 1, got {rho}")));
            }
            for (k, v) in mass.iter_mut().enumerate().take(top) {
                *v = (1.0 - rho) * rho.powi(k as i32);
            }
            mass[top] = rho.powi(top as i32);
        }
        Recipe::Poisson(lambda) => {
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(Error::InvalidArgument(format!("poisson needs λ > 0, got {lambda}")));
            }
            // log-space terms stay finite for large λ
            let mut log_term = -lambda;
            let mut head = 0.0;
            for (k, v) in mass.iter_mut().enumerate().take(top) {
                if k > 0 {
                    log_term += lambda.ln() - (k as f64).ln();
                }
                *v = log_term.exp();
                head += *v;
            }
            mass[top] = (1.0 - head).max(0.0);
        }
        Recipe::Custom(_) => unreachable!("custom recipes carry their own masses"),
    }
    Ok(mass)
}

/// The probability vector of a recipe on `layout`; level mass is spread
/// evenly over the level's phases.
pub fn initial_vector(recipe: &Recipe, layout: &LevelPhaseLayout) -> Result<ProbabilityVector> {
    let top = layout.truncation_level();
    let masses = match recipe {
        Recipe::Custom(v) if v.len() == layout.dim() => {
            return ProbabilityVector::from_weights(layout.clone(), v.clone());
        }
        Recipe::Custom(v) if v.len() == top + 1 => v.clone(),
        Recipe::Custom(v) => {
            return Err(Error::InvalidArgument(format!(
                "custom vector has {} entries; expected {} level masses or {} states",
                v.len(),
                top + 1,
                layout.dim()
            )))
        }
        other => level_masses(other, top)?,
    };
    let mut values = Vec::with_capacity(layout.dim());
    for (k, m) in masses.iter().enumerate() {
        let phases = layout.phases(k);
        values.extend(std::iter::repeat(m / phases as f64).take(phases));
    }
    ProbabilityVector::from_weights(layout.clone(), values)
}

/// `uniform(1..=5)`, `geometric(0.1..=0.9)` and `poisson(0.5, 1, 2, 4, 8, 16)`.
pub fn default_recipes() -> Vec<Recipe> {
    let mut v: Vec<Recipe> = (1..=5).map(Recipe::Uniform).collect();
    v.extend((1..=9).map(|i| Recipe::Geometric(i as f64 / 10.0)));
    v.extend([0.5, 1.0, 2.0, 4.0, 8.0, 16.0].into_iter().map(Recipe::Poisson));
    v
}

/// Local-stability verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    LocallyStable,
    Unstable,
    Undetermined,
}

/// Output of [`certify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointCertificate {
    /// `None` when censoring failed.
    pub characteristic: Option<Certificate>,
    pub drift_norm: f64,
    pub pass: bool,
    pub reason: Option<String>,
}

/// Checks `det Ψ_0(π̂) = 0`, `rank Ψ_0(π̂) = m_0 - 1` and the drift guard
/// `‖π̂ Γ(π̂)‖_max <= 10 tol_det`.
pub fn certify(spec: &GeneratorSpec, pi_hat: &ProbabilityVector, tol_det: f64, tol_rank: f64) -> FixedPointCertificate {
    let drift = drift_norm(spec, pi_hat).unwrap_or(f64::INFINITY);
    let psi0 = spec.evaluate_generator(pi_hat).and_then(|g| censor(&g, 0));
    match psi0 {
        Err(e) => FixedPointCertificate {
            characteristic: None,
            drift_norm: drift,
            pass: false,
            reason: Some(e.to_string()),
        },
        Ok(psi0) => {
            let c = characteristic_verify(&psi0, tol_det, tol_rank);
            let guard = drift <= 10.0 * tol_det;
            let reason = if !c.pass {
                Some("characteristic conditions fail".to_string())
            } else if !guard {
                Some(format!("drift norm {drift:e} exceeds {:e}", 10.0 * tol_det))
            } else {
                None
            };
            FixedPointCertificate {
                pass: c.pass && guard,
                characteristic: Some(c),
                drift_norm: drift,
                reason,
            }
        }
    }
}

/// [`certify`] with the default tolerances.
pub fn certify_default(spec: &GeneratorSpec, pi_hat: &ProbabilityVector) -> FixedPointCertificate {
    let tol_det = spec
        .evaluate_generator(pi_hat)
        .and_then(|g| censor(&g, 0))
        .map(|p| default_tol_det(&p))
        .unwrap_or(1e-8);
    certify(spec, pi_hat, tol_det, DEFAULT_TOL_RANK)
}

/// Which stationary solver produced an iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverPath {
    RgFactorization,
    GiM1,
    MG1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub format_version: u32,
    pub pi: ProbabilityVector,
    /// `‖π Γ(π)‖_max`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// l1 change of the last iteration.
    pub last_change: f64,
    pub certificate: FixedPointCertificate,
    pub stability: Stability,
    pub damping: f64,
    pub solver: SolverPath,
    /// Mass on the truncation level `L`.
    pub boundary_mass: f64,
    /// Mass has piled up at level `L` of a model with repeating level
    /// structure: the truncated chain is hiding an unstable infinite model.
    pub truncation_flag: bool,
    pub failed_iteration: Option<usize>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmOptions {
    /// Mixing weight ω in `π ← (1 - ω) π + ω 𝐅(π)`.
    pub damping: f64,
    /// Switch to ω = 0.5 when the iterates flip back and forth.
    pub oscillation_fallback: bool,
    /// Level-L mass above which the truncation flag is raised.
    pub boundary_mass_tol: f64,
    /// Use the R/G solvers for QBD, GI/M/1 and M/G/1 models.
    pub structured: bool,
}

impl Default for AlgorithmOptions {
    fn default() -> Self {
        Self {
            damping: 1.0,
            oscillation_fallback: true,
            boundary_mass_tol: 1e-6,
            structured: true,
        }
    }
}

fn generic_step(spec: &GeneratorSpec, pi: &ProbabilityVector) -> Result<ProbabilityVector> {
    stationary_from_rg(&rg_factorize(&spec.evaluate_generator(pi)?)?)
}

/// `𝐅(ℜ(π))`: the stationary vector of `Γ(π)`.
fn map_step(
    spec: &GeneratorSpec,
    pi: &ProbabilityVector,
    structured: bool,
    notes: &mut Vec<String>,
) -> Result<(ProbabilityVector, SolverPath)> {
    let top = spec.layout().truncation_level();
    let attempt = match spec.family() {
        Family::Qbd(_) | Family::Gim1(_) if structured => Some(
            spec.numeric_blocks(pi)
                .and_then(|b| solve_r_gim1(&b.repeating, &b.boundary, top))
                .map(|s| (s.pi, SolverPath::GiM1)),
        ),
        Family::Mg1(_) if structured => Some(spec.numeric_blocks(pi).and_then(|b| {
            let (g, _) = solve_g_mg1(&b.repeating)?;
            let m = mg1_r_measure(&g, &b.repeating, &b.boundary)?;
            Ok((mg1_stationary(&m, top)?, SolverPath::MG1))
        })),
        _ => None,
    };
    match attempt {
        Some(Ok(v)) => Ok(v),
        Some(Err(e)) => {
            let note = format!("structured solver failed ({e}); used the truncated generic path");
            if notes.last() != Some(&note) {
                notes.push(note);
            }
            Ok((generic_step(spec, pi)?, SolverPath::RgFactorization))
        }
        None => Ok((generic_step(spec, pi)?, SolverPath::RgFactorization)),
    }
}

fn mix(a: &ProbabilityVector, b: &ProbabilityVector, w: f64) -> Result<ProbabilityVector> {
    if w == 1.0 {
        return Ok(b.clone());
    }
    let v = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (1.0 - w) * x + w * y)
        .collect();
    ProbabilityVector::from_weights(a.layout().clone(), v)
}

/// The fixed-point iteration `π⁽ⁿ⁺¹⁾ = 𝐅(ℜ(π⁽ⁿ⁾))` with default options.
pub fn algorithm_i(spec: &GeneratorSpec, pi0: &ProbabilityVector, epsilon: f64, max_iter: usize) -> Result<FixedPointReport> {
    algorithm_i_with(spec, pi0, epsilon, max_iter, &AlgorithmOptions::default())
}

/// The fixed-point iteration. `iterations` is the index `n` of the first
/// iterate with `‖π⁽ⁿ⁺¹⁾ - π⁽ⁿ⁾‖_1 < ε`; the reported vector is `π⁽ⁿ⁺¹⁾`.
pub fn algorithm_i_with(
    spec: &GeneratorSpec,
    pi0: &ProbabilityVector,
    epsilon: f64,
    max_iter: usize,
    opts: &AlgorithmOptions,
) -> Result<FixedPointReport> {
    spec.layout().ensure_same(pi0.layout())?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidArgument("damping must lie in (0, 1]".into()));
    }
    let mut notes = Vec::new();
    let mut damping = opts.damping;
    let mut current = pi0.clone();
    let mut previous: Option<ProbabilityVector> = None;
    let mut solver = SolverPath::RgFactorization;
    let mut last_change = f64::INFINITY;
    let mut converged = false;
    let mut failed_iteration = None;
    let mut iterations = 0;
    for n in 0..max_iter {
        let (mapped, path) = match map_step(spec, &current, opts.structured, &mut notes) {
            Ok(v) => v,
            Err(e) => {
                notes.push(format!("iteration {}: {e}", n + 1));
                failed_iteration = Some(n + 1);
                break;
            }
        };
        solver = path;
        let next = mix(&current, &mapped, damping)?;
        last_change = l1_distance(&next, &current)?;
        iterations = n;
        if last_change < epsilon {
            current = next;
            converged = true;
            break;
        }
        if opts.oscillation_fallback && damping > 0.5 {
            if let Some(prev) = &previous {
                if l1_distance(&next, prev)? < 0.1 * last_change {
                    damping = 0.5;
                    notes.push(format!("oscillation at iteration {}; damping set to 0.5", n + 1));
                }
            }
        }
        previous = Some(std::mem::replace(&mut current, next));
        iterations = n + 1;
    }
    let residual = drift_norm(spec, &current)?;
    let certificate = certify_default(spec, &current);
    let boundary_mass = current.level_mass(spec.layout().truncation_level());
    // linear and expression models live on exactly the given levels
    let truncated = !matches!(spec.family(), Family::Linear { .. } | Family::Expression { .. });
    let truncation_flag = truncated && boundary_mass > opts.boundary_mass_tol;
    if truncation_flag {
        notes.push(format!(
            "mass {boundary_mass:.3e} at truncation level {}: the untruncated model may be unstable",
            spec.layout().truncation_level()
        ));
    }
    Ok(FixedPointReport {
        format_version: FORMAT_VERSION,
        pi: current,
        residual,
        iterations,
        converged,
        last_change,
        certificate,
        stability: Stability::Undetermined,
        damping,
        solver,
        boundary_mass,
        truncation_flag,
        failed_iteration,
        notes,
    })
}

/// Parameters of [`basin_scan`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub t_transient: f64,
    pub t_window: f64,
    /// States stored over the window.
    pub window_samples: usize,
    /// Limits closer than this in l1 are merged.
    pub merge_tol: f64,
    /// Drift-norm bound for fixed points (ε).
    pub epsilon: f64,
    /// Perturbed re-integrations per fixed point.
    pub perturbations: usize,
    /// Seed for perturbation directions.
    pub seed: u64,
    pub integrator: IntegratorConfig,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            t_transient: 2000.0,
            t_window: 200.0,
            window_samples: 40,
            merge_tol: 1e-4,
            epsilon: 1e-6,
            perturbations: 3,
            seed: 0,
            integrator: IntegratorConfig::default(),
        }
    }
}

impl ScanConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.t_transient > 0.0
            && self.t_window > 0.0
            && self.merge_tol > 0.0
            && self.epsilon > 0.0
            && self.window_samples >= 2;
        if !ok {
            return Err(Error::InvalidArgument(
                "scan times, tolerances and window samples must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitKind {
    FixedPoint,
    SuspectedLimitCycle,
    NonConvergent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub label: String,
    /// `None` when integration failed.
    pub kind: Option<LimitKind>,
    /// Index into [`BasinScanReport::limits`].
    pub limit: Option<usize>,
    pub window_diameter: f64,
    pub drift_norm: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Limit {
    pub kind: LimitKind,
    pub point: ProbabilityVector,
    pub drift_norm: f64,
    pub stability: Stability,
    /// Perturbed re-integrations that came back, out of `perturbations`.
    pub returned: usize,
    pub perturbations: usize,
    pub certificate: Option<FixedPointCertificate>,
    /// Seeds (by position) that reached this limit.
    pub seeds: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinScanReport {
    pub format_version: u32,
    pub config: ScanConfig,
    pub seeds: Vec<SeedOutcome>,
    pub limits: Vec<Limit>,
    /// At least two locally stable fixed points.
    pub metastable: bool,
}

impl BasinScanReport {
    pub fn stable_limits(&self) -> impl Iterator<Item = &Limit> {
        self.limits
            .iter()
            .filter(|l| l.kind == LimitKind::FixedPoint && l.stability == Stability::LocallyStable)
    }
}

struct SeedRun {
    kind: LimitKind,
    point: ProbabilityVector,
    diameter: f64,
    drift: f64,
}

fn window_diameter(states: &[ProbabilityVector]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, a) in states.iter().enumerate() {
        for b in &states[i + 1..] {
            d = d.max(l1_slices(a.as_slice(), b.as_slice()));
        }
    }
    d
}

/// The window left and came back: some state is far from the start while the
/// end is close to it again.
fn looks_recurrent(window: &Trajectory, diameter: f64) -> bool {
    let first = window.states[0].as_slice();
    let far = window
        .states
        .iter()
        .any(|s| l1_slices(s.as_slice(), first) > 0.5 * diameter);
    let back = window
        .states
        .iter()
        .skip(window.len() / 2)
        .any(|s| l1_slices(s.as_slice(), first) < 0.25 * diameter);
    far && back
}

fn run_seed(spec: &GeneratorSpec, q: &ProbabilityVector, cfg: &ScanConfig) -> Result<SeedRun> {
    let settled = integrate(spec, q, cfg.t_transient, &IntegratorConfig { output_dt: None, ..cfg.integrator })?;
    let start = settled.last().clone();
    let dt = cfg.t_window / cfg.window_samples as f64;
    let window = integrate(spec, &start, cfg.t_window, &cfg.integrator.with_output_dt(dt))?;
    let diameter = window_diameter(&window.states);
    let end = window.last().clone();
    let drift = drift_norm(spec, &end)?;
    if diameter <= cfg.merge_tol / 10.0 && drift <= cfg.epsilon {
        // polish with the fixed-point iteration, keeping the ODE limit if the
        // iteration wanders to another fixed point
        let mut point = end;
        let mut drift = drift;
        if let Ok(r) = algorithm_i(spec, &point, 1e-13, 500) {
            if r.converged && r.residual <= drift && l1_distance(&r.pi, &point)? < cfg.merge_tol {
                drift = r.residual;
                point = r.pi;
            }
        }
        return Ok(SeedRun {
            kind: LimitKind::FixedPoint,
            point,
            diameter,
            drift,
        });
    }
    let kind = if looks_recurrent(&window, diameter) {
        LimitKind::SuspectedLimitCycle
    } else {
        LimitKind::NonConvergent
    };
    Ok(SeedRun {
        kind,
        point: end,
        diameter,
        drift,
    })
}

/// Moves `pi` by exactly `size` in l1 toward a seeded random simplex point.
pub fn perturb(pi: &ProbabilityVector, size: f64, rng: &mut ChaCha8Rng) -> Result<ProbabilityVector> {
    let z = sample_simplex(rng, pi.as_slice().len());
    let dist = l1_slices(&z, pi.as_slice());
    let c = (size / dist).min(1.0);
    let v = pi
        .as_slice()
        .iter()
        .zip(&z)
        .map(|(p, z)| p + c * (z - p))
        .collect();
    ProbabilityVector::from_weights(pi.layout().clone(), v)
}

/// Integrates `count` perturbations of size `10·merge_tol` for
/// `t_transient + t_window` and counts those ending within `merge_tol` of `pi`.
pub fn perturbation_returns(
    spec: &GeneratorSpec,
    pi: &ProbabilityVector,
    count: usize,
    cfg: &ScanConfig,
    stream: u64,
) -> Result<usize> {
    let mut rng = stream_rng(cfg.seed, stream);
    let starts: Vec<ProbabilityVector> = (0..count)
        .map(|_| perturb(pi, 10.0 * cfg.merge_tol, &mut rng))
        .collect::<Result<_>>()?;
    let horizon = cfg.t_transient + cfg.t_window;
    let back: Vec<bool> = starts
        .par_iter()
        .map(|s| {
            let tr = integrate(spec, s, horizon, &IntegratorConfig { output_dt: None, ..cfg.integrator })?;
            Ok(l1_distance(tr.last(), pi)? < cfg.merge_tol)
        })
        .collect::<Result<_>>()?;
    Ok(back.into_iter().filter(|b| *b).count())
}

/// Integrates every seed, classifies the long-time behavior, merges limits and
/// tests fixed points for local stability.
pub fn basin_scan(
    spec: &GeneratorSpec,
    seeds: &[(String, ProbabilityVector)],
    cfg: &ScanConfig,
) -> Result<BasinScanReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("basin scan needs at least one seed".into()));
    }
    for (_, q) in seeds {
        spec.layout().ensure_same(q.layout())?;
    }
    let runs: Vec<Result<SeedRun>> = seeds.par_iter().map(|(_, q)| run_seed(spec, q, cfg)).collect();
    let mut outcomes = Vec::with_capacity(seeds.len());
    let mut limits: Vec<Limit> = Vec::new();
    for (i, ((label, _), run)) in seeds.iter().zip(runs).enumerate() {
        match run {
            Err(e) => outcomes.push(SeedOutcome {
                label: label.clone(),
                kind: None,
                limit: None,
                window_diameter: f64::NAN,
                drift_norm: f64::NAN,
                error: Some(e.to_string()),
            }),
            Ok(run) => {
                let found = limits.iter().position(|l| {
                    l.kind == run.kind && l1_slices(l.point.as_slice(), run.point.as_slice()) < cfg.merge_tol
                });
                let idx = match found {
                    Some(j) => {
                        limits[j].seeds.push(i);
                        j
                    }
                    None => {
                        limits.push(Limit {
                            kind: run.kind,
                            point: run.point.clone(),
                            drift_norm: run.drift,
                            stability: Stability::Undetermined,
                            returned: 0,
                            perturbations: 0,
                            certificate: None,
                            seeds: vec![i],
                        });
                        limits.len() - 1
                    }
                };
                outcomes.push(SeedOutcome {
                    label: label.clone(),
                    kind: Some(run.kind),
                    limit: Some(idx),
                    window_diameter: run.diameter,
                    drift_norm: run.drift,
                    error: None,
                });
            }
        }
    }
    for (j, limit) in limits.iter_mut().enumerate() {
        if limit.kind != LimitKind::FixedPoint {
            continue;
        }
        limit.certificate = Some(certify_default(spec, &limit.point));
        let returned = perturbation_returns(spec, &limit.point, cfg.perturbations, cfg, j as u64)?;
        limit.returned = returned;
        limit.perturbations = cfg.perturbations;
        limit.stability = if cfg.perturbations >= 3 && returned == cfg.perturbations {
            Stability::LocallyStable
        } else if cfg.perturbations >= 3 {
            Stability::Unstable
        } else {
            Stability::Undetermined
        };
    }
    let stable = limits
        .iter()
        .filter(|l| l.kind == LimitKind::FixedPoint && l.stability == Stability::LocallyStable)
        .count();
    Ok(BasinScanReport {
        format_version: FORMAT_VERSION,
        config: *cfg,
        seeds: outcomes,
        limits,
        metastable: stable >= 2,
    })
}

/// Parameters of the limit-commutation experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommutationConfig {
    /// Particles in the long-horizon run (time limit first).
    pub n_small: usize,
    pub t_long: f64,
    pub burn_in: f64,
    /// Particles in the large-`N` runs (particle limit first).
    pub n_large: usize,
    pub t_large: f64,
    pub replications: usize,
    pub seed: u64,
}

impl Default for CommutationConfig {
    fn default() -> Self {
        Self {
            n_small: 50,
            t_long: 4000.0,
            burn_in: 200.0,
            n_large: 5000,
            t_large: 200.0,
            replications: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommutationCheck {
    /// Tail masses `T_1, …` compared.
    pub time_first: Vec<f64>,
    pub time_first_se: Vec<f64>,
    pub particles_first: Vec<f64>,
    pub particles_first_se: Vec<f64>,
    /// Largest `|difference| / pooled SE`.
    pub max_z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetastabilityReport {
    pub format_version: u32,
    pub count_stable: usize,
    /// `(i, j, l1)` over pairs of locally stable limits (indices into the scan).
    pub separations: Vec<(usize, usize, f64)>,
    /// Seed labels per locally stable limit.
    pub basins: Vec<(usize, Vec<String>)>,
    pub limit_commutation: Option<CommutationCheck>,
    pub diagnostic: Option<String>,
}

/// Summarizes a scan. When exactly one locally stable fixed point exists and
/// `commutation` is given, also compares the two orders of the `t → ∞`,
/// `N → ∞` limits on the tail masses `T_1..T_4`.
pub fn metastability_report(
    spec: &GeneratorSpec,
    scan: &BasinScanReport,
    commutation: Option<&CommutationConfig>,
) -> Result<MetastabilityReport> {
    let stable: Vec<usize> = scan
        .limits
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind == LimitKind::FixedPoint && l.stability == Stability::LocallyStable)
        .map(|(i, _)| i)
        .collect();
    let mut separations = Vec::new();
    for (a, &i) in stable.iter().enumerate() {
        for &j in &stable[a + 1..] {
            let d = l1_distance(&scan.limits[i].point, &scan.limits[j].point)?;
            separations.push((i, j, d));
        }
    }
    let basins = stable
        .iter()
        .map(|&i| {
            let labels = scan.limits[i].seeds.iter().map(|&s| scan.seeds[s].label.clone()).collect();
            (i, labels)
        })
        .collect();
    let diagnostic = if stable.is_empty() {
        let failed = scan.seeds.iter().filter(|s| s.kind != Some(LimitKind::FixedPoint)).count();
        Some(format!(
            "no locally stable fixed point; {failed} of {} seeds did not settle on a fixed point",
            scan.seeds.len()
        ))
    } else {
        None
    };
    let limit_commutation = match (stable.len(), commutation) {
        (1, Some(c)) => Some(commutation_check(spec, &scan.limits[stable[0]].point, c)?),
        _ => None,
    };
    Ok(MetastabilityReport {
        format_version: FORMAT_VERSION,
        count_stable: stable.len(),
        separations,
        basins,
        limit_commutation,
        diagnostic,
    })
}

fn tails(x: &[f64], layout: &LevelPhaseLayout, count: usize) -> Vec<f64> {
    let t = crate::state_space::tail_masses(layout, x);
    (1..=count).map(|k| t[k]).collect()
}

fn commutation_check(spec: &GeneratorSpec, pi: &ProbabilityVector, c: &CommutationConfig) -> Result<CommutationCheck> {
    let layout = spec.layout();
    let k = layout.truncation_level().min(4);
    if !(c.t_long > c.burn_in && c.burn_in >= 0.0 && c.replications >= 2 && c.n_small > 0 && c.n_large > 0) {
        return Err(Error::InvalidArgument("invalid commutation experiment parameters".into()));
    }
    // time limit first: one long run, batch means of the sampled tails
    let batches = 20usize;
    let dt = (c.t_long - c.burn_in) / (batches * 50) as f64;
    let mut sys = ParticleSystem::sample(pi, c.n_small, stream_rng(c.seed, 0))?;
    sys.advance(spec, c.burn_in, &mut ())?;
    let mut batch_means = vec![vec![0.0; k]; batches];
    for (b, mean) in batch_means.iter_mut().enumerate() {
        for s in 0..50 {
            let t = c.burn_in + ((b * 50 + s + 1) as f64) * dt;
            sys.advance(spec, t, &mut ())?;
            for (m, v) in mean.iter_mut().zip(tails(&sys.empirical(), layout, k)) {
                *m += v / 50.0;
            }
        }
    }
    let (time_first, time_first_se) = mean_and_se(&batch_means, k);
    // particle limit first: large-N runs read at t_large
    let finals: Vec<Vec<f64>> = (0..c.replications as u64)
        .into_par_iter()
        .map(|r| {
            let tr = simulate_observed(spec, c.n_large, pi, c.t_large, c.t_large, c.seed, r + 1, &mut ())?;
            Ok(tails(tr.measures.last().unwrap().as_slice(), layout, k))
        })
        .collect::<Result<_>>()?;
    let (particles_first, particles_first_se) = mean_and_se(&finals, k);
    let max_z = (0..k)
        .map(|i| {
            let se = (time_first_se[i].powi(2) + particles_first_se[i].powi(2)).sqrt();
            let diff = (time_first[i] - particles_first[i]).abs();
            if se > 0.0 {
                diff / se
            } else if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    Ok(CommutationCheck {
        time_first,
        time_first_se,
        particles_first,
        particles_first_se,
        max_z,
        pass: max_z <= 3.0,
    })
}

fn mean_and_se(rows: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..k).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let se = (0..k)
        .map(|i| {
            let var = rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        })
        .collect();
    (mean, se)
}
