//! The mean-field ODE `dp/dt = p Γ(p)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_analytic::censor;
use crate::model::{sample_simplex, Family, GeneratorSpec};
use crate::state_space::{relative_entropy, LevelPhaseLayout, ProbabilityVector};

/// `p Γ(p)`. Components sum to zero.
pub fn drift(spec: &GeneratorSpec, p: &ProbabilityVector) -> Result<Vec<f64>> {
    spec.layout().ensure_same(p.layout())?;
    let mut out = vec![0.0; p.as_slice().len()];
    spec.drift_into(p.as_slice(), &mut out)?;
    Ok(out)
}

/// `max_x |(p Γ(p))_x|`.
pub fn drift_norm(spec: &GeneratorSpec, p: &ProbabilityVector) -> Result<f64> {
    Ok(drift(spec, p)?.iter().fold(0.0, |a, v| a.max(v.abs())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    /// Classical fourth-order Runge–Kutta with a fixed step.
    Rk4 { step: f64 },
    /// Dormand–Prince 5(4) with error control on the fifth-order solution.
    DormandPrince { abs_tol: f64, rel_tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Spacing of stored states. `None` stores every accepted step.
    pub output_dt: Option<f64>,
    /// Upper bound on accepted plus rejected steps.
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::DormandPrince {
                abs_tol: 1e-10,
                rel_tol: 1e-8,
            },
            output_dt: None,
            max_steps: 10_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn rk4(step: f64) -> Self {
        Self {
            method: Method::Rk4 { step },
            ..Self::default()
        }
    }

    pub fn adaptive(abs_tol: f64, rel_tol: f64) -> Self {
        Self {
            method: Method::DormandPrince { abs_tol, rel_tol },
            ..Self::default()
        }
    }

    pub fn with_output_dt(mut self, dt: f64) -> Self {
        self.output_dt = Some(dt);
        self
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.method {
            Method::Rk4 { step } => step > 0.0 && step.is_finite(),
            Method::DormandPrince { abs_tol, rel_tol } => {
                abs_tol > 0.0 && rel_tol > 0.0 && abs_tol.is_finite() && rel_tol.is_finite()
            }
        };
        if !ok {
            return Err(Error::InvalidArgument(
                "integrator step and tolerances must be positive".into(),
            ));
        }
        if let Some(dt) = self.output_dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::InvalidArgument("output_dt must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegratorStats {
    pub steps: usize,
    pub rejected_steps: usize,
    pub drift_evaluations: usize,
    /// Largest entrywise change made by renormalization.
    pub max_correction: f64,
    /// Smallest entry seen before renormalization.
    pub min_entry_before: f64,
    /// Largest `|Σ p - 1|` seen before renormalization.
    pub max_sum_deviation: f64,
}

/// States of the mean-field flow on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub layout: LevelPhaseLayout,
    pub times: Vec<f64>,
    pub states: Vec<ProbabilityVector>,
    pub stats: IntegratorStats,
}

impl Trajectory {
    /// Wraps stored states, checking the grid.
    pub fn new(layout: LevelPhaseLayout, times: Vec<f64>, states: Vec<ProbabilityVector>) -> Result<Self> {
        if times.len() != states.len() || times.is_empty() {
            return Err(Error::InvalidArgument(
                "trajectory needs one state per time and at least one time".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("trajectory times must increase".into()));
        }
        for s in &states {
            layout.ensure_same(s.layout())?;
        }
        Ok(Self {
            layout,
            times,
            states,
            stats: IntegratorStats::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &ProbabilityVector {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory is never empty")
    }
}

// Dormand–Prince tableau (the flow is autonomous, so the nodes are unused)
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct Stepper<'a> {
    spec: &'a GeneratorSpec,
    k: Vec<Vec<f64>>,
    tmp: Vec<f64>,
    evals: usize,
}

impl<'a> Stepper<'a> {
    fn new(spec: &'a GeneratorSpec, d: usize) -> Self {
        Self {
            spec,
            k: vec![vec![0.0; d]; 7],
            tmp: vec![0.0; d],
            evals: 0,
        }
    }

    fn eval(&mut self, stage: usize, y: &[f64], h: f64, coeffs: &[f64]) -> Result<()> {
        for (i, t) in self.tmp.iter_mut().enumerate() {
            let mut v = y[i];
            for (j, c) in coeffs.iter().enumerate() {
                if *c != 0.0 {
                    v += h * c * self.k[j][i];
                }
            }
            // stage states may dip marginally below zero; rates are
            // evaluated on the clipped point
            *t = v.max(0.0);
        }
        self.evals += 1;
        let (tmp, k) = (&self.tmp, &mut self.k[stage]);
        self.spec.drift_into(tmp, k)
    }

    fn rk4(&mut self, y: &[f64], h: f64, out: &mut [f64]) -> Result<()> {
        self.eval(0, y, h, &[])?;
        self.eval(1, y, h, &[0.5])?;
        self.eval(2, y, h, &[0.0, 0.5])?;
        self.eval(3, y, h, &[0.0, 0.0, 1.0])?;
        for i in 0..y.len() {
            out[i] = y[i] + h / 6.0 * (self.k[0][i] + 2.0 * self.k[1][i] + 2.0 * self.k[2][i] + self.k[3][i]);
        }
        Ok(())
    }

    /// One Dormand–Prince attempt; returns the scaled error norm.
    fn dopri(&mut self, y: &[f64], h: f64, out: &mut [f64], abs_tol: f64, rel_tol: f64) -> Result<f64> {
        for s in 0..7 {
            let coeffs = A[s];
            self.eval(s, y, h, &coeffs[..s.min(6)])?;
        }
        let mut err: f64 = 0.0;
        for i in 0..y.len() {
            let mut hi = 0.0;
            let mut lo = 0.0;
            for s in 0..7 {
                hi += B5[s] * self.k[s][i];
                lo += B4[s] * self.k[s][i];
            }
            out[i] = y[i] + h * hi;
            let scale = abs_tol + rel_tol * y[i].abs().max(out[i].abs());
            err = err.max((h * (hi - lo)).abs() / scale);
        }
        Ok(err)
    }
}

fn renormalize(y: &mut [f64], stats: &mut IntegratorStats) {
    let min = y.iter().copied().fold(f64::INFINITY, f64::min);
    let sum: f64 = y.iter().sum();
    stats.min_entry_before = stats.min_entry_before.min(min);
    stats.max_sum_deviation = stats.max_sum_deviation.max((sum - 1.0).abs());
    let clipped: f64 = y.iter().map(|v| v.max(0.0)).sum();
    for v in y.iter_mut() {
        let new = v.max(0.0) / clipped;
        stats.max_correction = stats.max_correction.max((new - *v).abs());
        *v = new;
    }
}

/// Integrates `dp/dt = p Γ(p)` from `p(0) = q` to `t_end`.
pub fn integrate(
    spec: &GeneratorSpec,
    q: &ProbabilityVector,
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    spec.layout().ensure_same(q.layout())?;
    cfg.validate()?;
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument("t_end must be positive".into()));
    }
    let layout = spec.layout().clone();
    let d = layout.dim();
    let mut stepper = Stepper::new(spec, d);
    let mut stats = IntegratorStats {
        min_entry_before: 0.0,
        ..IntegratorStats::default()
    };
    let mut y = q.as_slice().to_vec();
    let mut next = vec![0.0; d];
    let mut t = 0.0;
    let mut times = vec![0.0];
    let mut states = vec![q.clone()];

    let grid_time = |i: usize| -> f64 {
        match cfg.output_dt {
            Some(dt) => {
                let g = i as f64 * dt;
                if g >= t_end * (1.0 - 1e-12) {
                    t_end
                } else {
                    g
                }
            }
            None => t_end,
        }
    };
    let mut grid_index = 1;
    let mut h = match cfg.method {
        Method::Rk4 { step } => step,
        Method::DormandPrince { .. } => {
            spec.drift_into(&y, &mut next)?;
            let f = next.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            (1e-3 / f.max(1e-3)).min(t_end)
        }
    };
    let mut attempts = 0usize;
    while t < t_end {
        let target = grid_time(grid_index);
        let remaining = target - t;
        // a step that would stop just short of the target takes it instead
        let hits_target = h >= remaining * (1.0 - 1e-9);
        let h_try = if hits_target { remaining } else { h };
        attempts += 1;
        if attempts > cfg.max_steps {
            return Err(Error::Integration {
                time: t,
                message: format!("step limit {} reached", cfg.max_steps),
            });
        }
        let accepted = match cfg.method {
            Method::Rk4 { .. } => {
                stepper.rk4(&y, h_try, &mut next)?;
                true
            }
            Method::DormandPrince { abs_tol, rel_tol } => {
                let err = stepper.dopri(&y, h_try, &mut next, abs_tol, rel_tol)?;
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                let ok = err <= 1.0 && next.iter().all(|v| v.is_finite());
                if ok {
                    // a step shortened to land on the grid says nothing about h
                    if !hits_target || factor < 1.0 {
                        h = h_try * factor;
                    }
                } else {
                    h = h_try * factor.min(0.5);
                    stats.rejected_steps += 1;
                    if h < 1e-14 * t.max(1.0) {
                        return Err(Error::Integration {
                            time: t,
                            message: format!("step size underflow (h = {h:e}); the system is too stiff"),
                        });
                    }
                }
                ok
            }
        };
        if !accepted {
            continue;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                time: t,
                message: "state became non-finite".into(),
            });
        }
        std::mem::swap(&mut y, &mut next);
        renormalize(&mut y, &mut stats);
        stats.steps += 1;
        t = if hits_target { target } else { t + h_try };
        if hits_target || cfg.output_dt.is_none() {
            times.push(t);
            states.push(ProbabilityVector::new(layout.clone(), y.clone())?);
            if hits_target {
                grid_index += 1;
            }
        }
    }
    stats.drift_evaluations = stepper.evals;
    Ok(Trajectory {
        layout,
        times,
        states,
        stats,
    })
}

/// One row of [`entropy_decay_report`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    pub t: f64,
    pub r_value: f64,
    pub dr_dt_numeric: f64,
    /// `-∞` when some `p_x = 0` while mass flows into `x`.
    pub dr_dt_formula: f64,
}

/// `d/dt R(p‖q) = -Σ_{x≠y} q_y Λ_{y,x} r_x Ψ(r_y / r_x)` with `r = p/q` and
/// `Ψ(z) = z ln z - z + 1`, written as `r_y ln(r_y/r_x) - r_y + r_x` so that
/// zero entries of `p` are handled without dividing by them.
pub fn entropy_derivative(lambda: &nalgebra::DMatrix<f64>, p: &[f64], q: &[f64]) -> Result<f64> {
    let d = p.len();
    let r: Vec<f64> = p
        .iter()
        .zip(q)
        .enumerate()
        .map(|(i, (a, b))| {
            if *b > 0.0 {
                Ok(a / b)
            } else if *a == 0.0 {
                Ok(f64::NAN)
            } else {
                Err(Error::Support { index: i })
            }
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for y in 0..d {
        if q[y] == 0.0 {
            continue;
        }
        for x in 0..d {
            let rate = lambda[(y, x)];
            if x == y || rate == 0.0 || q[x] == 0.0 {
                continue;
            }
            let (ry, rx) = (r[y], r[x]);
            let term = if ry == 0.0 {
                rx
            } else if rx == 0.0 {
                f64::INFINITY
            } else {
                ry * (ry / rx).ln() - ry + rx
            };
            total -= q[y] * rate * term;
        }
    }
    Ok(total)
}

/// Finite-difference derivative on a possibly nonuniform grid: centered in
/// the interior, second-order one-sided at the ends.
fn grid_derivative(t: &[f64], v: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    if n == 2 {
        let s = (v[1] - v[0]) / (t[1] - t[0]);
        return vec![s, s];
    }
    for i in 1..n - 1 {
        out[i] = (v[i + 1] - v[i - 1]) / (t[i + 1] - t[i - 1]);
    }
    let three_point = |t0: f64, t1: f64, t2: f64, v0: f64, v1: f64, v2: f64| {
        // derivative at t0 of the parabola through the three points
        let (h1, h2) = (t1 - t0, t2 - t0);
        let a = (v1 - v0) / h1;
        let b = (v2 - v0) / h2;
        (a * h2 - b * h1) / (h2 - h1)
    };
    out[0] = three_point(t[0], t[1], t[2], v[0], v[1], v[2]);
    out[n - 1] = three_point(t[n - 1], t[n - 2], t[n - 3], v[n - 1], v[n - 2], v[n - 3]);
    out
}

/// Relative entropy `R(p(t)‖q(t))` along two linear-flow trajectories, its
/// numerical derivative and the closed-form derivative.
pub fn entropy_decay_report(
    spec: &GeneratorSpec,
    p_traj: &Trajectory,
    q_traj: &Trajectory,
) -> Result<Vec<EntropyPoint>> {
    let Family::Linear { .. } = spec.family() else {
        return Err(Error::Model(format!(
            "the entropy identity holds only for linear models, got `{}`",
            spec.family_name()
        )));
    };
    if p_traj.times != q_traj.times {
        return Err(Error::InvalidArgument(
            "trajectories must share one time grid".into(),
        ));
    }
    let lambda = spec.evaluate_generator(&p_traj.states[0])?.into_matrix();
    let values: Vec<f64> = p_traj
        .states
        .iter()
        .zip(&q_traj.states)
        .map(|(p, q)| relative_entropy(p, q))
        .collect::<Result<_>>()?;
    let numeric = grid_derivative(&p_traj.times, &values);
    p_traj
        .states
        .iter()
        .zip(&q_traj.states)
        .enumerate()
        .map(|(i, (p, q))| {
            Ok(EntropyPoint {
                t: p_traj.times[i],
                r_value: values[i],
                dr_dt_numeric: numeric[i],
                dr_dt_formula: entropy_derivative(&lambda, p.as_slice(), q.as_slice())?,
            })
        })
        .collect()
}

/// A scalar field on the simplex with a gradient.
pub trait ScalarField {
    fn value(&self, y: &[f64]) -> Option<f64>;
    fn gradient(&self, y: &[f64]) -> Option<Vec<f64>>;
}

/// `y ↦ R(y‖π)`.
#[derive(Debug, Clone)]
pub struct RelativeEntropyTo(pub ProbabilityVector);

impl ScalarField for RelativeEntropyTo {
    fn value(&self, y: &[f64]) -> Option<f64> {
        let mut s = 0.0;
        for (a, b) in y.iter().zip(self.0.as_slice()) {
            if *a > 0.0 {
                if *b <= 0.0 {
                    return None;
                }
                s += a * (a / b).ln();
            }
        }
        Some(s)
    }

    fn gradient(&self, y: &[f64]) -> Option<Vec<f64>> {
        y.iter()
            .zip(self.0.as_slice())
            .map(|(a, b)| (*a > 0.0 && *b > 0.0).then(|| (a / b).ln() + 1.0))
            .collect()
    }
}

/// A constant field.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl ScalarField for Constant {
    fn value(&self, _: &[f64]) -> Option<f64> {
        Some(self.0)
    }

    fn gradient(&self, y: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; y.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    /// Largest sampled `y Γ(y) · ∇g(y)`.
    pub max_value: f64,
    /// Largest positive part of the sampled values.
    pub max_violation: f64,
    pub violating_points: Vec<Vec<f64>>,
    pub evaluated: usize,
    /// Samples where the gradient was unavailable.
    pub skipped: usize,
}

/// Threshold above which `y Γ(y) · ∇g(y)` counts as a violation.
pub const LYAPUNOV_SLACK: f64 = 1e-9;

/// `y Γ(y) · ∇g(y)`, or `None` where `g` has no gradient.
pub fn lyapunov_derivative(spec: &GeneratorSpec, g: &dyn ScalarField, y: &[f64]) -> Result<Option<f64>> {
    let Some(grad) = g.gradient(y) else {
        return Ok(None);
    };
    let mut f = vec![0.0; y.len()];
    spec.drift_into(y, &mut f)?;
    Ok(Some(f.iter().zip(&grad).map(|(a, b)| a * b).sum()))
}

/// Samples `y Γ(y) · ∇g(y)` at seeded uniform points of the simplex.
pub fn lyapunov_check(
    spec: &GeneratorSpec,
    g: &dyn ScalarField,
    samples: usize,
    seed: u64,
) -> Result<LyapunovReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.layout().dim();
    let mut report = LyapunovReport {
        max_value: f64::NEG_INFINITY,
        max_violation: 0.0,
        violating_points: Vec::new(),
        evaluated: 0,
        skipped: 0,
    };
    for _ in 0..samples {
        let y = sample_simplex(&mut rng, d);
        match lyapunov_derivative(spec, g, &y)? {
            None => report.skipped += 1,
            Some(v) => {
                report.evaluated += 1;
                report.max_value = report.max_value.max(v);
                if v > LYAPUNOV_SLACK {
                    report.max_violation = report.max_violation.max(v);
                    report.violating_points.push(y);
                }
            }
        }
    }
    Ok(report)
}

/// One row of [`censored_trajectory_compare`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoredGap {
    pub t: f64,
    /// Level-0 block of `p Γ(p)`.
    pub lhs: Vec<f64>,
    /// `p_0 Ψ_0(p)`.
    pub rhs: Vec<f64>,
    /// `max |lhs - rhs|`.
    pub gap: f64,
    /// Censoring failure at this time, if any.
    pub error: Option<String>,
}

/// Compares `d/dt p_0` with `p_0 Ψ_0(p)` along a trajectory. Purely
/// observational.
pub fn censored_trajectory_compare(spec: &GeneratorSpec, traj: &Trajectory) -> Result<Vec<CensoredGap>> {
    spec.layout().ensure_same(&traj.layout)?;
    let m0 = traj.layout.phases(0);
    let mut rows = Vec::with_capacity(traj.len());
    for (t, p) in traj.times.iter().zip(&traj.states) {
        let lhs = drift(spec, p)?[..m0].to_vec();
        let censored = spec.evaluate_generator(p).and_then(|g| censor(&g, 0));
        let row = match censored {
            Ok(psi0) => {
                let p0 = nalgebra::DVector::from_column_slice(&p.as_slice()[..m0]);
                let rhs: Vec<f64> = psi0.tr_mul(&p0).iter().copied().collect();
                let gap = lhs.iter().zip(&rhs).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                CensoredGap {
                    t: *t,
                    lhs,
                    rhs,
                    gap,
                    error: None,
                }
            }
            Err(e) => CensoredGap {
                t: *t,
                lhs,
                rhs: Vec::new(),
                gap: f64::NAN,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(rows)
}
