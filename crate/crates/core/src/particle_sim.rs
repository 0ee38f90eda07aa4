//! Exact event-driven simulation of `N` interacting particles whose jump
//! rates are `Γ` evaluated at the current empirical measure.
//!
//! # Random streams
//!
//! Every run draws from `ChaCha8Rng::seed_from_u64(seed)` with
//! `set_stream(stream)`. A plain [`simulate`] uses stream 0; replication `r`
//! of a [`chaos_convergence_report`] uses stream `r` for every `N`. A run
//! first draws the `N` initial states i.i.d. from `q`, then per event one
//! exponential waiting time, one uniform for the transition and one uniform
//! for the particle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield_ode::{integrate, IntegratorConfig};
use crate::model::{Features, GeneratorSpec};
use crate::state_space::{l1_slices, LevelPhaseLayout, ProbabilityVector};

/// Generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One jump, as seen by an [`EventObserver`].
#[derive(Debug, Clone, Copy)]
pub struct Event<'a> {
    pub time: f64,
    pub particle: usize,
    pub from: usize,
    pub to: usize,
    /// Per-particle rate of `from -> to` used for the draw.
    pub rate: f64,
    /// Empirical measure just before the jump.
    pub empirical: &'a [f64],
}

pub trait EventObserver {
    fn on_event(&mut self, event: &Event<'_>);
}

impl EventObserver for () {
    fn on_event(&mut self, _: &Event<'_>) {}
}

/// The `N`-particle system.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    layout: LevelPhaseLayout,
    /// Flat state of every particle.
    states: Vec<usize>,
    /// Particles in each state, with each particle's slot in its list.
    members: Vec<Vec<usize>>,
    slot: Vec<usize>,
    clock: f64,
    jump_count: u64,
    rng: ChaCha8Rng,
}

impl ParticleSystem {
    /// Places particle `i` in flat state `states[i]`.
    pub fn from_states(layout: LevelPhaseLayout, states: Vec<usize>, rng: ChaCha8Rng) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidArgument("need at least one particle".into()));
        }
        let d = layout.dim();
        let mut members = vec![Vec::new(); d];
        let mut slot = vec![0; states.len()];
        for (i, &s) in states.iter().enumerate() {
            if s >= d {
                return Err(Error::InvalidArgument(format!("particle {i} is in state {s} outside the layout")));
            }
            slot[i] = members[s].len();
            members[s].push(i);
        }
        Ok(Self {
            layout,
            states,
            members,
            slot,
            clock: 0.0,
            jump_count: 0,
            rng,
        })
    }

    /// Draws `n` states i.i.d. from `q` with `rng`, then keeps using it.
    pub fn sample(q: &ProbabilityVector, n: usize, mut rng: ChaCha8Rng) -> Result<Self> {
        let cdf: Vec<f64> = q
            .as_slice()
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect();
        let states = (0..n).map(|_| pick_cdf(&cdf, rng.random::<f64>())).collect();
        Self::from_states(q.layout().clone(), states, rng)
    }

    pub fn layout(&self) -> &LevelPhaseLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn jump_count(&self) -> u64 {
        self.jump_count
    }

    pub fn counts(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// `μᴺ = (1/N) Σ δ_{X_i}`.
    pub fn empirical(&self) -> Vec<f64> {
        let n = self.states.len() as f64;
        self.members.iter().map(|m| m.len() as f64 / n).collect()
    }

    pub fn empirical_measure(&self) -> Result<ProbabilityVector> {
        ProbabilityVector::new(self.layout.clone(), self.empirical())
    }

    fn move_particle(&mut self, particle: usize, to: usize) {
        let from = self.states[particle];
        let pos = self.slot[particle];
        let list = &mut self.members[from];
        list.swap_remove(pos);
        if let Some(&moved) = list.get(pos) {
            self.slot[moved] = pos;
        }
        self.slot[particle] = self.members[to].len();
        self.members[to].push(particle);
        self.states[particle] = to;
    }

    fn dump(&self) -> String {
        let occupied: Vec<String> = self
            .members
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty())
            .map(|(s, m)| {
                let (l, p) = self.layout.state_of(s).unwrap_or((usize::MAX, 0));
                format!("({l},{p}):{}", m.len())
            })
            .collect();
        format!("occupancy {}", occupied.join(" "))
    }

    /// Runs until `until` or until no jump is possible; returns `false` in
    /// the latter case (the clock is then set to `until`).
    pub fn advance(&mut self, spec: &GeneratorSpec, until: f64, observer: &mut dyn EventObserver) -> Result<bool> {
        let d = self.layout.dim();
        let n = self.states.len() as f64;
        let mut x = self.empirical();
        let mut buf: Vec<(usize, f64)> = Vec::new();
        let mut exits = vec![0.0; d];
        loop {
            // exit rates of every occupied state at the current measure
            let f = Features::new(&self.layout, &x);
            let mut total = 0.0;
            for s in 0..d {
                exits[s] = 0.0;
                if self.members[s].is_empty() {
                    continue;
                }
                buf.clear();
                spec.out_rates(&f, s, &mut buf);
                let mut e = 0.0;
                for &(to, rate) in &buf {
                    if !(rate >= 0.0 && rate.is_finite()) {
                        return Err(Error::Simulation {
                            time: self.clock,
                            message: format!(
                                "rate {rate} from state {s} to {to}; {}",
                                self.dump()
                            ),
                        });
                    }
                    e += rate;
                }
                exits[s] = e;
                total += self.members[s].len() as f64 * e;
            }
            if !total.is_finite() {
                return Err(Error::Simulation {
                    time: self.clock,
                    message: format!("total event rate overflowed; {}", self.dump()),
                });
            }
            if total <= 0.0 {
                self.clock = self.clock.max(until);
                return Ok(false);
            }
            let wait = -(1.0 - self.rng.random::<f64>()).ln() / total;
            if self.clock + wait > until {
                // memorylessness lets the next call redraw from `until`
                self.clock = until;
                return Ok(true);
            }
            self.clock += wait;
            let mut u = self.rng.random::<f64>() * total;
            let mut from = usize::MAX;
            for s in 0..d {
                let w = self.members[s].len() as f64 * exits[s];
                if w > 0.0 {
                    from = s;
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            // position within the chosen state's exit rate
            let count = self.members[from].len() as f64;
            let mut v = (u / count).min(exits[from]);
            buf.clear();
            spec.out_rates(&f, from, &mut buf);
            let mut to = buf.last().map(|e| e.0).unwrap_or(from);
            for &(t, rate) in &buf {
                if rate > 0.0 {
                    to = t;
                    if v < rate {
                        break;
                    }
                    v -= rate;
                }
            }
            let rate: f64 = buf.iter().filter(|e| e.0 == to).map(|e| e.1).sum();
            let list = &self.members[from];
            let particle = list[self.rng.random_range(0..list.len())];
            observer.on_event(&Event {
                time: self.clock,
                particle,
                from,
                to,
                rate,
                empirical: &x,
            });
            self.move_particle(particle, to);
            self.jump_count += 1;
            x[from] = self.members[from].len() as f64 / n;
            x[to] = self.members[to].len() as f64 / n;
        }
    }
}

fn pick_cdf(cdf: &[f64], u: f64) -> usize {
    let total = *cdf.last().unwrap();
    let target = u * total;
    let i = cdf.partition_point(|c| *c <= target);
    // skip zero-mass states at the top end
    let mut i = i.min(cdf.len() - 1);
    while i > 0 && cdf[i] == cdf[i - 1] {
        i -= 1;
    }
    i
}

/// Empirical measures on a sample grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalTrajectory {
    pub layout: LevelPhaseLayout,
    pub sample_times: Vec<f64>,
    pub measures: Vec<ProbabilityVector>,
    pub n: usize,
    pub seed: u64,
    pub stream: u64,
    pub jump_count: u64,
}

/// `0, dt, 2dt, …` up to and including `t_end`.
pub fn sample_grid(t_end: f64, dt: f64) -> Result<Vec<f64>> {
    if !(t_end > 0.0 && t_end.is_finite() && dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument("t_end and sample_dt must be positive".into()));
    }
    let mut grid = vec![0.0];
    let mut i = 1usize;
    loop {
        let t = i as f64 * dt;
        if t >= t_end * (1.0 - 1e-12) {
            grid.push(t_end);
            return Ok(grid);
        }
        grid.push(t);
        i += 1;
    }
}

fn record(
    mut sys: ParticleSystem,
    spec: &GeneratorSpec,
    grid: &[f64],
    seed: u64,
    stream: u64,
    observer: &mut dyn EventObserver,
) -> Result<EmpiricalTrajectory> {
    let mut measures = Vec::with_capacity(grid.len());
    measures.push(sys.empirical_measure()?);
    for &t in &grid[1..] {
        sys.advance(spec, t, observer)?;
        measures.push(sys.empirical_measure()?);
    }
    Ok(EmpiricalTrajectory {
        layout: sys.layout.clone(),
        sample_times: grid.to_vec(),
        measures,
        n: sys.len(),
        seed,
        stream,
        jump_count: sys.jump_count,
    })
}

fn check_inputs(spec: &GeneratorSpec, n: usize, q: &ProbabilityVector) -> Result<()> {
    spec.layout().ensure_same(q.layout())?;
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    Ok(())
}

/// Simulates `N` particles started i.i.d. from `q` on stream 0.
pub fn simulate(
    spec: &GeneratorSpec,
    n: usize,
    q: &ProbabilityVector,
    t_end: f64,
    sample_dt: f64,
    seed: u64,
) -> Result<EmpiricalTrajectory> {
    simulate_observed(spec, n, q, t_end, sample_dt, seed, 0, &mut ())
}

/// [`simulate`] on an explicit stream, reporting every jump to `observer`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_observed(
    spec: &GeneratorSpec,
    n: usize,
    q: &ProbabilityVector,
    t_end: f64,
    sample_dt: f64,
    seed: u64,
    stream: u64,
    observer: &mut dyn EventObserver,
) -> Result<EmpiricalTrajectory> {
    check_inputs(spec, n, q)?;
    let grid = sample_grid(t_end, sample_dt)?;
    let sys = ParticleSystem::sample(q, n, stream_rng(seed, stream))?;
    record(sys, spec, &grid, seed, stream, observer)
}

/// One row of a [`ChaosReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosRow {
    pub n: usize,
    pub mean_sup_l1_error: f64,
    /// Sample standard deviation over replications.
    pub std: f64,
    pub standard_error: f64,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosReport {
    pub rows: Vec<ChaosRow>,
    pub replications: usize,
    pub seed: u64,
    /// Means are nonincreasing in `N` up to two pooled standard errors.
    pub nonincreasing_within_2se: bool,
}

/// `sqrt(se_a² + se_b²)`.
pub fn pooled_standard_error(a: &ChaosRow, b: &ChaosRow) -> f64 {
    (a.standard_error.powi(2) + b.standard_error.powi(2)).sqrt()
}

/// `sup_t l1(μᴺ(t), p(t))` over matching sample grids.
pub fn sup_l1_error(sim: &EmpiricalTrajectory, ode: &[ProbabilityVector]) -> f64 {
    sim.measures
        .iter()
        .zip(ode)
        .map(|(a, b)| l1_slices(a.as_slice(), b.as_slice()))
        .fold(0.0, f64::max)
}

/// Mean and spread of `sup_t l1(μᴺ(t), p(t))` for each `N`, against the ODE
/// solution on the same grid. Replications run in parallel.
#[allow(clippy::too_many_arguments)]
pub fn chaos_convergence_report(
    spec: &GeneratorSpec,
    n_list: &[usize],
    q: &ProbabilityVector,
    t_end: f64,
    sample_dt: f64,
    replications: usize,
    seed: u64,
) -> Result<ChaosReport> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("N list must be nonempty and increasing".into()));
    }
    if replications < 2 {
        return Err(Error::InvalidArgument("need at least two replications".into()));
    }
    for &n in n_list {
        check_inputs(spec, n, q)?;
    }
    let grid = sample_grid(t_end, sample_dt)?;
    let ode = integrate(spec, q, t_end, &IntegratorConfig::default().with_output_dt(sample_dt))?;
    if ode.times.len() != grid.len() {
        return Err(Error::Integration {
            time: t_end,
            message: "ODE grid does not match the sample grid".into(),
        });
    }
    let jobs: Vec<(usize, u64)> = n_list
        .iter()
        .flat_map(|&n| (0..replications as u64).map(move |r| (n, r)))
        .collect();
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|&(n, r)| {
            let sys = ParticleSystem::sample(q, n, stream_rng(seed, r))?;
            let sim = record(sys, spec, &grid, seed, r, &mut ())?;
            Ok(sup_l1_error(&sim, &ode.states))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<ChaosRow> = n_list
        .iter()
        .zip(errors.chunks(replications))
        .map(|(&n, e)| {
            let k = e.len() as f64;
            let mean = e.iter().sum::<f64>() / k;
            let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            ChaosRow {
                n,
                mean_sup_l1_error: mean,
                std: var.sqrt(),
                standard_error: (var / k).sqrt(),
                errors: e.to_vec(),
            }
        })
        .collect();
    let nonincreasing_within_2se = rows
        .windows(2)
        .all(|w| w[1].mean_sup_l1_error <= w[0].mean_sup_l1_error + 2.0 * pooled_standard_error(&w[0], &w[1]));
    Ok(ChaosReport {
        rows,
        replications,
        seed,
        nonincreasing_within_2se,
    })
}

/// Output of [`exchangeability_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeabilityProbe {
    pub original: EmpiricalTrajectory,
    pub permuted: EmpiricalTrajectory,
}

/// Stream used for the permuted run: FNV-1a of the permutation with the top
/// bit set, so it never meets a replication stream.
pub fn permutation_stream(permutation: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &p in permutation {
        for b in (p as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h | (1 << 63)
}

/// Runs the system twice from one i.i.d. draw of initial states: as drawn,
/// and with particle `i` started where particle `permutation[i]` was drawn
/// (0-based). The identity permutation reuses the original random stream and
/// is bit-identical; any other permutation draws its events from
/// [`permutation_stream`].
pub fn exchangeability_probe(
    spec: &GeneratorSpec,
    n: usize,
    q: &ProbabilityVector,
    t_end: f64,
    sample_dt: f64,
    seed: u64,
    permutation: &[usize],
) -> Result<ExchangeabilityProbe> {
    check_inputs(spec, n, q)?;
    if permutation.len() != n {
        return Err(Error::InvalidArgument(format!(
            "permutation has {} entries for {n} particles",
            permutation.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in permutation {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument("permutation is not a bijection".into()));
        }
    }
    let grid = sample_grid(t_end, sample_dt)?;
    let sys = ParticleSystem::sample(q, n, stream_rng(seed, 0))?;
    let identity = permutation.iter().enumerate().all(|(i, p)| i == *p);
    let states: Vec<usize> = permutation.iter().map(|&p| sys.states[p]).collect();
    let (rng, stream) = if identity {
        (sys.rng.clone(), 0)
    } else {
        let s = permutation_stream(permutation);
        (stream_rng(seed, s), s)
    };
    let permuted_sys = ParticleSystem::from_states(sys.layout.clone(), states, rng)?;
    let original = record(sys, spec, &grid, seed, 0, &mut ())?;
    let permuted = record(permuted_sys, spec, &grid, seed, stream, &mut ())?;
    Ok(ExchangeabilityProbe { original, permuted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_space::BlockGenerator;
    use nalgebra::DMatrix;

    fn two_state(rate: f64) -> GeneratorSpec {
        let layout = LevelPhaseLayout::uniform(1, 1).unwrap();
        let g = BlockGenerator::new(layout, DMatrix::from_row_slice(2, 2, &[-rate, rate, rate, -rate])).unwrap();
        GeneratorSpec::linear(&g)
    }

    #[test]
    fn frozen_chain_never_jumps() {
        let spec = two_state(0.0);
        let q = ProbabilityVector::new(spec.layout().clone(), vec![0.3, 0.7]).unwrap();
        let tr = simulate(&spec, 50, &q, 10.0, 1.0, 4).unwrap();
        assert_eq!(tr.jump_count, 0);
        assert!(tr.measures.iter().all(|m| m == &tr.measures[0]));
        assert_eq!(tr.sample_times.len(), 11);
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = two_state(1.0);
        let q = ProbabilityVector::new(spec.layout().clone(), vec![0.5, 0.5]).unwrap();
        let a = simulate(&spec, 200, &q, 3.0, 0.5, 9).unwrap();
        let b = simulate(&spec, 200, &q, 3.0, 0.5, 9).unwrap();
        assert_eq!(a, b);
        let c = simulate(&spec, 200, &q, 3.0, 0.5, 10).unwrap();
        assert_ne!(a.measures, c.measures);
    }

    #[test]
    fn measures_are_multiples_of_one_over_n() {
        let spec = two_state(1.0);
        let q = ProbabilityVector::new(spec.layout().clone(), vec![0.5, 0.5]).unwrap();
        let tr = simulate(&spec, 7, &q, 2.0, 0.25, 1).unwrap();
        for m in &tr.measures {
            for v in m.as_slice() {
                let k = v * 7.0;
                assert!((k - k.round()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moves_keep_membership_consistent() {
        let layout = LevelPhaseLayout::uniform(2, 1).unwrap();
        let mut sys = ParticleSystem::from_states(layout, vec![0, 0, 1, 2, 0], stream_rng(1, 0)).unwrap();
        sys.move_particle(0, 2);
        sys.move_particle(4, 1);
        assert_eq!(sys.states(), &[2, 0, 1, 2, 1]);
        assert_eq!(sys.counts(), vec![1, 2, 2]);
        for (s, list) in sys.members.iter().enumerate() {
            for (pos, &p) in list.iter().enumerate() {
                assert_eq!(sys.states[p], s);
                assert_eq!(sys.slot[p], pos);
            }
        }
    }

    #[test]
    fn identity_permutation_is_bit_identical() {
        let spec = two_state(1.0);
        let q = ProbabilityVector::new(spec.layout().clone(), vec![0.5, 0.5]).unwrap();
        let p = exchangeability_probe(&spec, 10, &q, 2.0, 0.5, 3, &(0..10).collect::<Vec<_>>()).unwrap();
        assert_eq!(p.original.measures, p.permuted.measures);
        let one = exchangeability_probe(&spec, 1, &q, 2.0, 0.5, 3, &[0]).unwrap();
        assert_eq!(one.original.measures, one.permuted.measures);
        assert!(exchangeability_probe(&spec, 3, &q, 2.0, 0.5, 3, &[0, 0, 1]).is_err());
    }

    #[test]
    fn sample_grid_includes_end() {
        assert_eq!(sample_grid(1.0, 0.25).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(sample_grid(1.1, 0.5).unwrap(), vec![0.0, 0.5, 1.0, 1.1]);
        assert!(sample_grid(0.0, 0.5).is_err());
    }

    #[test]
    fn pick_cdf_skips_empty_states() {
        let cdf = [0.5, 0.5, 1.0, 1.0];
        assert_eq!(pick_cdf(&cdf, 0.0), 0);
        assert_eq!(pick_cdf(&cdf, 0.7), 2);
        assert_eq!(pick_cdf(&cdf, 0.999_999), 2);
    }
}
