use std::fs;
use std::io::{BufReader, Cursor, Write};

use meanfield::fixed_point::{
    algorithm_i_with, basin_scan, certify_default, default_recipes, initial_vector, metastability_report,
    AlgorithmOptions, CommutationConfig, LimitKind, Recipe, ScanConfig,
};
use meanfield::io::{format_f64 as num, read_trajectory_csv, read_vector_csv, TrajectoryTable};
use meanfield::matrix_analytic::{qbd_mean_drift, reconstruct, rg_factorize, stationary_from_rg};
use meanfield::meanfield_ode::{
    censored_trajectory_compare, entropy_decay_report, integrate as integrate_ode, lyapunov_check, IntegratorConfig,
    RelativeEntropyTo,
};
use meanfield::model::{lipschitz_estimate, Family, GeneratorSpec};
use meanfield::particle_sim::{chaos_convergence_report, simulate as simulate_particles};
use meanfield::state_space::ProbabilityVector;
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::output::{metadata, Sink};
use crate::{
    CheckArgs, Common, CompareArgs, Failure, FactorizeArgs, IntegrateArgs, MethodArg, OdeArgs, ScanArgs, SimulateArgs,
    SolveArgs,
};

type CmdResult = Result<String, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn compute(e: impl std::fmt::Display) -> Failure {
    Failure::Compute(e.to_string())
}

fn load(common: &Common) -> Result<(GeneratorSpec, String), Failure> {
    let text = fs::read_to_string(&common.model)
        .map_err(|e| usage(format!("cannot read model {}: {e}", common.model.display())))?;
    let spec = GeneratorSpec::from_config_str(&text).map_err(|e| usage(format!("{}: {e}", common.model.display())))?;
    Ok((spec, text))
}

fn positive(name: &str, v: f64) -> Result<(), Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("--{name} must be positive, got {v}")))
    }
}

/// A recipe, or `file:PATH` holding a vector CSV, a trajectory CSV (last
/// row is used) or a `solve` report.
fn resolve_measure(spec: &GeneratorSpec, arg: &str) -> Result<ProbabilityVector, Failure> {
    let layout = spec.layout();
    let p = match arg.strip_prefix("file:") {
        None => {
            let recipe: Recipe = arg.parse().map_err(usage)?;
            initial_vector(&recipe, layout).map_err(usage)?
        }
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {path}: {e}")))?;
            let p = if text.trim_start().starts_with('{') {
                let v: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{path}: {e}")))?;
                let pi = v.get("report").and_then(|r| r.get("pi")).cloned().unwrap_or(v);
                serde_json::from_value::<ProbabilityVector>(pi).map_err(|e| usage(format!("{path}: {e}")))?
            } else if text.starts_with("level,") {
                read_vector_csv(BufReader::new(Cursor::new(text))).map_err(|e| usage(format!("{path}: {e}")))?
            } else {
                let t = read_trajectory_csv(BufReader::new(Cursor::new(text))).map_err(|e| usage(format!("{path}: {e}")))?;
                let last = t.rows.last().ok_or_else(|| usage(format!("{path}: no data rows")))?;
                ProbabilityVector::from_weights(t.layout.clone(), last.clone()).map_err(usage)?
            };
            layout.ensure_same(p.layout()).map_err(|e| usage(format!("{path}: {e}")))?;
            p
        }
    };
    Ok(p)
}

fn ode_config(a: &OdeArgs) -> Result<IntegratorConfig, Failure> {
    match a.method {
        MethodArg::Rk4 => {
            positive("step", a.step)?;
            Ok(IntegratorConfig::rk4(a.step))
        }
        MethodArg::Dopri => {
            positive("abs-tol", a.abs_tol)?;
            positive("rel-tol", a.rel_tol)?;
            Ok(IntegratorConfig::adaptive(a.abs_tol, a.rel_tol))
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn solve(a: &SolveArgs) -> CmdResult {
    positive("eps", a.eps)?;
    if !(a.damping > 0.0 && a.damping <= 1.0) {
        return Err(usage("--damping must lie in (0, 1]"));
    }
    let (spec, text) = load(&a.common)?;
    let q = resolve_measure(&spec, &a.init)?;
    let opts = AlgorithmOptions {
        damping: a.damping,
        ..AlgorithmOptions::default()
    };
    let report = algorithm_i_with(&spec, &q, a.eps, a.max_iter, &opts).map_err(compute)?;
    let mut sink = Sink::new(&a.common.out)?;
    sink.json("solve.json", &json!({ "meta": metadata("solve", &a.common, &text, a), "report": report }))?;
    sink.text("pi.csv", |w| meanfield::io::write_vector_csv(w, &report.pi))?;
    let summary = format!(
        "{}\nconverged = {} after {} iterations, residual {:e}, certificate {}",
        sink.listing(),
        report.converged,
        report.iterations,
        report.residual,
        if report.certificate.pass { "passed" } else { "failed" }
    );
    for note in &report.notes {
        eprintln!("note: {note}");
    }
    if report.converged && report.certificate.pass {
        Ok(summary)
    } else {
        println!("{summary}");
        Err(compute("no certified fixed point (report written)"))
    }
}

pub fn integrate(a: &IntegrateArgs) -> CmdResult {
    positive("T", a.t_end)?;
    positive("dt", a.dt)?;
    let cfg = ode_config(&a.ode)?.with_output_dt(a.dt);
    let (spec, text) = load(&a.common)?;
    let q = resolve_measure(&spec, &a.init)?;
    let traj = integrate_ode(&spec, &q, a.t_end, &cfg).map_err(compute)?;
    let mut meta = metadata("integrate", &a.common, &text, a);
    meta["stats"] = serde_json::to_value(traj.stats).map_err(compute)?;
    let mut sink = Sink::new(&a.common.out)?;
    sink.trajectory("trajectory", a.common.format, &TrajectoryTable::from(&traj), meta)?;
    Ok(format!("{}\n{} states up to t = {}", sink.listing(), traj.len(), traj.final_time()))
}

pub fn simulate(a: &SimulateArgs) -> CmdResult {
    positive("T", a.t_end)?;
    positive("dt", a.dt)?;
    if a.n == 0 {
        return Err(usage("--N must be at least 1"));
    }
    let (spec, text) = load(&a.common)?;
    let q = resolve_measure(&spec, &a.init)?;
    let traj = simulate_particles(&spec, a.n, &q, a.t_end, a.dt, a.seed).map_err(compute)?;
    let mut meta = metadata("simulate", &a.common, &text, a);
    meta["jump_count"] = json!(traj.jump_count);
    meta["stream"] = json!(traj.stream);
    let mut sink = Sink::new(&a.common.out)?;
    sink.trajectory("empirical", a.common.format, &TrajectoryTable::from(&traj), meta)?;
    if !a.chaos_n.is_empty() {
        let report = chaos_convergence_report(&spec, &a.chaos_n, &q, a.t_end, a.dt, a.replications, a.seed)
            .map_err(compute)?;
        sink.json("chaos.json", &json!({ "meta": metadata("simulate", &a.common, &text, a), "report": report }))?;
    }
    Ok(format!("{}\n{} jumps", sink.listing(), traj.jump_count))
}

fn scan_seeds(spec: &GeneratorSpec, arg: &str) -> Result<Vec<(String, ProbabilityVector)>, Failure> {
    let recipes: Vec<String> = if arg == "recipes:default20" {
        default_recipes().iter().map(Recipe::to_string).collect()
    } else {
        arg.split(';').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
    };
    if recipes.is_empty() {
        return Err(usage("--seeds is empty"));
    }
    recipes
        .into_iter()
        .map(|r| Ok((r.clone(), resolve_measure(spec, &r)?)))
        .collect()
}

pub fn scan(a: &ScanArgs) -> CmdResult {
    let (spec, text) = load(&a.common)?;
    let seeds = scan_seeds(&spec, &a.seeds)?;
    let cfg = ScanConfig {
        t_transient: a.t_transient,
        t_window: a.t_window,
        merge_tol: a.merge_tol,
        epsilon: a.eps,
        perturbations: a.perturbations,
        seed: a.seed,
        ..ScanConfig::default()
    };
    let report = basin_scan(&spec, &seeds, &cfg).map_err(|e| match e {
        meanfield::Error::InvalidArgument(_) => usage(e),
        e => compute(e),
    })?;
    let commutation = CommutationConfig {
        seed: a.seed,
        ..CommutationConfig::default()
    };
    let meta_summary = metastability_report(&spec, &report, a.commutation.then_some(&commutation)).map_err(compute)?;
    let meta = metadata("scan", &a.common, &text, a);
    let mut sink = Sink::new(&a.common.out)?;
    sink.json("scan.json", &json!({ "meta": meta, "report": report }))?;
    sink.json("metastability.json", &json!({ "meta": meta, "report": meta_summary }))?;
    sink.text("scan_limits.csv", |w| {
        let io = |e: std::io::Error| meanfield::Error::Io(e.to_string());
        writeln!(w, "limit,kind,stability,drift_norm,returned,perturbations,seed_count,tail_1").map_err(io)?;
        for (i, l) in report.limits.iter().enumerate() {
            let kind = serde_json::to_value(l.kind)?;
            let stability = serde_json::to_value(l.stability)?;
            writeln!(
                w,
                "{i},{},{},{},{},{},{},{}",
                kind.as_str().unwrap_or_default(),
                stability.as_str().unwrap_or_default(),
                num(l.drift_norm),
                l.returned,
                l.perturbations,
                l.seeds.len(),
                num(l.point.tail_mass(1)?)
            )
            .map_err(io)?;
        }
        Ok(())
    })?;
    let fixed = report.limits.iter().filter(|l| l.kind == LimitKind::FixedPoint).count();
    Ok(format!(
        "{}\n{} limits ({} fixed points, {} locally stable), metastable = {}",
        sink.listing(),
        report.limits.len(),
        fixed,
        meta_summary.count_stable,
        report.metastable
    ))
}

pub fn factorize(a: &FactorizeArgs) -> CmdResult {
    let (spec, text) = load(&a.common)?;
    let p = resolve_measure(&spec, &a.at)?;
    let gamma = spec.evaluate_generator(&p).map_err(compute)?;
    let factors = rg_factorize(&gamma).map_err(compute)?;
    let error = (reconstruct(&factors).matrix() - gamma.matrix()).amax();
    let pi = stationary_from_rg(&factors).map_err(compute)?;
    let layout = factors.layout();
    let psi: Vec<Vec<Vec<f64>>> = (0..=layout.truncation_level()).map(|n| matrix_rows(factors.psi(n))).collect();
    let dump = json!({
        "meta": metadata("factorize", &a.common, &text, a),
        "phase_counts": layout.phase_counts(),
        "r_upper": matrix_rows(factors.r_upper()),
        "psi": psi,
        "g_lower": matrix_rows(factors.g_lower()),
        "reconstruction_error": error,
        "stationary": pi.as_slice(),
    });
    let mut sink = Sink::new(&a.common.out)?;
    sink.json("factors.json", &dump)?;
    Ok(format!("{}\nreconstruction error {error:e}", sink.listing()))
}

pub fn check(a: &CheckArgs) -> CmdResult {
    let (spec, text) = load(&a.common)?;
    let p = resolve_measure(&spec, &a.at)?;
    let is_qbd = matches!(spec.family(), Family::Qbd(_));
    let linear = spec.is_linear();
    let all = !(a.certify || a.mean_drift || a.lipschitz.is_some() || a.entropy || a.lyapunov.is_some());
    let mut out = json!({ "meta": metadata("check", &a.common, &text, a) });
    let mut lines = Vec::new();
    let mut sink = Sink::new(&a.common.out)?;

    if all || a.certify {
        let c = certify_default(&spec, &p);
        lines.push(format!("certificate pass = {}", c.pass));
        out["certificate"] = serde_json::to_value(c).map_err(compute)?;
    }
    if a.mean_drift || (all && is_qbd) {
        if !is_qbd {
            return Err(usage("--mean-drift needs a qbd model"));
        }
        let d = qbd_mean_drift(&spec, &p).map_err(compute)?;
        lines.push(format!("mean drift: stable = {}, up {} vs down {}", d.stable, d.up_rate, d.down_rate));
        out["mean_drift"] = serde_json::to_value(d).map_err(compute)?;
    }
    if all || a.lipschitz.is_some() {
        let samples = a.lipschitz.unwrap_or(200);
        let l = lipschitz_estimate(&spec, samples, a.seed).map_err(usage)?;
        lines.push(format!("Lipschitz estimate {l}"));
        out["lipschitz"] = json!({ "samples": samples, "seed": a.seed, "estimate": l });
    }
    if a.entropy || (all && linear) {
        if !linear {
            return Err(usage("--entropy needs a linear model"));
        }
        positive("T", a.t_end)?;
        positive("dt", a.dt)?;
        let q = match &a.entropy_q {
            Some(arg) => resolve_measure(&spec, arg)?,
            None => ProbabilityVector::from_weights(spec.layout().clone(), vec![1.0; spec.layout().dim()]).map_err(usage)?,
        };
        let cfg = IntegratorConfig::default().with_output_dt(a.dt);
        let pt = integrate_ode(&spec, &p, a.t_end, &cfg).map_err(compute)?;
        let qt = integrate_ode(&spec, &q, a.t_end, &cfg).map_err(compute)?;
        let rows = entropy_decay_report(&spec, &pt, &qt).map_err(compute)?;
        let positive_rhs = rows.iter().filter(|r| r.dr_dt_formula > 0.0).count();
        lines.push(format!("entropy decay: {} grid points, {positive_rhs} with positive formula value", rows.len()));
        out["entropy"] = json!({ "points": rows.len(), "positive_formula_points": positive_rhs, "file": "entropy.csv" });
        sink.text("entropy.csv", |w| {
            let io = |e: std::io::Error| meanfield::Error::Io(e.to_string());
            writeln!(w, "t,r,dr_dt_numeric,dr_dt_formula").map_err(io)?;
            for r in &rows {
                writeln!(w, "{},{},{},{}", num(r.t), num(r.r_value), num(r.dr_dt_numeric), num(r.dr_dt_formula)).map_err(io)?;
            }
            Ok(())
        })?;
    }
    if a.lyapunov.is_some() || (all && linear) {
        if !linear {
            return Err(usage("--lyapunov needs a linear model"));
        }
        let gamma = spec.evaluate_generator(&p).map_err(compute)?;
        let pi = stationary_from_rg(&rg_factorize(&gamma).map_err(compute)?).map_err(compute)?;
        let samples = a.lyapunov.unwrap_or(200);
        let rep = lyapunov_check(&spec, &RelativeEntropyTo(pi), samples, a.seed).map_err(compute)?;
        lines.push(format!("Lyapunov: max derivative {}, violations {}", rep.max_value, rep.violating_points.len()));
        out["lyapunov"] = serde_json::to_value(rep).map_err(compute)?;
    }
    sink.json("check.json", &out)?;
    Ok(format!("{}\n{}", sink.listing(), lines.join("\n")))
}

pub fn compare_censored(a: &CompareArgs) -> CmdResult {
    positive("T", a.t_end)?;
    positive("dt", a.dt)?;
    let (spec, text) = load(&a.common)?;
    let q = resolve_measure(&spec, &a.init)?;
    let traj = integrate_ode(&spec, &q, a.t_end, &IntegratorConfig::default().with_output_dt(a.dt)).map_err(compute)?;
    let rows = censored_trajectory_compare(&spec, &traj).map_err(compute)?;
    let m0 = spec.layout().phases(0);
    let mut sink = Sink::new(&a.common.out)?;
    sink.text("censored_gap.csv", |w| {
        let io = |e: std::io::Error| meanfield::Error::Io(e.to_string());
        let mut header = vec!["t".to_string(), "gap".to_string()];
        header.extend((1..=m0).map(|j| format!("lhs_{j}")));
        header.extend((1..=m0).map(|j| format!("rhs_{j}")));
        header.push("error".into());
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for r in &rows {
            let mut f = vec![num(r.t), num(r.gap)];
            f.extend(r.lhs.iter().map(|v| num(*v)));
            f.extend(r.rhs.iter().map(|v| num(*v)));
            if f.len() < 2 + 2 * m0 {
                f.resize(2 + 2 * m0, String::new());
            }
            f.push(r.error.clone().unwrap_or_default().replace(',', ";"));
            writeln!(w, "{}", f.join(",")).map_err(io)?;
        }
        Ok(())
    })?;
    sink.json("censored_gap.meta.json", &metadata("compare-censored", &a.common, &text, a))?;
    let worst = rows.iter().map(|r| r.gap).fold(0.0, f64::max);
    Ok(format!("{}\nlargest gap {worst:e}", sink.listing()))
}
