//! Plot-ready exports: trajectories as CSV or JSON lines, probability vectors
//! as CSV. Every reader reconstructs the layout from the file alone.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a value
//! read back is bit-identical to the value written.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::meanfield_ode::Trajectory;
use crate::particle_sim::EmpiricalTrajectory;
use crate::state_space::{LevelPhaseLayout, ProbabilityVector};

pub const FORMAT_VERSION: u32 = 1;

/// Shortest round-trip text for `x`, in exponent form for very small or very
/// large magnitudes.
pub fn format_f64(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

/// A time series of vectors on one layout, optionally tagged with the
/// particle count and seed of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub layout: LevelPhaseLayout,
    pub times: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
}

impl From<&Trajectory> for TrajectoryTable {
    fn from(t: &Trajectory) -> Self {
        Self {
            layout: t.layout.clone(),
            times: t.times.clone(),
            rows: t.states.iter().map(|p| p.as_slice().to_vec()).collect(),
            n: None,
            seed: None,
        }
    }
}

impl From<&EmpiricalTrajectory> for TrajectoryTable {
    fn from(t: &EmpiricalTrajectory) -> Self {
        Self {
            layout: t.layout.clone(),
            times: t.sample_times.clone(),
            rows: t.measures.iter().map(|p| p.as_slice().to_vec()).collect(),
            n: Some(t.n),
            seed: Some(t.seed),
        }
    }
}

impl TrajectoryTable {
    /// The stored rows as probability vectors.
    pub fn states(&self) -> Result<Vec<ProbabilityVector>> {
        self.rows
            .iter()
            .map(|r| ProbabilityVector::new(self.layout.clone(), r.clone()))
            .collect()
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io(e.to_string())
}

fn column_names(layout: &LevelPhaseLayout) -> Vec<String> {
    let mut names = Vec::with_capacity(layout.dim());
    for k in 0..=layout.truncation_level() {
        for j in 1..=layout.phases(k) {
            names.push(format!("p_{k}_{j}"));
        }
    }
    names
}

/// Rebuilds the layout from `p_k_j` names in level-phase order.
fn layout_from_names<'a>(names: impl Iterator<Item = &'a str>) -> Result<LevelPhaseLayout> {
    let mut counts: Vec<usize> = Vec::new();
    for name in names {
        let bad = || Error::Io(format!("unexpected column `{name}`"));
        let rest = name.strip_prefix("p_").ok_or_else(bad)?;
        let (k, j) = rest.split_once('_').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        let j: usize = j.parse().map_err(|_| bad())?;
        if k == counts.len() && j == 1 {
            counts.push(1);
        } else if k + 1 == counts.len() && j == counts[k] + 1 {
            counts[k] += 1;
        } else {
            return Err(Error::Io(format!("column `{name}` is out of level-phase order")));
        }
    }
    LevelPhaseLayout::new(counts)
}

/// Header `t[,N,seed],p_0_1,p_0_2,…`, one row per stored time.
pub fn write_trajectory_csv(w: &mut impl Write, table: &TrajectoryTable) -> Result<()> {
    let mut header = vec!["t".to_string()];
    if table.n.is_some() {
        header.push("N".into());
        header.push("seed".into());
    }
    header.extend(column_names(&table.layout));
    writeln!(w, "{}", header.join(",")).map_err(io_err)?;
    for (t, row) in table.times.iter().zip(&table.rows) {
        let mut line = format_f64(*t);
        if let (Some(n), Some(seed)) = (table.n, table.seed) {
            line.push_str(&format!(",{n},{seed}"));
        }
        for v in row {
            line.push(',');
            line.push_str(&format_f64(*v));
        }
        writeln!(w, "{line}").map_err(io_err)?;
    }
    Ok(())
}

pub fn read_trajectory_csv(r: impl BufRead) -> Result<TrajectoryTable> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Io("empty trajectory file".into()))?.map_err(io_err)?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"t") {
        return Err(Error::Io("first column must be `t`".into()));
    }
    let tagged = cols.get(1) == Some(&"N");
    if tagged && cols.get(2) != Some(&"seed") {
        return Err(Error::Io("column `N` must be followed by `seed`".into()));
    }
    let skip = if tagged { 3 } else { 1 };
    let layout = layout_from_names(cols[skip..].iter().copied())?;
    let mut table = TrajectoryTable {
        layout,
        times: Vec::new(),
        rows: Vec::new(),
        n: None,
        seed: None,
    };
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Io(format!("bad value on data row {}", i + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Io(format!("data row {} has {} fields, expected {}", i + 1, fields.len(), cols.len())));
        }
        table.times.push(fields[0].parse().map_err(|_| bad())?);
        if tagged {
            table.n = Some(fields[1].parse().map_err(|_| bad())?);
            table.seed = Some(fields[2].parse().map_err(|_| bad())?);
        }
        table.rows.push(
            fields[skip..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?,
        );
    }
    Ok(table)
}

/// First line of a JSON-lines export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonlHeader {
    pub format_version: u32,
    pub phase_counts: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    /// Caller-provided run metadata.
    #[serde(default)]
    pub meta: Value,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    t: f64,
    p: Vec<f64>,
}

/// A header record followed by one `{"t": …, "p": […]}` record per time.
pub fn write_trajectory_jsonl(w: &mut impl Write, table: &TrajectoryTable, meta: Value) -> Result<()> {
    let header = JsonlHeader {
        format_version: FORMAT_VERSION,
        phase_counts: table.layout.phase_counts().to_vec(),
        n: table.n,
        seed: table.seed,
        meta,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io_err)?;
    for (t, row) in table.times.iter().zip(&table.rows) {
        let rec = JsonlRecord { t: *t, p: row.clone() };
        writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_trajectory_jsonl(r: impl BufRead) -> Result<(JsonlHeader, TrajectoryTable)> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| Error::Io("empty trajectory file".into()))?.map_err(io_err)?;
    let header: JsonlHeader = serde_json::from_str(&first)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Io(format!("unsupported format_version {}", header.format_version)));
    }
    let layout = LevelPhaseLayout::new(header.phase_counts.clone())?;
    let mut table = TrajectoryTable {
        layout,
        times: Vec::new(),
        rows: Vec::new(),
        n: header.n,
        seed: header.seed,
    };
    for line in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line)?;
        if rec.p.len() != table.layout.dim() {
            return Err(Error::Io(format!("record at t = {} has {} entries", rec.t, rec.p.len())));
        }
        table.times.push(rec.t);
        table.rows.push(rec.p);
    }
    Ok((header, table))
}

/// Header `level,phase,p` with 1-based phases.
pub fn write_vector_csv(w: &mut impl Write, p: &ProbabilityVector) -> Result<()> {
    writeln!(w, "level,phase,p").map_err(io_err)?;
    let layout = p.layout();
    for (i, v) in p.as_slice().iter().enumerate() {
        let (k, j) = layout.state_of(i)?;
        writeln!(w, "{k},{j},{}", format_f64(*v)).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_vector_csv(r: impl BufRead) -> Result<ProbabilityVector> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Io("empty vector file".into()))?.map_err(io_err)?;
    if header.trim() != "level,phase,p" {
        return Err(Error::Io("expected header `level,phase,p`".into()));
    }
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Io(format!("bad vector row {}", i + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(bad());
        }
        names.push(format!("p_{}_{}", f[0], f[1]));
        values.push(f[2].parse::<f64>().map_err(|_| bad())?);
    }
    let layout = layout_from_names(names.iter().map(String::as_str))?;
    ProbabilityVector::new(layout, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn table(tagged: bool) -> TrajectoryTable {
        let layout = LevelPhaseLayout::new(vec![1, 2, 2]).unwrap();
        TrajectoryTable {
            layout,
            times: vec![0.0, 0.1, 0.30000000000000004],
            rows: vec![
                vec![1.0, 0.0, 0.0, 0.0, 0.0],
                vec![0.7, 0.1, 0.1, 0.05 - 1e-12, 0.05 + 1e-12],
                vec![1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0],
            ],
            n: tagged.then_some(100),
            seed: tagged.then_some(7),
        }
    }

    #[test]
    fn number_format_round_trips() {
        for x in [0.0, 1.0, 0.1, 1e-5, 9.99e-6, 4.0245584642661925e-16, 1e300, -2.5e-320, f64::MIN_POSITIVE] {
            let s = format_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(format_f64(4.0245584642661925e-16), "4.0245584642661925e-16");
        assert_eq!(format_f64(0.25), "0.25");
    }

    #[test]
    fn csv_round_trip() {
        for tagged in [false, true] {
            let t = table(tagged);
            let mut buf = Vec::new();
            write_trajectory_csv(&mut buf, &t).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            let first = text.lines().next().unwrap();
            if tagged {
                assert_eq!(first, "t,N,seed,p_0_1,p_1_1,p_1_2,p_2_1,p_2_2");
            } else {
                assert_eq!(first, "t,p_0_1,p_1_1,p_1_2,p_2_1,p_2_2");
            }
            assert_eq!(read_trajectory_csv(Cursor::new(buf)).unwrap(), t);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let t = table(true);
        let mut buf = Vec::new();
        write_trajectory_jsonl(&mut buf, &t, serde_json::json!({"command": "simulate"})).unwrap();
        let (h, back) = read_trajectory_jsonl(Cursor::new(buf)).unwrap();
        assert_eq!(back, t);
        assert_eq!(h.format_version, FORMAT_VERSION);
        assert_eq!(h.meta["command"], "simulate");
    }

    #[test]
    fn vector_round_trip() {
        let layout = LevelPhaseLayout::new(vec![2, 1, 3]).unwrap();
        let p = ProbabilityVector::from_weights(layout, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mut buf = Vec::new();
        write_vector_csv(&mut buf, &p).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("level,phase,p\n0,1,"));
        assert_eq!(read_vector_csv(Cursor::new(buf)).unwrap(), p);
    }

    #[test]
    fn malformed_headers() {
        assert!(read_trajectory_csv(Cursor::new("x,p_0_1\n")).is_err());
        assert!(read_trajectory_csv(Cursor::new("t,p_0_2\n")).is_err());
        assert!(read_trajectory_csv(Cursor::new("t,p_0_1,p_2_1\n")).is_err());
        assert!(read_trajectory_csv(Cursor::new("t,p_0_1,p_1_1\n0,1\n")).is_err());
        assert!(read_vector_csv(Cursor::new("a,b\n")).is_err());
    }
}
