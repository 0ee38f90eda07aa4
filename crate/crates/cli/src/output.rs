use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use meanfield::io::{write_trajectory_csv, write_trajectory_jsonl, TrajectoryTable};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{Common, Failure, Format};

pub const FORMAT_VERSION: u32 = 1;

/// Run metadata embedded in every output: the full model text and the
/// resolved arguments, with no timestamps or paths of the output directory.
pub fn metadata(command: &str, common: &Common, model_text: &str, args: &impl Serialize) -> Value {
    json!({
        "format_version": FORMAT_VERSION,
        "tool": concat!("mfnet ", env!("CARGO_PKG_VERSION")),
        "command": command,
        "model_file": common.model.display().to_string(),
        "model_text": model_text,
        "args": args,
    })
}

pub struct Sink {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("cannot write {}: {e}", path.display()))
}

impl Sink {
    pub fn new(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> Result<(PathBuf, BufWriter<File>), Failure> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| write_err(&path, e))?;
        self.written.push(path.clone());
        Ok((path, BufWriter::new(f)))
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        let (path, mut w) = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| write_err(&path, e))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| write_err(&path, e))
    }

    pub fn text(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> meanfield::Result<()>) -> Result<(), Failure> {
        let (path, mut w) = self.create(name)?;
        f(&mut w).map_err(|e| write_err(&path, e))?;
        w.flush().map_err(|e| write_err(&path, e))
    }

    /// `stem.csv` plus a `stem.meta.json` sidecar, or `stem.jsonl` with the
    /// metadata in its header record.
    pub fn trajectory(&mut self, stem: &str, format: Format, table: &TrajectoryTable, meta: Value) -> Result<(), Failure> {
        match format {
            Format::Csv => {
                self.text(&format!("{stem}.csv"), |w| write_trajectory_csv(w, table))?;
                self.json(&format!("{stem}.meta.json"), &meta)
            }
            Format::Jsonl => self.text(&format!("{stem}.jsonl"), |w| write_trajectory_jsonl(w, table, meta)),
        }
    }

    pub fn listing(&self) -> String {
        self.written
            .iter()
            .map(|p| format!("wrote {}", p.display()))
            .collect::<Vec<_>>()
            .join("\n")
    }
}
