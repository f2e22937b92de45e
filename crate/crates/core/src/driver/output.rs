//! CSV tables, evaluation logs and the `AU` cache.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{Evaluation, Model, PrecondSetup};
use crate::precond::{precond_offline, PrecondOffline};
use crate::prior::{LowRankPrior, LowRankSettings};

/// A CSV table with `#`-prefixed provenance lines above the header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub comments: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            comments: Vec::new(),
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    /// Adds one comment line per line of `text`.
    pub fn comment(&mut self, text: &str) {
        self.comments.extend(text.lines().map(str::to_owned));
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Column `name` parsed as numbers; `None` when absent or unparsable.
    pub fn numbers(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.column(name)?;
        self.rows.iter().map(|r| r[c].parse().ok()).collect()
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(String::from_utf8(out).expect("CSV output is UTF-8"))
    }

    fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Config(format!("writing CSV: {e}"));
        for c in &self.comments {
            if c.is_empty() {
                writeln!(w, "#").map_err(io)?;
            } else {
                writeln!(w, "# {c}").map_err(io)?;
            }
        }
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(&self.header)?;
        for r in &self.rows {
            csv.write_record(r)?;
        }
        csv.flush().map_err(io)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
    }
}

/// Shortest decimal that round-trips; identical across runs and platforms.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct LogRecord<'a> {
    run: &'a str,
    index: usize,
    mean_k: f64,
    #[serde(flatten)]
    eval: &'a Evaluation,
}

/// One JSON object per line per evaluation.
pub struct EvalLog {
    path: PathBuf,
    out: BufWriter<File>,
    count: usize,
}

impl EvalLog {
    pub fn create(path: &Path) -> Result<Self> {
        ensure_parent(path)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            count: 0,
        })
    }

    pub fn record(&mut self, run: &str, eval: &Evaluation) -> Result<()> {
        let rec = LogRecord {
            run,
            index: self.count,
            mean_k: eval.mean_k(),
            eval,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Numerical(format!("serializing evaluation: {e}")))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.count += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// File name of a cached `AU` for the given interpolation resolution.
pub fn au_cache_name(tag: &str, settings: &LowRankSettings) -> String {
    format!("au_{tag}_s{}_t{}.mtx", settings.space_p, settings.time_p)
}

/// Low-rank preconditioner setup, reading `AU` from `cache_dir` when a file
/// of the right shape is there and writing it otherwise.
///
/// `U` depends only on the point grids and the node counts, so the file is
/// keyed by those; `tag` must identify the forward map.
pub fn cached_low_rank(
    model: &Model,
    settings: &LowRankSettings,
    clip_tol: f64,
    cache_dir: Option<&Path>,
    tag: &str,
) -> Result<PrecondSetup> {
    let lowrank = LowRankPrior::build(&model.prior, settings)?;
    let path = cache_dir.map(|d| d.join(au_cache_name(tag, settings)));
    let cached = match &path {
        Some(p) if p.exists() => match PrecondOffline::load(p) {
            Ok(off) if off.rows() == model.m() && off.rank() == lowrank.rank() => {
                log::debug!("reusing AU from {}", p.display());
                Some(off)
            }
            Ok(_) => {
                log::warn!("ignoring AU cache {} of the wrong shape", p.display());
                None
            }
            Err(e) => {
                log::warn!("ignoring unreadable AU cache {}: {e}", p.display());
                None
            }
        },
        _ => None,
    };
    let offline = match cached {
        Some(off) => off,
        None => {
            let off = precond_offline(model.a.as_ref(), &lowrank.factor())?;
            if let Some(p) = &path {
                ensure_parent(p)?;
                off.save(p)?;
            }
            off
        }
    };
    Ok(PrecondSetup::LowRank {
        lowrank: Arc::new(lowrank),
        offline: Arc::new(offline),
        clip_tol,
    })
}
