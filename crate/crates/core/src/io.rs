//! CSV tables, atomic file output and run manifests.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{energy, field, PhasePoint};
use crate::integrate::Trajectory;
use crate::model::ModelParams;
use crate::nplayer::EmpiricalFlow;
use crate::nstate::NStateFlow;
use crate::value::ValueFunction;
use crate::Result;

/// A header plus rows of optional floats; `None` is written as an empty cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

/// 17 significant digits, round-trips every f64.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Option<f64>>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn push_values(&mut self, row: &[f64]) {
        self.push(row.iter().map(|&x| Some(x)).collect());
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.map(format_float).unwrap_or_default()))?;
        }
        w.flush()?;
        w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// Parses a table written by [`Table::write`].
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|c| if c.is_empty() { Ok(None) } else { c.parse::<f64>().map(Some) })
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| crate::Error::Precondition(format!("bad float in {}: {e}", path.display())))?;
            rows.push(row);
        }
        Ok(Self { header, rows })
    }
}

/// Writes to a temporary file in the target directory, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| crate::Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Columns `t, a, q, p, E`; `E` is blank when `beta > 0`.
pub fn trajectory_table(params: &ModelParams, traj: &Trajectory) -> Table {
    let mut t = Table::new(&["t", "a", "q", "p", "E"]);
    for (&s, pt) in traj.times.iter().zip(&traj.points) {
        let e = if params.is_ergodic() { energy(params, *pt).ok() } else { None };
        t.push(vec![Some(s), Some(pt.a), Some(pt.q), Some(pt.p()), e]);
    }
    t
}

/// Columns `t, v0, v1, a`.
pub fn value_table(v: &ValueFunction) -> Table {
    let mut t = Table::new(&["t", "v0", "v1", "a"]);
    for (i, &s) in v.times.iter().enumerate() {
        t.push_values(&[s, v.v0[i], v.v1[i], v.v0[i] - v.v1[i]]);
    }
    t
}

/// Columns `t, fraction`.
pub fn empirical_table(flow: &EmpiricalFlow) -> Table {
    let mut t = Table::new(&["t", "fraction"]);
    for (&s, &f) in flow.times.iter().zip(&flow.fraction) {
        t.push_values(&[s, f]);
    }
    t
}

/// Columns `t, p_1..p_N, a_1..a_N`.
pub fn nstate_table(flow: &NStateFlow) -> Table {
    let n = flow.p.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("p_{i}")));
    header.extend((1..=n).map(|i| format!("a_{i}")));
    let mut t = Table::new(&header);
    for (j, &s) in flow.times.iter().enumerate() {
        let mut row = vec![s];
        row.extend(&flow.p[j]);
        row.extend(&flow.a[j]);
        t.push_values(&row);
    }
    t
}

/// Vector field on a regular grid of `[-a_max, a_max] x [-1, 1]`, columns `a, q, da, dq, E`.
pub fn phase_grid_table(params: &ModelParams, a_max: f64, na: usize, nq: usize) -> Table {
    let mut t = Table::new(&["a", "q", "da", "dq", "E"]);
    let node = |i: usize, n: usize, lo: f64, hi: f64| if n < 2 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
    for i in 0..na {
        let a = node(i, na, -a_max, a_max);
        for j in 0..nq {
            let q = node(j, nq, -1.0, 1.0);
            let f = field(params, a, q);
            let e = if params.is_ergodic() { energy(params, PhasePoint::new(a, q)).ok() } else { None };
            t.push(vec![Some(a), Some(q), Some(f[0]), Some(f[1]), e]);
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub params: ModelParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: Vec<String>, params: ModelParams, seed: Option<u64>) -> Self {
        Self { command, params, seed, outputs: Vec::new(), version: env!("CARGO_PKG_VERSION").to_string(), wall_clock_secs: 0.0 }
    }

    /// Records an output, ignoring repeats.
    pub fn record(&mut self, path: PathBuf) {
        if !self.outputs.contains(&path) {
            self.outputs.push(path);
        }
    }
}
