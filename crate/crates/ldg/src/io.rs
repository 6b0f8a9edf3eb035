//! File formats: MDP JSON, per-pair CSV tables, learning curves and matrix dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use ldg_core::nalgebra::{DMatrix, DVector};
use ldg_core::{mdp_by_name, GradTable, OccupancyTable, TabularMdp};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// JSON form of a [`TabularMdp`]; `transition[s][a][s']`, `reward[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub num_states: usize,
    pub num_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
    pub discount: f64,
}

impl MdpDocument {
    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        Self {
            num_states: ns,
            num_actions: na,
            transition: (0..ns).map(|s| (0..na).map(|a| mdp.transition_row(s, a).to_vec()).collect()).collect(),
            reward: (0..ns).map(|s| (0..na).map(|a| mdp.reward(s, a)).collect()).collect(),
            initial_dist: mdp.initial_dist().to_vec(),
            discount: mdp.discount(),
        }
    }

    pub fn to_mdp(&self) -> Result<TabularMdp> {
        let (ns, na) = (self.num_states, self.num_actions);
        let shape_err = |what: &str| HarnessError::Config(format!("MDP document: {what} has the wrong shape"));
        if self.transition.len() != ns
            || self.transition.iter().any(|r| r.len() != na || r.iter().any(|p| p.len() != ns))
        {
            return Err(shape_err("transition"));
        }
        if self.reward.len() != ns || self.reward.iter().any(|r| r.len() != na) {
            return Err(shape_err("reward"));
        }
        let transition = self.transition.iter().flatten().flatten().copied().collect();
        let reward = self.reward.iter().flatten().copied().collect();
        Ok(TabularMdp::new(ns, na, transition, reward, self.initial_dist.clone(), self.discount)?)
    }
}

pub fn read_mdp(path: &Path) -> Result<TabularMdp> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let doc: MdpDocument = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    doc.to_mdp()
}

pub fn write_mdp(path: &Path, mdp: &TabularMdp) -> Result<()> {
    let text = serde_json::to_string_pretty(&MdpDocument::from_mdp(mdp)).expect("MDP documents always serialise");
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// `grid-<side>` or a path to an MDP JSON file.
pub fn load_env(name: &str) -> Result<TabularMdp> {
    if name.starts_with("grid-") {
        Ok(mdp_by_name(name)?)
    } else {
        read_mdp(Path::new(name))
    }
}

/// 17 significant digits, enough for an exact round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes one row per pair: `s,a,<columns...>`.
pub fn write_pair_table<W: Write>(out: W, num_actions: usize, columns: &[String], rows: &DMatrix<f64>) -> Result<()> {
    if rows.ncols() != columns.len() {
        return Err(HarnessError::Config(format!(
            "{} column names for a table with {} columns",
            columns.len(),
            rows.ncols()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["s".to_string(), "a".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in rows.row_iter().enumerate() {
        let mut rec = vec![(i / num_actions).to_string(), (i % num_actions).to_string()];
        rec.extend(row.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| HarnessError::io("<csv>", e))?;
    Ok(())
}

/// Reads a table written by [`write_pair_table`]; returns column names,
/// `|A|` and the values laid out by pair index.
pub fn read_pair_table<R: std::io::Read>(input: R) -> Result<(Vec<String>, usize, DMatrix<f64>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "s" || &header[1] != "a" {
        return Err(HarnessError::Config("table header must start with s,a".into()));
    }
    let columns: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let bad = |what: String| HarnessError::Config(format!("table row: {what}"));
    let mut entries = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let s: usize = rec[0].parse().map_err(|e| bad(format!("state {:?}: {e}", &rec[0])))?;
        let a: usize = rec[1].parse().map_err(|e| bad(format!("action {:?}: {e}", &rec[1])))?;
        let vals = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("value {v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        entries.push((s, a, vals));
    }
    let na = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
    let ns = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    if entries.len() != ns * na {
        return Err(bad(format!("expected {} rows for {ns} states x {na} actions, got {}", ns * na, entries.len())));
    }
    let mut m = DMatrix::zeros(ns * na, columns.len());
    for (s, a, vals) in entries {
        for (c, v) in vals.into_iter().enumerate() {
            m[(s * na + a, c)] = v;
        }
    }
    Ok((columns, na, m))
}

pub fn grad_columns(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("theta{k}")).collect()
}

pub fn write_grad_table(path: &Path, table: &GradTable, num_actions: usize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    write_pair_table(file, num_actions, &grad_columns(table.num_params()), &table.w)
}

pub fn read_grad_table(path: &Path, gamma: f64) -> Result<GradTable> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let (_, _, w) = read_pair_table(file)?;
    Ok(GradTable { gamma, w })
}

pub fn write_occupancy(path: &Path, occupancy: &OccupancyTable) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let col = DMatrix::from_column_slice(occupancy.num_pairs(), 1, occupancy.d.as_slice());
    write_pair_table(file, occupancy.num_actions(), &["d".to_string()], &col)
}

/// Occupancy column of a table written by [`write_occupancy`].
pub fn read_occupancy_column(path: &Path) -> Result<DVector<f64>> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let (_, _, m) = read_pair_table(file)?;
    Ok(m.column(0).into_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdCurvePoint {
    pub iteration: u64,
    #[serde(rename = "weighted_L1_error")]
    pub weighted_l1_error: f64,
    pub wall_clock_ns: u128,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinmaxLogPoint {
    pub iteration: u64,
    pub distance_to_fixed_point: Option<f64>,
    pub optimality_gap: Option<f64>,
    pub wall_clock_ns: u128,
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

/// A dense matrix as headerless CSV.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(
            rec.iter()
                .map(|v| v.parse::<f64>().map_err(|e| HarnessError::Config(format!("matrix entry {v:?}: {e}"))))
                .collect::<Result<_>>()?,
        );
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

/// Writes `G.csv`, `h.csv`, `A.csv`, `B.csv`, `C.csv` and `m.csv` into `dir`.
pub fn write_saddle_system(dir: &Path, system: &ldg_core::minmax::SaddleSystem) -> Result<()> {
    let m = DMatrix::from_column_slice(system.m.len(), 1, system.m.as_slice());
    for (name, mat) in [("G", &system.g), ("h", &system.h), ("A", &system.a), ("B", &system.b), ("C", &system.c), ("m", &m)] {
        write_matrix(&dir.join(format!("{name}.csv")), mat)?;
    }
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}
