//! CSV and JSON artifacts: trajectories, schedules, node states, solution
//! bundles and problem configs.
//!
//! Numbers are written as `{:.16e}` (17 significant digits), which parses
//! back to the identical `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::WeightSchedule;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, GraphSpec, SparsityMask};
use crate::optimal_control::{BvpProblem, ExtremalSolution, SolverOptions};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_row(out: &mut String, t: f64, values: impl Iterator<Item = f64>) {
    out.push_str(&fmt_f64(t));
    for v in values {
        out.push(',');
        out.push_str(&fmt_f64(v));
    }
    out.push('\n');
}

/// Row-major matrix as JSON-style nested rows.
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Parse("matrix has no rows".into()));
    }
    let m = rows[0].len();
    if let Some((k, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
        return Err(Error::Parse(format!(
            "row {} has {} entries, expected {m}",
            k + 1,
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Square matrix from nested rows, checking the dimension.
pub fn square_from_rows(rows: &[Vec<f64>], n: usize, what: &str) -> Result<DMatrix<f64>> {
    let m = matrix_from_rows(rows).map_err(|e| Error::Parse(format!("{what}: {e}")))?;
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Parse(format!(
            "{what}: expected {n}x{n}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m)
}

/// Trajectory CSV: header `t,X_1_1,...,X_n_n`, entries row-major.
pub fn trajectory_csv(grid: &[f64], states: &[DMatrix<f64>]) -> String {
    let n = states.first().map_or(0, |x| x.nrows());
    let mut out = String::from("t");
    for i in 1..=n {
        for j in 1..=n {
            let _ = write!(out, ",X_{i}_{j}");
        }
    }
    out.push('\n');
    for (t, x) in grid.iter().zip(states) {
        push_row(&mut out, *t, x.transpose().iter().copied());
    }
    out
}

struct Table {
    header: Vec<String>,
    rows: Vec<(f64, Vec<f64>)>,
}

fn parse_table(text: &str) -> Result<Table> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
    let header: Vec<String> = head.split(',').map(|s| s.trim().to_string()).collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(Error::Parse("CSV header must start with `t`".into()));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines {
        let mut vals = Vec::with_capacity(header.len());
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad number `{}`", ln + 1, field.trim())))?;
            vals.push(v);
        }
        if vals.len() != header.len() {
            return Err(Error::Parse(format!(
                "line {}: {} fields, header has {}",
                ln + 1,
                vals.len(),
                header.len()
            )));
        }
        let t = vals.remove(0);
        rows.push((t, vals));
    }
    Ok(Table { header, rows })
}

pub fn parse_trajectory_csv(text: &str) -> Result<(Vec<f64>, Vec<DMatrix<f64>>)> {
    let table = parse_table(text)?;
    let cols = table.header.len() - 1;
    let n = (cols as f64).sqrt().round() as usize;
    if n * n != cols || n == 0 {
        return Err(Error::Parse(format!("{cols} state columns is not a square count")));
    }
    let mut grid = Vec::with_capacity(table.rows.len());
    let mut states = Vec::with_capacity(table.rows.len());
    for (t, vals) in table.rows {
        grid.push(t);
        states.push(DMatrix::from_row_slice(n, n, &vals));
    }
    Ok((grid, states))
}

/// Schedule CSV: header `t,w_i_j` over mask-true entries in row-major
/// order. A repeated `t` marks a piece boundary where the weights may jump.
pub fn schedule_csv(sched: &WeightSchedule) -> String {
    let positions: Vec<_> = sched.mask().positions().collect();
    let mut out = String::from("t");
    for (i, j) in &positions {
        let _ = write!(out, ",w_{}_{}", i + 1, j + 1);
    }
    out.push('\n');
    for (t, w) in sched.samples() {
        push_row(&mut out, t, positions.iter().map(|&(i, j)| w[(i, j)]));
    }
    out
}

fn parse_weight_column(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("w_")?;
    let (i, j) = rest.split_once('_')?;
    Some((i.parse().ok()?, j.parse().ok()?))
}

fn uniform_grid_matches(times: &[f64]) -> bool {
    let (t0, tf) = (times[0], times[times.len() - 1]);
    let kk = times.len() - 1;
    times.iter().enumerate().all(|(k, &t)| {
        let expected = if k == kk {
            tf
        } else {
            t0 + (tf - t0) * k as f64 / kk as f64
        };
        (t - expected).abs() <= 1e-9 * (1.0 + expected.abs())
    })
}

/// Parses a schedule CSV against the mask of `graph`. The header must list
/// exactly the graph's mask entries in row-major order.
pub fn parse_schedule_csv(text: &str, mask: &SparsityMask) -> Result<WeightSchedule> {
    let table = parse_table(text)?;
    let expected: Vec<(usize, usize)> = mask.positions().map(|(i, j)| (i + 1, j + 1)).collect();
    let mut found = Vec::with_capacity(table.header.len() - 1);
    for name in &table.header[1..] {
        found.push(parse_weight_column(name).ok_or_else(|| Error::Parse(format!("bad schedule column `{name}`")))?);
    }
    if found != expected {
        let missing = expected.iter().find(|p| !found.contains(p));
        let extra = found.iter().find(|p| !expected.contains(p));
        let detail = match (missing, extra) {
            (_, Some((i, j))) => format!("column w_{i}_{j} is not an edge of the graph"),
            (Some((i, j)), None) => format!("edge ({i}, {j}) has no column"),
            (None, None) => "columns are not in row-major mask order".to_string(),
        };
        return Err(Error::Parse(format!("schedule does not match the graph: {detail}")));
    }
    if table.rows.len() < 2 {
        return Err(Error::InvalidGrid("schedule needs at least two rows".into()));
    }
    let n = mask.n();
    let mut pieces: Vec<(Vec<f64>, Vec<DMatrix<f64>>)> = vec![(Vec::new(), Vec::new())];
    let mut last_t = f64::NEG_INFINITY;
    for (t, vals) in table.rows {
        if t < last_t {
            return Err(Error::InvalidGrid(format!("time {t} decreases")));
        }
        if t == last_t {
            pieces.push((Vec::new(), Vec::new()));
        }
        last_t = t;
        let mut w = DMatrix::zeros(n, n);
        for (&(i, j), v) in expected.iter().zip(vals) {
            w[(i - 1, j - 1)] = v;
        }
        let piece = pieces.last_mut().expect("non-empty");
        piece.0.push(t);
        piece.1.push(w);
    }
    let mut out = Vec::with_capacity(pieces.len());
    for (times, weights) in pieces {
        if times.len() < 2 || !uniform_grid_matches(&times) {
            return Err(Error::InvalidGrid(format!(
                "schedule piece starting at {} is not a uniform grid",
                times[0]
            )));
        }
        out.push((times[0], times[times.len() - 1], weights));
    }
    WeightSchedule::from_pieces(mask.clone(), out)
}

/// Node-state CSV: header `t,x_1,...,x_n`.
pub fn nodes_csv(grid: &[f64], states: &[DVector<f64>]) -> String {
    let n = states.first().map_or(0, |x| x.len());
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",x_{i}");
    }
    out.push('\n');
    for (t, x) in grid.iter().zip(states) {
        push_row(&mut out, *t, x.iter().copied());
    }
    out
}

pub fn parse_nodes_csv(text: &str) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let table = parse_table(text)?;
    Ok(table.rows.into_iter().map(|(t, v)| (t, DVector::from_vec(v))).unzip())
}

/// Writes `schedule.csv`, `transition.csv`, `costate.csv` and
/// `solution.json` into `dir`, creating it if needed.
pub fn write_solution_bundle(dir: &Path, sol: &ExtremalSolution) -> Result<()> {
    fs::create_dir_all(dir)?;
    let traj = &sol.trajectory;
    fs::write(dir.join("schedule.csv"), schedule_csv(&sol.schedule))?;
    fs::write(dir.join("transition.csv"), trajectory_csv(&traj.grid, &traj.states))?;
    fs::write(dir.join("costate.csv"), trajectory_csv(&traj.grid, &traj.costates))?;
    fs::write(dir.join("solution.json"), solution_json(sol)?)?;
    Ok(())
}

pub fn solution_json(sol: &ExtremalSolution) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&sol.summary())?;
    s.push('\n');
    Ok(s)
}

fn default_tf() -> f64 {
    1.0
}

/// JSON problem description consumed by `check` and `solve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub graph: GraphSpec,
    /// Row-major target matrix.
    pub target: Vec<Vec<f64>>,
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_tf")]
    pub tf: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub waypoints: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ProblemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn graph(&self) -> Result<Graph> {
        self.graph.build()
    }

    pub fn target_matrix(&self) -> Result<DMatrix<f64>> {
        square_from_rows(&self.target, self.graph.nodes, "target")
    }

    pub fn waypoint_matrices(&self) -> Result<Vec<DMatrix<f64>>> {
        self.waypoints
            .iter()
            .enumerate()
            .map(|(k, w)| square_from_rows(w, self.graph.nodes, &format!("waypoint {}", k + 1)))
            .collect()
    }

    /// Builds the (feasibility-checked) boundary value problem.
    pub fn problem(&self) -> Result<BvpProblem> {
        BvpProblem::new(
            self.graph()?,
            self.target_matrix()?,
            self.t0,
            self.tf,
            self.solver.clone(),
        )
    }
}

/// Parses a state vector given as comma-separated numbers, optionally in
/// brackets.
pub fn parse_vector(text: &str) -> Result<DVector<f64>> {
    let inner = text.trim().trim_start_matches('[').trim_end_matches(']');
    let vals: std::result::Result<Vec<f64>, _> = inner
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect();
    let vals = vals.map_err(|e| Error::Parse(format!("vector `{}`: {e}", text.trim())))?;
    if vals.is_empty() {
        return Err(Error::Parse("empty vector".into()));
    }
    Ok(DVector::from_vec(vals))
}

pub fn check_len(v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(dim_err(n, v.len()));
    }
    Ok(())
}
