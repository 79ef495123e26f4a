//! End-to-end worked examples: computing dense consensus with sparse
//! time-varying weights, and exchanging node values across a network.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{expm, propagate_state, WeightSchedule};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, GraphSpec};
use crate::io::{self, nodes_csv, square_from_rows, trajectory_csv, write_solution_bundle};
use crate::optimal_control::{solve_bvp, solve_with_waypoints, BvpProblem, ExtremalSolution, SolverOptions};

/// `exp(-L_d (tf - t0))`, the transition matrix of plain consensus on the
/// dense graph.
pub fn densification_target(dense: &Graph, t0: f64, tf: f64) -> Result<DMatrix<f64>> {
    expm(&(dense.laplacian() * -(tf - t0)))
}

/// `|x - mean(x0) 1|`.
pub fn agreement_error(x: &DVector<f64>, x0: &DVector<f64>) -> Result<f64> {
    if x.len() != x0.len() {
        return Err(dim_err(x0.len(), x.len()));
    }
    let mean = x0.mean();
    Ok(x.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt())
}

/// Seeded uniform vector in `[-1, 1]^n` with its mean removed.
pub fn mean_free_state(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..=1.0));
    let mean = v.mean();
    v.add_scalar(-mean)
}

/// Integration steps for forward simulation of a solved schedule: one RK4
/// step per two schedule intervals, so RK4 stages land on samples.
fn forward_steps(sched: &WeightSchedule) -> usize {
    let intervals: usize = sched.pieces().iter().map(|p| p.intervals()).sum();
    if intervals.is_multiple_of(2) {
        intervals / 2
    } else {
        intervals
    }
}

#[derive(Debug, Clone)]
pub struct DensifyScenario {
    pub sparse_graph: Graph,
    pub dense_graph: Graph,
    pub t0: f64,
    pub tf: f64,
    pub initial_state: DVector<f64>,
}

impl DensifyScenario {
    pub fn new(sparse_graph: Graph, dense_graph: Graph, t0: f64, tf: f64, initial_state: DVector<f64>) -> Result<Self> {
        let n = sparse_graph.n();
        if dense_graph.n() != n {
            return Err(dim_err(format!("{n} dense vertices"), dense_graph.n()));
        }
        if initial_state.len() != n {
            return Err(dim_err(n, initial_state.len()));
        }
        for (name, g) in [("sparse", &sparse_graph), ("dense", &dense_graph)] {
            if !g.is_connected() {
                return Err(Error::Infeasible(format!("{name} graph is disconnected")));
            }
        }
        Ok(Self {
            sparse_graph,
            dense_graph,
            t0,
            tf,
            initial_state,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DensifyReport {
    pub solution: ExtremalSolution,
    pub initial_state: DVector<f64>,
    pub grid: Vec<f64>,
    pub err_sparse: Vec<f64>,
    pub err_dense: Vec<f64>,
    pub err_synth: Vec<f64>,
    /// Node states under the synthesized schedule.
    pub synth_states: Vec<DVector<f64>>,
    /// `|x_synth(tf) - exp(-L_d dt) xi|`.
    pub terminal_error: f64,
}

impl DensifyReport {
    pub fn errors_csv(&self) -> String {
        let mut out = String::from("t,err_sparse,err_dense,err_synth\n");
        for k in 0..self.grid.len() {
            let row = [self.grid[k], self.err_sparse[k], self.err_dense[k], self.err_synth[k]];
            out.push_str(&row.map(io::fmt_f64).join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_solution_bundle(dir, &self.solution)?;
        fs::write(dir.join("errors.csv"), self.errors_csv())?;
        fs::write(dir.join("nodes.csv"), nodes_csv(&self.grid, &self.synth_states))?;
        Ok(())
    }
}

/// Solves for sparse weights reproducing dense consensus over the horizon,
/// then compares agreement error of plain sparse consensus, plain dense
/// consensus and the synthesized schedule on a common grid.
pub fn run_densify(s: &DensifyScenario, options: &SolverOptions) -> Result<DensifyReport> {
    let target = densification_target(&s.dense_graph, s.t0, s.tf)?;
    let prob = BvpProblem::new(s.sparse_graph.clone(), target.clone(), s.t0, s.tf, options.clone())?;
    let solution = solve_bvp(&prob)?;

    let steps = forward_steps(&solution.schedule);
    let synth = propagate_state(&solution.schedule, &s.initial_state, steps)?;
    let plain = |g: &Graph| -> Result<Vec<DVector<f64>>> {
        let sched = WeightSchedule::constant(g.mask(), s.t0, s.tf, -g.laplacian())?;
        Ok(propagate_state(&sched, &s.initial_state, steps)?.states)
    };
    let sparse = plain(&s.sparse_graph)?;
    let dense = plain(&s.dense_graph)?;

    let errs =
        |xs: &[DVector<f64>]| -> Result<Vec<f64>> { xs.iter().map(|x| agreement_error(x, &s.initial_state)).collect() };
    let terminal_error = (synth.final_state() - &target * &s.initial_state).norm();
    Ok(DensifyReport {
        err_sparse: errs(&sparse)?,
        err_dense: errs(&dense)?,
        err_synth: errs(&synth.states)?,
        grid: synth.grid,
        synth_states: synth.states,
        initial_state: s.initial_state.clone(),
        terminal_error,
        solution,
    })
}

/// Permutation matrix exchanging the values of each 1-based index pair.
pub fn swap_target(n: usize, pairs: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut used = vec![false; n];
    for &(a, b) in pairs {
        if a == 0 || b == 0 || a > n || b > n {
            return Err(Error::IndexOutOfRange { i: a, j: b, n });
        }
        let (a, b) = (a - 1, b - 1);
        if a == b || used[a] || used[b] {
            return Err(Error::InvalidProblem(format!(
                "swap pairs are not disjoint at ({}, {})",
                a + 1,
                b + 1
            )));
        }
        used[a] = true;
        used[b] = true;
        perm.swap(a, b);
    }
    Ok(DMatrix::from_fn(n, n, |i, j| if perm[i] == j { 1.0 } else { 0.0 }))
}

/// The 4-node waypoint `T_1`: node 1 takes node 2's value, node 2 takes
/// node 3's, node 3 takes node 1's.
pub fn default_swap_waypoint() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    )
}

#[derive(Debug, Clone)]
pub struct SwapScenario {
    pub graph: Graph,
    pub pairs: Vec<(usize, usize)>,
    pub waypoints: Vec<DMatrix<f64>>,
    pub initial_state: DVector<f64>,
    pub t0: f64,
    pub tf: f64,
}

#[derive(Debug, Clone)]
pub struct SwapReport {
    pub solution: ExtremalSolution,
    pub target: DMatrix<f64>,
    pub grid: Vec<f64>,
    pub node_states: Vec<DVector<f64>>,
    /// Terminal transition matrix of each phase, each started from `I`.
    pub phase_transitions: Vec<DMatrix<f64>>,
}

impl SwapReport {
    pub fn final_state(&self) -> &DVector<f64> {
        self.node_states.last().expect("non-empty")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_solution_bundle(dir, &self.solution)?;
        fs::write(dir.join("nodes.csv"), nodes_csv(&self.grid, &self.node_states))?;
        for (k, seg) in self.solution.arcs().iter().enumerate() {
            let traj = &seg.trajectory;
            fs::write(
                dir.join(format!("phase_{}.csv", k + 1)),
                trajectory_csv(&traj.grid, &traj.states),
            )?;
        }
        Ok(())
    }
}

pub fn run_swap(s: &SwapScenario, options: &SolverOptions) -> Result<SwapReport> {
    let n = s.graph.n();
    if s.initial_state.len() != n {
        return Err(dim_err(n, s.initial_state.len()));
    }
    let target = swap_target(n, &s.pairs)?;
    let prob = BvpProblem::new(s.graph.clone(), target.clone(), s.t0, s.tf, options.clone())?;
    let solution = solve_with_waypoints(&prob, &s.waypoints)?;
    let traj = propagate_state(&solution.schedule, &s.initial_state, forward_steps(&solution.schedule))?;
    let phase_transitions = solution
        .arcs()
        .iter()
        .map(|a| a.trajectory.final_state().clone())
        .collect();
    Ok(SwapReport {
        target,
        grid: traj.grid,
        node_states: traj.states,
        phase_transitions,
        solution,
    })
}

fn default_sparse() -> GraphSpec {
    Graph::path(5).expect("valid").to_spec()
}

fn default_dense() -> GraphSpec {
    Graph::complete(5).expect("valid").to_spec()
}

fn default_swap_graph() -> GraphSpec {
    Graph::cycle(4).expect("valid").to_spec()
}

fn default_pairs() -> Vec<[usize; 2]> {
    vec![[1, 2], [3, 4]]
}

fn default_tf() -> f64 {
    1.0
}

fn default_swap_tf() -> f64 {
    2.0
}

fn vector_or(v: &Option<Vec<f64>>, n: usize, fallback: impl FnOnce() -> DVector<f64>) -> Result<DVector<f64>> {
    match v {
        Some(v) if v.len() != n => Err(dim_err(n, v.len())),
        Some(v) => Ok(DVector::from_vec(v.clone())),
        None => Ok(fallback()),
    }
}

/// JSON config of the densification scenario. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub sparse_graph: GraphSpec,
    pub dense_graph: GraphSpec,
    pub t0: f64,
    pub tf: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    pub solver: SolverOptions,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            sparse_graph: default_sparse(),
            dense_graph: default_dense(),
            t0: 0.0,
            tf: default_tf(),
            initial_state: None,
            solver: SolverOptions::default(),
        }
    }
}

impl DensifyConfig {
    /// Without an explicit initial state, a mean-free random one is drawn
    /// from the solver seed.
    pub fn scenario(&self) -> Result<DensifyScenario> {
        let sparse = self.sparse_graph.build()?;
        let n = sparse.n();
        let xi = vector_or(&self.initial_state, n, || mean_free_state(n, self.solver.seed))?;
        DensifyScenario::new(sparse, self.dense_graph.build()?, self.t0, self.tf, xi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwapConfig {
    pub graph: GraphSpec,
    /// 1-based index pairs.
    pub pairs: Vec<[usize; 2]>,
    /// Absent means `T_1` on 4 nodes and none otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub waypoints: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    pub t0: f64,
    pub tf: f64,
    pub solver: SolverOptions,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self {
            graph: default_swap_graph(),
            pairs: default_pairs(),
            waypoints: None,
            initial_state: None,
            t0: 0.0,
            tf: default_swap_tf(),
            solver: SolverOptions::default(),
        }
    }
}

impl SwapConfig {
    pub fn scenario(&self) -> Result<SwapScenario> {
        let graph = self.graph.build()?;
        let n = graph.n();
        let waypoints = match &self.waypoints {
            Some(ws) => ws
                .iter()
                .enumerate()
                .map(|(k, w)| square_from_rows(w, n, &format!("waypoint {}", k + 1)))
                .collect::<Result<_>>()?,
            None if n == 4 => vec![default_swap_waypoint()],
            None => Vec::new(),
        };
        let xi = vector_or(&self.initial_state, n, || DVector::from_fn(n, |i, _| (i + 1) as f64))?;
        Ok(SwapScenario {
            graph,
            pairs: self.pairs.iter().map(|p| (p[0], p[1])).collect(),
            waypoints,
            initial_state: xi,
            t0: self.t0,
            tf: self.tf,
        })
    }
}
