//! Minimum-energy weight synthesis.
//!
//! Minimizes `J(W) = int 1/2 |W(t)|_F^2 dt` subject to `dX/dt = W X`,
//! `W(t)` in the sparsity pattern, `X(t0) = I` and `X(tf) = T`. With the
//! Hamiltonian `H = <lambda, W X> + 1/2 |W|_F^2` the stationarity condition
//! gives `W = -mask(lambda X^T)`, and the costate obeys
//! `d lambda/dt = -W^T lambda`. The resulting two-point boundary value
//! problem is solved by single shooting on `lambda(t0)` with a damped
//! Gauss-Newton iteration and a central-difference Jacobian.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, determinant, inverse, max_abs, WeightSchedule};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, SparsityMask};
use crate::lie_algebra::check_feasible;

/// Any state or costate entry beyond this magnitude aborts a shot.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Minimum |det| along the straight homotopy below which a waypoint is suggested.
pub const SINGULARITY_WARNING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Grid intervals over each boundary value problem's horizon.
    pub steps: usize,
    /// RK4 steps of the state/costate flow per grid interval.
    pub substeps: usize,
    #[serde(alias = "tol")]
    pub newton_tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            substeps: 2,
            newton_tol: 1e-8,
            max_iter: 50,
            restarts: 8,
            seed: 0,
        }
    }
}

/// A feasible instance of the optimal local interaction problem.
#[derive(Debug, Clone)]
pub struct BvpProblem {
    pub graph: Graph,
    pub target: DMatrix<f64>,
    pub t0: f64,
    pub tf: f64,
    pub options: SolverOptions,
    relaxation: f64,
}

impl BvpProblem {
    pub fn new(graph: Graph, target: DMatrix<f64>, t0: f64, tf: f64, options: SolverOptions) -> Result<Self> {
        if !(t0.is_finite() && tf.is_finite() && tf > t0) {
            return Err(Error::InvalidProblem(format!("need t0 < tf, got [{t0}, {tf}]")));
        }
        if options.steps == 0 || options.substeps == 0 {
            return Err(Error::InvalidProblem("steps and substeps must be positive".into()));
        }
        let report = check_feasible(&graph, &target)?;
        if !report.feasible {
            return Err(Error::Infeasible(report.reason));
        }
        Ok(Self {
            graph,
            target,
            t0,
            tf,
            options,
            relaxation: 0.0,
        })
    }

    /// Weight multipliers: one on the mask, `relaxation` elsewhere.
    fn gains(&self) -> DMatrix<f64> {
        let mask = self.graph.mask();
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| if mask.get(i, j) { 1.0 } else { self.relaxation })
    }

    fn with_relaxation(&self, r: f64) -> Self {
        Self {
            relaxation: r,
            ..self.clone()
        }
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    fn step(&self) -> f64 {
        (self.tf - self.t0) / self.options.steps as f64
    }

    fn grid_time(&self, k: usize) -> f64 {
        if k == self.options.steps {
            self.tf
        } else {
            self.t0 + self.step() * k as f64
        }
    }
}

/// `W = -(lambda X^T)` restricted to the mask.
pub fn weights_from_costate(lambda: &DMatrix<f64>, x: &DMatrix<f64>, mask: &SparsityMask) -> Result<DMatrix<f64>> {
    let n = mask.n();
    for m in [lambda, x] {
        if m.nrows() != n || m.ncols() != n {
            return Err(dim_err(format!("{n}x{n}"), format!("{}x{}", m.nrows(), m.ncols())));
        }
    }
    Ok(masked_weights(lambda, x, mask))
}

fn masked_weights(lambda: &DMatrix<f64>, x: &DMatrix<f64>, mask: &SparsityMask) -> DMatrix<f64> {
    let mut w = -(lambda * x.transpose());
    mask.apply(&mut w);
    w
}

/// Right-hand side of the extremal flow: `(W X, -W^T lambda)`.
pub fn extremal_rhs(
    x: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    mask: &SparsityMask,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let w = weights_from_costate(lambda, x, mask)?;
    Ok((&w * x, -(w.transpose() * lambda)))
}

/// `H = sum_(i,j) in E sum_k lambda_ik w_ij X_jk + 1/2 sum w_ij^2`.
///
/// Entries of `w` outside the mask are ignored.
pub fn hamiltonian(x: &DMatrix<f64>, lambda: &DMatrix<f64>, w: &DMatrix<f64>, mask: &SparsityMask) -> f64 {
    let mut wm = w.clone();
    mask.apply(&mut wm);
    lambda.dot(&(&wm * x)) + 0.5 * wm.norm_squared()
}

/// `dH/dw_ij = sum_k lambda_ik X_jk + w_ij` on the mask, zero elsewhere.
pub fn hamiltonian_grad_w(
    x: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    w: &DMatrix<f64>,
    mask: &SparsityMask,
) -> DMatrix<f64> {
    let mut g = lambda * x.transpose() + w;
    mask.apply(&mut g);
    g
}

/// `dH/dX = W^T lambda` for fixed `W`.
pub fn hamiltonian_grad_x(lambda: &DMatrix<f64>, w: &DMatrix<f64>, mask: &SparsityMask) -> DMatrix<f64> {
    let mut wm = w.clone();
    mask.apply(&mut wm);
    wm.transpose() * lambda
}

/// Gridded state and costate along an extremal.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtremalTrajectory {
    pub grid: Vec<f64>,
    pub states: Vec<DMatrix<f64>>,
    pub costates: Vec<DMatrix<f64>>,
}

impl ExtremalTrajectory {
    pub fn final_state(&self) -> &DMatrix<f64> {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn final_costate(&self) -> &DMatrix<f64> {
        self.costates.last().expect("trajectory is never empty")
    }

    /// Largest entrywise drift of `lambda^T X` from its initial value,
    /// relative to the initial magnitude.
    pub fn invariant_drift(&self) -> f64 {
        let m0 = self.costates[0].transpose() * &self.states[0];
        let drift = self
            .states
            .iter()
            .zip(&self.costates)
            .map(|(x, l)| (l.transpose() * x - &m0).amax())
            .fold(0.0, f64::max);
        if drift == 0.0 {
            0.0
        } else {
            drift / max_abs(&m0).max(f64::MIN_POSITIVE)
        }
    }

    fn weight_norms(&self, mask: &SparsityMask) -> Vec<f64> {
        self.states
            .iter()
            .zip(&self.costates)
            .map(|(x, l)| masked_weights(l, x, mask).norm())
            .collect()
    }

    /// `(max - min) / max` of `|W(t)|_F` over the grid.
    pub fn weight_norm_variation(&self, mask: &SparsityMask) -> f64 {
        let norms = self.weight_norms(mask);
        let hi = norms.iter().copied().fold(0.0, f64::max);
        let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
        if hi == 0.0 {
            0.0
        } else {
            (hi - lo) / hi
        }
    }

    /// Samples `W = -mask(lambda X^T)` at every grid point.
    pub fn schedule(&self, mask: &SparsityMask) -> Result<WeightSchedule> {
        let weights = self
            .states
            .iter()
            .zip(&self.costates)
            .map(|(x, l)| masked_weights(l, x, mask))
            .collect();
        WeightSchedule::new(mask.clone(), self.grid[0], *self.grid.last().unwrap(), weights)
    }
}

/// Result of integrating the extremal flow from a costate guess.
#[derive(Debug, Clone, PartialEq)]
pub enum Shot {
    Completed(ExtremalTrajectory),
    /// Some entry exceeded [`DIVERGENCE_LIMIT`] or became non-finite.
    Diverged {
        time: f64,
    },
}

/// Allocation-free RK4 integrator for the stacked flow `Y = [X | lambda]`,
/// stored column-major as an `n x 2n` block.
struct ExtremalFlow {
    n: usize,
    gains: Vec<f64>,
    w: Vec<f64>,
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
}

impl ExtremalFlow {
    fn new(prob: &BvpProblem) -> Self {
        let n = prob.n();
        let len = 2 * n * n;
        Self {
            n,
            gains: prob.gains().as_slice().to_vec(),
            w: vec![0.0; n * n],
            k: std::array::from_fn(|_| vec![0.0; len]),
            stage: vec![0.0; len],
        }
    }

    /// `out = (W X, -W^T lambda)` with `W = -gains .* (lambda X^T)`.
    fn rhs(n: usize, gains: &[f64], w: &mut [f64], y: &[f64], out: &mut [f64]) {
        let (x, l) = y.split_at(n * n);
        for j in 0..n {
            for i in 0..n {
                let g = gains[i + n * j];
                w[i + n * j] = if g == 0.0 {
                    0.0
                } else {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += l[i + n * k] * x[j + n * k];
                    }
                    -g * acc
                };
            }
        }
        let (dx, dl) = out.split_at_mut(n * n);
        for k in 0..n {
            for i in 0..n {
                let mut ax = 0.0;
                let mut al = 0.0;
                for j in 0..n {
                    ax += w[i + n * j] * x[j + n * k];
                    al += w[j + n * i] * l[j + n * k];
                }
                dx[i + n * k] = ax;
                dl[i + n * k] = -al;
            }
        }
    }

    fn step(&mut self, y: &mut [f64], h: f64) {
        let n = self.n;
        let [k1, k2, k3, k4] = &mut self.k;
        Self::rhs(n, &self.gains, &mut self.w, y, k1);
        for (s, (a, b)) in self.stage.iter_mut().zip(y.iter().zip(k1.iter())) {
            *s = a + 0.5 * h * b;
        }
        Self::rhs(n, &self.gains, &mut self.w, &self.stage, k2);
        for (s, (a, b)) in self.stage.iter_mut().zip(y.iter().zip(k2.iter())) {
            *s = a + 0.5 * h * b;
        }
        Self::rhs(n, &self.gains, &mut self.w, &self.stage, k3);
        for (s, (a, b)) in self.stage.iter_mut().zip(y.iter().zip(k3.iter())) {
            *s = a + h * b;
        }
        Self::rhs(n, &self.gains, &mut self.w, &self.stage, k4);
        for (i, v) in y.iter_mut().enumerate() {
            *v += (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]) * (h / 6.0);
        }
    }

    /// Advances one grid interval of length `h` in `substeps` RK4 steps.
    fn advance(&mut self, y: &mut [f64], h: f64, substeps: usize) {
        let hs = h / substeps as f64;
        for _ in 0..substeps {
            self.step(y, hs);
        }
    }
}

fn diverged(y: &[f64]) -> bool {
    y.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
}

fn stacked_start(lambda0: &DMatrix<f64>) -> Vec<f64> {
    let n = lambda0.nrows();
    let mut y = DMatrix::<f64>::identity(n, n).as_slice().to_vec();
    y.extend_from_slice(lambda0.as_slice());
    y
}

/// Final state only; `None` on divergence.
fn shoot_final(prob: &BvpProblem, lambda0: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = prob.n();
    let mut flow = ExtremalFlow::new(prob);
    let h = prob.step();
    let mut y = stacked_start(lambda0);
    for _ in 0..prob.options.steps {
        flow.advance(&mut y, h, prob.options.substeps);
        if diverged(&y) {
            return None;
        }
    }
    Some(DMatrix::from_column_slice(n, n, &y[..n * n]))
}

/// Integrates the coupled state/costate system from `(I, lambda0)`.
pub fn shoot(prob: &BvpProblem, lambda0: &DMatrix<f64>) -> Result<Shot> {
    let n = prob.n();
    if lambda0.nrows() != n || lambda0.ncols() != n {
        return Err(dim_err(
            format!("{n}x{n} costate"),
            format!("{}x{}", lambda0.nrows(), lambda0.ncols()),
        ));
    }
    let mut flow = ExtremalFlow::new(prob);
    let h = prob.step();
    let mut y = stacked_start(lambda0);
    let mut grid = vec![prob.t0];
    let mut states = vec![DMatrix::identity(n, n)];
    let mut costates = vec![lambda0.clone()];
    for k in 0..prob.options.steps {
        flow.advance(&mut y, h, prob.options.substeps);
        let t = prob.grid_time(k + 1);
        if diverged(&y) {
            return Ok(Shot::Diverged { time: t });
        }
        grid.push(t);
        states.push(DMatrix::from_column_slice(n, n, &y[..n * n]));
        costates.push(DMatrix::from_column_slice(n, n, &y[n * n..]));
    }
    Ok(Shot::Completed(ExtremalTrajectory { grid, states, costates }))
}

/// Trapezoid quadrature of `1/2 |W(t)|_F^2` over the schedule samples.
pub fn cost(sched: &WeightSchedule) -> f64 {
    sched
        .pieces()
        .iter()
        .map(|p| {
            let grid = p.grid();
            let e: Vec<f64> = p.weights().iter().map(|w| 0.5 * w.norm_squared()).collect();
            (1..grid.len())
                .map(|k| 0.5 * (grid[k] - grid[k - 1]) * (e[k] + e[k - 1]))
                .sum::<f64>()
        })
        .sum()
}

/// Smallest `|det((1 - s) I + s T)|` over `samples` uniform points in `[0, 1]`,
/// and the `s` where it occurs.
pub fn homotopy_singularity_scan(t: &DMatrix<f64>, samples: usize) -> Result<(f64, f64)> {
    if !t.is_square() {
        return Err(dim_err("square matrix", format!("{}x{}", t.nrows(), t.ncols())));
    }
    if samples < 2 {
        return Err(Error::InvalidProblem("scan needs at least two samples".into()));
    }
    let n = t.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..samples {
        let s = k as f64 / (samples - 1) as f64;
        let d = determinant(&(&id * (1.0 - s) + t * s))?.abs();
        if d < best.0 {
            best = (d, s);
        }
    }
    Ok(best)
}

/// Converged (or best-effort) extremal for one problem.
#[derive(Debug, Clone)]
pub struct ExtremalSolution {
    pub target: DMatrix<f64>,
    pub lambda0: DMatrix<f64>,
    pub trajectory: ExtremalTrajectory,
    pub schedule: WeightSchedule,
    pub cost: f64,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// 0 for the zero initial costate, `k` for the k-th random restart.
    pub restart_used: usize,
    /// Per-segment solutions when solved through waypoints.
    pub segments: Vec<ExtremalSolution>,
}

impl ExtremalSolution {
    /// Max `|w_ij + sum_k lambda_ik X_jk|` over the grid and the mask.
    pub fn stationarity_residual(&self) -> f64 {
        let mask = self.schedule.mask();
        let mut worst = 0.0f64;
        let traj = &self.trajectory;
        let mut samples = self.schedule.samples();
        for (x, l) in traj.states.iter().zip(&traj.costates) {
            let (_, w) = samples.next().expect("schedule and trajectory share a grid");
            let g = l * x.transpose() + w;
            for (i, j) in mask.positions() {
                worst = worst.max(g[(i, j)].abs());
            }
        }
        worst
    }

    /// Extremal arcs: the segments when solved through waypoints, else `self`.
    pub fn arcs(&self) -> Vec<&ExtremalSolution> {
        if self.segments.is_empty() {
            vec![self]
        } else {
            self.segments.iter().collect()
        }
    }

    /// Integrates the emitted schedule on its own and returns
    /// `|X(tf) - T|_F`.
    ///
    /// Uses one RK4 step per pair of schedule intervals, so every stage time
    /// lands on a stored sample.
    pub fn forward_residual(&self) -> Result<f64> {
        let intervals: usize = self.schedule.pieces().iter().map(|p| p.intervals()).sum();
        let steps = if intervals.is_multiple_of(2) {
            intervals / 2
        } else {
            intervals
        };
        let traj = dynamics::integrate_transition(&self.schedule, steps)?;
        Ok((traj.final_state() - &self.target).norm())
    }

    /// Summary written as `solution.json`.
    pub fn summary(&self) -> SolutionSummary {
        SolutionSummary {
            converged: self.converged,
            residual: self.residual_norm,
            cost: self.cost,
            iterations: self.iterations,
            restart_used: self.restart_used,
            lambda0: self.lambda0.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSummary {
    pub converged: bool,
    pub residual: f64,
    pub cost: f64,
    pub iterations: usize,
    pub restart_used: usize,
    pub lambda0: Vec<Vec<f64>>,
}

struct Attempt {
    lambda0: DMatrix<f64>,
    residual: f64,
    converged: bool,
    iterations: usize,
}

fn residual_vec(prob: &BvpProblem, p: &DVector<f64>) -> Option<DVector<f64>> {
    let n = prob.n();
    let lambda0 = DMatrix::from_column_slice(n, n, p.as_slice());
    let x = shoot_final(prob, &lambda0)?;
    Some(DVector::from_column_slice((x - &prob.target).as_slice()))
}

fn fd_jacobian(prob: &BvpProblem, p: &DVector<f64>) -> Option<DMatrix<f64>> {
    let m = p.len();
    let cols: Vec<Option<DVector<f64>>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let h = 1e-6 * (1.0 + p[i].abs());
            let mut plus = p.clone();
            plus[i] += h;
            let mut minus = p.clone();
            minus[i] -= h;
            let rp = residual_vec(prob, &plus)?;
            let rm = residual_vec(prob, &minus)?;
            Some((rp - rm) / (2.0 * h))
        })
        .collect();
    let mut jac = DMatrix::zeros(m, m);
    for (i, c) in cols.into_iter().enumerate() {
        jac.set_column(i, &c?);
    }
    Some(jac)
}

/// Damped Gauss-Newton step: `(J^T J + mu D) delta = -J^T r`, with the
/// undamped case solved directly as `J delta = -r`.
fn gn_step(jac: &DMatrix<f64>, r: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
    if mu == 0.0 {
        return dynamics::solve_linear(jac, &(-r)).ok();
    }
    let jtj = jac.transpose() * jac;
    let floor = 1e-12 * jtj.diagonal().max().max(1e-300);
    let mut a = jtj.clone();
    for k in 0..a.nrows() {
        a[(k, k)] += mu * jtj[(k, k)].max(floor);
    }
    let rhs = -(jac.transpose() * r);
    a.cholesky().map(|c| c.solve(&rhs))
}

const MAX_DAMPING_TRIES: usize = 16;

/// An attempt has stalled when `STALL_WINDOW` accepted steps fail to cut
/// the residual by the factor `STALL_RATIO`.
const STALL_WINDOW: usize = 8;
const STALL_RATIO: f64 = 0.5;

fn newton_from(prob: &BvpProblem, lambda0: DMatrix<f64>) -> Attempt {
    newton(prob, lambda0, &mut None, false)
}

/// Damped Newton on the shooting residual. With `broyden`, the Jacobian in
/// `jac` is reused and corrected by rank-one updates, and rebuilt from
/// finite differences only when a step fails or makes slow progress.
fn newton(prob: &BvpProblem, lambda0: DMatrix<f64>, jac: &mut Option<DMatrix<f64>>, broyden: bool) -> Attempt {
    let tol = prob.options.newton_tol;
    let mut p = DVector::from_column_slice(lambda0.as_slice());
    let n = prob.n();
    let fail = |p: &DVector<f64>, iterations| Attempt {
        lambda0: DMatrix::from_column_slice(n, n, p.as_slice()),
        residual: f64::INFINITY,
        converged: false,
        iterations,
    };
    let Some(mut r) = residual_vec(prob, &p) else {
        return fail(&p, 0);
    };
    let mut rn = r.norm();
    let mut mu = 0.0;
    let mut iterations = 0;
    let mut history = vec![rn];
    let mut stale = !broyden;
    while rn >= tol && iterations < prob.options.max_iter {
        if history.len() > STALL_WINDOW && rn > STALL_RATIO * history[history.len() - 1 - STALL_WINDOW] {
            break;
        }
        iterations += 1;
        let fresh = stale || jac.is_none();
        if fresh {
            *jac = fd_jacobian(prob, &p);
            stale = !broyden;
        }
        let Some(j) = jac.as_mut() else { break };
        let mut accepted = false;
        for _ in 0..MAX_DAMPING_TRIES {
            if let Some(delta) = gn_step(j, &r, mu) {
                let trial = &p + &delta;
                if let Some(rt) = residual_vec(prob, &trial) {
                    let rtn = rt.norm();
                    if rtn < rn {
                        if broyden {
                            let dd = delta.norm_squared();
                            if dd > 0.0 {
                                let miss = &rt - &r - &*j * &delta;
                                *j += miss * delta.transpose() / dd;
                            }
                            stale = rtn > STALL_RATIO * rn;
                        }
                        p = trial;
                        r = rt;
                        rn = rtn;
                        accepted = true;
                        mu = if mu < 1e-9 { 0.0 } else { mu / 10.0 };
                        break;
                    }
                }
            }
            mu = if mu == 0.0 { 1e-6 } else { mu * 10.0 };
        }
        if !accepted {
            if fresh {
                break;
            }
            stale = true;
            mu = 0.0;
            continue;
        }
        history.push(rn);
    }
    Attempt {
        lambda0: DMatrix::from_column_slice(n, n, p.as_slice()),
        residual: rn,
        converged: rn < tol,
        iterations,
    }
}

const RELAX_FLOOR: f64 = 1e-6;
const RELAX_FIRST_STEP: f64 = 0.3;
const RELAX_MAX_STEP: f64 = 4.0;
const RELAX_MIN_STEP: f64 = 1e-3;
const RELAX_ITER: usize = 10;
/// Corrector iterations at or below which the step length grows.
const RELAX_FAST: usize = 3;
const RELAX_MAX_STEPS: usize = 5000;
/// Residual accepted on the path; only the final solve uses `newton_tol`.
const RELAX_ACCEPT: f64 = 1e-7;

/// Shooting residual on the relaxation path at `z = (lambda0, ln alpha)`.
fn path_residual(prob: &BvpProblem, z: &DVector<f64>) -> Option<DVector<f64>> {
    let m = z.len() - 1;
    residual_vec(&prob.with_relaxation(z[m].exp()), &z.rows(0, m).into_owned())
}

/// Central-difference Jacobian of [`path_residual`], `m x (m + 1)`.
fn path_jacobian(prob: &BvpProblem, z: &DVector<f64>) -> Option<DMatrix<f64>> {
    let cols: Vec<Option<DVector<f64>>> = (0..z.len())
        .into_par_iter()
        .map(|i| {
            let h = 1e-6 * (1.0 + z[i].abs());
            let mut plus = z.clone();
            plus[i] += h;
            let mut minus = z.clone();
            minus[i] -= h;
            Some((path_residual(prob, &plus)? - path_residual(prob, &minus)?) / (2.0 * h))
        })
        .collect();
    let mut jac = DMatrix::zeros(z.len() - 1, z.len());
    for (i, c) in cols.into_iter().enumerate() {
        jac.set_column(i, &c?);
    }
    Some(jac)
}

/// Solves `[J; row^T] x = [rhs; last]`.
fn bordered_solve(jac: &DMatrix<f64>, row: &DVector<f64>, rhs: &DVector<f64>, last: f64) -> Option<DVector<f64>> {
    let m = jac.nrows();
    let mut a = DMatrix::zeros(m + 1, m + 1);
    a.rows_mut(0, m).copy_from(jac);
    a.row_mut(m).copy_from(&row.transpose());
    let mut b = DVector::zeros(m + 1);
    b.rows_mut(0, m).copy_from(rhs);
    b[m] = last;
    dynamics::solve_linear(&a, &b).ok()
}

/// Unit tangent of the path, oriented along `prev`.
fn path_tangent(jac: &DMatrix<f64>, prev: &DVector<f64>) -> Option<DVector<f64>> {
    let t = bordered_solve(jac, prev, &DVector::zeros(jac.nrows()), 1.0)?;
    let norm = t.norm();
    (norm.is_finite() && norm > 0.0).then(|| t / norm)
}

/// Newton corrector on the hyperplane through `pred` orthogonal to `tau`,
/// with Broyden updates of `jac`. Returns the point and the iterations used.
fn path_correct(
    prob: &BvpProblem,
    pred: &DVector<f64>,
    tau: &DVector<f64>,
    jac: &mut DMatrix<f64>,
    tol: f64,
) -> Option<(DVector<f64>, usize)> {
    let mut z = pred.clone();
    let mut r = path_residual(prob, &z)?;
    let mut fresh = false;
    for it in 0..RELAX_ITER {
        if r.norm() < tol {
            return Some((z, it));
        }
        let step = bordered_solve(jac, tau, &(-&r), -tau.dot(&(&z - pred)));
        let trial = step.as_ref().and_then(|d| Some((d, path_residual(prob, &(&z + d))?)));
        match trial {
            Some((d, rt)) if rt.norm() < r.norm() => {
                let dd = d.norm_squared();
                if dd > 0.0 {
                    let miss = &rt - &r - &*jac * d;
                    *jac += miss * d.transpose() / dd;
                }
                let slow = rt.norm() > STALL_RATIO * r.norm();
                z += d;
                r = rt;
                fresh = false;
                if slow {
                    *jac = path_jacobian(prob, &z)?;
                    fresh = true;
                }
            }
            _ if fresh => return None,
            _ => {
                *jac = path_jacobian(prob, &z)?;
                fresh = true;
            }
        }
    }
    (r.norm() < tol).then_some((z, RELAX_ITER))
}

/// Continuation in the off-mask gain `alpha`, from the unconstrained
/// problem at `alpha = 1` down to the sparse one at `alpha = 0`.
///
/// Targets far from the identity need costates that reach bracket
/// directions, and Newton from a cold start rarely finds them. The path in
/// `(lambda0, ln alpha)` can turn back on itself, so it is followed by
/// pseudo-arclength continuation with adaptive steps.
fn relaxation_path(prob: &BvpProblem) -> Option<Attempt> {
    let n = prob.n();
    let m = n * n;
    let stop = RELAX_FLOOR.ln();
    let tol = prob.options.newton_tol.max(RELAX_ACCEPT);
    let mut dense = prob.with_relaxation(1.0);
    dense.options.max_iter = prob.options.max_iter;
    let first = newton(&dense, DMatrix::zeros(n, n), &mut None, true);
    if !first.converged {
        return None;
    }
    let mut iterations = first.iterations;
    let mut z = DVector::zeros(m + 1);
    z.rows_mut(0, m)
        .copy_from(&DVector::from_column_slice(first.lambda0.as_slice()));
    let mut jac = path_jacobian(prob, &z)?;
    let mut down = DVector::zeros(m + 1);
    down[m] = -1.0;
    let mut tau = path_tangent(&jac, &down)?;
    let mut h = RELAX_FIRST_STEP;
    let mut steps = 0;
    while z[m] > stop {
        steps += 1;
        if steps > RELAX_MAX_STEPS || z[m] > 1.0 {
            return None;
        }
        let pred = &z + &tau * h;
        let mut trial_jac = jac.clone();
        match path_correct(prob, &pred, &tau, &mut trial_jac, tol) {
            Some((next, it)) => {
                iterations += it;
                tau = path_tangent(&trial_jac, &tau)?;
                z = next;
                jac = trial_jac;
                if it <= RELAX_FAST {
                    h = (h * 1.3).min(RELAX_MAX_STEP);
                }
            }
            None => {
                iterations += RELAX_ITER;
                h *= 0.5;
                if h < RELAX_MIN_STEP {
                    return None;
                }
            }
        }
    }
    let mut sparse = prob.with_relaxation(0.0);
    sparse.options.max_iter = prob.options.max_iter;
    let lambda0 = DMatrix::from_column_slice(n, n, z.rows(0, m).as_slice());
    let a = newton_from(&sparse, lambda0);
    a.converged.then_some(Attempt {
        iterations: iterations + a.iterations,
        ..a
    })
}

/// Initial costate for restart `k >= 1`: entries uniform in `[-0.5, 0.5]`
/// from a stream seeded with `seed + k`.
pub fn restart_guess(n: usize, seed: u64, k: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
    DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.5..=0.5))
}

/// Picks the lowest-residual converged attempt, else the lowest residual
/// overall; ties go to the lower index.
fn pick_best(attempts: &[(usize, Attempt)]) -> usize {
    let key = |a: &Attempt| (!a.converged, a.residual);
    let mut best = 0;
    for (idx, (_, a)) in attempts.iter().enumerate().skip(1) {
        let (bc, br) = key(&attempts[best].1);
        let (c, r) = key(a);
        if (c, r) < (bc, br) || (c == bc && r.total_cmp(&br).is_lt()) {
            best = idx;
        }
    }
    best
}

/// Solves the two-point boundary value problem by shooting on `lambda(t0)`.
///
/// Starts from the zero costate; if that does not converge, runs all seeded
/// restarts. When none of those converge, follows the off-mask relaxation
/// path from the dense problem. Never fails on non-convergence: the returned
/// solution carries `converged = false` and its diagnostics.
pub fn solve_bvp(prob: &BvpProblem) -> Result<ExtremalSolution> {
    let n = prob.n();
    let mut attempts = vec![(0usize, newton_from(prob, DMatrix::zeros(n, n)))];
    if !attempts[0].1.converged && prob.options.restarts > 0 {
        let more: Vec<(usize, Attempt)> = (1..=prob.options.restarts)
            .into_par_iter()
            .map(|k| (k, newton_from(prob, restart_guess(n, prob.options.seed, k))))
            .collect();
        attempts.extend(more);
    }
    let best = pick_best(&attempts);
    if !attempts[best].1.converged {
        if let Some(a) = relaxation_path(prob) {
            return build_solution(prob, a.lambda0, true, a.iterations, 0);
        }
    }
    let (restart_used, attempt) = attempts.swap_remove(best);
    let iterations = attempt.iterations;
    build_solution(prob, attempt.lambda0, attempt.converged, iterations, restart_used)
}

fn build_solution(
    prob: &BvpProblem,
    lambda0: DMatrix<f64>,
    converged: bool,
    iterations: usize,
    restart_used: usize,
) -> Result<ExtremalSolution> {
    let n = prob.n();
    let mask = prob.graph.mask();
    let (trajectory, lambda0) = match shoot(prob, &lambda0)? {
        Shot::Completed(t) => (t, lambda0),
        Shot::Diverged { .. } => {
            // Nothing usable was found; report the trivial extremal.
            let zero = DMatrix::zeros(n, n);
            match shoot(prob, &zero)? {
                Shot::Completed(t) => (t, zero),
                Shot::Diverged { time } => return Err(Error::NonFinite(format!("zero costate diverged at {time}"))),
            }
        }
    };
    let schedule = trajectory.schedule(&mask)?;
    let residual_norm = (trajectory.final_state() - &prob.target).norm();
    Ok(ExtremalSolution {
        target: prob.target.clone(),
        lambda0,
        cost: cost(&schedule),
        residual_norm,
        converged: converged && residual_norm < prob.options.newton_tol,
        iterations,
        restart_used,
        schedule,
        trajectory,
        segments: Vec::new(),
    })
}

/// Solves `I -> T_1 -> ... -> T` as consecutive problems on equal
/// sub-intervals of `[t0, tf]`.
///
/// Segment `k` is solved from the identity with target `T_k T_(k-1)^-1`;
/// the composed state is `X_k(t) T_(k-1)` and the composed costate
/// `lambda_k(t) T_(k-1)^-T`, which keeps the weights unchanged.
pub fn solve_with_waypoints(prob: &BvpProblem, waypoints: &[DMatrix<f64>]) -> Result<ExtremalSolution> {
    if waypoints.is_empty() {
        return solve_bvp(prob);
    }
    let n = prob.n();
    for (k, wp) in waypoints.iter().enumerate() {
        let report = check_feasible(&prob.graph, wp)?;
        if !report.feasible {
            return Err(Error::Infeasible(format!("waypoint {}: {}", k + 1, report.reason)));
        }
    }
    let m = waypoints.len() + 1;
    let span = prob.tf - prob.t0;
    let bound = |k: usize| {
        if k == m {
            prob.tf
        } else {
            prob.t0 + span * k as f64 / m as f64
        }
    };

    let mut previous = DMatrix::<f64>::identity(n, n);
    let mut segments = Vec::with_capacity(m);
    for (k, next) in waypoints.iter().chain(std::iter::once(&prob.target)).enumerate() {
        let relative = next * inverse(&previous)?;
        let seg = BvpProblem::new(
            prob.graph.clone(),
            relative,
            bound(k),
            bound(k + 1),
            prob.options.clone(),
        )?;
        segments.push((solve_bvp(&seg)?, previous.clone()));
        previous = next.clone();
    }

    let mut grid = Vec::new();
    let mut states = Vec::new();
    let mut costates = Vec::new();
    let mut schedule: Option<WeightSchedule> = None;
    for (sol, base) in &segments {
        let base_inv_t = inverse(base)?.transpose();
        grid.extend_from_slice(&sol.trajectory.grid);
        states.extend(sol.trajectory.states.iter().map(|x| x * base));
        costates.extend(sol.trajectory.costates.iter().map(|l| l * &base_inv_t));
        schedule = Some(match schedule {
            None => sol.schedule.clone(),
            Some(s) => s.concat(&sol.schedule)?,
        });
    }
    let schedule = schedule.expect("at least one segment");
    let trajectory = ExtremalTrajectory { grid, states, costates };
    let residual_norm = (trajectory.final_state() - &prob.target).norm();
    let segments: Vec<ExtremalSolution> = segments.into_iter().map(|(s, _)| s).collect();
    Ok(ExtremalSolution {
        target: prob.target.clone(),
        lambda0: segments[0].lambda0.clone(),
        cost: cost(&schedule),
        residual_norm,
        converged: segments.iter().all(|s| s.converged),
        iterations: segments.iter().map(|s| s.iterations).sum(),
        restart_used: segments.iter().map(|s| s.restart_used).max().unwrap_or(0),
        schedule,
        trajectory,
        segments,
    })
}
