//! Integration of the drift-free matrix system `dX/dt = W(t) X` under a
//! sparsity-conforming weight schedule.

pub mod linalg;

use nalgebra::{DMatrix, DVector};

pub use linalg::{determinant, expm, inverse, matrix_rank, max_abs, numerical_rank, solve_linear};

use crate::error::{dim_err, Error, Result};
use crate::graph::SparsityMask;

/// Uniformly sampled stretch of a schedule. Weights between samples are
/// linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulePiece {
    t0: f64,
    tf: f64,
    weights: Vec<DMatrix<f64>>,
}

impl SchedulePiece {
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn intervals(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn time(&self, k: usize) -> f64 {
        let kk = self.intervals();
        if k == kk {
            self.tf
        } else {
            self.t0 + (self.tf - self.t0) * k as f64 / kk as f64
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.weights.len()).map(|k| self.time(k)).collect()
    }

    /// Linear interpolation, clamped to the piece.
    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        let kk = self.intervals();
        let u = ((t - self.t0) / (self.tf - self.t0)).clamp(0.0, 1.0) * kk as f64;
        let k = (u.floor() as usize).min(kk - 1);
        let frac = u - k as f64;
        if frac == 0.0 {
            return self.weights[k].clone();
        }
        if frac == 1.0 {
            return self.weights[k + 1].clone();
        }
        &self.weights[k] * (1.0 - frac) + &self.weights[k + 1] * frac
    }
}

/// Time-gridded weight matrices `W(t)` conforming to a sparsity mask.
///
/// A schedule is a sequence of contiguous pieces. Weights are continuous
/// within a piece and may jump where one piece hands over to the next
/// (waypoint boundaries).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSchedule {
    mask: SparsityMask,
    pieces: Vec<SchedulePiece>,
}

impl WeightSchedule {
    /// Single-piece schedule on the uniform grid `t0 + k (tf - t0) / K`,
    /// `K = weights.len() - 1`.
    pub fn new(mask: SparsityMask, t0: f64, tf: f64, weights: Vec<DMatrix<f64>>) -> Result<Self> {
        let piece = Self::check_piece(&mask, t0, tf, weights, 0)?;
        Ok(Self {
            mask,
            pieces: vec![piece],
        })
    }

    /// All-zero schedule with `intervals` uniform intervals.
    pub fn zero(mask: SparsityMask, t0: f64, tf: f64, intervals: usize) -> Result<Self> {
        let n = mask.n();
        Self::new(mask, t0, tf, vec![DMatrix::zeros(n, n); intervals.max(1) + 1])
    }

    /// Constant schedule sampled at the two endpoints.
    pub fn constant(mask: SparsityMask, t0: f64, tf: f64, w: DMatrix<f64>) -> Result<Self> {
        Self::new(mask, t0, tf, vec![w.clone(), w])
    }

    fn check_piece(
        mask: &SparsityMask,
        t0: f64,
        tf: f64,
        weights: Vec<DMatrix<f64>>,
        offset: usize,
    ) -> Result<SchedulePiece> {
        if !(t0.is_finite() && tf.is_finite() && tf > t0) {
            return Err(Error::InvalidGrid(format!("need t0 < tf, got [{t0}, {tf}]")));
        }
        if weights.len() < 2 {
            return Err(Error::InvalidGrid("a schedule piece needs at least two samples".into()));
        }
        let n = mask.n();
        for (k, w) in weights.iter().enumerate() {
            if w.nrows() != n || w.ncols() != n {
                return Err(dim_err(format!("{n}x{n}"), format!("{}x{}", w.nrows(), w.ncols())));
            }
            if let Some((i, j)) = mask.violation(w) {
                return Err(Error::NonConforming {
                    index: offset + k,
                    i: i + 1,
                    j: j + 1,
                });
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("weight sample {}", offset + k)));
            }
        }
        Ok(SchedulePiece { t0, tf, weights })
    }

    /// Builds a schedule from contiguous `(t0, tf, samples)` pieces.
    pub fn from_pieces(mask: SparsityMask, pieces: Vec<(f64, f64, Vec<DMatrix<f64>>)>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::InvalidGrid("schedule has no pieces".into()));
        }
        let mut out = Vec::with_capacity(pieces.len());
        let mut offset = 0;
        for (t0, tf, w) in pieces {
            if let Some(prev) = out.last() {
                let prev: &SchedulePiece = prev;
                if (prev.tf - t0).abs() > 1e-12 * (1.0 + t0.abs()) {
                    return Err(Error::InvalidGrid(format!(
                        "piece starting at {t0} does not continue from {}",
                        prev.tf
                    )));
                }
            }
            let len = w.len();
            let t0 = out.last().map_or(t0, |p: &SchedulePiece| p.tf);
            out.push(Self::check_piece(&mask, t0, tf, w, offset)?);
            offset += len;
        }
        Ok(Self { mask, pieces: out })
    }

    /// Appends `other`, which must start where `self` ends.
    pub fn concat(&self, other: &WeightSchedule) -> Result<Self> {
        if self.mask != other.mask {
            return Err(dim_err("identical sparsity masks", "different masks"));
        }
        let pieces = self
            .pieces
            .iter()
            .chain(&other.pieces)
            .map(|p| (p.t0, p.tf, p.weights.clone()))
            .collect();
        Self::from_pieces(self.mask.clone(), pieces)
    }

    pub fn mask(&self) -> &SparsityMask {
        &self.mask
    }

    pub fn n(&self) -> usize {
        self.mask.n()
    }

    pub fn t0(&self) -> f64 {
        self.pieces[0].t0
    }

    pub fn tf(&self) -> f64 {
        self.pieces[self.pieces.len() - 1].tf
    }

    pub fn pieces(&self) -> &[SchedulePiece] {
        &self.pieces
    }

    /// Every `(t, W)` sample in time order. Piece boundaries appear twice,
    /// once as the left limit and once as the right limit.
    pub fn samples(&self) -> impl Iterator<Item = (f64, &DMatrix<f64>)> {
        self.pieces
            .iter()
            .flat_map(|p| p.weights.iter().enumerate().map(move |(k, w)| (p.time(k), w)))
    }

    fn piece_at(&self, t: f64, left_limit: bool) -> &SchedulePiece {
        let idx = self
            .pieces
            .iter()
            .position(|p| if left_limit { t <= p.tf } else { t < p.tf });
        &self.pieces[idx.unwrap_or(self.pieces.len() - 1)]
    }

    /// `W(t)`, taking the right limit at piece boundaries.
    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        self.piece_at(t, false).eval(t)
    }

    /// `W(t)`, taking the left limit at piece boundaries.
    pub fn eval_left(&self, t: f64) -> DMatrix<f64> {
        self.piece_at(t, true).eval(t)
    }

    /// Multiplies every weight by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            mask: self.mask.clone(),
            pieces: self
                .pieces
                .iter()
                .map(|p| SchedulePiece {
                    t0: p.t0,
                    tf: p.tf,
                    weights: p.weights.iter().map(|w| w * factor).collect(),
                })
                .collect(),
        }
    }
}

/// Gridded state-transition matrices with `X(t0) = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTrajectory {
    pub grid: Vec<f64>,
    pub states: Vec<DMatrix<f64>>,
    pub dets: Vec<f64>,
}

impl TransitionTrajectory {
    pub fn final_state(&self) -> &DMatrix<f64> {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Gridded node states `x(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub grid: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl StateTrajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory is never empty")
    }
}

/// One classical fourth-order Runge-Kutta step.
pub(crate) fn rk4_step<F>(f: &F, t: f64, y: &DMatrix<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}

/// Splits `steps` over the pieces in proportion to their length.
fn steps_per_piece(sched: &WeightSchedule, steps: usize) -> Vec<usize> {
    let total = sched.tf() - sched.t0();
    sched
        .pieces
        .iter()
        .map(|p| (((p.tf - p.t0) / total * steps as f64).round() as usize).max(1))
        .collect()
}

/// Integrates `dY/dt = W(t) Y` from `y0` with fixed-step RK4, recording `Y`
/// at every step endpoint.
fn integrate_linear(sched: &WeightSchedule, y0: DMatrix<f64>, steps: usize) -> Result<(Vec<f64>, Vec<DMatrix<f64>>)> {
    if steps == 0 {
        return Err(Error::InvalidGrid("steps must be positive".into()));
    }
    let mut grid = vec![sched.t0()];
    let mut states = vec![y0];
    for (piece, m) in sched.pieces.iter().zip(steps_per_piece(sched, steps)) {
        let h = (piece.tf - piece.t0) / m as f64;
        let f = |t: f64, y: &DMatrix<f64>| piece.eval(t) * y;
        for k in 0..m {
            let t = piece.t0 + h * k as f64;
            let y = rk4_step(&f, t, states.last().unwrap(), h);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("state at t = {}", t + h)));
            }
            states.push(y);
            grid.push(if k + 1 == m { piece.tf } else { t + h });
        }
    }
    Ok((grid, states))
}

/// Integrates the transition matrix from `X(t0) = I` over the schedule.
///
/// `steps` is the total number of RK4 steps, shared among schedule pieces in
/// proportion to their length.
pub fn integrate_transition(sched: &WeightSchedule, steps: usize) -> Result<TransitionTrajectory> {
    let n = sched.n();
    let (grid, states) = integrate_linear(sched, DMatrix::identity(n, n), steps)?;
    let mut dets = Vec::with_capacity(states.len());
    for (t, x) in grid.iter().zip(&states) {
        let d = determinant(x)?;
        if d <= 0.0 {
            return Err(Error::DeterminantSign(*t));
        }
        dets.push(d);
    }
    Ok(TransitionTrajectory { grid, states, dets })
}

/// Integrates the node states `dx/dt = W(t) x` from `x(t0) = xi`.
pub fn propagate_state(sched: &WeightSchedule, xi: &DVector<f64>, steps: usize) -> Result<StateTrajectory> {
    if xi.len() != sched.n() {
        return Err(dim_err(sched.n(), xi.len()));
    }
    let y0 = DMatrix::from_column_slice(xi.len(), 1, xi.as_slice());
    let (grid, states) = integrate_linear(sched, y0, steps)?;
    Ok(StateTrajectory {
        grid,
        states: states.into_iter().map(|m| m.column(0).into_owned()).collect(),
    })
}

/// Largest relative gap between `det X(t)` and `exp(int_{t0}^t tr W)` over
/// the trajectory grid, with the integral taken by the trapezoid rule.
pub fn liouville_residual(traj: &TransitionTrajectory, sched: &WeightSchedule) -> f64 {
    let mut integral = 0.0;
    let mut worst = ((traj.dets[0] - 1.0) / traj.dets[0]).abs();
    for k in 1..traj.grid.len() {
        let (a, b) = (traj.grid[k - 1], traj.grid[k]);
        let tr_a = sched.eval(a).trace();
        let tr_b = sched.eval_left(b).trace();
        integral += 0.5 * (b - a) * (tr_a + tr_b);
        let d = traj.dets[k];
        worst = worst.max(((d - integral.exp()) / d).abs());
    }
    worst
}
