#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use netxform::dynamics::WeightSchedule;
use netxform::Graph;
use rand::Rng;

pub fn t_swap() -> DMatrix<f64> {
    DMatrix::from_row_slice(4, 4, &[0., 1., 0., 0., 1., 0., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0.])
}

pub fn t_one() -> DMatrix<f64> {
    DMatrix::from_row_slice(4, 4, &[0., 1., 0., 0., 0., 0., 1., 0., 1., 0., 0., 0., 0., 0., 0., 1.])
}

pub fn t_cons(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, n, 1.0 / n as f64)
}

/// Identity with the first row replaced by the average.
pub fn t_cons2(n: usize) -> DMatrix<f64> {
    let mut t = DMatrix::identity(n, n);
    t.row_mut(0).fill(1.0 / n as f64);
    t
}

pub fn transposition(n: usize, a: usize, b: usize) -> DMatrix<f64> {
    let mut t = DMatrix::identity(n, n);
    t.swap_rows(a, b);
    t
}

/// `exp(-L dt)` from the eigen-decomposition of the symmetric Laplacian.
pub fn expm_laplacian_oracle(l: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(l.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| (-v * dt).exp()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Connected graph: a random spanning tree plus random extra edges.
pub fn random_connected_graph<R: Rng>(rng: &mut R, n: usize) -> Graph {
    let mut edges = Vec::new();
    for v in 2..=n {
        edges.push((rng.gen_range(1..v), v));
    }
    for i in 1..=n {
        for j in (i + 1)..=n {
            if rng.gen_bool(0.25) {
                edges.push((i, j));
            }
        }
    }
    Graph::new(n, &edges, false).unwrap()
}

pub fn random_conforming<R: Rng>(rng: &mut R, g: &Graph, scale: f64) -> DMatrix<f64> {
    let mask = g.mask();
    DMatrix::from_fn(g.n(), g.n(), |i, j| {
        if mask.get(i, j) {
            rng.gen_range(-scale..=scale)
        } else {
            0.0
        }
    })
}

/// Piecewise-linear schedule with `intervals` random samples.
pub fn random_schedule<R: Rng>(rng: &mut R, g: &Graph, t0: f64, tf: f64, intervals: usize) -> WeightSchedule {
    let weights = (0..=intervals).map(|_| random_conforming(rng, g, 1.0)).collect();
    WeightSchedule::new(g.mask(), t0, tf, weights).unwrap()
}

pub fn random_invertible<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    loop {
        let x: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..=1.0)) + DMatrix::identity(n, n) * 0.5;
        if x.determinant().abs() > 0.1 {
            return x;
        }
    }
}

pub fn index_matrix(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    m[(i, j)] = 1.0;
    m
}

/// Dimension of the commutator closure of `I_ij` over the edges, by
/// level-wise expansion of integer matrices and SVD rank.
pub fn brute_force_closure_dim(g: &Graph) -> usize {
    let n = g.n();
    let vec_rank = |ms: &[DMatrix<f64>]| {
        if ms.is_empty() {
            return 0;
        }
        let cols: Vec<_> = ms
            .iter()
            .map(|m| nalgebra::DVector::from_column_slice(m.as_slice()))
            .collect();
        let a = DMatrix::from_columns(&cols);
        a.svd(false, false).rank(1e-9)
    };
    let mut set: Vec<DMatrix<f64>> = g.edges().map(|(i, j)| index_matrix(n, i, j)).collect();
    let mut rank = vec_rank(&set);
    loop {
        let mut next = set.clone();
        for a in &set {
            for b in &set {
                let c = b * a - a * b;
                if c.iter().any(|&v| v != 0.0) && !next.contains(&c) {
                    next.push(c);
                }
            }
        }
        // Keep a spanning subset to bound growth.
        let mut kept: Vec<DMatrix<f64>> = Vec::new();
        let mut r = 0;
        for m in next {
            kept.push(m);
            let nr = vec_rank(&kept);
            if nr == r {
                kept.pop();
            } else {
                r = nr;
            }
        }
        if r == rank {
            return r;
        }
        rank = r;
        set = kept;
    }
}
