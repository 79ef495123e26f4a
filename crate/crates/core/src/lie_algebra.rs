//! Lie-algebraic controllability of `dX/dt = sum w_ij I_ij X`.
//!
//! Each edge `(i, j)` contributes the vector field `g_ij(X) = I_ij X`, where
//! `I_ij` is the index matrix with a single one at row `i`, column `j`.
//! Fields of the form `X -> A X` are identified with their coefficient
//! matrix `A`; for two such fields the Jacobian-based bracket is
//! `[A X, B X] = (B A - A B) X`.
//!
//! Indices in this module's API are 0-based.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{determinant, matrix_rank, max_abs};
use crate::error::{dim_err, Result};
use crate::graph::Graph;

/// Default relative pivot threshold for rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Handle for the edge field `g_ij(X) = I_ij X`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IndexField {
    pub i: usize,
    pub j: usize,
}

impl IndexField {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }
}

/// Linear combination `sum coeffs_ij g_ij`, i.e. the field `X -> coeffs X`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraElement {
    pub coeffs: DMatrix<f64>,
}

impl AlgebraElement {
    pub fn zero(n: usize) -> Self {
        Self {
            coeffs: DMatrix::zeros(n, n),
        }
    }

    /// The element `g_ij` itself.
    pub fn unit(n: usize, i: usize, j: usize) -> Self {
        let mut coeffs = DMatrix::zeros(n, n);
        coeffs[(i, j)] = 1.0;
        Self { coeffs }
    }

    pub fn from_field(n: usize, f: IndexField) -> Self {
        Self::unit(n, f.i, f.j)
    }

    pub fn n(&self) -> usize {
        self.coeffs.nrows()
    }

    /// Evaluates the vector field at `x`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.coeffs * x
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }
}

/// Exact bracket of two index fields in an `n`-vertex system.
///
/// `[g_ij, g_kl] = g_kj [l == i] - g_il [j == k]`. Both terms survive when
/// `j == k` and `i == l`, giving `g_jj - g_ii`.
pub fn bracket(n: usize, a: IndexField, b: IndexField) -> AlgebraElement {
    let mut out = AlgebraElement::zero(n);
    if b.j == a.i {
        out.coeffs[(b.i, a.j)] += 1.0;
    }
    if a.j == b.i {
        out.coeffs[(a.i, b.j)] -= 1.0;
    }
    out
}

/// Bracket of two general elements: `B A - A B`.
pub fn bracket_general(a: &AlgebraElement, b: &AlgebraElement) -> Result<AlgebraElement> {
    if a.n() != b.n() || !a.coeffs.is_square() || !b.coeffs.is_square() {
        return Err(dim_err(
            format!("two {n}x{n} elements", n = a.n()),
            format!("{}x{}", b.coeffs.nrows(), b.coeffs.ncols()),
        ));
    }
    Ok(AlgebraElement {
        coeffs: &b.coeffs * &a.coeffs - &a.coeffs * &b.coeffs,
    })
}

/// Orthonormal basis of the smallest commutator-closed matrix space
/// containing `I_ij` for every edge.
#[derive(Debug, Clone)]
pub struct GeneratedAlgebra {
    n: usize,
    basis: Vec<DMatrix<f64>>,
}

impl GeneratedAlgebra {
    pub fn dimension(&self) -> usize {
        self.basis.len()
    }

    /// Frobenius norm of the part of `m` orthogonal to the span.
    pub fn residual(&self, m: &DMatrix<f64>) -> f64 {
        project_out(&self.basis, m.clone()).norm()
    }

    pub fn contains(&self, m: &DMatrix<f64>, tol: f64) -> bool {
        self.residual(m) <= tol * m.norm().max(f64::MIN_POSITIVE)
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

fn project_out(basis: &[DMatrix<f64>], mut v: DMatrix<f64>) -> DMatrix<f64> {
    // Two passes of modified Gram-Schmidt.
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(&v);
            v -= q * c;
        }
    }
    v
}

/// Computes the involutive closure of the edge fields.
///
/// Works on coefficient matrices only. Every new basis element is bracketed
/// with all earlier ones until a full pass adds nothing or the space fills
/// all `n^2` dimensions. A candidate joins the basis when its residual after
/// projection exceeds `rank_tol` times its largest absolute entry.
pub fn generated_algebra(g: &Graph, rank_tol: f64) -> GeneratedAlgebra {
    let n = g.n();
    let full = n * n;
    let mut basis: Vec<DMatrix<f64>> = Vec::new();
    let mut elements: Vec<DMatrix<f64>> = Vec::new();

    let try_add = |m: DMatrix<f64>, basis: &mut Vec<DMatrix<f64>>, elements: &mut Vec<DMatrix<f64>>| {
        let scale = max_abs(&m);
        if scale == 0.0 || basis.len() == full {
            return;
        }
        let r = project_out(basis, m.clone());
        if max_abs(&r) > rank_tol * scale {
            let norm = r.norm();
            basis.push(r / norm);
            elements.push(m);
        }
    };

    for (i, j) in g.edges() {
        try_add(AlgebraElement::unit(n, i, j).coeffs, &mut basis, &mut elements);
    }
    let mut k = 0;
    while k < elements.len() && basis.len() < full {
        for l in 0..k {
            let c = &elements[l] * &elements[k] - &elements[k] * &elements[l];
            try_add(c, &mut basis, &mut elements);
        }
        k += 1;
    }
    GeneratedAlgebra { n, basis }
}

/// Dimension of the generated Lie algebra (at any invertible `X`).
pub fn generated_algebra_dimension(g: &Graph, rank_tol: f64) -> usize {
    generated_algebra(g, rank_tol).dimension()
}

/// Outcome of the positive-determinant and connectivity test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub det: f64,
    pub connected: bool,
    pub feasible: bool,
    pub reason: String,
}

/// Decides whether `t` is computable by local weights on `g`: it must have
/// positive determinant and `g` must be connected.
///
/// Determinants below `n * eps * max|T|^n` in magnitude are reported as
/// exactly zero.
pub fn check_feasible(g: &Graph, t: &DMatrix<f64>) -> Result<FeasibilityReport> {
    let n = g.n();
    if t.nrows() != n || t.ncols() != n {
        return Err(dim_err(
            format!("{n}x{n} target"),
            format!("{}x{}", t.nrows(), t.ncols()),
        ));
    }
    let mut det = determinant(t)?;
    let zero_tol = n as f64 * f64::EPSILON * max_abs(t).powi(n as i32);
    if det.abs() <= zero_tol {
        det = 0.0;
    }
    let connected = g.is_connected();
    let mut reasons = Vec::new();
    if det == 0.0 {
        reasons.push("determinant is zero");
    } else if det < 0.0 {
        reasons.push("determinant is negative");
    }
    if !connected {
        reasons.push("graph is disconnected");
    }
    let feasible = reasons.is_empty();
    let reason = if feasible {
        "determinant is positive and graph is connected".to_string()
    } else {
        reasons.join("; ")
    };
    Ok(FeasibilityReport {
        det,
        connected,
        feasible,
        reason,
    })
}

/// Local controllability at `x`: the graph is connected and `x` has full
/// numerical rank.
pub fn controllable_at(g: &Graph, x: &DMatrix<f64>, rank_tol: f64) -> bool {
    x.nrows() == g.n() && x.ncols() == g.n() && g.is_connected() && matrix_rank(x, rank_tol) == g.n()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(i: usize, j: usize) -> IndexField {
        IndexField::new(i - 1, j - 1)
    }

    #[test]
    fn bracket_cases() {
        let n = 4;
        assert_eq!(
            bracket(n, field(1, 2), field(2, 3)).coeffs,
            -AlgebraElement::unit(n, 0, 2).coeffs
        );
        assert_eq!(bracket(n, field(1, 3), field(2, 1)), AlgebraElement::unit(n, 1, 2));
        assert!(bracket(n, field(1, 2), field(3, 4)).is_zero());
        let b = bracket(n, field(1, 2), field(2, 1));
        let expected = AlgebraElement::unit(n, 1, 1).coeffs - AlgebraElement::unit(n, 0, 0).coeffs;
        assert_eq!(b.coeffs, expected);
    }

    #[test]
    fn general_bracket_matches_index_bracket() {
        let a = AlgebraElement::unit(3, 0, 1);
        let b = AlgebraElement::unit(3, 1, 2);
        assert_eq!(bracket_general(&a, &b).unwrap(), bracket(3, field(1, 2), field(2, 3)));
        assert!(bracket_general(&a, &a).unwrap().is_zero());
        assert!(bracket_general(&AlgebraElement::zero(3), &b).unwrap().is_zero());
        assert!(bracket_general(&a, &AlgebraElement::zero(2)).is_err());
    }

    #[test]
    fn closure_dimensions() {
        assert_eq!(
            generated_algebra_dimension(&Graph::path(3).unwrap(), DEFAULT_RANK_TOL),
            9
        );
        assert_eq!(
            generated_algebra_dimension(&Graph::new(3, &[], false).unwrap(), DEFAULT_RANK_TOL),
            3
        );
        let split = Graph::complete(2).unwrap().disjoint_union(&Graph::path(1).unwrap());
        assert_eq!(generated_algebra_dimension(&split, DEFAULT_RANK_TOL), 5);
    }

    fn t_cons(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, n, 1.0 / n as f64)
    }

    #[test]
    fn feasibility() {
        let g = Graph::path(3).unwrap();
        let r = check_feasible(&g, &t_cons(3)).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.det, 0.0);
        assert_eq!(r.reason, "determinant is zero");

        let k2 = Graph::complete(2).unwrap();
        let r = check_feasible(&k2, &DMatrix::from_row_slice(2, 2, &[1., 0., 0., -1.])).unwrap();
        assert!(!r.feasible && r.det < 0.0);

        let split = Graph::new(2, &[], false).unwrap();
        let r = check_feasible(&split, &DMatrix::identity(2, 2)).unwrap();
        assert!(!r.feasible && !r.connected);
        assert!(check_feasible(&g, &DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn report_json_shape() {
        let r = check_feasible(&Graph::path(2).unwrap(), &DMatrix::identity(2, 2)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 4);
        for k in ["det", "connected", "feasible", "reason"] {
            assert!(keys.contains(&k.to_string()));
        }
    }

    #[test]
    fn controllability() {
        let g = Graph::path(3).unwrap();
        assert!(controllable_at(&g, &DMatrix::identity(3, 3), DEFAULT_RANK_TOL));
        let singular = DMatrix::from_row_slice(3, 3, &[1., 0., 0., 0., 1., 0., 1., 1., 0.]);
        assert!(!controllable_at(&g, &singular, DEFAULT_RANK_TOL));
        let split = Graph::complete(2).unwrap().disjoint_union(&Graph::path(1).unwrap());
        assert!(!controllable_at(&split, &DMatrix::identity(3, 3), DEFAULT_RANK_TOL));
    }
}
