//! Information-exchange networks and their sparsity patterns.
//!
//! Vertices are 1-based at every external boundary (edge lists, JSON) and
//! 0-based internally.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected graph with mandatory self-loops.
///
/// Edges are stored as ordered 0-based pairs; both orientations of every
/// edge are present, as is `(i, i)` for every vertex.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from a 1-based edge list.
    ///
    /// In non-strict mode the edge set is symmetrized and self-loops are
    /// inserted. In strict mode a missing reciprocal edge or self-loop is an
    /// error. Connectivity is not checked here; see [`Graph::is_connected`].
    pub fn new(n: usize, edge_list: &[(usize, usize)], strict: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidVertexCount(n));
        }
        let mut edges = BTreeSet::new();
        for &(i, j) in edge_list {
            if i == 0 || j == 0 || i > n || j > n {
                return Err(Error::IndexOutOfRange { i, j, n });
            }
            edges.insert((i - 1, j - 1));
        }
        if strict {
            for v in 0..n {
                if !edges.contains(&(v, v)) {
                    return Err(Error::StrictViolation(format!(
                        "missing self-loop ({}, {})",
                        v + 1,
                        v + 1
                    )));
                }
            }
            for &(i, j) in &edges {
                if !edges.contains(&(j, i)) {
                    return Err(Error::StrictViolation(format!(
                        "edge ({}, {}) has no reciprocal ({}, {})",
                        i + 1,
                        j + 1,
                        j + 1,
                        i + 1
                    )));
                }
            }
        } else {
            let reversed: Vec<_> = edges.iter().map(|&(i, j)| (j, i)).collect();
            edges.extend(reversed);
            edges.extend((0..n).map(|v| (v, v)));
        }
        Ok(Self { n, edges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Ordered 0-based edge pairs, including self-loops, in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// 0-based membership test.
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i, j))
    }

    /// Number of ordered pairs in the edge set (the number of free weights).
    pub fn ordered_edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Number of unordered non-loop edges.
    pub fn undirected_edge_count(&self) -> usize {
        self.edges.iter().filter(|(i, j)| i < j).count()
    }

    /// Number of unordered edges counting each self-loop once.
    pub fn unordered_edge_count_with_loops(&self) -> usize {
        self.undirected_edge_count() + self.n
    }

    /// 1-based unordered non-loop edges, as written in config files.
    pub fn edge_list_one_based(&self) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .filter(|(i, j)| i < j)
            .map(|&(i, j)| (i + 1, j + 1))
            .collect()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .range((i, 0)..(i + 1, 0))
            .map(|&(_, j)| j)
            .filter(move |&j| j != i)
    }

    /// True iff every vertex is reachable from the first one.
    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for u in self.neighbors(v) {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Connected components as sorted 0-based vertex lists.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut label = vec![usize::MAX; self.n];
        let mut out = Vec::new();
        for start in 0..self.n {
            if label[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut comp = vec![start];
            label[start] = id;
            let mut k = 0;
            while k < comp.len() {
                let v = comp[k];
                k += 1;
                for u in self.neighbors(v) {
                    if label[u] == usize::MAX {
                        label[u] = id;
                        comp.push(u);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Graph Laplacian `D - A`, with self-loops excluded from both terms.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n, self.n);
        for &(i, j) in self.edges.iter().filter(|(i, j)| i != j) {
            l[(i, j)] = -1.0;
            l[(i, i)] += 1.0;
        }
        l
    }

    pub fn mask(&self) -> SparsityMask {
        let mut entries = vec![false; self.n * self.n];
        for &(i, j) in &self.edges {
            entries[i * self.n + j] = true;
        }
        SparsityMask { n: self.n, entries }
    }

    pub fn path(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidVertexCount(n));
        }
        let edges: Vec<_> = (1..n).map(|i| (i, i + 1)).collect();
        Self::new(n, &edges, false)
    }

    pub fn cycle(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidVertexCount(n));
        }
        let mut edges: Vec<_> = (1..n).map(|i| (i, i + 1)).collect();
        edges.push((n, 1));
        Self::new(n, &edges, false)
    }

    pub fn complete(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidVertexCount(n));
        }
        let mut edges = Vec::new();
        for i in 1..=n {
            for j in i + 1..=n {
                edges.push((i, j));
            }
        }
        Self::new(n, &edges, false)
    }

    /// Star with vertex 1 as the hub.
    pub fn star(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidVertexCount(n));
        }
        let edges: Vec<_> = (2..=n).map(|j| (1, j)).collect();
        Self::new(n, &edges, false)
    }

    /// Vertex-disjoint union; vertices of `other` are shifted past `self`'s.
    pub fn disjoint_union(&self, other: &Graph) -> Graph {
        let shift = self.n;
        let mut edges = self.edges.clone();
        edges.extend(other.edges.iter().map(|&(i, j)| (i + shift, j + shift)));
        Graph {
            n: self.n + other.n,
            edges,
        }
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            nodes: self.n,
            edges: self.edge_list_one_based().into_iter().map(|(i, j)| [i, j]).collect(),
            strict: false,
        }
    }
}

/// JSON form of a graph: `{"nodes": n, "edges": [[i, j], ...]}` with 1-based
/// indices. Self-loops and reciprocal edges are inserted on load unless
/// `"strict": true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: usize,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub strict: bool,
}

impl GraphSpec {
    pub fn build(&self) -> Result<Graph> {
        let edges: Vec<_> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::new(self.nodes, &edges, self.strict)
    }
}

/// Boolean pattern of a graph's edge set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    n: usize,
    entries: Vec<bool>,
}

impl SparsityMask {
    /// Mask with every entry allowed.
    pub fn full(n: usize) -> Self {
        Self {
            n,
            entries: vec![true; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// 0-based lookup.
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j]
    }

    /// Allowed entries in row-major order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n;
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(k, _)| (k / n, k % n))
    }

    pub fn count(&self) -> usize {
        self.entries.iter().filter(|&&b| b).count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// First off-pattern nonzero entry of `w`, if any.
    pub fn violation(&self, w: &DMatrix<f64>) -> Option<(usize, usize)> {
        for i in 0..self.n {
            for j in 0..self.n {
                if !self.get(i, j) && w[(i, j)] != 0.0 {
                    return Some((i, j));
                }
            }
        }
        None
    }

    pub fn conforms(&self, w: &DMatrix<f64>) -> bool {
        w.nrows() == self.n && w.ncols() == self.n && self.violation(w).is_none()
    }

    /// Zeroes every off-pattern entry in place.
    pub fn apply(&self, w: &mut DMatrix<f64>) {
        for i in 0..self.n {
            for j in 0..self.n {
                if !self.get(i, j) {
                    w[(i, j)] = 0.0;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_single_edge() {
        let g = Graph::new(2, &[(1, 2)], false).unwrap();
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn single_vertex() {
        let g = Graph::new(1, &[], false).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 0)]);
        assert!(g.is_connected());
        assert_eq!(g.mask().positions().collect::<Vec<_>>(), vec![(0, 0)]);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(matches!(
            Graph::new(3, &[(1, 4)], false),
            Err(Error::IndexOutOfRange { i: 1, j: 4, n: 3 })
        ));
        assert!(Graph::new(3, &[(0, 1)], false).is_err());
        assert!(Graph::new(0, &[], false).is_err());
    }

    #[test]
    fn strict_mode_violations() {
        assert!(matches!(
            Graph::new(2, &[(1, 2), (2, 1)], true),
            Err(Error::StrictViolation(_))
        ));
        assert!(matches!(
            Graph::new(2, &[(1, 1), (2, 2), (1, 2)], true),
            Err(Error::StrictViolation(_))
        ));
        let g = Graph::new(2, &[(1, 1), (2, 2), (1, 2), (2, 1)], true).unwrap();
        assert_eq!(g, Graph::complete(2).unwrap());
    }

    #[test]
    fn connectivity() {
        assert!(Graph::path(3).unwrap().is_connected());
        assert!(!Graph::new(3, &[], false).unwrap().is_connected());
        assert!(Graph::complete(5).unwrap().is_connected());
        let split = Graph::complete(2).unwrap().disjoint_union(&Graph::path(1).unwrap());
        assert!(!split.is_connected());
        assert_eq!(split.components(), vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn laplacians() {
        let l = Graph::complete(2).unwrap().laplacian();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let l = Graph::new(3, &[], false).unwrap().laplacian();
        assert_eq!(l, DMatrix::zeros(3, 3));
        let l = Graph::complete(3).unwrap().laplacian();
        assert_eq!(
            l,
            DMatrix::from_row_slice(3, 3, &[2.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0, -1.0, 2.0])
        );
    }

    #[test]
    fn figure_one_mask() {
        // W has zeros at (1,4), (2,3), (2,4) and their transposes.
        let g = Graph::new(4, &[(1, 2), (1, 3), (3, 4)], false).unwrap();
        let m = g.mask();
        let zeros = [(1, 4), (4, 1), (2, 3), (3, 2), (2, 4), (4, 2)];
        for i in 1..=4 {
            for j in 1..=4 {
                assert_eq!(m.get(i - 1, j - 1), !zeros.contains(&(i, j)), "({i},{j})");
            }
        }
        assert_eq!(m.count(), 10);
    }

    #[test]
    fn k2_mask_is_full() {
        assert_eq!(Graph::complete(2).unwrap().mask(), SparsityMask::full(2));
    }

    #[test]
    fn canonical_topologies() {
        assert_eq!(Graph::path(2).unwrap().unordered_edge_count_with_loops(), 3);
        assert_eq!(Graph::complete(4).unwrap().undirected_edge_count(), 6);
        assert!(Graph::cycle(2).is_err());
        assert_eq!(Graph::cycle(4).unwrap().undirected_edge_count(), 4);
        assert_eq!(Graph::star(5).unwrap().neighbors(0).count(), 4);
        let g = Graph::path(4).unwrap();
        assert_eq!(g.ordered_edge_count(), 4 + 2 * 3);
    }

    #[test]
    fn spec_round_trip() {
        let g = Graph::cycle(5).unwrap();
        let json = serde_json::to_string(&g.to_spec()).unwrap();
        let back: GraphSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.build().unwrap(), g);
    }

    #[test]
    fn mask_conformance() {
        let m = Graph::path(3).unwrap().mask();
        let mut w = DMatrix::from_element(3, 3, 1.0);
        assert_eq!(m.violation(&w), Some((0, 2)));
        m.apply(&mut w);
        assert!(m.conforms(&w));
    }
}
