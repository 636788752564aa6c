//! Weighted adjacency abstraction shared by the chain, hitting and spectral code.
//!
//! Edge weights are small integers: an ordinary edge has weight 1 and a
//! self-loop has weight 2, so that `degree(v)` is the sum of weights and the
//! simple random walk moves to `u` with probability `w(v, u) / degree(v)`.

use crate::error::{Error, Result};

pub trait Adjacency: Sync {
    fn vertex_count(&self) -> usize;

    /// Calls `f(neighbor, weight)` for every incident edge, self-loops included.
    fn for_each_neighbor<F: FnMut(usize, u32)>(&self, v: usize, f: F);

    /// Name of the region containing `v`, used in CSV exports.
    fn region_name(&self, _v: usize) -> String {
        "graph".to_string()
    }

    fn degree(&self, v: usize) -> u64 {
        let mut d = 0u64;
        self.for_each_neighbor(v, |_, w| d += w as u64);
        d
    }

    fn total_degree(&self) -> u64 {
        (0..self.vertex_count()).map(|v| self.degree(v)).sum()
    }

    /// Number of vertices reachable from vertex 0.
    fn reachable_count(&self) -> usize {
        let n = self.vertex_count();
        if n == 0 {
            return 0;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            self.for_each_neighbor(v, |u, _| {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            });
        }
        count
    }

    fn ensure_connected(&self) -> Result<()> {
        let total = self.vertex_count();
        let reached = self.reachable_count();
        if reached == total {
            Ok(())
        } else {
            Err(Error::Disconnected { reached, total })
        }
    }

    /// Number of non-loop edges.
    fn edge_count(&self) -> u64 {
        let mut twice = 0u64;
        for v in 0..self.vertex_count() {
            self.for_each_neighbor(v, |u, _| {
                if u != v {
                    twice += 1;
                }
            });
        }
        twice / 2
    }

    /// Connected and acyclic once self-loops are ignored.
    fn is_tree(&self) -> bool {
        let n = self.vertex_count();
        n > 0 && self.edge_count() == (n as u64 - 1) && self.reachable_count() == n
    }
}

/// Small explicit graph, used for hand-built test chains.
#[derive(Clone, Debug, Default)]
pub struct EdgeListGraph {
    adjacency: Vec<Vec<(usize, u32)>>,
}

impl EdgeListGraph {
    pub fn new(vertex_count: usize) -> Self {
        Self { adjacency: vec![Vec::new(); vertex_count] }
    }

    pub fn from_edges(vertex_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::new(vertex_count);
        for &(a, b) in edges {
            g.add_edge(a, b)?;
        }
        Ok(g)
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..=n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n + 1, &edges).expect("path edges are in range")
    }

    /// Adds an undirected edge; `a == b` adds a self-loop of weight 2.
    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<()> {
        let n = self.adjacency.len();
        if a >= n || b >= n {
            return Err(Error::Addressing(format!("edge ({a}, {b}) in a {n}-vertex graph")));
        }
        if a == b {
            self.adjacency[a].push((a, 2));
        } else {
            self.adjacency[a].push((b, 1));
            self.adjacency[b].push((a, 1));
        }
        Ok(())
    }
}

impl Adjacency for EdgeListGraph {
    fn vertex_count(&self) -> usize {
        self.adjacency.len()
    }

    fn for_each_neighbor<F: FnMut(usize, u32)>(&self, v: usize, mut f: F) {
        for &(u, w) in &self.adjacency[v] {
            f(u, w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_is_tree_with_expected_degrees() {
        let g = EdgeListGraph::path(3);
        assert!(g.is_tree());
        assert_eq!(g.total_degree(), 6);
        assert_eq!(g.degree(0), 1);
        assert_eq!(g.degree(1), 2);
    }

    #[test]
    fn disconnected_graph_is_reported() {
        let g = EdgeListGraph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        assert!(matches!(g.ensure_connected(), Err(Error::Disconnected { reached: 2, total: 4 })));
        assert!(!g.is_tree());
    }

    #[test]
    fn self_loop_counts_twice() {
        let mut g = EdgeListGraph::path(1);
        g.add_edge(1, 1).unwrap();
        assert_eq!(g.degree(1), 3);
        assert_eq!(g.edge_count(), 1);
        assert!(g.is_tree());
    }
}
