//! Undirected instance graphs in compressed sparse row layout.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Symmetric, self-loop-free neighbor structure over `N` instances.
///
/// Neighbor lists are sorted ascending. Edge slots are numbered in CSR order,
/// so edge `e` with `offsets[u] <= e < offsets[u+1]` is the directed slot
/// `u -> neighbors[e]`; every undirected edge occupies two slots.
#[derive(Clone, PartialEq, Eq)]
pub struct Graph {
    offsets: Arc<[usize]>,
    neighbors: Arc<[usize]>,
}

impl Graph {
    /// Builds a graph from arbitrary (possibly directed, duplicated) pairs.
    /// Pairs are symmetrized and deduplicated; self-loops are dropped.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Construction(format!(
                    "edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                continue;
            }
            lists[u].push(v);
            lists[v].push(u);
        }
        Ok(Self::from_lists(lists))
    }

    fn from_lists(mut lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        Self {
            offsets: offsets.into(),
            neighbors: neighbors.into(),
        }
    }

    pub fn empty(n: usize) -> Self {
        Self::from_lists(vec![Vec::new(); n])
    }

    pub fn complete(n: usize) -> Self {
        Self::from_lists((0..n).map(|u| (0..n).filter(|&v| v != u).collect()).collect())
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Number of directed edge slots (twice the undirected edge count).
    pub fn num_slots(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn slot_range(&self, u: usize) -> std::ops::Range<usize> {
        self.offsets[u]..self.offsets[u + 1]
    }

    pub fn slot_target(&self, e: usize) -> usize {
        self.neighbors[e]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges as `(u, v)` with `u < v`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .copied()
                .filter(move |&v| u < v)
                .map(move |v| (u, v))
        })
    }

    /// Fraction of the `N(N-1)/2` possible pairs that are edges.
    pub fn density(&self) -> f64 {
        let n = self.num_nodes() as f64;
        if n < 2.0 {
            return 0.0;
        }
        2.0 * self.num_edges() as f64 / (n * (n - 1.0))
    }

    /// Exhaustive structural check: symmetric, no self-loops, sorted lists,
    /// in-range indices.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        for u in 0..n {
            let list = self.neighbors(u);
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Construction(format!("neighbors of {u} not sorted")));
            }
            for &v in list {
                if v >= n {
                    return Err(Error::Construction(format!("neighbor {v} of {u} out of range")));
                }
                if v == u {
                    return Err(Error::Construction(format!("self-loop at {u}")));
                }
                if !self.has_edge(v, u) {
                    return Err(Error::Construction(format!("edge {u}->{v} has no reverse")));
                }
            }
        }
        Ok(())
    }

    /// Subgraph induced by `nodes`; node `i` of the result is `nodes[i]`.
    pub fn induced(&self, nodes: &[usize]) -> Graph {
        let mut local = vec![usize::MAX; self.num_nodes()];
        for (i, &u) in nodes.iter().enumerate() {
            local[u] = i;
        }
        let lists = nodes
            .iter()
            .map(|&u| {
                self.neighbors(u)
                    .iter()
                    .filter_map(|&v| (local[v] != usize::MAX).then_some(local[v]))
                    .collect()
            })
            .collect();
        Self::from_lists(lists)
    }

    /// Relabels node `u` as `perm[u]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.num_nodes();
        let mut lists = vec![Vec::new(); n];
        for u in 0..n {
            lists[perm[u]] = self.neighbors(u).iter().map(|&v| perm[v]).collect();
        }
        Self::from_lists(lists)
    }

    /// Disjoint union; nodes of `other` are shifted by `self.num_nodes()`.
    pub fn disjoint_union(&self, other: &Graph) -> Graph {
        let shift = self.num_nodes();
        let lists = (0..shift)
            .map(|u| self.neighbors(u).to_vec())
            .chain((0..other.num_nodes()).map(|u| other.neighbors(u).iter().map(|v| v + shift).collect()))
            .collect();
        Self::from_lists(lists)
    }
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Graph(nodes={}, edges={})", self.num_nodes(), self.num_edges())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetrizes_and_deduplicates() {
        let g = Graph::from_edges(4, [(0, 1), (1, 0), (2, 3)]).unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(3), &[2]);
        g.validate().unwrap();
    }

    #[test]
    fn drops_self_loops_and_rejects_out_of_range() {
        let g = Graph::from_edges(2, [(0, 0), (0, 1)]).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert!(Graph::from_edges(2, [(0, 2)]).is_err());
    }

    #[test]
    fn induced_and_permuted() {
        let g = Graph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let sub = g.induced(&[1, 2, 3]);
        assert_eq!(sub.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
        let p = g.permuted(&[3, 2, 1, 0]);
        assert_eq!(p.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2), (2, 3)]);
        assert!(p.has_edge(3, 2));
    }

    #[test]
    fn complete_graph_density_is_one() {
        let g = Graph::complete(5);
        assert_eq!(g.num_edges(), 10);
        assert_eq!(g.density(), 1.0);
        g.validate().unwrap();
    }
}
