//! Spatial KNN graphs over the feature grid and view graphs over support views.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::autodiff::InNeighborhoods;
use crate::error::{Result, VineError};

/// Directed graph with explicit edge list. Every constructor in this module
/// adds a self-loop to each node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    self_loops: bool,
}

impl Graph {
    /// Builds a graph, rejecting out-of-range indices and duplicate edges.
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>, self_loops: bool) -> Result<Self> {
        if num_nodes == 0 {
            return Err(VineError::InvalidArgument("graph needs at least one node".into()));
        }
        let mut seen = BTreeSet::new();
        for &(s, d) in &edges {
            if s >= num_nodes || d >= num_nodes {
                return Err(VineError::InvalidArgument(format!("edge ({s}, {d}) out of range")));
            }
            if !seen.insert((s, d)) {
                return Err(VineError::InvalidArgument(format!("duplicate edge ({s}, {d})")));
            }
        }
        Ok(Self {
            num_nodes,
            edges,
            self_loops,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn self_loops(&self) -> bool {
        self.self_loops
    }

    pub fn non_loop_edges(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.edges.iter().filter(|(s, d)| s != d)
    }

    pub fn in_neighborhoods(&self) -> Arc<InNeighborhoods> {
        Arc::new(InNeighborhoods::from_edges(self.num_nodes, &self.edges))
    }

    /// Same nodes, only the self-loops kept.
    pub fn self_loops_only(&self) -> Self {
        Self {
            num_nodes: self.num_nodes,
            edges: (0..self.num_nodes).map(|i| (i, i)).collect(),
            self_loops: true,
        }
    }

    /// One `src dst` line per edge, sorted.
    pub fn debug_dump(&self) -> String {
        let mut e = self.edges.clone();
        e.sort_unstable();
        let mut out = String::new();
        for (s, d) in e {
            let _ = writeln!(out, "{s} {d}");
        }
        out
    }
}

/// Each grid cell (row-major) gets edges to its `k` nearest distinct cells by
/// Euclidean distance, ties going to the smaller index, plus a self-loop.
pub fn knn_spatial_graph(height: usize, width: usize, k: usize) -> Result<Graph> {
    let n = height * width;
    if k == 0 || k >= n {
        return Err(VineError::InvalidArgument(format!(
            "knn k = {k} must lie in [1, {}] for a {height}x{width} grid",
            n.saturating_sub(1)
        )));
    }
    let mut edges = Vec::with_capacity(n * (k + 1));
    let mut cand: Vec<(usize, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let (ri, ci) = ((i / width) as isize, (i % width) as isize);
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| {
            let (rj, cj) = ((j / width) as isize, (j % width) as isize);
            (((ri - rj).pow(2) + (ci - cj).pow(2)) as usize, j)
        }));
        cand.sort_unstable();
        edges.push((i, i));
        edges.extend(cand[..k].iter().map(|&(_, j)| (i, j)));
    }
    Graph::new(n, edges, true)
}

/// Star over `num_views` nodes with node 0 as hub, plus self-loops.
pub fn star_view_graph(num_views: usize) -> Result<Graph> {
    if num_views == 0 {
        return Err(VineError::InvalidArgument("view graph needs at least one view".into()));
    }
    let mut edges: Vec<_> = (0..num_views).map(|i| (i, i)).collect();
    for r in 1..num_views {
        edges.push((0, r));
        edges.push((r, 0));
    }
    Graph::new(num_views, edges, true)
}

/// All ordered pairs plus self-loops.
pub fn full_view_graph(num_views: usize) -> Result<Graph> {
    if num_views == 0 {
        return Err(VineError::InvalidArgument("view graph needs at least one view".into()));
    }
    let edges = (0..num_views)
        .flat_map(|i| (0..num_views).map(move |j| (i, j)))
        .collect();
    Graph::new(num_views, edges, true)
}
