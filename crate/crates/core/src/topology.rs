//! Undirected communication graphs.

use std::collections::{BTreeSet, VecDeque};

use crate::{Error, Result};

/// Connected undirected graph on nodes `0..M` without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    node_count: usize,
    /// Each edge once, as `(m, n)` with `m < n`, sorted.
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds and validates a graph. Rejects self-loops, repeated edges,
    /// out-of-range ids and disconnected edge sets.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::Topology("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            for id in [a, b] {
                if id >= node_count {
                    return Err(Error::NodeOutOfRange {
                        node: id,
                        count: node_count,
                    });
                }
            }
            if a == b {
                return Err(Error::Topology(format!("self-loop on node {a}")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::Topology(format!("edge ({a}, {b}) listed twice")));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); node_count];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        adjacency.iter_mut().for_each(|n| n.sort_unstable());
        let g = Self {
            node_count,
            edges,
            adjacency,
        };
        let reached = g.reachable_from(0);
        if reached < node_count {
            return Err(Error::Topology(format!(
                "graph is disconnected: node 0 reaches {reached} of {node_count} nodes"
            )));
        }
        Ok(g)
    }

    /// One node, no edges.
    pub fn single() -> Self {
        Self {
            node_count: 1,
            edges: Vec::new(),
            adjacency: vec![Vec::new()],
        }
    }

    /// Parses an edge list: two whitespace-separated zero-based ids per line,
    /// `#` comments and blank lines ignored. The node count is one more than
    /// the largest id unless given.
    pub fn parse_edge_list(text: &str, node_count: Option<usize>) -> Result<Self> {
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| Error::Parse {
                source_name: "edge list".into(),
                line: i as u64 + 1,
                reason,
            };
            let ids = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>()
                        .map_err(|e| bad(format!("{tok:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            match ids[..] {
                [a, b] => edges.push((a, b)),
                _ => return Err(bad(format!("expected two node ids, found {}", ids.len()))),
            }
        }
        let inferred = edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(1);
        Self::from_edges(node_count.unwrap_or(inferred), &edges)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Sorted neighbour ids of `m`.
    pub fn neighbors(&self, m: usize) -> Result<&[usize]> {
        self.adjacency
            .get(m)
            .map(Vec::as_slice)
            .ok_or(Error::NodeOutOfRange {
                node: m,
                count: self.node_count,
            })
    }

    /// `|E(m)|`.
    pub fn degree(&self, m: usize) -> Result<usize> {
        self.neighbors(m).map(<[usize]>::len)
    }

    pub(crate) fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    fn reachable_from(&self, start: usize) -> usize {
        let mut seen = vec![false; self.node_count];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut count = 1;
        while let Some(m) = queue.pop_front() {
            for &n in &self.adjacency[m] {
                if !seen[n] {
                    seen[n] = true;
                    count += 1;
                    queue.push_back(n);
                }
            }
        }
        count
    }

    pub fn is_connected(&self) -> bool {
        self.reachable_from(0) == self.node_count
    }

    /// Text form accepted by [`Graph::parse_edge_list`].
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("# {} nodes\n", self.node_count);
        for (a, b) in &self.edges {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }
}

/// `M` nodes on a circle, each joined to the `d/2` nearest nodes on either
/// side. `M = 2, d = 1` is the single-edge special case.
pub fn circulant_graph(m: usize, d: usize) -> Result<Graph> {
    if m == 2 && d == 1 {
        return Graph::from_edges(2, &[(0, 1)]);
    }
    if d == 0 || d >= m {
        return Err(Error::Topology(format!(
            "degree {d} must lie in 1..={} for {m} nodes",
            m.saturating_sub(1)
        )));
    }
    if d % 2 == 1 {
        return Err(Error::Topology(format!(
            "odd degree {d} cannot form a symmetric circulant on {m} nodes"
        )));
    }
    let mut edges = Vec::with_capacity(m * d / 2);
    for node in 0..m {
        for k in 1..=d / 2 {
            edges.push((node, (node + k) % m));
        }
    }
    Graph::from_edges(m, &edges)
}

/// Degree used for ring sweeps: `d = 2`, or `d = 1` on two nodes.
pub fn ring_degree(m: usize) -> usize {
    if m == 2 {
        1
    } else {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_node_special_case() {
        let g = circulant_graph(2, 1).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn paper_sized_circulant() {
        let g = circulant_graph(20, 8).unwrap();
        assert_eq!(g.edge_count(), 80);
        for m in 0..20 {
            assert_eq!(g.degree(m).unwrap(), 8);
        }
        assert_eq!(g.neighbors(0).unwrap(), &[1, 2, 3, 4, 16, 17, 18, 19]);
    }

    #[test]
    fn plain_ring() {
        let g = circulant_graph(4, 2).unwrap();
        assert_eq!(g.edge_count(), 4);
        assert_eq!(g.neighbors(0).unwrap(), &[1, 3]);
        assert!(matches!(
            g.neighbors(4),
            Err(Error::NodeOutOfRange { node: 4, count: 4 })
        ));
    }

    #[test]
    fn invalid_degrees() {
        assert!(circulant_graph(5, 3).is_err());
        assert!(circulant_graph(4, 4).is_err());
        assert!(circulant_graph(4, 0).is_err());
        assert!(circulant_graph(1, 1).is_err());
    }

    #[test]
    fn symmetry_and_regularity() {
        for (m, d) in [(3, 2), (7, 4), (10, 6), (20, 2), (9, 8)] {
            let g = circulant_graph(m, d).unwrap();
            assert_eq!(g.edge_count(), m * d / 2);
            for a in 0..m {
                assert_eq!(g.degree(a).unwrap(), d);
                for &b in g.neighbors(a).unwrap() {
                    assert!(g.neighbors(b).unwrap().contains(&a));
                }
            }
            assert!(g.is_connected());
        }
    }

    #[test]
    fn edge_list_parsing() {
        let text = "# star\n0 1\n0 2\n\n  0\t3\n";
        let g = Graph::parse_edge_list(text, None).unwrap();
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.neighbors(0).unwrap(), &[1, 2, 3]);
        assert_eq!(Graph::parse_edge_list(&g.to_edge_list(), None).unwrap(), g);

        assert!(matches!(
            Graph::parse_edge_list("0 1\n2 3\n", None),
            Err(Error::Topology(_))
        ));
        assert!(matches!(
            Graph::parse_edge_list("0 1 2\n", None),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(Graph::parse_edge_list("1 1\n", None).is_err());
        assert!(Graph::parse_edge_list("0 1\n1 0\n", None).is_err());
    }

    #[test]
    fn single_node_graph() {
        let g = Graph::single();
        assert!(g.is_connected());
        assert_eq!(g.degree(0).unwrap(), 0);
    }
}
