//! Communication graph and factorial subsystems.
//!
//! Agents are indexed `1..=N`. A factorial subsystem is a central agent
//! together with its graph neighbors; the member order (center first, then
//! neighbors in ascending index) is the canonical stacking order for every
//! joint vector and matrix built over the subsystem.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected communication network over `n_agents` agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommGraph {
    n_agents: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl CommGraph {
    /// Builds a graph from an edge list. Edges are unordered pairs of
    /// 1-based agent indices; self-loops and out-of-range indices are
    /// rejected. Connectivity is checked separately by [`CommGraph::require_connected`].
    pub fn new(n_agents: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::Graph("agent count must be positive".into()));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Graph(format!("self-loop on agent {a}")));
            }
            for idx in [a, b] {
                if idx < 1 || idx > n_agents {
                    return Err(Error::AgentIndex {
                        index: idx,
                        n_agents,
                    });
                }
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self {
            n_agents,
            edges: set,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i < 1 || i > self.n_agents {
            return Err(Error::AgentIndex {
                index: i,
                n_agents: self.n_agents,
            });
        }
        Ok(())
    }

    /// Neighbor index set of agent `i`, ascending.
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>> {
        self.check_index(i)?;
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    /// Factorial subsystem of agent `i`: the center plus its neighbors.
    pub fn subsystem(&self, i: usize) -> Result<Subsystem> {
        let neighbors = self.neighbors(i)?;
        let mut members = Vec::with_capacity(neighbors.len() + 1);
        members.push(i);
        members.extend(neighbors);
        Ok(Subsystem { center: i, members })
    }

    /// Errors unless the graph is connected (single-agent graphs count as
    /// connected).
    pub fn require_connected(&self) -> Result<()> {
        let mut seen = vec![false; self.n_agents + 1];
        let mut stack = vec![1usize];
        seen[1] = true;
        while let Some(v) = stack.pop() {
            for w in self.neighbors(v)? {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        if seen[1..].iter().all(|&s| s) {
            Ok(())
        } else {
            Err(Error::Disconnected)
        }
    }
}

/// A central agent and its neighbors, in canonical stacking order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsystem {
    center: usize,
    members: Vec<usize>,
}

impl Subsystem {
    pub fn center(&self) -> usize {
        self.center
    }

    /// Members in canonical order: center first, then neighbors ascending.
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Position of agent `j` in the canonical member order, if present.
    pub fn position_of(&self, j: usize) -> Option<usize> {
        self.members.iter().position(|&m| m == j)
    }

    /// Subsystem containing only a single agent (used for isolated and
    /// single-agent scenarios).
    pub fn singleton(i: usize) -> Self {
        Self {
            center: i,
            members: vec![i],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loop3() -> CommGraph {
        CommGraph::new(3, &[(1, 2), (2, 3), (1, 3)]).unwrap()
    }

    fn line9() -> CommGraph {
        let edges: Vec<_> = (1..9).map(|k| (k, k + 1)).collect();
        CommGraph::new(9, &edges).unwrap()
    }

    #[test]
    fn neighbors_loop() {
        assert_eq!(loop3().neighbors(1).unwrap(), vec![2, 3]);
    }

    #[test]
    fn neighbors_single_agent() {
        let g = CommGraph::new(1, &[]).unwrap();
        assert!(g.neighbors(1).unwrap().is_empty());
    }

    #[test]
    fn neighbors_line_interior() {
        assert_eq!(line9().neighbors(5).unwrap(), vec![4, 6]);
    }

    #[test]
    fn subsystem_loop_center_1() {
        let s = loop3().subsystem(1).unwrap();
        assert_eq!(s.members(), &[1, 2, 3]);
        assert_eq!(s.center(), 1);
    }

    #[test]
    fn subsystem_line_end() {
        let s = line9().subsystem(9).unwrap();
        assert_eq!(s.members(), &[9, 8]);
    }

    #[test]
    fn subsystem_single_agent() {
        let g = CommGraph::new(1, &[]).unwrap();
        assert_eq!(g.subsystem(1).unwrap().members(), &[1]);
    }

    #[test]
    fn index_out_of_range() {
        assert!(matches!(
            loop3().neighbors(4),
            Err(Error::AgentIndex { .. })
        ));
        assert!(matches!(loop3().subsystem(0), Err(Error::AgentIndex { .. })));
    }

    #[test]
    fn rejects_self_loop() {
        assert!(CommGraph::new(2, &[(1, 1)]).is_err());
    }

    #[test]
    fn connectivity() {
        assert!(loop3().require_connected().is_ok());
        let g = CommGraph::new(4, &[(1, 2), (3, 4)]).unwrap();
        assert!(matches!(g.require_connected(), Err(Error::Disconnected)));
        assert!(CommGraph::new(1, &[]).unwrap().require_connected().is_ok());
    }

    #[test]
    fn neighbor_symmetry_and_membership() {
        for g in [loop3(), line9()] {
            for i in 1..=g.n_agents() {
                let s = g.subsystem(i).unwrap();
                assert_eq!(s.position_of(i), Some(0));
                let mut uniq = s.members().to_vec();
                uniq.sort_unstable();
                uniq.dedup();
                assert_eq!(uniq.len(), s.len());
                for j in g.neighbors(i).unwrap() {
                    assert!(g.neighbors(j).unwrap().contains(&i));
                }
            }
        }
    }

    #[test]
    fn complete_graph_subsystem_is_everything() {
        let g = CommGraph::new(4, &[(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]).unwrap();
        for i in 1..=4 {
            assert_eq!(g.subsystem(i).unwrap().len(), 4);
        }
    }
}
