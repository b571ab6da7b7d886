//! Cascade graphs: rooted diffusion trees whose nodes carry adoption times.
//!
//! A [`CascadeGraph`] is immutable once built. Nodes are kept sorted by
//! adoption time (stable with respect to input order), and every parent is
//! stored before its children, so prefixes of the node list are always
//! valid subtrees.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("cascade has no adoptions")]
    Empty,
    #[error("cascade has no root (every adoption names a parent)")]
    NoRoot,
    #[error("cascade has more than one root: {0} and {1}")]
    MultipleRoots(String, String),
    #[error("user {child} names parent {parent}, which is not in the cascade")]
    DanglingParent { child: String, parent: String },
    #[error("parent links of user {0} form a cycle")]
    CycleDetected(String),
    #[error("user {0} has a negative or non-finite adoption time")]
    NegativeTime(String),
    #[error("user {0} appears more than once")]
    DuplicateNode(String),
    #[error("root {0} must adopt at time 0")]
    RootNotAtZero(String),
    #[error("user {child} adopts before its parent {parent}")]
    TimeOrder { child: String, parent: String },
}

/// One adoption event: `user` adopted at `time` from `parent`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adoption {
    pub user: String,
    pub time: f64,
    pub parent: Option<String>,
}

impl Adoption {
    pub fn root(user: impl Into<String>) -> Self {
        Adoption {
            user: user.into(),
            time: 0.0,
            parent: None,
        }
    }

    pub fn new(user: impl Into<String>, time: f64, parent: impl Into<String>) -> Self {
        Adoption {
            user: user.into(),
            time,
            parent: Some(parent.into()),
        }
    }
}

/// Observation and prediction horizons, in the dataset's time unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationWindow {
    t_o: f64,
    t_p: f64,
}

impl ObservationWindow {
    pub fn new(t_o: f64, t_p: f64) -> Option<Self> {
        (t_o > 0.0 && t_p > t_o && t_p.is_finite()).then_some(ObservationWindow { t_o, t_p })
    }

    pub fn observation(&self) -> f64 {
        self.t_o
    }

    pub fn prediction(&self) -> f64 {
        self.t_p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeGraph {
    id: String,
    pub_time: f64,
    nodes: Vec<Adoption>,
    parents: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
}

/// Summary statistics of a cascade tree.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStats {
    /// Undirected degree, indexed like [`CascadeGraph::nodes`].
    pub degrees: Vec<usize>,
    /// Indices of nodes without children.
    pub leaves: Vec<usize>,
    /// Hop distance from the root.
    pub depths: Vec<usize>,
    /// Mean root-to-node hop distance over non-root nodes; 0 for a lone root.
    pub mean_path_length: f64,
}

impl CascadeGraph {
    /// Validates `adoptions` and builds the time-sorted tree.
    pub fn build(
        adoptions: Vec<Adoption>,
        id: impl Into<String>,
        pub_time: f64,
    ) -> Result<Self, GraphError> {
        if adoptions.is_empty() {
            return Err(GraphError::Empty);
        }

        let mut index: HashMap<&str, usize> = HashMap::with_capacity(adoptions.len());
        let mut root = None;
        for (i, a) in adoptions.iter().enumerate() {
            if !(a.time >= 0.0) || !a.time.is_finite() {
                return Err(GraphError::NegativeTime(a.user.clone()));
            }
            if index.insert(a.user.as_str(), i).is_some() {
                return Err(GraphError::DuplicateNode(a.user.clone()));
            }
            if a.parent.is_none() {
                if let Some(r) = root {
                    let r: &Adoption = &adoptions[r];
                    return Err(GraphError::MultipleRoots(r.user.clone(), a.user.clone()));
                }
                root = Some(i);
            }
        }
        let root = root.ok_or(GraphError::NoRoot)?;
        if adoptions[root].time != 0.0 {
            return Err(GraphError::RootNotAtZero(adoptions[root].user.clone()));
        }

        let mut parent_of = vec![None; adoptions.len()];
        let mut kids: Vec<Vec<usize>> = vec![Vec::new(); adoptions.len()];
        for (i, a) in adoptions.iter().enumerate() {
            if let Some(p) = &a.parent {
                let pi = *index.get(p.as_str()).ok_or_else(|| GraphError::DanglingParent {
                    child: a.user.clone(),
                    parent: p.clone(),
                })?;
                parent_of[i] = Some(pi);
                kids[pi].push(i);
            }
        }

        // Everything not reachable from the root sits on a parent cycle.
        let mut reached = vec![false; adoptions.len()];
        let mut stack = vec![root];
        reached[root] = true;
        while let Some(u) = stack.pop() {
            for &c in &kids[u] {
                if !reached[c] {
                    reached[c] = true;
                    stack.push(c);
                }
            }
        }
        if let Some(i) = reached.iter().position(|r| !r) {
            return Err(GraphError::CycleDetected(adoptions[i].user.clone()));
        }

        for (i, a) in adoptions.iter().enumerate() {
            if let Some(p) = parent_of[i] {
                if adoptions[p].time > a.time {
                    return Err(GraphError::TimeOrder {
                        child: a.user.clone(),
                        parent: adoptions[p].user.clone(),
                    });
                }
            }
        }

        // Stable time sort, then emit in an order where parents precede
        // children (only equal-time ties can need deferral).
        let mut by_time: Vec<usize> = (0..adoptions.len()).collect();
        by_time.sort_by(|&a, &b| adoptions[a].time.total_cmp(&adoptions[b].time));
        let mut emitted = vec![false; adoptions.len()];
        let mut order = Vec::with_capacity(adoptions.len());
        let mut pending: Vec<usize> = Vec::new();
        for &i in &by_time {
            if parent_of[i].is_none_or(|p| emitted[p]) {
                emitted[i] = true;
                order.push(i);
                // Release any deferred nodes that are now unblocked.
                loop {
                    let before = pending.len();
                    pending.retain(|&d| {
                        if parent_of[d].is_none_or(|p| emitted[p]) {
                            emitted[d] = true;
                            order.push(d);
                            false
                        } else {
                            true
                        }
                    });
                    if pending.len() == before {
                        break;
                    }
                }
            } else {
                pending.push(i);
            }
        }
        debug_assert!(pending.is_empty());

        let mut new_pos = vec![0usize; adoptions.len()];
        for (pos, &i) in order.iter().enumerate() {
            new_pos[i] = pos;
        }
        let parents: Vec<Option<usize>> = order.iter().map(|&i| parent_of[i].map(|p| new_pos[p])).collect();
        let mut children = vec![Vec::new(); order.len()];
        for (pos, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(pos);
            }
        }
        let mut slots: Vec<Option<Adoption>> = adoptions.into_iter().map(Some).collect();
        let nodes = order.iter().map(|&i| slots[i].take().unwrap()).collect();

        Ok(CascadeGraph {
            id: id.into(),
            pub_time,
            nodes,
            parents,
            children,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pub_time(&self) -> f64 {
        self.pub_time
    }

    pub fn nodes(&self) -> &[Adoption] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Always false: a cascade has at least its root.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> &Adoption {
        &self.nodes[0]
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parents[i]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn time(&self, i: usize) -> f64 {
        self.nodes[i].time
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().map(|a| a.time)
    }

    pub fn edge_count(&self) -> usize {
        self.parents.iter().filter(|p| p.is_some()).count()
    }

    /// (parent, child) index pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (p, c)))
    }

    /// Undirected degree of node `i`.
    pub fn degree(&self, i: usize) -> usize {
        self.children[i].len() + usize::from(self.parents[i].is_some())
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.children[i].is_empty()
    }

    pub fn index_of(&self, user: &str) -> Option<usize> {
        self.nodes.iter().position(|a| a.user == user)
    }

    /// Undirected neighbours of node `i` (parent first, then children).
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents[i].into_iter().chain(self.children[i].iter().copied())
    }

    pub fn depths(&self) -> Vec<usize> {
        let mut depth = vec![0usize; self.len()];
        // Parents precede children in node order.
        for i in 1..self.len() {
            if let Some(p) = self.parents[i] {
                depth[i] = depth[p] + 1;
            }
        }
        depth
    }

    /// The induced subtree on adoptions strictly before `t_o`; the root is
    /// always kept.
    pub fn observe(&self, t_o: f64) -> CascadeGraph {
        let keep = self
            .nodes
            .iter()
            .enumerate()
            .take_while(|(i, a)| *i == 0 || a.time < t_o)
            .count();
        // Node times are sorted, so the kept set is a prefix.
        self.prefix(keep)
    }

    /// The first `n` nodes by adoption order (at least the root).
    pub fn truncate(&self, n: usize) -> CascadeGraph {
        self.prefix(n.max(1).min(self.len()))
    }

    fn prefix(&self, n: usize) -> CascadeGraph {
        if n == self.len() {
            return self.clone();
        }
        let children = self.children[..n]
            .iter()
            .map(|c| c.iter().copied().filter(|&k| k < n).collect())
            .collect();
        CascadeGraph {
            id: self.id.clone(),
            pub_time: self.pub_time,
            nodes: self.nodes[..n].to_vec(),
            parents: self.parents[..n].to_vec(),
            children,
        }
    }

    /// Number of adoptions at or before `t_p`, root included.
    pub fn popularity(&self, t_p: f64) -> usize {
        1 + self.nodes[1..].iter().filter(|a| a.time <= t_p).count()
    }

    pub fn stats(&self) -> GraphStats {
        let degrees = (0..self.len()).map(|i| self.degree(i)).collect();
        let leaves = (0..self.len()).filter(|&i| self.is_leaf(i)).collect();
        let depths = self.depths();
        let mean_path_length = if self.len() > 1 {
            depths[1..].iter().sum::<usize>() as f64 / (self.len() - 1) as f64
        } else {
            0.0
        };
        GraphStats {
            degrees,
            leaves,
            depths,
            mean_path_length,
        }
    }

    /// Re-derives the tree invariants from the raw adoption list, without
    /// trusting the cached index structure.
    pub fn check_tree(&self) -> Result<(), GraphError> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, a)| (a.user.as_str(), i))
            .collect();
        if index.len() != self.nodes.len() {
            return Err(GraphError::DuplicateNode(self.id.clone()));
        }
        let mut roots = self.nodes.iter().filter(|a| a.parent.is_none());
        let root = roots.next().ok_or(GraphError::NoRoot)?;
        if let Some(other) = roots.next() {
            return Err(GraphError::MultipleRoots(root.user.clone(), other.user.clone()));
        }
        let mut edges = 0usize;
        for a in &self.nodes {
            if !(a.time >= 0.0) || !a.time.is_finite() {
                return Err(GraphError::NegativeTime(a.user.clone()));
            }
            if let Some(p) = &a.parent {
                edges += 1;
                let pi = *index.get(p.as_str()).ok_or_else(|| GraphError::DanglingParent {
                    child: a.user.clone(),
                    parent: p.clone(),
                })?;
                if self.nodes[pi].time > a.time {
                    return Err(GraphError::TimeOrder {
                        child: a.user.clone(),
                        parent: p.clone(),
                    });
                }
            }
        }
        debug_assert_eq!(edges + 1, self.nodes.len());
        // Walk each node to the root; a walk longer than |V| is a cycle.
        for a in &self.nodes {
            let mut cur = a;
            let mut hops = 0;
            while let Some(p) = &cur.parent {
                cur = &self.nodes[index[p.as_str()]];
                hops += 1;
                if hops > self.nodes.len() {
                    return Err(GraphError::CycleDetected(a.user.clone()));
                }
            }
        }
        if edges + 1 != self.nodes.len() {
            return Err(GraphError::CycleDetected(self.id.clone()));
        }
        Ok(())
    }
}
