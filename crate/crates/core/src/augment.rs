//! Cascade graph augmentation.
//!
//! [`aug_sim`] re-runs a small piece of diffusion on an observed cascade:
//! every node may attract one new adopter with probability proportional to
//! its degree, then every leaf may be dropped with probability proportional
//! to its parent's degree. [`aug_rwr`] keeps the nodes visited by a
//! degree-biased random walk with restart from the root.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::graph::{Adoption, CascadeGraph, GraphError};
use crate::ingest::CascadeDataset;
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("augmentation needs at least two nodes")]
    SingletonGraph,
    #[error("node {0} is not a removable leaf")]
    NotALeaf(usize),
    #[error("no non-root adoptions to fit an exponential rate")]
    NoAdoptions,
    #[error("all non-root adoption times are zero")]
    ZeroMeanTime,
    #[error("invalid augmentation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrengthMode {
    /// Expected additions (and removals) equal `eta`.
    Absolute,
    /// Expected additions equal `eta · |V|`.
    PerNode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugSimParams {
    pub eta: f64,
    pub theta_t: f64,
    pub lambda: f64,
    pub strength_mode: StrengthMode,
}

impl Default for AugSimParams {
    fn default() -> Self {
        AugSimParams {
            eta: 0.1,
            theta_t: 0.5,
            lambda: 1.0,
            strength_mode: StrengthMode::Absolute,
        }
    }
}

impl AugSimParams {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(AugmentError::InvalidParams(format!("eta = {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.theta_t) {
            return Err(AugmentError::InvalidParams(format!("theta_t = {}", self.theta_t)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(AugmentError::InvalidParams(format!("lambda = {}", self.lambda)));
        }
        Ok(())
    }

    fn effective_eta(&self, n: usize) -> f64 {
        match self.strength_mode {
            StrengthMode::Absolute => self.eta,
            StrengthMode::PerNode => self.eta * n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugRwrParams {
    pub restart_prob: f64,
    /// The walk takes at most `walk_budget_factor · |V|` steps.
    pub walk_budget_factor: f64,
}

impl Default for AugRwrParams {
    fn default() -> Self {
        AugRwrParams {
            restart_prob: 0.2,
            walk_budget_factor: 3.0,
        }
    }
}

impl AugRwrParams {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.restart_prob > 0.0 && self.restart_prob < 1.0) {
            return Err(AugmentError::InvalidParams(format!(
                "restart probability {}",
                self.restart_prob
            )));
        }
        if !(self.walk_budget_factor > 0.0) {
            return Err(AugmentError::InvalidParams(format!(
                "walk budget factor {}",
                self.walk_budget_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Sim,
    Rwr,
    /// First view by simulation, second by random walk.
    SimRwr,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "augsim" | "sim" => Some(Strategy::Sim),
            "augrwr" | "rwr" => Some(Strategy::Rwr),
            "augsim+augrwr" | "sim+rwr" | "simrwr" => Some(Strategy::SimRwr),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Sim => "augsim",
            Strategy::Rwr => "augrwr",
            Strategy::SimRwr => "augsim+augrwr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub strategy: Strategy,
    pub sim: AugSimParams,
    pub rwr: AugRwrParams,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            strategy: Strategy::Sim,
            sim: AugSimParams::default(),
            rwr: AugRwrParams::default(),
        }
    }
}

/// Exponential maximum-likelihood rate over all non-root adoption times.
pub fn fit_rate<'a>(graphs: impl IntoIterator<Item = &'a CascadeGraph>) -> Result<f64, AugmentError> {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for g in graphs {
        for t in g.times().skip(1) {
            sum += t;
            count += 1;
        }
    }
    if count == 0 {
        return Err(AugmentError::NoAdoptions);
    }
    if sum <= 0.0 {
        return Err(AugmentError::ZeroMeanTime);
    }
    Ok(count as f64 / sum)
}

pub fn fit_global_rate(ds: &CascadeDataset) -> Result<f64, AugmentError> {
    fit_rate(ds.all_graphs())
}

fn degree_sum(g: &CascadeGraph) -> usize {
    2 * g.edge_count()
}

/// Probability that node `j` attracts a new adopter.
pub fn attractiveness(g: &CascadeGraph, j: usize, params: &AugSimParams) -> Result<f64, AugmentError> {
    if g.len() < 2 {
        return Err(AugmentError::SingletonGraph);
    }
    let eta = params.effective_eta(g.len());
    Ok((eta * g.degree(j) as f64 / degree_sum(g) as f64).clamp(0.0, 1.0))
}

/// `t_j + θ·t_local + (1−θ)·t_global`, clamped to `[t_j, t_o]`.
pub fn adoption_time_from(t_j: f64, t_local: f64, t_global: f64, theta_t: f64, t_o: f64) -> f64 {
    let t = t_j + theta_t * t_local + (1.0 - theta_t) * t_global;
    t.min(t_o).max(t_j)
}

/// Draws `t_global ~ Exp(λ)` (skipped when `θ = 1`) and combines it with
/// the cascade-level mean adoption time.
pub fn new_adoption_time<R: Rng + ?Sized>(
    t_j: f64,
    t_local: f64,
    params: &AugSimParams,
    t_o: f64,
    rng: &mut R,
) -> f64 {
    let t_global = if params.theta_t < 1.0 {
        Exp::new(params.lambda).expect("lambda validated positive").sample(rng)
    } else {
        0.0
    };
    adoption_time_from(t_j, t_local, t_global, params.theta_t, t_o)
}

fn leaf_parent_degree_sum(g: &CascadeGraph) -> usize {
    (1..g.len())
        .filter(|&k| g.is_leaf(k))
        .map(|k| g.degree(g.parent(k).expect("non-root")))
        .sum()
}

/// Probability that leaf `j` is dropped.
pub fn removal_prob(g: &CascadeGraph, j: usize, params: &AugSimParams) -> Result<f64, AugmentError> {
    removal_prob_with_eta(g, j, params.effective_eta(g.len()))
}

fn removal_prob_with_eta(g: &CascadeGraph, j: usize, eta: f64) -> Result<f64, AugmentError> {
    if j == 0 || j >= g.len() || !g.is_leaf(j) {
        return Err(AugmentError::NotALeaf(j));
    }
    let parent = g.parent(j).expect("non-root");
    let total = leaf_parent_degree_sum(g);
    Ok((eta * g.degree(parent) as f64 / total as f64).clamp(0.0, 1.0))
}

/// Node counts touched by one augmentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugStats {
    pub added: usize,
    pub removed: usize,
}

fn fresh_id(g: &CascadeGraph, taken: &mut usize) -> String {
    loop {
        let id = format!("~{}", *taken);
        *taken += 1;
        if g.index_of(&id).is_none() {
            return id;
        }
    }
}

pub fn aug_sim<R: Rng + ?Sized>(
    g: &CascadeGraph,
    params: &AugSimParams,
    t_o: f64,
    rng: &mut R,
) -> Result<CascadeGraph, AugmentError> {
    aug_sim_with_stats(g, params, t_o, rng).map(|(g, _)| g)
}

pub fn aug_sim_with_stats<R: Rng + ?Sized>(
    g: &CascadeGraph,
    params: &AugSimParams,
    t_o: f64,
    rng: &mut R,
) -> Result<(CascadeGraph, AugStats), AugmentError> {
    if g.len() < 2 {
        return Err(AugmentError::SingletonGraph);
    }
    params.validate()?;
    let eta = params.effective_eta(g.len());
    let t_local = g.times().sum::<f64>() / g.len() as f64;

    let mut adoptions: Vec<Adoption> = g.nodes().to_vec();
    let mut next_id = 0usize;
    let mut added = 0usize;
    let degrees = degree_sum(g) as f64;
    for j in 0..g.len() {
        let a_j = (eta * g.degree(j) as f64 / degrees).clamp(0.0, 1.0);
        if rng.random::<f64>() < a_j {
            let t_new = new_adoption_time(g.time(j), t_local, params, t_o, rng);
            adoptions.push(Adoption::new(fresh_id(g, &mut next_id), t_new, g.nodes()[j].user.clone()));
            added += 1;
        }
    }
    let expanded = if added > 0 {
        CascadeGraph::build(adoptions, g.id(), g.pub_time())?
    } else {
        g.clone()
    };

    let mut drop = vec![false; expanded.len()];
    let mut removed = 0usize;
    let leaf_total = leaf_parent_degree_sum(&expanded) as f64;
    for j in 1..expanded.len() {
        if expanded.is_leaf(j) {
            let parent = expanded.parent(j).expect("non-root");
            let r_j = (eta * expanded.degree(parent) as f64 / leaf_total).clamp(0.0, 1.0);
            if rng.random::<f64>() < r_j {
                drop[j] = true;
                removed += 1;
            }
        }
    }
    let out = if removed > 0 {
        let kept = expanded
            .nodes()
            .iter()
            .zip(&drop)
            .filter(|(_, d)| !**d)
            .map(|(a, _)| a.clone())
            .collect();
        CascadeGraph::build(kept, g.id(), g.pub_time())?
    } else {
        expanded
    };
    Ok((out, AugStats { added, removed }))
}

/// Degree-proportional transition distribution out of node `u`.
pub fn rwr_transition(g: &CascadeGraph, u: usize) -> Vec<(usize, f64)> {
    let total: usize = g.neighbors(u).map(|v| g.degree(v)).sum();
    g.neighbors(u)
        .map(|v| (v, g.degree(v) as f64 / total as f64))
        .collect()
}

pub fn aug_rwr<R: Rng + ?Sized>(
    g: &CascadeGraph,
    params: &AugRwrParams,
    rng: &mut R,
) -> Result<CascadeGraph, AugmentError> {
    params.validate()?;
    let budget = (params.walk_budget_factor * g.len() as f64).floor() as usize;
    let mut visited = vec![false; g.len()];
    visited[0] = true;
    let mut at = 0usize;
    for _ in 0..budget {
        if rng.random::<f64>() < params.restart_prob {
            at = 0;
            continue;
        }
        let total: usize = g.neighbors(at).map(|v| g.degree(v)).sum();
        if total == 0 {
            continue;
        }
        let mut pick = rng.random_range(0..total);
        for v in g.neighbors(at) {
            let d = g.degree(v);
            if pick < d {
                at = v;
                break;
            }
            pick -= d;
        }
        visited[at] = true;
    }
    if visited.iter().all(|&v| v) {
        return Ok(g.clone());
    }
    let kept = g
        .nodes()
        .iter()
        .zip(&visited)
        .filter(|(_, v)| **v)
        .map(|(a, _)| a.clone())
        .collect();
    Ok(CascadeGraph::build(kept, g.id(), g.pub_time())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view1: CascadeGraph,
    pub view2: CascadeGraph,
}

fn augment_one<R: Rng + ?Sized>(
    g: &CascadeGraph,
    use_sim: bool,
    params: &AugmentParams,
    t_o: f64,
    rng: &mut R,
) -> Result<CascadeGraph, AugmentError> {
    if use_sim {
        aug_sim(g, &params.sim, t_o, rng)
    } else {
        aug_rwr(g, &params.rwr, rng)
    }
}

/// Two independent augmentations of `g`, each on its own derived stream.
pub fn make_views<R: RngCore + ?Sized>(
    g: &CascadeGraph,
    params: &AugmentParams,
    t_o: f64,
    rng: &mut R,
) -> Result<ViewPair, AugmentError> {
    let mut r1 = seed::rng(rng.next_u64());
    let mut r2 = seed::rng(rng.next_u64());
    let (first_sim, second_sim) = match params.strategy {
        Strategy::Sim => (true, true),
        Strategy::Rwr => (false, false),
        Strategy::SimRwr => (true, false),
    };
    Ok(ViewPair {
        view1: augment_one(g, first_sim, params, t_o, &mut r1)?,
        view2: augment_one(g, second_sim, params, t_o, &mut r2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Adoption;

    fn path3() -> CascadeGraph {
        CascadeGraph::build(
            vec![Adoption::root("A"), Adoption::new("B", 1.0, "A"), Adoption::new("C", 2.0, "B")],
            "p",
            0.0,
        )
        .unwrap()
    }

    fn star3() -> CascadeGraph {
        CascadeGraph::build(
            vec![
                Adoption::root("R"),
                Adoption::new("a", 0.1, "R"),
                Adoption::new("b", 0.2, "R"),
                Adoption::new("c", 0.3, "R"),
            ],
            "s",
            0.0,
        )
        .unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-15
    }

    #[test]
    fn exponential_mle() {
        let g = CascadeGraph::build(
            vec![Adoption::root("r"), Adoption::new("a", 2.0, "r"), Adoption::new("b", 4.0, "r")],
            "g",
            0.0,
        )
        .unwrap();
        assert!(close(fit_rate([&g]).unwrap(), 1.0 / 3.0));
        let same = CascadeGraph::build(
            vec![Adoption::root("r"), Adoption::new("a", 5.0, "r"), Adoption::new("b", 5.0, "a")],
            "g",
            0.0,
        )
        .unwrap();
        assert!(close(fit_rate([&same]).unwrap(), 0.2));
        let single = CascadeGraph::build(vec![Adoption::root("r")], "g", 0.0).unwrap();
        assert_eq!(fit_rate([&single]), Err(AugmentError::NoAdoptions));
    }

    #[test]
    fn attractiveness_values() {
        let p = AugSimParams { eta: 0.1, ..AugSimParams::default() };
        let g = path3();
        assert!(close(attractiveness(&g, 1, &p).unwrap(), 0.05));
        assert!(close(attractiveness(&g, 0, &p).unwrap(), 0.025));
        assert!(close(attractiveness(&g, 2, &p).unwrap(), 0.025));

        let s = star3();
        assert!(close(attractiveness(&s, 0, &p).unwrap(), 0.05));
        for j in 1..4 {
            assert!(close(attractiveness(&s, j, &p).unwrap(), 0.1 / 6.0));
        }

        let big = AugSimParams { eta: 5.0, ..p };
        assert_eq!(attractiveness(&s, 0, &big).unwrap(), 1.0);

        let single = CascadeGraph::build(vec![Adoption::root("r")], "g", 0.0).unwrap();
        assert_eq!(attractiveness(&single, 0, &p), Err(AugmentError::SingletonGraph));
    }

    #[test]
    fn adoption_time_combination() {
        assert_eq!(adoption_time_from(10.0, 5.0, 2.0, 0.5, 24.0), 13.5);
        assert_eq!(adoption_time_from(20.0, 10.0, 2.0, 0.5, 24.0), 24.0);
        let p = AugSimParams { theta_t: 1.0, ..AugSimParams::default() };
        let mut rng = seed::rng(0);
        assert_eq!(new_adoption_time(10.0, 5.0, &p, 100.0, &mut rng), 15.0);
    }

    #[test]
    fn removal_probabilities() {
        let p = AugSimParams { eta: 0.1, ..AugSimParams::default() };
        let s = star3();
        for j in 1..4 {
            assert!(close(removal_prob(&s, j, &p).unwrap(), 0.1 * 3.0 / 9.0));
        }
        let g = path3();
        assert!(close(removal_prob(&g, 2, &p).unwrap(), 0.1));
        assert_eq!(removal_prob(&g, 0, &p), Err(AugmentError::NotALeaf(0)));
        assert_eq!(removal_prob(&g, 1, &p), Err(AugmentError::NotALeaf(1)));
    }

    #[test]
    fn sim_preserves_tree_and_window() {
        let p = AugSimParams { eta: 2.0, lambda: 0.5, ..AugSimParams::default() };
        let g = star3();
        for s in 0..200 {
            let (out, stats) = aug_sim_with_stats(&g, &p, 1.0, &mut seed::rng(s)).unwrap();
            out.check_tree().unwrap();
            assert_eq!(out.len(), g.len() + stats.added - stats.removed);
            assert_eq!(out.root().user, "R");
            assert!(out.times().all(|t| (0.0..=1.0).contains(&t)));
            // Original interior nodes survive.
            assert!(out.index_of("R").is_some());
        }
    }

    #[test]
    fn sim_is_deterministic() {
        let p = AugSimParams { eta: 1.0, ..AugSimParams::default() };
        let a = aug_sim(&star3(), &p, 1.0, &mut seed::rng(5)).unwrap();
        let b = aug_sim(&star3(), &p, 1.0, &mut seed::rng(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rwr_transitions_and_budget() {
        let g = path3();
        assert_eq!(rwr_transition(&g, 0), vec![(1, 1.0)]);
        let t = rwr_transition(&g, 1);
        assert_eq!(t, vec![(0, 0.5), (2, 0.5)]);

        let zero = AugRwrParams { restart_prob: 0.2, walk_budget_factor: 1e-9 };
        assert_eq!(aug_rwr(&g, &zero, &mut seed::rng(1)).unwrap().len(), 1);

        let long = AugRwrParams { restart_prob: 0.01, walk_budget_factor: 1000.0 };
        assert_eq!(aug_rwr(&g, &long, &mut seed::rng(1)).unwrap(), g);
    }

    #[test]
    fn views_share_source() {
        let g = star3();
        let mut params = AugmentParams::default();
        params.sim.eta = 1.0;
        for strategy in [Strategy::Sim, Strategy::Rwr, Strategy::SimRwr] {
            params.strategy = strategy;
            let v = make_views(&g, &params, 1.0, &mut seed::rng(3)).unwrap();
            assert_eq!(v.view1.id(), g.id());
            assert_eq!(v.view2.id(), g.id());
        }
    }

    #[test]
    fn combined_strategy_uses_both_augmentors() {
        let g = star3();
        let mut params = AugmentParams { strategy: Strategy::SimRwr, ..AugmentParams::default() };
        params.sim.eta = 1.0;
        let mut added_seen = false;
        for s in 0..50 {
            let v = make_views(&g, &params, 1.0, &mut seed::rng(s)).unwrap();
            // Random walks never invent nodes.
            assert!(v.view2.nodes().iter().all(|a| g.index_of(&a.user).is_some()));
            added_seen |= v.view1.nodes().iter().any(|a| a.user.starts_with('~'));
        }
        assert!(added_seen);
    }

    #[test]
    fn strategy_names() {
        for s in [Strategy::Sim, Strategy::Rwr, Strategy::SimRwr] {
            assert_eq!(Strategy::parse(s.as_str()), Some(s));
        }
        assert_eq!(Strategy::parse("AugSIM+AugRWR"), Some(Strategy::SimRwr));
        assert_eq!(Strategy::parse("nope"), None);
    }
}
