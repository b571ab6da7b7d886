use proptest::prelude::*;

use casgraph::augment::{aug_rwr, aug_sim, AugRwrParams, AugSimParams};
use casgraph::autodiff::{Graph, Tensor};
use casgraph::encoder::{node_features, EncoderConfig, EncoderModel, HeadDesign, NodeFeatureSpec};
use casgraph::graph::{Adoption, CascadeGraph, ObservationWindow};
use casgraph::ingest::{format_line, parse_line, CascadeDataset, DatasetConfig, Split};
use casgraph::seed;
use casgraph::train::{distill_value, msle_value, nt_xent_loss};

/// Node `i` attaches to `floor(frac·i)` and arrives `dt` after node `i−1`.
fn tree_from(steps: &[(f64, f64)], id: &str) -> CascadeGraph {
    let mut adoptions = vec![Adoption::root("r")];
    let mut t = 0.0;
    for (k, &(frac, dt)) in steps.iter().enumerate() {
        let i = k + 1;
        t += dt;
        let p = ((frac * i as f64) as usize).min(i - 1);
        let parent = if p == 0 { "r".to_string() } else { format!("u{p}") };
        adoptions.push(Adoption::new(format!("u{i}"), t, parent));
    }
    CascadeGraph::build(adoptions, id, 0.0).unwrap()
}

fn steps(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..1.0f64, 0.01..2.0f64), 1..max)
}

fn nt_xent(z: &[Vec<f64>], tau: f64) -> f64 {
    let mut tape = Graph::new();
    let v = tape.constant(Tensor::from_rows(z));
    let l = nt_xent_loss(&mut tape, v, tau).unwrap();
    tape.value(l).item()
}

fn is_tree(g: &CascadeGraph) -> bool {
    g.edge_count() + 1 == g.len() && g.edges().all(|(p, c)| g.time(p) <= g.time(c)) && g.check_tree().is_ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn generated_trees_hold_the_tree_invariant(s in steps(40)) {
        let g = tree_from(&s, "t");
        prop_assert!(is_tree(&g));
    }

    #[test]
    fn observe_is_idempotent(s in steps(40), t in 0.0..30.0f64) {
        let g = tree_from(&s, "t");
        let once = g.observe(t);
        prop_assert_eq!(once.observe(t), once.clone());
        prop_assert!(once.times().skip(1).all(|x| x < t));
    }

    #[test]
    fn popularity_dominates_observed_size(s in steps(40), t_o in 0.01..20.0f64, extra in 0.0..20.0f64) {
        let g = tree_from(&s, "t");
        prop_assert!(g.popularity(t_o + extra) >= g.observe(t_o).len());
    }

    #[test]
    fn format_then_parse_is_identity(s in steps(40)) {
        let g = tree_from(&s, "rt");
        let back = parse_line(&format_line(&g)).unwrap();
        prop_assert_eq!(format_line(&back), format_line(&g));
        prop_assert_eq!(back.len(), g.len());
        for i in 0..g.len() {
            prop_assert_eq!(back.parent(i), g.parent(i));
            prop_assert_eq!(back.time(i), g.time(i));
        }
    }

    #[test]
    fn aug_sim_keeps_tree_window_and_interior(s in steps(30), seed_v in any::<u64>(), eta in 0.01..3.0f64) {
        let g = tree_from(&s, "a");
        let t_o = g.times().fold(0.0, f64::max) + 0.5;
        let params = AugSimParams { eta, ..AugSimParams::default() };
        let a = aug_sim(&g, &params, t_o, &mut seed::rng(seed_v)).unwrap();
        prop_assert!(is_tree(&a));
        prop_assert!(a.times().all(|t| (0.0..=t_o).contains(&t)));
        for i in 0..g.len() {
            if !g.is_leaf(i) || i == 0 {
                prop_assert!(a.index_of(&g.nodes()[i].user).is_some());
            }
        }
        let again = aug_sim(&g, &params, t_o, &mut seed::rng(seed_v)).unwrap();
        prop_assert_eq!(format_line(&again), format_line(&a));
    }

    #[test]
    fn aug_rwr_yields_rooted_subtree(s in steps(30), seed_v in any::<u64>(), restart in 0.05..0.95f64) {
        let g = tree_from(&s, "w");
        let params = AugRwrParams { restart_prob: restart, ..AugRwrParams::default() };
        let b = aug_rwr(&g, &params, &mut seed::rng(seed_v)).unwrap();
        prop_assert!(is_tree(&b));
        prop_assert_eq!(&b.root().user, &g.root().user);
        for node in b.nodes() {
            prop_assert!(g.index_of(&node.user).is_some());
        }
        let again = aug_rwr(&g, &params, &mut seed::rng(seed_v)).unwrap();
        prop_assert_eq!(format_line(&again), format_line(&b));
    }

    #[test]
    fn splits_are_disjoint_and_proportional(n in 1usize..400, s in any::<u64>()) {
        let graphs: Vec<CascadeGraph> = (0..n)
            .map(|k| tree_from(&[(0.0, 0.5), (0.5, 0.5)], &format!("c{k}")))
            .collect();
        let cfg = DatasetConfig {
            window: ObservationWindow::new(10.0, 20.0).unwrap(),
            min_observed_nodes: 1,
            seed: s,
            ..DatasetConfig::default()
        };
        let ds = CascadeDataset::assemble(graphs, cfg).unwrap();
        let sizes = [ds.split_len(Split::Train), ds.split_len(Split::Val), ds.split_len(Split::Test)];
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        for (got, f) in sizes.iter().zip([0.5, 0.1, 0.4]) {
            prop_assert!((*got as f64 - f * n as f64).abs() <= 1.0, "{:?} for n={}", sizes, n);
        }
        let mut ids: Vec<&str> = ds.labeled.iter().map(|c| c.graph.id()).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
    }

    #[test]
    fn label_fraction_keeps_ceiling_count(n in 2usize..300, pct in 1usize..=100, s in any::<u64>()) {
        let graphs: Vec<CascadeGraph> = (0..n)
            .map(|k| tree_from(&[(0.0, 0.5)], &format!("c{k}")))
            .collect();
        let cfg = DatasetConfig {
            window: ObservationWindow::new(10.0, 20.0).unwrap(),
            min_observed_nodes: 1,
            ..DatasetConfig::default()
        };
        let ds = CascadeDataset::assemble(graphs, cfg).unwrap();
        let train = ds.split_len(Split::Train);
        let sub = ds.label_fraction(pct as f64 / 100.0, s).unwrap();
        prop_assert_eq!(sub.split_len(Split::Train), (pct * train).div_ceil(100));
        prop_assert_eq!(sub.split_len(Split::Train) + sub.unlabeled.len(), train + ds.unlabeled.len());
        prop_assert!(sub.unlabeled.iter().all(|g| sub.labeled.iter().all(|c| c.graph.id() != g.id())));
    }

    #[test]
    fn nt_xent_scale_and_pair_permutation_invariant(
        rows in prop::collection::vec(prop::collection::vec(0.1..1.0f64, 3), 2..6),
        c in 0.01..100.0f64,
        tau in 0.05..1.0f64,
        swap in any::<bool>(),
    ) {
        let b = rows.len();
        // Two views per cascade, each a perturbed copy of the base row.
        let mut z = Vec::new();
        for (k, r) in rows.iter().enumerate() {
            z.push(r.clone());
            z.push(r.iter().enumerate().map(|(j, v)| v + 0.1 * ((k + j) % 3) as f64).collect());
        }
        let base = nt_xent(&z, tau);
        let scaled: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        prop_assert!((nt_xent(&scaled, tau) - base).abs() < 1e-10);
        let mut permuted = Vec::new();
        for k in (0..b).rev() {
            let (x, y) = if swap { (2 * k + 1, 2 * k) } else { (2 * k, 2 * k + 1) };
            permuted.push(z[x].clone());
            permuted.push(z[y].clone());
        }
        prop_assert!((nt_xent(&permuted, tau) - base).abs() < 1e-10);
    }

    #[test]
    fn regression_losses_nonnegative_and_zero_on_agreement(
        labels in prop::collection::vec(1.0..1e5f64, 1..20),
        noise in prop::collection::vec(-3.0..3.0f64, 20),
    ) {
        let exact: Vec<f64> = labels.iter().map(|l| l.log2()).collect();
        prop_assert!(msle_value(&exact, &labels).unwrap().abs() < 1e-20);
        prop_assert_eq!(distill_value(&exact, &exact).unwrap(), 0.0);
        let off: Vec<f64> = exact.iter().zip(&noise).map(|(e, n)| e + n).collect();
        let m = msle_value(&off, &labels).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert_eq!(m > 0.0, noise[..labels.len()].iter().any(|&n| n != 0.0));
        prop_assert!(distill_value(&exact, &off).unwrap() >= 0.0);
    }

    #[test]
    fn wavelet_features_ignore_names_and_input_order(s in steps(20), rot in any::<usize>()) {
        let g = tree_from(&s, "iso");
        let n = g.len();
        let name = |i: usize| format!("v{}", 3 * (n - i));
        let mut adoptions: Vec<Adoption> = (0..n)
            .map(|i| match g.parent(i) {
                None => Adoption::root(name(i)),
                Some(p) => Adoption::new(name(i), g.time(i), name(p)),
            })
            .collect();
        let tail = &mut adoptions[1..];
        if !tail.is_empty() {
            let k = rot % tail.len();
            tail.rotate_left(k);
        }
        let h = CascadeGraph::build(adoptions, "iso2", 0.0).unwrap();
        let spec = NodeFeatureSpec::wavelet(1.0, 6, 8.0);
        let a = node_features(&g, &spec, 100.0).unwrap();
        let b = node_features(&h, &spec, 100.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn encoding_is_a_pure_function(s in steps(15), model_seed in any::<u64>()) {
        let g = tree_from(&s, "e");
        let cfg = EncoderConfig::sized(4, 1, HeadDesign::new(2, 1).unwrap());
        let m = EncoderModel::new(cfg, &mut seed::rng(model_seed)).unwrap();
        let t_o = g.times().fold(0.0, f64::max) + 1.0;
        prop_assert_eq!(m.encode(&g, t_o).unwrap(), m.encode(&g, t_o).unwrap());
        prop_assert_eq!(m.embed(&g, t_o).unwrap(), m.clone().embed(&g, t_o).unwrap());
    }
}
