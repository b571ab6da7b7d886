//! Cascade files, labeled/unlabeled datasets, splits and synthetic data.
//!
//! One cascade per line, tab separated:
//!
//! ```text
//! id <TAB> root_user <TAB> pub_time <TAB> M <TAB> u0:0 u0/u1:t1 u0/u1/u2:t2 ...
//! ```
//!
//! Each path entry is the slash-separated diffusion chain from the root to
//! an adopter, followed by that adopter's time since publication. `M` counts
//! the non-root entries. Files may be plain text or gzip.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Pareto, Poisson};
use thiserror::Error;

use crate::graph::{Adoption, CascadeGraph, GraphError, ObservationWindow};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed cascade line: {0}")]
    MalformedLine(String),
    #[error("cascade {id}: header says {declared} adoptions, found {found}")]
    InconsistentCount {
        id: String,
        declared: usize,
        found: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("no cascade survived the filters")]
    EmptyDataset,
    #[error("label fraction {0} outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
}

pub fn parse_line(line: &str) -> Result<CascadeGraph, IngestError> {
    let malformed = || IngestError::MalformedLine(truncate_for_error(line));
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
    if fields.len() != 5 {
        return Err(malformed());
    }
    let id = fields[0];
    let root_user = fields[1];
    let pub_time: f64 = fields[2].trim().parse().map_err(|_| malformed())?;
    let declared: usize = fields[3].trim().parse().map_err(|_| malformed())?;
    if id.is_empty() || root_user.is_empty() {
        return Err(malformed());
    }

    let mut adoptions = Vec::new();
    let mut non_root = 0usize;
    for entry in fields[4].split_whitespace() {
        let (chain, time) = entry.rsplit_once(':').ok_or_else(malformed)?;
        let time: f64 = time.parse().map_err(|_| malformed())?;
        let users: Vec<&str> = chain.split('/').collect();
        if users.iter().any(|u| u.is_empty()) || users[0] != root_user {
            return Err(malformed());
        }
        let user = users[users.len() - 1];
        let parent = (users.len() > 1).then(|| users[users.len() - 2].to_string());
        if parent.is_some() {
            non_root += 1;
        }
        adoptions.push(Adoption {
            user: user.to_string(),
            time,
            parent,
        });
    }
    if non_root != declared {
        return Err(IngestError::InconsistentCount {
            id: id.to_string(),
            declared,
            found: non_root,
        });
    }
    Ok(CascadeGraph::build(adoptions, id, pub_time)?)
}

fn truncate_for_error(line: &str) -> String {
    line.chars().take(80).collect()
}

/// Inverse of [`parse_line`] (without the trailing newline).
pub fn format_line(g: &CascadeGraph) -> String {
    let mut out = String::new();
    let root = &g.root().user;
    let _ = write!(out, "{}\t{}\t{}\t{}\t", g.id(), root, g.pub_time(), g.len() - 1);
    let mut paths: Vec<String> = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        // Chain users are built parent-first, so the parent's path is ready.
        let path = match g.parent(i) {
            None => g.nodes()[i].user.clone(),
            Some(p) => format!("{}/{}", paths[p], g.nodes()[i].user),
        };
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{}:{}", path, g.time(i));
        paths.push(path);
    }
    out
}

pub fn write_cascades<'a, W: Write>(
    mut w: W,
    graphs: impl IntoIterator<Item = &'a CascadeGraph>,
) -> std::io::Result<()> {
    for g in graphs {
        writeln!(w, "{}", format_line(g))?;
    }
    Ok(())
}

/// Reads every line of a plain or gzip cascade file. Lines that fail to
/// parse are returned as errors alongside the good graphs.
pub fn read_cascades(path: &Path) -> Result<(Vec<CascadeGraph>, Vec<IngestError>), IngestError> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic)?;
    let file = File::open(path)?;
    let reader: Box<dyn BufRead> = if n == 2 && magic == [0x1f, 0x8b] {
        Box::new(BufReader::new(GzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut graphs = Vec::new();
    let mut errors = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_line(&line) {
            Ok(g) => graphs.push(g),
            Err(e) => errors.push(e),
        }
    }
    Ok((graphs, errors))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub window: ObservationWindow,
    pub min_observed_nodes: usize,
    pub max_observed_nodes: usize,
    /// Last timestamp covered by the data, in the same unit as `pub_time`.
    pub dataset_end_time: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            window: ObservationWindow::new(1.0, 24.0).unwrap(),
            min_observed_nodes: 10,
            max_observed_nodes: 100,
            dataset_end_time: f64::INFINITY,
            train_fraction: 0.5,
            val_fraction: 0.1,
            test_fraction: 0.4,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let sum = self.train_fraction + self.val_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(IngestError::InvalidConfig(format!("split fractions sum to {sum}")));
        }
        if [self.train_fraction, self.val_fraction, self.test_fraction]
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
        {
            return Err(IngestError::InvalidConfig("split fraction outside [0, 1]".into()));
        }
        if self.min_observed_nodes > self.max_observed_nodes || self.max_observed_nodes == 0 {
            return Err(IngestError::InvalidConfig(format!(
                "min_observed_nodes {} > max_observed_nodes {}",
                self.min_observed_nodes, self.max_observed_nodes
            )));
        }
        Ok(())
    }

    pub fn t_o(&self) -> f64 {
        self.window.observation()
    }

    pub fn t_p(&self) -> f64 {
        self.window.prediction()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCascade {
    /// Observed graph, truncated to the configured maximum size.
    pub graph: CascadeGraph,
    /// Popularity at the prediction horizon, root included.
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeDataset {
    pub config: DatasetConfig,
    pub labeled: Vec<LabeledCascade>,
    /// Observed graphs whose prediction horizon lies past the data's end.
    pub unlabeled: Vec<CascadeGraph>,
    /// Input lines that failed to parse.
    pub skipped_lines: usize,
}

impl CascadeDataset {
    /// Filters, truncates, labels and splits full cascades.
    pub fn assemble(graphs: Vec<CascadeGraph>, config: DatasetConfig) -> Result<Self, IngestError> {
        config.validate()?;
        let t_o = config.t_o();
        let t_p = config.t_p();
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for g in graphs {
            let observed = g.observe(t_o);
            if observed.len() < config.min_observed_nodes {
                continue;
            }
            let observed = observed.truncate(config.max_observed_nodes);
            if g.pub_time() + t_p <= config.dataset_end_time {
                labeled.push(LabeledCascade {
                    graph: observed,
                    label: g.popularity(t_p),
                    split: Split::Train,
                });
            } else {
                unlabeled.push(observed);
            }
        }
        if labeled.is_empty() && unlabeled.is_empty() {
            return Err(IngestError::EmptyDataset);
        }

        let n = labeled.len();
        let n_train = ((config.train_fraction * n as f64).round() as usize).min(n);
        let n_val = ((config.val_fraction * n as f64).round() as usize).min(n - n_train);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
        for (rank, &i) in order.iter().enumerate() {
            labeled[i].split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }

        Ok(CascadeDataset {
            config,
            labeled,
            unlabeled,
            skipped_lines: 0,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledCascade> + '_ {
        self.labeled.iter().filter(move |c| c.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Every observed graph, labeled first.
    pub fn all_graphs(&self) -> impl Iterator<Item = &CascadeGraph> + '_ {
        self.labeled.iter().map(|c| &c.graph).chain(self.unlabeled.iter())
    }

    /// Training-split labeled graphs followed by the unlabeled pool.
    pub fn pretrain_pool(&self, include_unlabeled: bool) -> Vec<&CascadeGraph> {
        let mut pool: Vec<&CascadeGraph> = self.split(Split::Train).map(|c| &c.graph).collect();
        if include_unlabeled {
            pool.extend(self.unlabeled.iter());
        }
        pool
    }

    /// Keeps a seeded subset of ⌈fraction·N_train⌉ training labels; the rest
    /// of the training graphs join the unlabeled pool.
    pub fn label_fraction(&self, fraction: f64, seed: u64) -> Result<Self, IngestError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(IngestError::FractionOutOfRange(fraction));
        }
        let train: Vec<usize> = (0..self.labeled.len())
            .filter(|&i| self.labeled[i].split == Split::Train)
            .collect();
        let keep = ceil_count(fraction, train.len());
        let mut chosen = train.clone();
        chosen.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut dropped = vec![false; self.labeled.len()];
        for &i in &chosen[keep..] {
            dropped[i] = true;
        }

        let mut out = self.clone();
        out.labeled.clear();
        let mut moved = Vec::new();
        for (c, drop) in self.labeled.iter().zip(dropped) {
            if drop {
                moved.push(c.graph.clone());
            } else {
                out.labeled.push(c.clone());
            }
        }
        out.unlabeled.extend(moved);
        Ok(out)
    }

    pub fn manifest(&self, source: &str) -> String {
        let c = &self.config;
        let mut m = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(m, "{k}={v}");
        };
        kv("source", source.to_string());
        kv("t_o", c.t_o().to_string());
        kv("t_p", c.t_p().to_string());
        kv("min_observed_nodes", c.min_observed_nodes.to_string());
        kv("max_observed_nodes", c.max_observed_nodes.to_string());
        kv("dataset_end_time", c.dataset_end_time.to_string());
        kv("train_fraction", c.train_fraction.to_string());
        kv("val_fraction", c.val_fraction.to_string());
        kv("test_fraction", c.test_fraction.to_string());
        kv("seed", c.seed.to_string());
        kv("labeled", self.labeled.len().to_string());
        kv("unlabeled", self.unlabeled.len().to_string());
        kv("train", self.split_len(Split::Train).to_string());
        kv("val", self.split_len(Split::Val).to_string());
        kv("test", self.split_len(Split::Test).to_string());
        kv("skipped_lines", self.skipped_lines.to_string());
        m
    }
}

/// ⌈fraction·n⌉, ignoring floating-point dust above an exact integer.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let rounded = raw.round();
    let k = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (k as usize).min(n)
}

pub fn load_dataset(path: &Path, config: DatasetConfig) -> Result<CascadeDataset, IngestError> {
    let (graphs, errors) = read_cascades(path)?;
    let mut ds = CascadeDataset::assemble(graphs, config)?;
    ds.skipped_lines = errors.len();
    Ok(ds)
}

/// Parameters of the synthetic cascade generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// Mean number of adoptions per cascade before the size cap.
    pub branching_mean: f64,
    /// Rate of the exponential adoption-delay law (per time unit).
    pub time_rate: f64,
    /// Hard cap on cascade size, root included.
    pub max_size: usize,
    /// Pareto tail index of the per-cascade virality multiplier (> 1).
    pub tail_index: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            branching_mean: 60.0,
            time_rate: 0.5,
            max_size: 400,
            tail_index: 2.5,
        }
    }
}

/// Grows `n` full cascades: heavy-tailed final size, exponential adoption
/// delays, degree-proportional attachment.
pub fn synthesize_cascades(
    n: usize,
    gen: &GeneratorParams,
    dataset_end_time: f64,
    seed: u64,
) -> Vec<CascadeGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let virality = Pareto::new((gen.tail_index - 1.0) / gen.tail_index, gen.tail_index)
        .expect("tail index must exceed 1");
    let delay = Exp::new(gen.time_rate).expect("time rate must be positive");
    let span = if dataset_end_time.is_finite() { dataset_end_time.max(0.0) } else { 0.0 };

    (0..n)
        .map(|c| {
            let pub_time = if span > 0.0 { rng.random_range(0.0..span) } else { 0.0 };
            let mean = gen.branching_mean * virality.sample(&mut rng);
            let drawn = if mean > 0.0 {
                Poisson::new(mean).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
            } else {
                0
            };
            let m = drawn.min(gen.max_size.saturating_sub(1));
            let mut times: Vec<f64> = (0..m).map(|_| delay.sample(&mut rng)).collect();
            times.sort_by(f64::total_cmp);

            let mut adoptions = Vec::with_capacity(m + 1);
            adoptions.push(Adoption::root("u0"));
            // Each node appears once per incident edge, so a uniform pick is
            // degree-proportional.
            let mut urn: Vec<usize> = Vec::with_capacity(2 * m);
            for (k, t) in times.into_iter().enumerate() {
                let child = k + 1;
                let parent = if urn.is_empty() { 0 } else { urn[rng.random_range(0..urn.len())] };
                adoptions.push(Adoption::new(format!("u{child}"), t, format!("u{parent}")));
                urn.push(parent);
                urn.push(child);
            }
            CascadeGraph::build(adoptions, format!("s{c}"), pub_time)
                .expect("generator builds valid trees")
        })
        .collect()
}

pub fn generate_synthetic(
    n: usize,
    config: DatasetConfig,
    gen: &GeneratorParams,
    seed: u64,
) -> Result<CascadeDataset, IngestError> {
    let graphs = synthesize_cascades(n, gen, config.dataset_end_time, seed);
    CascadeDataset::assemble(graphs, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_chain() {
        let g = parse_line("c1\tA\t1000\t2\tA:0 A/B:1.5 A/B/C:2.0").unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.id(), "c1");
        assert_eq!(g.pub_time(), 1000.0);
        let users: Vec<_> = g.nodes().iter().map(|a| a.user.as_str()).collect();
        assert_eq!(users, ["A", "B", "C"]);
        assert_eq!(g.times().collect::<Vec<_>>(), [0.0, 1.5, 2.0]);
        assert_eq!(g.parent(2), Some(1));
    }

    #[test]
    fn count_mismatch() {
        assert!(matches!(
            parse_line("c2\tA\t1000\t1\tA:0").unwrap_err(),
            IngestError::InconsistentCount { declared: 1, found: 0, .. }
        ));
        assert_eq!(parse_line("c3\tA\t1000\t1\tA:0 A/B:0.5").unwrap().len(), 2);
    }

    #[test]
    fn malformed_lines() {
        for bad in [
            "c1\tA\t1000\t1",
            "c1\tA\tx\t1\tA:0 A/B:1",
            "c1\tA\t1000\t1\tA:0 A/B",
            "c1\tA\t1000\t1\tA:0 Z/B:1",
            "c1\tA\t1000\t1\tA:0 A//B:1",
        ] {
            assert!(matches!(parse_line(bad), Err(IngestError::MalformedLine(_))), "{bad}");
        }
        assert!(matches!(
            parse_line("c1\tA\t1000\t1\tA:0 A/B/C:1").unwrap_err(),
            IngestError::Graph(GraphError::DanglingParent { .. })
        ));
    }

    #[test]
    fn format_round_trips() {
        let line = "c1\tA\t1000\t3\tA:0 A/B:1.5 A/C:1.75 A/B/D:2";
        let g = parse_line(line).unwrap();
        assert_eq!(format_line(&g), line);
        assert_eq!(parse_line(&format_line(&g)).unwrap(), g);
    }

    fn star(id: &str, n: usize, pub_time: f64, dt: f64) -> CascadeGraph {
        let mut a = vec![Adoption::root("r")];
        for k in 1..n {
            a.push(Adoption::new(format!("v{k}"), k as f64 * dt, "r"));
        }
        CascadeGraph::build(a, id, pub_time).unwrap()
    }

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            window: ObservationWindow::new(1.0, 24.0).unwrap(),
            dataset_end_time: 100.0,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn filters_small_observed_graphs() {
        let graphs = vec![star("small", 4, 0.0, 0.1), star("big", 20, 0.0, 0.01)];
        let ds = CascadeDataset::assemble(graphs, small_config()).unwrap();
        assert_eq!(ds.labeled.len(), 1);
        assert_eq!(ds.labeled[0].graph.id(), "big");
    }

    #[test]
    fn late_cascades_are_unlabeled() {
        let graphs = vec![star("early", 20, 10.0, 0.01), star("late", 20, 80.0, 0.01)];
        let ds = CascadeDataset::assemble(graphs, small_config()).unwrap();
        assert_eq!(ds.labeled.len(), 1);
        assert_eq!(ds.labeled[0].graph.id(), "early");
        assert_eq!(ds.unlabeled.len(), 1);
        assert_eq!(ds.unlabeled[0].id(), "late");
    }

    #[test]
    fn truncates_observed_but_labels_full() {
        // 120 adoptions inside the window, 30 more before t_p.
        let mut a = vec![Adoption::root("r")];
        for k in 1..=120 {
            a.push(Adoption::new(format!("v{k}"), k as f64 * 0.005, "r"));
        }
        for k in 121..=150 {
            a.push(Adoption::new(format!("v{k}"), 2.0 + k as f64 * 0.01, "r"));
        }
        let g = CascadeGraph::build(a, "x", 0.0).unwrap();
        let ds = CascadeDataset::assemble(vec![g], small_config()).unwrap();
        assert_eq!(ds.labeled[0].graph.len(), 100);
        assert_eq!(ds.labeled[0].label, 151);
        assert!(ds.labeled[0].graph.times().all(|t| t < 1.0));
    }

    #[test]
    fn empty_dataset() {
        let graphs = vec![star("small", 3, 0.0, 0.1)];
        assert!(matches!(
            CascadeDataset::assemble(graphs, small_config()),
            Err(IngestError::EmptyDataset)
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = DatasetConfig::default();
        c.val_fraction = 0.2;
        assert!(c.validate().is_err());
        let mut c = DatasetConfig::default();
        c.min_observed_nodes = 200;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ceil_count_ignores_float_dust() {
        assert_eq!(ceil_count(0.01, 1000), 10);
        assert_eq!(ceil_count(0.1, 700), 70);
        assert_eq!(ceil_count(0.1, 701), 71);
        assert_eq!(ceil_count(1.0, 5), 5);
        assert_eq!(ceil_count(0.01, 5), 1);
    }

    fn synthetic(n: usize, seed: u64) -> CascadeDataset {
        let cfg = DatasetConfig {
            dataset_end_time: 72.0,
            seed,
            ..DatasetConfig::default()
        };
        generate_synthetic(n, cfg, &GeneratorParams::default(), seed).unwrap()
    }

    #[test]
    fn label_fraction_subsets() {
        let ds = synthetic(600, 3);
        let n_train = ds.split_len(Split::Train);
        assert_eq!(ds.label_fraction(1.0, 9).unwrap(), ds);
        let tenth = ds.label_fraction(0.1, 9).unwrap();
        assert_eq!(tenth.split_len(Split::Train), ceil_count(0.1, n_train));
        assert_eq!(tenth.split_len(Split::Val), ds.split_len(Split::Val));
        assert_eq!(tenth.split_len(Split::Test), ds.split_len(Split::Test));
        assert_eq!(
            tenth.unlabeled.len(),
            ds.unlabeled.len() + n_train - tenth.split_len(Split::Train)
        );
        assert_eq!(tenth, ds.label_fraction(0.1, 9).unwrap());
        assert!(matches!(ds.label_fraction(0.0, 1), Err(IngestError::FractionOutOfRange(_))));
        assert!(matches!(ds.label_fraction(1.5, 1), Err(IngestError::FractionOutOfRange(_))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthesize_cascades(50, &GeneratorParams::default(), 72.0, 11);
        let b = synthesize_cascades(50, &GeneratorParams::default(), 72.0, 11);
        let text = |gs: &[CascadeGraph]| gs.iter().map(format_line).collect::<Vec<_>>().join("\n");
        assert_eq!(text(&a), text(&b));
        assert_ne!(text(&a), text(&synthesize_cascades(50, &GeneratorParams::default(), 72.0, 12)));
    }

    #[test]
    fn degenerate_generator_is_empty() {
        let gen = GeneratorParams {
            branching_mean: 0.0,
            max_size: 1,
            ..GeneratorParams::default()
        };
        let cfg = DatasetConfig {
            dataset_end_time: 72.0,
            ..DatasetConfig::default()
        };
        assert!(matches!(generate_synthetic(100, cfg, &gen, 1), Err(IngestError::EmptyDataset)));
    }
}
