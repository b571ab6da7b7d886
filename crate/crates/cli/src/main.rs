use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use casgraph::augment::{aug_rwr, aug_sim_with_stats, fit_global_rate, Strategy};
use casgraph::config::{ConfigError, ExperimentConfig};
use casgraph::encoder::EncoderModel;
use casgraph::eval::{
    build_outbreak_dataset, evaluate_outbreak, evaluate_popularity, init_model, load_config_dataset, pretrain_pool,
    run_experiment, RunError,
};
use casgraph::ingest::{synthesize_cascades, write_cascades, CascadeDataset};
use casgraph::seed;
use casgraph::train::{distill, finetune, pretrain_on, MetricsSink};
use casgraph::Task;

#[derive(Parser)]
#[command(name = "casgraph", version, about = "Contrastive learning on information cascade graphs")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Sectioned key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; replaces the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Any config key, as key=value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[arg(long, global = true)]
    input: Option<String>,
    #[arg(long, global = true)]
    label_fraction: Option<String>,
    #[arg(long, global = true)]
    task: Option<String>,

    #[arg(long, global = true)]
    aug_strength: Option<String>,
    #[arg(long, global = true)]
    aug_strategy: Option<String>,
    #[arg(long, global = true)]
    batch_size: Option<String>,
    #[arg(long, global = true)]
    patience: Option<String>,
    #[arg(long, global = true)]
    embedding_dim: Option<String>,
    #[arg(long, global = true)]
    learning_rate: Option<String>,
    #[arg(long, global = true)]
    pretrain_epochs: Option<String>,
    /// `i-j` or `auto`.
    #[arg(long, global = true)]
    projection_head: Option<String>,
    #[arg(long, global = true)]
    restart_prob: Option<String>,
    #[arg(long, global = true)]
    model_size: Option<String>,
    #[arg(long, global = true)]
    rwr_steps: Option<String>,
    #[arg(long, global = true)]
    temperature: Option<String>,
}

impl Global {
    fn flags(&self) -> Result<Vec<(String, String)>, ConfigError> {
        let mut out = Vec::new();
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| ConfigError::Invalid(format!("--set expects key=value, got {s:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("input", &self.input),
            ("label-fraction", &self.label_fraction),
            ("task", &self.task),
            ("aug-strength", &self.aug_strength),
            ("aug-strategy", &self.aug_strategy),
            ("batch-size", &self.batch_size),
            ("patience", &self.patience),
            ("embedding-dim", &self.embedding_dim),
            ("learning-rate", &self.learning_rate),
            ("pretrain-epochs", &self.pretrain_epochs),
            ("projection-head", &self.projection_head),
            ("restart-prob", &self.restart_prob),
            ("model-size", &self.model_size),
            ("rwr-steps", &self.rwr_steps),
            ("temperature", &self.temperature),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        if let Some(s) = self.seed {
            out.push(("seeds".into(), s.to_string()));
        }
        Ok(out)
    }

    fn resolve(&self) -> Result<ExperimentConfig, RunError> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(ConfigError::Io)?),
            None => None,
        };
        Ok(ExperimentConfig::layered(text.as_deref(), std::env::vars(), &self.flags()?)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic cascades in the ingest format.
    Synth {
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Defaults to <out-dir>/synthetic.txt.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Load, filter and split a dataset; write its manifest and labels.
    Ingest,
    /// Augment every cascade once and report per-cascade statistics.
    Augment,
    /// Contrastive pre-training.
    Pretrain,
    /// Supervised fine-tuning from a checkpoint or random init.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Teacher-student distillation.
    Distill {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the configured phase plan for every seed.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn labeled_dataset(cfg: &ExperimentConfig) -> Result<CascadeDataset, RunError> {
    Ok(load_config_dataset(cfg)?.label_fraction(cfg.label_fraction, cfg.data_seed)?)
}

fn dispatch(cli: &Cli) -> Result<(), RunError> {
    let cfg = cli.global.resolve()?;
    let out = &cli.global.out_dir;
    fs::create_dir_all(out)?;
    match &cli.command {
        Command::Synth { count, output } => {
            let path = output.clone().unwrap_or_else(|| out.join("synthetic.txt"));
            let graphs = synthesize_cascades(*count, &cfg.generator, cfg.dataset.dataset_end_time, cfg.data_seed);
            write_cascades(BufWriter::new(File::create(&path)?), &graphs)?;
            println!("wrote {} cascades to {}", graphs.len(), path.display());
        }
        Command::Ingest => {
            let ds = load_config_dataset(&cfg)?;
            let source = cfg.input.as_ref().map_or("synthetic".into(), |p| p.display().to_string());
            fs::write(out.join("dataset.manifest"), ds.manifest(&source))?;
            let mut w = BufWriter::new(File::create(out.join("labels.tsv"))?);
            writeln!(w, "id\tsplit\tlabel\tobserved_nodes")?;
            for c in &ds.labeled {
                writeln!(w, "{}\t{}\t{}\t{}", c.graph.id(), c.split.as_str(), c.label, c.graph.len())?;
            }
            for g in &ds.unlabeled {
                writeln!(w, "{}\tunlabeled\t\t{}", g.id(), g.len())?;
            }
            w.flush()?;
            print!("{}", ds.manifest(&source));
        }
        Command::Augment => augment_verb(&cfg, out)?,
        Command::Pretrain => {
            let ds = labeled_dataset(&cfg)?;
            let s = first_seed(&cfg);
            let mut model = init_model(&cfg, s)?;
            let mut sink = MetricsSink::to_file(&out.join("metrics.jsonl"))?;
            let pool = pretrain_pool(&cfg, &ds, None);
            let r = pretrain_on(&pool, &ds, &mut model, &cfg.contrastive_params(), s, &mut sink)?;
            model.save(&out.join("pretrained.ckpt"))?;
            println!("pretrain best epoch {} loss {:.6}", r.best_epoch, r.best_loss);
        }
        Command::Finetune { checkpoint } => {
            let ds = labeled_dataset(&cfg)?;
            let s = first_seed(&cfg);
            let mut model = match checkpoint {
                Some(p) => EncoderModel::load(p)?,
                None => init_model(&cfg, s)?,
            };
            let mut sink = MetricsSink::to_file(&out.join("metrics.jsonl"))?;
            let r = finetune(&ds, &mut model, &cfg.finetune_params(), s, &mut sink)?;
            model.save(&out.join("finetuned.ckpt"))?;
            println!(
                "finetune best epoch {} val {:.6} test {:.6}",
                r.best_epoch,
                r.best_loss,
                r.test_msle.unwrap_or(f64::NAN)
            );
        }
        Command::Distill { checkpoint } => {
            let ds = labeled_dataset(&cfg)?;
            let teacher = EncoderModel::load(checkpoint)?;
            let mut sink = MetricsSink::to_file(&out.join("metrics.jsonl"))?;
            let (student, r) = distill(&teacher, &ds, &cfg.distill_params(), first_seed(&cfg), &mut sink)?;
            student.save(&out.join("student.ckpt"))?;
            println!(
                "distill best epoch {} val {:.6} test {:.6}",
                r.best_epoch,
                r.best_loss,
                r.test_msle.unwrap_or(f64::NAN)
            );
        }
        Command::Eval { checkpoint } => {
            let ds = labeled_dataset(&cfg)?;
            let model = EncoderModel::load(checkpoint)?;
            let (metric, value) = match cfg.task {
                Task::Popularity => ("test_msle", evaluate_popularity(&model, &ds)?),
                Task::Outbreak => {
                    let data = build_outbreak_dataset(&ds, first_seed(&cfg))?;
                    ("accuracy", evaluate_outbreak(&model, &data, ds.config.t_o())?)
                }
            };
            let report = json!({ "task": cfg.task.as_str(), "metric": metric, "value": value });
            fs::write(out.join("eval.json"), format!("{report}\n"))?;
            println!("{report}");
        }
        Command::Run => {
            let summary = run_experiment(&cfg, out)?;
            println!(
                "{} {} over {} seed(s): {}",
                summary.task,
                summary.report.metric,
                summary.report.per_seed.len(),
                summary.report.format(4)
            );
        }
    }
    Ok(())
}

fn augment_verb(cfg: &ExperimentConfig, out: &Path) -> Result<(), RunError> {
    let ds = load_config_dataset(cfg)?;
    let params = cfg.augment_params(fit_global_rate(&ds)?);
    let t_o = ds.config.t_o();
    let s = first_seed(cfg);
    let mut graphs_out = Vec::new();
    let mut stats = BufWriter::new(File::create(out.join("augment_stats.jsonl"))?);
    let (mut added, mut removed) = (0usize, 0usize);
    let clock = Instant::now();
    let items = ds
        .labeled
        .iter()
        .map(|c| (&c.graph, c.split.as_str()))
        .chain(ds.unlabeled.iter().map(|g| (g, "unlabeled")));
    for (g, split) in items {
        let started = Instant::now();
        let mut rng = seed::rng(seed::view_seed(s, g.id(), 0));
        let (view, a, r) = match params.strategy {
            Strategy::Rwr => {
                let v = aug_rwr(g, &params.rwr, &mut rng)?;
                let r = g.len() - v.len();
                (v, 0, r)
            }
            Strategy::Sim | Strategy::SimRwr => {
                let (v, st) = aug_sim_with_stats(g, &params.sim, t_o, &mut rng)?;
                (v, st.added, st.removed)
            }
        };
        added += a;
        removed += r;
        let line = json!({
            "id": g.id(),
            "split": split,
            "nodes_in": g.len(),
            "nodes_out": view.len(),
            "added": a,
            "removed": r,
            "runtime_us": started.elapsed().as_micros() as u64,
        });
        writeln!(stats, "{line}")?;
        graphs_out.push(view);
    }
    let total = json!({
        "id": "total",
        "cascades": graphs_out.len(),
        "added": added,
        "removed": removed,
        "runtime_us": clock.elapsed().as_micros() as u64,
    });
    writeln!(stats, "{total}")?;
    stats.flush()?;
    write_cascades(BufWriter::new(File::create(out.join("augmented.txt"))?), &graphs_out)?;
    println!("{total}");
    Ok(())
}
