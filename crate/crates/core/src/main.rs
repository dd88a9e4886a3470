use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use kgcrs::config::{RunConfig, SplitName, Task};
use kgcrs::eval::{self, SweepAxis};
use kgcrs::fixture::{self, FixtureSpec};
use kgcrs::selftest;
use kgcrs::train::{self, Pipeline};

#[derive(Parser)]
#[command(name = "kgcrs", version, about = "Knowledge-tree prompted conversational recommender")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Valid => SplitName::Valid,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Rec,
    Conv,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    TreeDepth,
    TreeDegree,
    Alpha,
    Beta,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::TreeDepth => SweepAxis::TreeDepth,
            AxisArg::TreeDegree => SweepAxis::TreeDegree,
            AxisArg::Alpha => SweepAxis::Alpha,
            AxisArg::Beta => SweepAxis::Beta,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the init and shuffle seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured task.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train both stages, save a checkpoint and evaluate.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a saved checkpoint, or untrained weights when none is given.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Write the knowledge trees of every example in a split.
    BuildTrees {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train and evaluate every variant over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Vary one hyper-parameter over the configured values.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AxisArg,
    },
    /// Write a synthetic fixture corpus.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        dialogues: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Run the oracle and gradient suites.
    Selftest {
        /// Skip the end-to-end gradient check.
        #[arg(long)]
        quick: bool,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config).with_context(|| format!("loading {}", c.config.display()))?;
    if let Some(s) = c.seed {
        cfg.seeds.init = s;
        cfg.seeds.shuffle = s;
    }
    match c.task {
        Some(TaskArg::Rec) => cfg.task = Task::Rec,
        Some(TaskArg::Conv) => cfg.task = Task::Conv,
        None => {}
    }
    cfg.validate()?;
    cfg.require_paths()?;
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Pipeline whose weights come from `checkpoint`; the backbone setup is
/// skipped since the checkpoint overwrites it.
fn restored(cfg: &RunConfig, checkpoint: &Path) -> Result<(Pipeline, String)> {
    let (g, d) = train::load_inputs(cfg)?;
    let hash = eval::input_hash(&g, &d, cfg);
    let mut quick = cfg.clone();
    quick.train.backbone_pretrain_steps = 0;
    let mut p = Pipeline::from_parts(&quick, g, &d)?;
    p.cfg = cfg.clone();
    p.model.cfg = cfg.clone();
    p.load_checkpoint(checkpoint)?;
    Ok((p, hash))
}

fn untrained(cfg: &RunConfig) -> Result<(Pipeline, String)> {
    let (g, d) = train::load_inputs(cfg)?;
    let hash = eval::input_hash(&g, &d, cfg);
    Ok((Pipeline::from_parts(cfg, g, &d)?, hash))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { common } => {
            let cfg = load_config(&common)?;
            let (g, d) = train::load_inputs(&cfg)?;
            let hash = eval::input_hash(&g, &d, &cfg);
            let mut p = Pipeline::from_parts(&cfg, g, &d)?;
            let summary = p.train();
            write(&common.out.join("train_log.jsonl"), &(p.log.join("\n") + "\n"))?;
            let summary = summary?;
            if summary.plm_hash_before != summary.plm_hash_after {
                bail!("backbone parameters changed during training");
            }
            let ckpt = common.out.join("checkpoint");
            fs::create_dir_all(&ckpt)?;
            p.save_checkpoint(&ckpt)?;
            let report = eval::with_curves(eval::evaluate(&p, cfg.eval.split, &hash)?, &summary);
            write(&common.out.join("metrics.json"), &report.to_json())?;
            print!("{}", report.to_table());
        }
        Cmd::Eval { common, checkpoint, split } => {
            let cfg = load_config(&common)?;
            let (p, hash) = match checkpoint {
                Some(c) => restored(&cfg, &c)?,
                None => untrained(&cfg)?,
            };
            let split = split.map(SplitName::from).unwrap_or(cfg.eval.split);
            let report = eval::evaluate(&p, split, &hash)?;
            write(&common.out.join("metrics.json"), &report.to_json())?;
            print!("{}", report.to_table());
        }
        Cmd::BuildTrees { common, checkpoint, split } => {
            let cfg = load_config(&common)?;
            let (p, hash) = match checkpoint {
                Some(c) => restored(&cfg, &c)?,
                None => untrained(&cfg)?,
            };
            let sim = p.model.sim_table(&p.store);
            let mut text = String::new();
            let mut count = 0;
            let split: SplitName = split.into();
            for ex in p.split(split) {
                for t in p.model.build_trees(&p.store, ex, &sim)? {
                    let root = p.graph.entity_name(t.root());
                    text.push_str(&format!("{}\t{}\t{}\n", ex.id, root, t.serialize(&p.graph).text));
                    count += 1;
                }
            }
            write(&common.out.join("trees.txt"), &text)?;
            let manifest = serde_json::json!({
                "split": format!("{split:?}").to_lowercase(),
                "examples": p.split(split).len(),
                "trees": count,
                "depth": cfg.tree.depth,
                "degree": cfg.tree.degree,
                "trees_sha256": hex::encode(Sha256::digest(text.as_bytes())),
                "input_hash": hash,
                "config": cfg,
            });
            write(&common.out.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
            println!("{count} trees");
        }
        Cmd::Ablate { common } => {
            let cfg = load_config(&common)?;
            let (g, d) = train::load_inputs(&cfg)?;
            let report = eval::run_ablation(&cfg, &g, &d)?;
            write(&common.out.join("ablation.json"), &report.to_json())?;
            write(&common.out.join("ablation.tsv"), &report.to_table())?;
            print!("{}", report.to_table());
        }
        Cmd::Sweep { common, axis } => {
            let axis = SweepAxis::from(axis);
            let cfg = load_config(&common)?;
            let (g, d) = train::load_inputs(&cfg)?;
            let report = eval::run_sweep(&cfg, axis, &g, &d)?;
            let stem = format!("sweep_{}", axis.as_str());
            write(&common.out.join(format!("{stem}.json")), &report.to_json())?;
            write(&common.out.join(format!("{stem}.tsv")), &report.to_table())?;
            print!("{}", report.to_table());
        }
        Cmd::Fixture { out, dialogues, seed } => {
            let fx = fixture::generate(&FixtureSpec { dialogues, seed, ..FixtureSpec::default() });
            fx.write(&out)?;
            println!("{} dialogues, {} triples", fx.dialogues.len(), fx.triples.len());
        }
        Cmd::Selftest { quick } => {
            let mut checks = selftest::oracle_suite();
            checks.extend(selftest::gradient_suite(!quick));
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if !ok {
                bail!("self-test failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<kgcrs::Error>(), Some(kgcrs::Error::Config { .. })));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
