//! `dualmar` command line: one subcommand per pipeline stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualmar::formats::Transcript;
use dualmar::stages::{self, Layout, ModelChoice, GRADCHECK_TOLERANCE};
use dualmar::{fsio, logging, Error, PipelineConfig, Result};
use dualmar_core::ehr::Task;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "dualmar", version, about = "DualMAR pipeline stages")]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Log level for the JSON-Lines log on standard error.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct KgeFlags {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    test_frac: Option<f64>,
    /// Skip candidates that form other known triples when ranking.
    #[arg(long)]
    filtered: Option<bool>,
}

#[derive(Args, Debug, Default)]
struct TaskFlags {
    /// diagnosis or hf
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Merge triple files into a normalized KG archive.
    KgNormalize {
        /// Ontology-sourced triple TSV files.
        #[arg(long)]
        ontology: Vec<PathBuf>,
        /// Generated triple TSV files.
        #[arg(long)]
        generated: Vec<PathBuf>,
        /// Cross-reference table (system, key, code).
        #[arg(long)]
        xref: Option<PathBuf>,
        #[arg(long)]
        theta: Option<f64>,
        /// Archive directory; defaults to `<out-dir>/kg`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print node, relation and triple counts of an archive.
    KgStats {
        #[arg(long)]
        kg: Option<PathBuf>,
    },
    /// Render every prompt the harvest would send, as JSON Lines.
    HarvestRender {
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        x: Option<usize>,
        #[arg(long)]
        y: Option<usize>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse a transcript of oracle responses into triple TSV.
    HarvestParse {
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        x: Option<usize>,
        #[arg(long)]
        y: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the polar embedding on a KG archive.
    KgeTrain {
        #[arg(long)]
        kg: Option<PathBuf>,
        #[command(flatten)]
        flags: KgeFlags,
    },
    /// Link-prediction metrics on the held-out triples.
    KgeEval {
        #[arg(long)]
        kg: Option<PathBuf>,
        #[command(flatten)]
        flags: KgeFlags,
    },
    /// Export coded entity rows as the encoder's feature prior.
    KgeExport {
        #[command(flatten)]
        flags: KgeFlags,
    },
    /// Generate a synthetic EHR dataset with planted structure.
    DataSynth {
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Split patients into train, validation and test.
    DataSplit,
    /// Count co-occurrences on the training split.
    GraphBuild {
        #[arg(long)]
        phi: Option<f64>,
    },
    /// Pretrain encoder and decoders on the lab proxy tasks.
    ProxyPretrain {
        #[arg(long)]
        joint_epochs: Option<usize>,
        #[arg(long)]
        individual_epochs: Option<usize>,
    },
    /// Train a task head on top of the pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        flags: TaskFlags,
    },
    /// Train encoder and task head from scratch.
    DirectTrain {
        #[command(flatten)]
        flags: TaskFlags,
    },
    /// Score a model on a split and write a metric report.
    Evaluate {
        #[command(flatten)]
        flags: TaskFlags,
        /// finetune, direct or fresh
        #[arg(long, default_value = "finetune")]
        model: ModelChoice,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference check of every backward rule.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::KgNormalize { .. } => "kg-normalize",
            Command::KgStats { .. } => "kg-stats",
            Command::HarvestRender { .. } => "harvest-render",
            Command::HarvestParse { .. } => "harvest-parse",
            Command::KgeTrain { .. } => "kge-train",
            Command::KgeEval { .. } => "kge-eval",
            Command::KgeExport { .. } => "kge-export",
            Command::DataSynth { .. } => "data-synth",
            Command::DataSplit => "data-split",
            Command::GraphBuild { .. } => "graph-build",
            Command::ProxyPretrain { .. } => "proxy-pretrain",
            Command::Finetune { .. } => "finetune",
            Command::DirectTrain { .. } => "direct-train",
            Command::Evaluate { .. } => "evaluate",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

fn set<T>(slot: &mut T, v: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = v {
        *slot = v.clone();
    }
}

fn apply_kge(cfg: &mut PipelineConfig, f: &KgeFlags) {
    let k = &mut cfg.kge;
    set(&mut k.k, &f.k);
    set(&mut k.gamma, &f.gamma);
    set(&mut k.lambda, &f.lambda);
    set(&mut k.negatives, &f.negatives);
    set(&mut k.steps, &f.steps);
    set(&mut k.lr, &f.lr);
    set(&mut k.batch_size, &f.batch_size);
    set(&mut k.test_frac, &f.test_frac);
    set(&mut k.filtered, &f.filtered);
    if f.k.is_some() {
        cfg.model.feature_dim = 2 * cfg.kge.k;
    }
}

fn apply_task(cfg: &mut PipelineConfig, f: &TaskFlags) {
    set(&mut cfg.finetune.task, &f.task);
    if f.epochs.is_some() {
        cfg.finetune.epochs = f.epochs;
    }
}

/// Config file, then flag overrides, then seed propagation and checks.
fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    set(&mut cfg.seed, &cli.seed);
    match &cli.command {
        Command::KgNormalize { theta, .. } => set(&mut cfg.kg.theta, theta),
        Command::HarvestRender { x, y, .. } | Command::HarvestParse { x, y, .. } => {
            set(&mut cfg.harvest.x, x);
            set(&mut cfg.harvest.y, y);
        }
        Command::KgeTrain { flags, .. } | Command::KgeEval { flags, .. } | Command::KgeExport { flags } => {
            apply_kge(&mut cfg, flags)
        }
        Command::DataSynth { patients } => set(&mut cfg.data.synthetic.patients, patients),
        Command::GraphBuild { phi } => set(&mut cfg.graph.phi, phi),
        Command::ProxyPretrain {
            joint_epochs,
            individual_epochs,
        } => {
            set(&mut cfg.pretrain.joint_epochs, joint_epochs);
            set(&mut cfg.pretrain.individual_epochs, individual_epochs);
        }
        Command::Finetune { flags } | Command::DirectTrain { flags } | Command::Evaluate { flags, .. } => {
            apply_task(&mut cfg, flags)
        }
        Command::KgStats { .. } | Command::DataSplit | Command::Gradcheck { .. } => {}
    }
    cfg.resolve()
}

fn run(cli: &Cli) -> Result<Value> {
    let threads = stages::worker_threads()?;
    log::debug!("worker cap {threads}; stages run sequentially");
    let cfg = resolve_config(cli)?;
    let layout = Layout::new(&cli.out_dir);
    let kg_dir = |p: &Option<PathBuf>| p.clone().unwrap_or_else(|| layout.kg());
    match &cli.command {
        Command::KgNormalize {
            ontology,
            generated,
            xref,
            out,
            ..
        } => stages::kg_normalize(&cfg, ontology, generated, xref.as_deref(), &kg_dir(out)),
        Command::KgStats { kg } => stages::kg_stats_summary(&kg_dir(kg)),
        Command::HarvestRender { specs, out, .. } => {
            let text = stages::harvest_render(&cfg, &stages::read_specs(specs)?)?;
            match out {
                Some(p) => {
                    fsio::write_atomic(p, text.as_bytes())?;
                    Ok(json!({"prompts": text.lines().count()}))
                }
                None => {
                    print!("{text}");
                    Ok(Value::Null)
                }
            }
        }
        Command::HarvestParse {
            specs,
            transcript,
            out,
            ..
        } => {
            let out = out.clone().unwrap_or_else(|| layout.harvested());
            stages::harvest_parse(&cfg, &stages::read_specs(specs)?, &Transcript::read(transcript)?, &out)
        }
        Command::KgeTrain { kg, .. } => stages::kge_train(&cfg, &kg_dir(kg), &layout),
        Command::KgeEval { kg, .. } => stages::kge_eval(&cfg, &kg_dir(kg), &layout),
        Command::KgeExport { .. } => stages::kge_export(&cfg, &layout),
        Command::DataSynth { .. } => stages::data_synth(&cfg, &layout),
        Command::DataSplit => stages::data_split(&cfg, &layout),
        Command::GraphBuild { .. } => stages::graph_build(&cfg, &layout),
        Command::ProxyPretrain { .. } => stages::proxy_pretrain(&cfg, &layout),
        Command::Finetune { .. } => stages::finetune(&cfg, &layout),
        Command::DirectTrain { .. } => stages::direct_train(&cfg, &layout),
        Command::Evaluate { model, split, .. } => {
            let report = stages::evaluate(&cfg, &layout, *model, split)?;
            print!("{}", report.to_line());
            Ok(Value::Null)
        }
        Command::Gradcheck { instances } => gradcheck(*instances, cfg.seed),
    }
}

fn gradcheck(instances: usize, seed: u64) -> Result<Value> {
    let reports = stages::gradcheck(instances, seed)?;
    let mut worst = 0.0f64;
    for r in &reports {
        println!(
            "{}",
            json!({"primitive": r.name, "instances": r.instances, "max_rel_err": r.max_rel_err})
        );
        worst = worst.max(r.max_rel_err);
    }
    if !(worst <= GRADCHECK_TOLERANCE) {
        return Err(Error::Config(format!(
            "gradient check failed: max relative error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(Value::Null)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init(cli.log_level);
    let name = cli.command.name();
    match run(&cli) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", logging::error_record(name, &e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
