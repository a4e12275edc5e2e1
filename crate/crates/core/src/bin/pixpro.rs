use clap::{Args, Parser, Subcommand};
use pixpro::data::{gen_synthetic_dataset, Dataset};
use pixpro::eval;
use pixpro::trainer::{self, checkpoint, TrainRunConfig};
use pixpro::PixproError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pixpro", about = "Pixel-level self-supervised pretraining and evaluation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key-value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set gamma=4 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Dataset directory (shorthand for --set dataset=...)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Loss variant: pixpro, pixcontrast, or pixpro+instance
    #[arg(long)]
    variant: Option<String>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainRunConfig, PixproError> {
        let mut cfg = match &self.config {
            Some(path) => TrainRunConfig::from_file(path)?,
            None => TrainRunConfig::default(),
        };
        if let Some(dataset) = &self.dataset {
            cfg.set("dataset", &dataset.display().to_string())?;
        }
        if let Some(variant) = &self.variant {
            cfg.set("variant", variant)?;
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        for kv in &self.sets {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                PixproError::Config(format!("--set expects KEY=VALUE, got '{kv}'"))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        n_images: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        n_classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run (or resume) self-supervised pretraining
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint in --out
        #[arg(long)]
        resume: bool,
    },
    /// Linear-probe a checkpoint's frozen features
    EvalProbe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
    },
    /// Pixel-correspondence retrieval accuracy
    EvalCorrespondence {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        n_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Embedding-variance collapse check
    DiagnoseCollapse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = eval::COLLAPSE_STD_THRESHOLD)]
        threshold: f64,
    },
    /// Run a config grid: pretrain + probes per cell, cached per cell
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Grid axis, e.g. --axis gamma=0.5,1,2,4,8
        #[arg(long, value_name = "KEY=V1,V2,...")]
        axis: String,
        #[arg(long, default_value_t = 100)]
        probe_epochs: usize,
        #[arg(long, default_value_t = 64)]
        eval_pairs: usize,
    },
    /// Finite-difference gradient verification suite
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print a checkpoint's manifest
    InspectCheckpoint { path: PathBuf },
}

fn dataset_for(state_cfg: &TrainRunConfig, flag: &Option<PathBuf>) -> Result<Dataset, PixproError> {
    let root = match flag {
        Some(p) => p.clone(),
        None => PathBuf::from(&state_cfg.dataset),
    };
    Dataset::open(&root)
}

fn run(cli: Cli) -> Result<(), PixproError> {
    match cli.command {
        Command::GenData {
            out,
            n_images,
            size,
            n_classes,
            seed,
        } => {
            gen_synthetic_dataset(&out, n_images, size, n_classes, seed)?;
            println!("wrote {n_images} images to {}", out.display());
        }
        Command::Pretrain { config, out, resume } => {
            let cfg = config.build()?;
            let ckpt = trainer::run_pretrain(&cfg, &out, resume, None)?;
            println!("checkpoint: {}", ckpt.display());
        }
        Command::EvalProbe {
            checkpoint: ckpt,
            dataset,
            epochs,
        } => {
            let state = checkpoint::load(&ckpt)?;
            let data = dataset_for(&state.config, &dataset)?;
            let acc = eval::linear_probe(&state, &data, epochs)?;
            println!("linear_probe_top1 = {acc:.4}");
        }
        Command::EvalCorrespondence {
            checkpoint: ckpt,
            dataset,
            n_pairs,
            seed,
        } => {
            let state = checkpoint::load(&ckpt)?;
            let data = dataset_for(&state.config, &dataset)?;
            let res = eval::correspondence_eval(&state, &data, n_pairs, seed)?;
            println!(
                "correspondence_accuracy = {:.4} (chance {:.4}, {} cells, {} pairs)",
                res.accuracy, res.chance, res.cells_evaluated, res.pairs_used
            );
        }
        Command::DiagnoseCollapse {
            checkpoint: ckpt,
            dataset,
            threshold,
        } => {
            let state = checkpoint::load(&ckpt)?;
            let data = dataset_for(&state.config, &dataset)?;
            let report = eval::collapse_diagnostic(&state, &data, threshold)?;
            println!(
                "mean_normalized_std = {:.6}, collapsed = {}",
                report.mean_std, report.collapsed
            );
        }
        Command::Ablate {
            config,
            out,
            axis,
            probe_epochs,
            eval_pairs,
        } => {
            let base = config.build()?;
            let (key, values) = axis.split_once('=').ok_or_else(|| {
                PixproError::Config(format!("--axis expects KEY=V1,V2,..., got '{axis}'"))
            })?;
            let mut grid = Vec::new();
            for value in values.split(',') {
                let mut cfg = base.clone();
                cfg.set(key.trim(), value.trim())?;
                cfg.validate()?;
                grid.push((format!("{key}={value}"), cfg));
            }
            let cells = eval::run_ablation(&grid, &out, probe_epochs, eval_pairs)?;
            println!("{:<20} {:<28} {:>10}", "cell", "metric", "value");
            for cell in &cells {
                match &cell.error {
                    Some(err) => println!("{:<20} FAILED: {err}", cell.label),
                    None => {
                        for report in &cell.reports {
                            println!(
                                "{:<20} {:<28} {:>10.4}",
                                cell.label, report.metric, report.value
                            );
                        }
                    }
                }
            }
        }
        Command::Gradcheck { seed } => {
            let failures = pixpro::gradcheck::run_suite(seed);
            for (name, result) in &failures.checks {
                match result {
                    Ok(err) => println!("ok   {name} (max rel err {err:.2e})"),
                    Err(e) => println!("FAIL {name}: {e}"),
                }
            }
            if !failures.all_passed() {
                return Err(PixproError::Eval("gradient check failed".into()));
            }
        }
        Command::InspectCheckpoint { path } => {
            let bytes = std::fs::read(&path)
                .map_err(|e| PixproError::io(path.display().to_string(), e))?;
            let (step, digest, rows) = checkpoint::describe(&bytes)?;
            println!("step = {step}");
            println!("config_digest = {digest}");
            for (kind, name, shape) in rows {
                println!("{kind:<10} {name:<28} {shape:?}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
