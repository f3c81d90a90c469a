//! Command surface for training, evaluating and inspecting capsule models.

pub mod config;
pub mod error;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use capsnet::checkpoint::Checkpoint;
use capsnet::data::{self, DatasetSplit, SplitRole};
use capsnet::network::{ArchitectureSpec, Model};
use capsnet::report;
use capsnet::train::{self, Trainer};
use clap::{Parser, Subcommand};

use crate::config::AppConfig;
use crate::error::{CliError, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "capsnet", version, about = "Matrix-capsule digit recognizer with EM routing")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dot-path override applied on top of the config file, e.g.
    /// `train.learning_rate=0.001`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Checkpoint to read. `report` accepts several (one reconstruction row each).
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Shortcut for `--override train.seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Dataset directory; overrides `data.dir` and `$CAPSNET_DATA_DIR`.
    #[arg(long, global = true, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints and history.jsonl to --out.
    Train {
        /// Continue from --checkpoint (or <out>/last.ckpt).
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval,
    /// Classify one grayscale image file (PGM or PNG).
    Predict {
        #[arg(value_name = "IMAGE")]
        image: PathBuf,
    },
    /// Accuracy under each configured corruption next to the clean baseline.
    NoiseEval,
    /// Confusion tables/heatmaps, reconstruction grid and capsule dump.
    Report,
    /// Print parameter layout, or a checkpoint's header and history.
    Inspect,
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { error::EXIT_INPUT } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(dir) = &cli.data_dir {
        overrides.push(format!("data.dir=\"{}\"", dir.display()));
    }
    let (mut cfg, explicit) = config::load(cli.config.as_deref(), &overrides)?;
    if let (Command::Train { .. }, Some(out)) = (&cli.command, &cli.out) {
        cfg.train.checkpoint_dir = Some(out.clone());
    }
    println!("# effective configuration");
    print!("{}", config::to_toml(&cfg));
    println!("# end configuration");

    match &cli.command {
        Command::Train { resume } => cmd_train(cli, cfg, *resume),
        Command::Eval => cmd_eval(cli, &cfg, explicit.model),
        Command::Predict { image } => cmd_predict(cli, &cfg, explicit.model, image),
        Command::NoiseEval => cmd_noise_eval(cli, &cfg, explicit.model),
        Command::Report => cmd_report(cli, &cfg, explicit.model),
        Command::Inspect => cmd_inspect(cli, &cfg),
    }
}

fn load_split(cfg: &AppConfig, images: &Path, labels: &Path, role: SplitRole) -> Result<DatasetSplit, CliError> {
    let (ip, lp) = (cfg.data.resolve(images), cfg.data.resolve(labels));
    let mut split = data::load_idx(&ip, &lp)?;
    split.role = role;
    log::info!("loaded {} {:?} samples from {}", split.len(), role, ip.display());
    Ok(split)
}

fn load_test(cfg: &AppConfig) -> Result<DatasetSplit, CliError> {
    load_split(cfg, &cfg.data.test_images, &cfg.data.test_labels, SplitRole::Test)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::config(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// Load the first `--checkpoint`, refusing one whose architecture differs
/// from an explicitly configured `[model]`.
fn load_checkpoint(path: &Path, cfg: &AppConfig, check_model: bool) -> Result<Checkpoint<f32>, CliError> {
    let ckpt = Checkpoint::<f32>::load(path).map_err(|e| match e {
        capsnet::Error::Io { .. } => CliError::checkpoint(e.to_string()),
        other => CliError::from_core(other),
    })?;
    if check_model && ckpt.model.spec() != &cfg.model {
        return Err(CliError::checkpoint(format!(
            "{} was trained with {:?}, configuration asks for {:?}",
            path.display(),
            ckpt.model.spec(),
            cfg.model
        )));
    }
    Ok(ckpt)
}

fn first_checkpoint(cli: &Cli) -> Result<&Path, CliError> {
    cli.checkpoint
        .first()
        .map(PathBuf::as_path)
        .ok_or_else(|| CliError::config("--checkpoint is required for this command"))
}

fn cmd_train(cli: &Cli, cfg: AppConfig, resume: bool) -> Result<(), CliError> {
    let dir = cfg.train.checkpoint_dir.clone().unwrap_or_else(|| PathBuf::from("run"));
    let mut cfg = cfg;
    cfg.train.checkpoint_dir = Some(dir.clone());

    let full = load_split(&cfg, &cfg.data.train_images, &cfg.data.train_labels, SplitRole::Train)?;
    let (train_split, val_split) = if cfg.data.n_val == 0 {
        (full, load_test(&cfg)?)
    } else {
        data::split_validation(&full, cfg.data.n_val, cfg.data.split_seed)?
    };
    log::info!("training on {} samples, validating on {}", train_split.len(), val_split.len());
    write_file(&dir.join("config.toml"), config::to_toml(&cfg))?;

    let mut trainer = if resume {
        let path = cli.checkpoint.first().cloned().unwrap_or_else(|| dir.join("last.ckpt"));
        let ckpt = load_checkpoint(&path, &cfg, true)?;
        let mut expected = cfg.train.clone();
        expected.epochs = ckpt.config.epochs;
        if ckpt.config != expected {
            return Err(CliError::checkpoint(format!(
                "{} was written with a different training configuration",
                path.display()
            )));
        }
        log::info!("resuming from {} after epoch {}", path.display(), ckpt.epoch);
        Trainer::resume(ckpt, Some(cfg.train.epochs), &train_split, &val_split)?
    } else {
        let model = Model::<f32>::build(cfg.model.clone(), cfg.train.seed)?;
        log::info!("model has {} parameters", model.parameter_count());
        Trainer::new(model, cfg.train.clone(), &train_split, &val_split)?
    };
    trainer.run()?;
    let state = trainer.state();
    if let Some(last) = state.history.last() {
        println!(
            "trained {} epochs: final loss {:.5}, validation accuracy {}",
            last.epoch,
            last.loss,
            last.val_accuracy.map_or("n/a".into(), |a| format!("{:.2}%", a * 100.0))
        );
    }
    println!("checkpoints in {}", dir.display());
    Ok(())
}

fn cmd_eval(cli: &Cli, cfg: &AppConfig, check_model: bool) -> Result<(), CliError> {
    let ckpt = load_checkpoint(first_checkpoint(cli)?, cfg, check_model)?;
    let test = load_test(cfg)?;
    let rep = train::evaluate(&ckpt.model, &test, cfg.train.eval_batch_size, &ckpt.config.routing)?;
    let dir = out_dir(cli, "report");
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&rep).map_err(|e| CliError::config(e.to_string()))?)?;
    write_file(&dir.join("report.txt"), rep.table())?;
    print!("{}", rep.table());
    println!("report written to {}", dir.display());
    Ok(())
}

fn cmd_predict(cli: &Cli, cfg: &AppConfig, check_model: bool, image: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(first_checkpoint(cli)?, cfg, check_model)?;
    let img = data::load_image(image)?;
    let (act, _) = ckpt.model.predict(&img, &ckpt.config.routing)?;
    let class = act.argmax_rows()[0];
    println!("class {class}");
    // shortest round-trip form, so values near 1 do not print as 1
    let values: Vec<String> = act.data().iter().map(|a| a.to_string()).collect();
    println!("activations {}", values.join(" "));
    Ok(())
}

fn cmd_noise_eval(cli: &Cli, cfg: &AppConfig, check_model: bool) -> Result<(), CliError> {
    let ckpt = load_checkpoint(first_checkpoint(cli)?, cfg, check_model)?;
    let test = load_test(cfg)?;
    let results = train::noise_eval(&ckpt.model, &test, &cfg.noise, cfg.train.eval_batch_size, &ckpt.config.routing)?;
    let table = train::noise_table(&results);
    let dir = out_dir(cli, "report");
    write_file(&dir.join("noise.json"), serde_json::to_string_pretty(&results).map_err(|e| CliError::config(e.to_string()))?)?;
    write_file(&dir.join("noise.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_report(cli: &Cli, cfg: &AppConfig, check_model: bool) -> Result<(), CliError> {
    let first = load_checkpoint(first_checkpoint(cli)?, cfg, check_model)?;
    let test = load_test(cfg)?;
    let routing = first.config.routing.clone();
    let rep = train::evaluate(&first.model, &test, cfg.train.eval_batch_size, &routing)?;
    let dir = out_dir(cli, "report");
    let bundle = report::write_bundle(&dir, &rep, &first.model, &test, &routing)?;
    let mut models = vec![first.model];
    for path in &cli.checkpoint[1..] {
        models.push(load_checkpoint(path, cfg, check_model)?.model);
    }
    let (w, h) = report::render_reconstructions(&models, &test, cfg.report.per_class, &routing, &bundle.reconstructions)?;
    println!("accuracy {}", rep.accuracy_percent());
    for p in [
        &bundle.report_json,
        &bundle.raw.table,
        &bundle.raw.heatmap,
        &bundle.normalized.table,
        &bundle.normalized.heatmap,
        &bundle.capsules,
    ] {
        println!("wrote {}", p.display());
    }
    println!("wrote {} ({w}x{h})", bundle.reconstructions.display());
    Ok(())
}

fn print_layout(spec: &ArchitectureSpec) {
    let shapes = spec.parameter_shapes();
    let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    for (name, shape) in &shapes {
        println!("{name:<20} {:<22} {:>10}", format!("{shape:?}"), shape.iter().product::<usize>());
    }
    println!("parameters {total}");
}

fn cmd_inspect(cli: &Cli, cfg: &AppConfig) -> Result<(), CliError> {
    let Some(path) = cli.checkpoint.first() else {
        print_layout(&cfg.model);
        return Ok(());
    };
    let ckpt = load_checkpoint(path, cfg, false)?;
    println!("checkpoint {}", path.display());
    println!("epoch {} seed {} optimizer step {}", ckpt.epoch, ckpt.seed, ckpt.optimizer.step);
    println!(
        "best validation accuracy {}",
        ckpt.best_val_accuracy.map_or("n/a".into(), |a| format!("{:.2}%", a * 100.0))
    );
    print_layout(ckpt.model.spec());
    for r in &ckpt.history {
        println!("{}", serde_json::to_string(r).map_err(|e| CliError::config(e.to_string()))?);
    }
    Ok(())
}
