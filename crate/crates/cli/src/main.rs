//! `vtg`: synthetic data, compression, training, evaluation and the
//! prediction-bias diagnostic from one binary.
//!
//! Every run writes `effective-config.json` and `manifest.json` into its
//! output directory. Failures print one line `error[<category>]: <message>`
//! and exit with 2 for usage or configuration problems and 1 otherwise.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use vtg_core::compress::{compress, s_token_container};
use vtg_core::data::{load_dataset, save_dataset, synth_dataset, FeatureSource};
use vtg_core::eval::{
    bias_diagnostic, evaluate, grounding_queries, write_report, EvalOptions, EvalTask, ModelGrounder, Perturbation,
};
use vtg_core::features::{load_features, save_features};
use vtg_core::model::Model;
use vtg_core::train::{latest_model_dir, Trainer};

use config::Config;
use manifest::{bytes_hash, content_hash, Manifest};

#[derive(Debug)]
pub struct Failure {
    category: String,
    message: String,
    code: u8,
}

impl Failure {
    pub fn usage(message: String) -> Self {
        Failure {
            category: "usage".into(),
            message,
            code: 2,
        }
    }

    pub fn config(message: String) -> Self {
        Failure {
            category: "config".into(),
            message,
            code: 2,
        }
    }
}

impl From<vtg_core::Error> for Failure {
    fn from(e: vtg_core::Error) -> Self {
        Failure {
            category: e.category().into(),
            message: e.to_string(),
            code: 1,
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        category: "io".into(),
        message: format!("{}: {e}", path.display()),
        code: 1,
    }
}

#[derive(Parser, Debug)]
#[command(name = "vtg", version, about = "Temporal grounding with position-routed experts")]
struct Cli {
    /// JSON config file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key.path=value` override applied after the config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for data generation, initialisation and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective config and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Compress the patch tokens of one feature container into S-tokens.
    Compress(CompressArgs),
    /// Train a model and write per-epoch checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a report.
    Eval(EvalArgs),
    /// Run the prediction-bias diagnostic (clean, shuffled and blank video).
    Diagnose(DiagnoseArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Compress(_) => "compress",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Diagnose(_) => "diagnose",
        }
    }

    fn out(&self) -> &Path {
        match self {
            Command::Synth(a) => &a.out,
            Command::Compress(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Diagnose(a) => &a.out,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Write feature containers under `features/` instead of inline specs.
    #[arg(long)]
    materialize: bool,
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the newest checkpoint under `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "tg")]
    task: EvalTask,
    #[arg(long, default_value = "none")]
    perturb: Perturbation,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

struct Run {
    cfg: Config,
    inputs: BTreeMap<String, String>,
}

impl Run {
    fn input(&mut self, key: &str, path: &Path) -> Result<(), Failure> {
        let h = content_hash(path, &[]).map_err(|e| io_failure(path, e))?;
        self.inputs.insert(key.to_string(), h);
        Ok(())
    }

    fn dataset(&mut self, arg: &Option<PathBuf>) -> Result<(Vec<vtg_core::data::TrainExample>, PathBuf), Failure> {
        let path = arg
            .clone()
            .or_else(|| self.cfg.dataset.clone())
            .ok_or_else(|| Failure::usage("no dataset given (use --dataset or the dataset config key)".into()))?;
        let loaded = load_dataset(&path)?;
        self.input("dataset", &vtg_core::data::dataset_file(&path))?;
        Ok(loaded)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.message.replace('\n', " ");
            eprintln!("error[{}]: {}", f.category, msg.trim());
            ExitCode::from(f.code)
        }
    }
}

fn real_main() -> Result<(), Failure> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(Failure::usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("run.seed={s}"));
    }
    let cfg = config::resolve(cli.config.as_deref(), &overrides)?;
    let pretty = serde_json::to_string_pretty(&cfg).map_err(|e| Failure::config(e.to_string()))? + "\n";
    if cli.dump_config {
        print!("{pretty}");
        return Ok(());
    }
    let Some(cmd) = cli.command else {
        return Err(Failure::usage("no subcommand given (try --help)".into()));
    };
    let out = cmd.out().to_path_buf();
    std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    let cfg_path = out.join("effective-config.json");
    std::fs::write(&cfg_path, &pretty).map_err(|e| io_failure(&cfg_path, e))?;

    let mut run = Run {
        cfg,
        inputs: BTreeMap::new(),
    };
    if let Some(p) = &cli.config {
        run.input("config_file", p)?;
    }
    match &cmd {
        Command::Synth(a) => synth(&mut run, a)?,
        Command::Compress(a) => compress_cmd(&mut run, a)?,
        Command::Train(a) => train(&mut run, a)?,
        Command::Eval(a) => eval(&mut run, a)?,
        Command::Diagnose(a) => diagnose(&mut run, a)?,
    }

    let mut outputs = BTreeMap::new();
    outputs.insert(
        "out".to_string(),
        content_hash(&out, &["manifest.json", "effective-config.json"]).map_err(|e| io_failure(&out, e))?,
    );
    let m = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        command: cmd.name().to_string(),
        seed: run.cfg.run.seed,
        config: bytes_hash(pretty.as_bytes()),
        inputs: run.inputs,
        outputs,
    };
    let path = out.join("manifest.json");
    let s = serde_json::to_string_pretty(&m).map_err(|e| Failure::config(e.to_string()))? + "\n";
    std::fs::write(&path, s).map_err(|e| io_failure(&path, e))?;
    Ok(())
}

fn synth(run: &mut Run, a: &SynthArgs) -> Result<(), Failure> {
    let cfg = &run.cfg;
    let mut examples = synth_dataset(a.size, &cfg.run.synth, cfg.run.seed, cfg.exec)?;
    if a.materialize {
        let dir = a.out.join("features");
        std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        for ex in &mut examples {
            let f = ex.load_features(&a.out)?;
            let rel = PathBuf::from("features").join(format!("{}.feat", ex.id));
            save_features(&f, &a.out.join(&rel))?;
            ex.features = FeatureSource::File { path: rel };
        }
    }
    let path = save_dataset(&a.out, &examples)?;
    info!("wrote {} examples to {}", examples.len(), path.display());
    Ok(())
}

fn compress_cmd(run: &mut Run, a: &CompressArgs) -> Result<(), Failure> {
    run.input("features", &a.features)?;
    let f = load_features(&a.features)?;
    let params = &run.cfg.run.model.compress;
    params.validate(f.p())?;
    let (s, trace) = compress(&f, params, run.cfg.exec)?;
    save_features(&s_token_container(&s)?, &a.out.join("s_tokens.feat"))?;
    let summary = serde_json::json!({
        "n": f.n(),
        "m": s.nrows(),
        "llm_tokens": f.n() + s.nrows(),
        "trace": trace,
    });
    let path = a.out.join("compress.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Failure::config(e.to_string()))? + "\n";
    std::fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
    println!("{} frames -> {} T-tokens + {} S-tokens", f.n(), f.n(), s.nrows());
    Ok(())
}

fn train(run: &mut Run, a: &TrainArgs) -> Result<(), Failure> {
    let (examples, base) = run.dataset(&a.dataset)?;
    let exec = run.cfg.exec;
    let mut trainer = match latest_model_dir(&a.out) {
        Ok(model_dir) if a.resume => {
            let ckpt = model_dir.parent().unwrap_or(&a.out).to_path_buf();
            info!("resuming from {}", ckpt.display());
            Trainer::resume(&ckpt, examples, &base, exec)?
        }
        _ => Trainer::new(run.cfg.run.clone(), examples, &base, exec)?,
    };
    let records = trainer.fit(Some(&a.out), |r| {
        info!("step {} loss {:.4} (text {:.4} ce {:.4} l1 {:.4} giou {:.4})", r.step, r.total, r.text, r.ce, r.l1, r.giou)
    })?;
    if let Some(last) = records.last() {
        println!("trained {} steps, final loss {:.4}", trainer.step, last.total);
    }
    Ok(())
}

fn load_checkpoint(run: &mut Run, dir: &Path) -> Result<Model, Failure> {
    let model_dir = latest_model_dir(dir)?;
    run.input("checkpoint", &model_dir)?;
    Ok(Model::load(&model_dir)?)
}

fn eval(run: &mut Run, a: &EvalArgs) -> Result<(), Failure> {
    let model = load_checkpoint(run, &a.checkpoint)?;
    let (examples, base) = run.dataset(&a.dataset)?;
    let mut opts = EvalOptions {
        task: a.task,
        perturbation: a.perturb,
        seed: run.cfg.run.seed,
        exec: run.cfg.exec,
        ..EvalOptions::default()
    };
    if let Some(b) = run.cfg.eval_batch {
        opts.batch = b;
    }
    let report = evaluate(&model, &examples, &base, &opts)?;
    write_report(&report, &a.out)?;
    for (k, v) in &report.metrics {
        println!("{k} {v:.4}");
    }
    Ok(())
}

fn diagnose(run: &mut Run, a: &DiagnoseArgs) -> Result<(), Failure> {
    let model = load_checkpoint(run, &a.checkpoint)?;
    let (examples, base) = run.dataset(&a.dataset)?;
    let exec = run.cfg.exec;
    let queries = grounding_queries(&examples, &base, exec)?;
    let grounder = ModelGrounder {
        model: &model,
        batch: run.cfg.eval_batch.unwrap_or(16),
        exec,
    };
    let report = bias_diagnostic(&grounder, &queries, run.cfg.run.seed, exec)?;
    let path = a.out.join("bias.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::config(e.to_string()))? + "\n";
    std::fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
    for s in &report.stats {
        let path = a.out.join(format!("histogram_{}.csv", s.perturbation.name()));
        let mut csv = String::from("start_bin,end_bin,mass\n");
        for (i, row) in s.histogram.iter().enumerate() {
            for (j, m) in row.iter().enumerate() {
                csv.push_str(&format!("{i},{j},{m}\n"));
            }
        }
        std::fs::write(&path, csv).map_err(|e| io_failure(&path, e))?;
        println!(
            "{} mode_share {:.4} sensitivity {:.4} missing {}",
            s.perturbation.name(),
            s.mode_share,
            s.sensitivity,
            s.missing
        );
    }
    Ok(())
}
