use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use dmm_core::data::{apply_missingness, gen_linear_fig2, gen_nonlinear_fig3, gen_toy_binary, sample_dataset, ActionSystem, SequenceBatch};
use dmm_core::eval::{compare_exact, counterfactual_rollout, nll_report, CounterfactualSpec};
use dmm_core::gssm::{GenerativeModel, ModelConfig};
use dmm_core::infnet::{InfNetConfig, InferenceNetwork, Variant};
use dmm_core::nn::Nonlinearity;
use dmm_core::rng::{stream, Stream};
use dmm_core::trainer::{check_compatible, load_checkpoint, TrainConfig, Trainer};
use dmm_core::Error;

#[derive(Parser)]
#[command(name = "dmm", version, about = "Deep Markov models with structured inference networks")]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, env = "DMM_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum System {
    LinearFig2,
    NonlinearFig3,
    ToyBinary,
    Actions,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, value_enum)]
        system: System,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = -0.1, allow_hyphen_values = true)]
        beta: f64,
        /// Fraction of observation entries to drop.
        #[arg(long, default_value_t = 0.0)]
        rate: f64,
        /// Observed dimensions of the toy binary system.
        #[arg(long, default_value_t = 10)]
        obs_dim: usize,
        /// Shift of the indicator latent per unit of action 0.
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        effect: f64,
    },
    /// Train a model and inference network from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Held-out NLL report `a (b) {c}`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inference network vs the exact smoother (linear models only).
    CompareExact {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample sequences from a trained model.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Factual vs zero-action rollouts from inferred states.
    Counterfactual {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        horizon: usize,
        /// Observed dimension that is thresholded.
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        cut: f64,
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
        /// JSON report; a CSV series is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct NetSettings {
    variant: Variant,
    #[serde(default)]
    embed_dim: Option<usize>,
    #[serde(default)]
    rnn_dim: Option<usize>,
    #[serde(default)]
    embed_nonlinearity: Option<Nonlinearity>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct DataPaths {
    train: PathBuf,
    #[serde(default)]
    valid: Option<PathBuf>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    net: NetSettings,
    #[serde(default)]
    train: TrainConfig,
    data: DataPaths,
    output_dir: PathBuf,
    #[serde(default)]
    seed: Option<u64>,
    /// Write a checkpoint every this many updates.
    #[serde(default)]
    checkpoint_every: Option<u64>,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical { .. } => Failure::Numerical(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &Value) -> CliResult<()> {
    write_file(path, &(serde_json::to_string_pretty(v).expect("serializable") + "\n"))
}

fn load_data(path: &Path) -> CliResult<SequenceBatch> {
    if !path.exists() {
        return Err(usage(format!("dataset not found: {}", path.display())));
    }
    Ok(SequenceBatch::load(path)?)
}

fn summary(batch: &SequenceBatch) -> String {
    let lens: Vec<usize> = batch.sequences.iter().map(|s| s.len()).collect();
    let (lo, hi) = (lens.iter().min().unwrap_or(&0), lens.iter().max().unwrap_or(&0));
    let t = if lo == hi { lo.to_string() } else { format!("{lo}..{hi}") };
    format!(
        "N={} T={} obs_dim={} action_dim={} missing={:.4}",
        batch.len(),
        t,
        batch.obs_dim,
        batch.action_dim,
        batch.missing_rate()
    )
}

fn gen_data(cmd: &Command, seed: u64) -> CliResult<()> {
    let Command::GenData { system, n, t, out, alpha, beta, rate, obs_dim, effect } = cmd else {
        unreachable!()
    };
    let (n, t) = (*n, *t);
    if n == 0 || t == 0 {
        return Err(usage("--n and --t must be at least 1"));
    }
    let batch = match system {
        System::LinearFig2 => gen_linear_fig2(n, t, seed)?,
        System::NonlinearFig3 => gen_nonlinear_fig3(n, t, *alpha, *beta, seed)?,
        System::ToyBinary => gen_toy_binary(n, t, *obs_dim, seed)?.0,
        System::Actions => ActionSystem {
            effect: *effect,
            ..ActionSystem::default()
        }
        .generate(n, t, seed)?,
    };
    let batch = if *rate > 0.0 { apply_missingness(&batch, *rate, seed, None)? } else { batch };
    batch.save(out)?;
    println!("{}", summary(&batch));
    Ok(())
}

fn build_net(settings: &NetSettings, model: &ModelConfig, rng: &mut dmm_core::rng::Rng) -> CliResult<InferenceNetwork> {
    let mut c = InfNetConfig::new(settings.variant, model.obs_dim(), model.action_dim(), model.latent_dim());
    if let Some(v) = settings.embed_dim {
        c.embed_dim = v;
    }
    if let Some(v) = settings.rnn_dim {
        c.rnn_dim = v;
    }
    if let Some(v) = settings.embed_nonlinearity {
        c.embed_nonlinearity = v;
    }
    Ok(InferenceNetwork::new(c, rng)?)
}

fn train_cmd(config: &Path, resume: Option<&Path>, seed: Option<u64>) -> CliResult<()> {
    let text = fs::read_to_string(config).map_err(|e| usage(format!("{}: {e}", config.display())))?;
    let run: RunConfig = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", config.display())))?;
    let train_set = load_data(&run.data.train)?;
    let valid_set = run.data.valid.as_deref().map(load_data).transpose()?;
    let mut cfg = run.train.clone();
    if let Some(s) = seed.or(run.seed) {
        cfg.seed = s;
    }
    let mut trainer = match resume {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let doc: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            Trainer::resume(&doc, &train_set, valid_set.as_ref())?
        }
        None => {
            let mut init = stream(cfg.seed, Stream::Init);
            let model = GenerativeModel::new(run.model.clone(), &mut init)?;
            let net = build_net(&run.net, &run.model, &mut init)?;
            Trainer::new(model, net, &train_set, valid_set.as_ref(), cfg)?
        }
    };
    fs::create_dir_all(&run.output_dir).map_err(|e| usage(format!("{}: {e}", run.output_dir.display())))?;
    let ckpt = run.output_dir.join("checkpoint.json");
    while !trainer.finished() {
        if let Err(e) = trainer.step() {
            // Keep the last good state for inspection.
            trainer.save_checkpoint(&ckpt)?;
            write_file(&run.output_dir.join("train_log.csv"), &trainer.log.to_csv())?;
            return Err(e.into());
        }
        if run.checkpoint_every.is_some_and(|k| k > 0 && trainer.updates() % k == 0) {
            trainer.save_checkpoint(&ckpt)?;
        }
    }
    trainer.save_checkpoint(&ckpt)?;
    write_file(&run.output_dir.join("train_log.csv"), &trainer.log.to_csv())?;
    let last = trainer.log.updates.last().map(|r| r.objective);
    let out = json!({
        "variant": run.net.variant,
        "model": run.model.variant_name(),
        "updates": trainer.updates(),
        "epochs": trainer.epoch(),
        "final_objective": last,
        "best_valid_bound": trainer.best_bound(),
    });
    write_json(&run.output_dir.join("summary.json"), &out)?;
    println!(
        "trained {} with {} for {} updates ({} epochs); final objective {}; best validation bound {}",
        run.model.variant_name(),
        run.net.variant,
        trainer.updates(),
        trainer.epoch(),
        last.map_or("n/a".into(), |v| format!("{v:.4}")),
        trainer.best_bound().map_or("n/a".into(), |v| format!("{v:.4}")),
    );
    Ok(())
}

fn load_pair(checkpoint: &Path, data: &SequenceBatch) -> CliResult<(GenerativeModel, InferenceNetwork)> {
    if !checkpoint.exists() {
        return Err(usage(format!("checkpoint not found: {}", checkpoint.display())));
    }
    let (model, net) = load_checkpoint(checkpoint)?;
    check_compatible(&model, &net, data)?;
    Ok((model, net))
}

fn run(cli: Cli) -> CliResult<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| usage(e.to_string()))?;
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        cmd @ Command::GenData { .. } => gen_data(cmd, seed),
        Command::Train { config, resume } => train_cmd(config, resume.as_deref(), cli.seed),
        Command::Eval { checkpoint, data, samples, out } => {
            let data = load_data(data)?;
            let (model, net) = load_pair(checkpoint, &data)?;
            if *samples == 0 {
                return Err(usage("--samples must be at least 1"));
            }
            let report = nll_report(&model, &net, &data, *samples, seed)?;
            println!("{report}");
            if let Some(path) = out {
                write_json(path, &serde_json::to_value(&report).expect("serializable"))?;
            }
            Ok(())
        }
        Command::CompareExact { checkpoint, data, out } => {
            let data = load_data(data)?;
            let (model, net) = load_pair(checkpoint, &data)?;
            let cmp = compare_exact(&model, &net, &data, seed)?;
            println!("{cmp}");
            if let Some(path) = out {
                write_json(path, &serde_json::to_value(&cmp).expect("serializable"))?;
            }
            Ok(())
        }
        Command::Sample { checkpoint, n, t, out } => {
            if !checkpoint.exists() {
                return Err(usage(format!("checkpoint not found: {}", checkpoint.display())));
            }
            if *n == 0 || *t == 0 {
                return Err(usage("--n and --t must be at least 1"));
            }
            let (model, _) = load_checkpoint(checkpoint)?;
            let batch = sample_dataset(&model, *n, *t, seed)?;
            batch.save(out)?;
            println!("{}", summary(&batch));
            Ok(())
        }
        Command::Counterfactual { checkpoint, data, k, horizon, dim, cut, rollouts, out } => {
            let data = load_data(data)?;
            let (model, net) = load_pair(checkpoint, &data)?;
            let spec = CounterfactualSpec {
                k: *k,
                horizon: *horizon,
                n_rollouts: *rollouts,
                dim: *dim,
                cut: *cut,
            };
            let report = counterfactual_rollout(&model, &net, &data.sequences, &spec, seed)?;
            write_json(out, &serde_json::to_value(&report).expect("serializable"))?;
            let csv = out.with_extension("csv");
            write_file(&csv, &report.to_csv())?;
            print!("{}", report.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
