use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use dbn::checkpoint::{Checkpoint, Provenance};
use dbn::combine::{average_weights, majority_vote, Ensemble};
use dbn::data::Dataset;
use dbn::dist::{replay, EventLog};
use dbn::experiment::{
    sweep_dropout, write_curve_csv, write_json, write_run_info, write_sweep_csv, write_table_csv, Experiment,
    ExperimentConfig, RunInfo, RunResult, RunSummary, Strategy,
};
use dbn::net::{error_rate, evaluate, ModelWeights};
use dbn::rbm::{pretrain_stack_with, PretrainConfig};
use dbn::{Error, Result};

/// Deep belief network training with dropout and replica combination.
#[derive(Parser)]
#[command(name = "dbn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every stochastic component.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate configuration, data files and shapes, then stop.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy layer-wise RBM pre-training of the hidden layers.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune with dropout, sequentially or with a combination strategy.
    Train {
        #[command(flatten)]
        common: Common,
        /// sequential, weight_average, majority_vote, sync_update, async_update, or all.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        /// Pre-trained RBM stack to start from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Test error of a classifier checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Combine classifier checkpoints by weight averaging or majority vote.
    Combine {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "average")]
        mode: CombineMode,
        #[arg(required = true)]
        models: Vec<PathBuf>,
    },
    /// Test error as a function of the hidden dropout probability.
    SweepDropout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Re-execute a logged distributed run and verify it.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
        /// Pre-trained RBM stack the logged run started from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CombineMode {
    Average,
    Vote,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut ExperimentConfig, strategy: Option<&str>, workers: Option<usize>) -> Result<Option<Strategy>> {
    if let Some(n) = workers {
        cfg.harness.n_workers = n;
    }
    let single = match strategy {
        None => Some(cfg.strategy),
        Some("all") => None,
        Some(s) => Some(s.parse()?),
    };
    if let Some(s) = single {
        cfg.strategy = s;
    }
    cfg.validate()?;
    Ok(single)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn dry_run(cfg: &ExperimentConfig, what: &str) -> Result<()> {
    cfg.check_data_files()?;
    let model = ModelWeights::init(&cfg.layer_sizes, &mut dbn::math::Rng::new(0))?;
    println!("dry run: {what}");
    println!("layer sizes {:?} ({} parameters)", model.layer_sizes(), model.parameter_count());
    println!("data {}", cfg.resolved_data_dir().display());
    println!("{}", cfg.to_json());
    Ok(())
}

fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance {
        seed: cfg.fine_tune.seed,
        epochs: cfg.fine_tune.epochs as u64,
        hidden_dropout_p: cfg.fine_tune.hidden_dropout_p,
        input_dropout_p: cfg.fine_tune.input_dropout_p,
    }
}

fn cmd_pretrain(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if cfg.pretrain.is_none() {
        cfg.pretrain = Some(PretrainConfig::default());
        if let Some(seed) = common.seed {
            cfg.set_seed(seed);
        }
    }
    cfg.validate()?;
    if common.dry_run {
        return dry_run(&cfg, "pretrain");
    }
    let pcfg = cfg.pretrain.clone().expect("set above");
    let (train, _) = cfg.load_data()?;
    let hidden = &cfg.layer_sizes[1..cfg.layer_sizes.len() - 1];
    let stack = pretrain_stack_with(hidden, &train, &pcfg, |p| {
        println!("layer {} epoch {} reconstruction_error {}", p.layer, p.epoch, p.reconstruction_error);
    })?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("pretrain.ckpt");
    Checkpoint::rbm_stack(
        stack,
        Provenance {
            seed: pcfg.seed,
            epochs: pcfg.epochs as u64,
            ..Default::default()
        },
    )
    .save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn summary(cfg: &ExperimentConfig, r: &RunResult) -> RunSummary {
    RunSummary {
        strategy: r.strategy.name().to_string(),
        seed: r.seed,
        layer_sizes: cfg.layer_sizes.clone(),
        epochs: cfg.fine_tune.epochs,
        hidden_dropout_p: cfg.fine_tune.hidden_dropout_p,
        input_dropout_p: cfg.fine_tune.input_dropout_p,
        n_workers: match r.strategy {
            Strategy::SyncUpdate | Strategy::AsyncUpdate => cfg.harness.n_workers,
            _ => 1,
        },
        ensemble_size: match r.strategy {
            Strategy::WeightAverage | Strategy::MajorityVote => cfg.ensemble_size,
            _ => 1,
        },
        test_error: r.test_error,
        final_train_loss: r.curve.last().map(|c| c.train_loss),
        model_checksum: r.model.as_ref().map(|m| format!("{:016x}", m.checksum())),
    }
}

fn write_run(cfg: &ExperimentConfig, dir: &Path, r: &RunResult) -> Result<()> {
    create_dir(dir)?;
    if let Some(m) = &r.model {
        Checkpoint::classifier(m.clone(), provenance(cfg)).save(&dir.join("model.ckpt"))?;
    }
    if matches!(r.strategy, Strategy::WeightAverage | Strategy::MajorityVote) {
        for (j, m) in r.members.iter().enumerate() {
            Checkpoint::classifier(m.clone(), provenance(cfg)).save(&dir.join(format!("member-{j}.ckpt")))?;
        }
    }
    if let Some(log) = &r.log {
        log.save(&dir.join("events.jsonl"))?;
    }
    write_curve_csv(&dir.join("curve.csv"), &r.curve)?;
    write_json(&dir.join("summary.json"), &summary(cfg, r))
}

fn load_stack(path: &Path) -> Result<Vec<dbn::rbm::Rbm>> {
    Ok(Checkpoint::load(path)?.into_rbm_stack()?.0)
}

fn cmd_train(common: &Common, strategy: Option<&str>, workers: Option<usize>, init: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(common)?;
    let single = apply_overrides(&mut cfg, strategy, workers)?;
    if common.dry_run {
        return dry_run(&cfg, "train");
    }
    let (train, test) = cfg.load_data()?;
    let stack = init.map(load_stack).transpose()?;
    let report = |p: &dbn::rbm::PretrainProgress| {
        println!("pretrain layer {} epoch {} reconstruction_error {}", p.layer, p.epoch, p.reconstruction_error);
    };
    let experiment = || -> Result<Experiment> {
        let e = Experiment::new(&cfg, &train, &test)?.on_pretrain(&report);
        match &stack {
            Some(s) => e.with_pretrained(s.clone()),
            None => Ok(e),
        }
    };
    match single {
        Some(s) => {
            let r = experiment()?.run(s)?;
            write_run(&cfg, &cfg.out_dir, &r)?;
            println!("{} test_error {}", s, r.test_error);
        }
        None => {
            let mut table = Vec::new();
            for s in Strategy::ALL {
                let r = experiment()?.run(s)?;
                write_run(&cfg, &cfg.out_dir.join(s.name()), &r)?;
                println!("{} test_error {}", s, r.test_error);
                table.push((s.name().to_string(), r.test_error));
            }
            write_table_csv(&cfg.out_dir.join("table.csv"), &table)?;
        }
    }
    Ok(())
}

fn load_classifiers(paths: &[PathBuf]) -> Result<Vec<(ModelWeights, Provenance)>> {
    paths
        .iter()
        .map(|p| {
            Checkpoint::load(p)?.into_classifier().map_err(|e| match e {
                Error::Format(msg) => Error::Format(format!("{}: {msg}", p.display())),
                e => e,
            })
        })
        .collect()
}

fn test_set(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(cfg.load_data()?.1)
}

fn cmd_eval(common: &Common, model: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let (m, prov) = load_classifiers(&[model.to_path_buf()])?.remove(0);
    if common.dry_run {
        return dry_run(&cfg, "eval");
    }
    let test = test_set(&cfg)?;
    let err = evaluate(&m, &test, prov.hidden_dropout_p, prov.input_dropout_p)?;
    println!("test_error {err}");
    Ok(())
}

fn cmd_combine(common: &Common, mode: CombineMode, paths: &[PathBuf]) -> Result<()> {
    let cfg = load_config(common)?;
    let loaded = load_classifiers(paths)?;
    let first = loaded[0].0.layer_sizes();
    for ((m, _), p) in loaded.iter().zip(paths) {
        if m.layer_sizes() != first {
            return Err(Error::shape(
                "combine",
                format!(
                    "{} has layer sizes {:?}, {} has {:?}",
                    p.display(),
                    m.layer_sizes(),
                    paths[0].display(),
                    first
                ),
            ));
        }
    }
    let prov = loaded[0].1.clone();
    let ensemble = Ensemble::new(loaded.into_iter().map(|(m, _)| m).collect())?;
    if common.dry_run {
        return dry_run(&cfg, "combine");
    }
    let test = test_set(&cfg)?;
    create_dir(&cfg.out_dir)?;
    let (hp, ip) = (prov.hidden_dropout_p, prov.input_dropout_p);
    match mode {
        CombineMode::Average => {
            let avg = average_weights(&ensemble);
            let err = evaluate(&avg, &test, hp, ip)?;
            let path = cfg.out_dir.join("combined.ckpt");
            Checkpoint::classifier(avg, prov).save(&path)?;
            println!("test_error {err}");
            println!("wrote {}", path.display());
        }
        CombineMode::Vote => {
            let votes = majority_vote(&ensemble, test.images(), hp, ip)?;
            let err = error_rate(&votes, test.labels());
            let path = cfg.out_dir.join("predictions.csv");
            let mut text = String::from("index,label\n");
            for (i, v) in votes.iter().enumerate() {
                text.push_str(&format!("{i},{v}\n"));
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            println!("test_error {err}");
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_sweep(common: &Common, strategy: Option<&str>, workers: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if strategy == Some("all") {
        return Err(Error::Config("sweep-dropout runs a single strategy".into()));
    }
    apply_overrides(&mut cfg, strategy, workers)?;
    if common.dry_run {
        return dry_run(&cfg, "sweep-dropout");
    }
    let (train, test) = cfg.load_data()?;
    let rows = sweep_dropout(&cfg, &train, &test, |p, r, res| {
        println!("p {p} repeat {r} test_error {}", res.test_error);
    })?;
    create_dir(&cfg.out_dir)?;
    write_sweep_csv(&cfg.out_dir.join("sweep.csv"), &rows)?;
    let json: Vec<_> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "p": r.p, "mean_error": r.mean_error, "std_error": r.std_error,
                "n_repeats": r.n_repeats, "errors": r.errors,
            })
        })
        .collect();
    write_json(&cfg.out_dir.join("sweep.json"), &json)?;
    for r in &rows {
        println!("p {} mean_error {} std_error {}", r.p, r.mean_error, r.std_error);
    }
    Ok(())
}

fn cmd_replay(common: &Common, log_path: &Path, init: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let log = EventLog::load(log_path)?;
    if log.header.n_workers != cfg.harness.n_workers {
        return Err(Error::Validation(format!(
            "{} has {} workers, the configuration {}",
            log_path.display(),
            log.header.n_workers,
            cfg.harness.n_workers
        )));
    }
    if common.dry_run {
        return dry_run(&cfg, "replay");
    }
    let (train, _) = cfg.load_data()?;
    let stack = init.map(load_stack).transpose()?;
    let test = Dataset::new(dbn::math::Matrix::zeros(0, cfg.layer_sizes[0]), Vec::new())?;
    let mut e = Experiment::new(&cfg, &train, &test)?;
    if let Some(s) = stack {
        e = e.with_pretrained(s)?;
    }
    let initial = e.initial_model(0)?;
    let out = replay(&log, &cfg.harness, &cfg.fine_tune, &train, &initial)?;
    println!(
        "replay ok: {} events, model checksum {:016x}",
        log.events.len(),
        out.model.checksum()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(String, Option<PathBuf>)> {
    match &cli.command {
        Command::Pretrain { common } => cmd_pretrain(common).map(|_| ("pretrain".into(), out_if_run(common))),
        Command::Train { common, strategy, workers, init } => {
            cmd_train(common, strategy.as_deref(), *workers, init.as_deref()).map(|_| ("train".into(), out_if_run(common)))
        }
        Command::Eval { common, model } => cmd_eval(common, model).map(|_| ("eval".into(), None)),
        Command::Combine { common, mode, models } => {
            cmd_combine(common, *mode, models).map(|_| ("combine".into(), out_if_run(common)))
        }
        Command::SweepDropout { common, strategy, workers } => {
            cmd_sweep(common, strategy.as_deref(), *workers).map(|_| ("sweep-dropout".into(), out_if_run(common)))
        }
        Command::Replay { common, log, init } => cmd_replay(common, log, init.as_deref()).map(|_| ("replay".into(), None)),
    }
}

/// Output directory of a command that wrote files.
fn out_if_run(common: &Common) -> Option<PathBuf> {
    if common.dry_run {
        return None;
    }
    load_config(common).ok().map(|c| c.out_dir)
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let started = unix_now();
    let clock = Instant::now();
    match run(&cli) {
        Ok((command, out)) => {
            if let Some(dir) = out {
                let info = RunInfo {
                    command,
                    args: std::env::args().collect(),
                    version: env!("CARGO_PKG_VERSION").to_string(),
                    started_unix_s: started,
                    finished_unix_s: unix_now(),
                    wall_seconds: clock.elapsed().as_secs_f64(),
                };
                if let Err(e) = write_run_info(&dir, &info) {
                    eprintln!("error: {e}");
                    return ExitCode::from(e.exit_code() as u8);
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
