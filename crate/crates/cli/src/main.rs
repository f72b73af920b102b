use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tide_core::checkpoint::Checkpoint;
use tide_core::data::{is_synthetic, load_split, load_split_raw, parse_corruptions, Split};
use tide_core::diagnose::{diagnose, random_weights, trajectory_csv};
use tide_core::dynamics::EulerConfig;
use tide_core::trainer::{evaluate, evaluate_with_corruptions, Trainer};
use tide_core::{RunConfig, Tide, TideError};

#[derive(Parser)]
#[command(name = "tide", about = "Train, evaluate and diagnose excitatory-inhibitory recurrent classifiers")]
struct Cli {
    /// Print the effective default configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a config file or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Stop after this many total steps (defaults to the configured total).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate a checkpoint, optionally under corruptions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated `kind[:severity]` list.
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stability diagnostics for a checkpoint or a random weight set.
    Diagnose {
        #[arg(long, conflicts_with_all = ["dim"])]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a configuration (default, or the given file after validation).
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code(e: &TideError) -> u8 {
    match e {
        TideError::Config(_) | TideError::Dimension(_) => 2,
        TideError::Data(_) => 3,
        TideError::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn write_out(path: &Path, text: &str) -> tide_core::Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serialises")
}

fn train(config: Option<PathBuf>, resume: Option<PathBuf>, seed: Option<u64>, out: PathBuf, steps: Option<u64>) -> tide_core::Result<()> {
    fs::create_dir_all(&out)?;
    let (mut trainer, append) = match resume {
        Some(ck) => {
            let ck = Checkpoint::load(&ck)?;
            let cfg = ck.config()?;
            let train = load_split(&cfg.data, Split::Train, cfg.train.seed)?;
            let test = load_split(&cfg.data, Split::Test, cfg.train.seed).ok();
            (Trainer::from_checkpoint(&ck, train, test)?, true)
        }
        None => {
            let path = config.ok_or_else(|| TideError::Config("train needs --config or --resume".into()))?;
            let mut cfg = RunConfig::load(&path)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let train = load_split(&cfg.data, Split::Train, cfg.train.seed)?;
            let test = load_split(&cfg.data, Split::Test, cfg.train.seed).ok();
            (Trainer::new(Tide::new(&cfg)?, train, test)?, false)
        }
    };
    trainer.open_metrics(&out.join("metrics.jsonl"), append)?;
    let cfg = trainer.model.cfg.clone();
    let until = steps.unwrap_or(cfg.train.total_steps).min(cfg.train.total_steps);
    while trainer.step < until {
        let rec = trainer.train_step()?;
        let s = rec.step;
        if cfg.train.checkpoint_interval > 0 && s % cfg.train.checkpoint_interval == 0 {
            trainer.checkpoint().save(&out.join(format!("step-{s}.ckpt")))?;
        }
        if cfg.train.eval_interval > 0 && s % cfg.train.eval_interval == 0 {
            if let Some(test) = &trainer.test {
                let e = evaluate(&trainer.model, test, cfg.train.batch)?;
                eprintln!("step {s}: loss {:.4} test accuracy {:.4}", rec.loss_total, e.accuracy);
            }
        }
    }
    trainer.checkpoint().save(&out.join("final.ckpt"))?;
    Ok(())
}

fn eval(ckpt: PathBuf, data: Option<PathBuf>, corrupt: Option<String>, seed: Option<u64>, out: Option<PathBuf>) -> tide_core::Result<()> {
    let ck = Checkpoint::load(&ckpt)?;
    let (model, _) = ck.restore()?;
    let mut dcfg = model.cfg.data.clone();
    if let Some(d) = data {
        dcfg.dir = Some(d.to_string_lossy().into_owned());
    }
    let list = corrupt.unwrap_or_else(|| dcfg.corruptions.join(","));
    let corruptions = parse_corruptions(&list)?;
    let seed = seed.unwrap_or(model.cfg.train.seed);
    let raw = load_split_raw(&dcfg, Split::Test, model.cfg.train.seed)?;
    if raw.shape != model.cfg.model.input_shape {
        return Err(TideError::Checkpoint(format!("data shape {:?} does not match the checkpoint model {:?}", raw.shape, model.cfg.model.input_shape)));
    }
    let norm = if is_synthetic(&dcfg) { None } else { Some((dcfg.mean, dcfg.std)) };
    let report = evaluate_with_corruptions(&model, &raw, norm, &corruptions, model.cfg.train.batch, seed)?;
    let json = to_json(&report);
    println!("{json}");
    if let Some(dir) = out {
        write_out(&dir.join("eval.json"), &json)?;
        let mut csv = format!("# config_hash={}\ncorruption,severity,accuracy,mean_certainty\nclean,0,{},{}\n", report.config_hash, report.clean.accuracy, report.clean.mean_certainty);
        for c in &report.corruptions {
            csv.push_str(&format!("{},{},{},{}\n", c.corruption, c.severity, c.summary.accuracy, c.summary.mean_certainty));
        }
        write_out(&dir.join("eval.csv"), &csv)?;
        let mut curve = format!("# config_hash={}\nstep,mean_certainty\n", report.config_hash);
        for (t, c) in report.clean.certainty_curve.iter().enumerate() {
            curve.push_str(&format!("{},{c}\n", t + 1));
        }
        write_out(&dir.join("certainty_curve.csv"), &curve)?;
    }
    Ok(())
}

fn diagnose_cmd(ckpt: Option<PathBuf>, dim: Option<usize>, seed: u64, out: Option<PathBuf>) -> tide_core::Result<()> {
    let (w, euler, hash) = match (ckpt, dim) {
        (Some(p), _) => {
            let (model, _) = Checkpoint::load(&p)?.restore()?;
            (model.dale_weights(), model.euler(), model.cfg.hash())
        }
        (None, d) => {
            let d = d.unwrap_or(RunConfig::default().model.d_model);
            if d < 2 {
                return Err(TideError::Config("--dim must be at least 2".into()));
            }
            let mut cfg = RunConfig::default();
            cfg.model.d_model = d;
            cfg.train.seed = seed;
            (random_weights(d, seed), EulerConfig::default(), cfg.hash())
        }
    };
    let report = diagnose(&w, &euler, seed)?;
    let json = to_json(&serde_json::json!({ "config_hash": hash, "report": report }));
    println!("{json}");
    if let Some(dir) = out {
        write_out(&dir.join("diagnose.json"), &json)?;
        let dt = report.schur_dt_bound.map_or(0.01, |b| (0.5 * b).min(0.1));
        write_out(&dir.join("trajectory.csv"), &trajectory_csv(&w, dt, 500, &format!("config_hash={hash}"))?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> tide_core::Result<()> {
    match cli.cmd {
        None if cli.print_config => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
        None => Err(TideError::Config("no command given; see --help".into())),
        Some(Cmd::PrintConfig { config }) => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Some(Cmd::Train { config, resume, seed, out, steps }) => train(config, resume, seed, out, steps),
        Some(Cmd::Eval { ckpt, data, corrupt, seed, out }) => eval(ckpt, data, corrupt, seed, out),
        Some(Cmd::Diagnose { ckpt, dim, seed, out }) => diagnose_cmd(ckpt, dim, seed, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
