//! Command-line interface: train, eval, predict, bench, selftest.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or flag values),
//! 2 runtime failure (missing files, parse errors, config mismatch).

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::data::{leave_one_out_split, load_set_windows, ColumnMap, Window, SET_LABELS};
use crate::error::Error;
use crate::eval::{bench_scaling, evaluate, MetricMode};
use crate::model::{rollout, ModelConfig, ModelKind, ParamSet};
use crate::training::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "starnet", about = "Star-topology pedestrian trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root; expects one subdirectory of .txt files per set.
    #[arg(long)]
    data: PathBuf,
    /// Set held out of training and used for evaluation.
    #[arg(long)]
    held_out: String,
    #[arg(long, default_value_t = 8)]
    t_obs: usize,
    #[arg(long, default_value_t = 12)]
    t_pred: usize,
    /// Window start stride in steps.
    #[arg(long, default_value_t = 1)]
    window_stride: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train on all sets except the held-out one.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        /// Samples per window for the best-of-K loss.
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random scene rotation per training window.
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        rotate_augment: bool,
        /// Optional global-norm gradient clip.
        #[arg(long)]
        grad_clip: Option<f64>,
        #[arg(long, default_value = "starnet")]
        model: String,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Best-of-K ADE/FDE on the held-out set.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Trained checkpoint path.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value = "all_steps")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Metrics report (JSON) output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-pedestrian CSV output path.
        #[arg(long)]
        per_window: Option<PathBuf>,
    },
    /// Sampled trajectories for the held-out set, as CSV.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inference wall-time scaling across crowd sizes.
    Bench {
        /// Comma-separated crowd sizes, e.g. 8,16,32,64.
        #[arg(long, default_value = "8,16,32,64")]
        n: String,
        #[arg(long, default_value_t = 30)]
        repeat: usize,
        #[arg(long, default_value_t = 8)]
        t_obs: usize,
        #[arg(long, default_value_t = 12)]
        t_pred: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "starnet")]
        model: String,
        /// Optional checkpoint; otherwise freshly initialized weights.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Report (JSON) output path; omit to print to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient and invariant self-checks.
    Selftest,
}

#[derive(Debug)]
enum CmdError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        CmdError::Runtime(e)
    }
}

type CmdResult = std::result::Result<(), CmdError>;

fn usage(msg: impl Into<String>) -> CmdError {
    CmdError::Usage(msg.into())
}

fn check_label(label: &str) -> std::result::Result<(), CmdError> {
    if SET_LABELS.contains(&label) {
        Ok(())
    } else {
        Err(usage(format!(
            "--held-out must be one of {SET_LABELS:?}, got {label:?}"
        )))
    }
}

fn load_split(
    args: &DataArgs,
    which: Split,
) -> std::result::Result<Vec<Window>, CmdError> {
    check_label(&args.held_out)?;
    let plan = leave_one_out_split(&args.held_out)?;
    let labels: Vec<String> = match which {
        Split::Train => plan.train_sets,
        Split::Test => vec![plan.test_set],
    };
    let mut windows = Vec::new();
    for label in &labels {
        windows.extend(load_set_windows(
            &args.data,
            label,
            ColumnMap::default(),
            args.t_obs,
            args.t_pred,
            args.window_stride,
        )?);
    }
    if windows.is_empty() {
        return Err(CmdError::Runtime(Error::EmptySet {
            context: "no windows in the requested split",
        }));
    }
    Ok(windows)
}

enum Split {
    Train,
    Test,
}

fn parse_n_list(s: &str) -> std::result::Result<Vec<usize>, CmdError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("--n: bad crowd size {p:?}")))
        })
        .collect()
}

fn cmd_train(
    data: DataArgs,
    epochs: usize,
    k: usize,
    lr: f64,
    seed: u64,
    rotate_augment: bool,
    grad_clip: Option<f64>,
    model: String,
    out: PathBuf,
) -> CmdResult {
    let kind = ModelKind::parse(&model).map_err(|e| usage(e.to_string()))?;
    if k == 0 {
        return Err(usage("--k must be >= 1"));
    }
    if lr <= 0.0 {
        return Err(usage("--lr must be > 0"));
    }
    let windows = load_split(&data, Split::Train)?;
    let model_cfg = ModelConfig {
        kind,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs,
        k,
        lr,
        seed,
        rotate_augment,
        grad_clip,
    };
    println!(
        "train model={} held_out={} windows={} t_obs={} t_pred={} epochs={} k={} lr={} seed={} rotate_augment={}",
        kind.as_str(),
        data.held_out,
        windows.len(),
        data.t_obs,
        data.t_pred,
        epochs,
        k,
        lr,
        seed,
        rotate_augment
    );
    let (ck, _) = train(&windows, model_cfg, &cfg, data.t_obs, data.t_pred, |log| {
        println!(
            "epoch {} mean_loss {} wall_seconds {:.3}",
            log.epoch, log.mean_loss, log.wall_seconds
        );
    })?;
    save_checkpoint(&ck, &out)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_eval(
    data: DataArgs,
    ckpt: PathBuf,
    k: usize,
    mode: String,
    seed: u64,
    threads: usize,
    out: PathBuf,
    per_window: Option<PathBuf>,
) -> CmdResult {
    let mode = MetricMode::parse(&mode).map_err(|e| usage(e.to_string()))?;
    if k == 0 {
        return Err(usage("--k must be >= 1"));
    }
    check_label(&data.held_out)?;
    let ck = load_checkpoint(&ckpt)?;
    let windows = load_split(&data, Split::Test)?;
    let report = evaluate(&ck, &windows, k, mode, seed, &data.held_out, threads)?;
    fs::write(&out, report.to_json()).map_err(Error::from)?;
    if let Some(path) = per_window {
        fs::write(&path, report.per_window_csv()).map_err(Error::from)?;
    }
    println!(
        "eval dataset={} windows={} k={} mode={} seed={} ade={} fde={}",
        report.dataset,
        report.window_count,
        report.k,
        report.metric_mode.as_str(),
        report.seed,
        report.ade,
        report.fde
    );
    Ok(())
}

fn predict_csv(ck: &Checkpoint, windows: &[Window], k: usize, seed: u64) -> crate::Result<String> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut out = String::new();
    writeln!(
        out,
        "# starnet predict k={} seed={} t_obs={} t_pred={} model={}",
        k,
        seed,
        ck.t_obs,
        ck.t_pred,
        ck.params.config.kind.as_str()
    )
    .unwrap();
    out.push_str("window_id,ped_id,step,x,y,kind,sample_k\n");
    for w in windows {
        let window_seed: u64 = rng.gen();
        let centered = crate::data::center_window(w);
        let res = rollout(&ck.params, &centered, k, window_seed)?;
        let world = res.decentered();
        for i in 0..w.n_peds() {
            for t in 0..w.t_obs {
                let (x, y) = w.pos(i, t);
                writeln!(out, "{},{},{},{},{},obs,", w.source, w.ped_ids[i], t, x, y).unwrap();
            }
            for t in w.t_obs..w.horizon() {
                let (x, y) = w.pos(i, t);
                writeln!(out, "{},{},{},{},{},gt,", w.source, w.ped_ids[i], t, x, y).unwrap();
            }
            for (sample, p) in world.iter().enumerate() {
                for t in 0..w.t_pred {
                    writeln!(
                        out,
                        "{},{},{},{},{},pred,{}",
                        w.source,
                        w.ped_ids[i],
                        w.t_obs + t,
                        p.at3(i, t, 0),
                        p.at3(i, t, 1),
                        sample
                    )
                    .unwrap();
                }
            }
        }
    }
    Ok(out)
}

fn cmd_predict(data: DataArgs, ckpt: PathBuf, k: usize, seed: u64, out: PathBuf) -> CmdResult {
    if k == 0 {
        return Err(usage("--k must be >= 1"));
    }
    check_label(&data.held_out)?;
    let ck = load_checkpoint(&ckpt)?;
    let windows = load_split(&data, Split::Test)?;
    if let Some(w) = windows
        .iter()
        .find(|w| w.t_obs != ck.t_obs || w.t_pred != ck.t_pred)
    {
        return Err(CmdError::Runtime(Error::Config(format!(
            "window {} built with t_obs={}, t_pred={}, checkpoint expects {}/{}",
            w.source, w.t_obs, w.t_pred, ck.t_obs, ck.t_pred
        ))));
    }
    let csv = predict_csv(&ck, &windows, k, seed)?;
    fs::write(&out, csv).map_err(Error::from)?;
    println!(
        "predictions for {} windows written to {}",
        windows.len(),
        out.display()
    );
    Ok(())
}

fn cmd_bench(
    n: String,
    repeat: usize,
    t_obs: usize,
    t_pred: usize,
    seed: u64,
    model: String,
    ckpt: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CmdResult {
    let n_list = parse_n_list(&n)?;
    if n_list.len() < 2 || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage("--n needs at least two strictly increasing crowd sizes"));
    }
    if repeat == 0 {
        return Err(usage("--repeat must be >= 1"));
    }
    let params = match ckpt {
        Some(path) => load_checkpoint(&path)?.params,
        None => {
            use rand::SeedableRng;
            let kind = ModelKind::parse(&model).map_err(|e| usage(e.to_string()))?;
            let cfg = ModelConfig {
                kind,
                ..ModelConfig::default()
            };
            ParamSet::init(cfg, &mut rand_chacha::ChaCha20Rng::seed_from_u64(seed))
        }
    };
    let report = bench_scaling(&params, &n_list, repeat, t_obs, t_pred, seed)?;
    let json = report.to_json();
    match out {
        Some(path) => {
            fs::write(&path, &json).map_err(Error::from)?;
            println!("bench report written to {}", path.display());
        }
        None => print!("{json}"),
    }
    for e in &report.entries {
        println!(
            "n={} mean_seconds={} std_seconds={} op_count={}",
            e.n, e.mean_seconds, e.std_seconds, e.op_count
        );
    }
    println!("growth_ratio {}", report.growth_ratio);
    Ok(())
}

fn cmd_selftest() -> CmdResult {
    let mut failed = false;
    for (name, result) in crate::selftest::run_all() {
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(e) => {
                failed = true;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failed {
        Err(CmdError::Runtime(Error::Config(
            "one or more self-checks failed".to_string(),
        )))
    } else {
        Ok(())
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train {
            data,
            epochs,
            k,
            lr,
            seed,
            rotate_augment,
            grad_clip,
            model,
            out,
        } => cmd_train(data, epochs, k, lr, seed, rotate_augment, grad_clip, model, out),
        Command::Eval {
            data,
            ckpt,
            k,
            mode,
            seed,
            threads,
            out,
            per_window,
        } => cmd_eval(data, ckpt, k, mode, seed, threads, out, per_window),
        Command::Predict {
            data,
            ckpt,
            k,
            seed,
            out,
        } => cmd_predict(data, ckpt, k, seed, out),
        Command::Bench {
            n,
            repeat,
            t_obs,
            t_pred,
            seed,
            model,
            ckpt,
            out,
        } => cmd_bench(n, repeat, t_obs, t_pred, seed, model, ckpt, out),
        Command::Selftest => cmd_selftest(),
    }
}

/// Run the CLI against an explicit argument list (argv[0] included).
/// Returns the process exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CmdError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Entry point for the binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}
