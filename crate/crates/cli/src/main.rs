//! `arvideo` command suite.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numeric failure. Events are logged to stderr as one `key=value` line each.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arvideo::config::{Precision, RunConfig};
use arvideo::costmodel::{attention_cost, cost_report_csv, CostConfig};
use arvideo::layout::ClusterGrid;
use arvideo::model::{attention_rank_report, encode, rank_report_csv, ArVideoModel, AttentionRecord, DEFAULT_RANK_FACTOR};
use arvideo::tokenizer::{cubify, normalize_targets, CubeTargets};
use arvideo::trainer::{
    check_pretrain_gradients, is_held_out, load_checkpoint, metrics_csv, probe, read_checkpoint_config, sample_layout,
    save_checkpoint, Dataset, PreparedVideo, ProbeMode, Trainer,
};
use arvideo::video::{generate_corpus, generate_moving_shape, write_dataset};
use arvideo::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use tensorad::Real;

#[derive(Parser, Debug)]
#[command(name = "arvideo", version, about = "Autoregressive video pretraining on synthetic motion data")]
struct Cli {
    /// Worker threads for batch-parallel work; 1 runs everything on the calling thread.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines); the desk config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set mask_ratio=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic moving-shape corpus (ARVV1 files plus labels.csv).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Frame height and width in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Side of the moving square in pixels.
        #[arg(long)]
        shape_size: Option<usize>,
        #[arg(long)]
        speed: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain, writing a checkpoint and a metrics CSV.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory; the corpus is generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV (`step,loss,lr,seconds`); appended to when resuming.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from this checkpoint; its config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop before this step instead of running all configured steps.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Train a classifier on a checkpoint's encoder and report held-out accuracy.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Linear)]
        mode: Mode,
        /// Probe a freshly initialized encoder of the same configuration instead.
        #[arg(long)]
        random_init: bool,
        /// Report CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the layout of one training sample: masks, order and cube statistics.
    LayoutDump {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MaskFormat::Csv)]
        format: MaskFormat,
    },
    /// Numerical rank of encoder attention maps per layer.
    RankReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of training samples to average over.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Relative threshold factor: σ counts when above max(m,n)·eps·factor·σ_max.
        #[arg(long, default_value_t = DEFAULT_RANK_FACTOR)]
        factor: f64,
    },
    /// Sequence lengths, attention FLOPs and attention-map sizes, side by side.
    CostReport {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the pretraining loss gradient (64-bit).
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 20)]
        params: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Linear,
    Full,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MaskFormat {
    Csv,
    Pgm,
}

fn log(event: &str, fields: &[(&str, String)]) {
    let mut line = format!("event={event}");
    for (k, v) in fields {
        if v.contains(' ') {
            line.push_str(&format!(" {k}=\"{v}\""));
        } else {
            line.push_str(&format!(" {k}={v}"));
        }
    }
    eprintln!("{line}");
}

fn log_config(cfg: &RunConfig, seed: u64, source: &str) {
    let fields: Vec<(String, String)> = cfg
        .render()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let refs: Vec<(&str, String)> = fields.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    log("config", &refs);
    log("seed", &[("seed", seed.to_string()), ("source", source.into())]);
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv.clone(), "expected KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Flag beats config file; the config already defaults to 0.
fn resolve_seed(flag: Option<u64>, args: &ConfigArgs, config_value: u64) -> (u64, &'static str) {
    match flag {
        Some(s) => (s, "flag"),
        None if args.config.is_some() || !args.overrides.is_empty() => (config_value, "config"),
        None => (config_value, "default"),
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    log("wrote", &[("path", path.display().to_string())]);
    Ok(())
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset, Error> {
    let data = match dir {
        Some(d) => Dataset::load(cfg, d)?,
        None => Dataset::generate(cfg)?,
    };
    log(
        "dataset",
        &[
            ("videos", data.videos.len().to_string()),
            ("train", data.train.len().to_string()),
            ("test", data.test.len().to_string()),
        ],
    );
    Ok(data)
}

fn gen_data(
    out: &Path,
    count: Option<usize>,
    frames: Option<usize>,
    size: Option<usize>,
    shape_size: Option<usize>,
    speed: Option<usize>,
    seed: Option<u64>,
    args: &ConfigArgs,
) -> Result<(), Error> {
    let mut cfg = load_config(args)?;
    if let Some(v) = frames {
        cfg.frames = v;
    }
    if let Some(v) = size {
        cfg.height = v;
        cfg.width = v;
    }
    if let Some(v) = shape_size {
        cfg.shape_size = v;
    }
    if let Some(v) = speed {
        cfg.speed = v;
    }
    if let Some(v) = count {
        cfg.num_videos = v;
    }
    let (s, source) = resolve_seed(seed, args, cfg.data_seed);
    cfg.data_seed = s;
    log_config(&cfg, s, source);
    let spec = cfg.task_spec();
    spec.validate()?;
    let videos = generate_corpus(&spec, cfg.num_videos)?;
    write_dataset(out, &videos)?;
    log("wrote", &[("path", out.display().to_string()), ("videos", videos.len().to_string())]);
    Ok(())
}

fn run_pretrain<F: Real>(
    mut trainer: Trainer<F>,
    data: &Dataset,
    out: &Path,
    metrics: Option<&Path>,
    resumed: bool,
    stop_at: Option<usize>,
) -> Result<(), Error> {
    let stop = stop_at.unwrap_or(trainer.config.steps).min(trainer.config.steps);
    let rows = trainer.run_until(data, stop, |r| {
        log(
            "step",
            &[
                ("step", r.step.to_string()),
                ("loss", r.loss.to_string()),
                ("lr", r.lr.to_string()),
            ],
        )
    })?;
    save_checkpoint(out, &trainer.checkpoint())?;
    log("wrote", &[("path", out.display().to_string()), ("step", trainer.step.to_string())]);
    if let Some(m) = metrics {
        if resumed && m.exists() {
            let mut text = fs::read_to_string(m)?;
            for r in &rows {
                text.push_str(&r.csv_line());
                text.push('\n');
            }
            write_out(m, text.as_bytes())?;
        } else {
            write_out(m, metrics_csv(&rows).as_bytes())?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn pretrain(
    args: &ConfigArgs,
    seed: Option<u64>,
    data_dir: Option<&Path>,
    out: &Path,
    metrics: Option<&Path>,
    resume: Option<&Path>,
    stop_at: Option<usize>,
) -> Result<(), Error> {
    if let Some(ckpt) = resume {
        let cfg = read_checkpoint_config(ckpt)?;
        if seed.is_some_and(|s| s != cfg.seed) {
            return Err(Error::config("seed", "a resumed run keeps its checkpoint's seed"));
        }
        log_config(&cfg, cfg.seed, "checkpoint");
        let data = dataset(&cfg, data_dir)?;
        return match cfg.precision {
            Precision::F32 => run_pretrain(Trainer::<f32>::from_checkpoint(load_checkpoint(ckpt)?)?, &data, out, metrics, true, stop_at),
            Precision::F64 => run_pretrain(Trainer::<f64>::from_checkpoint(load_checkpoint(ckpt)?)?, &data, out, metrics, true, stop_at),
        };
    }
    let mut cfg = load_config(args)?;
    let (s, source) = resolve_seed(seed, args, cfg.seed);
    cfg.seed = s;
    log_config(&cfg, s, source);
    let data = dataset(&cfg, data_dir)?;
    match cfg.precision {
        Precision::F32 => run_pretrain(Trainer::<f32>::new(cfg)?, &data, out, metrics, false, stop_at),
        Precision::F64 => run_pretrain(Trainer::<f64>::new(cfg)?, &data, out, metrics, false, stop_at),
    }
}

fn probe_with<F: Real>(ckpt_path: &Path, data_dir: Option<&Path>, mode: ProbeMode, random_init: bool) -> Result<String, Error> {
    let ckpt = load_checkpoint::<F>(ckpt_path)?;
    let cfg = ckpt.config.clone();
    log_config(&cfg, cfg.seed, "checkpoint");
    let data = dataset(&cfg, data_dir)?;
    let model = ArVideoModel::new(cfg.model_config())?;
    let params = if random_init { model.init_params::<F>(cfg.seed) } else { ckpt.params };
    let r = probe(&cfg, &model, &params, &data, mode)?;
    log(
        "probe",
        &[
            ("mode", mode.name().into()),
            ("test_accuracy", r.test_accuracy.to_string()),
            ("train_accuracy", r.train_accuracy.to_string()),
        ],
    );
    Ok(format!(
        "mode,encoder,train_accuracy,test_accuracy,final_loss\n{},{},{},{},{}\n",
        mode.name(),
        if random_init { "random" } else { "checkpoint" },
        r.train_accuracy,
        r.test_accuracy,
        r.final_loss
    ))
}

fn layout_dump(args: &ConfigArgs, seed: Option<u64>, out: &Path, format: MaskFormat) -> Result<(), Error> {
    let mut cfg = load_config(args)?;
    let (s, source) = resolve_seed(seed, args, cfg.seed);
    cfg.seed = s;
    log_config(&cfg, s, source);
    let dims = cfg.cube_spec().grid_for(cfg.frames, cfg.height, cfg.width)?;
    let grid = ClusterGrid::new(dims, cfg.cluster_scheme())?;
    let train: Vec<usize> = (0..cfg.num_videos).filter(|&i| !is_held_out(i, cfg.num_directions)).collect();
    let (batch_seed, video, plan) = sample_layout(&cfg, &grid, &train, s, 0, 0)?;
    log(
        "layout",
        &[
            ("batch_seed", format!("{batch_seed:#018x}")),
            ("video", video.to_string()),
            ("enc_len", plan.enc_len().to_string()),
            ("dec_len", plan.dec_len().to_string()),
        ],
    );
    fs::create_dir_all(out)?;
    for (name, m) in [("enc_mask", &plan.enc_mask), ("cross_mask", &plan.cross_mask), ("dec_self_mask", &plan.dec_self_mask)] {
        match format {
            MaskFormat::Csv => write_out(&out.join(format!("{name}.csv")), m.to_csv().as_bytes())?,
            MaskFormat::Pgm => write_out(&out.join(format!("{name}.pgm")), &m.to_pgm())?,
        }
    }
    let mut order = String::from("position,cluster_t,cluster_h,cluster_w,visible_tokens,target_tokens\n");
    for g in &plan.encoder_groups {
        let targets = plan.target_groups.iter().find(|t| t.position == g.position).map_or(0, |t| t.tokens.len());
        order.push_str(&format!(
            "{},{},{},{},{},{}\n",
            g.position,
            g.cluster.t,
            g.cluster.h,
            g.cluster.w,
            g.tokens.len(),
            targets
        ));
    }
    write_out(&out.join("order.csv"), order.as_bytes())?;
    let lv = generate_moving_shape(&cfg.task_spec(), video as u64)?;
    let tokens = cubify(&lv.video, cfg.cube_spec())?;
    let stats = if cfg.normalize_targets {
        normalize_targets(&tokens, cfg.norm_eps)
    } else {
        CubeTargets::raw(&tokens)
    };
    write_out(&out.join("cube_stats.csv"), stats.stats_csv().as_bytes())?;
    Ok(())
}

fn rank_with<F: Real>(ckpt_path: &Path, data_dir: Option<&Path>, samples: usize, factor: f64) -> Result<String, Error> {
    let ckpt = load_checkpoint::<F>(ckpt_path)?;
    let cfg = ckpt.config.clone();
    log_config(&cfg, cfg.seed, "checkpoint");
    let data = dataset(&cfg, data_dir)?;
    let model = ArVideoModel::new(cfg.model_config())?;
    let dims = cfg.cube_spec().grid_for(cfg.frames, cfg.height, cfg.width)?;
    let grid = ClusterGrid::new(dims, cfg.cluster_scheme())?;
    let mut records: Vec<AttentionRecord> = Vec::with_capacity(samples);
    for b in 0..samples {
        let (_, video, plan) = sample_layout(&cfg, &grid, &data.train, cfg.seed, 0, b)?;
        let (_, rec) = encode(&model, &ckpt.params, &plan, &data.videos[video].grid)?;
        records.push(rec);
    }
    let report = attention_rank_report(&records, factor)?;
    for r in &report {
        log("rank", &[("layer", r.layer.to_string()), ("mean", r.mean.to_string())]);
    }
    Ok(rank_report_csv(&report))
}

fn cost_report(configs: &[PathBuf], out: Option<&Path>) -> Result<(), Error> {
    let mut reports = Vec::with_capacity(configs.len());
    for path in configs {
        let cfg = RunConfig::load(path)?;
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        log_config(&cfg, cfg.seed, "config");
        reports.push(attention_cost(&CostConfig::from_run(name, &cfg)?)?);
    }
    emit(out, &cost_report_csv(&reports))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => write_out(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gradcheck(args: &ConfigArgs, seed: Option<u64>, count: usize, h: f64, tol: f64) -> Result<bool, Error> {
    let mut cfg = load_config(args)?;
    let (s, source) = resolve_seed(seed, args, cfg.seed);
    cfg.seed = s;
    cfg.precision = Precision::F64;
    log_config(&cfg, s, source);
    let lv = generate_moving_shape(&cfg.task_spec(), 0)?;
    let video = PreparedVideo::new(&cfg, &lv)?;
    let report = check_pretrain_gradients(&cfg, &video, s, count, h, tol)?;
    let model = ArVideoModel::new(cfg.model_config())?;
    println!("param,element,analytic,numeric,rel_err");
    for r in &report.results {
        println!(
            "{},{},{:e},{:e},{:e}",
            model.param_specs()[r.probe.0].name,
            r.probe.1,
            r.analytic,
            r.numeric,
            r.rel_err
        );
    }
    log(
        "gradcheck",
        &[
            ("probes", report.results.len().to_string()),
            ("max_rel_err", format!("{:e}", report.max_rel_err)),
            ("tol", format!("{tol:e}")),
            ("passed", report.passed.to_string()),
        ],
    );
    Ok(report.passed)
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::GenData {
            out,
            count,
            frames,
            size,
            shape_size,
            speed,
            seed,
            cfg,
        } => gen_data(&out, count, frames, size, shape_size, speed, seed, &cfg).map(|_| true),
        Command::Pretrain {
            cfg,
            seed,
            data,
            out,
            metrics,
            resume,
            stop_at,
        } => pretrain(&cfg, seed, data.as_deref(), &out, metrics.as_deref(), resume.as_deref(), stop_at).map(|_| true),
        Command::Probe {
            checkpoint,
            data,
            mode,
            random_init,
            out,
        } => {
            let mode = match mode {
                Mode::Linear => ProbeMode::Linear,
                Mode::Full => ProbeMode::Full,
            };
            let text = match read_checkpoint_config(&checkpoint)?.precision {
                Precision::F32 => probe_with::<f32>(&checkpoint, data.as_deref(), mode, random_init)?,
                Precision::F64 => probe_with::<f64>(&checkpoint, data.as_deref(), mode, random_init)?,
            };
            emit(out.as_deref(), &text).map(|_| true)
        }
        Command::LayoutDump { cfg, seed, out, format } => layout_dump(&cfg, seed, &out, format).map(|_| true),
        Command::RankReport {
            checkpoint,
            data,
            out,
            samples,
            factor,
        } => {
            let text = match read_checkpoint_config(&checkpoint)?.precision {
                Precision::F32 => rank_with::<f32>(&checkpoint, data.as_deref(), samples, factor)?,
                Precision::F64 => rank_with::<f64>(&checkpoint, data.as_deref(), samples, factor)?,
            };
            emit(out.as_deref(), &text).map(|_| true)
        }
        Command::CostReport { configs, out } => cost_report(&configs, out.as_deref()).map(|_| true),
        Command::Gradcheck {
            cfg,
            seed,
            params,
            step,
            tol,
        } => gradcheck(&cfg, seed, params, step, tol),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log("error", &[("message", e.to_string())]);
            return ExitCode::from(2);
        }
        log("threads", &[("threads", n.to_string())]);
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            log("error", &[("message", e.to_string())]);
            match e {
                Error::Config { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
