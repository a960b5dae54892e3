mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use capl_core::checkpoint::Checkpoint;
use capl_core::dataset::SplitData;
use capl_core::fsutil::write_atomic;
use capl_core::gradcheck;
use capl_core::protocol::{
    ablation_csv, ordering_inversions, resolve_fusion, run_ablation, run_fs_protocol, run_gfs_protocol, AblationConfig,
    FeatureCache, FusionChoice, Model,
};
use capl_core::prototype::{register_with_features, support_features};
use capl_core::synth::build_dataset;
use capl_core::train::{
    loss_csv_row, make_variant, train_until, TrainState, TrainingKind, Variant, LOSS_CSV_HEADER,
};
use capl_core::{pnm, DType, Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "capl", version, about = "Generalized few-shot segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every fold of the synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the base classes of one fold.
    Train(TrainArgs),
    /// Register the novel classes of a fold from sampled supports.
    Register(RegisterArgs),
    /// Segment one image.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Raw logits: u32 height, width, classes, then f32 values, all little-endian.
        #[arg(long)]
        logits: Option<PathBuf>,
    },
    /// Score a checkpoint on a fold's test set.
    Eval(EvalArgs),
    /// Train and evaluate several variants over folds.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and of the full training loss.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        /// Scale the analytic gradient of one entry to test the checker.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fold manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    #[arg(long)]
    out: PathBuf,
    /// Per-step losses; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier `--stop-at` run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many total steps instead of the configured count.
    #[arg(long)]
    stop_at: Option<usize>,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: Precision,
}

#[derive(Args)]
struct FusionArgs {
    /// Inference variant; defaults to the one matching the checkpoint's training.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Fixed γ for the constant-γ variant.
    #[arg(long)]
    gamma: Option<f64>,
    /// Checkpoint whose converged γ the test-time-only variant borrows.
    #[arg(long)]
    gamma_from: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    shots: usize,
    #[arg(long, default_value_t = 123)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fusion: FusionArgs,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: Precision,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Protocol {
    Gfs,
    Fs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "gfs")]
    protocol: Protocol,
    /// Supports per novel class; omitted means base-only for gfs.
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Episode count for fs.
    #[arg(long)]
    episodes: Option<usize>,
    #[command(flatten)]
    fusion: FusionArgs,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root written by `synth`, or a single fold manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    variants: Option<Vec<Variant>>,
    #[arg(long, value_delimiter = ',')]
    shots_list: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Directory of trained checkpoints reused across runs.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    make_variant(s).map_err(|e| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Range(_) | Error::UnsupportedOp(_) => 2,
        Error::Io { .. } | Error::Format(_) | Error::Shape(_) => 3,
        Error::Numerical(_) | Error::DegenerateBatch(_) => 4,
        Error::EmptyMask(_) | Error::Data(_) | Error::Degenerate(_) | Error::Generation(_) => 5,
        Error::Seed { .. } => unreachable!("root looks through seed annotations"),
    }
}

/// Larger malloc thresholds keep the allocator from returning and
/// re-mapping the per-step tape buffers.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    const THRESHOLD: libc::c_int = 256 << 20;
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, THRESHOLD);
        libc::mallopt(libc::M_TRIM_THRESHOLD, THRESHOLD);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CAPL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CAPL_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialize");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn default_variant(kind: TrainingKind) -> Variant {
    match kind {
        TrainingKind::Plain => Variant::Baseline,
        TrainingKind::FakeNovel => Variant::CaplTr,
        TrainingKind::Full => Variant::Capl,
    }
}

fn resolve(args: &FusionArgs, ck: &Checkpoint, model: &Model<f64>, amp_gamma: f64) -> Result<(Variant, FusionChoice)> {
    let variant = args.variant.unwrap_or_else(|| default_variant(ck.kind));
    if variant.training() != ck.kind {
        return Err(Error::Config(format!(
            "variant {variant} expects a {} checkpoint, got {}",
            variant.training().name(),
            ck.kind.name()
        )));
    }
    let reference = match &args.gamma_from {
        Some(p) => {
            let other = Checkpoint::load(p)?;
            Some(
                other
                    .to_state()
                    .converged_gamma()
                    .ok_or_else(|| Error::Config(format!("{} has no recorded gamma", p.display())))?,
            )
        }
        None => args.gamma,
    };
    let fusion = resolve_fusion(variant, model.converged_gamma, reference, args.gamma.unwrap_or(amp_gamma))?;
    Ok((variant, fusion))
}

fn cmd_synth(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    for split in 0..cfg.scene.folds() {
        let dir = out.join(format!("fold{split}"));
        build_dataset(&cfg.scene, split, &dir)?;
        println!("{}", dir.join("manifest.json").display());
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    require_file(&args.data)?;
    if let Some(r) = &args.resume {
        require_file(r)?;
    }
    let kind = args.variant.training();
    let until = args.stop_at.unwrap_or(cfg.train.steps);
    if until > cfg.train.steps {
        return Err(Error::Config(format!("--stop-at {until} exceeds the configured {} steps", cfg.train.steps)));
    }
    let data = SplitData::<f64>::load(&args.data)?;
    let mut state = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.kind != kind {
                return Err(Error::Config(format!("cannot resume a {} checkpoint as {}", ck.kind.name(), kind.name())));
            }
            if ck.step > until {
                return Err(Error::Config(format!("checkpoint is already at step {}", ck.step)));
            }
            ck.to_state()
        }
        None => {
            let base: Vec<u8> = data.base_ids().into_iter().collect();
            TrainState::init(&cfg.train, kind, &base)?
        }
    };
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    train_until(&mut state, &cfg.train, &data.train, until, |s| {
        csv.push_str(&loss_csv_row(s));
        csv.push('\n');
    })?;
    let loss_path = args.loss_csv.clone().unwrap_or_else(|| args.out.with_extension("loss.csv"));
    write_atomic(&loss_path, csv.as_bytes())?;
    Checkpoint::from_state(&state, &data.classes).save(&args.out, args.dtype.into())?;
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_register(args: &RegisterArgs) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    require_file(&args.model)?;
    require_file(&args.data)?;
    let ck = Checkpoint::load(&args.model)?;
    let model = Model::from_checkpoint(&ck);
    let (_, fusion) = resolve(&args.fusion, &ck, &model, cfg.protocol.amp_gamma)?;
    let data = SplitData::<f64>::load(&args.data)?;
    let supports = data.sample_support_set(args.shots, args.seed)?;
    let features = support_features(&model.backbone, &supports)?;
    let (classifier, enriched) = register_with_features(&model.classifier, fusion.as_fusion(&model)?, &supports, &features, 1)?;
    for e in &enriched {
        eprintln!("class {}: gamma {:.6} over {} pixels", e.class, e.gamma, e.pixels);
    }
    let out = Checkpoint { classifier, ..ck };
    out.save(&args.out, args.dtype.into())?;
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_predict(model: &Path, image: &Path, out: &Path, logits: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(model)?;
    let img = pnm::read_ppm::<f64>(image)?;
    let features = ck.backbone.extract_features(&img)?;
    let (mask, z) = ck.classifier.classify(&features)?;
    pnm::write_pgm(out, &mask)?;
    if let Some(path) = logits {
        let shape = z.shape();
        let mut bytes = Vec::with_capacity(12 + 4 * z.len());
        for &d in shape {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in z.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        write_atomic(path, &bytes)?;
    }
    println!("{}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    model: &'a Path,
    data: &'a Path,
    protocol: Protocol,
    variant: Variant,
    fusion: FusionChoice,
}

#[derive(Serialize)]
struct EvalReport<'a, R: Serialize> {
    config: EvalEcho<'a>,
    #[serde(flatten)]
    report: R,
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    require_file(&args.model)?;
    require_file(&args.data)?;
    let ck = Checkpoint::load(&args.model)?;
    let model = Model::from_checkpoint(&ck);
    let data = SplitData::<f64>::load(&args.data)?;
    let cache = FeatureCache::build(&model.backbone, &data)?;
    let echo = |variant, fusion| EvalEcho {
        model: &args.model,
        data: &args.data,
        protocol: args.protocol,
        variant,
        fusion,
    };
    match args.protocol {
        Protocol::Gfs => {
            let shots = args.shots.unwrap_or(0);
            let (variant, fusion) = if shots == 0 {
                (default_variant(ck.kind), FusionChoice::ImprintOnly)
            } else {
                resolve(&args.fusion, &ck, &model, cfg.protocol.amp_gamma)?
            };
            let seeds = args.seeds.clone().unwrap_or(cfg.protocol.seeds);
            let report = run_gfs_protocol(&model, &data, &cache, shots, &seeds, fusion)?;
            eprintln!(
                "shots {shots}: base {} novel {} total {:.4}",
                fmt_opt(report.mean.base),
                fmt_opt(report.mean.novel),
                report.mean.total
            );
            write_json(&args.report, &EvalReport { config: echo(variant, fusion), report })?;
        }
        Protocol::Fs => {
            let shots = args.shots.unwrap_or(1);
            let episodes = args.episodes.unwrap_or(cfg.protocol.episodes);
            let seed = args.seeds.as_ref().and_then(|s| s.first().copied()).unwrap_or(cfg.protocol.seeds[0]);
            let report = run_fs_protocol(&model, &data, &cache, shots, episodes, seed)?;
            eprintln!("shots {shots}: class mIoU {:.4} over {episodes} episodes", report.class_miou);
            let variant = default_variant(ck.kind);
            write_json(&args.report, &EvalReport { config: echo(variant, FusionChoice::ImprintOnly), report })?;
        }
    }
    println!("{}", args.report.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn fold_manifests(data: &Path) -> Result<Vec<PathBuf>> {
    if data.is_file() {
        return Ok(vec![data.to_path_buf()]);
    }
    let entries = std::fs::read_dir(data).map_err(|e| Error::io(data, e))?;
    let mut found = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(data, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(i) = name.strip_prefix("fold").and_then(|s| s.parse::<usize>().ok()) {
            let manifest = entry.path().join("manifest.json");
            if manifest.is_file() {
                found.insert(i, manifest);
            }
        }
    }
    if found.is_empty() {
        return Err(Error::Data(format!("no fold manifests under {}", data.display())));
    }
    Ok(found.into_values().collect())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let manifests = fold_manifests(&args.data)?;
    let config = AblationConfig {
        variants: args.variants.clone().unwrap_or(cfg.protocol.variants),
        shots: args.shots_list.clone().unwrap_or(cfg.protocol.shots),
        seeds: args.seeds.clone().unwrap_or(cfg.protocol.seeds),
        amp_gamma: cfg.protocol.amp_gamma,
        train: cfg.train,
        cache_dir: args.cache.clone(),
    };
    let folds = manifests
        .iter()
        .map(|m| SplitData::<f64>::load(m))
        .collect::<Result<Vec<_>>>()?;
    let rows = run_ablation(&folds, &config, &mut |msg| eprintln!("{msg}"))?;
    write_atomic(&args.out, ablation_csv(&rows).as_bytes())?;
    for r in rows.iter().filter(|r| r.seed.is_none()) {
        eprintln!(
            "{:<12} K={:<3} base {} novel {} total {:.4}",
            r.variant.name(),
            r.shots,
            fmt_opt(r.base),
            fmt_opt(r.novel),
            r.total
        );
    }
    for (hi, lo, k) in ordering_inversions(&rows, 0.005) {
        eprintln!("inversion at K={k}: {lo} scores above {hi}");
    }
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_gradcheck(trials: usize, seed: u64, tol: f64, step: f64, corrupt: Option<&str>) -> Result<bool> {
    let suite = gradcheck::run_suite(trials, seed, step, tol, corrupt)?;
    let mut all = true;
    for entry in &suite {
        let r = &entry.report;
        all &= r.passed;
        println!(
            "{:<24} {} max_rel_error={:.3e} params={}",
            entry.name,
            if r.passed { "pass" } else { "FAIL" },
            r.max_rel_error,
            r.checked
        );
    }
    println!("{}", if all { "all passed" } else { "FAILED" });
    Ok(all)
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::Synth { config, out } => cmd_synth(config.as_deref(), &out)?,
        Command::Train(args) => cmd_train(&args)?,
        Command::Register(args) => cmd_register(&args)?,
        Command::Predict {
            model,
            image,
            out,
            logits,
        } => cmd_predict(&model, &image, &out, logits.as_deref())?,
        Command::Eval(args) => cmd_eval(&args)?,
        Command::Ablate(args) => cmd_ablate(&args)?,
        Command::Gradcheck {
            trials,
            seed,
            tol,
            step,
            corrupt,
        } => {
            if !cmd_gradcheck(trials, seed, tol, step, corrupt.as_deref())? {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tune_allocator();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
