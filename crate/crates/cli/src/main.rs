use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use oogan_core::checkpoint::{load_checkpoint, load_models};
use oogan_core::config::TrainConfig;
use oogan_core::critic::{Critic, QMode};
use oogan_core::data::{
    export_npz, file_sha256, load_dsprites, load_npz, synth_factors, verify_npz, ArchiveOptions, FactorDataset,
    SynthSpec,
};
use oogan_core::generator::Generator;
use oogan_core::latent::{sample_noise, sample_uniform_code};
use oogan_core::metrics::{
    critic_encoder, kim_score, mean_std, onehot_l1_probe, perceptual_diversity, q_cosine_report, tc_from_critic,
    ConvExtractor, ExtractorTraining, FeatureExtractor, IdentityExtractor, KimOptions, MetricReport, PdivOptions,
    PdivRange,
};
use oogan_core::rng::{seeded, substream};
use oogan_core::trainer::{train, RunLayout, TrainState};
use oogan_core::viz::{save_png, traversal_grid};
use oogan_core::{DType, Device, Error};

const DSPRITES_FILE: &str = "dsprites_ndarray_co1sh3sc6or40x32y32_64x64.npz";
const DSPRITES_URL: &str =
    "https://github.com/google-deepmind/dsprites-dataset/raw/master/dsprites_ndarray_co1sh3sc6or40x32y32_64x64.npz";

#[derive(Parser)]
#[command(name = "oogan", version, about = "Train and evaluate disentangling GANs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Render a latent traversal grid from a checkpoint.
    Traverse(TraverseArgs),
    /// Evaluate a metric and append it to a report CSV.
    Eval(EvalArgs),
    /// Dataset management.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train the small perceptual feature extractor used by `eval --metric pdiv`.
    TrainExtractor(ExtractorArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Synth,
    Dsprites,
}

#[derive(Clone, Copy, ValueEnum)]
enum QModeArg {
    Det,
    Prob,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset family.
    #[arg(long, value_enum, default_value = "synth")]
    dataset: DatasetKind,
    /// Archive path; defaults to $OOGAN_DATA_DIR (or ./data) for dSprites.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Halve 64px archives to 32px.
    #[arg(long)]
    downsample_32: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small 32px CPU preset instead of the full defaults.
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Total iterations; with --resume, the new stopping point.
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    ortho_weight: Option<f64>,
    #[arg(long)]
    onehot_period: Option<u64>,
    #[arg(long, value_enum)]
    q_mode: Option<QModeArg>,
    #[arg(long)]
    no_onehot: bool,
    #[arg(long)]
    no_ortho: bool,
    #[arg(long)]
    no_competefree: bool,
    #[command(flatten)]
    data: DataArgs,
    /// Continue from a checkpoint inside an existing run directory.
    #[arg(long, conflicts_with_all = ["config", "desk_scale", "out", "force"])]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "runs/run")]
    out: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TraverseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated code dimensions, one grid row each; all by default.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// Seed for the shared noise vector and the base code.
    #[arg(long, default_value_t = 0)]
    z_seed: u64,
    /// Output PNG; defaults to the run's traversals/ directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Kim,
    Pdiv,
    Tc,
    Cosq,
    L1probe,
}

#[derive(Clone, Copy, ValueEnum)]
enum RangeArg {
    Endpoints,
    Symmetric,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: MetricArg,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Evaluate freshly initialized models built from --config (or defaults).
    #[arg(long, conflicts_with = "ckpt")]
    fresh: bool,
    #[arg(long, requires = "fresh")]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Votes per half (kim), repeats (pdiv), batch size (tc), draws (l1probe).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV to append to; defaults to the run's reports/metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace Q with an encoder that reads the ground-truth factors (kim only).
    #[arg(long)]
    oracle_encoder: bool,
    /// Perceptual extractor weights for pdiv; raw pixels if absent.
    #[arg(long)]
    extractor: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "endpoints")]
    range: RangeArg,
    /// Magnitude for `--range symmetric`.
    #[arg(long, default_value_t = 1.0)]
    k: f64,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Download the dSprites archive.
    FetchDsprites {
        /// Destination file; defaults to $OOGAN_DATA_DIR/<archive name>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = DSPRITES_URL)]
        source: String,
        /// Expected SHA-256 (hex). Without it the computed hash is only printed.
        #[arg(long)]
        sha256: Option<String>,
    },
    /// Render the synthetic squares dataset to an archive.
    Synth {
        #[arg(long, default_value = "data/synth.npz")]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        img_size: usize,
        /// Classes per position axis.
        #[arg(long, default_value_t = 8)]
        positions: usize,
        #[arg(long, default_value_t = 4)]
        sizes: usize,
        #[arg(long, default_value_t = 4)]
        brightness: usize,
    },
    /// Check an archive's invariants.
    Verify { path: PathBuf },
}

#[derive(Args)]
struct ExtractorArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 32)]
    img_size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "extractor.safetensors")]
    out: PathBuf,
}

/// Usage and precondition failures exit 2; everything else exits 1.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::InvalidArgument(m)) => Failure::Usage(m.clone()),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn data_dir() -> PathBuf {
    std::env::var_os("OOGAN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn load_dataset(args: &DataArgs, img_size: usize, channels: usize) -> CliResult<FactorDataset> {
    let options = ArchiveOptions {
        downsample_32: args.downsample_32,
        channels,
    };
    let ds = match (args.dataset, &args.data) {
        (DatasetKind::Synth, None) => synth_factors(&SynthSpec {
            img_size,
            ..SynthSpec::default()
        })?
        .with_channels(channels)?,
        (DatasetKind::Synth, Some(p)) => {
            if !p.exists() {
                return usage(format!("archive not found: {}", p.display()));
            }
            load_npz(p, options).with_context(|| format!("loading {}", p.display()))?
        }
        (DatasetKind::Dsprites, p) => {
            let path = p.clone().unwrap_or_else(|| data_dir().join(DSPRITES_FILE));
            if !path.exists() {
                return usage(format!(
                    "dSprites archive not found at {} (run `oogan data fetch-dsprites` or pass --data)",
                    path.display()
                ));
            }
            load_dsprites(&path, options).with_context(|| format!("loading {}", path.display()))?
        }
    };
    Ok(ds)
}

/// `<run>/checkpoints/ckpt.safetensors` belongs to `<run>`.
fn run_of(ckpt: &Path) -> PathBuf {
    ckpt.parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None if args.desk_scale => TrainConfig::desk_scale(),
        None => TrainConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.iters {
        cfg.iterations = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.ortho_weight {
        cfg.ortho_weight = v;
    }
    if let Some(v) = args.onehot_period {
        cfg.onehot_period = v;
        cfg.onehot_phase = cfg.onehot_phase.min(v.saturating_sub(1));
    }
    if let Some(m) = args.q_mode {
        cfg.q_mode = match m {
            QModeArg::Det => QMode::Deterministic,
            QModeArg::Prob => QMode::Probabilistic,
        };
    }
    cfg.disable_onehot |= args.no_onehot;
    cfg.disable_ortho |= args.no_ortho;
    cfg.disable_competefree_g |= args.no_competefree;
    Ok(cfg)
}

fn prepare_out_dir(out: &Path, force: bool) -> CliResult<()> {
    let non_empty = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return usage(format!("{} exists and is not empty (use --force to replace it)", out.display()));
        }
        fs::remove_dir_all(out)?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let (mut state, run, dataset) = if let Some(ckpt) = &args.resume {
        let mut state = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        if let Some(n) = args.iters {
            state.extend_to(n)?;
        }
        let (size, channels) = (state.config().img_size, state.config().img_channels);
        let dataset = load_dataset(&args.data, size, channels)?;
        (state, RunLayout::new(run_of(ckpt)), dataset)
    } else {
        let mut cfg = resolve_config(&args)?;
        let dataset = load_dataset(&args.data, cfg.img_size, cfg.img_channels)?;
        cfg.img_size = dataset.img_size();
        cfg.img_channels = dataset.channels();
        cfg.validate()?;
        prepare_out_dir(&args.out, args.force)?;
        (TrainState::new(cfg, dataset.len())?, RunLayout::new(&args.out), dataset)
    };
    if state.config().strict {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    log::info!(
        "training on {} ({} images, {}px) from iteration {} to {}",
        dataset.name(),
        dataset.len(),
        dataset.img_size(),
        state.iteration(),
        state.config().iterations
    );
    let summary = train(&mut state, &dataset, &run)?;

    let d = state.config().d;
    let mut rng = seeded(0);
    let base = sample_uniform_code(d, &mut rng)?;
    let z = sample_noise(state.config().n_z, &mut rng)?;
    let dims: Vec<usize> = (0..d).collect();
    let grid = traversal_grid(state.generator(), &base, &z, &dims, 8)?;
    let png = run
        .traversals()
        .join(format!("traverse-{:08}.png", state.iteration()));
    save_png(&grid, &png)?;
    println!("checkpoint: {}", summary.final_checkpoint.display());
    println!("traversal: {}", png.display());
    Ok(())
}

fn cmd_traverse(args: TraverseArgs) -> CliResult<()> {
    let (cfg, generator, _) = load_models(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let dims = args.dims.unwrap_or_else(|| (0..cfg.d).collect());
    if let Some(&bad) = dims.iter().find(|&&k| k >= cfg.d) {
        return usage(format!("dimension {bad} out of range for d = {}", cfg.d));
    }
    let mut rng = seeded(args.z_seed);
    let base = sample_uniform_code(cfg.d, &mut rng)?;
    let z = sample_noise(cfg.n_z, &mut rng)?;
    let grid = traversal_grid(&generator, &base, &z, &dims, args.steps)?;
    let out = args.out.unwrap_or_else(|| {
        let stem = args.ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt");
        RunLayout::new(run_of(&args.ckpt))
            .traversals()
            .join(format!("{stem}-z{}.png", args.z_seed))
    });
    save_png(&grid, &out)?;
    println!("{}", out.display());
    Ok(())
}

struct Models {
    config: TrainConfig,
    generator: Generator,
    critic: Critic,
}

fn eval_models(args: &EvalArgs) -> CliResult<Option<Models>> {
    if let Some(p) = &args.ckpt {
        let (config, generator, critic) = load_models(p).with_context(|| format!("loading {}", p.display()))?;
        return Ok(Some(Models {
            config,
            generator,
            critic,
        }));
    }
    if !args.fresh {
        return Ok(None);
    }
    let config = match &args.config {
        Some(p) => TrainConfig::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    config.validate()?;
    let generator = Generator::new(config.generator_config(), &mut substream(config.seed, 0), DType::F32, &Device::Cpu)?;
    let critic = Critic::new(config.critic_config(), &mut substream(config.seed, 1), DType::F32, &Device::Cpu)?;
    Ok(Some(Models {
        config,
        generator,
        critic,
    }))
}

fn need_models(models: &Option<Models>) -> CliResult<&Models> {
    models
        .as_ref()
        .ok_or_else(|| Failure::Usage("this metric needs --ckpt or --fresh".into()))
}

fn eval_dataset(args: &EvalArgs, models: &Option<Models>) -> CliResult<FactorDataset> {
    let (size, channels) = match models {
        Some(m) => (m.config.img_size, m.config.img_channels),
        None => (32, 1),
    };
    let ds = load_dataset(&args.data, size, channels)?;
    if models.is_some() && (ds.img_size() != size || ds.channels() != channels) {
        return usage(format!(
            "dataset is {}px x{} but the model expects {size}px x{channels}",
            ds.img_size(),
            ds.channels()
        ));
    }
    Ok(ds)
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    if args.oracle_encoder && args.metric != MetricArg::Kim {
        return usage("--oracle-encoder applies to --metric kim only");
    }
    let models = eval_models(&args)?;
    let mut rng = seeded(args.seed);
    let source = match (&args.ckpt, args.oracle_encoder) {
        (_, true) => "oracle".to_string(),
        (Some(p), _) => p.display().to_string(),
        (None, _) => "fresh".to_string(),
    };
    let mut reports = Vec::new();
    match args.metric {
        MetricArg::Kim => {
            let ds = eval_dataset(&args, &models)?;
            let n = args.n.unwrap_or(800);
            let opts = KimOptions {
                fit_votes: n,
                eval_votes: n,
                ..KimOptions::default()
            };
            let mut report = if args.oracle_encoder {
                let mut enc = |idx: &[usize]| -> oogan_core::Result<Vec<Vec<f64>>> {
                    Ok(idx
                        .iter()
                        .map(|&i| ds.factor_classes(i).iter().map(|&c| c as f64).collect())
                        .collect())
                };
                kim_score(&mut enc, &ds, opts, &mut rng)?
            } else {
                let m = need_models(&models)?;
                let mut enc = critic_encoder(&m.critic, &ds);
                kim_score(&mut enc, &ds, opts, &mut rng)?
            };
            report.config["source"] = source.clone().into();
            report.config["dataset"] = ds.name().into();
            reports.push(report);
        }
        MetricArg::Pdiv => {
            let m = need_models(&models)?;
            let range = match args.range {
                RangeArg::Endpoints => PdivRange::default(),
                RangeArg::Symmetric => PdivRange::Symmetric { k: args.k },
            };
            let opts = PdivOptions {
                repeats: args.n.unwrap_or(1000),
                range,
                ..PdivOptions::default()
            };
            let extractor: Box<dyn FeatureExtractor> = match &args.extractor {
                Some(p) => Box::new(ConvExtractor::load(p).with_context(|| format!("loading {}", p.display()))?),
                None => Box::new(IdentityExtractor {
                    channels: m.config.img_channels,
                    size: m.config.img_size,
                }),
            };
            let mut report = perceptual_diversity(&m.generator, extractor.as_ref(), opts, &mut rng)?;
            report.config["source"] = source.clone().into();
            reports.push(report);
        }
        MetricArg::Tc => {
            let m = need_models(&models)?;
            if m.config.q_mode != QMode::Probabilistic {
                return usage("TC needs a probabilistic Q; this model was trained with q_mode = det");
            }
            let ds = eval_dataset(&args, &models)?;
            let batch = args.n.unwrap_or(1000);
            const REPEATS: usize = 5;
            let values = (0..REPEATS)
                .map(|_| tc_from_critic(&m.critic, &ds, batch, &mut rng))
                .collect::<oogan_core::Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&values);
            reports.push(MetricReport::new(
                "tc",
                mean,
                std,
                REPEATS * batch.min(ds.len()),
                json_config(&[("source", source.clone()), ("batch", batch.to_string()), ("repeats", REPEATS.to_string())]),
            )?);
        }
        MetricArg::Cosq => {
            let m = need_models(&models)?;
            let layers = m.critic.q_grouped_kernel_vectors()?;
            let pairs: usize = layers.iter().map(|l| l.len() * l.len().saturating_sub(1) / 2).sum();
            let score = q_cosine_report(&m.critic)?;
            reports.push(MetricReport::new(
                "cosq",
                score,
                0.0,
                pairs,
                json_config(&[("source", source.clone())]),
            )?);
        }
        MetricArg::L1probe => {
            let m = need_models(&models)?;
            let n = args.n.unwrap_or(1000);
            let probe = onehot_l1_probe(&m.generator, &m.critic, n, &mut rng)?;
            let cfg = json_config(&[("source", source.clone())]);
            reports.push(MetricReport::new("l1probe_uniform", probe.l1_uniform, 0.0, n, cfg.clone())?);
            reports.push(MetricReport::new("l1probe_onehot", probe.l1_onehot, 0.0, n, cfg)?);
        }
    }
    let csv = args.out.clone().or_else(|| {
        args.ckpt
            .as_ref()
            .map(|p| RunLayout::new(run_of(p)).reports().join("metrics.csv"))
    });
    for r in &reports {
        if let Some(path) = &csv {
            r.append_csv(path)?;
        }
        println!("{}", r.to_json()?);
    }
    Ok(())
}

fn json_config(pairs: &[(&str, String)]) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (k, v) in pairs {
        map.insert((*k).to_string(), v.clone().into());
    }
    map.into()
}

fn cmd_fetch(out: Option<PathBuf>, source: String, sha256: Option<String>) -> CliResult<()> {
    let out = out.unwrap_or_else(|| data_dir().join(DSPRITES_FILE));
    let dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let tmp = dir.join(format!(
        ".{}.partial",
        out.file_name().and_then(|s| s.to_str()).unwrap_or("download")
    ));
    let result = download(&source, &tmp).and_then(|()| Ok(file_sha256(&tmp)?));
    let actual = match result {
        Ok(h) => h,
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            return Err(Failure::Runtime(e.context(format!("downloading {source}"))));
        }
    };
    if let Some(expected) = sha256 {
        if !expected.eq_ignore_ascii_case(&actual) {
            let _ = fs::remove_file(&tmp);
            return Err(Failure::Runtime(anyhow!(
                "checksum mismatch for {source}: expected {expected}, got {actual}"
            )));
        }
    }
    fs::rename(&tmp, &out)?;
    println!("{actual}  {}", out.display());
    Ok(())
}

fn download(source: &str, dest: &Path) -> anyhow::Result<()> {
    let mut reader: Box<dyn Read> = match source.strip_prefix("file://") {
        Some(local) => Box::new(fs::File::open(local)?),
        None => ureq::get(source).call()?.into_reader(),
    };
    let mut file = fs::File::create(dest)?;
    std::io::copy(&mut reader, &mut file)?;
    file.flush()?;
    Ok(())
}

fn cmd_data(cmd: DataCommand) -> CliResult<()> {
    match cmd {
        DataCommand::FetchDsprites { out, source, sha256 } => cmd_fetch(out, source, sha256),
        DataCommand::Synth {
            out,
            img_size,
            positions,
            sizes,
            brightness,
        } => {
            let ds = synth_factors(&SynthSpec {
                img_size,
                positions_x: positions,
                positions_y: positions,
                sizes,
                brightness,
                ..SynthSpec::default()
            })?;
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            export_npz(&ds, &out)?;
            println!("{} images -> {}", ds.len(), out.display());
            Ok(())
        }
        DataCommand::Verify { path } => {
            if !path.exists() {
                return usage(format!("archive not found: {}", path.display()));
            }
            let r = verify_npz(&path).with_context(|| format!("verifying {}", path.display()))?;
            println!("images: {}", r.images);
            println!("img_size: {}", r.img_size);
            println!("pixel_max: {}", r.pixel_max);
            for (name, size) in r.factor_names.iter().zip(&r.factor_sizes) {
                println!("factor {name}: {size} classes");
            }
            println!("full_factorial: {}", r.full_factorial);
            println!("sha256: {}", file_sha256(&path)?);
            Ok(())
        }
    }
}

fn cmd_train_extractor(args: ExtractorArgs) -> CliResult<()> {
    let ds = load_dataset(&args.data, args.img_size, args.channels)?;
    let model = ConvExtractor::train(
        &ds,
        ExtractorTraining {
            steps: args.steps,
            seed: args.seed,
            ..ExtractorTraining::default()
        },
    )?;
    model.save(&args.out)?;
    for (name, acc) in model.factor_names().iter().zip(model.train_accuracy()) {
        println!("{name}: accuracy {acc:.3}");
    }
    println!("{}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Traverse(a) => cmd_traverse(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Data(c) => cmd_data(c),
        Command::TrainExtractor(a) => cmd_train_extractor(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
