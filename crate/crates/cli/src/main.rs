use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hrtf_latent::autoencoder::{ConditionedAutoencoder, PrototypeArchive};
use hrtf_latent::data::{
    read_dataset, synth_generate, write_dataset, AnthropometricVector, DatasetProfile, HrtfDataset, NormalizationStats, SubjectRecord,
    SynthSpec,
};
use hrtf_latent::pipeline::{
    evaluate, evaluate_estimator, hrirs, load_autoencoder, run_baseline_training, run_estimator_training, run_pretraining,
    run_protocol, save_autoencoder, Estimator, EstimatorKind, EvaluationReport, ExperimentConfig, Individualizer, LoadedData,
    MeanMagnitudePredictor, Normalizers, PrototypeOracle, TargetGrid, TrainedHrtfDnn, ARCHIVE_FILE, AUTOENCODER_FILE,
};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "hrtf", version, about = "HRTF individualization from anthropometry")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    #[arg(long, global = true)]
    allow_out_of_range: bool,
    /// Classifier-free guidance scale.
    #[arg(long, global = true)]
    guidance: Option<f64>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    infer_steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic .hds collection.
    Synth(SynthArgs),
    /// Pretrain the autoencoder and archive prototypes.
    PretrainAe,
    /// Train the prototype DNN against a pretrained autoencoder.
    TrainProtoDnn,
    /// Train the prototype diffusion model against a pretrained autoencoder.
    TrainProtoDm,
    /// Train the fixed-grid HRTF DNN baseline.
    TrainBaseline,
    /// Score a trained model on the test subjects.
    Evaluate(EvaluateArgs),
    /// Render magnitudes (and optionally HRIRs) for one listener.
    Individualize(IndividualizeArgs),
    /// Cross-validate, retrain with the best hyperparameters and evaluate.
    Cv,
}

#[derive(Args)]
struct SynthArgs {
    /// Grid and subject counts of a measured collection (cipic or hutubs).
    #[arg(long)]
    profile: Option<String>,
    #[arg(long, default_value = "synth")]
    dataset_id: String,
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    #[arg(long, default_value_t = 0)]
    without_anthropometry: usize,
    #[arg(long, default_value_t = 64)]
    positions: usize,
    #[arg(long, default_value_t = 32)]
    bins: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Predictor {
    ProtoDnn,
    ProtoDm,
    HrtfDnn,
    /// Per-dataset mean of the training magnitudes.
    Mean,
    /// Decoded ground-truth prototypes.
    Oracle,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Defaults to the configured estimator.
    #[arg(long, value_enum)]
    predictor: Option<Predictor>,
}

#[derive(Args)]
struct IndividualizeArgs {
    /// JSON object with "left" and "right" maps from parameter name to value.
    #[arg(long)]
    anthro: PathBuf,
    /// .hds file whose source and frequency grid to render on; defaults to the first configured dataset.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Magnitude statistics profile (dataset id); defaults to the grid's dataset id.
    #[arg(long)]
    profile: Option<String>,
    /// Also write minimum-phase HRIRs as little-endian f32.
    #[arg(long)]
    hrir: bool,
    #[arg(long, default_value = "listener")]
    subject_id: String,
}

#[derive(Deserialize)]
struct EarAnthropometry {
    left: BTreeMap<String, f64>,
    right: BTreeMap<String, f64>,
}

fn resolve_config(c: &Common, kind: Option<EstimatorKind>) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_json_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(v) = c.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = c.weight_decay {
        cfg.weight_decay = v;
    }
    cfg.allow_out_of_range |= c.allow_out_of_range;
    if let Some(v) = c.guidance {
        cfg.sampler.guidance = v;
    }
    if let Some(v) = c.eta {
        cfg.sampler.eta = v;
    }
    if let Some(v) = c.infer_steps {
        cfg.sampler.infer_steps = v;
    }
    if let Some(k) = kind {
        cfg.estimator = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_pretrained(dir: &Path) -> Result<(ConditionedAutoencoder, Vec<NormalizationStats>, PrototypeArchive)> {
    let ae_path = dir.join(AUTOENCODER_FILE);
    let (ae, stats) = load_autoencoder(&ae_path).with_context(|| format!("loading {}; run pretrain-ae first", ae_path.display()))?;
    let archive = PrototypeArchive::load(dir.join(ARCHIVE_FILE))?;
    Ok((ae, stats, archive))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn synth(common: &Common, args: &SynthArgs) -> Result<()> {
    let spec = match &args.profile {
        Some(p) => DatasetProfile::by_name(p).with_context(|| format!("unknown profile {p}"))?.synth_spec(),
        None => SynthSpec {
            num_without_anthropometry: args.without_anthropometry,
            ..SynthSpec::simple(&args.dataset_id, args.subjects, args.positions, args.bins)
        },
    };
    let ds = synth_generate(common.seed.unwrap_or(0), &spec)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.hds", ds.dataset_id));
    write_dataset(&ds, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let data = LoadedData::load(cfg)?;
    let (ae, out) = run_pretraining(cfg, &data)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    save_autoencoder(&ae, &out.magnitude_stats, cfg.out_dir.join(AUTOENCODER_FILE))?;
    out.archive.save(cfg.out_dir.join(ARCHIVE_FILE))?;
    write_json(&cfg.out_dir.join("pretrain_history.json"), &out.history)?;
    println!("train LSD {:.3} dB over {} epochs", out.train_lsd, out.history.epochs.len());
    Ok(())
}

fn train_estimator(cfg: &ExperimentConfig) -> Result<()> {
    let data = LoadedData::load(cfg)?;
    let (_, stats, archive) = load_pretrained(&cfg.out_dir)?;
    let t = run_estimator_training(cfg, cfg.hyperparameters(), &data, &archive, stats)?;
    for w in &t.warnings {
        eprintln!("warning: {w}");
    }
    let path = cfg.out_dir.join(cfg.estimator.checkpoint_file());
    t.estimator.save(&t.normalizers, &path)?;
    write_json(&cfg.out_dir.join(format!("{}_history.json", t.estimator.kind())), &t.history)?;
    println!("{} ({} parameters)", path.display(), t.estimator.parameter_count());
    Ok(())
}

fn train_baseline(cfg: &ExperimentConfig) -> Result<()> {
    let data = LoadedData::load(cfg)?;
    let (model, history) = run_baseline_training(cfg, cfg.hyperparameters(), &data.training_set()?)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(EstimatorKind::HrtfDnn.checkpoint_file());
    model.save(&path)?;
    write_json(&cfg.out_dir.join("hrtf_dnn_history.json"), &history)?;
    println!("{} ({} parameters)", path.display(), model.net.parameter_count());
    Ok(())
}

fn load_trained(cfg: &ExperimentConfig, kind: EstimatorKind) -> Result<(Estimator, Normalizers)> {
    let path = cfg.out_dir.join(kind.checkpoint_file());
    Ok(Estimator::load(&path).with_context(|| format!("loading {}", path.display()))?)
}

fn run_evaluate(cfg: &ExperimentConfig, args: &EvaluateArgs) -> Result<()> {
    let data = LoadedData::load(cfg)?;
    let predictor = args.predictor.unwrap_or(match cfg.estimator {
        EstimatorKind::ProtoDnn => Predictor::ProtoDnn,
        EstimatorKind::ProtoDm => Predictor::ProtoDm,
        EstimatorKind::HrtfDnn => Predictor::HrtfDnn,
    });
    let report: EvaluationReport = match predictor {
        Predictor::ProtoDnn | Predictor::ProtoDm => {
            let kind = if matches!(predictor, Predictor::ProtoDnn) {
                EstimatorKind::ProtoDnn
            } else {
                EstimatorKind::ProtoDm
            };
            let (ae, _, _) = load_pretrained(&cfg.out_dir)?;
            let (est, norms) = load_trained(cfg, kind)?;
            evaluate_estimator(cfg, &data, &est, &norms, &ae)?
        }
        Predictor::HrtfDnn => {
            let mut model = TrainedHrtfDnn::load(cfg.out_dir.join(EstimatorKind::HrtfDnn.checkpoint_file()))?;
            evaluate(&mut model, &data.test_sets())?
        }
        Predictor::Mean => evaluate(&mut MeanMagnitudePredictor::fit(&data.train_sets())?, &data.test_sets())?,
        Predictor::Oracle => {
            let (ae, stats, _) = load_pretrained(&cfg.out_dir)?;
            let mut oracle = PrototypeOracle {
                autoencoder: &ae,
                magnitude: &stats,
            };
            evaluate(&mut oracle, &data.test_sets())?
        }
    };
    report.write_csv(&cfg.out_dir)?;
    println!(
        "LSD {:.3} ± {:.3} dB over {} subjects ({} parameters)",
        report.mean,
        report.std,
        report.subjects.len(),
        report.parameter_count
    );
    Ok(())
}

fn individualize(cfg: &ExperimentConfig, args: &IndividualizeArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.anthro).with_context(|| format!("reading {}", args.anthro.display()))?;
    let ears: EarAnthropometry = serde_json::from_str(&text)?;
    let left = AnthropometricVector::from_named(&ears.left)?;
    let right = AnthropometricVector::from_named(&ears.right)?;
    left.check_physical()?;
    right.check_physical()?;

    let grid_source: HrtfDataset = match &args.grid {
        Some(p) => read_dataset(p)?,
        None => cfg.datasets.first().context("no dataset configured")?.load(cfg.seed)?,
    };
    let grid = TargetGrid::of_dataset(&grid_source);
    let profile = args.profile.clone().unwrap_or_else(|| grid_source.dataset_id.clone());

    let (estimator, normalizers) = load_trained(cfg, cfg.estimator)?;
    let (ae, _, _) = load_pretrained(&cfg.out_dir)?;
    let ind = Individualizer::new(estimator, ae, normalizers, cfg.seed)?;
    let mags = ind.individualize([&left, &right], &grid, &profile, cfg.seed)?;

    let ds = HrtfDataset {
        dataset_id: format!("{}-individualized", grid_source.dataset_id),
        f_max_hz: grid.f_max_hz,
        source_distance_m: grid.source_distance_m,
        frequencies_hz: grid.frequencies_hz.clone(),
        positions: grid.positions.clone(),
        subjects: vec![SubjectRecord {
            subject_id: args.subject_id.clone(),
            magnitudes_db: mags.data().iter().map(|&v| v as f32).collect(),
            anthropometry_left: Some(left),
            anthropometry_right: Some(right),
        }],
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("{}.hds", args.subject_id));
    write_dataset(&ds, &path)?;
    println!("{}", path.display());
    if args.hrir {
        let n_fft = 4 * grid.frequencies_hz.len();
        let taps = hrirs(&mags, n_fft)?;
        let bytes: Vec<u8> = taps.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = cfg.out_dir.join(format!("{}.hrir.f32", args.subject_id));
        std::fs::write(&path, bytes)?;
        println!("{} ({} positions × 2 ears × {n_fft} taps at {} Hz)", path.display(), grid.positions.len(), 2.0 * grid.f_max_hz);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Synth(args) => synth(c, args),
        Command::PretrainAe => pretrain(&resolve_config(c, None)?),
        Command::TrainProtoDnn => train_estimator(&resolve_config(c, Some(EstimatorKind::ProtoDnn))?),
        Command::TrainProtoDm => train_estimator(&resolve_config(c, Some(EstimatorKind::ProtoDm))?),
        Command::TrainBaseline => train_baseline(&resolve_config(c, Some(EstimatorKind::HrtfDnn))?),
        Command::Evaluate(args) => run_evaluate(&resolve_config(c, None)?, args),
        Command::Individualize(args) => {
            let cfg = resolve_config(c, None)?;
            if cfg.estimator == EstimatorKind::HrtfDnn {
                bail!("individualize needs a prototype estimator; the HRTF DNN is tied to its training grid");
            }
            individualize(&cfg, args)
        }
        Command::Cv => {
            let out = run_protocol(&resolve_config(c, None)?)?;
            println!(
                "best lr {:e} wd {:e}; test LSD {:.3} ± {:.3} dB",
                out.cv.best.learning_rate, out.cv.best.weight_decay, out.report.mean, out.report.std
            );
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
