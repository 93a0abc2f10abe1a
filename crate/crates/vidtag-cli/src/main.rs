//! Command-line pipeline: synthesize data, build galleries, train the two
//! phases, run two-stage inference, evaluate trajectories, and reproduce
//! the component ablation table.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use vidtag::config::ModelConfig;
use vidtag::error::Error;
use vidtag::frame_pipeline::{build_sequences, read_manifest, read_vtag, write_manifest, write_vtag};
use vidtag::gallery::{
    build_uniform_gallery, build_val_gallery, load_embedding_cache, read_gallery_csv,
    save_embedding_cache, write_gallery_csv, GalleryConfig,
};
use vidtag::geodesy::GpsPoint;
use vidtag::location_encoder;
use vidtag::metrics::evaluate;
use vidtag::retrieval::{
    read_predictions_csv, write_predictions_csv, write_trajectories_geojson, Stage,
};
use vidtag::state::ModelState;
use vidtag::synth::{generate, SyntheticWorldConfig};
use vidtag::training::{
    ablation_harness, infer_dataset, train_phase1, train_phase2, Phase, TrainConfig, TrainLog,
};

/// Exit codes: 0 success, 2 usage, 3 data/format, 4 numerical divergence.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => 2,
        Error::Divergence(_) => 4,
        _ => 3,
    }
}

#[derive(Parser)]
#[command(
    name = "vidtag",
    about = "Frame-to-GPS retrieval pipeline for video geolocalization",
    version
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "VIDTAG_WORKERS")]
    workers: Option<usize>,

    /// Force single-threaded, bit-reproducible execution.
    #[arg(long, global = true, env = "VIDTAG_DETERMINISTIC")]
    deterministic: bool,

    /// JSON config file; flags take precedence over file values.
    #[arg(long, global = true, env = "VIDTAG_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (embedding file + manifest).
    Synth(SynthArgs),
    /// Gallery construction.
    #[command(subcommand)]
    Gallery(GalleryCommand),
    /// Train a model phase.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Two-stage inference over an embedding file.
    Infer(InferArgs),
    /// Evaluate predictions against a ground-truth manifest.
    Eval(EvalArgs),
    /// Component ablation study on one dataset.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output embedding file (a CSV manifest is written alongside).
    #[arg(long, env = "VIDTAG_OUT")]
    out: PathBuf,
    #[arg(long, env = "VIDTAG_SEQUENCES")]
    sequences: Option<usize>,
    #[arg(long, env = "VIDTAG_FRAMES")]
    frames: Option<usize>,
    #[arg(long, env = "VIDTAG_SEED")]
    seed: Option<u64>,
    /// Model profile: toy | full.
    #[arg(long, env = "VIDTAG_PROFILE")]
    profile: Option<String>,
}

#[derive(Subcommand)]
enum GalleryCommand {
    /// Uniform grid gallery over the training-data extents.
    Build(GalleryBuildArgs),
    /// Gallery made of the (deduplicated) manifest points themselves.
    FromVal(GalleryFromValArgs),
}

#[derive(Args)]
struct GalleryBuildArgs {
    #[arg(long, env = "VIDTAG_MANIFEST")]
    manifest: PathBuf,
    #[arg(long, env = "VIDTAG_OUT")]
    out: PathBuf,
    #[arg(long = "resolution-km", env = "VIDTAG_RESOLUTION_KM")]
    resolution_km: Option<f64>,
    #[arg(long = "padding-deg", env = "VIDTAG_PADDING_DEG")]
    padding_deg: Option<f64>,
    #[arg(long = "merge-radius-km", env = "VIDTAG_MERGE_RADIUS_KM")]
    merge_radius_km: Option<f64>,
    #[arg(long = "outlier-fraction", env = "VIDTAG_OUTLIER_FRACTION")]
    outlier_fraction: Option<f64>,
}

#[derive(Args)]
struct GalleryFromValArgs {
    #[arg(long, env = "VIDTAG_MANIFEST")]
    manifest: PathBuf,
    #[arg(long, env = "VIDTAG_OUT")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Contrastive frame/GPS alignment.
    Phase1(TrainArgs),
    /// Denoiser training on top of a phase-1 checkpoint.
    Phase2(TrainArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "VIDTAG_DATA")]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long, env = "VIDTAG_OUT")]
    out: PathBuf,
    /// Phase-1 checkpoint to initialize from (phase 2 only).
    #[arg(long, env = "VIDTAG_INIT")]
    init: Option<PathBuf>,
    #[arg(long, env = "VIDTAG_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "VIDTAG_BATCH")]
    batch: Option<usize>,
    #[arg(long, env = "VIDTAG_LR")]
    lr: Option<f64>,
    #[arg(long, env = "VIDTAG_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "VIDTAG_PROFILE")]
    profile: Option<String>,
    /// Training log (JSON lines).
    #[arg(long, env = "VIDTAG_LOG")]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long, env = "VIDTAG_DATA")]
    data: PathBuf,
    #[arg(long, env = "VIDTAG_CKPT")]
    ckpt: PathBuf,
    #[arg(long, env = "VIDTAG_GALLERY")]
    gallery: PathBuf,
    #[arg(long, env = "VIDTAG_OUT")]
    out: PathBuf,
    /// Optional GeoJSON trajectory output.
    #[arg(long, env = "VIDTAG_TRAJECTORIES")]
    trajectories: Option<PathBuf>,
    /// Which stage's predictions to export: initial | refined.
    #[arg(long, env = "VIDTAG_STAGE")]
    stage: Option<String>,
    /// Cache gallery embeddings next to the gallery CSV.
    #[arg(long, env = "VIDTAG_EMBED_CACHE")]
    embed_cache: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "VIDTAG_PRED")]
    pred: PathBuf,
    #[arg(long, env = "VIDTAG_MANIFEST")]
    manifest: PathBuf,
    #[arg(long, env = "VIDTAG_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, env = "VIDTAG_DATA")]
    data: PathBuf,
    /// Output markdown table.
    #[arg(long, env = "VIDTAG_OUT")]
    out: PathBuf,
    #[arg(long, env = "VIDTAG_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "VIDTAG_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long = "resolution-km", env = "VIDTAG_RESOLUTION_KM")]
    resolution_km: Option<f64>,
    #[arg(long, env = "VIDTAG_PROFILE")]
    profile: Option<String>,
}

/// File-config mirror of the flags; every flag has an equivalent key.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    workers: Option<usize>,
    deterministic: Option<bool>,
    sequences: Option<usize>,
    frames: Option<usize>,
    seed: Option<u64>,
    profile: Option<String>,
    resolution_km: Option<f64>,
    padding_deg: Option<f64>,
    merge_radius_km: Option<f64>,
    outlier_fraction: Option<f64>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    stage: Option<String>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, Error> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: p.display().to_string(),
                offset: e.column() as u64,
                message: format!("bad config file: {e}"),
            })
        }
    }
}

fn profile_config(name: Option<&str>) -> Result<ModelConfig, Error> {
    ModelConfig::by_name(name.unwrap_or("toy"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let file_cfg = load_file_config(&cli.config)?;
    let workers = if cli.deterministic || file_cfg.deterministic == Some(true) {
        Some(1)
    } else {
        cli.workers.or(file_cfg.workers)
    };
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::state(format!("worker pool init failed: {e}")))?;
    }

    match cli.command {
        Command::Synth(args) => synth(args, &file_cfg),
        Command::Gallery(GalleryCommand::Build(args)) => gallery_build(args, &file_cfg),
        Command::Gallery(GalleryCommand::FromVal(args)) => gallery_from_val(args),
        Command::Train(TrainCommand::Phase1(args)) => train(args, &file_cfg, Phase::One),
        Command::Train(TrainCommand::Phase2(args)) => train(args, &file_cfg, Phase::Two),
        Command::Infer(args) => infer(args, &file_cfg),
        Command::Eval(args) => eval(args),
        Command::Ablate(args) => ablate(args, &file_cfg),
    }
}

fn manifest_path_for(data: &Path) -> PathBuf {
    data.with_extension("csv")
}

fn synth(args: SynthArgs, file_cfg: &FileConfig) -> Result<(), Error> {
    let profile = args.profile.as_deref().or(file_cfg.profile.as_deref());
    let model = profile_config(profile)?;
    let world = SyntheticWorldConfig {
        sequences: args
            .sequences
            .or(file_cfg.sequences)
            .unwrap_or(SyntheticWorldConfig::default().sequences),
        frames_per_sequence: args
            .frames
            .or(file_cfg.frames)
            .unwrap_or(SyntheticWorldConfig::default().frames_per_sequence),
        ..SyntheticWorldConfig::default()
    };
    let seed = args.seed.or(file_cfg.seed).unwrap_or(42);
    let records = generate(&world, &model, seed)?;
    write_vtag(&args.out, &model, &records)?;
    let manifest = manifest_path_for(&args.out);
    write_manifest(&manifest, &records)?;
    println!(
        "wrote {} frames ({} sequences) to {} and {}",
        records.len(),
        world.sequences,
        args.out.display(),
        manifest.display()
    );
    Ok(())
}

fn manifest_points(path: &Path) -> Result<Vec<GpsPoint>, Error> {
    Ok(read_manifest(path)?.into_iter().map(|r| r.gps).collect())
}

fn gallery_build(args: GalleryBuildArgs, file_cfg: &FileConfig) -> Result<(), Error> {
    let points = manifest_points(&args.manifest)?;
    let cfg = GalleryConfig {
        resolution_km: args
            .resolution_km
            .or(file_cfg.resolution_km)
            .unwrap_or(GalleryConfig::default().resolution_km),
        padding_deg: args
            .padding_deg
            .or(file_cfg.padding_deg)
            .unwrap_or(GalleryConfig::default().padding_deg),
        merge_radius_km: args
            .merge_radius_km
            .or(file_cfg.merge_radius_km)
            .unwrap_or(GalleryConfig::default().merge_radius_km),
        outlier_fraction: args
            .outlier_fraction
            .or(file_cfg.outlier_fraction)
            .unwrap_or(GalleryConfig::default().outlier_fraction),
    };
    let gallery = build_uniform_gallery(&points, &cfg)?;
    if gallery.len() == 1 {
        eprintln!(
            "warning: extent smaller than resolution; gallery degenerates to one center point"
        );
    }
    write_gallery_csv(&args.out, &gallery)?;
    println!(
        "wrote {} gallery points ({} regions, {} km resolution) to {}",
        gallery.len(),
        gallery.regions.len(),
        cfg.resolution_km,
        args.out.display()
    );
    Ok(())
}

fn gallery_from_val(args: GalleryFromValArgs) -> Result<(), Error> {
    let points = manifest_points(&args.manifest)?;
    let gallery = build_val_gallery(&points)?;
    write_gallery_csv(&args.out, &gallery)?;
    println!(
        "wrote {} deduplicated points to {}",
        gallery.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs, file_cfg: &FileConfig, phase: Phase) -> Result<(), Error> {
    let profile = args.profile.as_deref().or(file_cfg.profile.as_deref());
    let seed = args.seed.or(file_cfg.seed).unwrap_or(42);
    let mut train_cfg = match (phase, profile.unwrap_or("toy")) {
        (Phase::One, "full") => TrainConfig::phase1_full(seed),
        (Phase::Two, "full") => TrainConfig::phase2_full(seed),
        (Phase::One, _) => TrainConfig::phase1_toy(seed),
        (Phase::Two, _) => TrainConfig::phase2_toy(seed),
    };
    if let Some(e) = args.epochs.or(file_cfg.epochs) {
        train_cfg.epochs = e;
    }
    if let Some(b) = args.batch.or(file_cfg.batch) {
        train_cfg.batch_sequences = b;
    }
    if let Some(lr) = args.lr.or(file_cfg.lr) {
        train_cfg.lr = lr;
    }

    let model = profile_config(profile)?;
    let (d_clip, d_dino, records) = read_vtag(&args.data)?;
    if (d_clip as usize, d_dino as usize) != (model.d_clip, model.d_dino) {
        return Err(Error::invalid(format!(
            "data feature dims ({d_clip}, {d_dino}) do not match profile ({}, {})",
            model.d_clip, model.d_dino
        )));
    }
    let sequences = build_sequences(&model, &records)?;

    let mut log = match &args.log {
        Some(path) => {
            let file =
                File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            TrainLog::to_writer(Box::new(BufWriter::new(file)))
        }
        None => TrainLog::memory(),
    };

    let outcome = match phase {
        Phase::One => train_phase1(&sequences, &model, &train_cfg, &mut log)?,
        Phase::Two => {
            let init = args.init.as_ref().ok_or_else(|| {
                Error::invalid("phase 2 requires --init with a phase-1 checkpoint")
            })?;
            let state = ModelState::<f32>::load(init)?;
            train_phase2(&sequences, state, &train_cfg, &mut log)?
        }
    };
    outcome.state.save(&args.out)?;
    let last_loss = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs (final epoch loss {last_loss:.4}); checkpoint at {}",
        train_cfg.epochs,
        args.out.display()
    );
    if let Some(probe) = outcome.probes.last() {
        println!(
            "held-out probe: top1 {:.3}, within 2x resolution {:.3}, median {:.3} km",
            probe.top1_accuracy, probe.within_threshold, probe.median_km
        );
    }
    Ok(())
}

fn infer(args: InferArgs, file_cfg: &FileConfig) -> Result<(), Error> {
    let state = ModelState::<f32>::load(&args.ckpt)?;
    let model = ModelConfig::load_from(&state)?;
    let (_, _, records) = read_vtag(&args.data)?;
    let sequences = build_sequences(&model, &records)?;
    let mut gallery = read_gallery_csv(&args.gallery)?;

    let cache_path = args.gallery.with_extension("embcache");
    let mut cache_hit = false;
    if args.embed_cache {
        cache_hit = load_embedding_cache(&cache_path, &mut gallery)?;
    }
    if gallery.embeddings.is_none() {
        gallery.embeddings = Some(location_encoder::embed_gallery(
            &state,
            &model,
            &gallery.points,
            true,
        )?);
        if args.embed_cache && !cache_hit {
            save_embedding_cache(&cache_path, &gallery)?;
        }
    }

    let stage_name = args.stage.as_deref().or(file_cfg.stage.as_deref());
    let stage = match stage_name {
        Some(s) => Stage::parse(s)?,
        None => Stage::Refined,
    };
    let seq_refs: Vec<&vidtag::frame_pipeline::FrameSequence> = sequences.iter().collect();
    let predictions = infer_dataset(&seq_refs, &state, &model, &gallery, stage)?;
    write_predictions_csv(&args.out, &predictions)?;
    if let Some(traj) = &args.trajectories {
        write_trajectories_geojson(traj, &predictions)?;
    }
    println!(
        "wrote {} {} predictions to {}",
        predictions.len(),
        stage.as_str(),
        args.out.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Error> {
    let predictions = read_predictions_csv(&args.pred)?;
    let manifest = read_manifest(&args.manifest)?;
    let report = evaluate(&predictions, &manifest)?;
    std::fs::write(&args.out, report.to_json())
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    println!(
        "frame acc@1km {:.1}%, @5km {:.1}%, median {:.3} km; video median {:.3} km; DFD {:.3}, MRD {:.4}",
        report.frame_acc_1km,
        report.frame_acc_5km,
        report.frame_median_km,
        report.video_median_km,
        report.dfd_mean,
        report.mrd_mean
    );
    println!("report written to {}", args.out.display());
    Ok(())
}

fn ablate(args: AblateArgs, file_cfg: &FileConfig) -> Result<(), Error> {
    let profile = args.profile.as_deref().or(file_cfg.profile.as_deref());
    let model = profile_config(profile)?;
    let seed = args.seed.or(file_cfg.seed).unwrap_or(42);
    let (_, _, records) = read_vtag(&args.data)?;
    let sequences = build_sequences(&model, &records)?;
    let mut phase1 = TrainConfig::phase1_toy(seed);
    if let Some(e) = args.epochs.or(file_cfg.epochs) {
        phase1.epochs = e;
    }
    let phase2 = TrainConfig::phase2_toy(seed);
    let resolution = args
        .resolution_km
        .or(file_cfg.resolution_km)
        .unwrap_or(2.0);
    let mut log = TrainLog::memory();
    let (table, _) = ablation_harness(&sequences, &model, &phase1, &phase2, resolution, &mut log)?;
    std::fs::write(&args.out, table.to_markdown())
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    print!("{}", table.to_markdown());
    println!("table written to {}", args.out.display());
    Ok(())
}
