//! Two-phase training orchestration: contrastive frame/GPS alignment,
//! then frozen-backbone denoiser training, plus the component ablation
//! harness and held-out probes.

use std::io::Write;

use rayon::prelude::*;
use serde_json::json;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::frame_pipeline::{self, sequence_forward, FrameSequence};
use crate::gallery::{self, GalleryConfig, GalleryIndex};
use crate::geodesy::{haversine_km, GpsPoint};
use crate::georefiner::{self, NoiseConfig, Phase2Batch};
use crate::location_encoder;
use crate::metrics::median;
use crate::nn::Mode;
use crate::objectives::{self, contrastive_loss, HingeWeights};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::retrieval::{self, Prediction, Stage};
use crate::rng::StreamRng;
use crate::state::ModelState;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_sequences: usize,
    /// Frames sampled per training sequence (uniformly spaced).
    pub frames_per_sequence: usize,
    pub lr: f64,
    pub decay: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Fraction of sequences held out for the per-epoch probe.
    pub probe_fraction: f64,
    /// Grid spacing of the probe gallery built from training points.
    pub probe_resolution_km: f64,
    pub hinge: HingeWeights,
    pub noise: NoiseConfig,
    pub symmetric_contrastive: bool,
    /// Keeps the temporal aligner at its zero-init identity during phase I
    /// (the "identity aligner" configuration; equivalent to bypassing the
    /// module entirely).
    pub freeze_tempgeo: bool,
}

impl TrainConfig {
    /// Full-scale phase I defaults.
    pub fn phase1_full(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::One,
            epochs: 600,
            batch_sequences: 128,
            frames_per_sequence: 16,
            lr: 5e-5,
            decay: 0.99,
            warmup_steps: 1000,
            seed,
            probe_fraction: 0.1,
            probe_resolution_km: 0.5,
            hinge: HingeWeights::default(),
            noise: NoiseConfig::default(),
            symmetric_contrastive: false,
            freeze_tempgeo: false,
        }
    }

    /// Full-scale phase II defaults.
    pub fn phase2_full(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Two,
            epochs: 100,
            lr: 1e-4,
            decay: 0.95,
            ..Self::phase1_full(seed)
        }
    }

    /// Desk-scale phase I: small batches, short warmup, a learning rate
    /// sized for the toy widths.
    pub fn phase1_toy(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::One,
            epochs: 100,
            batch_sequences: 16,
            frames_per_sequence: 16,
            lr: 2e-3,
            decay: 0.99,
            warmup_steps: 20,
            seed,
            probe_fraction: 0.1,
            probe_resolution_km: 0.5,
            hinge: HingeWeights::default(),
            noise: NoiseConfig::default(),
            symmetric_contrastive: false,
            freeze_tempgeo: false,
        }
    }

    /// Desk-scale phase II. The hinge weighting leans toward the positive
    /// (alignment) term: at regional scale the ground-truth similarity
    /// matrix has genuinely large off-diagonals, so the full-scale
    /// negative-pair weight over-penalizes correct solutions.
    pub fn phase2_toy(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Two,
            epochs: 60,
            lr: 3e-3,
            decay: 0.95,
            hinge: HingeWeights {
                alpha: 1.0,
                beta: 10.0,
            },
            ..Self::phase1_toy(seed)
        }
    }
}

/// Line-oriented JSON training log; records are retained in memory and
/// optionally streamed to a writer.
pub struct TrainLog {
    pub records: Vec<serde_json::Value>,
    writer: Option<Box<dyn Write + Send>>,
}

impl TrainLog {
    pub fn memory() -> Self {
        TrainLog {
            records: Vec::new(),
            writer: None,
        }
    }

    pub fn to_writer(writer: Box<dyn Write + Send>) -> Self {
        TrainLog {
            records: Vec::new(),
            writer: Some(writer),
        }
    }

    fn emit(&mut self, value: serde_json::Value) {
        if let Some(w) = self.writer.as_mut() {
            let _ = writeln!(w, "{value}");
        }
        self.records.push(value);
    }
}

/// Probe outcome on the held-out split.
#[derive(Debug, Clone)]
pub struct ProbeRecord {
    pub epoch: usize,
    pub top1_accuracy: f64,
    pub within_threshold: f64,
    pub median_km: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: ModelState<f32>,
    pub epoch_losses: Vec<f64>,
    pub first_step_loss: f64,
    pub probes: Vec<ProbeRecord>,
    /// Indices of the held-out sequences within the input slice.
    pub probe_indices: Vec<usize>,
}

/// Deterministic train/probe split: shuffles indices by seed and holds out
/// `probe_fraction` (at least 1 sequence when possible).
pub fn split_indices(n: usize, probe_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    StreamRng::new(seed).stream("split").shuffle(&mut indices);
    let probe = if n >= 2 {
        ((n as f64 * probe_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let probe_indices = indices[..probe].to_vec();
    let train_indices = indices[probe..].to_vec();
    (train_indices, probe_indices)
}

/// Uniformly spaced sample of `want` frame positions (all frames when the
/// sequence is short).
pub fn sample_positions(len: usize, want: usize) -> Vec<usize> {
    if len <= want {
        return (0..len).collect();
    }
    (0..want).map(|j| j * len / want).collect()
}

fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelState<f32>> {
    cfg.validate()?;
    let rng = StreamRng::new(seed).stream("init");
    let mut state = ModelState::new();
    frame_pipeline::init(&mut state, cfg, &rng)?;
    location_encoder::init(&mut state, cfg, &rng)?;
    georefiner::init(&mut state, cfg, &rng)?;
    objectives::init(&mut state, cfg)?;
    cfg.store(&mut state)?;
    Ok(state)
}

fn apply_phase_mask(state: &mut ModelState<f32>, phase: Phase, freeze_tempgeo: bool) {
    match phase {
        Phase::One => state.set_trainable(|name| {
            !name.starts_with(georefiner::PARAM_PREFIX)
                && !name.ends_with(".rff_b")
                && name != "meta.config"
                && !(freeze_tempgeo && name.starts_with(frame_pipeline::TEMPGEO_PREFIX))
        }),
        Phase::Two => state.set_trainable(|name| name.starts_with(georefiner::PARAM_PREFIX)),
    }
}

/// Builds the probe gallery from training ground truth and embeds it with
/// the current weights.
fn probe_gallery(
    train_points: &[GpsPoint],
    resolution_km: f64,
    state: &ModelState<f32>,
    cfg: &ModelConfig,
) -> Result<GalleryIndex> {
    let mut gallery = gallery::build_uniform_gallery(
        train_points,
        &GalleryConfig {
            resolution_km,
            padding_deg: 0.02,
            ..GalleryConfig::default()
        },
    )?;
    gallery.embeddings = Some(location_encoder::embed_gallery(
        state,
        cfg,
        &gallery.points,
        true,
    )?);
    Ok(gallery)
}

/// Frame top-1 retrieval probe: exact-hit rate, hit rate within
/// 2 x resolution, and median error.
fn run_probe(
    sequences: &[&FrameSequence],
    state: &ModelState<f32>,
    cfg: &ModelConfig,
    gallery: &GalleryIndex,
    threshold_km: f64,
) -> Result<(f64, f64, f64)> {
    let embeddings = gallery
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::state("probe gallery not embedded"))?;
    let mut errors = Vec::new();
    let mut exact = 0usize;
    let mut hits = 0usize;
    let mut total = 0usize;
    let per_seq: Vec<(Vec<f64>, usize, usize)> = sequences
        .par_iter()
        .map(|seq| -> Result<(Vec<f64>, usize, usize)> {
            let rng = StreamRng::new(0);
            let tape = Tape::new();
            let (_, projected) = sequence_forward(&tape, state, cfg, &seq.fused, Mode::Eval, &rng)?;
            let emb = tape.value_cloned(projected);
            let hits_idx = retrieval::top1_batch(&emb, embeddings);
            let mut errs = Vec::with_capacity(seq.len());
            let mut exact = 0;
            let mut within = 0;
            for (f, &(idx, _)) in hits_idx.iter().enumerate() {
                let err = haversine_km(gallery.points[idx], seq.gps[f]);
                // Exact hit: nearest gallery point to the ground truth.
                let nearest = gallery
                    .points
                    .iter()
                    .map(|p| haversine_km(*p, seq.gps[f]))
                    .fold(f64::INFINITY, f64::min);
                if (err - nearest).abs() < 1e-9 {
                    exact += 1;
                }
                if err <= threshold_km {
                    within += 1;
                }
                errs.push(err);
            }
            Ok((errs, exact, within))
        })
        .collect::<Result<Vec<_>>>()?;
    for (errs, ex, within) in per_seq {
        total += errs.len();
        exact += ex;
        hits += within;
        errors.extend(errs);
    }
    Ok((
        exact as f64 / total as f64,
        hits as f64 / total as f64,
        median(&errors),
    ))
}

/// Phase I: contrastive alignment of projected frame embeddings with GPS
/// embeddings over all frames in the batch.
pub fn train_phase1(
    sequences: &[FrameSequence],
    cfg: &ModelConfig,
    train: &TrainConfig,
    log: &mut TrainLog,
) -> Result<TrainOutcome> {
    if train.phase != Phase::One {
        return Err(Error::invalid("train_phase1 requires a phase-1 config"));
    }
    let state = init_model(cfg, train.seed)?;
    train_phase1_from(sequences, cfg, train, state, log)
}

fn train_phase1_from(
    sequences: &[FrameSequence],
    cfg: &ModelConfig,
    train: &TrainConfig,
    mut state: ModelState<f32>,
    log: &mut TrainLog,
) -> Result<TrainOutcome> {
    if sequences.is_empty() {
        return Err(Error::invalid("no training sequences"));
    }
    apply_phase_mask(&mut state, Phase::One, train.freeze_tempgeo);
    let (train_idx, probe_idx) = split_indices(sequences.len(), train.probe_fraction, train.seed);
    let train_seqs: Vec<&FrameSequence> = train_idx.iter().map(|&i| &sequences[i]).collect();
    let probe_seqs: Vec<&FrameSequence> = probe_idx.iter().map(|&i| &sequences[i]).collect();
    let steps_per_epoch = train_seqs.len().div_ceil(train.batch_sequences).max(1);
    let mut opt = Optimizer::new(OptimizerConfig::new(
        train.lr,
        train.decay,
        steps_per_epoch,
        train.warmup_steps,
    ));
    let rng = StreamRng::new(train.seed);
    let train_points: Vec<GpsPoint> = train_seqs
        .iter()
        .flat_map(|s| s.gps.iter().copied())
        .collect();

    let mut epoch_losses = Vec::with_capacity(train.epochs);
    let mut probes = Vec::new();
    let mut first_step_loss = f64::NAN;
    let mut global_step = 0usize;

    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        rng.stream("shuffle").substream(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train.batch_sequences) {
            // A contrastive batch needs at least 2 frames total.
            if chunk.len() == 1 && train_seqs[chunk[0]].len() < 2 {
                continue;
            }
            let tape = Tape::new();
            let mut v_parts = Vec::with_capacity(chunk.len());
            let mut batch_points = Vec::new();
            for &si in chunk {
                let seq = train_seqs[si];
                let positions = sample_positions(seq.len(), train.frames_per_sequence);
                let sub = seq.select(&positions);
                let seq_rng = rng
                    .stream("dropout")
                    .substream(global_step as u64)
                    .stream(&seq.seq_id);
                let (_, projected) =
                    sequence_forward(&tape, &state, cfg, &sub.fused, Mode::Train, &seq_rng)?;
                v_parts.push(projected);
                batch_points.extend(sub.gps.iter().copied());
            }
            let v = tape.concat_rows(&v_parts)?;
            let g = location_encoder::encode_batch(&tape, &state, cfg, &batch_points)?;
            let loss = contrastive_loss(&tape, &state, v, g, train.symmetric_contrastive)?;
            let loss_value = tape.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence(format!(
                    "phase 1 loss {loss_value} at epoch {epoch} step {global_step}"
                )));
            }
            if global_step == 0 {
                first_step_loss = loss_value;
            }
            tape.backward(loss, &mut state)?;
            let lr = opt.step(&mut state)?;
            objectives::clamp_logit_scale(&mut state)?;
            global_step += 1;
            epoch_loss += loss_value;
            batches += 1;
            log.emit(json!({
                "phase": 1,
                "step": global_step,
                "epoch": epoch,
                "loss": loss_value,
                "lr": lr,
            }));
        }
        let epoch_loss = epoch_loss / batches.max(1) as f64;
        epoch_losses.push(epoch_loss);

        if !probe_seqs.is_empty() {
            let gallery = probe_gallery(&train_points, train.probe_resolution_km, &state, cfg)?;
            let (top1, within, med) = run_probe(
                &probe_seqs,
                &state,
                cfg,
                &gallery,
                2.0 * train.probe_resolution_km,
            )?;
            probes.push(ProbeRecord {
                epoch,
                top1_accuracy: top1,
                within_threshold: within,
                median_km: med,
            });
            log.emit(json!({
                "phase": 1,
                "epoch": epoch,
                "epoch_loss": epoch_loss,
                "probe_top1": top1,
                "probe_within_2res": within,
                "probe_median_km": med,
            }));
        }
    }

    Ok(TrainOutcome {
        state,
        epoch_losses,
        first_step_loss,
        probes,
        probe_indices: probe_idx,
    })
}

/// Precomputes the frozen projected frame features of the deterministic
/// training subsequences (evaluation mode, no dropout).
fn frozen_frame_features(
    sequences: &[&FrameSequence],
    state: &ModelState<f32>,
    cfg: &ModelConfig,
    frames_per_sequence: usize,
) -> Result<Vec<(Tensor<f32>, Vec<GpsPoint>)>> {
    sequences
        .par_iter()
        .map(|seq| -> Result<(Tensor<f32>, Vec<GpsPoint>)> {
            let positions = sample_positions(seq.len(), frames_per_sequence);
            let sub = seq.select(&positions);
            let tape = Tape::new();
            let (_, projected) =
                sequence_forward(&tape, state, cfg, &sub.fused, Mode::Eval, &StreamRng::new(0))?;
            Ok((tape.value_cloned(projected), sub.gps))
        })
        .collect()
}

/// Phase II: denoiser training on corrupted ground truth. Only refiner
/// parameters receive gradients; everything else is frozen.
pub fn train_phase2(
    sequences: &[FrameSequence],
    phase1_state: ModelState<f32>,
    train: &TrainConfig,
    log: &mut TrainLog,
) -> Result<TrainOutcome> {
    if train.phase != Phase::Two {
        return Err(Error::invalid("train_phase2 requires a phase-2 config"));
    }
    if sequences.is_empty() {
        return Err(Error::invalid("no training sequences"));
    }
    let cfg = ModelConfig::load_from(&phase1_state)
        .map_err(|_| Error::state("phase-1 checkpoint missing model config"))?;
    if !phase1_state.contains(&format!("{}.fc0.weight", "proj")) {
        return Err(Error::state("phase-1 checkpoint missing projection weights"));
    }
    let mut state = phase1_state;
    apply_phase_mask(&mut state, Phase::Two, false);

    let (train_idx, probe_idx) = split_indices(sequences.len(), train.probe_fraction, train.seed);
    let train_seqs: Vec<&FrameSequence> = train_idx.iter().map(|&i| &sequences[i]).collect();
    let steps_per_epoch = train_seqs.len().div_ceil(train.batch_sequences).max(1);
    let mut opt = Optimizer::new(OptimizerConfig::new(
        train.lr,
        train.decay,
        steps_per_epoch,
        train.warmup_steps,
    ));
    let rng = StreamRng::new(train.seed).stream("phase2");
    let features = frozen_frame_features(&train_seqs, &state, &cfg, train.frames_per_sequence)?;

    let mut epoch_losses = Vec::with_capacity(train.epochs);
    let mut first_step_loss = f64::NAN;
    let mut global_step = 0usize;

    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        rng.stream("shuffle").substream(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train.batch_sequences) {
            let tape = Tape::new();
            let batch = Phase2Batch {
                frame_feats: chunk.iter().map(|&i| features[i].0.clone()).collect(),
                gt_gps: chunk.iter().map(|&i| features[i].1.as_slice()).collect(),
            };
            let step_rng = rng.stream("step").substream(global_step as u64);
            let loss = georefiner::phase2_training_step(
                &tape,
                &state,
                &cfg,
                &batch,
                &train.noise,
                train.hinge,
                Mode::Train,
                &step_rng,
            )?;
            let loss_value = tape.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence(format!(
                    "phase 2 loss {loss_value} at epoch {epoch} step {global_step}"
                )));
            }
            if global_step == 0 {
                first_step_loss = loss_value;
            }
            tape.backward(loss, &mut state)?;
            debug_assert_eq!(state.grad_norm(frame_pipeline::TEMPGEO_PREFIX), 0.0);
            debug_assert_eq!(state.grad_norm(location_encoder::PARAM_PREFIX), 0.0);
            let lr = opt.step(&mut state)?;
            global_step += 1;
            epoch_loss += loss_value;
            batches += 1;
            log.emit(json!({
                "phase": 2,
                "step": global_step,
                "epoch": epoch,
                "loss": loss_value,
                "lr": lr,
            }));
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }

    Ok(TrainOutcome {
        state,
        epoch_losses,
        first_step_loss,
        probes: Vec::new(),
        probe_indices: probe_idx,
    })
}

/// Runs two-stage inference over whole sequences (no frame sampling).
pub fn infer_dataset(
    sequences: &[&FrameSequence],
    state: &ModelState<f32>,
    cfg: &ModelConfig,
    gallery: &GalleryIndex,
    stage: Stage,
) -> Result<Vec<Prediction>> {
    let per_seq: Vec<(Vec<Prediction>, Vec<Prediction>)> = sequences
        .par_iter()
        .map(|seq| retrieval::infer_sequence(seq, state, cfg, gallery))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seq
        .into_iter()
        .flat_map(|(initial, refined)| match stage {
            Stage::Initial => initial,
            Stage::Refined => refined,
        })
        .collect())
}

/// Paired denoising benchmark on held-out sequences: median error of
/// retrieving the corrupted-query embeddings directly vs. the refined
/// embeddings.
pub fn denoising_probe(
    sequences: &[&FrameSequence],
    state: &ModelState<f32>,
    cfg: &ModelConfig,
    gallery: &GalleryIndex,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let embeddings = gallery
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::state("gallery not embedded"))?;
    let mut corrupted_errors = Vec::new();
    let mut refined_errors = Vec::new();
    let mut collapse_undone = 0usize;
    let mut collapsed_total = 0usize;
    let root = StreamRng::new(seed).stream("denoise-probe");
    for (i, seq) in sequences.iter().enumerate() {
        let mut seq_rng = root.substream(i as u64);
        let corrupted = georefiner::corrupt_sequence(&seq.gps, noise, &mut seq_rng)?;
        let was_collapsed = corrupted.len() > 1 && corrupted.iter().all(|p| *p == corrupted[0]);

        // Route 1: retrieve the corrupted queries directly.
        let tape = Tape::new();
        let q = location_encoder::encode_batch(&tape, state, cfg, &corrupted)?;
        let qn = tape.normalize_rows(q);
        let corrupted_emb = tape.value_cloned(qn);
        for (f, &(idx, _)) in retrieval::top1_batch(&corrupted_emb, embeddings).iter().enumerate() {
            corrupted_errors.push(haversine_km(gallery.points[idx], seq.gps[f]));
        }

        // Route 2: refine against the frame features, then retrieve.
        let tape2 = Tape::new();
        let (_, projected) =
            sequence_forward(&tape2, state, cfg, &seq.fused, Mode::Eval, &StreamRng::new(0))?;
        let frame_emb = tape2.value_cloned(projected);
        let refined_emb = retrieval::refine_embeddings(state, cfg, &frame_emb, &corrupted)?;
        let hits = retrieval::top1_batch(&refined_emb, embeddings);
        let refined_points: Vec<GpsPoint> = hits.iter().map(|&(idx, _)| gallery.points[idx]).collect();
        for (f, p) in refined_points.iter().enumerate() {
            refined_errors.push(haversine_km(*p, seq.gps[f]));
        }
        if was_collapsed {
            collapsed_total += 1;
            let lat_range = refined_points.iter().map(|p| p.lat).fold(f64::NEG_INFINITY, f64::max)
                - refined_points.iter().map(|p| p.lat).fold(f64::INFINITY, f64::min);
            let lon_range = refined_points.iter().map(|p| p.lon).fold(f64::NEG_INFINITY, f64::max)
                - refined_points.iter().map(|p| p.lon).fold(f64::INFINITY, f64::min);
            if lat_range > 0.0 || lon_range > 0.0 {
                collapse_undone += 1;
            }
        }
    }
    let undone_fraction = if collapsed_total > 0 {
        collapse_undone as f64 / collapsed_total as f64
    } else {
        f64::NAN
    };
    Ok((median(&corrupted_errors), median(&refined_errors), undone_fraction))
}

/// One ablation table row.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub acc_1km: f64,
    pub acc_5km: f64,
    pub median_km: f64,
    pub dfd_mean: f64,
    pub mrd_mean: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Configuration | Acc@1km (%) | Acc@5km (%) | Median (km) | DFD (km) | MRD (deg) |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {:.1} | {:.1} | {:.3} | {:.3} | {:.4} |\n",
                r.label, r.acc_1km, r.acc_5km, r.median_km, r.dfd_mean, r.mrd_mean
            ));
        }
        out
    }
}

/// Component ablation: identity (bypassed) temporal aligner, the aligner
/// alone, and aligner plus refiner, all on identical data and seeds.
pub fn ablation_harness(
    sequences: &[FrameSequence],
    base_cfg: &ModelConfig,
    phase1: &TrainConfig,
    phase2: &TrainConfig,
    gallery_resolution_km: f64,
    log: &mut TrainLog,
) -> Result<(AblationTable, Vec<TrainOutcome>)> {
    let evaluate_outcome = |state: &ModelState<f32>,
                            cfg: &ModelConfig,
                            probe_idx: &[usize],
                            stage: Stage,
                            label: &str|
     -> Result<AblationRow> {
        let probe_seqs: Vec<&FrameSequence> = probe_idx.iter().map(|&i| &sequences[i]).collect();
        let train_points: Vec<GpsPoint> = sequences
            .iter()
            .enumerate()
            .filter(|(i, _)| !probe_idx.contains(i))
            .flat_map(|(_, s)| s.gps.iter().copied())
            .collect();
        let mut gallery = gallery::build_uniform_gallery(
            &train_points,
            &GalleryConfig {
                resolution_km: gallery_resolution_km,
                padding_deg: 0.02,
                ..GalleryConfig::default()
            },
        )?;
        gallery.embeddings = Some(location_encoder::embed_gallery(state, cfg, &gallery.points, true)?);
        let predictions = infer_dataset(&probe_seqs, state, cfg, &gallery, stage)?;
        let manifest: Vec<crate::frame_pipeline::ManifestRow> = probe_seqs
            .iter()
            .flat_map(|s| {
                s.frame_indices.iter().zip(&s.gps).map(|(idx, gps)| {
                    crate::frame_pipeline::ManifestRow {
                        seq_id: s.seq_id.clone(),
                        frame_idx: *idx,
                        gps: *gps,
                    }
                })
            })
            .collect();
        let report = crate::metrics::evaluate(&predictions, &manifest)?;
        Ok(AblationRow {
            label: label.to_string(),
            acc_1km: report.frame_acc_1km,
            acc_5km: report.frame_acc_5km,
            median_km: report.frame_median_km,
            dfd_mean: report.dfd_mean,
            mrd_mean: report.mrd_mean,
        })
    };

    // Row 1: temporal aligner bypassed.
    let mut no_aligner_cfg = base_cfg.clone();
    no_aligner_cfg.tempgeo_enabled = false;
    let out_a = train_phase1(sequences, &no_aligner_cfg, phase1, log)?;
    let row_a = evaluate_outcome(
        &out_a.state,
        &no_aligner_cfg,
        &out_a.probe_indices,
        Stage::Initial,
        "identity aligner",
    )?;

    // Row 2: aligner enabled, no refiner.
    let out_b = train_phase1(sequences, base_cfg, phase1, log)?;
    let row_b = evaluate_outcome(
        &out_b.state,
        base_cfg,
        &out_b.probe_indices,
        Stage::Initial,
        "aligner",
    )?;

    // Row 3: aligner + refiner (phase 2 on top of row 2).
    let out_c = train_phase2(sequences, out_b.state.clone(), phase2, log)?;
    let row_c = evaluate_outcome(
        &out_c.state,
        base_cfg,
        &out_c.probe_indices,
        Stage::Refined,
        "aligner + refiner",
    )?;

    Ok((
        AblationTable {
            rows: vec![row_a, row_b, row_c],
        },
        vec![out_a, out_b, out_c],
    ))
}
