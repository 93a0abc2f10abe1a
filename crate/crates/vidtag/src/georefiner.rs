//! Encoder-decoder transformer that refines a GPS embedding sequence using
//! temporally aligned frame features, trained as a denoiser on corrupted
//! ground-truth coordinates.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::frame_pipeline::positional_embed;
use crate::geodesy::GpsPoint;
use crate::location_encoder;
use crate::nn::{
    causal_mask, decoder_block, encoder_block, init_decoder_block, init_encoder_block, Mode,
};
use crate::objectives::{video_level_pool, weighted_hinge_loss, HingeWeights};
use crate::rng::StreamRng;
use crate::state::ModelState;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

pub const PARAM_PREFIX: &str = "georefiner";

/// Corruption model for denoising training: whole-sequence collapse,
/// per-coordinate jitter, and a shared per-sequence shift.
#[derive(Debug, Clone)]
pub struct NoiseConfig {
    pub collapse_prob: f64,
    pub jitter_min_deg: f64,
    pub jitter_max_deg: f64,
    pub shift_min_deg: f64,
    pub shift_max_deg: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            collapse_prob: 0.10,
            jitter_min_deg: 0.001,
            jitter_max_deg: 0.02,
            shift_min_deg: -0.2,
            shift_max_deg: 0.2,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.collapse_prob) {
            return Err(Error::invalid("collapse probability outside [0, 1]"));
        }
        if self.jitter_min_deg > self.jitter_max_deg || self.shift_min_deg > self.shift_max_deg {
            return Err(Error::invalid("noise ranges must be ordered"));
        }
        Ok(())
    }
}

/// Corrupts a ground-truth GPS sequence. With probability `collapse_prob`
/// every point is replaced by one randomly chosen member of the sequence;
/// otherwise each coordinate receives independent jitter with random sign
/// and magnitude U(jitter_min, jitter_max), then one per-sequence shift
/// (sampled per axis from U(shift_min, shift_max)) moves all points.
/// Outputs are clamped to the valid GPS domain.
pub fn corrupt_sequence(
    gt: &[GpsPoint],
    cfg: &NoiseConfig,
    rng: &mut StreamRng,
) -> Result<Vec<GpsPoint>> {
    if gt.is_empty() {
        return Err(Error::invalid("corrupt_sequence: empty sequence"));
    }
    cfg.validate()?;
    if rng.next_f64() < cfg.collapse_prob {
        let target = gt[rng.below(gt.len())];
        return Ok(vec![target; gt.len()]);
    }
    let shift_lat = rng.uniform(cfg.shift_min_deg, cfg.shift_max_deg);
    let shift_lon = rng.uniform(cfg.shift_min_deg, cfg.shift_max_deg);
    Ok(gt
        .iter()
        .map(|p| {
            let jitter_lat = rng.sign() * rng.uniform(cfg.jitter_min_deg, cfg.jitter_max_deg);
            let jitter_lon = rng.sign() * rng.uniform(cfg.jitter_min_deg, cfg.jitter_max_deg);
            GpsPoint::clamped(
                p.lat + jitter_lat + shift_lat,
                p.lon + jitter_lon + shift_lon,
            )
        })
        .collect())
}

/// Registers the 1-layer encoder and 2-layer decoder at embedding width.
pub fn init<T: Real>(state: &mut ModelState<T>, cfg: &ModelConfig, rng: &StreamRng) -> Result<()> {
    let width = cfg.embed_dim;
    for layer in 0..cfg.refiner_encoder_layers {
        init_encoder_block(
            state,
            rng,
            &format!("{PARAM_PREFIX}.enc{layer}"),
            width,
            cfg.refiner_heads,
            cfg.ffn_mult,
        )?;
    }
    for layer in 0..cfg.refiner_decoder_layers {
        init_decoder_block(
            state,
            rng,
            &format!("{PARAM_PREFIX}.dec{layer}"),
            width,
            cfg.refiner_heads,
            cfg.ffn_mult,
        )?;
    }
    Ok(())
}

/// Encoder over frame features; decoder self-attends over the GPS queries
/// (no causal mask) and cross-attends to the encoder output. Width is the
/// shared embedding width on both sides. `test_causal_mask` injects a
/// causal self-attention mask; it exists only so tests can demonstrate the
/// behavioral difference masking would cause.
pub fn forward<T: Real>(
    tape: &Tape<T>,
    state: &ModelState<T>,
    cfg: &ModelConfig,
    frame_feats: NodeId,
    gps_queries: NodeId,
    mode: Mode,
    rng: &StreamRng,
    test_causal_mask: bool,
) -> Result<NodeId> {
    let width = cfg.embed_dim;
    let t_frames = tape.value(frame_feats).rows();
    let t_queries = tape.value(gps_queries).rows();
    if t_frames != t_queries {
        return Err(Error::ShapeMismatch {
            op: "georefiner_forward",
            left: tape.value(frame_feats).shape().to_vec(),
            right: tape.value(gps_queries).shape().to_vec(),
        });
    }

    let mut enc = frame_feats;
    for layer in 0..cfg.refiner_encoder_layers {
        let mut layer_rng = rng.stream(&format!("georefiner.enc{layer}"));
        enc = encoder_block(
            tape,
            state,
            &format!("{PARAM_PREFIX}.enc{layer}"),
            width,
            cfg.refiner_heads,
            cfg.refiner_dropout,
            mode,
            &mut layer_rng,
            enc,
        )?;
    }

    // Queries are normalized so the positional rows (scaled like the
    // aligner's) keep a fixed relative magnitude. Positions break the
    // permutation symmetry of the decoder: without them, a collapsed
    // (all-identical) query sequence would map to all-identical outputs.
    let mut x = tape.normalize_rows(gps_queries);
    if cfg.refiner_query_positions {
        let mut pos = positional_embed::<T>(t_queries, width);
        let scale = T::from_f64(cfg.pos_scale / (width as f64 / 2.0).sqrt());
        pos.data_mut().iter_mut().for_each(|v| *v *= scale);
        x = tape.add(x, tape.input(pos))?;
    }
    let mask = test_causal_mask.then(|| causal_mask::<T>(t_queries));
    for layer in 0..cfg.refiner_decoder_layers {
        let mut layer_rng = rng.stream(&format!("georefiner.dec{layer}"));
        x = decoder_block(
            tape,
            state,
            &format!("{PARAM_PREFIX}.dec{layer}"),
            width,
            cfg.refiner_heads,
            cfg.refiner_dropout,
            mode,
            &mut layer_rng,
            x,
            enc,
            mask.as_ref(),
        )?;
    }
    Ok(x)
}

/// Inputs of one denoising training step.
pub struct Phase2Batch<'a, T: Real> {
    /// Projected (post-MLP) frame features, one tensor per sequence.
    pub frame_feats: Vec<Tensor<T>>,
    pub gt_gps: Vec<&'a [GpsPoint]>,
}

/// One denoising training step over a batch of sequences. For each
/// sequence: corrupt the ground truth, embed both the corrupted and clean
/// coordinates with the (frozen) location encoder, refine the corrupted
/// embeddings against the (frozen) aligned frame features, then score with
/// the weighted hinge loss at frame and video level.
#[allow(clippy::too_many_arguments)]
pub fn phase2_training_step<T: Real>(
    tape: &Tape<T>,
    state: &ModelState<T>,
    cfg: &ModelConfig,
    batch: &Phase2Batch<'_, T>,
    noise: &NoiseConfig,
    weights: HingeWeights,
    mode: Mode,
    rng: &StreamRng,
) -> Result<NodeId> {
    if batch.frame_feats.len() != batch.gt_gps.len() || batch.frame_feats.is_empty() {
        return Err(Error::invalid("phase 2 batch is empty or misaligned"));
    }
    let mut refined_parts = Vec::with_capacity(batch.gt_gps.len());
    let mut target_parts = Vec::with_capacity(batch.gt_gps.len());
    let mut group_lens = Vec::with_capacity(batch.gt_gps.len());
    for (i, (feats, gt)) in batch.frame_feats.iter().zip(&batch.gt_gps).enumerate() {
        let mut noise_rng = rng.stream("noise").substream(i as u64);
        let corrupted = corrupt_sequence(gt, noise, &mut noise_rng)?;
        let queries = location_encoder::encode_batch(tape, state, cfg, &corrupted)?;
        let targets = location_encoder::encode_batch(tape, state, cfg, gt)?;
        let feats_node = tape.input(feats.clone());
        let seq_rng = rng.stream("refiner").substream(i as u64);
        let refined = forward(tape, state, cfg, feats_node, queries, mode, &seq_rng, false)?;
        refined_parts.push(refined);
        target_parts.push(targets);
        group_lens.push(gt.len());
    }
    let refined = tape.concat_rows(&refined_parts)?;
    let targets = tape.concat_rows(&target_parts)?;
    let refined_seq = video_level_pool(tape, refined, &group_lens)?;
    let target_seq = video_level_pool(tape, targets, &group_lens)?;
    weighted_hinge_loss(tape, refined, targets, refined_seq, target_seq, weights)
}
