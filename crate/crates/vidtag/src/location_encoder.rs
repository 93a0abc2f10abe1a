//! Maps GPS coordinates to shared-space embeddings via hierarchical
//! Random Fourier Features and per-frequency MLP heads.
//!
//! Each head owns a frozen mixing matrix B (rff_width x 2, entries
//! N(0, sigma^2)) and a two-layer GELU MLP; head outputs are summed
//! elementwise into the final embedding.

use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geodesy::{standardized_coords, GpsPoint};
use crate::nn::{init_linear, linear};
use crate::rng::StreamRng;
use crate::state::ModelState;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

pub const PARAM_PREFIX: &str = "locenc";

fn head_prefix(head: usize) -> String {
    format!("{PARAM_PREFIX}.head{head}")
}

fn mixing_name(head: usize) -> String {
    format!("{}.rff_b", head_prefix(head))
}

/// Registers the three frozen mixing matrices and the trainable head MLPs.
pub fn init<T: Real>(state: &mut ModelState<T>, cfg: &ModelConfig, rng: &StreamRng) -> Result<()> {
    for (h, &sigma) in cfg.sigmas.iter().enumerate() {
        let mut r = rng.stream(&mixing_name(h));
        let b = Tensor::randn(&[cfg.rff_width, 2], sigma, &mut r);
        state.insert(&mixing_name(h), b, false)?;
        let feat = 2 * cfg.rff_width;
        init_linear(state, rng, &format!("{}.fc0", head_prefix(h)), feat, cfg.locenc_hidden, false)?;
        init_linear(
            state,
            rng,
            &format!("{}.fc1", head_prefix(h)),
            cfg.locenc_hidden,
            cfg.embed_dim,
            false,
        )?;
    }
    Ok(())
}

/// gamma(v) = [cos(2*pi*B*v) || sin(2*pi*B*v)] for one standardized
/// coordinate pair; `mixing` is the frozen rff_width x 2 matrix.
pub fn rff_features<T: Real>(coords: [f64; 2], mixing: &Tensor<T>) -> Vec<T> {
    let rows = mixing.rows();
    let mut out = vec![T::ZERO; 2 * rows];
    for r in 0..rows {
        let phase = std::f64::consts::TAU
            * (mixing.at(r, 0).to_f64() * coords[0] + mixing.at(r, 1).to_f64() * coords[1]);
        out[r] = T::from_f64(phase.cos());
        out[rows + r] = T::from_f64(phase.sin());
    }
    out
}

/// Builds the rff feature matrix (one row per point) for one head.
fn rff_matrix<T: Real>(points: &[GpsPoint], mixing: &Tensor<T>) -> Result<Tensor<T>> {
    let rows = mixing.rows();
    let mut data = Vec::with_capacity(points.len() * 2 * rows);
    for p in points {
        data.extend(rff_features(standardized_coords(*p), mixing));
    }
    Tensor::from_vec(&[points.len(), 2 * rows], data)
}

/// Encodes a batch of GPS points on the tape; returns an N x embed_dim
/// node (rows are not normalized here).
pub fn encode_batch<T: Real>(
    tape: &Tape<T>,
    state: &ModelState<T>,
    cfg: &ModelConfig,
    points: &[GpsPoint],
) -> Result<NodeId> {
    if points.is_empty() {
        return Err(Error::invalid("encode_batch: empty point list"));
    }
    let mut sum: Option<NodeId> = None;
    for h in 0..cfg.sigmas.len() {
        let mixing = &state.get(&mixing_name(h))?.value;
        let feats = tape.input(rff_matrix(points, mixing)?);
        let hidden = linear(tape, state, &format!("{}.fc0", head_prefix(h)), feats)?;
        let hidden = tape.gelu(hidden);
        let out = linear(tape, state, &format!("{}.fc1", head_prefix(h)), hidden)?;
        sum = Some(match sum {
            None => out,
            Some(acc) => tape.add(acc, out)?,
        });
    }
    Ok(sum.expect("at least one head"))
}

/// Encodes one point outside of any training graph.
pub fn encode_gps<T: Real>(
    state: &ModelState<T>,
    cfg: &ModelConfig,
    point: GpsPoint,
) -> Result<Vec<T>> {
    let tape = Tape::new();
    let node = encode_batch(&tape, state, cfg, &[point])?;
    Ok(tape.value_cloned(node).into_data())
}

/// Embeds a gallery of points in parallel chunks. Rows are L2-normalized
/// when `normalize` is set (the retrieval-facing layout).
pub fn embed_gallery<T: Real>(
    state: &ModelState<T>,
    cfg: &ModelConfig,
    points: &[GpsPoint],
    normalize: bool,
) -> Result<Tensor<T>> {
    if points.is_empty() {
        return Err(Error::invalid("embed_gallery: empty gallery"));
    }
    let chunk = 256;
    let chunks: Vec<Tensor<T>> = points
        .par_chunks(chunk)
        .map(|pts| -> Result<Tensor<T>> {
            let tape = Tape::new();
            let node = encode_batch(&tape, state, cfg, pts)?;
            Ok(tape.value_cloned(node))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(points.len() * cfg.embed_dim);
    for c in &chunks {
        data.extend_from_slice(c.data());
    }
    let mut out = Tensor::from_vec(&[points.len(), cfg.embed_dim], data)?;
    if normalize {
        out.normalize_rows_in_place(1e-12);
    }
    Ok(out)
}
