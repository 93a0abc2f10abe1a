//! Shared network building blocks: linear layers, multi-head attention,
//! and pre-norm transformer encoder/decoder blocks.
//!
//! Residual output projections are zero-initialized, so a freshly built
//! block is exactly the identity map; training opens the branches
//! gradually. That identity is also what the ablation baselines and the
//! refiner consistency checks rely on.

use crate::error::Result;
use crate::rng::StreamRng;
use crate::state::ModelState;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Mish,
}

/// Registers a linear layer `name.weight` (in x out) and `name.bias` (out).
pub fn init_linear<T: Real>(
    state: &mut ModelState<T>,
    rng: &StreamRng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
) -> Result<()> {
    let weight = if zero {
        Tensor::zeros(&[fan_in, fan_out])
    } else {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut r = rng.stream(name);
        Tensor::rand_uniform(&[fan_in, fan_out], limit, &mut r)
    };
    state.insert(&format!("{name}.weight"), weight, true)?;
    state.insert(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), true)
}

/// x.W + b
pub fn linear<T: Real>(
    tape: &Tape<T>,
    state: &ModelState<T>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = tape.param(state, &format!("{name}.weight"))?;
    let b = tape.param(state, &format!("{name}.bias"))?;
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

/// Registers layer-norm affine parameters `name.gamma` / `name.beta`.
pub fn init_layer_norm<T: Real>(state: &mut ModelState<T>, name: &str, dim: usize) -> Result<()> {
    let mut gamma = Tensor::zeros(&[dim]);
    gamma.fill(T::ONE);
    state.insert(&format!("{name}.gamma"), gamma, true)?;
    state.insert(&format!("{name}.beta"), Tensor::zeros(&[dim]), true)
}

pub fn layer_norm<T: Real>(
    tape: &Tape<T>,
    state: &ModelState<T>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let normed = tape.layer_norm_rows(x, LAYER_NORM_EPS);
    let gamma = tape.param(state, &format!("{name}.gamma"))?;
    let beta = tape.param(state, &format!("{name}.beta"))?;
    let scaled = tape.mul_row(normed, gamma)?;
    tape.add_row(scaled, beta)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub width: usize,
    pub heads: usize,
}

/// Registers q/k/v/out projections under `prefix`. The output projection
/// is zero-initialized (see module docs).
pub fn init_attention<T: Real>(
    state: &mut ModelState<T>,
    rng: &StreamRng,
    prefix: &str,
    cfg: AttentionConfig,
) -> Result<()> {
    init_linear(state, rng, &format!("{prefix}.wq"), cfg.width, cfg.width, false)?;
    init_linear(state, rng, &format!("{prefix}.wk"), cfg.width, cfg.width, false)?;
    init_linear(state, rng, &format!("{prefix}.wv"), cfg.width, cfg.width, false)?;
    init_linear(state, rng, &format!("{prefix}.wo"), cfg.width, cfg.width, true)
}

/// Multi-head scaled dot-product attention. `queries` come from the first
/// input, keys/values from `context` (self-attention passes the same node
/// twice). `extra_mask` is added to the score matrix before softmax.
pub fn attention<T: Real>(
    tape: &Tape<T>,
    state: &ModelState<T>,
    prefix: &str,
    cfg: AttentionConfig,
    queries: NodeId,
    context: NodeId,
    extra_mask: Option<&Tensor<T>>,
) -> Result<NodeId> {
    let q = linear(tape, state, &format!("{prefix}.wq"), queries)?;
    let k = linear(tape, state, &format!("{prefix}.wk"), context)?;
    let v = linear(tape, state, &format!("{prefix}.wv"), context)?;
    let head_dim = cfg.width / cfg.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mask_node = extra_mask.map(|m| tape.input(m.clone()));

    let mut head_outputs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale_const(scores, scale);
        if let Some(m) = mask_node {
            scores = tape.add(scores, m)?;
        }
        let probs = tape.softmax_rows(scores);
        head_outputs.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    linear(tape, state, &format!("{prefix}.wo"), merged)
}

/// Strictly-upper-triangular -inf mask that blocks attention to future
/// positions. Only used by tests probing the no-causal-mask contract.
pub fn causal_mask<T: Real>(len: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in (i + 1)..len {
            m.set(i, j, T::from_f64(-1e9));
        }
    }
    m
}

/// Registers one pre-norm encoder block: self-attention + MLP.
pub fn init_encoder_block<T: Real>(
    state: &mut ModelState<T>,
    rng: &StreamRng,
    prefix: &str,
    width: usize,
    heads: usize,
    ffn_mult: usize,
) -> Result<()> {
    init_layer_norm(state, &format!("{prefix}.ln1"), width)?;
    init_attention(state, rng, &format!("{prefix}.attn"), AttentionConfig { width, heads })?;
    init_layer_norm(state, &format!("{prefix}.ln2"), width)?;
    init_linear(state, rng, &format!("{prefix}.fc1"), width, width * ffn_mult, false)?;
    init_linear(state, rng, &format!("{prefix}.fc2"), width * ffn_mult, width, true)
}

#[allow(clippy::too_many_arguments)]
pub fn encoder_block<T: Real>(
    tape: &Tape<T>,
    state: &ModelState<T>,
    prefix: &str,
    width: usize,
    heads: usize,
    dropout: f64,
    mode: Mode,
    rng: &mut StreamRng,
    x: NodeId,
) -> Result<NodeId> {
    let cfg = AttentionConfig { width, heads };
    let rate = if mode == Mode::Train { dropout } else { 0.0 };

    let normed = layer_norm(tape, state, &format!("{prefix}.ln1"), x)?;
    let attn = attention(tape, state, &format!("{prefix}.attn"), cfg, normed, normed, None)?;
    let attn = tape.dropout(attn, rate, &mut rng.stream("attn"))?;
    let x = tape.add(x, attn)?;

    let normed = layer_norm(tape, state, &format!("{prefix}.ln2"), x)?;
    let h = linear(tape, state, &format!("{prefix}.fc1"), normed)?;
    let h = tape.gelu(h);
    let h = linear(tape, state, &format!("{prefix}.fc2"), h)?;
    let h = tape.dropout(h, rate, &mut rng.stream("ffn"))?;
    tape.add(x, h)
}

/// Registers one pre-norm decoder block: self-attention over the query
/// sequence, cross-attention to the encoder output, then an MLP.
pub fn init_decoder_block<T: Real>(
    state: &mut ModelState<T>,
    rng: &StreamRng,
    prefix: &str,
    width: usize,
    heads: usize,
    ffn_mult: usize,
) -> Result<()> {
    init_layer_norm(state, &format!("{prefix}.ln1"), width)?;
    init_attention(state, rng, &format!("{prefix}.self_attn"), AttentionConfig { width, heads })?;
    init_layer_norm(state, &format!("{prefix}.ln2"), width)?;
    init_attention(state, rng, &format!("{prefix}.cross_attn"), AttentionConfig { width, heads })?;
    init_layer_norm(state, &format!("{prefix}.ln3"), width)?;
    init_linear(state, rng, &format!("{prefix}.fc1"), width, width * ffn_mult, false)?;
    init_linear(state, rng, &format!("{prefix}.fc2"), width * ffn_mult, width, true)
}

#[allow(clippy::too_many_arguments)]
pub fn decoder_block<T: Real>(
    tape: &Tape<T>,
    state: &ModelState<T>,
    prefix: &str,
    width: usize,
    heads: usize,
    dropout: f64,
    mode: Mode,
    rng: &mut StreamRng,
    x: NodeId,
    encoder_out: NodeId,
    self_mask: Option<&Tensor<T>>,
) -> Result<NodeId> {
    let cfg = AttentionConfig { width, heads };
    let rate = if mode == Mode::Train { dropout } else { 0.0 };

    let normed = layer_norm(tape, state, &format!("{prefix}.ln1"), x)?;
    let sa = attention(tape, state, &format!("{prefix}.self_attn"), cfg, normed, normed, self_mask)?;
    let sa = tape.dropout(sa, rate, &mut rng.stream("self"))?;
    let x = tape.add(x, sa)?;

    let normed = layer_norm(tape, state, &format!("{prefix}.ln2"), x)?;
    let ca = attention(tape, state, &format!("{prefix}.cross_attn"), cfg, normed, encoder_out, None)?;
    let ca = tape.dropout(ca, rate, &mut rng.stream("cross"))?;
    let x = tape.add(x, ca)?;

    let normed = layer_norm(tape, state, &format!("{prefix}.ln3"), x)?;
    let h = linear(tape, state, &format!("{prefix}.fc1"), normed)?;
    let h = tape.gelu(h);
    let h = linear(tape, state, &format!("{prefix}.fc2"), h)?;
    let h = tape.dropout(h, rate, &mut rng.stream("ffn"))?;
    tape.add(x, h)
}

/// Randomizes the residual output projections of every block under
/// `prefix`; used by tests that need a non-identity transformer.
pub fn randomize_residual_projections<T: Real>(
    state: &mut ModelState<T>,
    rng: &StreamRng,
    prefix: &str,
    std: f64,
) {
    let names: Vec<String> = state
        .names()
        .filter(|n| {
            n.starts_with(prefix)
                && (n.ends_with(".wo.weight") || n.ends_with(".fc2.weight"))
        })
        .cloned()
        .collect();
    for name in names {
        let mut r = rng.stream(&name);
        let shape = state.get(&name).unwrap().value.shape().to_vec();
        state.get_mut(&name).unwrap().value = Tensor::randn(&shape, std, &mut r);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build_block(width: usize, heads: usize) -> (ModelState<f64>, StreamRng) {
        let mut state = ModelState::new();
        let rng = StreamRng::new(11).stream("init");
        init_encoder_block(&mut state, &rng, "blk", width, heads, 2).unwrap();
        (state, rng)
    }

    #[test]
    fn zero_init_encoder_block_is_identity() {
        let (state, rng) = build_block(8, 2);
        let tape = Tape::new();
        let mut r = rng.stream("fwd");
        let mut xr = StreamRng::new(5).stream("x");
        let x_val = Tensor::<f64>::randn(&[3, 8], 1.0, &mut xr);
        let x = tape.input(x_val.clone());
        let y = encoder_block(&tape, &state, "blk", 8, 2, 0.0, Mode::Eval, &mut r, x).unwrap();
        assert_eq!(tape.value(y).max_abs_diff(&x_val), 0.0);
    }

    #[test]
    fn zero_init_decoder_block_is_identity() {
        let mut state = ModelState::new();
        let rng = StreamRng::new(12).stream("init");
        init_decoder_block(&mut state, &rng, "dec", 8, 2, 2).unwrap();
        let tape = Tape::new();
        let mut r = rng.stream("fwd");
        let mut xr = StreamRng::new(6).stream("x");
        let x_val = Tensor::<f64>::randn(&[4, 8], 1.0, &mut xr);
        let ctx = tape.input(Tensor::<f64>::randn(&[5, 8], 1.0, &mut xr));
        let x = tape.input(x_val.clone());
        let y = decoder_block(
            &tape, &state, "dec", 8, 2, 0.0, Mode::Eval, &mut r, x, ctx, None,
        )
        .unwrap();
        assert_eq!(tape.value(y).max_abs_diff(&x_val), 0.0);
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let m = causal_mask::<f64>(3);
        assert_eq!(m.at(0, 0), 0.0);
        assert!(m.at(0, 2) < -1e8);
        assert_eq!(m.at(2, 0), 0.0);
    }

    #[test]
    fn attention_output_depends_on_all_positions_once_randomized() {
        let (mut state, rng) = build_block(8, 2);
        randomize_residual_projections(&mut state, &rng, "blk", 0.3);
        let mut xr = StreamRng::new(7).stream("x");
        let x_val = Tensor::<f64>::randn(&[3, 8], 1.0, &mut xr);
        let mut perturbed = x_val.clone();
        perturbed.row_mut(2)[0] += 0.5;

        let run = |input: &Tensor<f64>| {
            let tape = Tape::new();
            let mut r = rng.stream("fwd");
            let x = tape.input(input.clone());
            let y =
                encoder_block(&tape, &state, "blk", 8, 2, 0.0, Mode::Eval, &mut r, x).unwrap();
            tape.value_cloned(y)
        };
        let base = run(&x_val);
        let moved = run(&perturbed);
        // Perturbing frame 2 must change frame 0's output (non-locality).
        let row0_delta: f64 = base
            .row(0)
            .iter()
            .zip(moved.row(0))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(row0_delta > 1e-9, "delta {row0_delta}");
    }
}
