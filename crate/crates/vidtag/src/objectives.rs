//! Phase I contrastive loss and Phase II weighted Hinge loss.
//!
//! Both losses L2-normalize the ground-truth embedding rows first, so the
//! identity similarity matrix is attainable. The contrastive loss carries
//! a learnable temperature (`objectives.logit_scale`), initialized from
//! the model config and clamped to at most 100 after each optimizer step.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::state::ModelState;
use crate::tape::{NodeId, Tape};
use crate::tensor::{identity, Real, Tensor};

pub const LOGIT_SCALE_NAME: &str = "objectives.logit_scale";
pub const LOGIT_SCALE_MAX: f64 = 100.0;

/// Weights of the negative (off-diagonal) and positive (diagonal) terms.
#[derive(Debug, Clone, Copy)]
pub struct HingeWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for HingeWeights {
    fn default() -> Self {
        HingeWeights {
            alpha: 10.0,
            beta: 1.0,
        }
    }
}

pub fn init<T: Real>(state: &mut ModelState<T>, cfg: &ModelConfig) -> Result<()> {
    state.insert(
        LOGIT_SCALE_NAME,
        Tensor::scalar(T::from_f64(cfg.logit_scale_init)),
        true,
    )
}

/// Clamps the learnable temperature into (0, LOGIT_SCALE_MAX]. Called
/// after each optimizer step.
pub fn clamp_logit_scale<T: Real>(state: &mut ModelState<T>) -> Result<()> {
    let p = state.get_mut(LOGIT_SCALE_NAME)?;
    let v = p.value.data()[0].to_f64();
    let clamped = v.clamp(1e-3, LOGIT_SCALE_MAX);
    if clamped != v {
        p.value = Tensor::scalar(T::from_f64(clamped));
    }
    Ok(())
}

/// Row-wise softmax cross-entropy of scale * V Ghat^T against the identity
/// target, averaged over rows. `symmetric` adds the column-direction term
/// and halves the sum.
pub fn contrastive_loss<T: Real>(
    tape: &Tape<T>,
    state: &ModelState<T>,
    v: NodeId,
    g: NodeId,
    symmetric: bool,
) -> Result<NodeId> {
    let n = tape.value(v).rows();
    if n < 2 {
        return Err(Error::invalid(
            "contrastive loss needs at least 2 rows (negatives)",
        ));
    }
    if tape.value(g).rows() != n {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            left: tape.value(v).shape().to_vec(),
            right: tape.value(g).shape().to_vec(),
        });
    }
    let g_hat = tape.normalize_rows(g);
    let scale = tape.param(state, LOGIT_SCALE_NAME)?;
    let logits_raw = tape.matmul(v, tape.transpose(g_hat))?;
    let logits = tape.scale_by_scalar(logits_raw, scale)?;
    let diag_mask = tape.input(identity::<T>(n));

    let row_ce = {
        let logp = tape.log_softmax_rows(logits);
        let picked = tape.mul(logp, diag_mask)?;
        let total = tape.sum_all(picked);
        tape.scale_const(total, -1.0 / n as f64)
    };
    if !symmetric {
        return Ok(row_ce);
    }
    let col_ce = {
        let logits_t = tape.transpose(logits);
        let logp = tape.log_softmax_rows(logits_t);
        let picked = tape.mul(logp, diag_mask)?;
        let total = tape.sum_all(picked);
        tape.scale_const(total, -1.0 / n as f64)
    };
    let both = tape.add(row_ce, col_ce)?;
    Ok(tape.scale_const(both, 0.5))
}

/// Mean over the strict upper triangle, strict lower triangle, and diagonal
/// of M = (Ghat' Ghat^T - I)^2, combined as
/// alpha * (upper_mean + lower_mean) + beta * diag_mean.
/// For a 1 x 1 similarity matrix the off-diagonal means are defined as 0.
fn hinge_component<T: Real>(
    tape: &Tape<T>,
    refined: NodeId,
    target: NodeId,
    w: HingeWeights,
) -> Result<NodeId> {
    let n = tape.value(refined).rows();
    if tape.value(target).rows() != n {
        return Err(Error::ShapeMismatch {
            op: "weighted_hinge_loss",
            left: tape.value(refined).shape().to_vec(),
            right: tape.value(target).shape().to_vec(),
        });
    }
    let r_hat = tape.normalize_rows(refined);
    let t_hat = tape.normalize_rows(target);
    let sim = tape.matmul(r_hat, tape.transpose(t_hat))?;
    let eye = tape.input(identity::<T>(n));
    let diff = tape.sub(sim, eye)?;
    let m = tape.square(diff);

    let mut upper = Tensor::<T>::zeros(&[n, n]);
    let mut lower = Tensor::<T>::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if j > i {
                upper.set(i, j, T::ONE);
            } else if j < i {
                lower.set(i, j, T::ONE);
            }
        }
    }
    let tri_count = (n * (n - 1)) / 2;

    let diag_mean = {
        let picked = tape.mul(m, tape.input(identity::<T>(n)))?;
        let s = tape.sum_all(picked);
        tape.scale_const(s, 1.0 / n as f64)
    };
    let mut loss = tape.scale_const(diag_mean, w.beta);
    if tri_count > 0 {
        let upper_mean = {
            let picked = tape.mul(m, tape.input(upper))?;
            let s = tape.sum_all(picked);
            tape.scale_const(s, 1.0 / tri_count as f64)
        };
        let lower_mean = {
            let picked = tape.mul(m, tape.input(lower))?;
            let s = tape.sum_all(picked);
            tape.scale_const(s, 1.0 / tri_count as f64)
        };
        let tri = tape.add(upper_mean, lower_mean)?;
        let tri = tape.scale_const(tri, w.alpha);
        loss = tape.add(loss, tri)?;
    }
    Ok(loss)
}

/// Frame-level plus video-level hinge alignment terms.
pub fn weighted_hinge_loss<T: Real>(
    tape: &Tape<T>,
    refined: NodeId,
    target: NodeId,
    refined_seq: NodeId,
    target_seq: NodeId,
    w: HingeWeights,
) -> Result<NodeId> {
    if tape.value(refined).rows() < 2 {
        return Err(Error::invalid("hinge loss needs at least 2 frame rows"));
    }
    let frame_term = hinge_component(tape, refined, target, w)?;
    let video_term = hinge_component(tape, refined_seq, target_seq, w)?;
    tape.add(frame_term, video_term)
}

/// Normalized per-sequence mean of frame rows. `group_lens` gives the
/// number of consecutive rows belonging to each sequence.
pub fn video_level_pool<T: Real>(
    tape: &Tape<T>,
    frames: NodeId,
    group_lens: &[usize],
) -> Result<NodeId> {
    let total: usize = group_lens.iter().sum();
    let rows = tape.value(frames).rows();
    if total != rows {
        return Err(Error::ShapeMismatch {
            op: "video_level_pool",
            left: vec![rows],
            right: vec![total],
        });
    }
    if group_lens.iter().any(|&l| l == 0) {
        return Err(Error::invalid("video_level_pool: empty sequence group"));
    }
    let mut pool = Tensor::<T>::zeros(&[group_lens.len(), rows]);
    let mut off = 0;
    for (s, &len) in group_lens.iter().enumerate() {
        let w = T::from_f64(1.0 / len as f64);
        for j in off..off + len {
            pool.set(s, j, w);
        }
        off += len;
    }
    let pooled = tape.matmul(tape.input(pool), frames)?;
    Ok(tape.normalize_rows(pooled))
}
