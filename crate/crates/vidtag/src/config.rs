//! Model architecture configuration.
//!
//! Everything that determines a tensor shape or a frozen hyperparameter
//! lives here, so a checkpoint can embed it and inference never guesses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::ModelState;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Language-aligned frame feature width.
    pub d_clip: usize,
    /// Self-supervised frame feature width.
    pub d_dino: usize,
    /// Attention heads in the temporal aligner.
    pub tempgeo_heads: usize,
    /// Temporal aligner encoder layers.
    pub tempgeo_layers: usize,
    pub tempgeo_dropout: f64,
    /// Feed-forward expansion inside transformer blocks.
    pub ffn_mult: usize,
    /// Enables the temporal aligner; when false its blocks are bypassed
    /// entirely (the "identity" ablation baseline).
    pub tempgeo_enabled: bool,
    /// Norm of the temporal position vector added to each (unit-norm)
    /// fused frame embedding. Sinusoidal rows are normalized before
    /// scaling so position information stays subordinate to content.
    pub pos_scale: f64,
    /// Hidden widths of the 3-layer projection MLP (input is fused width,
    /// output is `embed_dim`).
    pub proj_hidden: [usize; 2],
    /// Shared embedding width of frames and GPS points.
    pub embed_dim: usize,
    /// Rows of each frozen Fourier mixing matrix (features are 2x this).
    pub rff_width: usize,
    /// Frequency scales of the three Fourier heads.
    pub sigmas: [f64; 3],
    /// Hidden width of each location-encoder head MLP.
    pub locenc_hidden: usize,
    pub refiner_heads: usize,
    pub refiner_encoder_layers: usize,
    pub refiner_decoder_layers: usize,
    pub refiner_dropout: f64,
    /// Adds sinusoidal positions to refiner decoder queries (off by default;
    /// kept as an ablation knob).
    pub refiner_query_positions: bool,
    /// Initial value of the learnable similarity temperature.
    pub logit_scale_init: f64,
}

impl ModelConfig {
    /// Fused frame width (concatenated dual features).
    pub fn fused_dim(&self) -> usize {
        self.d_clip + self.d_dino
    }

    /// Full-scale profile matching production dual-backbone features.
    pub fn full() -> Self {
        ModelConfig {
            d_clip: 768,
            d_dino: 1024,
            tempgeo_heads: 8,
            tempgeo_layers: 2,
            tempgeo_dropout: 0.1,
            ffn_mult: 4,
            tempgeo_enabled: true,
            pos_scale: 0.3,
            proj_hidden: [1024, 768],
            embed_dim: 512,
            rff_width: 256,
            sigmas: [1.0, 8.0, 256.0],
            locenc_hidden: 1024,
            refiner_heads: 8,
            refiner_encoder_layers: 1,
            refiner_decoder_layers: 2,
            refiner_dropout: 0.1,
            refiner_query_positions: true,
            logit_scale_init: 1.0 / 0.07,
        }
    }

    /// Desk-scale profile used by the test suite and default CLI runs.
    /// Same topology, smaller widths; the temperature starts at 1 so early
    /// logits stay well conditioned at these dimensions.
    pub fn toy() -> Self {
        ModelConfig {
            d_clip: 48,
            d_dino: 80,
            tempgeo_heads: 8,
            tempgeo_layers: 2,
            tempgeo_dropout: 0.05,
            ffn_mult: 2,
            tempgeo_enabled: true,
            pos_scale: 0.3,
            proj_hidden: [112, 96],
            embed_dim: 64,
            rff_width: 32,
            sigmas: [32.0, 256.0, 2048.0],
            locenc_hidden: 128,
            refiner_heads: 4,
            refiner_encoder_layers: 1,
            refiner_decoder_layers: 2,
            refiner_dropout: 0.05,
            refiner_query_positions: true,
            logit_scale_init: 4.0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::invalid(format!(
                "unknown profile {other:?}, expected \"toy\" or \"full\""
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fused_dim() % self.tempgeo_heads != 0 {
            return Err(Error::invalid(format!(
                "fused width {} must divide by head count {}",
                self.fused_dim(),
                self.tempgeo_heads
            )));
        }
        if self.embed_dim % self.refiner_heads != 0 {
            return Err(Error::invalid(format!(
                "embedding width {} must divide by refiner head count {}",
                self.embed_dim, self.refiner_heads
            )));
        }
        if self.sigmas.iter().any(|s| *s <= 0.0) {
            return Err(Error::invalid("sigma values must be positive"));
        }
        Ok(())
    }

    const META_NAME: &'static str = "meta.config";

    /// Encodes the config as a pseudo-parameter so checkpoints are
    /// self-describing while staying plain named-tensor files.
    pub fn store<T: Real>(&self, state: &mut ModelState<T>) -> Result<()> {
        let fields = [
            1.0, // layout version
            self.d_clip as f64,
            self.d_dino as f64,
            self.tempgeo_heads as f64,
            self.tempgeo_layers as f64,
            self.tempgeo_dropout,
            self.ffn_mult as f64,
            if self.tempgeo_enabled { 1.0 } else { 0.0 },
            self.pos_scale,
            self.proj_hidden[0] as f64,
            self.proj_hidden[1] as f64,
            self.embed_dim as f64,
            self.rff_width as f64,
            self.sigmas[0],
            self.sigmas[1],
            self.sigmas[2],
            self.locenc_hidden as f64,
            self.refiner_heads as f64,
            self.refiner_encoder_layers as f64,
            self.refiner_decoder_layers as f64,
            self.refiner_dropout,
            if self.refiner_query_positions { 1.0 } else { 0.0 },
            self.logit_scale_init,
        ];
        let t = Tensor::from_vec(&[fields.len()], fields.iter().map(|&f| T::from_f64(f)).collect())?;
        if state.contains(Self::META_NAME) {
            state.get_mut(Self::META_NAME)?.value = t;
        } else {
            state.insert(Self::META_NAME, t, false)?;
        }
        Ok(())
    }

    pub fn load_from<T: Real>(state: &ModelState<T>) -> Result<Self> {
        let t = &state.get(Self::META_NAME)?.value;
        let f: Vec<f64> = t.data().iter().map(|x| x.to_f64()).collect();
        if f.len() != 23 || f[0] != 1.0 {
            return Err(Error::state(format!(
                "unsupported config layout in checkpoint (len {}, version {})",
                f.len(),
                f.first().copied().unwrap_or(0.0)
            )));
        }
        Ok(ModelConfig {
            d_clip: f[1] as usize,
            d_dino: f[2] as usize,
            tempgeo_heads: f[3] as usize,
            tempgeo_layers: f[4] as usize,
            tempgeo_dropout: f[5],
            ffn_mult: f[6] as usize,
            tempgeo_enabled: f[7] != 0.0,
            pos_scale: f[8],
            proj_hidden: [f[9] as usize, f[10] as usize],
            embed_dim: f[11] as usize,
            rff_width: f[12] as usize,
            sigmas: [f[13], f[14], f[15]],
            locenc_hidden: f[16] as usize,
            refiner_heads: f[17] as usize,
            refiner_encoder_layers: f[18] as usize,
            refiner_decoder_layers: f[19] as usize,
            refiner_dropout: f[20],
            refiner_query_positions: f[21] != 0.0,
            logit_scale_init: f[22],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_state() {
        // Float fields pass through the f32 checkpoint representation.
        let quantize = |mut c: ModelConfig| {
            c.tempgeo_dropout = c.tempgeo_dropout as f32 as f64;
            c.refiner_dropout = c.refiner_dropout as f32 as f64;
            c.logit_scale_init = c.logit_scale_init as f32 as f64;
            c.pos_scale = c.pos_scale as f32 as f64;
            c.sigmas = c.sigmas.map(|s| s as f32 as f64);
            c
        };
        for cfg in [ModelConfig::toy(), ModelConfig::full()] {
            let mut state = ModelState::<f32>::new();
            cfg.store(&mut state).unwrap();
            let loaded = ModelConfig::load_from(&state).unwrap();
            assert_eq!(quantize(cfg), loaded);
        }
    }

    #[test]
    fn unknown_profile_name_rejected() {
        assert!(ModelConfig::by_name("huge").is_err());
    }
}
