//! Synthetic dataset generator: correlated random-walk trajectories inside
//! a region, with frame features produced by fixed random affine maps of
//! multi-frequency coordinate features plus a per-sequence style vector.
//! Location is linearly decodable from the features by construction, so
//! retrieval on this data is learnable at desk scale.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::frame_pipeline::FrameFeatureRecord;
use crate::geodesy::{GpsPoint, EARTH_RADIUS_KM};
use crate::rng::StreamRng;

/// Degrees of latitude per kilometer on the mean sphere.
fn deg_per_km() -> f64 {
    360.0 / (std::f64::consts::TAU * EARTH_RADIUS_KM)
}

#[derive(Debug, Clone)]
pub struct SyntheticWorldConfig {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub sequences: usize,
    pub frames_per_sequence: usize,
    /// Nominal distance between consecutive frames.
    pub step_km: f64,
    /// Std of the Gaussian noise added to every feature channel.
    pub feature_noise: f64,
    /// Width of the per-sequence appearance vector.
    pub style_dim: usize,
    /// Heading persistence of the correlated walk (0 = fresh heading each
    /// step, 1 = straight line).
    pub heading_persistence: f64,
    /// Cycles per region span of the periodic coordinate features.
    pub frequencies: Vec<f64>,
    /// Probability that a frame is "occluded": its location features are
    /// erased and replaced by heavy noise, so only temporal context can
    /// place it.
    pub occlusion_prob: f64,
    /// Noise std applied to occluded frames.
    pub occlusion_noise: f64,
    /// Amplitude of the linear (non-periodic) coordinate terms. Small
    /// values leave the periodic terms dominant, so distant lookalike
    /// locations exist and per-frame predictions can jump to them.
    pub linear_amplitude: f64,
    /// Probability that a sequence contains one "phantom segment": a short
    /// contiguous run of frames whose features coherently describe a
    /// lookalike location half a region away. Retrieval on such frames
    /// jumps off the trajectory, which is the failure mode the denoiser
    /// exists to repair.
    pub phantom_prob: f64,
    /// Frame-count bounds of the phantom segment.
    pub phantom_run: (usize, usize),
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            lat_min: 40.0,
            lat_max: 40.25,
            lon_min: -74.25,
            lon_max: -74.0,
            sequences: 192,
            frames_per_sequence: 24,
            step_km: 0.2,
            feature_noise: 0.01,
            style_dim: 8,
            heading_persistence: 0.9,
            frequencies: vec![1.0, 2.0, 4.0, 8.0],
            occlusion_prob: 0.35,
            occlusion_noise: 0.5,
            linear_amplitude: 2.0,
            phantom_prob: 0.35,
            phantom_run: (8, 12),
        }
    }
}

impl SyntheticWorldConfig {
    fn validate(&self) -> Result<()> {
        if self.lat_min >= self.lat_max || self.lon_min >= self.lon_max {
            return Err(Error::invalid("synthetic region is degenerate"));
        }
        if self.sequences == 0 || self.frames_per_sequence < 2 {
            return Err(Error::invalid(
                "need at least 1 sequence of at least 2 frames",
            ));
        }
        if self.step_km <= 0.0 {
            return Err(Error::invalid("step size must be positive"));
        }
        Ok(())
    }

    /// Dimension of the location-feature block (linear + periodic terms).
    fn psi_dim(&self) -> usize {
        2 + 4 * self.frequencies.len()
    }

    /// Normalized in-region coordinates in [0, 1].
    fn normalized(&self, p: GpsPoint) -> (f64, f64) {
        (
            (p.lat - self.lat_min) / (self.lat_max - self.lat_min),
            (p.lon - self.lon_min) / (self.lon_max - self.lon_min),
        )
    }

    /// Location features: normalized coordinates plus sin/cos at each
    /// configured frequency, per axis. Amplitudes decay as 1/sqrt(k) and
    /// the linear terms are emphasized, giving a natural spectrum: global
    /// position dominates, fine detail refines it without aliasing.
    fn psi_uv(&self, u: f64, v: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.psi_dim());
        out.push(self.linear_amplitude * u);
        out.push(self.linear_amplitude * v);
        for &k in &self.frequencies {
            let amp = 1.0 / k.sqrt();
            let wu = std::f64::consts::TAU * k * u;
            let wv = std::f64::consts::TAU * k * v;
            out.push(amp * wu.sin());
            out.push(amp * wu.cos());
            out.push(amp * wv.sin());
            out.push(amp * wv.cos());
        }
        out
    }

    fn psi(&self, p: GpsPoint) -> Vec<f64> {
        let (u, v) = self.normalized(p);
        self.psi_uv(u, v)
    }
}

/// The two fixed random affine maps shared by every frame of a dataset.
struct FeatureMaps {
    clip: AffineMap,
    dino: AffineMap,
}

struct AffineMap {
    // out_dim x in_dim, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    out_dim: usize,
    in_dim: usize,
}

impl AffineMap {
    fn sample(out_dim: usize, in_dim: usize, rng: &mut StreamRng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        AffineMap {
            weights: (0..out_dim * in_dim)
                .map(|_| rng.normal() * scale)
                .collect(),
            bias: (0..out_dim).map(|_| rng.normal() * 0.1).collect(),
            out_dim,
            in_dim,
        }
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }
}

fn feature_maps(cfg: &SyntheticWorldConfig, model: &ModelConfig, rng: &StreamRng) -> FeatureMaps {
    let in_dim = cfg.psi_dim() + cfg.style_dim;
    FeatureMaps {
        clip: AffineMap::sample(model.d_clip, in_dim, &mut rng.stream("map.clip")),
        dino: AffineMap::sample(model.d_dino, in_dim, &mut rng.stream("map.dino")),
    }
}

/// Features of one frame given its location, sequence style, and a noise
/// stream. Zero noise makes this a pure function of (gps, style). An
/// occluded frame keeps its style but loses all location content.
fn frame_features(
    cfg: &SyntheticWorldConfig,
    maps: &FeatureMaps,
    gps: GpsPoint,
    style: &[f64],
    occluded: bool,
    phantom_shift: Option<(f64, f64)>,
    noise_rng: &mut StreamRng,
) -> (Vec<f32>, Vec<f32>) {
    let mut base = if occluded {
        vec![0.0; cfg.psi_dim()]
    } else if let Some((du, dv)) = phantom_shift {
        let (u, v) = cfg.normalized(gps);
        cfg.psi_uv((u + du).fract(), (v + dv).fract())
    } else {
        cfg.psi(gps)
    };
    base.extend_from_slice(style);
    let mut f_clip = maps.clip.apply(&base);
    let mut f_dino = maps.dino.apply(&base);
    let noise = if occluded {
        cfg.occlusion_noise
    } else {
        cfg.feature_noise
    };
    if noise > 0.0 {
        for v in f_clip.iter_mut().chain(f_dino.iter_mut()) {
            *v += noise_rng.normal() * noise;
        }
    }
    (
        f_clip.into_iter().map(|v| v as f32).collect(),
        f_dino.into_iter().map(|v| v as f32).collect(),
    )
}

/// Correlated random walk that cannot leave the region: the start point
/// keeps a margin of frames * step from every edge, which bounds the
/// walk's maximal excursion.
fn walk(cfg: &SyntheticWorldConfig, rng: &mut StreamRng) -> Result<Vec<GpsPoint>> {
    let reach_km = cfg.frames_per_sequence as f64 * cfg.step_km * 1.2;
    let margin_lat = reach_km * deg_per_km();
    let mid_lat = (cfg.lat_min + cfg.lat_max) / 2.0;
    let margin_lon = margin_lat / mid_lat.to_radians().cos().max(0.05);
    if cfg.lat_min + margin_lat >= cfg.lat_max - margin_lat
        || cfg.lon_min + margin_lon >= cfg.lon_max - margin_lon
    {
        return Err(Error::invalid(format!(
            "region too small for {} steps of {} km",
            cfg.frames_per_sequence, cfg.step_km
        )));
    }
    let mut lat = rng.uniform(cfg.lat_min + margin_lat, cfg.lat_max - margin_lat);
    let mut lon = rng.uniform(cfg.lon_min + margin_lon, cfg.lon_max - margin_lon);
    let mut heading = rng.uniform(0.0, std::f64::consts::TAU);
    let mut points = Vec::with_capacity(cfg.frames_per_sequence);
    points.push(GpsPoint::clamped(lat, lon));
    for _ in 1..cfg.frames_per_sequence {
        let len_km = cfg.step_km * rng.uniform(0.85, 1.15);
        lat += len_km * heading.cos() * deg_per_km();
        lon += len_km * heading.sin() * deg_per_km() / lat.to_radians().cos();
        points.push(GpsPoint::clamped(lat, lon));
        heading += (1.0 - cfg.heading_persistence)
            * rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
    }
    Ok(points)
}

/// Generates the full synthetic dataset deterministically from the seed.
pub fn generate(
    cfg: &SyntheticWorldConfig,
    model: &ModelConfig,
    seed: u64,
) -> Result<Vec<FrameFeatureRecord>> {
    cfg.validate()?;
    let root = StreamRng::new(seed).stream("synth");
    let maps = feature_maps(cfg, model, &root);
    let mut records = Vec::with_capacity(cfg.sequences * cfg.frames_per_sequence);
    for s in 0..cfg.sequences {
        let seq_rng = root.stream("seq").substream(s as u64);
        let gps = walk(cfg, &mut seq_rng.stream("walk"))?;
        let mut style_rng = seq_rng.stream("style");
        let style: Vec<f64> = (0..cfg.style_dim).map(|_| style_rng.normal()).collect();
        let mut noise_rng = seq_rng.stream("noise");
        let mut occlusion_rng = seq_rng.stream("occlusion");
        let mut phantom_rng = seq_rng.stream("phantom");
        let phantom: Option<(std::ops::Range<usize>, (f64, f64))> =
            if phantom_rng.next_f64() < cfg.phantom_prob && cfg.frames_per_sequence > 2 {
                let (lo, hi) = cfg.phantom_run;
                let len = (lo + phantom_rng.below(hi.saturating_sub(lo) + 1))
                    .min(cfg.frames_per_sequence - 1);
                let start = phantom_rng.below(cfg.frames_per_sequence - len);
                let shift = match phantom_rng.below(3) {
                    0 => (0.5, 0.0),
                    1 => (0.0, 0.5),
                    _ => (0.5, 0.5),
                };
                Some((start..start + len, shift))
            } else {
                None
            };
        let seq_id = format!("synth-{s:04}");
        for (f, point) in gps.iter().enumerate() {
            let occluded = occlusion_rng.next_f64() < cfg.occlusion_prob;
            let phantom_shift = phantom
                .as_ref()
                .filter(|(range, _)| range.contains(&f))
                .map(|(_, shift)| *shift);
            let (f_clip, f_dino) = frame_features(
                cfg,
                &maps,
                *point,
                &style,
                occluded,
                phantom_shift,
                &mut noise_rng,
            );
            records.push(FrameFeatureRecord {
                seq_id: seq_id.clone(),
                frame_idx: f as u32,
                gps: *point,
                f_clip,
                f_dino,
            });
        }
    }
    Ok(records)
}
