//! Frame-feature ingestion and the visual half of the model: fused
//! dual-backbone embeddings, temporal positions, the self-attention
//! aligner, and the projection MLP into the shared embedding space.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geodesy::GpsPoint;
use crate::nn::{encoder_block, init_encoder_block, init_linear, linear, Mode};
use crate::rng::StreamRng;
use crate::state::ModelState;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

pub const VTAG_MAGIC: &[u8; 4] = b"VTAG";
pub const VTAG_VERSION: u32 = 1;

pub const TEMPGEO_PREFIX: &str = "tempgeo";
pub const PROJECTION_PREFIX: &str = "proj";

/// One frame's precomputed dual-backbone features plus ground truth.
#[derive(Debug, Clone)]
pub struct FrameFeatureRecord {
    pub seq_id: String,
    pub frame_idx: u32,
    pub gps: GpsPoint,
    pub f_clip: Vec<f32>,
    pub f_dino: Vec<f32>,
}

/// All frames of one video, ordered by frame index, with the fused
/// unit-normalized embedding matrix precomputed at ingestion.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub seq_id: String,
    pub frame_indices: Vec<u32>,
    pub gps: Vec<GpsPoint>,
    /// T x fused_dim, rows unit L2 norm.
    pub fused: Tensor<f32>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.gps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gps.is_empty()
    }

    /// Sub-sequence at the given frame positions (training-time sampling).
    pub fn select(&self, positions: &[usize]) -> FrameSequence {
        let cols = self.fused.cols();
        let mut data = Vec::with_capacity(positions.len() * cols);
        for &p in positions {
            data.extend_from_slice(self.fused.row(p));
        }
        FrameSequence {
            seq_id: self.seq_id.clone(),
            frame_indices: positions.iter().map(|&p| self.frame_indices[p]).collect(),
            gps: positions.iter().map(|&p| self.gps[p]).collect(),
            fused: Tensor::from_vec(&[positions.len(), cols], data).expect("selection shape"),
        }
    }
}

/// Concatenates the two backbone vectors and L2-normalizes the result.
pub fn fuse(cfg: &ModelConfig, f_clip: &[f32], f_dino: &[f32]) -> Result<Vec<f32>> {
    if f_clip.len() != cfg.d_clip || f_dino.len() != cfg.d_dino {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            left: vec![f_clip.len(), f_dino.len()],
            right: vec![cfg.d_clip, cfg.d_dino],
        });
    }
    let mut z: Vec<f32> = f_clip.iter().chain(f_dino.iter()).copied().collect();
    let norm = z.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::invalid(
            "fuse: zero-norm feature vector cannot be normalized",
        ));
    }
    let inv = (1.0 / norm) as f32;
    z.iter_mut().for_each(|x| *x *= inv);
    Ok(z)
}

/// Sinusoidal temporal positions: interleaved sin/cos over `dim` channels
/// with base 10000. Supports arbitrary sequence lengths.
pub fn positional_embed<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[len, dim]);
    for t in 0..len {
        let row = out.row_mut(t);
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = t as f64 * freq;
            row[2 * i] = T::from_f64(angle.sin());
            row[2 * i + 1] = T::from_f64(angle.cos());
        }
        if dim % 2 == 1 {
            let i = dim / 2;
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            row[dim - 1] = T::from_f64((t as f64 * freq).sin());
        }
    }
    out
}

/// Registers the temporal aligner blocks and projection MLP.
pub fn init<T: Real>(state: &mut ModelState<T>, cfg: &ModelConfig, rng: &StreamRng) -> Result<()> {
    let width = cfg.fused_dim();
    for layer in 0..cfg.tempgeo_layers {
        init_encoder_block(
            state,
            rng,
            &format!("{TEMPGEO_PREFIX}.layer{layer}"),
            width,
            cfg.tempgeo_heads,
            cfg.ffn_mult,
        )?;
    }
    let dims = [width, cfg.proj_hidden[0], cfg.proj_hidden[1], cfg.embed_dim];
    for l in 0..3 {
        init_linear(
            state,
            rng,
            &format!("{PROJECTION_PREFIX}.fc{l}"),
            dims[l],
            dims[l + 1],
            false,
        )?;
    }
    Ok(())
}

/// Runs the pre-norm self-attention blocks over `fused + positions`.
/// Bypassed entirely (identity) when the aligner is disabled.
pub fn tempgeo_forward<T: Real>(
    tape: &Tape<T>,
    state: &ModelState<T>,
    cfg: &ModelConfig,
    input: NodeId,
    mode: Mode,
    rng: &StreamRng,
) -> Result<NodeId> {
    if !cfg.tempgeo_enabled {
        return Ok(input);
    }
    let width = cfg.fused_dim();
    let mut x = input;
    for layer in 0..cfg.tempgeo_layers {
        let mut layer_rng = rng.stream(&format!("tempgeo.layer{layer}"));
        x = encoder_block(
            tape,
            state,
            &format!("{TEMPGEO_PREFIX}.layer{layer}"),
            width,
            cfg.tempgeo_heads,
            cfg.tempgeo_dropout,
            mode,
            &mut layer_rng,
            x,
        )?;
    }
    Ok(x)
}

/// Aligned frames through the 3-layer Mish MLP, then row normalization so
/// retrieval similarities are cosine. Rows that project to (near-)zero stay
/// zero and raise the degeneracy flag.
pub fn project_frames<T: Real>(
    tape: &Tape<T>,
    state: &ModelState<T>,
    aligned: NodeId,
) -> Result<(NodeId, bool)> {
    let h = linear(tape, state, &format!("{PROJECTION_PREFIX}.fc0"), aligned)?;
    let h = tape.mish(h);
    let h = linear(tape, state, &format!("{PROJECTION_PREFIX}.fc1"), h)?;
    let h = tape.mish(h);
    let h = linear(tape, state, &format!("{PROJECTION_PREFIX}.fc2"), h)?;
    let normalized = tape.normalize_rows(h);
    let degenerate = {
        let v = tape.value(normalized);
        (0..v.rows()).any(|i| v.row(i).iter().all(|x| *x == T::ZERO))
    };
    Ok((normalized, degenerate))
}

/// fuse -> +positions -> aligner -> projection for one sequence. Position
/// rows are rescaled to `cfg.pos_scale` so they stay subordinate to the
/// unit-norm content rows.
pub fn sequence_forward<T: Real>(
    tape: &Tape<T>,
    state: &ModelState<T>,
    cfg: &ModelConfig,
    fused: &Tensor<T>,
    mode: Mode,
    rng: &StreamRng,
) -> Result<(NodeId, NodeId)> {
    let len = fused.rows();
    let width = fused.cols();
    let mut pos = positional_embed::<T>(len, width);
    // Raw sinusoidal rows have norm ~sqrt(width/2).
    let scale = T::from_f64(cfg.pos_scale / (width as f64 / 2.0).sqrt());
    pos.data_mut().iter_mut().for_each(|v| *v *= scale);
    let x = tape.input(fused.clone());
    let p = tape.input(pos);
    let with_pos = tape.add(x, p)?;
    let aligned = tempgeo_forward(tape, state, cfg, with_pos, mode, rng)?;
    let (projected, _) = project_frames(tape, state, aligned)?;
    Ok((aligned, projected))
}

// ---------------------------------------------------------------------------
// VTAG embedding file + CSV manifest
// ---------------------------------------------------------------------------

/// Writes records to the binary embedding format: magic "VTAG", version,
/// d_clip, d_dino, frame count, then per frame the id, index, GPS and the
/// two feature vectors as f32 little-endian.
pub fn write_vtag(path: &Path, cfg: &ModelConfig, records: &[FrameFeatureRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(VTAG_MAGIC).map_err(io_err)?;
    w.write_all(&VTAG_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(cfg.d_clip as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(cfg.d_dino as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io_err)?;
    for rec in records {
        if rec.f_clip.len() != cfg.d_clip || rec.f_dino.len() != cfg.d_dino {
            return Err(Error::ShapeMismatch {
                op: "write_vtag",
                left: vec![rec.f_clip.len(), rec.f_dino.len()],
                right: vec![cfg.d_clip, cfg.d_dino],
            });
        }
        w.write_all(&(rec.seq_id.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(rec.seq_id.as_bytes()).map_err(io_err)?;
        w.write_all(&rec.frame_idx.to_le_bytes()).map_err(io_err)?;
        w.write_all(&rec.gps.lat.to_le_bytes()).map_err(io_err)?;
        w.write_all(&rec.gps.lon.to_le_bytes()).map_err(io_err)?;
        for v in rec.f_clip.iter().chain(rec.f_dino.iter()) {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a VTAG file back into frame records.
pub fn read_vtag(path: &Path) -> Result<(u32, u32, Vec<FrameFeatureRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let path_str = path.display().to_string();
    let mut offset: u64 = 0;

    let mut magic = [0u8; 4];
    read_bytes(&mut r, &mut magic, &mut offset, &path_str)?;
    if &magic != VTAG_MAGIC {
        return Err(Error::Format {
            path: path_str,
            offset: 0,
            message: format!("bad magic {magic:?}, expected VTAG"),
        });
    }
    let version = read_u32_at(&mut r, &mut offset, &path_str)?;
    if version != VTAG_VERSION {
        return Err(Error::Format {
            path: path_str,
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let d_clip = read_u32_at(&mut r, &mut offset, &path_str)?;
    let d_dino = read_u32_at(&mut r, &mut offset, &path_str)?;
    let mut count_buf = [0u8; 8];
    read_bytes(&mut r, &mut count_buf, &mut offset, &path_str)?;
    let count = u64::from_le_bytes(count_buf);

    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id_len = read_u32_at(&mut r, &mut offset, &path_str)? as usize;
        let mut id = vec![0u8; id_len];
        read_bytes(&mut r, &mut id, &mut offset, &path_str)?;
        let seq_id = String::from_utf8(id).map_err(|e| Error::Format {
            path: path_str.clone(),
            offset,
            message: format!("non-UTF8 sequence id: {e}"),
        })?;
        let frame_idx = read_u32_at(&mut r, &mut offset, &path_str)?;
        let mut f64buf = [0u8; 8];
        read_bytes(&mut r, &mut f64buf, &mut offset, &path_str)?;
        let lat = f64::from_le_bytes(f64buf);
        read_bytes(&mut r, &mut f64buf, &mut offset, &path_str)?;
        let lon = f64::from_le_bytes(f64buf);
        let gps = GpsPoint::new(lat, lon).map_err(|e| Error::Format {
            path: path_str.clone(),
            offset,
            message: e.to_string(),
        })?;
        let mut read_feats = |n: usize| -> Result<Vec<f32>> {
            let mut out = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                read_bytes(&mut r, &mut buf, &mut offset, &path_str)?;
                out.push(f32::from_le_bytes(buf));
            }
            Ok(out)
        };
        let f_clip = read_feats(d_clip as usize)?;
        let f_dino = read_feats(d_dino as usize)?;
        records.push(FrameFeatureRecord {
            seq_id,
            frame_idx,
            gps,
            f_clip,
            f_dino,
        });
    }
    Ok((d_clip, d_dino, records))
}

fn read_bytes(r: &mut impl Read, buf: &mut [u8], offset: &mut u64, path: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        path: path.to_string(),
        offset: *offset,
        message: format!("unexpected end of data: {e}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

fn read_u32_at(r: &mut impl Read, offset: &mut u64, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_bytes(r, &mut buf, offset, path)?;
    Ok(u32::from_le_bytes(buf))
}

/// Groups records into per-video sequences with fused embeddings.
/// Frame indices must be strictly increasing within a sequence.
pub fn build_sequences(cfg: &ModelConfig, records: &[FrameFeatureRecord]) -> Result<Vec<FrameSequence>> {
    let mut groups: BTreeMap<&str, Vec<&FrameFeatureRecord>> = BTreeMap::new();
    for rec in records {
        groups.entry(&rec.seq_id).or_default().push(rec);
    }
    let mut sequences = Vec::with_capacity(groups.len());
    for (seq_id, mut frames) in groups {
        frames.sort_by_key(|f| f.frame_idx);
        for pair in frames.windows(2) {
            if pair[1].frame_idx <= pair[0].frame_idx {
                return Err(Error::invalid(format!(
                    "sequence {seq_id}: frame indices not strictly increasing ({} then {})",
                    pair[0].frame_idx, pair[1].frame_idx
                )));
            }
        }
        let fused_dim = cfg.fused_dim();
        let mut data = Vec::with_capacity(frames.len() * fused_dim);
        for f in &frames {
            data.extend(fuse(cfg, &f.f_clip, &f.f_dino)?);
        }
        sequences.push(FrameSequence {
            seq_id: seq_id.to_string(),
            frame_indices: frames.iter().map(|f| f.frame_idx).collect(),
            gps: frames.iter().map(|f| f.gps).collect(),
            fused: Tensor::from_vec(&[frames.len(), fused_dim], data)?,
        });
    }
    Ok(sequences)
}

/// Writes the CSV manifest mirror (seq_id, frame_idx, lat, lon).
pub fn write_manifest(path: &Path, records: &[FrameFeatureRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "seq_id,frame_idx,lat,lon").map_err(io_err)?;
    for rec in records {
        writeln!(
            w,
            "{},{},{:.6},{:.6}",
            rec.seq_id, rec.frame_idx, rec.gps.lat, rec.gps.lon
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub seq_id: String,
    pub frame_idx: u32,
    pub gps: GpsPoint,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let path_str = path.display().to_string();
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in text.lines().enumerate() {
        let line_len = line.len() as u64 + 1;
        if lineno == 0 {
            if line.trim() != "seq_id,frame_idx,lat,lon" {
                return Err(Error::Format {
                    path: path_str,
                    offset: 0,
                    message: format!("bad manifest header {line:?}"),
                });
            }
            offset += line_len;
            continue;
        }
        if line.trim().is_empty() {
            offset += line_len;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Format {
                path: path_str,
                offset,
                message: format!("expected 4 fields, got {}", parts.len()),
            });
        }
        let parse_err = |what: &str, e: String| Error::Format {
            path: path_str.clone(),
            offset,
            message: format!("bad {what}: {e}"),
        };
        let frame_idx: u32 = parts[1]
            .trim()
            .parse()
            .map_err(|e: std::num::ParseIntError| parse_err("frame_idx", e.to_string()))?;
        let lat: f64 = parts[2]
            .trim()
            .parse()
            .map_err(|e: std::num::ParseFloatError| parse_err("lat", e.to_string()))?;
        let lon: f64 = parts[3]
            .trim()
            .parse()
            .map_err(|e: std::num::ParseFloatError| parse_err("lon", e.to_string()))?;
        rows.push(ManifestRow {
            seq_id: parts[0].trim().to_string(),
            frame_idx,
            gps: GpsPoint::new(lat, lon).map_err(|e| parse_err("gps", e.to_string()))?,
        });
        offset += line_len;
    }
    Ok(rows)
}
