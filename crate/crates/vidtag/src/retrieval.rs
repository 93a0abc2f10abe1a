//! Cosine-similarity search over the gallery and the two-stage inference
//! pipeline: frame embeddings retrieve initial GPS predictions, the
//! refiner denoises their embeddings, and a second retrieval produces the
//! final trajectory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::frame_pipeline::{sequence_forward, FrameSequence};
use crate::gallery::GalleryIndex;
use crate::geodesy::GpsPoint;
use crate::georefiner;
use crate::location_encoder;
use crate::nn::Mode;
use crate::rng::StreamRng;
use crate::state::ModelState;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Initial,
    Refined,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Refined => "refined",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "initial" => Ok(Stage::Initial),
            "refined" => Ok(Stage::Refined),
            other => Err(Error::invalid(format!(
                "unknown stage {other:?}, expected initial|refined"
            ))),
        }
    }
}

/// One frame's retrieval outcome.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub seq_id: String,
    pub frame_idx: u32,
    pub point: GpsPoint,
    pub gallery_index: usize,
    pub score: f32,
    pub stage: Stage,
}

/// Exact top-k by descending inner product over the normalized gallery;
/// ties break toward the lower gallery index. `k` larger than the gallery
/// is clamped.
pub fn topk(query: &[f32], embeddings: &Tensor<f32>, k: usize) -> Vec<(usize, f32)> {
    let k = k.min(embeddings.rows());
    let scored = scan_scores(query, embeddings);
    let mut heap: Vec<(usize, f32)> = Vec::with_capacity(k + 1);
    for (idx, score) in scored {
        let pos = heap
            .binary_search_by(|(hidx, hscore)| {
                score
                    .partial_cmp(hscore)
                    .expect("finite scores")
                    .then(hidx.cmp(&idx))
            })
            .unwrap_or_else(|p| p);
        if pos < k {
            heap.insert(pos, (idx, score));
            heap.truncate(k);
        }
    }
    heap
}

/// Blocked parallel scan producing (index, score) for every gallery row.
fn scan_scores(query: &[f32], embeddings: &Tensor<f32>) -> Vec<(usize, f32)> {
    const BLOCK: usize = 512;
    let rows = embeddings.rows();
    let blocks: Vec<Vec<(usize, f32)>> = (0..rows.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let start = b * BLOCK;
            let end = (start + BLOCK).min(rows);
            (start..end)
                .map(|i| {
                    let row = embeddings.row(i);
                    let dot: f32 = row.iter().zip(query).map(|(a, b)| a * b).sum();
                    (i, dot)
                })
                .collect()
        })
        .collect();
    blocks.into_iter().flatten().collect()
}

/// Top-1 per query row of a normalized matrix.
pub fn top1_batch(queries: &Tensor<f32>, embeddings: &Tensor<f32>) -> Vec<(usize, f32)> {
    (0..queries.rows())
        .map(|i| topk(queries.row(i), embeddings, 1)[0])
        .collect()
}

fn require_embeddings(gallery: &GalleryIndex) -> Result<&Tensor<f32>> {
    gallery
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::state("gallery embeddings missing; embed the gallery first"))
}

/// Two-stage inference over one sequence. Stage 1 retrieves per-frame
/// points from projected frame embeddings; stage 2 embeds those predicted
/// points, refines them against the frame features, and retrieves again.
pub fn infer_sequence(
    seq: &FrameSequence,
    state: &ModelState<f32>,
    cfg: &ModelConfig,
    gallery: &GalleryIndex,
) -> Result<(Vec<Prediction>, Vec<Prediction>)> {
    if seq.is_empty() {
        return Err(Error::invalid("cannot infer an empty sequence"));
    }
    let embeddings = require_embeddings(gallery)?;
    let rng = StreamRng::new(0);

    let tape = Tape::new();
    let (_, projected) = sequence_forward(&tape, state, cfg, &seq.fused, Mode::Eval, &rng)?;
    let frame_emb = tape.value_cloned(projected);
    frame_emb.assert_finite("frame embedding forward")?;

    let make_predictions = |hits: &[(usize, f32)], stage: Stage| -> Vec<Prediction> {
        hits.iter()
            .enumerate()
            .map(|(i, &(idx, score))| Prediction {
                seq_id: seq.seq_id.clone(),
                frame_idx: seq.frame_indices[i],
                point: gallery.points[idx],
                gallery_index: idx,
                score,
                stage,
            })
            .collect()
    };

    let initial_hits = top1_batch(&frame_emb, embeddings);
    let initial = make_predictions(&initial_hits, Stage::Initial);

    let initial_points: Vec<GpsPoint> = initial.iter().map(|p| p.point).collect();
    let refined_emb = refine_embeddings(state, cfg, &frame_emb, &initial_points)?;
    let refined_hits = top1_batch(&refined_emb, embeddings);
    let refined = make_predictions(&refined_hits, Stage::Refined);

    Ok((initial, refined))
}

/// Embeds `query_points`, runs the refiner decoder over them with the
/// frame features as encoder context, and L2-normalizes the result.
pub fn refine_embeddings<T: Real>(
    state: &ModelState<T>,
    cfg: &ModelConfig,
    frame_emb: &Tensor<T>,
    query_points: &[GpsPoint],
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let queries = location_encoder::encode_batch(&tape, state, cfg, query_points)?;
    let feats = tape.input(frame_emb.clone());
    let refined = georefiner::forward(
        &tape,
        state,
        cfg,
        feats,
        queries,
        Mode::Eval,
        &StreamRng::new(0),
        false,
    )?;
    let normalized = tape.normalize_rows(refined);
    let out = tape.value_cloned(normalized);
    out.assert_finite("refined embedding forward")?;
    Ok(out)
}

/// Writes predictions as CSV: seq_id, frame_idx, pred_lat, pred_lon,
/// score, stage.
pub fn write_predictions_csv(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "seq_id,frame_idx,pred_lat,pred_lon,score,stage").map_err(io_err)?;
    for p in predictions {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{}",
            p.seq_id,
            p.frame_idx,
            p.point.lat,
            p.point.lon,
            p.score,
            p.stage.as_str()
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let path_str = path.display().to_string();
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in text.lines().enumerate() {
        let line_len = line.len() as u64 + 1;
        if lineno == 0 {
            if line.trim() != "seq_id,frame_idx,pred_lat,pred_lon,score,stage" {
                return Err(Error::Format {
                    path: path_str,
                    offset: 0,
                    message: format!("bad predictions header {line:?}"),
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
        if parts.len() != 6 {
            return Err(Error::Format {
                path: path_str,
                offset,
                message: format!("expected 6 fields, got {}", parts.len()),
            });
        }
        let bad = |what: &str| Error::Format {
            path: path.display().to_string(),
            offset,
            message: format!("bad {what} in {line:?}"),
        };
        let frame_idx: u32 = parts[1].trim().parse().map_err(|_| bad("frame_idx"))?;
        let lat: f64 = parts[2].trim().parse().map_err(|_| bad("pred_lat"))?;
        let lon: f64 = parts[3].trim().parse().map_err(|_| bad("pred_lon"))?;
        let score: f32 = parts[4].trim().parse().map_err(|_| bad("score"))?;
        let stage = Stage::parse(parts[5].trim()).map_err(|_| bad("stage"))?;
        out.push(Prediction {
            seq_id: parts[0].trim().to_string(),
            frame_idx,
            point: GpsPoint::new(lat, lon).map_err(|_| bad("coordinates"))?,
            gallery_index: 0,
            score,
            stage,
        });
        offset += line_len;
    }
    Ok(out)
}

/// Writes one GeoJSON feature per sequence: a LineString of [lon, lat]
/// vertices in frame order (a Point for single-frame sequences).
pub fn write_trajectories_geojson(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut by_seq: std::collections::BTreeMap<&str, Vec<&Prediction>> =
        std::collections::BTreeMap::new();
    for p in predictions {
        by_seq.entry(&p.seq_id).or_default().push(p);
    }
    let features: Vec<serde_json::Value> = by_seq
        .into_iter()
        .map(|(seq_id, mut preds)| {
            preds.sort_by_key(|p| p.frame_idx);
            let coords: Vec<[f64; 2]> =
                preds.iter().map(|p| [p.point.lon, p.point.lat]).collect();
            let geometry = if coords.len() == 1 {
                json!({ "type": "Point", "coordinates": coords[0] })
            } else {
                json!({ "type": "LineString", "coordinates": coords })
            };
            json!({
                "type": "Feature",
                "geometry": geometry,
                "properties": {
                    "seq_id": seq_id,
                    "frames": preds.len(),
                    "stage": preds[0].stage.as_str(),
                },
            })
        })
        .collect();
    let doc = json!({ "type": "FeatureCollection", "features": features });
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &doc)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: Vec<Vec<f32>>) -> Tensor<f32> {
        let cols = rows[0].len();
        let mut t = Tensor::from_vec(
            &[rows.len(), cols],
            rows.into_iter().flatten().collect(),
        )
        .unwrap();
        t.normalize_rows_in_place(1e-12);
        t
    }

    #[test]
    fn query_equal_to_gallery_row_is_top1_with_score_one() {
        let emb = unit_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.5, 0.5, 0.0],
        ]);
        let hits = topk(emb.row(1), &emb, 1);
        assert_eq!(hits[0].0, 1);
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn full_ranking_scores_non_increasing_and_ties_break_low_index() {
        let emb = unit_rows(vec![
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0], // duplicate of row 1
            vec![-1.0, 0.0],
        ]);
        let hits = topk(&[1.0, 0.0], &emb, 10); // k clamps to 4
        assert_eq!(hits.len(), 4);
        for w in hits.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
        assert_eq!(hits[0].0, 1, "tie must resolve to the lower index");
        assert_eq!(hits[1].0, 2);
    }

    #[test]
    fn blocked_scan_matches_naive_oracle() {
        let mut rng = StreamRng::new(31).stream("scan");
        let n = 1500;
        let d = 24;
        let mut emb = Tensor::<f32>::randn(&[n, d], 1.0, &mut rng);
        emb.normalize_rows_in_place(1e-12);
        for _ in 0..1000 {
            let mut q: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
            let norm = q.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32;
            q.iter_mut().for_each(|x| *x /= norm);

            // Naive oracle: independent max scan with the same tie rule.
            let mut best = (0usize, f32::NEG_INFINITY);
            for i in 0..n {
                let dot: f32 = emb.row(i).iter().zip(&q).map(|(a, b)| a * b).sum();
                if dot > best.1 {
                    best = (i, dot);
                }
            }
            let hit = topk(&q, &emb, 1)[0];
            assert_eq!(hit.0, best.0);
            assert_eq!(hit.1.to_bits(), best.1.to_bits());
        }
    }

    #[test]
    fn predictions_csv_round_trip_to_microdegree() {
        let preds = vec![
            Prediction {
                seq_id: "a".into(),
                frame_idx: 0,
                point: GpsPoint::new(40.712345, -74.005678).unwrap(),
                gallery_index: 3,
                score: 0.93,
                stage: Stage::Initial,
            },
            Prediction {
                seq_id: "a".into(),
                frame_idx: 1,
                point: GpsPoint::new(40.712445, -74.005778).unwrap(),
                gallery_index: 4,
                score: 0.91,
                stage: Stage::Refined,
            },
        ];
        let dir = std::env::temp_dir().join("vidtag_retrieval_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("preds.csv");
        write_predictions_csv(&path, &preds).unwrap();
        let loaded = read_predictions_csv(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in loaded.iter().zip(&preds) {
            assert!((a.point.lat - b.point.lat).abs() < 1e-6);
            assert!((a.point.lon - b.point.lon).abs() < 1e-6);
            assert_eq!(a.stage, b.stage);
            assert_eq!(a.frame_idx, b.frame_idx);
        }
    }

    #[test]
    fn empty_predictions_write_header_only() {
        let dir = std::env::temp_dir().join("vidtag_retrieval_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.csv");
        write_predictions_csv(&path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim(), "seq_id,frame_idx,pred_lat,pred_lon,score,stage");
        assert_eq!(read_predictions_csv(&path).unwrap().len(), 0);
    }

    #[test]
    fn geojson_one_linestring_per_sequence() {
        let p = |seq: &str, idx: u32, lon: f64| Prediction {
            seq_id: seq.into(),
            frame_idx: idx,
            point: GpsPoint::new(0.0, lon).unwrap(),
            gallery_index: 0,
            score: 1.0,
            stage: Stage::Refined,
        };
        let preds = vec![p("s1", 0, 0.0), p("s1", 1, 0.01), p("s1", 2, 0.02), p("s2", 0, 5.0)];
        let dir = std::env::temp_dir().join("vidtag_retrieval_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.geojson");
        write_trajectories_geojson(&path, &preds).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let features = doc["features"].as_array().unwrap();
        assert_eq!(features.len(), 2);
        assert_eq!(features[0]["geometry"]["type"], "LineString");
        assert_eq!(
            features[0]["geometry"]["coordinates"].as_array().unwrap().len(),
            3
        );
        assert_eq!(features[1]["geometry"]["type"], "Point");
    }
}
