//! Frame-wise and video-wise accuracy at distance thresholds, median
//! distance error, Discrete Fréchet Distance, and Mean Range Difference.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame_pipeline::ManifestRow;
use crate::geodesy::{haversine_km, GpsPoint};
use crate::retrieval::Prediction;

/// Reporting thresholds in kilometers: sub-street, street, locality, city.
pub const THRESHOLDS_KM: [f64; 4] = [0.5, 1.0, 5.0, 25.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryMetric {
    /// Great-circle kilometers (the reporting default for DFD).
    Haversine,
    /// Euclidean distance on raw (lat, lon) degrees.
    Planar,
}

fn point_distance(metric: TrajectoryMetric, a: GpsPoint, b: GpsPoint) -> f64 {
    match metric {
        TrajectoryMetric::Haversine => haversine_km(a, b),
        TrajectoryMetric::Planar => ((a.lat - b.lat).powi(2) + (a.lon - b.lon).powi(2)).sqrt(),
    }
}

/// Percentage of prediction/ground-truth pairs within each threshold.
pub fn threshold_accuracy(
    pred: &[GpsPoint],
    gt: &[GpsPoint],
    thresholds_km: &[f64],
) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "threshold_accuracy",
            left: vec![pred.len()],
            right: vec![gt.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid(
            "threshold_accuracy over an empty set is undefined",
        ));
    }
    let distances: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| haversine_km(*p, *g))
        .collect();
    Ok(thresholds_km
        .iter()
        .map(|t| {
            100.0 * distances.iter().filter(|d| **d <= *t).count() as f64
                / distances.len() as f64
        })
        .collect())
}

/// Median of a non-empty value list (mean of middle two for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Reduces a sequence to one (prediction, ground truth) pair: the GT
/// centroid, and the member prediction closest (great-circle) to the
/// prediction centroid; ties break toward the earliest frame.
pub fn video_prediction(preds: &[GpsPoint], gts: &[GpsPoint]) -> Result<(GpsPoint, GpsPoint)> {
    if preds.is_empty() || gts.is_empty() {
        return Err(Error::invalid("video_prediction needs a nonempty sequence"));
    }
    let centroid = |pts: &[GpsPoint]| -> GpsPoint {
        let lat = pts.iter().map(|p| p.lat).sum::<f64>() / pts.len() as f64;
        let lon = pts.iter().map(|p| p.lon).sum::<f64>() / pts.len() as f64;
        GpsPoint::clamped(lat, lon)
    };
    let video_gt = centroid(gts);
    let pred_centroid = centroid(preds);
    let mut best = (0usize, f64::INFINITY);
    for (i, p) in preds.iter().enumerate() {
        let d = haversine_km(*p, pred_centroid);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok((preds[best.0], video_gt))
}

/// Discrete Fréchet distance (coupling distance) between two point
/// sequences under the chosen metric, by dynamic programming:
/// dfd(i,j) = max(d(a_i, b_j), min(dfd(i-1,j), dfd(i,j-1), dfd(i-1,j-1))).
pub fn discrete_frechet(a: &[GpsPoint], b: &[GpsPoint], metric: TrajectoryMetric) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("discrete_frechet needs nonempty curves"));
    }
    let cols = b.len();
    let mut prev = vec![0.0f64; cols];
    let mut curr = vec![0.0f64; cols];
    for i in 0..a.len() {
        for j in 0..cols {
            let d = point_distance(metric, a[i], b[j]);
            let reach = match (i, j) {
                (0, 0) => d,
                (0, _) => curr[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                (_, _) => prev[j].min(curr[j - 1]).min(prev[j - 1]).max(d),
            };
            curr[j] = reach;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[cols - 1])
}

/// Mean absolute difference of per-axis coordinate ranges, in degrees:
/// (|range_lat(a) - range_lat(b)| + |range_lon(a) - range_lon(b)|) / 2.
pub fn mean_range_difference(a: &[GpsPoint], b: &[GpsPoint]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("mean_range_difference needs nonempty curves"));
    }
    let range = |pts: &[GpsPoint], f: fn(&GpsPoint) -> f64| -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in pts {
            lo = lo.min(f(p));
            hi = hi.max(f(p));
        }
        hi - lo
    };
    let r_lat = (range(a, |p| p.lat) - range(b, |p| p.lat)).abs();
    let r_lon = (range(a, |p| p.lon) - range(b, |p| p.lon)).abs();
    Ok((r_lat + r_lon) / 2.0)
}

/// Per-sequence slice of the evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceReport {
    pub seq_id: String,
    pub frames: usize,
    pub video_error_km: f64,
    pub dfd_km: f64,
    pub mrd_deg: f64,
}

/// Full evaluation report. Field order fixes the JSON key order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame_acc_0_5km: f64,
    pub frame_acc_1km: f64,
    pub frame_acc_5km: f64,
    pub frame_acc_25km: f64,
    pub frame_median_km: f64,
    pub video_acc_0_5km: f64,
    pub video_acc_1km: f64,
    pub video_acc_5km: f64,
    pub video_acc_25km: f64,
    pub video_median_km: f64,
    pub dfd_mean: f64,
    pub mrd_mean: f64,
    pub per_sequence: Vec<SequenceReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Joins predictions against the ground-truth manifest and assembles all
/// metrics. Every (seq_id, frame_idx) must match on both sides; mismatches
/// are listed exhaustively. Sequences crossing the antimeridian are
/// rejected (the centroid arithmetic is invalid there).
pub fn evaluate(predictions: &[Prediction], manifest: &[ManifestRow]) -> Result<EvalReport> {
    let mut gt_by_key: BTreeMap<(String, u32), GpsPoint> = BTreeMap::new();
    for row in manifest {
        gt_by_key.insert((row.seq_id.clone(), row.frame_idx), row.gps);
    }
    let mut mismatches: Vec<String> = Vec::new();
    let mut pred_keys: std::collections::BTreeSet<(String, u32)> = Default::default();
    for p in predictions {
        let key = (p.seq_id.clone(), p.frame_idx);
        if !gt_by_key.contains_key(&key) {
            mismatches.push(format!("prediction without ground truth: {}#{}", p.seq_id, p.frame_idx));
        }
        pred_keys.insert(key);
    }
    for key in gt_by_key.keys() {
        if !pred_keys.contains(key) {
            mismatches.push(format!("ground truth without prediction: {}#{}", key.0, key.1));
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::IdMismatch(mismatches));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }

    // Group by sequence in frame order.
    let mut by_seq: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        by_seq.entry(&p.seq_id).or_default().push(p);
    }
    let mut sequences: Vec<(String, Vec<GpsPoint>, Vec<GpsPoint>)> = Vec::new();
    for (seq_id, mut preds) in by_seq {
        preds.sort_by_key(|p| p.frame_idx);
        let pred_pts: Vec<GpsPoint> = preds.iter().map(|p| p.point).collect();
        let gt_pts: Vec<GpsPoint> = preds
            .iter()
            .map(|p| gt_by_key[&(p.seq_id.clone(), p.frame_idx)])
            .collect();
        let lon_span = |pts: &[GpsPoint]| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in pts {
                lo = lo.min(p.lon);
                hi = hi.max(p.lon);
            }
            hi - lo
        };
        if lon_span(&gt_pts) > 180.0 || lon_span(&pred_pts) > 180.0 {
            return Err(Error::invalid(format!(
                "sequence {seq_id} crosses the antimeridian; centroid metrics are undefined there"
            )));
        }
        sequences.push((seq_id.to_string(), pred_pts, gt_pts));
    }

    let frame_pred: Vec<GpsPoint> = sequences.iter().flat_map(|(_, p, _)| p.clone()).collect();
    let frame_gt: Vec<GpsPoint> = sequences.iter().flat_map(|(_, _, g)| g.clone()).collect();
    let frame_acc = threshold_accuracy(&frame_pred, &frame_gt, &THRESHOLDS_KM)?;
    let frame_errors: Vec<f64> = frame_pred
        .iter()
        .zip(&frame_gt)
        .map(|(p, g)| haversine_km(*p, *g))
        .collect();

    struct SeqOutcome {
        report: SequenceReport,
        video_pred: GpsPoint,
        video_gt: GpsPoint,
    }
    let outcomes: Vec<SeqOutcome> = sequences
        .par_iter()
        .map(|(seq_id, pred_pts, gt_pts)| -> Result<SeqOutcome> {
            let (video_pred, video_gt) = video_prediction(pred_pts, gt_pts)?;
            let dfd = discrete_frechet(pred_pts, gt_pts, TrajectoryMetric::Haversine)?;
            let mrd = mean_range_difference(pred_pts, gt_pts)?;
            Ok(SeqOutcome {
                report: SequenceReport {
                    seq_id: seq_id.clone(),
                    frames: pred_pts.len(),
                    video_error_km: haversine_km(video_pred, video_gt),
                    dfd_km: dfd,
                    mrd_deg: mrd,
                },
                video_pred,
                video_gt,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let video_pred: Vec<GpsPoint> = outcomes.iter().map(|o| o.video_pred).collect();
    let video_gt: Vec<GpsPoint> = outcomes.iter().map(|o| o.video_gt).collect();
    let video_acc = threshold_accuracy(&video_pred, &video_gt, &THRESHOLDS_KM)?;
    let video_errors: Vec<f64> = outcomes.iter().map(|o| o.report.video_error_km).collect();
    let dfd_mean =
        outcomes.iter().map(|o| o.report.dfd_km).sum::<f64>() / outcomes.len() as f64;
    let mrd_mean =
        outcomes.iter().map(|o| o.report.mrd_deg).sum::<f64>() / outcomes.len() as f64;

    Ok(EvalReport {
        frame_acc_0_5km: frame_acc[0],
        frame_acc_1km: frame_acc[1],
        frame_acc_5km: frame_acc[2],
        frame_acc_25km: frame_acc[3],
        frame_median_km: median(&frame_errors),
        video_acc_0_5km: video_acc[0],
        video_acc_1km: video_acc[1],
        video_acc_5km: video_acc[2],
        video_acc_25km: video_acc[3],
        video_median_km: median(&video_errors),
        dfd_mean,
        mrd_mean,
        per_sequence: outcomes.into_iter().map(|o| o.report).collect(),
    })
}
