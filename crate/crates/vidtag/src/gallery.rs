//! Uniform grid gallery construction from training-data extents, plus the
//! val-set gallery mode and gallery CSV / embedding-cache formats.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geodesy::{haversine_km, GpsPoint};
use crate::state::ModelState;
use crate::tensor::Tensor;

/// Padded bounding box of one region of training data.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionExtent {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

#[derive(Debug, Clone)]
pub struct GalleryConfig {
    /// Padding in degrees applied to each extent edge.
    pub padding_deg: f64,
    /// Grid spacing in kilometers.
    pub resolution_km: f64,
    /// Fraction of points dropped per tail, per axis, before min/max.
    pub outlier_fraction: f64,
    /// Points closer than this belong to the same region.
    pub merge_radius_km: f64,
}

impl Default for GalleryConfig {
    fn default() -> Self {
        GalleryConfig {
            padding_deg: 0.05,
            resolution_km: 0.1,
            outlier_fraction: 0.005,
            merge_radius_km: 100.0,
        }
    }
}

/// The retrieval candidate set: grid points, optional row-normalized
/// embeddings, and provenance.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    pub points: Vec<GpsPoint>,
    pub embeddings: Option<Tensor<f32>>,
    pub resolution_km: f64,
    pub regions: Vec<RegionExtent>,
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Clusters training points into regions (connected components under the
/// merge radius), drops the configured outlier fraction per tail per axis,
/// and applies padding.
pub fn region_extents(points: &[GpsPoint], cfg: &GalleryConfig) -> Result<Vec<RegionExtent>> {
    if points.len() < 2 {
        return Err(Error::invalid(
            "region_extents needs at least 2 training points",
        ));
    }
    let labels = cluster_labels(points, cfg.merge_radius_km);
    let n_regions = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut extents = Vec::with_capacity(n_regions);
    for region in 0..n_regions {
        let members: Vec<GpsPoint> = points
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == region)
            .map(|(p, _)| *p)
            .collect();
        let (lat_min, lat_max) = trimmed_min_max(
            members.iter().map(|p| p.lat).collect(),
            cfg.outlier_fraction,
        );
        let (lon_min, lon_max) = trimmed_min_max(
            members.iter().map(|p| p.lon).collect(),
            cfg.outlier_fraction,
        );
        extents.push(RegionExtent {
            lat_min: lat_min - cfg.padding_deg,
            lat_max: lat_max + cfg.padding_deg,
            lon_min: lon_min - cfg.padding_deg,
            lon_max: lon_max + cfg.padding_deg,
        });
    }
    extents.sort_by(|a, b| {
        (a.lat_min, a.lon_min)
            .partial_cmp(&(b.lat_min, b.lon_min))
            .expect("finite extents")
    });
    Ok(extents)
}

/// Union-find clustering with coarse spatial hashing so only nearby pairs
/// are distance-tested.
fn cluster_labels(points: &[GpsPoint], merge_radius_km: f64) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..points.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    // Cell size a touch above the radius in degrees; longitude scaling uses
    // the worst case (equator) so neighbors are never missed.
    let cell_deg = (merge_radius_km / 111.0).max(1e-6);
    let key = |p: &GpsPoint| -> (i64, i64) {
        (
            (p.lat / cell_deg).floor() as i64,
            (p.lon / cell_deg).floor() as i64,
        )
    };
    let mut buckets: std::collections::HashMap<(i64, i64), Vec<usize>> =
        std::collections::HashMap::new();
    for (i, p) in points.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(i);
    }
    for (i, p) in points.iter().enumerate() {
        let (kr, kc) = key(p);
        for dr in -1..=1 {
            for dc in -1..=1 {
                if let Some(candidates) = buckets.get(&(kr + dr, kc + dc)) {
                    for &j in candidates {
                        if j <= i {
                            continue;
                        }
                        if haversine_km(*p, points[j]) <= merge_radius_km {
                            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                            if ri != rj {
                                parent[ri] = rj;
                            }
                        }
                    }
                }
            }
        }
    }
    // Compact root ids into 0..n_regions in first-appearance order.
    let mut label_of_root = std::collections::HashMap::new();
    let mut labels = Vec::with_capacity(points.len());
    for i in 0..points.len() {
        let root = find(&mut parent, i);
        let next = label_of_root.len();
        labels.push(*label_of_root.entry(root).or_insert(next));
    }
    labels
}

fn trimmed_min_max(mut values: Vec<f64>, tail_fraction: f64) -> (f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    let drop = (((values.len() as f64) * tail_fraction).floor() as usize)
        .min(values.len().saturating_sub(1) / 2);
    let keep = &values[drop..values.len() - drop];
    (keep[0], keep[keep.len() - 1])
}

/// Number of grid points the area/spacing arithmetic predicts (the
/// fencepost-free count). The emitted grid adds one boundary row/column
/// per axis, so actual counts land within +-(rows + cols + 1) of this.
pub fn nominal_point_count(extent: &RegionExtent, resolution_km: f64) -> usize {
    let (dis_lat, dis_lon) = extent_spans_km(extent);
    ((dis_lat * dis_lon) / (resolution_km * resolution_km)).floor() as usize
}

fn extent_spans_km(extent: &RegionExtent) -> (f64, f64) {
    let sw = GpsPoint::clamped(extent.lat_min, extent.lon_min);
    let nw = GpsPoint::clamped(extent.lat_max, extent.lon_min);
    let se = GpsPoint::clamped(extent.lat_min, extent.lon_max);
    (haversine_km(sw, nw), haversine_km(sw, se))
}

/// Lays out grid rows/columns at uniform angular spacing so that the
/// kilometer distance between neighbors is at most the resolution. An
/// extent smaller than the resolution in both axes degenerates to its
/// center point.
pub fn build_grid(extent: &RegionExtent, resolution_km: f64) -> Result<Vec<GpsPoint>> {
    if resolution_km <= 0.0 {
        return Err(Error::invalid("grid resolution must be positive"));
    }
    if extent.lat_min >= extent.lat_max || extent.lon_min >= extent.lon_max {
        return Err(Error::invalid(format!(
            "degenerate extent {extent:?} (padding must make min < max)"
        )));
    }
    let (dis_lat, dis_lon) = extent_spans_km(extent);
    let n_lat = (dis_lat / resolution_km).floor() as usize + 1;
    let n_lon = (dis_lon / resolution_km).floor() as usize + 1;
    let mut points = Vec::with_capacity(n_lat * n_lon);
    let lat_at = |i: usize| {
        if n_lat == 1 {
            (extent.lat_min + extent.lat_max) / 2.0
        } else {
            extent.lat_min + (extent.lat_max - extent.lat_min) * i as f64 / (n_lat - 1) as f64
        }
    };
    let lon_at = |j: usize| {
        if n_lon == 1 {
            (extent.lon_min + extent.lon_max) / 2.0
        } else {
            extent.lon_min + (extent.lon_max - extent.lon_min) * j as f64 / (n_lon - 1) as f64
        }
    };
    for i in 0..n_lat {
        for j in 0..n_lon {
            points.push(GpsPoint::clamped(lat_at(i), lon_at(j)));
        }
    }
    Ok(points)
}

/// Quantization used by the CSV format and for deduplication (6 decimal
/// places, about 0.11 m).
fn quantize(p: &GpsPoint) -> (i64, i64) {
    ((p.lat * 1e6).round() as i64, (p.lon * 1e6).round() as i64)
}

fn dedup_points(points: Vec<GpsPoint>) -> Vec<GpsPoint> {
    let mut seen = std::collections::HashSet::new();
    points
        .into_iter()
        .filter(|p| seen.insert(quantize(p)))
        .map(|p| {
            let (qlat, qlon) = quantize(&p);
            GpsPoint::clamped(qlat as f64 / 1e6, qlon as f64 / 1e6)
        })
        .collect()
}

/// Builds the uniform grid gallery over all regions of the training points.
pub fn build_uniform_gallery(points: &[GpsPoint], cfg: &GalleryConfig) -> Result<GalleryIndex> {
    let regions = region_extents(points, cfg)?;
    let grids: Vec<Vec<GpsPoint>> = regions
        .par_iter()
        .map(|ext| build_grid(ext, cfg.resolution_km))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<GpsPoint> = grids.into_iter().flatten().collect();
    let deduped = dedup_points(all);
    if deduped.is_empty() {
        return Err(Error::invalid("gallery construction produced no points"));
    }
    Ok(GalleryIndex {
        points: deduped,
        embeddings: None,
        resolution_km: cfg.resolution_km,
        regions,
    })
}

/// Upper-bound evaluation gallery: the deduplicated ground-truth points.
pub fn build_val_gallery(gt_points: &[GpsPoint]) -> Result<GalleryIndex> {
    if gt_points.is_empty() {
        return Err(Error::invalid("val gallery needs at least one point"));
    }
    Ok(GalleryIndex {
        points: dedup_points(gt_points.to_vec()),
        embeddings: None,
        resolution_km: 0.0,
        regions: Vec::new(),
    })
}

pub fn write_gallery_csv(path: &Path, gallery: &GalleryIndex) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "lat,lon").map_err(io_err)?;
    for p in &gallery.points {
        writeln!(w, "{:.6},{:.6}", p.lat, p.lon).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_gallery_csv(path: &Path) -> Result<GalleryIndex> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let path_str = path.display().to_string();
    let mut points = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in text.lines().enumerate() {
        let line_len = line.len() as u64 + 1;
        if lineno == 0 {
            if line.trim() != "lat,lon" {
                return Err(Error::Format {
                    path: path_str,
                    offset: 0,
                    message: format!("bad gallery header {line:?}"),
                });
            }
            offset += line_len;
            continue;
        }
        if line.trim().is_empty() {
            offset += line_len;
            continue;
        }
        let mut parts = line.split(',');
        let parse = |s: Option<&str>, offset: u64| -> Result<f64> {
            s.and_then(|v| v.trim().parse().ok()).ok_or(Error::Format {
                path: path.display().to_string(),
                offset,
                message: format!("bad gallery row {line:?}"),
            })
        };
        let lat = parse(parts.next(), offset)?;
        let lon = parse(parts.next(), offset)?;
        points.push(GpsPoint::new(lat, lon).map_err(|e| Error::Format {
            path: path_str.clone(),
            offset,
            message: e.to_string(),
        })?);
        offset += line_len;
    }
    if points.is_empty() {
        return Err(Error::Format {
            path: path_str,
            offset,
            message: "gallery has no points".into(),
        });
    }
    Ok(GalleryIndex {
        points,
        embeddings: None,
        resolution_km: 0.0,
        regions: Vec::new(),
    })
}

/// FNV-1a over the quantized point list; keys the embedding cache.
pub fn content_hash(points: &[GpsPoint]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in points {
        let (qlat, qlon) = quantize(p);
        for b in qlat.to_le_bytes().iter().chain(qlon.to_le_bytes().iter()) {
            h = (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Stores gallery embeddings in the checkpoint tensor container, keyed by
/// the gallery content hash.
pub fn save_embedding_cache(path: &Path, gallery: &GalleryIndex) -> Result<()> {
    let emb = gallery
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::state("gallery has no embeddings to cache"))?;
    let mut state = ModelState::<f32>::new();
    state.insert(
        &format!("gallery.{:016x}", content_hash(&gallery.points)),
        emb.clone(),
        false,
    )?;
    state.save(path)
}

/// Loads cached embeddings if the file exists and matches the gallery's
/// content hash; returns Ok(false) on miss.
pub fn load_embedding_cache(path: &Path, gallery: &mut GalleryIndex) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    let state = ModelState::<f32>::load(path)?;
    let name = format!("gallery.{:016x}", content_hash(&gallery.points));
    match state.get(&name) {
        Ok(p) if p.value.rows() == gallery.points.len() => {
            gallery.embeddings = Some(p.value.clone());
            Ok(true)
        }
        _ => Ok(false),
    }
}
