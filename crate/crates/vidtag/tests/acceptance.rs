//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Criteria 7 and 8 share a single pinned end-to-end benchmark run
//! (seed 42, toy profile) through a `OnceLock`.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use vidtag::config::ModelConfig;
use vidtag::frame_pipeline::{self, build_sequences, FrameSequence, ManifestRow};
use vidtag::gallery::{self, build_uniform_gallery, GalleryConfig};
use vidtag::geodesy::{
    equal_earth_forward, haversine_km, standardized_coords, GpsPoint, EARTH_RADIUS_KM,
};
use vidtag::georefiner::{self, corrupt_sequence, NoiseConfig};
use vidtag::location_encoder;
use vidtag::metrics::{discrete_frechet, median, TrajectoryMetric};
use vidtag::nn::{self, Mode};
use vidtag::objectives::{self, contrastive_loss, video_level_pool, weighted_hinge_loss, HingeWeights};
use vidtag::retrieval::{self, Stage};
use vidtag::rng::StreamRng;
use vidtag::state::ModelState;
use vidtag::synth::{generate, SyntheticWorldConfig};
use vidtag::tape::{NodeId, Tape};
use vidtag::tensor::{identity, Tensor};
use vidtag::training::{
    ablation_harness, denoising_probe, infer_dataset, train_phase1, AblationTable, TrainConfig,
    TrainLog,
};

// ---------------------------------------------------------------------------
// Pinned regression constants (seed 42, toy profile, first green run).
// ---------------------------------------------------------------------------

/// Grid spacing of the benchmark gallery.
const BENCH_RESOLUTION_KM: f64 = 2.0;
/// Held-out frames within 2 x resolution after phase I (observed 0.966).
const PIN_WITHIN_2RES: f64 = 0.94;
/// Exact top-1 hit rate of phase I against the benchmark gallery
/// (observed 0.561).
const PIN_TOP1: f64 = 0.52;
/// Refined-trajectory DFD ceiling (observed 2.901).
const PIN_REFINED_DFD: f64 = 3.2;
/// Initial-trajectory DFD floor; documents that stage 1 has genuine
/// outliers for the refiner to repair (observed 3.962).
const PIN_INITIAL_DFD_MIN: f64 = 3.0;
/// Median error ceiling for retrieval of corrupted queries after
/// refinement (observed 1.140).
const PIN_REFINED_VS_CORRUPTED_MEDIAN: f64 = 1.5;

struct Benchmark {
    table: AblationTable,
    phase1_state: ModelState<f32>,
    sequences: Vec<FrameSequence>,
    cfg: ModelConfig,
    top1: f64,
    within_2res: f64,
    random_baseline: f64,
    corrupted_median: f64,
    refined_median: f64,
    collapse_undone: f64,
    first_step_loss: f64,
    first_batch_rows: usize,
    elapsed: Duration,
}

fn benchmark() -> &'static Benchmark {
    static BENCH: OnceLock<Benchmark> = OnceLock::new();
    BENCH.get_or_init(|| {
        let started = Instant::now();
        let cfg = ModelConfig::toy();
        let world = SyntheticWorldConfig::default();
        let records = generate(&world, &cfg, 42).expect("synthetic generation");
        let sequences = build_sequences(&cfg, &records).expect("sequence assembly");

        let phase1 = TrainConfig::phase1_toy(42);
        let phase2 = TrainConfig::phase2_toy(42);
        let mut log = TrainLog::memory();
        let (table, outcomes) = ablation_harness(
            &sequences,
            &cfg,
            &phase1,
            &phase2,
            BENCH_RESOLUTION_KM,
            &mut log,
        )
        .expect("ablation harness");

        // Benchmark gallery from the training split, embedded with the
        // phase-1 (row B) weights.
        let probe_idx = &outcomes[1].probe_indices;
        let train_points: Vec<GpsPoint> = sequences
            .iter()
            .enumerate()
            .filter(|(i, _)| !probe_idx.contains(i))
            .flat_map(|(_, s)| s.gps.iter().copied())
            .collect();
        let mut bench_gallery = build_uniform_gallery(
            &train_points,
            &GalleryConfig {
                resolution_km: BENCH_RESOLUTION_KM,
                padding_deg: 0.02,
                ..GalleryConfig::default()
            },
        )
        .expect("benchmark gallery");
        bench_gallery.embeddings = Some(
            location_encoder::embed_gallery(&outcomes[1].state, &cfg, &bench_gallery.points, true)
                .expect("gallery embedding"),
        );
        let probe_seqs: Vec<&FrameSequence> = probe_idx.iter().map(|&i| &sequences[i]).collect();

        // Phase-I frame retrieval stats on held-out sequences.
        let mut errors = Vec::new();
        let mut exact = 0usize;
        let mut total = 0usize;
        let embeddings = bench_gallery.embeddings.as_ref().unwrap();
        for seq in &probe_seqs {
            let tape = Tape::new();
            let (_, projected) = frame_pipeline::sequence_forward(
                &tape,
                &outcomes[1].state,
                &cfg,
                &seq.fused,
                Mode::Eval,
                &StreamRng::new(0),
            )
            .expect("forward");
            let emb = tape.value_cloned(projected);
            for (f, (idx, _)) in retrieval::top1_batch(&emb, embeddings).into_iter().enumerate() {
                let err = haversine_km(bench_gallery.points[idx], seq.gps[f]);
                let nearest = bench_gallery
                    .points
                    .iter()
                    .map(|p| haversine_km(*p, seq.gps[f]))
                    .fold(f64::INFINITY, f64::min);
                if (err - nearest).abs() < 1e-9 {
                    exact += 1;
                }
                errors.push(err);
                total += 1;
            }
        }
        let within = errors
            .iter()
            .filter(|e| **e <= 2.0 * BENCH_RESOLUTION_KM)
            .count() as f64
            / total as f64;

        // Phase-II denoising efficacy on the same held-out split, with the
        // fully trained (row C) weights.
        let (corrupted_median, refined_median, _) = denoising_probe(
            &probe_seqs,
            &outcomes[2].state,
            &cfg,
            &bench_gallery,
            &NoiseConfig::default(),
            42,
        )
        .expect("denoising probe");
        // Collapse recovery is judged against a fine gallery so that cell
        // quantization cannot mask a genuinely re-spread trajectory (the
        // probe walks span ~5 km; benchmark cells are 2 km).
        let mut fine_gallery = build_uniform_gallery(
            &train_points,
            &GalleryConfig {
                resolution_km: 0.5,
                padding_deg: 0.02,
                ..GalleryConfig::default()
            },
        )
        .expect("fine gallery");
        fine_gallery.embeddings = Some(
            location_encoder::embed_gallery(&outcomes[2].state, &cfg, &fine_gallery.points, true)
                .expect("fine gallery embedding"),
        );
        let (_, _, collapse_undone) = denoising_probe(
            &probe_seqs,
            &outcomes[2].state,
            &cfg,
            &fine_gallery,
            &NoiseConfig {
                collapse_prob: 1.0,
                ..NoiseConfig::default()
            },
            42,
        )
        .expect("collapse probe");

        let first_batch_rows = phase1.batch_sequences * phase1.frames_per_sequence;
        Benchmark {
            table,
            phase1_state: outcomes[1].state.clone(),
            first_step_loss: outcomes[1].first_step_loss,
            first_batch_rows,
            sequences,
            cfg,
            top1: exact as f64 / total as f64,
            within_2res: within,
            random_baseline: 1.0 / bench_gallery.len() as f64,
            corrupted_median,
            refined_median,
            collapse_undone,
            elapsed: started.elapsed(),
        }
    })
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient correctness via central finite differences.
// ---------------------------------------------------------------------------

fn relative_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks every trainable parameter under the given prefixes against a
/// central-difference estimate of d(loss)/d(theta). Returns the number of
/// components checked and the worst relative error.
fn finite_difference_check(
    state: &mut ModelState<f64>,
    prefixes: &[&str],
    loss_fn: &dyn Fn(&Tape<f64>, &ModelState<f64>) -> NodeId,
) -> (usize, f64) {
    let h = 1e-4;
    state.zero_grads();
    let tape = Tape::new();
    let loss = loss_fn(&tape, state);
    tape.backward(loss, state).expect("backward");

    let names: Vec<String> = state
        .iter()
        .filter(|(n, p)| p.trainable && prefixes.iter().any(|pre| n.starts_with(pre)))
        .map(|(n, _)| n.clone())
        .collect();
    assert!(!names.is_empty(), "no parameters matched {prefixes:?}");

    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for name in names {
        let analytic = state.get(&name).unwrap().grad.clone();
        let len = analytic.len();
        for i in 0..len {
            let orig = state.get(&name).unwrap().value.data()[i];
            let eval_at = |state: &mut ModelState<f64>, v: f64| -> f64 {
                state.get_mut(&name).unwrap().value.data_mut()[i] = v;
                let tape = Tape::new();
                let loss = loss_fn(&tape, state);
                tape.scalar_value(loss)
            };
            let plus = eval_at(state, orig + h);
            let minus = eval_at(state, orig - h);
            state.get_mut(&name).unwrap().value.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_err(analytic.data()[i], fd));
            checked += 1;
        }
    }
    state.zero_grads();
    (checked, worst)
}

fn micro_config() -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.d_clip = 4;
    cfg.d_dino = 4;
    cfg.tempgeo_heads = 2;
    cfg.ffn_mult = 2;
    cfg.proj_hidden = [10, 9];
    cfg.embed_dim = 8;
    cfg.rff_width = 4;
    cfg.locenc_hidden = 6;
    cfg.refiner_heads = 2;
    cfg
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let tol = 1e-3;
    let cfg = micro_config();
    let init_rng = StreamRng::new(7).stream("init");
    let mut state = ModelState::<f64>::new();
    frame_pipeline::init(&mut state, &cfg, &init_rng).unwrap();
    location_encoder::init(&mut state, &cfg, &init_rng).unwrap();
    georefiner::init(&mut state, &cfg, &init_rng).unwrap();
    objectives::init(&mut state, &cfg).unwrap();
    // Residual output projections start at zero; give every weight a
    // nonzero operating point so the checks are not vacuous.
    nn::randomize_residual_projections(&mut state, &StreamRng::new(8), "tempgeo", 0.2);
    nn::randomize_residual_projections(&mut state, &StreamRng::new(9), "georefiner", 0.2);

    let mut data_rng = StreamRng::new(10).stream("data");
    let fused = Tensor::<f64>::randn(&[3, cfg.fused_dim()], 0.5, &mut data_rng);
    let probe_frames = Tensor::<f64>::randn(&[3, cfg.embed_dim], 0.5, &mut data_rng);
    let probe_queries = Tensor::<f64>::randn(&[3, cfg.embed_dim], 0.5, &mut data_rng);
    let points: Vec<GpsPoint> = (0..3)
        .map(|i| GpsPoint::new(40.0 + i as f64 * 0.03, -74.0 - i as f64 * 0.04).unwrap())
        .collect();
    let weight_proj = Tensor::<f64>::randn(&[3, cfg.embed_dim], 1.0, &mut data_rng);
    let weight_ref = Tensor::<f64>::randn(&[3, cfg.embed_dim], 1.0, &mut data_rng);
    let weight_loc = Tensor::<f64>::randn(&[3, cfg.embed_dim], 1.0, &mut data_rng);

    let mut total_checked = 0usize;
    let mut report = Vec::new();

    // Temporal aligner + projection MLP.
    let cfg_c = cfg.clone();
    let fused_c = fused.clone();
    let (n, err) = finite_difference_check(&mut state, &["tempgeo", "proj"], &move |tape, st| {
        let (_, projected) = frame_pipeline::sequence_forward(
            tape,
            st,
            &cfg_c,
            &fused_c,
            Mode::Eval,
            &StreamRng::new(0),
        )
        .unwrap();
        let weighted = tape.mul(projected, tape.input(weight_proj.clone())).unwrap();
        tape.mean_all(weighted)
    });
    report.push(("aligner+projection", n, err));
    total_checked += n;
    assert!(err < tol, "aligner/projection rel err {err}");

    // Location encoder heads.
    let cfg_c = cfg.clone();
    let points_c = points.clone();
    let (n, err) = finite_difference_check(&mut state, &["locenc"], &move |tape, st| {
        let emb = location_encoder::encode_batch(tape, st, &cfg_c, &points_c).unwrap();
        let weighted = tape.mul(emb, tape.input(weight_loc.clone())).unwrap();
        tape.mean_all(weighted)
    });
    report.push(("location encoder", n, err));
    total_checked += n;
    assert!(err < tol, "location encoder rel err {err}");

    // Refiner encoder-decoder.
    let cfg_c = cfg.clone();
    let (n, err) = finite_difference_check(&mut state, &["georefiner"], &move |tape, st| {
        let f = tape.input(probe_frames.clone());
        let q = tape.input(probe_queries.clone());
        let out = georefiner::forward(
            tape,
            st,
            &cfg_c,
            f,
            q,
            Mode::Eval,
            &StreamRng::new(0),
            false,
        )
        .unwrap();
        let weighted = tape.mul(out, tape.input(weight_ref.clone())).unwrap();
        tape.mean_all(weighted)
    });
    report.push(("refiner", n, err));
    total_checked += n;
    assert!(err < tol, "refiner rel err {err}");

    // Contrastive loss w.r.t. its embedding inputs and temperature.
    let mut rng_v = StreamRng::new(11).stream("v");
    let mut v0 = Tensor::<f64>::randn(&[4, cfg.embed_dim], 1.0, &mut rng_v);
    v0.normalize_rows_in_place(1e-12);
    let g0 = Tensor::<f64>::randn(&[4, cfg.embed_dim], 1.0, &mut rng_v);
    state.insert("probe.v", v0, true).unwrap();
    state.insert("probe.g", g0, true).unwrap();
    let (n, err) = finite_difference_check(&mut state, &["probe", "objectives"], &|tape, st| {
        let v = tape.param(st, "probe.v").unwrap();
        let g = tape.param(st, "probe.g").unwrap();
        contrastive_loss(tape, st, v, g, false).unwrap()
    });
    report.push(("contrastive loss", n, err));
    total_checked += n;
    assert!(err < tol, "contrastive loss rel err {err}");

    // Weighted hinge loss (frame + video terms) w.r.t. both embedding sets.
    let mut rng_h = StreamRng::new(12).stream("h");
    let refined0 = Tensor::<f64>::randn(&[4, cfg.embed_dim], 1.0, &mut rng_h);
    let target0 = Tensor::<f64>::randn(&[4, cfg.embed_dim], 1.0, &mut rng_h);
    state.insert("hinge.refined", refined0, true).unwrap();
    state.insert("hinge.target", target0, true).unwrap();
    let (n, err) = finite_difference_check(&mut state, &["hinge"], &|tape, st| {
        let r = tape.param(st, "hinge.refined").unwrap();
        let t = tape.param(st, "hinge.target").unwrap();
        let rs = video_level_pool(tape, r, &[2, 2]).unwrap();
        let ts = video_level_pool(tape, t, &[2, 2]).unwrap();
        weighted_hinge_loss(tape, r, t, rs, ts, HingeWeights::default()).unwrap()
    });
    report.push(("weighted hinge loss", n, err));
    total_checked += n;
    assert!(err < tol, "hinge loss rel err {err}");

    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "gradient checks took {elapsed:?}"
    );
    for (name, n, err) in &report {
        println!("  {name}: {n} components, worst rel err {err:.2e}");
    }
    println!(
        "criterion 1 (gradient correctness, {total_checked} components, {:.1?}): PASS",
        elapsed
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: DFD dynamic program vs exhaustive coupling enumeration.
// ---------------------------------------------------------------------------

fn planar(a: GpsPoint, b: GpsPoint) -> f64 {
    ((a.lat - b.lat).powi(2) + (a.lon - b.lon).powi(2)).sqrt()
}

fn dfd_enumerate(a: &[GpsPoint], b: &[GpsPoint], i: usize, j: usize) -> f64 {
    let d = planar(a[i], b[j]);
    if i == a.len() - 1 && j == b.len() - 1 {
        return d;
    }
    let mut best = f64::INFINITY;
    if i + 1 < a.len() {
        best = best.min(dfd_enumerate(a, b, i + 1, j));
    }
    if j + 1 < b.len() {
        best = best.min(dfd_enumerate(a, b, i, j + 1));
    }
    if i + 1 < a.len() && j + 1 < b.len() {
        best = best.min(dfd_enumerate(a, b, i + 1, j + 1));
    }
    best.max(d)
}

#[test]
fn criterion_2_dfd_oracle() {
    let mut rng = StreamRng::new(2024).stream("dfd-acceptance");
    for trial in 0..200 {
        let mut mk = |n: usize| -> Vec<GpsPoint> {
            (0..n)
                .map(|_| GpsPoint::new(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)).unwrap())
                .collect()
        };
        let len_a = 1 + (trial % 6);
        let len_b = 1 + ((trial * 7 + 3) % 6);
        let a = mk(len_a);
        let b = mk(len_b);
        let dp = discrete_frechet(&a, &b, TrajectoryMetric::Planar).unwrap();
        let oracle = dfd_enumerate(&a, &b, 0, 0);
        assert!(
            (dp - oracle).abs() < 1e-9,
            "trial {trial}: dp {dp} vs oracle {oracle}"
        );
    }
    println!("criterion 2 (DFD coupling-enumeration oracle, 200 pairs): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 3: loss identities.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_loss_identities() {
    // Uniform logits => exactly ln N.
    let n = 9;
    let mut v = Tensor::<f64>::zeros(&[n, 6]);
    let mut g = Tensor::<f64>::zeros(&[n, 6]);
    for i in 0..n {
        v.row_mut(i)[0] = 1.0;
        g.row_mut(i)[1] = 1.0;
    }
    let mut cfg = ModelConfig::toy();
    cfg.logit_scale_init = 11.3;
    let mut state = ModelState::new();
    objectives::init(&mut state, &cfg).unwrap();
    let tape = Tape::new();
    let loss = contrastive_loss(&tape, &state, tape.input(v), tape.input(g), false).unwrap();
    let uniform = tape.scalar_value(loss);
    assert!(
        (uniform - (n as f64).ln()).abs() < 1e-6,
        "uniform-logit loss {uniform} vs ln {n}"
    );

    // Hinge loss vanishes at a perfect identity similarity matrix.
    let tape = Tape::new();
    let r = tape.input(identity::<f64>(3));
    let t = tape.input(identity::<f64>(3));
    let seq = tape.input(Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap());
    let zero = weighted_hinge_loss(&tape, r, t, seq, seq, HingeWeights::default()).unwrap();
    assert!(tape.scalar_value(zero).abs() < 1e-12);

    // Hand-computed 2x2 contrastive case: identity logits at scale 1.
    let mut state1 = ModelState::new();
    let mut cfg1 = ModelConfig::toy();
    cfg1.logit_scale_init = 1.0;
    objectives::init(&mut state1, &cfg1).unwrap();
    let tape = Tape::new();
    let loss = contrastive_loss(
        &tape,
        &state1,
        tape.input(identity::<f64>(2)),
        tape.input(identity::<f64>(2)),
        false,
    )
    .unwrap();
    let expected = (1.0 + (-1.0f64).exp()).ln();
    assert!((tape.scalar_value(loss) - expected).abs() < 1e-6);

    // Hand-computed 2x2 hinge cases (alpha 10, beta 1).
    let tape = Tape::new();
    let c = 0.5f64;
    let s = (1.0 - c * c).sqrt();
    let refined = Tensor::<f64>::from_vec(&[2, 4], vec![c, 0.0, s, 0.0, 0.0, c, 0.0, s]).unwrap();
    let target = Tensor::<f64>::from_vec(&[2, 4], vec![1., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
    let seq = tape.input(Tensor::from_vec(&[1, 4], vec![1., 0., 0., 0.]).unwrap());
    let diag_loss = weighted_hinge_loss(
        &tape,
        tape.input(refined),
        tape.input(target),
        seq,
        seq,
        HingeWeights::default(),
    )
    .unwrap();
    assert!((tape.scalar_value(diag_loss) - 0.25).abs() < 1e-6);

    let tape = Tape::new();
    let c = 0.3f64;
    let s = (1.0 - c * c).sqrt();
    let rows = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, c, s]).unwrap();
    let seq = tape.input(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
    let off_loss = weighted_hinge_loss(
        &tape,
        tape.input(rows.clone()),
        tape.input(rows),
        seq,
        seq,
        HingeWeights::default(),
    )
    .unwrap();
    assert!((tape.scalar_value(off_loss) - 1.8).abs() < 1e-6);

    println!("criterion 3 (loss identities: ln N, zero at identity, 2x2 hand values): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 4: geodesy.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_geodesy() {
    // Equal-area check: Jacobian determinant / cos(phi) constant to 1e-5.
    let h = 1e-5f64;
    let det_over_cos = |lat_deg: f64| -> f64 {
        let lam = 10.0f64.to_radians();
        let phi = lat_deg.to_radians();
        let at = |phi: f64, lam: f64| {
            equal_earth_forward(GpsPoint {
                lat: phi.to_degrees(),
                lon: lam.to_degrees(),
            })
        };
        let dx_dlam = (at(phi, lam + h).x - at(phi, lam - h).x) / (2.0 * h);
        let dy_dlam = (at(phi, lam + h).y - at(phi, lam - h).y) / (2.0 * h);
        let dx_dphi = (at(phi + h, lam).x - at(phi - h, lam).x) / (2.0 * h);
        let dy_dphi = (at(phi + h, lam).y - at(phi - h, lam).y) / (2.0 * h);
        (dx_dlam * dy_dphi - dx_dphi * dy_dlam) / phi.cos()
    };
    let reference = det_over_cos(0.0);
    for lat in [0.0, 30.0, -30.0, 60.0, -60.0, 85.0, -85.0] {
        let ratio = det_over_cos(lat) / reference;
        assert!((ratio - 1.0).abs() < 1e-5, "lat {lat}: ratio {ratio}");
    }

    // One equatorial degree.
    let d = haversine_km(
        GpsPoint::new(0.0, 0.0).unwrap(),
        GpsPoint::new(0.0, 1.0).unwrap(),
    );
    assert!((d - 111.1951).abs() < 1e-3, "equatorial degree {d}");
    let expected = std::f64::consts::TAU * EARTH_RADIUS_KM / 360.0;
    assert!((d - expected).abs() < 1e-9);

    // Standardized coordinates live in [-1, 1].
    let mut rng = StreamRng::new(4).stream("std");
    for _ in 0..10_000 {
        let p = GpsPoint::new(rng.uniform(-90.0, 90.0), rng.uniform(-180.0, 180.0)).unwrap();
        let c = standardized_coords(p);
        assert!(c[0].abs() <= 1.0 + 1e-12 && c[1].abs() <= 1.0 + 1e-12);
    }

    println!("criterion 4 (equal-area Jacobian, closed-form haversine): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 5: gallery construction.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_gallery() {
    // Area-formula count within the fencepost band for a 10 x 20 km extent.
    let km_per_deg = std::f64::consts::TAU * EARTH_RADIUS_KM / 360.0;
    let extent = gallery::RegionExtent {
        lat_min: 0.0,
        lat_max: 10.0 / km_per_deg,
        lon_min: 0.0,
        lon_max: 20.0 / km_per_deg,
    };
    let nominal = gallery::nominal_point_count(&extent, 0.5);
    assert_eq!(nominal, 800);
    let grid = gallery::build_grid(&extent, 0.5).unwrap();
    assert_eq!(grid.len(), 21 * 41);
    let band = 21 + 41 + 1;
    assert!((grid.len() as i64 - nominal as i64).unsigned_abs() as usize <= band);

    // Covering property on 1000 random interior points.
    let extent2 = gallery::RegionExtent {
        lat_min: 40.0,
        lat_max: 40.30,
        lon_min: -74.30,
        lon_max: -74.0,
    };
    let res = 0.5;
    let grid2 = gallery::build_grid(&extent2, res).unwrap();
    let bound = res * 2f64.sqrt() / 2.0 * 1.05;
    let mut rng = StreamRng::new(5).stream("cover");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let q = GpsPoint::new(
            rng.uniform(extent2.lat_min, extent2.lat_max),
            rng.uniform(extent2.lon_min, extent2.lon_max),
        )
        .unwrap();
        let nearest = grid2
            .iter()
            .map(|p| haversine_km(q, *p))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(nearest);
    }
    assert!(worst <= bound, "worst covering distance {worst} > {bound}");

    // Quadratic scaling of count with 1/resolution.
    let coarse = gallery::build_grid(&extent2, 1.0).unwrap().len() as f64;
    let fine = gallery::build_grid(&extent2, 0.5).unwrap().len() as f64;
    let ratio = fine / coarse;
    assert!((ratio - 4.0).abs() / 4.0 < 0.05, "scaling ratio {ratio}");

    println!(
        "criterion 5 (grid count band, covering {worst:.3} km <= {bound:.3} km, quadratic scaling): PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: noise-model statistics.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_noise_statistics() {
    let gt: Vec<GpsPoint> = (0..16)
        .map(|i| GpsPoint::new(40.0 + i as f64 * 0.01, -74.0 - i as f64 * 0.01).unwrap())
        .collect();

    // Collapse fraction 0.10 +- 0.01 over 10,000 sequences.
    let cfg = NoiseConfig::default();
    let root = StreamRng::new(42).stream("acceptance-noise");
    let mut collapsed = 0;
    for i in 0..10_000u64 {
        let out = corrupt_sequence(&gt, &cfg, &mut root.substream(i)).unwrap();
        if out.iter().all(|p| *p == out[0]) {
            collapsed += 1;
        }
    }
    let fraction = collapsed as f64 / 10_000.0;
    assert!((fraction - 0.10).abs() <= 0.01, "collapse fraction {fraction}");

    // Jitter magnitudes within [0.001, 0.02] (shift disabled to isolate).
    let jitter_cfg = NoiseConfig {
        collapse_prob: 0.0,
        shift_min_deg: 0.0,
        shift_max_deg: 0.0,
        ..NoiseConfig::default()
    };
    let root_j = StreamRng::new(43).stream("jitter");
    for i in 0..2000u64 {
        let out = corrupt_sequence(&gt, &jitter_cfg, &mut root_j.substream(i)).unwrap();
        for (o, g) in out.iter().zip(&gt) {
            for mag in [(o.lat - g.lat).abs(), (o.lon - g.lon).abs()] {
                assert!((0.001..=0.02).contains(&mag), "jitter {mag}");
            }
        }
    }

    // Shift within [-0.2, 0.2], shared per sequence (jitter disabled).
    let shift_cfg = NoiseConfig {
        collapse_prob: 0.0,
        jitter_min_deg: 0.0,
        jitter_max_deg: 0.0,
        ..NoiseConfig::default()
    };
    let root_s = StreamRng::new(44).stream("shift");
    for i in 0..2000u64 {
        let out = corrupt_sequence(&gt, &shift_cfg, &mut root_s.substream(i)).unwrap();
        let dlat = out[0].lat - gt[0].lat;
        let dlon = out[0].lon - gt[0].lon;
        assert!((-0.2..=0.2).contains(&dlat) && (-0.2..=0.2).contains(&dlon));
        for (o, g) in out.iter().zip(&gt) {
            assert!((o.lat - g.lat - dlat).abs() < 1e-12);
            assert!((o.lon - g.lon - dlon).abs() < 1e-12);
        }
    }

    println!(
        "criterion 6 (collapse {fraction:.3} in 0.10 +- 0.01, jitter and shift ranges): PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: end-to-end synthetic benchmark.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_end_to_end() {
    let bench = benchmark();
    assert!(
        bench.elapsed < Duration::from_secs(600),
        "benchmark took {:?}",
        bench.elapsed
    );

    // Step-0 loss of phase I sits at ln N for random init.
    let ln_n = (bench.first_batch_rows as f64).ln();
    assert!(
        (bench.first_step_loss - ln_n).abs() / ln_n < 0.10,
        "first step loss {} vs ln N {ln_n}",
        bench.first_step_loss
    );

    // Phase I: top-1 at least 10x the random baseline.
    assert!(
        bench.top1 >= 10.0 * bench.random_baseline,
        "top1 {} vs 10x baseline {}",
        bench.top1,
        10.0 * bench.random_baseline
    );
    assert!(bench.top1 >= PIN_TOP1, "top1 {} below pin {PIN_TOP1}", bench.top1);

    // Phase I: >= 90% of held-out frames within 2x grid resolution.
    assert!(
        bench.within_2res >= 0.90,
        "within 2x resolution: {}",
        bench.within_2res
    );
    assert!(
        bench.within_2res >= PIN_WITHIN_2RES,
        "within 2x resolution {} below pin {PIN_WITHIN_2RES}",
        bench.within_2res
    );

    // Phase II: refined strictly below the corrupted-query baseline.
    assert!(
        bench.refined_median < bench.corrupted_median,
        "refined {} vs corrupted {}",
        bench.refined_median,
        bench.corrupted_median
    );
    assert!(
        bench.refined_median <= PIN_REFINED_VS_CORRUPTED_MEDIAN,
        "refined median {} above pin",
        bench.refined_median
    );

    // Collapse recovery: refined predictions spread out again in more than
    // half of the fully collapsed sequences.
    assert!(
        bench.collapse_undone > 0.5,
        "collapse undone fraction {}",
        bench.collapse_undone
    );

    println!(
        "criterion 7 (end-to-end, {:.0?}: top1 {:.3} vs baseline {:.4}, within-2res {:.3}, \
         corrupted {:.2} km -> refined {:.2} km, collapse undone {:.2}): PASS",
        bench.elapsed,
        bench.top1,
        bench.random_baseline,
        bench.within_2res,
        bench.corrupted_median,
        bench.refined_median,
        bench.collapse_undone
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: ablation harness.
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_ablation() {
    let bench = benchmark();
    // Table structure: 3 configurations x 5 metric columns.
    assert_eq!(bench.table.rows.len(), 3);
    let markdown = bench.table.to_markdown();
    for column in ["Acc@1km", "Acc@5km", "Median", "DFD", "MRD"] {
        assert!(markdown.contains(column), "missing column {column}");
    }
    for label in ["identity aligner", "aligner", "aligner + refiner"] {
        assert!(bench.table.rows.iter().any(|r| r.label == label));
    }

    // Full configuration's DFD at or below the no-refiner configuration's.
    let no_refiner = &bench.table.rows[1];
    let full = &bench.table.rows[2];
    assert!(
        full.dfd_mean <= no_refiner.dfd_mean,
        "full DFD {} vs no-refiner DFD {}",
        full.dfd_mean,
        no_refiner.dfd_mean
    );
    assert!(full.dfd_mean <= PIN_REFINED_DFD, "full DFD {} above pin", full.dfd_mean);
    assert!(
        no_refiner.dfd_mean >= PIN_INITIAL_DFD_MIN,
        "no-refiner DFD {} below pin (stage 1 lost its outliers?)",
        no_refiner.dfd_mean
    );

    // Identity-aligner configuration is bit-equivalent to bypassing the
    // module: frozen zero-init blocks and a skipped forward must produce
    // byte-identical checkpoints and predictions.
    let cfg_small = {
        let mut c = bench.cfg.clone();
        c.tempgeo_dropout = 0.1; // exercise dropout stream independence
        c
    };
    let small: Vec<FrameSequence> = bench.sequences[..24].to_vec();
    let train_small = TrainConfig {
        epochs: 3,
        batch_sequences: 8,
        ..TrainConfig::phase1_toy(42)
    };

    let mut bypass_cfg = cfg_small.clone();
    bypass_cfg.tempgeo_enabled = false;
    let bypass = train_phase1(&small, &bypass_cfg, &train_small, &mut TrainLog::memory()).unwrap();

    let frozen_train = TrainConfig {
        freeze_tempgeo: true,
        ..train_small.clone()
    };
    let frozen =
        train_phase1(&small, &cfg_small, &frozen_train, &mut TrainLog::memory()).unwrap();

    let dir = std::env::temp_dir().join("vidtag_acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let bypass_path = dir.join("bypass.vtck");
    let frozen_path = dir.join("frozen.vtck");
    bypass.state.save(&bypass_path).unwrap();
    frozen.state.save(&frozen_path).unwrap();
    let bypass_bytes = std::fs::read(&bypass_path).unwrap();
    let frozen_bytes = std::fs::read(&frozen_path).unwrap();
    // The stored configs differ in exactly the aligner-enabled flag; strip
    // the meta tensor by comparing parameters directly instead of bytes.
    let mut names_checked = 0;
    for (name, p) in bypass.state.iter() {
        if name == "meta.config" {
            continue;
        }
        let q = frozen.state.get(name).unwrap();
        assert_eq!(p.value, q.value, "parameter {name} differs");
        names_checked += 1;
    }
    assert!(names_checked > 0);
    assert_eq!(bypass_bytes.len(), frozen_bytes.len());

    // Predictions agree bit-for-bit as well.
    let probe: Vec<&FrameSequence> = small[..4].iter().collect();
    let points: Vec<GpsPoint> = small.iter().flat_map(|s| s.gps.iter().copied()).collect();
    let mut g = build_uniform_gallery(
        &points,
        &GalleryConfig {
            resolution_km: 2.0,
            padding_deg: 0.02,
            ..GalleryConfig::default()
        },
    )
    .unwrap();
    g.embeddings = Some(
        location_encoder::embed_gallery(&bypass.state, &bypass_cfg, &g.points, true).unwrap(),
    );
    let preds_bypass = infer_dataset(&probe, &bypass.state, &bypass_cfg, &g, Stage::Initial).unwrap();
    let mut g2 = g.clone();
    g2.embeddings = Some(
        location_encoder::embed_gallery(&frozen.state, &cfg_small, &g2.points, true).unwrap(),
    );
    let preds_frozen = infer_dataset(&probe, &frozen.state, &cfg_small, &g2, Stage::Initial).unwrap();
    assert_eq!(preds_bypass.len(), preds_frozen.len());
    for (a, b) in preds_bypass.iter().zip(&preds_frozen) {
        assert_eq!(a.gallery_index, b.gallery_index);
        assert_eq!(a.score.to_bits(), b.score.to_bits());
    }

    println!(
        "criterion 8 (ablation: 3x5 table, bypass bit-equivalence, DFD {:.3} <= {:.3}): PASS\n{}",
        full.dfd_mean, no_refiner.dfd_mean, markdown
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: determinism and round-trips.
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_determinism_and_round_trips() {
    let cfg = {
        let mut c = micro_config();
        c.d_clip = 12;
        c.d_dino = 20;
        c.tempgeo_heads = 4;
        c.refiner_heads = 2;
        c
    };
    let world = SyntheticWorldConfig {
        sequences: 24,
        frames_per_sequence: 10,
        ..SyntheticWorldConfig::default()
    };
    let records = generate(&world, &cfg, 7).unwrap();
    let sequences = build_sequences(&cfg, &records).unwrap();
    let train = TrainConfig {
        epochs: 3,
        batch_sequences: 8,
        frames_per_sequence: 8,
        ..TrainConfig::phase1_toy(7)
    };

    // Byte-identical checkpoints across two training runs.
    let dir = std::env::temp_dir().join("vidtag_acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let run = |path: &std::path::Path| {
        let out = train_phase1(&sequences, &cfg, &train, &mut TrainLog::memory()).unwrap();
        out.state.save(path).unwrap();
        out
    };
    let path_a = dir.join("det_a.vtck");
    let path_b = dir.join("det_b.vtck");
    let out_a = run(&path_a);
    let _out_b = run(&path_b);
    let bytes_a = std::fs::read(&path_a).unwrap();
    let bytes_b = std::fs::read(&path_b).unwrap();
    assert_eq!(bytes_a, bytes_b, "checkpoints differ between identical runs");

    // Checkpoint round-trip: reloaded weights produce identical predictions.
    let points: Vec<GpsPoint> = sequences.iter().flat_map(|s| s.gps.iter().copied()).collect();
    let mut g = build_uniform_gallery(
        &points,
        &GalleryConfig {
            resolution_km: 2.0,
            padding_deg: 0.02,
            ..GalleryConfig::default()
        },
    )
    .unwrap();
    g.embeddings =
        Some(location_encoder::embed_gallery(&out_a.state, &cfg, &g.points, true).unwrap());
    let probe: Vec<&FrameSequence> = sequences[..4].iter().collect();
    let preds = infer_dataset(&probe, &out_a.state, &cfg, &g, Stage::Initial).unwrap();

    let reloaded = ModelState::<f32>::load(&path_a).unwrap();
    let cfg_reloaded = ModelConfig::load_from(&reloaded).unwrap();
    let mut g_re = g.clone();
    g_re.embeddings = Some(
        location_encoder::embed_gallery(&reloaded, &cfg_reloaded, &g_re.points, true).unwrap(),
    );
    let preds_re = infer_dataset(&probe, &reloaded, &cfg_reloaded, &g_re, Stage::Initial).unwrap();
    for (a, b) in preds.iter().zip(&preds_re) {
        assert_eq!(a.gallery_index, b.gallery_index);
        assert_eq!(a.score.to_bits(), b.score.to_bits());
    }

    // Predictions file round-trip is lossless to a microdegree.
    let pred_path = dir.join("preds.csv");
    retrieval::write_predictions_csv(&pred_path, &preds).unwrap();
    let loaded = retrieval::read_predictions_csv(&pred_path).unwrap();
    assert_eq!(loaded.len(), preds.len());
    for (a, b) in loaded.iter().zip(&preds) {
        assert!((a.point.lat - b.point.lat).abs() < 1e-6);
        assert!((a.point.lon - b.point.lon).abs() < 1e-6);
    }

    // Gallery CSV round-trip.
    let gal_path = dir.join("gallery.csv");
    gallery::write_gallery_csv(&gal_path, &g).unwrap();
    let g_loaded = gallery::read_gallery_csv(&gal_path).unwrap();
    assert_eq!(g_loaded.points.len(), g.points.len());
    for (a, b) in g_loaded.points.iter().zip(&g.points) {
        assert!((a.lat - b.lat).abs() < 1e-6 && (a.lon - b.lon).abs() < 1e-6);
    }

    // Flat scan equals the naive oracle on 1000 random queries.
    let emb = g.embeddings.as_ref().unwrap();
    let d = emb.cols();
    let mut rng = StreamRng::new(31).stream("scan");
    for _ in 0..1000 {
        let mut q: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
        let norm = q.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32;
        q.iter_mut().for_each(|x| *x /= norm);
        let mut best = (0usize, f32::NEG_INFINITY);
        for i in 0..emb.rows() {
            let dot: f32 = emb.row(i).iter().zip(&q).map(|(a, b)| a * b).sum();
            if dot > best.1 {
                best = (i, dot);
            }
        }
        let hit = retrieval::topk(&q, emb, 1)[0];
        assert_eq!(hit.0, best.0);
        assert_eq!(hit.1.to_bits(), best.1.to_bits());
    }

    println!("criterion 9 (byte-identical checkpoints, lossless round-trips, scan oracle): PASS");
}

// ---------------------------------------------------------------------------
// Benchmark-dependent behavior checks beyond the numbered criteria.
// ---------------------------------------------------------------------------

/// The denoiser improves the trajectory metrics of the full pipeline and
/// improves the median at the noisy-alignment operating point.
#[test]
fn denoiser_improves_noisy_alignment_median() {
    let cfg = ModelConfig::toy();
    let world = SyntheticWorldConfig {
        sequences: 96,
        ..SyntheticWorldConfig::default()
    };
    let records = generate(&world, &cfg, 42).unwrap();
    let sequences = build_sequences(&cfg, &records).unwrap();
    // Deliberately undertrained phase I: the regime where per-frame
    // alignment is noisy and denoising pays off on the median too.
    let phase1 = TrainConfig {
        epochs: 30,
        ..TrainConfig::phase1_toy(42)
    };
    let mut log = TrainLog::memory();
    let p1 = train_phase1(&sequences, &cfg, &phase1, &mut log).unwrap();
    let p2 = vidtag::training::train_phase2(
        &sequences,
        p1.state,
        &TrainConfig::phase2_toy(42),
        &mut log,
    )
    .unwrap();

    let probe_seqs: Vec<&FrameSequence> = p2.probe_indices.iter().map(|&i| &sequences[i]).collect();
    let train_points: Vec<GpsPoint> = sequences
        .iter()
        .enumerate()
        .filter(|(i, _)| !p2.probe_indices.contains(i))
        .flat_map(|(_, s)| s.gps.iter().copied())
        .collect();
    let mut g = build_uniform_gallery(
        &train_points,
        &GalleryConfig {
            resolution_km: BENCH_RESOLUTION_KM,
            padding_deg: 0.02,
            ..GalleryConfig::default()
        },
    )
    .unwrap();
    g.embeddings =
        Some(location_encoder::embed_gallery(&p2.state, &cfg, &g.points, true).unwrap());

    let manifest: Vec<ManifestRow> = probe_seqs
        .iter()
        .flat_map(|s| {
            s.frame_indices.iter().zip(&s.gps).map(|(idx, gps)| ManifestRow {
                seq_id: s.seq_id.clone(),
                frame_idx: *idx,
                gps: *gps,
            })
        })
        .collect();
    let med = |stage: Stage| -> f64 {
        let preds = infer_dataset(&probe_seqs, &p2.state, &cfg, &g, stage).unwrap();
        let by_key: std::collections::BTreeMap<(String, u32), GpsPoint> = manifest
            .iter()
            .map(|m| ((m.seq_id.clone(), m.frame_idx), m.gps))
            .collect();
        let errs: Vec<f64> = preds
            .iter()
            .map(|p| haversine_km(p.point, by_key[&(p.seq_id.clone(), p.frame_idx)]))
            .collect();
        median(&errs)
    };
    let initial = med(Stage::Initial);
    let refined = med(Stage::Refined);
    assert!(
        refined <= initial,
        "refined median {refined} vs initial {initial}"
    );
    println!("denoiser at noisy alignment: initial {initial:.3} km -> refined {refined:.3} km");
}

/// Trained location embeddings are local: a point 100 m away is far more
/// similar than a point on another continent.
#[test]
fn trained_location_embeddings_are_local() {
    let bench = benchmark();
    let state = &bench.phase1_state;
    let cfg = &bench.cfg;
    let cos = |a: &[f32], b: &[f32]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let here = location_encoder::encode_gps(state, cfg, GpsPoint::new(40.1, -74.1).unwrap()).unwrap();
    let near = location_encoder::encode_gps(state, cfg, GpsPoint::new(40.101, -74.1).unwrap()).unwrap();
    let far = location_encoder::encode_gps(state, cfg, GpsPoint::new(-33.9, 151.2).unwrap()).unwrap();
    let near_cos = cos(&here, &near);
    let far_cos = cos(&here, &far);
    assert!(
        near_cos > far_cos,
        "near cosine {near_cos} vs far cosine {far_cos}"
    );
    println!("locality: cos(100 m) {near_cos:.4} > cos(other continent) {far_cos:.4}");
}
