//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default; pass criterion numbers as arguments
//! (`cargo test --test acceptance -- 2 7`) to run a subset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scent_core::cli::config::RunConfig;
use scent_core::cli::run::{generate_dataset, load_dataset, train, TrainOptions};
use scent_core::distill::{distillation_loss, Direction, FeatureNodes, GinProjector};
use scent_core::evalkit::{compute_metrics, run_benchmark, Condition, MetricRecord, DELTA_BASE};
use scent_core::featviz::{visualize_features, VizConfig};
use scent_core::geometry::{backproject, project, synthesize_view, Intrinsics, PoseVar, SE3Pose};
use scent_core::losscheck::loss_suite;
use scent_core::nn::{Binder, ParamStore};
use scent_core::models::{ModelBundle, MAX_DEPTH, MIN_DEPTH};
use scent_core::objective::{total_loss, LossWeights, Toggles};
use scent_core::optim::{Adam, AdamConfig};
use scent_core::retinex::{gram, illumination_loss, orthogonality_loss, ALPHA_VCLAMP};
use scent_core::synth::{random_scene, CorruptionKind};
use scent_core::tensor::{Precision, Tape, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome { passed, detail: detail.into() }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1. Gradient integrity ----------------------------------------------------

fn gradient_integrity() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut compared = 0;
    for seed in 0..20 {
        let suite = loss_suite(seed, Precision::Double).unwrap();
        for r in &suite.gradients {
            compared += r.compared;
            if r.relative_error > worst.0 {
                worst = (r.relative_error, r.name.clone());
            }
            if !r.passed || r.compared == 0 {
                failures.push(format!("{}@{seed} rel {:.2e}", r.name, r.relative_error));
            }
        }
        for r in &suite.stop_gradients {
            if !r.passed {
                failures.push(format!("stop-gradient {}@{seed} |g| {:e}", r.name, r.max_abs_grad));
            }
        }
    }
    let detail = format!(
        "20 seeds, 8 losses, 4 stop-gradient contracts; worst rel err {:.2e} ({}), {compared} coordinates compared{}",
        worst.0,
        worst.1,
        if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
    );
    Outcome::new(failures.is_empty() && worst.0 <= 1e-5, detail)
}

// 2. Geometry oracle -------------------------------------------------------

fn geometry_oracle() -> Outcome {
    let mut rng = seeded(2);
    let mut round_trip = 0.0f64;
    for _ in 0..20 {
        let (w, h) = (rng.random_range(4..12), rng.random_range(3..10));
        let k = Intrinsics::new(
            rng.random_range(3.0..20.0),
            rng.random_range(3.0..20.0),
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
            w,
            h,
        )
        .unwrap();
        let depth = random(&mut rng, &[1, 1, h, w], 0.5, 50.0);
        let pose = SE3Pose::from_axis_angle(
            [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)],
            [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
        );
        let t = Tape::new(Precision::Double);
        let points = backproject(t.constant(depth.clone()), &k).unwrap();
        let proj = project(points, &PoseVar::constant(&t, &pose), &k).unwrap();
        let (pts, coords) = (points.value(), proj.coords.value());
        let inv = pose.inverse();
        for v in 0..h {
            for u in 0..w {
                let p = [pts.at4(0, 0, v, u), pts.at4(0, 1, v, u), pts.at4(0, 2, v, u)];
                let z = pose.apply(p)[2];
                let ray = k.ray(coords.at4(0, 0, v, u), coords.at4(0, 1, v, u));
                let back = inv.apply([ray[0] * z, ray[1] * z, z]);
                // pixel → point → other camera → pixel → point → original camera
                let err = (0..3).map(|i| (back[i] - p[i]).abs()).fold(0.0, f64::max);
                round_trip = round_trip.max(err / p[2].max(1.0));
                let ray0 = k.ray(u as f64, v as f64);
                round_trip = round_trip.max((ray0[0] * depth.at4(0, 0, v, u) - p[0]).abs());
            }
        }
    }

    let mut scale_err = 0.0f64;
    let mut l1 = Vec::new();
    for seed in 0..20 {
        let s = random_scene(1000 + seed, 64, 48).unwrap();
        let k = s.target.intrinsics;
        let t = Tape::new(Precision::Double);
        for (i, src) in s.sources.iter().enumerate() {
            let pose = s.gt_poses[i];
            let syn = synthesize_view(t.constant(src.image.clone()), t.constant(s.gt_depth.clone()), &PoseVar::constant(&t, &pose), &k)
                .unwrap();
            for scale in [0.5, 2.0, 10.0] {
                let scaled = synthesize_view(
                    t.constant(src.image.clone()),
                    t.constant(s.gt_depth.map(|d| d * scale)),
                    &PoseVar::constant(&t, &pose.with_scaled_translation(scale)),
                    &k,
                )
                .unwrap();
                scale_err = scale_err.max(scaled.mask.max_abs_diff(&syn.mask));
                scale_err = scale_err.max(scaled.image.value().max_abs_diff(&syn.image.value()));
            }
            let (img, mask) = (syn.image.value(), &syn.mask);
            let (mut acc, mut n) = (0.0, 0.0);
            for c in 0..3 {
                for y in 0..k.height {
                    for x in 0..k.width {
                        if mask.at4(0, 0, y, x) > 0.0 {
                            acc += (img.at4(0, c, y, x) - s.target.image.at4(0, c, y, x)).abs();
                            n += 1.0;
                        }
                    }
                }
            }
            l1.push(acc / n);
        }
    }
    let worst_l1 = l1.iter().cloned().fold(0.0, f64::max);
    let mean_l1 = l1.iter().sum::<f64>() / l1.len() as f64;
    Outcome::new(
        round_trip <= 1e-5 && scale_err <= 1e-6 && worst_l1 <= 2e-2,
        format!(
            "round trip {round_trip:.1e} (≤1e-5); scale invariance {scale_err:.1e} (≤1e-6); GT synthesis L1 worst {worst_l1:.4}, mean {mean_l1:.4} over 40 views, each ≤2e-2"
        ),
    )
}

// 3. Metric oracle ---------------------------------------------------------

fn oracle_metrics(pred: &[f64], gt: &[f64], median_scale: bool) -> [f64; 7] {
    let median = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 }
    };
    let mut p = pred.to_vec();
    if median_scale {
        let mg = median(gt);
        for x in p.iter_mut() {
            *x = x.max(1e-3 * mg).min(1e3 * mg);
        }
        let ratio = mg / median(&p);
        for x in p.iter_mut() {
            *x *= ratio;
        }
    }
    let cap = |x: f64| x.max(MIN_DEPTH).min(MAX_DEPTH);
    let n = gt.len() as f64;
    let (mut abs_rel, mut sq_rel, mut se, mut sle) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0.0; 3];
    for i in 0..gt.len() {
        let (pi, gi) = (cap(p[i]), cap(gt[i]));
        abs_rel += (pi - gi).abs() / gi;
        sq_rel += (pi - gi) * (pi - gi) / gi;
        se += (pi - gi) * (pi - gi);
        sle += ((pi + 1.0).ln() - (gi + 1.0).ln()).powi(2);
        let ratio = if pi > gi { pi / gi } else { gi / pi };
        for r in 0..3 {
            if ratio < DELTA_BASE.powi(r as i32 + 1) {
                hits[r] += 1.0;
            }
        }
    }
    [abs_rel / n, sq_rel / n, (se / n).sqrt(), (sle / n).sqrt(), hits[0] / n, hits[1] / n, hits[2] / n]
}

fn metric_oracle() -> Outcome {
    let mut rng = seeded(3);
    let mut worst = 0.0f64;
    let mut nested = true;
    for i in 0..100 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let gt = random(&mut rng, &[1, 1, h, w], 0.2, 80.0);
        let noise = random(&mut rng, &[1, 1, h, w], -0.6, 0.6);
        let scale = rng.random_range(0.2..5.0);
        let pred = gt.zip_map(&noise, |g, e| g * scale * e.exp()).unwrap();
        let median_scale = i % 2 == 1;
        let rec: MetricRecord = compute_metrics(&pred, &gt, None, median_scale).unwrap();
        let got = [rec.abs_rel, rec.sq_rel, rec.rmse, rec.rmse_log, rec.delta1, rec.delta2, rec.delta3];
        let want = oracle_metrics(pred.data(), gt.data(), median_scale);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        nested &= rec.delta1 <= rec.delta2 && rec.delta2 <= rec.delta3;
    }
    Outcome::new(
        worst <= 1e-12 && nested,
        format!("100 pairs (half median-scaled): max |Δ| {worst:.1e} (≤1e-12); δ1≤δ2≤δ3 {}", if nested { "holds" } else { "violated" }),
    )
}

// 4. Loss-weight fidelity --------------------------------------------------

fn weighted_sum_identity(log: &Path, w: &LossWeights) -> (usize, f64) {
    let weights = [("p", w.lambda_p), ("v", w.lambda_v), ("e", w.lambda_e), ("r", w.lambda_r), ("o", w.lambda_o), ("d", w.lambda_d)];
    let mut steps = 0;
    let mut worst = 0.0f64;
    for line in fs::read_to_string(log).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["record"] != "step" {
            continue;
        }
        let sum: f64 = weights.iter().filter_map(|(k, wk)| v["terms"][k].as_f64().map(|t| wk * t)).sum();
        worst = worst.max((sum - v["total"].as_f64().unwrap()).abs());
        steps += 1;
    }
    (steps, worst)
}

/// Largest gap between the differentiable total and Σ λ·term, for a fresh
/// model on a few scenes.
fn tape_total_gap(weights: LossWeights, toggles: Toggles, precision: Precision) -> f64 {
    let cfg = RunConfig { weights, toggles, ..RunConfig::default() };
    let bundle = ModelBundle::new(cfg.model()).unwrap();
    let objective = cfg.objective();
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let s = random_scene(500 + seed, cfg.width, cfg.height).unwrap();
        let tape = Tape::new(precision);
        let b = Binder::new(&tape, &bundle.store);
        let eb = Binder::new(&tape, &bundle.expert_store);
        let out = total_loss(&bundle, &b, &eb, &s.target, &s.sources, &objective).unwrap();
        let sum: f64 = out.breakdown.terms.weighted(&weights).iter().map(|(_, w, v)| w * v).sum();
        worst = worst.max((out.total.item() - sum).abs()).max((out.breakdown.total - sum).abs());
    }
    worst
}

fn loss_weight_fidelity() -> Outcome {
    let w = LossWeights::default();
    let defaults_ok = (w.lambda_p, w.lambda_e, w.lambda_v, w.lambda_r, w.lambda_o, w.lambda_d) == (1.0, 1.0, 0.1, 0.1, 0.001, 0.001)
        && RunConfig::default().weights == w;

    // distinct weights expose any term paired with the wrong coefficient
    let distinct = LossWeights { lambda_p: 0.7, lambda_v: 0.3, lambda_e: 1.9, lambda_r: 0.45, lambda_o: 2.3, lambda_d: 1.3 };
    let mut tape_gap = 0.0f64;
    for weights in [w, distinct] {
        for toggles in [Toggles::default(), Toggles::baseline()] {
            tape_gap = tape_gap.max(tape_total_gap(weights, toggles, Precision::Double));
        }
    }
    let single_gap = tape_total_gap(w, Toggles::default(), Precision::Single);

    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&dir.path().join("data"), 8, 64, 48, 44, false).unwrap();
    let samples = load_dataset(&dir.path().join("data")).unwrap();
    let mut logged = 0;
    let mut log_gap = 0.0f64;
    for (name, toggles) in [("full", Toggles::default()), ("baseline", Toggles::baseline())] {
        let cfg = RunConfig { epochs: 2, toggles, ..RunConfig::default() };
        let out = dir.path().join(name);
        train(&cfg, &samples, &out, TrainOptions::default()).unwrap();
        let (steps, err) = weighted_sum_identity(&out.join("train.jsonl"), &cfg.weights);
        logged += steps;
        log_gap = log_gap.max(err);
    }
    Outcome::new(
        defaults_ok && tape_gap <= 1e-6 && single_gap <= 1e-6 && logged == 32 && log_gap <= 1e-6,
        format!(
            "defaults {}; |total − Σλ·term| on the tape {tape_gap:.1e} (f64, default and distinct weights, full and baseline), {single_gap:.1e} (f32); over {logged} logged training steps {log_gap:.1e} (all ≤1e-6)",
            if defaults_ok { "match" } else { "DIFFER" }
        ),
    )
}

// 5. Distillation trainability ---------------------------------------------

fn distillation_trainability() -> Outcome {
    const CHANNELS: usize = 8;
    const WIDTH: usize = 48;
    const LR: f64 = 1e-2;
    let mut good = 0;
    let mut runs = Vec::new();
    for seed in 0..10u64 {
        let mut rng = seeded(seed);
        let fe = random(&mut rng, &[CHANNELS, WIDTH], -1.0, 1.0);
        let diag: Vec<f64> = (0..CHANNELS).map(|_| rng.random_range(0.5..2.0)).collect();
        let fs = Tensor::new(&[CHANNELS, WIDTH], (0..CHANNELS * WIDTH).map(|i| fe.data()[i] * diag[i / WIDTH]).collect()).unwrap();
        let mut store = ParamStore::new();
        let es = GinProjector::new(&mut store, &mut rng, "es", CHANNELS, Direction::ExpertToStructure);
        let se = GinProjector::new(&mut store, &mut rng, "se", CHANNELS, Direction::StructureToExpert);
        let mut adam = Adam::new(&store, AdamConfig::default(), Precision::Single);
        let mut first = f64::NAN;
        let last;
        for step in 0..500 {
            let tape = Tape::new(Precision::Single);
            let b = Binder::new(&tape, &store);
            let s = FeatureNodes::new(tape.constant(fs.clone())).unwrap();
            let e = FeatureNodes::new(tape.constant(fe.clone())).unwrap();
            let loss = distillation_loss(&s, &e, &es, &se, &b, true).unwrap();
            if step == 0 {
                first = loss.item();
            }
            tape.backward(loss).unwrap();
            let grads = b.grads();
            drop(b);
            adam.update(&mut store, &grads, |_| LR).unwrap();
        }
        {
            let tape = Tape::new(Precision::Single);
            let b = Binder::new(&tape, &store);
            let s = FeatureNodes::new(tape.constant(fs.clone())).unwrap();
            let e = FeatureNodes::new(tape.constant(fe.clone())).unwrap();
            last = distillation_loss(&s, &e, &es, &se, &b, true).unwrap().item();
        }
        if first >= 1.0 && last <= 0.1 {
            good += 1;
        }
        runs.push(format!("{first:.2}→{last:.4}"));
    }
    Outcome::new(good >= 9, format!("{good}/10 seeds from ≥1.0 to ≤0.1 in 500 projector-only steps (Adam lr {LR}): {}", runs.join(" ")))
}

// 6. End-to-end desk training ----------------------------------------------

const ROBUSTNESS: [CorruptionKind; 3] = [CorruptionKind::Fog, CorruptionKind::MotionBlur, CorruptionKind::Night];

fn end_to_end_training() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (train_dir, test_dir) = (dir.path().join("train"), dir.path().join("heldout"));
    generate_dataset(&train_dir, 200, 64, 48, 2024, false).unwrap();
    generate_dataset(&test_dir, 50, 64, 48, 7, false).unwrap();
    let train_set = load_dataset(&train_dir).unwrap();
    let test_set = load_dataset(&test_dir).unwrap();
    let mut conditions = vec![Condition::Clear];
    conditions.extend(ROBUSTNESS.iter().map(|&kind| Condition::Corrupted { kind, severity: 3 }));

    let jobs: Vec<(u64, bool)> = (0..3u64).flat_map(|s| [(s, true), (s, false)]).collect();
    let results: Mutex<Vec<(u64, bool, Vec<MetricRecord>)>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(seed, full)) = jobs.get(i) else { break };
                let toggles = if full { Toggles::default() } else { Toggles::baseline() };
                let cfg = RunConfig { seed, toggles, ..RunConfig::default() };
                let out = dir.path().join(format!("{}_{seed}", if full { "full" } else { "baseline" }));
                let trained = train(&cfg, &train_set, &out, TrainOptions::default()).unwrap();
                let records = run_benchmark(&trained.bundle, &test_set, &conditions, 0).unwrap();
                results.lock().unwrap().push((seed, full, records));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(seed, full, _)| (*seed, !*full));
    for (seed, full, recs) in &results {
        let cells: Vec<String> = recs.iter().map(|r| format!("{} AbsRel {:.3} δ1 {:.3}", r.condition, r.abs_rel, r.delta1)).collect();
        println!("    seed {seed} {:<8}: {}", if *full { "full" } else { "baseline" }, cells.join(" | "));
    }

    let pick = |full: bool, cond: usize| -> Vec<&MetricRecord> {
        results.iter().filter(|(_, f, _)| *f == full).map(|(_, _, r)| &r[cond]).collect()
    };
    let full_d1: Vec<f64> = pick(true, 0).iter().map(|r| r.delta1).collect();
    let base_d1: Vec<f64> = pick(false, 0).iter().map(|r| r.delta1).collect();
    let accuracy_ok = full_d1.iter().all(|&d| d >= 0.8);
    let mean = |v: &[&MetricRecord]| v.iter().map(|r| r.abs_rel).sum::<f64>() / v.len() as f64;
    let mut wins = 0;
    let mut robustness = Vec::new();
    for (c, kind) in ROBUSTNESS.iter().enumerate() {
        let (f, b) = (mean(&pick(true, c + 1)), mean(&pick(false, c + 1)));
        if f <= b {
            wins += 1;
        }
        robustness.push(format!("{} {f:.3}/{b:.3}", kind.name()));
    }
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join(",");
    Outcome::new(
        accuracy_ok && wins >= 2,
        format!(
            "held-out clear δ1 full [{}] (≥0.80 required), baseline [{}]; sev-3 AbsRel full/baseline (3-seed mean) {}: full no worse on {wins}/3 (≥2 required)",
            fmt(&full_d1),
            fmt(&base_d1),
            robustness.join(", ")
        ),
    )
}

// 7. Feature-visualization fidelity ----------------------------------------

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let (lo, frac) = (pos.floor() as usize, pos - pos.floor());
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Dense reference: centre, covariance, top eigenvector by a library eigen
/// solver, sign convention, projection, percentile clip, 8-bit rescale.
fn viz_oracle(stack: &[Vec<f64>], cfg: &VizConfig) -> Vec<u8> {
    let (c, n) = (stack.len(), cfg.height * cfg.width);
    let mut x = DMatrix::from_fn(c, n, |i, j| stack[i][j]);
    for i in 0..c {
        let mean = x.row(i).sum() / n as f64;
        x.row_mut(i).add_scalar_mut(-mean);
    }
    let cov = &x * x.transpose() / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let top = eig.eigenvalues.imax();
    let mut dir: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    let lead = dir.iter().enumerate().fold(0, |b, (i, v)| if v.abs() > dir[b].abs() { i } else { b });
    if dir[lead] < 0.0 {
        dir.iter_mut().for_each(|v| *v = -*v);
    }
    let scores: Vec<f64> = (0..n).map(|j| (0..c).map(|i| x[(i, j)] * dir[i]).sum()).collect();
    let mut sorted = scores.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = (percentile(&sorted, cfg.clip_lo), percentile(&sorted, cfg.clip_hi));
    scores.iter().map(|s| ((s.max(lo).min(hi) - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

fn feature_viz_fidelity() -> Outcome {
    let mut rng = seeded(7);
    let mut worst = 0i32;
    let mut deterministic = true;
    for _ in 0..50 {
        let cfg = VizConfig::new(rng.random_range(6..24), rng.random_range(6..32));
        let n = cfg.height * cfg.width;
        let maps = rng.random_range(1..3);
        let mut tensors = Vec::new();
        let mut stack = Vec::new();
        for _ in 0..maps {
            let c = rng.random_range(1..6);
            // a few smooth patterns mixed into every channel, plus noise
            let mut t = Tensor::zeros(&[1, c, cfg.height, cfg.width]);
            for ch in 0..c {
                let (a, b, ph) = (rng.random_range(-2.0..2.0), rng.random_range(0.1..0.9), rng.random_range(0.0..6.0));
                for y in 0..cfg.height {
                    for xx in 0..cfg.width {
                        let v = a * ((xx as f64 * b + y as f64 * 0.3 + ph).sin()) + rng.random_range(-0.3..0.3);
                        t.set4(0, ch, y, xx, v);
                    }
                }
                stack.push(t.data()[ch * n..(ch + 1) * n].to_vec());
            }
            tensors.push(t);
        }
        let got = visualize_features(&tensors, &cfg).unwrap();
        let again = visualize_features(&tensors, &cfg).unwrap();
        deterministic &= got == again;
        let want = viz_oracle(&stack, &cfg);
        for (g, w) in got.pixels.iter().zip(&want) {
            worst = worst.max((*g as i32 - *w as i32).abs());
        }
    }

    // outliers beyond the clip percentiles saturate
    let cfg = VizConfig::new(20, 20);
    let mut t = random(&mut rng, &[1, 1, 20, 20], -1.0, 1.0);
    t.set4(0, 0, 3, 4, 1e4);
    t.set4(0, 0, 11, 7, -1e4);
    let img = visualize_features(&[t], &cfg).unwrap();
    let saturates = img.pixels[3 * 20 + 4] == 255 && img.pixels[11 * 20 + 7] == 0;
    Outcome::new(
        worst <= 1 && deterministic && saturates,
        format!(
            "50 stacks vs nalgebra eigen oracle: max diff {worst} gray level(s) (≤1); reruns {}; injected ±1e4 outliers {}",
            if deterministic { "identical" } else { "DIFFER" },
            if saturates { "saturate to 255/0" } else { "do NOT saturate" }
        ),
    )
}

// 8. Retinex bounds --------------------------------------------------------

fn retinex_bounds() -> Outcome {
    let mut rng = seeded(8);
    let (mut min_illum, mut ortho_lo, mut ortho_hi) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let (mut invariance, mut per_channel_change, mut asym, mut min_eig) = (0.0f64, 0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..1000 {
        let t = Tape::new(Precision::Double);
        let (h, w) = (rng.random_range(2..8), rng.random_range(2..8));
        let image = t.constant(random(&mut rng, &[1, 3, h, w], 0.0, 1.0));
        let illum = t.constant(random(&mut rng, &[1, 1, h, w], 1e-3, 1.0));
        let depth = t.constant(random(&mut rng, &[1, 1, h, w], MIN_DEPTH, MAX_DEPTH));
        min_illum = min_illum.min(illumination_loss(image, illum, depth, ALPHA_VCLAMP).unwrap().item());

        let (c, m) = (rng.random_range(1..6), rng.random_range(1..20));
        let fs = random(&mut rng, &[c, m], -1.0, 1.0);
        let ft = random(&mut rng, &[c, m], -1.0, 1.0);
        let o = orthogonality_loss(t.constant(fs.clone()), t.constant(ft.clone())).unwrap().item();
        ortho_lo = ortho_lo.min(o);
        ortho_hi = ortho_hi.max(o);
        let s: f64 = rng.random_range(0.01..100.0);
        let o_s = orthogonality_loss(t.constant(fs.map(|v| v * s)), t.constant(ft.clone())).unwrap().item();
        let o_t = orthogonality_loss(t.constant(fs.clone()), t.constant(ft.map(|v| v * s))).unwrap().item();
        invariance = invariance.max((o - o_s).abs()).max((o - o_t).abs());
        let gains: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..10.0)).collect();
        let fs_c = Tensor::new(&[c, m], (0..c * m).map(|i| fs.data()[i] * gains[i / m]).collect()).unwrap();
        let o_c = orthogonality_loss(t.constant(fs_c), t.constant(ft.clone())).unwrap().item();
        per_channel_change = per_channel_change.max((o - o_c).abs());

        let g = gram(t.constant(fs.clone())).unwrap().value();
        let gm = DMatrix::from_row_slice(c, c, g.data());
        asym = asym.max((&gm - gm.transpose()).abs().max());
        let scale = gm.trace().max(1.0);
        min_eig = min_eig.min(SymmetricEigen::new(gm).eigenvalues.min() / scale);
    }
    let passed = min_illum >= ALPHA_VCLAMP && ortho_lo >= 0.0 && ortho_hi <= 2.0 && invariance <= 1e-9 && asym == 0.0 && min_eig >= -1e-12;
    Outcome::new(
        passed,
        format!(
            "1000 inputs: min L_v {min_illum:.4} (≥0.2); L_o in [{ortho_lo:.4}, {ortho_hi:.4}] (⊂[0,2]); positive rescaling of either argument changes L_o by ≤{invariance:.1e}; gram asymmetry {asym:e}, min eigenvalue/trace {min_eig:.1e}. Note: per-channel rescaling moves the Gram term by up to {per_channel_change:.3}, so only whole-argument rescaling is invariant"
        ),
    )
}

// 9. Determinism -----------------------------------------------------------

fn scent(args: &[&str]) -> (bool, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_scent")).args(args).output().expect("binary runs");
    (out.status.success(), out.stdout)
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let cfg = root.path().join("run.txt");
    fs::write(&cfg, "epochs = 2\n").unwrap();
    let mut all_ok = true;
    let mut artifacts = Vec::new();
    for run in ["a", "b"] {
        let base = root.path().join(run);
        let (data, ckpt, viz, metrics) = (base.join("data"), base.join("ckpt"), base.join("viz"), base.join("metrics.jsonl"));
        let image = data.join("sample_00001").join("target.ppm");
        let steps = [
            vec!["datagen".into(), "--out".into(), s(&data), "--count".into(), "4".into(), "--seed".into(), "11".into()],
            vec!["train".into(), "--data".into(), s(&data), "--config".into(), s(&cfg), "--out".into(), s(&ckpt)],
            vec![
                "eval".into(),
                "--ckpt".into(),
                s(&ckpt),
                "--data".into(),
                s(&data),
                "--conditions".into(),
                "clear,fog,snow,frost,motion_blur,night".into(),
                "--json".into(),
                s(&metrics),
            ],
            vec!["viz".into(), "--ckpt".into(), s(&ckpt), "--image".into(), s(&image), "--out".into(), s(&viz)],
        ];
        let mut stdout = Vec::new();
        for args in &steps {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            let (ok, out) = scent(&args);
            all_ok &= ok;
            stdout.push(out);
        }
        // stdout lines name the run directory; compare the rest
        let stdout: Vec<String> = stdout.iter().map(|o| String::from_utf8_lossy(o).replace(&s(&base), "")).collect();
        artifacts.push((dir_bytes(&base), stdout));
    }
    let files = artifacts[0].0.len();
    let identical = artifacts[0] == artifacts[1];
    Outcome::new(
        all_ok && identical && files > 0,
        format!(
            "datagen/train/eval/viz run twice: {files} files (dataset, checkpoint, log, metrics, images) and command output {}",
            if identical { "bitwise identical" } else { "DIFFER" }
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "gradient integrity", gradient_integrity, Duration::from_secs(60)),
        (2, "geometry oracle", geometry_oracle, Duration::from_secs(30)),
        (3, "metric oracle equivalence", metric_oracle, Duration::from_secs(10)),
        (4, "loss-weight fidelity", loss_weight_fidelity, Duration::MAX),
        (5, "distillation trainability", distillation_trainability, Duration::from_secs(60)),
        (6, "end-to-end desk training", end_to_end_training, Duration::from_secs(15 * 60)),
        (7, "feature-visualization fidelity", feature_viz_fidelity, Duration::MAX),
        (8, "retinex bounds", retinex_bounds, Duration::MAX),
        (9, "determinism", determinism, Duration::MAX),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    println!("acceptance criteria");
    for (n, name, run, budget) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed < budget;
        let passed = outcome.passed && in_time;
        let budget_text = if budget == Duration::MAX { String::new() } else { format!(" / {}s", budget.as_secs()) };
        println!(
            "{} criterion {n} ({name}): {} [{:.1}s{budget_text}{}]",
            if passed { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
        if !passed {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
