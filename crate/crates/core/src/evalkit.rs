//! Depth metrics, median scale alignment, and the corruption benchmark.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{forward_depth, ModelBundle, MAX_DEPTH, MIN_DEPTH};
use crate::nn::Binder;
use crate::synth::{corrupt, CorruptionKind, CorruptionSpec, SceneSample};
use crate::tensor::{pairwise_sum, Precision, Tape, Tensor};

/// Thresholds of the δ accuracies are `DELTA_BASE^r`, r = 1, 2, 3.
pub const DELTA_BASE: f64 = 1.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub condition: String,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
    /// Median ratio applied to the predictions (mean over images when
    /// pooled); 1 without scaling.
    pub scale_factor: f64,
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sum that does not depend on the order of `values`.
fn stable_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    pairwise_sum(&values)
}

/// Valid (pred, gt) pairs of one image, after scaling and capping.
struct Aligned {
    pred: Vec<f64>,
    gt: Vec<f64>,
    scale: f64,
}

fn align(pred: &Tensor, gt: &Tensor, valid: Option<&Tensor>, median_scale: bool) -> Result<Aligned> {
    if pred.len() != gt.len() || valid.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::shape(format!(
            "metric inputs differ: pred {:?}, gt {:?}, mask {:?}",
            pred.shape(),
            gt.shape(),
            valid.map(|m| m.shape().to_vec())
        )));
    }
    let mut p = Vec::new();
    let mut g = Vec::new();
    for i in 0..gt.len() {
        if valid.is_none_or(|m| m.data()[i] > 0.0) {
            p.push(pred.data()[i]);
            g.push(gt.data()[i]);
        }
    }
    if g.is_empty() {
        return Err(Error::contract("empty valid mask"));
    }
    let bad = g.iter().filter(|&&x| !(x > 0.0)).count();
    if bad > 0 {
        return Err(Error::contract(format!("{bad} ground-truth value(s) on the mask are not positive")));
    }
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "depth prediction".into() });
    }
    let mut scale = 1.0;
    if median_scale {
        let mg = median(&g);
        for x in p.iter_mut() {
            *x = x.clamp(1e-3 * mg, 1e3 * mg);
        }
        scale = mg / median(&p);
        for x in p.iter_mut() {
            *x *= scale;
        }
    }
    for x in p.iter_mut().chain(g.iter_mut()) {
        *x = x.clamp(MIN_DEPTH, MAX_DEPTH);
    }
    Ok(Aligned { pred: p, gt: g, scale })
}

fn metrics(images: &[Aligned], condition: &str) -> MetricRecord {
    let pairs: Vec<(f64, f64)> = images.iter().flat_map(|a| a.pred.iter().copied().zip(a.gt.iter().copied())).collect();
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| stable_sum(pairs.iter().map(|&(p, g)| f(p, g)).collect()) / n;
    let abs_rel = mean(&|p, g| (p - g).abs() / g);
    let sq_rel = mean(&|p, g| (p - g) * (p - g) / g);
    let rmse = mean(&|p, g| (p - g) * (p - g)).sqrt();
    let rmse_log = mean(&|p, g| ((p + 1.0).ln() - (g + 1.0).ln()).powi(2)).sqrt();
    let delta = |r: i32| {
        let t = DELTA_BASE.powi(r);
        pairs.iter().filter(|&&(p, g)| (p / g).max(g / p) < t).count() as f64 / n
    };
    let scale_factor = stable_sum(images.iter().map(|a| a.scale).collect()) / images.len() as f64;
    MetricRecord {
        condition: condition.to_string(),
        abs_rel,
        sq_rel,
        rmse,
        rmse_log,
        delta1: delta(1),
        delta2: delta(2),
        delta3: delta(3),
        n_pixels: pairs.len(),
        scale_factor,
    }
}

/// Metrics of one prediction against ground truth over `valid` (all pixels
/// when `None`). With `median_scale`, predictions are first clamped to
/// `[1e-3, 1e3]·median(gt)` and multiplied by `median(gt)/median(pred)`.
/// Both maps are then capped to the model's depth range.
pub fn compute_metrics(pred: &Tensor, gt: &Tensor, valid: Option<&Tensor>, median_scale: bool) -> Result<MetricRecord> {
    Ok(metrics(&[align(pred, gt, valid, median_scale)?], "clear"))
}

/// Metrics over the pooled pixels of several images, each scaled by its own
/// median ratio.
pub fn compute_pooled_metrics(
    items: &[(Tensor, Tensor, Option<Tensor>)],
    median_scale: bool,
    condition: &str,
) -> Result<MetricRecord> {
    if items.is_empty() {
        return Err(Error::contract("no images to evaluate"));
    }
    let aligned = items.iter().map(|(p, g, m)| align(p, g, m.as_ref(), median_scale)).collect::<Result<Vec<_>>>()?;
    Ok(metrics(&aligned, condition))
}

/// A benchmark condition: the clean frames or one corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Clear,
    Corrupted { kind: CorruptionKind, severity: u8 },
}

impl Condition {
    pub fn label(&self) -> String {
        match self {
            Condition::Clear => "clear".into(),
            Condition::Corrupted { kind, severity } => format!("{}@{severity}", kind.name()),
        }
    }

    /// Parses `clear` or a corruption name at the given severity.
    pub fn parse(name: &str, severity: u8) -> Result<Self> {
        if name == "clear" {
            return Ok(Condition::Clear);
        }
        let kind = CorruptionKind::parse(name)?;
        CorruptionSpec::new(kind, severity, 0)?;
        Ok(Condition::Corrupted { kind, severity })
    }
}

/// Finest-scale depth prediction for one image.
pub fn predict_depth(bundle: &ModelBundle, image: &Tensor) -> Result<Tensor> {
    let tape = Tape::new(Precision::Single);
    let b = Binder::new(&tape, &bundle.store);
    let out = forward_depth(bundle, &b, tape.constant(image.clone()))?;
    Ok(out.depths[0].value())
}

/// One pooled, median-scaled record per condition. Corruption noise is
/// seeded by `seed` and the sample position.
pub fn run_benchmark(bundle: &ModelBundle, samples: &[SceneSample], conditions: &[Condition], seed: u64) -> Result<Vec<MetricRecord>> {
    if samples.is_empty() {
        return Err(Error::contract("benchmark dataset is empty"));
    }
    let mut records = Vec::new();
    for cond in conditions {
        let mut items = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let frame = match *cond {
                Condition::Clear => s.target.clone(),
                Condition::Corrupted { kind, severity } => {
                    let spec = CorruptionSpec::new(kind, severity, seed.wrapping_add(i as u64))?;
                    corrupt(&s.target, Some(&s.gt_depth), &spec)?
                }
            };
            items.push((predict_depth(bundle, &frame.image)?, s.gt_depth.clone(), None));
        }
        records.push(compute_pooled_metrics(&items, true, &cond.label())?);
    }
    Ok(records)
}

/// Plain-text table with the usual column order.
pub fn format_table(records: &[MetricRecord]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>7} {:>7} {:>7}",
        "condition", "AbsRel", "SqRel", "RMSE", "RMSElog", "d1", "d2", "d3"
    )
    .unwrap();
    for r in records {
        writeln!(
            s,
            "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>7.4} {:>7.4} {:>7.4}",
            r.condition, r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.delta1, r.delta2, r.delta3
        )
        .unwrap();
    }
    s
}

/// One JSON object per line.
pub fn to_jsonl(records: &[MetricRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    /// Straight loops over the formulas.
    fn oracle(pred: &[f64], gt: &[f64]) -> [f64; 7] {
        let n = gt.len() as f64;
        let (mut a, mut sq, mut se, mut sl) = (0.0, 0.0, 0.0, 0.0);
        let mut d = [0.0; 3];
        for i in 0..gt.len() {
            let (p, g) = (pred[i], gt[i]);
            a += (p - g).abs() / g;
            sq += (p - g) * (p - g) / g;
            se += (p - g) * (p - g);
            sl += ((p + 1.0).ln() - (g + 1.0).ln()).powi(2);
            let ratio = if p / g > g / p { p / g } else { g / p };
            for (r, dr) in d.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(r as i32 + 1) {
                    *dr += 1.0;
                }
            }
        }
        [a / n, sq / n, (se / n).sqrt(), (sl / n).sqrt(), d[0] / n, d[1] / n, d[2] / n]
    }

    fn as_array(r: &MetricRecord) -> [f64; 7] {
        [r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.delta1, r.delta2, r.delta3]
    }

    #[test]
    fn identity_prediction() {
        let g = t(&[1.0, 2.0, 3.5]);
        let r = compute_metrics(&g, &g, None, false).unwrap();
        assert_eq!(as_array(&r), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn threshold_arithmetic() {
        let r = compute_metrics(&t(&[2.6]), &t(&[2.0]), None, false).unwrap();
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 1.0, 1.0));
    }

    #[test]
    fn three_pixel_example() {
        let (p, g) = ([1.1, 1.8, 5.0], [1.0, 2.0, 4.0]);
        let r = compute_metrics(&t(&p), &t(&g), None, false).unwrap();
        assert!((r.abs_rel - 0.15).abs() < 1e-12);
        for (x, y) in as_array(&r).iter().zip(oracle(&p, &g)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn median_scaling() {
        let g = t(&[1.0, 2.0, 4.0]);
        let r = compute_metrics(&t(&[3.0, 6.0, 12.0]), &g, None, true).unwrap();
        assert!((r.scale_factor - 1.0 / 3.0).abs() < 1e-15);
        assert!(r.abs_rel < 1e-15 && r.delta1 == 1.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn mask_and_errors() {
        let g = t(&[1.0, -1.0, 2.0]);
        let p = t(&[1.0, 9.0, 2.0]);
        let m = t(&[1.0, 0.0, 1.0]);
        assert_eq!(compute_metrics(&p, &g, Some(&m), false).unwrap().abs_rel, 0.0);
        assert!(matches!(compute_metrics(&p, &g, None, false), Err(Error::Contract(_))));
        assert!(matches!(compute_metrics(&p, &g, Some(&t(&[0.0; 3])), false), Err(Error::Contract(_))));
    }

    #[test]
    fn condition_parsing() {
        assert_eq!(Condition::parse("clear", 3).unwrap(), Condition::Clear);
        assert_eq!(Condition::parse("fog", 3).unwrap().label(), "fog@3");
        assert!(Condition::parse("hail", 3).is_err());
        assert!(Condition::parse("fog", 9).is_err());
    }

    #[test]
    fn table_and_jsonl_have_one_row_per_record() {
        let g = t(&[1.0, 2.0]);
        let r = compute_metrics(&g, &g, None, false).unwrap();
        let recs = vec![r.clone(), MetricRecord { condition: "fog@3".into(), ..r }];
        assert_eq!(format_table(&recs).lines().count(), 3);
        assert_eq!(to_jsonl(&recs).unwrap().lines().count(), 2);
    }

    proptest! {
        #[test]
        fn matches_loop_oracle(seed in any::<u64>(), n in 1usize..40) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..100.0)).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..100.0)).collect();
            let r = compute_metrics(&t(&p), &t(&g), None, false).unwrap();
            for (x, y) in as_array(&r).iter().zip(oracle(&p, &g)) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
            prop_assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3);
            // pixel order does not matter, bit for bit
            let perm: Vec<usize> = (0..n).rev().collect();
            let rp = compute_metrics(&t(&perm.iter().map(|&i| p[i]).collect::<Vec<_>>()), &t(&perm.iter().map(|&i| g[i]).collect::<Vec<_>>()), None, false).unwrap();
            prop_assert_eq!(as_array(&r), as_array(&rp));
        }
    }
}
