//! Single-component PCA visualization of feature maps, plus the colour
//! helpers used for inspection montages.

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::{bilinear_taps, Tensor};

/// Jacobi sweeps stop once the off-diagonal mass falls below this fraction
/// of the matrix norm.
const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VizConfig {
    pub height: usize,
    pub width: usize,
    /// Lower clipping percentile.
    pub clip_lo: f64,
    /// Upper clipping percentile.
    pub clip_hi: f64,
}

impl VizConfig {
    pub fn new(height: usize, width: usize) -> Self {
        VizConfig { height, width, clip_lo: 5.0, clip_hi: 95.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.clip_lo && self.clip_lo < self.clip_hi && self.clip_hi <= 100.0) {
            return Err(Error::Config(format!("clip percentiles {}..{} invalid", self.clip_lo, self.clip_hi)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("visualization target size is empty".into()));
        }
        Ok(())
    }
}

/// 8-bit single-channel image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        imageio::encode_gray8(&self.pixels, self.width, self.height).expect("consistent size")
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the eigenvectors as columns of a row-major
/// `n×n` matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n, "matrix size");
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off.sqrt() <= JACOBI_TOL * norm.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bilinear resize of every channel of a `[1,C,H,W]` map.
fn resize_channels(t: &Tensor, height: usize, width: usize) -> Result<Vec<Vec<f64>>> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[2] == 0 || s[3] == 0 {
        return Err(Error::shape(format!("feature maps must be [1,C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let (ty, tx) = (bilinear_taps(height, h), bilinear_taps(width, w));
    Ok((0..c)
        .map(|ch| {
            let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
            let mut out = Vec::with_capacity(height * width);
            for &(y0, y1, wy) in &ty {
                for &(x0, x1, wx) in &tx {
                    let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                    out.push(top * (1.0 - wy) + bot * wy);
                }
            }
            out
        })
        .collect())
}

/// Resized, mean-centred channels and their covariance.
fn centred_covariance(features: &[Tensor], cfg: &VizConfig) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if features.is_empty() {
        return Err(Error::contract("visualize_features needs at least one feature map"));
    }
    if features.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite { op: "feature maps".into() });
    }
    let mut channels = Vec::new();
    for f in features {
        channels.extend(resize_channels(f, cfg.height, cfg.width)?);
    }
    let n = (cfg.height * cfg.width) as f64;
    for ch in channels.iter_mut() {
        let mean = ch.iter().sum::<f64>() / n;
        ch.iter_mut().for_each(|v| *v -= mean);
    }
    let c = channels.len();
    let denom = (n - 1.0).max(1.0);
    let mut cov = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let v = channels[i].iter().zip(&channels[j]).map(|(a, b)| a * b).sum::<f64>() / denom;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }
    Ok((channels, cov))
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Projects the centred channels on `direction`, clips to the configured
/// percentiles and rescales to `[0, 255]`.
pub fn render_component(channels: &[Vec<f64>], direction: &[f64], cfg: &VizConfig) -> GrayImage {
    let n = cfg.height * cfg.width;
    let scores: Vec<f64> =
        (0..n).map(|p| channels.iter().zip(direction).map(|(ch, d)| ch[p] * d).sum()).collect();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&sorted, cfg.clip_lo), percentile(&sorted, cfg.clip_hi));
    let pixels = if hi > lo {
        scores.iter().map(|&s| ((s.clamp(lo, hi) - lo) / (hi - lo) * 255.0).round() as u8).collect()
    } else {
        vec![128; n]
    };
    GrayImage { width: cfg.width, height: cfg.height, pixels }
}

/// Resizes every map to the target size, stacks the channels, and renders
/// the top principal component as an 8-bit image. Constant features give a
/// uniform mid-gray image.
pub fn visualize_features(features: &[Tensor], cfg: &VizConfig) -> Result<GrayImage> {
    cfg.validate()?;
    let (channels, cov) = centred_covariance(features, cfg)?;
    let c = channels.len();
    let (values, vectors) = symmetric_eigen(&cov, c);
    let top = (0..c).fold(0, |best, i| if values[i] > values[best] { i } else { best });
    let scale = cov.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(values[top] > 1e-12 * scale.max(f64::MIN_POSITIVE)) || scale == 0.0 {
        log::warn!("features have zero covariance; emitting a uniform image");
        return Ok(GrayImage { width: cfg.width, height: cfg.height, pixels: vec![128; cfg.height * cfg.width] });
    }
    let mut direction: Vec<f64> = (0..c).map(|i| vectors[i * c + top]).collect();
    fix_sign(&mut direction);
    Ok(render_component(&channels, &direction, cfg))
}

/// Covariance of the resized, centred stack, as used by
/// [`visualize_features`]; exposed for independent eigen-solver checks.
pub fn feature_covariance(features: &[Tensor], cfg: &VizConfig) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    centred_covariance(features, cfg)
}

/// Maps `t ∈ [0,1]` through a dark-purple → orange → pale-yellow ramp.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] =
        [[0.0, 0.0, 0.02], [0.32, 0.07, 0.43], [0.72, 0.21, 0.47], [0.98, 0.55, 0.24], [0.99, 0.99, 0.75]];
    let x = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    [0, 1, 2].map(|c| ((STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f) * 255.0).round() as u8)
}

/// Interleaved RGB rendering of a depth map: inverse depth, min-max scaled.
pub fn depth_to_rgb(depth: &Tensor) -> Result<Vec<u8>> {
    if depth.data().iter().any(|d| !(*d > 0.0)) {
        return Err(Error::contract("depth must be positive to colour-map"));
    }
    let inv: Vec<f64> = depth.data().iter().map(|d| 1.0 / d).collect();
    let (lo, hi) = inv.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(inv.iter().flat_map(|&v| colormap((v - lo) / span)).collect())
}

/// Side-by-side montage of equally sized interleaved RGB panels.
pub fn montage(panels: &[Vec<u8>], width: usize, height: usize) -> Result<Vec<u8>> {
    if panels.iter().any(|p| p.len() != 3 * width * height) {
        return Err(Error::shape("montage panels differ in size"));
    }
    let total = width * panels.len();
    let mut out = vec![0u8; 3 * total * height];
    for (i, panel) in panels.iter().enumerate() {
        for y in 0..height {
            let dst = 3 * (y * total + i * width);
            out[dst..dst + 3 * width].copy_from_slice(&panel[3 * y * width..3 * (y + 1) * width]);
        }
    }
    Ok(out)
}

/// Gray levels replicated into RGB.
pub fn gray_to_rgb(img: &GrayImage) -> Vec<u8> {
    img.pixels.iter().flat_map(|&g| [g, g, g]).collect()
}

/// A `[1,3,H,W]` image in `[0,1]` as interleaved RGB.
pub fn image_to_rgb(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::shape(format!("expected [1,3,H,W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    Ok((0..h * w)
        .flat_map(|i| [0, 1, 2].map(|c| (image.data()[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rescaled(values: &[f64], cfg: &VizConfig) -> Vec<u8> {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (lo, hi) = (percentile(&sorted, cfg.clip_lo), percentile(&sorted, cfg.clip_hi));
        values.iter().map(|&v| ((v.clamp(lo, hi) - lo) / (hi - lo) * 255.0).round() as u8).collect()
    }

    #[test]
    fn percentile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&s, 50.0), 3.0);
        assert_eq!(percentile(&s, 0.0), 1.0);
        assert_eq!(percentile(&s, 100.0), 5.0);
        assert!((percentile(&s, 5.0) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0];
        let (vals, vecs) = symmetric_eigen(&a, 3);
        for k in 0..3 {
            for i in 0..3 {
                let av: f64 = (0..3).map(|j| a[i * 3 + j] * vecs[j * 3 + k]).sum();
                assert!((av - vals[k] * vecs[i * 3 + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_channel_is_rescaled_channel() {
        let f = random(&[1, 1, 6, 8], 1);
        let cfg = VizConfig::new(6, 8);
        let img = visualize_features(&[f.clone()], &cfg).unwrap();
        assert_eq!(img.pixels, rescaled(f.data(), &cfg));
        assert_eq!(*img.pixels.iter().min().unwrap(), 0);
        assert_eq!(*img.pixels.iter().max().unwrap(), 255);
    }

    #[test]
    fn rank_one_stack_shows_the_pattern() {
        let b = random(&[1, 1, 6, 8], 2);
        let w = [0.5, 2.0, 1.0];
        let data: Vec<f64> = w.iter().flat_map(|wc| b.data().iter().map(move |v| wc * v)).collect();
        let f = Tensor::new(&[1, 3, 6, 8], data).unwrap();
        let cfg = VizConfig::new(6, 8);
        assert_eq!(visualize_features(&[f], &cfg).unwrap().pixels, rescaled(b.data(), &cfg));
    }

    #[test]
    fn constant_features_give_mid_gray() {
        let cfg = VizConfig::new(4, 4);
        let img = visualize_features(&[Tensor::full(&[1, 2, 2, 2], 3.0)], &cfg).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 128));
        assert!(visualize_features(&[], &cfg).is_err());
        assert!(VizConfig { clip_lo: 50.0, clip_hi: 40.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn outliers_saturate() {
        let mut f = random(&[1, 1, 10, 10], 3);
        f.data_mut()[0] = 1e6;
        f.data_mut()[1] = -1e6;
        let img = visualize_features(&[f], &VizConfig::new(10, 10)).unwrap();
        assert_eq!(img.pixels[0], 255);
        assert_eq!(img.pixels[1], 0);
    }

    #[test]
    fn montage_layout() {
        let a = vec![1u8; 3 * 2 * 2];
        let b = vec![2u8; 3 * 2 * 2];
        let m = montage(&[a, b], 2, 2).unwrap();
        assert_eq!(&m[..12], &[1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2]);
        assert_eq!(colormap(0.0), [0, 0, 5]);
        assert_eq!(depth_to_rgb(&Tensor::full(&[1, 1, 1, 2], 2.0)).unwrap().len(), 6);
    }

    proptest! {
        #[test]
        fn duplicated_stack_keeps_the_image(seed in any::<u64>()) {
            let f = random(&[1, 3, 5, 7], seed);
            let cfg = VizConfig::new(10, 14);
            let once = visualize_features(&[f.clone()], &cfg).unwrap();
            let twice = visualize_features(&[f.clone(), f], &cfg).unwrap();
            let worst = once.pixels.iter().zip(&twice.pixels).map(|(a, b)| (*a as i32 - *b as i32).abs()).max().unwrap();
            prop_assert!(worst <= 1);
        }

        #[test]
        fn output_spans_the_range(seed in any::<u64>()) {
            let img = visualize_features(&[random(&[1, 4, 8, 8], seed)], &VizConfig::new(8, 8)).unwrap();
            prop_assert_eq!(*img.pixels.iter().min().unwrap(), 0);
            prop_assert_eq!(*img.pixels.iter().max().unwrap(), 255);
        }
    }
}
