//! Synthetic planar scenes with exact depth and poses, and image corruptions.
//!
//! The world frame is the target camera frame. A scene is a handful of
//! planes `n·X = d` with procedural albedo anchored to world points, lit by
//! one directional light (Lambertian plus ambient), so shading is constant
//! per plane and changes exactly where the geometry does.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{Frame, Intrinsics, SE3Pose};
use crate::imageio;
use crate::models::ToyNetConfig;
use crate::tensor::io::{load_pfm, save_pfm};
use crate::tensor::Tensor;

/// Airlight of the fog model.
pub const FOG_AIRLIGHT: f64 = 0.8;

/// Fog density β by severity 0..=5.
pub const FOG_BETA: [f64; 6] = [0.0, 0.02, 0.05, 0.1, 0.2, 0.3];

/// Highest supported corruption severity.
pub const MAX_SEVERITY: u8 = 5;

/// Number of sinusoids in each procedural texture.
const TEXTURE_WAVES: usize = 4;

/// An axis-aligned world box restricting where a plane exists.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// The plane `normal · X = offset` in world coordinates; `offset > 0` puts
/// it in front of the target camera along `normal`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneSpec {
    pub normal: [f64; 3],
    pub offset: f64,
    /// Seed of the procedural albedo.
    pub texture: u64,
    /// `None` for an unbounded plane.
    pub bounds: Option<Bounds>,
}

/// Geometry, lighting and camera motion of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub planes: Vec<PlaneSpec>,
    /// Direction towards the light.
    pub light: [f64; 3],
    pub ambient: f64,
    /// Camera translation per frame step, in the target frame.
    pub motion: [f64; 3],
    /// Camera yaw per frame step, radians.
    pub yaw: f64,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalized(a: [f64; 3]) -> Result<[f64; 3]> {
    let n = dot(a, a).sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::Generation(format!("direction {a:?} cannot be normalized")));
    }
    Ok(a.map(|v| v / n))
}

impl SceneSpec {
    /// One fronto-parallel plane at `depth` and no motion.
    pub fn fronto_parallel(depth: f64, texture: u64) -> Self {
        SceneSpec {
            planes: vec![PlaneSpec { normal: [0.0, 0.0, 1.0], offset: depth, texture, bounds: None }],
            light: [0.0, 0.0, -1.0],
            ambient: 0.3,
            motion: [0.0; 3],
            yaw: 0.0,
        }
    }

    /// A street-like scene: a ground plane under a camera at roughly fixed
    /// height and a distant back wall, plus up to three of {left wall,
    /// right wall, an upright board standing on the ground}. Side walls are
    /// fronto-parallel to the driving direction or slanted away from it.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let height = rng.random_range(1.5..1.8);
        let far = rng.random_range(25.0..40.0);
        let mut planes = vec![
            PlaneSpec { normal: [0.0, 1.0, 0.0], offset: height, texture: rng.random(), bounds: None },
            PlaneSpec { normal: [0.0, 0.0, 1.0], offset: far, texture: rng.random(), bounds: None },
        ];
        for side in [-1.0, 1.0] {
            let texture = rng.random();
            {
                let angle: f64 = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.1..0.35) };
                let offset = rng.random_range(3.0..6.0);
                let normal = [side * angle.cos(), 0.0, angle.sin()];
                planes.push(PlaneSpec { normal, offset, texture, bounds: None });
            }
        }
        let texture = rng.random();
        if rng.random_bool(0.5) {
            let z = rng.random_range(5.0..15.0);
            let x0 = rng.random_range(-3.0..1.5);
            let w = rng.random_range(1.0..2.5);
            let top = height - rng.random_range(1.0..2.0);
            let bounds = Bounds { min: [x0, top, z - 0.5], max: [x0 + w, height, z + 0.5] };
            planes.push(PlaneSpec { normal: [0.0, 0.0, 1.0], offset: z, texture, bounds: Some(bounds) });
        }
        let light = [rng.random_range(-0.6..0.6), -1.0, rng.random_range(-1.0..-0.2)];
        let motion = [rng.random_range(-0.05..0.05), 0.0, rng.random_range(0.2..0.5)];
        let yaw = rng.random_range(-0.01..0.01);
        SceneSpec { planes, light, ambient: 0.25, motion, yaw }
    }

    /// Camera-to-world pose of frame `k` (the target is `k = 0`).
    pub fn camera(&self, k: i64) -> SE3Pose {
        let k = k as f64;
        SE3Pose::from_axis_angle([0.0, k * self.yaw, 0.0], self.motion.map(|m| k * m))
    }

    /// Plain-text description, one `key=value` per line.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let v = |a: [f64; 3]| format!("{} {} {}", a[0], a[1], a[2]);
        writeln!(s, "scene.light={}", v(self.light)).unwrap();
        writeln!(s, "scene.ambient={}", self.ambient).unwrap();
        writeln!(s, "scene.motion={}", v(self.motion)).unwrap();
        writeln!(s, "scene.yaw={}", self.yaw).unwrap();
        for (i, p) in self.planes.iter().enumerate() {
            let bounds = match &p.bounds {
                Some(b) => format!("{} {}", v(b.min), v(b.max)),
                None => "none".into(),
            };
            writeln!(s, "scene.plane_{i}=normal {} offset {} texture {} bounds {bounds}", v(p.normal), p.offset, p.texture)
                .unwrap();
        }
        s
    }
}

/// A target frame, its two neighbours, and ground truth.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub target: Frame,
    /// Frames at indices −1 and +1.
    pub sources: Vec<Frame>,
    /// Target depth `[1,1,H,W]` in scene units.
    pub gt_depth: Tensor,
    /// Target-to-source transform for each source.
    pub gt_poses: Vec<SE3Pose>,
    pub scene_spec: String,
}

/// Procedural albedo: a base colour modulated by a few sinusoids in
/// (viewing direction, log distance) around the world origin, so their
/// on-screen period stays near 8 pixels at any depth.
struct Texture {
    base: [f64; 3],
    waves: [([f64; 3], f64, f64); TEXTURE_WAVES],
}

impl Texture {
    fn new(id: u64, focal: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(id);
        let base = [0; 3].map(|_| rng.random_range(0.35..0.9));
        // one octave per wave, from fine grain to broad blotches
        let mut octave = 0;
        let waves = [0; TEXTURE_WAVES].map(|_| {
            let low = 5.0 * f64::from(1 << octave);
            octave += 1;
            let period_px = rng.random_range(low..2.0 * low);
            let freq = std::f64::consts::TAU * focal / period_px;
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let k = [freq * angle.cos(), freq * angle.sin(), rng.random_range(-2.0..2.0)];
            (k, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.08..0.16))
        });
        Texture { base, waves }
    }

    fn albedo(&self, p: [f64; 3]) -> [f64; 3] {
        let r = dot(p, p).sqrt();
        let q = [p[0] / r, p[1] / r, r.ln()];
        let m: f64 = self.waves.iter().map(|(k, phase, amp)| amp * (dot(*k, q) + phase).sin()).sum();
        self.base.map(|b| (b * (1.0 + m)).clamp(0.0, 1.0))
    }
}

struct Renderer<'a> {
    spec: &'a SceneSpec,
    textures: Vec<Texture>,
    shading: Vec<f64>,
    normals: Vec<[f64; 3]>,
}

impl<'a> Renderer<'a> {
    fn new(spec: &'a SceneSpec, k: &Intrinsics) -> Result<Self> {
        if spec.planes.is_empty() {
            return Err(Error::Generation("scene has no planes".into()));
        }
        let light = normalized(spec.light)?;
        let mut normals = Vec::new();
        let mut shading = Vec::new();
        let mut textures = Vec::new();
        for (i, p) in spec.planes.iter().enumerate() {
            if !(p.offset > 0.0) {
                return Err(Error::Generation(format!("plane {i} has offset {} and is not in front of the camera", p.offset)));
            }
            let n = normalized(p.normal)?;
            // the visible side faces the camera, against n
            shading.push(spec.ambient + (1.0 - spec.ambient) * (-dot(n, light)).max(0.0));
            normals.push(n);
            textures.push(Texture::new(p.texture, k.fx));
        }
        Ok(Renderer { spec, textures, shading, normals })
    }

    /// Renders image and camera-space depth for the camera-to-world pose.
    fn render(&self, cam: &SE3Pose, k: &Intrinsics) -> Result<(Tensor, Tensor)> {
        let centre = cam.translation;
        for (i, (n, p)) in self.normals.iter().zip(&self.spec.planes).enumerate() {
            if p.offset / dot(p.normal, p.normal).sqrt() - dot(*n, centre) <= 1e-6 {
                return Err(Error::Generation(format!("camera at {centre:?} is behind plane {i}")));
            }
        }
        let (h, w) = (k.height, k.width);
        let mut image = Tensor::zeros(&[1, 3, h, w]);
        let mut depth = Tensor::zeros(&[1, 1, h, w]);
        for v in 0..h {
            for u in 0..w {
                let ray_cam = k.ray(u as f64, v as f64);
                let rot = &cam.rotation;
                let ray = [0, 1, 2].map(|i| dot(rot[i], ray_cam));
                let mut best: Option<(f64, usize)> = None;
                for (i, (n, p)) in self.normals.iter().zip(&self.spec.planes).enumerate() {
                    let denom = dot(*n, ray);
                    if denom <= 1e-9 {
                        continue;
                    }
                    let d = p.offset / dot(p.normal, p.normal).sqrt();
                    let s = (d - dot(*n, centre)) / denom;
                    if s <= 0.0 || best.is_some_and(|(b, _)| b <= s) {
                        continue;
                    }
                    let hit = [0, 1, 2].map(|j| centre[j] + s * ray[j]);
                    if p.bounds.is_none_or(|b| b.contains(hit)) {
                        best = Some((s, i));
                    }
                }
                let Some((s, i)) = best else {
                    return Err(Error::Generation(format!("pixel ({u}, {v}) sees no plane")));
                };
                let hit = [0, 1, 2].map(|j| centre[j] + s * ray[j]);
                let albedo = self.textures[i].albedo(hit);
                for (c, a) in albedo.into_iter().enumerate() {
                    image.set4(0, c, v, u, (a * self.shading[i]).clamp(0.0, 1.0));
                }
                depth.set4(0, 0, v, u, s);
            }
        }
        Ok((image, depth))
    }
}

/// Image dimensions must suit the default networks.
fn check_size(width: usize, height: usize) -> Result<()> {
    let m = ToyNetConfig::default().size_multiple();
    if width == 0 || height == 0 || width % m != 0 || height % m != 0 {
        return Err(Error::Config(format!("image size {width}x{height} must be a positive multiple of {m}")));
    }
    Ok(())
}

/// Renders the target (index 0) and sources (indices −1, +1) of `spec`.
pub fn generate_scene(spec: &SceneSpec, width: usize, height: usize) -> Result<SceneSample> {
    check_size(width, height)?;
    let k = Intrinsics::for_size(width, height);
    let renderer = Renderer::new(spec, &k)?;
    let (image, gt_depth) = renderer.render(&spec.camera(0), &k)?;
    let target = Frame::new(image, k, 0)?;
    let mut sources = Vec::new();
    let mut gt_poses = Vec::new();
    for index in [-1, 1] {
        let cam = spec.camera(index);
        let (image, _) = renderer.render(&cam, &k)?;
        sources.push(Frame::new(image, k, index)?);
        gt_poses.push(cam.inverse());
    }
    Ok(SceneSample { target, sources, gt_depth, gt_poses, scene_spec: spec.describe() })
}

/// [`generate_scene`] on [`SceneSpec::random`].
pub fn random_scene(seed: u64, width: usize, height: usize) -> Result<SceneSample> {
    generate_scene(&SceneSpec::random(seed), width, height)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    Fog,
    Snow,
    Frost,
    MotionBlur,
    Night,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] =
        [CorruptionKind::Fog, CorruptionKind::Snow, CorruptionKind::Frost, CorruptionKind::MotionBlur, CorruptionKind::Night];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Fog => "fog",
            CorruptionKind::Snow => "snow",
            CorruptionKind::Frost => "frost",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Night => "night",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown corruption {s:?}; valid kinds: clear, {}", names.join(", ")))
        })
    }
}

/// A corruption at a given severity. Severity 0 is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if severity > MAX_SEVERITY {
            return Err(Error::Config(format!("severity {severity} exceeds {MAX_SEVERITY}")));
        }
        Ok(CorruptionSpec { kind, severity, seed })
    }
}

/// Applies `spec` to `frame`. Fog needs the frame's depth.
pub fn corrupt(frame: &Frame, depth: Option<&Tensor>, spec: &CorruptionSpec) -> Result<Frame> {
    if spec.severity > MAX_SEVERITY {
        return Err(Error::Config(format!("severity {} exceeds {MAX_SEVERITY}", spec.severity)));
    }
    let s = spec.severity as usize;
    let (h, w) = (frame.height(), frame.width());
    let img = &frame.image;
    let mut out = img.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        CorruptionKind::Fog => {
            let depth = depth.ok_or_else(|| Error::contract("fog needs a depth map"))?;
            if depth.shape() != [1, 1, h, w] {
                return Err(Error::shape(format!("fog depth {:?} for a {w}x{h} frame", depth.shape())));
            }
            let beta = FOG_BETA[s];
            for c in 0..3 {
                for i in 0..h * w {
                    let t = (-beta * depth.data()[i]).exp();
                    out.data_mut()[c * h * w + i] = img.data()[c * h * w + i] * t + FOG_AIRLIGHT * (1.0 - t);
                }
            }
        }
        CorruptionKind::MotionBlur => {
            let r = s as isize;
            let len = (2 * s + 1) as f64;
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let acc: f64 = (-r..=r).map(|d| img.at4(0, c, y, (x as isize + d).clamp(0, w as isize - 1) as usize)).sum();
                        out.set4(0, c, y, x, acc / len);
                    }
                }
            }
        }
        CorruptionKind::Snow => {
            // flakes are drawn for the top severity; lower severities keep a
            // prefix, so each level overlays a superset of the previous one
            let max_flakes = h * w / 12;
            let flakes = max_flakes * s / MAX_SEVERITY as usize;
            for i in 0..max_flakes {
                let (x0, y0, len) = (rng.random_range(0..w), rng.random_range(0..h), rng.random_range(2..5));
                if i >= flakes {
                    continue;
                }
                for j in 0..len {
                    let (x, y) = (x0 + j / 2, y0 + j);
                    if x < w && y < h {
                        for c in 0..3 {
                            out.set4(0, c, y, x, 0.95);
                        }
                    }
                }
            }
        }
        CorruptionKind::Frost => {
            let occupancy = 0.12 * s as f64;
            for y in 0..h {
                for x in 0..w {
                    let (u, ice) = (rng.random::<f64>(), rng.random_range(0.75..0.95));
                    if u < occupancy {
                        for c in 0..3 {
                            out.set4(0, c, y, x, 0.35 * img.at4(0, c, y, x) + 0.65 * ice);
                        }
                    }
                }
            }
        }
        CorruptionKind::Night => {
            if s > 0 {
                let gain = 0.25 / s as f64;
                let sigma = 0.01 * s as f64;
                for v in out.data_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = *v * gain + sigma * z;
                }
            }
        }
    }
    let out = out.map(|v| v.clamp(0.0, 1.0));
    Frame::new(out, frame.intrinsics, frame.index)
}

fn fmt_pose(p: &SE3Pose) -> (String, String) {
    let r: Vec<String> = p.rotation.iter().flatten().map(|v| format!("{v:?}")).collect();
    let t: Vec<String> = p.translation.iter().map(|v| format!("{v:?}")).collect();
    (r.join(" "), t.join(" "))
}

/// Writes `target.ppm`, `source_{0,1}.ppm`, `depth.pfm` and `meta.txt`.
pub fn save_sample(sample: &SceneSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    imageio::save_ppm(dir.join("target.ppm"), &sample.target.image)?;
    for (i, s) in sample.sources.iter().enumerate() {
        imageio::save_ppm(dir.join(format!("source_{i}.ppm")), &s.image)?;
    }
    save_pfm(dir.join("depth.pfm"), &sample.gt_depth)?;
    let k = &sample.target.intrinsics;
    let mut meta = String::new();
    writeln!(meta, "width={}\nheight={}", k.width, k.height).unwrap();
    writeln!(meta, "fx={:?}\nfy={:?}\ncx={:?}\ncy={:?}", k.fx, k.fy, k.cx, k.cy).unwrap();
    writeln!(meta, "target_index={}", sample.target.index).unwrap();
    for (i, (s, p)) in sample.sources.iter().zip(&sample.gt_poses).enumerate() {
        let (r, t) = fmt_pose(p);
        writeln!(meta, "source_{i}_index={}\nsource_{i}_rotation={r}\nsource_{i}_translation={t}", s.index).unwrap();
    }
    meta.push_str(&sample.scene_spec);
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

fn parse_floats<const N: usize>(s: &str, key: &str) -> Result<[f64; N]> {
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format("meta", format!("{key}: bad number in {s:?}")))?;
    vals.try_into().map_err(|_| Error::format("meta", format!("{key}: expected {N} numbers")))
}

/// Reads a sample written by [`save_sample`]. Images come back quantized to
/// 8 bits.
pub fn load_sample(dir: &Path) -> Result<SceneSample> {
    let text = fs::read_to_string(dir.join("meta.txt"))?;
    let mut meta = std::collections::BTreeMap::new();
    let mut scene_spec = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::format("meta", format!("line without '=': {line:?}")))?;
        if k.starts_with("scene.") {
            writeln!(scene_spec, "{line}").unwrap();
        }
        meta.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| meta.get(k).ok_or_else(|| Error::format("meta", format!("missing key {k}")));
    let num = |k: &str| -> Result<f64> { Ok(parse_floats::<1>(get(k)?, k)?[0]) };
    let int = |k: &str| -> Result<i64> { get(k)?.parse().map_err(|_| Error::format("meta", format!("{k}: not an integer"))) };
    let k = Intrinsics::new(num("fx")?, num("fy")?, num("cx")?, num("cy")?, int("width")? as usize, int("height")? as usize)?;
    let target = Frame::new(imageio::load_ppm(dir.join("target.ppm"))?, k, int("target_index")?)?;
    let mut sources = Vec::new();
    let mut gt_poses = Vec::new();
    for i in 0..2 {
        let image = imageio::load_ppm(dir.join(format!("source_{i}.ppm")))?;
        sources.push(Frame::new(image, k, int(&format!("source_{i}_index"))?)?);
        let rk = format!("source_{i}_rotation");
        let r = parse_floats::<9>(get(&rk)?, &rk)?;
        let tk = format!("source_{i}_translation");
        let t = parse_floats::<3>(get(&tk)?, &tk)?;
        gt_poses.push(SE3Pose::new([[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]], t)?);
    }
    let gt_depth = load_pfm(dir.join("depth.pfm"))?.reshape(&[1, 1, k.height, k.width])?;
    Ok(SceneSample { target, sources, gt_depth, gt_poses, scene_spec })
}
