//! Pinhole camera, rigid poses, depth reprojection and differentiable warping.

use crate::error::{Error, Result};
use crate::tensor::{rodrigues, Tape, Tensor, Var};

/// Smallest camera-space depth accepted by the perspective division.
pub const Z_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Default camera for a `width`×`height` image: horizontal field of view
    /// of about 65 degrees, principal point at the image centre.
    pub fn for_size(width: usize, height: usize) -> Self {
        let f = 0.78125 * width as f64;
        Intrinsics { fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if !ok {
            return Err(Error::contract(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Unit-depth ray direction through pixel (u, v).
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        SE3Pose { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }

    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let pose = SE3Pose { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_axis_angle(omega: [f64; 3], translation: [f64; 3]) -> Self {
        SE3Pose { rotation: rodrigues(&omega), translation }
    }

    /// Checks RᵀR = I and det R = +1 within 1e-6.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > 1e-6 {
                    return Err(Error::contract("rotation is not orthonormal"));
                }
            }
        }
        if (det3(r) - 1.0).abs() > 1e-6 {
            return Err(Error::contract("rotation has determinant != 1"));
        }
        if self.translation.iter().chain(r.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::contract("pose has non-finite entries"));
        }
        Ok(())
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let t = &self.translation;
        let mut ti = [0.0; 3];
        for i in 0..3 {
            ti[i] = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        SE3Pose { rotation: rt, translation: ti }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &SE3Pose) -> Self {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| self.rotation[i][k] * other.rotation[k][j]).sum();
            }
        }
        SE3Pose { rotation: r, translation: self.apply(other.translation) }
    }

    pub fn with_scaled_translation(&self, s: f64) -> Self {
        SE3Pose { rotation: self.rotation, translation: self.translation.map(|t| t * s) }
    }
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// An RGB image `[1,3,H,W]` in `[0,1]` with its camera and sequence index.
#[derive(Clone, Debug)]
pub struct Frame {
    pub image: Tensor,
    pub intrinsics: Intrinsics,
    pub index: i64,
}

impl Frame {
    pub fn new(image: Tensor, intrinsics: Intrinsics, index: i64) -> Result<Self> {
        intrinsics.validate()?;
        let expected = [1, 3, intrinsics.height, intrinsics.width];
        if image.shape() != expected {
            return Err(Error::shape(format!("frame image {:?}, intrinsics imply {expected:?}", image.shape())));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("frame pixels must be finite and within [0,1]"));
        }
        Ok(Frame { image, intrinsics, index })
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }
}

/// A pose living on a tape: rotation `[3,3]` and translation `[3]`.
#[derive(Clone, Copy, Debug)]
pub struct PoseVar<'t> {
    pub rotation: Var<'t>,
    pub translation: Var<'t>,
}

impl<'t> PoseVar<'t> {
    pub fn constant(tape: &'t Tape, pose: &SE3Pose) -> Self {
        let r = Tensor::new(&[3, 3], pose.rotation.iter().flatten().copied().collect()).expect("3x3");
        let t = Tensor::new(&[3], pose.translation.to_vec()).expect("3");
        PoseVar { rotation: tape.constant(r), translation: tape.constant(t) }
    }

    /// Exponentiates a 6-vector (axis-angle, translation).
    pub fn from_params(params: Var<'t>) -> Result<Self> {
        if params.value_ref().len() != 6 {
            return Err(Error::shape(format!("pose parameters need 6 entries, got {:?}", params.shape())));
        }
        let flat = params.reshape(&[6])?;
        let rotation = flat.narrow(0, 0, 3)?.axis_angle_to_rotation()?;
        let translation = flat.narrow(0, 3, 3)?;
        Ok(PoseVar { rotation, translation })
    }

    /// `(Rᵀ, −Rᵀt)`, differentiable in both parts.
    pub fn inverse(&self) -> Result<Self> {
        let rt = self.rotation.transpose()?;
        let t = rt.matmul(self.translation.reshape(&[3, 1])?)?.reshape(&[3])?.neg();
        Ok(PoseVar { rotation: rt, translation: t })
    }

    /// Current value as a plain pose.
    pub fn to_pose(&self) -> SE3Pose {
        let r = self.rotation.value();
        let t = self.translation.value();
        let mut pose = SE3Pose::identity();
        for i in 0..3 {
            for j in 0..3 {
                pose.rotation[i][j] = r.data()[i * 3 + j];
            }
            pose.translation[i] = t.data()[i];
        }
        pose
    }
}

fn spatial_dims(shape: &[usize], channels: usize, what: &str) -> Result<(usize, usize)> {
    if shape.len() != 4 || shape[0] != 1 || shape[1] != channels {
        return Err(Error::shape(format!("{what} must be [1,{channels},H,W], got {shape:?}")));
    }
    Ok((shape[2], shape[3]))
}

/// Unit-depth rays `[1,3,H,W]` for every pixel of `k`.
pub fn ray_grid(k: &Intrinsics) -> Tensor {
    let (h, w) = (k.height, k.width);
    let mut rays = Tensor::zeros(&[1, 3, h, w]);
    for v in 0..h {
        for u in 0..w {
            let r = k.ray(u as f64, v as f64);
            for (c, rc) in r.into_iter().enumerate() {
                rays.set4(0, c, v, u, rc);
            }
        }
    }
    rays
}

/// Camera-space points `depth · ((u−cx)/fx, (v−cy)/fy, 1)`.
pub fn backproject<'t>(depth: Var<'t>, k: &Intrinsics) -> Result<Var<'t>> {
    let (h, w) = spatial_dims(&depth.shape(), 1, "depth")?;
    if (h, w) != (k.height, k.width) {
        return Err(Error::shape(format!("depth {h}x{w} vs intrinsics {}x{}", k.height, k.width)));
    }
    let bad = depth.value_ref().data().iter().filter(|&&d| !(d > 0.0)).count();
    if bad > 0 {
        return Err(Error::contract(format!("backproject needs positive depth; {bad} pixel(s) are not")));
    }
    depth.mul(depth.tape().constant(ray_grid(k)))
}

/// Pixel coordinates `[1,2,H,W]` (x, y) of transformed points, plus their
/// validity mask `[1,1,H,W]`.
pub struct Projection<'t> {
    pub coords: Var<'t>,
    pub mask: Tensor,
}

pub fn project<'t>(points: Var<'t>, pose: &PoseVar<'t>, k: &Intrinsics) -> Result<Projection<'t>> {
    let (h, w) = spatial_dims(&points.shape(), 3, "points")?;
    let flat = points.reshape(&[3, h * w])?;
    let cam = pose.rotation.matmul(flat)?.add(pose.translation.reshape(&[3, 1])?)?;
    let x = cam.narrow(0, 0, 1)?;
    let y = cam.narrow(0, 1, 1)?;
    let z = cam.narrow(0, 2, 1)?;
    let z_safe = z.max_scalar(Z_MIN);
    let u = x.div(z_safe)?.scale(k.fx).add_scalar(k.cx);
    let v = y.div(z_safe)?.scale(k.fy).add_scalar(k.cy);
    let coords = Var::concat(&[u, v], 0)?.reshape(&[1, 2, h, w])?;

    let mask = {
        let zv = z.value_ref();
        let co = coords.value_ref();
        let (xmax, ymax) = ((k.width - 1) as f64, (k.height - 1) as f64);
        let plane = h * w;
        let data = (0..plane)
            .map(|i| {
                let (px, py) = (co.data()[i], co.data()[plane + i]);
                let ok = zv.data()[i] > Z_MIN && (0.0..=xmax).contains(&px) && (0.0..=ymax).contains(&py);
                if ok { 1.0 } else { 0.0 }
            })
            .collect();
        Tensor::new(&[1, 1, h, w], data)?
    };
    Ok(Projection { coords, mask })
}

/// Bilinear sampling of `source` at `coords`; zero (and masked) where
/// `mask` is zero.
pub fn warp<'t>(source: Var<'t>, coords: Var<'t>, mask: &Tensor) -> Result<Var<'t>> {
    source.grid_sample(coords, mask)
}

/// A synthesized view and its validity mask.
pub struct Synthesized<'t> {
    pub image: Var<'t>,
    pub mask: Tensor,
}

/// Reconstructs the target view from `source` using the target's `depth`
/// and the target-to-source pose: backproject, transform, project, sample.
pub fn synthesize_view<'t>(source: Var<'t>, depth: Var<'t>, pose: &PoseVar<'t>, k: &Intrinsics) -> Result<Synthesized<'t>> {
    let points = backproject(depth, k)?;
    let proj = project(points, pose, k)?;
    let image = warp(source, proj.coords, &proj.mask)?;
    Ok(Synthesized { image, mask: proj.mask })
}
