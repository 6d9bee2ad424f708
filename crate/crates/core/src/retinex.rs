//! Retinex-style decomposition losses: illumination fidelity and smoothness,
//! illumination-guided depth smoothness, reflectance reconstruction, and
//! structure/texture orthogonality.

use crate::error::{Error, Result};
use crate::photometric::{ssim, PhotometricConfig};
use crate::tensor::{gradient_magnitude, Var};

/// Clamp floor on the per-pixel illumination fidelity error.
pub const ALPHA_VCLAMP: f64 = 0.2;

/// Lower bound of the illumination decoder's output.
pub const ILLUMINATION_FLOOR: f64 = 1e-3;

/// Floor on row norms when forming cosines.
const COSINE_EPS: f64 = 1e-12;

/// `mean max(mean_c |I − L̂|, α) + mean ‖∇L̂‖ · exp(−‖∇ sg(D̂)‖ − ‖∇I‖)`.
pub fn illumination_loss<'t>(image: Var<'t>, illum: Var<'t>, depth: Var<'t>, alpha_vclamp: f64) -> Result<Var<'t>> {
    let non_positive = illum.value_ref().data().iter().filter(|&&v| !(v > 0.0)).count();
    if non_positive > 0 {
        return Err(Error::contract(format!("illumination must be positive; {non_positive} pixel(s) are not")));
    }
    let fidelity = image.sub(illum)?.abs().mean_axis(1)?.max_scalar(alpha_vclamp).mean();
    let weight = gradient_magnitude(depth.stop_gradient())?.add(gradient_magnitude(image)?)?.neg().exp();
    let smooth = gradient_magnitude(illum)?.mul(weight)?.mean();
    fidelity.add(smooth)
}

/// `mean ‖∇D̂‖ · exp(−‖∇ sg(guide)‖)`; with the illumination as guide this is
/// the illumination-aware depth smoothness.
pub fn edge_aware_loss<'t>(depth: Var<'t>, guide: Var<'t>) -> Result<Var<'t>> {
    let (dh, dw) = (depth.shape()[2..].to_vec(), guide.shape()[2..].to_vec());
    if dh != dw {
        return Err(Error::shape(format!("edge_aware_loss: depth {dh:?} vs guide {dw:?}")));
    }
    let weight = gradient_magnitude(guide.stop_gradient())?.neg().exp();
    Ok(gradient_magnitude(depth)?.mul(weight)?.mean())
}

/// `mean (1 − ssim(R̂ · sg(L̂), I)) / 2`.
pub fn reflectance_loss<'t>(
    reflectance: Var<'t>,
    illum: Var<'t>,
    image: Var<'t>,
    cfg: &PhotometricConfig,
) -> Result<Var<'t>> {
    let recon = reflectance.mul(illum.stop_gradient())?;
    Ok(ssim(recon, image, cfg)?.neg().add_scalar(1.0).scale(0.5).mean())
}

/// Gram matrix `F Fᵀ / M` of `[C, M]` features, flattened row-major to `[C·C]`.
pub fn gram<'t>(features: Var<'t>) -> Result<Var<'t>> {
    let s = features.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::shape(format!("gram expects [C, M] with M ≥ 1, got {s:?}")));
    }
    let (c, m) = (s[0], s[1]);
    features.matmul(features.transpose()?)?.scale(1.0 / m as f64).reshape(&[c * c])
}

/// `mean_c cos²(F_s[c], F_t[c]) + cos²(gram(F_s), gram(F_t))`.
pub fn orthogonality_loss<'t>(structure: Var<'t>, texture: Var<'t>) -> Result<Var<'t>> {
    let (ss, st) = (structure.shape(), texture.shape());
    if ss != st || ss.len() != 2 {
        return Err(Error::shape(format!("orthogonality_loss: {ss:?} vs {st:?}")));
    }
    let rows = structure
        .l2_normalize_rows(COSINE_EPS)?
        .mul(texture.l2_normalize_rows(COSINE_EPS)?)?
        .sum_axis(1)?
        .square()
        .mean();
    let n = ss[0] * ss[0];
    let gs = gram(structure)?.reshape(&[1, n])?.l2_normalize_rows(COSINE_EPS)?;
    let gt = gram(texture)?.reshape(&[1, n])?.l2_normalize_rows(COSINE_EPS)?;
    let grams = gs.mul(gt)?.sum().square();
    rows.add(grams)
}
