//! SSIM, the per-pair photometric error, and the masked minimum-reprojection
//! loss with its automask.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Added to the error of pixels a synthesized view cannot see, so the
/// per-pixel minimum prefers any view that does.
const INVALID_PENALTY: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricConfig {
    /// Weight of the SSIM branch.
    pub alpha_ssim: f64,
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        PhotometricConfig { alpha_ssim: 0.85, window: 3, c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

impl PhotometricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_ssim) {
            return Err(Error::Config(format!("alpha_ssim {} outside [0,1]", self.alpha_ssim)));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("SSIM window {} must be odd and positive", self.window)));
        }
        Ok(())
    }
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, op: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() != 4 {
        return Err(Error::shape(format!("{op}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Per-pixel SSIM map `[N,1,H,W]`, channel-averaged, clamped to `[-1, 1]`.
pub fn ssim<'t>(a: Var<'t>, b: Var<'t>, cfg: &PhotometricConfig) -> Result<Var<'t>> {
    same_shape(&a, &b, "ssim")?;
    let w = cfg.window;
    let mu_a = a.box_filter(w)?;
    let mu_b = b.box_filter(w)?;
    let mu_a2 = mu_a.square();
    let mu_b2 = mu_b.square();
    let mu_ab = mu_a.mul(mu_b)?;
    let var_a = a.square().box_filter(w)?.sub(mu_a2)?;
    let var_b = b.square().box_filter(w)?.sub(mu_b2)?;
    let cov = a.mul(b)?.box_filter(w)?.sub(mu_ab)?;
    let num = mu_ab.scale(2.0).add_scalar(cfg.c1).mul(cov.scale(2.0).add_scalar(cfg.c2))?;
    let den = mu_a2.add(mu_b2)?.add_scalar(cfg.c1).mul(var_a.add(var_b)?.add_scalar(cfg.c2))?;
    num.div(den)?.clamp(-1.0, 1.0).mean_axis(1)
}

/// `(α/2)(1 − ssim) + (1 − α)·mean_c |target − synthesized|`, `[N,1,H,W]`.
pub fn pair_loss<'t>(target: Var<'t>, synthesized: Var<'t>, cfg: &PhotometricConfig) -> Result<Var<'t>> {
    same_shape(&target, &synthesized, "pair_loss")?;
    let a = cfg.alpha_ssim;
    let l1 = target.sub(synthesized)?.abs().mean_axis(1)?;
    if a == 0.0 {
        return Ok(l1);
    }
    let dssim = ssim(target, synthesized, cfg)?.neg().add_scalar(1.0);
    dssim.scale(a / 2.0).add(l1.scale(1.0 - a))
}

/// Result of the masked photometric reduction.
pub struct MaskedLoss<'t> {
    /// Mean of `μ · min-loss` over valid pixels.
    pub loss: Var<'t>,
    /// Automask μ `[1,1,H,W]`, 1 where reprojection beats the raw sources.
    pub automask: Tensor,
    /// Pixels seen by at least one synthesized view.
    pub valid: Tensor,
}

impl MaskedLoss<'_> {
    /// Fraction of valid pixels kept by μ.
    pub fn automask_fraction(&self) -> f64 {
        let valid = self.valid.sum();
        if valid == 0.0 {
            return 0.0;
        }
        self.automask.sum() / valid
    }
}

/// Per-pixel minimum of `pair_loss` between the target and the unwarped
/// sources, outside differentiation. `None` when there are no sources.
pub fn identity_error(target: Var<'_>, sources: &[Var<'_>], cfg: &PhotometricConfig) -> Result<Option<Tensor>> {
    let target_const = target.stop_gradient();
    let mut min_identity: Option<Tensor> = None;
    for src in sources {
        let l = pair_loss(target_const, src.stop_gradient(), cfg)?.value();
        min_identity = Some(match min_identity {
            Some(m) => m.zip_map(&l, f64::min)?,
            None => l,
        });
    }
    Ok(min_identity)
}

/// Keeps a pixel of a `[1,1,H,W]` mask only if every pixel of the
/// surrounding `(2r+1)²` window inside the image is set, so SSIM windows
/// never reach zero-filled samples.
pub fn erode(mask: &Tensor, radius: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(Error::shape(format!("masks must be [1,1,H,W], got {s:?}")));
    }
    if radius == 0 {
        return Ok(mask.clone());
    }
    let (h, w) = (s[2], s[3]);
    let m = mask.data();
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let rows = y.saturating_sub(radius)..(y + radius + 1).min(h);
            let all = rows.into_iter().all(|yy| (x.saturating_sub(radius)..(x + radius + 1).min(w)).all(|xx| m[yy * w + xx] > 0.0));
            if all { 1.0 } else { 0.0 }
        })
        .collect();
    Tensor::new(s, data)
}

/// Per-pixel minimum of `pair_loss` over the synthesized views, gated by the
/// automask against the unwarped `sources`, averaged over valid pixels.
pub fn masked_photometric_loss<'t>(
    target: Var<'t>,
    synthesized: &[(Var<'t>, Tensor)],
    sources: &[Var<'t>],
    cfg: &PhotometricConfig,
) -> Result<MaskedLoss<'t>> {
    let identity = identity_error(target, sources, cfg)?;
    masked_photometric_loss_with_identity(target, synthesized, identity.as_ref(), cfg)
}

/// [`masked_photometric_loss`] with a precomputed [`identity_error`], so
/// several depth scales can share it.
pub fn masked_photometric_loss_with_identity<'t>(
    target: Var<'t>,
    synthesized: &[(Var<'t>, Tensor)],
    identity: Option<&Tensor>,
    cfg: &PhotometricConfig,
) -> Result<MaskedLoss<'t>> {
    if synthesized.is_empty() {
        return Err(Error::contract("masked_photometric_loss needs at least one synthesized view"));
    }
    let tape = target.tape();
    let radius = if cfg.alpha_ssim > 0.0 { cfg.window / 2 } else { 0 };
    let mut min_loss: Option<Var> = None;
    let mut valid: Option<Tensor> = None;
    for (view, mask) in synthesized {
        let mask = &erode(mask, radius)?;
        let penalty = tape.constant(mask.map(|m| if m > 0.0 { 0.0 } else { INVALID_PENALTY }));
        let l = pair_loss(target, *view, cfg)?.add(penalty)?;
        min_loss = Some(match min_loss {
            Some(m) => m.minimum(l)?,
            None => l,
        });
        valid = Some(match valid {
            Some(v) => v.zip_map(mask, |a, b| if a > 0.0 || b > 0.0 { 1.0 } else { 0.0 })?,
            None => mask.map(|m| if m > 0.0 { 1.0 } else { 0.0 }),
        });
    }
    let (min_loss, valid) = (min_loss.expect("non-empty"), valid.expect("non-empty"));

    let reproj = min_loss.value();
    let automask = match identity {
        Some(id) => {
            if id.shape() != reproj.shape() {
                return Err(Error::shape(format!("identity error {:?} vs loss {:?}", id.shape(), reproj.shape())));
            }
            let data = reproj
                .data()
                .iter()
                .zip(id.data())
                .zip(valid.data())
                .map(|((&r, &i), &v)| if v > 0.0 && r < i { 1.0 } else { 0.0 })
                .collect();
            Tensor::new(reproj.shape(), data)?
        }
        None => valid.clone(),
    };

    let count = valid.sum();
    let gated = min_loss.mul(tape.constant(automask.clone()))?;
    let loss = if count > 0.0 { gated.sum().scale(1.0 / count) } else { gated.sum().scale(0.0) };
    Ok(MaskedLoss { loss, automask, valid })
}
