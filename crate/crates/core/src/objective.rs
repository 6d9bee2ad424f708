//! The weighted training objective, its ablation toggles, and one
//! optimization step.

use serde::Serialize;

use crate::distill::distillation_loss;
use crate::error::{Error, Result};
use crate::geometry::{synthesize_view, Frame};
use crate::models::{forward_depth, forward_expert, forward_illumination, forward_relative_pose, forward_reflectance, forward_texture, ModelBundle};
use crate::nn::{Binder, ParamGroup};
use crate::optim::Adam;
use crate::photometric::{identity_error, masked_photometric_loss_with_identity, PhotometricConfig};
use crate::retinex::{edge_aware_loss, illumination_loss, orthogonality_loss, reflectance_loss, ALPHA_VCLAMP};
use crate::tensor::{Precision, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_v: f64,
    pub lambda_e: f64,
    pub lambda_r: f64,
    pub lambda_o: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_p: 1.0, lambda_v: 0.1, lambda_e: 1.0, lambda_r: 0.1, lambda_o: 0.001, lambda_d: 0.001 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_p, self.lambda_v, self.lambda_e, self.lambda_r, self.lambda_o, self.lambda_d];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Ablation switches: illumination/texture disentangling (`ti`), semantic
/// distillation (`sd`), and learnable graph projection inside it (`gp`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Toggles {
    pub ti: bool,
    pub sd: bool,
    pub gp: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { ti: true, sd: true, gp: true }
    }
}

impl Toggles {
    /// Photometric loss plus image-guided smoothness only.
    pub fn baseline() -> Self {
        Toggles { ti: false, sd: false, gp: false }
    }
}

/// Per-term values; `None` marks a term that the toggles disable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    pub e: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub o: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
}

impl LossTerms {
    /// `(name, weight, value)` for every enabled term.
    pub fn weighted(&self, w: &LossWeights) -> Vec<(&'static str, f64, f64)> {
        let mut out = vec![("p", w.lambda_p, self.p)];
        out.extend(self.v.map(|v| ("v", w.lambda_v, v)));
        out.push(("e", w.lambda_e, self.e));
        out.extend(self.r.map(|v| ("r", w.lambda_r, v)));
        out.extend(self.o.map(|v| ("o", w.lambda_o, v)));
        out.extend(self.d.map(|v| ("d", w.lambda_d, v)));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub total: f64,
    pub weights: LossWeights,
    pub toggles: Toggles,
}

impl LossBreakdown {
    /// Combines term values with their weights.
    pub fn new(terms: LossTerms, weights: LossWeights, toggles: Toggles) -> Self {
        let total = terms.weighted(&weights).iter().map(|(_, w, v)| w * v).sum();
        LossBreakdown { terms, total, weights, toggles }
    }
}

/// Term values with the differentiable total they were combined into.
pub struct Objective<'t> {
    pub breakdown: LossBreakdown,
    pub total: Var<'t>,
    /// Fraction of valid full-resolution pixels kept by the automask.
    pub automask_fraction: f64,
}

/// Everything [`total_loss`] needs besides the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub toggles: Toggles,
    pub photometric: PhotometricConfig,
    pub alpha_vclamp: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            weights: LossWeights::default(),
            toggles: Toggles::default(),
            photometric: PhotometricConfig::default(),
            alpha_vclamp: ALPHA_VCLAMP,
        }
    }
}

/// Depth divided by its mean, so smoothness does not depend on the
/// arbitrary global scale of monocular depth.
fn mean_normalized(depth: Var<'_>) -> Result<Var<'_>> {
    depth.div(depth.mean().add_scalar(1e-7))
}

fn checked<'t>(v: Var<'t>, term: &str) -> Result<(Var<'t>, f64)> {
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite { op: format!("loss term {term}") });
    }
    Ok((v, x))
}

/// Builds the full objective for one target frame and its sources.
/// `b` binds the trainable store, `expert` the frozen expert store.
pub fn total_loss<'t>(
    bundle: &ModelBundle,
    b: &Binder<'t, '_>,
    expert: &Binder<'t, '_>,
    target: &Frame,
    sources: &[Frame],
    cfg: &ObjectiveConfig,
) -> Result<Objective<'t>> {
    if sources.is_empty() {
        return Err(Error::contract("the objective needs at least one source frame"));
    }
    cfg.weights.validate()?;
    let tape = b.tape();
    let k = target.intrinsics;
    let image = tape.constant(target.image.clone());
    let source_vars: Vec<Var> = sources.iter().map(|s| tape.constant(s.image.clone())).collect();

    let depth = forward_depth(bundle, b, image)?;
    let poses = source_vars
        .iter()
        .zip(sources)
        .map(|(&s, f)| forward_relative_pose(bundle, b, (image, target.index), (s, f.index)))
        .collect::<Result<Vec<_>>>()?;
    let identity = identity_error(image, &source_vars, &cfg.photometric)?;

    let illum = if cfg.toggles.ti { Some(forward_illumination(bundle, b, &depth.features)?) } else { None };
    let guide = illum.unwrap_or(image);

    let scales = depth.depths.len() as f64;
    let mut photometric: Option<Var> = None;
    let mut smooth: Option<Var> = None;
    let mut automask_fraction = 0.0;
    for (i, &d) in depth.depths.iter().enumerate() {
        // depth enters the warp up to scale only; fixing its mean leaves the
        // pose network to carry the scale
        let d_warp = mean_normalized(d)?;
        let mut views = Vec::new();
        for (&src, pose) in source_vars.iter().zip(&poses) {
            let syn = synthesize_view(src, d_warp, pose, &k)?;
            views.push((syn.image, syn.mask));
        }
        let masked = masked_photometric_loss_with_identity(image, &views, identity.as_ref(), &cfg.photometric)?;
        if i == 0 {
            automask_fraction = masked.automask_fraction();
        }
        let e = edge_aware_loss(d_warp, guide)?;
        photometric = Some(match photometric {
            Some(p) => p.add(masked.loss)?,
            None => masked.loss,
        });
        smooth = Some(match smooth {
            Some(s) => s.add(e)?,
            None => e,
        });
    }
    let (lp, p) = checked(photometric.expect("scales").scale(1.0 / scales), "p")?;
    let (le, e) = checked(smooth.expect("scales").scale(1.0 / scales), "e")?;

    let w = &cfg.weights;
    let mut total = lp.scale(w.lambda_p).add(le.scale(w.lambda_e))?;
    let mut terms = LossTerms { p, e, ..LossTerms::default() };

    if let Some(illum) = illum {
        let finest = mean_normalized(depth.depths[0])?;
        let (lv, v) = checked(illumination_loss(image, illum, finest, cfg.alpha_vclamp)?, "v")?;
        let texture = forward_texture(bundle, b, image)?;
        let reflect = forward_reflectance(bundle, b, &depth.features, &texture)?;
        let (lr, r) = checked(reflectance_loss(reflect, illum, image, &cfg.photometric)?, "r")?;
        let fs = depth.nodes()?.values;
        let ft = crate::distill::FeatureNodes::from_map(*texture.last().expect("texture levels"))?.values;
        let (lo, o) = checked(orthogonality_loss(fs, ft)?, "o")?;
        total = total.add(lv.scale(w.lambda_v))?.add(lr.scale(w.lambda_r))?.add(lo.scale(w.lambda_o))?;
        terms.v = Some(v);
        terms.r = Some(r);
        terms.o = Some(o);
    }
    if cfg.toggles.sd {
        let e_feats = forward_expert(bundle, expert, image)?;
        let nodes_e = bundle.expert_adapter.adapt(b, e_feats)?;
        let (gin_es, gin_se) = &bundle.gin_projectors;
        let ld = distillation_loss(&depth.nodes()?, &nodes_e, gin_es, gin_se, b, cfg.toggles.gp)?;
        let (ld, d) = checked(ld, "d")?;
        total = total.add(ld.scale(w.lambda_d))?;
        terms.d = Some(d);
    }
    let breakdown = LossBreakdown::new(terms, *w, cfg.toggles);
    Ok(Objective { breakdown, total, automask_fraction })
}

/// Per-group base learning rates and the per-epoch decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LearningRates {
    pub encoder: f64,
    pub head: f64,
    pub decay: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates { encoder: 5e-5, head: 1e-4, decay: 0.9 }
    }
}

impl LearningRates {
    pub fn at(&self, group: ParamGroup, epoch: usize) -> f64 {
        let base = match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Head => self.head,
            ParamGroup::Frozen => 0.0,
        };
        base * self.decay.powi(epoch as i32)
    }
}

/// Result of [`train_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// False when a non-finite gradient made the step a no-op.
    pub applied: bool,
    pub automask_fraction: f64,
}

/// Forward, backward and one Adam update at 32-bit precision.
pub fn train_step(
    bundle: &mut ModelBundle,
    optimizer: &mut Adam,
    target: &Frame,
    sources: &[Frame],
    cfg: &ObjectiveConfig,
    rates: &LearningRates,
    epoch: usize,
) -> Result<StepOutcome> {
    let tape = Tape::new(Precision::Single);
    let (objective, grads) = {
        let b = Binder::new(&tape, &bundle.store);
        let eb = Binder::new(&tape, &bundle.expert_store);
        let objective = total_loss(bundle, &b, &eb, target, sources, cfg)?;
        match tape.backward(objective.total) {
            Ok(()) => {}
            Err(Error::NonFinite { op }) => {
                log::warn!("non-finite gradient from `{op}`; step skipped");
                return Ok(StepOutcome {
                    breakdown: objective.breakdown,
                    applied: false,
                    automask_fraction: objective.automask_fraction,
                });
            }
            Err(e) => return Err(e),
        }
        (objective, b.grads())
    };
    let applied = optimizer.update(&mut bundle.store, &grads, |g| rates.at(g, epoch))?;
    if !applied {
        log::warn!("non-finite gradient; step skipped");
    }
    Ok(StepOutcome { breakdown: objective.breakdown, applied, automask_fraction: objective.automask_fraction })
}

/// One JSON-lines log record of a training step.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub terms: LossTerms,
    pub total: f64,
    pub lr: GroupRates,
    pub applied: bool,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GroupRates {
    pub encoder: f64,
    pub head: f64,
}

impl StepRecord {
    pub fn new(step: u64, epoch: usize, outcome: &StepOutcome, rates: &LearningRates) -> Self {
        StepRecord {
            step,
            epoch,
            terms: outcome.breakdown.terms,
            total: outcome.breakdown.total,
            lr: GroupRates { encoder: rates.at(ParamGroup::Encoder, epoch), head: rates.at(ParamGroup::Head, epoch) },
            applied: outcome.applied,
        }
    }
}
