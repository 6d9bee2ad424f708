//! Finite-difference and stop-gradient checks for every training loss on
//! small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{distillation_loss, Direction, FeatureNodes, GinProjector};
use crate::error::Result;
use crate::geometry::{synthesize_view, Intrinsics, PoseVar};
use crate::gradcheck::{check, GradCheckConfig, GradCheckReport};
use crate::nn::{Binder, ParamStore};
use crate::photometric::{masked_photometric_loss, PhotometricConfig};
use crate::retinex::{edge_aware_loss, illumination_loss, orthogonality_loss, reflectance_loss, ALPHA_VCLAMP};
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Spatial size of the random inputs.
pub const CHECK_HEIGHT: usize = 6;
pub const CHECK_WIDTH: usize = 8;

/// Feature channels for the orthogonality and distillation checks.
const CHECK_CHANNELS: usize = 4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Result of one stop-gradient contract check.
#[derive(Clone, Debug, serde::Serialize)]
pub struct StopGradReport {
    pub name: String,
    /// Largest gradient magnitude reaching the stopped argument.
    pub max_abs_grad: f64,
    pub passed: bool,
}

/// Gradient checks for one seed.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LossSuite {
    pub seed: u64,
    pub gradients: Vec<GradCheckReport>,
    pub stop_gradients: Vec<StopGradReport>,
}

impl LossSuite {
    pub fn passed(&self) -> bool {
        self.gradients.iter().all(|r| r.passed) && self.stop_gradients.iter().all(|r| r.passed)
    }
}

struct Inputs {
    image: Tensor,
    source: Tensor,
    views: [Tensor; 2],
    illum: Tensor,
    depth: Tensor,
    reflectance: Tensor,
    pose: Tensor,
    structure: Tensor,
    texture: Tensor,
    expert: Tensor,
}

impl Inputs {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = (CHECK_HEIGHT, CHECK_WIDTH, CHECK_CHANNELS);
        let image = random(&mut rng, &[1, 3, h, w], 0.0, 1.0);
        let source = random(&mut rng, &[1, 3, h, w], 0.0, 1.0);
        let views = [random(&mut rng, &[1, 3, h, w], 0.0, 1.0), random(&mut rng, &[1, 3, h, w], 0.0, 1.0)];
        let illum = random(&mut rng, &[1, 1, h, w], 0.05, 1.0);
        let depth = random(&mut rng, &[1, 1, h, w], 0.5, 5.0);
        let reflectance = random(&mut rng, &[1, 3, h, w], 0.0, 1.5);
        let mut pose = random(&mut rng, &[6], -0.02, 0.02);
        pose.data_mut()[5] += 0.1;
        let structure = random(&mut rng, &[c, h * w], -1.0, 1.0);
        let texture = random(&mut rng, &[c, h * w], -1.0, 1.0);
        let expert = random(&mut rng, &[c, h * w], -1.0, 1.0);
        Inputs { image, source, views, illum, depth, reflectance, pose, structure, texture, expert }
    }
}

fn projectors(seed: u64, store: &mut ParamStore) -> (GinProjector, GinProjector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d1f);
    let es = GinProjector::new(store, &mut rng, "es", CHECK_CHANNELS, Direction::ExpertToStructure);
    let se = GinProjector::new(store, &mut rng, "se", CHECK_CHANNELS, Direction::StructureToExpert);
    (es, se)
}

fn stop_gradient_check<F>(name: &str, stopped: &Tensor, precision: Precision, f: F) -> Result<StopGradReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new(precision);
    let leaf = tape.leaf(stopped.clone());
    let loss = f(&tape, leaf)?;
    tape.backward(loss)?;
    let max_abs_grad = leaf.grad().map_or(0.0, |g| g.data().iter().fold(0.0, |m: f64, v| m.max(v.abs())));
    Ok(StopGradReport { name: name.to_string(), max_abs_grad, passed: max_abs_grad == 0.0 })
}

/// Runs every loss through [`check`] and every stop-gradient argument
/// through an exact zero-gradient check. Stop-gradient arguments enter the
/// finite-difference checks as constants.
pub fn loss_suite(seed: u64, precision: Precision) -> Result<LossSuite> {
    let cfg = GradCheckConfig::for_precision(precision);
    let pc = PhotometricConfig::default();
    let x = Inputs::new(seed);
    let k = Intrinsics::for_size(CHECK_WIDTH, CHECK_HEIGHT);
    let mut hole = Tensor::ones(&[1, 1, CHECK_HEIGHT, CHECK_WIDTH]);
    hole.set4(0, 0, 2, 3, 0.0);

    let mut store = ParamStore::new();
    let (es, se) = projectors(seed, &mut store);
    let store = store;

    let mut gradients = vec![
        check("photometric", &[x.views[0].clone(), x.views[1].clone()], &cfg, |t, v| {
            let views = [(v[0], hole.clone()), (v[1], Tensor::ones(hole.shape()))];
            Ok(masked_photometric_loss(t.constant(x.image.clone()), &views, &[t.constant(x.source.clone())], &pc)?.loss)
        })?,
        check("view_synthesis", &[x.depth.clone(), x.pose.clone()], &cfg, |t, v| {
            let syn = synthesize_view(t.constant(x.source.clone()), v[0], &PoseVar::from_params(v[1])?, &k)?;
            Ok(masked_photometric_loss(t.constant(x.image.clone()), &[(syn.image, syn.mask)], &[], &pc)?.loss)
        })?,
        check("illumination", &[x.image.clone(), x.illum.clone()], &cfg, |t, v| {
            illumination_loss(v[0], v[1], t.constant(x.depth.clone()), ALPHA_VCLAMP)
        })?,
        check("edge_aware", &[x.depth.clone()], &cfg, |t, v| edge_aware_loss(v[0], t.constant(x.illum.clone())))?,
        check("reflectance", &[x.reflectance.clone(), x.image.clone()], &cfg, |t, v| {
            reflectance_loss(v[0], t.constant(x.illum.clone()), v[1], &pc)
        })?,
        check("orthogonality", &[x.structure.clone(), x.texture.clone()], &cfg, |_, v| orthogonality_loss(v[0], v[1]))?,
    ];
    let fc1 = store.get(es.first.weight).value.clone();
    for (name, use_gin) in [("distillation", true), ("distillation_no_gin", false)] {
        gradients.push(check(name, &[x.structure.clone(), fc1.clone()], &cfg, |t, v| {
            let b = Binder::new(t, &store);
            b.bind(es.first.weight, v[1]);
            let expert = FeatureNodes::new(t.constant(x.expert.clone()))?;
            distillation_loss(&FeatureNodes::new(v[0])?, &expert, &es, &se, &b, use_gin)
        })?);
    }

    let stop_gradients = vec![
        stop_gradient_check("illumination/depth", &x.depth, precision, |t, d| {
            illumination_loss(t.constant(x.image.clone()), t.leaf(x.illum.clone()), d, ALPHA_VCLAMP)
        })?,
        stop_gradient_check("edge_aware/illumination", &x.illum, precision, |t, l| {
            edge_aware_loss(t.leaf(x.depth.clone()), l)
        })?,
        stop_gradient_check("reflectance/illumination", &x.illum, precision, |t, l| {
            reflectance_loss(t.leaf(x.reflectance.clone()), l, t.constant(x.image.clone()), &pc)
        })?,
        stop_gradient_check("distillation/expert", &x.expert, precision, |t, e| {
            let b = Binder::new(t, &store);
            let s = FeatureNodes::new(t.leaf(x.structure.clone()))?;
            distillation_loss(&s, &FeatureNodes::new(e)?, &es, &se, &b, true)
        })?,
    ];
    Ok(LossSuite { seed, gradients, stop_gradients })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_double_precision() {
        for seed in 0..3 {
            let suite = loss_suite(seed, Precision::Double).unwrap();
            assert!(suite.passed(), "{suite:#?}");
            for r in &suite.gradients {
                assert!(r.compared > 0, "{r:?}");
                assert!(r.excluded_fraction() < 0.2, "{r:?}");
            }
        }
    }

    #[test]
    fn suite_passes_at_single_precision() {
        let suite = loss_suite(7, Precision::Single).unwrap();
        assert!(suite.passed(), "{suite:#?}");
    }

    #[test]
    fn suite_is_deterministic() {
        let a = loss_suite(3, Precision::Double).unwrap();
        let b = loss_suite(3, Precision::Double).unwrap();
        let errs = |s: &LossSuite| s.gradients.iter().map(|r| r.relative_error).collect::<Vec<_>>();
        assert_eq!(errs(&a), errs(&b));
    }
}
