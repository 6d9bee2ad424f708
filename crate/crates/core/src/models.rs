//! Toy-scale networks: structure and texture encoders, depth, illumination
//! and reflectance decoders, a pose network, and a frozen random expert.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distill::{Direction, ExpertAdapter, FeatureNodes, GinProjector};
use crate::error::{Error, Result};
use crate::geometry::PoseVar;
use crate::nn::{Binder, Conv2d, Linear, ParamGroup, ParamStore};
use crate::retinex::ILLUMINATION_FLOOR;
use crate::tensor::Var;

/// Closest depth the decoder can express.
pub const MIN_DEPTH: f64 = 0.1;
/// Farthest depth the decoder can express.
pub const MAX_DEPTH: f64 = 100.0;
/// Depth decoded from the untrained heads, near the log-midpoint of the range,
/// where the sigmoid parameterization is far from saturating at either end.
pub const INITIAL_DEPTH: f64 = 3.0;
/// Pose network outputs are multiplied by this before exponentiation.
pub const POSE_SCALE: f64 = 0.01;
/// Channel count of the expert's last stage.
pub const EXPERT_CHANNELS: usize = 48;

const INPUT_MEAN: f64 = 0.45;
const INPUT_STD: f64 = 0.225;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyNetConfig {
    pub base_channels: usize,
    /// Number of stride-2 encoder stages.
    pub encoder_depth: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        ToyNetConfig { base_channels: 16, encoder_depth: 3, height: 48, width: 64, seed: 42 }
    }
}

impl ToyNetConfig {
    /// Image sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.encoder_depth
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.size_multiple();
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels {} < 4", self.base_channels)));
        }
        if self.encoder_depth == 0 || self.encoder_depth > 6 {
            return Err(Error::Config(format!("encoder_depth {} outside 1..=6", self.encoder_depth)));
        }
        if self.height == 0 || self.width == 0 || self.height % m != 0 || self.width % m != 0 {
            return Err(Error::Config(format!(
                "input size {}x{} must be a positive multiple of {m}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Number of depth scales: full resolution plus one per stage.
    pub fn scales(&self) -> usize {
        self.encoder_depth + 1
    }

    /// Encoder output channels at level `i` (level 0 is the full-resolution stem).
    pub fn encoder_channels(&self, i: usize) -> usize {
        let c = self.base_channels;
        if i == 0 {
            c / 2
        } else {
            c << (i - 1)
        }
    }

    /// Decoder channels at level `i`.
    pub fn decoder_channels(&self, i: usize) -> usize {
        let c = self.base_channels;
        (c / 2).max((c << i) >> 2)
    }

    /// Shape `(C, H', W')` of the deepest structure features.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let m = self.size_multiple();
        (self.encoder_channels(self.encoder_depth), self.height / m, self.width / m)
    }
}

fn normalize_input(x: Var<'_>) -> Var<'_> {
    x.add_scalar(-INPUT_MEAN).scale(1.0 / INPUT_STD)
}

/// `[1,2,H,W]` maps of the column and row, each spanning `[-1, 1]`.
pub fn coordinate_channels(height: usize, width: usize) -> crate::tensor::Tensor {
    let span = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    let mut data = Vec::with_capacity(2 * height * width);
    data.extend((0..height * width).map(|i| span(i % width, width)));
    data.extend((0..height * width).map(|i| span(i / width, height)));
    crate::tensor::Tensor::new(&[1, 2, height, width], data).expect("coordinate shape")
}

/// Stem at full resolution, then one stride-2 convolution per stage and an
/// extra convolution at the deepest level. Returns every level's output.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: Conv2d,
    pub stages: Vec<Conv2d>,
    pub deep: Conv2d,
    pub coords: bool,
}

impl Encoder {
    /// With `coords`, two channels holding the pixel's normalized column and
    /// row are appended to the input.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ToyNetConfig,
        in_channels: usize,
        coords: bool,
    ) -> Self {
        let g = ParamGroup::Encoder;
        let cin = in_channels + if coords { 2 } else { 0 };
        let stem = Conv2d::new(store, rng, &format!("{name}.stem"), cin, cfg.encoder_channels(0), 3, 1, g);
        let stages = (1..=cfg.encoder_depth)
            .map(|i| {
                let (cin, cout) = (cfg.encoder_channels(i - 1), cfg.encoder_channels(i));
                Conv2d::new(store, rng, &format!("{name}.stage{i}"), cin, cout, 3, 2, g)
            })
            .collect();
        let c = cfg.encoder_channels(cfg.encoder_depth);
        let deep = Conv2d::new(store, rng, &format!("{name}.deep"), c, c, 3, 1, g);
        Encoder { stem, stages, deep, coords }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, image: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut input = normalize_input(image);
        if self.coords {
            let s = image.shape();
            input = Var::concat(&[input, image.tape().constant(coordinate_channels(s[2], s[3]))], 1)?;
        }
        let mut x = self.stem.forward(b, input)?.elu();
        let mut levels = vec![x];
        for stage in &self.stages {
            x = stage.forward(b, x)?.elu();
            levels.push(x);
        }
        let last = levels.pop().expect("at least one stage");
        levels.push(self.deep.forward(b, last)?.elu());
        Ok(levels)
    }
}

/// U-shaped decoder: from the deepest level upwards, upsample ×2, concatenate
/// the skip features and convolve. Heads emit raw maps at selected levels.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// Indexed by level.
    pub convs: Vec<Conv2d>,
    pub heads: Vec<Option<Conv2d>>,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ToyNetConfig,
        out_channels: usize,
        head_levels: &[usize],
    ) -> Self {
        let g = ParamGroup::Head;
        let d = cfg.encoder_depth;
        let mut convs = Vec::new();
        let mut heads = Vec::new();
        for i in 0..=d {
            let cin = if i == d { cfg.encoder_channels(d) } else { cfg.decoder_channels(i + 1) + cfg.encoder_channels(i) };
            let cout = cfg.decoder_channels(i);
            convs.push(Conv2d::new(store, rng, &format!("{name}.up{i}"), cin, cout, 3, 1, g));
            heads.push(
                head_levels
                    .contains(&i)
                    .then(|| Conv2d::new(store, rng, &format!("{name}.head{i}"), cout, out_channels, 3, 1, g)),
            );
        }
        Decoder { convs, heads }
    }

    /// Raw head outputs per level (level 0 first), `None` where no head sits.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, skips: &[Var<'t>]) -> Result<Vec<Option<Var<'t>>>> {
        let d = self.convs.len() - 1;
        if skips.len() != d + 1 {
            return Err(Error::shape(format!("decoder needs {} feature levels, got {}", d + 1, skips.len())));
        }
        let mut outputs = vec![None; d + 1];
        let mut x = skips[d];
        for i in (0..=d).rev() {
            if i < d {
                let s = skips[i].shape();
                x = Var::concat(&[x.resize_bilinear(s[2], s[3])?, skips[i]], 1)?;
            }
            x = self.convs[i].forward(b, x)?.elu();
            if let Some(head) = &self.heads[i] {
                outputs[i] = Some(head.forward(b, x)?);
            }
        }
        Ok(outputs)
    }
}

/// Stride-2 convolutions over the concatenated pair and a dense layer from
/// the whole coarse map to six parameters, so the head can tell where in the
/// image each local motion occurs.
#[derive(Clone, Debug)]
pub struct PoseNet {
    pub convs: Vec<Conv2d>,
    pub out: Linear,
}

impl PoseNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ToyNetConfig) -> Self {
        let g = ParamGroup::Head;
        let mut cin = 6;
        let mut convs = Vec::new();
        for i in 0..cfg.encoder_depth {
            let cout = cfg.base_channels << i >> 1;
            convs.push(Conv2d::new(store, rng, &format!("{name}.conv{i}"), cin, cout, 3, 2, g));
            cin = cout;
        }
        let (h, w) = (cfg.height >> cfg.encoder_depth, cfg.width >> cfg.encoder_depth);
        let out = Linear::new(store, rng, &format!("{name}.out"), cin * h * w, 6, g);
        PoseNet { convs, out }
    }

    /// The six pose parameters, before exponentiation.
    pub fn params<'t>(&self, b: &Binder<'t, '_>, a: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
        let mut x = normalize_input(Var::concat(&[a, c], 1)?);
        for conv in &self.convs {
            x = conv.forward(b, x)?.elu();
        }
        Ok(self.out.forward(b, x)?.scale(POSE_SCALE))
    }
}

/// Frozen random stand-in for a large pretrained encoder.
#[derive(Clone, Debug)]
pub struct ExpertEncoder {
    pub stages: Vec<Conv2d>,
}

impl ExpertEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ToyNetConfig) -> Self {
        let mut cin = 3;
        let stages = (0..cfg.encoder_depth)
            .map(|i| {
                let cout = if i + 1 == cfg.encoder_depth { EXPERT_CHANNELS } else { cfg.base_channels << i };
                let conv = Conv2d::new(store, rng, &format!("expert.stage{i}"), cin, cout, 3, 2, ParamGroup::Frozen);
                cin = cout;
                conv
            })
            .collect();
        ExpertEncoder { stages }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, image: Var<'t>) -> Result<Var<'t>> {
        let mut x = normalize_input(image);
        for conv in &self.stages {
            x = conv.forward(b, x)?.elu();
        }
        Ok(x)
    }
}

/// Every network of the training objective. Trainable parameters live in
/// `store`; the expert has its own store whose entries are all frozen.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ToyNetConfig,
    pub store: ParamStore,
    pub expert_store: ParamStore,
    pub structure_encoder: Encoder,
    pub texture_encoder: Encoder,
    pub depth_decoder: Decoder,
    pub illum_decoder: Decoder,
    pub reflect_decoder: Decoder,
    pub pose_net: PoseNet,
    pub expert_encoder: ExpertEncoder,
    pub expert_adapter: ExpertAdapter,
    /// Expert → structure and structure → expert projectors.
    pub gin_projectors: (GinProjector, GinProjector),
}

/// Output of [`forward_depth`].
pub struct DepthOutput<'t> {
    /// Sigmoid disparities at their native scales, full resolution first.
    pub disparities: Vec<Var<'t>>,
    /// Depth per scale, upsampled to full resolution.
    pub depths: Vec<Var<'t>>,
    /// Structure-encoder levels; the last one is E^(s).
    pub features: Vec<Var<'t>>,
}

impl<'t> DepthOutput<'t> {
    /// E^(s).
    pub fn deepest(&self) -> Var<'t> {
        *self.features.last().expect("encoder levels")
    }

    /// F^(s): E^(s) as channel nodes.
    pub fn nodes(&self) -> Result<FeatureNodes<'t>> {
        FeatureNodes::from_map(self.deepest())
    }
}

/// Maps a sigmoid output to depth in `[MIN_DEPTH, MAX_DEPTH]`.
pub fn disparity_to_depth(sigma: Var<'_>) -> Var<'_> {
    let a = 1.0 / MIN_DEPTH - 1.0 / MAX_DEPTH;
    let b = 1.0 / MAX_DEPTH;
    sigma.scale(a).add_scalar(b).powf(-1.0)
}

impl ModelBundle {
    pub fn new(config: ToyNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let structure_encoder = Encoder::new(&mut store, &mut rng, "structure", cfg, 3, true);
        let texture_encoder = Encoder::new(&mut store, &mut rng, "texture", cfg, 3, false);
        let all_levels: Vec<usize> = (0..cfg.scales()).collect();
        let depth_decoder = Decoder::new(&mut store, &mut rng, "depth", cfg, 1, &all_levels);
        let logit = depth_to_logit(INITIAL_DEPTH) as f32 as f64;
        for head in depth_decoder.heads.iter().flatten() {
            store.set(head.bias, crate::tensor::Tensor::full(&[1], logit))?;
        }
        let illum_decoder = Decoder::new(&mut store, &mut rng, "illumination", cfg, 1, &[0]);
        let reflect_decoder = Decoder::new(&mut store, &mut rng, "reflectance", cfg, 3, &[0]);
        let pose_net = PoseNet::new(&mut store, &mut rng, "pose", cfg);
        let (c, h, w) = cfg.feature_shape();
        let expert_adapter = ExpertAdapter::new(&mut store, &mut rng, "adapter", EXPERT_CHANNELS, (c, h, w));
        let gin_es = GinProjector::new(&mut store, &mut rng, "gin_es", c, Direction::ExpertToStructure);
        let gin_se = GinProjector::new(&mut store, &mut rng, "gin_se", c, Direction::StructureToExpert);

        let mut expert_store = ParamStore::new();
        let mut expert_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e4be_27c0_ffee);
        let expert_encoder = ExpertEncoder::new(&mut expert_store, &mut expert_rng, cfg);

        Ok(ModelBundle {
            config,
            store,
            expert_store,
            structure_encoder,
            texture_encoder,
            depth_decoder,
            illum_decoder,
            reflect_decoder,
            pose_net,
            expert_encoder,
            expert_adapter,
            gin_projectors: (gin_es, gin_se),
        })
    }

    /// Trainable plus frozen parameter count.
    pub fn param_count(&self) -> usize {
        self.store.count() + self.expert_store.count()
    }

    fn check_image(&self, image: Var<'_>) -> Result<()> {
        let s = image.shape();
        let expected = [1, 3, self.config.height, self.config.width];
        if s != expected {
            return Err(Error::shape(format!("model input {s:?}, configured for {expected:?}")));
        }
        Ok(())
    }
}

/// Sigmoid pre-activation whose decoded depth is `depth`.
pub fn depth_to_logit(depth: f64) -> f64 {
    let sigma = (1.0 / depth - 1.0 / MAX_DEPTH) / (1.0 / MIN_DEPTH - 1.0 / MAX_DEPTH);
    (sigma / (1.0 - sigma)).ln()
}

/// Multi-scale depth and the structure features of `image`.
pub fn forward_depth<'t>(bundle: &ModelBundle, b: &Binder<'t, '_>, image: Var<'t>) -> Result<DepthOutput<'t>> {
    bundle.check_image(image)?;
    let features = bundle.structure_encoder.forward(b, image)?;
    let heads = bundle.depth_decoder.forward(b, &features)?;
    let (h, w) = (bundle.config.height, bundle.config.width);
    let mut disparities = Vec::new();
    let mut depths = Vec::new();
    for head in heads {
        let sigma = head.expect("depth head on every level").sigmoid();
        let full = if sigma.shape()[2..] == [h, w] { sigma } else { sigma.resize_bilinear(h, w)? };
        disparities.push(sigma);
        depths.push(disparity_to_depth(full));
    }
    Ok(DepthOutput { disparities, depths, features })
}

/// Relative pose mapping points of frame `a` into frame `c`.
pub fn forward_pose<'t>(bundle: &ModelBundle, b: &Binder<'t, '_>, a: Var<'t>, c: Var<'t>) -> Result<PoseVar<'t>> {
    bundle.check_image(a)?;
    bundle.check_image(c)?;
    PoseVar::from_params(bundle.pose_net.params(b, a, c)?)
}

/// Target-to-source pose with the pair always presented to the pose network
/// in temporal order: for an earlier source the network sees
/// `(source, target)` and its output is inverted.
pub fn forward_relative_pose<'t>(
    bundle: &ModelBundle,
    b: &Binder<'t, '_>,
    target: (Var<'t>, i64),
    source: (Var<'t>, i64),
) -> Result<PoseVar<'t>> {
    if source.1 < target.1 {
        forward_pose(bundle, b, source.0, target.0)?.inverse()
    } else {
        forward_pose(bundle, b, target.0, source.0)
    }
}

/// Texture-encoder levels of `image`; the last one is E^(t).
pub fn forward_texture<'t>(bundle: &ModelBundle, b: &Binder<'t, '_>, image: Var<'t>) -> Result<Vec<Var<'t>>> {
    bundle.check_image(image)?;
    bundle.texture_encoder.forward(b, image)
}

/// Expert features E^(e). `b` must bind the expert store.
pub fn forward_expert<'t>(bundle: &ModelBundle, b: &Binder<'t, '_>, image: Var<'t>) -> Result<Var<'t>> {
    bundle.check_image(image)?;
    bundle.expert_encoder.forward(b, image)
}

/// Illumination estimate in `[ILLUMINATION_FLOOR, 1]` from structure features.
pub fn forward_illumination<'t>(bundle: &ModelBundle, b: &Binder<'t, '_>, structure: &[Var<'t>]) -> Result<Var<'t>> {
    let out = bundle.illum_decoder.forward(b, structure)?[0].expect("illumination head");
    Ok(out.sigmoid().scale(1.0 - ILLUMINATION_FLOOR).add_scalar(ILLUMINATION_FLOOR))
}

/// Reflectance in `[0, 1]` from the level-wise sum of structure and texture
/// features.
pub fn forward_reflectance<'t>(
    bundle: &ModelBundle,
    b: &Binder<'t, '_>,
    structure: &[Var<'t>],
    texture: &[Var<'t>],
) -> Result<Var<'t>> {
    if structure.len() != texture.len() {
        return Err(Error::shape("structure and texture level counts differ"));
    }
    let summed = structure.iter().zip(texture).map(|(s, t)| s.add(*t)).collect::<Result<Vec<_>>>()?;
    Ok(bundle.reflect_decoder.forward(b, &summed)?[0].expect("reflectance head").sigmoid())
}
