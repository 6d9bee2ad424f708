//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ToyNetConfig;
use crate::objective::{LearningRates, LossWeights, ObjectiveConfig, Toggles};
use crate::optim::AdamConfig;
use crate::photometric::PhotometricConfig;
use crate::retinex::ALPHA_VCLAMP;

/// Every tunable of a training run. Text form: one `key = value` per line,
/// `#` starts a comment, unknown or repeated keys are errors.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seeds parameter initialization and the per-epoch sample order.
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub base_channels: usize,
    pub encoder_depth: usize,
    pub epochs: usize,
    pub shuffle: bool,
    pub rates: LearningRates,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub toggles: Toggles,
    pub photometric: PhotometricConfig,
    pub alpha_vclamp: f64,
    /// Training and evaluation dataset directories; command-line paths
    /// take precedence.
    pub train_data: String,
    pub eval_data: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ToyNetConfig::default();
        RunConfig {
            seed: model.seed,
            width: model.width,
            height: model.height,
            base_channels: model.base_channels,
            encoder_depth: model.encoder_depth,
            epochs: 5,
            shuffle: true,
            rates: LearningRates::default(),
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            toggles: Toggles::default(),
            photometric: PhotometricConfig::default(),
            alpha_vclamp: ALPHA_VCLAMP,
            train_data: String::new(),
            eval_data: String::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn model(&self) -> ToyNetConfig {
        ToyNetConfig {
            base_channels: self.base_channels,
            encoder_depth: self.encoder_depth,
            height: self.height,
            width: self.width,
            seed: self.seed,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights,
            toggles: self.toggles,
            photometric: self.photometric,
            alpha_vclamp: self.alpha_vclamp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.weights.validate()?;
        self.photometric.validate()?;
        let r = &self.rates;
        if [r.encoder, r.head, r.decay].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("learning rates must be finite and non-negative: {r:?}")));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings: {a:?}")));
        }
        if !(self.alpha_vclamp >= 0.0) {
            return Err(Error::Config(format!("alpha_vclamp {} must be non-negative", self.alpha_vclamp)));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "encoder_depth" => self.encoder_depth = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "shuffle" => self.shuffle = parse(key, value)?,
            "lr_encoder" => self.rates.encoder = parse(key, value)?,
            "lr_head" => self.rates.head = parse(key, value)?,
            "lr_decay" => self.rates.decay = parse(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "lambda_p" => self.weights.lambda_p = parse(key, value)?,
            "lambda_v" => self.weights.lambda_v = parse(key, value)?,
            "lambda_e" => self.weights.lambda_e = parse(key, value)?,
            "lambda_r" => self.weights.lambda_r = parse(key, value)?,
            "lambda_o" => self.weights.lambda_o = parse(key, value)?,
            "lambda_d" => self.weights.lambda_d = parse(key, value)?,
            "ti" => self.toggles.ti = parse(key, value)?,
            "sd" => self.toggles.sd = parse(key, value)?,
            "gp" => self.toggles.gp = parse(key, value)?,
            "alpha_ssim" => self.photometric.alpha_ssim = parse(key, value)?,
            "ssim_window" => self.photometric.window = parse(key, value)?,
            "alpha_vclamp" => self.alpha_vclamp = parse(key, value)?,
            "train_data" => self.train_data = value.to_string(),
            "eval_data" => self.eval_data = value.to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses the text form over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key {key:?} repeated", n + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Text form listing every key; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("width", self.width.to_string());
        kv("height", self.height.to_string());
        kv("base_channels", self.base_channels.to_string());
        kv("encoder_depth", self.encoder_depth.to_string());
        kv("epochs", self.epochs.to_string());
        kv("shuffle", self.shuffle.to_string());
        kv("lr_encoder", format!("{:?}", self.rates.encoder));
        kv("lr_head", format!("{:?}", self.rates.head));
        kv("lr_decay", format!("{:?}", self.rates.decay));
        kv("adam_beta1", format!("{:?}", self.adam.beta1));
        kv("adam_beta2", format!("{:?}", self.adam.beta2));
        kv("adam_eps", format!("{:?}", self.adam.eps));
        let w = &self.weights;
        for (k, v) in [
            ("lambda_p", w.lambda_p),
            ("lambda_v", w.lambda_v),
            ("lambda_e", w.lambda_e),
            ("lambda_r", w.lambda_r),
            ("lambda_o", w.lambda_o),
            ("lambda_d", w.lambda_d),
        ] {
            kv(k, format!("{v:?}"));
        }
        kv("ti", self.toggles.ti.to_string());
        kv("sd", self.toggles.sd.to_string());
        kv("gp", self.toggles.gp.to_string());
        kv("alpha_ssim", format!("{:?}", self.photometric.alpha_ssim));
        kv("ssim_window", self.photometric.window.to_string());
        kv("alpha_vclamp", format!("{:?}", self.alpha_vclamp));
        kv("train_data", self.train_data.clone());
        kv("eval_data", self.eval_data.clone());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("# nothing here\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.weights, LossWeights::default());
        assert_eq!(cfg.rates, LearningRates { encoder: 5e-5, head: 1e-4, decay: 0.9 });
        assert_eq!((cfg.width, cfg.height, cfg.epochs), (64, 48, 5));
    }

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.weights.lambda_e = 0.25;
        cfg.toggles.sd = false;
        cfg.rates.head = 3e-4;
        cfg.train_data = "data/train".into();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_repeated_and_malformed_keys_are_rejected() {
        for bad in ["lambda_x = 1", "epochs = 3\nepochs = 4", "epochs", "epochs = many", "width = 63"] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn comments_and_spacing_are_ignored() {
        let cfg = RunConfig::parse("  epochs=7   # short run\nti = false").unwrap();
        assert_eq!(cfg.epochs, 7);
        assert!(!cfg.toggles.ti);
    }
}
