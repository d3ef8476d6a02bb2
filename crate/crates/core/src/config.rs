//! Flat `key = value` configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Every key
//! has a default; unknown and repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, VineError};

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "VINE_SEED";

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render_value(&self) -> String;
}

macro_rules! simple_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("cannot parse {s:?}: {e}"))
            }
            fn render_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

simple_value!(u64, usize, f64, bool);

impl ConfigValue for Vec<String> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(String::from).collect())
    }
    fn render_value(&self) -> String {
        self.join(",")
    }
}

/// Name and one-line description of a config key.
#[derive(Clone, Copy, Debug)]
pub struct KeyInfo {
    pub key: &'static str,
    pub doc: &'static str,
}

macro_rules! config {
    ($($key:literal => $field:ident : $ty:ty = $default:expr, $doc:literal;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $(#[doc = $doc] pub $field: $ty,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl Config {
            pub const KEYS: &'static [KeyInfo] = &[
                $(KeyInfo { key: $key, doc: $doc },)*
            ];

            fn set_raw(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|msg| VineError::Config { key: key.to_string(), msg })?;
                    })*
                    _ => {
                        return Err(VineError::Config { key: key.to_string(), msg: "unknown key".into() })
                    }
                }
                Ok(())
            }

            fn get_raw(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$field.render_value()),)*
                    _ => None,
                }
            }
        }
    };
}

config! {
    "seed" => seed: u64 = 0, "master seed for parameters and episode streams";
    "data.image_size" => image_size: usize = 64, "square image side in pixels (multiple of 4, at least 16)";
    "data.clutter" => clutter: usize = 2, "distractor shapes per rendered image";
    "data.k_shot" => k_shot: usize = 1, "support shots per episode";
    "data.train_view_shift" => train_view_shift: f64 = 0.05, "query corner perturbation during training";
    "data.eval_view_shift" => eval_view_shift: f64 = 0.05, "query corner perturbation during evaluation";
    "model.channels" => channels: usize = 32, "feature width C (multiple of 4)";
    "model.tokens" => tokens: usize = 50, "prompt tokens per branch";
    "model.use_sam" => use_sam: bool = true, "enable the semantic encoder branch";
    "model.use_res" => use_res: bool = true, "enable the structural encoder branch";
    "decoder.hidden" => decoder_hidden: usize = 32, "hidden width of the mask decoder";
    "svga.enabled" => svga_enabled: bool = true, "enable spatial and view graph alignment";
    "svga.spatial_graph" => svga_spatial_graph: bool = true, "use the KNN spatial graph (self-loops only when off)";
    "svga.view_graph" => svga_view_graph: bool = true, "use the view graph (self-loops only when off)";
    "svga.num_views" => svga_num_views: usize = 3, "homography-warped pseudo-views of a 1-shot support";
    "svga.delta_max" => svga_delta_max: f64 = 0.001, "corner perturbation of pseudo-views";
    "svga.knn_k" => svga_knn_k: usize = 8, "spatial neighbours per grid cell";
    "svga.spatial_heads" => svga_spatial_heads: usize = 4, "attention heads of the spatial GAT";
    "svga.view_heads" => svga_view_heads: usize = 1, "attention heads of the view GAT";
    "dfm.enabled" => dfm_enabled: bool = true, "enable discriminative foreground modulation";
    "dfm.shared_prior" => dfm_shared_prior: bool = false, "average the query prior over both branches";
    "loss.lambda_proto" => lambda_proto: f64 = 1.0, "weight of the prototype consistency loss";
    "loss.lambda_pred" => lambda_pred: f64 = 0.5, "weight of the BCE + Dice prediction loss";
    "train.episodes" => train_episodes: usize = 2000, "training steps, one episode each";
    "train.lr" => lr: f64 = 1e-3, "peak learning rate";
    "train.beta1" => beta1: f64 = 0.9, "Adam first-moment decay";
    "train.beta2" => beta2: f64 = 0.999, "Adam second-moment decay";
    "train.eps" => adam_eps: f64 = 1e-8, "Adam denominator epsilon";
    "train.freeze" => freeze: Vec<String> = Vec::new(), "comma-separated parameter path prefixes kept fixed";
    "train.prefetch" => prefetch: usize = 8, "episodes generated ahead of the training loop";
    "eval.episodes" => eval_episodes: usize = 200, "held-out novel-class evaluation episodes";
    "eval.seed" => eval_seed: u64 = 1_000_003, "seed of the evaluation episode stream";
}

impl Config {
    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(VineError::Config {
                    key: line.to_string(),
                    msg: format!("line {} is not `key = value`", lineno + 1),
                });
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(VineError::Config {
                    key: key.to_string(),
                    msg: "repeated key".into(),
                });
            }
            cfg.set_raw(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| VineError::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Every key in declaration order, one `key = value` line each.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{} = {}", k.key, self.get(k.key).expect("declared key"));
        }
        out
    }

    /// `(key, rendered default, description)` for every key.
    pub fn documented_defaults() -> Vec<(&'static str, String, &'static str)> {
        let d = Self::default();
        Self::KEYS
            .iter()
            .map(|k| (k.key, d.get(k.key).expect("declared key"), k.doc))
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.get_raw(key)
    }

    /// Sets one key from its textual value and revalidates.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut next = self.clone();
        next.set_raw(key, value)?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Applies `VINE_SEED` if present.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|e| VineError::Config {
                key: SEED_ENV.to_string(),
                msg: format!("cannot parse {v:?}: {e}"),
            })?;
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / crate::encoder::DOWNSAMPLE
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.freeze.iter().any(|p| path.starts_with(p.as_str()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, msg: String| Err(VineError::Config { key: key.into(), msg });
        if !self.use_sam && !self.use_res {
            return err("model.use_sam", "at least one encoder branch must be enabled".into());
        }
        if self.image_size < crate::episodes::MIN_IMAGE_SIZE || !self.image_size.is_multiple_of(4) {
            return err("data.image_size", format!("{} is not a multiple of 4 >= 16", self.image_size));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return err("model.channels", format!("{} is not a positive multiple of 4", self.channels));
        }
        for (key, heads) in [("svga.spatial_heads", self.svga_spatial_heads), ("svga.view_heads", self.svga_view_heads)] {
            if heads == 0 || !self.channels.is_multiple_of(heads) {
                return err(key, format!("{heads} heads do not divide {} channels", self.channels));
            }
        }
        let n = self.feature_size() * self.feature_size();
        if self.svga_knn_k == 0 || self.svga_knn_k >= n {
            return err("svga.knn_k", format!("must lie in [1, {}]", n - 1));
        }
        let positive = [
            ("model.tokens", self.tokens),
            ("data.k_shot", self.k_shot),
            ("decoder.hidden", self.decoder_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return err(key, "must be at least 1".into());
            }
        }
        for (key, v) in [
            ("svga.delta_max", self.svga_delta_max),
            ("data.train_view_shift", self.train_view_shift),
            ("data.eval_view_shift", self.eval_view_shift),
        ] {
            if !(0.0..0.25).contains(&v) {
                return err(key, format!("{v} outside [0, 0.25)"));
            }
        }
        for (key, v) in [("loss.lambda_proto", self.lambda_proto), ("loss.lambda_pred", self.lambda_pred)] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(key, format!("{v} must be finite and non-negative"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("train.lr", format!("{} must be positive", self.lr));
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(key, format!("{b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return err("train.eps", "must be positive".into());
        }
        if self.prefetch == 0 {
            return err("train.prefetch", "queue capacity must be at least 1".into());
        }
        Ok(())
    }

    /// Small configuration used for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            clutter: 1,
            channels: 4,
            tokens: 2,
            decoder_hidden: 3,
            svga_num_views: 1,
            svga_delta_max: 0.05,
            svga_knn_k: 3,
            svga_spatial_heads: 2,
            train_episodes: 4,
            eval_episodes: 4,
            prefetch: 2,
            ..Self::default()
        }
    }
}
