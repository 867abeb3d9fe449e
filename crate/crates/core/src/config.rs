//! Line-based `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are rejected. [`RunConfig::render`] writes every key in a
//! fixed order, and `parse(render(c)) == c`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layout::{validate_mask_ratio, ClusterScheme, OrderPolicy, TargetMode};
use crate::model::ModelConfig;
use crate::tokenizer::CubeSpec;
use crate::video::MotionTaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderKind {
    SpatialFirst,
    TemporalFirst,
    Random,
}

/// Sequence accounting mode for the cost model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostMode {
    ArVideo,
    /// Masked-autoencoder baseline: one random visible set over all tokens,
    /// decoder over the full grid.
    Mae,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // data
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_directions: usize,
    pub shape_size: usize,
    pub speed: usize,
    pub noise: f32,
    pub num_videos: usize,
    pub data_seed: u64,
    // tokenizer
    pub cube_t: usize,
    pub cube_h: usize,
    pub cube_w: usize,
    pub normalize_targets: bool,
    pub norm_eps: f64,
    // layout
    pub cluster_t: usize,
    pub cluster_h: usize,
    pub cluster_w: usize,
    pub order: OrderKind,
    pub mask_ratio: f64,
    pub targets: TargetMode,
    // model
    pub embed_dim: usize,
    pub num_heads: usize,
    pub enc_depth: usize,
    pub dec_width: usize,
    pub dec_heads: usize,
    pub dec_depth: usize,
    pub mlp_ratio: usize,
    pub decoder_self_attention: bool,
    // optimization
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub cosine: bool,
    pub seed: u64,
    pub precision: Precision,
    // probing
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    // cost model
    pub mode: CostMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// The desk reference configuration: 8×32×32×1 videos, 2×8×8 cubes,
    /// 2×2×2 clusters (8 clusters of 8 tokens), 80% masking, random order.
    pub fn desk() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            channels: 1,
            num_directions: 8,
            shape_size: 8,
            speed: 2,
            noise: 0.0,
            num_videos: 400,
            data_seed: 0,
            cube_t: 2,
            cube_h: 8,
            cube_w: 8,
            normalize_targets: true,
            norm_eps: 1e-6,
            cluster_t: 2,
            cluster_h: 2,
            cluster_w: 2,
            order: OrderKind::Random,
            mask_ratio: 0.8,
            targets: TargetMode::Full,
            embed_dim: 96,
            num_heads: 4,
            enc_depth: 4,
            dec_width: 64,
            dec_heads: 4,
            dec_depth: 2,
            mlp_ratio: 4,
            decoder_self_attention: false,
            steps: 200,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.05,
            warmup_steps: 20,
            cosine: true,
            seed: 0,
            precision: Precision::F32,
            probe_steps: 300,
            probe_lr: 1e-2,
            finetune_steps: 60,
            finetune_lr: 5e-4,
            finetune_batch: 16,
            mode: CostMode::ArVideo,
        }
    }

    /// Full-scale geometry: 16×224×224×3 videos, 2×16×16 cubes,
    /// 2×7×7 clusters, ViT-B widths and the 512-wide, 4-deep decoder.
    pub fn full_scale() -> Self {
        Self {
            frames: 16,
            height: 224,
            width: 224,
            channels: 3,
            cube_t: 2,
            cube_h: 16,
            cube_w: 16,
            cluster_t: 2,
            cluster_h: 7,
            cluster_w: 7,
            mask_ratio: 0.8,
            embed_dim: 768,
            num_heads: 12,
            enc_depth: 12,
            dec_width: 512,
            dec_heads: 16,
            dec_depth: 4,
            ..Self::desk()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::config(k, "repeated key"));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "on" | "true" | "yes" | "1" => Ok(true),
                "off" | "false" | "no" | "0" => Ok(false),
                _ => Err(Error::config(key, format!("expected on|off, got `{v}`"))),
            }
        }
        let k = key;
        match k {
            "frames" => self.frames = num(k, value)?,
            "height" => self.height = num(k, value)?,
            "width" => self.width = num(k, value)?,
            "channels" => self.channels = num(k, value)?,
            "num_directions" => self.num_directions = num(k, value)?,
            "shape_size" => self.shape_size = num(k, value)?,
            "speed" => self.speed = num(k, value)?,
            "noise" => self.noise = num(k, value)?,
            "num_videos" => self.num_videos = num(k, value)?,
            "data_seed" => self.data_seed = num(k, value)?,
            "cube_t" => self.cube_t = num(k, value)?,
            "cube_h" => self.cube_h = num(k, value)?,
            "cube_w" => self.cube_w = num(k, value)?,
            "normalize_targets" => self.normalize_targets = flag(k, value)?,
            "norm_eps" => self.norm_eps = num(k, value)?,
            "cluster_t" => self.cluster_t = num(k, value)?,
            "cluster_h" => self.cluster_h = num(k, value)?,
            "cluster_w" => self.cluster_w = num(k, value)?,
            "order" => {
                self.order = match value {
                    "spatial-first" => OrderKind::SpatialFirst,
                    "temporal-first" => OrderKind::TemporalFirst,
                    "random" => OrderKind::Random,
                    _ => return Err(Error::config(k, "expected spatial-first|temporal-first|random")),
                }
            }
            "mask_ratio" => self.mask_ratio = num(k, value)?,
            "targets" => {
                self.targets = match value {
                    "full" => TargetMode::Full,
                    "visible-only" => TargetMode::VisibleOnly,
                    _ => return Err(Error::config(k, "expected full|visible-only")),
                }
            }
            "embed_dim" => self.embed_dim = num(k, value)?,
            "num_heads" => self.num_heads = num(k, value)?,
            "enc_depth" => self.enc_depth = num(k, value)?,
            "dec_width" => self.dec_width = num(k, value)?,
            "dec_heads" => self.dec_heads = num(k, value)?,
            "dec_depth" => self.dec_depth = num(k, value)?,
            "mlp_ratio" => self.mlp_ratio = num(k, value)?,
            "decoder_self_attention" => self.decoder_self_attention = flag(k, value)?,
            "steps" => self.steps = num(k, value)?,
            "batch_size" => self.batch_size = num(k, value)?,
            "lr" => self.lr = num(k, value)?,
            "beta1" => self.beta1 = num(k, value)?,
            "beta2" => self.beta2 = num(k, value)?,
            "adam_eps" => self.adam_eps = num(k, value)?,
            "weight_decay" => self.weight_decay = num(k, value)?,
            "warmup_steps" => self.warmup_steps = num(k, value)?,
            "cosine" => self.cosine = flag(k, value)?,
            "seed" => self.seed = num(k, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::config(k, "expected f32|f64")),
                }
            }
            "probe_steps" => self.probe_steps = num(k, value)?,
            "probe_lr" => self.probe_lr = num(k, value)?,
            "finetune_steps" => self.finetune_steps = num(k, value)?,
            "finetune_lr" => self.finetune_lr = num(k, value)?,
            "finetune_batch" => self.finetune_batch = num(k, value)?,
            "mode" => {
                self.mode = match value {
                    "arvideo" => CostMode::ArVideo,
                    "mae" => CostMode::Mae,
                    _ => return Err(Error::config(k, "expected arvideo|mae")),
                }
            }
            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    /// Canonical text form, one key per line in declaration order.
    pub fn render(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        let order = match self.order {
            OrderKind::SpatialFirst => "spatial-first",
            OrderKind::TemporalFirst => "temporal-first",
            OrderKind::Random => "random",
        };
        let targets = match self.targets {
            TargetMode::Full => "full",
            TargetMode::VisibleOnly => "visible-only",
        };
        let precision = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let mode = match self.mode {
            CostMode::ArVideo => "arvideo",
            CostMode::Mae => "mae",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("channels", self.channels.to_string()),
            ("num_directions", self.num_directions.to_string()),
            ("shape_size", self.shape_size.to_string()),
            ("speed", self.speed.to_string()),
            ("noise", self.noise.to_string()),
            ("num_videos", self.num_videos.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("cube_t", self.cube_t.to_string()),
            ("cube_h", self.cube_h.to_string()),
            ("cube_w", self.cube_w.to_string()),
            ("normalize_targets", on(self.normalize_targets).into()),
            ("norm_eps", self.norm_eps.to_string()),
            ("cluster_t", self.cluster_t.to_string()),
            ("cluster_h", self.cluster_h.to_string()),
            ("cluster_w", self.cluster_w.to_string()),
            ("order", order.into()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("targets", targets.into()),
            ("embed_dim", self.embed_dim.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("enc_depth", self.enc_depth.to_string()),
            ("dec_width", self.dec_width.to_string()),
            ("dec_heads", self.dec_heads.to_string()),
            ("dec_depth", self.dec_depth.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("decoder_self_attention", on(self.decoder_self_attention).into()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("cosine", on(self.cosine).into()),
            ("seed", self.seed.to_string()),
            ("precision", precision.into()),
            ("probe_steps", self.probe_steps.to_string()),
            ("probe_lr", self.probe_lr.to_string()),
            ("finetune_steps", self.finetune_steps.to_string()),
            ("finetune_lr", self.finetune_lr.to_string()),
            ("finetune_batch", self.finetune_batch.to_string()),
            ("mode", mode.into()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        validate_mask_ratio(self.mask_ratio)?;
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1/beta2", "must lie in [0, 1)"));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::config("norm_eps", "must be positive"));
        }
        let dims = self.cube_spec().grid_for(self.frames, self.height, self.width)?;
        crate::layout::ClusterGrid::new(dims, self.cluster_scheme())?;
        self.model_config().validate()?;
        Ok(())
    }

    pub fn task_spec(&self) -> MotionTaskSpec {
        MotionTaskSpec {
            t_frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_directions: self.num_directions,
            shape_size: self.shape_size,
            speed: self.speed,
            noise: self.noise,
            seed: self.data_seed,
        }
    }

    pub fn cube_spec(&self) -> CubeSpec {
        CubeSpec::new(self.cube_t, self.cube_h, self.cube_w)
    }

    pub fn cluster_scheme(&self) -> ClusterScheme {
        ClusterScheme::new(self.cluster_t, self.cluster_h, self.cluster_w)
    }

    pub fn cube_dim(&self) -> usize {
        self.cube_t * self.cube_h * self.cube_w * self.channels
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            enc_depth: self.enc_depth,
            dec_width: self.dec_width,
            dec_heads: self.dec_heads,
            dec_depth: self.dec_depth,
            mlp_ratio: self.mlp_ratio,
            cube_dim: self.cube_dim(),
            num_classes: self.num_directions,
            decoder_self_attention: self.decoder_self_attention,
            ..ModelConfig::default()
        }
    }

    /// Order policy; random orders draw their shuffle seed from `order_seed`.
    pub fn order_policy(&self, order_seed: u64) -> OrderPolicy {
        match self.order {
            OrderKind::SpatialFirst => OrderPolicy::SpatialFirst,
            OrderKind::TemporalFirst => OrderPolicy::TemporalFirst,
            OrderKind::Random => OrderPolicy::RandomRaster { seed: order_seed },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let mut c = RunConfig::desk();
        c.order = OrderKind::TemporalFirst;
        c.mask_ratio = 0.95;
        c.precision = Precision::F64;
        c.decoder_self_attention = true;
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::full_scale().render()).unwrap(), RunConfig::full_scale());
    }

    #[test]
    fn unknown_and_repeated_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config { field, .. }) if field == "bogus"));
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
    }

    #[test]
    fn comments_and_validation() {
        let c = RunConfig::parse("# desk\n\nseed = 42\n").unwrap();
        assert_eq!(c.seed, 42);
        assert!(RunConfig::parse("mask_ratio = 1.0").is_err());
        assert!(RunConfig::parse("lr = 0").is_err());
        assert!(RunConfig::parse("cluster_h = 3").is_err());
    }
}
