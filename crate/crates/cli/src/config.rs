//! Flat `key = value` run configuration.
//!
//! Resolution order: built-in defaults (per preset and stage), then the
//! `--config` file, then command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use vitsr::model::{default_head_channels, ModelConfig, ResidualMode};
use vitsr::training::{Stage, TrainConfig};
use vitsr::Error;

/// Every recognised key with a one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    (
        "preset",
        "base architecture: default (ViT-B/16 at 256) or micro (64 px, width 64)",
    ),
    (
        "dataset",
        "dataset root with train/ and val/ folders of PNG images",
    ),
    (
        "image_size",
        "model input side in pixels; also the training crop size",
    ),
    ("patch_size", "patch side; a power of two"),
    ("embed_dim", "token width"),
    ("encoder_depth", "encoder blocks"),
    ("decoder_depth", "decoder blocks"),
    ("num_heads_encoder", "attention heads per encoder block"),
    ("num_heads_decoder", "attention heads per decoder block"),
    ("mlp_ratio", "MLP hidden width over token width"),
    (
        "head_channels",
        "comma-separated output channels of each x2 stage, or auto",
    ),
    ("leaky_slope", "negative slope of the head activations"),
    (
        "residual_mode",
        "auto (off for pretrain, on for finetune), on or off",
    ),
    ("lr_init", "initial learning rate of each cosine cycle"),
    ("lr_min", "floor of the cosine schedule"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("beta1", "AdamW first-moment decay"),
    ("beta2", "AdamW second-moment decay"),
    ("eps", "AdamW epsilon"),
    ("batch_size", "images per step"),
    ("max_epochs", "epoch limit"),
    (
        "patience",
        "epochs without validation PSNR improvement before stopping",
    ),
    ("sched_t0", "length of the first cosine cycle in epochs"),
    ("sched_tmult", "cycle length multiplier"),
    ("lambda", "SSIM weight in the loss"),
    ("scale", "super-resolution factor"),
    ("seed", "seed for initialization, shuffling and crops"),
    (
        "log_wall_clock",
        "fill the seconds column of the training log (true/false)",
    ),
    ("sample_images", "validation outputs saved as PNG per epoch"),
];

/// Unresolved settings: explicit values from the file and the flags.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

/// Settings resolved for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub dataset: Option<PathBuf>,
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn config_err(msg: String) -> anyhow::Error {
    Error::Config(msg).into()
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| config_err(format!("cannot parse {key} = {v:?}")))
}

impl RunConfig {
    pub fn parse_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                config_err(format!(
                    "{}:{}: expected key = value",
                    origin.display(),
                    n + 1
                ))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| config_err(format!("{e:#}")))?;
        Self::parse_text(&text, path)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(config_err(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| config_err(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn take<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key) {
            *slot = parse(key, v)?;
        }
        Ok(())
    }

    pub fn resolve(&self, stage: Stage) -> Result<Resolved> {
        self.resolve_from(stage, None)
    }

    /// Like [`RunConfig::resolve`], but architecture defaults come from
    /// `base` (an initialization checkpoint) unless a preset is named.
    pub fn resolve_from(&self, stage: Stage, base: Option<&ModelConfig>) -> Result<Resolved> {
        let preset = self.get("preset").unwrap_or("default").to_string();
        let mut m = match (preset.as_str(), base) {
            (_, Some(b)) if self.get("preset").is_none() => b.clone(),
            ("default", _) => ModelConfig::default(),
            ("micro", _) => ModelConfig::micro(),
            (other, _) => return Err(config_err(format!("unknown preset {other:?}"))),
        };
        self.take("image_size", &mut m.image_size)?;
        self.take("patch_size", &mut m.patch_size)?;
        self.take("embed_dim", &mut m.embed_dim)?;
        self.take("encoder_depth", &mut m.encoder_depth)?;
        self.take("decoder_depth", &mut m.decoder_depth)?;
        self.take("num_heads_encoder", &mut m.num_heads_encoder)?;
        self.take("num_heads_decoder", &mut m.num_heads_decoder)?;
        self.take("mlp_ratio", &mut m.mlp_ratio)?;
        self.take("leaky_slope", &mut m.leaky_slope)?;
        let stages = m.patch_size.max(1).trailing_zeros() as usize;
        let derived = self.get("embed_dim").is_some() || stages != m.upsample_stages;
        m.upsample_stages = stages;
        m.head_channels = match self.get("head_channels").map(str::trim) {
            None if !derived => m.head_channels,
            None | Some("auto") => default_head_channels(m.embed_dim, m.upsample_stages),
            Some(list) => list
                .split(',')
                .map(|c| parse::<usize>("head_channels", c))
                .collect::<Result<_>>()?,
        };
        m.residual_mode = match self.get("residual_mode").map(str::trim) {
            None | Some("auto") => match stage {
                Stage::Colorization => ResidualMode::Off,
                Stage::SuperResolution => ResidualMode::On,
            },
            Some("on") => ResidualMode::On,
            Some("off") => ResidualMode::Off,
            Some(other) => return Err(config_err(format!("residual_mode {other:?}"))),
        };
        m.validate()?;

        let mut t = TrainConfig::for_stage(stage);
        self.take("lr_init", &mut t.lr_init)?;
        self.take("lr_min", &mut t.lr_min)?;
        self.take("weight_decay", &mut t.weight_decay)?;
        self.take("beta1", &mut t.beta1)?;
        self.take("beta2", &mut t.beta2)?;
        self.take("eps", &mut t.eps)?;
        self.take("batch_size", &mut t.batch_size)?;
        self.take("max_epochs", &mut t.max_epochs)?;
        self.take("patience", &mut t.patience)?;
        self.take("sched_t0", &mut t.sched_t0)?;
        self.take("sched_tmult", &mut t.sched_tmult)?;
        self.take("lambda", &mut t.lambda)?;
        self.take("scale", &mut t.scale)?;
        self.take("seed", &mut t.seed)?;
        self.take("log_wall_clock", &mut t.log_wall_clock)?;
        self.take("sample_images", &mut t.sample_images)?;
        t.validate()?;
        if m.image_size % t.scale != 0 {
            return Err(config_err(format!(
                "image_size {} is not divisible by scale {}",
                m.image_size, t.scale
            )));
        }
        Ok(Resolved {
            dataset: self.get("dataset").map(PathBuf::from),
            preset,
            model: m,
            train: t,
        })
    }
}

impl Resolved {
    /// Complete `key = value` listing; loading it with `--config` reproduces
    /// the run.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let channels: Vec<String> = m.head_channels.iter().map(ToString::to_string).collect();
        let mut out = format!("# resolved configuration, stage {}\n", t.stage);
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("preset", self.preset.clone());
        if let Some(d) = &self.dataset {
            put("dataset", d.display().to_string());
        }
        put("image_size", m.image_size.to_string());
        put("patch_size", m.patch_size.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("encoder_depth", m.encoder_depth.to_string());
        put("decoder_depth", m.decoder_depth.to_string());
        put("num_heads_encoder", m.num_heads_encoder.to_string());
        put("num_heads_decoder", m.num_heads_decoder.to_string());
        put("mlp_ratio", m.mlp_ratio.to_string());
        put("head_channels", channels.join(","));
        put("leaky_slope", m.leaky_slope.to_string());
        put("residual_mode", m.residual_mode.to_string());
        put("lr_init", t.lr_init.to_string());
        put("lr_min", t.lr_min.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("beta1", t.beta1.to_string());
        put("beta2", t.beta2.to_string());
        put("eps", t.eps.to_string());
        put("batch_size", t.batch_size.to_string());
        put("max_epochs", t.max_epochs.to_string());
        put("patience", t.patience.to_string());
        put("sched_t0", t.sched_t0.to_string());
        put("sched_tmult", t.sched_tmult.to_string());
        put("lambda", t.lambda.to_string());
        put("scale", t.scale.to_string());
        put("seed", t.seed.to_string());
        put("log_wall_clock", t.log_wall_clock.to_string());
        put("sample_images", t.sample_images.to_string());
        out
    }

    pub fn dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| config_err("no dataset given (use --dataset or dataset = ...)".into()))
    }
}

/// `--help` text listing the keys.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (file lines `key = value`, or --set key=value):\n");
    for (k, d) in KEYS {
        let _ = writeln!(s, "  {k:<18} {d}");
    }
    s
}
