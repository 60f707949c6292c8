use std::path::{Path, PathBuf};

use birads_core::{ConfigMap, DescriptorVocabulary, Error, ModelConfig, SkipMode, TrainConfig, WiringConfig};
use clap::Args;

/// Architecture overrides. Unset flags leave the preset or file value alone.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Preset name (minimal, toy, default) or a `key=value` config file.
    #[arg(long)]
    pub config: Option<String>,
    /// Number of stacked attention layers (at least 2).
    #[arg(long)]
    pub layers: Option<usize>,
    /// Latent and descriptor vector length.
    #[arg(long)]
    pub latent: Option<usize>,
    /// Number of latent query tokens.
    #[arg(long)]
    pub queries: Option<usize>,
    /// Base channel count of the feature pyramid.
    #[arg(long)]
    pub d0: Option<usize>,
    /// View-attention wiring: COO, OCO, OOC, CCO, COC or OCC.
    #[arg(long, value_parser = parse_wiring)]
    pub wiring: Option<WiringConfig>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub n_bands: Option<usize>,
    /// Square input side in pixels.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Pyramid/descriptor arrangement of the last layer: joint or replace.
    #[arg(long)]
    pub skip: Option<SkipMode>,
    /// Train the variant whose descriptor input is a single all-zero vector.
    #[arg(long)]
    pub no_descriptors: bool,
    /// Descriptor vocabulary file (`category,token` lines).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Optimizer steps.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated augmentations: hflip, vflip, elastic, noise, or none.
    #[arg(long)]
    pub augment: Option<String>,
}

fn parse_wiring(s: &str) -> Result<WiringConfig, String> {
    s.parse::<WiringConfig>().map_err(|e| e.to_string())
}

const EXTRA_KEYS: [&str; 2] = ["preset", "image_size"];

fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = ModelConfig::default().to_kv().iter().map(|(k, _)| k.to_string()).collect();
    keys.extend(TrainConfig::default().to_kv().iter().map(|(k, _)| k.to_string()));
    keys.extend(EXTRA_KEYS.iter().map(|k| k.to_string()));
    keys
}

/// Preset or file contents behind `--config`. A file may name a starting
/// preset with `preset=<name>`.
fn base_config(config: Option<&str>, default_preset: &str) -> Result<(ModelConfig, ConfigMap), Error> {
    let Some(spec) = config else {
        return Ok((ModelConfig::preset(default_preset).expect("known preset"), ConfigMap::new()));
    };
    if let Some(preset) = ModelConfig::preset(spec) {
        return Ok((preset, ConfigMap::new()));
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Error::Usage(format!(
            "--config {spec:?} is neither a preset (minimal, toy, default) nor an existing file"
        )));
    }
    let kv = ConfigMap::load(path)?;
    let known = known_keys();
    if let Some((k, _)) = kv.iter().find(|(k, _)| !known.iter().any(|n| n == k)) {
        return Err(Error::Config(format!("unknown key {k:?} in {}", path.display())));
    }
    let base = match kv.get("preset") {
        None => ModelConfig::default(),
        Some(name) => ModelConfig::preset(name).ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?,
    };
    Ok((base, kv))
}

impl ModelArgs {
    fn overrides(&self) -> ConfigMap {
        let mut kv = ConfigMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.set(k, v);
            }
        };
        put("layers", self.layers.map(|v| v.to_string()));
        put("latent", self.latent.map(|v| v.to_string()));
        put("queries", self.queries.map(|v| v.to_string()));
        put("d0", self.d0.map(|v| v.to_string()));
        put("wiring", self.wiring.map(|v| v.to_string()));
        put("heads", self.heads.map(|v| v.to_string()));
        put("n_bands", self.n_bands.map(|v| v.to_string()));
        put("image_size", self.image_size.map(|v| v.to_string()));
        put("skip", self.skip.map(|v| v.to_string()));
        if self.no_descriptors {
            kv.set("descriptors", false);
        }
        kv
    }

    /// Whether any flag or file asks for a specific architecture.
    pub fn is_set(&self) -> bool {
        self.config.is_some() || self.overrides().iter().next().is_some()
    }

    pub fn vocabulary(&self) -> Result<DescriptorVocabulary, Error> {
        match &self.vocab {
            Some(p) => DescriptorVocabulary::load(p),
            None => Ok(DescriptorVocabulary::default_classes()),
        }
    }
}

impl TrainArgs {
    fn overrides(&self) -> ConfigMap {
        let mut kv = ConfigMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.set(k, v);
            }
        };
        put("iters", self.iters.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("momentum", self.momentum.map(|v| v.to_string()));
        put("dropout", self.dropout.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("augment", self.augment.clone());
        kv
    }
}

/// Fully resolved settings: defaults, then the config file, then flags.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: DescriptorVocabulary,
}

impl Resolved {
    pub fn to_kv(&self) -> ConfigMap {
        let mut kv = self.model.to_kv();
        kv.merge(&self.train.to_kv());
        kv
    }
}

pub fn resolve(model: &ModelArgs, train: &TrainArgs, default_preset: &str) -> Result<Resolved, Error> {
    let (mut model_cfg, file) = base_config(model.config.as_deref(), default_preset)?;
    let mut train_cfg = TrainConfig::default();
    let mut layered = file;
    layered.merge(&model.overrides());
    layered.merge(&train.overrides());
    model_cfg.apply_kv(&layered)?;
    train_cfg.apply_kv(&layered)?;
    let vocab = model.vocabulary()?;
    train_cfg.validate()?;
    let effective = birads_core::train::effective_model_config(&model_cfg, &train_cfg);
    effective.validate(vocab.len())?;
    Ok(Resolved {
        model: effective,
        train: train_cfg,
        vocab,
    })
}

/// The architecture after layering flags over the preset or file; not yet validated.
pub fn model_config(model: &ModelArgs, default_preset: &str) -> Result<ModelConfig, Error> {
    let (mut cfg, mut kv) = base_config(model.config.as_deref(), default_preset)?;
    kv.merge(&model.overrides());
    cfg.apply_kv(&kv)?;
    Ok(cfg)
}

/// Resolves only the architecture, for commands that do not train.
pub fn resolve_model(model: &ModelArgs, default_preset: &str) -> Result<(ModelConfig, DescriptorVocabulary), Error> {
    let cfg = model_config(model, default_preset)?;
    let vocab = model.vocabulary()?;
    cfg.validate(vocab.len())?;
    Ok((cfg, vocab))
}
