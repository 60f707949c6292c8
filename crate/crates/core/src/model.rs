//! The dual-branch network: one branch per mammogram view, each a stack of
//! multi-attention layers fed by descriptors and the view's feature pyramid,
//! joined by an averaging head and a linear classifier.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{image_kv_width, KeyValues, LayerParams, NormAffine, ParamFactory, Sublayers, WiringConfig};
use crate::backbone::{required_multiple, Backbone};
use crate::birads::{DescriptorVocabulary, LesionDescriptorSet};
use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How the descriptors reach the last layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    /// The last layer attends over the deepest image level and the
    /// descriptors together; every layer after the first sees an image level.
    Joint,
    /// The last layer attends over the descriptors only; the deepest image
    /// level is dropped.
    Replace,
}

impl fmt::Display for SkipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipMode::Joint => "joint",
            SkipMode::Replace => "replace",
        })
    }
}

impl FromStr for SkipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "joint" => Ok(SkipMode::Joint),
            "replace" => Ok(SkipMode::Replace),
            other => Err(Error::Config(format!("unknown skip mode {other:?} (joint|replace)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Cc,
    Mlo,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Cc, Branch::Mlo];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Cc => "cc",
            Branch::Mlo => "mlo",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of stacked multi-attention layers `N` (≥ 2).
    pub layers: usize,
    /// Latent / descriptor vector length `L` (also `d_model`).
    pub latent: usize,
    /// Number of latent tokens `N_Q`.
    pub queries: usize,
    /// Base channel count of the feature pyramid.
    pub d0: usize,
    pub wiring: WiringConfig,
    pub n_bands: usize,
    /// Maximum positional frequency; `None` uses half the token count.
    pub m_freq: Option<f64>,
    pub dropout: f64,
    pub heads: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Share one feature extractor between the two views.
    pub tie_backbone: bool,
    /// When false the descriptor input is a single all-zero vector.
    pub descriptors: bool,
    pub skip: SkipMode,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 6,
            latent: 256,
            queries: 8,
            d0: 8,
            wiring: WiringConfig::default(),
            n_bands: 6,
            m_freq: None,
            dropout: 0.25,
            heads: 1,
            image_height: 128,
            image_width: 128,
            tie_backbone: true,
            descriptors: true,
            skip: SkipMode::Joint,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest end-to-end configuration (used for gradient checks).
    pub fn minimal() -> Self {
        ModelConfig {
            layers: 2,
            latent: 8,
            queries: 2,
            d0: 2,
            image_height: 32,
            image_width: 32,
            ..Self::default()
        }
    }

    /// Desk-scale configuration for cross-validated experiments.
    pub fn toy() -> Self {
        ModelConfig {
            layers: 4,
            latent: 16,
            queries: 4,
            d0: 4,
            image_height: 64,
            image_width: 64,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "minimal" => Some(Self::minimal()),
            "toy" => Some(Self::toy()),
            "default" => Some(Self::default()),
            _ => None,
        }
    }

    /// Number of pyramid levels the backbone must produce.
    pub fn pyramid_levels(&self) -> usize {
        match self.skip {
            SkipMode::Joint => self.layers - 1,
            SkipMode::Replace => self.layers - 2,
        }
    }

    pub fn required_image_multiple(&self) -> usize {
        required_multiple(self.pyramid_levels())
    }

    /// Checks structural invariants. `vocab_len` is the descriptor count the
    /// latent length must accommodate.
    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers < 2 {
            return fail(format!("at least 2 layers are required, got {}", self.layers));
        }
        if self.skip == SkipMode::Replace && self.layers < 3 {
            return fail("skip=replace needs at least 3 layers".into());
        }
        if self.latent < vocab_len {
            return fail(format!("latent length {} is below the vocabulary size {vocab_len}", self.latent));
        }
        if self.queries == 0 || self.d0 == 0 || self.n_bands == 0 {
            return fail("queries, d0 and n_bands must be positive".into());
        }
        if self.heads == 0 || !self.latent.is_multiple_of(self.heads) {
            return fail(format!("{} heads do not divide latent length {}", self.heads, self.latent));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let Some(m) = self.m_freq {
            if !(m.is_finite() && m > 0.0) {
                return fail(format!("m_freq must be positive, got {m}"));
            }
        }
        let m = self.required_image_multiple();
        if !self.image_height.is_multiple_of(m) || !self.image_width.is_multiple_of(m) || self.image_height == 0 || self.image_width == 0 {
            return fail(format!(
                "image {}x{} must have both sides divisible by {m} for {} layers",
                self.image_height, self.image_width, self.layers
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> ConfigMap {
        let mut kv = ConfigMap::new();
        kv.set("layers", self.layers);
        kv.set("latent", self.latent);
        kv.set("queries", self.queries);
        kv.set("d0", self.d0);
        kv.set("wiring", self.wiring);
        kv.set("n_bands", self.n_bands);
        kv.set("m_freq", self.m_freq.map_or("auto".to_string(), |m| format!("{m:?}")));
        kv.set("dropout", format!("{:?}", self.dropout));
        kv.set("heads", self.heads);
        kv.set("image_height", self.image_height);
        kv.set("image_width", self.image_width);
        kv.set("tie_backbone", self.tie_backbone);
        kv.set("descriptors", self.descriptors);
        kv.set("skip", self.skip);
        kv.set("init_seed", self.init_seed);
        kv
    }

    /// Overrides fields present in `kv`. `image_size` sets both sides.
    pub fn apply_kv(&mut self, kv: &ConfigMap) -> Result<()> {
        kv.apply("layers", &mut self.layers)?;
        kv.apply("latent", &mut self.latent)?;
        kv.apply("queries", &mut self.queries)?;
        kv.apply("d0", &mut self.d0)?;
        kv.apply("wiring", &mut self.wiring)?;
        kv.apply("n_bands", &mut self.n_bands)?;
        match kv.get("m_freq") {
            None => {}
            Some("auto") => self.m_freq = None,
            Some(_) => self.m_freq = kv.parsed("m_freq")?,
        }
        kv.apply("dropout", &mut self.dropout)?;
        kv.apply("heads", &mut self.heads)?;
        if let Some(s) = kv.parsed::<usize>("image_size")? {
            self.image_height = s;
            self.image_width = s;
        }
        kv.apply("image_height", &mut self.image_height)?;
        kv.apply("image_width", &mut self.image_width)?;
        kv.apply("tie_backbone", &mut self.tie_backbone)?;
        kv.apply("descriptors", &mut self.descriptors)?;
        kv.apply("skip", &mut self.skip)?;
        kv.apply("init_seed", &mut self.init_seed)?;
        Ok(())
    }

    pub fn from_kv(kv: &ConfigMap) -> Result<Self> {
        let mut c = ModelConfig::default();
        c.apply_kv(kv)?;
        Ok(c)
    }
}

/// Standard deviation of the initial latent queries.
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
struct BranchParams {
    queries: ParamId,
    layers: Vec<LayerParams>,
}

#[derive(Clone, Debug)]
struct HeadParams {
    norm: NormAffine,
    weight: ParamId,
    bias: ParamId,
}

/// Parameter count broken down by module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterCensus {
    pub total: usize,
    pub by_module: Vec<(String, usize)>,
}

/// Optional intermediate values captured during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// `layer_outputs[k][b]`: output of layer `k` for branch `b`.
    pub layer_outputs: Vec<[Var; 2]>,
    /// Self-attention outputs, same indexing.
    pub self_outputs: Vec<[Var; 2]>,
    pub pyramids: Vec<Vec<Var>>,
    pub images: Vec<Var>,
    pub fused: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DualBranchModel {
    config: ModelConfig,
    vocab: DescriptorVocabulary,
    params: ParamStore,
    /// One extractor, or one per branch when untied.
    backbones: Vec<Backbone>,
    branches: Vec<BranchParams>,
    head: HeadParams,
}

impl DualBranchModel {
    pub fn new(config: ModelConfig, vocab: DescriptorVocabulary) -> Result<Self> {
        config.validate(vocab.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let levels = config.pyramid_levels();
        let backbones = if config.tie_backbone {
            vec![Backbone::new(&mut params, "backbone", config.d0, levels, &mut rng)?]
        } else {
            Branch::BOTH
                .iter()
                .map(|b| Backbone::new(&mut params, &format!("backbone_{}", b.name()), config.d0, levels, &mut rng))
                .collect::<Result<_>>()?
        };
        let token_width = backbones[0].token_width();
        let l = config.latent;
        let mut factory = ParamFactory {
            store: &mut params,
            rng: &mut rng,
        };
        let mut branches = Vec::with_capacity(2);
        for b in Branch::BOTH {
            let queries = factory.normal(format!("{}.queries", b.name()), &[config.queries, l], QUERY_INIT_STD * (config.queries as f64).sqrt())?;
            let mut layers = Vec::with_capacity(config.layers);
            for k in 0..config.layers {
                let last = k + 1 == config.layers;
                let image_layer = k > 0 && !(last && config.skip == SkipMode::Replace);
                let kv_width = if image_layer {
                    image_kv_width(token_width, config.n_bands)
                } else {
                    l
                };
                let joint = last && config.skip == SkipMode::Joint;
                layers.push(factory.layer(&format!("{}.layer{k}", b.name()), l, kv_width, joint)?);
            }
            branches.push(BranchParams { queries, layers });
        }
        let head = HeadParams {
            norm: NormAffine {
                gamma: factory.constant("head.norm.gamma".into(), &[l], 1.0)?,
                beta: factory.constant("head.norm.beta".into(), &[l], 0.0)?,
            },
            weight: factory.normal("head.fc.weight".into(), &[l, 2], 1.0)?,
            bias: factory.constant("head.fc.bias".into(), &[2], 0.0)?,
        };
        Ok(DualBranchModel {
            config,
            vocab,
            params,
            backbones,
            branches,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &DescriptorVocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn backbone(&self, b: usize) -> &Backbone {
        &self.backbones[b.min(self.backbones.len() - 1)]
    }

    /// Logits `[2]` (benign, malignant) for one case. `rng` enables dropout;
    /// `None` is evaluation mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        cc: &Tensor,
        mlo: &Tensor,
        attributes: &LesionDescriptorSet,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.forward_traced(tape, cc, mlo, attributes, rng, None)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        cc: &Tensor,
        mlo: &Tensor,
        attributes: &LesionDescriptorSet,
        mut rng: Option<&mut ChaCha8Rng>,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let c = &self.config;
        let expected = [1, c.image_height, c.image_width];
        for (view, img) in [("CC", cc), ("MLO", mlo)] {
            if img.shape() != expected {
                return Err(Error::Validation(format!(
                    "{view} image has shape {:?}, model expects {expected:?}",
                    img.shape()
                )));
            }
        }
        if attributes.length() != c.latent {
            return Err(Error::Validation(format!(
                "descriptor vectors have length {}, model expects {}",
                attributes.length(),
                c.latent
            )));
        }
        let withheld;
        let attributes = if c.descriptors {
            attributes
        } else {
            withheld = LesionDescriptorSet::withheld(c.latent);
            &withheld
        };
        let phi = tape.constant(attributes.canonical().to_tensor())?;

        let mut tokens: Vec<Vec<(Var, f64)>> = Vec::with_capacity(2);
        for (b, img) in [cc, mlo].into_iter().enumerate() {
            let bb = self.backbone(b);
            let image = tape.constant(img.clone())?;
            let pyramid = bb.extract_pyramid(tape, &self.params, image)?;
            let mut level_tokens = Vec::with_capacity(pyramid.levels.len());
            for (k, &f) in pyramid.levels.iter().enumerate() {
                let t = bb.tokenize(tape, &self.params, k, f)?.tokens;
                let n = tape.shape(t)[0];
                level_tokens.push((t, c.m_freq.unwrap_or(n as f64 / 2.0)));
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.images.push(image);
                tr.pyramids.push(pyramid.levels.clone());
            }
            tokens.push(level_tokens);
        }

        let sub = Sublayers {
            store: &self.params,
            heads: c.heads,
            dropout: c.dropout,
            n_bands: c.n_bands,
        };
        let mut latents = [
            tape.param(&self.params, self.branches[0].queries)?,
            tape.param(&self.params, self.branches[1].queries)?,
        ];
        for k in 0..c.layers {
            let last = k + 1 == c.layers;
            let kv = |b: usize| -> KeyValues {
                if k == 0 {
                    return KeyValues::Attributes(phi);
                }
                match (last, c.skip) {
                    (true, SkipMode::Replace) => KeyValues::Attributes(phi),
                    (true, SkipMode::Joint) => {
                        let (t, m) = tokens[b][k - 1];
                        KeyValues::Joint {
                            tokens: t,
                            m_freq: m,
                            attributes: phi,
                        }
                    }
                    (false, _) => {
                        let (t, m) = tokens[b][k - 1];
                        KeyValues::Image { tokens: t, m_freq: m }
                    }
                }
            };
            let (outs, selfs) = sub.dual_layer(
                tape,
                [&self.branches[0].layers[k], &self.branches[1].layers[k]],
                latents,
                [kv(0), kv(1)],
                c.wiring,
                rng.as_deref_mut(),
            )?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.layer_outputs.push(outs);
                tr.self_outputs.push(selfs);
            }
            latents = outs;
        }

        let z_cc = tape.mean_rows(latents[0])?;
        let z_mlo = tape.mean_rows(latents[1])?;
        let z = tape.add(z_cc, z_mlo)?;
        let z = tape.scale(z, 0.5)?;
        if let Some(tr) = trace {
            tr.fused = Some(z);
        }
        let (g, b) = (
            tape.param(&self.params, self.head.norm.gamma)?,
            tape.param(&self.params, self.head.norm.beta)?,
        );
        let z = tape.layer_norm(z, g, b, crate::attention::LAYER_NORM_EPS)?;
        let w = tape.param(&self.params, self.head.weight)?;
        let bias = tape.param(&self.params, self.head.bias)?;
        let logits = tape.matmul(z, w)?;
        let logits = tape.add_bias(logits, bias)?;
        tape.reshape(logits, &[2])
    }

    /// Evaluation-mode malignancy probability for one case.
    pub fn predict(&self, cc: &Tensor, mlo: &Tensor, attributes: &LesionDescriptorSet) -> Result<f64> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, cc, mlo, attributes, None)?;
        Ok(predict_proba(tape.value(logits))?.data()[1])
    }

    pub fn parameter_census(&self) -> ParameterCensus {
        let mut by_module: Vec<(String, usize)> = Vec::new();
        for (_, name, value) in self.params.iter() {
            let module = name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".");
            match by_module.last_mut() {
                Some((m, n)) if *m == module => *n += value.numel(),
                _ => by_module.push((module, value.numel())),
            }
        }
        ParameterCensus {
            total: self.params.scalar_count(),
            by_module,
        }
    }

    /// Rebuilds a model around stored parameter values.
    pub fn from_parts(config: ModelConfig, vocab: DescriptorVocabulary, values: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = DualBranchModel::new(config, vocab)?;
        if values.len() != model.params.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} tensors, configuration defines {}",
                values.len(),
                model.params.len()
            )));
        }
        for (name, value) in values {
            model.params.assign(&name, value)?;
        }
        Ok(model)
    }
}

/// Softmax over the two logits; index 1 is the malignant probability.
pub fn predict_proba(logits: &Tensor) -> Result<Tensor> {
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "predict_proba" });
    }
    let flat = logits.reshape(&[logits.numel()])?;
    flat.softmax(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::birads::encode_case;

    fn images(cfg: &ModelConfig, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let n = cfg.image_height * cfg.image_width;
        let shape = [1, cfg.image_height, cfg.image_width];
        (
            Tensor::new(&shape, (0..n).map(|_| rng.random()).collect()).unwrap(),
            Tensor::new(&shape, (0..n).map(|_| rng.random()).collect()).unwrap(),
        )
    }

    #[test]
    fn minimal_preset_values() {
        let m = ModelConfig::minimal();
        assert_eq!((m.layers, m.latent, m.queries, m.d0, m.image_height), (2, 8, 2, 2, 32));
    }

    #[test]
    fn rejects_single_layer_and_short_latent() {
        let vocab = DescriptorVocabulary::default_classes();
        let one = ModelConfig {
            layers: 1,
            ..ModelConfig::toy()
        };
        assert!(DualBranchModel::new(one, vocab.clone()).is_err());
        let short = ModelConfig {
            latent: 8,
            ..ModelConfig::toy()
        };
        assert!(DualBranchModel::new(short, vocab).is_err());
    }

    #[test]
    fn logits_have_two_entries_and_eval_is_deterministic() {
        let vocab = DescriptorVocabulary::default_classes();
        let cfg = ModelConfig::toy();
        let model = DualBranchModel::new(cfg.clone(), vocab.clone()).unwrap();
        let (cc, mlo) = images(&cfg, 5);
        let phi = encode_case(&[vec!["Round", "Circumscribed"]], &vocab, cfg.latent).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let l = model.forward(&mut tape, &cc, &mlo, &phi, None).unwrap();
            tape.value(l).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[2]);
        let b = run();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn swapping_views_changes_logits() {
        let vocab = DescriptorVocabulary::default_classes();
        let cfg = ModelConfig::toy();
        let model = DualBranchModel::new(cfg.clone(), vocab.clone()).unwrap();
        let (cc, mlo) = images(&cfg, 6);
        let phi = encode_case(&[vec!["Oval"]], &vocab, cfg.latent).unwrap();
        let mut tape = Tape::new();
        let a = model.forward(&mut tape, &cc, &mlo, &phi, None).unwrap();
        let b = model.forward(&mut tape, &mlo, &cc, &phi, None).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) > 1e-9);
    }

    #[test]
    fn predict_proba_examples() {
        let p = predict_proba(&Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = predict_proba(&Tensor::new(&[2], vec![1f64.ln(), 3f64.ln()]).unwrap()).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
        let p = predict_proba(&Tensor::new(&[2], vec![-1e4, 1e4]).unwrap()).unwrap();
        assert!(p.data()[0] < 1e-300 && (p.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn census_grows_with_layers_and_is_reproducible() {
        let vocab = DescriptorVocabulary::default_classes();
        let cfg = ModelConfig {
            image_height: 128,
            image_width: 128,
            ..ModelConfig::toy()
        };
        let six = DualBranchModel::new(ModelConfig { layers: 6, ..cfg.clone() }, vocab.clone()).unwrap();
        let six_again = DualBranchModel::new(ModelConfig { layers: 6, ..cfg.clone() }, vocab.clone()).unwrap();
        let three = DualBranchModel::new(ModelConfig { layers: 3, ..cfg }, vocab).unwrap();
        assert_eq!(six.parameter_census(), six_again.parameter_census());
        assert!(six.parameter_census().total > three.parameter_census().total);
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = ModelConfig {
            wiring: "COC".parse().unwrap(),
            m_freq: Some(3.5),
            dropout: 0.1,
            skip: SkipMode::Replace,
            ..ModelConfig::toy()
        };
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }
}
