//! Mini-batch training and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::birads::{DescriptorVocabulary, LesionDescriptorSet};
use crate::config::ConfigMap;
use crate::data::augment::{augment, AugmentationPolicy};
use crate::data::image::resize_for_model;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, fmt_sig, MetricsReport};
use crate::model::{DualBranchModel, ModelConfig};
use crate::optim::SgdMomentum;
use crate::rng::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    /// The learning rate is divided by this after half the iterations.
    pub decay_factor: f64,
    pub momentum: f64,
    pub dropout: f64,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 16,
            iterations: 1000,
            lr: 0.001,
            decay_factor: 10.0,
            momentum: 0.9,
            dropout: 0.25,
            seed: 0,
            augmentation: AugmentationPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(Error::Config("iterations and batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config(format!("decay factor must be positive, got {}", self.decay_factor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn decay_boundary(&self) -> usize {
        self.iterations / 2
    }

    pub fn to_kv(&self) -> ConfigMap {
        let mut kv = ConfigMap::new();
        kv.set("batch", self.batch);
        kv.set("iters", self.iterations);
        kv.set("lr", format!("{:?}", self.lr));
        kv.set("decay_factor", format!("{:?}", self.decay_factor));
        kv.set("momentum", format!("{:?}", self.momentum));
        kv.set("dropout", format!("{:?}", self.dropout));
        kv.set("seed", self.seed);
        kv.set("augment", self.augmentation.flags());
        kv.set(
            "augment_size",
            self.augmentation.size.map_or("model".to_string(), |s| s.to_string()),
        );
        kv.set("elastic_spacing", self.augmentation.elastic_spacing);
        kv.set("elastic_sigma", format!("{:?}", self.augmentation.elastic_sigma));
        kv.set("noise_sigma", format!("{:?}", self.augmentation.noise_sigma));
        kv
    }

    pub fn apply_kv(&mut self, kv: &ConfigMap) -> Result<()> {
        kv.apply("batch", &mut self.batch)?;
        kv.apply("iters", &mut self.iterations)?;
        kv.apply("lr", &mut self.lr)?;
        kv.apply("decay_factor", &mut self.decay_factor)?;
        kv.apply("momentum", &mut self.momentum)?;
        kv.apply("dropout", &mut self.dropout)?;
        kv.apply("seed", &mut self.seed)?;
        if let Some(flags) = kv.get("augment") {
            self.augmentation.parse_flags(flags)?;
        }
        match kv.get("augment_size") {
            None | Some("model") => {}
            Some(_) => self.augmentation.size = kv.parsed("augment_size")?,
        }
        kv.apply("elastic_spacing", &mut self.augmentation.elastic_spacing)?;
        kv.apply("elastic_sigma", &mut self.augmentation.elastic_sigma)?;
        kv.apply("noise_sigma", &mut self.augmentation.noise_sigma)?;
        Ok(())
    }
}

/// Step-decayed learning rate for 0-based `iteration`.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    if iteration < cfg.decay_boundary() {
        cfg.lr
    } else {
        cfg.lr / cfg.decay_factor
    }
}

/// `−log softmax(logits)[label]` on plain values.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.reshape(&[logits.numel()])?)?;
    let loss = tape.cross_entropy(l, label)?;
    Ok(tape.value(loss).data()[0])
}

/// Model configuration after training-time overrides: dropout from the
/// training config and the augmentation resize target.
pub fn effective_model_config(model: &ModelConfig, train: &TrainConfig) -> ModelConfig {
    let mut cfg = model.clone();
    cfg.dropout = train.dropout;
    if let Some(s) = train.augmentation.size {
        cfg.image_height = s;
        cfg.image_width = s;
    }
    cfg
}

/// A case resized to the model's input and with encoded descriptors.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub cc: Tensor,
    pub mlo: Tensor,
    pub descriptors: LesionDescriptorSet,
    pub label: u8,
}

pub fn prepare(dataset: &Dataset, vocab: &DescriptorVocabulary, cfg: &ModelConfig) -> Result<Vec<PreparedCase>> {
    let m = cfg.required_image_multiple();
    dataset
        .cases
        .iter()
        .map(|c| {
            Ok(PreparedCase {
                cc: resize_for_model(&c.cc, cfg.image_height, cfg.image_width, m)?,
                mlo: resize_for_model(&c.mlo, cfg.image_height, cfg.image_width, m)?,
                descriptors: c.descriptors(vocab, cfg.latent)?,
                label: c.label,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    /// `(iteration, mean batch loss, learning rate)`.
    pub entries: Vec<(usize, f64, f64)>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,lr\n");
        for (i, loss, lr) in &self.entries {
            out.push_str(&format!("{i},{},{}\n", fmt_sig(*loss), fmt_sig(*lr)));
        }
        out
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.entries.first().map(|e| e.1)
    }

    /// Mean loss over the last `fraction` of iterations (at least one).
    pub fn tail_mean(&self, fraction: f64) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        let n = ((self.entries.len() as f64 * fraction).ceil() as usize).clamp(1, self.entries.len());
        let tail = &self.entries[self.entries.len() - n..];
        Some(tail.iter().map(|e| e.1).sum::<f64>() / n as f64)
    }
}

/// Loss and parameter gradients for one case, accumulated into the model's
/// store with weight `scale`.
fn accumulate_case(
    model: &mut DualBranchModel,
    case: &PreparedCase,
    policy: &AugmentationPolicy,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (cc, mlo) = if policy.is_identity() {
        (case.cc.clone(), case.mlo.clone())
    } else {
        (augment(&case.cc, policy, rng)?, augment(&case.mlo, policy, rng)?)
    };
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, &cc, &mlo, &case.descriptors, Some(rng))?;
    let loss = tape.cross_entropy(logits, case.label as usize)?;
    let value = tape.value(loss).data()[0];
    let scaled = tape.scale(loss, scale)?;
    tape.backward(scaled)?;
    tape.accumulate_param_grads(model.params_mut());
    Ok(value)
}

/// Trains a fresh model on `cases`. Parameter initialization, batch order,
/// augmentation and dropout all derive from `train.seed`.
pub fn train_fold(
    cases: &[PreparedCase],
    vocab: &DescriptorVocabulary,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
) -> Result<(DualBranchModel, LossTrace)> {
    train.validate()?;
    if cases.is_empty() {
        return Err(Error::Usage("training needs at least one case".into()));
    }
    let mut cfg = effective_model_config(model_cfg, train);
    cfg.init_seed = train.seed;
    let mut model = DualBranchModel::new(cfg, vocab.clone())?;
    let mut optimizer = SgdMomentum::new(model.params(), train.momentum);
    let mut rng = stream(train.seed, 0);
    let mut queue: Vec<usize> = Vec::new();
    let mut trace = LossTrace::default();
    let scale = 1.0 / train.batch as f64;
    for it in 0..train.iterations {
        model.params_mut().zero_grads();
        let mut total = 0.0;
        for _ in 0..train.batch {
            if queue.is_empty() {
                queue = (0..cases.len()).collect();
                queue.shuffle(&mut rng);
                queue.reverse();
            }
            let idx = queue.pop().expect("refilled queue");
            let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
            total += accumulate_case(&mut model, &cases[idx], &train.augmentation, scale, &mut sample_rng)?;
        }
        let lr = lr_at(it, train);
        optimizer.step(model.params_mut(), lr);
        trace.entries.push((it, total * scale, lr));
    }
    model.params_mut().zero_grads();
    Ok((model, trace))
}

/// Evaluation-mode malignancy probabilities.
pub fn predict_scores(model: &DualBranchModel, cases: &[PreparedCase]) -> Result<Vec<f64>> {
    cases.iter().map(|c| model.predict(&c.cc, &c.mlo, &c.descriptors)).collect()
}

pub fn evaluate(model: &DualBranchModel, cases: &[PreparedCase]) -> Result<MetricsReport> {
    let scores = predict_scores(model, cases)?;
    let labels: Vec<u8> = cases.iter().map(|c| c.label).collect();
    compute_metrics(&scores, &labels, DEFAULT_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert_eq!(lr_at(499, &cfg), 0.001);
        assert_eq!(lr_at(500, &cfg), 0.0001);
        let short = TrainConfig {
            iterations: 300,
            ..cfg
        };
        assert_eq!(lr_at(149, &short), 0.001);
        assert_eq!(lr_at(150, &short), 0.0001);
    }

    #[test]
    fn cross_entropy_examples() {
        let t = |a: f64, b: f64| Tensor::new(&[2], vec![a, b]).unwrap();
        assert!((cross_entropy(&t(0.0, 0.0), 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&t(0.0, 0.0), 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&t(10.0, -10.0), 0).unwrap() < 1e-8);
        assert!((cross_entropy(&t(1f64.ln(), 3f64.ln()), 1).unwrap() + 0.75f64.ln()).abs() < 1e-15);
        assert!(matches!(cross_entropy(&t(0.0, 0.0), 2), Err(Error::Usage(_))));
    }

    #[test]
    fn train_config_kv_round_trip() {
        let mut cfg = TrainConfig {
            iterations: 7,
            lr: 0.05,
            seed: 9,
            ..TrainConfig::default()
        };
        cfg.augmentation.gaussian_noise = true;
        cfg.augmentation.size = Some(128);
        let mut back = TrainConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn tail_mean() {
        let trace = LossTrace {
            entries: (0..10).map(|i| (i, i as f64, 0.1)).collect(),
        };
        assert_eq!(trace.tail_mean(0.1), Some(9.0));
        assert_eq!(trace.tail_mean(0.2), Some(8.5));
        assert_eq!(trace.first_loss(), Some(0.0));
    }
}
