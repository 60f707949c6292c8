//! Finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::birads::{encode_case, DescriptorCategory, DescriptorVocabulary, LesionDescriptorSet};
use crate::error::Result;
use crate::model::{DualBranchModel, ModelConfig};
use crate::params::ParamId;
use crate::tape::{BackwardFault, Tape};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding are compared absolutely.
pub const ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest [`relative_error`] between two gradients of the same shape.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub vocab: DescriptorVocabulary,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub fault: Option<BackwardFault>,
}

/// Mass shape and margin classes only: seven tokens, small enough for the
/// minimal latent length.
pub fn mass_vocabulary() -> DescriptorVocabulary {
    let tokens: Vec<(DescriptorCategory, &str)> = crate::birads::DEFAULT_CLASSES
        .iter()
        .filter(|(c, _)| matches!(c, DescriptorCategory::MassMargin | DescriptorCategory::MassShape))
        .map(|&(c, t)| (c, t))
        .collect();
    DescriptorVocabulary::build(&tokens).expect("non-empty subset")
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig::minimal(),
            vocab: mass_vocabulary(),
            seed: 0,
            step: STEP,
            tolerance: TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: String,
    pub count: usize,
    pub worst: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub worst: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

struct Inputs {
    cc: Tensor,
    mlo: Tensor,
    phi: LesionDescriptorSet,
    label: usize,
}

fn inputs(cfg: &GradcheckConfig) -> Result<Inputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let (h, w) = (cfg.model.image_height, cfg.model.image_width);
    let mut image = || Tensor::new(&[1, h, w], (0..h * w).map(|_| rng.random::<f64>()).collect());
    let (cc, mlo) = (image()?, image()?);
    let tokens: Vec<&str> = cfg.vocab.entries().iter().map(|(_, t)| t.as_str()).collect();
    let lesions = vec![
        vec![tokens[0], tokens[tokens.len() - 1]],
        vec![tokens[tokens.len() / 2]],
    ];
    Ok(Inputs {
        cc,
        mlo,
        phi: encode_case(&lesions, &cfg.vocab, cfg.model.latent)?,
        label: 1,
    })
}

fn loss(model: &DualBranchModel, x: &Inputs, tape: &mut Tape) -> Result<crate::tape::Var> {
    let logits = model.forward(tape, &x.cc, &x.mlo, &x.phi, None)?;
    tape.cross_entropy(logits, x.label)
}

/// End-to-end check of the classification loss: every parameter's analytic
/// gradient against central differences, in evaluation mode.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let model_cfg = ModelConfig {
        init_seed: cfg.seed,
        ..cfg.model.clone()
    };
    let mut model = DualBranchModel::new(model_cfg, cfg.vocab.clone())?;
    let x = inputs(cfg)?;
    let mut tape = match cfg.fault {
        Some(f) => Tape::with_backward_fault(f),
        None => Tape::new(),
    };
    let l = loss(&model, &x, &mut tape)?;
    tape.backward(l)?;
    model.params_mut().zero_grads();
    tape.accumulate_param_grads(model.params_mut());
    let ids: Vec<ParamId> = model.params().ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = model.params().grad(id).clone();
        let n = analytic.numel();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = model.params().value(id).data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                model.params_mut().value_mut(id).data_mut()[i] = v;
                let mut t = Tape::new();
                let l = loss(&model, &x, &mut t)?;
                Ok(t.value(l).data()[0])
            };
            let plus = eval(orig + cfg.step)?;
            let minus = eval(orig - cfg.step)?;
            eval(orig)?;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        groups.push(GroupResult {
            name: model.params().name(id).to_string(),
            count: n,
            worst,
        });
    }
    let worst = groups.iter().map(|g| g.worst).fold(0.0, f64::max);
    Ok(GradcheckReport {
        groups,
        worst,
        tolerance: cfg.tolerance,
    })
}
