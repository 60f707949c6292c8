//! Stratified cross-validation and the ablation harnesses built on it.

use rand::Rng;
use rayon::prelude::*;

use crate::attention::WiringConfig;
use crate::birads::DescriptorVocabulary;
use crate::data::augment::AugmentationPolicy;
use crate::data::{stratified_kfold, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{fmt_sig, mean_std, MetricsReport, METRIC_NAMES};
use crate::model::{DualBranchModel, ModelConfig};
use crate::rng::stream;
use crate::train::{effective_model_config, evaluate, prepare, train_fold, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub folds: Vec<MetricsReport>,
    /// `(mean, sample std)` per metric, in [`METRIC_NAMES`] order.
    pub summary: [(f64, f64); 6],
}

impl CvReport {
    pub fn from_folds(folds: Vec<MetricsReport>) -> CvReport {
        let mut summary = [(0.0, 0.0); 6];
        for (m, slot) in summary.iter_mut().enumerate() {
            let v: Vec<f64> = folds.iter().map(|f| f.values()[m]).collect();
            *slot = mean_std(&v);
        }
        CvReport { folds, summary }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|&n| n == metric).map(|i| self.summary[i].0)
    }

    pub fn std(&self, metric: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|&n| n == metric).map(|i| self.summary[i].1)
    }

    /// One row per fold plus `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("fold,{},undefined\n", METRIC_NAMES.join(","));
        for (i, f) in self.folds.iter().enumerate() {
            let vals: Vec<String> = f.values().iter().map(|v| fmt_sig(*v)).collect();
            out.push_str(&format!("{i},{},{}\n", vals.join(","), f.undefined.join(";")));
        }
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let vals: Vec<String> = self
                .summary
                .iter()
                .map(|s| fmt_sig(if pick == 0 { s.0 } else { s.1 }))
                .collect();
            out.push_str(&format!("{label},{},\n", vals.join(",")));
        }
        out
    }
}

/// Shared settings of a cross-validated run.
#[derive(Clone, Debug)]
pub struct CvSettings {
    pub k: usize,
    /// Upper bound on concurrently trained folds.
    pub jobs: usize,
}

impl Default for CvSettings {
    fn default() -> Self {
        CvSettings { k: 5, jobs: 1 }
    }
}

/// Training seed of fold `fold` under run seed `seed`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    stream(seed, fold as u64 + 1).random()
}

fn run_jobs<T: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.min(n))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Trains and evaluates one model per fold. The fold plan uses
/// `train.seed`; fold `f` trains with [`fold_seed`]`(train.seed, f)`.
pub fn run_cv(
    dataset: &Dataset,
    vocab: &DescriptorVocabulary,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    settings: &CvSettings,
) -> Result<CvReport> {
    let plan = stratified_kfold(&dataset.labels(), settings.k, train.seed)?;
    let cfg = effective_model_config(model_cfg, train);
    cfg.validate(vocab.len())?;
    let prepared = prepare(dataset, vocab, &cfg)?;
    let folds = run_jobs(settings.jobs, plan.k(), |f| {
        let train_idx = plan.train_indices(f)?;
        let test_idx = plan.test_indices(f)?;
        let train_cases: Vec<_> = train_idx.iter().map(|&i| prepared[i].clone()).collect();
        let test_cases: Vec<_> = test_idx.iter().map(|&i| prepared[i].clone()).collect();
        let fold_train = TrainConfig {
            seed: fold_seed(train.seed, f),
            ..train.clone()
        };
        let (model, _) = train_fold(&train_cases, vocab, &cfg, &fold_train)?;
        evaluate(&model, &test_cases)
    })?;
    Ok(CvReport::from_folds(folds))
}

/// A rectangular CSV table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }
}

/// One cross-validated run per wiring configuration, in the fixed order
/// COO, OCO, OOC, CCO, COC, OCC.
pub fn ablate_wiring(
    dataset: &Dataset,
    vocab: &DescriptorVocabulary,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    settings: &CvSettings,
) -> Result<Table> {
    let mut header: Vec<String> = ["configuration", "query", "key", "value"].map(String::from).to_vec();
    header.extend(METRIC_NAMES.iter().map(|s| s.to_string()));
    let mut rows = Vec::new();
    for (i, wiring) in WiringConfig::all().into_iter().enumerate() {
        let cfg = ModelConfig {
            wiring,
            ..model_cfg.clone()
        };
        let report = run_cv(dataset, vocab, &cfg, train, settings)?;
        let letters = wiring.to_string();
        let mut row = vec![i.to_string()];
        row.extend(letters.chars().map(|c| c.to_string()));
        row.extend(report.summary.iter().map(|s| fmt_sig(s.0)));
        rows.push(row);
    }
    Ok(Table { header, rows })
}

pub const DEFAULT_LAYER_COUNTS: [usize; 4] = [3, 5, 6, 7];

/// `mean ± std` with two and three decimals.
pub fn fmt_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.3}")
}

/// Smallest multiple of `multiple` that is at least `size`.
fn round_up(size: usize, multiple: usize) -> usize {
    size.div_ceil(multiple) * multiple
}

/// Cross-validated accuracy for each layer count. Image sides are raised to
/// the next size the deeper pyramid accepts.
pub fn ablate_layers(
    dataset: &Dataset,
    vocab: &DescriptorVocabulary,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    settings: &CvSettings,
    counts: &[usize],
) -> Result<Table> {
    let header = ["layers", "accuracy", "mean", "std", "image_size", "parameters"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::new();
    for &layers in counts {
        let mut cfg = ModelConfig {
            layers,
            ..effective_model_config(model_cfg, train)
        };
        if layers < 2 {
            return Err(Error::Config(format!("at least 2 layers are required, got {layers}")));
        }
        let m = cfg.required_image_multiple();
        cfg.image_height = round_up(cfg.image_height, m);
        cfg.image_width = round_up(cfg.image_width, m);
        let layer_train = TrainConfig {
            augmentation: AugmentationPolicy {
                size: None,
                ..train.augmentation.clone()
            },
            ..train.clone()
        };
        let report = run_cv(dataset, vocab, &cfg, &layer_train, settings)?;
        let (mean, std) = (report.mean("accuracy").unwrap(), report.std("accuracy").unwrap());
        let census = DualBranchModel::new(cfg.clone(), vocab.clone())?.parameter_census();
        rows.push(vec![
            layers.to_string(),
            fmt_mean_std(mean, std),
            fmt_sig(mean),
            fmt_sig(std),
            format!("{}x{}", cfg.image_height, cfg.image_width),
            census.total.to_string(),
        ]);
    }
    Ok(Table { header, rows })
}

/// The seven augmentation settings: none, three resize targets, flips,
/// elastic warp, Gaussian noise.
pub fn augmentation_policies(base: &AugmentationPolicy, sizes: [usize; 3]) -> Vec<(String, AugmentationPolicy)> {
    let none = AugmentationPolicy {
        hflip: false,
        vflip: false,
        elastic: false,
        gaussian_noise: false,
        size: None,
        ..base.clone()
    };
    let mut out = vec![("Baseline w/o aug.".to_string(), none.clone())];
    for s in sizes {
        out.push((
            format!("Baseline + {s}"),
            AugmentationPolicy {
                size: Some(s),
                ..none.clone()
            },
        ));
    }
    out.push((
        "Baseline + h/vflip".into(),
        AugmentationPolicy {
            hflip: true,
            vflip: true,
            ..none.clone()
        },
    ));
    out.push((
        "Baseline + elastic".into(),
        AugmentationPolicy {
            elastic: true,
            ..none.clone()
        },
    ));
    out.push((
        "Baseline + Gaussian".into(),
        AugmentationPolicy {
            gaussian_noise: true,
            ..none
        },
    ));
    out
}

pub const DEFAULT_AUG_SIZES: [usize; 3] = [64, 128, 256];

pub fn ablate_augmentations(
    dataset: &Dataset,
    vocab: &DescriptorVocabulary,
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    settings: &CvSettings,
    policies: &[(String, AugmentationPolicy)],
) -> Result<Table> {
    let header = ["policy", "accuracy", "mean", "std"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for (name, policy) in policies {
        let t = TrainConfig {
            augmentation: policy.clone(),
            ..train.clone()
        };
        let report = run_cv(dataset, vocab, model_cfg, &t, settings)?;
        let (mean, std) = (report.mean("accuracy").unwrap(), report.std("accuracy").unwrap());
        rows.push(vec![name.clone(), fmt_mean_std(mean, std), fmt_sig(mean), fmt_sig(std)]);
    }
    Ok(Table { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_policies_in_order() {
        let p = augmentation_policies(&AugmentationPolicy::default(), DEFAULT_AUG_SIZES);
        let names: Vec<&str> = p.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "Baseline w/o aug.",
                "Baseline + 64",
                "Baseline + 128",
                "Baseline + 256",
                "Baseline + h/vflip",
                "Baseline + elastic",
                "Baseline + Gaussian"
            ]
        );
        assert!(p[0].1.is_identity() && p[0].1.size.is_none());
        assert_eq!(p[2].1.size, Some(128));
    }

    #[test]
    fn mean_std_format() {
        assert_eq!(fmt_mean_std(0.76, 0.01), "0.76 ± 0.010");
        assert_eq!(round_up(64, 128), 128);
        assert_eq!(round_up(128, 64), 128);
    }

    #[test]
    fn summary_uses_sample_std() {
        let mk = |auc: f64| MetricsReport {
            auc,
            ..crate::metrics::thresholded(Default::default(), 0.5)
        };
        let r = CvReport::from_folds(vec![mk(0.5), mk(0.7), mk(0.9)]);
        assert!((r.mean("auc").unwrap() - 0.7).abs() < 1e-15);
        assert!((r.std("auc").unwrap() - 0.2).abs() < 1e-15);
    }
}
