//! End-to-end runs over generated data.

use std::collections::BTreeMap;
use std::path::Path;

use birads_core::data::synth::{synth_case, synth_generate};
use birads_core::data::Case;
use birads_core::metrics::auc;
use birads_core::train::{prepare, train_fold};
use birads_core::{
    run_cv, AugmentationPolicy, CvSettings, Dataset, DescriptorVocabulary, ModelConfig, SynthConfig,
    TrainConfig,
};

fn in_memory(cfg: &SynthConfig) -> Dataset {
    Dataset {
        cases: (0..cfg.n_cases)
            .map(|i| {
                let c = synth_case(cfg, i);
                Case {
                    id: c.record.case_id,
                    cc: c.cc,
                    mlo: c.mlo,
                    lesions: c.record.lesions,
                    label: c.record.label,
                }
            })
            .collect(),
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Union of the lesions' mass tokens as a 0/1 feature row.
fn descriptor_features(case: &Case, vocab: &DescriptorVocabulary) -> Vec<f64> {
    let set = case.descriptors(vocab, vocab.len()).unwrap();
    (0..vocab.len())
        .map(|p| if set.lesions().iter().any(|l| l.bits()[p] == 1) { 1.0 } else { 0.0 })
        .collect()
}

/// Plain batch gradient descent on the logistic loss.
fn fit_logistic(x: &[Vec<f64>], y: &[u8]) -> Vec<f64> {
    let d = x[0].len() + 1;
    let mut w = vec![0.0; d];
    for _ in 0..3000 {
        let mut g = vec![0.0; d];
        for (row, &label) in x.iter().zip(y) {
            let z = w[d - 1] + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - label as f64;
            for (gj, xj) in g.iter_mut().zip(row) {
                *gj += err * xj;
            }
            g[d - 1] += err;
        }
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= 0.5 * gj / x.len() as f64;
        }
    }
    w
}

fn logistic_auc(alpha: f64) -> f64 {
    let cfg = SynthConfig {
        n_cases: 500,
        alpha,
        seed: 4,
        image_size: 16,
    };
    let vocab = DescriptorVocabulary::default_classes();
    let data = in_memory(&cfg);
    let x: Vec<Vec<f64>> = data.cases.iter().map(|c| descriptor_features(c, &vocab)).collect();
    let y = data.labels();
    let (train, test) = (350, 150);
    let w = fit_logistic(&x[..train], &y[..train]);
    let scores: Vec<f64> = x[train..train + test]
        .iter()
        .map(|row| w[w.len() - 1] + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    auc(&scores, &y[train..train + test]).unwrap()
}

#[test]
fn descriptor_only_baseline_separates_informative_data() {
    let informative = logistic_auc(1.0);
    assert!(informative > 0.9, "AUC {informative}");
    let null = logistic_auc(0.0);
    assert!((null - 0.5).abs() < 0.15, "AUC {null}");
}

#[test]
fn uninformative_tokens_are_independent_of_the_label() {
    let cfg = SynthConfig {
        n_cases: 3000,
        alpha: 0.0,
        seed: 8,
        image_size: 16,
    };
    let data = in_memory(&cfg);
    let vocab = DescriptorVocabulary::default_classes();
    let (mut pos, mut neg) = (vec![0.0; 14], vec![0.0; 14]);
    let (mut np, mut nn) = (0.0, 0.0);
    for c in &data.cases {
        let f = descriptor_features(c, &vocab);
        let (counts, n) = if c.label == 1 { (&mut pos, &mut np) } else { (&mut neg, &mut nn) };
        *n += 1.0;
        for (a, b) in counts.iter_mut().zip(&f) {
            *a += b;
        }
    }
    for t in 0..14 {
        let (p, q) = (pos[t] / np, neg[t] / nn);
        let pooled = (pos[t] + neg[t]) / (np + nn);
        let se = (pooled * (1.0 - pooled) * (1.0 / np + 1.0 / nn)).sqrt().max(1e-9);
        assert!((p - q).abs() < 4.0 * se, "token {t}: {p} vs {q}");
    }
}

#[test]
fn generation_is_byte_reproducible_and_loadable() {
    let cfg = SynthConfig {
        n_cases: 12,
        alpha: 0.7,
        seed: 3,
        image_size: 24,
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let records = synth_generate(a.path(), &cfg).unwrap();
    synth_generate(b.path(), &cfg).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 2 * 12 + 2);
    assert_eq!(ta, tb);
    let manifest = String::from_utf8(ta["manifest.txt"].clone()).unwrap();
    for line in ["seed=3", "alpha=0.7", "n_cases=12", "image_size=24"] {
        assert!(manifest.lines().any(|l| l == line), "{manifest}");
    }

    let vocab = DescriptorVocabulary::default_classes();
    let loaded = Dataset::load(a.path(), &vocab).unwrap();
    assert_eq!(loaded.len(), 12);
    for (case, record) in loaded.cases.iter().zip(&records) {
        let fresh = synth_case(&cfg, case.id[4..].parse().unwrap());
        assert_eq!(case.label, record.label);
        assert_eq!(case.lesions, record.lesions);
        assert_eq!(case.cc.shape(), &[1, 24, 24]);
        // 8-bit storage quantizes each pixel to the nearest of 256 levels
        assert!(case.cc.max_abs_diff(&fresh.cc) <= 0.5 / 255.0 + 1e-12);
    }
}

fn tiny() -> (Dataset, DescriptorVocabulary, ModelConfig) {
    let cfg = SynthConfig {
        n_cases: 12,
        alpha: 1.0,
        seed: 5,
        image_size: 32,
    };
    let model = ModelConfig {
        latent: 16,
        ..ModelConfig::minimal()
    };
    (in_memory(&cfg), DescriptorVocabulary::default_classes(), model)
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (data, vocab, model) = tiny();
    let cases = prepare(&data, &vocab, &model).unwrap();
    let train = TrainConfig {
        iterations: 1,
        lr: 0.0,
        batch: 2,
        ..TrainConfig::default()
    };
    let (trained, trace) = train_fold(&cases, &vocab, &model, &train).unwrap();
    let fresh = birads_core::DualBranchModel::new(
        ModelConfig {
            init_seed: train.seed,
            dropout: train.dropout,
            ..model
        },
        vocab,
    )
    .unwrap();
    assert_eq!(trained.params(), fresh.params());
    assert_eq!(trace.entries.len(), 1);
}

#[test]
fn training_is_bitwise_deterministic() {
    let (data, vocab, model) = tiny();
    let cases = prepare(&data, &vocab, &model).unwrap();
    let train = TrainConfig {
        iterations: 4,
        batch: 3,
        seed: 17,
        augmentation: AugmentationPolicy {
            gaussian_noise: true,
            ..AugmentationPolicy::default()
        },
        ..TrainConfig::default()
    };
    let (a, la) = train_fold(&cases, &vocab, &model, &train).unwrap();
    let (b, lb) = train_fold(&cases, &vocab, &model, &train).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(la, lb);
    let other = TrainConfig { seed: 18, ..train };
    let (c, _) = train_fold(&cases, &vocab, &model, &other).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn cross_validation_is_reproducible() {
    let (data, vocab, model) = tiny();
    let train = TrainConfig {
        iterations: 3,
        batch: 2,
        ..TrainConfig::default()
    };
    let settings = CvSettings { k: 2, jobs: 2 };
    let a = run_cv(&data, &vocab, &model, &train, &settings).unwrap();
    let b = run_cv(&data, &vocab, &model, &train, &CvSettings { k: 2, jobs: 1 }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.folds.len(), 2);
}

#[test]
fn training_reduces_the_loss_on_informative_data() {
    let cfg = SynthConfig {
        n_cases: 200,
        alpha: 1.0,
        seed: 2,
        image_size: 64,
    };
    let vocab = DescriptorVocabulary::default_classes();
    let model = ModelConfig::toy();
    let cases = prepare(&in_memory(&cfg), &vocab, &model).unwrap();
    let train = TrainConfig {
        iterations: 200,
        ..TrainConfig::default()
    };
    let (_, trace) = train_fold(&cases, &vocab, &model, &train).unwrap();
    let head: f64 = trace.entries[..10].iter().map(|e| e.1).sum::<f64>() / 10.0;
    let tail = trace.tail_mean(0.1).unwrap();
    assert!((head - 2f64.ln()).abs() < 0.2, "initial loss {head}");
    assert!(tail < head, "loss {head} -> {tail}");
}
