//! End-to-end properties of the dual-branch model.

use birads_core::birads::{encode_case, DescriptorCategory};
use birads_core::model::{predict_proba, ForwardTrace};
use birads_core::{DescriptorVocabulary, DualBranchModel, LesionDescriptorSet, ModelConfig, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_height * cfg.image_width;
    Tensor::new(&[1, cfg.image_height, cfg.image_width], (0..n).map(|_| rng.random()).collect()).unwrap()
}

fn logits(model: &DualBranchModel, cc: &Tensor, mlo: &Tensor, phi: &LesionDescriptorSet) -> Tensor {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, cc, mlo, phi, None).unwrap();
    tape.value(out).clone()
}

fn minimal() -> (DualBranchModel, DescriptorVocabulary) {
    let vocab = DescriptorVocabulary::default_classes();
    let cfg = ModelConfig {
        latent: 16,
        ..ModelConfig::minimal()
    };
    (DualBranchModel::new(cfg, vocab.clone()).unwrap(), vocab)
}

#[test]
fn hand_counted_census() {
    let vocab = DescriptorVocabulary::build(&[
        (DescriptorCategory::MassShape, "a"),
        (DescriptorCategory::MassShape, "b"),
        (DescriptorCategory::MassMargin, "c"),
        (DescriptorCategory::MassMargin, "d"),
    ])
    .unwrap();
    let cfg = ModelConfig {
        layers: 2,
        latent: 4,
        queries: 2,
        d0: 2,
        image_height: 8,
        image_width: 8,
        ..ModelConfig::default()
    };
    let model = DualBranchModel::new(cfg, vocab).unwrap();

    // one pyramid level: 3×3 stem conv (1→2) with GroupNorm affine, 1×1 tokenizer to 8
    let backbone = (2 * 9 + 2 + 2) + (2 * 8 + 8);
    let norm = 4 + 4;
    let ffn = 4 * 8 + 8 + 8 * 4 + 4;
    let square_proj = 3 * 4 * 4;
    let attention_block = square_proj + norm + ffn + norm;
    let layer0 = attention_block + attention_block + (square_proj + norm);
    // image keys/values are 8 token channels + 2·6 bands + 1 position
    let kv = 8 + 2 * 6 + 1;
    let joint_cross = (4 * 4 + 2 * kv * 4) + 2 * 4 * 4 + norm + ffn + norm;
    let layer1 = joint_cross + attention_block + (square_proj + norm);
    let branch = 2 * 4 + layer0 + layer1;
    let head = norm + 4 * 2 + 2;
    let census = model.parameter_census();
    assert_eq!(census.total, backbone + 2 * branch + head);
    assert_eq!(census.total, 1760);
    assert_eq!(census.by_module.iter().map(|m| m.1).sum::<usize>(), census.total);
}

#[test]
fn lesion_order_is_bitwise_irrelevant() {
    let (model, vocab) = minimal();
    let cfg = model.config().clone();
    let (cc, mlo) = (image(&cfg, 1), image(&cfg, 2));
    let a = vec!["Irregular", "Spicular"];
    let b = vec!["Oval", "Circumscribed"];
    let ab = encode_case(&[a.clone(), b.clone()], &vocab, 16).unwrap();
    let ba = encode_case(&[b, a], &vocab, 16).unwrap();
    assert_eq!(logits(&model, &cc, &mlo, &ab), logits(&model, &cc, &mlo, &ba));
}

#[test]
fn output_depends_on_descriptors_and_both_views() {
    let (model, vocab) = minimal();
    let cfg = model.config().clone();
    let (cc, mlo) = (image(&cfg, 3), image(&cfg, 4));
    let benign = encode_case(&[vec!["Oval", "Circumscribed"]], &vocab, 16).unwrap();
    let malignant = encode_case(&[vec!["Irregular", "Spicular"]], &vocab, 16).unwrap();
    let base = logits(&model, &cc, &mlo, &benign);
    assert_eq!(base.shape(), &[2]);
    assert!(base.max_abs_diff(&logits(&model, &cc, &mlo, &malignant)) > 1e-9);
    assert!(base.max_abs_diff(&logits(&model, &image(&cfg, 5), &mlo, &benign)) > 1e-9);
    assert!(base.max_abs_diff(&logits(&model, &cc, &image(&cfg, 5), &benign)) > 1e-9);
    assert!(base.max_abs_diff(&logits(&model, &mlo, &cc, &benign)) > 1e-9);
    let p = predict_proba(&base).unwrap();
    assert!((p.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn withheld_descriptors_ignore_the_input_set() {
    let vocab = DescriptorVocabulary::default_classes();
    let cfg = ModelConfig {
        latent: 16,
        descriptors: false,
        ..ModelConfig::minimal()
    };
    let model = DualBranchModel::new(cfg.clone(), vocab.clone()).unwrap();
    let (cc, mlo) = (image(&cfg, 6), image(&cfg, 7));
    let a = encode_case(&[vec!["Oval"]], &vocab, 16).unwrap();
    let b = encode_case(&[vec!["Irregular"], vec!["Spicular"]], &vocab, 16).unwrap();
    assert_eq!(logits(&model, &cc, &mlo, &a), logits(&model, &cc, &mlo, &b));
}

#[test]
fn every_parameter_receives_gradient() {
    let (mut model, vocab) = minimal();
    let cfg = model.config().clone();
    let phi = encode_case(&[vec!["Round", "Obscured"], vec!["Clustered", "Linear"]], &vocab, 16).unwrap();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &image(&cfg, 8), &image(&cfg, 9), &phi, None).unwrap();
    let loss = tape.cross_entropy(out, 1).unwrap();
    tape.backward(loss).unwrap();
    tape.accumulate_param_grads(model.params_mut());
    for (id, name, _) in model.params().iter() {
        let g = model.params().grad(id);
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} received no gradient");
    }
}

#[test]
fn doubling_d0_doubles_every_level() {
    let vocab = DescriptorVocabulary::default_classes();
    let shapes = |d0: usize| {
        let cfg = ModelConfig {
            latent: 16,
            d0,
            layers: 3,
            ..ModelConfig::minimal()
        };
        let model = DualBranchModel::new(cfg.clone(), vocab.clone()).unwrap();
        let phi = encode_case(&[vec!["Oval"]], &vocab, 16).unwrap();
        let mut tape = Tape::new();
        let mut trace = ForwardTrace::default();
        model
            .forward_traced(&mut tape, &image(&cfg, 1), &image(&cfg, 1), &phi, None, Some(&mut trace))
            .unwrap();
        trace.pyramids[0].iter().map(|&v| tape.shape(v).to_vec()).collect::<Vec<_>>()
    };
    let (one, two) = (shapes(2), shapes(4));
    assert_eq!(one.len(), 2);
    assert_eq!(one[0], vec![2, 8, 8]);
    for (a, b) in one.iter().zip(&two) {
        assert_eq!(b[0], 2 * a[0]);
        assert_eq!(b[1..], a[1..]);
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (model, vocab) = minimal();
    let cfg = model.config().clone();
    let phi = encode_case(&[vec!["Oval"]], &vocab, 16).unwrap();
    let small = Tensor::zeros(&[1, 16, 16]);
    let mut tape = Tape::new();
    assert!(model.forward(&mut tape, &small, &image(&cfg, 1), &phi, None).is_err());
    let short = encode_case(&[vec!["Oval"]], &vocab, 14).unwrap();
    assert!(model.forward(&mut tape, &image(&cfg, 1), &image(&cfg, 1), &short, None).is_err());
}
