//! Property tests for folds, metrics, augmentation, metadata and the
//! descriptor codec.

use birads_core::birads::{encode_case, encode_lesion};
use birads_core::data::augment::augment;
use birads_core::data::folds::stratified_kfold;
use birads_core::data::records::{metadata_csv_string, parse_metadata_csv};
use birads_core::metrics::{auc, roc_points, trapezoid};
use birads_core::{AugmentationPolicy, CaseRecord, DescriptorVocabulary, Tensor};
use proptest::prelude::*;
use proptest::sample::subsequence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn labels_with_both_classes(k: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, k..200).prop_filter("both classes", |l| l.contains(&0) && l.contains(&1))
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..80)
        .prop_filter("both classes", |v| v.iter().any(|p| p.1 == 0) && v.iter().any(|p| p.1 == 1))
        .prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #[test]
    fn folds_partition_and_stratify((k, labels) in (2usize..7).prop_flat_map(|k| (Just(k), labels_with_both_classes(k))), seed in any::<u64>()) {
        let plan = stratified_kfold(&labels, k, seed).unwrap();
        let mut seen = vec![0usize; labels.len()];
        let rate = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
        let sizes: Vec<usize> = (0..k).map(|f| plan.test_indices(f).unwrap().len()).collect();
        for f in 0..k {
            let test = plan.test_indices(f).unwrap();
            for &i in test {
                seen[i] += 1;
            }
            let pos = test.iter().filter(|&&i| labels[i] == 1).count() as f64;
            prop_assert!((pos - (test.len() as f64 * rate).round()).abs() <= 1.0);
            let train = plan.train_indices(f).unwrap();
            prop_assert_eq!(train.len() + test.len(), labels.len());
            prop_assert!(train.iter().all(|i| !test.contains(i)));
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(stratified_kfold(&labels, k, seed).unwrap(), plan);
    }

    #[test]
    fn auc_is_invariant_to_increasing_maps((scores, labels) in scored_labels()) {
        let base = auc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| 2.0 * s + 1.0).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert_eq!(auc(&affine, &labels).unwrap(), base);
        prop_assert_eq!(auc(&exp, &labels).unwrap(), base);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert!((trapezoid(&roc_points(&scores, &labels).unwrap()) - base).abs() < 1e-12);
    }

    #[test]
    fn augmentation_keeps_shape_and_range(h in 8usize..24, w in 8usize..24, seed in any::<u64>(), noise in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::new(&[1, h, w], (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap();
        let policy = AugmentationPolicy { gaussian_noise: noise, ..AugmentationPolicy::default() };
        let out = augment(&image, &policy, &mut rng).unwrap();
        prop_assert_eq!(out.shape(), image.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = augment(&image, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(again, out);
    }

    #[test]
    fn lesion_codec_ignores_token_order(picks in subsequence((0..14).collect::<Vec<usize>>(), 1..6), seed in any::<u64>(), extra in 14usize..40) {
        use rand::seq::SliceRandom;
        let vocab = DescriptorVocabulary::default_classes();
        let tokens: Vec<&str> = picks.iter().map(|&p| vocab.token(p).unwrap()).collect();
        let mut shuffled = tokens.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        shuffled.push(tokens[0]);
        let a = encode_lesion(&tokens, &vocab, extra).unwrap();
        prop_assert_eq!(&a, &encode_lesion(&shuffled, &vocab, extra).unwrap());
        prop_assert_eq!(a.set_positions(), picks.clone());
        prop_assert!(a.bits()[14..].iter().all(|&b| b == 0));
        let decoded = a.decode(&vocab);
        prop_assert_eq!(&encode_lesion(&decoded, &vocab, extra).unwrap(), &a);
    }

    #[test]
    fn metadata_csv_round_trips(cases in prop::collection::vec((prop::collection::vec(subsequence((0..14).collect::<Vec<usize>>(), 1..4), 1..4), 0u8..2), 1..12)) {
        let vocab = DescriptorVocabulary::default_classes();
        let records: Vec<CaseRecord> = cases
            .iter()
            .enumerate()
            .map(|(i, (lesions, label))| CaseRecord {
                case_id: format!("c{i}"),
                cc_image: format!("img/c{i}_CC.pgm").into(),
                mlo_image: format!("img/c{i}_MLO.pgm").into(),
                lesions: lesions
                    .iter()
                    .map(|ps| ps.iter().map(|&p| vocab.token(p).unwrap().to_string()).collect())
                    .collect(),
                label: *label,
            })
            .collect();
        let parsed = parse_metadata_csv(&metadata_csv_string(&records), &vocab).unwrap();
        prop_assert_eq!(parsed.len(), records.len());
        for r in &records {
            let p = parsed.iter().find(|p| p.case_id == r.case_id).unwrap();
            prop_assert_eq!(p.label, r.label);
            prop_assert_eq!(&p.cc_image, &r.cc_image);
            prop_assert_eq!(&p.mlo_image, &r.mlo_image);
            let want = encode_case(&r.lesions, &vocab, 14).unwrap();
            let got = encode_case(&p.lesions, &vocab, 14).unwrap();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn lesion_order_does_not_change_the_canonical_set(picks in prop::collection::vec(subsequence((0..14).collect::<Vec<usize>>(), 1..4), 1..5), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let vocab = DescriptorVocabulary::default_classes();
        let lesions: Vec<Vec<&str>> = picks.iter().map(|ps| ps.iter().map(|&p| vocab.token(p).unwrap()).collect()).collect();
        let mut shuffled = lesions.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = encode_case(&lesions, &vocab, 16).unwrap();
        let b = encode_case(&shuffled, &vocab, 16).unwrap();
        prop_assert_eq!(a.count(), lesions.len());
        prop_assert_eq!(a.canonical(), b.canonical());
        prop_assert_eq!(a.canonical().to_tensor(), b.canonical().to_tensor());
    }
}
