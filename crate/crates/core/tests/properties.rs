//! Property tests for the invariants of each module.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use generality::datasets::{
    batches, make_synthetic, partition_by_classes, read_idx_images, subsample_per_class, DatasetBundle, Family, Split,
    SyntheticSizes,
};
use generality::kernels;
use generality::network::{apply_obstination, LayerSpec, Network, NetworkSpec};
use generality::optim::{lr_at, momentum_coefficient, train, update_param, EarlyStop, OptimConfig, Schedule};
use generality::seeds;
use generality::tensor::Tensor;
use generality::transfer::{dataset_generality, GeneralityRecord};

fn bundle(per_class: &[usize], seed: u64) -> DatasetBundle {
    let mut labels = Vec::new();
    for (c, &n) in per_class.iter().enumerate() {
        labels.extend(std::iter::repeat_n(c, n));
    }
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = Tensor::<f32>::uniform(vec![n * 4], 0.0, 1.0, &mut rng).into_data();
    let split = Split::new([1, 2, 2], pixels, labels).unwrap();
    DatasetBundle {
        name: "toy".into(),
        class_names: (0..per_class.len()).map(|c| format!("c{c}")).collect(),
        train: split.clone(),
        valid: split.clone(),
        test: split,
        provenance: vec![],
    }
}

/// Multiset of `(pixels, original label)` per split, keyed by sample bits.
fn samples(split: &Split, labels: &[usize]) -> Vec<(Vec<u32>, usize)> {
    let mut v: Vec<(Vec<u32>, usize)> = (0..split.len())
        .map(|i| {
            (
                split.image(i).iter().map(|p| p.to_bits()).collect(),
                labels[split.label(i)],
            )
        })
        .collect();
    v.sort();
    v
}

fn layer_strategy() -> impl Strategy<Value = Vec<LayerSpec>> {
    // conv(+bn) blocks then dense(+bn) blocks; every spatial size stays valid
    // on a 12x12 input.
    (1usize..=2, any::<bool>(), 0usize..=2, any::<bool>()).prop_map(|(convs, conv_bn, denses, dense_bn)| {
        let mut layers = Vec::new();
        for _ in 0..convs {
            layers.push(LayerSpec::Conv { kernels: 2, size: 3 });
            if conv_bn {
                layers.push(LayerSpec::Batchnorm);
            }
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Maxpool);
        for _ in 0..denses {
            layers.push(LayerSpec::Dense { width: 5 });
            if dense_bn {
                layers.push(LayerSpec::Batchnorm);
            }
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dropout { keep_prob: 0.5 });
        layers.push(LayerSpec::SoftmaxClassifier);
        layers
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), b in 1usize..6, c in 2usize..12, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::<f64>::uniform(vec![b, c], -scale, scale, &mut rng);
        let labels: Vec<usize> = (0..b).map(|i| (i * 7 + seed as usize) % c).collect();
        let (loss, probs) = kernels::softmax_xent(&logits, &labels).unwrap();
        prop_assert!(loss >= 0.0);
        for row in probs.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn conv2d_f32_close_to_f64(seed in any::<u64>(), c in 1usize..3, h in 5usize..10, r in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::uniform(vec![2, c, h, h], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(vec![3, c, r, r], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(vec![3], -1.0, 1.0, &mut rng);
        let exact = kernels::conv2d(&x, &k, &b).unwrap();
        let single = kernels::conv2d(&x.cast::<f32>(), &k.cast::<f32>(), &b.cast::<f32>()).unwrap();
        for (a, s) in exact.data().iter().zip(single.data()) {
            prop_assert!((a - *s as f64).abs() <= 1e-5);
        }
    }

    #[test]
    fn kernels_are_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::uniform(vec![2, 2, 6, 6], -1.0, 1.0, &mut rng);
        let k = Tensor::<f32>::uniform(vec![3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::zeros(vec![3]);
        prop_assert!(kernels::conv2d(&x, &k, &b).unwrap().bitwise_eq(&kernels::conv2d(&x, &k, &b).unwrap()));
        let mut c1 = kernels::KernelContext::train(seed);
        let mut c2 = kernels::KernelContext::train(seed);
        let d1 = kernels::dropout(&x, 0.5, &mut c1).unwrap().0;
        let d2 = kernels::dropout(&x, 0.5, &mut c2).unwrap().0;
        prop_assert!(d1.bitwise_eq(&d2));
    }

    #[test]
    fn build_is_pure_in_spec_and_seed(layers in layer_strategy(), seed in any::<u64>()) {
        let spec = NetworkSpec::custom(layers, 4, [1, 12, 12]);
        let a = Network::<f32>::build(spec.clone(), seed).unwrap();
        let b = Network::<f32>::build(spec.clone(), seed).unwrap();
        prop_assert_eq!(&a, &b);
        let c = Network::<f32>::build(spec, seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(&a, &c);
    }

    #[test]
    fn trainable_units_form_a_suffix(layers in layer_strategy(), k_frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let spec = NetworkSpec::custom(layers, 4, [1, 12, 12]);
        let base = Network::<f32>::build(spec, seed).unwrap();
        let n = base.freezable_count();
        let k = (k_frac * n as f64).round() as usize;
        let mut net = base.clone();
        apply_obstination(&mut net, k, 3, seeds::derive(seed, "reinit")).unwrap();
        // Per unit: frozen exactly when unit < n - k.
        for (i, unit) in net.units().iter().enumerate() {
            if let Some(u) = unit {
                prop_assert_eq!(net.is_frozen(i), *u < n - k, "layer {}", i);
            }
        }
        let mask: Vec<bool> = (0..net.layers().len()).filter(|&i| net.units()[i].is_some()).map(|i| net.is_frozen(i)).collect();
        prop_assert!(mask.windows(2).all(|w| w[0] || !w[1]), "frozen layers after a trainable one: {:?}", mask);
        let ci = net.classifier_index();
        prop_assert!(!net.is_frozen(ci));
        prop_assert_ne!(&net.layers()[ci], &base.layers()[ci]);
        prop_assert!(apply_obstination(&mut base.clone(), n + 1, 3, 0).is_err());
    }

    #[test]
    fn momentum_ramp_monotone_and_bounded(lo in 0.0f64..0.9, span in 0.0f64..0.1, ramp in 0usize..200, e in 0usize..400) {
        let cfg = OptimConfig { momentum_range: [lo, lo + span], momentum_ramp_epochs: ramp, ..OptimConfig::default() };
        let (a, b) = (momentum_coefficient(e, &cfg), momentum_coefficient(e + 1, &cfg));
        prop_assert!(a <= b);
        prop_assert!(lo <= a && b <= lo + span + 1e-15);
    }

    #[test]
    fn lr_non_increasing(gamma in 0.5f64..1.0, delta in 0.0f64..0.001, lr0 in 1e-4f64..0.1, e in 0usize..500) {
        for schedule in [Schedule::Multiplicative { gamma }, Schedule::Subtractive { delta }] {
            let cfg = OptimConfig { lr0, schedule, ..OptimConfig::default() };
            let (a, b) = (lr_at(e, &cfg), lr_at(e + 1, &cfg));
            prop_assert!(b <= a, "{} -> {}", a, b);
            prop_assert!(b > 0.0);
        }
    }

    #[test]
    fn two_steps_match_closed_form(theta0 in -2.0f64..2.0, g1 in -1.0f64..1.0, g2 in -1.0f64..1.0, lr in 1e-4f64..0.1, m in 0.0f64..0.99) {
        let cfg = OptimConfig { l1: 0.0, l2: 0.0, ..OptimConfig::default() };
        let (rho, eps) = (cfg.rho, cfg.eps);
        let (mut theta, mut acc, mut vel) = ([theta0], [0.0f64], [0.0f64]);
        update_param(&mut theta, &[g1], &mut acc, &mut vel, &cfg, lr, m);
        update_param(&mut theta, &[g2], &mut acc, &mut vel, &cfg, lr, m);
        let a1 = (1.0 - rho) * g1 * g1;
        let v1 = -lr * g1 / (a1 + eps).sqrt();
        let a2 = rho * a1 + (1.0 - rho) * g2 * g2;
        let v2 = m * v1 - lr * g2 / (a2 + eps).sqrt();
        let expect = theta0 + v1 + v2;
        prop_assert!((theta[0] - expect).abs() <= 1e-12, "{} vs {}", theta[0], expect);
    }

    #[test]
    fn partition_preserves_samples(counts in prop::collection::vec(1usize..6, 2..7), pick in any::<u64>(), seed in any::<u64>()) {
        let b = bundle(&counts, seed);
        let k = counts.len();
        let mut a: Vec<usize> = (0..k).filter(|c| (pick >> c) & 1 == 1).collect();
        if a.is_empty() { a.push(0); }
        if a.len() == k { a.pop(); }
        let rest: Vec<usize> = (0..k).filter(|c| !a.contains(c)).collect();
        let (pa, pb) = partition_by_classes(&b, &a).unwrap();
        prop_assert_eq!(pa.num_classes(), a.len());
        prop_assert_eq!(pb.num_classes(), rest.len());
        let ident: Vec<usize> = (0..k).collect();
        for (whole, part_a, part_b) in [(&b.train, &pa.train, &pb.train), (&b.test, &pa.test, &pb.test)] {
            let mut union = samples(part_a, &a);
            union.extend(samples(part_b, &rest));
            union.sort();
            prop_assert_eq!(union, samples(whole, &ident));
        }
    }

    #[test]
    fn subsample_is_balanced(counts in prop::collection::vec(3usize..9, 2..6), p in 1usize..4, seed in any::<u64>()) {
        let b = bundle(&counts, 7);
        let s = subsample_per_class(&b, p, seed).unwrap();
        prop_assert!(s.train.class_counts(counts.len()).iter().all(|&c| c == p));
        prop_assert_eq!(s.test.len(), b.test.len());
        prop_assert_eq!(&s, &subsample_per_class(&b, p, seed).unwrap());
        prop_assert!(subsample_per_class(&b, 10, seed).is_err());
    }

    #[test]
    fn batches_partition_indices(len in 0usize..200, bs in 1usize..64, seed in any::<u64>()) {
        let bt = batches(len, bs, seed).unwrap();
        let mut all: Vec<usize> = bt.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert!(bt.iter().rev().skip(1).all(|b| b.len() == bs));
        prop_assert_eq!(&bt, &batches(len, bs, seed).unwrap());
    }

    #[test]
    fn idx_pixels_in_unit_range(raw in prop::collection::vec(any::<u8>(), 1..8 * 9), seed in any::<u64>()) {
        let n = raw.len() / 9;
        prop_assume!(n > 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("img-{seed}"));
        let mut bytes = vec![0, 0, 8, 3];
        for d in [n as u32, 3, 3] {
            bytes.extend(d.to_be_bytes());
        }
        bytes.extend(&raw[..n * 9]);
        std::fs::write(&path, bytes).unwrap();
        let (shape, px, count) = read_idx_images(&path).unwrap();
        prop_assert_eq!(shape, [1, 3, 3]);
        prop_assert_eq!(count, n);
        for (p, r) in px.iter().zip(&raw) {
            prop_assert!((0.0..=1.0).contains(p));
            prop_assert_eq!(*p, *r as f32 / 255.0);
        }
    }

    #[test]
    fn generality_is_exact_ratio(psi_b in 1e-6f64..1.0, psi_k in 0.0f64..1.0, k in 0usize..6, seed in any::<u64>()) {
        let r = GeneralityRecord::new("a", "b", k, seed, psi_b, psi_k, "d").unwrap();
        prop_assert!(r.is_exact());
        prop_assert_eq!(r.g, psi_k / psi_b);
        prop_assert_eq!(dataset_generality(psi_k, psi_b).unwrap(), r.g);
    }

    #[test]
    fn seed_purposes_are_independent(seed in any::<u64>(), a in "[a-z/0-9]{1,12}", b in "[a-z/0-9]{1,12}") {
        prop_assume!(a != b);
        prop_assert_eq!(seeds::derive(seed, &a), seeds::derive(seed, &a));
        prop_assert_ne!(seeds::derive(seed, &a), seeds::derive(seed, &b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn synthetic_pixels_in_unit_range(family in prop::sample::select(Family::ALL.to_vec()), seed in any::<u64>()) {
        let sizes = SyntheticSizes { train: 20, valid: 10, test: 10 };
        let b = make_synthetic(family, sizes, seed).unwrap();
        prop_assert!(b.train.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert_eq!(b.digest(), make_synthetic(family, sizes, seed).unwrap().digest());
    }

    #[test]
    fn frozen_parameters_survive_training(layers in layer_strategy(), k_frac in 0.0f64..=1.0, seed in 0u64..1000) {
        let sizes = SyntheticSizes { train: 24, valid: 8, test: 8 };
        let data = make_synthetic(Family::Strokes, sizes, seed).unwrap();
        let data = DatasetBundle {
            train: crop(&data.train),
            valid: crop(&data.valid),
            test: crop(&data.test),
            ..data
        };
        let spec = NetworkSpec::custom(layers, 10, [1, 12, 12]);
        let base = Network::<f32>::build(spec, seed).unwrap();
        let k = (k_frac * base.freezable_count() as f64).round() as usize;
        let mut net = base.clone();
        apply_obstination(&mut net, k, 10, seed ^ 1).unwrap();
        let cfg = OptimConfig {
            lr0: 0.01,
            max_epochs: 2,
            batch_size: 8,
            early_stop: EarlyStop { enabled: false, patience: 1 },
            ..OptimConfig::default()
        };
        let (trained, h1) = train(net.clone(), &data, &cfg, seed).unwrap();
        let mut moved = BTreeMap::new();
        for (id, t) in trained.params() {
            let before = net.param(id).unwrap();
            if trained.is_frozen(id.layer) {
                prop_assert!(t.bitwise_eq(before), "frozen {:?} changed", id);
            } else {
                moved.insert(id, !t.bitwise_eq(before));
            }
        }
        prop_assert!(moved.values().any(|&m| m), "nothing trained");
        let (again, h2) = train(net, &data, &cfg, seed).unwrap();
        prop_assert_eq!(h1, h2);
        prop_assert_eq!(trained, again);
    }
}

/// Center 12x12 crop, so the small strategies stay cheap.
fn crop(s: &Split) -> Split {
    let mut px = Vec::with_capacity(s.len() * 144);
    for i in 0..s.len() {
        let img = s.image(i);
        for y in 8..20 {
            px.extend_from_slice(&img[y * 28 + 8..y * 28 + 20]);
        }
    }
    Split::new([1, 12, 12], px, s.labels().to_vec()).unwrap()
}
