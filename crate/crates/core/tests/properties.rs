use std::sync::Arc;

use fedprint::dataset::{featurize, partition_clients, Example, ExampleId};
use fedprint::eval::{evaluate_embeddings, predict, EvalMeta};
use fedprint::fed::aggregate;
use fedprint::metric::{compute_centroids, triplet_loss, Centroids, Triplet};
use fedprint::models::{Arch, BaselineConfig, BaselineKind, Model};
use fedprint::nn::{Conv2dSpec, Layer, LayerKind, Mode, NamedTensors, OptimizerState, Tensor};
use fedprint::seed;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn cfg() -> ProptestConfig {
    ProptestConfig::with_cases(64)
}

fn random(shape: &[usize], s: u64, scale: f64) -> Tensor {
    let mut r = seed::rng(s, "prop-input", &[]);
    Tensor::from_fn(shape, |_| scale * r.random_range(-1.0..1.0))
}

fn example(i: usize, label: usize) -> Example {
    Example {
        x: vec![i as f64; 3],
        width: 1,
        label,
        id: ExampleId {
            condition: Arc::from("c"),
            device: label,
            window: i,
        },
        normalized: true,
    }
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn sgd_step_is_linear_in_learning_rate(s in 0u64..1000, lr1 in 1e-4f64..1.0, lr2 in 1e-4f64..1.0) {
        let start: NamedTensors<f64> = [("w".to_string(), random(&[3, 4], s, 1.0))].into_iter().collect();
        let grads: NamedTensors<f64> = [("w".to_string(), random(&[3, 4], s + 1, 1.0))].into_iter().collect();
        let mut a = start.clone();
        let mut b = start.clone();
        OptimizerState::sgd(lr1).unwrap().step(&mut a, &grads).unwrap();
        OptimizerState::sgd(lr2).unwrap().step(&mut b, &grads).unwrap();
        for ((w0, wa), wb) in start["w"].data().iter().zip(a["w"].data()).zip(b["w"].data()) {
            prop_assert!(((w0 - wa) / lr1 - (w0 - wb) / lr2).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_forward_is_pure(s in 0u64..1000) {
        let arch = Arch::Baseline(BaselineConfig { width: 16, ..BaselineConfig::new(BaselineKind::Resnet) });
        let mut m = Model::<f64>::build(&arch, s).unwrap();
        m.forward(&random(&[4, 1, 3, 16], s, 1.0), Mode::Train).unwrap();
        let before = m.params();
        let x = random(&[3, 1, 3, 16], s + 7, 1.0);
        let (y1, _) = m.forward(&x, Mode::Eval).unwrap();
        let (y2, _) = m.forward(&x, Mode::Eval).unwrap();
        prop_assert_eq!(y1, y2);
        prop_assert_eq!(m.params(), before);
    }

    #[test]
    fn same_padding_preserves_extent(half in 0usize..4, h in 1usize..20, w in 1usize..40) {
        let k = 2 * half + 1;
        let spec = Conv2dSpec::new(1, 1, (k, k)).padding((half, half));
        prop_assert_eq!(spec.output_hw(h, w), Some((h, w)));
    }

    #[test]
    fn batchnorm_training_output_is_standardized(s in 0u64..1000, shift in -3.0f64..3.0, spread in 8.0f64..50.0) {
        let mut bn = Layer::<f64>::new("bn", LayerKind::batchnorm(2), &mut seed::rng(s, "init", &[]));
        bn.params.insert("bias".into(), Tensor::full(&[2], shift));
        // output variance is var / (var + eps); spread >= 8 keeps var above 20
        let x = random(&[6, 2, 3, 5], s, spread).map(|v| v + 17.0);
        let (y, _) = bn.forward(&[&x], Mode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..6)
                .flat_map(|n| y.data()[(n * 2 + c) * 15..(n * 2 + c + 1) * 15].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!((mean - shift).abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn modulus_row_matches_components(v in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..64)) {
        let window: Vec<Complex64> = v.iter().map(|&(re, im)| Complex64::new(re, im)).collect();
        let x = featurize(&window);
        let n = window.len();
        for j in 0..n {
            prop_assert!((x[2 * n + j].powi(2) - (x[j].powi(2) + x[n + j].powi(2))).abs() < 1e-9);
        }
    }

    #[test]
    fn partition_depends_only_on_positions(n in 1usize..80, m in 1usize..12, s in 0u64..1000) {
        let base: Vec<Example> = (0..n).map(|i| example(i, i % 4)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut seed::rng(s, "perm", &[]));
        let permuted: Vec<Example> = perm.iter().map(|&i| base[i].clone()).collect();

        let a = partition_clients(base.clone(), m, s).unwrap();
        prop_assert_eq!(&a, &partition_clients(base.clone(), m, s).unwrap());
        let b = partition_clients(permuted, m, s).unwrap();
        prop_assert_eq!(a.len(), m);
        let sizes: Vec<usize> = a.iter().map(|c| c.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        // client k of the permuted input holds perm applied to client k's positions
        for (ca, cb) in a.iter().zip(&b) {
            let mapped: Vec<usize> = ca.examples.iter().map(|e| perm[e.id.window]).collect();
            let got: Vec<usize> = cb.examples.iter().map(|e| e.id.window).collect();
            prop_assert_eq!(mapped, got);
        }
    }

    #[test]
    fn triplet_loss_is_nonnegative_and_rotation_invariant(s in 0u64..1000, angle in 0.0f64..std::f64::consts::TAU, margin in 0.0f64..2.0) {
        let emb = random(&[6, 4], s, 2.0);
        let triplets = vec![
            Triplet { anchor: 0, positive: 1, negative: 2 },
            Triplet { anchor: 3, positive: 4, negative: 5 },
            Triplet { anchor: 1, positive: 0, negative: 5 },
        ];
        let loss = triplet_loss(&emb, &triplets, margin).unwrap();
        prop_assert!(loss >= 0.0);
        // rotate the (0, 2) plane of every embedding
        let (c, sn) = (angle.cos(), angle.sin());
        let mut rot = emb.clone();
        for i in 0..6 {
            let r = &mut rot.data_mut()[i * 4..(i + 1) * 4];
            let (u, v) = (r[0], r[2]);
            r[0] = c * u - sn * v;
            r[2] = sn * u + c * v;
        }
        prop_assert!((triplet_loss(&rot, &triplets, margin).unwrap() - loss).abs() < 1e-9);
    }

    #[test]
    fn satisfied_margins_give_zero_loss(s in 0u64..1000, margin in 0.0f64..2.0) {
        let mut emb = random(&[3, 5], s, 0.1);
        // negative pushed far beyond the margin
        emb.data_mut()[10..15].iter_mut().for_each(|v| *v += 10.0);
        let t = [Triplet { anchor: 0, positive: 1, negative: 2 }];
        prop_assert_eq!(triplet_loss(&emb, &t, margin).unwrap(), 0.0);
    }

    #[test]
    fn aggregation_ignores_model_order(s in 0u64..1000) {
        let arch = Arch::Baseline(BaselineConfig { width: 8, hidden: 5, ..BaselineConfig::new(BaselineKind::Mlp) });
        let ms: Vec<_> = (0..3).map(|k| Model::<f64>::build(&arch, s * 3 + k).unwrap().params()).collect();
        let a = aggregate(&[&ms[0], &ms[1], &ms[2]]).unwrap();
        let b = aggregate(&[&ms[2], &ms[0], &ms[1]]).unwrap();
        for (x, y) in a.params.values().zip(b.params.values()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prediction_is_translation_invariant(s in 0u64..1000, shift in proptest::collection::vec(-5.0f64..5.0, 4)) {
        let mut r = seed::rng(s, "centroids", &[]);
        let vectors: Vec<Option<Vec<f64>>> =
            (0..4).map(|_| Some((0..4).map(|_| r.random_range(-1.0..1.0)).collect())).collect();
        let e: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let dists: Vec<f64> = vectors.iter().flatten()
            .map(|c| c.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let mut sorted = dists.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted[1] - sorted[0] > 1e-9);
        let plain = Centroids { vectors: vectors.clone(), counts: vec![1; 4] };
        let moved = Centroids {
            vectors: vectors.iter().flatten()
                .map(|c| Some(c.iter().zip(&shift).map(|(a, b)| a + b).collect()))
                .collect(),
            counts: vec![1; 4],
        };
        let e2: Vec<f64> = e.iter().zip(&shift).map(|(a, b)| a + b).collect();
        prop_assert_eq!(predict(&plain, &e), predict(&moved, &e2));
    }

    #[test]
    fn evaluation_ignores_example_order(s in 0u64..1000) {
        let emb = random(&[12, 3], s, 1.0);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let centroids = compute_centroids(&emb, &labels, 3).unwrap();
        let a = evaluate_embeddings(&emb, &labels, &centroids, EvalMeta::default()).unwrap();

        let mut order: Vec<usize> = (0..12).collect();
        order.shuffle(&mut seed::rng(s, "order", &[]));
        let rows: Vec<Tensor> = order.iter().map(|&i| emb.slice_rows(i, 1).unwrap()).collect();
        let shuffled = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>()).unwrap();
        let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let b = evaluate_embeddings(&shuffled, &l2, &centroids, EvalMeta::default()).unwrap();
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert_eq!(a.confusion, b.confusion);
    }
}
