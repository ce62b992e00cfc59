mod common;

use common::{layer_cases, mini_arch, off_kink, random};
use fedprint::models::Model;
use fedprint::nn::gradcheck::{grad_check, GradCheckConfig};
use fedprint::nn::{param_count, Layer, LayerKind, Mode, NamedTensors, Tensor};
use fedprint::seed;

#[test]
fn every_layer_kind_passes_across_seeds_and_shapes() {
    for (label, kind, shapes) in layer_cases() {
        for shape in &shapes {
            for s in 0..5 {
                let mut layer = Layer::<f64>::new(label, kind.clone(), &mut seed::rng(s, "init", &[]));
                // non-trivial affine parameters for batchnorm
                if let Some(g) = layer.params.get_mut("weight").filter(|_| label == "batchnorm") {
                    *g = random(g.shape(), s + 100).map(|v| 1.0 + 0.5 * v);
                }
                if let Some(b) = layer.params.get_mut("bias").filter(|_| label == "batchnorm") {
                    *b = random(b.shape(), s + 200);
                }
                let x = random(shape, s);
                let cfg = GradCheckConfig { seed: s, ..Default::default() };
                let report = grad_check(&mut layer, &x, &cfg).unwrap();
                assert!(report.passed(), "{label} {shape:?} seed {s}:\n{report}");
            }
        }
    }
}

#[test]
fn relu_is_exact_away_from_the_kink() {
    for s in 0..5 {
        for shape in [vec![3, 2, 3, 4], vec![5, 7]] {
            let mut layer = Layer::<f64>::new("relu", LayerKind::Relu, &mut seed::rng(s, "init", &[]));
            let cfg = GradCheckConfig { tolerance: 1e-6, seed: s, ..Default::default() };
            let report = grad_check(&mut layer, &off_kink(&shape, s), &cfg).unwrap();
            assert!(report.passed(), "{report}");
        }
    }
}

#[test]
fn linear_gradients_match_outer_product_and_finite_differences() {
    let mut layer = Layer::<f64>::new("fc", LayerKind::linear(5, 1), &mut seed::rng(3, "init", &[]));
    let x = random(&[1, 5], 4);
    let (_, cache) = layer.forward(&[&x], Mode::Train).unwrap();
    let dy = Tensor::new(vec![1, 1], vec![0.7]).unwrap();
    let (dx, grads) = layer.backward(&cache, &dy).unwrap();
    for j in 0..5 {
        assert!((grads["weight"].data()[j] - 0.7 * x.data()[j]).abs() < 1e-15);
        assert!((dx[0].data()[j] - 0.7 * layer.params["weight"].data()[j]).abs() < 1e-15);
    }
    assert_eq!(grads["bias"].data(), &[0.7]);
    let cfg = GradCheckConfig { tolerance: 1e-7, step: 1e-6, ..Default::default() };
    let report = grad_check(&mut layer, &x, &cfg).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn batchnorm_small_batch_matches_finite_differences() {
    let mut layer = Layer::<f64>::new("bn", LayerKind::batchnorm(1), &mut seed::rng(0, "init", &[]));
    layer.params.insert("weight".into(), Tensor::new(vec![1], vec![1.3]).unwrap());
    layer.params.insert("bias".into(), Tensor::new(vec![1], vec![-0.2]).unwrap());
    let x = random(&[2, 1, 1, 4], 9);
    let cfg = GradCheckConfig { tolerance: 1e-6, ..Default::default() };
    let report = grad_check(&mut layer, &x, &cfg).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn miniature_proposed_network_passes() {
    for s in 0..5 {
        let mut model = Model::<f64>::build(&mini_arch(), s).unwrap();
        let x = random(&[2, 1, 3, 32], s + 10);
        let cfg = GradCheckConfig { seed: s, ..Default::default() };
        let report = grad_check(&mut model, &x, &cfg).unwrap();
        assert!(report.passed(), "seed {s}:\n{report}");
        // crossings must stay rare; each one already agreed at the finer step
        let kinks: usize = report.entries.iter().map(|e| e.nonsmooth).sum();
        let checked: usize = report.entries.iter().map(|e| e.elements).sum();
        assert!(kinks * 100 <= checked, "seed {s}: {kinks} kink crossings\n{report}");
    }
}

#[test]
fn parameter_counts() {
    let fc = Layer::<f64>::new("fc", LayerKind::linear(130, 64), &mut seed::rng(0, "init", &[]));
    assert_eq!(param_count(&fc.params), 130 * 64 + 64);
    assert_eq!(param_count(&NamedTensors::<f64>::new()), 0);
    let bn = Layer::<f64>::new("bn", LayerKind::batchnorm(8), &mut seed::rng(0, "init", &[]));
    // running statistics are buffers, not parameters
    assert_eq!(param_count(&bn.params), 16);
}

