//! Helpers shared by the gradient tests and the acceptance harness.
#![allow(dead_code)]

use fedprint::models::{Arch, DenseNetConfig};
use fedprint::nn::{Conv2dSpec, LayerKind, Tensor};
use fedprint::seed;
use rand::Rng;

pub fn random(shape: &[usize], s: u64) -> Tensor {
    let mut r = seed::rng(s, "test-input", &[]);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Values bounded away from zero so relu stays off its kink.
pub fn off_kink(shape: &[usize], s: u64) -> Tensor {
    let mut r = seed::rng(s, "test-input", &[]);
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.05..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn layer_cases() -> Vec<(&'static str, LayerKind, [Vec<usize>; 2])> {
    vec![
        (
            "conv",
            LayerKind::Conv2d(Conv2dSpec::new(2, 3, (3, 3)).padding((1, 1))),
            [vec![2, 2, 3, 8], vec![1, 2, 4, 5]],
        ),
        (
            "conv-strided-bias",
            LayerKind::Conv2d(Conv2dSpec::new(1, 2, (3, 3)).stride((1, 2)).padding((1, 1)).with_bias()),
            [vec![3, 1, 3, 6], vec![2, 1, 3, 9]],
        ),
        ("conv-1x1", LayerKind::Conv2d(Conv2dSpec::new(3, 2, (1, 1))), [vec![2, 3, 3, 4], vec![1, 3, 2, 7]]),
        ("batchnorm", LayerKind::batchnorm(3), [vec![4, 3, 3, 5], vec![2, 3, 1, 6]]),
        ("linear", LayerKind::linear(6, 3), [vec![4, 6], vec![1, 6]]),
        ("concat", LayerKind::Concat, [vec![2, 2, 3, 4], vec![1, 3, 2, 5]]),
        ("avgpool", LayerKind::avgpool((1, 2)), [vec![2, 2, 3, 8], vec![1, 3, 3, 6]]),
        ("global-avgpool", LayerKind::GlobalAvgPool, [vec![2, 3, 3, 4], vec![3, 2, 1, 5]]),
    ]
}

pub fn mini_arch() -> Arch {
    Arch::Proposed(DenseNetConfig {
        blocks: 1,
        layers_per_block: 2,
        width: 32,
        ..DenseNetConfig::default()
    })
}
