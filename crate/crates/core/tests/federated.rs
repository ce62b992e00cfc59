use std::sync::Arc;

use fedprint::dataset::{batch_tensor, ClientDataset, Example, ExampleId};
use fedprint::fed::{self, aggregate, local_train, mta_adapt, AdaptConfig, FedConfig, STAGE_TRAIN};
use fedprint::metric::{triplet_loss, triplet_loss_backward, triplet_slack, Triplet};
use fedprint::models::{Arch, BaselineConfig, BaselineKind, Model, ModelParams};
use fedprint::nn::loss::cross_entropy;
use fedprint::nn::{Mode, OptimizerKind, Tensor};
use fedprint::seed;
use rand::Rng;

const WIDTH: usize = 8;

fn mlp_arch() -> Arch {
    Arch::Baseline(BaselineConfig {
        width: WIDTH,
        hidden: 6,
        ..BaselineConfig::new(BaselineKind::Mlp)
    })
}

fn init(s: u64) -> ModelParams {
    Model::<f64>::build(&mlp_arch(), s).unwrap().params()
}

/// Four noisy classes around distinct means.
fn examples(n: usize, s: u64) -> Vec<Example> {
    let mut r = seed::rng(s, "examples", &[]);
    (0..n)
        .map(|i| {
            let label = i % 4;
            Example {
                x: (0..3 * WIDTH)
                    .map(|j| if j % 4 == label { 1.0 } else { 0.0 } + 0.3 * r.random_range(-1.0..1.0))
                    .collect(),
                width: WIDTH,
                label,
                id: ExampleId {
                    condition: Arc::from("day1"),
                    device: label,
                    window: i,
                },
                normalized: true,
            }
        })
        .collect()
}

fn client(id: usize, examples: Vec<Example>) -> ClientDataset {
    ClientDataset { id, examples }
}

fn sgd(lr: f64) -> FedConfig {
    FedConfig {
        optimizer: OptimizerKind::Sgd,
        lr,
        local_epochs: 1,
        batch_size: 64,
        rounds: 1,
        fraction: 1.0,
        seed: 11,
        ..FedConfig::default()
    }
}

fn max_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.params
        .values()
        .zip(b.params.values())
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn triplet_gradient_matches_finite_differences() {
    let mut r = seed::rng(4, "emb", &[]);
    let emb = Tensor::from_fn(&[5, 3], |_| r.random_range(-1.0..1.0));
    let triplets = [
        Triplet { anchor: 0, positive: 1, negative: 2 },
        Triplet { anchor: 3, positive: 4, negative: 0 },
        Triplet { anchor: 2, positive: 3, negative: 1 },
    ];
    let margin = 1.5;
    for t in &triplets {
        assert!(triplet_slack(&emb, t, margin).abs() > 1e-3, "slack too close to the hinge");
    }
    let g = triplet_loss_backward(&emb, &triplets, margin).unwrap();
    let h = 1e-6;
    for i in 0..emb.len() {
        let mut up = emb.clone();
        let mut down = emb.clone();
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        let fd = (triplet_loss(&up, &triplets, margin).unwrap() - triplet_loss(&down, &triplets, margin).unwrap())
            / (2.0 * h);
        assert!((fd - g.data()[i]).abs() < 1e-6, "element {i}: fd {fd} vs {}", g.data()[i]);
    }
}

#[test]
fn single_sgd_step_matches_hand_update() {
    let w = init(1);
    let data = examples(12, 2);
    let cfg = sgd(0.05);
    let out = local_train(&w, &client(0, data.clone()), &cfg, STAGE_TRAIN, 0).unwrap();
    assert_eq!(out.steps, 1);

    let mut m = Model::from_params(&w).unwrap();
    let x = batch_tensor::<f64>(&data.iter().collect::<Vec<_>>()).unwrap();
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let (logits, cache) = m.forward(&x, Mode::Train).unwrap();
    let (_, dlogits) = cross_entropy(&logits, &labels).unwrap();
    let (_, grads) = m.backward(&cache, &dlogits).unwrap();
    let mut expected = w.clone();
    for (name, p) in expected.params.iter_mut() {
        p.data_mut()
            .iter_mut()
            .zip(grads[name].data())
            .for_each(|(v, g)| *v -= 0.05 * g);
    }
    assert!(max_diff(&out.params, &expected) < 1e-12);
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let w = init(3);
    let cfg = FedConfig { local_epochs: 0, ..sgd(0.1) };
    let out = local_train(&w, &client(0, examples(20, 1)), &cfg, STAGE_TRAIN, 0).unwrap();
    assert_eq!(out.params, w);
    assert_eq!(out.steps, 0);
}

#[test]
fn tiny_clients_are_skipped() {
    let w = init(3);
    let out = local_train(&w, &client(0, examples(1, 1)), &sgd(0.1), STAGE_TRAIN, 0).unwrap();
    assert!(out.skipped());
    assert_eq!(out.params, w);
}

#[test]
fn local_loss_mostly_decreases_over_epochs() {
    let cfg = FedConfig {
        local_epochs: 10,
        batch_size: 10,
        optimizer: OptimizerKind::Adam,
        lr: 1e-2,
        ..sgd(0.0)
    };
    let out = local_train(&init(5), &client(0, examples(40, 5)), &cfg, STAGE_TRAIN, 0).unwrap();
    assert_eq!(out.epoch_losses.len(), 10);
    let drops = out.epoch_losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(drops >= 8, "{:?}", out.epoch_losses);
}

#[test]
fn local_training_does_not_touch_the_global_model() {
    let w = init(6);
    let before = w.checksum();
    local_train(&w, &client(0, examples(20, 1)), &sgd(0.1), STAGE_TRAIN, 0).unwrap();
    assert_eq!(w.checksum(), before);
}

#[test]
fn aggregate_matches_elementwise_mean() {
    let ms = [init(7), init(8), init(9)];
    let avg = aggregate(&[&ms[0], &ms[1], &ms[2]]).unwrap();
    for (name, t) in &avg.params {
        for (i, v) in t.data().iter().enumerate() {
            let want = (ms[0].params[name].data()[i] + ms[1].params[name].data()[i] + ms[2].params[name].data()[i]) / 3.0;
            assert!((v - want).abs() < 1e-15);
        }
    }
}

#[test]
fn single_client_federation_is_sequential_training() {
    let data = client(0, examples(30, 3));
    let cfg = FedConfig {
        rounds: 3,
        local_epochs: 2,
        batch_size: 5,
        optimizer: OptimizerKind::Adam,
        lr: 1e-2,
        ..sgd(0.0)
    };
    let (fedw, logs) = fed::train(init(2), std::slice::from_ref(&data), &cfg, STAGE_TRAIN, None).unwrap();
    assert_eq!(logs.len(), 3);
    let mut w = init(2);
    for round in 0..3 {
        w = local_train(&w, &data, &cfg, STAGE_TRAIN, round).unwrap().params;
    }
    assert_eq!(fedw.checksum(), w.checksum());
}

#[test]
fn identical_clients_average_to_one_update() {
    let data = examples(16, 4);
    let clients = [client(0, data.clone()), client(1, data.clone())];
    let cfg = sgd(0.05);
    let (fedw, logs) = fed::train(init(1), &clients, &cfg, STAGE_TRAIN, None).unwrap();
    assert_eq!(logs.len(), 1);
    assert_eq!(logs[0].selected, vec![0, 1]);
    // one full batch per client, so shuffling only reorders the sum
    let single = local_train(&init(1), &clients[0], &cfg, STAGE_TRAIN, 0).unwrap().params;
    assert!(max_diff(&fedw, &single) < 1e-12);
}

#[test]
fn training_is_reproducible_and_logs_every_round() {
    let clients: Vec<ClientDataset> = examples(60, 8)
        .chunks(10)
        .enumerate()
        .map(|(i, c)| client(i, c.to_vec()))
        .collect();
    let cfg = FedConfig {
        rounds: 4,
        fraction: 0.5,
        local_epochs: 1,
        batch_size: 5,
        lr: 1e-2,
        seed: 21,
        ..FedConfig::default()
    };
    let (a, la) = fed::train(init(0), &clients, &cfg, STAGE_TRAIN, None).unwrap();
    let (b, lb) = fed::train(init(0), &clients, &cfg, STAGE_TRAIN, None).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(la, lb);
    assert_eq!(la.len(), 4);
    assert!(la.iter().all(|l| l.selected.len() == 3));
}

#[test]
fn adaptation_without_rounds_or_data_is_the_identity() {
    let w = init(0);
    let data = examples(20, 0);
    let cfg = AdaptConfig::new(sgd(0.1), 4);
    assert_eq!(mta_adapt(&w, &[], &cfg).unwrap().0, w);
    let none = AdaptConfig { rounds: 0, ..cfg.clone() };
    assert_eq!(mta_adapt(&w, &data, &none).unwrap().0, w);
    let (moved, logs) = mta_adapt(&w, &data, &cfg).unwrap();
    assert_eq!(logs.len(), 5);
    assert_ne!(moved, w);
}
