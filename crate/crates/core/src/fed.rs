//! Federated training: client selection, local updates, unweighted model
//! averaging, and transfer-then-adapt on a new recording condition.
//!
//! Every random choice is keyed by `(seed, stage, round, client)`, and
//! aggregation sums in ascending client id, so results do not depend on the
//! order in which clients finish.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;

use crate::dataset::{batch_tensor, partition_clients, ClientDataset, Example};
use crate::error::{Error, Result};
use crate::metric::{build_triplets, triplet_loss_with_grad};
use crate::models::{Model, ModelParams};
use crate::nn::loss::cross_entropy;
use crate::nn::{Mode, OptimizerKind, OptimizerState, Real};
use crate::seed;

/// Stage coordinate mixed into local-training seeds.
pub const STAGE_TRAIN: u64 = 0;
pub const STAGE_ADAPT: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub rounds: usize,
    pub fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            fraction: 0.1,
            local_epochs: 10,
            batch_size: 10,
            optimizer: OptimizerKind::Adam,
            lr: 1e-4,
            margin: crate::metric::DEFAULT_MARGIN,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin {} must be non-negative", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub rounds: usize,
    /// Upper bound on the number of adaptation clients.
    pub max_clients: usize,
    /// Local hyperparameters; `rounds` and `fraction` here are ignored.
    pub local: FedConfig,
}

impl AdaptConfig {
    pub fn new(local: FedConfig, max_clients: usize) -> Self {
        Self {
            rounds: 5,
            max_clients,
            local,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Mean local loss per selected client; `None` for skipped clients.
    pub client_losses: Vec<Option<f64>>,
    pub eval_accuracy: Option<f64>,
}

impl RoundLog {
    pub fn mean_loss(&self) -> Option<f64> {
        let l: Vec<f64> = self.client_losses.iter().flatten().copied().collect();
        (!l.is_empty()).then(|| l.iter().sum::<f64>() / l.len() as f64)
    }
}

pub fn round_logs_csv(logs: &[RoundLog]) -> String {
    let mut s = String::from("round,n_selected,mean_local_loss,eval_accuracy\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for l in logs {
        writeln!(
            s,
            "{},{},{},{}",
            l.round,
            l.selected.len(),
            opt(l.mean_loss()),
            opt(l.eval_accuracy)
        )
        .expect("write to string");
    }
    s
}

pub fn write_round_logs(path: &Path, logs: &[RoundLog]) -> Result<()> {
    std::fs::write(path, round_logs_csv(logs)).map_err(|e| Error::io(path, e))
}

/// `max(1, round(fraction * m))` distinct ids in ascending order.
pub fn select_clients(m: usize, fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    let k = ((fraction * m as f64).round() as usize).clamp(1, m.max(1));
    let ids: Vec<usize> = (0..m).collect();
    let mut rng = seed::rng(seed, "select", &[round as u64]);
    let mut picked: Vec<usize> = ids.choose_multiple(&mut rng, k).copied().collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone)]
pub struct LocalOutcome<T: Real> {
    pub params: ModelParams<T>,
    /// Mean loss of each epoch that took at least one step.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl<T: Real> LocalOutcome<T> {
    pub fn skipped(&self) -> bool {
        self.steps == 0
    }

    pub fn mean_loss(&self) -> Option<f64> {
        (!self.epoch_losses.is_empty())
            .then(|| self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len() as f64)
    }
}

/// Loss and upstream gradient for one batch; `None` when the batch yields no
/// training signal.
fn batch_objective<T: Real>(
    model: &Model<T>,
    out: &crate::nn::Tensor<T>,
    labels: &[usize],
    margin: f64,
    triplet_seed: u64,
) -> Result<Option<(f64, crate::nn::Tensor<T>)>> {
    if model.arch.is_metric() {
        let triplets = build_triplets(labels, triplet_seed);
        if triplets.is_empty() {
            return Ok(None);
        }
        triplet_loss_with_grad(out, &triplets, margin).map(Some)
    } else {
        cross_entropy(out, labels).map(Some)
    }
}

/// Trains a private copy of `global` on one client. The optimizer starts
/// fresh; `global` is never modified.
pub fn local_train<T: Real>(
    global: &ModelParams<T>,
    client: &ClientDataset,
    cfg: &FedConfig,
    stage: u64,
    round: usize,
) -> Result<LocalOutcome<T>> {
    let unchanged = || LocalOutcome {
        params: global.clone(),
        epoch_losses: Vec::new(),
        steps: 0,
    };
    if client.len() < 2 || cfg.local_epochs == 0 {
        if client.len() < 2 {
            debug!("client {} has {} examples; skipping", client.id, client.len());
        }
        return Ok(unchanged());
    }
    let coords = [stage, round as u64, client.id as u64];
    let mut rng = seed::rng(cfg.seed, "local", &coords);
    let mut model = Model::from_params(global)?;
    let mut opt = OptimizerState::<T>::new(cfg.optimizer, cfg.lr)?;
    let mut order: Vec<usize> = (0..client.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut steps = 0;
    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &client.examples[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let tseed = seed::derive(
                cfg.seed,
                "triplets",
                &[stage, round as u64, client.id as u64, epoch as u64, b as u64],
            );
            if model.arch.is_metric() && build_triplets(&labels, tseed).is_empty() {
                continue;
            }
            let x = batch_tensor::<T>(&batch)?;
            let (out, cache) = model.forward(&x, Mode::Train)?;
            let Some((loss, dout)) = batch_objective(&model, &out, &labels, cfg.margin, tseed)? else {
                continue;
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "local loss of client {} in round {round}",
                    client.id
                )));
            }
            let (_, grads) = model.backward(&cache, &dout)?;
            opt.step(&mut model, &grads)?;
            sum += loss;
            n += 1;
            steps += 1;
        }
        if n > 0 {
            epoch_losses.push(sum / n as f64);
        }
    }
    if steps == 0 {
        debug!("client {} produced no usable batch; skipping", client.id);
        return Ok(unchanged());
    }
    Ok(LocalOutcome {
        params: model.params(),
        epoch_losses,
        steps,
    })
}

/// Unweighted elementwise mean of parameters and running statistics. Sums
/// run in slice order starting from a copy of the first model.
pub fn aggregate<T: Real>(models: &[&ModelParams<T>]) -> Result<ModelParams<T>> {
    let (first, rest) = models
        .split_first()
        .ok_or_else(|| Error::invalid("cannot aggregate zero models"))?;
    let mut acc = (*first).clone();
    for m in rest {
        acc.ensure_compatible(m)?;
        for (dst, src) in [(&mut acc.params, &m.params), (&mut acc.buffers, &m.buffers)] {
            for (a, b) in dst.values_mut().zip(src.values()) {
                a.add_assign(b)?;
            }
        }
    }
    let n = T::lit(models.len() as f64);
    for t in acc.params.values_mut().chain(acc.buffers.values_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok(acc)
}

/// Called after each aggregation with the round index and the new global
/// model; its value is stored as the round's evaluation accuracy.
pub type RoundObserver<'a, T> = dyn FnMut(usize, &ModelParams<T>) -> Result<Option<f64>> + 'a;

/// Runs `cfg.rounds` rounds of select, parallel local training and
/// aggregation starting from `init`.
pub fn train<T: Real>(
    init: ModelParams<T>,
    clients: &[ClientDataset],
    cfg: &FedConfig,
    stage: u64,
    mut observer: Option<&mut RoundObserver<'_, T>>,
) -> Result<(ModelParams<T>, Vec<RoundLog>)> {
    cfg.validate()?;
    if clients.iter().all(ClientDataset::is_empty) {
        return Err(Error::invalid("federated training needs at least one non-empty client"));
    }
    let mut global = init;
    let mut logs = Vec::with_capacity(cfg.rounds);
    let sel_seed = seed::derive(cfg.seed, "select", &[stage]);
    for round in 0..cfg.rounds {
        let selected = select_clients(clients.len(), cfg.fraction, sel_seed, round);
        let outcomes: Vec<LocalOutcome<T>> = selected
            .par_iter()
            .map(|&c| local_train(&global, &clients[c], cfg, stage, round))
            .collect::<Result<_>>()?;
        let trained: Vec<&ModelParams<T>> = outcomes
            .iter()
            .filter(|o| !o.skipped())
            .map(|o| &o.params)
            .collect();
        if trained.is_empty() {
            warn!("round {round}: every selected client was skipped; keeping the global model");
        } else {
            global = aggregate(&trained)?;
            if !global.all_finite() {
                return Err(Error::NonFinite(format!("global model after round {round}")));
            }
        }
        let eval_accuracy = match observer.as_mut() {
            Some(f) => f(round, &global)?,
            None => None,
        };
        let log = RoundLog {
            round,
            selected,
            client_losses: outcomes.iter().map(LocalOutcome::mean_loss).collect(),
            eval_accuracy,
        };
        info!(
            "stage {stage} round {round}: {} clients, loss {:?}",
            log.selected.len(),
            log.mean_loss()
        );
        logs.push(log);
    }
    Ok((global, logs))
}

/// Continues federated training from `w` on the adaptation examples, split
/// into `min(max_clients, len / batch)` clients with full participation.
/// Returns `w` itself when there is nothing to adapt on.
pub fn mta_adapt<T: Real>(
    w: &ModelParams<T>,
    adapt: &[Example],
    cfg: &AdaptConfig,
) -> Result<(ModelParams<T>, Vec<RoundLog>)> {
    if adapt.is_empty() || cfg.rounds == 0 {
        return Ok((w.clone(), Vec::new()));
    }
    let n_clients = (adapt.len() / cfg.local.batch_size).clamp(1, cfg.max_clients.max(1));
    let pseed = seed::derive(cfg.local.seed, "adapt-partition", &[adapt.len() as u64]);
    let clients = partition_clients(adapt.to_vec(), n_clients, pseed)?;
    let fed = FedConfig {
        rounds: cfg.rounds,
        fraction: 1.0,
        // distinct streams per adaptation size
        seed: seed::derive(cfg.local.seed, "adapt", &[adapt.len() as u64]),
        ..cfg.local.clone()
    };
    train(w.clone(), &clients, &fed, STAGE_ADAPT, None)
}
