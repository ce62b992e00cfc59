//! End-to-end experiment steps shared by the command-line driver and the
//! acceptance harness: synthesize, prepare splits, train, adapt, evaluate.

use std::fs;
use std::path::Path;

use log::{info, warn};

use crate::config::ExperimentConfig;
use crate::dataset::manifest::{Manifest, StreamEntry};
use crate::dataset::{
    check_no_leak, examples_for_condition, interleave_by_window, partition_clients, split_holdout,
    ClientDataset, Example, NormStats,
};
use crate::error::{Error, Result};
use crate::eval::{embed_examples, evaluate_embeddings, EvalMeta, EvalResult};
use crate::fed::{self, RoundLog, STAGE_TRAIN};
use crate::metric::{compute_centroids, Centroids};
use crate::models::{Model, ModelParams};
use crate::nn::Real;
use crate::signal::{synth_dataset, write_iq, IqStream};

pub const MANIFEST: &str = "manifest.txt";
pub const RESOLVED: &str = "resolved.conf";

pub fn synthesize(cfg: &ExperimentConfig) -> Result<Vec<IqStream>> {
    synth_dataset(
        &cfg.devices,
        &[cfg.source.clone(), cfg.target.clone()],
        &cfg.synth_options(),
        cfg.stream_seed("data"),
    )
}

pub fn write_resolved(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let p = dir.join(RESOLVED);
    fs::write(&p, cfg.resolved()).map_err(|e| Error::io(&p, e))
}

/// Writes one IQ file per stream, the manifest and the resolved config.
pub fn generate(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let streams = synthesize(cfg)?;
    let mut manifest = Manifest::default();
    manifest.meta.insert("seed".into(), cfg.seed.to_string());
    manifest.meta.insert("config_hash".into(), cfg.hash());
    manifest.meta.insert("signal_kind".into(), cfg.signal_kind.to_string());
    for s in &streams {
        let name = format!("dev{}_{}.iq", s.device, s.condition);
        write_iq(&dir.join(&name), s)?;
        manifest.streams.push(StreamEntry {
            path: name.into(),
            device: s.device,
            condition: s.condition.clone(),
        });
    }
    manifest.write(&dir.join(MANIFEST))?;
    write_resolved(cfg, dir)?;
    info!("wrote {} streams to {}", streams.len(), dir.display());
    Ok(manifest)
}

pub fn load_streams(dir: &Path) -> Result<Vec<IqStream>> {
    let path = dir.join(MANIFEST);
    Manifest::read(&path)?.load_streams(&path)
}

/// Normalized splits ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub clients: Vec<ClientDataset>,
    /// Source-day training examples (the union of all clients).
    pub train: Vec<Example>,
    pub holdout: Vec<Example>,
    /// Target-day examples in time-interleaved order.
    pub target: Vec<Example>,
    pub stats: NormStats,
    pub classes: usize,
}

pub fn prepare(cfg: &ExperimentConfig, streams: &[IqStream]) -> Result<Prepared> {
    let day1 = examples_for_condition(streams, &cfg.source.id, cfg.window, cfg.stride)?;
    let mut target = examples_for_condition(streams, &cfg.target.id, cfg.window, cfg.stride)?;
    if day1.is_empty() || target.is_empty() {
        return Err(Error::invalid(format!(
            "no windows for condition `{}` or `{}`",
            cfg.source.id, cfg.target.id
        )));
    }
    interleave_by_window(&mut target);
    let (mut train, mut holdout) = split_holdout(day1, cfg.holdout, cfg.stream_seed("holdout"))?;
    let stats = NormStats::fit(&train)?;
    stats.apply(&mut train)?;
    stats.apply(&mut holdout)?;
    stats.apply(&mut target)?;
    check_no_leak(&holdout, &[&train])?;
    let clients = partition_clients(train.clone(), cfg.clients, cfg.stream_seed("partition"))?;
    let classes = crate::dataset::device_labels(streams).len();
    Ok(Prepared {
        clients,
        train,
        holdout,
        target,
        stats,
        classes,
    })
}

pub fn init_params<T: Real>(cfg: &ExperimentConfig) -> Result<ModelParams<T>> {
    Ok(Model::<T>::build(&cfg.arch()?, cfg.stream_seed("model"))?.params())
}

pub fn train_global<T: Real>(
    cfg: &ExperimentConfig,
    prep: &Prepared,
) -> Result<(ModelParams<T>, Vec<RoundLog>)> {
    fed::train(init_params(cfg)?, &prep.clients, &cfg.fed_config(), STAGE_TRAIN, None)
}

fn centroids_of<T: Real>(params: &ModelParams<T>, set: &[Example], classes: usize) -> Result<Centroids> {
    let emb = embed_examples(params, set)?;
    let labels: Vec<usize> = set.iter().map(|e| e.label).collect();
    compute_centroids(&emb, &labels, classes)
}

fn score<T: Real>(
    params: &ModelParams<T>,
    centroids: &Centroids,
    test: &[Example],
    meta: EvalMeta,
) -> Result<EvalResult> {
    let emb = embed_examples(params, test)?;
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    evaluate_embeddings(&emb, &labels, centroids, meta)
}

/// Adaptation counts that fit in the target set; larger ones are dropped
/// with a warning.
pub fn usable_rhos(cfg: &ExperimentConfig, target_len: usize) -> Vec<usize> {
    let mut rhos = Vec::new();
    for &r in &cfg.rhos {
        if r >= target_len {
            warn!("rho {r} exceeds the {target_len} target examples; skipped");
        } else if !rhos.contains(&r) {
            rhos.push(r);
        }
    }
    rhos
}

/// Same-day, zero-shot and per-rho adapted results.
///
/// Same-day and zero-shot use centroids of the source training set; adapted
/// models use centroids of their own adaptation set. All target-day rows
/// score the same examples: those after the largest adaptation prefix.
pub fn adapt_and_evaluate<T: Real>(
    cfg: &ExperimentConfig,
    w: &ModelParams<T>,
    prep: &Prepared,
) -> Result<Vec<EvalResult>> {
    let rhos = usable_rhos(cfg, prep.target.len());
    let max_rho = rhos.iter().copied().max().unwrap_or(0);
    let test = &prep.target[max_rho..];
    let meta = |condition: &str, setting: &str, rho: usize| EvalMeta {
        model: w.arch.id().into(),
        signal_kind: cfg.signal_kind.to_string(),
        condition: condition.into(),
        setting: setting.into(),
        rho,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        missing_classes: Vec::new(),
    };
    let source_centroids = centroids_of(w, &prep.train, prep.classes)?;
    let mut results = vec![
        score(w, &source_centroids, &prep.holdout, meta(&cfg.source.id, "same-day", 0))?,
        score(w, &source_centroids, test, meta(&cfg.target.id, "zero-shot", 0))?,
    ];
    let adapt_cfg = cfg.adapt_config();
    for &rho in rhos.iter().filter(|&&r| r > 0) {
        let adapt = &prep.target[..rho];
        check_no_leak(test, &[&prep.train, adapt])?;
        let (w2, _) = fed::mta_adapt(w, adapt, &adapt_cfg)?;
        let c = centroids_of(&w2, adapt, prep.classes)?;
        let r = score(&w2, &c, test, meta(&cfg.target.id, "adapted", rho))?;
        info!("rho {rho}: adapted accuracy {:.4}", r.accuracy);
        results.push(r);
    }
    Ok(results)
}

/// Checkpoint metadata: the resolved config, so a checkpoint alone can
/// regenerate its run.
pub fn checkpoint_metadata(cfg: &ExperimentConfig) -> String {
    cfg.resolved()
}
