//! Nearest-centroid prediction, accuracy and confusion matrices, and the
//! results/summary files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{batch_tensor, Example};
use crate::error::{Error, Result};
use crate::metric::Centroids;
use crate::models::{Model, ModelParams};
use crate::nn::{Mode, Real, Tensor};

/// Examples per forward pass when embedding a whole set.
pub const EMBED_CHUNK: usize = 64;

/// Eval-mode embeddings (or logits) of every example, one row each.
pub fn embed_examples<T: Real>(params: &ModelParams<T>, examples: &[Example]) -> Result<Tensor<T>> {
    let mut model = Model::from_params(params)?;
    let mut parts = Vec::new();
    for chunk in examples.chunks(EMBED_CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        parts.push(model.embed(&batch_tensor::<T>(&refs)?, Mode::Eval)?);
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros(&[0, params.arch.output_dim()]));
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Class with the smallest squared Euclidean distance; ties go to the lower
/// index, and classes without a centroid are never returned.
pub fn predict<T: Real>(centroids: &Centroids, embedding: &[T]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in centroids.vectors.iter().enumerate() {
        let Some(c) = c else { continue };
        let d: f64 = c
            .iter()
            .zip(embedding)
            .map(|(a, b)| {
                let t = a - b.as_f64();
                t * t
            })
            .sum();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub model: String,
    pub signal_kind: String,
    /// Recording condition of the test data.
    pub condition: String,
    /// `same-day`, `zero-shot` or `adapted`.
    pub setting: String,
    pub rho: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Classes the centroid set could not predict.
    pub missing_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(flatten)]
    pub meta: EvalMeta,
    pub accuracy: f64,
    pub total: usize,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<usize>>,
    pub confusion_normalized: Vec<Vec<f64>>,
    /// `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
}

impl EvalResult {
    pub fn from_predictions(
        labels: &[usize],
        predicted: &[Option<usize>],
        classes: usize,
        meta: EvalMeta,
    ) -> Result<Self> {
        if labels.is_empty() || labels.len() != predicted.len() {
            return Err(Error::invalid("evaluation needs one prediction per non-empty test label"));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        let mut unpredicted = 0;
        for (&y, p) in labels.iter().zip(predicted) {
            if y >= classes {
                return Err(Error::invalid(format!("label {y} outside 0..{classes}")));
            }
            match p {
                Some(p) => confusion[y][*p] += 1,
                None => unpredicted += 1,
            }
        }
        if unpredicted > 0 {
            return Err(Error::invalid(format!("{unpredicted} examples had no centroid to match")));
        }
        let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
        let confusion_normalized = confusion
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                    .collect()
            })
            .collect();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[k] as f64 / n as f64)
            })
            .collect();
        Ok(Self {
            meta,
            accuracy: correct as f64 / labels.len() as f64,
            total: labels.len(),
            confusion,
            confusion_normalized,
            per_class,
        })
    }
}

/// Scores already-computed embeddings against `centroids`.
pub fn evaluate_embeddings<T: Real>(
    emb: &Tensor<T>,
    labels: &[usize],
    centroids: &Centroids,
    mut meta: EvalMeta,
) -> Result<EvalResult> {
    emb.expect_rank(2, "embeddings")?;
    let predicted: Vec<Option<usize>> = (0..emb.dim(0)).map(|i| predict(centroids, emb.row(i))).collect();
    meta.missing_classes = centroids.missing();
    EvalResult::from_predictions(labels, &predicted, centroids.classes(), meta)
}

/// Full eval-mode pass over `test`.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    centroids: &Centroids,
    test: &[Example],
    meta: EvalMeta,
) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let emb = embed_examples(params, test)?;
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    evaluate_embeddings(&emb, &labels, centroids, meta)
}

pub fn results_jsonl(results: &[EvalResult]) -> String {
    results
        .iter()
        .map(|r| serde_json::to_string(r).expect("result serializes") + "\n")
        .collect()
}

pub fn read_results(path: &Path) -> Result<Vec<EvalResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Accuracy minus that of the first row sharing model, signal kind and seed.
fn deltas(results: &[EvalResult]) -> Vec<f64> {
    results
        .iter()
        .map(|r| {
            let base = results
                .iter()
                .find(|b| {
                    b.meta.model == r.meta.model
                        && b.meta.signal_kind == r.meta.signal_kind
                        && b.meta.seed == r.meta.seed
                })
                .expect("row matches itself");
            r.accuracy - base.accuracy
        })
        .collect()
}

pub fn summary_csv(results: &[EvalResult]) -> String {
    let mut s = String::from("model,signal_kind,condition,setting,rho,seed,accuracy,delta,config_hash\n");
    for (r, d) in results.iter().zip(deltas(results)) {
        let m = &r.meta;
        writeln!(
            s,
            "{},{},{},{},{},{},{:.4},{:+.4},{}",
            m.model, m.signal_kind, m.condition, m.setting, m.rho, m.seed, r.accuracy, d, m.config_hash
        )
        .expect("write to string");
    }
    s
}

pub fn summary_table(results: &[EvalResult]) -> String {
    let mut s = String::new();
    let hashes: Vec<&str> = {
        let mut h: Vec<&str> = results.iter().map(|r| r.meta.config_hash.as_str()).collect();
        h.dedup();
        h
    };
    writeln!(s, "config hash: {}", hashes.join(", ")).expect("write to string");
    writeln!(
        s,
        "{:<9} {:<7} {:<6} {:<10} {:>5} {:>6} {:>9} {:>8}",
        "model", "signal", "cond", "setting", "rho", "seed", "accuracy", "delta"
    )
    .expect("write to string");
    for (r, d) in results.iter().zip(deltas(results)) {
        let m = &r.meta;
        writeln!(
            s,
            "{:<9} {:<7} {:<6} {:<10} {:>5} {:>6} {:>9.4} {:>+8.4}",
            m.model, m.signal_kind, m.condition, m.setting, m.rho, m.seed, r.accuracy, d
        )
        .expect("write to string");
    }
    s
}

/// Writes `results.jsonl`, `summary.csv` and `summary.txt` into `dir`.
pub fn write_report(results: &[EvalResult], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        ("results.jsonl", results_jsonl(results)),
        ("summary.csv", summary_csv(results)),
        ("summary.txt", summary_table(results)),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cents(v: &[&[f64]]) -> Centroids {
        Centroids {
            vectors: v.iter().map(|c| Some(c.to_vec())).collect(),
            counts: vec![1; v.len()],
        }
    }

    #[test]
    fn exact_hit_and_ties() {
        let c = cents(&[&[0.0, 0.0], &[2.0, 0.0]]);
        assert_eq!(predict(&c, &[2.0f64, 0.0]), Some(1));
        assert_eq!(predict(&c, &[1.0f64, 5.0]), Some(0));
        let mut c = c;
        c.vectors[0] = None;
        assert_eq!(predict(&c, &[0.0f64, 0.0]), Some(1));
    }

    #[test]
    fn constant_predictor_is_at_chance() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let r = EvalResult::from_predictions(&labels, &vec![Some(0); 40], 4, EvalMeta::default()).unwrap();
        assert_eq!(r.accuracy, 0.25);
        assert_eq!(r.per_class, vec![Some(1.0), Some(0.0), Some(0.0), Some(0.0)]);
        for (k, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == k).count());
        }
    }

    #[test]
    fn report_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |acc: usize, setting: &str| {
            let labels = [0, 1, 1, 0];
            let pred: Vec<Option<usize>> = (0..4).map(|i| Some(if i < acc { labels[i] } else { 1 - labels[i] })).collect();
            EvalResult::from_predictions(
                &labels,
                &pred,
                2,
                EvalMeta {
                    model: "proposed".into(),
                    setting: setting.into(),
                    config_hash: "abc".into(),
                    ..Default::default()
                },
            )
            .unwrap()
        };
        let rs = vec![mk(2, "zero-shot"), mk(3, "adapted")];
        write_report(&rs, dir.path()).unwrap();
        assert_eq!(read_results(&dir.path().join("results.jsonl")).unwrap(), rs);
        let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().contains("+0.2500"));
        assert!(fs::read_to_string(dir.path().join("summary.txt")).unwrap().contains("abc"));
    }
}
