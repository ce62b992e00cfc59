//! From IQ streams to labeled `3 x H` examples, client shards and
//! train/adapt/test splits.

pub mod manifest;

use std::collections::HashSet;
use std::sync::Arc;

use log::warn;
use num_complex::Complex64;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::seed;
use crate::signal::IqStream;

pub const ROWS: usize = 3;
pub const STD_FLOOR: f64 = 1e-8;

/// Where an example came from; unique across a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExampleId {
    pub condition: Arc<str>,
    pub device: usize,
    pub window: usize,
}

impl std::fmt::Display for ExampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/dev{}/w{}", self.condition, self.device, self.window)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Row-major `3 x width`: in-phase, quadrature, modulus.
    pub x: Vec<f64>,
    pub width: usize,
    pub label: usize,
    pub id: ExampleId,
    pub normalized: bool,
}

impl Example {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.x[r * self.width..(r + 1) * self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub examples: Vec<Example>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Windows at offsets `0, stride, 2*stride, ...`; empty (with a warning)
/// when the stream is shorter than one window.
pub fn window_stream(stream: &IqStream, h: usize, stride: usize) -> Result<Vec<&[Complex64]>> {
    if h == 0 || stride == 0 {
        return Err(Error::invalid("window and stride must be at least 1"));
    }
    let n = stream.len();
    if n < h {
        warn!(
            "stream dev{}/{} has {n} samples, fewer than one window of {h}",
            stream.device, stream.condition
        );
        return Ok(Vec::new());
    }
    let count = (n - h) / stride + 1;
    Ok((0..count)
        .map(|k| &stream.samples[k * stride..k * stride + h])
        .collect())
}

/// `[I; Q; |s|]` rows of one window.
pub fn featurize(window: &[Complex64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(ROWS * window.len());
    x.extend(window.iter().map(|s| s.re));
    x.extend(window.iter().map(|s| s.im));
    x.extend(window.iter().map(|s| s.re.hypot(s.im)));
    x
}

/// Labels are assigned by ascending device id across all streams.
pub fn device_labels(streams: &[IqStream]) -> Vec<usize> {
    let mut ids: Vec<usize> = streams.iter().map(|s| s.device).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Windows and featurizes every stream of `condition`, in stream order.
pub fn examples_for_condition(
    streams: &[IqStream],
    condition: &str,
    h: usize,
    stride: usize,
) -> Result<Vec<Example>> {
    let labels = device_labels(streams);
    let cond: Arc<str> = Arc::from(condition);
    let mut out = Vec::new();
    for s in streams.iter().filter(|s| s.condition == condition) {
        let label = labels.binary_search(&s.device).expect("device listed");
        for (k, w) in window_stream(s, h, stride)?.into_iter().enumerate() {
            out.push(Example {
                x: featurize(w),
                width: h,
                label,
                id: ExampleId {
                    condition: cond.clone(),
                    device: s.device,
                    window: k,
                },
                normalized: false,
            });
        }
    }
    Ok(out)
}

/// Reorders examples time-major: window 0 of every device, then window 1,
/// and so on. Taking a prefix therefore samples all devices evenly.
pub fn interleave_by_window(examples: &mut [Example]) {
    examples.sort_by_key(|e| (e.id.window, e.id.device));
}

/// Frozen per-row standardization statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; ROWS],
    pub std: [f64; ROWS],
}

impl NormStats {
    /// Per-row mean and (population) standard deviation over all columns of
    /// all examples.
    pub fn fit(examples: &[Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("cannot fit normalization on an empty set"));
        }
        if examples.iter().any(|e| e.normalized) {
            return Err(Error::invalid("normalization statistics must come from raw examples"));
        }
        let mut mean = [0.0; ROWS];
        let mut std = [0.0; ROWS];
        for r in 0..ROWS {
            let count: usize = examples.iter().map(|e| e.width).sum();
            let m = examples.iter().map(|e| e.row(r).iter().sum::<f64>()).sum::<f64>()
                / count as f64;
            let v = examples
                .iter()
                .map(|e| e.row(r).iter().map(|x| (x - m) * (x - m)).sum::<f64>())
                .sum::<f64>()
                / count as f64;
            mean[r] = m;
            std[r] = v.sqrt();
            if std[r] < STD_FLOOR {
                warn!("row {r} has std {:.3e}; clamping to {STD_FLOOR:e}", std[r]);
                std[r] = STD_FLOOR;
            }
        }
        Ok(Self { mean, std })
    }

    /// Standardizes in place; refuses examples that are already normalized.
    pub fn apply(&self, examples: &mut [Example]) -> Result<()> {
        if let Some(e) = examples.iter().find(|e| e.normalized) {
            return Err(Error::invalid(format!("example {} is already normalized", e.id)));
        }
        for e in examples.iter_mut() {
            let w = e.width;
            for r in 0..ROWS {
                let (m, s) = (self.mean[r], self.std[r]);
                e.x[r * w..(r + 1) * w].iter_mut().for_each(|v| *v = (*v - m) / s);
            }
            e.normalized = true;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..ROWS {
            s.push_str(&format!("norm.mean.{r} = {:?}\nnorm.std.{r} = {:?}\n", self.mean[r], self.std[r]));
        }
        s
    }

    pub fn from_kv(kv: &indexmap::IndexMap<String, String>) -> Result<Self> {
        let mut mean = [0.0; ROWS];
        let mut std = [0.0; ROWS];
        for r in 0..ROWS {
            for (key, slot) in [(format!("norm.mean.{r}"), &mut mean[r]), (format!("norm.std.{r}"), &mut std[r])] {
                *slot = kv
                    .get(&key)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::invalid(format!("missing or bad `{key}`")))?;
            }
        }
        Ok(Self { mean, std })
    }
}

/// Per-row `(mean, std)` of a set, for drift diagnostics.
pub fn row_moments(examples: &[Example]) -> [(f64, f64); ROWS] {
    let mut out = [(0.0, 0.0); ROWS];
    let count: usize = examples.iter().map(|e| e.width).sum::<usize>().max(1);
    for (r, slot) in out.iter_mut().enumerate() {
        let m = examples.iter().map(|e| e.row(r).iter().sum::<f64>()).sum::<f64>() / count as f64;
        let v = examples
            .iter()
            .map(|e| e.row(r).iter().map(|x| (x - m) * (x - m)).sum::<f64>())
            .sum::<f64>()
            / count as f64;
        *slot = (m, v.sqrt());
    }
    out
}

/// Seeded shuffle, then contiguous slices whose sizes differ by at most one.
pub fn partition_clients(examples: Vec<Example>, m: usize, seed: u64) -> Result<Vec<ClientDataset>> {
    if m == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    let n = examples.len();
    if n < m {
        warn!("{n} examples for {m} clients; {} clients will be empty", m - n);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, "partition", &[]));
    let mut slots: Vec<Option<Example>> = examples.into_iter().map(Some).collect();
    let (base, extra) = (n / m, n % m);
    let mut clients = Vec::with_capacity(m);
    let mut pos = 0;
    for id in 0..m {
        let size = base + usize::from(id < extra);
        let examples = order[pos..pos + size]
            .iter()
            .map(|&i| slots[i].take().expect("each index used once"))
            .collect();
        pos += size;
        clients.push(ClientDataset { id, examples });
    }
    Ok(clients)
}

/// Seeded random holdout split: `(train, holdout)`.
pub fn split_holdout(
    examples: Vec<Example>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("holdout fraction {fraction} outside [0, 1)")));
    }
    let n = examples.len();
    let k = (n as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, "holdout", &[]));
    let hold: HashSet<usize> = order[..k].iter().copied().collect();
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (i, e) in examples.into_iter().enumerate() {
        if hold.contains(&i) {
            holdout.push(e);
        } else {
            train.push(e);
        }
    }
    Ok((train, holdout))
}

/// First `rho` examples (in their stable order) adapt; the rest test.
pub fn split_adaptation(day2: &[Example], rho: usize) -> Result<(Vec<Example>, Vec<Example>)> {
    if rho >= day2.len() {
        return Err(Error::invalid(format!(
            "adaptation count {rho} must be below the {} available examples",
            day2.len()
        )));
    }
    Ok((day2[..rho].to_vec(), day2[rho..].to_vec()))
}

/// Fails if any test identity also appears in one of `others`.
pub fn check_no_leak(test: &[Example], others: &[&[Example]]) -> Result<()> {
    let ids: HashSet<&ExampleId> = test.iter().map(|e| &e.id).collect();
    for set in others {
        if let Some(e) = set.iter().find(|e| ids.contains(&e.id)) {
            return Err(Error::invalid(format!("test example {} leaked into a training set", e.id)));
        }
    }
    Ok(())
}

/// Stacks examples into a `[batch, 1, 3, width]` tensor.
pub fn batch_tensor<T: Real>(examples: &[&Example]) -> Result<Tensor<T>> {
    let first = examples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let w = first.width;
    let mut data = Vec::with_capacity(examples.len() * ROWS * w);
    for e in examples {
        if e.width != w {
            return Err(Error::Shape {
                axis: 3,
                expected: w,
                actual: e.width,
                context: format!("batch member {}", e.id),
            });
        }
        data.extend(e.x.iter().map(|&v| T::lit(v)));
    }
    Tensor::new(vec![examples.len(), 1, ROWS, w], data)
}

/// Nearest-centroid accuracy on the flattened feature vectors.
pub fn raw_centroid_probe(train: &[Example], test: &[Example]) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("probe needs non-empty train and test sets"));
    }
    let k = train.iter().chain(test).map(|e| e.label).max().expect("non-empty") + 1;
    let dim = train[0].x.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for e in train {
        sums[e.label].iter_mut().zip(&e.x).for_each(|(s, v)| *s += v);
        counts[e.label] += 1;
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    let correct = test
        .iter()
        .filter(|e| {
            let best = centroids
                .iter()
                .enumerate()
                .filter_map(|(j, c)| {
                    c.as_ref().map(|c| {
                        (j, c.iter().zip(&e.x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    })
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(j, _)| j);
            best == Some(e.label)
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}
