//! Triplet construction, the squared-distance triplet hinge and class
//! centroids over embeddings.

use std::io::Write as _;
use std::path::Path;

use log::warn;
use rand::seq::IndexedRandom;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::seed;

pub const DEFAULT_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// One triplet per anchor that has both a same-label partner and a
/// different-label member; partners are drawn uniformly. Empty when the batch
/// has no valid anchor.
pub fn build_triplets(labels: &[usize], seed: u64) -> Vec<Triplet> {
    let mut rng = seed::rng(seed, "triplets", &[]);
    let mut out = Vec::new();
    for (a, &la) in labels.iter().enumerate() {
        let pos: Vec<usize> = (0..labels.len()).filter(|&i| i != a && labels[i] == la).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != la).collect();
        if let (Some(&p), Some(&n)) = (pos.choose(&mut rng), neg.choose(&mut rng)) {
            out.push(Triplet {
                anchor: a,
                positive: p,
                negative: n,
            });
        }
    }
    out
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

fn check_triplets<T: Real>(emb: &Tensor<T>, triplets: &[Triplet]) -> Result<()> {
    emb.expect_rank(2, "embeddings")?;
    let n = emb.dim(0);
    if let Some(t) = triplets
        .iter()
        .find(|t| t.anchor >= n || t.positive >= n || t.negative >= n)
    {
        return Err(Error::invalid(format!("triplet {t:?} indexes past {n} embeddings")));
    }
    Ok(())
}

/// Hinge value `d(a,p) - d(a,n) + margin` of one triplet, before clamping.
pub fn triplet_slack<T: Real>(emb: &Tensor<T>, t: &Triplet, margin: f64) -> f64 {
    let (a, p, n) = (emb.row(t.anchor), emb.row(t.positive), emb.row(t.negative));
    sq_dist(a, p) - sq_dist(a, n) + margin
}

/// Mean hinge over the triplets; 0 for an empty set.
pub fn triplet_loss<T: Real>(emb: &Tensor<T>, triplets: &[Triplet], margin: f64) -> Result<f64> {
    check_triplets(emb, triplets)?;
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = triplets
        .iter()
        .map(|t| triplet_slack(emb, t, margin).max(0.0))
        .sum();
    Ok(total / triplets.len() as f64)
}

/// Subgradient of [`triplet_loss`] with respect to the embeddings. Triplets
/// whose slack is not positive contribute nothing.
pub fn triplet_loss_backward<T: Real>(
    emb: &Tensor<T>,
    triplets: &[Triplet],
    margin: f64,
) -> Result<Tensor<T>> {
    check_triplets(emb, triplets)?;
    let d = emb.dim(1);
    let mut g = vec![0.0f64; emb.len()];
    if triplets.is_empty() {
        return Tensor::new(emb.shape().to_vec(), vec![T::zero(); emb.len()]);
    }
    let scale = 2.0 / triplets.len() as f64;
    for t in triplets {
        if triplet_slack(emb, t, margin) <= 0.0 {
            continue;
        }
        let (a, p, n) = (emb.row(t.anchor), emb.row(t.positive), emb.row(t.negative));
        for j in 0..d {
            let (a, p, n) = (a[j].as_f64(), p[j].as_f64(), n[j].as_f64());
            // d/da [|a-p|^2 - |a-n|^2] = 2(n - p)
            g[t.anchor * d + j] += scale * (n - p);
            g[t.positive * d + j] += scale * (p - a);
            g[t.negative * d + j] += scale * (a - n);
        }
    }
    Tensor::new(emb.shape().to_vec(), g.into_iter().map(T::lit).collect())
}

/// Loss and gradient together, for training loops.
pub fn triplet_loss_with_grad<T: Real>(
    emb: &Tensor<T>,
    triplets: &[Triplet],
    margin: f64,
) -> Result<(f64, Tensor<T>)> {
    Ok((
        triplet_loss(emb, triplets, margin)?,
        triplet_loss_backward(emb, triplets, margin)?,
    ))
}

/// Per-class mean embeddings. Classes absent from the reference set have no
/// centroid and can never be predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub vectors: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
}

impl Centroids {
    pub fn classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn missing(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&k| self.vectors[k].is_none()).collect()
    }

    pub fn dim(&self) -> Option<usize> {
        self.vectors.iter().flatten().map(Vec::len).next()
    }
}

/// Means accumulate in row order; `classes` fixes the label range.
pub fn compute_centroids<T: Real>(emb: &Tensor<T>, labels: &[usize], classes: usize) -> Result<Centroids> {
    emb.expect_rank(2, "embeddings")?;
    if labels.len() != emb.dim(0) {
        return Err(Error::invalid(format!(
            "{} labels for {} embeddings",
            labels.len(),
            emb.dim(0)
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {l} outside 0..{classes}")));
    }
    let d = emb.dim(1);
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        sums[l].iter_mut().zip(emb.row(i)).for_each(|(s, v)| *s += v.as_f64());
        counts[l] += 1;
    }
    let vectors = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect::<Vec<_>>();
    let c = Centroids { vectors, counts };
    let missing = c.missing();
    if !missing.is_empty() {
        warn!("no reference examples for classes {missing:?}");
    }
    Ok(c)
}

/// Writes `label,condition,e1,...,ed` rows.
pub fn write_embeddings_csv<T: Real>(
    path: &Path,
    emb: &Tensor<T>,
    labels: &[usize],
    conditions: &[&str],
) -> Result<()> {
    emb.expect_rank(2, "embeddings")?;
    let n = emb.dim(0);
    if labels.len() != n || conditions.len() != n {
        return Err(Error::invalid("embedding export needs one label and condition per row"));
    }
    let mut out = Vec::new();
    let header: Vec<String> = (1..=emb.dim(1)).map(|j| format!("e{j}")).collect();
    writeln!(out, "label,condition,{}", header.join(",")).expect("write to vec");
    for i in 0..n {
        let vals: Vec<String> = emb.row(i).iter().map(|v| format!("{:?}", v.as_f64())).collect();
        writeln!(out, "{},{},{}", labels[i], conditions[i], vals.join(",")).expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
