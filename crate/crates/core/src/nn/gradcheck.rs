//! Central finite-difference verification of analytic gradients (64-bit).
//!
//! The scalar under test is a fixed random projection `L = Σ r_i · y_i` of the
//! fragment output, so `dL/dy = r` drives the analytic backward pass. Each
//! parameter element (and each input element) is nudged by
//! `h = step · max(1, |p|)` in both directions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layer::Cache;
use crate::nn::{Layer, LayerKind, Mode, NamedTensors, Tensor};
use crate::seed;

/// Anything with a train-mode forward, a backward, and named parameters.
pub trait Fragment {
    type Cache;

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Self::Cache)>;

    /// Input gradient and parameter gradients keyed like
    /// [`Fragment::visit_params_mut`] names them.
    fn backward(&self, cache: &Self::Cache, dy: &Tensor) -> Result<(Tensor, NamedTensors<f64>)>;

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

impl Fragment for Layer<f64> {
    type Cache = Cache<f64>;

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Cache<f64>)> {
        if self.kind == LayerKind::Concat {
            // concatenating the input with itself exercises both split paths
            self.forward(&[x, x], Mode::Train)
        } else {
            self.forward(&[x], Mode::Train)
        }
    }

    fn backward(&self, cache: &Cache<f64>, dy: &Tensor) -> Result<(Tensor, NamedTensors<f64>)> {
        let (dxs, grads) = Layer::backward(self, cache, dy)?;
        let mut iter = dxs.into_iter();
        let mut dx = iter.next().ok_or_else(|| Error::InvalidCache("no input gradient".into()))?;
        for extra in iter {
            dx.add_assign(&extra)?;
        }
        Ok((dx, grads))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, p) in self.params.iter_mut() {
            f(name, p);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    /// Relative step: `h = step · max(1, |p|)`.
    pub step: f64,
    /// Lower bound on the relative-error denominator; below it the check is
    /// effectively absolute.
    pub floor: f64,
    pub seed: u64,
    pub check_input: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            floor: 1e-4,
            seed: 0,
            check_input: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub elements: usize,
    /// Elements whose coarse difference straddled a kink (see `grad_check`).
    pub nonsmooth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            let verdict = if e.max_rel_error <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<40} n={:<6} rel={:.3e} abs={:.3e} kinks={} {verdict}",
                e.name, e.elements, e.max_rel_error, e.max_abs_error, e.nonsmooth
            )?;
        }
        Ok(())
    }
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}[{i}]"))),
        None => Ok(()),
    }
}

fn projected(frag: &mut impl Fragment, x: &Tensor, r: &[f64]) -> Result<f64> {
    let (y, _) = frag.forward_train(x)?;
    ensure_finite(&y, "output")?;
    Ok(y.data().iter().zip(r).map(|(a, b)| a * b).sum())
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn param_fd<F: Fragment>(frag: &mut F, x: &Tensor, r: &[f64], name: &str, i: usize, step: f64) -> Result<f64> {
    let mut orig = 0.0;
    let mut h = 0.0;
    frag.visit_params_mut(&mut |n, p| {
        if n == name {
            orig = p.data()[i];
            h = step * orig.abs().max(1.0);
            p.data_mut()[i] = orig + h;
        }
    });
    let plus = projected(frag, x, r);
    frag.visit_params_mut(&mut |n, p| {
        if n == name {
            p.data_mut()[i] = orig - h;
        }
    });
    let minus = projected(frag, x, r);
    frag.visit_params_mut(&mut |n, p| {
        if n == name {
            p.data_mut()[i] = orig;
        }
    });
    Ok((plus? - minus?) / (2.0 * h))
}

fn input_fd<F: Fragment>(frag: &mut F, x: &mut Tensor, r: &[f64], i: usize, step: f64) -> Result<f64> {
    let orig = x.data()[i];
    let h = step * orig.abs().max(1.0);
    x.data_mut()[i] = orig + h;
    let plus = projected(frag, x, r);
    x.data_mut()[i] = orig - h;
    let minus = projected(frag, x, r);
    x.data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Compares one element. A mismatch is retried with a ten times smaller
/// step; if the two differences disagree with each other while the finer one
/// matches, the coarse step straddled a relu kink and the element counts as
/// non-smooth instead of failing. A wrong backward gives consistent
/// differences at both steps and still fails.
fn check_element(
    entry: &mut GradCheckEntry,
    analytic: f64,
    coarse: f64,
    fine: &mut dyn FnMut() -> Result<f64>,
    config: &GradCheckConfig,
) -> Result<()> {
    let mut numeric = coarse;
    if rel_error(analytic, coarse, config.floor) > config.tolerance {
        let f = fine()?;
        if rel_error(coarse, f, config.floor) > config.tolerance
            && rel_error(analytic, f, config.floor) <= config.tolerance
        {
            entry.nonsmooth += 1;
            numeric = f;
        }
    }
    entry.max_abs_error = entry.max_abs_error.max((analytic - numeric).abs());
    entry.max_rel_error = entry.max_rel_error.max(rel_error(analytic, numeric, config.floor));
    Ok(())
}

fn empty_entry(name: &str, elements: usize) -> GradCheckEntry {
    GradCheckEntry {
        name: name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        elements,
        nonsmooth: 0,
    }
}

pub fn grad_check<F: Fragment>(
    frag: &mut F,
    x: &Tensor,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    ensure_finite(x, "input")?;
    let (y, cache) = frag.forward_train(x)?;
    ensure_finite(&y, "output")?;
    let mut rng = seed::rng(config.seed, "gradcheck", &[]);
    let r: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dy = Tensor::new(y.shape().to_vec(), r.clone())?;
    let (dx, grads) = frag.backward(&cache, &dy)?;
    ensure_finite(&dx, "input gradient")?;
    for (name, g) in &grads {
        ensure_finite(g, name)?;
    }

    let mut names = Vec::new();
    frag.visit_params_mut(&mut |name, _| names.push(name.to_string()));

    let mut entries = Vec::new();
    for name in names {
        let analytic = grads
            .get(&name)
            .ok_or_else(|| Error::InconsistentGradient(format!("no gradient for `{name}`")))?
            .data()
            .to_vec();
        let mut len = 0;
        frag.visit_params_mut(&mut |n, p| {
            if n == name {
                len = p.len();
            }
        });
        if analytic.len() != len {
            return Err(Error::InconsistentGradient(format!(
                "gradient for `{name}` has {} elements, parameter has {len}",
                analytic.len()
            )));
        }
        let mut entry = empty_entry(&name, len);
        for (i, &a) in analytic.iter().enumerate() {
            let coarse = param_fd(frag, x, &r, &name, i, config.step)?;
            let mut fine = || param_fd(frag, x, &r, &name, i, config.step / 10.0);
            check_element(&mut entry, a, coarse, &mut fine, config)?;
        }
        entries.push(entry);
    }

    if config.check_input {
        let mut xp = x.clone();
        let mut entry = empty_entry("input", x.len());
        for (i, &a) in dx.data().iter().enumerate() {
            let coarse = input_fd(frag, &mut xp, &r, i, config.step)?;
            let mut fine = || input_fd(frag, &mut xp, &r, i, config.step / 10.0);
            check_element(&mut entry, a, coarse, &mut fine, config)?;
        }
        entries.push(entry);
    }

    Ok(GradCheckReport {
        tolerance: config.tolerance,
        entries,
    })
}
