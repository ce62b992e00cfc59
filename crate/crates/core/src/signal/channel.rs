use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

/// A concrete propagation channel: FIR taps, noise level and noise seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCondition {
    pub id: String,
    pub taps: Vec<Complex64>,
    /// Target signal-to-noise ratio; `None` disables noise.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl ChannelCondition {
    pub fn identity(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            taps: vec![Complex64::new(1.0, 0.0)],
            snr_db: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::invalid(format!("channel {}: no taps", self.id)));
        }
        if self.taps.iter().any(|t| !t.re.is_finite() || !t.im.is_finite()) {
            return Err(Error::invalid(format!("channel {}: non-finite taps", self.id)));
        }
        if self.taps.iter().map(|t| t.norm_sqr()).sum::<f64>() <= 0.0 {
            return Err(Error::invalid(format!("channel {}: zero tap energy", self.id)));
        }
        if matches!(self.snr_db, Some(s) if !s.is_finite()) {
            return Err(Error::invalid(format!("channel {}: non-finite snr", self.id)));
        }
        Ok(())
    }
}

/// Recipe for drawing per-device multipath channels for one recording day.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSpec {
    pub id: String,
    pub taps: usize,
    /// Exponential power-delay-profile decay constant, in taps.
    pub decay: f64,
    /// Rician factor of the first tap (0 gives pure Rayleigh fading).
    pub k_factor: f64,
    pub snr_db: Option<f64>,
    /// Draw a separate channel per device rather than one shared channel.
    pub per_device: bool,
}

impl ConditionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 {
            return Err(Error::invalid(format!("condition {}: taps must be >= 1", self.id)));
        }
        if !(self.decay > 0.0) || !(self.k_factor >= 0.0) {
            return Err(Error::invalid(format!(
                "condition {}: decay must be > 0 and k-factor >= 0",
                self.id
            )));
        }
        Ok(())
    }

    /// Unit-energy taps with exponential power-delay profile; deterministic in
    /// `(seed, condition index, device)`.
    pub fn realize(&self, index: usize, device: usize, seed: u64) -> ChannelCondition {
        let who = if self.per_device { device as u64 + 1 } else { 0 };
        let mut rng = seed::rng(seed, "channel-taps", &[index as u64, who]);
        let mut taps: Vec<Complex64> = (0..self.taps)
            .map(|k| {
                let p = (-(k as f64) / self.decay).exp();
                let (a, b): (f64, f64) = (
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                Complex64::new(a, b) * (p / 2.0).sqrt()
            })
            .collect();
        if self.k_factor > 0.0 {
            let k = self.k_factor;
            let los = Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU));
            taps[0] = los * (k / (k + 1.0)).sqrt() + taps[0] * (1.0 / (k + 1.0)).sqrt();
        }
        let energy: f64 = taps.iter().map(|t| t.norm_sqr()).sum();
        let norm = energy.sqrt();
        taps.iter_mut().for_each(|t| *t /= norm);
        ChannelCondition {
            id: self.id.clone(),
            taps,
            snr_db: self.snr_db,
            seed: seed::derive(seed, "channel-noise", &[index as u64, device as u64]),
        }
    }
}

/// Default recording days: a mild first day and a harsher, noisier second.
pub fn default_conditions() -> Vec<ConditionSpec> {
    vec![
        ConditionSpec {
            id: "day1".into(),
            taps: 4,
            decay: 1.0,
            k_factor: 4.0,
            snr_db: Some(25.0),
            per_device: true,
        },
        ConditionSpec {
            id: "day2".into(),
            taps: 4,
            decay: 1.0,
            k_factor: 0.0,
            snr_db: Some(15.0),
            per_device: true,
        },
    ]
}

/// Causal FIR filtering followed by complex white Gaussian noise scaled to
/// the measured power of the filtered signal.
pub fn apply_channel(x: &[Complex64], cond: &ChannelCondition) -> Result<Vec<Complex64>> {
    cond.validate()?;
    if x.len() < cond.taps.len() {
        return Err(Error::invalid(format!(
            "channel {}: input of {} samples shorter than {} taps",
            cond.id,
            x.len(),
            cond.taps.len()
        )));
    }
    let mut y: Vec<Complex64> = (0..x.len())
        .map(|n| {
            cond.taps
                .iter()
                .enumerate()
                .take(n + 1)
                .map(|(k, &h)| h * x[n - k])
                .sum()
        })
        .collect();
    if let Some(snr) = cond.snr_db {
        let power = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / y.len() as f64;
        let sigma = (power / 10f64.powf(snr / 10.0) / 2.0).sqrt();
        let mut rng = seed::rng(cond.seed, "awgn", &[]);
        for v in &mut y {
            let (a, b): (f64, f64) = (
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            *v += Complex64::new(a, b) * sigma;
        }
    }
    Ok(y)
}
