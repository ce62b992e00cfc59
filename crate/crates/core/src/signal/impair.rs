use std::f64::consts::TAU;

use num_complex::Complex64;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;

/// Transmitter hardware imperfections of one emulated device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub id: usize,
    /// IQ gain imbalance, nominally 1.
    pub iq_gain: f64,
    /// IQ phase imbalance in radians.
    pub iq_phase: f64,
    pub dc_i: f64,
    pub dc_q: f64,
    /// Carrier frequency offset in cycles per sample.
    pub cfo: f64,
    /// Standard deviation of the per-sample phase-noise increment (radians).
    pub phase_noise: f64,
    /// Third-order nonlinearity coefficient.
    pub a3: Complex64,
}

impl DeviceProfile {
    pub fn identity(id: usize) -> Self {
        Self {
            id,
            iq_gain: 1.0,
            iq_phase: 0.0,
            dc_i: 0.0,
            dc_q: 0.0,
            cfo: 0.0,
            phase_noise: 0.0,
            a3: Complex64::new(0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.iq_gain, self.iq_phase, self.dc_i, self.dc_q, self.cfo, self.phase_noise]
            .iter()
            .all(|v| v.is_finite())
            && self.a3.re.is_finite()
            && self.a3.im.is_finite();
        if !finite {
            return Err(Error::invalid(format!("device {}: non-finite profile", self.id)));
        }
        if self.iq_gain <= 0.0 {
            return Err(Error::invalid(format!("device {}: iq gain must be > 0", self.id)));
        }
        if self.phase_noise < 0.0 {
            return Err(Error::invalid(format!("device {}: phase noise must be >= 0", self.id)));
        }
        if self.cfo.abs() >= 0.5 {
            return Err(Error::invalid(format!("device {}: |cfo| must be < 0.5", self.id)));
        }
        Ok(())
    }

    /// `(mu, nu)` of the imbalance model `mu * x + nu * conj(x)`.
    pub fn imbalance(&self) -> (Complex64, Complex64) {
        let g = Complex64::from_polar(self.iq_gain, self.iq_phase);
        let one = Complex64::new(1.0, 0.0);
        ((one + g) / 2.0, (one - g) / 2.0)
    }
}

/// The four default transmitters.
pub fn default_profiles() -> Vec<DeviceProfile> {
    let cfo = [1e-4, 3e-4, -2e-4, 5e-4];
    let gain = [1.02, 0.97, 1.05, 0.99];
    let phase = [0.02, -0.03, 0.05, -0.01];
    let dc = [(0.02, -0.01), (-0.015, 0.02), (0.01, 0.015), (-0.01, -0.02)];
    (0..4)
        .map(|i| DeviceProfile {
            id: i,
            iq_gain: gain[i],
            iq_phase: phase[i],
            dc_i: dc[i].0,
            dc_q: dc[i].1,
            cfo: cfo[i],
            phase_noise: 1e-3,
            a3: Complex64::new(-0.005, 0.0),
        })
        .collect()
}

/// Applies, in order: cubic nonlinearity, IQ imbalance, DC offset, carrier
/// frequency offset and Wiener phase noise. The phase-noise walk draws from
/// its own stream derived from `seed`.
pub fn apply_device_impairments(
    x: &[Complex64],
    profile: &DeviceProfile,
    seed: u64,
) -> Result<Vec<Complex64>> {
    profile.validate()?;
    if let Some(i) = x.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite(format!("impairment input sample {i}")));
    }
    let (mu, nu) = profile.imbalance();
    let dc = Complex64::new(profile.dc_i, profile.dc_q);
    let mut rng = seed::rng(seed, "phase-noise", &[profile.id as u64]);
    let walk = (profile.phase_noise > 0.0)
        .then(|| Normal::new(0.0, profile.phase_noise).expect("valid std"));
    let mut phi = 0.0;
    Ok(x
        .iter()
        .enumerate()
        .map(|(t, &s)| {
            let mut y = s + profile.a3 * s.norm_sqr() * s;
            y = mu * y + nu * y.conj();
            y += dc;
            // reduce the cycle count first so whole turns are exact
            let turns = (profile.cfo * t as f64).fract();
            y *= Complex64::from_polar(1.0, TAU * turns);
            if let Some(w) = &walk {
                if t > 0 {
                    phi += w.sample(&mut rng);
                }
                y *= Complex64::from_polar(1.0, phi);
            }
            y
        })
        .collect())
}
