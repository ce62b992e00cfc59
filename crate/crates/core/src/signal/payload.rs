use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const SAMPLES_PER_SYMBOL: usize = 4;
pub const ROLLOFF: f64 = 0.35;
/// Pulse length in symbols on each side of the peak.
pub const PULSE_HALF_SPAN: usize = 6;
pub const OFDM_SUBCARRIERS: usize = 64;
pub const OFDM_CP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    Psk,
    Ofdm,
    /// Alternating segments of the two, chosen at random per segment.
    Hybrid,
}

impl std::str::FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psk" => Ok(SignalKind::Psk),
            "ofdm" => Ok(SignalKind::Ofdm),
            "hybrid" => Ok(SignalKind::Hybrid),
            other => Err(Error::invalid(format!("unknown signal kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for SignalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SignalKind::Psk => "psk",
            SignalKind::Ofdm => "ofdm",
            SignalKind::Hybrid => "hybrid",
        })
    }
}

fn qpsk(rng: &mut impl Rng) -> Complex64 {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let re = if rng.random::<bool>() { a } else { -a };
    let im = if rng.random::<bool>() { a } else { -a };
    Complex64::new(re, im)
}

/// Raised-cosine impulse response sampled at `sps` per symbol, peak 1.
pub fn raised_cosine(sps: usize, beta: f64, half_span: usize) -> Vec<f64> {
    let n = half_span * sps;
    (0..=2 * n)
        .map(|i| {
            let t = (i as f64 - n as f64) / sps as f64;
            let sinc = if t == 0.0 { 1.0 } else { (PI * t).sin() / (PI * t) };
            let d = 1.0 - (2.0 * beta * t).powi(2);
            let shaping = if d.abs() < 1e-12 {
                PI / 4.0
            } else {
                (PI * beta * t).cos() / d
            };
            sinc * shaping
        })
        .collect()
}

/// QPSK at four samples per symbol through a raised-cosine pulse, scaled to
/// unit average power. Sample `k * SAMPLES_PER_SYMBOL` sits on symbol `k`.
pub fn gen_psk(n: usize, rng: &mut impl Rng) -> Vec<Complex64> {
    let sps = SAMPLES_PER_SYMBOL;
    let h = raised_cosine(sps, ROLLOFF, PULSE_HALF_SPAN);
    let energy: f64 = h.iter().map(|v| v * v).sum();
    let gain = (sps as f64 / energy).sqrt();
    let pad = PULSE_HALF_SPAN;
    let nsym = n.div_ceil(sps) + 2 * pad + 1;
    let symbols: Vec<Complex64> = (0..nsym).map(|_| qpsk(rng)).collect();
    let center = PULSE_HALF_SPAN * sps;
    (0..n)
        .map(|i| {
            // output sample i corresponds to time (i + pad*sps) on the symbol grid
            let t = i + pad * sps;
            let first = (t + sps).saturating_sub(center + sps) / sps;
            let last = ((t + center) / sps).min(nsym - 1);
            let mut acc = Complex64::new(0.0, 0.0);
            for k in first..=last {
                let off = t as isize - (k * sps) as isize + center as isize;
                if off >= 0 && (off as usize) < h.len() {
                    acc += symbols[k] * h[off as usize];
                }
            }
            acc * gain
        })
        .collect()
}

/// OFDM symbols with QPSK on all subcarriers and a cyclic prefix, at unit
/// average power.
pub fn gen_ofdm(n: usize, rng: &mut impl Rng) -> Vec<Complex64> {
    let nfft = OFDM_SUBCARRIERS;
    let ifft = FftPlanner::new().plan_fft_inverse(nfft);
    let scale = 1.0 / (nfft as f64).sqrt();
    let mut out = Vec::with_capacity(n + nfft + OFDM_CP);
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    while out.len() < n {
        buf.iter_mut().for_each(|v| *v = qpsk(rng));
        ifft.process(&mut buf);
        buf.iter_mut().for_each(|v| *v *= scale);
        out.extend_from_slice(&buf[nfft - OFDM_CP..]);
        out.extend_from_slice(&buf);
    }
    out.truncate(n);
    out
}

/// Concatenated segments of `segment` samples, each PSK or OFDM at random.
pub fn gen_hybrid(n: usize, segment: usize, rng: &mut impl Rng) -> Vec<Complex64> {
    let segment = segment.max(1);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = segment.min(n - out.len());
        let part = if rng.random::<bool>() {
            gen_psk(len, rng)
        } else {
            gen_ofdm(len, rng)
        };
        out.extend(part);
    }
    out
}

pub const DEFAULT_HYBRID_SEGMENT: usize = 4096;

/// Random baseband payload of `n` samples, deterministic in `seed`.
pub fn gen_payload(kind: SignalKind, n: usize, seed: u64) -> Result<Vec<Complex64>> {
    gen_payload_segmented(kind, n, DEFAULT_HYBRID_SEGMENT, seed)
}

pub fn gen_payload_segmented(
    kind: SignalKind,
    n: usize,
    segment: usize,
    seed: u64,
) -> Result<Vec<Complex64>> {
    if n == 0 {
        return Err(Error::invalid("payload length must be at least 1"));
    }
    let mut rng = seed::rng(seed, "payload", &[]);
    Ok(match kind {
        SignalKind::Psk => gen_psk(n, &mut rng),
        SignalKind::Ofdm => gen_ofdm(n, &mut rng),
        SignalKind::Hybrid => gen_hybrid(n, segment, &mut rng),
    })
}
