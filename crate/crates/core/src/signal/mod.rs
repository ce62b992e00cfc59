//! Synthetic transmitter fingerprints.
//!
//! Each emulated device sends a random payload through its own hardware
//! impairments and then through a recording-day channel. Streams can be
//! written to and read from interleaved 32-bit IQ files with a text sidecar.

pub mod channel;
pub mod impair;
pub mod payload;

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::seed;

pub use channel::{apply_channel, default_conditions, ChannelCondition, ConditionSpec};
pub use impair::{apply_device_impairments, default_profiles, DeviceProfile};
pub use payload::{gen_payload, gen_payload_segmented, SignalKind};

pub const DEFAULT_SAMPLE_RATE: f64 = 20e6;

/// Complex baseband samples from one device under one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct IqStream {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
    pub device: usize,
    pub condition: String,
}

impl IqStream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Rounds every component to the nearest 32-bit float so that in-memory
/// streams equal what an IQ file stores.
pub fn quantize_f32(x: &mut [Complex64]) {
    for v in x {
        *v = Complex64::new(v.re as f32 as f64, v.im as f32 as f64);
    }
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub kind: SignalKind,
    pub windows_per_device: usize,
    pub window: usize,
    /// Hybrid payloads switch kind every `hybrid_segment` samples.
    pub hybrid_segment: usize,
    pub sample_rate: f64,
}

impl SynthOptions {
    pub fn new(kind: SignalKind, windows_per_device: usize, window: usize) -> Self {
        Self {
            kind,
            windows_per_device,
            window,
            hybrid_segment: 4 * window,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

/// One stream per (condition, device) pair, conditions outermost; each is
/// exactly `windows_per_device * window` samples long.
pub fn synth_dataset(
    profiles: &[DeviceProfile],
    conditions: &[ConditionSpec],
    opts: &SynthOptions,
    seed: u64,
) -> Result<Vec<IqStream>> {
    if profiles.len() < 2 {
        return Err(Error::invalid("need at least two device profiles"));
    }
    for (i, a) in profiles.iter().enumerate() {
        a.validate()?;
        if profiles[..i].iter().any(|b| b.id == a.id) {
            return Err(Error::invalid(format!("duplicate device id {}", a.id)));
        }
        if profiles[..i]
            .iter()
            .any(|b| DeviceProfile { id: a.id, ..b.clone() } == *a)
        {
            return Err(Error::invalid(format!(
                "device {} duplicates another profile's parameters",
                a.id
            )));
        }
    }
    for c in conditions {
        c.validate()?;
    }
    let n = opts
        .windows_per_device
        .checked_mul(opts.window)
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::invalid(format!(
                "cannot synthesize {} windows of {} samples",
                opts.windows_per_device, opts.window
            ))
        })?;
    let mut out = Vec::with_capacity(profiles.len() * conditions.len());
    for (ci, cond) in conditions.iter().enumerate() {
        for p in profiles {
            let coords = [ci as u64, p.id as u64];
            let payload_seed = seed::derive(seed, "payload", &coords);
            let x = gen_payload_segmented(opts.kind, n, opts.hybrid_segment, payload_seed)?;
            let x = apply_device_impairments(&x, p, seed::derive(seed, "impair", &coords))?;
            let channel = cond.realize(ci, p.id, seed);
            let mut y = apply_channel(&x, &channel)?;
            quantize_f32(&mut y);
            out.push(IqStream {
                samples: y,
                sample_rate: opts.sample_rate,
                device: p.id,
                condition: cond.id.clone(),
            });
        }
    }
    Ok(out)
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes interleaved little-endian f32 `I0 Q0 I1 Q1 ...` to `path` and the
/// `key = value` sidecar to `path.meta`.
pub fn write_iq(path: &Path, stream: &IqStream) -> Result<()> {
    let mut bytes = Vec::with_capacity(stream.len() * 8);
    for v in &stream.samples {
        bytes.extend((v.re as f32).to_le_bytes());
        bytes.extend((v.im as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = format!(
        "device_label = {}\ncondition_id = {}\nsample_rate = {}\ncount = {}\n",
        stream.device,
        stream.condition,
        stream.sample_rate,
        stream.len()
    );
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))
}

pub fn read_iq(path: &Path) -> Result<IqStream> {
    let mp = meta_path(path);
    let meta = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let kv = crate::kv::parse(&meta, &mp)?;
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| Error::format(&mp, format!("missing key `{k}`")))
    };
    let parse_err = |k: &str| Error::format(&mp, format!("bad value for `{k}`"));
    let device: usize = get("device_label")?.parse().map_err(|_| parse_err("device_label"))?;
    let condition = get("condition_id")?.clone();
    let sample_rate: f64 = get("sample_rate")?.parse().map_err(|_| parse_err("sample_rate"))?;
    let count: usize = get("count")?.parse().map_err(|_| parse_err("count"))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * 8 {
        return Err(Error::format(
            path,
            format!("{} bytes on disk, sidecar declares {count} samples", bytes.len()),
        ));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
            let im = f32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    Ok(IqStream {
        samples,
        sample_rate,
        device,
        condition,
    })
}
