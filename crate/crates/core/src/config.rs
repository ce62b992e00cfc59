//! Experiment configuration: flat `section.key = value` text on top of a
//! named base profile.
//!
//! Loading order is profile defaults, then the config file, then the
//! `FEDPRINT_SEED` environment variable. Unknown keys are errors. The
//! resolved dump lists every key, defaults included, and its SHA-256 is the
//! config hash stamped on every result.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fed::{AdaptConfig, FedConfig};
use crate::models::{Arch, BaselineConfig, BaselineKind, DenseNetConfig};
use crate::seed;
use crate::signal::{default_conditions, default_profiles, ConditionSpec, DeviceProfile, SignalKind, SynthOptions};

pub const SEED_ENV: &str = "FEDPRINT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Laptop-sized run: 20 clients, 3000 windows per condition, 30 rounds.
    Desk,
    /// Full-size run: 100 clients, 12000 windows per condition, 50 rounds.
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile `{other}` (desk | full)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (f32 | f64)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub signal_kind: SignalKind,
    pub windows_per_condition: usize,
    pub window: usize,
    pub stride: usize,
    pub hybrid_segment: usize,
    pub sample_rate: f64,
    pub devices: Vec<DeviceProfile>,
    /// Training-day and deployment-day channel recipes.
    pub source: ConditionSpec,
    pub target: ConditionSpec,
    /// `proposed`, `mlp`, `cnn` or `resnet`.
    pub model: String,
    pub densenet: DenseNetConfig,
    pub hidden: usize,
    pub clients: usize,
    /// Local hyperparameters; its `seed` is derived from the master seed.
    pub fed: FedConfig,
    pub adapt_rounds: usize,
    pub adapt_max_clients: usize,
    pub rhos: Vec<usize>,
    pub holdout: f64,
    pub precision: Precision,
}

impl ExperimentConfig {
    pub fn profile(p: Profile) -> Self {
        let [source, target]: [ConditionSpec; 2] =
            default_conditions().try_into().expect("two default conditions");
        let base = Self {
            seed: 0,
            signal_kind: SignalKind::Psk,
            windows_per_condition: 12000,
            window: 1024,
            stride: 1024,
            hybrid_segment: 4096,
            sample_rate: crate::signal::DEFAULT_SAMPLE_RATE,
            devices: default_profiles(),
            source,
            target,
            model: "proposed".into(),
            densenet: DenseNetConfig::default(),
            hidden: 512,
            clients: 100,
            fed: FedConfig::default(),
            adapt_rounds: 5,
            adapt_max_clients: 100,
            rhos: vec![0, 50, 100, 200, 400],
            holdout: 0.2,
            precision: Precision::F32,
        };
        match p {
            Profile::Full => base,
            Profile::Desk => Self {
                windows_per_condition: 3000,
                window: 256,
                stride: 256,
                hybrid_segment: 1024,
                clients: 20,
                adapt_max_clients: 20,
                fed: FedConfig {
                    rounds: 30,
                    local_epochs: 2,
                    ..FedConfig::default()
                },
                ..base
            },
        }
    }

    /// Profile defaults, then `text`, then the seed override.
    pub fn load(profile: Profile, text: Option<(&str, &Path)>, seed_override: Option<&str>) -> Result<Self> {
        let mut cfg = Self::profile(profile);
        let mut window_set = false;
        let mut segment_set = false;
        if let Some((text, path)) = text {
            let entries = crate::kv::parse(text, path).map_err(|e| Error::Config(e.to_string()))?;
            // device count first so per-device keys can extend the table
            if let Some(v) = entries.get("devices.count") {
                cfg.set_device_count(parse_val("devices.count", v)?, &entries)?;
            }
            for (k, v) in &entries {
                if k == "devices.count" {
                    continue;
                }
                window_set |= k == "signal.window";
                segment_set |= k == "signal.hybrid_segment";
                cfg.set(k, v)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            }
            if window_set && !entries.contains_key("signal.stride") {
                cfg.stride = cfg.window;
            }
        }
        if window_set && !segment_set {
            cfg.hybrid_segment = 4 * cfg.window;
        }
        if let Some(s) = seed_override {
            cfg.seed = parse_val(SEED_ENV, s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_file(profile: Profile, path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            ),
            None => None,
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::load(
            profile,
            text.as_deref().zip(path),
            env.as_deref(),
        )
    }

    fn set_device_count(&mut self, n: usize, entries: &indexmap::IndexMap<String, String>) -> Result<()> {
        let defaults = default_profiles();
        if n < self.devices.len() {
            self.devices.truncate(n);
        }
        while self.devices.len() < n {
            let id = self.devices.len();
            let p = defaults.get(id).cloned();
            let p = match p {
                Some(p) => p,
                None => {
                    for f in DEVICE_FIELDS {
                        if !entries.contains_key(&format!("device.{id}.{f}")) {
                            return Err(Error::Config(format!(
                                "device {id} has no default profile; set every `device.{id}.*` key"
                            )));
                        }
                    }
                    DeviceProfile::identity(id)
                }
            };
            self.devices.push(p);
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = |v: &str| -> Result<f64> { parse_val(key, v) };
        match key {
            "seed" => self.seed = parse_val(key, v)?,
            "signal.kind" => self.signal_kind = v.parse()?,
            "signal.windows_per_condition" => self.windows_per_condition = parse_val(key, v)?,
            "signal.window" => {
                self.window = parse_val(key, v)?;
            }
            "signal.stride" => self.stride = parse_val(key, v)?,
            "signal.hybrid_segment" => self.hybrid_segment = parse_val(key, v)?,
            "signal.sample_rate" => self.sample_rate = p(v)?,
            "model.family" => self.model = v.to_string(),
            "model.stem_channels" => self.densenet.stem_channels = parse_val(key, v)?,
            "model.blocks" => self.densenet.blocks = parse_val(key, v)?,
            "model.layers_per_block" => self.densenet.layers_per_block = parse_val(key, v)?,
            "model.growth" => self.densenet.growth = parse_val(key, v)?,
            "model.compression" => self.densenet.compression = p(v)?,
            "model.embedding_dim" => self.densenet.embedding_dim = parse_val(key, v)?,
            "model.hidden" => self.hidden = parse_val(key, v)?,
            "fed.clients" => self.clients = parse_val(key, v)?,
            "fed.rounds" => self.fed.rounds = parse_val(key, v)?,
            "fed.fraction" => self.fed.fraction = p(v)?,
            "fed.local_epochs" => self.fed.local_epochs = parse_val(key, v)?,
            "fed.batch_size" => self.fed.batch_size = parse_val(key, v)?,
            "fed.optimizer" => self.fed.optimizer = v.parse()?,
            "fed.lr" => self.fed.lr = p(v)?,
            "fed.margin" => self.fed.margin = p(v)?,
            "adapt.rounds" => self.adapt_rounds = parse_val(key, v)?,
            "adapt.max_clients" => self.adapt_max_clients = parse_val(key, v)?,
            "adapt.rhos" => {
                self.rhos = v
                    .split(',')
                    .map(|s| parse_val(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "data.holdout" => self.holdout = p(v)?,
            "runtime.precision" => self.precision = v.parse()?,
            _ => {
                if let Some(rest) = key.strip_prefix("device.") {
                    return self.set_device(rest, v);
                }
                if let Some(rest) = key.strip_prefix("condition.") {
                    return self.set_condition(rest, v);
                }
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }

    fn set_device(&mut self, rest: &str, v: &str) -> Result<()> {
        let key = format!("device.{rest}");
        let (idx, field) = rest
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let idx: usize = parse_val(&key, idx)?;
        let n = self.devices.len();
        let d = self.devices.get_mut(idx).ok_or_else(|| {
            Error::Config(format!("`{key}`: only {n} devices (raise devices.count first)"))
        })?;
        let x: f64 = parse_val(&key, v)?;
        match field {
            "iq_gain" => d.iq_gain = x,
            "iq_phase" => d.iq_phase = x,
            "dc_i" => d.dc_i = x,
            "dc_q" => d.dc_q = x,
            "cfo" => d.cfo = x,
            "phase_noise" => d.phase_noise = x,
            "a3_re" => d.a3 = Complex64::new(x, d.a3.im),
            "a3_im" => d.a3 = Complex64::new(d.a3.re, x),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn set_condition(&mut self, rest: &str, v: &str) -> Result<()> {
        let key = format!("condition.{rest}");
        let (which, field) = rest
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let c = match which {
            "source" => &mut self.source,
            "target" => &mut self.target,
            _ => return Err(Error::Config(format!("unknown key `{key}` (source | target)"))),
        };
        match field {
            "id" => c.id = v.to_string(),
            "taps" => c.taps = parse_val(&key, v)?,
            "decay" => c.decay = parse_val(&key, v)?,
            "k_factor" => c.k_factor = parse_val(&key, v)?,
            "snr_db" => {
                c.snr_db = if v == "none" { None } else { Some(parse_val(&key, v)?) }
            }
            "per_device" => c.per_device = parse_val(&key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.devices.len() < 2 {
            return cfg_err("need at least two devices".into());
        }
        for d in &self.devices {
            d.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        for c in [&self.source, &self.target] {
            c.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.source.id == self.target.id {
            return cfg_err("source and target conditions need distinct ids".into());
        }
        if self.window == 0 || self.stride == 0 || self.hybrid_segment == 0 {
            return cfg_err("window, stride and hybrid segment must be positive".into());
        }
        if self.windows_per_condition == 0 || !self.windows_per_condition.is_multiple_of(self.devices.len()) {
            return cfg_err(format!(
                "signal.windows_per_condition = {} must be a positive multiple of the {} devices",
                self.windows_per_condition,
                self.devices.len()
            ));
        }
        if !(self.sample_rate > 0.0) {
            return cfg_err("sample rate must be positive".into());
        }
        self.arch()?;
        if self.clients == 0 || self.adapt_max_clients == 0 {
            return cfg_err("client counts must be at least 1".into());
        }
        self.fed_config().validate()?;
        if self.rhos.is_empty() {
            return cfg_err("adapt.rhos is empty".into());
        }
        if !(0.0..1.0).contains(&self.holdout) || self.holdout == 0.0 {
            return cfg_err(format!("data.holdout {} outside (0, 1)", self.holdout));
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<Arch> {
        let arch = if self.model == "proposed" {
            let c = DenseNetConfig {
                rows: crate::dataset::ROWS,
                width: self.window,
                ..self.densenet.clone()
            };
            c.validate().map_err(|e| Error::Config(e.to_string()))?;
            Arch::Proposed(c)
        } else {
            let kind: BaselineKind = self
                .model
                .parse()
                .map_err(|_| Error::Config(format!("unknown model.family `{}`", self.model)))?;
            Arch::Baseline(BaselineConfig {
                width: self.window,
                classes: self.devices.len(),
                hidden: self.hidden,
                ..BaselineConfig::new(kind)
            })
        };
        Ok(arch)
    }

    /// Named seed for one subsystem (`data`, `model`, `fed`, `partition`, ...).
    pub fn stream_seed(&self, purpose: &str) -> u64 {
        seed::derive(self.seed, purpose, &[])
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            seed: self.stream_seed("fed"),
            ..self.fed.clone()
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            rounds: self.adapt_rounds,
            max_clients: self.adapt_max_clients,
            local: self.fed_config(),
        }
    }

    pub fn synth_options(&self) -> SynthOptions {
        SynthOptions {
            hybrid_segment: self.hybrid_segment,
            sample_rate: self.sample_rate,
            ..SynthOptions::new(
                self.signal_kind,
                self.windows_per_condition / self.devices.len(),
                self.window,
            )
        }
    }

    /// Every key with its effective value, in a fixed order.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("seed", self.seed.to_string());
        kv("signal.kind", self.signal_kind.to_string());
        kv("signal.windows_per_condition", self.windows_per_condition.to_string());
        kv("signal.window", self.window.to_string());
        kv("signal.stride", self.stride.to_string());
        kv("signal.hybrid_segment", self.hybrid_segment.to_string());
        kv("signal.sample_rate", format!("{:?}", self.sample_rate));
        kv("devices.count", self.devices.len().to_string());
        for d in &self.devices {
            let i = d.id;
            for (f, x) in [
                ("iq_gain", d.iq_gain),
                ("iq_phase", d.iq_phase),
                ("dc_i", d.dc_i),
                ("dc_q", d.dc_q),
                ("cfo", d.cfo),
                ("phase_noise", d.phase_noise),
                ("a3_re", d.a3.re),
                ("a3_im", d.a3.im),
            ] {
                kv(&format!("device.{i}.{f}"), format!("{x:?}"));
            }
        }
        for (which, c) in [("source", &self.source), ("target", &self.target)] {
            kv(&format!("condition.{which}.id"), c.id.clone());
            kv(&format!("condition.{which}.taps"), c.taps.to_string());
            kv(&format!("condition.{which}.decay"), format!("{:?}", c.decay));
            kv(&format!("condition.{which}.k_factor"), format!("{:?}", c.k_factor));
            kv(
                &format!("condition.{which}.snr_db"),
                c.snr_db.map_or("none".into(), |v| format!("{v:?}")),
            );
            kv(&format!("condition.{which}.per_device"), c.per_device.to_string());
        }
        let d = &self.densenet;
        kv("model.family", self.model.clone());
        kv("model.stem_channels", d.stem_channels.to_string());
        kv("model.blocks", d.blocks.to_string());
        kv("model.layers_per_block", d.layers_per_block.to_string());
        kv("model.growth", d.growth.to_string());
        kv("model.compression", format!("{:?}", d.compression));
        kv("model.embedding_dim", d.embedding_dim.to_string());
        kv("model.hidden", self.hidden.to_string());
        let f = &self.fed;
        kv("fed.clients", self.clients.to_string());
        kv("fed.rounds", f.rounds.to_string());
        kv("fed.fraction", format!("{:?}", f.fraction));
        kv("fed.local_epochs", f.local_epochs.to_string());
        kv("fed.batch_size", f.batch_size.to_string());
        kv("fed.optimizer", f.optimizer.to_string());
        kv("fed.lr", format!("{:?}", f.lr));
        kv("fed.margin", format!("{:?}", f.margin));
        kv("adapt.rounds", self.adapt_rounds.to_string());
        kv("adapt.max_clients", self.adapt_max_clients.to_string());
        kv(
            "adapt.rhos",
            self.rhos.iter().map(usize::to_string).collect::<Vec<_>>().join(", "),
        );
        kv("data.holdout", format!("{:?}", self.holdout));
        kv("runtime.precision", self.precision.to_string());
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.resolved().as_bytes()))
    }
}

const DEVICE_FIELDS: [&str; 8] = [
    "iq_gain",
    "iq_phase",
    "dc_i",
    "dc_q",
    "cfo",
    "phase_noise",
    "a3_re",
    "a3_im",
];

fn parse_val<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}
