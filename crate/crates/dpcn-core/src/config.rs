//! Run configuration: namespaced `key = value` text files, canonical
//! serialization, and the config fingerprint.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Mid-level feature channels (C).
pub const MID_CHANNELS: usize = 32;
/// High-level feature channels (C_h).
pub const HIGH_CHANNELS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolVariant {
    /// p_s pooled from the foreground vectors, p_s2 pooled from p_s.
    Serial,
    /// Both prototype groups pooled independently from the foreground.
    Parallel,
}

impl PoolVariant {
    pub fn name(self) -> &'static str {
        match self {
            PoolVariant::Serial => "serial",
            PoolVariant::Parallel => "parallel",
        }
    }
}

/// Which dynamic kernels run: any subset of {vertical, horizontal,
/// square}. An empty set disables the dynamic convolution module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSet {
    pub v: bool,
    pub h: bool,
    pub s: bool,
}

impl KernelSet {
    pub const ALL: KernelSet = KernelSet { v: true, h: true, s: true };
    pub const NONE: KernelSet = KernelSet { v: false, h: false, s: false };

    pub fn is_empty(self) -> bool {
        !(self.v || self.h || self.s)
    }

    pub fn count(self) -> usize {
        self.v as usize + self.h as usize + self.s as usize
    }

    pub fn name(self) -> String {
        if self.is_empty() {
            return "none".into();
        }
        let mut parts = Vec::new();
        if self.v {
            parts.push("v");
        }
        if self.h {
            parts.push("h");
        }
        if self.s {
            parts.push("s");
        }
        parts.join("+")
    }

    pub fn parse(s: &str) -> Result<KernelSet> {
        let s = s.trim();
        if s == "none" || s.is_empty() {
            return Ok(KernelSet::NONE);
        }
        let mut set = KernelSet::NONE;
        for part in s.split('+') {
            match part.trim() {
                "v" => set.v = true,
                "h" => set.h = true,
                "s" => set.s = true,
                other => {
                    return Err(Error::Config(format!("unknown kernel '{other}' in '{s}'")))
                }
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // train.*
    pub lr0: f64,
    pub batch: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub warmup_epochs: usize,
    pub poly_power: f64,
    pub shots: usize,
    pub seed: u64,
    pub train_backbone: bool,
    /// Max L2 norm of the batch gradient; 0 disables clipping.
    pub clip: f64,
    // loss.*
    pub lambda: f64,
    // modules
    pub sam_enabled: bool,
    pub ffm_enabled: bool,
    // dcm.*
    pub kernel_size: usize,
    pub pool_variant: PoolVariant,
    pub kernels: KernelSet,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            lr0: 0.005,
            batch: 4,
            epochs: 30,
            episodes_per_epoch: 24,
            warmup_epochs: 10,
            poly_power: 0.9,
            shots: 1,
            seed: 0,
            train_backbone: false,
            clip: 10.0,
            lambda: 1.0,
            sam_enabled: true,
            ffm_enabled: true,
            kernel_size: 5,
            pool_variant: PoolVariant::Serial,
            kernels: KernelSet::ALL,
        }
    }
}

impl Config {
    pub fn dcm_enabled(&self) -> bool {
        !self.kernels.is_empty()
    }

    /// Channel count of the assembled decoder input for this config:
    /// dynamic blocks (or the plain query block), the prototype block,
    /// three activation maps when SAM is on, one refined mask when FFM
    /// is on.
    pub fn xout_channels(&self) -> usize {
        let c = MID_CHANNELS;
        let dyn_blocks = if self.kernels.is_empty() { 1 } else { self.kernels.count() };
        dyn_blocks * c
            + c
            + if self.sam_enabled { 3 } else { 0 }
            + if self.ffm_enabled { 1 } else { 0 }
    }

    /// Canonical `key = value` text, fixed key order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("train.lr0", self.lr0.to_string());
        push("train.batch", self.batch.to_string());
        push("train.epochs", self.epochs.to_string());
        push("train.episodes_per_epoch", self.episodes_per_epoch.to_string());
        push("train.warmup_epochs", self.warmup_epochs.to_string());
        push("train.poly_power", self.poly_power.to_string());
        push("train.shots", self.shots.to_string());
        push("train.seed", self.seed.to_string());
        push("train.train_backbone", self.train_backbone.to_string());
        push("train.clip", self.clip.to_string());
        push("loss.lambda", self.lambda.to_string());
        push("sam.enabled", self.sam_enabled.to_string());
        push("ffm.enabled", self.ffm_enabled.to_string());
        push("dcm.enabled", self.dcm_enabled().to_string());
        push("dcm.kernel_size", self.kernel_size.to_string());
        push("dcm.pool_variant", self.pool_variant.name().to_string());
        push("dcm.kernels", self.kernels.name());
        s
    }

    /// Parse `key = value` lines over the defaults. `#` starts a
    /// comment; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "train.lr0" => self.lr0 = num(key, value)?,
            "train.batch" => self.batch = num(key, value)?,
            "train.epochs" => self.epochs = num(key, value)?,
            "train.episodes_per_epoch" => self.episodes_per_epoch = num(key, value)?,
            "train.warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "train.poly_power" => self.poly_power = num(key, value)?,
            "train.shots" => self.shots = num(key, value)?,
            "train.seed" => self.seed = num(key, value)?,
            "train.train_backbone" => self.train_backbone = num(key, value)?,
            "train.clip" => self.clip = num(key, value)?,
            "loss.lambda" => self.lambda = num(key, value)?,
            "sam.enabled" => self.sam_enabled = num(key, value)?,
            "ffm.enabled" => self.ffm_enabled = num(key, value)?,
            "dcm.enabled" => {
                let on: bool = num(key, value)?;
                if on && self.kernels.is_empty() {
                    self.kernels = KernelSet::ALL;
                } else if !on {
                    self.kernels = KernelSet::NONE;
                }
            }
            "dcm.kernel_size" => {
                self.kernel_size = num(key, value)?;
                if self.kernel_size % 2 == 0 || self.kernel_size < 1 {
                    return Err(Error::Config(format!(
                        "dcm.kernel_size must be odd and positive, got {}",
                        self.kernel_size
                    )));
                }
            }
            "dcm.pool_variant" => {
                self.pool_variant = match value {
                    "serial" => PoolVariant::Serial,
                    "parallel" => PoolVariant::Parallel,
                    other => {
                        return Err(Error::Config(format!("unknown pool_variant '{other}'")))
                    }
                }
            }
            "dcm.kernels" => self.kernels = KernelSet::parse(value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Hash of the canonical config text plus an evaluation seed.
    pub fn fingerprint(&self, seed: u64) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.serialize().as_bytes());
        hasher.update(seed.to_le_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
