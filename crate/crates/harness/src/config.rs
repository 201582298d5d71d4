//! Plain-text `key=value` configuration.
//!
//! Blank lines and `#` comments are ignored. A config may point at a dataset
//! spec file with `spec = path` (relative to the config file); dataset keys
//! may also appear inline and override the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use wmnet_core::synth::MisalignmentSpec;

use crate::error::{io_err, Error, Result};

/// Which fusion components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelFlags {
    pub wunet: bool,
    pub sawf: bool,
    pub cfm: bool,
    /// With the CFM off, fuse through a cross-attention core instead of
    /// plain addition. SAWF always needs a core, so SAWF on with both cores
    /// off is contradictory.
    pub attention_core: bool,
}

impl ModelFlags {
    pub const ALL_ON: Self = Self {
        wunet: true,
        sawf: true,
        cfm: true,
        attention_core: true,
    };
    /// Element-wise addition only.
    pub const ALL_OFF: Self = Self {
        wunet: false,
        sawf: false,
        cfm: false,
        attention_core: false,
    };

    pub fn new(wunet: bool, sawf: bool, cfm: bool) -> Self {
        Self {
            wunet,
            sawf,
            cfm,
            attention_core: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sawf && !self.cfm && !self.attention_core {
            return Err(Error::Config(
                "sawf needs an interaction core: enable cfm or attention_core".into(),
            ));
        }
        Ok(())
    }

    /// `wunet/sawf/cfm` as three digits, e.g. `101`.
    pub fn code(&self) -> String {
        [self.wunet, self.sawf, self.cfm]
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }
}

/// Synthetic dataset: corruption spec, split sizes, canvas and seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub misalignment: MisalignmentSpec,
    pub canvas: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            misalignment: MisalignmentSpec::neutral(),
            canvas: 64,
            train_size: 800,
            val_size: 200,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.misalignment.set(key, value)? {
            return Ok(true);
        }
        match key {
            "canvas" => self.canvas = parse(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "val_size" => self.val_size = parse(key, value)?,
            "data_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (line, key, value) in kv_lines(text)? {
            if !s.set(key, value)? {
                return Err(Error::Config(format!("line {line}: unknown dataset key {key:?}")));
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.misalignment.validate()?;
        if self.canvas < wmnet_core::synth::MIN_CANVAS || !self.canvas.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "canvas must be a multiple of 16 and at least 16, got {}",
                self.canvas
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "{}canvas={}\ntrain_size={}\nval_size={}\ndata_seed={}\n",
            self.misalignment.to_kv(),
            self.canvas,
            self.train_size,
            self.val_size,
            self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub flags: ModelFlags,
    pub w1: f64,
    pub w2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    /// Seeds per row in ablation and sweep tables.
    pub seeds: usize,
    /// Backbone widths of the four stages.
    pub widths: [usize; 4],
    pub data: DatasetSpec,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            flags: ModelFlags::ALL_ON,
            w1: wmnet_core::sawf::W1_INIT,
            w2: wmnet_core::sawf::W2_INIT,
            epochs: 60,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 10.0,
            seed: 0,
            seeds: 3,
            widths: [8, 16, 24, 32],
            data: DatasetSpec::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Parses config text; `base` resolves a relative `spec` path.
    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let lines = kv_lines(text)?;
        let mut cfg = Self::default();
        // the spec file first, so inline keys win
        if let Some((_, _, path)) = lines.iter().find(|(_, k, _)| *k == "spec") {
            cfg.data = DatasetSpec::load(&base.join(path))?;
        }
        for (line, key, value) in lines {
            if key == "spec" || cfg.data.set(key, value)? {
                continue;
            }
            let f = &mut cfg.flags;
            match key {
                "wunet" => f.wunet = parse_bool(key, value)?,
                "sawf" => f.sawf = parse_bool(key, value)?,
                "cfm" => f.cfm = parse_bool(key, value)?,
                "attention_core" => f.attention_core = parse_bool(key, value)?,
                "w1" => cfg.w1 = parse(key, value)?,
                "w2" => cfg.w2 = parse(key, value)?,
                "epochs" => cfg.epochs = parse(key, value)?,
                "batch_size" => cfg.batch_size = parse(key, value)?,
                "lr" => cfg.lr = parse(key, value)?,
                "momentum" => cfg.momentum = parse(key, value)?,
                "weight_decay" => cfg.weight_decay = parse(key, value)?,
                "grad_clip" => cfg.grad_clip = parse(key, value)?,
                "seed" => cfg.seed = parse(key, value)?,
                "seeds" => cfg.seeds = parse(key, value)?,
                "widths" => cfg.widths = parse_widths(value)?,
                "out_dir" => cfg.out_dir = base.join(value),
                _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        self.data.validate()?;
        if self.batch_size == 0 || self.seeds == 0 {
            return Err(Error::Config("batch_size and seeds must be positive".into()));
        }
        let finite = [self.w1, self.w2, self.lr, self.momentum, self.weight_decay, self.grad_clip];
        if finite.iter().any(|v| !v.is_finite()) || self.lr <= 0.0 {
            return Err(Error::Config("optimiser settings must be finite with lr > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        Ok(())
    }

    /// Canonical, fully resolved text form; the output directory is
    /// excluded because it does not affect results.
    pub fn to_kv(&self) -> String {
        let f = &self.flags;
        let mut s = String::new();
        let _ = write!(
            s,
            "wunet={}\nsawf={}\ncfm={}\nattention_core={}\nw1={}\nw2={}\nepochs={}\nbatch_size={}\nlr={}\nmomentum={}\nweight_decay={}\ngrad_clip={}\nseed={}\nseeds={}\nwidths={}\n",
            f.wunet,
            f.sawf,
            f.cfm,
            f.attention_core,
            self.w1,
            self.w2,
            self.epochs,
            self.batch_size,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.grad_clip,
            self.seed,
            self.seeds,
            self.widths.map(|w| w.to_string()).join(",")
        );
        s.push_str(&self.data.to_kv());
        s
    }

    /// SHA-256 of [`Self::to_kv`], hex, first 16 characters.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

fn kv_lines(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {value:?}"))),
    }
}

fn parse_widths(value: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = value
        .split(',')
        .map(|s| parse("widths", s.trim()))
        .collect::<Result<_>>()?;
    v.try_into()
        .map_err(|_| Error::Config("widths needs exactly four values".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash() {
        let text = "# comment\nsawf = off\nepochs=3\nwidths=8,8,16,16\noffset_x=5\n";
        let cfg = ExperimentConfig::parse_str(text, Path::new(".")).unwrap();
        assert!(!cfg.flags.sawf);
        assert_eq!(cfg.widths, [8, 8, 16, 16]);
        assert_eq!(cfg.data.misalignment.offset_x, 5.0);
        let back = ExperimentConfig::parse_str(&cfg.to_kv(), Path::new(".")).unwrap();
        assert_eq!(back.to_kv(), cfg.to_kv());
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.w1 = 0.5;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new(".");
        assert!(ExperimentConfig::parse_str("bogus=1", p).is_err());
        assert!(ExperimentConfig::parse_str("epochs", p).is_err());
        assert!(ExperimentConfig::parse_str("sawf=maybe", p).is_err());
        assert!(ExperimentConfig::parse_str("cfm=off\nattention_core=off", p).is_err());
        assert!(ExperimentConfig::parse_str("canvas=20", p).is_err());
        assert!(ExperimentConfig::parse_str("deficiency_prob=2", p).is_err());
    }
}
