//! Run configuration: built-in defaults, overridden by a `key=value` config
//! file, overridden by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use skinseg_core::model::INPUT_MULTIPLE;
use skinseg_core::optim::SgdConfig;
use skinseg_core::{ArchitectureConfig, Error};

pub const DEFAULT_SIZE: usize = 384;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full VGG-16 widths.
    #[default]
    Canonical,
    /// Reduced widths for desk-scale runs.
    Desk,
}

impl Preset {
    pub fn architecture(self) -> ArchitectureConfig {
        match self {
            Preset::Canonical => ArchitectureConfig::canonical(),
            Preset::Desk => ArchitectureConfig::desk(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "canonical" => Ok(Preset::Canonical),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected canonical or desk)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Canonical => "canonical",
            Preset::Desk => "desk",
        })
    }
}

/// Values read from a config file; every key is optional.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub preset: Option<Preset>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub size: Option<usize>,
    pub threads: Option<usize>,
    pub manifest: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, Error>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("line {line}: bad value for {key}: {e}")))
}

fn set_once<T>(slot: &mut Option<T>, value: T, key: &str, line: usize) -> Result<(), Error> {
    if slot.is_some() {
        return Err(Error::Config(format!("line {line}: {key} given twice")));
    }
    *slot = Some(value);
    Ok(())
}

impl ConfigFile {
    /// Parses `key = value` lines. Blank lines and `#` comments are ignored;
    /// unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut cfg = ConfigFile::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key=value, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(Error::Config(format!("line {line}: {key} has no value")));
            }
            match key {
                "preset" => set_once(&mut cfg.preset, value.parse()?, key, line)?,
                "learning_rate" => set_once(&mut cfg.learning_rate, parse_value(key, value, line)?, key, line)?,
                "momentum" => set_once(&mut cfg.momentum, parse_value(key, value, line)?, key, line)?,
                "weight_decay" => set_once(&mut cfg.weight_decay, parse_value(key, value, line)?, key, line)?,
                "batch_size" => set_once(&mut cfg.batch_size, parse_value(key, value, line)?, key, line)?,
                "seed" => set_once(&mut cfg.seed, parse_value(key, value, line)?, key, line)?,
                "size" => set_once(&mut cfg.size, parse_value(key, value, line)?, key, line)?,
                "threads" => set_once(&mut cfg.threads, parse_value(key, value, line)?, key, line)?,
                "manifest" => set_once(&mut cfg.manifest, PathBuf::from(value), key, line)?,
                "init" => set_once(&mut cfg.init, PathBuf::from(value), key, line)?,
                "out" => set_once(&mut cfg.out, PathBuf::from(value), key, line)?,
                other => return Err(Error::Config(format!("line {line}: unknown key `{other}`"))),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Values taken from the command line; `None` means "not given".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub size: Option<usize>,
    pub threads: Option<usize>,
    pub manifest: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub sgd: SgdConfig,
    pub epochs: u64,
    pub start_epoch: u64,
    pub seed: u64,
    /// Square training resolution.
    pub size: usize,
    pub threads: usize,
    pub manifest: PathBuf,
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub log: PathBuf,
}

impl RunConfig {
    pub fn resolve(flags: Overrides, file: ConfigFile, epochs: u64, start_epoch: u64, log: Option<PathBuf>) -> Result<Self, Error> {
        let defaults = SgdConfig::default();
        let sgd = SgdConfig {
            learning_rate: flags.learning_rate.or(file.learning_rate).unwrap_or(defaults.learning_rate),
            momentum: flags.momentum.or(file.momentum).unwrap_or(defaults.momentum),
            weight_decay: flags.weight_decay.or(file.weight_decay).unwrap_or(defaults.weight_decay),
            batch_size: flags.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
        };
        let manifest = flags
            .manifest
            .or(file.manifest)
            .ok_or_else(|| Error::Config("no manifest given (--manifest or `manifest=` in the config)".into()))?;
        let out = flags
            .out
            .or(file.out)
            .ok_or_else(|| Error::Config("no output checkpoint given (--out or `out=` in the config)".into()))?;
        let log = log.unwrap_or_else(|| {
            let mut s = out.clone().into_os_string();
            s.push(".log");
            PathBuf::from(s)
        });
        let cfg = RunConfig {
            preset: flags.preset.or(file.preset).unwrap_or_default(),
            sgd,
            epochs,
            start_epoch,
            seed: flags.seed.or(file.seed).unwrap_or(0),
            size: flags.size.or(file.size).unwrap_or(DEFAULT_SIZE),
            threads: flags.threads.or(file.threads).unwrap_or(1),
            manifest,
            init: flags.init.or(file.init),
            out,
            log,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.size == 0 || self.size % INPUT_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "size must be a positive multiple of {INPUT_MULTIPLE}, got {}",
                self.size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        self.sgd.validate()
    }
}
