//! Run configuration: plain-text `key=value` files with typo-safe parsing.
//!
//! Unknown and duplicated keys are rejected rather than ignored, so a
//! misspelled option can never silently fall back to a default. Relative
//! paths resolve against the config file's directory, which keeps shipped
//! presets relocatable.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::nnkit::StageTag;
use crate::{Error, Result};

pub const DEFAULT_PATCH: usize = 128;
pub const DEFAULT_BATCH: usize = 8;
pub const DEFAULT_ITERATIONS: u64 = 2000;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_LOG_EVERY: u64 = 100;
/// Constant noise level of the fixed-Gaussian ablation, in image units.
pub const DEFAULT_FGN_SIGMA: f64 = 25.0 / 255.0;
/// Photon peak of the Poisson ablation.
pub const DEFAULT_PN_PEAK: f64 = 255.0;

/// Pipeline variations exercised by the ablation runner. `None` is the full
/// pipeline; the others remove or retrain one piece at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    None,
    NoDn,
    NoNfm,
    NoSep,
    Fgn,
    Pn,
}

impl AblationVariant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => AblationVariant::None,
            "no_dn" => AblationVariant::NoDn,
            "no_nfm" => AblationVariant::NoNfm,
            "no_sep" => AblationVariant::NoSep,
            "fgn" => AblationVariant::Fgn,
            "pn" => AblationVariant::Pn,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?}, expected none|no_dn|no_nfm|no_sep|fgn|pn"
                )))
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::None => "none",
            AblationVariant::NoDn => "no_dn",
            AblationVariant::NoNfm => "no_nfm",
            AblationVariant::NoSep => "no_sep",
            AblationVariant::Fgn => "fgn",
            AblationVariant::Pn => "pn",
        }
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training or ablation run. Fields are public so harnesses can build
/// configs directly; [`RunConfig::parse`] is the file-backed constructor.
#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Stage named in the file; a CLI `--stage` flag takes precedence.
    pub stage: Option<StageTag>,
    /// Paired low/high manifest.
    pub pairs: Option<PathBuf>,
    /// Multi-exposure sequence manifest.
    pub sequences: Option<PathBuf>,
    /// Directory receiving checkpoints and logs.
    pub out_dir: PathBuf,
    pub patch: usize,
    pub batch: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub seed: u64,
    pub log_every: u64,
    pub variant: AblationVariant,
    pub fgn_sigma: f64,
    pub pn_peak: f64,
}

impl RunConfig {
    /// Defaults with everything optional unset; `out_dir` must be supplied.
    pub fn with_out_dir(out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            stage: None,
            pairs: None,
            sequences: None,
            out_dir: out_dir.into(),
            patch: DEFAULT_PATCH,
            batch: DEFAULT_BATCH,
            iterations: DEFAULT_ITERATIONS,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            log_every: DEFAULT_LOG_EVERY,
            variant: AblationVariant::None,
            fgn_sigma: DEFAULT_FGN_SIGMA,
            pn_peak: DEFAULT_PN_PEAK,
        }
    }

    /// Reads a `key=value` file. Blank lines and `#` comments are skipped;
    /// every other line must be a known key. Paths resolve relative to the
    /// file's directory; `out` defaults to `checkpoints` beside the file.
    pub fn parse(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let mut cfg = RunConfig::with_out_dir(base.join("checkpoints"));
        let mut seen: HashSet<String> = HashSet::new();
        let mut fgn_sigma_set = false;
        let mut pn_peak_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {} is not key=value: {line:?}",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key {key:?}")));
            }
            match key {
                "stage" => {
                    cfg.stage = Some(StageTag::parse(value).map_err(|e| {
                        Error::Config(format!("stage: {e}"))
                    })?)
                }
                "pairs" => cfg.pairs = Some(resolve(value)),
                "sequences" => cfg.sequences = Some(resolve(value)),
                "out" => cfg.out_dir = resolve(value),
                "patch" => cfg.patch = parse_num(key, value)?,
                "batch" => cfg.batch = parse_num(key, value)?,
                "iterations" => cfg.iterations = parse_num(key, value)?,
                "lr" => cfg.learning_rate = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "log_every" => cfg.log_every = parse_num(key, value)?,
                "variant" => cfg.variant = AblationVariant::parse(value)?,
                "fgn_sigma" => {
                    cfg.fgn_sigma = parse_num(key, value)?;
                    fgn_sigma_set = true;
                }
                "pn_peak" => {
                    cfg.pn_peak = parse_num(key, value)?;
                    pn_peak_set = true;
                }
                other => {
                    return Err(Error::Config(format!("unknown key {other:?}")));
                }
            }
        }
        if fgn_sigma_set && cfg.variant != AblationVariant::Fgn {
            return Err(Error::Config(
                "fgn_sigma is only valid with variant=fgn".into(),
            ));
        }
        if pn_peak_set && cfg.variant != AblationVariant::Pn {
            return Err(Error::Config(
                "pn_peak is only valid with variant=pn".into(),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks shared by the file parser and hand-built configs.
    pub fn validate(&self) -> Result<()> {
        if self.patch < 16 || self.patch % 8 != 0 {
            return Err(Error::Config(format!(
                "patch must be a multiple of 8 and at least 16, got {}",
                self.patch
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.fgn_sigma >= 0.0 && self.fgn_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "fgn_sigma must be nonnegative, got {}",
                self.fgn_sigma
            )));
        }
        if !(self.pn_peak > 0.0 && self.pn_peak.is_finite()) {
            return Err(Error::Config(format!(
                "pn_peak must be positive, got {}",
                self.pn_peak
            )));
        }
        Ok(())
    }

    /// The paired manifest, or a config error naming the missing key.
    pub fn pairs_manifest(&self) -> Result<&Path> {
        self.pairs
            .as_deref()
            .ok_or_else(|| Error::Config("config is missing pairs=".into()))
    }

    /// The sequence manifest, or a config error naming the missing key.
    pub fn sequences_manifest(&self) -> Result<&Path> {
        self.sequences
            .as_deref()
            .ok_or_else(|| Error::Config("config is missing sequences=".into()))
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse {value:?}")))
}
