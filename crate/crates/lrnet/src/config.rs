//! Flat `key = value` run configuration shared by every subcommand.
//!
//! One file configures paths, the model, training, and synthesis. Lines
//! starting with `#` are comments; unknown keys are errors so typos cannot
//! silently fall back to defaults. Command-line flags override file values.

use crate::data::{AugmentConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// A structural variant with one module class disabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    NoLfea,
    NoLfd,
    NoRft,
    NoSbam,
}

impl Ablation {
    pub const ALL: [Ablation; 4] =
        [Ablation::NoLfea, Ablation::NoLfd, Ablation::NoRft, Ablation::NoSbam];

    /// Disable the corresponding module class on a model config.
    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Ablation::NoLfea => cfg.use_lfea = false,
            Ablation::NoLfd => cfg.use_lfd = false,
            Ablation::NoRft => cfg.use_rft = false,
            Ablation::NoSbam => cfg.use_sbam = false,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::NoLfea => "no-lfea",
            Ablation::NoLfd => "no-lfd",
            Ablation::NoRft => "no-rft",
            Ablation::NoSbam => "no-sbam",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-lfea" => Ok(Ablation::NoLfea),
            "no-lfd" => Ok(Ablation::NoLfd),
            "no-rft" => Ok(Ablation::NoRft),
            "no-sbam" => Ok(Ablation::NoSbam),
            other => Err(Error::Config(format!(
                "unknown ablation '{other}' (expected no-lfea, no-lfd, no-rft, or no-sbam)"
            ))),
        }
    }
}

/// Every tunable of a run, with a default for each field.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // Paths.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub weights: PathBuf,
    // Model.
    pub window: usize,
    pub channel_mult: f64,
    pub eca_k: usize,
    pub ablate: Vec<Ablation>,
    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training crop side; 0 means "match the window".
    pub crop: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
    pub contrast: bool,
    // Synthesis.
    pub count: usize,
    pub extent_min: usize,
    pub extent_max: usize,
    pub targets_min: usize,
    pub targets_max: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub background_spacing: usize,
    pub background_min: f64,
    pub background_max: f64,
    pub noise: f64,
    // Shared.
    pub seed: u64,
    pub threads: usize,
    pub tau: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let synth = SynthConfig::default();
        RunConfig {
            data_dir: "data".into(),
            out_dir: "out".into(),
            weights: "out/weights-best.lrnw".into(),
            window: model.window,
            channel_mult: model.channel_multiplier,
            eca_k: model.eca_k,
            ablate: Vec::new(),
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            crop: 0,
            hflip: true,
            vflip: true,
            rotate: true,
            contrast: true,
            count: synth.count,
            extent_min: synth.extent_min,
            extent_max: synth.extent_max,
            targets_min: synth.targets_min,
            targets_max: synth.targets_max,
            sigma_min: synth.sigma_min,
            sigma_max: synth.sigma_max,
            amplitude_min: synth.amplitude_min,
            amplitude_max: synth.amplitude_max,
            background_spacing: synth.background_spacing,
            background_min: synth.background_min,
            background_max: synth.background_max,
            noise: synth.noise,
            seed: 0,
            threads: 1,
            tau: 0.5,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("config key '{key}' has unparseable value '{value}'"))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "config key '{key}' expects true or false, got '{other}'"
        ))),
    }
}

impl RunConfig {
    /// Apply one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = value.into(),
            "out_dir" => self.out_dir = value.into(),
            "weights" => self.weights = value.into(),
            "window" => self.window = parse_value(key, value)?,
            "channel_mult" => self.channel_mult = parse_value(key, value)?,
            "eca_k" => self.eca_k = parse_value(key, value)?,
            "ablate" => {
                self.ablate = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(Ablation::from_str)
                    .collect::<Result<Vec<_>>>()?;
            }
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "crop" => self.crop = parse_value(key, value)?,
            "hflip" => self.hflip = parse_bool(key, value)?,
            "vflip" => self.vflip = parse_bool(key, value)?,
            "rotate" => self.rotate = parse_bool(key, value)?,
            "contrast" => self.contrast = parse_bool(key, value)?,
            "count" => self.count = parse_value(key, value)?,
            "extent_min" => self.extent_min = parse_value(key, value)?,
            "extent_max" => self.extent_max = parse_value(key, value)?,
            "targets_min" => self.targets_min = parse_value(key, value)?,
            "targets_max" => self.targets_max = parse_value(key, value)?,
            "sigma_min" => self.sigma_min = parse_value(key, value)?,
            "sigma_max" => self.sigma_max = parse_value(key, value)?,
            "amplitude_min" => self.amplitude_min = parse_value(key, value)?,
            "amplitude_max" => self.amplitude_max = parse_value(key, value)?,
            "background_spacing" => self.background_spacing = parse_value(key, value)?,
            "background_min" => self.background_min = parse_value(key, value)?,
            "background_max" => self.background_max = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "threads" => self.threads = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse configuration text: one `key = value` per line, `#` comments.
    /// Later occurrences of a key override earlier ones.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {} is not 'key = value': '{line}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_str(&text)
    }

    /// Render as configuration text that parses back to an equal value.
    pub fn serialize(&self) -> String {
        let ablate =
            self.ablate.iter().map(Ablation::to_string).collect::<Vec<_>>().join(",");
        format!(
            "# run configuration\n\
             data_dir = {}\n\
             out_dir = {}\n\
             weights = {}\n\
             window = {}\n\
             channel_mult = {}\n\
             eca_k = {}\n\
             ablate = {ablate}\n\
             epochs = {}\n\
             batch_size = {}\n\
             learning_rate = {}\n\
             crop = {}\n\
             hflip = {}\n\
             vflip = {}\n\
             rotate = {}\n\
             contrast = {}\n\
             count = {}\n\
             extent_min = {}\n\
             extent_max = {}\n\
             targets_min = {}\n\
             targets_max = {}\n\
             sigma_min = {}\n\
             sigma_max = {}\n\
             amplitude_min = {}\n\
             amplitude_max = {}\n\
             background_spacing = {}\n\
             background_min = {}\n\
             background_max = {}\n\
             noise = {}\n\
             seed = {}\n\
             threads = {}\n\
             tau = {}\n",
            self.data_dir.display(),
            self.out_dir.display(),
            self.weights.display(),
            self.window,
            self.channel_mult,
            self.eca_k,
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.crop,
            self.hflip,
            self.vflip,
            self.rotate,
            self.contrast,
            self.count,
            self.extent_min,
            self.extent_max,
            self.targets_min,
            self.targets_max,
            self.sigma_min,
            self.sigma_max,
            self.amplitude_min,
            self.amplitude_max,
            self.background_spacing,
            self.background_min,
            self.background_max,
            self.noise,
            self.seed,
            self.threads,
            self.tau,
        )
    }

    /// The model this configuration describes.
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig {
            window: self.window,
            channel_multiplier: self.channel_mult,
            eca_k: self.eca_k,
            ..ModelConfig::default()
        };
        for ablation in &self.ablate {
            ablation.apply(&mut cfg);
        }
        cfg
    }

    /// The training run this configuration describes. A `crop` of 0
    /// resolves to the window so the two stay in lockstep by default.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            crop: if self.crop == 0 { self.window } else { self.crop },
            seed: self.seed,
            augment: AugmentConfig {
                hflip: self.hflip,
                vflip: self.vflip,
                rotate: self.rotate,
                contrast: self.contrast,
            },
        }
    }

    /// The synthesis parameters this configuration describes.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            count: self.count,
            extent_min: self.extent_min,
            extent_max: self.extent_max,
            targets_min: self.targets_min,
            targets_max: self.targets_max,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            amplitude_min: self.amplitude_min,
            amplitude_max: self.amplitude_max,
            background_spacing: self.background_spacing,
            background_min: self.background_min,
            background_max: self.background_max,
            noise: self.noise,
            seed: self.seed,
        }
    }
}
