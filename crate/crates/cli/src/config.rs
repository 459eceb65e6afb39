//! Run configuration: defaults, an optional INI file, then command-line
//! overrides.
//!
//! ```ini
//! [model]
//! variant = full
//! conv_channels = 16, 16, 32
//! position_width = 8
//! aggregate_width = 64
//! fc_hidden = 32
//! k = 16
//! kernel_len = 16
//! dropout = 0.5
//! downsample_ratios =
//! pooling = max
//!
//! [train]
//! lr_init = 0.02
//! lr_final = 0.002
//! momentum = 0.9
//! epochs = 12
//! batch_size = 8
//! augment = true
//!
//! [data]
//! source = synthetic
//! points = 256
//! train_per_class = 100
//! test_per_class = 50
//! classes = sphere, cube, torus
//! seed = 0
//! ```
//!
//! Every key is optional. Unknown sections and keys are errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use paiconv_core::dataio::{AugmentConfig, ShapeClass};
use paiconv_core::{ClassifierConfig, Pooling, TrainConfig, Variant};

use crate::error::CliError;

/// Where training and evaluation clouds come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// Tab-separated `path<TAB>class` lines.
    Manifest(PathBuf),
}

impl FromStr for DataSource {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.trim() {
            "" => Err(CliError::Usage("empty data source".into())),
            "synthetic" => Ok(DataSource::Synthetic),
            path => Ok(DataSource::Manifest(PathBuf::from(path))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub points: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub classes: Vec<ShapeClass>,
    /// Seeds synthetic generation and mesh sampling.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            points: 256,
            train_per_class: 100,
            test_per_class: 50,
            classes: ShapeClass::DEFAULT.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `fc_widths` holds only the hidden widths; the class count is appended
    /// once the data is known.
    pub model: ClassifierConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ClassifierConfig::desk(1);
        model.fc_widths.pop();
        Self {
            model,
            train: TrainConfig::desk(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path`, if given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let ini = Ini::load_from_file(path).map_err(|e| CliError::Config {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?;
            cfg.apply_ini(&ini).map_err(|msg| CliError::Config {
                path: path.to_path_buf(),
                msg,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_ini_str(text: &str) -> Result<Self, CliError> {
        let path = PathBuf::from("<string>");
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Config {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let mut cfg = Self::default();
        cfg.apply_ini(&ini).map_err(|msg| CliError::Config { path, msg })?;
        Ok(cfg)
    }

    fn apply_ini(&mut self, ini: &Ini) -> Result<(), String> {
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                self.set(section, key, value)
                    .map_err(|e| format!("[{section}] {key}: {e}"))?;
            }
        }
        Ok(())
    }

    /// Sets one `section.key`.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match (section, key) {
            ("model", "variant") => m.variant = parse(value)?,
            ("model", "conv_channels") => m.conv_channels = list(value)?,
            ("model", "position_width") => m.position_width = parse(value)?,
            ("model", "aggregate_width") => m.aggregate_width = parse(value)?,
            ("model", "fc_hidden") => m.fc_widths = list(value)?,
            ("model", "k") => m.k = parse(value)?,
            ("model", "kernel_len") => m.kernel_len = parse(value)?,
            ("model", "dropout") => m.dropout = parse(value)?,
            ("model", "downsample_ratios") => m.downsample_ratios = list(value)?,
            ("model", "pooling") => {
                m.pooling = Pooling::parse(value.trim()).map_err(|e| e.to_string())?
            }
            ("train", "lr_init") => t.lr_init = parse(value)?,
            ("train", "lr_final") => t.lr_final = parse(value)?,
            ("train", "momentum") => t.momentum = parse(value)?,
            ("train", "epochs") => t.epochs = parse(value)?,
            ("train", "batch_size") => t.batch_size = parse(value)?,
            ("train", "augment") => {
                t.augment = parse::<bool>(value)?.then(AugmentConfig::default)
            }
            ("data", "source") => d.source = value.parse().map_err(|e: CliError| e.to_string())?,
            ("data", "points") => d.points = parse(value)?,
            ("data", "train_per_class") => d.train_per_class = parse(value)?,
            ("data", "test_per_class") => d.test_per_class = parse(value)?,
            ("data", "classes") => d.classes = list(value)?,
            ("data", "seed") => d.seed = parse(value)?,
            ("model" | "train" | "data", _) => return Err("unknown key".into()),
            _ => return Err("unknown section".into()),
        }
        Ok(())
    }

    /// Model configuration for `num_classes` outputs.
    pub fn model_for(&self, num_classes: usize) -> ClassifierConfig {
        let mut m = self.model.clone();
        m.fc_widths.push(num_classes);
        m
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| format!("bad value `{}`: {e}", value.trim()))
}

/// Comma- or space-separated list; empty means no entries.
fn list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(parse)
        .collect()
}

/// Parses a `Variant` for clap.
pub fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: paiconv_core::Error| e.to_string())
}
