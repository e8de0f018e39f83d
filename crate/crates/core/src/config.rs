//! Run configuration shared by the command-line tool and checkpoints.
//!
//! Files hold one `key = value` pair per line; `#` starts a comment. The
//! same keys are accepted as command-line overrides through
//! [`RunConfig::set`].

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::contamination::default_grid;
use crate::micronet::{make_shapes_dataset, MicroNetConfig, TrainSample};
use crate::rng::derive_seed;
use crate::{Error, Result};

/// Every recognised key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "classes",
    "ignore",
    "eps",
    "seed",
    "np_list",
    "nr_list",
    "height",
    "width",
    "train_images",
    "val_images",
    "feature_channels",
    "downsample",
    "kernel",
    "dilation",
    "hidden",
    "patch",
    "lambda",
    "lr",
    "momentum",
    "epochs",
    "augment",
    "filter_order",
];

const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;

const MICRONET_KEYS: std::ops::Range<usize> = 10..KEYS.len();

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub np_list: Vec<f64>,
    pub nr_list: Vec<f64>,
    /// Size of generated shapes images.
    pub height: usize,
    pub width: usize,
    pub train_images: usize,
    pub val_images: usize,
    /// Holds the class count, ignore label and eps as well.
    pub micronet: MicroNetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            np_list: default_grid(),
            nr_list: default_grid(),
            height: 32,
            width: 32,
            train_images: 20,
            val_images: 20,
            micronet: MicroNetConfig {
                num_classes: 8,
                learning_rate: 0.2,
                momentum: 0.5,
                ..MicroNetConfig::default()
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// Comma-separated non-negative reals, e.g. `0,0.5,1`.
pub fn parse_list(value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| {
            let x: f64 = parse("list", v.trim())?;
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::Config(format!("list entries must be non-negative, got {x}")));
            }
            Ok(x)
        })
        .collect()
}

fn format_list(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults overridden by `text`, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies every `key = value` line without validating the result.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            seen.push(key);
            self.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.micronet;
        match key {
            "classes" => m.num_classes = parse(key, value)?,
            "ignore" => m.ignore_label = parse(key, value)?,
            "eps" => m.eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "np_list" => self.np_list = parse_list(value)?,
            "nr_list" => self.nr_list = parse_list(value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "train_images" => self.train_images = parse(key, value)?,
            "val_images" => self.val_images = parse(key, value)?,
            "feature_channels" => m.feature_channels = parse(key, value)?,
            "downsample" => m.downsample = parse(key, value)?,
            "kernel" => m.kernel = parse(key, value)?,
            "dilation" => m.dilation = parse(key, value)?,
            "hidden" => m.hidden = parse(key, value)?,
            "patch" => m.patch = parse(key, value)?,
            "lambda" => m.lambda = parse(key, value)?,
            "lr" => m.learning_rate = parse(key, value)?,
            "momentum" => m.momentum = parse(key, value)?,
            "epochs" => m.epochs = parse(key, value)?,
            "augment" => m.augment = parse(key, value)?,
            "filter_order" => m.filter_order = value.parse()?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.micronet.validate()?;
        if self.np_list.is_empty() || self.nr_list.is_empty() {
            return Err(Error::Config("grid lists must not be empty".into()));
        }
        let s = self.micronet.downsample;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(s) || !self.width.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "image size {}×{} must be positive multiples of downsample {s}",
                self.height, self.width
            )));
        }
        if self.train_images == 0 {
            return Err(Error::Config("train_images must be positive".into()));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let m = &self.micronet;
        match key {
            "classes" => m.num_classes.to_string(),
            "ignore" => m.ignore_label.to_string(),
            "eps" => m.eps.to_string(),
            "seed" => self.seed.to_string(),
            "np_list" => format_list(&self.np_list),
            "nr_list" => format_list(&self.nr_list),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "train_images" => self.train_images.to_string(),
            "val_images" => self.val_images.to_string(),
            "feature_channels" => m.feature_channels.to_string(),
            "downsample" => m.downsample.to_string(),
            "kernel" => m.kernel.to_string(),
            "dilation" => m.dilation.to_string(),
            "hidden" => m.hidden.to_string(),
            "patch" => m.patch.to_string(),
            "lambda" => m.lambda.to_string(),
            "lr" => m.learning_rate.to_string(),
            "momentum" => m.momentum.to_string(),
            "epochs" => m.epochs.to_string(),
            "augment" => m.augment.to_string(),
            "filter_order" => m.filter_order.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// All keys in file syntax; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            writeln!(s, "{key} = {}", self.value_of(key)).unwrap();
        }
        s
    }
}

impl RunConfig {
    /// Training and validation shapes sets drawn from independent streams
    /// of `seed`.
    pub fn shapes_split(&self) -> Result<(Vec<TrainSample>, Vec<TrainSample>)> {
        let c = self.micronet.num_classes;
        let train = make_shapes_dataset(
            self.train_images,
            self.height,
            self.width,
            c,
            derive_seed(self.seed, &[STREAM_TRAIN]),
        )?;
        let val = make_shapes_dataset(
            self.val_images,
            self.height,
            self.width,
            c,
            derive_seed(self.seed, &[STREAM_VAL]),
        )?;
        Ok((train, val))
    }
}

/// The network's fields in file syntax, including classes, ignore and eps.
pub fn micronet_to_text(config: &MicroNetConfig) -> String {
    let run = RunConfig {
        micronet: config.clone(),
        ..RunConfig::default()
    };
    let mut s = String::new();
    for key in KEYS[..3].iter().chain(&KEYS[MICRONET_KEYS]) {
        writeln!(s, "{key} = {}", run.value_of(key)).unwrap();
    }
    s
}

/// Inverse of [`micronet_to_text`]; rejects keys that do not describe the network.
pub fn micronet_from_text(text: &str) -> Result<MicroNetConfig> {
    let mut run = RunConfig::default();
    run.apply_text(text)?;
    if run != (RunConfig { micronet: run.micronet.clone(), ..RunConfig::default() }) {
        return Err(Error::Config("network config holds non-network keys".into()));
    }
    run.micronet.validate()?;
    Ok(run.micronet)
}
