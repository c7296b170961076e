//! Flat `key=value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys match the
//! long command-line flags with `-` replaced by `_`; a flag given on the
//! command line overrides the same key from a file.

use std::path::Path;

use gpoe_core::data::NoiseSpec;
use gpoe_core::train::TrainConfig;

use crate::error::{Error, Result};
use crate::fs::read;

/// Keys accepted by [`Settings::set`], in the order [`config_lines`] writes them.
pub const TRAIN_KEYS: [&str; 14] = [
    "mechanism",
    "beta",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "train_pixel_fraction",
    "train_sigma",
    "train_data_fraction",
    "latent_dim",
    "hidden",
    "alpha_hidden",
    "alpha_input",
    "variance_floor",
];

/// Splits text into `(key, value)` pairs, rejecting malformed lines and
/// repeated keys.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            return Err(Error::Usage(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| *seen == key) {
            return Err(Error::Usage(format!("line {}: duplicate key {key:?}", i + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_lines(path: &Path) -> Result<Vec<(String, String)>> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Usage(format!("{}: config is not UTF-8", path.display())))?;
    parse_lines(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Usage(format!("{key}: cannot parse {value:?}: {e}")))
}

/// Comma-separated list; the empty string is the empty list.
pub fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// A [`TrainConfig`] under construction. Noise fields are held apart so
/// they can be set one at a time and validated together.
#[derive(Debug, Clone)]
pub struct Settings {
    config: TrainConfig,
    noise: [f64; 3],
}

impl Default for Settings {
    fn default() -> Self {
        let config = TrainConfig::default();
        let n = config.train_noise;
        Self {
            noise: [n.pixel_fraction, n.gaussian_sigma, n.data_fraction],
            config,
        }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.config;
        match key {
            "mechanism" => c.mechanism = parse_value(key, value)?,
            "beta" => c.beta = parse_value(key, value)?,
            "learning_rate" => c.learning_rate = parse_value(key, value)?,
            "batch_size" => c.batch_size = parse_value(key, value)?,
            "epochs" => c.epochs = parse_value(key, value)?,
            "seed" => c.seed = parse_value(key, value)?,
            "train_pixel_fraction" => self.noise[0] = parse_value(key, value)?,
            "train_sigma" => self.noise[1] = parse_value(key, value)?,
            "train_data_fraction" => self.noise[2] = parse_value(key, value)?,
            "latent_dim" => c.latent_dim = parse_value(key, value)?,
            "hidden" => c.hidden = parse_list(key, value)?,
            "alpha_hidden" => c.alpha_hidden = parse_list(key, value)?,
            "alpha_input" => c.alpha_input = parse_value(key, value)?,
            "variance_floor" => {
                c.variance_floor = match value {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            _ => return Err(Error::Usage(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// The finished configuration; invalid values become usage errors.
    pub fn into_config(self) -> Result<TrainConfig> {
        let [p, s, d] = self.noise;
        let mut config = self.config;
        config.train_noise =
            NoiseSpec::new(p, s, d).map_err(|e| Error::Usage(format!("train noise: {e}")))?;
        config.validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(config)
    }
}

/// `key=value` lines that [`Settings`] parses back to `config` exactly.
pub fn config_lines(config: &TrainConfig) -> Vec<String> {
    let n = &config.train_noise;
    let floor = config
        .variance_floor
        .map_or_else(|| "none".to_string(), |f| f.to_string());
    let values = [
        config.mechanism.as_str().to_string(),
        config.beta.to_string(),
        config.learning_rate.to_string(),
        config.batch_size.to_string(),
        config.epochs.to_string(),
        config.seed.to_string(),
        n.pixel_fraction.to_string(),
        n.gaussian_sigma.to_string(),
        n.data_fraction.to_string(),
        config.latent_dim.to_string(),
        join(&config.hidden),
        join(&config.alpha_hidden),
        config.alpha_input.as_str().to_string(),
        floor,
    ];
    TRAIN_KEYS
        .iter()
        .zip(values)
        .map(|(k, v)| format!("{k}={v}"))
        .collect()
}
