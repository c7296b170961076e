//! `GPV1` checkpoints: the training configuration plus every named
//! parameter array.
//!
//! ```text
//! "GPV1"
//! config_len: u32, config: UTF-8 key=value lines
//! records: u32
//! records × { name_len: u32, name, ndim: u32, ndim × u64 extents, f64 data }
//! ```
//!
//! The header stores the full [`TrainConfig`] and the modality layout, so a
//! checkpoint alone is enough to rebuild the model and check every record
//! against freshly initialized shapes.

use std::path::Path;

use gpoe_core::model::{Model, ModalityConfig, ModalityKind, ModalitySpec, ModelParams};
use gpoe_core::numerics::NumArray;
use gpoe_core::rng::stream;
use gpoe_core::train::TrainConfig;

use crate::binary::{put_f64s, Reader};
use crate::error::{Error, Result};
use crate::fs::{atomic_write, read};
use crate::settings::{config_lines, parse_lines, Settings};

pub const MAGIC: &[u8; 4] = b"GPV1";
const FORMAT: &str = "GPV1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub modalities: ModalityConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Ok(Model::new(self.modalities.clone())?)
    }
}

fn spec_text(s: &ModalitySpec) -> String {
    format!("{}:{}:{}", s.name, s.dim, s.kind.as_str())
}

fn parse_spec(text: &str) -> Option<ModalitySpec> {
    let mut parts = text.split(':');
    let name = parts.next()?;
    let dim = parts.next()?.parse().ok()?;
    let kind: ModalityKind = parts.next()?.parse().ok()?;
    if parts.next().is_some() || name.is_empty() {
        return None;
    }
    Some(ModalitySpec::new(name, dim, kind))
}

fn header_text(c: &Checkpoint) -> String {
    let mut lines = config_lines(&c.config);
    lines.push(format!("input={}", spec_text(&c.modalities.input)));
    lines.push(format!("target={}", spec_text(&c.modalities.target)));
    let aux: Vec<String> = c.modalities.aux.iter().map(spec_text).collect();
    lines.push(format!("aux={}", aux.join(",")));
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let header = header_text(c);
    let mut out = Vec::with_capacity(16 + header.len() + 8 * c.params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(c.params.len() as u32).to_le_bytes());
    for (name, value) in c.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &e in value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        put_f64s(&mut out, value.data());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, path, FORMAT);
    r.magic(MAGIC)?;
    let len = r.u32("config length")? as usize;
    let header_at = r.offset();
    let header = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|e| r.error_at(header_at, format!("config is not UTF-8: {e}")))?;
    let bad = |msg: String| r.error_at(header_at, msg);

    let mut settings = Settings::default();
    let mut modal: [Option<String>; 3] = [None, None, None];
    let rest = parse_lines(header).map_err(|e| bad(e.to_string()))?;
    for (key, value) in rest {
        let slot = match key.as_str() {
            "input" => 0,
            "target" => 1,
            "aux" => 2,
            _ => {
                settings.set(&key, &value).map_err(|e| bad(e.to_string()))?;
                continue;
            }
        };
        modal[slot] = Some(value);
    }
    let config = settings.into_config().map_err(|e| bad(e.to_string()))?;
    let [input, target, aux] = modal;
    let spec = |v: Option<String>, what: &str| {
        v.as_deref()
            .and_then(parse_spec)
            .ok_or_else(|| bad(format!("missing or malformed {what} modality")))
    };
    let input = spec(input, "input")?;
    let target = spec(target, "target")?;
    let aux = match aux.as_deref() {
        None => return Err(bad("missing aux modalities".into())),
        Some("") => Vec::new(),
        Some(list) => list
            .split(',')
            .map(|s| parse_spec(s).ok_or_else(|| bad(format!("malformed aux modality {s:?}"))))
            .collect::<Result<_>>()?,
    };
    let mut modalities = ModalityConfig::new(input, target, aux);
    modalities.latent_dim = config.latent_dim;
    modalities.hidden = config.hidden.clone();
    modalities.alpha_hidden = config.alpha_hidden.clone();
    modalities.alpha_input = config.alpha_input;
    modalities.variance_floor = config.variance_floor;
    let model = Model::new(modalities.clone()).map_err(|e| bad(e.to_string()))?;
    // Only names and shapes of the template are used.
    let template = model.init_params(&mut stream(0, 0))?;

    let count_at = r.offset();
    let count = r.u32("record count")? as usize;
    if count != template.len() {
        return Err(r.error_at(
            count_at,
            format!("{count} records, model expects {}", template.len()),
        ));
    }
    let mut params = ModelParams::new();
    for (expected_name, expected) in template.iter() {
        let at = r.offset();
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.error_at(at, "record name is not UTF-8"))?;
        if name != expected_name {
            return Err(r.error_at(at, format!("record {name:?}, expected {expected_name:?}")));
        }
        let ndim = r.u32("ndim")? as usize;
        if ndim != expected.rank() {
            return Err(r.error_at(at, format!("{name}: rank {ndim}, expected {}", expected.rank())));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("extent")? as usize);
        }
        if shape != expected.shape() {
            return Err(r.error_at(
                at,
                format!("{name}: shape {shape:?}, expected {:?}", expected.shape()),
            ));
        }
        let data = r.f64s(expected.len(), name)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(r.error_at(at, format!("{name}: non-finite value")));
        }
        params.insert(name, NumArray::new(shape, data)?)?;
    }
    r.finish()?;
    Ok(Checkpoint { config, modalities, params })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    atomic_write(path, &encode_checkpoint(c))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read(path).map_err(|e| match e {
        Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
            Error::Usage(format!("checkpoint {} does not exist", path.display()))
        }
        other => other,
    })?;
    decode_checkpoint(&bytes, path)
}
