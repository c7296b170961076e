//! `GPD1` dataset files and their text manifests.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "GPD1"
//! n: u64, k: u64, g: u64
//! n × { keypoints: 2k × f64, grid: g² × f64, points: 2k × f64, corrupted: u8 }
//! ```

use std::path::{Path, PathBuf};

use gpoe_core::data::{generate_dataset, Dataset, NoiseSpec, ToyScene};
use gpoe_core::rng::derive;

use crate::binary::{put_f64s, Reader};
use crate::error::Result;
use crate::fs::{atomic_write, read};

pub const MAGIC: &[u8; 4] = b"GPD1";
const FORMAT: &str = "GPD1";

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let per_scene = 8 * (4 * d.keypoints + d.grid_size * d.grid_size) + 1;
    let mut out = Vec::with_capacity(28 + d.len() * per_scene);
    out.extend_from_slice(MAGIC);
    for v in [d.len(), d.keypoints, d.grid_size] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for s in &d.scenes {
        put_f64s(&mut out, &s.keypoints);
        put_f64s(&mut out, &s.grid);
        put_f64s(&mut out, &s.points);
        out.push(s.corrupted as u8);
    }
    out
}

/// Parses a whole file image. `path` only labels errors.
pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = Reader::new(bytes, path, FORMAT);
    r.magic(MAGIC)?;
    let mut counts = [0usize; 3];
    for (c, what) in counts.iter_mut().zip(["n", "k", "g"]) {
        let at = r.offset();
        let v = r.u64(what)?;
        *c = usize::try_from(v)
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| r.error_at(at, format!("{what} = {v} is not a positive size")))?;
    }
    let [n, k, g] = counts;
    let cells = g
        .checked_mul(g)
        .ok_or_else(|| r.error_at(20, format!("grid size {g} overflows")))?;
    let per_scene = (4 * k + cells)
        .checked_mul(8)
        .and_then(|b| b.checked_add(1))
        .ok_or_else(|| r.error_at(12, "scene size overflows"))?;
    match n.checked_mul(per_scene) {
        Some(need) if need <= r.remaining() => {}
        _ => {
            let whole = r.remaining() / per_scene;
            return Err(r.error_at(
                r.offset() + whole * per_scene,
                format!("truncated: {n} scenes declared, {whole} complete"),
            ));
        }
    }
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let start = r.offset();
        let keypoints = r.f64s(2 * k, "keypoints")?;
        let grid = r.f64s(cells, "grid")?;
        let points = r.f64s(2 * k, "points")?;
        let flag_at = r.offset();
        let corrupted = match r.u8("flag")? {
            0 => false,
            1 => true,
            b => return Err(r.error_at(flag_at, format!("scene {i} flag byte {b}"))),
        };
        if keypoints.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(r.error_at(start, format!("scene {i} keypoint outside the unit square")));
        }
        if grid.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(r.error_at(start, format!("scene {i} grid value outside [0, 1]")));
        }
        if points.iter().any(|c| !c.is_finite()) {
            return Err(r.error_at(start, format!("scene {i} has a non-finite point")));
        }
        scenes.push(ToyScene { keypoints, grid, points, corrupted });
    }
    r.finish()?;
    Ok(Dataset { keypoints: k, grid_size: g, scenes })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read(path)?, path)
}

/// Provenance written next to a dataset as `<file>.manifest`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub role: String,
    pub seed: u64,
    pub noise: NoiseSpec,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn manifest_text(d: &Dataset, m: &Manifest) -> String {
    let flagged: Vec<String> = d
        .scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.corrupted)
        .map(|(i, _)| i.to_string())
        .collect();
    let lines = [
        format!("format={FORMAT}"),
        format!("role={}", m.role),
        format!("seed={}", m.seed),
        format!("n={}", d.len()),
        format!("keypoints={}", d.keypoints),
        format!("grid={}", d.grid_size),
        format!("pixel_fraction={}", m.noise.pixel_fraction),
        format!("gaussian_sigma={}", m.noise.gaussian_sigma),
        format!("data_fraction={}", m.noise.data_fraction),
        format!("corrupted_count={}", flagged.len()),
        format!("corrupted={}", flagged.join(",")),
    ];
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

/// Writes the dataset and its manifest, each atomically.
pub fn save_dataset(path: &Path, d: &Dataset, manifest: &Manifest) -> Result<()> {
    atomic_write(path, &encode_dataset(d))?;
    atomic_write(&manifest_path(path), manifest_text(d, manifest).as_bytes())
}

/// Seeds of the train and test sets drawn by `generate` for one user seed.
pub fn split_seeds(seed: u64) -> (u64, u64) {
    (derive(seed, 1), derive(seed, 2))
}

/// The train and test sets `generate` writes for these sizes and seed.
pub fn generate_pair(
    n_train: usize,
    n_test: usize,
    keypoints: usize,
    grid: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_seeds(seed);
    Ok((
        generate_dataset(n_train, keypoints, grid, a)?,
        generate_dataset(n_test, keypoints, grid, b)?,
    ))
}
