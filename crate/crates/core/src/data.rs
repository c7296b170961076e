//! Synthetic crossmodal scenes and the noise injectors.
//!
//! Each scene is an articulated chain of `k` keypoints in the unit square
//! (the prediction target), a `g × g` occupancy rendering of it (the primary
//! input) and a jittered copy of the keypoints (the auxiliary modality).

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_4;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Result};
use crate::model::{ModalityBatch, ModalityKind, ModalitySpec};
use crate::numerics::NumArray;
use crate::rng::stream;

/// Standard deviation of the jitter that turns keypoints into points.
pub const POINT_JITTER: f64 = 0.01;

pub const INPUT_NAME: &str = "grid";
pub const TARGET_NAME: &str = "keypoints";
pub const AUX_NAME: &str = "points";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    /// `2k` coordinates, `(x, y)` interleaved.
    pub keypoints: Vec<f64>,
    /// `g * g` cells, row-major with rows along y.
    pub grid: Vec<f64>,
    /// `2k` jittered keypoint coordinates.
    pub points: Vec<f64>,
    /// Set once noise injection touched this scene.
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub keypoints: usize,
    pub grid_size: usize,
    pub scenes: Vec<ToyScene>,
}

/// Corruption applied to a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSpec {
    /// Fraction of grid cells replaced in each corrupted scene.
    pub pixel_fraction: f64,
    /// Standard deviation of the noise added to each corrupted scene's points.
    pub gaussian_sigma: f64,
    /// Fraction of scenes to corrupt.
    pub data_fraction: f64,
}

impl NoiseSpec {
    pub const CLEAN: NoiseSpec = NoiseSpec {
        pixel_fraction: 0.0,
        gaussian_sigma: 0.0,
        data_fraction: 0.0,
    };

    pub fn new(pixel_fraction: f64, gaussian_sigma: f64, data_fraction: f64) -> Result<Self> {
        let s = Self {
            pixel_fraction,
            gaussian_sigma,
            data_fraction,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.pixel_fraction) {
            return Err(contract!(
                "pixel fraction {} not in [0, 1]",
                self.pixel_fraction
            ));
        }
        if !unit(self.data_fraction) {
            return Err(contract!(
                "data fraction {} not in [0, 1]",
                self.data_fraction
            ));
        }
        if !(self.gaussian_sigma >= 0.0) || !self.gaussian_sigma.is_finite() {
            return Err(contract!(
                "gaussian sigma {} must be >= 0",
                self.gaussian_sigma
            ));
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        self.data_fraction == 0.0 || (self.pixel_fraction == 0.0 && self.gaussian_sigma == 0.0)
    }
}

/// Draws `n` reproducible scenes. Scene `i` uses its own stream of `seed`.
pub fn generate_dataset(n: usize, k: usize, g: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || k == 0 || g < 4 {
        return Err(contract!(
            "need n >= 1, k >= 1, g >= 4; got n={n}, k={k}, g={g}"
        ));
    }
    let scenes = (0..n)
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let keypoints = chain_keypoints(k, g, &mut rng);
            let grid = render_grid(&keypoints, g)?;
            let points = keypoints
                .iter()
                .map(|&c| c + POINT_JITTER * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Ok(ToyScene {
                keypoints,
                grid,
                points,
                corrupted: false,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        keypoints: k,
        grid_size: g,
        scenes,
    })
}

/// Chain of `k` segments with smoothly turning headings, translated to a
/// random spot that keeps every keypoint inside the canvas.
fn chain_keypoints<R: Rng + ?Sized>(k: usize, g: usize, rng: &mut R) -> Vec<f64> {
    let segment = (0.6 / k as f64).min(0.15);
    let mut heading: f64 = rng.random_range(-FRAC_PI_4..FRAC_PI_4);
    let (mut x, mut y) = (0.0, 0.0);
    let mut kp = Vec::with_capacity(2 * k);
    for j in 0..k {
        if j > 0 {
            heading += rng.random_range(-FRAC_PI_4..FRAC_PI_4);
        }
        x += segment * libm::cos(heading);
        y += segment * libm::sin(heading);
        kp.push(x);
        kp.push(y);
    }
    let margin = 0.5 / g as f64;
    for axis in 0..2 {
        let coords = kp.iter().skip(axis).step_by(2);
        let lo = coords.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = coords.copied().fold(f64::NEG_INFINITY, f64::max);
        let (from, to) = (margin - lo, 1.0 - margin - hi);
        let shift = if to > from {
            rng.random_range(from..to)
        } else {
            from
        };
        for c in kp.iter_mut().skip(axis).step_by(2) {
            *c += shift;
        }
    }
    kp
}

/// Bilinear 2×2 splat of every keypoint onto a `g × g` grid, clamped to [0, 1].
///
/// Cell `(col, row)` has its centre at `((col + 0.5) / g, (row + 0.5) / g)`.
pub fn render_grid(keypoints: &[f64], g: usize) -> Result<Vec<f64>> {
    if keypoints.is_empty() || keypoints.len() % 2 != 0 {
        return Err(contract!(
            "need a non-empty list of (x, y) pairs, got {} coordinates",
            keypoints.len()
        ));
    }
    if g == 0 {
        return Err(contract!("grid size must be >= 1"));
    }
    if let Some(bad) = keypoints.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(contract!(
            "keypoint coordinate {bad} outside the unit square"
        ));
    }
    let mut grid = vec![0.0; g * g];
    let gf = g as f64;
    for p in keypoints.chunks_exact(2) {
        let u = p[0] * gf - 0.5;
        let v = p[1] * gf - 0.5;
        let (c0, r0) = (libm::floor(u), libm::floor(v));
        let (fx, fy) = (u - c0, v - r0);
        for (dc, wx) in [(0, 1.0 - fx), (1, fx)] {
            for (dr, wy) in [(0, 1.0 - fy), (1, fy)] {
                let (c, r) = (c0 as i64 + dc, r0 as i64 + dr);
                if (0..g as i64).contains(&c) && (0..g as i64).contains(&r) {
                    grid[r as usize * g + c as usize] += wx * wy;
                }
            }
        }
    }
    for v in &mut grid {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(grid)
}

/// Number of positions a fraction selects out of `len`.
pub fn selected_count(fraction: f64, len: usize) -> usize {
    libm::floor(fraction * len as f64) as usize
}

/// Replaces `⌊p · len⌋` distinct cells, chosen uniformly, with uniform
/// `[0, 1)` values.
pub fn corrupt_pixels<R: Rng + ?Sized>(grid: &[f64], p: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(contract!("pixel fraction {p} not in [0, 1]"));
    }
    let mut out = grid.to_vec();
    let count = selected_count(p, grid.len());
    for i in index::sample(rng, grid.len(), count) {
        out[i] = rng.random::<f64>();
    }
    Ok(out)
}

/// Adds `sigma · ε`, `ε ~ N(0, 1)`, to every coordinate.
pub fn add_gaussian_noise<R: Rng + ?Sized>(
    points: &[f64],
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(contract!("gaussian sigma {sigma} must be >= 0"));
    }
    if sigma == 0.0 {
        return Ok(points.to_vec());
    }
    Ok(points
        .iter()
        .map(|&c| c + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Corrupts `⌊data_fraction · n⌋` distinct scenes and flags them.
///
/// The selection uses stream 0 of `seed`; scene `i`'s corruption uses stream
/// `i + 1`, so the result does not depend on processing order.
pub fn apply_noise(dataset: &Dataset, spec: &NoiseSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut out = dataset.clone();
    let n = out.scenes.len();
    let mut chooser = stream(seed, 0);
    let chosen = index::sample(&mut chooser, n, selected_count(spec.data_fraction, n));
    for i in chosen {
        let mut rng = stream(seed, i as u64 + 1);
        let scene = &mut out.scenes[i];
        scene.grid = corrupt_pixels(&scene.grid, spec.pixel_fraction, &mut rng)?;
        scene.points = add_gaussian_noise(&scene.points, spec.gaussian_sigma, &mut rng)?;
        scene.corrupted = true;
    }
    Ok(out)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn target_dim(&self) -> usize {
        2 * self.keypoints
    }

    pub fn input_spec(&self) -> ModalitySpec {
        ModalitySpec::new(INPUT_NAME, self.input_dim(), ModalityKind::Binary)
    }

    pub fn target_spec(&self) -> ModalitySpec {
        ModalitySpec::new(TARGET_NAME, self.target_dim(), ModalityKind::Continuous)
    }

    pub fn aux_specs(&self) -> Vec<ModalitySpec> {
        vec![ModalitySpec::new(
            AUX_NAME,
            self.target_dim(),
            ModalityKind::Continuous,
        )]
    }

    pub fn corrupted_count(&self) -> usize {
        self.scenes.iter().filter(|s| s.corrupted).count()
    }

    /// Checks sizes and value ranges of every scene.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.scenes.iter().enumerate() {
            if s.keypoints.len() != self.target_dim()
                || s.points.len() != self.target_dim()
                || s.grid.len() != self.input_dim()
            {
                return Err(contract!("scene {i} has inconsistent sizes"));
            }
        }
        Ok(())
    }

    /// Gathers scenes `rows` into a batch with every modality present.
    pub fn batch(&self, rows: &[usize]) -> Result<ModalityBatch> {
        if rows.is_empty() {
            return Err(contract!("empty batch"));
        }
        let gather = |f: fn(&ToyScene) -> &[f64]| -> Result<NumArray> {
            let picked: Vec<&[f64]> = rows.iter().map(|&r| f(&self.scenes[r])).collect();
            NumArray::from_rows(&picked)
        };
        Ok(ModalityBatch {
            input: Some(gather(|s| &s.grid)?),
            target: Some(gather(|s| &s.keypoints)?),
            aux: vec![Some(gather(|s| &s.points)?)],
            corrupted: rows.iter().map(|&r| self.scenes[r].corrupted).collect(),
        })
    }

    pub fn inputs(&self) -> Result<NumArray> {
        let rows: Vec<&[f64]> = self.scenes.iter().map(|s| s.grid.as_slice()).collect();
        NumArray::from_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let a = generate_dataset(50, 5, 16, 7).unwrap();
        let b = generate_dataset(50, 5, 16, 7).unwrap();
        assert_eq!(a, b);
        for s in &a.scenes {
            assert!(s.keypoints.iter().all(|c| (0.0..=1.0).contains(c)));
            assert!(s.grid.iter().all(|c| (0.0..=1.0).contains(c)));
            assert!(s.points.iter().all(|c| c.is_finite()));
        }
        assert_ne!(a, generate_dataset(50, 5, 16, 8).unwrap());
    }

    #[test]
    fn occupancy_mean_strictly_inside_unit_interval() {
        let d = generate_dataset(1000, 5, 16, 1).unwrap();
        let total: f64 = d.scenes.iter().map(|s| s.grid.iter().sum::<f64>()).sum();
        let mean = total / (1000.0 * 256.0);
        assert!(mean > 0.0 && mean < 1.0, "{mean}");
    }

    #[test]
    fn generation_rejects_bad_sizes() {
        assert!(generate_dataset(0, 5, 16, 1).is_err());
        assert!(generate_dataset(1, 0, 16, 1).is_err());
        assert!(generate_dataset(1, 5, 3, 1).is_err());
    }

    #[test]
    fn render_rejects_empty_and_out_of_range() {
        assert!(render_grid(&[], 8).is_err());
        assert!(render_grid(&[0.5], 8).is_err());
        assert!(render_grid(&[1.2, 0.5], 8).is_err());
    }

    #[test]
    fn keypoint_at_cell_centre_fills_that_cell() {
        let g = 8;
        // centre of column 3, row 5
        let grid = render_grid(&[3.5 / 8.0, 5.5 / 8.0], g).unwrap();
        assert_eq!(grid[5 * g + 3], 1.0);
        assert_eq!(grid.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn whole_cell_translation_shifts_grid() {
        let g = 16;
        let kp = [0.3125, 0.40625, 0.5, 0.59375, 0.21875, 0.28125];
        let shifted: Vec<f64> = kp
            .iter()
            .enumerate()
            .map(|(i, &c)| if i % 2 == 0 { c + 1.0 / g as f64 } else { c })
            .collect();
        let a = render_grid(&kp, g).unwrap();
        let b = render_grid(&shifted, g).unwrap();
        for r in 0..g {
            for c in 1..g {
                assert_eq!(b[r * g + c], a[r * g + c - 1]);
            }
        }
    }

    #[test]
    fn splat_value_falls_with_distance() {
        let g = 8;
        let near = render_grid(&[3.6 / 8.0, 5.5 / 8.0], g).unwrap();
        let far = render_grid(&[3.9 / 8.0, 5.5 / 8.0], g).unwrap();
        assert!(near[5 * g + 3] > far[5 * g + 3]);
    }

    #[test]
    fn pixel_corruption_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid: Vec<f64> = (0..10_000).map(|i| (i % 7) as f64 / 7.0 + 0.01).collect();
        assert_eq!(corrupt_pixels(&grid, 0.0, &mut rng).unwrap(), grid);
        let all = corrupt_pixels(&grid, 1.0, &mut rng).unwrap();
        assert!(all.iter().zip(&grid).all(|(a, b)| a != b));
        let half = corrupt_pixels(&grid, 0.5, &mut rng).unwrap();
        let changed = half.iter().zip(&grid).filter(|(a, b)| a != b).count();
        assert!((4990..=5000).contains(&changed), "{changed}");
        assert!(corrupt_pixels(&grid, 1.5, &mut rng).is_err());
    }

    #[test]
    fn gaussian_noise_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = vec![0.5; 100_000];
        assert_eq!(add_gaussian_noise(&pts, 0.0, &mut rng).unwrap(), pts);
        let sigma = 0.2;
        let noisy = add_gaussian_noise(&pts, sigma, &mut rng).unwrap();
        let d: Vec<f64> = noisy.iter().zip(&pts).map(|(a, b)| a - b).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = libm::sqrt(d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0));
        assert!(mean.abs() <= 3.0 * sigma / libm::sqrt(n), "{mean}");
        assert!((sd / sigma - 1.0).abs() <= 0.02, "{sd}");
        assert!(add_gaussian_noise(&pts, -1.0, &mut rng).is_err());
    }

    #[test]
    fn apply_noise_examples() {
        let d = generate_dataset(1000, 3, 8, 4).unwrap();
        assert_eq!(apply_noise(&d, &NoiseSpec::CLEAN, 1).unwrap(), d);

        let flags_only = apply_noise(&d, &NoiseSpec::new(0.0, 0.0, 1.0).unwrap(), 1).unwrap();
        assert_eq!(flags_only.corrupted_count(), 1000);
        for (a, b) in flags_only.scenes.iter().zip(&d.scenes) {
            assert_eq!((&a.grid, &a.points), (&b.grid, &b.points));
        }

        let spec = NoiseSpec::new(0.5, 0.1, 0.3).unwrap();
        let noisy = apply_noise(&d, &spec, 1).unwrap();
        assert_eq!(noisy.corrupted_count(), 300);
        assert_eq!(noisy, apply_noise(&d, &spec, 1).unwrap());
        for (a, b) in noisy.scenes.iter().zip(&d.scenes) {
            if !a.corrupted {
                assert_eq!(a, b);
            }
            assert_eq!(a.keypoints, b.keypoints);
        }
    }

    #[test]
    fn noise_spec_ranges() {
        assert!(NoiseSpec::new(1.1, 0.0, 0.0).is_err());
        assert!(NoiseSpec::new(0.0, -0.1, 0.0).is_err());
        assert!(NoiseSpec::new(0.0, 0.0, -0.5).is_err());
        assert!(NoiseSpec::new(0.3, 0.1, 0.3).is_ok());
    }

    #[test]
    fn batches_carry_every_modality() {
        let d = generate_dataset(10, 2, 4, 3).unwrap();
        let b = d.batch(&[0, 3, 9]).unwrap();
        assert_eq!(b.rows(), 3);
        assert_eq!(b.input.as_ref().unwrap().shape(), &[3, 16]);
        assert_eq!(
            b.target.as_ref().unwrap().row_slice(1),
            d.scenes[3].keypoints.as_slice()
        );
        assert_eq!(b.aux.len(), 1);
    }
}
