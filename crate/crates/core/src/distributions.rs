//! Diagonal Gaussian experts and the fusion rules that combine them.
//!
//! The plain-value functions ([`poe_fuse`], [`gpoe_fuse`], ...) operate on
//! [`DiagonalGaussian`] directly. The `*_nodes` variants build the same
//! expressions inside a [`Graph`] so training can differentiate through them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Error, Result};
use crate::numerics::{Graph, NodeId, NumArray};

/// Lower bound applied to fused variances unless disabled.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-8;

/// Column sums of [`FusionWeights`] must be within this of 1.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

/// Gaussian with diagonal covariance over a latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(contract!(
                "mean has {} dims, variance has {}",
                mean.len(),
                variance.len()
            ));
        }
        if mean.is_empty() {
            return Err(contract!("a Gaussian needs at least one dimension"));
        }
        check_variance(&variance)?;
        Ok(Self { mean, variance })
    }

    pub fn from_log_variance(mean: Vec<f64>, log_variance: &[f64]) -> Result<Self> {
        Self::new(mean, log_variance.iter().map(|&v| libm::exp(v)).collect())
    }

    /// The standard-normal prior `N(0, I)`.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn univariate(mean: f64, variance: f64) -> Result<Self> {
        Self::new(vec![mean], vec![variance])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn precision(&self) -> Vec<f64> {
        self.variance.iter().map(|v| 1.0 / v).collect()
    }

    /// Log density at `z`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(contract!(
                "point has {} dims, Gaussian has {}",
                z.len(),
                self.dim()
            ));
        }
        Ok(z.iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((z, m), v)| -0.5 * (libm::log(2.0 * PI * v) + (z - m) * (z - m) / v))
            .sum())
    }
}

fn check_variance(variance: &[f64]) -> Result<()> {
    for (d, &v) in variance.iter().enumerate() {
        if !(v > 0.0) || !(1.0 / v).is_finite() {
            return Err(Error::Domain(format!(
                "variance must be positive with finite precision, got {v} at dim {d}"
            )));
        }
    }
    Ok(())
}

/// Per-modality, per-dimension credibility weights. Each latent dimension's
/// column sums to 1 across modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    modalities: usize,
    dim: usize,
    alphas: Vec<f64>,
}

impl FusionWeights {
    /// `rows[i][d]` is the weight of modality `i` on latent dimension `d`.
    pub fn new<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let modalities = rows.len();
        if modalities == 0 {
            return Err(contract!("fusion weights need at least one modality"));
        }
        let dim = rows[0].as_ref().len();
        let mut alphas = Vec::with_capacity(modalities * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(contract!("weight rows have unequal lengths"));
            }
            alphas.extend_from_slice(r);
        }
        let w = Self {
            modalities,
            dim,
            alphas,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn uniform(modalities: usize, dim: usize) -> Result<Self> {
        if modalities == 0 || dim == 0 {
            return Err(contract!(
                "fusion weights need at least one modality and dimension"
            ));
        }
        let a = 1.0 / modalities as f64;
        Ok(Self {
            modalities,
            dim,
            alphas: vec![a; modalities * dim],
        })
    }

    /// Softmax across modalities of `[modality × dim]` logits.
    pub fn from_logits<R: AsRef<[f64]>>(logits: &[R]) -> Result<Self> {
        let m = logits.len();
        if m == 0 {
            return Err(contract!("fusion weights need at least one modality"));
        }
        let dim = logits[0].as_ref().len();
        let mut alphas = vec![0.0; m * dim];
        for d in 0..dim {
            let max = logits
                .iter()
                .map(|r| r.as_ref()[d])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (i, r) in logits.iter().enumerate() {
                let e = libm::exp(r.as_ref()[d] - max);
                alphas[i * dim + d] = e;
                total += e;
            }
            for i in 0..m {
                alphas[i * dim + d] /= total;
            }
        }
        Self::new(&alphas.chunks(dim.max(1)).collect::<Vec<_>>())
    }

    fn validate(&self) -> Result<()> {
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(contract!("fusion weights must lie in [0, 1]"));
        }
        for d in 0..self.dim {
            let s: f64 = (0..self.modalities).map(|i| self.get(i, d)).sum();
            if (s - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(contract!("fusion weights for dim {d} sum to {s}, not 1"));
            }
        }
        Ok(())
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, modality: usize, dim: usize) -> f64 {
        self.alphas[modality * self.dim + dim]
    }

    pub fn row(&self, modality: usize) -> &[f64] {
        &self.alphas[modality * self.dim..(modality + 1) * self.dim]
    }
}

fn check_experts(experts: &[DiagonalGaussian]) -> Result<usize> {
    let first = experts
        .first()
        .ok_or_else(|| contract!("fusion needs at least one expert"))?;
    let dim = first.dim();
    if let Some(bad) = experts.iter().position(|e| e.dim() != dim) {
        return Err(contract!(
            "expert {bad} has {} dims, expected {dim}",
            experts[bad].dim()
        ));
    }
    for e in experts {
        check_variance(&e.variance)?;
    }
    Ok(dim)
}

fn weighted_fuse(
    experts: &[DiagonalGaussian],
    weight: impl Fn(usize, usize) -> f64,
    floor: Option<f64>,
) -> Result<DiagonalGaussian> {
    let dim = check_experts(experts)?;
    let mut mean = vec![0.0; dim];
    let mut variance = vec![0.0; dim];
    for d in 0..dim {
        let mut precision = 0.0;
        let mut weighted_mean = 0.0;
        for (i, e) in experts.iter().enumerate() {
            let t = weight(i, d) / e.variance[d];
            precision += t;
            weighted_mean += e.mean[d] * t;
        }
        let mut var = 1.0 / precision;
        if let Some(f) = floor {
            var = var.max(f);
        }
        variance[d] = var;
        mean[d] = weighted_mean * var;
    }
    DiagonalGaussian::new(mean, variance)
}

/// Product of experts: precisions add, the mean is precision-weighted.
pub fn poe_fuse(experts: &[DiagonalGaussian]) -> Result<DiagonalGaussian> {
    poe_fuse_with_floor(experts, Some(DEFAULT_VARIANCE_FLOOR))
}

pub fn poe_fuse_with_floor(
    experts: &[DiagonalGaussian],
    floor: Option<f64>,
) -> Result<DiagonalGaussian> {
    weighted_fuse(experts, |_, _| 1.0, floor)
}

/// Generalized product of experts: each expert's precision is scaled by its
/// weight before the precisions are summed.
pub fn gpoe_fuse(
    experts: &[DiagonalGaussian],
    weights: &FusionWeights,
) -> Result<DiagonalGaussian> {
    gpoe_fuse_with_floor(experts, weights, Some(DEFAULT_VARIANCE_FLOOR))
}

pub fn gpoe_fuse_with_floor(
    experts: &[DiagonalGaussian],
    weights: &FusionWeights,
    floor: Option<f64>,
) -> Result<DiagonalGaussian> {
    let dim = check_experts(experts)?;
    if weights.modalities() != experts.len() || weights.dim() != dim {
        return Err(contract!(
            "weights are {}x{}, experts are {}x{dim}",
            weights.modalities(),
            weights.dim(),
            experts.len()
        ));
    }
    weights.validate()?;
    weighted_fuse(experts, |i, d| weights.get(i, d), floor)
}

/// Picks a mixture component uniformly and draws a reparameterized sample
/// from it. Returns the sample and the component index.
pub fn moe_component_sample<R: Rng + ?Sized>(
    experts: &[DiagonalGaussian],
    rng: &mut R,
) -> Result<(Vec<f64>, usize)> {
    if experts.is_empty() {
        return Err(contract!("mixture needs at least one expert"));
    }
    let index = if experts.len() == 1 {
        0
    } else {
        rng.random_range(0..experts.len())
    };
    let expert = &experts[index];
    let noise: Vec<f64> = (0..expert.dim())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Ok((sample_reparam(expert, &noise)?, index))
}

/// Closed-form `KL(g || N(0, I))`.
pub fn kl_std_normal(g: &DiagonalGaussian) -> Result<f64> {
    check_variance(&g.variance)?;
    Ok(g.mean
        .iter()
        .zip(&g.variance)
        .map(|(m, v)| 0.5 * (m * m + v - 1.0 - libm::log(*v)))
        .sum())
}

/// `z = mean + sqrt(variance) * noise`.
pub fn sample_reparam(g: &DiagonalGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.dim() {
        return Err(contract!(
            "noise has {} dims, Gaussian has {}",
            noise.len(),
            g.dim()
        ));
    }
    Ok(g.mean
        .iter()
        .zip(&g.variance)
        .zip(noise)
        .map(|((m, v), e)| m + libm::sqrt(*v) * e)
        .collect())
}

/// Normalized density of a one-dimensional Gaussian at each point.
pub fn density_curve(g: &DiagonalGaussian, points: &[f64]) -> Result<Vec<f64>> {
    if g.dim() != 1 {
        return Err(contract!(
            "density curves need a 1-D Gaussian, got {} dims",
            g.dim()
        ));
    }
    let (m, v) = (g.mean[0], g.variance[0]);
    let norm = 1.0 / libm::sqrt(2.0 * PI * v);
    Ok(points
        .iter()
        .map(|x| norm * libm::exp(-0.5 * (x - m) * (x - m) / v))
        .collect())
}

/// A Gaussian whose mean and variance live in a [`Graph`]. All three nodes
/// share one shape, typically `[batch, latent]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianNodes {
    pub mean: NodeId,
    pub var: NodeId,
    pub log_var: NodeId,
}

impl GaussianNodes {
    pub fn from_log_var(g: &mut Graph, mean: NodeId, log_var: NodeId) -> Result<Self> {
        same(g, "gaussian", mean, log_var)?;
        let var = g.exp(log_var);
        Ok(Self { mean, var, log_var })
    }

    pub fn from_var(g: &mut Graph, mean: NodeId, var: NodeId) -> Result<Self> {
        same(g, "gaussian", mean, var)?;
        let log_var = g.ln(var);
        Ok(Self { mean, var, log_var })
    }

    /// Extracts the values of row `row` as a plain Gaussian.
    pub fn to_gaussian(&self, g: &Graph, row: usize) -> Result<DiagonalGaussian> {
        DiagonalGaussian::new(
            g.value(self.mean).row_slice(row).to_vec(),
            g.value(self.var).row_slice(row).to_vec(),
        )
    }
}

fn same(g: &Graph, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            op,
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Graph form of [`poe_fuse_with_floor`].
pub fn poe_fuse_nodes(
    g: &mut Graph,
    experts: &[GaussianNodes],
    floor: Option<f64>,
) -> Result<GaussianNodes> {
    let weighted: Result<Vec<(NodeId, NodeId)>> = experts
        .iter()
        .map(|e| Ok((e.mean, g.recip(e.var))))
        .collect();
    fuse_weighted_precisions(g, &weighted?, floor)
}

/// Graph form of [`gpoe_fuse_with_floor`]. `alphas[i]` has the same shape as
/// expert `i`'s mean.
pub fn gpoe_fuse_nodes(
    g: &mut Graph,
    experts: &[GaussianNodes],
    alphas: &[NodeId],
    floor: Option<f64>,
) -> Result<GaussianNodes> {
    if alphas.len() != experts.len() {
        return Err(contract!(
            "{} weight tensors for {} experts",
            alphas.len(),
            experts.len()
        ));
    }
    let mut weighted = Vec::with_capacity(experts.len());
    for (e, &a) in experts.iter().zip(alphas) {
        let t = g.recip(e.var);
        weighted.push((e.mean, g.mul(a, t)?));
    }
    fuse_weighted_precisions(g, &weighted, floor)
}

fn fuse_weighted_precisions(
    g: &mut Graph,
    parts: &[(NodeId, NodeId)],
    floor: Option<f64>,
) -> Result<GaussianNodes> {
    let (&(m0, t0), rest) = parts
        .split_first()
        .ok_or_else(|| contract!("fusion needs at least one expert"))?;
    same(g, "fuse", m0, t0)?;
    let mut precision = t0;
    let mut numerator = g.mul(m0, t0)?;
    for &(m, t) in rest {
        precision = g.add(precision, t)?;
        let mt = g.mul(m, t)?;
        numerator = g.add(numerator, mt)?;
    }
    let mut var = g.recip(precision);
    if let Some(f) = floor {
        var = g.clamp_min(var, f);
    }
    let mean = g.mul(numerator, var)?;
    GaussianNodes::from_var(g, mean, var)
}

/// Sum over every element of the closed-form KL to `N(0, I)`.
pub fn kl_std_normal_nodes(g: &mut Graph, e: &GaussianNodes) -> Result<NodeId> {
    let m2 = g.square(e.mean);
    let a = g.add(m2, e.var)?;
    let b = g.sub(a, e.log_var)?;
    let c = g.add_scalar(b, -1.0);
    let total = g.sum(c);
    Ok(g.scale(total, 0.5))
}

/// Graph form of [`sample_reparam`] with `noise` supplied as a leaf.
pub fn sample_reparam_nodes(g: &mut Graph, e: &GaussianNodes, noise: NodeId) -> Result<NodeId> {
    same(g, "sample_reparam", e.mean, noise)?;
    let sd = g.scale(e.log_var, 0.5);
    let sd = g.exp(sd);
    let scaled = g.mul(sd, noise)?;
    g.add(e.mean, scaled)
}

/// Convenience: a `[1, dim]` graph Gaussian from plain values, as leaves.
pub fn gaussian_leaves(g: &mut Graph, d: &DiagonalGaussian) -> Result<GaussianNodes> {
    let mean = g.leaf(NumArray::row(d.mean())?);
    let var = g.leaf(NumArray::row(d.variance())?);
    GaussianNodes::from_var(g, mean, var)
}
