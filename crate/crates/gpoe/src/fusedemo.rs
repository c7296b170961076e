//! Density curves of two one-dimensional experts and their fusions.

use gpoe_core::distributions::{
    density_curve, gpoe_fuse, poe_fuse, DiagonalGaussian, FusionWeights,
};

use crate::error::{Error, Result};

/// Largest tolerated deviation of `a1 + a2` from 1.
pub const PAIR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    /// (mean, variance) of the first expert.
    pub first: (f64, f64),
    pub second: (f64, f64),
    pub alphas: Vec<(f64, f64)>,
    pub x_min: f64,
    pub x_max: f64,
    pub points: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            first: (0.0, 1.0),
            second: (3.0, 2.0),
            alphas: vec![(0.75, 0.25), (0.5, 0.5), (0.25, 0.75)],
            x_min: -4.0,
            x_max: 7.0,
            points: 1101,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoTable {
    pub header: Vec<String>,
    /// Column-major: `columns[c][i]` belongs under `header[c]`.
    pub columns: Vec<Vec<f64>>,
}

impl DemoTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(&self.columns[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for i in 0..self.columns[0].len() {
            let row: Vec<String> = self.columns.iter().map(|c| c[i].to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Column name of the gPoE curve for one weight pair, e.g. `gpoe_0.75_0.25`.
pub fn gpoe_column(a: (f64, f64)) -> String {
    format!("gpoe_{}_{}", a.0, a.1)
}

pub fn fuse_demo(c: &DemoConfig) -> Result<DemoTable> {
    if c.points < 2 || !(c.x_max > c.x_min) || !c.x_min.is_finite() || !c.x_max.is_finite() {
        return Err(Error::Usage(format!(
            "x grid needs finite min < max and at least 2 points, got [{}, {}] with {}",
            c.x_min, c.x_max, c.points
        )));
    }
    if c.alphas.is_empty() {
        return Err(Error::Usage("at least one alpha pair is required".into()));
    }
    for &(a, b) in &c.alphas {
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || (a + b - 1.0).abs() > PAIR_TOLERANCE {
            return Err(Error::Usage(format!(
                "alpha pair ({a}, {b}) must be two weights in [0, 1] summing to 1"
            )));
        }
    }
    let expert = |(m, v): (f64, f64)| {
        DiagonalGaussian::univariate(m, v).map_err(|e| Error::Usage(format!("expert: {e}")))
    };
    let experts = [expert(c.first)?, expert(c.second)?];
    let step = (c.x_max - c.x_min) / (c.points - 1) as f64;
    let x: Vec<f64> = (0..c.points).map(|i| c.x_min + i as f64 * step).collect();

    let mut header = vec!["x".to_string(), "p1".into(), "p2".into(), "poe".into()];
    let mut columns = vec![
        x.clone(),
        density_curve(&experts[0], &x)?,
        density_curve(&experts[1], &x)?,
        density_curve(&poe_fuse(&experts)?, &x)?,
    ];
    for &(a, b) in &c.alphas {
        let w = FusionWeights::new(&[[a], [b]])?;
        header.push(gpoe_column((a, b)));
        columns.push(density_curve(&gpoe_fuse(&experts, &w)?, &x)?);
    }
    Ok(DemoTable { header, columns })
}

/// Index of the largest value, first on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
