//! Coordinate sets, sampled fields, normalization, and the fixed Fourier
//! positional embedding shared by the rest of the crate.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{GpoError, Result};

/// Floor applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// A set of N sample locations in `[0,1]^d` (d in 1..=3), with an optional
/// boolean mask. Masked points are excluded from every loss and metric; the
/// model only ever sees the active (unmasked) subset.
#[derive(Debug, Clone)]
pub struct PointSet {
    coords: Array2<f64>,
    mask: Option<Vec<bool>>,
}

impl PointSet {
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        Self::with_mask(coords, None)
    }

    pub fn with_mask(coords: Array2<f64>, mask: Option<Vec<bool>>) -> Result<Self> {
        let (n, d) = coords.dim();
        if n == 0 {
            return Err(GpoError::domain("PointSet", "need at least one point"));
        }
        if !(1..=3).contains(&d) {
            return Err(GpoError::domain(
                "PointSet",
                format!("spatial dimension must be 1..=3, got {d}"),
            ));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(GpoError::NonFinite {
                context: "PointSet coords".into(),
            });
        }
        if let Some(m) = &mask {
            if m.len() != n {
                return Err(GpoError::shape("PointSet mask", n.to_string(), m.len().to_string()));
            }
            if m.iter().all(|&x| x) {
                return Err(GpoError::domain("PointSet", "all points masked"));
            }
        }
        Ok(PointSet { coords, mask })
    }

    /// Regular row-major grid over `[0,1]^2` with `n` points per axis.
    pub fn grid2d(n: usize) -> Self {
        let mut coords = Array2::zeros((n * n, 2));
        for iy in 0..n {
            for ix in 0..n {
                let j = iy * n + ix;
                coords[[j, 0]] = ix as f64 / n as f64;
                coords[[j, 1]] = iy as f64 / n as f64;
            }
        }
        PointSet { coords, mask: None }
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees N >= 1
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// True for points that participate in losses and metrics.
    pub fn is_active(&self, j: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| !m[j])
    }

    pub fn num_active(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&x| !x).count(),
            None => self.len(),
        }
    }

    /// Point set restricted to active points (identity when unmasked).
    pub fn active_subset(&self) -> PointSet {
        match &self.mask {
            None => self.clone(),
            Some(m) => {
                let keep: Vec<usize> = (0..self.len()).filter(|&j| !m[j]).collect();
                let coords = self.coords.select(Axis(0), &keep);
                PointSet { coords, mask: None }
            }
        }
    }

    /// Rescale native coordinates into `[0,1]^d` per axis (degenerate axes map to 0.5).
    pub fn rescaled_unit(&self) -> PointSet {
        let mut coords = self.coords.clone();
        for ax in 0..self.dim() {
            let col = self.coords.column(ax);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            for v in coords.column_mut(ax).iter_mut() {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
            }
        }
        PointSet {
            coords,
            mask: self.mask.clone(),
        }
    }
}

/// Field samples: values (N x c) attached to a point set.
#[derive(Debug, Clone)]
pub struct SampledField {
    pub points: PointSet,
    pub values: Array2<f64>,
}

impl SampledField {
    pub fn new(points: PointSet, values: Array2<f64>) -> Result<Self> {
        if values.nrows() != points.len() {
            return Err(GpoError::shape(
                "SampledField",
                format!("{} rows", points.len()),
                format!("{} rows", values.nrows()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GpoError::NonFinite {
                context: "SampledField values".into(),
            });
        }
        Ok(SampledField { points, values })
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// Restrict to active points; the model consumes this view.
    pub fn active_subset(&self) -> SampledField {
        match self.points.mask() {
            None => self.clone(),
            Some(m) => {
                let keep: Vec<usize> = (0..self.points.len()).filter(|&j| !m[j]).collect();
                SampledField {
                    points: self.points.active_subset(),
                    values: self.values.select(Axis(0), &keep),
                }
            }
        }
    }
}

/// Per-channel normalization statistics computed on training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Set when a channel had (near-)zero variance and its std was floored.
    pub floored: Vec<bool>,
}

impl NormStats {
    /// Statistics over the active points of a set of fields.
    pub fn from_fields<'a>(fields: impl IntoIterator<Item = &'a SampledField>) -> Result<Self> {
        let mut sum: Option<Array1<f64>> = None;
        let mut sum_sq: Option<Array1<f64>> = None;
        let mut count = 0usize;
        for f in fields {
            let c = f.channels();
            let s = sum.get_or_insert_with(|| Array1::zeros(c));
            let s2 = sum_sq.get_or_insert_with(|| Array1::zeros(c));
            if s.len() != c {
                return Err(GpoError::shape("NormStats", s.len().to_string(), c.to_string()));
            }
            for j in 0..f.points.len() {
                if !f.points.is_active(j) {
                    continue;
                }
                for ch in 0..c {
                    let v = f.values[[j, ch]];
                    s[ch] += v;
                    s2[ch] += v * v;
                }
                count += 1;
            }
        }
        let sum = sum.ok_or_else(|| GpoError::domain("NormStats", "no fields given"))?;
        let sum_sq = sum_sq.unwrap();
        if count == 0 {
            return Err(GpoError::domain("NormStats", "no active points"));
        }
        let mut mean = Vec::new();
        let mut std = Vec::new();
        let mut floored = Vec::new();
        for ch in 0..sum.len() {
            let m = sum[ch] / count as f64;
            let var = (sum_sq[ch] / count as f64 - m * m).max(0.0);
            let s = var.sqrt();
            floored.push(s < STD_FLOOR);
            mean.push(m);
            std.push(s.max(STD_FLOOR));
        }
        Ok(NormStats { mean, std, floored })
    }

    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            floored: vec![false; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// `(v - mean) / std` per channel.
pub fn normalize(field: &SampledField, stats: &NormStats) -> Result<SampledField> {
    check_channels(field, stats)?;
    let mut values = field.values.clone();
    for ch in 0..stats.channels() {
        for v in values.column_mut(ch).iter_mut() {
            *v = (*v - stats.mean[ch]) / stats.std[ch];
        }
    }
    SampledField::new(field.points.clone(), values)
}

/// Inverse of [`normalize`]; metrics always consume denormalized values.
pub fn denormalize(field: &SampledField, stats: &NormStats) -> Result<SampledField> {
    check_channels(field, stats)?;
    let mut values = field.values.clone();
    for ch in 0..stats.channels() {
        for v in values.column_mut(ch).iter_mut() {
            *v = *v * stats.std[ch] + stats.mean[ch];
        }
    }
    SampledField::new(field.points.clone(), values)
}

fn check_channels(field: &SampledField, stats: &NormStats) -> Result<()> {
    if field.channels() != stats.channels() {
        return Err(GpoError::shape(
            "normalize",
            format!("{} channels", stats.channels()),
            format!("{} channels", field.channels()),
        ));
    }
    Ok(())
}

/// Fixed Fourier positional features `gamma(x) = [sin(2 pi B x), cos(2 pi B x)]`.
///
/// `B` (m x d) is sampled once from N(0, sigma_b^2) and never updated by
/// training; the embedding dimension is exactly `2m`.
#[derive(Debug, Clone)]
pub struct FourierEmbedding {
    b: Array2<f64>,
    sigma_b: f64,
}

impl FourierEmbedding {
    pub fn sample(m: usize, d: usize, sigma_b: f64, seed: u64) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(GpoError::domain("FourierEmbedding", "m and d must be >= 1"));
        }
        if sigma_b <= 0.0 {
            return Err(GpoError::domain("FourierEmbedding", "sigma_b must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma_b).expect("valid normal");
        let b = Array2::from_shape_fn((m, d), |_| normal.sample(&mut rng));
        Ok(FourierEmbedding { b, sigma_b })
    }

    pub fn from_matrix(b: Array2<f64>, sigma_b: f64) -> Self {
        FourierEmbedding { b, sigma_b }
    }

    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn sigma_b(&self) -> f64 {
        self.sigma_b
    }

    pub fn num_frequencies(&self) -> usize {
        self.b.nrows()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.b.nrows()
    }
}

/// Row j of the result is `[sin(2 pi B x_j); cos(2 pi B x_j)]`.
///
/// Pure in `(B, coords)`: two calls are bit-identical.
pub fn embed_coords(pts: &PointSet, emb: &FourierEmbedding) -> Result<Array2<f64>> {
    let m = emb.b.nrows();
    let d = emb.b.ncols();
    if pts.dim() != d {
        return Err(GpoError::shape(
            "embed_coords",
            format!("coords with d={d}"),
            format!("d={}", pts.dim()),
        ));
    }
    let phase = pts.coords().dot(&emb.b.t()) * (2.0 * PI); // N x m
    let n = pts.len();
    let mut out = Array2::zeros((n, 2 * m));
    for j in 0..n {
        for i in 0..m {
            out[[j, i]] = phase[[j, i]].sin();
            out[[j, m + i]] = phase[[j, i]].cos();
        }
    }
    Ok(out)
}
