//! Constructive Gaussian-mixture approximation of a continuous 1D target:
//! mollification by a narrow Gaussian followed by a Riemann sum over a
//! uniform node grid. Serves as a desk-scale density witness for the
//! Gaussian basis representation.

use serde::Serialize;
use std::f64::consts::PI;

use crate::error::{GpoError, Result};

/// Margin (domain units) excluded when reporting the interior sup error.
/// Boundary mollification bleed is expected because no continuous extension
/// of the target beyond [0,1] is constructed.
pub const INTERIOR_MARGIN: f64 = 0.1;

/// One Gaussian atom of the constructed mixture (shared scale `eps`).
#[derive(Debug, Clone, Serialize)]
pub struct MixtureAtom {
    pub mu: f64,
    /// Signed coefficient `c_i = v(mu_i) * delta_i / (sqrt(2 pi) * eps)`.
    pub c: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Report {
    pub grid_g: usize,
    pub eps_moll: f64,
    pub sup_error_interior: f64,
    pub sup_error_full: f64,
}

/// The constructed mixture plus its sup-norm error report.
#[derive(Debug, Clone)]
pub struct Lemma1Result {
    pub atoms: Vec<MixtureAtom>,
    pub report: Lemma1Report,
}

/// Build the mixture for a target sampled densely and uniformly on [0,1]
/// (`target[k] = v(k / (target.len()-1))`), with `grid_g` nodes and
/// mollifier scale `eps_moll`, and evaluate the sup error on the sample grid.
pub fn lemma1_construct(target: &[f64], eps_moll: f64, grid_g: usize) -> Result<Lemma1Result> {
    if target.len() < 2 {
        return Err(GpoError::domain("lemma1_construct", "need at least 2 samples"));
    }
    if eps_moll <= 0.0 {
        return Err(GpoError::domain("lemma1_construct", "eps_moll must be positive"));
    }
    if grid_g == 0 {
        return Err(GpoError::domain("lemma1_construct", "grid_g must be >= 1"));
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(GpoError::NonFinite {
            context: "lemma1 target".into(),
        });
    }

    let n = target.len();
    let sample_x = |k: usize| k as f64 / (n - 1) as f64;
    // linear interpolation of the dense samples stands in for the continuous target
    let v_at = |x: f64| -> f64 {
        let t = x.clamp(0.0, 1.0) * (n - 1) as f64;
        let k = (t.floor() as usize).min(n - 2);
        let frac = t - k as f64;
        target[k] * (1.0 - frac) + target[k + 1] * frac
    };

    let delta = 1.0 / grid_g as f64;
    let norm = 1.0 / ((2.0 * PI).sqrt() * eps_moll);
    let atoms: Vec<MixtureAtom> = (0..grid_g)
        .map(|i| {
            let mu = (i as f64 + 0.5) * delta;
            MixtureAtom {
                mu,
                c: v_at(mu) * delta * norm,
            }
        })
        .collect();

    let eval = |x: f64| -> f64 {
        atoms
            .iter()
            .map(|a| {
                let t = (x - a.mu) / eps_moll;
                a.c * (-0.5 * t * t).exp()
            })
            .sum()
    };

    let mut sup_full: f64 = 0.0;
    let mut sup_interior: f64 = 0.0;
    for k in 0..n {
        let x = sample_x(k);
        let err = (eval(x) - target[k]).abs();
        sup_full = sup_full.max(err);
        if x >= INTERIOR_MARGIN && x <= 1.0 - INTERIOR_MARGIN {
            sup_interior = sup_interior.max(err);
        }
    }

    Ok(Lemma1Result {
        atoms,
        report: Lemma1Report {
            grid_g,
            eps_moll,
            sup_error_interior: sup_interior,
            sup_error_full: sup_full,
        },
    })
}

/// Interior sup errors for a doubling sweep of grid sizes at fixed `eps_moll`.
pub fn lemma1_sweep(target: &[f64], eps_moll: f64, grids: &[usize]) -> Result<Vec<Lemma1Report>> {
    grids
        .iter()
        .map(|&g| lemma1_construct(target, eps_moll, g).map(|r| r.report))
        .collect()
}
