//! Evaluation utilities: relative L2 error, autoregressive rollouts,
//! radially binned energy spectra, and interpretability exports.

use ndarray::{Array2, IxDyn};
use num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;
use std::path::Path;

use crate::error::{GpoError, Result};
use crate::field::{denormalize, normalize, NormStats, SampledField};
use crate::operator::{forward_trace, AnyModel, GPOModel};
use crate::tensor::TensorArchive;

/// Relative L2 error over active (unmasked) points, all channels.
pub fn relative_l2(pred: &SampledField, truth: &SampledField) -> Result<f64> {
    if pred.values.dim() != truth.values.dim() {
        return Err(GpoError::shape(
            "relative_l2",
            format!("{:?}", truth.values.dim()),
            format!("{:?}", pred.values.dim()),
        ));
    }
    let c = truth.channels();
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..truth.points.len() {
        if !truth.points.is_active(j) {
            continue;
        }
        for ch in 0..c {
            let d = pred.values[[j, ch]] - truth.values[[j, ch]];
            num += d * d;
            den += truth.values[[j, ch]] * truth.values[[j, ch]];
        }
    }
    Ok((num / den.max(1e-300)).sqrt())
}

/// Normalize, run the operator, denormalize. The single evaluation path that
/// rollouts iterate, so a one-step rollout reproduces it bit for bit.
pub fn one_step_eval(model: &AnyModel, input: &SampledField, stats: &NormStats) -> Result<SampledField> {
    let a = normalize(input, stats)?;
    let pred = model.forward(&a)?;
    denormalize(&pred, stats)
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutResult {
    /// Predicted fields at steps 1..=T (truncated if diverged).
    #[serde(skip)]
    pub predictions: Vec<SampledField>,
    /// Relative L2 against the reference at each completed step.
    pub errors: Vec<f64>,
    pub diverged: bool,
}

/// Autoregressive rollout from `truth[0]`, feeding predictions back in for
/// `steps` steps. Stops early and flags divergence when the error against
/// the reference exceeds 10 or the prediction goes non-finite.
pub fn rollout(model: &AnyModel, truth: &[SampledField], stats: &NormStats, steps: usize) -> Result<RolloutResult> {
    if truth.len() < steps + 1 {
        return Err(GpoError::shape(
            "rollout",
            format!("{} reference fields", steps + 1),
            format!("{}", truth.len()),
        ));
    }
    let mut predictions = Vec::with_capacity(steps);
    let mut errors = Vec::with_capacity(steps);
    let mut state = truth[0].clone();
    let mut diverged = false;
    for t in 1..=steps {
        let pred = one_step_eval(model, &state, stats)?;
        if pred.values.iter().any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
        let err = relative_l2(&pred, &truth[t])?;
        errors.push(err);
        predictions.push(pred.clone());
        if err > 10.0 {
            diverged = true;
            break;
        }
        state = pred;
    }
    Ok(RolloutResult {
        predictions,
        errors,
        diverged,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergySpectrum {
    pub wavenumbers: Vec<usize>,
    pub energy: Vec<f64>,
}

impl EnergySpectrum {
    pub fn total(&self) -> f64 {
        self.energy.iter().sum()
    }
}

/// Radially binned energy spectrum of a periodic 2D field:
/// `E(k) = sum over the annulus round(|k_int|) = k of (1/2)|u_hat|^2` with
/// the DFT normalized by the total point count, so the bins sum to
/// `(1/2) mean(u^2)` exactly (Parseval).
pub fn energy_spectrum(u: &Array2<f64>, band: [usize; 2]) -> Result<EnergySpectrum> {
    let (ny, nx) = u.dim();
    if ny != nx || nx == 0 {
        return Err(GpoError::shape("energy_spectrum", "square grid", format!("{ny}x{nx}")));
    }
    if band[0] >= band[1] {
        return Err(GpoError::domain("energy_spectrum", "band must satisfy lo < hi"));
    }
    let n = nx;
    let mut planner = FftPlanner::new();
    let plan = planner.plan_fft_forward(n);
    let mut c: Array2<Complex<f64>> = u.mapv(|v| Complex::new(v, 0.0));
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for mut row in c.rows_mut() {
        buf.copy_from_slice(row.as_slice().expect("contiguous row"));
        plan.process(&mut buf);
        for (dst, src) in row.iter_mut().zip(buf.iter()) {
            *dst = *src;
        }
    }
    for i in 0..n {
        for (j, slot) in buf.iter_mut().enumerate() {
            *slot = c[[j, i]];
        }
        plan.process(&mut buf);
        for (j, &v) in buf.iter().enumerate() {
            c[[j, i]] = v;
        }
    }
    let norm = 1.0 / (n * n) as f64;
    let half = n / 2;
    let kmax = ((2.0f64).sqrt() * half as f64).ceil() as usize;
    let mut energy = vec![0.0; kmax + 1];
    for iy in 0..n {
        for ix in 0..n {
            let fx = if ix <= half { ix as f64 } else { ix as f64 - n as f64 };
            let fy = if iy <= half { iy as f64 } else { iy as f64 - n as f64 };
            let k = (fx * fx + fy * fy).sqrt().round() as usize;
            let a = c[[iy, ix]] * norm;
            energy[k] += 0.5 * a.norm_sqr();
        }
    }
    Ok(EnergySpectrum {
        wavenumbers: (0..=kmax).collect(),
        energy,
    })
}

/// Least-squares slope of log E(k) vs log k over wavenumbers in
/// `[band[0], band[1]]`. Empty bins in the band are skipped.
pub fn spectral_slope(spec: &EnergySpectrum, band: [usize; 2]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = spec
        .wavenumbers
        .iter()
        .zip(&spec.energy)
        .filter(|(&k, &e)| k >= band[0] && k <= band[1] && e > 0.0)
        .map(|(&k, &e)| ((k as f64).ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(GpoError::domain("spectral_slope", "fewer than two populated bins in band"));
    }
    let m = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    Ok((m * sxy - sx * sy) / (m * sxx - sx * sx))
}

/// Reshape a flat grid field (site j = iy*n + ix) back to an n x n array.
pub fn field_to_grid(field: &SampledField, n: usize) -> Result<Array2<f64>> {
    if field.points.len() != n * n || field.channels() != 1 {
        return Err(GpoError::shape(
            "field_to_grid",
            format!("{n}x{n} single-channel grid"),
            format!("{} points, {} channels", field.points.len(), field.channels()),
        ));
    }
    Ok(Array2::from_shape_fn((n, n), |(iy, ix)| field.values[[iy * n + ix, 0]]))
}

/// Write interpretability artifacts for one input/target pair under `dir`:
/// particle records (JSON), prediction/truth/absolute-error fields (tensor
/// archive), per-layer attention matrices and window diagnostics (JSON),
/// and the per-stage scalar activation summaries (JSON).
pub fn export_overlays(
    model: &GPOModel,
    input: &SampledField,
    truth: &SampledField,
    stats: &NormStats,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let a = normalize(input, stats)?;
    let trace = forward_trace(model, &a)?;
    let pred_norm = SampledField::new(a.points.clone(), trace.output.clone())?;
    let pred = denormalize(&pred_norm, stats)?;

    let records = trace.particles.export_records();
    std::fs::write(dir.join("particles.json"), serde_json::to_vec_pretty(&records)?)?;

    let mut arch = TensorArchive::new(serde_json::json!({
        "kind": "field-overlay",
        "num_points": input.points.len(),
        "channels": input.channels(),
    }));
    let err = (&pred.values - &truth.values).mapv(f64::abs);
    arch.insert("prediction", pred.values.clone().into_dyn());
    arch.insert("truth", truth.values.clone().into_dyn());
    arch.insert("abs_error", err.into_dyn());
    arch.insert(
        "coords",
        input.points.coords().clone().into_dimensionality::<IxDyn>().unwrap(),
    );
    arch.save(&dir.join("fields.gpt1"))?;

    std::fs::write(dir.join("attention.json"), serde_json::to_vec_pretty(&trace.diagnostics)?)?;

    let activations: Vec<Vec<f64>> = trace
        .stages
        .iter()
        .map(|z| z.0.rows().into_iter().map(|r| r.sum()).collect())
        .collect();
    std::fs::write(dir.join("activations.json"), serde_json::to_vec_pretty(&activations)?)?;
    Ok(())
}
