//! Training loop: minibatch AdamW over per-sample reverse-mode gradients,
//! step learning-rate decay, validation-based early stopping, and a
//! finite-difference gradient checker.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::diagnostics::{one_step_eval, relative_l2};
use crate::diff::{plain_loss, plain_loss_mlp, sample_gradient, sample_gradient_mlp, LossBreakdown};
use crate::error::{GpoError, Result};
use crate::field::{normalize, NormStats, SampledField};
use crate::operator::AnyModel;
use crate::optim::{lr_schedule, AdamW};
use crate::parallel::batch_map;
use crate::params;

pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub recon: f64,
    pub reg_mu: f64,
    pub reg_sigma: f64,
    pub val_rel_l2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub diverged: bool,
    #[serde(skip)]
    pub stats: NormStats,
}

fn model_flatten(model: &AnyModel) -> Vec<f64> {
    match model {
        AnyModel::Gpo(m) => params::flatten(m).0,
        AnyModel::Pointwise(m) => params::flatten_mlp(m).0,
    }
}

fn model_unflatten(model: &mut AnyModel, values: &[f64]) -> Result<()> {
    match model {
        AnyModel::Gpo(m) => params::unflatten(m, values),
        AnyModel::Pointwise(m) => params::unflatten_mlp(m, values),
    }
}

fn model_gradient(model: &AnyModel, input: &SampledField, target: &SampledField) -> Result<(Vec<f64>, LossBreakdown)> {
    match model {
        AnyModel::Gpo(m) => sample_gradient(m, input, target),
        AnyModel::Pointwise(m) => sample_gradient_mlp(m, input, target),
    }
}

fn model_plain_loss(model: &AnyModel, input: &SampledField, target: &SampledField) -> Result<f64> {
    match model {
        AnyModel::Gpo(m) => Ok(plain_loss(m, input, target)?.total),
        AnyModel::Pointwise(m) => plain_loss_mlp(m, input, target),
    }
}

/// Mean validation relative L2 of one-step predictions, in physical units.
pub fn validate(model: &AnyModel, pairs: &[(SampledField, SampledField)], stats: &NormStats) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut acc = 0.0;
    for (input, target) in pairs {
        let pred = one_step_eval(model, input, stats)?;
        acc += relative_l2(&pred, target)?;
    }
    Ok(acc / pairs.len() as f64)
}

/// Train in place on raw (unnormalized) pairs. Normalization statistics come
/// from the training inputs and apply to inputs and targets alike. Gradients
/// within a batch are computed independently per sample, then summed in
/// sample order so runs are reproducible regardless of thread count. On
/// divergence (non-finite or loss above `DIVERGENCE_LOSS`) the best
/// parameters seen are restored and the report is flagged.
pub fn train(
    model: &mut AnyModel,
    train_pairs: &[(SampledField, SampledField)],
    val_pairs: &[(SampledField, SampledField)],
    cfg: &ExperimentConfig,
) -> Result<TrainReport> {
    if train_pairs.is_empty() {
        return Err(GpoError::domain("train", "no training pairs"));
    }
    let tc = &cfg.training;
    let stats = NormStats::from_fields(train_pairs.iter().map(|(a, _)| a))?;
    let normed: Vec<(SampledField, SampledField)> = train_pairs
        .iter()
        .map(|(a, u)| Ok((normalize(a, &stats)?, normalize(u, &stats)?)))
        .collect::<Result<_>>()?;

    let mut theta = model_flatten(model);
    let mut opt = AdamW::new(theta.len(), tc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_theta = theta.clone();
    let mut since_best = 0;
    let mut diverged = false;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    'epochs: for epoch in 0..tc.epochs {
        let lr = lr_schedule(tc.lr0, tc.gamma, tc.step_period, epoch);
        let mut order: Vec<usize> = (0..normed.len()).collect();
        if tc.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sums = LossBreakdown::default();
        let mut n_samples = 0usize;
        for chunk in order.chunks(tc.batch.max(1)) {
            let batch: Vec<&(SampledField, SampledField)> = chunk.iter().map(|&i| &normed[i]).collect();
            let results = batch_map(&batch, |pair| model_gradient(model, &pair.0, &pair.1));
            let mut grad_sum = vec![0.0; theta.len()];
            for res in results {
                let (g, bd) = match res {
                    Ok(ok) => ok,
                    Err(GpoError::NonFinite { .. }) => {
                        diverged = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                if !bd.total.is_finite() || bd.total > DIVERGENCE_LOSS {
                    diverged = true;
                    break 'epochs;
                }
                for (s, gi) in grad_sum.iter_mut().zip(&g) {
                    *s += gi;
                }
                sums.recon += bd.recon;
                sums.reg_mu_term += bd.reg_mu_term;
                sums.reg_sigma_term += bd.reg_sigma_term;
                sums.total += bd.total;
                n_samples += 1;
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grad_sum.iter_mut() {
                *g *= inv;
            }
            if let Some(c) = tc.clip_norm {
                let norm = grad_sum.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    let scale = c / norm;
                    for g in grad_sum.iter_mut() {
                        *g *= scale;
                    }
                }
            }
            opt.step(&mut theta, &grad_sum, lr)?;
            model_unflatten(model, &theta)?;
        }
        epochs_run = epoch + 1;
        let inv = 1.0 / n_samples.max(1) as f64;
        let val = validate(model, val_pairs, &stats)?;
        history.push(EpochRecord {
            epoch,
            lr,
            recon: sums.recon * inv,
            reg_mu: sums.reg_mu_term * inv,
            reg_sigma: sums.reg_sigma_term * inv,
            val_rel_l2: val,
        });
        let tracked = if val.is_nan() { sums.recon * inv } else { val };
        if tracked < best_val {
            best_val = tracked;
            best_epoch = epoch;
            best_theta.copy_from_slice(&theta);
            since_best = 0;
            if tc.stop_at_val.is_some_and(|target| tracked < target) {
                stopped_early = true;
                break;
            }
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                stopped_early = true;
                break;
            }
        }
    }
    // leave the model at the best validation point (also the divergence fallback)
    model_unflatten(model, &best_theta)?;
    Ok(TrainReport {
        history,
        best_val,
        best_epoch,
        epochs_run,
        stopped_early,
        diverged,
        stats,
    })
}

/// Write the per-epoch metrics as CSV.
pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,lr,recon,reg_mu,reg_sigma,val_rel_l2\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.epoch, r.lr, r.recon, r.reg_mu, r.reg_sigma, r.val_rel_l2
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub pass: bool,
    pub threshold: f64,
}

/// Compare reverse-mode gradients against central finite differences of the
/// tape-free forward loss at `n_coords` evenly spread parameter coordinates.
pub fn check_gradients(
    model: &mut AnyModel,
    input: &SampledField,
    target: &SampledField,
    n_coords: usize,
    h: f64,
    threshold: f64,
) -> Result<GradCheckReport> {
    let (analytic, _) = model_gradient(model, input, target)?;
    let theta = model_flatten(model);
    let total = theta.len();
    let n_coords = n_coords.min(total);
    let stride = total / n_coords.max(1);
    let mut max_rel: f64 = 0.0;
    let mut sum_rel = 0.0;
    let mut checked = 0;
    for c in 0..n_coords {
        let idx = (c * stride + c) % total;
        let mut tp = theta.clone();
        tp[idx] += h;
        model_unflatten(model, &tp)?;
        let lp = model_plain_loss(model, input, target)?;
        tp[idx] = theta[idx] - h;
        model_unflatten(model, &tp)?;
        let lm = model_plain_loss(model, input, target)?;
        let fd = (lp - lm) / (2.0 * h);
        let a = analytic[idx];
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
        checked += 1;
    }
    model_unflatten(model, &theta)?;
    Ok(GradCheckReport {
        coords_checked: checked,
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / checked.max(1) as f64,
        pass: max_rel < threshold,
        threshold,
    })
}
