//! Differentiable forward pass: mirrors the plain pipeline on the tape so
//! gradients of the composite loss reach every learnable tensor. The plain
//! (ndarray) path stays the oracle; `plain_loss` evaluates the identical
//! objective without the tape for finite-difference checks.

use ndarray::Array2;
use serde::Serialize;

use crate::basis::{decode, evaluate_basis, reg_mu, reg_sigma};
use crate::error::{GpoError, Result};
use crate::field::{embed_coords, SampledField};
use crate::operator::{forward_mlp, forward_trace, GPOModel, PlainMlp};
use crate::params;
use crate::tape::{concat_cols, Tape, Var};

/// Composite training objective, itemized.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub reg_mu_term: f64,
    pub reg_sigma_term: f64,
    pub aux_term: f64,
    pub total: f64,
}

struct EncVars<'t> {
    w_in: Var<'t>,
    b_in: Var<'t>,
    u_mu: Var<'t>,
    b_u_mu: Var<'t>,
    u_sigma: Var<'t>,
    b_u_sigma: Var<'t>,
    u_w: Var<'t>,
    b_u_w: Var<'t>,
    w_mu: Var<'t>,
    b_mu: Var<'t>,
    w_sigma: Var<'t>,
    b_sigma: Var<'t>,
    w_w: Var<'t>,
    b_w: Var<'t>,
}

struct HeadVars<'t> {
    w_desc: Var<'t>,
    w_p: Var<'t>,
    w_z: Var<'t>,
    w_q: Var<'t>,
    w_k: Var<'t>,
    w_v: Var<'t>,
}

struct LayerVars<'t> {
    heads: Vec<HeadVars<'t>>,
    w_out: Var<'t>,
    lambda_raw: Option<Var<'t>>,
    lambda_fixed: f64,
    eps: f64,
}

struct DecVars<'t> {
    w1: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
}

/// Tape variables for every learnable tensor, in the canonical flatten order.
pub struct ModelVars<'t> {
    enc: EncVars<'t>,
    layers: Vec<LayerVars<'t>>,
    dec: DecVars<'t>,
    /// Leaves in the exact order of [`params::flatten`].
    ordered: Vec<Var<'t>>,
}

pub fn build_model_vars<'t>(tape: &'t Tape, model: &GPOModel) -> ModelVars<'t> {
    struct Reg<'t> {
        tape: &'t Tape,
        ordered: Vec<Var<'t>>,
    }
    impl<'t> Reg<'t> {
        fn p2(&mut self, a: &Array2<f64>) -> Var<'t> {
            let v = self.tape.var2(a.clone());
            self.ordered.push(v);
            v
        }
        fn p1(&mut self, a: &ndarray::Array1<f64>) -> Var<'t> {
            let v = self.tape.var1(a.clone());
            self.ordered.push(v);
            v
        }
        fn ps(&mut self, x: f64) -> Var<'t> {
            let v = self.tape.scalar(x);
            self.ordered.push(v);
            v
        }
    }
    let mut reg = Reg {
        tape,
        ordered: Vec::new(),
    };
    let e = &model.encoder;
    let enc = EncVars {
        w_in: reg.p2(&e.w_in),
        b_in: reg.p1(&e.b_in),
        u_mu: reg.p2(&e.u_mu),
        b_u_mu: reg.p1(&e.b_u_mu),
        u_sigma: reg.p2(&e.u_sigma),
        b_u_sigma: reg.p1(&e.b_u_sigma),
        u_w: reg.p2(&e.u_w),
        b_u_w: reg.p1(&e.b_u_w),
        w_mu: reg.p2(&e.w_mu),
        b_mu: reg.p1(&e.b_mu),
        w_sigma: reg.p2(&e.w_sigma),
        b_sigma: reg.p1(&e.b_sigma),
        w_w: reg.p2(&e.w_w),
        b_w: reg.p1(&e.b_w),
    };
    let tied = model.config.model.tie_wz;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (k, layer) in model.layers.iter().enumerate() {
        let mut heads = Vec::with_capacity(layer.heads.len());
        let mut shared_wz: Option<Var<'t>> = None;
        for (h, head) in layer.heads.iter().enumerate() {
            let w_desc = reg.p2(&head.w_desc);
            let w_p = reg.p2(&head.w_p);
            let w_z = if tied {
                if h == 0 {
                    let v = reg.p2(&head.w_z);
                    shared_wz = Some(v);
                    v
                } else {
                    shared_wz.unwrap()
                }
            } else {
                reg.p2(&head.w_z)
            };
            heads.push(HeadVars {
                w_desc,
                w_p,
                w_z,
                w_q: reg.p2(&head.w_q),
                w_k: reg.p2(&head.w_k),
                w_v: reg.p2(&head.w_v),
            });
        }
        let w_out = reg.p2(&layer.w_out);
        let lambda_raw = model.lambda_raw.as_ref().map(|raw| reg.ps(raw[k]));
        layers.push(LayerVars {
            heads,
            w_out,
            lambda_raw,
            lambda_fixed: layer.lambda,
            eps: layer.eps,
        });
    }
    let dmod = &model.decoder;
    let dec = DecVars {
        w1: reg.p2(&dmod.w1),
        b1: reg.p1(&dmod.b1),
        w2: reg.p2(&dmod.w2),
        b2: reg.p1(&dmod.b2),
    };
    ModelVars {
        enc,
        layers,
        dec,
        ordered: reg.ordered,
    }
}

/// Input constants for one sample: `eta = [a_j, gamma(x_j)]`, the coordinate
/// tiles used by the kernel and the center regularizer.
fn input_constants(model: &GPOModel, input: &SampledField) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let gamma = embed_coords(&input.points, &model.emb)?;
    let n = input.points.len();
    let d = input.points.dim();
    let g = model.config.model.num_gaussians;
    let c = input.channels();
    let mut eta = Array2::zeros((n, c + gamma.ncols()));
    for j in 0..n {
        for ch in 0..c {
            eta[[j, ch]] = input.values[[j, ch]];
        }
        for i in 0..gamma.ncols() {
            eta[[j, c + i]] = gamma[[j, i]];
        }
    }
    let coords = input.points.coords();
    let xrep = Array2::from_shape_fn((n, g * d), |(j, col)| coords[[j, col % d]]);
    Ok((eta, xrep, coords.clone()))
}

/// Particle heads on the tape: (mu_flat, sigma_flat, w, z0), all per site.
fn tape_encode_evaluate<'t>(
    tape: &'t Tape,
    mv: &ModelVars<'t>,
    model: &GPOModel,
    input: &SampledField,
) -> Result<(Var<'t>, Var<'t>, Var<'t>, Var<'t>)> {
    let d = input.points.dim();
    let (eta, xrep, _) = input_constants(model, input)?;
    let eta = tape.var2(eta);
    let xrep = tape.var2(xrep);
    let e = &mv.enc;
    let phi = eta.matmul(e.w_in.t()).add_row(e.b_in).relu();
    let mu = phi
        .matmul(e.u_mu.t())
        .add_row(e.b_u_mu)
        .relu()
        .matmul(e.w_mu.t())
        .add_row(e.b_mu);
    let sigma = phi
        .matmul(e.u_sigma.t())
        .add_row(e.b_u_sigma)
        .relu()
        .matmul(e.w_sigma.t())
        .add_row(e.b_sigma)
        .softplus()
        .max_scalar(crate::basis::SIGMA_SOFTPLUS_FLOOR);
    let w = phi
        .matmul(e.u_w.t())
        .add_row(e.b_u_w)
        .relu()
        .matmul(e.w_w.t())
        .add_row(e.b_w)
        .softmax_rows();
    let quot = xrep.sub(mu).mul(sigma.recip());
    let z0 = w.mul(quot.mul(quot).sum_groups(d).scale(-0.5).exp());
    Ok((mu, sigma, w, z0))
}

/// Reciprocal with the same degeneracy guard as the plain forward: entries
/// where `keep` rejects the current value contribute zero instead of 1/x,
/// so the tape and plain paths agree at (and differentiate around) the same
/// point. Returns the guarded reciprocal and the 0/1 keep mask as leaves.
fn guarded_recip<'t>(tape: &'t Tape, denom: Var<'t>, keep: impl Fn(f64) -> bool) -> (Var<'t>, Var<'t>) {
    let vals = denom.value();
    // denominators arrive as (N, 1) row sums; masks must match that shape
    let flags: Vec<f64> = vals.iter().map(|&v| if keep(v) { 1.0 } else { 0.0 }).collect();
    let n = flags.len();
    let mask_arr = Array2::from_shape_vec((n, 1), flags).expect("column mask");
    let off_arr = mask_arr.mapv(|m| 1.0 - m);
    let mask = tape.var2(mask_arr);
    let off = tape.var2(off_arr);
    // masked entries divide by (x + 1) then multiply by zero: finite and flat
    (denom.add(off).recip().mul(mask), mask)
}

/// One PG attention layer on the tape.
fn tape_layer<'t>(
    tape: &'t Tape,
    lv: &LayerVars<'t>,
    z: Var<'t>,
    w: Var<'t>,
    mu: Var<'t>,
    sigma: Var<'t>,
    head_dim: usize,
) -> Var<'t> {
    let xi = concat_cols(tape, &[z, w, mu, sigma]);
    let mut head_outputs = Vec::with_capacity(lv.heads.len());
    for head in &lv.heads {
        let p = xi
            .matmul(head.w_desc.t())
            .matmul(head.w_p.t())
            .softmax_rows();
        let s = z.matmul(head.w_z.t());
        let pt = p.t();
        let eps = lv.eps;
        let (mass_recip, _) = guarded_recip(tape, pt.row_sum(), |m| m >= eps);
        let tok = pt.matmul(s).mul_col(mass_recip);
        let q = tok.matmul(head.w_q.t());
        let k = tok.matmul(head.w_k.t());
        let v = tok.matmul(head.w_v.t());
        let alpha = q
            .matmul(k.t())
            .scale(1.0 / (head_dim as f64).sqrt())
            .softmax_rows();
        head_outputs.push(p.matmul(alpha.matmul(v)));
    }
    let concat = concat_cols(tape, &head_outputs);
    let z_tilde = concat.matmul(lv.w_out.t());
    let blended = match lv.lambda_raw {
        Some(raw) => {
            let lam = raw.sigmoid();
            let one_minus = lam.neg().add_scalar(1.0);
            z.scale_var(one_minus).add(z_tilde.scale_var(lam))
        }
        None => z.scale(1.0 - lv.lambda_fixed).add(z_tilde.scale(lv.lambda_fixed)),
    };
    // rows with near-cancelled blended sum keep the blend unrenormalized,
    // matching residual_renorm's skip rule (factor bounded at 100)
    let s0 = z.row_sum();
    let s1 = blended.row_sum();
    let s0v = s0.value();
    let s1v = s1.value();
    let abs_floor = 10.0 * lv.eps;
    let flags: Vec<f64> = s0v
        .iter()
        .zip(s1v.iter())
        .map(|(&a, &b)| if b.abs() > abs_floor.max(0.01 * a.abs()) { 1.0 } else { 0.0 })
        .collect();
    let n = flags.len();
    let mask_arr = Array2::from_shape_vec((n, 1), flags).expect("column mask");
    let off_arr = mask_arr.mapv(|m| 1.0 - m);
    let mask = tape.var2(mask_arr);
    let off = tape.var2(off_arr);
    let factor = s0.mul(s1.add(off).recip().mul(mask)).add(off);
    blended.mul_col(factor)
}

/// Tape evaluation of one sample's composite loss.
pub struct SampleLoss<'t> {
    pub total: Var<'t>,
    pub pred: Var<'t>,
    pub breakdown: LossBreakdown,
}

pub fn tape_loss<'t>(
    tape: &'t Tape,
    mv: &ModelVars<'t>,
    model: &GPOModel,
    input: &SampledField,
    target: &SampledField,
) -> Result<SampleLoss<'t>> {
    let n = input.points.len();
    let d = input.points.dim();
    let g = model.config.model.num_gaussians;
    let c_out = target.channels();
    if target.points.len() != n {
        return Err(GpoError::shape("tape_loss", format!("{n} target rows"), format!("{}", target.points.len())));
    }
    let cfg = &model.config.model;
    let head_dim = model.config.head_dim();

    let (mu, sigma, w, z0) = tape_encode_evaluate(tape, mv, model, input)?;
    let mut z = z0;
    for lv in &mv.layers {
        z = tape_layer(tape, lv, z, w, mu, sigma, head_dim);
    }
    let dec = &mv.dec;
    let pred = z
        .matmul(dec.w1.t())
        .add_row(dec.b1)
        .relu()
        .matmul(dec.w2.t())
        .add_row(dec.b2);

    let target_const = tape.var2(target.values.clone());
    let diff = pred.sub(target_const);
    let recon = diff.mul(diff).sum_all().scale(1.0 / (n * c_out) as f64);

    // center regularizer: weighted barycenter vs site coordinate
    let (_, _, coords) = input_constants(model, input)?;
    let xc = tape.var2(coords);
    let bary = w.repeat_interleave_cols(d).mul(mu).sum_strided(d);
    let bdiff = bary.sub(xc);
    let reg_mu_v = bdiff.mul(bdiff).sum_all().scale(1.0 / n as f64);

    // scale band hinges
    let hi = sigma.add_scalar(-cfg.sigma_max).relu();
    let lo = sigma.neg().add_scalar(cfg.sigma_min).relu();
    let reg_sigma_v = hi.add(lo).sum_all().scale(1.0 / (n * g * d) as f64);

    let mut total = recon
        .add(reg_mu_v.scale(cfg.reg_mu_coeff))
        .add(reg_sigma_v.scale(cfg.reg_sigma_coeff));

    // optional auxiliary supervision: reconstruct the target through the
    // encode/evaluate/decode path (no attention stack)
    let mut aux_val = 0.0;
    if cfg.aux_coeff > 0.0 {
        let (_, _, _, zt) = tape_encode_evaluate(tape, mv, model, target)?;
        let aux_pred = zt
            .matmul(dec.w1.t())
            .add_row(dec.b1)
            .relu()
            .matmul(dec.w2.t())
            .add_row(dec.b2);
        let tc = tape.var2(target.values.clone());
        let adiff = aux_pred.sub(tc);
        let aux = adiff.mul(adiff).sum_all().scale(1.0 / (n * c_out) as f64);
        aux_val = aux.scalar_value();
        total = total.add(aux.scale(cfg.aux_coeff));
    }

    let breakdown = LossBreakdown {
        recon: recon.scalar_value(),
        reg_mu_term: reg_mu_v.scalar_value(),
        reg_sigma_term: reg_sigma_v.scalar_value(),
        aux_term: aux_val,
        total: total.scalar_value(),
    };
    if !breakdown.total.is_finite() {
        return Err(GpoError::NonFinite {
            context: format!(
                "loss (recon {}, reg_mu {}, reg_sigma {})",
                breakdown.recon, breakdown.reg_mu_term, breakdown.reg_sigma_term
            ),
        });
    }
    Ok(SampleLoss {
        total,
        pred,
        breakdown,
    })
}

/// Gradient of the composite loss for a single sample, laid out exactly like
/// [`params::flatten`]. Parameters that do not reach the loss get zeros.
pub fn sample_gradient(model: &GPOModel, input: &SampledField, target: &SampledField) -> Result<(Vec<f64>, LossBreakdown)> {
    let tape = Tape::new();
    let mv = build_model_vars(&tape, model);
    let sample = tape_loss(&tape, &mv, model, input, target)?;
    let grads = tape.backward(sample.total);
    let (_, specs) = params::flatten(model);
    let mut flat = Vec::with_capacity(specs.iter().map(|s| s.len()).sum());
    for (var, spec) in mv.ordered.iter().zip(specs.iter()) {
        match &grads[var.index()] {
            Some(g) => flat.extend(g.iter().cloned()),
            None => flat.extend(std::iter::repeat(0.0).take(spec.len())),
        }
    }
    Ok((flat, sample.breakdown))
}

/// Tape-free evaluation of the identical objective through the plain
/// pipeline; the independent side of gradient checking.
pub fn plain_loss(model: &GPOModel, input: &SampledField, target: &SampledField) -> Result<LossBreakdown> {
    let cfg = &model.config.model;
    let trace = forward_trace(model, input)?;
    let n = input.points.len() as f64;
    let c = target.channels() as f64;
    let recon = (&trace.output - &target.values).mapv(|v| v * v).sum() / (n * c);
    let reg_mu_term = reg_mu(&trace.particles, &input.points)?;
    let reg_sigma_term = reg_sigma(&trace.particles, cfg.sigma_min, cfg.sigma_max)?;
    let mut aux_term = 0.0;
    if cfg.aux_coeff > 0.0 {
        let gf = crate::basis::encode(target, &model.emb, &model.encoder)?;
        let zt = evaluate_basis(&gf, &target.points)?;
        let aux_pred = decode(&zt, &model.decoder)?;
        aux_term = (&aux_pred - &target.values).mapv(|v| v * v).sum() / (n * c);
    }
    let total = recon
        + cfg.reg_mu_coeff * reg_mu_term
        + cfg.reg_sigma_coeff * reg_sigma_term
        + cfg.aux_coeff * aux_term;
    Ok(LossBreakdown {
        recon,
        reg_mu_term,
        reg_sigma_term,
        aux_term,
        total,
    })
}

/// MSE gradient for the pointwise comparison model, laid out like
/// [`params::flatten_mlp`].
pub fn sample_gradient_mlp(model: &PlainMlp, input: &SampledField, target: &SampledField) -> Result<(Vec<f64>, LossBreakdown)> {
    let gamma = embed_coords(&input.points, &model.emb)?;
    let n = input.points.len();
    let c = input.channels();
    let c_out = target.channels();
    let mut eta = Array2::zeros((n, c + gamma.ncols()));
    for j in 0..n {
        for ch in 0..c {
            eta[[j, ch]] = input.values[[j, ch]];
        }
        for i in 0..gamma.ncols() {
            eta[[j, c + i]] = gamma[[j, i]];
        }
    }
    let tape = Tape::new();
    let w1 = tape.var2(model.w1.clone());
    let b1 = tape.var1(model.b1.clone());
    let w2 = tape.var2(model.w2.clone());
    let b2 = tape.var1(model.b2.clone());
    let w3 = tape.var2(model.w3.clone());
    let b3 = tape.var1(model.b3.clone());
    let ordered = [w1, b1, w2, b2, w3, b3];
    let x = tape.var2(eta);
    let pred = x
        .matmul(w1.t())
        .add_row(b1)
        .relu()
        .matmul(w2.t())
        .add_row(b2)
        .relu()
        .matmul(w3.t())
        .add_row(b3);
    let tc = tape.var2(target.values.clone());
    let diff = pred.sub(tc);
    let loss = diff.mul(diff).sum_all().scale(1.0 / (n * c_out) as f64);
    let total = loss.scalar_value();
    if !total.is_finite() {
        return Err(GpoError::NonFinite {
            context: "mlp loss".into(),
        });
    }
    let grads = tape.backward(loss);
    let (_, specs) = params::flatten_mlp(model);
    let mut flat = Vec::new();
    for (var, spec) in ordered.iter().zip(specs.iter()) {
        match &grads[var.index()] {
            Some(g) => flat.extend(g.iter().cloned()),
            None => flat.extend(std::iter::repeat(0.0).take(spec.len())),
        }
    }
    Ok((flat, LossBreakdown {
        recon: total,
        total,
        ..Default::default()
    }))
}

/// Plain-side MSE for the pointwise model (finite-difference oracle).
pub fn plain_loss_mlp(model: &PlainMlp, input: &SampledField, target: &SampledField) -> Result<f64> {
    let out = forward_mlp(model, input)?;
    let n = input.points.len() as f64;
    let c = target.channels() as f64;
    Ok((&out.values - &target.values).mapv(|v| v * v).sum() / (n * c))
}
