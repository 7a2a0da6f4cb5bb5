//! Full operator composition: encode a field into Gaussian particles once,
//! evaluate the basis, apply a stack of PG attention layers conditioned on
//! the fixed particle field, and decode per site. Also holds the
//! resolution-agnostic re-query path and the pointwise MLP used as a
//! structure-free comparison model.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{pg_layer, LayerDiagnostics, PGAttentionParams};
use crate::basis::{decode, encode, evaluate_basis, BasisMatrix, DecoderParams, EncoderParams, GaussianField};
use crate::config::{ExperimentConfig, ModelVariant, QueryAssignment};
use crate::error::{GpoError, Result};
use crate::field::{embed_coords, FourierEmbedding, PointSet, SampledField};
use crate::tensor::TensorArchive;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The Gaussian particle operator: encoder, frozen positional embedding,
/// attention stack, and decoder, plus the configuration snapshot it was
/// built from.
#[derive(Debug, Clone)]
pub struct GPOModel {
    pub config: ExperimentConfig,
    pub c_in: usize,
    pub c_out: usize,
    pub emb: FourierEmbedding,
    pub encoder: EncoderParams,
    pub layers: Vec<PGAttentionParams>,
    /// Raw mixing logits when `learnable_lambda` is set; layer lambdas are
    /// kept equal to `sigmoid(raw)` via [`GPOModel::sync_lambda`].
    pub lambda_raw: Option<Vec<f64>>,
    pub decoder: DecoderParams,
}

impl GPOModel {
    pub fn init(config: &ExperimentConfig, d: usize, c_in: usize, c_out: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let emb = FourierEmbedding::sample(m.fourier_m, d, m.sigma_b, seed.wrapping_add(1))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&mut rng, c_in, emb.output_dim(), m.hidden_dim, m.num_gaussians, d);
        let head_dim = config.head_dim();
        let mut layers = Vec::with_capacity(m.num_layers);
        for _ in 0..m.num_layers {
            let mut layer =
                PGAttentionParams::init(&mut rng, m.num_gaussians, d, head_dim, m.num_heads, m.lambda)?;
            if m.tie_wz {
                let shared = layer.heads[0].w_z.clone();
                for head in &mut layer.heads {
                    head.w_z = shared.clone();
                }
            }
            layers.push(layer);
        }
        let decoder = DecoderParams::init(&mut rng, m.num_gaussians, m.decoder_hidden, c_out);
        let lambda_raw = if m.learnable_lambda {
            // logit of the configured lambda so training starts at it
            let l = m.lambda.clamp(1e-6, 1.0 - 1e-6);
            Some(vec![(l / (1.0 - l)).ln(); m.num_layers])
        } else {
            None
        };
        let mut model = GPOModel {
            config: config.clone(),
            c_in,
            c_out,
            emb,
            encoder,
            layers,
            lambda_raw,
            decoder,
        };
        model.sync_lambda();
        Ok(model)
    }

    /// Propagate raw mixing logits into the per-layer lambda values.
    pub fn sync_lambda(&mut self) {
        if let Some(raw) = &self.lambda_raw {
            for (layer, &r) in self.layers.iter_mut().zip(raw.iter()) {
                layer.lambda = sigmoid(r);
            }
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Forward pass internals: particle field, per-stage basis matrices
/// (stage 0 through n), per-layer diagnostics, and the decoded output.
pub struct ForwardTrace {
    pub particles: GaussianField,
    pub stages: Vec<BasisMatrix>,
    pub diagnostics: Vec<LayerDiagnostics>,
    pub output: Array2<f64>,
}

/// Run the full pipeline on a normalized field, keeping intermediates.
/// The particle field is computed once and conditions every stage.
pub fn forward_trace(model: &GPOModel, a: &SampledField) -> Result<ForwardTrace> {
    let particles = encode(a, &model.emb, &model.encoder)?;
    let z0 = evaluate_basis(&particles, &a.points)?;
    let mut stages = vec![z0];
    let mut diagnostics = Vec::with_capacity(model.layers.len());
    for (k, layer) in model.layers.iter().enumerate() {
        let (z, diag) = pg_layer(stages.last().unwrap(), &particles, layer).map_err(|e| {
            GpoError::NumericalFault {
                stage: k,
                message: e.to_string(),
            }
        })?;
        stages.push(z);
        diagnostics.push(diag);
    }
    let output = decode(stages.last().unwrap(), &model.decoder)?;
    Ok(ForwardTrace {
        particles,
        stages,
        diagnostics,
        output,
    })
}

/// Predict on the input's own points (normalized in, normalized out).
pub fn forward(model: &GPOModel, a: &SampledField) -> Result<SampledField> {
    let trace = forward_trace(model, a)?;
    SampledField::new(a.points.clone(), trace.output)
}

/// Scalar activation summary per stage: `A^(k)(x_j) = sum_g Z^(k)_{j,g}`.
pub fn layer_activation_summary(model: &GPOModel, a: &SampledField) -> Result<Vec<Vec<f64>>> {
    let trace = forward_trace(model, a)?;
    Ok(trace
        .stages
        .iter()
        .map(|z| z.0.rows().into_iter().map(|r| r.sum()).collect())
        .collect())
}

/// Re-query result: predictions on the query points plus indices of queries
/// outside the inflated bounding box [-0.5, 1.5]^d (far extrapolation).
pub struct QueryResult {
    pub prediction: SampledField,
    pub far_queries: Vec<usize>,
}

/// Evaluate the trained operator at arbitrary query points: the particle
/// field from the context input is held fixed, each query adopts particles
/// from nearby context sites, and the same layers and decoder apply.
pub fn forward_at_queries(model: &GPOModel, a: &SampledField, queries: &PointSet) -> Result<QueryResult> {
    let d = a.points.dim();
    if queries.dim() != d {
        return Err(GpoError::shape(
            "forward_at_queries",
            format!("{d}-dimensional queries"),
            format!("{}", queries.dim()),
        ));
    }
    let particles = encode(a, &model.emb, &model.encoder)?;
    let ctx = a.points.coords();
    let n_ctx = ctx.nrows();
    let mq = queries.len();
    let g = particles.num_components();

    let mut far_queries = Vec::new();
    for m in 0..mq {
        for l in 0..d {
            let q = queries.coords()[[m, l]];
            if !(-0.5..=1.5).contains(&q) {
                far_queries.push(m);
                break;
            }
        }
    }

    // per query: pick particle parameters from context sites
    let mut mu = Array3::zeros((mq, g, d));
    let mut sigma = Array3::zeros((mq, g, d));
    let mut w = Array2::zeros((mq, g));
    let k_avg = match model.config.model.query_assignment {
        QueryAssignment::NearestSite => 1,
        QueryAssignment::KnnAverage { k } => k.min(n_ctx),
    };
    for m in 0..mq {
        let mut dists: Vec<(f64, usize)> = (0..n_ctx)
            .map(|j| {
                let d2: f64 = (0..d)
                    .map(|l| {
                        let diff = queries.coords()[[m, l]] - ctx[[j, l]];
                        diff * diff
                    })
                    .sum();
                (d2, j)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let inv_k = 1.0 / k_avg as f64;
        for &(_, j) in dists.iter().take(k_avg) {
            for gi in 0..g {
                w[[m, gi]] += particles.w[[j, gi]] * inv_k;
                for l in 0..d {
                    mu[[m, gi, l]] += particles.mu[[j, gi, l]] * inv_k;
                    sigma[[m, gi, l]] += particles.sigma[[j, gi, l]] * inv_k;
                }
            }
        }
    }
    let query_particles = GaussianField::new(mu, sigma, w)?;
    let z0 = evaluate_basis(&query_particles, queries)?;
    let mut z = z0;
    for (k, layer) in model.layers.iter().enumerate() {
        let (znext, _) = pg_layer(&z, &query_particles, layer).map_err(|e| GpoError::NumericalFault {
            stage: k,
            message: e.to_string(),
        })?;
        z = znext;
    }
    let output = decode(&z, &model.decoder)?;
    Ok(QueryResult {
        prediction: SampledField::new(queries.clone(), output)?,
        far_queries,
    })
}

/// Pointwise two-hidden-layer MLP on `[a_j, gamma(x_j)]`; no interaction
/// between sites. Used as the structure-free comparison model.
#[derive(Debug, Clone)]
pub struct PlainMlp {
    pub emb: FourierEmbedding,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl PlainMlp {
    /// Width chosen so the total parameter count approximately matches
    /// `target_params` (never below a width of 4).
    pub fn init_matched(
        target_params: usize,
        fourier_m: usize,
        sigma_b: f64,
        d: usize,
        c_in: usize,
        c_out: usize,
        seed: u64,
    ) -> Result<Self> {
        let emb = FourierEmbedding::sample(fourier_m, d, sigma_b, seed.wrapping_add(1))?;
        let inp = c_in + emb.output_dim();
        // params(h) = h(inp+1) + h(h+1) + c_out(h+1); solve for h
        let a = 1.0;
        let b = (inp + 2 + c_out) as f64;
        let c = c_out as f64 - target_params as f64;
        let h = ((-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)).round().max(4.0) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = |rng: &mut ChaCha8Rng, out: usize, inp: usize| {
            let scale = (1.0 / inp as f64).sqrt();
            Array2::from_shape_fn((out, inp), |_| rand::Rng::gen_range(rng, -scale..scale))
        };
        Ok(PlainMlp {
            emb,
            w1: init(&mut rng, h, inp),
            b1: Array1::zeros(h),
            w2: init(&mut rng, h, h),
            b2: Array1::zeros(h),
            w3: init(&mut rng, c_out, h),
            b3: Array1::zeros(c_out),
        })
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }
}

pub fn forward_mlp(model: &PlainMlp, a: &SampledField) -> Result<SampledField> {
    let gamma = embed_coords(&a.points, &model.emb)?;
    let n = a.points.len();
    let inp = a.channels() + gamma.ncols();
    if model.w1.ncols() != inp {
        return Err(GpoError::shape("forward_mlp", format!("{inp} inputs"), format!("{}", model.w1.ncols())));
    }
    let mut eta = Array2::zeros((n, inp));
    for j in 0..n {
        for ch in 0..a.channels() {
            eta[[j, ch]] = a.values[[j, ch]];
        }
        for i in 0..gamma.ncols() {
            eta[[j, a.channels() + i]] = gamma[[j, i]];
        }
    }
    let h1 = (eta.dot(&model.w1.t()) + &model.b1).mapv(|v| v.max(0.0));
    let h2 = (h1.dot(&model.w2.t()) + &model.b2).mapv(|v| v.max(0.0));
    let out = h2.dot(&model.w3.t()) + &model.b3;
    SampledField::new(a.points.clone(), out)
}

/// Either forward architecture behind one interface.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Gpo(GPOModel),
    Pointwise(PlainMlp),
}

impl AnyModel {
    pub fn build(config: &ExperimentConfig, d: usize, c_in: usize, c_out: usize, seed: u64) -> Result<Self> {
        match config.model.variant {
            ModelVariant::Gpo => Ok(AnyModel::Gpo(GPOModel::init(config, d, c_in, c_out, seed)?)),
            ModelVariant::Pointwise => {
                // match parameter count to the equivalent particle model
                let mut gpo_cfg = config.clone();
                gpo_cfg.model.variant = ModelVariant::Gpo;
                let reference = GPOModel::init(&gpo_cfg, d, c_in, c_out, seed)?;
                let target = crate::params::num_params(&reference);
                Ok(AnyModel::Pointwise(PlainMlp::init_matched(
                    target,
                    config.model.fourier_m,
                    config.model.sigma_b,
                    d,
                    c_in,
                    c_out,
                    seed,
                )?))
            }
        }
    }

    pub fn forward(&self, a: &SampledField) -> Result<SampledField> {
        match self {
            AnyModel::Gpo(m) => forward(m, a),
            AnyModel::Pointwise(m) => forward_mlp(m, a),
        }
    }
}

/// Save a model checkpoint: every tensor (including the frozen embedding)
/// plus the configuration snapshot, in one archive file.
pub fn save_checkpoint(model: &GPOModel, path: &std::path::Path) -> Result<()> {
    let mut arch = TensorArchive::new(serde_json::json!({
        "kind": "gpo-checkpoint",
        "config": model.config,
        "c_in": model.c_in,
        "c_out": model.c_out,
        "dim": model.emb.b().ncols(),
    }));
    arch.insert("emb.b", model.emb.b().clone().into_dyn());
    for (name, arr) in crate::params::named_arrays(model) {
        arch.insert(&name, arr);
    }
    arch.save(path)
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<GPOModel> {
    let arch = TensorArchive::load(path)?;
    if arch.meta["kind"] != "gpo-checkpoint" {
        return Err(GpoError::TensorFormat("not a model checkpoint".into()));
    }
    let config: ExperimentConfig = serde_json::from_value(arch.meta["config"].clone())?;
    let c_in = arch.meta["c_in"].as_u64().unwrap_or(1) as usize;
    let c_out = arch.meta["c_out"].as_u64().unwrap_or(1) as usize;
    let d = arch.meta["dim"].as_u64().unwrap_or(2) as usize;
    let mut model = GPOModel::init(&config, d, c_in, c_out, config.training.seed)?;
    let b = arch.get("emb.b")?;
    model.emb = FourierEmbedding::from_matrix(
        b.clone()
            .into_dimensionality()
            .map_err(|e| GpoError::TensorFormat(format!("emb.b rank: {e}")))?,
        config.model.sigma_b,
    );
    crate::params::load_named_arrays(&mut model, &arch)?;
    model.sync_lambda();
    Ok(model)
}
