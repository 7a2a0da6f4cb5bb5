//! Gaussian particle encoder, weighted basis evaluation, decoder head, and
//! the particle regularizers.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{GpoError, Result};
use crate::field::{embed_coords, FourierEmbedding, PointSet, SampledField};

/// Floor applied to softplus scale outputs so sigma stays strictly positive.
pub const SIGMA_SOFTPLUS_FLOOR: f64 = 1e-6;

/// Per-site Gaussian particles: centers `mu` (N x G x d), axis-aligned
/// scales `sigma` (N x G x d, strictly positive) and mixture weights `w`
/// (N x G, rows on the simplex).
#[derive(Debug, Clone)]
pub struct GaussianField {
    pub mu: Array3<f64>,
    pub sigma: Array3<f64>,
    pub w: Array2<f64>,
}

impl GaussianField {
    pub fn new(mu: Array3<f64>, sigma: Array3<f64>, w: Array2<f64>) -> Result<Self> {
        let (n, g, d) = mu.dim();
        if sigma.dim() != (n, g, d) {
            return Err(GpoError::shape(
                "GaussianField",
                format!("sigma {n}x{g}x{d}"),
                format!("{:?}", sigma.dim()),
            ));
        }
        if w.dim() != (n, g) {
            return Err(GpoError::shape(
                "GaussianField",
                format!("w {n}x{g}"),
                format!("{:?}", w.dim()),
            ));
        }
        if mu.iter().chain(sigma.iter()).chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(GpoError::NonFinite {
                context: "GaussianField".into(),
            });
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(GpoError::domain("GaussianField", "sigma must be strictly positive"));
        }
        if w.iter().any(|&x| x < 0.0) {
            return Err(GpoError::domain("GaussianField", "w must be nonnegative"));
        }
        for j in 0..n {
            let s: f64 = w.row(j).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(GpoError::domain(
                    "GaussianField",
                    format!("w row {j} sums to {s}, expected 1"),
                ));
            }
        }
        Ok(GaussianField { mu, sigma, w })
    }

    pub fn num_sites(&self) -> usize {
        self.mu.dim().0
    }

    pub fn num_components(&self) -> usize {
        self.mu.dim().1
    }

    pub fn dim(&self) -> usize {
        self.mu.dim().2
    }

    /// Flat JSON records for external plotters (ellipse overlays).
    pub fn export_records(&self) -> Vec<ParticleRecord> {
        let (n, g, d) = self.mu.dim();
        let mut out = Vec::with_capacity(n * g);
        for j in 0..n {
            for i in 0..g {
                out.push(ParticleRecord {
                    site: j,
                    component: i,
                    mu: (0..d).map(|l| self.mu[[j, i, l]]).collect(),
                    sigma: (0..d).map(|l| self.sigma[[j, i, l]]).collect(),
                    w: self.w[[j, i]],
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParticleRecord {
    pub site: usize,
    pub component: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub w: f64,
}

/// N x G matrix of weighted kernel evaluations; the operator's working state.
///
/// Elementwise `0 <= z_{j,i} <= w_{j,i} <= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix(pub Array2<f64>);

impl BasisMatrix {
    pub fn num_sites(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_components(&self) -> usize {
        self.0.ncols()
    }
}

/// Encoder weights. Heads carry bias terms; shapes follow
/// `(out_dim, in_dim)` and apply as `x W^T + b` on row-stacked inputs.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub u_mu: Array2<f64>,
    pub b_u_mu: Array1<f64>,
    pub u_sigma: Array2<f64>,
    pub b_u_sigma: Array1<f64>,
    pub u_w: Array2<f64>,
    pub b_u_w: Array1<f64>,
    pub w_mu: Array2<f64>,
    pub b_mu: Array1<f64>,
    pub w_sigma: Array2<f64>,
    pub b_sigma: Array1<f64>,
    pub w_w: Array2<f64>,
    pub b_w: Array1<f64>,
}

fn init_matrix(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Array2<f64> {
    let scale = (1.0 / inp as f64).sqrt();
    Array2::from_shape_fn((out, inp), |_| rng.gen_range(-scale..scale))
}

impl EncoderParams {
    /// Random initialization: weights uniform in +-1/sqrt(fan_in), biases zero.
    pub fn init(rng: &mut ChaCha8Rng, c_in: usize, emb_dim: usize, hidden: usize, g: usize, d: usize) -> Self {
        let inp = c_in + emb_dim;
        EncoderParams {
            w_in: init_matrix(rng, hidden, inp),
            b_in: Array1::zeros(hidden),
            u_mu: init_matrix(rng, hidden, hidden),
            b_u_mu: Array1::zeros(hidden),
            u_sigma: init_matrix(rng, hidden, hidden),
            b_u_sigma: Array1::zeros(hidden),
            u_w: init_matrix(rng, hidden, hidden),
            b_u_w: Array1::zeros(hidden),
            w_mu: init_matrix(rng, g * d, hidden),
            b_mu: Array1::zeros(g * d),
            w_sigma: init_matrix(rng, g * d, hidden),
            b_sigma: Array1::zeros(g * d),
            w_w: init_matrix(rng, g, hidden),
            b_w: Array1::zeros(g),
        }
    }

    pub fn zeros(c_in: usize, emb_dim: usize, hidden: usize, g: usize, d: usize) -> Self {
        let inp = c_in + emb_dim;
        EncoderParams {
            w_in: Array2::zeros((hidden, inp)),
            b_in: Array1::zeros(hidden),
            u_mu: Array2::zeros((hidden, hidden)),
            b_u_mu: Array1::zeros(hidden),
            u_sigma: Array2::zeros((hidden, hidden)),
            b_u_sigma: Array1::zeros(hidden),
            u_w: Array2::zeros((hidden, hidden)),
            b_u_w: Array1::zeros(hidden),
            w_mu: Array2::zeros((g * d, hidden)),
            b_mu: Array1::zeros(g * d),
            w_sigma: Array2::zeros((g * d, hidden)),
            b_sigma: Array1::zeros(g * d),
            w_w: Array2::zeros((g, hidden)),
            b_w: Array1::zeros(g),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_in.nrows()
    }

    pub fn num_components(&self) -> usize {
        self.w_w.nrows()
    }
}

/// Two-layer ReLU perceptron mapping R^G -> R^{c_out}.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl DecoderParams {
    pub fn init(rng: &mut ChaCha8Rng, g: usize, hidden: usize, c_out: usize) -> Self {
        DecoderParams {
            w1: init_matrix(rng, hidden, g),
            b1: Array1::zeros(hidden),
            w2: init_matrix(rng, c_out, hidden),
            b2: Array1::zeros(c_out),
        }
    }
}

pub(crate) fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

pub(crate) fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub(crate) fn softplus(x: f64) -> f64 {
    // numerically stable log(1 + e^x)
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

fn check_finite(context: &str, x: &Array2<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GpoError::NonFinite {
            context: context.into(),
        });
    }
    Ok(())
}

/// Encode a (normalized) sampled field into per-site Gaussian particles.
///
/// Per site j: `phi = relu(W_in [a_j, gamma(x_j)])`,
/// `mu = W_mu relu(U_mu phi)`, `sigma = softplus(W_sigma relu(U_sigma phi))`
/// (floored), `w = softmax(W_w relu(U_w phi))`.
pub fn encode(field: &SampledField, emb: &FourierEmbedding, p: &EncoderParams) -> Result<GaussianField> {
    let n = field.points.len();
    let d = field.points.dim();
    let g = p.num_components();
    let gamma = embed_coords(&field.points, emb)?;
    let expected_in = field.channels() + gamma.ncols();
    if p.w_in.ncols() != expected_in {
        return Err(GpoError::shape(
            "encode",
            format!("W_in with {expected_in} inputs"),
            format!("{}", p.w_in.ncols()),
        ));
    }
    let mut eta = Array2::zeros((n, expected_in));
    for j in 0..n {
        for ch in 0..field.channels() {
            eta[[j, ch]] = field.values[[j, ch]];
        }
        for i in 0..gamma.ncols() {
            eta[[j, field.channels() + i]] = gamma[[j, i]];
        }
    }

    let phi = relu(&linear(&eta, &p.w_in, &p.b_in));
    check_finite("encode: phi", &phi)?;

    let mu_flat = linear(&relu(&linear(&phi, &p.u_mu, &p.b_u_mu)), &p.w_mu, &p.b_mu);
    check_finite("encode: mu head", &mu_flat)?;
    let sigma_pre = linear(&relu(&linear(&phi, &p.u_sigma, &p.b_u_sigma)), &p.w_sigma, &p.b_sigma);
    check_finite("encode: sigma head", &sigma_pre)?;
    let w_pre = linear(&relu(&linear(&phi, &p.u_w, &p.b_u_w)), &p.w_w, &p.b_w);
    check_finite("encode: w head", &w_pre)?;

    let mu = mu_flat
        .into_shape_with_order((n, g, d))
        .map_err(|e| GpoError::TensorFormat(e.to_string()))?;
    let sigma = sigma_pre
        .mapv(|v| softplus(v).max(SIGMA_SOFTPLUS_FLOOR))
        .into_shape_with_order((n, g, d))
        .map_err(|e| GpoError::TensorFormat(e.to_string()))?;
    let w = softmax_rows(&w_pre);

    GaussianField::new(mu, sigma, w)
}

/// Unnormalized axis-aligned Gaussian kernel `exp(-1/2 ||(q-mu)/sigma||^2)`.
///
/// Equals 1 iff `q == mu`.
pub fn gaussian_kernel(query: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if query.len() != mu.len() || mu.len() != sigma.len() {
        return Err(GpoError::shape(
            "gaussian_kernel",
            format!("d={}", query.len()),
            format!("mu d={}, sigma d={}", mu.len(), sigma.len()),
        ));
    }
    if sigma.iter().any(|&s| s <= 0.0) {
        return Err(GpoError::domain("gaussian_kernel", "sigma must be strictly positive"));
    }
    let mut q = 0.0;
    for l in 0..query.len() {
        let t = (query[l] - mu[l]) / sigma[l];
        q += t * t;
    }
    Ok((-0.5 * q).exp())
}

/// Per-site weighted evaluation `z_{j,i} = w_{j,i} * G(x_j; mu_{j,i}, sigma_{j,i})`,
/// with query j evaluated against site j's own particles.
pub fn evaluate_basis(gf: &GaussianField, queries: &PointSet) -> Result<BasisMatrix> {
    let (n, g, d) = gf.mu.dim();
    if queries.len() != n || queries.dim() != d {
        return Err(GpoError::shape(
            "evaluate_basis",
            format!("{n} queries of dim {d}"),
            format!("{} of dim {}", queries.len(), queries.dim()),
        ));
    }
    let coords = queries.coords();
    let mut z = Array2::zeros((n, g));
    for j in 0..n {
        for i in 0..g {
            let mut q = 0.0;
            for l in 0..d {
                let t = (coords[[j, l]] - gf.mu[[j, i, l]]) / gf.sigma[[j, i, l]];
                q += t * t;
            }
            z[[j, i]] = gf.w[[j, i]] * (-0.5 * q).exp();
        }
    }
    Ok(BasisMatrix(z))
}

/// Row-wise decoder MLP application.
pub fn decode(z: &BasisMatrix, p: &DecoderParams) -> Result<Array2<f64>> {
    if z.0.ncols() != p.w1.ncols() {
        return Err(GpoError::shape(
            "decode",
            format!("{} basis columns", p.w1.ncols()),
            format!("{}", z.0.ncols()),
        ));
    }
    let h = relu(&linear(&z.0, &p.w1, &p.b1));
    let out = linear(&h, &p.w2, &p.b2);
    check_finite("decode", &out)?;
    Ok(out)
}

/// Center-alignment penalty `(1/N) sum_j || sum_i w_{j,i} mu_{j,i} - x_j ||^2`.
pub fn reg_mu(gf: &GaussianField, pts: &PointSet) -> Result<f64> {
    let (n, g, d) = gf.mu.dim();
    if pts.len() != n || pts.dim() != d {
        return Err(GpoError::shape(
            "reg_mu",
            format!("{n} points of dim {d}"),
            format!("{} of dim {}", pts.len(), pts.dim()),
        ));
    }
    let coords = pts.coords();
    let mut total = 0.0;
    for j in 0..n {
        for l in 0..d {
            let mut bary = 0.0;
            for i in 0..g {
                bary += gf.w[[j, i]] * gf.mu[[j, i, l]];
            }
            let diff = bary - coords[[j, l]];
            total += diff * diff;
        }
    }
    Ok(total / n as f64)
}

/// Scale-band hinge penalty
/// `(1/(NGd)) sum [sigma - sigma_max]_+ + [sigma_min - sigma]_+`.
pub fn reg_sigma(gf: &GaussianField, sigma_min: f64, sigma_max: f64) -> Result<f64> {
    if !(sigma_min > 0.0 && sigma_min < sigma_max) {
        return Err(GpoError::domain(
            "reg_sigma",
            "require 0 < sigma_min < sigma_max",
        ));
    }
    let count = gf.sigma.len() as f64;
    let total: f64 = gf
        .sigma
        .iter()
        .map(|&s| (s - sigma_max).max(0.0) + (sigma_min - s).max(0.0))
        .sum();
    Ok(total / count)
}
