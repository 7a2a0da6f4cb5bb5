//! Experiment configuration: JSON-serializable, schema-strict (unknown keys
//! rejected), with named presets for the bundled experiments.

use serde::{Deserialize, Serialize};

use crate::error::{GpoError, Result};

fn d_true() -> bool {
    true
}

/// Which forward architecture to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// Gaussian particle operator (encoder, basis, attention stack, decoder).
    Gpo,
    /// Pointwise MLP of matched parameter count; no spatial structure.
    Pointwise,
}

/// How query points pick up particles when re-querying off the context grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryAssignment {
    NearestSite,
    /// Average the evaluations over the k nearest context sites.
    KnnAverage { k: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_gaussians: usize,
    pub fourier_m: usize,
    pub sigma_b: f64,
    pub lambda: f64,
    #[serde(default)]
    pub learnable_lambda: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub reg_mu_coeff: f64,
    pub reg_sigma_coeff: f64,
    #[serde(default)]
    pub aux_coeff: f64,
    pub decoder_hidden: usize,
    #[serde(default)]
    pub tie_wz: bool,
    #[serde(default = "default_query_assignment")]
    pub query_assignment: QueryAssignment,
    #[serde(default = "default_variant")]
    pub variant: ModelVariant,
}

fn default_clip_norm() -> Option<f64> {
    Some(1.0)
}

fn default_query_assignment() -> QueryAssignment {
    QueryAssignment::NearestSite
}

fn default_variant() -> ModelVariant {
    ModelVariant::Gpo
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr0: f64,
    pub step_period: usize,
    pub gamma: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    #[serde(default = "d_true")]
    pub shuffle: bool,
    /// Stop once validation relative L2 drops below this value.
    #[serde(default)]
    pub stop_at_val: Option<f64>,
    /// Global-norm gradient clip applied to each averaged batch gradient.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: Option<f64>,
}

/// Advecting velocity used by the synthetic solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VelocitySpec {
    Zero,
    /// Uniform translation (vx, vy).
    Uniform { vx: f64, vy: f64 },
    /// Fixed divergence-free single-cell circulation of given amplitude.
    Solenoidal { amplitude: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub grid_n: usize,
    pub viscosity: f64,
    pub velocity: VelocitySpec,
    pub dt: f64,
    pub steps_per_pair: usize,
    pub spectrum_p: f64,
    pub n_traj: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Train/val/test fractions; must sum to 1.
    pub split: [f64; 3],
    /// Fraction of points masked out (0 disables masking).
    #[serde(default)]
    pub mask_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub rollout_t: usize,
    pub spectrum_band: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Reference configuration mirroring the largest bundled experiment.
    pub fn default_full() -> Self {
        ExperimentConfig {
            model: ModelConfig {
                hidden_dim: 128,
                num_layers: 8,
                num_heads: 8,
                num_gaussians: 32,
                fourier_m: 16,
                sigma_b: 1.0,
                lambda: 0.5,
                learnable_lambda: false,
                sigma_min: 1e-3,
                sigma_max: 0.5,
                reg_mu_coeff: 1e-2,
                reg_sigma_coeff: 1e-3,
                aux_coeff: 0.0,
                decoder_hidden: 64,
                tie_wz: false,
                query_assignment: default_query_assignment(),
                variant: ModelVariant::Gpo,
            },
            training: TrainingConfig {
                lr0: 1e-3,
                step_period: 100,
                gamma: 0.5,
                weight_decay: 0.01,
                batch: 16,
                epochs: 300,
                patience: 50,
                seed: 0,
                shuffle: true,
                stop_at_val: None,
                clip_norm: default_clip_norm(),
            },
            data: DataConfig {
                grid_n: 32,
                viscosity: 1e-3,
                velocity: VelocitySpec::Solenoidal { amplitude: 0.6 },
                dt: 2e-3,
                steps_per_pair: 30,
                spectrum_p: 6.0,
                n_traj: 50,
                horizon: 20,
                seed: 0,
                split: [0.8, 0.1, 0.1],
                mask_fraction: 0.0,
            },
            eval: EvalConfig {
                rollout_t: 20,
                spectrum_band: [4, 12],
            },
        }
    }

    /// Small single-core training preset used by the default experiments.
    /// The schedule keeps a long mid-level learning-rate phase; the global
    /// coupling path only starts contributing after roughly 100 epochs.
    pub fn desk() -> Self {
        let mut c = Self::default_full();
        c.model.hidden_dim = 32;
        c.model.num_layers = 2;
        c.model.num_heads = 2;
        c.model.num_gaussians = 8;
        c.model.fourier_m = 8;
        c.model.decoder_hidden = 32;
        c.training.lr0 = 3e-3;
        c.training.step_period = 60;
        c.training.epochs = 160;
        c.training.patience = 160;
        c
    }

    /// Tiny fixture for gradient checks: 4x4 grid, G=4, D=8, H=2, n=2.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.model.hidden_dim = 16;
        c.model.num_heads = 2;
        c.model.num_gaussians = 4;
        c.model.num_layers = 2;
        c.model.fourier_m = 4;
        c.model.decoder_hidden = 16;
        c.data.grid_n = 4;
        c.data.n_traj = 4;
        c.data.horizon = 3;
        c.data.split = [0.5, 0.25, 0.25];
        c.training.batch = 2;
        c.training.epochs = 5;
        c
    }

    /// Named preset lookup used by the CLI.
    pub fn preset(name: &str) -> Result<Self> {
        let c = match name {
            "default" => Self::default_full(),
            "desk" => Self::desk(),
            "tiny" => Self::tiny(),
            "no-pg" => {
                let mut c = Self::desk();
                c.model.num_layers = 0;
                c
            }
            "no-gaussian-field" => {
                let mut c = Self::desk();
                c.model.variant = ModelVariant::Pointwise;
                c
            }
            "g1" => {
                let mut c = Self::desk();
                c.model.num_gaussians = 1;
                c
            }
            "g16" => {
                let mut c = Self::desk();
                c.model.num_gaussians = 16;
                c
            }
            "g64" => {
                let mut c = Self::desk();
                c.model.num_gaussians = 64;
                c
            }
            other => {
                return Err(GpoError::Config {
                    field: "preset".into(),
                    message: format!("unknown preset `{other}`"),
                })
            }
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &str, message: String| GpoError::Config {
            field: field.into(),
            message,
        };
        let m = &self.model;
        if m.num_gaussians < 1 {
            return Err(cfg("model.num_gaussians", "must be >= 1".into()));
        }
        if m.hidden_dim < 1 {
            return Err(cfg("model.hidden_dim", "must be >= 1".into()));
        }
        if m.num_heads < 1 || m.hidden_dim % m.num_heads != 0 {
            return Err(cfg(
                "model.num_heads",
                format!("must be >= 1 and divide hidden_dim ({})", m.hidden_dim),
            ));
        }
        if !(0.0..=1.0).contains(&m.lambda) {
            return Err(cfg("model.lambda", "must be in [0, 1]".into()));
        }
        if !(m.sigma_min > 0.0 && m.sigma_min < m.sigma_max) {
            return Err(cfg("model.sigma_min", "need 0 < sigma_min < sigma_max".into()));
        }
        if m.fourier_m < 1 {
            return Err(cfg("model.fourier_m", "must be >= 1".into()));
        }
        if let QueryAssignment::KnnAverage { k } = m.query_assignment {
            if k < 1 {
                return Err(cfg("model.query_assignment.k", "must be >= 1".into()));
            }
        }
        let t = &self.training;
        if t.lr0 <= 0.0 || t.gamma <= 0.0 || t.step_period == 0 {
            return Err(cfg("training", "lr0, gamma > 0 and step_period >= 1 required".into()));
        }
        if t.batch == 0 {
            return Err(cfg("training.batch", "must be >= 1".into()));
        }
        if t.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(cfg("training.clip_norm", "must be > 0 when set".into()));
        }
        let d = &self.data;
        if d.grid_n < 2 {
            return Err(cfg("data.grid_n", "must be >= 2".into()));
        }
        if d.viscosity < 0.0 || d.dt <= 0.0 || d.steps_per_pair == 0 {
            return Err(cfg("data", "viscosity >= 0, dt > 0, steps_per_pair >= 1 required".into()));
        }
        let ssum: f64 = d.split.iter().sum();
        if (ssum - 1.0).abs() > 1e-9 || d.split.iter().any(|&s| s < 0.0) {
            return Err(cfg("data.split", "fractions must be nonnegative and sum to 1".into()));
        }
        if !(0.0..1.0).contains(&d.mask_fraction) {
            return Err(cfg("data.mask_fraction", "must be in [0, 1)".into()));
        }
        if self.eval.rollout_t == 0 {
            return Err(cfg("eval.rollout_t", "must be >= 1".into()));
        }
        if self.eval.spectrum_band[0] >= self.eval.spectrum_band[1] {
            return Err(cfg("eval.spectrum_band", "need lo < hi".into()));
        }
        Ok(())
    }

    /// Attention head width D = hidden_dim / num_heads.
    pub fn head_dim(&self) -> usize {
        self.model.hidden_dim / self.model.num_heads
    }
}
