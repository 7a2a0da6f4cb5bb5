//! Experiment entry points: data generation, training, evaluation,
//! rollouts, spectra, gradient checks, scaling benchmarks, and exports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical fault,
//! 4 failed check, 1 other error.

use clap::{Parser, Subcommand};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use gpo_core::config::ExperimentConfig;
use gpo_core::diagnostics::{
    energy_spectrum, export_overlays, field_to_grid, one_step_eval, relative_l2, rollout, spectral_slope,
};
use gpo_core::error::GpoError;
use gpo_core::field::{normalize, NormStats, SampledField};
use gpo_core::operator::{load_checkpoint, save_checkpoint, AnyModel};
use gpo_core::synth::{make_dataset, Split, TrajectoryDataset};
use gpo_core::train::{check_gradients, train, write_history_csv};

#[derive(Parser)]
#[command(name = "gpo", about = "Gaussian particle operator experiments", version)]
struct Cli {
    /// JSON experiment configuration; overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in configuration: default, desk, tiny, no-pg, no-gaussian-field, g1, g16, g64.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,

    /// Override the training and data seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads; 1 is the reproducibility default.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic trajectory dataset.
    GenData,
    /// Train a model; generates data unless --data points at a dataset file.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// One-step test error of a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Autoregressive rollout of a trained checkpoint on a test trajectory.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Energy spectrum of a dataset snapshot (and checkpoint prediction, if given).
    Spectrum {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare reverse-mode gradients against finite differences.
    GradCheck,
    /// Time the attention layer across site counts and fit the scaling exponent.
    BenchScaling,
    /// Write particle and attention overlays for a test pair.
    ExportParticles {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Gaussian mixture density construction for a 1D sine target.
    Lemma1Demo,
}

fn exit_code(err: &GpoError) -> i32 {
    match err {
        GpoError::Config { .. } => 2,
        GpoError::NumericalFault { .. } | GpoError::NonFinite { .. } | GpoError::Diverged { .. } => 3,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    let started = Instant::now();
    match run(&cli) {
        Ok(check_failed) => {
            let _ = write_manifest(&cli, started.elapsed().as_secs_f64());
            if check_failed {
                eprintln!("check failed");
                std::process::exit(4);
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn load_config(cli: &Cli) -> gpo_core::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::preset(&cli.preset)?,
    };
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_manifest(cli: &Cli, wall_clock_secs: f64) -> gpo_core::Result<()> {
    let cfg = load_config(cli)?;
    let cfg_json = serde_json::to_string(&cfg)?;
    let mut hasher = DefaultHasher::new();
    cfg_json.hash(&mut hasher);
    let manifest = serde_json::json!({
        "config": cfg,
        "config_hash": format!("{:016x}", hasher.finish()),
        "seed": cfg.training.seed,
        "threads": cli.threads,
        "version": env!("CARGO_PKG_VERSION"),
        "wall_clock_secs": wall_clock_secs,
    });
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(cli.out.join("run_manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn obtain_dataset(cfg: &ExperimentConfig, data: &Option<PathBuf>) -> gpo_core::Result<TrajectoryDataset> {
    match data {
        Some(path) => TrajectoryDataset::load(path),
        None => make_dataset(&cfg.data),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> gpo_core::Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Returns Ok(true) when a pass/fail check failed (exit code 4).
fn run(cli: &Cli) -> gpo_core::Result<bool> {
    let cfg = load_config(cli)?;
    gpo_core::parallel::configure_threads(cli.threads);
    std::fs::create_dir_all(&cli.out)?;
    let out = &cli.out;
    match &cli.cmd {
        Cmd::GenData => {
            let ds = make_dataset(&cfg.data)?;
            ds.save(&out.join("dataset.gpt1"))?;
            println!(
                "wrote {} trajectories ({} train pairs) to {}",
                ds.trajectories.len(),
                ds.pairs(Split::Train).len(),
                out.join("dataset.gpt1").display()
            );
            Ok(false)
        }
        Cmd::Train { data } => {
            let ds = obtain_dataset(&cfg, data)?;
            let train_pairs = ds.pairs(Split::Train);
            let val_pairs = ds.pairs(Split::Val);
            let mut model = AnyModel::build(&cfg, 2, 1, 1, cfg.training.seed)?;
            let report = train(&mut model, &train_pairs, &val_pairs, &cfg)?;
            write_history_csv(&report.history, &out.join("history.csv"))?;
            write_json(&out.join("stats.json"), &report.stats)?;
            write_json(
                &out.join("summary.json"),
                &serde_json::json!({
                    "best_val": report.best_val,
                    "best_epoch": report.best_epoch,
                    "epochs_run": report.epochs_run,
                    "stopped_early": report.stopped_early,
                    "diverged": report.diverged,
                }),
            )?;
            if let AnyModel::Gpo(m) = &model {
                save_checkpoint(m, &out.join("checkpoint.gpt1"))?;
            }
            println!(
                "trained {} epochs, best val rel L2 {:.6} at epoch {}",
                report.epochs_run, report.best_val, report.best_epoch
            );
            if report.diverged {
                return Err(GpoError::Diverged {
                    epoch: report.epochs_run,
                    loss: f64::NAN,
                });
            }
            Ok(false)
        }
        Cmd::Eval { checkpoint, data } => {
            let model = AnyModel::Gpo(load_checkpoint(checkpoint)?);
            let ds = obtain_dataset(&cfg, data)?;
            let stats = training_stats(&ds)?;
            let test_pairs = ds.pairs(Split::Test);
            if test_pairs.is_empty() {
                return Err(GpoError::domain("eval", "dataset has no test pairs"));
            }
            let mut per_pair = Vec::with_capacity(test_pairs.len());
            for (input, target) in &test_pairs {
                let pred = one_step_eval(&model, input, &stats)?;
                per_pair.push(relative_l2(&pred, target)?);
            }
            let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
            write_json(
                &out.join("eval.json"),
                &serde_json::json!({ "mean_rel_l2": mean, "per_pair": per_pair }),
            )?;
            println!("test one-step rel L2: {mean:.6} over {} pairs", per_pair.len());
            Ok(false)
        }
        Cmd::Rollout { checkpoint, data } => {
            let model = AnyModel::Gpo(load_checkpoint(checkpoint)?);
            let ds = obtain_dataset(&cfg, data)?;
            let stats = training_stats(&ds)?;
            let idx = *ds
                .indices_of(Split::Test)
                .first()
                .ok_or_else(|| GpoError::domain("rollout", "dataset has no test trajectory"))?;
            let fields = ds.trajectory_fields(idx);
            let steps = cfg.eval.rollout_t.min(fields.len() - 1);
            let result = rollout(&model, &fields, &stats, steps)?;
            write_json(&out.join("rollout.json"), &result)?;
            println!(
                "rollout {} steps, final rel L2 {:.6}, diverged: {}",
                result.errors.len(),
                result.errors.last().copied().unwrap_or(f64::NAN),
                result.diverged
            );
            Ok(false)
        }
        Cmd::Spectrum { checkpoint, data } => {
            let ds = obtain_dataset(&cfg, data)?;
            let idx = ds.indices_of(Split::Test).first().copied().unwrap_or(0);
            let fields = ds.trajectory_fields(idx);
            let truth_grid = field_to_grid(&fields[1], ds.grid_n)?;
            // clamp the fit band to the bins this grid actually resolves
            let half = (ds.grid_n / 2).max(2);
            let band = if cfg.eval.spectrum_band[0] >= half {
                [1, half]
            } else {
                [cfg.eval.spectrum_band[0], cfg.eval.spectrum_band[1].min(half)]
            };
            let truth_spec = energy_spectrum(&truth_grid, band)?;
            let truth_slope = spectral_slope(&truth_spec, band)?;
            let mut report = serde_json::json!({
                "band": band,
                "truth": { "spectrum": truth_spec, "slope": truth_slope },
            });
            if let Some(ckpt) = checkpoint {
                let model = AnyModel::Gpo(load_checkpoint(ckpt)?);
                let stats = training_stats(&ds)?;
                let pred = one_step_eval(&model, &fields[0], &stats)?;
                let pred_spec = energy_spectrum(&field_to_grid(&pred, ds.grid_n)?, band)?;
                let pred_slope = spectral_slope(&pred_spec, band)?;
                report["prediction"] = serde_json::json!({ "spectrum": pred_spec, "slope": pred_slope });
            }
            write_json(&out.join("spectrum.json"), &report)?;
            println!("truth spectral slope over {band:?}: {truth_slope:.4}");
            Ok(false)
        }
        Cmd::GradCheck => {
            let mut data_cfg = cfg.data.clone();
            data_cfg.n_traj = 1;
            data_cfg.horizon = 1;
            data_cfg.split = [1.0, 0.0, 0.0];
            let ds = make_dataset(&data_cfg)?;
            let pairs = ds.pairs(Split::Train);
            let stats = NormStats::from_fields(pairs.iter().map(|(a, _)| a))?;
            let a = normalize(&pairs[0].0, &stats)?;
            let u = normalize(&pairs[0].1, &stats)?;
            let mut model = AnyModel::build(&cfg, 2, 1, 1, cfg.training.seed)?;
            let report = check_gradients(&mut model, &a, &u, 40, 1e-5, 1e-4)?;
            write_json(&out.join("grad_check.json"), &report)?;
            println!(
                "gradient check: max rel err {:.3e} over {} coordinates ({})",
                report.max_rel_err,
                report.coords_checked,
                if report.pass { "pass" } else { "FAIL" }
            );
            Ok(!report.pass)
        }
        Cmd::BenchScaling => bench_scaling(&cfg, out),
        Cmd::ExportParticles { checkpoint, data } => {
            let model = load_checkpoint(checkpoint)?;
            let ds = obtain_dataset(&cfg, data)?;
            let stats = training_stats(&ds)?;
            let pairs = ds.pairs(Split::Test);
            let (input, target) = pairs
                .first()
                .ok_or_else(|| GpoError::domain("export-particles", "dataset has no test pairs"))?;
            let dir = out.join("overlays");
            export_overlays(&model, input, target, &stats, &dir)?;
            println!("wrote overlays to {}", dir.display());
            Ok(false)
        }
        Cmd::Lemma1Demo => lemma1_demo(out),
    }
}

/// Normalization statistics recomputed from the dataset's training pairs,
/// matching what training used (both are deterministic in the inputs).
fn training_stats(ds: &TrajectoryDataset) -> gpo_core::Result<NormStats> {
    let pairs = ds.pairs(Split::Train);
    if pairs.is_empty() {
        return Err(GpoError::domain("stats", "dataset has no training pairs"));
    }
    let inputs: Vec<SampledField> = pairs.into_iter().map(|(a, _)| a).collect();
    NormStats::from_fields(inputs.iter())
}

fn bench_scaling(cfg: &ExperimentConfig, out: &Path) -> gpo_core::Result<bool> {
    use gpo_core::attention::{build_windows, measure, modal_attention, pg_layer, PGAttentionParams};
    use gpo_core::basis::{encode, evaluate_basis, EncoderParams};
    use gpo_core::field::{FourierEmbedding, PointSet};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let g = cfg.model.num_gaussians;
    let hidden = cfg.model.hidden_dim;
    let heads = cfg.model.num_heads;
    let sizes = [1000usize, 2000, 4000, 8000];
    let mut layer_times = Vec::new();
    let mut modal_times = Vec::new();
    for &n in &sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let coords = Array2::from_shape_fn((n, 2), |_| rng.gen_range(0.0..1.0));
        let pts = PointSet::new(coords)?;
        let values = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.0..1.0));
        let field = SampledField::new(pts.clone(), values)?;
        let emb = FourierEmbedding::sample(cfg.model.fourier_m, 2, cfg.model.sigma_b, 1)?;
        let enc = EncoderParams::init(&mut rng, 1, emb.output_dim(), hidden, g, 2);
        let gf = encode(&field, &emb, &enc)?;
        let z = evaluate_basis(&gf, &pts)?;
        let p = PGAttentionParams::init(&mut rng, g, 2, hidden / heads, heads, cfg.model.lambda)?;
        let time_min = |f: &mut dyn FnMut()| {
            f(); // warmup
            let mut best = f64::INFINITY;
            for _ in 0..3 {
                let t0 = Instant::now();
                f();
                best = best.min(t0.elapsed().as_secs_f64());
            }
            best
        };
        layer_times.push(time_min(&mut || {
            pg_layer(&z, &gf, &p).unwrap();
        }));
        let windows = build_windows(&z, &gf, &p)?;
        let tokens = measure(&z, &windows, &p)?;
        modal_times.push(time_min(&mut || {
            modal_attention(&tokens, &p).unwrap();
        }));
    }
    // least-squares slope of log(time) vs log(N)
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = layer_times.iter().map(|&t| t.ln()).collect();
    let m = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
    let sxx: f64 = xs.iter().map(|a| a * a).sum();
    let exponent = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    let modal_ratio = modal_times[sizes.len() - 1] / modal_times[0];
    let pass = (0.8..=1.2).contains(&exponent) && (0.8..=1.2).contains(&modal_ratio);
    write_json(
        &out.join("bench_scaling.json"),
        &serde_json::json!({
            "sizes": sizes,
            "pg_layer_secs": layer_times,
            "exponent": exponent,
            "modal_attention_secs": modal_times,
            "modal_ratio_8k_vs_1k": modal_ratio,
            "pass": pass,
        }),
    )?;
    println!("pg_layer exponent {exponent:.3}, modal ratio {modal_ratio:.3} ({})", if pass { "pass" } else { "FAIL" });
    Ok(!pass)
}

fn lemma1_demo(out: &Path) -> gpo_core::Result<bool> {
    use gpo_core::lemma1::{lemma1_construct, lemma1_sweep};
    let n = 2048;
    let target: Vec<f64> = (0..n)
        .map(|k| (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).sin())
        .collect();
    let eps = 0.02;
    let result = lemma1_construct(&target, eps, 128)?;
    let sweep = lemma1_sweep(&target, eps, &[16, 32, 64, 128])?;
    let monotone = sweep
        .windows(2)
        .all(|w| w[1].sup_error_interior <= w[0].sup_error_interior * 1.1);
    let pass = result.report.sup_error_interior < 0.01 && monotone;
    write_json(
        &out.join("lemma1.json"),
        &serde_json::json!({
            "report": result.report,
            "sweep": sweep,
            "monotone": monotone,
            "pass": pass,
        }),
    )?;
    println!(
        "mixture sup error (interior) {:.5} at 128 nodes, monotone sweep: {monotone} ({})",
        result.report.sup_error_interior,
        if pass { "pass" } else { "FAIL" }
    );
    Ok(!pass)
}
