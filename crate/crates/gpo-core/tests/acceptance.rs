//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line. The training-based criteria share one trained model.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use gpo_core::attention::{
    build_windows, lowrank_reference, measure, modal_attention, pg_layer, pg_layer_restricted, residual_renorm,
    ModalTokens, PGAttentionParams,
};
use gpo_core::basis::{encode, evaluate_basis, BasisMatrix, EncoderParams, GaussianField};
use gpo_core::config::ExperimentConfig;
use gpo_core::diagnostics::{energy_spectrum, one_step_eval, relative_l2, rollout, spectral_slope};
use gpo_core::field::{normalize, FourierEmbedding, NormStats, PointSet, SampledField};
use gpo_core::operator::{forward_at_queries, AnyModel};
use gpo_core::synth::{grf_init, make_dataset, Split, TrajectoryDataset};
use gpo_core::train::{check_gradients, train, EpochRecord};

/// Serializes the wall-clock-sensitive criteria on the shared core.
static HEAVY: Mutex<()> = Mutex::new(());

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {criterion:2} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} {name}: {detail}");
}

/// Desk-scale experiment as shipped: low-mode initial fields under a strong
/// circulation, where one step is far from any pointwise map.
fn desk_config() -> ExperimentConfig {
    ExperimentConfig::desk()
}

struct Trained {
    model: AnyModel,
    stats: NormStats,
    ds: TrajectoryDataset,
    best_val: f64,
    epochs_run: usize,
    wall_secs: f64,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let _guard = HEAVY.lock().unwrap();
        let cfg = desk_config();
        let ds = make_dataset(&cfg.data).expect("desk dataset");
        let train_pairs = ds.pairs(Split::Train);
        let val_pairs = ds.pairs(Split::Val);
        let mut model = AnyModel::build(&cfg, 2, 1, 1, cfg.training.seed).expect("model");
        let t0 = Instant::now();
        let rep = train(&mut model, &train_pairs, &val_pairs, &cfg).expect("training");
        Trained {
            model,
            stats: rep.stats.clone(),
            ds,
            best_val: rep.best_val,
            epochs_run: rep.epochs_run,
            wall_secs: t0.elapsed().as_secs_f64(),
        }
    })
}

fn random_state(n: usize, g: usize, d: usize, head_dim: usize, heads: usize, seed: u64) -> (BasisMatrix, GaussianField, PGAttentionParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = Array3::from_shape_fn((n, g, d), |_| rng.gen_range(0.0..1.0));
    let sigma = Array3::from_shape_fn((n, g, d), |_| rng.gen_range(0.05..0.5));
    let mut w = Array2::from_shape_fn((n, g), |_| rng.gen_range(0.1..1.0));
    for mut row in w.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let gf = GaussianField::new(mu, sigma, w).unwrap();
    let z = Array2::from_shape_fn((n, g), |(j, i)| gf.w[[j, i]] * rng.gen_range(0.0..1.0));
    let lambda = rng.gen_range(0.1..0.9);
    let p = PGAttentionParams::init(&mut rng, g, d, head_dim, heads, lambda).unwrap();
    (BasisMatrix(z), gf, p)
}

#[test]
fn criterion_01_gradient_fidelity() {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::preset("tiny").unwrap();
    let mut data_cfg = cfg.data.clone();
    data_cfg.grid_n = 4;
    data_cfg.n_traj = 1;
    data_cfg.horizon = 1;
    data_cfg.split = [1.0, 0.0, 0.0];
    let ds = make_dataset(&data_cfg).unwrap();
    let pairs = ds.pairs(Split::Train);
    let stats = NormStats::from_fields(pairs.iter().map(|(a, _)| a)).unwrap();
    let a = normalize(&pairs[0].0, &stats).unwrap();
    let u = normalize(&pairs[0].1, &stats).unwrap();
    let mut model = AnyModel::build(&cfg, 2, 1, 1, cfg.training.seed).unwrap();
    let rep = check_gradients(&mut model, &a, &u, 40, 1e-5, 1e-4).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    report(
        1,
        "gradient fidelity",
        rep.pass && secs < 60.0,
        &format!("max rel err {:.3e} over {} coords in {:.1}s", rep.max_rel_err, rep.coords_checked, secs),
    );
}

#[test]
fn criterion_02_mass_conservation() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = 12;
        let g = 6;
        let z = BasisMatrix(Array2::from_shape_fn((n, g), |_| rng.gen_range(0.0..1.0)));
        let z_tilde = Array2::from_shape_fn((n, g), |_| rng.gen_range(-1.0..1.0));
        let lambda = rng.gen_range(0.0..1.0);
        let p = PGAttentionParams::init(&mut rng, g, 2, 4, 1, lambda).unwrap();
        let (out, skipped) = residual_renorm(&z, &z_tilde, &p).unwrap();
        for j in 0..n {
            if skipped.contains(&j) {
                continue;
            }
            let s0: f64 = z.0.row(j).sum();
            let s: f64 = out.0.row(j).sum();
            worst = worst.max((s - s0).abs() / s0.abs().max(1e-300));
        }
    }
    report(2, "mass conservation", worst < 1e-10, &format!("worst relative row-sum drift {worst:.3e}"));
}

#[test]
fn criterion_03_stochasticity() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let (z, gf, p) = random_state(10, 5, 2, 4, 2, 2000 + seed);
        let windows = build_windows(&z, &gf, &p).unwrap();
        for h in 0..windows.p.dim().0 {
            for j in 0..windows.p.dim().1 {
                let s: f64 = (0..windows.p.dim().2).map(|g| windows.p[[h, j, g]]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        let tokens = measure(&z, &windows, &p).unwrap();
        let (_, alphas) = modal_attention(&tokens, &p).unwrap();
        for a in &alphas {
            for row in a.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
        }
        // encoder mixture weights over components
        for row in gf.w.rows() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
    }
    report(3, "row stochasticity", worst < 1e-6, &format!("worst |row sum - 1| = {worst:.3e}"));
}

#[test]
fn criterion_04_lowrank_equivalence() {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let n = 9;
        let g = 4;
        let d = 5;
        let z = BasisMatrix(Array2::from_shape_fn((n, g), |_| rng.gen_range(0.0..1.0)));
        let mut a = Array2::from_shape_fn((n, g), |_| rng.gen_range(0.05..1.0));
        for mut row in a.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let k = Array2::from_shape_fn((g, g), |_| rng.gen_range(-1.0..1.0));
        let w_z = Array2::from_shape_fn((d, g), |_| rng.gen_range(-1.0..1.0));
        let w_out = Array2::from_shape_fn((g, d), |_| rng.gen_range(-1.0..1.0));
        let reference = lowrank_reference(&z, &a, &k, &w_z, &w_out).unwrap();
        let routed = pg_layer_restricted(&z, &a, &k, &w_z, &w_out).unwrap();
        for (x, y) in reference.iter().zip(routed.iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    report(4, "low-rank oracle equivalence", worst < 1e-6, &format!("worst |diff| = {worst:.3e} over 20 instances"));
}

#[test]
fn criterion_05_kronecker_attention() {
    let g = 4;
    let d = 6;
    let beta = 50.0;
    let mut p = PGAttentionParams::init(&mut ChaCha8Rng::seed_from_u64(10), g, 2, d, 1, 1.0).unwrap();
    let mut t = Array3::zeros((1, g, d));
    for gi in 0..g {
        t[[0, gi, gi]] = 1.0;
    }
    p.heads[0].w_q = Array2::eye(d) * (beta * (d as f64).sqrt());
    p.heads[0].w_k = Array2::eye(d);
    let tokens = ModalTokens { t, degenerate: vec![] };
    let (_, alphas) = modal_attention(&tokens, &p).unwrap();
    let mut max_dev = 0.0f64;
    for gi in 0..g {
        for gj in 0..g {
            let target = if gi == gj { 1.0 } else { 0.0 };
            max_dev = max_dev.max((alphas[0][[gi, gj]] - target).abs());
        }
    }
    report(5, "Kronecker-delta attention", max_dev < 1e-3, &format!("||alpha - I||_inf = {max_dev:.3e} at beta = {beta}"));
}

#[test]
fn criterion_06_mixture_density() {
    use gpo_core::lemma1::{lemma1_construct, lemma1_sweep};
    let n = 2048;
    let target: Vec<f64> = (0..n).map(|k| (2.0 * PI * k as f64 / (n - 1) as f64).sin()).collect();
    let result = lemma1_construct(&target, 0.02, 128).unwrap();
    let sweep = lemma1_sweep(&target, 0.02, &[16, 32, 64, 128]).unwrap();
    let monotone = sweep.windows(2).all(|w| w[1].sup_error_interior <= w[0].sup_error_interior * 1.1);
    let err = result.report.sup_error_interior;
    report(
        6,
        "mixture density demo",
        err < 0.01 && monotone,
        &format!(
            "interior sup error {err:.4} at 128 nodes, sweep {:?}",
            sweep.iter().map(|r| (r.grid_g, r.sup_error_interior)).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_07_linear_scaling() {
    let _guard = HEAVY.lock().unwrap();
    let t0 = Instant::now();
    let sizes = [1000usize, 2000, 4000, 8000];
    let g = 8;
    let hidden = 32;
    let heads = 2;
    let mut layer_times = Vec::new();
    let mut modal_times = Vec::new();
    for &n in &sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let coords = Array2::from_shape_fn((n, 2), |_| rng.gen_range(0.0..1.0));
        let pts = PointSet::new(coords).unwrap();
        let values = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.0..1.0));
        let field = SampledField::new(pts.clone(), values).unwrap();
        let emb = FourierEmbedding::sample(8, 2, 1.0, 1).unwrap();
        let enc = EncoderParams::init(&mut rng, 1, emb.output_dim(), hidden, g, 2);
        let gf = encode(&field, &emb, &enc).unwrap();
        let z = evaluate_basis(&gf, &pts).unwrap();
        let p = PGAttentionParams::init(&mut rng, g, 2, hidden / heads, heads, 0.5).unwrap();
        let time_min = |f: &mut dyn FnMut()| {
            f();
            let mut best = f64::INFINITY;
            for _ in 0..3 {
                let s = Instant::now();
                f();
                best = best.min(s.elapsed().as_secs_f64());
            }
            best
        };
        layer_times.push(time_min(&mut || {
            pg_layer(&z, &gf, &p).unwrap();
        }));
        let windows = build_windows(&z, &gf, &p).unwrap();
        let tokens = measure(&z, &windows, &p).unwrap();
        modal_times.push(time_min(&mut || {
            modal_attention(&tokens, &p).unwrap();
        }));
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = layer_times.iter().map(|&t| t.ln()).collect();
    let m = xs.len() as f64;
    let (sx, sy): (f64, f64) = (xs.iter().sum(), ys.iter().sum());
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
    let sxx: f64 = xs.iter().map(|a| a * a).sum();
    let exponent = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    let modal_ratio = modal_times[3] / modal_times[0];
    let secs = t0.elapsed().as_secs_f64();
    report(
        7,
        "linear scaling",
        (0.8..=1.2).contains(&exponent) && (0.8..=1.2).contains(&modal_ratio) && secs < 300.0,
        &format!("pg_layer exponent {exponent:.3}, modal time ratio 8k/1k {modal_ratio:.3}, {secs:.0}s"),
    );
}

#[test]
fn criterion_08_desk_training() {
    let t = trained();
    report(
        8,
        "desk training",
        t.best_val < 0.1 && t.epochs_run <= 300 && t.wall_secs < 1800.0,
        &format!("val rel L2 {:.4} after {} epochs in {:.0}s", t.best_val, t.epochs_run, t.wall_secs),
    );
}

#[test]
fn criterion_09_ablation_direction() {
    let t = trained(); // ensures the dataset/budget context exists first
    let _guard = HEAVY.lock().unwrap();
    let train_pairs = t.ds.pairs(Split::Train);
    let val_pairs = t.ds.pairs(Split::Val);
    // every variant gets the desk budget; the full model reuses the shared run
    let run = |preset: &str| -> f64 {
        let cfg = ExperimentConfig::preset(preset).unwrap();
        let mut model = AnyModel::build(&cfg, 2, 1, 1, cfg.training.seed).unwrap();
        train(&mut model, &train_pairs, &val_pairs, &cfg).unwrap().best_val
    };
    let full = t.best_val;
    let no_pg = run("no-pg");
    let no_field = run("no-gaussian-field");
    let g16 = run("g16");
    let g1 = run("g1");
    report(
        9,
        "ablation direction",
        full < no_pg && full < no_field && g16 <= g1,
        &format!("full {full:.4} vs no-pg {no_pg:.4}, no-gaussian-field {no_field:.4}; g16 {g16:.4} vs g1 {g1:.4}"),
    );
}

#[test]
fn criterion_10_rollout() {
    let t = trained();
    let idx = t.ds.indices_of(Split::Test)[0];
    let fields = t.ds.trajectory_fields(idx);
    let result = rollout(&t.model, &fields, &t.stats, 20).unwrap();
    let finite = result
        .predictions
        .iter()
        .all(|p| p.values.iter().all(|v| v.is_finite()))
        && result.errors.iter().all(|e| e.is_finite());
    let one = one_step_eval(&t.model, &fields[0], &t.stats).unwrap();
    let bitwise = result.predictions[0].values == one.values;
    report(
        10,
        "rollout",
        finite && bitwise && result.errors.len() == 20,
        &format!(
            "{} steps, final rel L2 {:.4}, step-1 bitwise equal: {bitwise}",
            result.errors.len(),
            result.errors.last().copied().unwrap_or(f64::NAN)
        ),
    );
}

#[test]
fn criterion_11_spectrum_oracles() {
    // Parseval
    let u = grf_init(32, 4.0, 11);
    let spec = energy_spectrum(&u, [4, 12]).unwrap();
    let var = u.mapv(|v| v * v).mean().unwrap();
    let parseval = (spec.total() - 0.5 * var).abs() / (0.5 * var);

    // single mode lands in one bin with energy a^2/4
    let n = 32;
    let amp = 0.7;
    let kmode = 5usize;
    let um = Array2::from_shape_fn((n, n), |(_, ix)| amp * (2.0 * PI * kmode as f64 * ix as f64 / n as f64).sin());
    let sm = energy_spectrum(&um, [4, 12]).unwrap();
    let mode_err = (sm.energy[kmode] - amp * amp / 4.0).abs();
    let leak: f64 = sm.energy.iter().enumerate().filter(|(k, _)| *k != kmode).map(|(_, e)| *e).sum();

    // white-noise slope ~ +1 (annulus population growth)
    let mut acc = energy_spectrum(&grf_white(64, 500), [4, 12]).unwrap();
    for seed in 501..510u64 {
        let s = energy_spectrum(&grf_white(64, seed), [4, 12]).unwrap();
        for (e, &x) in acc.energy.iter_mut().zip(&s.energy) {
            *e += x;
        }
    }
    let slope = spectral_slope(&acc, [4, 12]).unwrap();

    let pass = parseval < 1e-8 && mode_err < 1e-12 && leak < 1e-18 && (slope - 1.0).abs() < 0.15;
    report(
        11,
        "spectrum oracles",
        pass,
        &format!("Parseval {parseval:.2e}, mode err {mode_err:.2e}, leak {leak:.2e}, white slope {slope:.3}"),
    );
}

fn grf_white(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, n), |_| {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
    })
}

#[test]
fn criterion_12_resolution_transfer() {
    let t = trained();
    let gpo = match &t.model {
        AnyModel::Gpo(m) => m,
        _ => unreachable!("trained model is the particle variant"),
    };
    // fine-grid trajectory with the same dynamics
    let mut data_cfg = desk_config().data;
    data_cfg.grid_n = 64;
    data_cfg.n_traj = 1;
    data_cfg.horizon = 1;
    data_cfg.split = [0.0, 0.0, 1.0];
    data_cfg.seed = 777;
    let fine = make_dataset(&data_cfg).unwrap();
    let fields64 = fine.trajectory_fields(0);
    let (input64, target64) = (&fields64[0], &fields64[1]);

    // the grids nest: every other fine point is a coarse point
    let downsample = |f: &SampledField| -> SampledField {
        let n = 64;
        let m = 32;
        let mut vals = Array2::zeros((m * m, 1));
        for iy in 0..m {
            for ix in 0..m {
                vals[[iy * m + ix, 0]] = f.values[[(iy * 2) * n + ix * 2, 0]];
            }
        }
        SampledField::new(PointSet::grid2d(m), vals).unwrap()
    };
    let input32 = downsample(input64);
    let target32 = downsample(target64);

    let pred32 = one_step_eval(&t.model, &input32, &t.stats).unwrap();
    let native = relative_l2(&pred32, &target32).unwrap();

    let a32 = normalize(&input32, &t.stats).unwrap();
    let q = forward_at_queries(gpo, &a32, &input64.points).unwrap();
    let pred64 = gpo_core::field::denormalize(&q.prediction, &t.stats).unwrap();
    let finite = pred64.values.iter().all(|v| v.is_finite());
    let transfer = relative_l2(&pred64, target64).unwrap();
    report(
        12,
        "resolution transfer",
        finite && transfer <= 2.0 * native,
        &format!("32x32 rel L2 {native:.4}, 64x64 re-query {transfer:.4}, far queries {}", q.far_queries.len()),
    );
}

#[test]
fn criterion_13_determinism() {
    let run = || -> Vec<EpochRecord> {
        let mut cfg = desk_config();
        cfg.data.n_traj = 4;
        cfg.data.horizon = 3;
        cfg.data.split = [0.5, 0.5, 0.0];
        cfg.training.epochs = 3;
        cfg.training.stop_at_val = None;
        let ds = make_dataset(&cfg.data).unwrap();
        let mut model = AnyModel::build(&cfg, 2, 1, 1, cfg.training.seed).unwrap();
        train(&mut model, &ds.pairs(Split::Train), &ds.pairs(Split::Val), &cfg)
            .unwrap()
            .history
    };
    let h1 = run();
    let h2 = run();
    let identical = h1.len() == h2.len()
        && h1.iter().zip(&h2).all(|(a, b)| {
            a.recon.to_bits() == b.recon.to_bits()
                && a.reg_mu.to_bits() == b.reg_mu.to_bits()
                && a.reg_sigma.to_bits() == b.reg_sigma.to_bits()
                && a.val_rel_l2.to_bits() == b.val_rel_l2.to_bits()
        });
    report(13, "determinism", identical, &format!("{} epochs bit-identical across two runs", h1.len()));
}
