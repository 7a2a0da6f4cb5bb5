//! Synthetic data: a periodic 2D advection-diffusion pseudo-spectral solver
//! (integrating-factor diffusion, RK4 advection, 2/3 dealiasing), Gaussian
//! random field initial conditions, trajectory datasets, and blob masks.
//!
//! Array layout: `u[[iy, ix]]` with x = ix/n along axis 1 and y = iy/n along
//! axis 0, matching the row-major flattening of `PointSet::grid2d`.

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

use crate::config::{DataConfig, VelocitySpec};
use crate::error::{GpoError, Result};
use crate::field::{PointSet, SampledField};
use crate::tensor::TensorArchive;

type C64 = Complex<f64>;

/// 2D FFT helper with cached plans for one grid size.
struct Spectral {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Spectral {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Spectral {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn transform(&self, data: &mut Array2<C64>, forward: bool) {
        let n = self.n;
        let plan = if forward { &self.fwd } else { &self.inv };
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for mut row in data.rows_mut() {
            buf.copy_from_slice(row.as_slice().expect("contiguous row"));
            plan.process(&mut buf);
            for (dst, src) in row.iter_mut().zip(buf.iter()) {
                *dst = *src;
            }
        }
        for i in 0..n {
            for (j, slot) in buf.iter_mut().enumerate() {
                *slot = data[[j, i]];
            }
            plan.process(&mut buf);
            for (j, &v) in buf.iter().enumerate() {
                data[[j, i]] = v;
            }
        }
        if !forward {
            let scale = 1.0 / (n * n) as f64;
            data.mapv_inplace(|v| v * scale);
        }
    }

    fn fft2(&self, u: &Array2<f64>) -> Array2<C64> {
        let mut c = u.mapv(|v| C64::new(v, 0.0));
        self.transform(&mut c, true);
        c
    }

    fn ifft2_real(&self, uhat: &Array2<C64>) -> Array2<f64> {
        let mut c = uhat.clone();
        self.transform(&mut c, false);
        c.mapv(|v| v.re)
    }
}

/// Signed integer frequency for DFT index `i` on a length-`n` axis.
fn freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Single pseudo-spectral advection-diffusion stepper bound to a grid,
/// viscosity, velocity field, and time step.
pub struct Solver {
    n: usize,
    dt: f64,
    spectral: Spectral,
    vx: Array2<f64>,
    vy: Array2<f64>,
    /// i * 2 pi * freq along each axis.
    kx: Vec<f64>,
    ky: Vec<f64>,
    /// exp(-nu |k|^2 dt/2) and its square.
    e_half: Array2<f64>,
    e_full: Array2<f64>,
    dealias: Array2<f64>,
}

/// Velocity samples on the grid for a config.
pub fn velocity_field(n: usize, spec: VelocitySpec) -> (Array2<f64>, Array2<f64>) {
    match spec {
        VelocitySpec::Zero => (Array2::zeros((n, n)), Array2::zeros((n, n))),
        VelocitySpec::Uniform { vx, vy } => (Array2::from_elem((n, n), vx), Array2::from_elem((n, n), vy)),
        VelocitySpec::Solenoidal { amplitude } => {
            let mut vx = Array2::zeros((n, n));
            let mut vy = Array2::zeros((n, n));
            for iy in 0..n {
                for ix in 0..n {
                    let x = ix as f64 / n as f64;
                    let y = iy as f64 / n as f64;
                    vx[[iy, ix]] = amplitude * (2.0 * PI * x).sin() * (2.0 * PI * y).cos();
                    vy[[iy, ix]] = -amplitude * (2.0 * PI * x).cos() * (2.0 * PI * y).sin();
                }
            }
            (vx, vy)
        }
    }
}

fn vmax_of(spec: VelocitySpec) -> f64 {
    match spec {
        VelocitySpec::Zero => 0.0,
        VelocitySpec::Uniform { vx, vy } => (vx * vx + vy * vy).sqrt(),
        VelocitySpec::Solenoidal { amplitude } => amplitude.abs(),
    }
}

impl Solver {
    /// Builds the stepper; refuses configurations violating the stability
    /// bound `dt <= 0.5 min(dx/|v|_max, dx^2/(4 nu))`.
    pub fn new(cfg: &DataConfig) -> Result<Self> {
        let n = cfg.grid_n;
        let dx = 1.0 / n as f64;
        let vmax = vmax_of(cfg.velocity);
        let mut bound = f64::INFINITY;
        if vmax > 0.0 {
            bound = bound.min(dx / vmax);
        }
        if cfg.viscosity > 0.0 {
            bound = bound.min(dx * dx / (4.0 * cfg.viscosity));
        }
        if cfg.dt > 0.5 * bound {
            return Err(GpoError::Config {
                field: "data.dt".into(),
                message: format!("dt {} exceeds stability bound {}", cfg.dt, 0.5 * bound),
            });
        }
        let (vx, vy) = velocity_field(n, cfg.velocity);
        let kx: Vec<f64> = (0..n).map(|i| 2.0 * PI * freq(i, n)).collect();
        let ky = kx.clone();
        let cutoff = (n as f64) / 3.0;
        let mut e_half = Array2::zeros((n, n));
        let mut e_full = Array2::zeros((n, n));
        let mut dealias = Array2::zeros((n, n));
        for iy in 0..n {
            for ix in 0..n {
                let k2 = kx[ix] * kx[ix] + ky[iy] * ky[iy];
                e_half[[iy, ix]] = (-cfg.viscosity * k2 * cfg.dt / 2.0).exp();
                e_full[[iy, ix]] = e_half[[iy, ix]] * e_half[[iy, ix]];
                let keep = freq(ix, n).abs() <= cutoff && freq(iy, n).abs() <= cutoff;
                dealias[[iy, ix]] = if keep { 1.0 } else { 0.0 };
            }
        }
        Ok(Solver {
            n,
            dt: cfg.dt,
            spectral: Spectral::new(n),
            vx,
            vy,
            kx,
            ky,
            e_half,
            e_full,
            dealias,
        })
    }

    /// Dealiased spectral advection term `-F[v . grad(F^-1 what)]`.
    fn nonlinear(&self, what: &Array2<C64>) -> Array2<C64> {
        let n = self.n;
        let mut dux = Array2::zeros((n, n));
        let mut duy = Array2::zeros((n, n));
        for iy in 0..n {
            for ix in 0..n {
                let v = what[[iy, ix]];
                dux[[iy, ix]] = C64::new(0.0, self.kx[ix]) * v;
                duy[[iy, ix]] = C64::new(0.0, self.ky[iy]) * v;
            }
        }
        let gx = self.spectral.ifft2_real(&dux);
        let gy = self.spectral.ifft2_real(&duy);
        let mut prod = Array2::zeros((n, n));
        for iy in 0..n {
            for ix in 0..n {
                prod[[iy, ix]] = -(self.vx[[iy, ix]] * gx[[iy, ix]] + self.vy[[iy, ix]] * gy[[iy, ix]]);
            }
        }
        let mut phat = self.spectral.fft2(&prod);
        for iy in 0..n {
            for ix in 0..n {
                phat[[iy, ix]] *= self.dealias[[iy, ix]];
            }
        }
        phat
    }

    /// One integrating-factor RK4 step. With zero velocity the diffusion
    /// factor applies exactly.
    pub fn step(&self, u: &Array2<f64>) -> Array2<f64> {
        let v = self.spectral.fft2(u);
        let eh = &self.e_half;
        let ef = &self.e_full;
        let dt = self.dt;
        let mul = |a: &Array2<C64>, f: &Array2<f64>| -> Array2<C64> {
            let mut out = a.clone();
            out.zip_mut_with(f, |x, &s| *x *= s);
            out
        };
        let axpy = |a: &Array2<C64>, b: &Array2<C64>, s: f64| -> Array2<C64> {
            let mut out = a.clone();
            out.zip_mut_with(b, |x, &y| *x += y * s);
            out
        };
        let k1 = self.nonlinear(&v);
        let k2 = self.nonlinear(&mul(&axpy(&v, &k1, dt / 2.0), eh));
        let k3 = self.nonlinear(&axpy(&mul(&v, eh), &k2, dt / 2.0));
        let k4 = self.nonlinear(&axpy(&mul(&v, ef), &mul(&k3, eh), dt));
        let mut out = mul(&v, ef);
        out.zip_mut_with(&mul(&k1, ef), |x, &y| *x += y * (dt / 6.0));
        out.zip_mut_with(&mul(&axpy(&k2, &k3, 1.0), eh), |x, &y| *x += y * (dt / 3.0));
        out.zip_mut_with(&k4, |x, &y| *x += y * (dt / 6.0));
        self.spectral.ifft2_real(&out)
    }

    pub fn step_n(&self, u: &Array2<f64>, steps: usize) -> Array2<f64> {
        let mut cur = u.clone();
        for _ in 0..steps {
            cur = self.step(&cur);
        }
        cur
    }
}

/// Periodic Gaussian random field with power spectrum ~ k^{-p}, exactly zero
/// mean and exactly unit variance. Deterministic per seed.
pub fn grf_init(n: usize, p: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(&mut rng));
    let spectral = Spectral::new(n);
    let mut what = spectral.fft2(&white);
    for iy in 0..n {
        for ix in 0..n {
            let f2 = freq(ix, n).powi(2) + freq(iy, n).powi(2);
            what[[iy, ix]] *= if f2 == 0.0 { 0.0 } else { f2.powf(-p / 4.0) };
        }
    }
    let mut u = spectral.ifft2_real(&what);
    let mean = u.mean().unwrap();
    u.mapv_inplace(|v| v - mean);
    let var = u.mapv(|v| v * v).mean().unwrap();
    let inv_std = 1.0 / var.sqrt().max(1e-300);
    u.mapv_inplace(|v| v * inv_std);
    u
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Trajectories of grid snapshots plus per-trajectory split tags and the
/// shared (possibly masked) point set.
#[derive(Debug, Clone)]
pub struct TrajectoryDataset {
    pub grid_n: usize,
    pub points: PointSet,
    /// (horizon+1, n, n) per trajectory.
    pub trajectories: Vec<Array3<f64>>,
    pub splits: Vec<Split>,
}

fn split_counts(n_traj: usize, fractions: [f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut assigned = 0;
    for i in 0..3 {
        counts[i] = (fractions[i] * n_traj as f64).floor() as usize;
        assigned += counts[i];
    }
    // largest-remainder distribution of what floor left over
    let mut rema: Vec<(f64, usize)> = (0..3)
        .map(|i| (fractions[i] * n_traj as f64 - counts[i] as f64, i))
        .collect();
    rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..(n_traj - assigned) {
        counts[rema[k % 3].1] += 1;
    }
    counts
}

impl TrajectoryDataset {
    pub fn horizon(&self) -> usize {
        self.trajectories.first().map(|t| t.dim().0 - 1).unwrap_or(0)
    }

    fn field_from_snapshot(&self, snap: ndarray::ArrayView2<f64>) -> SampledField {
        let n = self.grid_n;
        let mut values = Array2::zeros((n * n, 1));
        for iy in 0..n {
            for ix in 0..n {
                values[[iy * n + ix, 0]] = snap[[iy, ix]];
            }
        }
        SampledField::new(self.points.clone(), values).expect("snapshot shape")
    }

    /// One-step supervised pairs (u_t, u_{t+1}) for a split.
    pub fn pairs(&self, split: Split) -> Vec<(SampledField, SampledField)> {
        let mut out = Vec::new();
        for (traj, &tag) in self.trajectories.iter().zip(&self.splits) {
            if tag != split {
                continue;
            }
            let t_len = traj.dim().0;
            for t in 0..t_len - 1 {
                out.push((
                    self.field_from_snapshot(traj.index_axis(Axis(0), t)),
                    self.field_from_snapshot(traj.index_axis(Axis(0), t + 1)),
                ));
            }
        }
        out
    }

    /// Full trajectory of a given index as sampled fields.
    pub fn trajectory_fields(&self, idx: usize) -> Vec<SampledField> {
        let traj = &self.trajectories[idx];
        (0..traj.dim().0)
            .map(|t| self.field_from_snapshot(traj.index_axis(Axis(0), t)))
            .collect()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let split_tags: Vec<String> = self
            .splits
            .iter()
            .map(|s| format!("{s:?}").to_lowercase())
            .collect();
        let mut arch = TensorArchive::new(serde_json::json!({
            "kind": "trajectory-dataset",
            "grid_n": self.grid_n,
            "splits": split_tags,
        }));
        for (i, traj) in self.trajectories.iter().enumerate() {
            arch.insert(&format!("traj.{i:04}"), traj.clone().into_dyn());
        }
        if let Some(mask) = self.points.mask() {
            let m: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            arch.insert("mask", ArrayD::from_shape_vec(IxDyn(&[m.len()]), m).unwrap());
        }
        arch.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let arch = TensorArchive::load(path)?;
        if arch.meta["kind"] != "trajectory-dataset" {
            return Err(GpoError::TensorFormat("not a trajectory dataset".into()));
        }
        let grid_n = arch.meta["grid_n"].as_u64().unwrap_or(0) as usize;
        let splits: Vec<Split> = arch.meta["splits"]
            .as_array()
            .ok_or_else(|| GpoError::TensorFormat("missing splits".into()))?
            .iter()
            .map(|v| match v.as_str() {
                Some("train") => Ok(Split::Train),
                Some("val") => Ok(Split::Val),
                Some("test") => Ok(Split::Test),
                other => Err(GpoError::TensorFormat(format!("bad split tag {other:?}"))),
            })
            .collect::<Result<_>>()?;
        let mut trajectories = Vec::with_capacity(splits.len());
        for i in 0..splits.len() {
            let t = arch.get(&format!("traj.{i:04}"))?;
            trajectories.push(
                t.clone()
                    .into_dimensionality()
                    .map_err(|e| GpoError::TensorFormat(format!("traj rank: {e}")))?,
            );
        }
        let mask = arch.tensors.get("mask").map(|m| m.iter().map(|&v| v > 0.5).collect());
        let points = PointSet::with_mask(PointSet::grid2d(grid_n).coords().clone(), mask)?;
        Ok(TrajectoryDataset {
            grid_n,
            points,
            trajectories,
            splits,
        })
    }
}

/// Generate trajectories: GRF initial conditions advanced `steps_per_pair`
/// solver steps between consecutive snapshots. Deterministic per seed.
pub fn make_dataset(cfg: &DataConfig) -> Result<TrajectoryDataset> {
    let solver = Solver::new(cfg)?;
    let n = cfg.grid_n;
    let counts = split_counts(cfg.n_traj, cfg.split);
    let mut splits = Vec::with_capacity(cfg.n_traj);
    for (i, &count) in counts.iter().enumerate() {
        let tag = [Split::Train, Split::Val, Split::Test][i];
        splits.extend(std::iter::repeat(tag).take(count));
    }
    let mut trajectories = Vec::with_capacity(cfg.n_traj);
    for t in 0..cfg.n_traj {
        let mut traj = Array3::zeros((cfg.horizon + 1, n, n));
        let mut u = grf_init(n, cfg.spectrum_p, cfg.seed.wrapping_add(t as u64));
        traj.index_axis_mut(Axis(0), 0).assign(&u);
        for s in 1..=cfg.horizon {
            u = solver.step_n(&u, cfg.steps_per_pair);
            if u.iter().any(|v| !v.is_finite()) {
                return Err(GpoError::NonFinite {
                    context: format!("trajectory {t} snapshot {s}"),
                });
            }
            traj.index_axis_mut(Axis(0), s).assign(&u);
        }
        trajectories.push(traj);
    }
    let mut ds = TrajectoryDataset {
        grid_n: n,
        points: PointSet::grid2d(n),
        trajectories,
        splits,
    };
    if cfg.mask_fraction > 0.0 {
        ds = make_masked_variant(&ds, cfg.mask_fraction, cfg.seed.wrapping_add(0x4d41))?;
    }
    Ok(ds)
}

/// Deterministic blob mask: threshold a smooth random field at the quantile
/// matching the requested masked fraction. Geometry and values untouched;
/// masked points are excluded from supervision downstream.
pub fn make_masked_variant(ds: &TrajectoryDataset, fraction: f64, seed: u64) -> Result<TrajectoryDataset> {
    if fraction <= 0.0 {
        return Ok(ds.clone());
    }
    if fraction >= 1.0 {
        return Err(GpoError::domain("make_masked_variant", "full mask leaves no supervised points"));
    }
    let n = ds.grid_n;
    let blob = grf_init(n, 4.0, seed);
    let mut vals: Vec<f64> = blob.iter().cloned().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cut = vals[((fraction * (n * n) as f64) as usize).min(n * n - 1)];
    // mask=true excludes the point; blobs below the cut are masked out
    let mask: Vec<bool> = (0..n * n)
        .map(|j| blob[[j / n, j % n]] < cut)
        .collect();
    let points = PointSet::with_mask(ds.points.coords().clone(), Some(mask))?;
    Ok(TrajectoryDataset {
        grid_n: n,
        points,
        trajectories: ds.trajectories.clone(),
        splits: ds.splits.clone(),
    })
}
