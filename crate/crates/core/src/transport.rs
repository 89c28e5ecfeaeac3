//! 1D-in-space transport of the perturbation with IMEX Euler stepping.
//!
//! States are stored as `n_x x dim` arrays, one flattened [`SpeciesField`]
//! per row. In micro-macro mode the fluid coordinates and `f1` are stored
//! separately and `f` is rebuilt after each step.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::collision::{CollisionTensor, LinearizedOperator};
use crate::error::{Error, Result};
use crate::io::{self, Key};
use crate::linalg::{self, Cholesky};
use crate::micromacro;
use crate::mixture::{sqrt_equilibrium, MacroBasis, MixtureParams, SpeciesField, VelocityGrid};
use crate::scalar::Real;

const CKPT_MAGIC: &[u8; 4] = b"KMXS";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    Periodic,
    /// Zero-gradient ghost cells.
    Outflow,
}

/// Uniform cell-centred grid on `[x_lo, x_hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n: usize,
    pub boundary: Boundary,
}

impl SpatialGrid {
    pub fn new(x_lo: f64, x_hi: f64, n: usize, boundary: Boundary) -> Result<Self> {
        if !(x_hi > x_lo) || !x_lo.is_finite() || !x_hi.is_finite() {
            return Err(Error::InvalidParams(format!("bad interval [{x_lo}, {x_hi}]")));
        }
        if n < 8 {
            return Err(Error::InvalidParams(format!("{n} spatial nodes, need at least 8")));
        }
        Ok(Self { x_lo, x_hi, n, boundary })
    }

    pub fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / self.n as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_lo + (j as f64 + 0.5) * self.dx()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.x(j)).collect()
    }

    /// Left and right neighbours of `j` under the boundary rule.
    #[inline]
    pub fn neighbours(&self, j: usize) -> (usize, usize) {
        let n = self.n;
        match self.boundary {
            Boundary::Periodic => ((j + n - 1) % n, (j + 1) % n),
            Boundary::Outflow => (j.saturating_sub(1), (j + 1).min(n - 1)),
        }
    }

    /// Centred first derivative of every row; second-order one-sided at
    /// outflow ends.
    pub fn ddx<T: Real>(&self, f: &Array2<T>) -> Array2<T> {
        let n = self.n;
        let h = T::c(self.dx());
        let mut out = Array2::zeros(f.raw_dim());
        for j in 0..n {
            let mut row = out.row_mut(j);
            match (self.boundary, j) {
                (Boundary::Outflow, 0) => {
                    let (a, b, c) = (f.row(0), f.row(1), f.row(2));
                    ndarray::Zip::from(&mut row).and(a).and(b).and(c).for_each(|o, &a, &b, &c| {
                        *o = (T::c(-1.5) * a + T::c(2.0) * b - T::c(0.5) * c) / h;
                    });
                }
                (Boundary::Outflow, j) if j == n - 1 => {
                    let (a, b, c) = (f.row(n - 1), f.row(n - 2), f.row(n - 3));
                    ndarray::Zip::from(&mut row).and(a).and(b).and(c).for_each(|o, &a, &b, &c| {
                        *o = (T::c(1.5) * a - T::c(2.0) * b + T::c(0.5) * c) / h;
                    });
                }
                _ => {
                    let (l, r) = self.neighbours(j);
                    ndarray::Zip::from(&mut row).and(f.row(l)).and(f.row(r)).for_each(|o, &a, &b| {
                        *o = (b - a) / (T::c(2.0) * h);
                    });
                }
            }
        }
        out
    }

    /// `sum_j g_j dx`.
    pub fn integrate(&self, g: impl IntoIterator<Item = f64>) -> f64 {
        g.into_iter().sum::<f64>() * self.dx()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Direct,
    Micromacro,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionTreatment {
    /// `-nu` implicit, `K` explicit.
    NuImplicit,
    /// Whole `L` implicit through a prefactored `I - dt L`.
    FullImplicit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemeConfig {
    /// Fixed step; `None` takes `cfl dx / v_max`.
    pub dt: Option<f64>,
    pub cfl: f64,
    pub mode: Mode,
    pub collision: CollisionTreatment,
    pub nonlinear: bool,
    /// Events kept for `N` in the time loop (0 keeps all).
    pub nonlinear_events: usize,
    /// Allowed `|<f1, b_k>| / ||f1||` before re-projection.
    pub tol_drift: f64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            dt: None,
            cfl: 0.9,
            mode: Mode::Micromacro,
            collision: CollisionTreatment::FullImplicit,
            nonlinear: true,
            nonlinear_events: 200_000,
            tol_drift: 1e-6,
        }
    }
}

impl SchemeConfig {
    /// Resolved time step; errors when a fixed `dt` breaks the CFL limit.
    pub fn time_step<T: Real>(&self, space: &SpatialGrid, grid: &VelocityGrid<T>) -> Result<f64> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::InvalidParams(format!("cfl {} outside (0, 1]", self.cfl)));
        }
        let limit = self.cfl * space.dx() / grid.max_axis_speed().f64();
        match self.dt {
            Some(dt) if !(dt > 0.0) => Err(Error::InvalidParams(format!("dt {dt} must be positive"))),
            Some(dt) if dt > limit * (1.0 + 1e-12) => Err(Error::Cfl { dt, limit }),
            Some(dt) => Ok(dt),
            None => Ok(limit),
        }
    }
}

/// Fluid coordinates and microscopic part.
#[derive(Clone, Debug)]
pub struct Split<T> {
    /// `n_x x (I+4)`.
    pub u: Array2<T>,
    pub f1: Array2<T>,
}

#[derive(Clone, Debug)]
pub struct SimState<T> {
    pub t: f64,
    pub step: u64,
    /// `n_x x dim`.
    pub f: Array2<T>,
    pub split: Option<Split<T>>,
    pub config_hash: Key,
}

impl<T: Real> SimState<T> {
    pub fn zeros(nx: usize, dim: usize, config_hash: Key) -> Self {
        Self { t: 0.0, step: 0, f: Array2::zeros((nx, dim)), split: None, config_hash }
    }

    pub fn n_x(&self) -> usize {
        self.f.nrows()
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.f.iter().all(|x| x.is_finite())
    }

    /// Fills the split storage from `f`.
    pub fn with_split(mut self, basis: &MacroBasis<T>) -> Self {
        let u = basis.coords_batch(&self.f);
        let mut f1 = self.f.clone();
        basis.p1_batch_inplace(&mut f1);
        self.split = Some(Split { u, f1 });
        self
    }

    /// Fluid coordinates, from the split storage when present.
    pub fn fluid(&self, basis: &MacroBasis<T>) -> Array2<T> {
        match &self.split {
            Some(s) => s.u.clone(),
            None => basis.coords_batch(&self.f),
        }
    }

    pub fn micro(&self, basis: &MacroBasis<T>) -> Array2<T> {
        match &self.split {
            Some(s) => s.f1.clone(),
            None => {
                let mut f1 = self.f.clone();
                basis.p1_batch_inplace(&mut f1);
                f1
            }
        }
    }

    /// Largest `|f0 + f1 - f|` of the split storage.
    pub fn split_defect(&self, basis: &MacroBasis<T>) -> f64 {
        let Some(s) = &self.split else { return 0.0 };
        let mut g = basis.reconstruct_batch(&s.u) + &s.f1;
        g -= &self.f;
        g.iter().fold(0.0, |m, x| m.max(x.f64().abs()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (nx, dim) = self.f.dim();
        let k = self.split.as_ref().map_or(0, |s| s.u.ncols());
        let mut payload = Vec::with_capacity(1 + nx * dim * 2 + nx * k);
        payload.push(self.t);
        payload.extend(self.f.iter().map(|x| x.f64()));
        if let Some(s) = &self.split {
            payload.extend(s.u.iter().map(|x| x.f64()));
            payload.extend(s.f1.iter().map(|x| x.f64()));
        }
        let meta = [nx as u64, dim as u64, k as u64, self.step];
        io::write_blob(path, CKPT_MAGIC, CKPT_VERSION, &meta, &self.config_hash, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blob = io::read_blob(path, CKPT_MAGIC, CKPT_VERSION)?;
        let [nx, dim, k, step] = blob.meta[..] else {
            return Err(Error::Cache("bad checkpoint header".into()));
        };
        let (nx, dim, k) = (nx as usize, dim as usize, k as usize);
        let want = 1 + nx * dim + if k > 0 { nx * k + nx * dim } else { 0 };
        if blob.payload.len() != want {
            return Err(Error::Cache("checkpoint payload has the wrong length".into()));
        }
        let p = &blob.payload;
        let arr = |off: usize, c: usize| Array2::from_shape_fn((nx, c), |(i, j)| T::c(p[off + i * c + j]));
        let f = arr(1, dim);
        let split = (k > 0).then(|| Split { u: arr(1 + nx * dim, k), f1: arr(1 + nx * dim + nx * k, dim) });
        Ok(Self { t: p[0], step, f, split, config_hash: blob.key })
    }
}

/// Velocity-space operators used by the stepper.
pub struct Operators<T> {
    pub params: MixtureParams<T>,
    pub grid: VelocityGrid<T>,
    pub basis: MacroBasis<T>,
    pub linear: LinearizedOperator<T>,
    /// Tensor used for `N` (usually subsampled).
    pub nonlinear: Option<CollisionTensor<T>>,
}

impl<T: Real> Operators<T> {
    pub fn dim(&self) -> usize {
        self.linear.dim()
    }

    /// `v_1` at every flat index.
    pub fn v1(&self) -> Array1<T> {
        let nv = self.grid.len();
        Array1::from_shape_fn(self.dim(), |i| self.grid.node(i % nv)[0])
    }

    pub fn apply_n(&self, f: &Array2<T>) -> Result<Array2<T>> {
        match &self.nonlinear {
            Some(t) => par_rows(f, |b| t.apply_n_batch(b)),
            None => Ok(Array2::zeros(f.raw_dim())),
        }
    }
}

/// Largest stable step of the `nu`-implicit update `(1 + dt nu) g' = (1 + dt K) g`.
/// `K <= nu` holds because `L <= 0`; the other side needs
/// `dt <= 2 / lambda_max(-(L + 2 nu))`. Estimated by shifted power iteration
/// and reduced by 10% for the underestimate of the Rayleigh quotient.
pub fn nu_implicit_limit<T: Real>(op: &LinearizedOperator<T>) -> f64 {
    let n = op.dim();
    let mut a = op.matrix().mapv(|x| -x.f64());
    for i in 0..n {
        a[[i, i]] -= 2.0 * op.nu()[i].f64();
    }
    let shift = a.rows().into_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut x = Array1::from_shape_fn(n, |i| 1.0 + (i % 7) as f64 / 7.0);
    let mut mu = 0.0;
    for _ in 0..300 {
        let mut y = a.dot(&x);
        y.scaled_add(shift, &x);
        let norm = y.dot(&y).sqrt();
        if norm == 0.0 {
            break;
        }
        let next = y.dot(&x) / x.dot(&x) - shift;
        x = y / norm;
        if (next - mu).abs() <= 1e-6 * next.abs() {
            mu = next;
            break;
        }
        mu = next;
    }
    if mu > 0.0 {
        0.9 * 2.0 / mu
    } else {
        f64::INFINITY
    }
}

/// Applies `op` to contiguous row blocks on the rayon pool. Rows are
/// independent, so the result does not depend on the thread count.
pub fn par_rows<T: Real>(f: &Array2<T>, op: impl Fn(&Array2<T>) -> Result<Array2<T>> + Sync) -> Result<Array2<T>> {
    let threads = rayon::current_num_threads();
    let nx = f.nrows();
    if threads <= 1 || nx < 2 * threads {
        return op(f);
    }
    let chunk = nx.div_ceil(threads);
    let starts: Vec<usize> = (0..nx).step_by(chunk).collect();
    let parts = starts
        .into_par_iter()
        .map(|r0| op(&f.slice(s![r0..(r0 + chunk).min(nx), ..]).to_owned()))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::DimensionMismatch(e.to_string()))
}

/// Upwind `v_1 d_x f` for every row.
pub fn upwind<T: Real>(f: &Array2<T>, v1: &Array1<T>, space: &SpatialGrid) -> Array2<T> {
    let inv = T::one() / T::c(space.dx());
    let mut out = Array2::zeros(f.raw_dim());
    for j in 0..space.n {
        let (l, r) = space.neighbours(j);
        let (fl, fc, fr) = (f.row(l), f.row(j), f.row(r));
        let mut o = out.row_mut(j);
        for a in 0..f.ncols() {
            let v = v1[a];
            o[a] = if v > T::zero() { v * (fc[a] - fl[a]) * inv } else { v * (fr[a] - fc[a]) * inv };
        }
    }
    out
}

/// Characteristic upwinding of `A d_x u` for the fluid system.
fn upwind_system<T: Real>(u: &Array2<T>, plus: &Array2<T>, minus: &Array2<T>, space: &SpatialGrid) -> Array2<T> {
    let inv = T::one() / T::c(space.dx());
    let n = space.n;
    let mut dm = Array2::zeros(u.raw_dim());
    let mut dp = Array2::zeros(u.raw_dim());
    for j in 0..n {
        let (l, r) = space.neighbours(j);
        dm.row_mut(j).assign(&((&u.row(j) - &u.row(l)) * inv));
        dp.row_mut(j).assign(&((&u.row(r) - &u.row(j)) * inv));
    }
    dm.dot(&plus.t()) + dp.dot(&minus.t())
}

enum Implicit<T> {
    Nu(Array1<T>),
    Full(Cholesky<T>),
}

/// Prefactored stepper for a fixed `dt`.
pub struct Stepper<'a, T> {
    pub ops: &'a Operators<T>,
    pub space: SpatialGrid,
    pub cfg: SchemeConfig,
    pub dt: f64,
    v1: Array1<T>,
    implicit: Implicit<T>,
    a_plus: Array2<T>,
    a_minus: Array2<T>,
}

impl<'a, T: Real> Stepper<'a, T> {
    pub fn new(ops: &'a Operators<T>, space: SpatialGrid, cfg: SchemeConfig) -> Result<Self> {
        let mut dt = cfg.time_step(&space, &ops.grid)?;
        if cfg.collision == CollisionTreatment::NuImplicit {
            let limit = nu_implicit_limit(&ops.linear);
            match cfg.dt {
                Some(_) if dt > limit => return Err(Error::Cfl { dt, limit }),
                _ => dt = dt.min(limit),
            }
        }
        let dtt = T::c(dt);
        let implicit = match cfg.collision {
            CollisionTreatment::NuImplicit => Implicit::Nu(ops.linear.nu().mapv(|n| T::one() / (T::one() + dtt * n))),
            CollisionTreatment::FullImplicit => {
                let mut a = ops.linear.matrix() * (-dtt);
                for i in 0..a.nrows() {
                    a[[i, i]] += T::one();
                }
                Implicit::Full(Cholesky::new(&a)?)
            }
        };
        let flux = micromacro::flux_matrix(&ops.basis, &ops.grid)?;
        let flux = (&flux + &flux.t()) * 0.5;
        let (vals, vecs) = linalg::sym_eigen(&flux);
        let part = |sel: fn(f64) -> f64| {
            let k = vals.len();
            let d = Array2::from_shape_fn((k, k), |(i, j)| if i == j { sel(vals[i]) } else { 0.0 });
            vecs.dot(&d).dot(&vecs.t()).mapv(T::c)
        };
        Ok(Self {
            v1: ops.v1(),
            implicit,
            a_plus: part(|x| x.max(0.0)),
            a_minus: part(|x| x.min(0.0)),
            ops,
            space,
            cfg,
            dt,
        })
    }

    fn relax(&self, g: &mut Array2<T>, explicit_from: &Array2<T>) {
        match &self.implicit {
            Implicit::Nu(inv) => {
                *g += &(self.ops.linear.apply_k_batch(explicit_from) * T::c(self.dt));
                *g *= inv;
            }
            Implicit::Full(ch) => {
                let solved = par_rows(g, |b| {
                    let mut b = b.clone();
                    ch.solve_rows(&mut b);
                    Ok(b)
                });
                *g = solved.expect("row solves are infallible");
            }
        }
    }

    fn finish(&self, prev: &SimState<T>, f: Array2<T>, split: Option<Split<T>>) -> Result<SimState<T>> {
        if !f.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state at t = {:.6}", prev.t + self.dt)));
        }
        Ok(SimState { t: prev.t + self.dt, step: prev.step + 1, f, split, config_hash: prev.config_hash })
    }

    /// One IMEX step of the full equation. The fluid part is taken from the
    /// transport update alone, so totals are conserved to roundoff.
    pub fn step_direct(&self, s: &SimState<T>) -> Result<SimState<T>> {
        let dt = T::c(self.dt);
        let basis = &self.ops.basis;
        let mut adv = s.f.clone();
        adv.scaled_add(-dt, &upwind(&s.f, &self.v1, &self.space));
        let mut g = adv.clone();
        if self.cfg.nonlinear {
            g.scaled_add(dt, &self.ops.apply_n(&s.f)?);
        }
        self.relax(&mut g, &s.f);
        basis.p1_batch_inplace(&mut g);
        let u = basis.coords_batch(&adv);
        g += &basis.reconstruct_batch(&u);
        self.finish(s, g, None)
    }

    /// One step of the coupled fluid / microscopic system.
    pub fn step_micromacro(&self, s: &SimState<T>) -> Result<SimState<T>> {
        let Some(sp) = &s.split else {
            return Err(Error::InvalidParams("micro-macro step needs split storage".into()));
        };
        let dt = T::c(self.dt);
        let basis = &self.ops.basis;
        let tf1 = upwind(&sp.f1, &self.v1, &self.space);
        let mut u = sp.u.clone();
        u.scaled_add(-dt, &upwind_system(&sp.u, &self.a_plus, &self.a_minus, &self.space));
        u.scaled_add(-dt, &basis.coords_batch(&tf1));

        let f0 = basis.reconstruct_batch(&sp.u);
        let mut tf = upwind(&f0, &self.v1, &self.space);
        tf += &tf1;
        basis.p1_batch_inplace(&mut tf);
        let mut g = sp.f1.clone();
        g.scaled_add(-dt, &tf);
        if self.cfg.nonlinear {
            let mut n = self.ops.apply_n(&s.f)?;
            basis.p1_batch_inplace(&mut n);
            g.scaled_add(dt, &n);
        }
        self.relax(&mut g, &sp.f1);
        if matches!(self.implicit, Implicit::Nu(_)) {
            // the diagonal solve leaves the complement at O(dt); projecting is part of that scheme
            basis.p1_batch_inplace(&mut g);
        }
        let drift = max_drift(basis, &g);
        if drift > self.cfg.tol_drift {
            return Err(Error::ProjectionDrift { drift, tol: self.cfg.tol_drift });
        }
        basis.p1_batch_inplace(&mut g);
        let f = basis.reconstruct_batch(&u) + &g;
        self.finish(s, f, Some(Split { u, f1: g }))
    }

    pub fn step(&self, s: &SimState<T>) -> Result<SimState<T>> {
        match self.cfg.mode {
            Mode::Direct => self.step_direct(s),
            Mode::Micromacro => self.step_micromacro(s),
        }
    }

    /// Number of steps to reach `t_final` (the last step may overshoot by
    /// less than `dt`).
    pub fn steps_to(&self, t0: f64, t_final: f64) -> u64 {
        ((t_final - t0) / self.dt - 1e-9).ceil().max(0.0) as u64
    }

    /// Steps to `t_final`, calling `observe(prev, next)` after every step.
    pub fn run(
        &self,
        mut state: SimState<T>,
        t_final: f64,
        mut observe: impl FnMut(&SimState<T>, &SimState<T>) -> Result<()>,
    ) -> Result<SimState<T>> {
        if self.cfg.mode == Mode::Micromacro && state.split.is_none() {
            state = state.with_split(&self.ops.basis);
        }
        for _ in 0..self.steps_to(state.t, t_final) {
            let next = self.step(&state)?;
            observe(&state, &next)?;
            state = next;
        }
        Ok(state)
    }
}

/// `max_j max_k |<g_j, b_k>| / ||g_j||` over rows.
pub fn max_drift<T: Real>(basis: &MacroBasis<T>, g: &Array2<T>) -> f64 {
    let m = basis.moments_batch(g);
    let w = basis.weight().f64();
    let mut worst = 0.0f64;
    for (row, mrow) in g.rows().into_iter().zip(m.rows()) {
        let n = (row.dot(&row).f64() * w).sqrt();
        if n > 0.0 {
            let c = mrow.iter().fold(0.0f64, |a, x| a.max(x.f64().abs()));
            worst = worst.max(c / n);
        }
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    /// `(x/w) exp(-(x/w)^2 / 2)`, odd about the centre.
    OddBump,
    /// `exp(-(x/w)^2 / 2)`, nonzero mean.
    Gaussian,
}

/// Initial perturbation `eps s(x) (f0_dir + micro h1)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitialProfile {
    pub amplitude: f64,
    pub shape: Shape,
    pub center: f64,
    pub width: f64,
    /// Fluid direction `(rho_1..rho_I, q1, q2, q3, e)`; empty means all ones.
    pub fluid: Vec<f64>,
    /// Weight of the microscopic excitation relative to the fluid part.
    pub micro: f64,
}

impl Default for InitialProfile {
    fn default() -> Self {
        Self { amplitude: 1e-3, shape: Shape::OddBump, center: 0.0, width: 2.0, fluid: Vec::new(), micro: 1.0 }
    }
}

impl InitialProfile {
    pub fn shape_at(&self, x: f64) -> f64 {
        let y = (x - self.center) / self.width;
        match self.shape {
            Shape::OddBump => y * (-0.5 * y * y).exp(),
            Shape::Gaussian => (-0.5 * y * y).exp(),
        }
    }

    /// Shape sampled on the grid; the odd bump is mirrored so that its sum
    /// cancels pairwise when the centre is the middle of the interval.
    pub fn samples(&self, space: &SpatialGrid) -> Vec<f64> {
        let n = space.n;
        let mid = 0.5 * (space.x_lo + space.x_hi);
        let mut s: Vec<f64> = (0..n).map(|j| self.shape_at(space.x(j))).collect();
        if self.shape == Shape::OddBump && (self.center - mid).abs() < 1e-14 * space.dx().max(1.0) {
            for j in 0..n / 2 {
                s[n - 1 - j] = -s[j];
            }
            if n % 2 == 1 {
                s[n / 2] = 0.0;
            }
        }
        s
    }
}

/// Fixed microscopic direction `P1((nM)^{1/2} v_1 (1/sqrt(n_0) [species 0] + (m|v|^2 - 5)/2))`,
/// normalized. For one species only the heat-flux part survives.
pub fn micro_direction<T: Real>(params: &MixtureParams<T>, grid: &VelocityGrid<T>, basis: &MacroBasis<T>) -> Result<SpeciesField<T>> {
    let ns = params.n_species();
    let sq = sqrt_equilibrium(params, grid);
    let raw = SpeciesField::from_fn(ns, grid.len(), |(i, a)| {
        let v = grid.node(a);
        let heat = T::c(0.5) * (params.mass(i) * grid.speed_sq(a) - T::c(5.0));
        let spec = if i == 0 { T::one() / params.density(0).sqrt() } else { T::zero() };
        sq.values[[i, a]] * v[0] * (spec + heat)
    });
    let h = basis.p1(&raw)?;
    let n = crate::mixture::norm(&h, grid)?;
    if !(n > T::zero()) {
        return Err(Error::Numerical("microscopic direction vanished".into()));
    }
    Ok(h.scaled(T::one() / n))
}

/// Builds the initial state.
pub fn make_initial<T: Real>(
    profile: &InitialProfile,
    ops: &Operators<T>,
    space: &SpatialGrid,
    config_hash: Key,
) -> Result<SimState<T>> {
    if !(profile.amplitude > 0.0) {
        return Err(Error::InvalidParams(format!("amplitude {} must be positive", profile.amplitude)));
    }
    if !(profile.width > 0.0) {
        return Err(Error::InvalidParams(format!("width {} must be positive", profile.width)));
    }
    let k = ops.basis.len();
    let dir: Vec<f64> = if profile.fluid.is_empty() { vec![1.0; k] } else { profile.fluid.clone() };
    if dir.len() != k {
        return Err(Error::DimensionMismatch(format!("{} fluid weights for {k} coordinates", dir.len())));
    }
    let f0 = ops.basis.reconstruct(&dir.iter().map(|&x| T::c(x)).collect::<Vec<_>>())?;
    let h1 = micro_direction(&ops.params, &ops.grid, &ops.basis)?;
    let mut shape_dir = f0.to_flat();
    shape_dir.scaled_add(T::c(profile.micro), &h1.to_flat());
    let s = profile.samples(space);
    let eps = T::c(profile.amplitude);
    let f = Array2::from_shape_fn((space.n, ops.dim()), |(j, a)| eps * T::c(s[j]) * shape_dir[a]);
    Ok(SimState { t: 0.0, step: 0, f, split: None, config_hash })
}

/// Random smooth periodic data for property tests.
pub fn random_state<T: Real>(space: &SpatialGrid, basis: &MacroBasis<T>, scale: f64, seed: u64) -> SimState<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = basis.dim();
    let modes = 3;
    let coef: Vec<f64> = (0..modes * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let len = space.x_hi - space.x_lo;
    let f = Array2::from_shape_fn((space.n, dim), |(j, a)| {
        let x = (space.x(j) - space.x_lo) / len;
        let mut v = 0.0;
        for m in 0..modes {
            v += coef[m * dim + a] * (2.0 * std::f64::consts::PI * (m + 1) as f64 * x).sin() / (m + 1) as f64;
        }
        T::c(scale * v)
    });
    SimState { t: 0.0, step: 0, f, split: None, config_hash: [0; 32] }
}

/// Totals `sum_j u_j dx` of the fluid coordinates.
pub fn totals<T: Real>(state: &SimState<T>, basis: &MacroBasis<T>, space: &SpatialGrid) -> Vec<f64> {
    state.fluid(basis).sum_axis(Axis(0)).iter().map(|x| x.f64() * space.dx()).collect()
}

/// `sum_j ||f_j||^2 dx`.
pub fn l2_sq<T: Real>(f: &Array2<T>, weight: T, space: &SpatialGrid) -> f64 {
    f.iter().map(|x| x.f64() * x.f64()).sum::<f64>() * weight.f64() * space.dx()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_derivative() {
        let g = SpatialGrid::new(0.0, 1.0, 16, Boundary::Periodic).unwrap();
        assert_eq!(g.neighbours(0), (15, 1));
        let f = Array2::from_shape_fn((16, 1), |(j, _)| (2.0 * std::f64::consts::PI * g.x(j)).sin());
        let d = g.ddx(&f);
        let err = (0..16).map(|j| (d[[j, 0]] - 2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * g.x(j)).cos()).abs()).fold(0.0, f64::max);
        assert!(err < 0.2, "{err}");
        let o = SpatialGrid::new(0.0, 1.0, 16, Boundary::Outflow).unwrap();
        let lin = Array2::from_shape_fn((16, 1), |(j, _)| 3.0 * o.x(j));
        assert!(o.ddx(&lin).iter().all(|&x| (x - 3.0).abs() < 1e-12));
        assert!(SpatialGrid::new(0.0, 1.0, 4, Boundary::Outflow).is_err());
    }

    #[test]
    fn upwind_telescopes_on_periodic_grid() {
        let g = SpatialGrid::new(-1.0, 1.0, 12, Boundary::Periodic).unwrap();
        let v1 = Array1::from(vec![1.0, -0.5, 0.0]);
        let f = Array2::from_shape_fn((12, 3), |(j, a)| ((j * 7 + a) % 5) as f64);
        let t = upwind(&f, &v1, &g);
        for s in t.sum_axis(Axis(0)).iter() {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn row_blocks_match_serial() {
        let f = Array2::from_shape_fn((37, 5), |(j, a)| ((j * 13 + a * 7) % 17) as f64 / 17.0 - 0.4);
        // row-local but not linear, so a misplaced block would show
        let op = |b: &Array2<f64>| -> Result<Array2<f64>> {
            Ok(Array2::from_shape_fn(b.raw_dim(), |(j, a)| b.row(j).dot(&b.row(j)).sqrt() * b[[j, a]].exp()))
        };
        let serial = op(&f).unwrap();
        for threads in [1, 3, 4] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let par = pool.install(|| par_rows(&f, op)).unwrap();
            assert_eq!(par, serial, "{threads} threads");
        }
    }

    #[test]
    fn cfl_checked() {
        let v = VelocityGrid::<f64>::new(8, 4.0).unwrap();
        let s = SpatialGrid::new(0.0, 8.0, 8, Boundary::Outflow).unwrap();
        let c = SchemeConfig { dt: Some(10.0), ..Default::default() };
        assert!(matches!(c.time_step(&s, &v), Err(Error::Cfl { .. })));
        let c = SchemeConfig::default();
        assert!(c.time_step(&s, &v).unwrap() > 0.0);
    }

    #[test]
    fn odd_profile_has_zero_sum() {
        let s = SpatialGrid::new(-5.0, 5.0, 33, Boundary::Outflow).unwrap();
        let p = InitialProfile::default();
        assert!(p.samples(&s).iter().sum::<f64>().abs() < 1e-15);
    }
}
