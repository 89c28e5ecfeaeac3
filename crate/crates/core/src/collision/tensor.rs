//! Discrete collision operator in symmetrized weak form.
//!
//! A collision event is a tuple (species pair, node `a`, node `b`,
//! direction). Its pre-collision velocities are grid nodes; the
//! post-collision velocities are generally off-grid and are reached by a
//! seven-point quadratic stencil that reproduces `1`, `v_k` and `|v|^2`
//! exactly, so every event conserves mass, momentum and energy to roundoff.
//!
//! Perturbations are interpolated with weights `alpha` that reproduce
//! `(nM)^{1/2} {1, v_k, |v|^2}` at the target exactly. Among all such weights
//! the one closest to the plain Lagrange weights is used; plain ratio
//! interpolation of `f / (nM)^{1/2}` amplifies tail values by `exp(m |v| h / 2)`
//! on coarse grids.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::kinematics::{dot3, post_shift};
use crate::collision::AngularQuadrature;
use crate::error::{Error, Result};
use crate::io::{self, Key};
use crate::mixture::{log_equilibrium, MixtureParams, SpeciesField, VelocityGrid};
use crate::scalar::Real;

/// Discretization choices for the collision integral.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollisionConfig {
    /// Points of the angular rule (6, 14 or 26).
    pub angular_points: usize,
    /// Partners `v*` of a node `v` are the nodes congruent to it modulo this
    /// stride on every axis, with the weight of the coarse sublattice.
    pub pair_stride: usize,
    /// Rescale the angular weights of each relative velocity so that
    /// `sum_c w_c |g . omega_c| = 2 pi |g|` holds exactly.
    pub normalize_kernel: bool,
    /// Events whose interpolation weights exceed this in magnitude are
    /// dropped (coarse tails). Non-positive disables the cut.
    pub max_weight: f64,
}

impl Default for CollisionConfig {
    fn default() -> Self {
        Self { angular_points: 26, pair_stride: 2, normalize_kernel: true, max_weight: 4.0 }
    }
}

impl CollisionConfig {
    pub fn validate(&self) -> Result<()> {
        if ![6, 14, 26].contains(&self.angular_points) {
            return Err(Error::InvalidParams(format!(
                "angular_points must be 6, 14 or 26, got {}",
                self.angular_points
            )));
        }
        if self.pair_stride == 0 || self.pair_stride > 8 {
            return Err(Error::InvalidParams(format!(
                "pair_stride must be in 1..=8, got {}",
                self.pair_stride
            )));
        }
        Ok(())
    }

    pub fn key_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.angular_points as u64).to_le_bytes());
        out.extend_from_slice(&(self.pair_stride as u64).to_le_bytes());
        out.push(self.normalize_kernel as u8);
        out.extend_from_slice(&self.max_weight.to_le_bytes());
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct Shift<T> {
    /// Displacement in grid units.
    disp: [T; 3],
    base: [i64; 3],
    t: [T; 3],
    w: [T; 7],
}

impl<T: Real> Shift<T> {
    fn new(disp: [T; 3]) -> Self {
        let mut base = [0i64; 3];
        let mut t = [T::zero(); 3];
        for d in 0..3 {
            let r = disp[d].round();
            base[d] = r.to_i64().unwrap_or(0);
            t[d] = disp[d] - r;
        }
        Self { disp, base, t, w: stencil_weights(t) }
    }
}

#[derive(Clone, Debug)]
struct Class<T> {
    dk: [i64; 3],
    /// `w_a w_b' w_c |g . omega_c| r(g)`, without `beta`.
    geom: T,
    post: Shift<T>,
    star: Shift<T>,
}

#[derive(Clone, Debug)]
struct Block<T> {
    i: usize,
    j: usize,
    beta: T,
    classes: Vec<Class<T>>,
}

#[derive(Clone, Copy, Debug)]
struct Sampled<T> {
    block: u32,
    class: u32,
    a: u32,
    mult: T,
}

/// Seven-point stencil around an off-grid velocity. Order:
/// centre, -x, +x, -y, +y, -z, +z.
#[derive(Clone, Copy, Debug)]
pub struct Stencil<T> {
    /// Flat field indices (species offset included).
    pub idx: [usize; 7],
    /// Perturbation weights: `f(v') ~ sum_s alpha_s f_s`.
    pub alpha: [T; 7],
    /// `(nM(v') / nM(v_s))^{1/2}`
    pub ratio: [T; 7],
    /// `(nM(v_s) / nM(v'))^{1/2}`
    pub lift: [T; 7],
}

impl<T: Real> Stencil<T> {
    /// Distribution value at the target, `(nM')^{1/2} sum alpha_s G_s / (nM_s)^{1/2}`.
    #[inline]
    pub fn distribution(&self, g: &[T]) -> T {
        let mut acc = T::zero();
        for s in 0..7 {
            acc += self.alpha[s] * self.ratio[s] * g[self.idx[s]];
        }
        acc
    }

    /// Test-function value at the target; exact for `1, v_k, |v|^2`.
    #[inline]
    pub fn test_weight(&self, s: usize) -> T {
        self.alpha[s] * self.lift[s]
    }

    #[inline]
    pub fn perturbation(&self, f: &[T]) -> T {
        let mut acc = T::zero();
        for s in 0..7 {
            acc += self.alpha[s] * f[self.idx[s]];
        }
        acc
    }
}

/// One collision event with everything the kernels need.
#[derive(Clone, Copy, Debug)]
pub struct Event<T> {
    /// Quadrature weight, including `beta_ij`.
    pub weight: T,
    /// Flat index of `(i, v)`.
    pub a: usize,
    /// Flat index of `(j, v*)`.
    pub b: usize,
    /// Around `v'` (species `i`).
    pub post: Stencil<T>,
    /// Around `v*'` (species `j`).
    pub star: Stencil<T>,
    /// `(n_i M_i(v))^{1/2}`
    pub amp_a: T,
    /// `(n_j M_j(v*))^{1/2}`
    pub amp_b: T,
    /// `(n_i M_i(v'))^{1/2}`
    pub amp_post: T,
    /// `(n_j M_j(v*'))^{1/2}`
    pub amp_star: T,
}

impl<T: Real> Event<T> {
    /// Coefficients `c` of the linear functional
    /// `g -> (nM(v) nM(v*))^{1/2} (gamma' + gamma*' - gamma - gamma*)`,
    /// `gamma = g / (nM)^{1/2}`, as (index, value) pairs, zeros dropped.
    #[inline]
    pub fn linear_coefficients(&self, out: &mut [(usize, T); 16]) -> usize {
        let mut k = 0;
        out[k] = (self.a, -self.amp_b);
        k += 1;
        out[k] = (self.b, -self.amp_a);
        k += 1;
        for s in 0..7 {
            out[k] = (self.post.idx[s], self.amp_star * self.post.alpha[s]);
            k += 1;
        }
        for s in 0..7 {
            out[k] = (self.star.idx[s], self.amp_post * self.star.alpha[s]);
            k += 1;
        }
        k
    }
}

#[inline]
fn stencil_weights<T: Real>(t: [T; 3]) -> [T; 7] {
    let half = T::c(0.5);
    let mut w = [T::zero(); 7];
    w[0] = T::one() - (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]);
    for d in 0..3 {
        w[1 + 2 * d] = half * t[d] * (t[d] - T::one());
        w[2 + 2 * d] = half * t[d] * (t[d] + T::one());
    }
    w
}

/// Weights closest to `w` (Euclidean) with
/// `sum_s alpha_s r_s p(delta_s) = p(0)` for `p in {1, x, y, z, |x|^2}`,
/// where `delta_s` is node minus target in grid units and `r_s` the
/// amplitude ratio node over target.
fn moment_weights<T: Real>(w: &[T; 7], r: &[T; 7], t: [T; 3]) -> [T; 7] {
    let mut scale = T::zero();
    for &x in r {
        scale = scale.max(x);
    }
    // columns of C^T (7 x 5), row s = r_s / scale * (1, dx, dy, dz, |d|^2)
    let mut a = [[T::zero(); 5]; 7];
    for s in 0..7 {
        let mut d = [-t[0], -t[1], -t[2]];
        if s > 0 {
            let ax = (s - 1) / 2;
            d[ax] += if s % 2 == 0 { T::one() } else { -T::one() };
        }
        let q = r[s] / scale;
        a[s] = [q, q * d[0], q * d[1], q * d[2], q * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2])];
    }
    // residual of the constraints at w
    let mut res = [T::zero(); 5];
    res[0] = T::one() / scale;
    for s in 0..7 {
        for p in 0..5 {
            res[p] -= a[s][p] * w[s];
        }
    }
    // Householder QR of A = C^T, then x = Q R^{-T} res
    let mut vs = [[T::zero(); 7]; 5];
    let mut diag = [T::zero(); 5];
    for p in 0..5 {
        let mut norm = T::zero();
        for s in p..7 {
            norm += a[s][p] * a[s][p];
        }
        let norm = norm.sqrt();
        let alpha = if a[p][p] > T::zero() { -norm } else { norm };
        let mut v = [T::zero(); 7];
        for s in p..7 {
            v[s] = a[s][p];
        }
        v[p] -= alpha;
        let vn: T = v.iter().map(|&x| x * x).sum();
        if vn > T::zero() {
            for q in p..5 {
                let mut dot = T::zero();
                for s in p..7 {
                    dot += v[s] * a[s][q];
                }
                let f = T::c(2.0) * dot / vn;
                for s in p..7 {
                    a[s][q] -= f * v[s];
                }
            }
        }
        diag[p] = a[p][p];
        vs[p] = v;
    }
    // R^T y = res (forward substitution), R upper triangular in a[0..5][0..5]
    let mut y = [T::zero(); 5];
    for p in 0..5 {
        let mut acc = res[p];
        for q in 0..p {
            acc -= a[q][p] * y[q];
        }
        y[p] = if diag[p] != T::zero() { acc / diag[p] } else { T::zero() };
    }
    // x = H_0 ... H_4 [y; 0]
    let mut x = [T::zero(); 7];
    x[..5].copy_from_slice(&y);
    for p in (0..5).rev() {
        let v = &vs[p];
        let vn: T = v.iter().map(|&z| z * z).sum();
        if vn > T::zero() {
            let dot: T = (p..7).map(|s| v[s] * x[s]).sum();
            let f = T::c(2.0) * dot / vn;
            for s in p..7 {
                x[s] -= f * v[s];
            }
        }
    }
    let mut out = *w;
    for s in 0..7 {
        out[s] += x[s];
    }
    out
}

/// Precomputed per-species tables.
#[derive(Clone, Debug)]
struct SpeciesTables<T> {
    /// `log n_i + 1.5 log(m_i / 2 pi)`
    log_norm: T,
    mass: T,
    /// `exp(m (+-2 v_k h + h^2) / 4)` per axis index.
    up: Vec<T>,
    down: Vec<T>,
}

/// Collision operator data for one mixture, grid and configuration.
#[derive(Clone, Debug)]
pub struct CollisionTensor<T> {
    params: MixtureParams<T>,
    grid: VelocityGrid<T>,
    config: CollisionConfig,
    blocks: Vec<Block<T>>,
    species: Vec<SpeciesTables<T>>,
    /// `(n_i M_i(v_a))^{1/2}`, flat.
    amp: Vec<T>,
    cap: T,
    sampled: Option<Vec<Sampled<T>>>,
    key: Key,
}

impl<T: Real> CollisionTensor<T> {
    pub fn new(params: &MixtureParams<T>, grid: &VelocityGrid<T>, config: &CollisionConfig) -> Result<Self> {
        config.validate()?;
        let n = grid.n_per_axis();
        let s = config.pair_stride;
        if s >= n {
            return Err(Error::InvalidParams(format!(
                "pair_stride {s} must be smaller than the {n} nodes per axis"
            )));
        }
        let h = grid.spacing();
        let ang = AngularQuadrature::<T>::lebedev(config.angular_points)?;
        let (dirs, dw) = ang.half_set();
        let w_pair = grid.weight() * T::c((s * s * s) as f64) * grid.weight();

        let ns = params.n_species();
        let span = (n as i64 - 1) / s as i64;
        let mut blocks = Vec::new();
        for i in 0..ns {
            for j in i..ns {
                let (mi, mj) = (params.mass(i), params.mass(j));
                let mut classes = Vec::new();
                for qx in -span..=span {
                    for qy in -span..=span {
                        for qz in -span..=span {
                            let q = [qx, qy, qz];
                            if q == [0, 0, 0] {
                                continue;
                            }
                            if i == j && !lex_positive(q) {
                                continue;
                            }
                            let dk = [qx * s as i64, qy * s as i64, qz * s as i64];
                            let g = [T::c(dk[0] as f64), T::c(dk[1] as f64), T::c(dk[2] as f64)];
                            let gnorm = dot3(g, g).sqrt();
                            let r = if config.normalize_kernel {
                                let mut sum = T::zero();
                                for (d, &w) in dirs.iter().zip(&dw) {
                                    sum += w * dot3(g, *d).abs();
                                }
                                T::c(2.0 * std::f64::consts::PI) * gnorm / sum
                            } else {
                                T::one()
                            };
                            for (d, &w) in dirs.iter().zip(&dw) {
                                let proj = dot3(g, *d).abs();
                                if proj <= T::c(1e-12) * gnorm {
                                    continue;
                                }
                                let geom = w_pair * w * proj * h * r;
                                let post = Shift::new(post_shift(g, *d, mi, mj));
                                let neg = [-g[0], -g[1], -g[2]];
                                let star = Shift::new(post_shift(neg, *d, mj, mi));
                                classes.push(Class { dk, geom, post, star });
                            }
                        }
                    }
                }
                blocks.push(Block { i, j, beta: params.beta(i, j), classes });
            }
        }

        let axis = grid.axis();
        let species = (0..ns)
            .map(|i| {
                let m = params.mass(i);
                let q = T::c(0.25) * m;
                SpeciesTables {
                    log_norm: params.density(i).ln()
                        + T::c(1.5) * (m / T::c(2.0 * std::f64::consts::PI)).ln(),
                    mass: m,
                    up: axis.iter().map(|&v| (q * (T::c(2.0) * v * h + h * h)).exp()).collect(),
                    down: axis.iter().map(|&v| (q * (-T::c(2.0) * v * h + h * h)).exp()).collect(),
                }
            })
            .collect();
        let amp = log_equilibrium(params, grid).iter().map(|&l| (T::c(0.5) * l).exp()).collect();
        let key = io::hash_parts(&[
            b"collision-tensor-v1",
            &params.key_bytes(),
            &grid.key_bytes(),
            &config.key_bytes(),
            &[std::mem::size_of::<T>() as u8],
        ]);
        Ok(Self {
            params: params.clone(),
            grid: grid.clone(),
            config: config.clone(),
            blocks,
            species,
            amp,
            cap: T::c(config.max_weight),
            sampled: None,
            key,
        })
    }

    pub fn params(&self) -> &MixtureParams<T> {
        &self.params
    }

    pub fn grid(&self) -> &VelocityGrid<T> {
        &self.grid
    }

    pub fn config(&self) -> &CollisionConfig {
        &self.config
    }

    /// Hash of (mixture, grid, configuration, subsampling).
    pub fn key(&self) -> &Key {
        &self.key
    }

    pub fn dim(&self) -> usize {
        self.params.n_species() * self.grid.len()
    }

    pub fn is_subsampled(&self) -> bool {
        self.sampled.is_some()
    }

    /// Number of candidate events, before the weight cut.
    pub fn n_candidates(&self) -> usize {
        if let Some(s) = &self.sampled {
            return s.len();
        }
        let n = self.grid.n_per_axis() as i64;
        self.blocks
            .iter()
            .map(|b| {
                b.classes
                    .iter()
                    .map(|c| c.dk.iter().map(|&d| (n - d.abs()).max(0) as usize).product::<usize>())
                    .sum::<usize>()
            })
            .sum()
    }

    #[inline]
    fn stencil(&self, species: usize, k: [usize; 3], sh: &Shift<T>) -> (Stencil<T>, T) {
        let n = self.grid.n_per_axis();
        let h = self.grid.spacing();
        let axis = self.grid.axis();
        let tab = &self.species[species];
        let mut c = [0usize; 3];
        let mut t = sh.t;
        let mut clamped = false;
        for d in 0..3 {
            let raw = k[d] as i64 + sh.base[d];
            let cl = raw.clamp(1, n as i64 - 2);
            if cl != raw {
                clamped = true;
                t[d] = T::c((k[d] as i64 - cl) as f64) + sh.disp[d];
            }
            c[d] = cl as usize;
        }
        let w = if clamped { stencil_weights(t) } else { sh.w };
        let off = species * self.grid.len();
        let centre = off + self.grid.flat(c[0], c[1], c[2]);
        let strides = [n * n, n, 1];
        let mut idx = [centre; 7];
        for d in 0..3 {
            idx[1 + 2 * d] = centre - strides[d];
            idx[2 + 2 * d] = centre + strides[d];
        }
        // |v'|^2 - |v_c|^2 = delta . (2 v_c + delta), delta = t h
        let mut diff = T::zero();
        let mut vc_sq = T::zero();
        for d in 0..3 {
            let vc = axis[c[d]];
            let del = t[d] * h;
            diff += del * (T::c(2.0) * vc + del);
            vc_sq += vc * vc;
        }
        let m = tab.mass;
        let rc = (-T::c(0.25) * m * diff).exp();
        let lc = (T::c(0.25) * m * diff).exp();
        let mut ratio = [rc; 7];
        let mut lift = [lc; 7];
        for d in 0..3 {
            ratio[1 + 2 * d] = rc * tab.down[c[d]];
            ratio[2 + 2 * d] = rc * tab.up[c[d]];
            lift[1 + 2 * d] = lc / tab.down[c[d]];
            lift[2 + 2 * d] = lc / tab.up[c[d]];
        }
        let alpha = moment_weights(&w, &lift, t);
        let amp = (T::c(0.5) * (tab.log_norm - T::c(0.5) * m * (vc_sq + diff))).exp();
        (Stencil { idx, alpha, ratio, lift }, amp)
    }

    #[inline]
    fn event(&self, block: &Block<T>, class: &Class<T>, a_node: usize, mult: T) -> Option<Event<T>> {
        let ka = self.grid.triple(a_node);
        let kb = [
            (ka[0] as i64 - class.dk[0]) as usize,
            (ka[1] as i64 - class.dk[1]) as usize,
            (ka[2] as i64 - class.dk[2]) as usize,
        ];
        let b_node = self.grid.flat(kb[0], kb[1], kb[2]);
        let nv = self.grid.len();
        let (post, amp_post) = self.stencil(block.i, ka, &class.post);
        let (star, amp_star) = self.stencil(block.j, kb, &class.star);
        if self.cap > T::zero() && post.alpha.iter().chain(&star.alpha).any(|x| x.abs() > self.cap) {
            return None;
        }
        let a = block.i * nv + a_node;
        let b = block.j * nv + b_node;
        Some(Event {
            weight: class.geom * block.beta * mult,
            a,
            b,
            post,
            star,
            amp_a: self.amp[a],
            amp_b: self.amp[b],
            amp_post,
            amp_star,
        })
    }

    /// Visits every event in a fixed order.
    pub fn for_each_event(&self, mut f: impl FnMut(&Event<T>)) {
        if let Some(list) = &self.sampled {
            for s in list {
                let blk = &self.blocks[s.block as usize];
                let cls = &blk.classes[s.class as usize];
                if let Some(e) = self.event(blk, cls, s.a as usize, s.mult) {
                    f(&e);
                }
            }
            return;
        }
        let n = self.grid.n_per_axis() as i64;
        for blk in &self.blocks {
            for cls in &blk.classes {
                let lo = |d: usize| cls.dk[d].max(0);
                let hi = |d: usize| (n + cls.dk[d]).min(n);
                for ix in lo(0)..hi(0) {
                    for iy in lo(1)..hi(1) {
                        for iz in lo(2)..hi(2) {
                            let a = self.grid.flat(ix as usize, iy as usize, iz as usize);
                            if let Some(e) = self.event(blk, cls, a, T::one()) {
                                f(&e);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Importance-sampled copy with about `target` events. An event is kept
    /// with probability proportional to `W (nM(v) nM(v*))^{1/2}` (capped at
    /// one) and its weight is divided by that probability. Every kept event
    /// still conserves exactly, so the result is a valid, cheaper collision
    /// operator.
    pub fn subsample(&self, target: usize, seed: u64) -> Result<Self> {
        if self.sampled.is_some() {
            return Err(Error::InvalidParams("tensor is already subsampled".into()));
        }
        if target == 0 {
            return Err(Error::InvalidParams("subsample target must be positive".into()));
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        self.for_each_event(|e| {
            total += (e.weight * e.amp_a * e.amp_b).f64();
            count += 1;
        });
        if target >= count {
            return Ok(self.clone());
        }
        let scale = target as f64 / total;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut list = Vec::with_capacity(target + target / 8);
        let n = self.grid.n_per_axis() as i64;
        for (bi, blk) in self.blocks.iter().enumerate() {
            for (ci, cls) in blk.classes.iter().enumerate() {
                let lo = |d: usize| cls.dk[d].max(0);
                let hi = |d: usize| (n + cls.dk[d]).min(n);
                for ix in lo(0)..hi(0) {
                    for iy in lo(1)..hi(1) {
                        for iz in lo(2)..hi(2) {
                            let a = self.grid.flat(ix as usize, iy as usize, iz as usize);
                            let Some(e) = self.event(blk, cls, a, T::one()) else { continue };
                            let p = ((e.weight * e.amp_a * e.amp_b).f64() * scale).min(1.0);
                            if p > 0.0 && rng.gen::<f64>() < p {
                                list.push(Sampled {
                                    block: bi as u32,
                                    class: ci as u32,
                                    a: a as u32,
                                    mult: T::c(1.0 / p),
                                });
                            }
                        }
                    }
                }
            }
        }
        let mut out = self.clone();
        out.key = io::hash_parts(&[
            &self.key,
            b"subsample",
            &(target as u64).to_le_bytes(),
            &seed.to_le_bytes(),
        ]);
        out.sampled = Some(list);
        Ok(out)
    }

    fn check_field(&self, f: &SpeciesField<T>) -> Result<()> {
        f.check_shape(self.params.n_species(), self.grid.len())
    }

    /// `Q(F, G)` for distributions `F`, `G` (not perturbations).
    pub fn apply_q(&self, f: &SpeciesField<T>, g: &SpeciesField<T>) -> Result<SpeciesField<T>> {
        self.check_field(f)?;
        self.check_field(g)?;
        let (fs, gs) = (f.as_slice(), g.as_slice());
        let inv_w = T::one() / self.grid.weight();
        let mut out = SpeciesField::zeros(f.n_species(), f.n_nodes());
        let o = out.as_slice_mut();
        self.for_each_event(|e| {
            let (fp, gp) = (e.post.distribution(fs), e.post.distribution(gs));
            let (fs_, gs_) = (e.star.distribution(fs), e.star.distribution(gs));
            let x1 = e.weight * inv_w * (fp * gs_ - fs[e.a] * gs[e.b]);
            let x2 = e.weight * inv_w * (fs_ * gp - fs[e.b] * gs[e.a]);
            o[e.a] += x1;
            o[e.b] += x2;
            for s in 0..7 {
                o[e.post.idx[s]] -= x1 * e.post.test_weight(s);
                o[e.star.idx[s]] -= x2 * e.star.test_weight(s);
            }
        });
        check_finite(&out)?;
        Ok(out)
    }

    /// Entropy production `D(G) = <Q(G, G), log G>` in weak form.
    pub fn entropy_production(&self, g: &SpeciesField<T>) -> Result<T> {
        self.check_field(g)?;
        if g.values.iter().any(|&x| !(x > T::zero())) {
            return Err(Error::InvalidParams("entropy production needs a positive distribution".into()));
        }
        let gs = g.as_slice();
        let lg: Vec<T> = gs.iter().map(|x| x.ln()).collect();
        let mut d = T::zero();
        self.for_each_event(|e| {
            let (gp, gq) = (e.post.distribution(gs), e.star.distribution(gs));
            let (mut lp, mut lq) = (T::zero(), T::zero());
            for s in 0..7 {
                lp += e.post.test_weight(s) * lg[e.post.idx[s]];
                lq += e.star.test_weight(s) * lg[e.star.idx[s]];
            }
            d -= e.weight * (gp * gq - gs[e.a] * gs[e.b]) * (lp + lq - lg[e.a] - lg[e.b]);
        });
        if !d.is_finite() {
            return Err(Error::Numerical("entropy production is not finite".into()));
        }
        Ok(d)
    }

    /// `(nM)^{-1/2} Q((nM)^{1/2} f, (nM)^{1/2} g)`.
    pub fn apply_bilinear(&self, f: &SpeciesField<T>, g: &SpeciesField<T>) -> Result<SpeciesField<T>> {
        self.check_field(f)?;
        self.check_field(g)?;
        let (fs, gs) = (f.as_slice(), g.as_slice());
        let inv_w = T::one() / self.grid.weight();
        let mut out = SpeciesField::zeros(f.n_species(), f.n_nodes());
        let o = out.as_slice_mut();
        self.for_each_event(|e| {
            let (fp, gp) = (e.post.perturbation(fs), e.post.perturbation(gs));
            let (fq, gq) = (e.star.perturbation(fs), e.star.perturbation(gs));
            let x1 = e.weight * inv_w * (fp * gq - fs[e.a] * gs[e.b]);
            let x2 = e.weight * inv_w * (fq * gp - fs[e.b] * gs[e.a]);
            o[e.a] += x1 * e.amp_b;
            o[e.b] += x2 * e.amp_a;
            for s in 0..7 {
                o[e.post.idx[s]] -= x1 * e.amp_star * e.post.alpha[s];
                o[e.star.idx[s]] -= x2 * e.amp_post * e.star.alpha[s];
            }
        });
        check_finite(&out)?;
        Ok(out)
    }

    /// Nonlinear term `N(f)`.
    pub fn apply_n(&self, f: &SpeciesField<T>) -> Result<SpeciesField<T>> {
        self.check_field(f)?;
        let fs = f.as_slice();
        let inv_w = T::one() / self.grid.weight();
        let mut out = SpeciesField::zeros(f.n_species(), f.n_nodes());
        let o = out.as_slice_mut();
        let mut c = [(0usize, T::zero()); 16];
        self.for_each_event(|e| {
            let (zp, zq) = (e.post.perturbation(fs), e.star.perturbation(fs));
            let x = e.weight * inv_w * (zp * zq - fs[e.a] * fs[e.b]);
            let k = e.linear_coefficients(&mut c);
            for &(i, v) in &c[..k] {
                o[i] -= x * v;
            }
        });
        check_finite(&out)?;
        Ok(out)
    }

    /// `N` applied to every row of `f` (rows are spatial nodes).
    pub fn apply_n_batch(&self, f: &Array2<T>) -> Result<Array2<T>> {
        let dim = self.dim();
        if f.ncols() != dim {
            return Err(Error::DimensionMismatch(format!("rows of length {} for dimension {dim}", f.ncols())));
        }
        let nx = f.nrows();
        let ft = f.t().as_standard_layout().to_owned();
        let fs = ft.as_slice().unwrap();
        let mut out = vec![T::zero(); dim * nx];
        let inv_w = T::one() / self.grid.weight();
        let mut c = [(0usize, T::zero()); 16];
        let mut x = vec![T::zero(); nx];
        self.for_each_event(|e| {
            // x = Z' Z*' - f_a f_b for every node
            let fa = &fs[e.a * nx..(e.a + 1) * nx];
            let fb = &fs[e.b * nx..(e.b + 1) * nx];
            for k in 0..nx {
                let (mut zp, mut zs) = (T::zero(), T::zero());
                for s in 0..7 {
                    zp += e.post.alpha[s] * fs[e.post.idx[s] * nx + k];
                    zs += e.star.alpha[s] * fs[e.star.idx[s] * nx + k];
                }
                x[k] = e.weight * inv_w * (zp * zs - fa[k] * fb[k]);
            }
            let kk = e.linear_coefficients(&mut c);
            for &(i, v) in &c[..kk] {
                let row = &mut out[i * nx..(i + 1) * nx];
                for k in 0..nx {
                    row[k] -= x[k] * v;
                }
            }
        });
        let out = Array2::from_shape_vec((dim, nx), out).unwrap().reversed_axes();
        let out = out.as_standard_layout().to_owned();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("nonlinear collision term is not finite".into()));
        }
        Ok(out)
    }

    /// Matrix-free linearized operator `L f`.
    pub fn apply_linear(&self, f: &SpeciesField<T>) -> Result<SpeciesField<T>> {
        self.check_field(f)?;
        let fs = f.as_slice();
        let inv_w = T::one() / self.grid.weight();
        let mut out = SpeciesField::zeros(f.n_species(), f.n_nodes());
        let o = out.as_slice_mut();
        let mut c = [(0usize, T::zero()); 16];
        self.for_each_event(|e| {
            let k = e.linear_coefficients(&mut c);
            let mut s = T::zero();
            for &(i, v) in &c[..k] {
                s += v * fs[i];
            }
            let x = e.weight * inv_w * s;
            for &(i, v) in &c[..k] {
                o[i] -= x * v;
            }
        });
        check_finite(&out)?;
        Ok(out)
    }

    /// Dense `L`, assembled as `-(1/w) sum_t W_t c_t c_t^T`.
    pub fn assemble_linear(&self) -> Array2<T> {
        let dim = self.dim();
        let mut m = vec![T::zero(); dim * dim];
        let inv_w = T::one() / self.grid.weight();
        let mut c = [(0usize, T::zero()); 16];
        self.for_each_event(|e| {
            let k = e.linear_coefficients(&mut c);
            let s = e.weight * inv_w;
            for p in 0..k {
                let (ip, vp) = c[p];
                let row = &mut m[ip * dim..(ip + 1) * dim];
                let x = s * vp;
                for &(iq, vq) in &c[..k] {
                    row[iq] -= x * vq;
                }
            }
        });
        Array2::from_shape_vec((dim, dim), m).unwrap()
    }

    /// Number of events actually used.
    pub fn n_events(&self) -> usize {
        let mut k = 0;
        self.for_each_event(|_| k += 1);
        k
    }

    /// Loss frequency of the events in use: the diagonal loss part of `L`.
    /// Without dropped events it equals [`super::collision_frequency`].
    pub fn collision_frequency(&self) -> SpeciesField<T> {
        let mut out = SpeciesField::zeros(self.params.n_species(), self.grid.len());
        let inv_w = T::one() / self.grid.weight();
        let o = out.as_slice_mut();
        self.for_each_event(|e| {
            o[e.a] += e.weight * inv_w * e.amp_b * e.amp_b;
            o[e.b] += e.weight * inv_w * e.amp_a * e.amp_a;
        });
        out
    }

    /// Flat amplitudes `(nM)^{1/2}`.
    pub fn amplitudes(&self) -> Array1<T> {
        Array1::from(self.amp.clone())
    }
}

fn lex_positive(q: [i64; 3]) -> bool {
    q[0] > 0 || (q[0] == 0 && (q[1] > 0 || (q[1] == 0 && q[2] > 0)))
}

fn check_finite<T: Real>(f: &SpeciesField<T>) -> Result<()> {
    if f.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical("collision operator produced non-finite values".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{default_mixture, invariant_defect, random_positive_field, shifted_maxwellian};

    fn small() -> CollisionTensor<f64> {
        let p = MixtureParams::from_spec(&default_mixture()).unwrap();
        let g = VelocityGrid::for_operator(&p, 8).unwrap();
        CollisionTensor::new(&p, &g, &CollisionConfig::default()).unwrap()
    }

    #[test]
    fn rejects_bad_config() {
        assert!(CollisionConfig { angular_points: 7, ..Default::default() }.validate().is_err());
        assert!(CollisionConfig { pair_stride: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn every_event_conserves() {
        let t = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_positive_field(t.params(), t.grid(), &mut rng, 0.3, true);
        let g = random_positive_field(t.params(), t.grid(), &mut rng, 0.3, true);
        // species masses hold for any pair, the rest only for the symmetrized form
        let sym = |t: &CollisionTensor<f64>| {
            let mut q = t.apply_q(&f, &g).unwrap();
            q.axpy(1.0, &t.apply_q(&g, &f).unwrap());
            q
        };
        let d = invariant_defect(&sym(&t), t.params(), t.grid()).unwrap();
        assert!(d < 1e-12, "{d}");
        let n = t.subsample(t.n_events() / 10, 1).unwrap();
        let d = invariant_defect(&sym(&n), t.params(), t.grid()).unwrap();
        assert!(d < 1e-12, "{d}");
        let q = t.apply_q(&f, &f).unwrap();
        assert!(invariant_defect(&q, t.params(), t.grid()).unwrap() < 1e-12);
    }

    #[test]
    fn entropy_production() {
        let t = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let f = random_positive_field(t.params(), t.grid(), &mut rng, 0.5, true);
            assert!(t.entropy_production(&f).unwrap() < 0.0);
        }
        let m = shifted_maxwellian(t.params(), t.grid(), [0.1, 0.0, -0.05], 1.05);
        let scale = t.entropy_production(&random_positive_field(t.params(), t.grid(), &mut rng, 0.5, true)).unwrap().abs();
        assert!(t.entropy_production(&m).unwrap().abs() < 1e-8 * scale);
    }

    #[test]
    fn assembled_matrix_matches_matrix_free() {
        let t = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = SpeciesField::from_fn(2, t.grid().len(), |_| rng.gen_range(-1.0..1.0));
        let direct = t.apply_linear(&f).unwrap();
        let m = t.assemble_linear();
        let dense = m.dot(&Array1::from(f.as_slice().to_vec()));
        let scale = dense.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for (a, b) in direct.as_slice().iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn subsample_is_seeded() {
        let t = small();
        let a = t.subsample(t.n_events() / 4, 11).unwrap();
        let b = t.subsample(t.n_events() / 4, 11).unwrap();
        let c = t.subsample(t.n_events() / 4, 12).unwrap();
        assert!(a.is_subsampled() && a.n_events() < t.n_events());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_positive_field(t.params(), t.grid(), &mut rng, 0.2, true);
        let na = a.apply_n(&f).unwrap();
        assert_eq!(na.as_slice(), b.apply_n(&f).unwrap().as_slice());
        assert_ne!(na.as_slice(), c.apply_n(&f).unwrap().as_slice());
    }
}
