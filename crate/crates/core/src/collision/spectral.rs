//! Kernel and spectral-gap analysis of the linearized operator.
//!
//! The gap is the smallest nonzero eigenvalue of the pencil
//! `-L h = lambda nu h`, i.e. of `A = nu^{-1/2} (-L) nu^{-1/2}`. Since
//! `A = I - nu^{-1/2} K nu^{-1/2}` with `K` smoothing, the wanted end of the
//! spectrum is well separated and a restarted block Krylov method converges
//! in a few hundred dense products.

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::collision::LinearizedOperator;
use crate::error::{Error, Result};
use crate::linalg;
use crate::mixture::{MacroBasis, VelocityGrid};
use crate::scalar::Real;

/// Settings of the eigensolver.
#[derive(Clone, Debug)]
pub struct SpectralConfig {
    /// Extra vectors beyond the `I + 4` kernel vectors.
    pub extra: usize,
    /// Krylov blocks per restart.
    pub depth: usize,
    pub max_restarts: usize,
    /// Residual tolerance for the wanted Ritz pairs.
    pub tol: f64,
    pub seed: u64,
    /// Kernel threshold as a fraction of the first gap estimate.
    pub threshold_fraction: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { extra: 6, depth: 12, max_restarts: 20, tol: 1e-9, seed: 7, threshold_fraction: 0.01 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralReport {
    /// Smallest eigenvalues of the `nu`-weighted pencil, ascending.
    pub eigenvalues: Vec<f64>,
    pub kernel_dim: usize,
    pub threshold: f64,
    /// Spectral gap estimate.
    pub gap: f64,
    /// Largest principal angle (radians) between the numerical kernel and
    /// the analytic invariant span.
    pub max_principal_angle: f64,
    /// `max |<L h, h>| / <nu h, h>` over the numerical kernel vectors.
    pub kernel_rayleigh: f64,
    pub nu0: f64,
    pub nu0_bar: f64,
    pub max_residual: f64,
    pub products: usize,
}

fn gaussian_block<T: Real>(n: usize, p: usize, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, p), |_| {
        let x: f64 = StandardNormal.sample(&mut rng);
        T::c(x)
    })
}

/// Orthonormalizes the columns of `x` against `basis` (columns, orthonormal)
/// and among themselves; drops columns that become negligible.
fn orthonormalize<T: Real>(x: &mut Array2<T>, basis: Option<&Array2<T>>) -> Array2<T> {
    for _ in 0..2 {
        if let Some(q) = basis {
            let c = q.t().dot(&*x);
            *x -= &q.dot(&c);
        }
    }
    let mut keep: Vec<Array1<T>> = Vec::new();
    for j in 0..x.ncols() {
        let mut v = x.column(j).to_owned();
        let n0 = v.dot(&v).sqrt();
        for _ in 0..2 {
            for u in &keep {
                let c = u.dot(&v);
                v.scaled_add(-c, u);
            }
        }
        let n1 = v.dot(&v).sqrt();
        if n1 > T::c(1e-10) * n0 && n1 > T::zero() {
            v /= n1;
            keep.push(v);
        }
    }
    let mut out = Array2::zeros((x.nrows(), keep.len()));
    for (j, v) in keep.into_iter().enumerate() {
        out.column_mut(j).assign(&v);
    }
    out
}

/// Largest eigenpairs of a symmetric operator given by block products.
/// Returns values (descending), vectors (columns) and the product count.
pub fn block_krylov_top<T: Real>(
    apply: &dyn Fn(&Array2<T>) -> Array2<T>,
    n: usize,
    want: usize,
    cfg: &SpectralConfig,
) -> (Vec<f64>, Array2<T>, Vec<f64>, usize) {
    let p = (want + cfg.extra).min(n);
    let mut start = gaussian_block::<T>(n, p, cfg.seed);
    let mut products = 0usize;
    let mut result = (Vec::new(), Array2::zeros((n, 0)), Vec::new());
    for _restart in 0..cfg.max_restarts {
        let mut q = orthonormalize(&mut start, None);
        let mut aq = apply(&q);
        products += q.ncols();
        for _ in 0..cfg.depth {
            if q.ncols() >= n {
                break;
            }
            let last = aq.slice(s![.., aq.ncols() - p.min(aq.ncols())..]).to_owned();
            let mut next = last;
            let nq = orthonormalize(&mut next, Some(&q));
            if nq.ncols() == 0 {
                break;
            }
            let anq = apply(&nq);
            products += nq.ncols();
            q = ndarray::concatenate(Axis(1), &[q.view(), nq.view()]).unwrap();
            aq = ndarray::concatenate(Axis(1), &[aq.view(), anq.view()]).unwrap();
        }
        let h = q.t().dot(&aq).mapv(|x| x.f64());
        let (vals, vecs) = linalg::sym_eigen(&h);
        let m = vals.len();
        let take = p.min(m);
        let y = Array2::from_shape_fn((m, take), |(i, j)| T::c(vecs[[i, m - 1 - j]]));
        let ritz = q.dot(&y);
        let aritz = aq.dot(&y);
        let values: Vec<f64> = (0..take).map(|j| vals[m - 1 - j]).collect();
        let mut resid = Vec::with_capacity(take);
        for j in 0..take {
            let r = &aritz.column(j) - &(&ritz.column(j) * T::c(values[j]));
            resid.push(r.dot(&r).sqrt().f64());
        }
        let done = resid.iter().take(want).all(|&r| r < cfg.tol);
        start = ritz.clone();
        result = (values, ritz, resid);
        if done {
            break;
        }
    }
    (result.0, result.1, result.2, products)
}

/// Finds the numerical kernel and the spectral gap of `L`.
pub fn estimate_spectral_gap<T: Real>(
    op: &LinearizedOperator<T>,
    basis: &MacroBasis<T>,
    grid: &VelocityGrid<T>,
    cfg: &SpectralConfig,
) -> Result<SpectralReport> {
    let n = op.dim();
    if basis.dim() != n {
        return Err(Error::DimensionMismatch(format!("basis of size {} for operator of size {n}", basis.dim())));
    }
    let nu = op.nu();
    if nu.iter().any(|&x| !(x > T::zero())) {
        return Err(Error::Numerical("collision frequency must be positive".into()));
    }
    let isq: Array1<T> = nu.mapv(|x| T::one() / x.sqrt());
    let isq_col = isq.clone().insert_axis(Axis(1));
    // Ktilde X = X + nu^{-1/2} L nu^{-1/2} X
    let apply = |x: &Array2<T>| -> Array2<T> {
        let y = x * &isq_col;
        let ly = op.matrix().dot(&y);
        x + &(&ly * &isq_col)
    };
    let k = basis.len();
    let (vals, vecs, resid, products) = block_krylov_top(&apply, n, k + 2, cfg);
    let eig: Vec<f64> = vals.iter().map(|v| 1.0 - v).collect();
    if eig.len() <= k {
        return Err(Error::Numerical("eigensolver returned too few values".into()));
    }
    let first_gap = eig[k];
    let threshold = cfg.threshold_fraction * first_gap;
    let kernel_dim = eig.iter().filter(|&&x| x.abs() < threshold).count();
    if kernel_dim != k {
        return Err(Error::KernelDimension { expected: k, found: kernel_dim });
    }
    let gap = eig.iter().copied().filter(|&x| x >= threshold).fold(f64::INFINITY, f64::min);

    // kernel vectors h = nu^{-1/2} x
    let kx = vecs.slice(s![.., ..k]).to_owned() * &isq_col;
    let lh = op.matrix().dot(&kx);
    let mut kernel_rayleigh = 0.0f64;
    for j in 0..k {
        let h = kx.column(j);
        let num = h.dot(&lh.column(j)).f64().abs();
        let den = h.iter().zip(nu.iter()).map(|(&x, &w)| (w * x * x).f64()).sum::<f64>();
        kernel_rayleigh = kernel_rayleigh.max(num / den);
    }
    let max_principal_angle = principal_angle(&kx, &basis.matrix().t().to_owned());
    let nu_field = crate::mixture::SpeciesField::from_flat(op.n_species(), nu.clone())?;
    let (nu0, nu0_bar) = super::frequency::growth_bounds(&nu_field, grid);
    Ok(SpectralReport {
        eigenvalues: eig,
        kernel_dim,
        threshold,
        gap,
        max_principal_angle,
        kernel_rayleigh,
        nu0: nu0.f64(),
        nu0_bar: nu0_bar.f64(),
        max_residual: resid.iter().take(k + 1).fold(0.0, |a: f64, &b| a.max(b)),
        products,
    })
}

/// Largest principal angle between the column spans of `x` and `y`.
pub fn principal_angle<T: Real>(x: &Array2<T>, y: &Array2<T>) -> f64 {
    let qx = orthonormalize(&mut x.mapv(|v| v.f64()), None);
    let qy = orthonormalize(&mut y.mapv(|v| v.f64()), None);
    let r = &qx - &qy.dot(&qy.t().dot(&qx));
    let rtr = r.t().dot(&r);
    let lmax = linalg::max_eigenvalue(&rtr).max(0.0);
    let sin = lmax.sqrt().min(1.0);
    let dim_gap = if qx.ncols() != qy.ncols() { std::f64::consts::FRAC_PI_2 } else { 0.0 };
    sin.asin().max(dim_gap)
}

fn random_complement<T: Real>(basis: &MacroBasis<T>, samples: usize, seed: u64) -> Array2<T> {
    let mut h = gaussian_block::<T>(samples, basis.dim(), seed);
    basis.p1_batch_inplace(&mut h);
    h
}

/// Smallest `<-L h, h> / <nu h, h>` over random `h` orthogonal to the kernel.
pub fn rayleigh_gap_samples<T: Real>(op: &LinearizedOperator<T>, basis: &MacroBasis<T>, samples: usize, seed: u64) -> f64 {
    let h = random_complement(basis, samples, seed);
    let lh = op.apply_batch(&h);
    let mut best = f64::INFINITY;
    for (row, lrow) in h.rows().into_iter().zip(lh.rows()) {
        let num = -row.dot(&lrow).f64();
        let den: f64 = row.iter().zip(op.nu().iter()).map(|(&x, &w)| (w * x * x).f64()).sum();
        best = best.min(num / den);
    }
    best
}

/// Largest `<L h, h> / ||h||^2` over random vectors (should be `<= 0`).
pub fn max_rayleigh<T: Real>(op: &LinearizedOperator<T>, samples: usize, seed: u64) -> f64 {
    let h = gaussian_block::<T>(samples, op.dim(), seed);
    let lh = op.apply_batch(&h);
    h.rows()
        .into_iter()
        .zip(lh.rows())
        .map(|(r, l)| r.dot(&l).f64() / r.dot(&r).f64())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `-L x = h` on the orthogonal complement of the kernel with
/// preconditioned conjugate gradients (`nu^{-1}` preconditioner).
pub fn solve_complement<T: Real>(
    op: &LinearizedOperator<T>,
    basis: &MacroBasis<T>,
    h: &Array1<T>,
    tol: f64,
    max_iter: usize,
) -> Result<(Array1<T>, usize)> {
    let n = op.dim();
    let p1 = |v: &Array1<T>| -> Array1<T> {
        let mut m = v.clone().insert_axis(Axis(0));
        basis.p1_batch_inplace(&mut m);
        m.remove_axis(Axis(0))
    };
    let precond = |r: &Array1<T>| -> Array1<T> { p1(&(r / op.nu())) };
    let b = p1(h);
    let bnorm = b.dot(&b).sqrt().f64();
    let mut x = Array1::<T>::zeros(n);
    if bnorm == 0.0 {
        return Ok((x, 0));
    }
    let mut r = b.clone();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for it in 0..max_iter {
        let ap = -op.matrix().dot(&p);
        let ap = p1(&ap);
        let pap = p.dot(&ap);
        if !(pap > T::zero()) {
            return Err(Error::Numerical("operator is not positive on the complement".into()));
        }
        let alpha = rz / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        if r.dot(&r).sqrt().f64() < tol * bnorm {
            return Ok((p1(&x), it + 1));
        }
        z = precond(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + &(&p * beta);
    }
    Err(Error::Numerical(format!("conjugate gradients did not converge in {max_iter} iterations")))
}

/// `max ||L^{-1} h|| nu_0 gap / ||h||` over random `h` (bound holds if `<= 1`).
pub fn resolvent_ratio<T: Real>(
    op: &LinearizedOperator<T>,
    basis: &MacroBasis<T>,
    gap: f64,
    nu0: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let hs = random_complement(basis, samples, seed);
    let mut worst = 0.0f64;
    for row in hs.rows() {
        let h = row.to_owned();
        let (x, _) = solve_complement(op, basis, &h, 1e-10, 5000)?;
        let r = x.dot(&x).sqrt().f64() / h.dot(&h).sqrt().f64();
        worst = worst.max(r * nu0 * gap);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{CollisionConfig, CollisionTensor};
    use crate::mixture::{build_basis, MixtureParams};
    use crate::verify::default_mixture;

    #[test]
    fn angles_between_spans() {
        let x = Array2::from_shape_fn((5, 2), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let y = Array2::from_shape_fn((5, 2), |(i, j)| if i == j { 2.0 } else { 0.0 });
        assert!(principal_angle(&x, &y) < 1e-12);
        let z = Array2::from_shape_fn((5, 2), |(i, j)| if i == j + 2 { 1.0 } else { 0.0 });
        assert!((principal_angle(&x, &z) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn kernel_and_gap_on_a_small_grid() {
        let p = MixtureParams::<f64>::from_spec(&default_mixture()).unwrap();
        let g = VelocityGrid::for_operator(&p, 6).unwrap();
        let t = CollisionTensor::new(&p, &g, &CollisionConfig::default()).unwrap();
        let l = LinearizedOperator::assemble(&t).unwrap();
        let basis = build_basis(&p, &g).unwrap();
        let r = estimate_spectral_gap(&l, &basis, &g, &SpectralConfig::default()).unwrap();
        assert_eq!(r.kernel_dim, p.n_invariants());
        assert!(r.gap > 0.0 && r.gap < 1.0);
        assert!(r.max_principal_angle < 1e-6, "{}", r.max_principal_angle);
        assert!(r.nu0 > 0.0 && r.nu0_bar >= r.nu0);
        // the sampled Rayleigh quotient can only overestimate the gap
        assert!(rayleigh_gap_samples(&l, &basis, 20, 3) >= r.gap * (1.0 - 1e-8));
    }
}
