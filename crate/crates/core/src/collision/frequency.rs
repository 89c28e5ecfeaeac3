use crate::collision::kinematics::dot3;
use crate::collision::{AngularQuadrature, CollisionConfig};
use crate::error::{Error, Result};
use crate::mixture::{maxwellian, MixtureParams, SpeciesField, VelocityGrid};
use crate::scalar::Real;

/// `int_{S^2} |g . omega| d omega` under the configured angular rule.
pub fn angular_kernel<T: Real>(g: [T; 3], config: &CollisionConfig) -> Result<T> {
    let norm = dot3(g, g).sqrt();
    if config.normalize_kernel {
        return Ok(T::c(2.0 * std::f64::consts::PI) * norm);
    }
    let q = AngularQuadrature::<T>::lebedev(config.angular_points)?;
    Ok(q.integrate(|w| dot3(g, w).abs()))
}

/// `nu_i(v_a) = sum_j n_j beta_ij sum_b w_b M_j(v_b) int |(v_a - v_b) . omega| d omega`
/// with the same partner set as the collision tensor.
pub fn collision_frequency<T: Real>(
    params: &MixtureParams<T>,
    grid: &VelocityGrid<T>,
    config: &CollisionConfig,
) -> Result<SpeciesField<T>> {
    config.validate()?;
    let n = grid.n_per_axis();
    let s = config.pair_stride;
    let ns = params.n_species();
    let nv = grid.len();
    let wb = grid.weight() * T::c((s * s * s) as f64);
    let q = AngularQuadrature::<T>::lebedev(config.angular_points)?;
    let kernel = |g: [T; 3]| -> T {
        if config.normalize_kernel {
            T::c(2.0 * std::f64::consts::PI) * dot3(g, g).sqrt()
        } else {
            q.integrate(|w| dot3(g, w).abs())
        }
    };
    let maxw: Vec<Vec<T>> = (0..ns)
        .map(|j| grid.nodes().iter().map(|&v| maxwellian(params.mass(j), v)).collect())
        .collect();
    let mut out = SpeciesField::zeros(ns, nv);
    for a in 0..nv {
        let ka = grid.triple(a);
        let va = grid.node(a);
        let mut acc = vec![T::zero(); ns];
        for bx in (ka[0] % s..n).step_by(s) {
            for by in (ka[1] % s..n).step_by(s) {
                for bz in (ka[2] % s..n).step_by(s) {
                    let b = grid.flat(bx, by, bz);
                    if b == a {
                        continue;
                    }
                    let vb = grid.node(b);
                    let k = kernel([va[0] - vb[0], va[1] - vb[1], va[2] - vb[2]]);
                    for (j, acc_j) in acc.iter_mut().enumerate() {
                        *acc_j += maxw[j][b] * k;
                    }
                }
            }
        }
        for i in 0..ns {
            let mut nu = T::zero();
            for (j, &acc_j) in acc.iter().enumerate() {
                nu += params.density(j) * params.beta(i, j) * acc_j;
            }
            out.values[[i, a]] = nu * wb;
        }
    }
    Ok(out)
}

/// Collision frequency of species `i` at an arbitrary velocity, with every
/// grid node as a partner.
pub fn collision_frequency_at<T: Real>(
    params: &MixtureParams<T>,
    grid: &VelocityGrid<T>,
    config: &CollisionConfig,
    species: usize,
    v: [T; 3],
) -> Result<T> {
    if species >= params.n_species() {
        return Err(Error::DimensionMismatch(format!("species {species} out of range")));
    }
    let mut nu = T::zero();
    for j in 0..params.n_species() {
        let mut acc = T::zero();
        for &vb in grid.nodes() {
            let k = angular_kernel([v[0] - vb[0], v[1] - vb[1], v[2] - vb[2]], config)?;
            acc += maxwellian(params.mass(j), vb) * k;
        }
        nu += params.density(j) * params.beta(species, j) * acc;
    }
    Ok(nu * grid.weight())
}

/// Tightest `(nu_0, nu_bar_0)` with `nu_0 (1+|v|) <= nu_i(v) <= nu_bar_0 (1+|v|)` on the grid.
pub fn growth_bounds<T: Real>(nu: &SpeciesField<T>, grid: &VelocityGrid<T>) -> (T, T) {
    let mut lo = T::infinity();
    let mut hi = T::zero();
    for row in nu.values.rows() {
        for (a, &x) in row.iter().enumerate() {
            let r = x / (T::one() + grid.speed(a));
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn value_at_origin() {
        // nu(0) = 2 pi (2 pi)^{-3/2} int e^{-|v|^2/2} |v| dv = 4 sqrt(2 pi)
        let p = MixtureParams::<f64>::unit();
        let cfg = CollisionConfig::default();
        let want = 4.0 * (2.0 * PI).sqrt();
        let err = |n| {
            let g = VelocityGrid::for_mixture(&p, n).unwrap();
            (collision_frequency_at(&p, &g, &cfg, 0, [0.0; 3]).unwrap() - want).abs() / want
        };
        // |v| has a kink at the origin, so the rule is only second order
        let (coarse, fine) = (err(20), err(30));
        assert!(coarse < 2e-3 && fine < 0.6 * coarse, "{coarse} {fine}");
    }

    #[test]
    fn kernel_normalization() {
        let cfg = CollisionConfig { normalize_kernel: false, ..Default::default() };
        let k = angular_kernel([0.0, 0.0, 2.0], &cfg).unwrap();
        // the 26-point rule underestimates the axis direction
        assert!(k < 4.0 * PI && k > 0.85 * 4.0 * PI);
        let k = angular_kernel([0.0, 0.0, 2.0], &CollisionConfig::default()).unwrap();
        assert!((k - 4.0 * PI).abs() < 1e-12);
    }
}
