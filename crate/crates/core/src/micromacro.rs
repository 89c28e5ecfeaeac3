//! Micro-macro split and the closed-form identities of the fluid part.
//!
//! A "gradient state" is a [`FluidState`] holding `d/dx` of the fluid
//! coordinates; the closed forms below treat it as plain numbers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mixture::{ell_coefficients, FluidState, MacroBasis, MixtureParams, SpeciesField, VelocityGrid};
use crate::scalar::Real;

/// `f = f0 + f1` with the fluid coordinates of `f0`.
#[derive(Clone, Debug)]
pub struct Decomposition<T> {
    pub f0: SpeciesField<T>,
    pub f1: SpeciesField<T>,
    pub fluid: FluidState<T>,
}

pub fn decompose<T: Real>(f: &SpeciesField<T>, basis: &MacroBasis<T>) -> Result<Decomposition<T>> {
    let (fluid, f1) = basis.project_p0(f)?;
    let mut f0 = f.clone();
    f0.axpy(-T::one(), &f1);
    Ok(Decomposition { f0, f1, fluid })
}

fn check_species<T: Real>(s: &FluidState<T>, params: &MixtureParams<T>) -> Result<()> {
    if s.rho.len() != params.n_species() {
        return Err(Error::DimensionMismatch(format!(
            "fluid state with {} species for a {}-species mixture",
            s.rho.len(),
            params.n_species()
        )));
    }
    Ok(())
}

/// `sum_i (1/m_i) (r_i + 2 sqrt(n_i) / sqrt(6 sum n) e)^2`
fn species_squares<T: Real>(g: &FluidState<T>, params: &MixtureParams<T>) -> T {
    let c = T::c(2.0) / (T::c(6.0) * params.sum_n()).sqrt();
    (0..params.n_species())
        .map(|i| {
            let y = g.rho[i] + c * params.density(i).sqrt() * g.e;
            y * y / params.mass(i)
        })
        .sum()
}

/// `||v_1 d_x f0||^2` in closed form.
pub fn norm_v1_f0_sq<T: Real>(grad: &FluidState<T>, params: &MixtureParams<T>) -> Result<T> {
    check_species(grad, params)?;
    let sn = params.sum_n();
    let q = grad.q;
    Ok(species_squares(grad, params)
        + T::c(5.0 / 3.0) / sn * params.sum_n_over_m() * grad.e * grad.e
        + sn / params.sum_nm() * (T::c(3.0) * q[0] * q[0] + q[1] * q[1] + q[2] * q[2]))
}

/// `||P0(v_1 d_x f0)||^2 = (d_x l)^2 + (5/3) (sum n / sum nm) (d_x q^1)^2`.
pub fn norm_p0_v1_f0_sq<T: Real>(grad: &FluidState<T>, params: &MixtureParams<T>) -> Result<T> {
    check_species(grad, params)?;
    let l = grad.ell(params);
    Ok(l * l + T::c(5.0 / 3.0) * params.sum_n() / params.sum_nm() * grad.q[0] * grad.q[0])
}

/// `||P1(v_1 d_x f0)||^2` as the difference of the two closed forms.
pub fn norm_p1_v1_f0_sq<T: Real>(grad: &FluidState<T>, params: &MixtureParams<T>) -> Result<T> {
    Ok(norm_v1_f0_sq(grad, params)? - norm_p0_v1_f0_sq(grad, params)?)
}

/// Largest admissible splitting parameter,
/// `min(1, sum n / (3 sum nm + 10 sum n))`.
pub fn theta0<T: Real>(params: &MixtureParams<T>) -> T {
    let sn = params.sum_n();
    (sn / (T::c(3.0) * params.sum_nm() + T::c(10.0) * sn)).min(T::one())
}

/// Pointwise lower bound: returns `(||P1(v_1 d_x f0)||^2, bound)`.
pub fn pointwise_lower_bound<T: Real>(grad: &FluidState<T>, theta: T, params: &MixtureParams<T>) -> Result<(T, T)> {
    check_species(grad, params)?;
    if !(theta > T::zero() && theta < theta0(params)) {
        return Err(Error::InvalidParams(format!("theta {theta} outside (0, theta0)")));
    }
    let lhs = norm_p1_v1_f0_sq(grad, params)?;
    let sn = params.sum_n();
    let q = grad.q;
    let l = grad.ell(params);
    let rhs = theta * species_squares(grad, params)
        + T::c(5.0 / 3.0) / sn * params.sum_n_over_m() * grad.e * grad.e
        + sn / params.sum_nm() * (T::c(4.0 / 3.0) * q[0] * q[0] + q[1] * q[1] + q[2] * q[2])
        - theta * l * l;
    Ok((lhs, rhs))
}

/// The positive quadratic form `G` on fluid coordinates.
pub fn quadratic_form_g<T: Real>(s: &FluidState<T>, theta: T, params: &MixtureParams<T>) -> Result<T> {
    check_species(s, params)?;
    if !(theta > T::zero() && theta <= T::one()) {
        return Err(Error::InvalidParams(format!("theta {theta} outside (0, 1]")));
    }
    let sn = params.sum_n();
    let q = s.q;
    Ok(theta * species_squares(s, params)
        + T::c(5.0 / 3.0) / sn * params.sum_n_over_m() * s.e * s.e
        + sn / params.sum_nm() * (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]))
}

/// Symmetric matrix of `G` in the coordinates `(rho, q, e)`.
pub fn g_matrix<T: Real>(theta: T, params: &MixtureParams<T>) -> Result<Array2<f64>> {
    let k = params.n_invariants();
    let mut m = Array2::zeros((k, k));
    // polarization on unit vectors
    let eval = |c: &[f64]| -> Result<f64> {
        let c: Vec<T> = c.iter().map(|&x| T::c(x)).collect();
        Ok(quadratic_form_g(&FluidState::from_coords(&c)?, theta, params)?.f64())
    };
    let mut unit = vec![0.0; k];
    let mut diag = vec![0.0; k];
    for a in 0..k {
        unit[a] = 1.0;
        diag[a] = eval(&unit)?;
        unit[a] = 0.0;
    }
    for a in 0..k {
        m[[a, a]] = diag[a];
        for b in a + 1..k {
            unit[a] = 1.0;
            unit[b] = 1.0;
            let v = 0.5 * (eval(&unit)? - diag[a] - diag[b]);
            unit[a] = 0.0;
            unit[b] = 0.0;
            m[[a, b]] = v;
            m[[b, a]] = v;
        }
    }
    Ok(m)
}

/// Smallest eigenvalue of `G`: the sharp `C_G` with `G(s) >= C_G |s|^2`.
pub fn min_eig_g<T: Real>(theta: T, params: &MixtureParams<T>) -> Result<f64> {
    Ok(linalg::min_eigenvalue(&g_matrix(theta, params)?))
}

/// Flux matrix of the fluid system, `A[k][l] = <v_1 b_l, b_k>`, in closed
/// form for an orthonormal basis.
pub fn flux_matrix_exact<T: Real>(params: &MixtureParams<T>) -> Array2<f64> {
    let ns = params.n_species();
    let k = ns + 4;
    let snm = params.sum_nm().f64().sqrt();
    let sn = params.sum_n().f64();
    let mut a = Array2::zeros((k, k));
    let u = ell_coefficients(params);
    for i in 0..ns {
        let c = params.density(i).f64().sqrt() / snm;
        a[[i, ns]] = c;
        a[[ns, i]] = c;
    }
    // momentum row is the gradient of l
    a[[ns, ns + 3]] = u[ns + 3].f64();
    a[[ns + 3, ns]] = 2.0 * sn.sqrt() / (6.0 * snm * snm).sqrt();
    a
}

/// Flux matrix by quadrature: coordinates of `P0(v_1 b_l)`.
pub fn flux_matrix<T: Real>(basis: &MacroBasis<T>, grid: &VelocityGrid<T>) -> Result<Array2<f64>> {
    let k = basis.len();
    let mut a = Array2::zeros((k, k));
    let ns = basis.n_species();
    for l in 0..k {
        let bl = basis.vector(l);
        let v1b = times_v1(&bl, grid, ns);
        let c = basis.coords(&v1b)?;
        for (r, x) in c.iter().enumerate() {
            a[[r, l]] = x.f64();
        }
    }
    Ok(a)
}

/// Wave speeds of the fluid system (eigenvalues of the flux matrix).
pub fn wave_speeds<T: Real>(params: &MixtureParams<T>) -> Vec<f64> {
    linalg::sym_eigen(&flux_matrix_exact(params)).0
}

pub(crate) fn times_v1<T: Real>(f: &SpeciesField<T>, grid: &VelocityGrid<T>, ns: usize) -> SpeciesField<T> {
    SpeciesField::from_fn(ns, grid.len(), |(i, a)| f.values[[i, a]] * grid.node(a)[0])
}

/// Finite-dimensional constants of the fluid part, from quadrature.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FluidConstants {
    /// `||P0(v_1 f)||^2 <= c_chi ||f||^2`.
    pub c_chi: f64,
    /// `||v_1 g|| <= c_ker ||g||` and `||(1+|v|)^{1/2} g|| <= c_ker ||g||` on `P0`.
    pub c_ker: f64,
    /// `|<f1, v_1 psi_l>|^2 <= k_chi ||f1||^2` for `f1` orthogonal to `P0`,
    /// where `l = <f, psi_l>`.
    pub k_chi: f64,
}

/// Largest generalized eigenvalue of `(w, gram)`.
fn max_generalized(w: &Array2<f64>, gram: &Array2<f64>) -> Result<f64> {
    let (vals, vecs) = linalg::sym_eigen(gram);
    if vals[0] <= 0.0 {
        return Err(Error::Numerical("basis Gram matrix is not positive".into()));
    }
    let k = vals.len();
    // gram^{-1/2} w gram^{-1/2}
    let s = Array2::from_shape_fn((k, k), |(i, j)| vecs[[i, j]] / vals[j].sqrt());
    let m = s.t().dot(w).dot(&s);
    Ok(linalg::max_eigenvalue(&m))
}

pub fn fluid_constants<T: Real>(basis: &MacroBasis<T>, grid: &VelocityGrid<T>, params: &MixtureParams<T>) -> Result<FluidConstants> {
    let k = basis.len();
    let ns = basis.n_species();
    let w = grid.weight().f64();
    let vecs: Vec<SpeciesField<T>> = (0..k).map(|j| basis.vector(j)).collect();
    let v1: Vec<SpeciesField<T>> = vecs.iter().map(|b| times_v1(b, grid, ns)).collect();
    let growth = grid.growth_weight();
    let ip = |a: &SpeciesField<T>, b: &SpeciesField<T>, wt: Option<&[T]>| -> f64 {
        let nv = grid.len();
        let mut s = 0.0;
        for i in 0..ns {
            for x in 0..nv {
                let g = wt.map_or(1.0, |g| g[x].f64());
                s += a.values[[i, x]].f64() * b.values[[i, x]].f64() * g;
            }
        }
        s * w
    };
    let gram = basis.gram().clone();
    let gv = Array2::from_shape_fn((k, k), |(a, b)| ip(&v1[a], &v1[b], None));
    let gg = Array2::from_shape_fn((k, k), |(a, b)| ip(&vecs[a], &vecs[b], Some(&growth)));
    // ||P0(v1 f)||^2 = sum_k <f, v1 b_k>^2 (orthonormal) -> largest eigenvalue of gv
    let c_chi = linalg::max_eigenvalue(&gv);
    let c_ker = max_generalized(&gv, &gram)?.max(max_generalized(&gg, &gram)?).sqrt();
    // psi_l = sum u_k b_k; bracket functional is <f1, P1(v1 psi_l)>
    let u = ell_coefficients(params);
    let mut psi = SpeciesField::zeros(ns, grid.len());
    for (j, &uj) in u.iter().enumerate() {
        psi.axpy(uj, &vecs[j]);
    }
    let p1 = basis.p1(&times_v1(&psi, grid, ns))?;
    let k_chi = ip(&p1, &p1, None);
    Ok(FluidConstants { c_chi, c_ker, k_chi })
}

/// Default splitting parameter `min(theta0, 1 / (8 lambda2)) / 2`.
pub fn default_theta<T: Real>(params: &MixtureParams<T>, lambda2: Option<f64>) -> f64 {
    let t0 = theta0(params).f64();
    let cap = match lambda2 {
        Some(l) if l > 0.0 => 1.0 / (8.0 * l),
        _ => f64::INFINITY,
    };
    0.5 * t0.min(cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::build_basis;
    use ndarray::array;

    fn two() -> MixtureParams<f64> {
        MixtureParams::new(vec![1.0, 1.5], vec![0.7, 1.3], array![[1.0, 0.8], [0.8, 1.2]]).unwrap()
    }

    #[test]
    fn theta0_single_species() {
        assert_eq!(theta0(&MixtureParams::<f64>::unit()), 1.0 / 13.0);
        let p = two();
        let q = MixtureParams::new(vec![2.0, 3.0], vec![0.7, 1.3], array![[1.0, 0.8], [0.8, 1.2]]).unwrap();
        assert!(theta0(&q) < theta0(&p));
    }

    #[test]
    fn energy_only_gradient() {
        let p = two();
        let g = FluidState { rho: vec![0.0, 0.0], q: [0.0; 3], e: 1.0 };
        let want = 7.0 / 3.0 * p.sum_n_over_m() / p.sum_n();
        assert!((norm_v1_f0_sq(&g, &p).unwrap() - want).abs() < 1e-14);
        let g = FluidState { rho: vec![0.0, 0.0], q: [0.0, 1.0, 0.0], e: 0.0 };
        assert_eq!(norm_p0_v1_f0_sq(&g, &p).unwrap(), 0.0);
    }

    #[test]
    fn closed_forms_match_quadrature() {
        let p = two();
        let grid = VelocityGrid::for_mixture(&p, 24).unwrap();
        let b = build_basis(&p, &grid).unwrap();
        let g = FluidState { rho: vec![0.3, -0.7], q: [0.4, -0.2, 0.9], e: 0.5 };
        let f0 = b.reconstruct_fluid(&g).unwrap();
        let v1 = times_v1(&f0, &grid, 2);
        let direct = crate::mixture::inner_product(&v1, &v1, &grid).unwrap();
        let closed = norm_v1_f0_sq(&g, &p).unwrap();
        assert!((direct - closed).abs() < 1e-6 * closed, "{direct} {closed}");
        let p0 = b.p0(&v1).unwrap();
        let d0 = crate::mixture::inner_product(&p0, &p0, &grid).unwrap();
        let c0 = norm_p0_v1_f0_sq(&g, &p).unwrap();
        assert!((d0 - c0).abs() < 1e-6 * c0, "{d0} {c0}");
        let a = flux_matrix(&b, &grid).unwrap();
        let e = flux_matrix_exact(&p);
        assert!((&a - &e).iter().fold(0.0f64, |m, x| m.max(x.abs())) < 1e-6);
    }

    #[test]
    fn g_is_positive() {
        let p = two();
        let t = theta0(&p) / 2.0;
        assert!(min_eig_g(t, &p).unwrap() > 0.0);
        let z = FluidState::zero(2);
        assert_eq!(quadratic_form_g(&z, t, &p).unwrap(), 0.0);
    }
}
