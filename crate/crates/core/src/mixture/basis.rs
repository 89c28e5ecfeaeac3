use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mixture::{dot, MixtureParams, SpeciesField, VelocityGrid};
use crate::scalar::Real;

/// `M(v) = (m / 2 pi)^{3/2} exp(-m |v|^2 / 2)`.
pub fn maxwellian<T: Real>(m: T, v: [T; 3]) -> T {
    log_maxwellian(m, v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).exp()
}

/// `log M` as a function of `|v|^2`.
#[inline]
pub fn log_maxwellian<T: Real>(m: T, speed_sq: T) -> T {
    T::c(1.5) * (m / (T::c(2.0) * T::c(std::f64::consts::PI))).ln() - T::c(0.5) * m * speed_sq
}

/// `log(n_i M_i(v_a))` for every species and node.
pub fn log_equilibrium<T: Real>(params: &MixtureParams<T>, grid: &VelocityGrid<T>) -> Array2<T> {
    Array2::from_shape_fn((params.n_species(), grid.len()), |(i, a)| {
        params.density(i).ln() + log_maxwellian(params.mass(i), grid.speed_sq(a))
    })
}

/// `(n_i M_i(v_a))^{1/2}`.
pub fn sqrt_equilibrium<T: Real>(params: &MixtureParams<T>, grid: &VelocityGrid<T>) -> SpeciesField<T> {
    let l = log_equilibrium(params, grid);
    SpeciesField { values: l.mapv(|x| (T::c(0.5) * x).exp()) }
}

/// Equilibrium `n_i M_i(v_a)`.
pub fn equilibrium<T: Real>(params: &MixtureParams<T>, grid: &VelocityGrid<T>) -> SpeciesField<T> {
    SpeciesField { values: log_equilibrium(params, grid).mapv(|x| x.exp()) }
}

/// Fluid coordinates of the macroscopic part: `rho_i`, `q^k`, `e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluidState<T> {
    pub rho: Vec<T>,
    pub q: [T; 3],
    pub e: T,
}

impl<T: Real> FluidState<T> {
    pub fn zero(n_species: usize) -> Self {
        Self { rho: vec![T::zero(); n_species], q: [T::zero(); 3], e: T::zero() }
    }

    /// From the ordered coordinate vector `(rho_1..rho_I, q^1, q^2, q^3, e)`.
    pub fn from_coords(c: &[T]) -> Result<Self> {
        if c.len() < 5 {
            return Err(Error::DimensionMismatch(format!("{} fluid coordinates", c.len())));
        }
        let ns = c.len() - 4;
        Ok(Self { rho: c[..ns].to_vec(), q: [c[ns], c[ns + 1], c[ns + 2]], e: c[ns + 3] })
    }

    pub fn to_coords(&self) -> Vec<T> {
        let mut c = self.rho.clone();
        c.extend_from_slice(&self.q);
        c.push(self.e);
        c
    }

    /// `l = (sum n m)^{-1/2} (sum_i sqrt(n_i) rho_i + 2 sqrt(sum n) / sqrt(6) e)`.
    pub fn ell(&self, params: &MixtureParams<T>) -> T {
        let c = ell_coefficients(params);
        self.to_coords().iter().zip(&c).map(|(&x, &w)| x * w).sum()
    }
}

/// Weights `u` with `l = u . coords`.
pub fn ell_coefficients<T: Real>(params: &MixtureParams<T>) -> Vec<T> {
    let ns = params.n_species();
    let s = T::one() / params.sum_nm().sqrt();
    let mut u = vec![T::zero(); ns + 4];
    for (i, ui) in u.iter_mut().take(ns).enumerate() {
        *ui = s * params.density(i).sqrt();
    }
    u[ns + 3] = s * T::c(2.0) * params.sum_n().sqrt() / T::c(6.0).sqrt();
    u
}

/// Orthonormal (up to quadrature error) basis `(nM)^{1/2} chi^k` of the
/// null space, in the fixed order `species, momentum x/y/z, energy`.
///
/// Projection uses the inverse of the measured Gram matrix, so `P^0` is an
/// exact projector on the grid even where the basis is only nearly
/// orthonormal.
#[derive(Clone, Debug)]
pub struct MacroBasis<T> {
    n_species: usize,
    n_nodes: usize,
    weight: T,
    /// Rows are flattened basis vectors.
    vectors: Array2<T>,
    gram: Array2<f64>,
    gram_inv: Array2<T>,
}

/// Builds `(nM)^{1/2} chi^k` on the grid.
pub fn build_basis<T: Real>(params: &MixtureParams<T>, grid: &VelocityGrid<T>) -> Result<MacroBasis<T>> {
    let ns = params.n_species();
    let nv = grid.len();
    let sq = sqrt_equilibrium(params, grid);
    let snm = params.sum_nm().sqrt();
    let sen = (T::c(6.0) * params.sum_n()).sqrt();
    let mut vectors = Array2::<T>::zeros((ns + 4, ns * nv));
    for i in 0..ns {
        let m = params.mass(i);
        let inv_sqrt_n = T::one() / params.density(i).sqrt();
        for a in 0..nv {
            let s = sq.values[[i, a]];
            let v = grid.node(a);
            let col = i * nv + a;
            vectors[[i, col]] = s * inv_sqrt_n;
            for k in 0..3 {
                vectors[[ns + k, col]] = s * m * v[k] / snm;
            }
            vectors[[ns + 3, col]] = s * (m * grid.speed_sq(a) - T::c(3.0)) / sen;
        }
    }
    MacroBasis::from_vectors(ns, nv, grid.weight(), vectors)
}

/// Gram matrix `<b_k, b_l>_I`, evaluated by quadrature.
pub fn gram<T: Real>(basis: &MacroBasis<T>) -> Array2<f64> {
    let k = basis.len();
    Array2::from_shape_fn((k, k), |(r, c)| {
        (dot(
            basis.vectors.row(r).as_slice().unwrap(),
            basis.vectors.row(c).as_slice().unwrap(),
        ) * basis.weight)
            .f64()
    })
}

impl<T: Real> MacroBasis<T> {
    pub fn from_vectors(n_species: usize, n_nodes: usize, weight: T, vectors: Array2<T>) -> Result<Self> {
        if vectors.ncols() != n_species * n_nodes {
            return Err(Error::DimensionMismatch("basis vectors have the wrong length".into()));
        }
        let mut b = Self {
            n_species,
            n_nodes,
            weight,
            vectors,
            gram: Array2::zeros((0, 0)),
            gram_inv: Array2::zeros((0, 0)),
        };
        b.gram = gram(&b);
        let inv = linalg::inverse(&b.gram)
            .map_err(|_| Error::Numerical("basis Gram matrix is singular; velocity grid too coarse".into()))?;
        b.gram_inv = inv.mapv(T::c);
        Ok(b)
    }

    /// Number of basis vectors, `I + 4`.
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn weight(&self) -> T {
        self.weight
    }

    pub fn gram(&self) -> &Array2<f64> {
        &self.gram
    }

    /// Flattened basis vectors as rows.
    pub fn matrix(&self) -> ArrayView2<'_, T> {
        self.vectors.view()
    }

    pub fn vector(&self, k: usize) -> SpeciesField<T> {
        SpeciesField::from_flat(self.n_species, self.vectors.row(k).to_owned()).unwrap()
    }

    fn check(&self, f: &SpeciesField<T>) -> Result<()> {
        f.check_shape(self.n_species, self.n_nodes)
    }

    /// Raw moments `<b_k, f>_I`.
    pub fn moments(&self, f: &SpeciesField<T>) -> Result<Vec<T>> {
        self.check(f)?;
        Ok(self.moments_flat(f.as_slice()))
    }

    pub fn moments_flat(&self, f: &[T]) -> Vec<T> {
        self.vectors
            .rows()
            .into_iter()
            .map(|r| dot(r.as_slice().unwrap(), f) * self.weight)
            .collect()
    }

    /// Coordinates of `P^0 f` in the basis.
    pub fn coords(&self, f: &SpeciesField<T>) -> Result<Vec<T>> {
        self.check(f)?;
        Ok(self.coords_flat(f.as_slice()))
    }

    pub fn coords_flat(&self, f: &[T]) -> Vec<T> {
        let m = Array1::from(self.moments_flat(f));
        self.gram_inv.dot(&m).to_vec()
    }

    /// Coordinates for every row of `f` (`rows x dim`).
    pub fn coords_batch(&self, f: &Array2<T>) -> Array2<T> {
        let m = f.dot(&self.vectors.t()) * self.weight;
        m.dot(&self.gram_inv)
    }

    /// Raw moments for every row.
    pub fn moments_batch(&self, f: &Array2<T>) -> Array2<T> {
        f.dot(&self.vectors.t()) * self.weight
    }

    pub fn reconstruct(&self, coords: &[T]) -> Result<SpeciesField<T>> {
        if coords.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates for {} basis vectors",
                coords.len(),
                self.len()
            )));
        }
        let c = Array1::from(coords.to_vec());
        SpeciesField::from_flat(self.n_species, c.dot(&self.vectors))
    }

    /// `rows x (I+4)` coordinates to `rows x dim` fields.
    pub fn reconstruct_batch(&self, coords: &Array2<T>) -> Array2<T> {
        coords.dot(&self.vectors)
    }

    pub fn reconstruct_fluid(&self, u: &FluidState<T>) -> Result<SpeciesField<T>> {
        self.reconstruct(&u.to_coords())
    }

    /// Splits `f` into fluid coordinates and the microscopic remainder.
    pub fn project_p0(&self, f: &SpeciesField<T>) -> Result<(FluidState<T>, SpeciesField<T>)> {
        let c = self.coords(f)?;
        let mut f1 = f.clone();
        for (k, &ck) in c.iter().enumerate() {
            f1.values
                .as_slice_mut()
                .unwrap()
                .iter_mut()
                .zip(self.vectors.row(k))
                .for_each(|(x, &b)| *x -= ck * b);
        }
        Ok((FluidState::from_coords(&c)?, f1))
    }

    pub fn p0(&self, f: &SpeciesField<T>) -> Result<SpeciesField<T>> {
        self.reconstruct(&self.coords(f)?)
    }

    pub fn p1(&self, f: &SpeciesField<T>) -> Result<SpeciesField<T>> {
        Ok(self.project_p0(f)?.1)
    }

    /// `P^1` applied to every row in place.
    pub fn p1_batch_inplace(&self, f: &mut Array2<T>) {
        let c = self.coords_batch(f);
        *f -= &c.dot(&self.vectors);
    }

    /// `max_k |<b_k, f>| / ||f||` for a remainder that should lie in the
    /// orthogonal complement.
    pub fn orthogonality_defect(&self, f: &SpeciesField<T>) -> Result<f64> {
        let m = self.moments(f)?;
        let n = (dot(f.as_slice(), f.as_slice()) * self.weight).sqrt().f64();
        let worst = m.iter().map(|x| x.f64().abs()).fold(0.0, f64::max);
        Ok(if n > 0.0 { worst / n } else { worst })
    }

    /// Row sums of coordinates over an axis, used for conserved totals.
    pub fn totals(coords: &Array2<T>, dx: T) -> Vec<T> {
        coords.sum_axis(Axis(0)).iter().map(|&x| x * dx).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_species() -> MixtureParams<f64> {
        MixtureParams::new(vec![1.0, 1.5], vec![0.7, 1.3], array![[1.0, 0.8], [0.8, 1.2]]).unwrap()
    }

    #[test]
    fn maxwellian_normalized() {
        let g = VelocityGrid::<f64>::new(24, 8.0).unwrap();
        for &m in &[0.7, 1.0, 1.6] {
            let s: f64 = g.nodes().iter().map(|&v| maxwellian(m, v)).sum::<f64>() * g.weight();
            assert!((s - 1.0).abs() < 1e-9, "m={m} s={s}");
        }
    }

    #[test]
    fn basis_nearly_orthonormal() {
        let p = two_species();
        let g = VelocityGrid::for_mixture(&p, 24).unwrap();
        let b = build_basis(&p, &g).unwrap();
        let gm = gram(&b);
        for r in 0..b.len() {
            for c in 0..b.len() {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((gm[[r, c]] - want).abs() < 1e-6, "{r},{c}: {}", gm[[r, c]]);
            }
        }
    }

    #[test]
    fn projection_round_trip() {
        let p = two_species();
        let g = VelocityGrid::for_mixture(&p, 10).unwrap();
        let b = build_basis(&p, &g).unwrap();
        let u = FluidState { rho: vec![0.3, -0.2], q: [0.1, 0.0, -0.4], e: 0.25 };
        let f = b.reconstruct_fluid(&u).unwrap();
        let (back, f1) = b.project_p0(&f).unwrap();
        for (x, y) in back.to_coords().iter().zip(u.to_coords()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(f1.values.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn ell_matches_formula() {
        let p = two_species();
        let u = FluidState { rho: vec![1.0, 2.0], q: [0.0; 3], e: 3.0 };
        let want = (0.7f64.sqrt() + 2.0 * 1.3f64.sqrt() + 3.0 * 2.0 * 2f64.sqrt() / 6f64.sqrt())
            / p.sum_nm().sqrt();
        assert!((u.ell(&p) - want).abs() < 1e-14);
    }
}
