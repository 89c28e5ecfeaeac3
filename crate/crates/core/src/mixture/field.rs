use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};

use crate::error::{Error, Result};
use crate::mixture::VelocityGrid;
use crate::scalar::Real;

/// Values `f_i(v_a)` for every species `i` and node `a`, stored row-major
/// as an `I x N_v` array so the flat index is `i * N_v + a`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeciesField<T> {
    pub values: Array2<T>,
}

impl<T: Real> SpeciesField<T> {
    pub fn zeros(n_species: usize, n_nodes: usize) -> Self {
        Self { values: Array2::zeros((n_species, n_nodes)) }
    }

    pub fn from_fn(n_species: usize, n_nodes: usize, f: impl FnMut((usize, usize)) -> T) -> Self {
        Self { values: Array2::from_shape_fn((n_species, n_nodes), f) }
    }

    pub fn from_flat(n_species: usize, flat: Array1<T>) -> Result<Self> {
        let len = flat.len();
        if n_species == 0 || len % n_species != 0 {
            return Err(Error::DimensionMismatch(format!(
                "cannot split {len} values into {n_species} species"
            )));
        }
        let values = flat
            .into_shape_with_order((n_species, len / n_species))
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Ok(Self { values })
    }

    pub fn n_species(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.ncols()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn species(&self, i: usize) -> ArrayView1<'_, T> {
        self.values.row(i)
    }

    pub fn species_mut(&mut self, i: usize) -> ArrayViewMut1<'_, T> {
        self.values.row_mut(i)
    }

    /// Flat `I * N_v` slice.
    pub fn as_slice(&self) -> &[T] {
        self.values.as_slice().expect("species fields are contiguous")
    }

    pub fn as_slice_mut(&mut self) -> &mut [T] {
        self.values.as_slice_mut().expect("species fields are contiguous")
    }

    pub fn to_flat(&self) -> Array1<T> {
        Array1::from(self.as_slice().to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn check_shape(&self, n_species: usize, n_nodes: usize) -> Result<()> {
        if self.values.dim() != (n_species, n_nodes) {
            return Err(Error::DimensionMismatch(format!(
                "field has shape {:?}, expected ({n_species}, {n_nodes})",
                self.values.dim()
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { values: &self.values * s }
    }

    pub fn axpy(&mut self, a: T, x: &Self) {
        self.values.scaled_add(a, &x.values);
    }
}

/// `<f, g>_I = sum_i sum_a w_a f_i(v_a) g_i(v_a)`.
pub fn inner_product<T: Real>(f: &SpeciesField<T>, g: &SpeciesField<T>, grid: &VelocityGrid<T>) -> Result<T> {
    if f.values.dim() != g.values.dim() {
        return Err(Error::DimensionMismatch(format!(
            "inner product of {:?} and {:?}",
            f.values.dim(),
            g.values.dim()
        )));
    }
    f.check_shape(f.n_species(), grid.len())?;
    Ok(dot(f.as_slice(), g.as_slice()) * grid.weight())
}

/// `||f||_I`.
pub fn norm<T: Real>(f: &SpeciesField<T>, grid: &VelocityGrid<T>) -> Result<T> {
    inner_product(f, f, grid).map(|s| s.sqrt())
}

/// `( sum_i sum_a w_a omega(v_a) f_i(v_a)^2 )^{1/2}` with a per-node weight.
pub fn weighted_norm<T: Real>(f: &SpeciesField<T>, omega: &[T], grid: &VelocityGrid<T>) -> Result<T> {
    f.check_shape(f.n_species(), grid.len())?;
    if omega.len() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "weight has {} entries for {} nodes",
            omega.len(),
            grid.len()
        )));
    }
    let mut s = T::zero();
    for row in f.values.rows() {
        for (x, &w) in row.iter().zip(omega) {
            s += w * *x * *x;
        }
    }
    Ok((s * grid.weight()).sqrt())
}

/// Plain dot product with a fixed summation order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * k + l] * b[4 * k + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inner_product_is_bilinear_and_symmetric() {
        let g = VelocityGrid::<f64>::new(4, 2.0).unwrap();
        let f = SpeciesField::from_fn(2, g.len(), |(i, a)| (i as f64 + 1.0) * (a as f64).sin());
        let h = SpeciesField::from_fn(2, g.len(), |(i, a)| (a as f64 * 0.3 + i as f64).cos());
        let fh = inner_product(&f, &h, &g).unwrap();
        assert!((fh - inner_product(&h, &f, &g).unwrap()).abs() < 1e-13);
        let f2 = f.scaled(2.0);
        assert!((inner_product(&f2, &h, &g).unwrap() - 2.0 * fh).abs() < 1e-12);
        let ones = vec![1.0; g.len()];
        assert!((weighted_norm(&f, &ones, &g).unwrap() - norm(&f, &g).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn shape_errors() {
        let g = VelocityGrid::<f64>::new(4, 2.0).unwrap();
        let f = SpeciesField::<f64>::zeros(1, g.len());
        let h = SpeciesField::<f64>::zeros(2, g.len());
        assert!(inner_product(&f, &h, &g).is_err());
        assert!(weighted_norm(&f, &[1.0; 3], &g).is_err());
        assert!(SpeciesField::from_flat(3, Array1::<f64>::zeros(7)).is_err());
    }
}
