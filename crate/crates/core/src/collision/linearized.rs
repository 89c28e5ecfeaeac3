use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::collision::CollisionTensor;
use crate::error::{Error, Result};
use crate::io::{self, Key};
use crate::mixture::SpeciesField;
use crate::scalar::Real;

const OP_MAGIC: &[u8; 4] = b"KMXL";
const OP_VERSION: u32 = 1;

/// Dense linearized collision operator `L` together with the collision
/// frequency `nu`, so that `K = L + diag(nu)`.
#[derive(Clone, Debug)]
pub struct LinearizedOperator<T> {
    matrix: Array2<T>,
    nu: Array1<T>,
    n_species: usize,
    key: Key,
}

impl<T: Real> LinearizedOperator<T> {
    pub fn assemble(tensor: &CollisionTensor<T>) -> Result<Self> {
        let matrix = tensor.assemble_linear();
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("assembled operator is not finite".into()));
        }
        let nu = tensor.collision_frequency().to_flat();
        Ok(Self { matrix, nu, n_species: tensor.params().n_species(), key: *tensor.key() })
    }

    /// Loads from `dir` when a cache entry for this tensor exists, otherwise
    /// assembles and writes one.
    pub fn cached(tensor: &CollisionTensor<T>, dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else { return Self::assemble(tensor) };
        let path = Self::cache_path(tensor, dir);
        if path.exists() {
            if let Ok(op) = Self::load(&path, tensor.key()) {
                return Ok(op);
            }
        }
        let op = Self::assemble(tensor)?;
        op.save(&path)?;
        Ok(op)
    }

    pub fn cache_path(tensor: &CollisionTensor<T>, dir: &Path) -> PathBuf {
        dir.join(format!("linop-{}.bin", &io::hex(tensor.key())[..16]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dim = self.dim();
        let mut payload = Vec::with_capacity(dim * dim + dim);
        payload.extend(self.nu.iter().map(|x| x.f64()));
        payload.extend(self.matrix.iter().map(|x| x.f64()));
        io::write_blob(path, OP_MAGIC, OP_VERSION, &[dim as u64, self.n_species as u64], &self.key, &payload)
    }

    pub fn load(path: &Path, expected: &Key) -> Result<Self> {
        let blob = io::read_blob(path, OP_MAGIC, OP_VERSION)?;
        if &blob.key != expected {
            return Err(Error::Cache("operator cache belongs to a different configuration".into()));
        }
        let (dim, ns) = match blob.meta.as_slice() {
            [d, s] => (*d as usize, *s as usize),
            _ => return Err(Error::Cache("bad operator header".into())),
        };
        if blob.payload.len() != dim * dim + dim {
            return Err(Error::Cache("operator payload has the wrong length".into()));
        }
        let nu = Array1::from_iter(blob.payload[..dim].iter().map(|&x| T::c(x)));
        let matrix = Array2::from_shape_vec((dim, dim), blob.payload[dim..].iter().map(|&x| T::c(x)).collect())
            .map_err(|e| Error::Cache(e.to_string()))?;
        Ok(Self { matrix, nu, n_species: ns, key: blob.key })
    }

    pub fn from_parts(matrix: Array2<T>, nu: Array1<T>, n_species: usize) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() != nu.len() {
            return Err(Error::DimensionMismatch("operator and frequency sizes differ".into()));
        }
        Ok(Self { matrix, nu, n_species, key: [0; 32] })
    }

    pub fn dim(&self) -> usize {
        self.nu.len()
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    pub fn key(&self) -> &Key {
        &self.key
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.matrix
    }

    /// Flat collision frequency.
    pub fn nu(&self) -> &Array1<T> {
        &self.nu
    }

    pub fn apply(&self, f: &SpeciesField<T>) -> Result<SpeciesField<T>> {
        if f.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!("field of size {} for operator of size {}", f.len(), self.dim())));
        }
        let v = self.matrix.dot(&ndarray::ArrayView1::from(f.as_slice()));
        SpeciesField::from_flat(self.n_species, v)
    }

    /// `L` applied to every row (rows are spatial nodes). `L` is symmetric.
    pub fn apply_batch(&self, f: &Array2<T>) -> Array2<T> {
        f.dot(&self.matrix)
    }

    /// `K f = L f + nu f` for every row.
    pub fn apply_k_batch(&self, f: &Array2<T>) -> Array2<T> {
        let mut out = self.apply_batch(f);
        out += &(f * &self.nu);
        out
    }

    pub fn apply_k(&self, f: &SpeciesField<T>) -> Result<SpeciesField<T>> {
        let mut out = self.apply(f)?;
        out.as_slice_mut().iter_mut().zip(f.as_slice()).zip(self.nu.iter()).for_each(|((o, &x), &n)| *o += n * x);
        Ok(out)
    }

    /// `max |L - L^T| / max |L|`.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let x = self.matrix[[i, j]].f64();
                scale = scale.max(x.abs());
                if j > i {
                    worst = worst.max((x - self.matrix[[j, i]].f64()).abs());
                }
            }
        }
        if scale > 0.0 {
            worst / scale
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::CollisionConfig;
    use crate::mixture::{build_basis, MixtureParams, VelocityGrid};
    use crate::verify::default_mixture;

    fn small() -> (CollisionTensor<f64>, LinearizedOperator<f64>) {
        let p = MixtureParams::from_spec(&default_mixture()).unwrap();
        let g = VelocityGrid::for_operator(&p, 6).unwrap();
        let t = CollisionTensor::new(&p, &g, &CollisionConfig::default()).unwrap();
        let l = LinearizedOperator::assemble(&t).unwrap();
        (t, l)
    }

    #[test]
    fn symmetric_with_invariant_kernel() {
        let (t, l) = small();
        assert!(l.symmetry_defect() < 1e-10);
        let basis = build_basis(t.params(), t.grid()).unwrap();
        let scale = l.matrix().iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for k in 0..basis.len() {
            let lv = l.apply(&basis.vector(k)).unwrap();
            assert!(lv.as_slice().iter().all(|x| x.abs() < 1e-10 * scale));
        }
        // negative semidefinite on a random vector
        let f = SpeciesField::from_fn(2, t.grid().len(), |(i, a)| ((i * 7 + a * 3) % 11) as f64 - 5.0);
        let lf = l.apply(&f).unwrap();
        assert!(crate::mixture::dot(lf.as_slice(), f.as_slice()) < 0.0);
    }

    #[test]
    fn cache_round_trip() {
        let (t, l) = small();
        let dir = tempfile::tempdir().unwrap();
        let a = LinearizedOperator::cached(&t, Some(dir.path())).unwrap();
        let path = LinearizedOperator::cache_path(&t, dir.path());
        assert!(path.exists());
        let b = LinearizedOperator::<f64>::load(&path, t.key()).unwrap();
        assert_eq!(a.matrix(), l.matrix());
        assert_eq!(b.matrix(), l.matrix());
        assert_eq!(b.nu(), l.nu());
        assert!(LinearizedOperator::<f64>::load(&path, &[1; 32]).is_err());
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x55;
        std::fs::write(&path, bytes).unwrap();
        assert!(LinearizedOperator::<f64>::load(&path, t.key()).is_err());
        // a corrupt entry is rebuilt
        let c = LinearizedOperator::cached(&t, Some(dir.path())).unwrap();
        assert_eq!(c.matrix(), l.matrix());
        assert!(LinearizedOperator::<f64>::load(&path, t.key()).is_ok());
    }
}
