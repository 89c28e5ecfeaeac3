use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Hard-sphere mixture at unit temperature and zero bulk velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams<T> {
    masses: Vec<T>,
    densities: Vec<T>,
    beta: Array2<T>,
}

/// Plain serializable mirror of [`MixtureParams`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MixtureSpec {
    pub masses: Vec<f64>,
    pub densities: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
}

impl<T: Real> MixtureParams<T> {
    /// Validates and builds. `beta` must be a symmetric positive `I x I` matrix.
    pub fn new(masses: Vec<T>, densities: Vec<T>, beta: Array2<T>) -> Result<Self> {
        let ns = masses.len();
        if ns == 0 {
            return Err(Error::InvalidParams("at least one species is required".into()));
        }
        if densities.len() != ns {
            return Err(Error::DimensionMismatch(format!(
                "{} masses but {} densities",
                ns,
                densities.len()
            )));
        }
        if beta.dim() != (ns, ns) {
            return Err(Error::DimensionMismatch(format!(
                "beta is {:?}, expected ({ns}, {ns})",
                beta.dim()
            )));
        }
        for (i, (&m, &n)) in masses.iter().zip(&densities).enumerate() {
            if !(m > T::zero()) || !m.is_finite() {
                return Err(Error::InvalidParams(format!("mass of species {i} must be positive")));
            }
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::InvalidParams(format!(
                    "density of species {i} must be positive"
                )));
            }
        }
        for i in 0..ns {
            for j in 0..ns {
                let b = beta[[i, j]];
                if !(b > T::zero()) || !b.is_finite() {
                    return Err(Error::InvalidParams(format!("beta[{i}][{j}] must be positive")));
                }
                let d = (b - beta[[j, i]]).abs();
                if d > T::c(1e-12) * b {
                    return Err(Error::InvalidParams(format!("beta is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { masses, densities, beta })
    }

    /// Single species with `m = n = beta = 1`.
    pub fn unit() -> Self {
        Self::uniform(1)
    }

    /// `I` identical unit species.
    pub fn uniform(ns: usize) -> Self {
        Self::new(
            vec![T::one(); ns],
            vec![T::one(); ns],
            Array2::from_elem((ns, ns), T::one()),
        )
        .expect("unit mixture is valid")
    }

    pub fn from_spec(spec: &MixtureSpec) -> Result<Self> {
        let ns = spec.masses.len();
        if spec.beta.len() != ns || spec.beta.iter().any(|r| r.len() != ns) {
            return Err(Error::DimensionMismatch(format!("beta must be {ns} x {ns}")));
        }
        let beta = Array2::from_shape_fn((ns, ns), |(i, j)| T::c(spec.beta[i][j]));
        Self::new(
            spec.masses.iter().map(|&x| T::c(x)).collect(),
            spec.densities.iter().map(|&x| T::c(x)).collect(),
            beta,
        )
    }

    pub fn to_spec(&self) -> MixtureSpec {
        MixtureSpec {
            masses: self.masses.iter().map(|x| x.f64()).collect(),
            densities: self.densities.iter().map(|x| x.f64()).collect(),
            beta: self
                .beta
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|x| x.f64()).collect())
                .collect(),
        }
    }

    pub fn n_species(&self) -> usize {
        self.masses.len()
    }

    /// Number of collision invariants, `I + 4`.
    pub fn n_invariants(&self) -> usize {
        self.masses.len() + 4
    }

    pub fn mass(&self, i: usize) -> T {
        self.masses[i]
    }

    pub fn density(&self, i: usize) -> T {
        self.densities[i]
    }

    pub fn beta(&self, i: usize, j: usize) -> T {
        self.beta[[i, j]]
    }

    pub fn masses(&self) -> &[T] {
        &self.masses
    }

    pub fn densities(&self) -> &[T] {
        &self.densities
    }

    /// `sum_j n_j`
    pub fn sum_n(&self) -> T {
        self.densities.iter().copied().sum()
    }

    /// `sum_j n_j m_j`
    pub fn sum_nm(&self) -> T {
        self.densities.iter().zip(&self.masses).map(|(&n, &m)| n * m).sum()
    }

    /// `sum_j n_j^{3/2}`
    pub fn sum_n32(&self) -> T {
        self.densities.iter().map(|&n| n * n.sqrt()).sum()
    }

    /// `sum_j n_j / m_j`
    pub fn sum_n_over_m(&self) -> T {
        self.densities.iter().zip(&self.masses).map(|(&n, &m)| n / m).sum()
    }

    /// Largest thermal speed scale `max_i m_i^{-1/2}`.
    pub fn max_thermal_speed(&self) -> T {
        self.masses
            .iter()
            .map(|&m| T::one() / m.sqrt())
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// Stable byte encoding used in cache keys.
    pub fn key_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.n_species() as u64).to_le_bytes());
        for x in self.masses.iter().chain(&self.densities).chain(self.beta.iter()) {
            out.extend_from_slice(&x.f64().to_le_bytes());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_bad_input() {
        let b = array![[1.0, 2.0], [1.0, 1.0]];
        assert!(MixtureParams::new(vec![1.0, 1.0], vec![1.0, 1.0], b).is_err());
        let b = array![[1.0]];
        assert!(MixtureParams::new(vec![-1.0], vec![1.0], b.clone()).is_err());
        assert!(MixtureParams::new(vec![1.0], vec![0.0], b.clone()).is_err());
        assert!(MixtureParams::new(vec![1.0, 2.0], vec![1.0], b).is_err());
    }

    #[test]
    fn sums() {
        let p = MixtureParams::new(
            vec![1.0, 2.0],
            vec![4.0, 1.0],
            array![[1.0, 0.5], [0.5, 2.0]],
        )
        .unwrap();
        assert_eq!(p.sum_n(), 5.0);
        assert_eq!(p.sum_nm(), 6.0);
        assert_eq!(p.sum_n32(), 9.0);
        assert_eq!(p.sum_n_over_m(), 4.5);
        assert_eq!(p.n_invariants(), 6);
        let back = MixtureParams::<f64>::from_spec(&p.to_spec()).unwrap();
        assert_eq!(back, p);
    }
}
