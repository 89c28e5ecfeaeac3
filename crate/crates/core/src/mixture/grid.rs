use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, Key};
use crate::mixture::MixtureParams;
use crate::scalar::Real;

const GRID_MAGIC: &[u8; 4] = b"KMXG";
const GRID_VERSION: u32 = 1;

/// Uniform midpoint grid on `[-R, R]^3`, symmetric under `v -> -v`.
///
/// Node `(ix, iy, iz)` sits at `-R + (k + 1/2) h` on each axis and has the
/// flat index `(ix * n + iy) * n + iz`. All weights equal `h^3`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityGrid<T> {
    n: usize,
    extent: T,
    h: T,
    axis: Vec<T>,
    nodes: Vec<[T; 3]>,
    speed_sq: Vec<T>,
}

impl<T: Real> VelocityGrid<T> {
    pub fn new(n_per_axis: usize, extent: T) -> Result<Self> {
        if n_per_axis < 3 {
            return Err(Error::InvalidParams(format!(
                "velocity grid needs at least 3 nodes per axis, got {n_per_axis}"
            )));
        }
        if !(extent > T::zero()) || !extent.is_finite() {
            return Err(Error::InvalidParams("velocity extent must be positive".into()));
        }
        let h = T::c(2.0) * extent / T::c(n_per_axis as f64);
        let axis: Vec<T> = (0..n_per_axis)
            .map(|k| -extent + (T::c(k as f64) + T::c(0.5)) * h)
            .collect();
        let mut nodes = Vec::with_capacity(n_per_axis.pow(3));
        for &x in &axis {
            for &y in &axis {
                for &z in &axis {
                    nodes.push([x, y, z]);
                }
            }
        }
        let speed_sq = nodes.iter().map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).collect();
        Ok(Self { n: n_per_axis, extent, h, axis, nodes, speed_sq })
    }

    /// Default extent `4 max_i(m_i^{-1/2}) sqrt(2) + 2`.
    pub fn default_extent(params: &MixtureParams<T>) -> T {
        T::c(4.0) * params.max_thermal_speed() * T::c(2.0).sqrt() + T::c(2.0)
    }

    pub fn for_mixture(params: &MixtureParams<T>, n_per_axis: usize) -> Result<Self> {
        Self::new(n_per_axis, Self::default_extent(params))
    }

    /// Tighter box `5.5 max_i(m_i^{-1/2})` used for operators and transport.
    /// On 12^3..16^3 grids the default box leaves too few nodes in the bulk
    /// and the gap estimate moves by more than a factor two under refinement.
    pub fn operator_extent(params: &MixtureParams<T>) -> T {
        T::c(5.5) * params.max_thermal_speed()
    }

    pub fn for_operator(params: &MixtureParams<T>, n_per_axis: usize) -> Result<Self> {
        Self::new(n_per_axis, Self::operator_extent(params))
    }

    pub fn n_per_axis(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn extent(&self) -> T {
        self.extent
    }

    pub fn spacing(&self) -> T {
        self.h
    }

    /// Quadrature weight, identical for every node.
    pub fn weight(&self) -> T {
        self.h * self.h * self.h
    }

    pub fn axis(&self) -> &[T] {
        &self.axis
    }

    pub fn nodes(&self) -> &[[T; 3]] {
        &self.nodes
    }

    pub fn node(&self, a: usize) -> [T; 3] {
        self.nodes[a]
    }

    pub fn speed_sq(&self, a: usize) -> T {
        self.speed_sq[a]
    }

    pub fn speed(&self, a: usize) -> T {
        self.speed_sq[a].sqrt()
    }

    /// Largest `|v_1|` on the grid.
    pub fn max_axis_speed(&self) -> T {
        self.extent - T::c(0.5) * self.h
    }

    #[inline]
    pub fn flat(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.n + iy) * self.n + iz
    }

    #[inline]
    pub fn triple(&self, a: usize) -> [usize; 3] {
        let n = self.n;
        [a / (n * n), (a / n) % n, a % n]
    }

    /// Index of the node `-v_a`.
    pub fn mirror(&self, a: usize) -> usize {
        let [x, y, z] = self.triple(a);
        let m = self.n - 1;
        self.flat(m - x, m - y, m - z)
    }

    /// `(1 + |v|)` at every node.
    pub fn growth_weight(&self) -> Vec<T> {
        self.speed_sq.iter().map(|&s| T::one() + s.sqrt()).collect()
    }

    pub fn key_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&self.extent.f64().to_le_bytes());
        out
    }

    pub fn cache_key(&self) -> Key {
        io::hash_parts(&[b"velocity-grid", &self.key_bytes()])
    }

    /// Writes the grid as a binary cache file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::with_capacity(self.len() * 3 + 2);
        payload.push(self.extent.f64());
        payload.push(self.h.f64());
        for v in &self.nodes {
            payload.extend(v.iter().map(|x| x.f64()));
        }
        io::write_blob(path, GRID_MAGIC, GRID_VERSION, &[self.n as u64], &self.cache_key(), &payload)
    }

    /// Loads a cached grid and checks it against a fresh construction.
    pub fn load(path: &Path) -> Result<Self> {
        let blob = io::read_blob(path, GRID_MAGIC, GRID_VERSION)?;
        let n = *blob.meta.first().ok_or_else(|| Error::Cache("missing grid size".into()))? as usize;
        if blob.payload.len() != 3 * n.pow(3) + 2 {
            return Err(Error::Cache("grid payload has the wrong length".into()));
        }
        let grid = Self::new(n, T::c(blob.payload[0]))?;
        if grid.cache_key() != blob.key {
            return Err(Error::Cache("grid key mismatch".into()));
        }
        let tol = 64.0 * T::unit_roundoff() * grid.extent.f64();
        for (a, v) in grid.nodes.iter().enumerate() {
            for d in 0..3 {
                if (v[d].f64() - blob.payload[2 + 3 * a + d]).abs() > tol {
                    return Err(Error::Cache(format!("grid node {a} differs from its cached value")));
                }
            }
        }
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_midpoint_nodes() {
        let g = VelocityGrid::<f64>::new(6, 3.0).unwrap();
        assert_eq!(g.len(), 216);
        assert!((g.spacing() - 1.0).abs() < 1e-15);
        assert_eq!(g.axis()[0], -2.5);
        for a in 0..g.len() {
            let b = g.mirror(a);
            let (u, w) = (g.node(a), g.node(b));
            for d in 0..3 {
                assert_eq!(u[d], -w[d]);
            }
            let [x, y, z] = g.triple(a);
            assert_eq!(g.flat(x, y, z), a);
        }
    }

    #[test]
    fn default_extent_formula() {
        let p = MixtureParams::<f64>::unit();
        let r = VelocityGrid::default_extent(&p);
        assert!((r - (4.0 * 2f64.sqrt() + 2.0)).abs() < 1e-14);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = VelocityGrid::<f64>::new(5, 2.0).unwrap();
        let p = dir.path().join("grid.bin");
        g.save(&p).unwrap();
        assert_eq!(VelocityGrid::<f64>::load(&p).unwrap(), g);
    }
}
