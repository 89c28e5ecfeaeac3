use crate::error::{Error, Result};
use crate::scalar::Real;

/// Symmetric quadrature on the unit sphere built from the cube's face,
/// edge and corner directions. Weights sum to `4 pi`.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularQuadrature<T> {
    dirs: Vec<[T; 3]>,
    weights: Vec<T>,
}

fn signs3() -> impl Iterator<Item = [f64; 3]> {
    (0..8).map(|k| {
        [
            if k & 1 == 0 { 1.0 } else { -1.0 },
            if k & 2 == 0 { 1.0 } else { -1.0 },
            if k & 4 == 0 { 1.0 } else { -1.0 },
        ]
    })
}

fn faces() -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for d in 0..3 {
        for s in [1.0, -1.0] {
            let mut v = [0.0; 3];
            v[d] = s;
            out.push(v);
        }
    }
    out
}

fn edges() -> Vec<[f64; 3]> {
    let r = 0.5f64.sqrt();
    let mut out = Vec::new();
    for (p, q) in [(0, 1), (0, 2), (1, 2)] {
        for (sp, sq) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let mut v = [0.0; 3];
            v[p] = sp * r;
            v[q] = sq * r;
            out.push(v);
        }
    }
    out
}

fn corners() -> Vec<[f64; 3]> {
    let r = 1.0 / 3f64.sqrt();
    signs3().map(|s| [s[0] * r, s[1] * r, s[2] * r]).collect()
}

impl<T: Real> AngularQuadrature<T> {
    /// 6, 14 or 26 point rules (exact for polynomials of degree 3, 5, 7).
    pub fn lebedev(points: usize) -> Result<Self> {
        let four_pi = 4.0 * std::f64::consts::PI;
        let groups: Vec<(Vec<[f64; 3]>, f64)> = match points {
            6 => vec![(faces(), 1.0 / 6.0)],
            14 => vec![(faces(), 1.0 / 15.0), (corners(), 3.0 / 40.0)],
            26 => vec![(faces(), 1.0 / 21.0), (edges(), 4.0 / 105.0), (corners(), 9.0 / 280.0)],
            _ => {
                return Err(Error::InvalidParams(format!(
                    "angular rule with {points} points is not available (use 6, 14 or 26)"
                )))
            }
        };
        let mut dirs = Vec::new();
        let mut weights = Vec::new();
        for (g, w) in groups {
            for d in g {
                dirs.push([T::c(d[0]), T::c(d[1]), T::c(d[2])]);
                weights.push(T::c(w * four_pi));
            }
        }
        Ok(Self { dirs, weights })
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn dirs(&self) -> &[[T; 3]] {
        &self.dirs
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// `omega` and `-omega` give the same collision; keep one of each pair
    /// (first nonzero component positive) with its weight doubled.
    pub fn half_set(&self) -> (Vec<[T; 3]>, Vec<T>) {
        let mut d = Vec::new();
        let mut w = Vec::new();
        for (v, &wt) in self.dirs.iter().zip(&self.weights) {
            let first = v.iter().find(|x| **x != T::zero()).copied().unwrap_or(T::zero());
            if first > T::zero() {
                d.push(*v);
                w.push(wt + wt);
            }
        }
        (d, w)
    }

    pub fn integrate(&self, f: impl Fn([T; 3]) -> T) -> T {
        self.dirs.iter().zip(&self.weights).map(|(&d, &w)| w * f(d)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn weights_and_moments() {
        for n in [6, 14, 26] {
            let q = AngularQuadrature::<f64>::lebedev(n).unwrap();
            assert_eq!(q.len(), n);
            assert!((q.integrate(|_| 1.0) - 4.0 * PI).abs() < 1e-12);
            assert!((q.integrate(|w| w[0] * w[0]) - 4.0 * PI / 3.0).abs() < 1e-12);
            assert!(q.integrate(|w| w[0] * w[1] * w[2]).abs() < 1e-12);
            for d in q.dirs() {
                let n2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                assert!((n2 - 1.0).abs() < 1e-14);
            }
            let (hd, hw) = q.half_set();
            assert_eq!(hd.len(), n / 2);
            assert!((hw.iter().sum::<f64>() - 4.0 * PI).abs() < 1e-12);
        }
        let q = AngularQuadrature::<f64>::lebedev(26).unwrap();
        // degree 6 moment: int x^6 = 4 pi / 7
        assert!((q.integrate(|w| w[0].powi(6)) - 4.0 * PI / 7.0).abs() < 1e-12);
        assert!(AngularQuadrature::<f64>::lebedev(10).is_err());
    }
}
