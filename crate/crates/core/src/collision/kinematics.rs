use crate::scalar::Real;

#[inline]
pub fn dot3<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Reflection `T_omega z = z - 2 (omega . z) omega`.
#[inline]
pub fn reflect<T: Real>(z: [T; 3], omega: [T; 3]) -> [T; 3] {
    let s = T::c(2.0) * dot3(omega, z);
    [z[0] - s * omega[0], z[1] - s * omega[1], z[2] - s * omega[2]]
}

/// Post-collision velocities `(v', v*')` of a pair with masses `m_i`, `m_j`
/// and unit direction `omega`.
pub fn post_collision_velocities<T: Real>(
    v: [T; 3],
    v_star: [T; 3],
    omega: [T; 3],
    m_i: T,
    m_j: T,
) -> ([T; 3], [T; 3]) {
    let mt = m_i + m_j;
    let g = [v[0] - v_star[0], v[1] - v_star[1], v[2] - v_star[2]];
    let tg = reflect(g, omega);
    let mut vp = [T::zero(); 3];
    let mut vs = [T::zero(); 3];
    for k in 0..3 {
        let centre = (m_i * v[k] + m_j * v_star[k]) / mt;
        vp[k] = centre + m_j / mt * tg[k];
        vs[k] = centre - m_i / mt * tg[k];
    }
    (vp, vs)
}

/// `v' - v` for relative velocity `g = v - v*`: `-(2 m_j / (m_i + m_j)) (omega . g) omega`.
#[inline]
pub fn post_shift<T: Real>(g: [T; 3], omega: [T; 3], m_i: T, m_j: T) -> [T; 3] {
    let s = -T::c(2.0) * m_j / (m_i + m_j) * dot3(omega, g);
    [s * omega[0], s * omega[1], s * omega[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conserves_momentum_and_energy() {
        let (mi, mj) = (1.3, 0.6);
        let v = [0.3, -1.2, 2.0];
        let w = [-0.7, 0.4, 0.1];
        let r = (0.2f64 * 0.2 + 0.5 * 0.5 + 0.84f64 * 0.84).sqrt();
        let om = [0.2 / r, 0.5 / r, 0.84 / r];
        let (vp, ws) = post_collision_velocities(v, w, om, mi, mj);
        for k in 0..3 {
            assert!((mi * v[k] + mj * w[k] - mi * vp[k] - mj * ws[k]).abs() < 1e-14);
        }
        let e0 = mi * dot3(v, v) + mj * dot3(w, w);
        let e1 = mi * dot3(vp, vp) + mj * dot3(ws, ws);
        assert!((e0 - e1).abs() < 1e-13);
        let g = [v[0] - w[0], v[1] - w[1], v[2] - w[2]];
        let sh = post_shift(g, om, mi, mj);
        for k in 0..3 {
            assert!((v[k] + sh[k] - vp[k]).abs() < 1e-14);
        }
        // |(v - v*) . omega| is preserved up to sign
        let gp = [vp[0] - ws[0], vp[1] - ws[1], vp[2] - ws[2]];
        assert!((dot3(gp, om).abs() - dot3(g, om).abs()).abs() < 1e-14);
    }
}
