use kinemix_core::collision::kinematics::post_collision_velocities;
use kinemix_core::diagnostics::{parse_record, Record};
use kinemix_core::io;
use kinemix_core::micromacro::{pointwise_lower_bound, theta0};
use kinemix_core::mixture::{build_basis, FluidState, MixtureParams, SpeciesField, VelocityGrid};
use ndarray::Array2;
use proptest::prelude::*;

fn mixture() -> impl Strategy<Value = MixtureParams<f64>> {
    (1usize..=3)
        .prop_flat_map(|ns| {
            (
                prop::collection::vec(0.5f64..3.0, ns),
                prop::collection::vec(0.5f64..2.0, ns),
                prop::collection::vec(0.5f64..1.5, ns * ns),
            )
        })
        .prop_map(|(m, n, b)| {
            let ns = m.len();
            let beta = Array2::from_shape_fn((ns, ns), |(i, j)| b[i.min(j) * ns + i.max(j)]);
            MixtureParams::new(m, n, beta).unwrap()
        })
}

fn unit_vector() -> impl Strategy<Value = [f64; 3]> {
    (0.0f64..std::f64::consts::PI, 0.0f64..std::f64::consts::TAU)
        .prop_map(|(th, ph)| [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()])
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn binary_collisions_conserve(
        mi in 0.1f64..10.0, mj in 0.1f64..10.0,
        v in prop::array::uniform3(-5.0f64..5.0), w in prop::array::uniform3(-5.0f64..5.0),
        omega in unit_vector(),
    ) {
        let (vp, wp) = post_collision_velocities(v, w, omega, mi, mj);
        let e = |a: [f64; 3], b: [f64; 3]| mi * a.iter().map(|x| x * x).sum::<f64>() + mj * b.iter().map(|x| x * x).sum::<f64>();
        for k in 0..3 {
            prop_assert!((mi * v[k] + mj * w[k] - mi * vp[k] - mj * wp[k]).abs() < 1e-10);
        }
        prop_assert!((e(v, w) - e(vp, wp)).abs() < 1e-9 * (1.0 + e(v, w)));
    }

    #[test]
    fn asymmetric_beta_is_rejected(a in 0.5f64..1.5, d in 0.01f64..0.5) {
        let beta = Array2::from_shape_vec((2, 2), vec![1.0, a, a + d, 1.0]).unwrap();
        prop_assert!(MixtureParams::new(vec![1.0, 2.0], vec![1.0, 1.0], beta).is_err());
    }

    #[test]
    fn fluid_coordinates_round_trip(c in prop::collection::vec(-10.0f64..10.0, 5..8)) {
        let u = FluidState::from_coords(&c).unwrap();
        prop_assert_eq!(u.rho.len(), c.len() - 4);
        prop_assert_eq!(u.to_coords(), c);
    }

    #[test]
    fn records_round_trip(
        t in 0.0f64..100.0, name in "[a-z][a-z0-9_.]{0,24}", value in -1e300f64..1e300,
        tol in prop_oneof![Just(f64::INFINITY), 0.0f64..1.0], pass: bool,
    ) {
        let r = Record::new(t, name, value, tol, pass, "basis-orthonormality");
        prop_assert_eq!(parse_record(&r.to_json()).unwrap(), r.clone());
        prop_assert_eq!(parse_record(&r.to_json_tagged(Some("abc"))).unwrap(), r);
    }

    #[test]
    fn pointwise_bound_holds(p in mixture(), c in prop::collection::vec(-3.0f64..3.0, 7)) {
        let ns = p.n_species();
        let g = FluidState::from_coords(&c[..ns + 4]).unwrap();
        let t0 = theta0(&p);
        prop_assert!(t0 > 0.0 && t0 <= 1.0);
        let (lhs, rhs) = pointwise_lower_bound(&g, t0 / 2.0, &p).unwrap();
        prop_assert!(lhs >= rhs - 1e-12 * (1.0 + lhs), "{} < {}", lhs, rhs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn projections_split_any_field(p in mixture(), seed in 0u64..1000) {
        let grid = VelocityGrid::for_mixture(&p, 8).unwrap();
        let basis = build_basis(&p, &grid).unwrap();
        let mut s = seed;
        let f = SpeciesField::from_fn(p.n_species(), grid.len(), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        let f0 = basis.p0(&f).unwrap();
        let f1 = basis.p1(&f).unwrap();
        for ((a, b), c) in f0.as_slice().iter().zip(f1.as_slice()).zip(f.as_slice()) {
            prop_assert!((a + b - c).abs() < 1e-12);
        }
        prop_assert!(basis.orthogonality_defect(&f1).unwrap() < 1e-10);
        let f00 = basis.p0(&f0).unwrap();
        for (a, b) in f00.as_slice().iter().zip(f0.as_slice()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn blobs_detect_any_flipped_byte(payload in prop::collection::vec(-1e6f64..1e6, 1..64), at in any::<prop::sample::Index>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let key = io::hash_parts(&[b"prop"]);
        io::write_blob(&path, b"TEST", 1, &[payload.len() as u64], &key, &payload).unwrap();
        let blob = io::read_blob(&path, b"TEST", 1).unwrap();
        prop_assert_eq!(&blob.payload, &payload);
        prop_assert_eq!(blob.key, key);
        let mut bytes = std::fs::read(&path).unwrap();
        let i = at.index(bytes.len());
        bytes[i] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        // header fields outside the payload hash surface as a changed meta or key,
        // which callers compare against what they expect
        if let Ok(b) = io::read_blob(&path, b"TEST", 1) {
            prop_assert!(b.meta != vec![payload.len() as u64] || b.key != key);
        }
    }
}
