use kinemix_core::collision::{CollisionConfig, CollisionTensor, LinearizedOperator};
use kinemix_core::mixture::{build_basis, MixtureParams, VelocityGrid};
use kinemix_core::transport::{
    max_drift, random_state, totals, Boundary, CollisionTreatment, Mode, Operators, SchemeConfig, SimState, SpatialGrid, Stepper,
};
use kinemix_core::verify::default_mixture;
use kinemix_core::Real;

fn operators<T: Real>(n: usize, nonlinear: bool) -> Operators<T> {
    let params = MixtureParams::<T>::from_spec(&default_mixture()).unwrap();
    let grid = VelocityGrid::for_operator(&params, n).unwrap();
    let tensor = CollisionTensor::new(&params, &grid, &CollisionConfig::default()).unwrap();
    let linear = LinearizedOperator::assemble(&tensor).unwrap();
    let basis = build_basis(&params, &grid).unwrap();
    Operators { params, grid, basis, linear, nonlinear: nonlinear.then_some(tensor) }
}

fn run(ops: &Operators<f64>, mode: Mode, collision: CollisionTreatment) -> (SimState<f64>, SimState<f64>, SpatialGrid) {
    let space = SpatialGrid::new(-4.0, 4.0, 16, Boundary::Periodic).unwrap();
    let cfg = SchemeConfig { mode, collision, cfl: 0.5, ..Default::default() };
    let stepper = Stepper::new(ops, space.clone(), cfg).unwrap();
    let start = random_state(&space, &ops.basis, 1e-3, 4);
    let end = stepper.run(start.clone(), 6.0 * stepper.dt, |_, next| {
        assert!(next.is_finite());
        Ok(())
    });
    (start, end.unwrap(), space)
}

#[test]
fn periodic_runs_conserve_fluid_totals() {
    let ops = operators::<f64>(6, true);
    for (mode, collision) in [
        (Mode::Micromacro, CollisionTreatment::FullImplicit),
        (Mode::Direct, CollisionTreatment::FullImplicit),
        (Mode::Micromacro, CollisionTreatment::NuImplicit),
    ] {
        let (a, b, space) = run(&ops, mode, collision);
        assert_eq!(b.step, 6);
        let (ta, tb) = (totals(&a, &ops.basis, &space), totals(&b, &ops.basis, &space));
        let scale = ta.iter().fold(1e-3f64, |m, x| m.max(x.abs()));
        for (x, y) in ta.iter().zip(&tb) {
            assert!((x - y).abs() < 1e-10 * scale, "{mode:?} {collision:?}: {x} -> {y}");
        }
        if let Some(s) = &b.split {
            assert!(max_drift(&ops.basis, &s.f1) < 1e-6);
            assert!(b.split_defect(&ops.basis) < 1e-10);
        }
    }
}

#[test]
fn checkpoints_round_trip() {
    let ops = operators::<f64>(6, false);
    let (_, b, _) = run(&ops, Mode::Micromacro, CollisionTreatment::FullImplicit);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.kmxs");
    b.save(&path).unwrap();
    let c = SimState::<f64>::load(&path).unwrap();
    assert_eq!((c.t, c.step, c.config_hash), (b.t, b.step, b.config_hash));
    assert_eq!(c.f, b.f);
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0x10;
    std::fs::write(&path, bytes).unwrap();
    assert!(SimState::<f64>::load(&path).is_err());
}

#[test]
fn single_precision_pipeline() {
    let ops = operators::<f32>(6, false);
    let space = SpatialGrid::new(-4.0, 4.0, 12, Boundary::Periodic).unwrap();
    // single-precision roundoff in the projections
    let cfg = SchemeConfig { tol_drift: 1e-4, ..Default::default() };
    let stepper = Stepper::new(&ops, space.clone(), cfg).unwrap();
    let start = random_state::<f32>(&space, &ops.basis, 1e-2, 2);
    let end = stepper.run(start.clone(), 3.0 * stepper.dt, |_, _| Ok(())).unwrap();
    assert!(end.is_finite());
    let (ta, tb) = (totals(&start, &ops.basis, &space), totals(&end, &ops.basis, &space));
    for (x, y) in ta.iter().zip(&tb) {
        assert!((x - y).abs() < 1e-4, "{x} -> {y}");
    }
}

#[test]
fn nu_implicit_step_is_limited() {
    let ops = operators::<f64>(6, false);
    let limit = kinemix_core::transport::nu_implicit_limit(&ops.linear);
    assert!(limit.is_finite() && limit > 0.0);
    let space = SpatialGrid::new(-40.0, 40.0, 8, Boundary::Periodic).unwrap();
    let cfg = SchemeConfig { collision: CollisionTreatment::NuImplicit, ..Default::default() };
    let s = Stepper::new(&ops, space.clone(), cfg.clone()).unwrap();
    assert!(s.dt <= limit);
    let fixed = SchemeConfig { dt: Some(2.0 * limit), ..cfg };
    assert!(Stepper::new(&ops, space, fixed).is_err());
}
