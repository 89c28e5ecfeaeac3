//! Property suites shared by the command line and the acceptance tests.
//!
//! Every suite returns [`Record`]s and passes when all of them pass.
//! Tensors and operators are built once per (mixture, grid) and shared
//! between suites through [`Verifier`].

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::rc::Rc;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::collision::{estimate_spectral_gap, CollisionConfig, CollisionTensor, LinearizedOperator, SpectralConfig, SpectralReport};
use crate::diagnostics::{
    antiderivative_w0, conservation_residuals, estimate_constants, relative_drift, w0_residuals, DiagnosticsConfig, LevelSummary,
    Mollifier, Record, RunDiagnostics,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::micromacro;
use crate::mixture::{build_basis, equilibrium, sqrt_equilibrium, FluidState, MixtureParams, MixtureSpec, VelocityGrid};
use crate::transport::{
    make_initial, totals, Boundary, InitialProfile, Mode, Operators, SchemeConfig, Shape, SimState, SpatialGrid, Stepper,
};
use crate::{Field, Grid, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Basis,
    Invariance,
    Entropy,
    Operator,
    ClosedForms,
    Lemma,
    Conservation,
    Coupling,
    Energy,
    Correction,
    Constants,
}

impl Suite {
    /// The acceptance criteria, in order.
    pub const CRITERIA: [Suite; 10] = [
        Suite::Basis,
        Suite::Invariance,
        Suite::Entropy,
        Suite::Operator,
        Suite::ClosedForms,
        Suite::Lemma,
        Suite::Conservation,
        Suite::Coupling,
        Suite::Energy,
        Suite::Correction,
    ];

    pub const ALL: [Suite; 11] = [
        Suite::Basis,
        Suite::Invariance,
        Suite::Entropy,
        Suite::Operator,
        Suite::ClosedForms,
        Suite::Lemma,
        Suite::Constants,
        Suite::Conservation,
        Suite::Coupling,
        Suite::Energy,
        Suite::Correction,
    ];

    /// Suites without time stepping; `verify` runs these by default.
    pub const STATIC: [Suite; 7] = [
        Suite::Basis,
        Suite::Invariance,
        Suite::Entropy,
        Suite::Operator,
        Suite::ClosedForms,
        Suite::Lemma,
        Suite::Constants,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Basis => "basis",
            Suite::Invariance => "invariance",
            Suite::Entropy => "entropy",
            Suite::Operator => "operator",
            Suite::ClosedForms => "closed-forms",
            Suite::Lemma => "lemma",
            Suite::Conservation => "conservation",
            Suite::Coupling => "coupling",
            Suite::Energy => "energy",
            Suite::Correction => "correction",
            Suite::Constants => "constants",
        }
    }

    /// 1-based acceptance criterion, if this suite is one.
    pub fn criterion(self) -> Option<usize> {
        Suite::CRITERIA.iter().position(|&s| s == self).map(|k| k + 1)
    }

    pub fn title(self) -> &'static str {
        match self {
            Suite::Basis => "basis orthonormality",
            Suite::Invariance => "collision invariance",
            Suite::Entropy => "entropy production sign",
            Suite::Operator => "linearized operator structure",
            Suite::ClosedForms => "closed-form flux norms",
            Suite::Lemma => "pointwise fluid lower bound",
            Suite::Conservation => "conservation laws",
            Suite::Coupling => "mixture mass coupling",
            Suite::Energy => "energy boundedness",
            Suite::Correction => "nonzero-mean antiderivative correction",
            Suite::Constants => "operator and fluid constants",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Suite::ALL
            .iter()
            .copied()
            .find(|x| x.name() == key || x.criterion().map(|c| c.to_string()) == Some(key.clone()))
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
                Error::InvalidParams(format!("unknown suite '{s}', expected one of {}", names.join(", ")))
            })
    }
}

/// Periodic run used for the refinement study of the fluid laws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConservationScenario {
    /// Coarse cell count; the fine run doubles it.
    pub nx: usize,
    pub half_width: f64,
    pub t_final: f64,
    /// Levels before this time are left out of the residual maximum.
    pub skip: f64,
    pub cfl: f64,
    pub width: f64,
    pub micro: f64,
    pub min_ratio: f64,
    pub max_drift: f64,
}

impl Default for ConservationScenario {
    fn default() -> Self {
        Self { nx: 32, half_width: 12.0, t_final: 5.0, skip: 0.5, cfl: 0.5, width: 3.0, micro: 0.0, min_ratio: 1.7, max_drift: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CouplingScenario {
    pub nx: usize,
    pub half_width: f64,
    pub t_final: f64,
    pub min_factor: f64,
}

impl Default for CouplingScenario {
    fn default() -> Self {
        Self { nx: 64, half_width: 20.0, t_final: 1.0, min_factor: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyScenario {
    /// Velocity nodes per axis.
    pub nv: usize,
    pub nx: usize,
    pub half_width: f64,
    pub t_final: f64,
    pub amplitude: f64,
    pub energy_factor: f64,
    /// Bound on `sum_x ||f1||^2` at the end relative to its peak.
    pub micro_decay: f64,
}

impl Default for EnergyScenario {
    fn default() -> Self {
        Self { nv: 16, nx: 128, half_width: 20.0, t_final: 10.0, amplitude: 1e-3, energy_factor: 10.0, micro_decay: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionScenario {
    pub nx: usize,
    pub half_width: f64,
    pub t_final: f64,
    pub total_tol: f64,
    pub edge_tol: f64,
}

impl Default for CorrectionScenario {
    fn default() -> Self {
        Self { nx: 64, half_width: 12.0, t_final: 1.0, total_tol: 1e-8, edge_tol: 1e-6 }
    }
}

/// Sample sizes, grids and tolerances of the suites.
///
/// `seed`, `mixture` and `collision` are not (de)serialized: configuration
/// files set them once at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip, default = "default_mixture")]
    pub mixture: MixtureSpec,
    #[serde(skip)]
    pub collision: CollisionConfig,
    /// Nodes per axis for the basis and closed-form checks (default box).
    pub basis_grid: usize,
    /// Nodes per axis of the quadrature oracle for the closed forms.
    pub oracle_grid: usize,
    /// Operator grid and its one-step refinement (operator box).
    pub operator_grid: usize,
    pub refined_grid: usize,
    pub basis_mixtures: usize,
    pub random_fields: usize,
    /// Events kept for the nonlinear checks; 0 keeps all.
    pub subsample_events: usize,
    /// Events kept for `N` inside time loops.
    pub nonlinear_events: usize,
    pub closed_form_mixtures: usize,
    pub closed_form_states: usize,
    pub lemma_mixtures: usize,
    pub lemma_states: usize,
    pub gap_stability: f64,
    pub conservation: ConservationScenario,
    pub coupling: CouplingScenario,
    pub energy: EnergyScenario,
    pub correction: CorrectionScenario,
}

pub fn default_mixture() -> MixtureSpec {
    MixtureSpec { masses: vec![1.0, 1.5], densities: vec![0.7, 1.3], beta: vec![vec![1.0, 0.8], vec![0.8, 1.2]] }
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            mixture: default_mixture(),
            collision: CollisionConfig::default(),
            basis_grid: 24,
            oracle_grid: 32,
            operator_grid: 12,
            refined_grid: 16,
            basis_mixtures: 20,
            random_fields: 100,
            subsample_events: 300_000,
            nonlinear_events: 100_000,
            closed_form_mixtures: 10,
            closed_form_states: 1000,
            lemma_mixtures: 10,
            lemma_states: 10_000,
            gap_stability: 0.1,
            conservation: ConservationScenario::default(),
            coupling: CouplingScenario::default(),
            energy: EnergyScenario::default(),
            correction: CorrectionScenario::default(),
        }
    }
}

/// Outcome of one suite.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub records: Vec<Record>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| !r.pass)
    }
}

/// Random hard-sphere mixture with `n_species` species: masses in
/// `[0.7, 1.7)`, densities in `[0.5, 2)`, symmetric `beta` in `[0.5, 1.5)`.
pub fn random_mixture(rng: &mut impl Rng, n_species: usize) -> Params {
    let masses = (0..n_species).map(|_| rng.gen_range(0.7..1.7)).collect();
    let densities = (0..n_species).map(|_| rng.gen_range(0.5..2.0)).collect();
    let mut beta = Array2::zeros((n_species, n_species));
    for i in 0..n_species {
        for j in 0..=i {
            let b = rng.gen_range(0.5..1.5);
            beta[[i, j]] = b;
            beta[[j, i]] = b;
        }
    }
    MixtureParams::new(masses, densities, beta).expect("random mixture is valid")
}

/// `nM exp(amplitude tanh p(v))` for a random quadratic `p`, optionally
/// times node-wise noise in `[1, 1.3)`. Always positive.
pub fn random_positive_field(params: &Params, grid: &Grid, rng: &mut impl Rng, amplitude: f64, noisy: bool) -> Field {
    let ns = params.n_species();
    let nv = grid.len();
    let eq = equilibrium(params, grid);
    let c: Vec<f64> = (0..9 + ns).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let noise: Vec<f64> = (0..ns * nv).map(|_| if noisy { 1.0 + 0.3 * rng.gen::<f64>() } else { 1.0 }).collect();
    let s = params.max_thermal_speed();
    Field::from_fn(ns, nv, |(i, a)| {
        let v = grid.node(a);
        let w = [v[0] / s, v[1] / s, v[2] / s];
        let r2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
        let p = c[0] * w[0]
            + c[1] * w[1]
            + c[2] * w[2]
            + c[3] * w[0] * w[1]
            + c[4] * w[1] * w[2]
            + c[5] * w[0] * w[2]
            + c[6] * (r2 - 3.0) / 3.0
            + c[7] * (w[0] * w[0] - w[1] * w[1])
            + c[8] * (w[2] * w[2] - r2 / 3.0)
            + c[9 + i];
        eq.values[[i, a]] * (amplitude * p.tanh()).exp() * noise[i * nv + a]
    })
}

/// Maxwellian with common bulk velocity `u` and temperature `temp`.
pub fn shifted_maxwellian(params: &Params, grid: &Grid, u: [f64; 3], temp: f64) -> Field {
    Field::from_fn(params.n_species(), grid.len(), |(i, a)| {
        let v = grid.node(a);
        let m = params.mass(i);
        let d2 = (v[0] - u[0]).powi(2) + (v[1] - u[1]).powi(2) + (v[2] - u[2]).powi(2);
        params.density(i) * (m / (2.0 * std::f64::consts::PI * temp)).powf(1.5) * (-m * d2 / (2.0 * temp)).exp()
    })
}

/// Largest `|<q, psi_k>| / (||q|| ||psi_k||)` over the collision invariants
/// `psi_k = (nM)^{-1/2} chi^k`.
pub fn invariant_defect(q: &Field, params: &Params, grid: &Grid) -> Result<f64> {
    let basis = build_basis(params, grid)?;
    let sq = sqrt_equilibrium(params, grid);
    let w = grid.weight();
    let qs = q.as_slice();
    let qn = qs.iter().map(|x| x * x).sum::<f64>().sqrt();
    if qn == 0.0 {
        return Ok(0.0);
    }
    let mut worst = 0.0f64;
    for row in basis.matrix().rows() {
        let (mut num, mut den) = (0.0, 0.0);
        for ((&e, &s), &x) in row.iter().zip(sq.as_slice()).zip(qs) {
            let psi = e / s;
            num += psi * x;
            den += psi * psi;
        }
        worst = worst.max((num * w).abs() / (qn * den.sqrt() * w));
    }
    Ok(worst)
}

fn gram_defect(g: &Array2<f64>) -> f64 {
    g.indexed_iter().map(|((i, j), &x)| (x - if i == j { 1.0 } else { 0.0 }).abs()).fold(0.0, f64::max)
}

fn random_gradient(rng: &mut impl Rng, n_species: usize) -> FluidState<f64> {
    let c: Vec<f64> = (0..n_species + 4).map(|_| rng.sample(StandardNormal)).collect();
    FluidState::from_coords(&c).expect("coordinate count")
}

struct Entry {
    tensor: CollisionTensor<f64>,
    ops: Option<Rc<Operators<f64>>>,
    spectral: Option<std::result::Result<SpectralReport, String>>,
}

/// Runs suites and keeps the operators they share.
pub struct Verifier {
    pub cfg: VerifyConfig,
    pub cache_dir: Option<PathBuf>,
    params: Params,
    entries: HashMap<(Vec<u8>, usize), Entry>,
}

impl Verifier {
    pub fn new(cfg: VerifyConfig, cache_dir: Option<PathBuf>) -> Result<Self> {
        let params = MixtureParams::from_spec(&cfg.mixture)?;
        cfg.collision.validate()?;
        if cfg.operator_grid >= cfg.refined_grid {
            return Err(Error::InvalidParams(format!(
                "refined_grid {} must exceed operator_grid {}",
                cfg.refined_grid, cfg.operator_grid
            )));
        }
        Ok(Self { cfg, cache_dir, params, entries: HashMap::new() })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    fn rng(&self, suite: Suite) -> ChaCha8Rng {
        let k = Suite::ALL.iter().position(|&s| s == suite).unwrap() as u64;
        ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(1000).wrapping_add(k))
    }

    fn entry(&mut self, params: &Params, nv: usize) -> Result<&mut Entry> {
        let key = (params.key_bytes(), nv);
        if !self.entries.contains_key(&key) {
            let grid = VelocityGrid::for_operator(params, nv)?;
            let tensor = CollisionTensor::new(params, &grid, &self.cfg.collision)?;
            self.entries.insert(key.clone(), Entry { tensor, ops: None, spectral: None });
        }
        Ok(self.entries.get_mut(&key).unwrap())
    }

    /// Collision tensor on the operator box.
    pub fn tensor(&mut self, params: &Params, nv: usize) -> Result<&CollisionTensor<f64>> {
        Ok(&self.entry(params, nv)?.tensor)
    }

    /// Linearized operator (disk cached when a directory is set) plus a
    /// subsampled tensor for `N`.
    pub fn operators(&mut self, params: &Params, nv: usize) -> Result<Rc<Operators<f64>>> {
        let dir = self.cache_dir.clone();
        let events = self.cfg.nonlinear_events;
        let seed = self.cfg.seed;
        let e = self.entry(params, nv)?;
        if let Some(ops) = &e.ops {
            return Ok(ops.clone());
        }
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        let linear = LinearizedOperator::cached(&e.tensor, dir.as_deref())?;
        let grid = e.tensor.grid().clone();
        let basis = build_basis(params, &grid)?;
        let nonlinear = if events > 0 { Some(e.tensor.subsample(events, seed)?) } else { None };
        let ops = Rc::new(Operators { params: params.clone(), grid, basis, linear, nonlinear });
        e.ops = Some(ops.clone());
        Ok(ops)
    }

    /// Spectral report, or the solver's complaint as a string.
    pub fn spectral(&mut self, params: &Params, nv: usize) -> Result<std::result::Result<SpectralReport, String>> {
        let ops = self.operators(params, nv)?;
        let e = self.entry(params, nv)?;
        if e.spectral.is_none() {
            let r = estimate_spectral_gap(&ops.linear, &ops.basis, &ops.grid, &SpectralConfig::default());
            e.spectral = Some(match r {
                Ok(rep) => Ok(rep),
                Err(err @ Error::KernelDimension { .. }) => Err(err.to_string()),
                Err(err) => return Err(err),
            });
        }
        Ok(e.spectral.clone().unwrap())
    }

    pub fn run(&mut self, suite: Suite) -> Result<SuiteReport> {
        let start = Instant::now();
        let records = match suite {
            Suite::Basis => self.basis()?,
            Suite::Invariance => self.invariance()?,
            Suite::Entropy => self.entropy()?,
            Suite::Operator => self.operator()?,
            Suite::ClosedForms => self.closed_forms()?,
            Suite::Lemma => self.lemma()?,
            Suite::Conservation => self.conservation()?,
            Suite::Coupling => self.coupling()?,
            Suite::Energy => self.energy()?,
            Suite::Correction => self.correction()?,
            Suite::Constants => self.constants()?,
        };
        Ok(SuiteReport { suite, records, elapsed: start.elapsed() })
    }

    fn basis(&mut self) -> Result<Vec<Record>> {
        let mut rng = self.rng(Suite::Basis);
        let mut worst = 0.0f64;
        for k in 0..self.cfg.basis_mixtures {
            let p = random_mixture(&mut rng, 1 + k % 4);
            let grid = VelocityGrid::for_mixture(&p, self.cfg.basis_grid)?;
            worst = worst.max(gram_defect(build_basis(&p, &grid)?.gram()));
        }
        let main = VelocityGrid::for_mixture(&self.params, self.cfg.basis_grid)?;
        let own = gram_defect(build_basis(&self.params, &main)?.gram());
        Ok(vec![
            Record::at_most(0.0, "basis.gram_defect", worst, 1e-6, "basis-orthonormality"),
            Record::at_most(0.0, "basis.gram_defect_config", own, 1e-6, "basis-orthonormality"),
        ])
    }

    fn nonlinear_tensor(&mut self) -> Result<CollisionTensor<f64>> {
        let (events, seed) = (self.cfg.subsample_events, self.cfg.seed);
        let p = self.params.clone();
        let t = self.tensor(&p, self.cfg.operator_grid)?;
        if events > 0 && events < t.n_events() {
            t.subsample(events, seed)
        } else {
            Ok(t.clone())
        }
    }

    fn invariance(&mut self) -> Result<Vec<Record>> {
        let t = self.nonlinear_tensor()?;
        let mut rng = self.rng(Suite::Invariance);
        let (p, g) = (t.params().clone(), t.grid().clone());
        let mut worst = 0.0f64;
        for k in 0..self.cfg.random_fields {
            let f = random_positive_field(&p, &g, &mut rng, 1.0, k % 2 == 1);
            let q = t.apply_q(&f, &f)?;
            worst = worst.max(invariant_defect(&q, &p, &g)?);
        }
        Ok(vec![
            Record::at_most(0.0, "invariance.max_relative", worst, 1e-5, "collision-invariance"),
            Record::info(0.0, "invariance.events", t.n_events() as f64, "collision-invariance"),
        ])
    }

    fn entropy(&mut self) -> Result<Vec<Record>> {
        let t = self.nonlinear_tensor()?;
        let mut rng = self.rng(Suite::Entropy);
        let (p, g) = (t.params().clone(), t.grid().clone());
        let mut worst = f64::NEG_INFINITY;
        for k in 0..self.cfg.random_fields {
            let f = random_positive_field(&p, &g, &mut rng, 1.0, k % 2 == 1);
            worst = worst.max(t.entropy_production(&f)?);
        }
        let d_eq = t.entropy_production(&equilibrium(&p, &g))?;
        let mut shifted = 0.0f64;
        for _ in 0..20 {
            let dir: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-12);
            let speed = 0.2 * rng.gen::<f64>();
            let u = dir.map(|x| x * speed / len);
            let temp = 1.0 + rng.gen_range(-0.1..0.1);
            shifted = shifted.max(t.entropy_production(&shifted_maxwellian(&p, &g, u, temp))?.abs());
        }
        let r = "entropy-sign";
        Ok(vec![
            Record::at_most(0.0, "entropy.max_production", worst, 1e-8, r),
            Record::at_most(0.0, "entropy.equilibrium", d_eq.abs(), 1e-8, r),
            Record::at_most(0.0, "entropy.shifted_maxwellian", shifted, 1e-6, r),
        ])
    }

    fn operator(&mut self) -> Result<Vec<Record>> {
        let p = self.params.clone();
        let r = "operator-structure";
        let mut out = Vec::new();
        let mut gaps = Vec::new();
        for nv in [self.cfg.operator_grid, self.cfg.refined_grid] {
            let ops = self.operators(&p, nv)?;
            let tag = format!("operator.n{nv}");
            out.push(Record::at_most(0.0, format!("{tag}.symmetry"), ops.linear.symmetry_defect(), 1e-5, r));
            match self.spectral(&p, nv)? {
                Ok(rep) => {
                    let k = p.n_invariants();
                    out.push(Record::new(0.0, format!("{tag}.kernel_dim"), rep.kernel_dim as f64, k as f64, rep.kernel_dim == k, r));
                    out.push(Record::at_most(0.0, format!("{tag}.principal_angle"), rep.max_principal_angle, 1e-4, r));
                    out.push(Record::new(0.0, format!("{tag}.gap"), rep.gap, 0.0, rep.gap > 0.0, r));
                    out.push(Record::info(0.0, format!("{tag}.nu0"), rep.nu0, r));
                    gaps.push(rep.gap);
                }
                Err(msg) => {
                    out.push(Record::new(0.0, format!("{tag}.kernel_dim"), f64::NAN, p.n_invariants() as f64, false, r));
                    eprintln!("{tag}: {msg}");
                }
            }
        }
        if let [g0, g1] = gaps[..] {
            let change = (g1 - g0).abs() / g1.abs().max(g0.abs());
            out.push(Record::at_most(0.0, "operator.gap_change", change, self.cfg.gap_stability, r));
        }
        Ok(out)
    }

    fn closed_forms(&mut self) -> Result<Vec<Record>> {
        let mut rng = self.rng(Suite::ClosedForms);
        let mut worst = 0.0f64;
        for k in 0..self.cfg.closed_form_mixtures {
            let p = if k == 0 { self.params.clone() } else { random_mixture(&mut rng, 1 + k % 4) };
            let grid = VelocityGrid::for_mixture(&p, self.cfg.oracle_grid)?;
            let basis = build_basis(&p, &grid)?;
            // quadrature matrices of |v1 f0|^2 and |P0 v1 f0|^2 in fluid coordinates
            let e = basis.matrix();
            let nv = grid.len();
            let v1 = Array1::from_iter((0..basis.dim()).map(|c| grid.node(c % nv)[0]));
            let ve = &e * &v1;
            let w = grid.weight();
            let m1 = ve.dot(&ve.t()) * w;
            let b = e.dot(&ve.t()) * w;
            let m0 = b.t().dot(&linalg::inverse(basis.gram())?.dot(&b));
            for _ in 0..self.cfg.closed_form_states {
                let g = random_gradient(&mut rng, p.n_species());
                let c = Array1::from(g.to_coords());
                let full = c.dot(&m1.dot(&c));
                let p0 = c.dot(&m0.dot(&c));
                let closed = [
                    micromacro::norm_v1_f0_sq(&g, &p)?,
                    micromacro::norm_p0_v1_f0_sq(&g, &p)?,
                    micromacro::norm_p1_v1_f0_sq(&g, &p)?,
                ];
                for (x, y) in closed.iter().zip([full, p0, full - p0]) {
                    worst = worst.max((x - y).abs() / full);
                }
            }
        }
        Ok(vec![Record::at_most(0.0, "closed_forms.max_relative", worst, 1e-6, "closed-form-identities")])
    }

    fn lemma(&mut self) -> Result<Vec<Record>> {
        let mut rng = self.rng(Suite::Lemma);
        let r = "pointwise-lower-bound";
        let per = self.cfg.lemma_states.div_ceil(self.cfg.lemma_mixtures.max(1));
        let mut worst = f64::NEG_INFINITY;
        for k in 0..self.cfg.lemma_mixtures.max(1) {
            let p = if k == 0 { self.params.clone() } else { random_mixture(&mut rng, 1 + k % 4) };
            let t0 = micromacro::theta0(&p);
            for _ in 0..per {
                let g = random_gradient(&mut rng, p.n_species());
                for theta in [t0 / 4.0, t0 / 2.0] {
                    let (lhs, rhs) = micromacro::pointwise_lower_bound(&g, theta, &p)?;
                    worst = worst.max(rhs - lhs);
                }
            }
        }
        let unit = micromacro::theta0(&MixtureParams::<f64>::unit());
        Ok(vec![
            Record::at_most(0.0, "lemma.max_violation", worst, 1e-10, r),
            Record::new(0.0, "lemma.theta0_unit", unit, 1.0 / 13.0, unit == 1.0 / 13.0, r),
        ])
    }

    fn constants(&mut self) -> Result<Vec<Record>> {
        let p = self.params.clone();
        let nv = self.cfg.operator_grid;
        let ops = self.operators(&p, nv)?;
        let rep = self.spectral(&p, nv)?.map_err(Error::Numerical)?;
        let c = estimate_constants(&ops.linear, &ops.basis, &ops.grid, &p, &rep, None)?;
        let mut out = c.records(0.0);
        let ok = c.theta > 0.0 && c.theta < c.theta0;
        out.push(Record::new(0.0, "const.theta_in_range", c.theta, c.theta0, ok, "constants"));
        Ok(out)
    }

    fn conservation(&mut self) -> Result<Vec<Record>> {
        let p = self.params.clone();
        let ops = self.operators(&p, self.cfg.operator_grid)?;
        let sc = self.cfg.conservation.clone();
        let r = "conservation-laws";
        let laws = p.n_invariants();
        let mut out = Vec::new();
        let mut worst = Vec::new();
        for nx in [sc.nx, 2 * sc.nx] {
            let space = SpatialGrid::new(-sc.half_width, sc.half_width, nx, Boundary::Periodic)?;
            let cfg = SchemeConfig { cfl: sc.cfl, mode: Mode::Micromacro, ..Default::default() };
            let stepper = Stepper::new(&ops, space.clone(), cfg)?;
            let prof = InitialProfile { shape: Shape::Gaussian, micro: sc.micro, width: sc.width, ..Default::default() };
            let init = make_initial(&prof, &ops, &space, [0; 32])?;
            let v1 = ops.v1();
            let mut levels = vec![LevelSummary::capture(&init.clone().with_split(&ops.basis), &ops.basis, &space, &v1)];
            let t0 = totals(&init, &ops.basis, &space);
            let last = stepper.run(init, sc.t_final, |_, s| {
                levels.push(LevelSummary::capture(s, &ops.basis, &space, &v1));
                Ok(())
            })?;
            let res = conservation_residuals(&levels, &p, &space)?;
            let m = res.iter().filter(|l| l.t >= sc.skip).flat_map(|l| l.max[..laws].iter().copied()).fold(0.0, f64::max);
            let scale = t0.iter().map(|x| x.abs()).fold(0.0, f64::max);
            let drift = relative_drift(&t0, &totals(&last, &ops.basis, &space), scale);
            out.push(Record::info(last.t, format!("conservation.nx{nx}.max_residual"), m, r));
            out.push(Record::at_most(last.t, format!("conservation.nx{nx}.total_drift"), drift, sc.max_drift, r));
            worst.push(m);
        }
        let ratio = worst[0] / worst[1];
        out.push(Record::new(sc.t_final, "conservation.refinement_ratio", ratio, sc.min_ratio, ratio >= sc.min_ratio, r));
        Ok(out)
    }

    /// Largest mass-law bracket over a short run with an excited `f1`.
    fn mass_bracket(&mut self, p: &Params) -> Result<f64> {
        let ops = self.operators(p, self.cfg.operator_grid)?;
        let sc = self.cfg.coupling.clone();
        let space = SpatialGrid::new(-sc.half_width, sc.half_width, sc.nx, Boundary::Periodic)?;
        let stepper = Stepper::new(&ops, space.clone(), SchemeConfig::default())?;
        let init = make_initial(&InitialProfile { micro: 1.0, ..Default::default() }, &ops, &space, [0; 32])?;
        let v1 = ops.v1();
        let ns = p.n_species();
        let bracket = |s: &SimState<f64>| {
            let l = LevelSummary::capture(s, &ops.basis, &space, &v1);
            l.bracket.columns().into_iter().take(ns).flat_map(|c| c.to_vec()).fold(0.0f64, |a, x| a.max(x.abs()))
        };
        let mut worst = bracket(&init);
        stepper.run(init, sc.t_final, |_, s| {
            worst = worst.max(bracket(s));
            Ok(())
        })?;
        Ok(worst)
    }

    fn coupling(&mut self) -> Result<Vec<Record>> {
        let r = "mixture-coupling";
        let p = self.params.clone();
        if p.n_species() < 2 {
            return Err(Error::InvalidParams("the coupling suite needs at least two species".into()));
        }
        let two = self.mass_bracket(&p)?;
        let one = self.mass_bracket(&MixtureParams::unit())?;
        let factor = self.cfg.coupling.min_factor;
        Ok(vec![
            Record::info(0.0, "coupling.single_species_bracket", one, r),
            Record::new(0.0, "coupling.mixture_bracket", two, factor * one, two > factor * one, r),
        ])
    }

    fn energy(&mut self) -> Result<Vec<Record>> {
        let p = self.params.clone();
        let sc = self.cfg.energy.clone();
        let ops = self.operators(&p, sc.nv)?;
        let rep = self.spectral(&p, sc.nv)?.map_err(Error::Numerical)?;
        let constants = estimate_constants(&ops.linear, &ops.basis, &ops.grid, &p, &rep, None)?;
        let space = SpatialGrid::new(-sc.half_width, sc.half_width, sc.nx, Boundary::Periodic)?;
        let stepper = Stepper::new(&ops, space.clone(), SchemeConfig::default())?;
        let init = make_initial(&InitialProfile { amplitude: sc.amplitude, ..Default::default() }, &ops, &space, [0; 32])?;
        let dcfg = DiagnosticsConfig { energy_factor: sc.energy_factor, keep_levels: false, ..Default::default() };
        let mut diag = RunDiagnostics::new(&ops, space, constants, dcfg, &init);
        let mut out = Vec::new();
        stepper.run(init, sc.t_final, |prev, next| {
            out.extend(diag.observe(prev, next)?.into_iter().filter(|r| !r.pass));
            Ok(())
        })?;
        out.extend(diag.finish()?);
        let e = &diag.energy;
        let peak = e.micro.iter().copied().fold(0.0, f64::max);
        let last = e.micro.last().copied().unwrap_or(0.0);
        let decay = if peak > 0.0 { last / peak } else { 0.0 };
        out.push(Record::at_most(e.t.last().copied().unwrap_or(0.0), "micro.decay", decay, sc.micro_decay, "micro-decay"));
        Ok(out)
    }

    fn correction(&mut self) -> Result<Vec<Record>> {
        let p = self.params.clone();
        let ops = self.operators(&p, self.cfg.operator_grid)?;
        let sc = self.cfg.correction.clone();
        let r = "antiderivative-correction";
        let space = SpatialGrid::new(-sc.half_width, sc.half_width, sc.nx, Boundary::Periodic)?;
        let stepper = Stepper::new(&ops, space.clone(), SchemeConfig::default())?;
        let init = make_initial(&InitialProfile { shape: Shape::Gaussian, ..Default::default() }, &ops, &space, [0; 32])?;
        let total = totals(&init, &ops.basis, &space);
        let scale = total.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let moll = Mollifier::new(&space);
        let v1 = ops.v1();
        let mut far = 0.0f64;
        let mut edge = 0.0f64;
        let mut levels = Vec::new();
        let mut check = |s: &SimState<f64>| {
            let u = s.fluid(&ops.basis);
            let w = antiderivative_w0(&u, &space, &p, Some((&moll, &total)));
            let n = space.n - 1;
            for (k, &f) in total.iter().enumerate() {
                far = far.max((w.w[[n, k]] - f).abs() / scale);
                edge = edge.max(w.corrected.as_ref().unwrap()[[n, k]].abs());
            }
            levels.push(LevelSummary::capture(s, &ops.basis, &space, &v1));
        };
        check(&init);
        stepper.run(init, sc.t_final, |_, s| {
            check(s);
            Ok(())
        })?;
        let w0 = w0_residuals(&levels, &p, &space)?.into_iter().fold(0.0, f64::max);
        Ok(vec![
            Record::info(0.0, "correction.total_scale", scale, r),
            Record::new(0.0, "correction.nonzero_total", scale, 0.0, scale > 0.0, r),
            Record::at_most(sc.t_final, "correction.far_field", far, sc.total_tol, r),
            Record::at_most(sc.t_final, "correction.corrected_edge", edge, sc.edge_tol, r),
            Record::info(sc.t_final, "correction.w0_residual", w0, r),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
            if let Some(c) = s.criterion() {
                assert_eq!(c.to_string().parse::<Suite>().unwrap(), s);
            }
        }
        assert_eq!(Suite::Constants.criterion(), None);
        assert!("closed_forms".parse::<Suite>().is_ok());
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn random_fields_are_positive() {
        let p = MixtureParams::<f64>::unit();
        let g = VelocityGrid::for_operator(&p, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for noisy in [false, true] {
            let f = random_positive_field(&p, &g, &mut rng, 1.0, noisy);
            assert!(f.as_slice().iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn invariants_of_a_pure_invariant() {
        // q = nM itself is not orthogonal to the mass invariant
        let p = MixtureParams::<f64>::unit();
        let g = VelocityGrid::for_operator(&p, 8).unwrap();
        let q = equilibrium(&p, &g);
        assert!(invariant_defect(&q, &p, &g).unwrap() > 0.1);
        let z = Field::zeros(1, g.len());
        assert_eq!(invariant_defect(&z, &p, &g).unwrap(), 0.0);
    }

    #[test]
    fn cheap_suites_pass() {
        let cfg = VerifyConfig::default();
        let mut v = Verifier::new(cfg, None).unwrap();
        for s in [Suite::Basis, Suite::ClosedForms, Suite::Lemma] {
            let rep = v.run(s).unwrap();
            assert!(rep.passed(), "{s}: {:?}", rep.records);
        }
    }
}
