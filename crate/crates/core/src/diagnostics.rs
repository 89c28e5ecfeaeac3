//! Conservation residuals, the antiderivative `W0`, energy functionals,
//! the integrated lower bound and smallness monitors.
//!
//! Everything here is streaming: a [`RunDiagnostics`] sees each pair of
//! adjacent time levels once and keeps only reductions plus a small
//! [`LevelSummary`] (fluid coordinates) per level.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::collision::{spectral, LinearizedOperator, SpectralReport};
use crate::error::{Error, Result};
use crate::linalg;
use crate::micromacro::{self, FluidConstants};
use crate::mixture::{ell_coefficients, FluidState, MacroBasis, MixtureParams, VelocityGrid};
use crate::scalar::Real;
use crate::transport::{Operators, SimState, SpatialGrid};

/// One diagnostic value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: f64,
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub check_ref: String,
}

impl Record {
    pub fn new(t: f64, name: impl Into<String>, value: f64, tolerance: f64, pass: bool, check_ref: &str) -> Self {
        Self { t, name: name.into(), value, tolerance, pass, check_ref: check_ref.to_string() }
    }

    /// Passes when `value <= tolerance`.
    pub fn at_most(t: f64, name: impl Into<String>, value: f64, tolerance: f64, check_ref: &str) -> Self {
        Self::new(t, name, value, tolerance, value.is_finite() && value <= tolerance, check_ref)
    }

    /// Informational value, always passes.
    pub fn info(t: f64, name: impl Into<String>, value: f64, check_ref: &str) -> Self {
        Self::new(t, name, value, f64::INFINITY, true, check_ref)
    }

    pub fn to_json(&self) -> String {
        self.to_json_tagged(None)
    }

    /// JSON line with an extra `config_hash` field when given.
    pub fn to_json_tagged(&self, config_hash: Option<&str>) -> String {
        // infinities are not JSON; the writer maps them to null
        let mut out = RecordOut::from(self);
        out.config_hash = config_hash;
        serde_json::to_string(&out).expect("record serializes")
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    t: f64,
    name: &'a str,
    value: Option<f64>,
    tolerance: Option<f64>,
    pass: bool,
    check_ref: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<&'a str>,
}

impl<'a> From<&'a Record> for RecordOut<'a> {
    fn from(r: &'a Record) -> Self {
        let fin = |x: f64| x.is_finite().then_some(x);
        Self { t: r.t, name: &r.name, value: fin(r.value), tolerance: fin(r.tolerance), pass: r.pass, check_ref: &r.check_ref, config_hash: None }
    }
}

/// Parses one NDJSON line back into a record (`null` becomes infinity for
/// tolerances and NaN for values).
pub fn parse_record(line: &str) -> Result<Record> {
    #[derive(Deserialize)]
    struct In {
        t: f64,
        name: String,
        value: Option<f64>,
        tolerance: Option<f64>,
        pass: bool,
        check_ref: String,
    }
    let r: In = serde_json::from_str(line).map_err(|e| Error::InvalidParams(format!("bad record: {e}")))?;
    Ok(Record {
        t: r.t,
        name: r.name,
        value: r.value.unwrap_or(f64::NAN),
        tolerance: r.tolerance.unwrap_or(f64::INFINITY),
        pass: r.pass,
        check_ref: r.check_ref,
    })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SummaryRow {
    pub count: usize,
    pub failures: usize,
    pub last: f64,
    pub worst: f64,
    pub tolerance: f64,
    pub check_ref: String,
}

/// Writes records as NDJSON and keeps a per-name summary.
pub struct RecordSink<W: Write> {
    out: W,
    tag: Option<String>,
    rows: BTreeMap<String, SummaryRow>,
}

impl<W: Write> RecordSink<W> {
    pub fn new(out: W) -> Self {
        Self { out, tag: None, rows: BTreeMap::new() }
    }

    /// Every line also carries `config_hash`.
    pub fn with_config_hash(out: W, hash: impl Into<String>) -> Self {
        Self { out, tag: Some(hash.into()), rows: BTreeMap::new() }
    }

    pub fn push(&mut self, r: &Record) -> Result<()> {
        writeln!(self.out, "{}", r.to_json_tagged(self.tag.as_deref()))?;
        let row = self.rows.entry(r.name.clone()).or_insert_with(|| SummaryRow {
            worst: f64::NEG_INFINITY,
            check_ref: r.check_ref.clone(),
            ..Default::default()
        });
        row.count += 1;
        row.failures += usize::from(!r.pass);
        row.last = r.value;
        row.worst = row.worst.max(r.value);
        row.tolerance = r.tolerance;
        Ok(())
    }

    pub fn extend<'r>(&mut self, rs: impl IntoIterator<Item = &'r Record>) -> Result<()> {
        for r in rs {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn failures(&self) -> usize {
        self.rows.values().map(|r| r.failures).sum()
    }

    pub fn rows(&self) -> &BTreeMap<String, SummaryRow> {
        &self.rows
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> (W, BTreeMap<String, SummaryRow>) {
        (self.out, self.rows)
    }
}

/// Plain-text summary table.
pub fn summary_table(rows: &BTreeMap<String, SummaryRow>) -> String {
    let width = rows.keys().map(|k| k.len()).max().unwrap_or(4).max(4);
    let mut s = format!(
        "{:<width$}  {:>6}  {:>6}  {:>12}  {:>12}  {:>10}  {}\n",
        "name", "count", "fail", "last", "worst", "tol", "ref"
    );
    for (k, r) in rows {
        let tol = if r.tolerance.is_finite() { format!("{:.3e}", r.tolerance) } else { "-".into() };
        s += &format!(
            "{:<width$}  {:>6}  {:>6}  {:>12.5e}  {:>12.5e}  {:>10}  {}\n",
            k, r.count, r.failures, r.last, r.worst, tol, r.check_ref
        );
    }
    s
}

/// Estimated operator and fluid constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Constants {
    pub nu0: f64,
    pub nu0_bar: f64,
    pub sigma: f64,
    pub c_chi: f64,
    pub c_ker: f64,
    pub k_chi: f64,
    pub c_v: f64,
    pub lambda2: f64,
    pub theta0: f64,
    pub theta: f64,
    pub c_g: f64,
    pub c2: f64,
}

impl Constants {
    pub fn records(&self, t: f64) -> Vec<Record> {
        let r = "constants";
        let mut out = vec![
            Record::at_most(t, "const.sigma_neg", -self.sigma, 0.0, r),
            Record::at_most(t, "const.c_g_neg", -self.c_g, 0.0, r),
        ];
        for (k, v) in [
            ("nu0", self.nu0),
            ("nu0_bar", self.nu0_bar),
            ("c_chi", self.c_chi),
            ("c_ker", self.c_ker),
            ("k_chi", self.k_chi),
            ("c_v", self.c_v),
            ("lambda2", self.lambda2),
            ("theta0", self.theta0),
            ("theta", self.theta),
            ("c2", self.c2),
        ] {
            out.push(Record::info(t, format!("const.{k}"), v, r));
        }
        out
    }
}

/// `sup ||L^{-1} h|| / ||h||` over `h` in the span of `P1(v_1 b_k)`.
pub fn resolvent_on_fluxes<T: Real>(op: &LinearizedOperator<T>, basis: &MacroBasis<T>, grid: &VelocityGrid<T>) -> Result<f64> {
    let ns = basis.n_species();
    let w = grid.weight().f64();
    let mut hs = Vec::new();
    let mut ys = Vec::new();
    for k in 0..basis.len() {
        let h = basis.p1(&micromacro::times_v1(&basis.vector(k), grid, ns))?;
        let hn = h.to_flat();
        if hn.iter().map(|x| x.f64() * x.f64()).sum::<f64>() * w < 1e-20 {
            continue;
        }
        let (y, _) = spectral::solve_complement(op, basis, &hn, 1e-10, 5000)?;
        hs.push(hn.mapv(|x| x.f64()));
        ys.push(y.mapv(|x| x.f64()));
    }
    if hs.is_empty() {
        return Ok(0.0);
    }
    let m = hs.len();
    let gh = Array2::from_shape_fn((m, m), |(a, b)| hs[a].dot(&hs[b]) * w);
    let gy = Array2::from_shape_fn((m, m), |(a, b)| ys[a].dot(&ys[b]) * w);
    let (vals, vecs) = linalg::sym_eigen(&gh);
    let top = vals.last().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..m).filter(|&i| vals[i] > 1e-10 * top).collect();
    let s = Array2::from_shape_fn((m, keep.len()), |(i, j)| vecs[[i, keep[j]]] / vals[keep[j]].sqrt());
    let red = s.t().dot(&gy).dot(&s);
    Ok(linalg::max_eigenvalue(&red).max(0.0).sqrt())
}

pub fn estimate_constants<T: Real>(
    op: &LinearizedOperator<T>,
    basis: &MacroBasis<T>,
    grid: &VelocityGrid<T>,
    params: &MixtureParams<T>,
    spec: &SpectralReport,
    theta: Option<f64>,
) -> Result<Constants> {
    let FluidConstants { c_chi, c_ker, k_chi } = micromacro::fluid_constants(basis, grid, params)?;
    let c_v = resolvent_on_fluxes(op, basis, grid)?;
    let lambda2 = if c_v > 0.0 { spec.gap * spec.nu0 / (c_v * c_v) } else { f64::INFINITY };
    let theta0 = micromacro::theta0(params).f64();
    let theta = match theta {
        Some(t) if !(t > 0.0 && t < theta0) => {
            return Err(Error::InvalidParams(format!("theta {t} outside (0, {theta0})")));
        }
        Some(t) => t,
        None => micromacro::default_theta(params, lambda2.is_finite().then_some(lambda2)),
    };
    Ok(Constants {
        nu0: spec.nu0,
        nu0_bar: spec.nu0_bar,
        sigma: spec.gap,
        c_chi,
        c_ker,
        k_chi,
        c_v,
        lambda2,
        theta0,
        theta,
        c_g: micromacro::min_eig_g(T::c(theta), params)?,
        c2: c_chi + k_chi,
    })
}

/// Smooth compactly supported bump with unit discrete integral, and its
/// cumulative integral at right cell edges.
#[derive(Clone, Debug)]
pub struct Mollifier {
    pub center: f64,
    pub width: f64,
    pub psi: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl Mollifier {
    pub fn new(space: &SpatialGrid) -> Self {
        let center = 0.5 * (space.x_lo + space.x_hi);
        let width = (space.x_hi - space.x_lo) / 8.0;
        let raw: Vec<f64> = space
            .nodes()
            .iter()
            .map(|&x| {
                let y = (x - center) / width;
                if y.abs() < 1.0 {
                    (-1.0 / (1.0 - y * y)).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let total = space.integrate(raw.iter().copied());
        let psi: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = psi
            .iter()
            .map(|&p| {
                acc += p * space.dx();
                acc
            })
            .collect();
        // exact unit plateau right of the support
        let last = *cumulative.last().unwrap();
        for c in cumulative.iter_mut() {
            *c /= last;
        }
        Self { center, width, psi, cumulative }
    }
}

/// Antiderivative of the fluid coordinates at right cell edges, with the
/// correction for nonzero totals.
#[derive(Clone, Debug)]
pub struct AntiderivativeState {
    /// `n_x x (I+4)`: `(R_i, Q^k, E)`.
    pub w: Array2<f64>,
    /// Antiderivative of `l`.
    pub ell: Vec<f64>,
    /// `W - Psi F_in` when a correction is supplied.
    pub corrected: Option<Array2<f64>>,
}

impl AntiderivativeState {
    /// The field that enters the energy: corrected when available.
    pub fn effective(&self) -> &Array2<f64> {
        self.corrected.as_ref().unwrap_or(&self.w)
    }
}

pub fn antiderivative_w0<T: Real>(
    u: &Array2<f64>,
    space: &SpatialGrid,
    params: &MixtureParams<T>,
    correction: Option<(&Mollifier, &[f64])>,
) -> AntiderivativeState {
    let dx = space.dx();
    let mut w = Array2::zeros(u.raw_dim());
    let mut acc = Array1::<f64>::zeros(u.ncols());
    for (j, row) in u.rows().into_iter().enumerate() {
        acc.scaled_add(dx, &row);
        w.row_mut(j).assign(&acc);
    }
    let c: Vec<f64> = ell_coefficients(params).iter().map(|x| x.f64()).collect();
    let ell = w.rows().into_iter().map(|r| r.iter().zip(&c).map(|(a, b)| a * b).sum()).collect();
    let corrected = correction.map(|(m, total)| {
        let mut wc = w.clone();
        for (j, mut row) in wc.rows_mut().into_iter().enumerate() {
            for (x, &f) in row.iter_mut().zip(total) {
                *x -= m.cumulative[j] * f;
            }
        }
        wc
    });
    AntiderivativeState { w, ell, corrected }
}

/// Fluid coordinates and flux brackets of one time level.
#[derive(Clone, Debug)]
pub struct LevelSummary {
    pub t: f64,
    /// `n_x x (I+4)` coordinates.
    pub u: Array2<f64>,
    /// Coordinates of `P0(v_1 d_x f1)`.
    pub bracket: Array2<f64>,
    /// Coordinates of `P0(v_1 f1)`.
    pub flux1: Array2<f64>,
}

impl LevelSummary {
    pub fn capture<T: Real>(state: &SimState<T>, basis: &MacroBasis<T>, space: &SpatialGrid, v1: &Array1<T>) -> Self {
        let f1 = state.micro(basis);
        let vf1 = &f1 * v1;
        let flux1 = basis.coords_batch(&vf1).mapv(|x| x.f64());
        let bracket = basis.coords_batch(&space.ddx(&vf1)).mapv(|x| x.f64());
        Self { t: state.t, u: state.fluid(basis).mapv(|x| x.f64()), bracket, flux1 }
    }
}

/// Names of the conservation laws in coordinate order, plus `ell`.
pub fn law_names(n_species: usize) -> Vec<String> {
    let mut v: Vec<String> = (0..n_species).map(|i| format!("mass_{i}")).collect();
    v.extend(["momentum_1", "momentum_2", "momentum_3", "energy", "ell"].map(String::from));
    v
}

/// Max-norm residuals of every conservation law at one interior level.
#[derive(Clone, Debug, Serialize)]
pub struct ResidualLevel {
    pub t: f64,
    /// Indexed like [`law_names`].
    pub max: Vec<f64>,
    /// Largest `|ell residual - u . residuals|`.
    pub ell_consistency: f64,
}

/// Centered residuals `d_t u + A d_x u + bracket` of the fluid laws.
pub fn conservation_residuals<T: Real>(
    history: &[LevelSummary],
    params: &MixtureParams<T>,
    space: &SpatialGrid,
) -> Result<Vec<ResidualLevel>> {
    if history.len() < 3 {
        return Err(Error::EmptyHistory(format!("{} levels, need at least 3", history.len())));
    }
    let a = micromacro::flux_matrix_exact(params);
    let ns = params.n_species();
    let c: Vec<f64> = ell_coefficients(params).iter().map(|x| x.f64()).collect();
    let ell_speed = 5.0 / 3.0 * params.sum_n().f64() / params.sum_nm().f64();
    let mut out = Vec::with_capacity(history.len() - 2);
    for w in history.windows(3) {
        let (p, m, n) = (&w[0], &w[1], &w[2]);
        let dt = n.t - p.t;
        let ut = (&n.u - &p.u) / dt;
        let ux = space.ddx(&m.u);
        let res = &ut + &ux.dot(&a.t()) + &m.bracket;
        let mut max: Vec<f64> = res.axis_iter(Axis(1)).map(|col| col.iter().fold(0.0f64, |s, x| s.max(x.abs()))).collect();
        // ell law evaluated from its own closed form
        let mut ell_max = 0.0f64;
        let mut consistency = 0.0f64;
        for j in 0..space.n {
            let lt: f64 = (0..ns + 4).map(|k| c[k] * ut[[j, k]]).sum();
            let lb: f64 = (0..ns + 4).map(|k| c[k] * m.bracket[[j, k]]).sum();
            let r = lt + ell_speed * ux[[j, ns]] + lb;
            let combo: f64 = (0..ns + 4).map(|k| c[k] * res[[j, k]]).sum();
            ell_max = ell_max.max(r.abs());
            consistency = consistency.max((r - combo).abs());
        }
        max.push(ell_max);
        out.push(ResidualLevel { t: m.t, max, ell_consistency: consistency });
    }
    Ok(out)
}

/// Residual of `d_t W + A u_edge + P0(v_1 f1)_edge = 0` at interior levels.
pub fn w0_residuals<T: Real>(history: &[LevelSummary], params: &MixtureParams<T>, space: &SpatialGrid) -> Result<Vec<f64>> {
    if history.len() < 3 {
        return Err(Error::EmptyHistory(format!("{} levels, need at least 3", history.len())));
    }
    let a = micromacro::flux_matrix_exact(params);
    let mut out = Vec::new();
    for w in history.windows(3) {
        let (p, m, n) = (&w[0], &w[1], &w[2]);
        let wp = antiderivative_w0(&p.u, space, params, None).w;
        let wn = antiderivative_w0(&n.u, space, params, None).w;
        let wt = (&wn - &wp) / (n.t - p.t);
        let mut worst = 0.0f64;
        for j in 0..space.n - 1 {
            let ue = (&m.u.row(j) + &m.u.row(j + 1)) * 0.5;
            let fe = (&m.flux1.row(j) + &m.flux1.row(j + 1)) * 0.5;
            let r = &wt.row(j) + &a.dot(&ue) + &fe;
            worst = worst.max(r.iter().fold(0.0f64, |s, x| s.max(x.abs())));
        }
        out.push(worst);
    }
    Ok(out)
}

/// Pointwise-in-time energy terms, each `sum_x || . ||_I^2 dx`.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub w0: f64,
    pub f0: f64,
    pub f: f64,
    pub dx_f: f64,
    pub dt_f: f64,
}

impl EnergyTerms {
    pub fn sum(&self) -> f64 {
        self.w0 + self.f0 + self.f + self.dx_f + self.dt_f
    }

    pub fn max(&self) -> f64 {
        [self.w0, self.f0, self.f, self.dx_f, self.dt_f].into_iter().fold(0.0, f64::max)
    }
}

/// Time-integrated dissipation terms.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Dissipation {
    pub f0: f64,
    pub dx_f0: f64,
    pub f1_w: f64,
    pub dx_f1_w: f64,
    pub dt_f1_w: f64,
}

impl Dissipation {
    fn scaled_add(&mut self, a: f64, o: &Dissipation) {
        self.f0 += a * o.f0;
        self.dx_f0 += a * o.dx_f0;
        self.f1_w += a * o.f1_w;
        self.dx_f1_w += a * o.dx_f1_w;
        self.dt_f1_w += a * o.dt_f1_w;
    }
}

/// Time series of the energy functional.
#[derive(Clone, Debug, Default, Serialize)]
pub struct EnergyReport {
    pub t: Vec<f64>,
    pub terms: Vec<EnergyTerms>,
    /// `max term / I(0)` per level.
    pub ratio: Vec<f64>,
    /// `sum_x ||f1||^2 dx` per level.
    pub micro: Vec<f64>,
    pub dissipation: Dissipation,
    pub initial: f64,
    pub max_ratio: f64,
}

/// Running suprema of the smallness functionals.
#[derive(Clone, Debug, Default, Serialize)]
pub struct SmallnessMonitor {
    /// `sup ||W0|| + ||f0|| + ||(1+|v|)^{1/2} f1||`.
    pub sup: f64,
    /// Same plus `d_x`, `d_t`, `d_xx`, `d_xt` of `f`.
    pub sup_high: f64,
    pub epsilon: Option<f64>,
    pub first_violation: Option<f64>,
}

impl SmallnessMonitor {
    pub fn new(epsilon: Option<f64>) -> Self {
        Self { epsilon, ..Default::default() }
    }

    pub fn update(&mut self, t: f64, low: f64, high: f64) {
        self.sup = self.sup.max(low);
        self.sup_high = self.sup_high.max(high);
        if let (Some(e), None) = (self.epsilon, self.first_violation) {
            if self.sup_high > e {
                self.first_violation = Some(t);
            }
        }
    }
}

/// Integrated lower bound for `||P1(v_1 d_x f0)||^2`.
#[derive(Clone, Debug, Default, Serialize)]
pub struct LowerBoundReport {
    pub theta: f64,
    pub c_g: f64,
    pub c2: f64,
    pub lhs: f64,
    pub grad_f0: f64,
    pub grad_f1: f64,
    pub boundary0: f64,
    pub boundary: f64,
}

impl LowerBoundReport {
    pub fn rhs(&self) -> f64 {
        self.c_g * self.grad_f0 - self.theta * self.c2 * self.grad_f1 + 2.0 * self.theta * (self.boundary - self.boundary0)
    }

    /// Right side re-evaluated at another `theta`.
    pub fn rhs_at<T: Real>(&self, theta: f64, params: &MixtureParams<T>) -> Result<f64> {
        let cg = micromacro::min_eig_g(T::c(theta), params)?;
        Ok(cg * self.grad_f0 - theta * self.c2 * self.grad_f1 + 2.0 * theta * (self.boundary - self.boundary0))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub epsilon: Option<f64>,
    /// Relative slack for the integrated bound.
    pub tol_int: f64,
    /// Allowed `term / I(0)`.
    pub energy_factor: f64,
    /// Emit per-level records every this many steps.
    pub cadence: usize,
    /// Keep a [`LevelSummary`] per step (needed for residuals).
    pub keep_levels: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { epsilon: None, tol_int: 1e-3, energy_factor: 10.0, cadence: 10, keep_levels: true }
    }
}

struct LevelNorms {
    terms: EnergyTerms,
    diss: Dissipation,
    micro: f64,
    low: f64,
    high: f64,
    lhs: f64,
    grad_f0: f64,
    grad_f1: f64,
    boundary: f64,
}

/// Streaming diagnostics over one run.
pub struct RunDiagnostics<'a, T> {
    ops: &'a Operators<T>,
    space: SpatialGrid,
    cfg: DiagnosticsConfig,
    pub constants: Constants,
    v1: Array1<T>,
    growth: Array1<T>,
    pub correction: Option<(Mollifier, Vec<f64>)>,
    pub energy: EnergyReport,
    pub lemma: LowerBoundReport,
    pub monitor: SmallnessMonitor,
    pub levels: Vec<LevelSummary>,
    prev_diss: Option<Dissipation>,
    prev_lemma: Option<(f64, f64, f64)>,
    prev_ddx: Option<Array2<T>>,
    steps: usize,
}

fn sum_sq<T: Real>(a: &Array2<T>) -> f64 {
    a.iter().map(|x| x.f64() * x.f64()).sum()
}

fn weighted_sq<T: Real>(a: &Array2<T>, w: &Array1<T>) -> f64 {
    a.rows().into_iter().map(|r| r.iter().zip(w).map(|(x, g)| (*x * *x * *g).f64()).sum::<f64>()).sum()
}

fn row_norms<T: Real>(a: &Array2<T>, w: Option<&Array1<T>>, quad: f64) -> Vec<f64> {
    a.rows()
        .into_iter()
        .map(|r| {
            let s: f64 = match w {
                Some(w) => r.iter().zip(w).map(|(x, g)| (*x * *x * *g).f64()).sum(),
                None => r.iter().map(|x| x.f64() * x.f64()).sum(),
            };
            (s * quad).sqrt()
        })
        .collect()
}

impl<'a, T: Real> RunDiagnostics<'a, T> {
    /// Activates the nonzero-total correction when the initial totals are
    /// not negligible.
    pub fn new(ops: &'a Operators<T>, space: SpatialGrid, constants: Constants, cfg: DiagnosticsConfig, initial: &SimState<T>) -> Self {
        let u = initial.fluid(&ops.basis);
        let totals: Vec<f64> = u.sum_axis(Axis(0)).iter().map(|x| x.f64() * space.dx()).collect();
        let scale = u.iter().fold(0.0f64, |m, x| m.max(x.f64().abs())) * (space.x_hi - space.x_lo);
        let correction = totals
            .iter()
            .any(|x| x.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE))
            .then(|| (Mollifier::new(&space), totals));
        let growth = Array1::from_iter((0..ops.dim()).map(|i| {
            let nv = ops.grid.len();
            T::one() + ops.grid.speed(i % nv)
        }));
        let lemma = LowerBoundReport { theta: constants.theta, c_g: constants.c_g, c2: constants.c2, ..Default::default() };
        Self {
            v1: ops.v1(),
            growth,
            ops,
            monitor: SmallnessMonitor::new(cfg.epsilon),
            cfg,
            space,
            constants,
            correction,
            energy: EnergyReport::default(),
            lemma,
            levels: Vec::new(),
            prev_diss: None,
            prev_lemma: None,
            prev_ddx: None,
            steps: 0,
        }
    }

    pub fn correction_active(&self) -> bool {
        self.correction.is_some()
    }

    pub fn antiderivative(&self, state: &SimState<T>) -> AntiderivativeState {
        let u = state.fluid(&self.ops.basis).mapv(|x| x.f64());
        antiderivative_w0(&u, &self.space, &self.ops.params, self.correction.as_ref().map(|(m, f)| (m, f.as_slice())))
    }

    fn norms(&mut self, s: &SimState<T>, dt_f: &Array2<T>, dt_f1: &Array2<T>) -> LevelNorms {
        let basis = &self.ops.basis;
        let q = basis.weight().f64();
        let dx = self.space.dx();
        let gram = basis.gram();
        let quad = |v: ndarray::ArrayView1<f64>| v.dot(&gram.dot(&v));
        let u = s.fluid(basis).mapv(|x| x.f64());
        let f1 = s.micro(basis);
        let aw = self.antiderivative(s);
        let w0 = aw.effective();
        let ux = self.space.ddx(&u);
        let fx = self.space.ddx(&s.f);
        let mut f1x = fx.clone();
        basis.p1_batch_inplace(&mut f1x);

        let w0_rows: Vec<f64> = w0.rows().into_iter().map(|r| quad(r)).collect();
        let f0_rows: Vec<f64> = u.rows().into_iter().map(|r| quad(r)).collect();
        let terms = EnergyTerms {
            w0: w0_rows.iter().sum::<f64>() * dx,
            f0: f0_rows.iter().sum::<f64>() * dx,
            f: sum_sq(&s.f) * q * dx,
            dx_f: sum_sq(&fx) * q * dx,
            dt_f: sum_sq(dt_f) * q * dx,
        };
        let diss = Dissipation {
            f0: terms.f0,
            dx_f0: ux.rows().into_iter().map(|r| quad(r)).sum::<f64>() * dx,
            f1_w: weighted_sq(&f1, &self.growth) * q * dx,
            dx_f1_w: weighted_sq(&f1x, &self.growth) * q * dx,
            dt_f1_w: weighted_sq(dt_f1, &self.growth) * q * dx,
        };
        // smallness: pointwise in x
        let f1w = row_norms(&f1, Some(&self.growth), q);
        let fxn = row_norms(&fx, None, q);
        let ftn = row_norms(dt_f, None, q);
        let fxx = row_norms(&self.space.ddx(&fx), None, q);
        let dt = s.t - self.energy.t.last().copied().unwrap_or(0.0);
        let fxt = match (&self.prev_ddx, dt > 0.0) {
            (Some(p), true) => row_norms(&((&fx - p) / T::c(dt)), None, q),
            _ => vec![0.0; self.space.n],
        };
        self.prev_ddx = Some(fx);
        let mut low = 0.0f64;
        let mut high = 0.0f64;
        for j in 0..self.space.n {
            let l = w0_rows[j].max(0.0).sqrt() + f0_rows[j].max(0.0).sqrt() + f1w[j];
            low = low.max(l);
            high = high.max(l + fxn[j] + ftn[j] + fxx[j] + fxt[j]);
        }
        // lower bound pieces
        let params = &self.ops.params;
        let c: Vec<f64> = ell_coefficients(params).iter().map(|x| x.f64()).collect();
        let ns = params.n_species();
        let mut lhs = 0.0;
        let mut bnd = 0.0;
        for j in 0..self.space.n {
            let g: Vec<T> = ux.row(j).iter().map(|&x| T::c(x)).collect();
            let g = FluidState::from_coords(&g).expect("fluid row");
            lhs += micromacro::norm_p1_v1_f0_sq(&g, params).map(|x| x.f64()).unwrap_or(f64::NAN);
            let lx: f64 = ux.row(j).iter().zip(&c).map(|(a, b)| a * b).sum();
            bnd += u[[j, ns]] * lx;
        }
        LevelNorms {
            terms,
            diss,
            micro: sum_sq(&f1) * q * dx,
            low,
            high,
            lhs: lhs * dx,
            grad_f0: ux.iter().map(|x| x * x).sum::<f64>() * dx,
            grad_f1: sum_sq(&f1x) * q * dx,
            boundary: bnd * dx,
        }
    }

    fn push_level(&mut self, t: f64, n: LevelNorms) {
        self.energy.t.push(t);
        self.energy.terms.push(n.terms);
        self.energy.micro.push(n.micro);
        let ratio = if self.energy.initial > 0.0 { n.terms.max() / self.energy.initial } else { 0.0 };
        self.energy.ratio.push(ratio);
        self.energy.max_ratio = self.energy.max_ratio.max(ratio);
        self.monitor.update(t, n.low, n.high);
    }

    /// Consumes one step. Returns the per-level records due at this step.
    pub fn observe(&mut self, prev: &SimState<T>, next: &SimState<T>) -> Result<Vec<Record>> {
        let dt = next.t - prev.t;
        if !(dt > 0.0) {
            return Err(Error::InvalidParams("levels must advance in time".into()));
        }
        let basis = &self.ops.basis;
        let dt_f = (&next.f - &prev.f) / T::c(dt);
        let dt_f1 = (&next.micro(basis) - &prev.micro(basis)) / T::c(dt);
        if self.steps == 0 {
            let n0 = self.norms(prev, &dt_f, &dt_f1);
            self.energy.initial = n0.terms.sum();
            self.lemma.boundary0 = n0.boundary;
            self.prev_diss = Some(n0.diss);
            self.prev_lemma = Some((n0.lhs, n0.grad_f0, n0.grad_f1));
            if self.cfg.keep_levels {
                self.levels.push(LevelSummary::capture(prev, basis, &self.space, &self.v1));
            }
            self.push_level(prev.t, n0);
        }
        let n1 = self.norms(next, &dt_f, &dt_f1);
        // trapezoid in time
        let p = self.prev_diss.replace(n1.diss).expect("previous level");
        self.energy.dissipation.scaled_add(0.5 * dt, &p);
        self.energy.dissipation.scaled_add(0.5 * dt, &n1.diss);
        let (l0, a0, b0) = self.prev_lemma.replace((n1.lhs, n1.grad_f0, n1.grad_f1)).expect("previous level");
        self.lemma.lhs += 0.5 * dt * (l0 + n1.lhs);
        self.lemma.grad_f0 += 0.5 * dt * (a0 + n1.grad_f0);
        self.lemma.grad_f1 += 0.5 * dt * (b0 + n1.grad_f1);
        self.lemma.boundary = n1.boundary;
        if self.cfg.keep_levels {
            self.levels.push(LevelSummary::capture(next, basis, &self.space, &self.v1));
        }
        self.push_level(next.t, n1);
        self.steps += 1;
        if self.steps % self.cfg.cadence.max(1) == 0 {
            Ok(self.level_records(next.t))
        } else {
            Ok(Vec::new())
        }
    }

    fn lemma_record(&self, t: f64) -> Record {
        let lhs = self.lemma.lhs;
        let rhs = self.lemma.rhs();
        let slack = self.cfg.tol_int * lhs.abs().max(rhs.abs());
        Record::new(t, "lower_bound.integrated_gap", rhs - lhs, slack, lhs >= rhs - slack, "integrated-lower-bound")
    }

    pub fn level_records(&self, t: f64) -> Vec<Record> {
        let e = &self.energy;
        let mut out = vec![
            Record::at_most(t, "energy.ratio", *e.ratio.last().unwrap_or(&0.0), self.cfg.energy_factor, "energy-functional"),
            Record::info(t, "energy.micro", *e.micro.last().unwrap_or(&0.0), "micro-decay"),
            self.lemma_record(t),
        ];
        let r = "smallness";
        match self.cfg.epsilon {
            Some(eps) => out.push(Record::at_most(t, "smallness.sup", self.monitor.sup_high, eps, r)),
            None => out.push(Record::info(t, "smallness.sup", self.monitor.sup_high, r)),
        }
        out
    }

    /// Summary records at the end of a run.
    pub fn finish(&self) -> Result<Vec<Record>> {
        let t = self.energy.t.last().copied().unwrap_or(0.0);
        let e = &self.energy;
        let mut out = self.constants.records(t);
        out.push(Record::info(t, "energy.initial", e.initial, "energy-functional"));
        out.push(Record::at_most(t, "energy.max_ratio", e.max_ratio, self.cfg.energy_factor, "energy-functional"));
        if let Some(last) = e.terms.last() {
            for (k, v) in [("w0", last.w0), ("f0", last.f0), ("f", last.f), ("dx_f", last.dx_f), ("dt_f", last.dt_f)] {
                out.push(Record::info(t, format!("energy.final.{k}"), v, "energy-functional"));
            }
        }
        let d = &e.dissipation;
        for (k, v) in [("f0", d.f0), ("dx_f0", d.dx_f0), ("f1_w", d.f1_w), ("dx_f1_w", d.dx_f1_w), ("dt_f1_w", d.dt_f1_w)] {
            out.push(Record::new(t, format!("dissipation.{k}"), v, f64::INFINITY, v.is_finite() && v >= 0.0, "energy-functional"));
        }
        let peak = e.micro.iter().copied().fold(0.0, f64::max);
        let last = e.micro.last().copied().unwrap_or(0.0);
        out.push(Record::info(t, "micro.final_over_peak", if peak > 0.0 { last / peak } else { 0.0 }, "micro-decay"));
        out.push(self.lemma_record(t));
        let m = &self.monitor;
        out.push(Record::info(t, "smallness.sup_low", m.sup, "smallness"));
        if let Some(v) = m.first_violation {
            out.push(Record::new(t, "smallness.first_violation", v, f64::INFINITY, false, "smallness"));
        }
        if self.levels.len() >= 3 {
            let res = conservation_residuals(&self.levels, &self.ops.params, &self.space)?;
            let names = law_names(self.ops.params.n_species());
            for (k, name) in names.iter().enumerate() {
                let worst = res.iter().map(|r| r.max[k]).fold(0.0, f64::max);
                out.push(Record::info(t, format!("conservation.{name}"), worst, "conservation-laws"));
            }
            let scale = res.iter().flat_map(|r| r.max.iter()).fold(0.0f64, |a, &b| a.max(b));
            let cons = res.iter().map(|r| r.ell_consistency).fold(0.0, f64::max);
            out.push(Record::at_most(t, "conservation.ell_consistency", cons, 1e-10 * scale.max(1e-300) + 1e-14, "conservation-laws"));
        }
        Ok(out)
    }
}

/// Totals drift `max_k |total_k(t) - total_k(0)|` relative to the largest
/// initial coordinate mass `max_k sum_x |u_k| dx`.
pub fn relative_drift(initial: &[f64], current: &[f64], scale: f64) -> f64 {
    let d = initial.iter().zip(current).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        d / scale
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Boundary;

    #[test]
    fn records_round_trip() {
        let r = Record::at_most(0.5, "x", 1.0, 2.0, "tag");
        assert!(r.pass);
        let back = parse_record(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let i = Record::info(0.0, "y", 3.0, "tag");
        let back = parse_record(&i.to_json()).unwrap();
        assert!(back.tolerance.is_infinite());
        let mut sink = RecordSink::new(Vec::new());
        sink.push(&r).unwrap();
        sink.push(&Record::at_most(1.0, "x", 3.0, 2.0, "tag")).unwrap();
        assert_eq!(sink.failures(), 1);
        let table = summary_table(sink.rows());
        assert!(table.lines().count() == 2 && table.contains("tag"));
        let line = r.to_json_tagged(Some("abc"));
        assert!(line.contains("\"config_hash\":\"abc\""));
        assert_eq!(parse_record(&line).unwrap(), r);
    }

    #[test]
    fn mollifier_is_normalized() {
        let s = SpatialGrid::new(-20.0, 20.0, 128, Boundary::Outflow).unwrap();
        let m = Mollifier::new(&s);
        assert!((s.integrate(m.psi.iter().copied()) - 1.0).abs() < 1e-12);
        assert_eq!(*m.cumulative.last().unwrap(), 1.0);
        assert_eq!(m.cumulative[0], 0.0);
    }

    #[test]
    fn antiderivative_differentiates_back() {
        let p = MixtureParams::<f64>::unit();
        let s = SpatialGrid::new(-5.0, 5.0, 40, Boundary::Outflow).unwrap();
        let u = Array2::from_shape_fn((40, 5), |(j, k)| {
            let x = s.x(j);
            x * (-x * x).exp() * (k + 1) as f64
        });
        let a = antiderivative_w0(&u, &s, &p, None);
        for j in 1..40 {
            for k in 0..5 {
                let d = (a.w[[j, k]] - a.w[[j - 1, k]]) / s.dx();
                assert!((d - u[[j, k]]).abs() < 1e-12);
            }
        }
        // odd input: vanishes at both ends
        assert!(a.w.row(39).iter().all(|x| x.abs() < 1e-12));
    }
}
