//! Run configuration: a versioned TOML schema where every field has a default.

use std::path::{Path, PathBuf};

use kinemix_core::collision::CollisionConfig;
use kinemix_core::diagnostics::DiagnosticsConfig;
use kinemix_core::mixture::{MixtureParams, MixtureSpec, VelocityGrid};
use kinemix_core::transport::{Boundary, CollisionTreatment, InitialProfile, Mode, SchemeConfig, Shape, SpatialGrid};
use kinemix_core::verify::{default_mixture, Suite, VerifyConfig};
use kinemix_core::{Grid, Params};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureBlock {
    /// Number of species; optional, must match the arrays when given.
    pub species: Option<usize>,
    pub masses: Vec<f64>,
    pub densities: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
}

impl Default for MixtureBlock {
    fn default() -> Self {
        let m = default_mixture();
        Self { species: None, masses: m.masses, densities: m.densities, beta: m.beta }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Extent {
    Named(String),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridBlock {
    /// Nodes per velocity axis.
    pub nv: usize,
    /// `"operator"` (5.5 max m^-1/2), `"default"` (4 sqrt2 max m^-1/2 + 2) or
    /// a number.
    pub extent: Extent,
    pub angular_points: usize,
    pub pair_stride: usize,
    pub max_weight: f64,
}

impl Default for GridBlock {
    fn default() -> Self {
        let c = CollisionConfig::default();
        Self {
            nv: 12,
            extent: Extent::Named("operator".into()),
            angular_points: c.angular_points,
            pair_stride: c.pair_stride,
            max_weight: c.max_weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceBlock {
    pub x_lo: f64,
    pub x_hi: f64,
    pub nx: usize,
    pub boundary: Boundary,
}

impl Default for SpaceBlock {
    fn default() -> Self {
        Self { x_lo: -20.0, x_hi: 20.0, nx: 128, boundary: Boundary::Outflow }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeBlock {
    pub mode: Mode,
    pub collision: CollisionTreatment,
    pub dt: Option<f64>,
    pub cfl: f64,
    pub t_final: f64,
    pub nonlinear: bool,
    pub nonlinear_events: usize,
    pub tol_drift: f64,
}

impl Default for SchemeBlock {
    fn default() -> Self {
        let s = SchemeConfig::default();
        Self {
            mode: s.mode,
            collision: s.collision,
            dt: s.dt,
            cfl: s.cfl,
            t_final: 5.0,
            nonlinear: s.nonlinear,
            nonlinear_events: s.nonlinear_events,
            tol_drift: s.tol_drift,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialBlock {
    pub amplitude: f64,
    pub shape: Shape,
    pub center: f64,
    pub width: f64,
    pub fluid: Vec<f64>,
    pub micro: f64,
}

impl Default for InitialBlock {
    fn default() -> Self {
        let p = InitialProfile::default();
        Self { amplitude: p.amplitude, shape: p.shape, center: p.center, width: p.width, fluid: p.fluid, micro: p.micro }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsBlock {
    /// Suites run by `verify` when `--only` is not given.
    pub checks: Vec<String>,
    pub epsilon: Option<f64>,
    /// Overrides the estimated `theta`.
    pub theta: Option<f64>,
    pub tol_int: f64,
    pub energy_factor: f64,
    /// `simulate` aborts once the energy exceeds this multiple of its initial value.
    pub blowup_ratio: f64,
}

impl Default for DiagnosticsBlock {
    fn default() -> Self {
        let d = DiagnosticsConfig::default();
        Self {
            checks: Suite::STATIC.iter().map(|s| s.name().to_string()).collect(),
            epsilon: d.epsilon,
            theta: None,
            tol_int: d.tol_int,
            energy_factor: d.energy_factor,
            blowup_ratio: 1e8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: PathBuf,
    /// Per-level records every this many steps.
    pub cadence: usize,
    /// Checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Directory for cached operators; none disables caching.
    pub tensor_cache: Option<PathBuf>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: PathBuf::from("kinemix-out"), cadence: DiagnosticsConfig::default().cadence, checkpoint_every: 0, tensor_cache: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub mixture: MixtureBlock,
    pub grid: GridBlock,
    pub space: SpaceBlock,
    pub scheme: SchemeBlock,
    pub initial: InitialBlock,
    pub diagnostics: DiagnosticsBlock,
    pub output: OutputBlock,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 2024,
            mixture: MixtureBlock::default(),
            grid: GridBlock::default(),
            space: SpaceBlock::default(),
            scheme: SchemeBlock::default(),
            initial: InitialBlock::default(),
            diagnostics: DiagnosticsBlock::default(),
            output: OutputBlock::default(),
            verify: VerifyConfig::default(),
        }
    }
}

fn schema(msg: impl Into<String>) -> ConfigError {
    ConfigError::Schema(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn hash_hex(&self) -> String {
        kinemix_core::io::hex(&self.hash())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(schema(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        let m = &self.mixture;
        if let Some(n) = m.species {
            if n != m.masses.len() {
                return Err(schema(format!("mixture.species = {n} but {} masses given", m.masses.len())));
            }
        }
        if m.beta.len() != m.masses.len() || m.beta.iter().any(|r| r.len() != m.masses.len()) {
            return Err(schema(format!("mixture.beta must be {0} x {0}", m.masses.len())));
        }
        for i in 0..m.beta.len() {
            for j in 0..i {
                if m.beta[i][j] != m.beta[j][i] {
                    return Err(schema(format!(
                        "mixture.beta must be symmetric: beta[{i}][{j}] = {} but beta[{j}][{i}] = {}",
                        m.beta[i][j], m.beta[j][i]
                    )));
                }
            }
        }
        self.params()?;
        self.collision().validate().map_err(|e| schema(e.to_string()))?;
        self.velocity_grid()?;
        self.spatial_grid()?;
        let s = &self.scheme;
        if !(s.t_final > 0.0 && s.t_final.is_finite()) {
            return Err(schema(format!("scheme.t_final must be positive, got {}", s.t_final)));
        }
        if !(s.cfl > 0.0 && s.cfl <= 1.0) {
            return Err(schema(format!("scheme.cfl must be in (0, 1], got {}", s.cfl)));
        }
        if !(s.tol_drift > 0.0) {
            return Err(schema("scheme.tol_drift must be positive"));
        }
        let i = &self.initial;
        if !(i.amplitude >= 0.0 && i.amplitude.is_finite()) {
            return Err(schema(format!("initial.amplitude must be non-negative, got {}", i.amplitude)));
        }
        if !(i.width > 0.0) {
            return Err(schema(format!("initial.width must be positive, got {}", i.width)));
        }
        if !i.fluid.is_empty() && i.fluid.len() != m.masses.len() + 4 {
            return Err(schema(format!("initial.fluid needs {} entries", m.masses.len() + 4)));
        }
        self.suites()?;
        let d = &self.diagnostics;
        if let Some(t) = d.theta {
            let t0 = kinemix_core::micromacro::theta0(&self.params()?);
            if !(t > 0.0 && t < t0) {
                return Err(schema(format!("diagnostics.theta must lie in (0, {t0}), got {t}")));
            }
        }
        if !(d.blowup_ratio > d.energy_factor) {
            return Err(schema("diagnostics.blowup_ratio must exceed diagnostics.energy_factor"));
        }
        if d.epsilon.is_some_and(|e| !(e > 0.0)) {
            return Err(schema("diagnostics.epsilon must be positive"));
        }
        if self.output.cadence == 0 {
            return Err(schema("output.cadence must be at least 1"));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<Params, ConfigError> {
        let m = &self.mixture;
        let spec = MixtureSpec { masses: m.masses.clone(), densities: m.densities.clone(), beta: m.beta.clone() };
        MixtureParams::from_spec(&spec).map_err(|e| schema(e.to_string()))
    }

    pub fn collision(&self) -> CollisionConfig {
        let g = &self.grid;
        CollisionConfig { angular_points: g.angular_points, pair_stride: g.pair_stride, max_weight: g.max_weight, ..Default::default() }
    }

    pub fn velocity_grid(&self) -> Result<Grid, ConfigError> {
        let p = self.params()?;
        let extent = match &self.grid.extent {
            Extent::Named(s) if s == "operator" => VelocityGrid::operator_extent(&p),
            Extent::Named(s) if s == "default" => VelocityGrid::default_extent(&p),
            Extent::Named(s) => return Err(schema(format!("grid.extent must be \"operator\", \"default\" or a number, got \"{s}\""))),
            Extent::Value(v) => *v,
        };
        if self.grid.nv < 4 {
            return Err(schema(format!("grid.nv must be at least 4, got {}", self.grid.nv)));
        }
        VelocityGrid::new(self.grid.nv, extent).map_err(|e| schema(e.to_string()))
    }

    pub fn spatial_grid(&self) -> Result<SpatialGrid, ConfigError> {
        let s = &self.space;
        SpatialGrid::new(s.x_lo, s.x_hi, s.nx, s.boundary).map_err(|e| schema(e.to_string()))
    }

    pub fn scheme_config(&self) -> SchemeConfig {
        let s = &self.scheme;
        SchemeConfig {
            dt: s.dt,
            cfl: s.cfl,
            mode: s.mode,
            collision: s.collision,
            nonlinear: s.nonlinear,
            nonlinear_events: s.nonlinear_events,
            tol_drift: s.tol_drift,
        }
    }

    pub fn profile(&self) -> InitialProfile {
        let i = &self.initial;
        InitialProfile { amplitude: i.amplitude, shape: i.shape, center: i.center, width: i.width, fluid: i.fluid.clone(), micro: i.micro }
    }

    pub fn diagnostics_config(&self) -> DiagnosticsConfig {
        let d = &self.diagnostics;
        DiagnosticsConfig {
            epsilon: d.epsilon,
            tol_int: d.tol_int,
            energy_factor: d.energy_factor,
            cadence: self.output.cadence,
            keep_levels: true,
        }
    }

    pub fn suites(&self) -> Result<Vec<Suite>, ConfigError> {
        self.diagnostics.checks.iter().map(|s| s.parse::<Suite>().map_err(|e| schema(e.to_string()))).collect()
    }

    pub fn verify_config(&self) -> VerifyConfig {
        let m = &self.mixture;
        VerifyConfig {
            seed: self.seed,
            mixture: MixtureSpec { masses: m.masses.clone(), densities: m.densities.clone(), beta: m.beta.clone() },
            collision: self.collision(),
            ..self.verify.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn round_trip_keeps_hash() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back.hash_hex(), c.hash_hex());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 7, ..RunConfig::default() };
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_input() {
        let asym = "[mixture]\nmasses = [1.0, 2.0]\ndensities = [1.0, 1.0]\nbeta = [[1.0, 0.5], [0.7, 1.0]]\n";
        assert!(matches!(RunConfig::from_toml(asym), Err(ConfigError::Schema(m)) if m.contains("symmetric")));
        assert!(matches!(RunConfig::from_toml("schema_version = 9"), Err(ConfigError::Schema(_))));
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(ConfigError::Parse(_))));
        assert!(RunConfig::from_toml("[grid]\nextent = \"wide\"").is_err());
        assert!(RunConfig::from_toml("[grid]\nextent = 6.0").is_ok());
        assert!(RunConfig::from_toml("[diagnostics]\nchecks = [\"nope\"]").is_err());
        assert!(RunConfig::from_toml("[initial]\namplitude = -1.0").is_err());
        assert!(RunConfig::from_toml("[initial]\namplitude = 0.0").is_ok());
        assert!(RunConfig::from_toml("[mixture]\nspecies = 3").is_err());
    }
}
