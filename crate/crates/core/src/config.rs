//! JSON run configuration. Every section is optional and falls back to the
//! benchmark defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lower::StageSolveConfig;
use crate::ocp::RegMode;
use crate::upper::{UpperKind, UpperMethod};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantConfig,
    pub nmpc: NmpcConfig,
    pub sim: SimConfig,
    pub analysis: AnalysisConfig,
    pub compare: CompareConfig,
    pub output: OutputConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.nmpc.validate()?;
        self.sim.validate()?;
        self.analysis.validate()?;
        if self.compare.grid_sweep.iter().any(|&p| p < 3) {
            return Err(Error::Config("grid sweep sizes need at least 3 points per axis".into()));
        }
        if self.compare.repeats == 0 || self.compare.sweep_iters == 0 || self.compare.sweep_repeats == 0 {
            return Err(Error::Config("compare counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Material and environment values of the copper plate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatPlateParams {
    /// Density [kg/m³].
    pub rho: f64,
    /// Specific heat [J/(kg K)].
    pub cp: f64,
    /// Plate thickness [m].
    pub tz: f64,
    /// Thermal conductivity [W/(m K)].
    pub k: f64,
    /// Convection coefficient [W/(m² K)].
    pub hc: f64,
    /// Ambient temperature [K].
    pub ta: f64,
    pub emissivity: f64,
    pub stefan_boltzmann: f64,
}

impl Default for HeatPlateParams {
    fn default() -> Self {
        Self { rho: 8960.0, cp: 386.0, tz: 0.01, k: 400.0, hc: 1.0, ta: 300.0, emissivity: 0.5, stefan_boltzmann: 5.67e-8 }
    }
}

impl HeatPlateParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rho, self.cp, self.tz, self.k, self.hc, self.ta, self.emissivity, self.stefan_boltzmann];
        if all.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("plate parameters must be positive".into()));
        }
        Ok(())
    }

    /// `k / (ρ C_p)` [m²/s].
    pub fn diffusivity(&self) -> f64 {
        self.k / (self.rho * self.cp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub points_per_axis: usize,
    /// Side length of the square plate [m].
    pub side: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { points_per_axis: 13, side: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ActuatorConfig {
    /// Actuator indices along each axis; the actuators form the tensor
    /// lattice. Empty means four uniformly spread indices.
    pub axis_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub grid: GridConfig,
    pub actuators: ActuatorConfig,
    pub params: HeatPlateParams,
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let p = self.grid.points_per_axis;
        if p < 3 {
            return Err(Error::Config(format!("{p} grid points per axis, at least 3 required")));
        }
        if !(self.grid.side > 0.0) {
            return Err(Error::Config("plate side must be positive".into()));
        }
        if let Some(&bad) = self.actuators.axis_indices.iter().find(|&&i| i >= p) {
            return Err(Error::Config(format!("actuator axis index {bad} outside a {p}-point axis")));
        }
        Ok(())
    }

    pub fn axis_indices(&self) -> Vec<usize> {
        if self.actuators.axis_indices.is_empty() {
            crate::pde::SpatialGrid::<f64>::uniform_axis_indices(self.grid.points_per_axis, 4)
        } else {
            self.actuators.axis_indices.clone()
        }
    }
}

/// Controller choice: a splitting method or the Newton baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Jacobi,
    Fgs,
    Bgs,
    Sor,
    Sgs,
    Newton,
}

impl MethodChoice {
    pub fn upper_kind(self) -> Option<UpperKind> {
        match self {
            MethodChoice::Jacobi => Some(UpperKind::Jacobi),
            MethodChoice::Fgs => Some(UpperKind::Fgs),
            MethodChoice::Bgs => Some(UpperKind::Bgs),
            MethodChoice::Sor => Some(UpperKind::Sor),
            MethodChoice::Sgs => Some(UpperKind::Sgs),
            MethodChoice::Newton => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmpcConfig {
    /// Prediction horizon [s].
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub n_stages: usize,
    pub tau: f64,
    pub gamma: f64,
    pub reg_mode: RegMode,
    pub tol: f64,
    pub max_iters: usize,
    pub method: MethodChoice,
    pub omega: f64,
    pub lower: StageSolveConfig,
    /// State weight (`Q = q I`).
    pub q: f64,
    /// Input weight (`R = r I`).
    pub r: f64,
    /// Input box as offsets above ambient [K].
    pub input_bounds: [f64; 2],
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 100.0,
            n_stages: 20,
            tau: 100.0,
            gamma: 0.5,
            reg_mode: RegMode::CurrentIterate,
            tol: 1.0,
            max_iters: 100,
            method: MethodChoice::Sgs,
            omega: 1.0,
            lower: StageSolveConfig::default(),
            q: 1.0,
            r: 0.1,
            input_bounds: [0.0, 400.0],
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || self.n_stages == 0 {
            return Err(Error::Config("horizon and stage count must be positive".into()));
        }
        if !(self.tau > 0.0) || !(self.gamma >= 0.0) || !(self.tol > 0.0) {
            return Err(Error::Config("need tau > 0, gamma >= 0 and tol > 0".into()));
        }
        if !(self.q >= 0.0) || !(self.r >= 0.0) {
            return Err(Error::Config("cost weights must be non-negative".into()));
        }
        if !(self.input_bounds[0] < self.input_bounds[1]) {
            return Err(Error::Config("input bounds must be ordered".into()));
        }
        self.lower.validate()?;
        if let Some(kind) = self.method.upper_kind() {
            UpperMethod { kind, omega: self.omega }.validate()?;
        }
        Ok(())
    }

    /// Step size `h = T / N`.
    pub fn h(&self) -> f64 {
        self.horizon / self.n_stages as f64
    }
}

/// Reference temperatures as offsets above ambient [K].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    /// Slope: value at the low-x edge.
    pub slope_low: f64,
    /// Slope: value at the high-x edge.
    pub slope_high: f64,
    /// V shape: value at both x edges.
    pub vshape_edge: f64,
    /// V shape: value at mid-x.
    pub vshape_center: f64,
    /// Time at which the switch to the V shape starts [s].
    pub switch_time_s: f64,
    /// Length of the linear cross-fade [s].
    pub fade_s: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { slope_low: 50.0, slope_high: 250.0, vshape_edge: 250.0, vshape_center: 50.0, switch_time_s: 500.0, fade_s: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub duration_s: f64,
    pub sampling_period_s: f64,
    /// Largest backward Euler substep of the plant [s].
    pub plant_substep_s: f64,
    pub references: ReferenceConfig,
    /// Timed solves per sampling instant (the minimum is logged).
    pub repeats: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { duration_s: 1000.0, sampling_period_s: 5.0, plant_substep_s: 1.0, references: ReferenceConfig::default(), repeats: 1 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s >= 0.0) || !(self.sampling_period_s > 0.0) || !(self.plant_substep_s > 0.0) {
            return Err(Error::Config("need duration >= 0 and positive periods".into()));
        }
        if !(self.references.fade_s >= 0.0) {
            return Err(Error::Config("reference fade must be non-negative".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of sampling instants in the run.
    pub fn n_steps(&self) -> usize {
        (self.duration_s / self.sampling_period_s + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Log the convergence factor of the configured method per instant.
    pub convergence_factor: bool,
    /// Nilpotency and squared-factor checks.
    pub lemma_checks: bool,
    /// Horizons [s] for the factor table across settings.
    pub horizon_sweep: Vec<f64>,
    /// Regularization values paired with each horizon.
    pub gammas: Vec<f64>,
    /// Controller that produces the closed-loop solutions the factors are
    /// evaluated at. Any convergent method gives the same points.
    pub driver: MethodChoice,
    /// Evaluate the factor at every `every`-th instant.
    pub every: usize,
    pub power_iters: usize,
    pub power_seeds: usize,
    pub krylov: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            convergence_factor: false,
            lemma_checks: false,
            horizon_sweep: Vec::new(),
            gammas: vec![0.5, 0.0],
            driver: MethodChoice::Fgs,
            every: 1,
            power_iters: 30,
            power_seeds: 5,
            krylov: 20,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_sweep.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("sweep horizons must be positive".into()));
        }
        if self.gammas.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::Config("sweep gammas must be non-negative".into()));
        }
        if self.every == 0 || self.power_iters == 0 || self.power_seeds == 0 {
            return Err(Error::Config("analysis counts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        !self.convergence_factor && !self.lemma_checks && self.horizon_sweep.is_empty()
    }

    pub fn power_options(&self, seed: u64) -> crate::spectral::PowerOptions {
        crate::spectral::PowerOptions { iters: self.power_iters, seeds: self.power_seeds, seed, krylov: self.krylov }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Timed solves per instant; the minimum is reported.
    pub repeats: usize,
    /// Sampling instants to compare (`null` runs the whole duration).
    pub steps: Option<usize>,
    /// Extra grid sizes for the per-iteration time scaling table.
    pub grid_sweep: Vec<usize>,
    /// Iterations timed per method and grid in the sweep.
    pub sweep_iters: usize,
    /// Timed repeats per sweep entry (Newton on large grids is slow).
    pub sweep_repeats: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { repeats: 10, steps: Some(20), grid_sweep: Vec::new(), sweep_iters: 3, sweep_repeats: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Write one 2D field file per instant.
    pub field_snapshots: bool,
    /// Write the wide state table.
    pub states: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: PathBuf::from("out"), field_snapshots: false, states: false }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.sim.n_steps(), 200);
        assert_eq!(cfg.plant.axis_indices(), vec![1, 4, 8, 11]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"nmpc": {"horizon": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn renamed_horizon_fields() {
        let cfg = RunConfig::from_json(r#"{"nmpc": {"T": 20, "N": 4, "method": "newton"}}"#).unwrap();
        assert_eq!(cfg.nmpc.h(), 5.0);
        assert_eq!(cfg.nmpc.method, MethodChoice::Newton);
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::from_json(r#"{"nmpc": {"omega": 0}, "plant": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"plant": {"actuators": {"axis_indices": [13]}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sim": {"repeats": 0}}"#).is_err());
    }
}
