//! Run configuration: one TOML file, validated before any compute.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use skt_core::grid::Grid;
use skt_core::model::{
    solve_balance_weights, AdmissibilityParams, BalanceWeights, Coefficients, Field, FieldKind,
};
use skt_core::particles::{InitialLaw, ParticleConfig, SmoothBump, TestFunction};
use skt_core::solver::SolverConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct RunConfig {
    #[serde(default)]
    pub output: OutputSection,
    /// Worker threads for replica ensembles; all cores when absent.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub initial: Vec<InitialProfile>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub checks: CheckSection,
    #[serde(default)]
    pub admissibility: AdmissibilitySection,
    #[serde(default)]
    pub particles: Option<ParticleSection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct OutputSection {
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct GridSection {
    pub length: f64,
    pub cells: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            length: 1.0,
            cells: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct ModelSection {
    /// Rows `[a_i0, a_i1, ..., a_in]`.
    pub coefficients: Vec<Vec<f64>>,
    /// Detailed-balance weights; solved for when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default = "default_balance_tolerance")]
    pub balance_tolerance: f64,
}

fn default_balance_tolerance() -> f64 {
    skt_core::model::BALANCE_TOLERANCE
}

/// Initial density of one species on `[0, length]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum InitialProfile {
    Constant {
        value: f64,
    },
    /// `level + amplitude cos(mode pi x / length)`.
    Cosine {
        level: f64,
        amplitude: f64,
        mode: u32,
    },
    /// `floor + mass * N(center, sd^2)`.
    Gaussian {
        center: f64,
        sd: f64,
        #[serde(default = "one")]
        mass: f64,
        #[serde(default)]
        floor: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl InitialProfile {
    fn eval(&self, x: f64, length: f64) -> f64 {
        match *self {
            InitialProfile::Constant { value } => value,
            InitialProfile::Cosine {
                level,
                amplitude,
                mode,
            } => level + amplitude * (f64::from(mode) * std::f64::consts::PI * x / length).cos(),
            InitialProfile::Gaussian {
                center,
                sd,
                mass,
                floor,
            } => {
                let z = (x - center) / sd;
                floor + mass * (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct CheckSection {
    /// Bound on `max_t |H - H0 + ∫D| / H0`.
    pub entropy_tolerance: f64,
    /// Slack in `D >= D_lb - slack`.
    pub dissipation_slack: f64,
    /// Bound on `|z|` for covariance checks.
    pub z_threshold: f64,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            entropy_tolerance: 1e-2,
            dissipation_slack: 1e-10,
            z_threshold: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct AdmissibilitySection {
    pub p: f64,
    pub kappa: f64,
    pub allow_small_lambda: bool,
    /// Population sizes at which the margins are tabulated.
    pub scan: Vec<f64>,
}

impl Default for AdmissibilitySection {
    fn default() -> Self {
        let d = AdmissibilityParams::default();
        Self {
            p: d.p,
            kappa: d.kappa,
            allow_small_lambda: d.allow_small_lambda,
            scan: (1..=10).map(|k| 10f64.powi(k)).collect(),
        }
    }
}

/// Which density the analytic covariance is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MeanField {
    /// Closed-form heat flow of the initial laws; needs zero interaction.
    Heat,
    /// Deterministic run of the regularized cross-diffusion solver with
    /// `a_i0 = sigma_i` and `a_ij` the interaction masses.
    Spde,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct ParticleSection {
    #[serde(default)]
    pub ensemble: ParticleConfig,
    pub initial: Vec<InitialLaw>,
    pub probes: Vec<ProbeSpec>,
    pub dt: f64,
    pub t_end: f64,
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    pub mean_field: MeanField,
    /// Left end of the solver interval `[origin, origin + grid.length]`.
    #[serde(default)]
    pub origin: f64,
    /// Simpson panels in space for the analytic covariance.
    #[serde(default = "default_x_panels")]
    pub x_panels: usize,
    /// Simpson panels in time.
    #[serde(default = "default_t_panels")]
    pub t_panels: usize,
}

fn default_record_every() -> usize {
    10
}

fn default_x_panels() -> usize {
    1024
}

fn default_t_panels() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct ProbeSpec {
    #[serde(default)]
    pub label: Option<String>,
    pub species: usize,
    pub test_function: TestFunctionSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum TestFunctionSpec {
    Bump {
        center: f64,
        radius: f64,
        #[serde(default = "one")]
        height: f64,
    },
}

impl TestFunctionSpec {
    pub fn build(&self) -> std::sync::Arc<dyn TestFunction> {
        match *self {
            TestFunctionSpec::Bump {
                center,
                radius,
                height,
            } => std::sync::Arc::new(SmoothBump {
                center,
                radius,
                height,
            }),
        }
    }

    fn describe(&self) -> String {
        match *self {
            TestFunctionSpec::Bump { center, radius, .. } => format!("bump({center}, {radius})"),
        }
    }
}

impl ProbeSpec {
    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| format!("u{} {}", self.species + 1, self.test_function.describe()))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        Grid::new(self.grid.length, self.grid.cells).context("grid")?;
        self.solver.validate().context("solver")?;
        if let Some(t) = self.threads {
            ensure!(t > 0, "threads must be positive");
        }
        if let Some(model) = &self.model {
            let coeffs = Coefficients::new(model.coefficients.clone()).context("model")?;
            if !self.initial.is_empty() {
                ensure!(
                    self.initial.len() == coeffs.species(),
                    "{} initial profiles for {} species",
                    self.initial.len(),
                    coeffs.species()
                );
            }
        }
        if let Some(p) = &self.particles {
            p.ensemble.validate().context("particles.ensemble")?;
            let n = p.ensemble.species();
            ensure!(
                p.initial.len() == n,
                "{} initial laws for {n} species",
                p.initial.len()
            );
            ensure!(!p.probes.is_empty(), "particles.probes is empty");
            for probe in &p.probes {
                ensure!(
                    probe.species < n,
                    "probe species {} out of range",
                    probe.species
                );
            }
            ensure!(
                p.dt > 0.0 && p.t_end > 0.0,
                "particles dt and tEnd must be positive"
            );
            ensure!(p.replicas >= 4, "particles.replicas must be at least 4");
            ensure!(
                p.x_panels >= 2 && p.t_panels >= 2,
                "xPanels and tPanels must be at least 2"
            );
            if p.mean_field == MeanField::Heat {
                ensure!(
                    p.ensemble.interaction.iter().flatten().all(|a| *a == 0.0),
                    "meanField = \"heat\" needs zero interaction"
                );
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Ok(Grid::new(self.grid.length, self.grid.cells)?)
    }

    pub fn model(&self) -> Result<(Coefficients, BalanceWeights)> {
        let Some(model) = &self.model else {
            bail!("this command needs a [model] section");
        };
        let coeffs = Coefficients::new(model.coefficients.clone())?;
        let pi = match &model.weights {
            Some(w) => BalanceWeights::new(w.clone())?,
            None => solve_balance_weights(&coeffs, model.balance_tolerance)?,
        };
        Ok((coeffs, pi))
    }

    pub fn initial_field(&self, grid: &Grid, species: usize) -> Result<Field> {
        ensure!(
            self.initial.len() == species,
            "expected {species} [[initial]] profiles, found {}",
            self.initial.len()
        );
        let rows = self
            .initial
            .iter()
            .map(|p| grid.sample(|x| p.eval(x, grid.length())))
            .collect();
        let field = Field::from_species(FieldKind::Density, rows)?;
        field.check_nonnegative().context("initial profile")?;
        Ok(field)
    }

    pub fn admissibility_params(&self) -> AdmissibilityParams {
        AdmissibilityParams {
            p: self.admissibility.p,
            kappa: self.admissibility.kappa,
            lambda: self.solver.lambda,
            allow_small_lambda: self.admissibility.allow_small_lambda,
        }
    }

    pub fn particles(&self) -> Result<&ParticleSection> {
        self.particles
            .as_ref()
            .context("this command needs a [particles] section")
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.solver.seed = seed;
        if let Some(p) = &mut self.particles {
            p.seed = seed;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[grid]\ncells = 32\nwidth = 2\n").unwrap_err();
        assert!(err.to_string().contains("width"));
        assert!(toml::from_str::<RunConfig>("[solver]\ndtt = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c.grid.cells, 128);
        assert_eq!(c.checks.z_threshold, 3.0);
        assert_eq!(c.admissibility.scan.len(), 10);
        c.validate().unwrap();
        assert!(c.model().is_err());
    }

    #[test]
    fn profiles_evaluate() {
        let cos = InitialProfile::Cosine {
            level: 1.0,
            amplitude: 0.5,
            mode: 1,
        };
        assert!((cos.eval(0.0, 1.0) - 1.5).abs() < 1e-15);
        assert!((cos.eval(1.0, 1.0) - 0.5).abs() < 1e-15);
        let g = InitialProfile::Gaussian {
            center: 0.0,
            sd: 1.0,
            mass: 2.0,
            floor: 0.1,
        };
        let peak = 2.0 / (2.0 * std::f64::consts::PI).sqrt() + 0.1;
        assert!((g.eval(0.0, 1.0) - peak).abs() < 1e-15);
    }

    #[test]
    fn heat_mean_field_requires_no_interaction() {
        let text = r#"
[particles]
dt = 0.01
tEnd = 0.1
replicas = 8
meanField = "heat"
initial = [{ kind = "gaussian", mean = 0.0, sd = 0.5 }]
probes = [{ species = 0, testFunction = { kind = "bump", center = 0.0, radius = 1.0 } }]
[particles.ensemble]
sigma = [0.5]
interaction = [[0.2]]
"#;
        let c: RunConfig = toml::from_str(text).unwrap();
        assert!(c.validate().is_err());
    }
}
