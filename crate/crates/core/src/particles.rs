//! Interacting particle system on the real line whose mean-field limit is the
//! cross-diffusion system, together with the fluctuation martingales
//! `M_i(t, phi)` and their limiting covariance.
//!
//! Particle `k` of species `i` follows
//!
//! ```text
//! dX = -U_i'(X) dt + sqrt(2 sigma_i + 2 sum_j f_eta(rho_ij(X))) dW,
//! rho_ij = (1/N) sum_{(l, j) != (k, i)} B_ij^eta(X_{k,i} - X_{l,j}),
//! ```
//!
//! so the mean-field density solves `d_t u_i = d_xx((sigma_i + sum_j a_ij u_j) u_i)`,
//! the cross-diffusion system with `a_i0 = sigma_i`.

use std::sync::Arc;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParticleError {
    #[error("invalid particle setting: {0}")]
    InvalidConfig(String),
    #[error("need at least one particle per species")]
    Empty,
    #[error("interaction matrix must be {n}x{n}")]
    Shape { n: usize },
    #[error(
        "eta-N scaling violated: eta^-(d+1+alpha) = {lhs:.4e} > sqrt(delta_c log N) = {rhs:.4e}"
    )]
    ScalingViolated { lhs: f64, rhs: f64 },
    #[error("no admissible eta: log N = {log_n} must be positive")]
    NoAdmissibleEta { log_n: f64 },
    #[error("non-finite particle position in species {species} at step {step}")]
    NonFinite { species: usize, step: usize },
}

/// `∫_{-1}^{1} exp(-1/(1-x^2)) dx`.
pub const BUMP_MASS: f64 = 0.443_993_816_168_079_44;

/// Unit-mass `C^∞` bump `exp(-1/(1-x^2)) / BUMP_MASS` supported on `(-1, 1)`.
pub fn standard_bump(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - x * x)).exp() / BUMP_MASS
    }
}

/// Derivative of [`standard_bump`].
pub fn standard_bump_derivative(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        let s = 1.0 - x * x;
        -2.0 * x / (s * s) * standard_bump(x)
    }
}

/// `B^eta(x) = a eta^{-1} rho(x / eta)`, of total mass `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifiedKernel {
    pub mass: f64,
    pub eta: f64,
}

impl MollifiedKernel {
    pub fn new(mass: f64, eta: f64) -> Result<Self, ParticleError> {
        if !(mass >= 0.0 && mass.is_finite()) {
            return Err(ParticleError::InvalidConfig(format!(
                "kernel mass {mass} must be >= 0"
            )));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(ParticleError::InvalidConfig(format!(
                "eta = {eta} must be positive"
            )));
        }
        Ok(Self { mass, eta })
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.mass / self.eta * standard_bump(x / self.eta)
    }

    /// Support half-width.
    pub fn radius(&self) -> f64 {
        self.eta
    }
}

/// `f_eta(x) = min(max(f(x), 0), eta^{-alpha})` with `f` the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzTruncation {
    pub cap: f64,
}

impl LipschitzTruncation {
    pub fn new(eta: f64, alpha: f64) -> Self {
        Self {
            cap: eta.powf(-alpha),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        x.clamp(0.0, self.cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum Potential {
    #[default]
    Zero,
    /// `U(x) = stiffness / 2 (x - center)^2`.
    Quadratic { center: f64, stiffness: f64 },
}

impl Potential {
    pub fn gradient(&self, x: f64) -> f64 {
        match *self {
            Potential::Zero => 0.0,
            Potential::Quadratic { center, stiffness } => stiffness * (x - center),
        }
    }
}

/// Smallest `eta` with `eta^{-(d+1+alpha)} <= sqrt(delta_c log N)`; every larger
/// `eta` is admissible too.
pub fn eta_from_n(n: f64, alpha: f64, delta_c: f64, d: u32) -> Result<f64, ParticleError> {
    let log_n = n.ln();
    if !(log_n > 0.0) || !(delta_c > 0.0) {
        return Err(ParticleError::NoAdmissibleEta {
            log_n: delta_c * log_n,
        });
    }
    let exponent = f64::from(d) + 1.0 + alpha;
    Ok((delta_c * log_n).powf(-0.5 / exponent))
}

/// Both sides of the `eta`-`N` scaling condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn check_eta_scaling(eta: f64, n: f64, alpha: f64, delta_c: f64, d: u32) -> ScalingCheck {
    let lhs = eta.powf(-(f64::from(d) + 1.0 + alpha));
    let rhs = (delta_c * n.ln()).max(0.0).sqrt();
    ScalingCheck {
        lhs,
        rhs,
        holds: lhs <= rhs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct ParticleConfig {
    /// Particles per species.
    pub particles: usize,
    pub sigma: Vec<f64>,
    /// Interaction masses `a_ij`, `n x n`.
    pub interaction: Vec<Vec<f64>>,
    pub eta: f64,
    pub alpha: f64,
    /// Constant in the `eta`-`N` scaling condition.
    pub delta_c: f64,
    pub potentials: Vec<Potential>,
    /// Turn a violated scaling condition into an error instead of a warning.
    pub enforce_scaling: bool,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self {
            particles: 1000,
            sigma: vec![0.5],
            interaction: vec![vec![0.0]],
            eta: 0.1,
            alpha: 1.0,
            delta_c: 1.0,
            potentials: Vec::new(),
            enforce_scaling: false,
        }
    }
}

impl ParticleConfig {
    pub fn species(&self) -> usize {
        self.sigma.len()
    }

    pub fn validate(&self) -> Result<(), ParticleError> {
        let n = self.species();
        if self.particles == 0 || n == 0 {
            return Err(ParticleError::Empty);
        }
        if self.interaction.len() != n || self.interaction.iter().any(|r| r.len() != n) {
            return Err(ParticleError::Shape { n });
        }
        let bad = |m: String| Err(ParticleError::InvalidConfig(m));
        if self.sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("sigma must be nonnegative".into());
        }
        if self
            .interaction
            .iter()
            .flatten()
            .any(|a| !(*a >= 0.0 && a.is_finite()))
        {
            return bad("interaction masses must be nonnegative".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta = {} must be positive", self.eta));
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha = {} must be nonnegative", self.alpha));
        }
        if !self.potentials.is_empty() && self.potentials.len() != n {
            return bad(format!(
                "expected {n} potentials, got {}",
                self.potentials.len()
            ));
        }
        Ok(())
    }

    pub fn scaling(&self) -> ScalingCheck {
        check_eta_scaling(self.eta, self.particles as f64, self.alpha, self.delta_c, 1)
    }

    /// Errors on a violated scaling condition when `enforce_scaling` is set,
    /// warns otherwise.
    pub fn check_scaling(&self) -> Result<ScalingCheck, ParticleError> {
        let scaling = self.scaling();
        if !scaling.holds {
            if self.enforce_scaling {
                return Err(ParticleError::ScalingViolated {
                    lhs: scaling.lhs,
                    rhs: scaling.rhs,
                });
            }
            warn!(
                "eta-N scaling not satisfied: {:.3e} > {:.3e} (delta_c = {})",
                scaling.lhs, scaling.rhs, self.delta_c
            );
        }
        Ok(scaling)
    }

    fn potential(&self, i: usize) -> Potential {
        self.potentials.get(i).copied().unwrap_or_default()
    }
}

/// Law of the initial positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum InitialLaw {
    Gaussian { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
    Point { at: f64 },
}

impl InitialLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            InitialLaw::Gaussian { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            InitialLaw::Uniform { lo, hi } => rng.random_range(lo..hi),
            InitialLaw::Point { at } => at,
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        match *self {
            InitialLaw::Gaussian { mean, sd } => {
                let z = (x - mean) / sd;
                (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
            InitialLaw::Uniform { lo, hi } => {
                if (lo..hi).contains(&x) {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            InitialLaw::Point { .. } => 0.0,
        }
    }
}

/// Uniform binning of one species' positions at width `width`.
#[derive(Debug, Clone)]
struct CellList {
    origin: f64,
    width: f64,
    starts: Vec<usize>,
    /// Positions sorted by bin, with their particle index.
    entries: Vec<(f64, usize)>,
}

impl CellList {
    fn build(positions: &[f64], width: f64) -> Self {
        let lo = positions.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = positions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = (((hi - lo) / width).floor() as usize) + 1;
        let bin = |x: f64| (((x - lo) / width) as usize).min(bins - 1);
        let mut counts = vec![0usize; bins + 1];
        for &x in positions {
            counts[bin(x) + 1] += 1;
        }
        for b in 0..bins {
            counts[b + 1] += counts[b];
        }
        let mut fill = counts.clone();
        let mut entries = vec![(0.0, 0); positions.len()];
        for (k, &x) in positions.iter().enumerate() {
            let b = bin(x);
            entries[fill[b]] = (x, k);
            fill[b] += 1;
        }
        Self {
            origin: lo,
            width,
            starts: counts,
            entries,
        }
    }

    /// Entries whose bins can hold points within `width` of `x`.
    fn neighbours(&self, x: f64) -> &[(f64, usize)] {
        let bins = self.starts.len() - 1;
        let rel = (x - self.origin) / self.width;
        let lo = (rel - 1.0).floor().max(0.0);
        let hi = (rel + 1.0).floor();
        if hi < 0.0 || lo > (bins - 1) as f64 {
            return &[];
        }
        let lo = lo as usize;
        let hi = (hi as usize).min(bins - 1);
        &self.entries[self.starts[lo]..self.starts[hi + 1]]
    }
}

/// Increments and coefficients used by one step; martingale accumulators read
/// the pre-step positions and the same Gaussian increments.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub dt: f64,
    pub positions: Vec<Vec<f64>>,
    /// `sqrt(2 sigma_i + 2 sum_j f_eta(rho_ij))` per particle.
    pub diffusion: Vec<Vec<f64>>,
    /// Brownian increments `sqrt(dt) xi`.
    pub increments: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    config: ParticleConfig,
    kernels: Vec<Vec<MollifiedKernel>>,
    truncation: LipschitzTruncation,
    positions: Vec<Vec<f64>>,
    interacting: bool,
    steps: usize,
    scaling: ScalingCheck,
}

impl ParticleEnsemble {
    /// Draws `N` initial positions per species from `laws`.
    pub fn sample<R: Rng + ?Sized>(
        config: ParticleConfig,
        laws: &[InitialLaw],
        rng: &mut R,
    ) -> Result<Self, ParticleError> {
        config.validate()?;
        let scaling = config.check_scaling()?;
        Self::sample_checked(config, laws, scaling, rng)
    }

    /// As [`sample`](Self::sample), with the scaling condition already checked.
    pub(crate) fn sample_checked<R: Rng + ?Sized>(
        config: ParticleConfig,
        laws: &[InitialLaw],
        scaling: ScalingCheck,
        rng: &mut R,
    ) -> Result<Self, ParticleError> {
        if laws.len() != config.species() {
            return Err(ParticleError::InvalidConfig(format!(
                "expected {} initial laws, got {}",
                config.species(),
                laws.len()
            )));
        }
        let positions = laws
            .iter()
            .map(|law| (0..config.particles).map(|_| law.sample(rng)).collect())
            .collect();
        Self::build(config, positions, scaling)
    }

    pub fn from_positions(
        config: ParticleConfig,
        positions: Vec<Vec<f64>>,
    ) -> Result<Self, ParticleError> {
        let scaling = config.check_scaling()?;
        Self::build(config, positions, scaling)
    }

    fn build(
        config: ParticleConfig,
        positions: Vec<Vec<f64>>,
        scaling: ScalingCheck,
    ) -> Result<Self, ParticleError> {
        config.validate()?;
        let n = config.species();
        if positions.len() != n || positions.iter().any(|p| p.len() != config.particles) {
            return Err(ParticleError::InvalidConfig(format!(
                "positions must be {n} species x {} particles",
                config.particles
            )));
        }
        let kernels = config
            .interaction
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&a| MollifiedKernel::new(a, config.eta))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let interacting = config.interaction.iter().flatten().any(|a| *a > 0.0);
        Ok(Self {
            truncation: LipschitzTruncation::new(config.eta, config.alpha),
            config,
            kernels,
            positions,
            interacting,
            steps: 0,
            scaling,
        })
    }

    pub fn config(&self) -> &ParticleConfig {
        &self.config
    }

    pub fn positions(&self) -> &[Vec<f64>] {
        &self.positions
    }

    pub fn species_count(&self) -> usize {
        self.positions.len()
    }

    pub fn particles(&self) -> usize {
        self.config.particles
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn scaling(&self) -> ScalingCheck {
        self.scaling
    }

    pub fn kernel(&self, i: usize, j: usize) -> &MollifiedKernel {
        &self.kernels[i][j]
    }

    pub fn truncation(&self) -> LipschitzTruncation {
        self.truncation
    }

    /// `(1/N) sum_{(l, j) != (k, i)} B_ij^eta(X_{k,i} - X_{l,j})` by direct summation.
    pub fn local_density(&self, i: usize, j: usize, k: usize) -> f64 {
        let x = self.positions[i][k];
        let kernel = &self.kernels[i][j];
        let sum: f64 = self.positions[j]
            .iter()
            .enumerate()
            .filter(|(l, _)| !(i == j && *l == k))
            .map(|(_, y)| kernel.eval(x - y))
            .sum();
        sum / self.config.particles as f64
    }

    /// Diffusion coefficients for every particle from the current positions.
    pub fn diffusion_coefficients(&self) -> Vec<Vec<f64>> {
        let n = self.species_count();
        let inv_n = 1.0 / self.config.particles as f64;
        let lists: Vec<Option<CellList>> = (0..n)
            .map(|j| {
                let any = self.kernels.iter().any(|row| row[j].mass > 0.0);
                (self.interacting && any)
                    .then(|| CellList::build(&self.positions[j], self.config.eta))
            })
            .collect();
        (0..n)
            .map(|i| {
                let base = 2.0 * self.config.sigma[i];
                self.positions[i]
                    .par_iter()
                    .enumerate()
                    .map(|(k, &x)| {
                        let mut extra = 0.0;
                        for (j, list) in lists.iter().enumerate() {
                            let kernel = &self.kernels[i][j];
                            let Some(list) = list else { continue };
                            if kernel.mass == 0.0 {
                                continue;
                            }
                            let rho: f64 = list
                                .neighbours(x)
                                .iter()
                                .filter(|(_, l)| !(i == j && *l == k))
                                .map(|(y, _)| kernel.eval(x - y))
                                .sum::<f64>()
                                * inv_n;
                            extra += self.truncation.apply(rho);
                        }
                        (base + 2.0 * extra).sqrt()
                    })
                    .collect()
            })
            .collect()
    }

    /// One Euler–Maruyama step; drift and diffusion use the pre-step positions.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        dt: f64,
        rng: &mut R,
    ) -> Result<StepRecord, ParticleError> {
        let diffusion = self.diffusion_coefficients();
        let sd = dt.sqrt();
        let increments: Vec<Vec<f64>> = self
            .positions
            .iter()
            .map(|p| {
                (0..p.len())
                    .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let before = self.positions.clone();
        for (i, species) in self.positions.iter_mut().enumerate() {
            let potential = self.config.potential(i);
            for ((x, d), dw) in species.iter_mut().zip(&diffusion[i]).zip(&increments[i]) {
                *x += -potential.gradient(*x) * dt + d * dw;
            }
            if species.iter().any(|x| !x.is_finite()) {
                return Err(ParticleError::NonFinite {
                    species: i,
                    step: self.steps + 1,
                });
            }
        }
        self.steps += 1;
        Ok(StepRecord {
            dt,
            positions: before,
            diffusion,
            increments,
        })
    }
}

/// Smooth test function with its derivative.
pub trait TestFunction: Send + Sync + std::fmt::Debug {
    fn value(&self, x: f64) -> f64;
    fn gradient(&self, x: f64) -> f64;
    /// Interval outside which the gradient vanishes, if any.
    fn support(&self) -> Option<(f64, f64)> {
        None
    }
}

/// `phi(x) = height * exp(-1/(1-r^2))`, `r = (x - center) / radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothBump {
    pub center: f64,
    pub radius: f64,
    #[serde(default = "one")]
    pub height: f64,
}

fn one() -> f64 {
    1.0
}

impl SmoothBump {
    pub fn new(center: f64, radius: f64) -> Self {
        Self {
            center,
            radius,
            height: 1.0,
        }
    }
}

impl TestFunction for SmoothBump {
    fn value(&self, x: f64) -> f64 {
        self.height * BUMP_MASS * standard_bump((x - self.center) / self.radius)
    }

    fn gradient(&self, x: f64) -> f64 {
        self.height * BUMP_MASS * standard_bump_derivative((x - self.center) / self.radius)
            / self.radius
    }

    fn support(&self) -> Option<(f64, f64)> {
        Some((self.center - self.radius, self.center + self.radius))
    }
}

/// `phi(x) = x`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Linear;

impl TestFunction for Linear {
    fn value(&self, x: f64) -> f64 {
        x
    }

    fn gradient(&self, _x: f64) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant(pub f64);

impl TestFunction for Constant {
    fn value(&self, _x: f64) -> f64 {
        self.0
    }

    fn gradient(&self, _x: f64) -> f64 {
        0.0
    }

    fn support(&self) -> Option<(f64, f64)> {
        Some((0.0, 0.0))
    }
}

/// Running `M_i(t, phi) = ∫ (1/sqrt(N)) sum_k phi'(X_{k,i}) D_{k,i} dW_i^k`.
#[derive(Debug, Clone)]
pub struct MartingaleAccumulator {
    pub species: usize,
    pub phi: Arc<dyn TestFunction>,
    pub value: f64,
    /// Running `∫ (1/N) sum_k phi'(X)^2 D^2 dt`, the quadratic variation.
    pub quadratic_variation: f64,
}

impl MartingaleAccumulator {
    pub fn new(species: usize, phi: Arc<dyn TestFunction>) -> Self {
        Self {
            species,
            phi,
            value: 0.0,
            quadratic_variation: 0.0,
        }
    }

    pub fn accumulate(&mut self, record: &StepRecord) {
        let i = self.species;
        let n = record.positions[i].len() as f64;
        let mut sum = 0.0;
        let mut qv = 0.0;
        for ((x, d), dw) in record.positions[i]
            .iter()
            .zip(&record.diffusion[i])
            .zip(&record.increments[i])
        {
            let g = self.phi.gradient(*x) * d;
            sum += g * dw;
            qv += g * g;
        }
        self.value += sum / n.sqrt();
        self.quadratic_variation += qv / n * record.dt;
    }
}

/// Density `u_i(t, x)` of the mean-field limit.
pub trait DensitySource: Sync {
    fn density(&self, species: usize, t: f64, x: f64) -> f64;
}

/// Density recorded on a uniform cell-centred grid at increasing times;
/// evaluated by linear interpolation in time and space, zero outside.
#[derive(Debug, Clone)]
pub struct GridDensityPath {
    pub origin: f64,
    pub dx: f64,
    pub times: Vec<f64>,
    /// `fields[s][i][m]`: record `s`, species `i`, cell `m`.
    pub fields: Vec<Vec<Vec<f64>>>,
}

impl GridDensityPath {
    fn at_record(&self, s: usize, i: usize, x: f64) -> f64 {
        let f = &self.fields[s][i];
        let rel = (x - self.origin) / self.dx - 0.5;
        let cells = f.len();
        if rel < -0.5 || rel > cells as f64 - 0.5 {
            return 0.0;
        }
        if rel <= 0.0 {
            return f[0];
        }
        if rel >= (cells - 1) as f64 {
            return f[cells - 1];
        }
        let m = rel.floor() as usize;
        let th = rel - m as f64;
        (1.0 - th) * f[m] + th * f[m + 1]
    }
}

impl DensitySource for GridDensityPath {
    fn density(&self, species: usize, t: f64, x: f64) -> f64 {
        let s = self.times.partition_point(|&r| r <= t);
        if s == 0 {
            return self.at_record(0, species, x);
        }
        if s >= self.times.len() {
            return self.at_record(self.times.len() - 1, species, x);
        }
        let (t0, t1) = (self.times[s - 1], self.times[s]);
        let th = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        (1.0 - th) * self.at_record(s - 1, species, x) + th * self.at_record(s, species, x)
    }
}

/// Density of non-interacting particles (`a = 0`, `U = 0`): each initial law
/// convolved with the heat kernel of variance `2 sigma_i t`.
#[derive(Debug, Clone)]
pub struct FreeDiffusion {
    laws: Vec<InitialLaw>,
    sigma: Vec<f64>,
}

impl FreeDiffusion {
    /// Point laws have no density at `t = 0` and are rejected.
    pub fn new(laws: Vec<InitialLaw>, sigma: Vec<f64>) -> Result<Self, ParticleError> {
        if laws.len() != sigma.len() {
            return Err(ParticleError::InvalidConfig(format!(
                "{} laws for {} species",
                laws.len(),
                sigma.len()
            )));
        }
        for law in &laws {
            match *law {
                InitialLaw::Point { .. } => {
                    return Err(ParticleError::InvalidConfig(
                        "point initial law has no density".into(),
                    ))
                }
                InitialLaw::Gaussian { sd, .. } if !(sd > 0.0) => {
                    return Err(ParticleError::InvalidConfig(format!(
                        "sd = {sd} must be positive"
                    )))
                }
                InitialLaw::Uniform { lo, hi } if !(hi > lo) => {
                    return Err(ParticleError::InvalidConfig(format!(
                        "empty interval [{lo}, {hi}]"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { laws, sigma })
    }
}

impl DensitySource for FreeDiffusion {
    fn density(&self, species: usize, t: f64, x: f64) -> f64 {
        let spread = 2.0 * self.sigma[species] * t.max(0.0);
        match self.laws[species] {
            InitialLaw::Gaussian { mean, sd } => {
                let v = sd * sd + spread;
                let z = x - mean;
                (-0.5 * z * z / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
            }
            InitialLaw::Uniform { lo, hi } if spread > 0.0 => {
                let s = (2.0 * spread).sqrt();
                0.5 * (erf((x - lo) / s) - erf((x - hi) / s)) / (hi - lo)
            }
            law => law.density(x),
        }
    }
}

/// Composite Simpson rule on `[a, b]` with an even number of panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let panels = panels.max(2) + panels % 2;
    let h = (b - a) / panels as f64;
    let mut s = f(a) + f(b);
    for p in 1..panels {
        let w = if p % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + p as f64 * h);
    }
    s * h / 3.0
}

/// Quadrature resolution for [`analytic_covariance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceQuadrature {
    pub x_lo: f64,
    pub x_hi: f64,
    pub x_panels: usize,
    pub t_panels: usize,
}

/// Limiting covariance
/// `E[M_i(t, phi) M_k(t, psi)] = delta_ik ∫_0^t ∫ u_i phi' psi' (2 sigma_i + 2 sum_j f(a_ij u_j)) dx dr`.
#[allow(clippy::too_many_arguments)]
pub fn analytic_covariance(
    source: &dyn DensitySource,
    interaction: &[Vec<f64>],
    sigma: &[f64],
    f: &dyn Fn(f64) -> f64,
    phi: &dyn TestFunction,
    psi: &dyn TestFunction,
    i: usize,
    k: usize,
    t: f64,
    quad: &CovarianceQuadrature,
) -> f64 {
    if i != k || t <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (quad.x_lo, quad.x_hi);
    for s in [phi.support(), psi.support()].into_iter().flatten() {
        lo = lo.max(s.0);
        hi = hi.min(s.1);
    }
    if hi <= lo {
        return 0.0;
    }
    let n = sigma.len();
    let inner = |r: f64| {
        simpson(
            |x| {
                let ui = source.density(i, r, x);
                let mut diff = 2.0 * sigma[i];
                for j in 0..n {
                    diff += 2.0 * f(interaction[i][j] * source.density(j, r, x));
                }
                ui * phi.gradient(x) * psi.gradient(x) * diff
            },
            lo,
            hi,
            quad.x_panels,
        )
    };
    simpson(inner, 0.0, t, quad.t_panels)
}
