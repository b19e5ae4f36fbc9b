//! Explicit Euler–Maruyama integration of the regularized SPDE in the state
//! variable `v`, with `w = R_eps(v)` and `u = exp(w / pi)` recovered each step.
//!
//! The drift is `div(B(w) grad w)` with face values of `B` taken as the
//! arithmetic mean of the two adjacent cells. With this choice the pairing
//! `<w, drift>` equals minus the discrete dissipation exactly, and the discrete
//! dissipation dominates the discrete lower bound face by face.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::model::{u_of_w, BalanceWeights, Coefficients, Field, FieldKind, ModelError};
use crate::noise::{
    correction_t, ito_entropy_term, noise_divergence_term, sample_increment, sigma_delta,
    NoiseBasis, NoiseError, DEFAULT_SMOOTHNESS,
};
use crate::regularization::{RegularizationConfig, RegularizationError, Regularizer};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver setting: {0}")]
    InvalidConfig(String),
    #[error("coefficients violate detailed balance for the given weights (residual {0:e})")]
    NotReversible(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Regularization(#[from] RegularizationError),
    #[error("regularization failed at step {step} (t = {t}): {source}")]
    StepFailed {
        step: usize,
        t: f64,
        #[source]
        source: RegularizationError,
    },
    #[error("blow-up at step {step} (t = {t}): max u = {max_u:e} exceeds {threshold:e}")]
    BlowUp {
        step: usize,
        t: f64,
        max_u: f64,
        threshold: f64,
    },
    #[error("density underflowed to zero at step {step} (t = {t})")]
    Underflow { step: usize, t: f64 },
}

/// Constants of the stochastic entropy budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct BudgetParams {
    pub kappa: f64,
    pub kappa3: f64,
}

impl Default for BudgetParams {
    fn default() -> Self {
        Self {
            kappa: 0.5,
            kappa3: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct SolverConfig {
    pub regularization: RegularizationConfig,
    /// Square-root regularization width; defaults to `epsilon`.
    pub delta: Option<f64>,
    pub lambda: f64,
    /// Population size `N`; the noise amplitude is `1/sqrt(N)`.
    pub n_pop: f64,
    pub dt: f64,
    pub t_end: f64,
    /// Noise truncation `K`; defaults to half the number of cells.
    pub modes: Option<usize>,
    pub smoothness: f64,
    pub seed: u64,
    /// Switches off noise and correction.
    pub deterministic: bool,
    /// Field snapshots are stored every this many steps.
    pub record_every: usize,
    pub cfl_safety: f64,
    pub blowup_threshold: f64,
    pub budget: BudgetParams,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            regularization: RegularizationConfig::default(),
            delta: None,
            lambda: 1.0,
            n_pop: 1e4,
            dt: 1e-5,
            t_end: 0.1,
            modes: None,
            smoothness: DEFAULT_SMOOTHNESS,
            seed: 0,
            deterministic: false,
            record_every: 100,
            cfl_safety: 0.8,
            blowup_threshold: 1e8,
            budget: BudgetParams::default(),
        }
    }
}

impl SolverConfig {
    pub fn epsilon(&self) -> f64 {
        self.regularization.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or(self.regularization.epsilon)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        self.regularization.validate()?;
        let bad = |msg: String| Err(SolverError::InvalidConfig(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return bad(format!("tEnd = {} must be nonnegative", self.t_end));
        }
        if !(self.n_pop > 0.0) {
            return bad(format!("nPop = {} must be positive", self.n_pop));
        }
        if !self.lambda.is_finite() {
            return bad("lambda must be finite".into());
        }
        if !(self.delta() > 0.0 && self.delta().is_finite()) {
            return bad(format!("delta = {} must be positive", self.delta()));
        }
        if self.record_every == 0 {
            return bad("recordEvery must be at least 1".into());
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return bad(format!(
                "cflSafety = {} must lie in (0, 1]",
                self.cfl_safety
            ));
        }
        if !(self.blowup_threshold > 0.0) {
            return bad("blowupThreshold must be positive".into());
        }
        if !(self.budget.kappa > 0.0 && self.budget.kappa <= 0.5)
            || !(self.budget.kappa3 > 0.0 && self.budget.kappa3 <= 0.5)
        {
            return bad("budget kappa and kappa3 must lie in (0, 1/2]".into());
        }
        Ok(())
    }
}

/// Solution state at one time level.
#[derive(Debug, Clone)]
pub struct State {
    pub t: f64,
    pub step: usize,
    pub dt: f64,
    pub v: Field,
    pub w: Field,
    pub u: Field,
}

/// Entropy-pairing contributions of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepWork {
    /// `dt * D` at the start of the step.
    pub dissipation: f64,
    /// `<w, noise increment>`.
    pub noise: f64,
    /// `dt * (lambda / N) <w, T>`.
    pub correction: f64,
    /// `dt * II`, the Itô second-order term.
    pub ito: f64,
    pub newton_iterations: usize,
    pub capped: bool,
}

/// Diagnostics at one time level. Cumulative entries integrate the step
/// contributions from time zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct EntropyReport {
    pub t: f64,
    pub step: usize,
    /// `∫ h(u) dx + (eps/2) ||L w||^2`.
    pub entropy: f64,
    pub entropy_density: f64,
    pub regularization_energy: f64,
    pub dissipation: f64,
    pub dissipation_lower_bound: f64,
    /// `∫ v_i dx`, conserved exactly by the scheme.
    pub mass: Vec<f64>,
    /// `∫ u_i dx`.
    pub u_mass: Vec<f64>,
    pub min_u: Vec<f64>,
    pub max_u: Vec<f64>,
    /// Right-hand side rate of the stochastic entropy budget.
    pub budget_rate: f64,
    pub cumulative_dissipation: f64,
    pub cumulative_noise_work: f64,
    pub cumulative_correction_work: f64,
    pub cumulative_ito_work: f64,
    /// `H(t) - H(0) + ∫D - (noise + correction + Itô work)`.
    pub balance_residual: f64,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub step: usize,
    pub v: Field,
    pub w: Field,
    pub u: Field,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub seed: u64,
    pub snapshots: Vec<Snapshot>,
    /// One report per step, including the initial state.
    pub reports: Vec<EntropyReport>,
    pub newton_iterations: usize,
    pub capped_steps: usize,
}

impl Trajectory {
    pub fn initial(&self) -> &Snapshot {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots
            .last()
            .expect("trajectory has at least one snapshot")
    }

    pub fn final_report(&self) -> &EntropyReport {
        self.reports
            .last()
            .expect("trajectory has at least one report")
    }

    /// Largest `|∫v_i(t) - ∫v_i(0)| / ∫v_i(0)` over reports and species.
    pub fn max_mass_drift(&self) -> f64 {
        let m0 = &self.reports[0].mass;
        self.reports
            .iter()
            .flat_map(|r| {
                r.mass
                    .iter()
                    .zip(m0)
                    .map(|(m, z)| (m - z).abs() / z.abs().max(f64::MIN_POSITIVE))
            })
            .fold(0.0, f64::max)
    }

    /// Smallest density seen at any report.
    pub fn min_density(&self) -> f64 {
        self.reports
            .iter()
            .flat_map(|r| r.min_u.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// `min_t (D - D_lb)`.
    pub fn min_dissipation_gap(&self) -> f64 {
        self.reports
            .iter()
            .map(|r| r.dissipation - r.dissipation_lower_bound)
            .fold(f64::INFINITY, f64::min)
    }

    /// `max_t |balance residual| / H(0)`.
    pub fn max_relative_balance_error(&self) -> f64 {
        let h0 = self.reports[0].entropy.abs().max(f64::MIN_POSITIVE);
        self.reports
            .iter()
            .map(|r| r.balance_residual.abs() / h0)
            .fold(0.0, f64::max)
    }
}

/// Independent RNG stream for replica `index` of a seeded ensemble.
pub fn replica_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Cell-centred mobility `B_ij = A_ij(u) u_j / pi_j`, laid out as
/// `[(i * n + j) * cells + m]`.
fn cell_mobility(coeffs: &Coefficients, pi: &BalanceWeights, u: &Field) -> Vec<f64> {
    let n = coeffs.species();
    let cells = u.cells();
    let mut b = vec![0.0; n * n * cells];
    let mut point = vec![0.0; n];
    for m in 0..cells {
        u.point_into(m, &mut point);
        for i in 0..n {
            let ta = coeffs.tilde_a_point(i, &point);
            for j in 0..n {
                let mut a = coeffs.cross(i, j) * point[i];
                if i == j {
                    a += ta;
                }
                b[(i * n + j) * cells + m] = a * point[j] / pi.get(j);
            }
        }
    }
    b
}

/// `div(B(w) grad w)` together with the discrete dissipation
/// `D = sum_faces dx grad w . B_face grad w`.
pub fn drift_and_dissipation(
    grid: &Grid,
    coeffs: &Coefficients,
    pi: &BalanceWeights,
    w: &Field,
    u: &Field,
) -> (Field, f64) {
    let n = coeffs.species();
    let cells = grid.cells();
    let grads: Vec<Vec<f64>> = (0..n).map(|i| grid.gradient(w.species(i))).collect();
    let b = cell_mobility(coeffs, pi, u);
    let mut flux = vec![vec![0.0; cells + 1]; n];
    let mut d = 0.0;
    for f in 1..cells {
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                let row = &b[(i * n + j) * cells..];
                s += 0.5 * (row[f - 1] + row[f]) * grads[j][f];
            }
            flux[i][f] = s;
            d += grads[i][f] * s;
        }
    }
    let mut drift = Field::zeros(FieldKind::Auxiliary, n, cells);
    for (i, fl) in flux.iter().enumerate() {
        grid.divergence_into(fl, drift.species_mut(i));
    }
    (drift, d * grid.dx())
}

/// `div(B(w) grad w)` with `u = exp(w / pi)`.
pub fn drift_term(grid: &Grid, coeffs: &Coefficients, pi: &BalanceWeights, w: &Field) -> Field {
    let u = u_of_w(pi, w);
    drift_and_dissipation(grid, coeffs, pi, w, &u).0
}

/// Discrete dissipation `D(w)`.
pub fn dissipation(grid: &Grid, coeffs: &Coefficients, pi: &BalanceWeights, w: &Field) -> f64 {
    let u = u_of_w(pi, w);
    drift_and_dissipation(grid, coeffs, pi, w, &u).1
}

/// Discrete lower bound
/// `sum_i pi_i (4 a_i0 |grad sqrt(u_i)|^2 + 2 a_ii |grad u_i|^2)
///  + 2 sum_{i != j} pi_i a_ij |grad sqrt(u_i u_j)|^2`, integrated over faces.
pub fn dissipation_lower_bound(
    grid: &Grid,
    coeffs: &Coefficients,
    pi: &BalanceWeights,
    u: &Field,
) -> f64 {
    let n = coeffs.species();
    let sq = |f: &[f64]| -> f64 { grid.gradient(f).iter().map(|g| g * g).sum::<f64>() };
    let mut total = 0.0;
    for i in 0..n {
        let ui = u.species(i);
        let root: Vec<f64> = ui.iter().map(|v| v.sqrt()).collect();
        total += pi.get(i) * (4.0 * coeffs.base(i) * sq(&root) + 2.0 * coeffs.cross(i, i) * sq(ui));
        for j in 0..n {
            if j == i || coeffs.cross(i, j) == 0.0 {
                continue;
            }
            let prod: Vec<f64> = ui
                .iter()
                .zip(u.species(j))
                .map(|(a, b)| (a * b).sqrt())
                .collect();
            total += 2.0 * pi.get(i) * coeffs.cross(i, j) * sq(&prod);
        }
    }
    total * grid.dx()
}

/// Largest stable explicit step for the linearization of the drift around `u`.
///
/// Mode `k` of the discrete Laplacian with eigenvalue `kappa_k` decays at a
/// rate of at most `a kappa_k d / (d + eps mu_k^2)`, where `a` bounds the row
/// sums of `A(u)` and `d = max u / pi`. For `eps -> 0` this is the classical
/// `dx^2 / (2 a)` bound.
pub fn stable_dt(
    grid: &Grid,
    coeffs: &Coefficients,
    pi: &BalanceWeights,
    u: &Field,
    epsilon: f64,
    multipliers: &[f64],
) -> f64 {
    let n = coeffs.species();
    let mut a_max: f64 = 0.0;
    let mut d_max: f64 = 0.0;
    let mut point = vec![0.0; n];
    for m in 0..u.cells() {
        u.point_into(m, &mut point);
        for i in 0..n {
            let ta = coeffs.tilde_a_point(i, &point);
            let row: f64 = ta + (0..n).map(|j| coeffs.cross(i, j) * point[i]).sum::<f64>();
            a_max = a_max.max(row);
            d_max = d_max.max(point[i] / pi.get(i));
        }
    }
    let cells = grid.cells();
    let mut rate: f64 = 0.0;
    for (k, mu) in multipliers.iter().enumerate() {
        let s = (k as f64 * std::f64::consts::PI / (2.0 * cells as f64)).sin();
        let kappa = (2.0 / grid.dx() * s).powi(2);
        rate = rate.max(a_max * kappa * d_max / (d_max + epsilon * mu * mu));
    }
    if rate > 0.0 {
        2.0 / rate
    } else {
        f64::INFINITY
    }
}

/// The regularized SPDE on a fixed grid with fixed coefficients.
#[derive(Debug, Clone)]
pub struct Solver {
    grid: Grid,
    coeffs: Coefficients,
    pi: BalanceWeights,
    basis: NoiseBasis,
    reg: Regularizer,
    config: SolverConfig,
}

impl Solver {
    pub fn new(
        grid: Grid,
        coeffs: Coefficients,
        pi: BalanceWeights,
        config: SolverConfig,
    ) -> Result<Self, SolverError> {
        config.validate()?;
        coeffs.check_solver_ready()?;
        if pi.len() != coeffs.species() {
            return Err(ModelError::DimensionMismatch {
                expected: coeffs.species(),
                found: pi.len(),
            }
            .into());
        }
        let residual = pi.residual(&coeffs);
        if residual > crate::model::BALANCE_TOLERANCE {
            return Err(SolverError::NotReversible(residual));
        }
        let modes = config.modes.unwrap_or(grid.cells() / 2).max(1);
        let basis = NoiseBasis::new(&grid, modes, config.smoothness)?;
        let reg = Regularizer::new(&grid, config.regularization.clone())?;
        Ok(Self {
            grid,
            coeffs,
            pi,
            basis,
            reg,
            config,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coeffs
    }

    pub fn weights(&self) -> &BalanceWeights {
        &self.pi
    }

    pub fn basis(&self) -> &NoiseBasis {
        &self.basis
    }

    pub fn regularizer(&self) -> &Regularizer {
        &self.reg
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    /// Number of steps and uniform step size covering `[0, t_end]` with
    /// `dt <= dt_max`.
    fn schedule(&self, dt_max: f64) -> (usize, f64) {
        let t_end = self.config.t_end;
        if t_end == 0.0 {
            return (0, self.config.dt.min(dt_max));
        }
        let dt = self.config.dt.min(dt_max);
        let steps = ((t_end / dt) - 1e-9).ceil().max(1.0) as usize;
        (steps, t_end / steps as f64)
    }

    /// `v(0) = u0`, `w(0) = R_eps(u0)`; the step size is shrunk if it exceeds
    /// the stability bound at `u(w(0))`.
    pub fn initial_state(&self, u0: &Field) -> Result<State, SolverError> {
        if u0.species_count() != self.coeffs.species() {
            return Err(ModelError::DimensionMismatch {
                expected: self.coeffs.species(),
                found: u0.species_count(),
            }
            .into());
        }
        if u0.cells() != self.grid.cells() {
            return Err(SolverError::InvalidConfig(format!(
                "initial field has {} cells, grid has {}",
                u0.cells(),
                self.grid.cells()
            )));
        }
        u0.check_finite()?;
        u0.check_nonnegative()?;
        let v = u0.clone().with_kind(FieldKind::RegularizedState);
        let sol = self.reg.solve(&self.grid, &self.pi, &v)?;
        let u = u_of_w(&self.pi, &sol.w);
        let dt_max = self.config.cfl_safety * self.stable_dt(&u);
        if self.config.dt > dt_max {
            warn!(
                "dt = {:e} exceeds the stability bound {:e}; shrinking",
                self.config.dt, dt_max
            );
        }
        let (_, dt) = self.schedule(dt_max);
        Ok(State {
            t: 0.0,
            step: 0,
            dt,
            v,
            w: sol.w,
            u,
        })
    }

    pub fn stable_dt(&self, u: &Field) -> f64 {
        stable_dt(
            &self.grid,
            &self.coeffs,
            &self.pi,
            u,
            self.config.epsilon(),
            self.reg.operator().multipliers(),
        )
    }

    /// Steps needed to reach `t_end` from `state` with its step size.
    pub fn steps_for(&self, state: &State) -> usize {
        if self.config.t_end == 0.0 {
            0
        } else {
            ((self.config.t_end / state.dt) - 1e-9).ceil().max(1.0) as usize
        }
    }

    /// One explicit Euler–Maruyama step.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut State,
        rng: &mut R,
    ) -> Result<StepWork, SolverError> {
        let dt = state.dt;
        let (drift, d) =
            drift_and_dissipation(&self.grid, &self.coeffs, &self.pi, &state.w, &state.u);
        let mut v = state.v.clone();
        v.axpy(dt, &drift);
        let mut work = StepWork {
            dissipation: dt * d,
            ..StepWork::default()
        };
        if !self.config.deterministic {
            let n = self.coeffs.species();
            let n_pop = self.config.n_pop;
            let delta = self.config.delta();
            let sigma = sigma_delta(&self.coeffs, &state.u, delta);
            let dw = sample_increment(rng, &self.basis, n, dt);
            let noise = noise_divergence_term(&self.grid, &self.basis, &sigma, &dw, n_pop)?;
            let corr = correction_t(&self.grid, &self.basis, &self.coeffs, &state.u, delta);
            let scale = dt * self.config.lambda / n_pop;
            work.noise = self.pairing(&state.w, &noise);
            work.correction = scale * self.pairing(&state.w, &corr);
            work.ito =
                dt * ito_entropy_term(&self.grid, &self.basis, &sigma, &state.u, &self.pi, n_pop);
            v.axpy(1.0, &noise);
            v.axpy(scale, &corr);
        }
        let next_step = state.step + 1;
        let t = next_step as f64 * dt;
        let sol = self
            .reg
            .solve_from(&self.grid, &self.pi, &v, Some(&state.w))
            .map_err(|source| SolverError::StepFailed {
                step: next_step,
                t,
                source,
            })?;
        let u = u_of_w(&self.pi, &sol.w);
        let max_u = u.max();
        if !(max_u <= self.config.blowup_threshold) {
            return Err(SolverError::BlowUp {
                step: next_step,
                t,
                max_u,
                threshold: self.config.blowup_threshold,
            });
        }
        if !(u.min() > 0.0) {
            return Err(SolverError::Underflow { step: next_step, t });
        }
        work.newton_iterations = sol.iterations;
        work.capped = sol.capped;
        state.v = v;
        state.w = sol.w;
        state.u = u;
        state.step = next_step;
        state.t = t;
        Ok(work)
    }

    fn pairing(&self, a: &Field, b: &Field) -> f64 {
        (0..a.species_count())
            .map(|i| self.grid.inner(a.species(i), b.species(i)))
            .sum()
    }

    /// Diagnostics of a state; cumulative fields are left at zero.
    pub fn entropy_report(&self, state: &State) -> Result<EntropyReport, SolverError> {
        let grid = &self.grid;
        let n = self.coeffs.species();
        let density = crate::model::entropy_functional(&self.pi, &state.u, grid)?;
        let reg_energy =
            0.5 * self.config.epsilon() * self.reg.operator().norm_sq_field(grid, &state.w);
        let (_, d) = drift_and_dissipation(grid, &self.coeffs, &self.pi, &state.w, &state.u);
        let d_lb = dissipation_lower_bound(grid, &self.coeffs, &self.pi, &state.u);
        let per_species = |f: &dyn Fn(&[f64]) -> f64, field: &Field| -> Vec<f64> {
            (0..n).map(|i| f(field.species(i))).collect()
        };
        Ok(EntropyReport {
            t: state.t,
            step: state.step,
            entropy: density + reg_energy,
            entropy_density: density,
            regularization_energy: reg_energy,
            dissipation: d,
            dissipation_lower_bound: d_lb,
            mass: per_species(&|f| grid.integrate(f), &state.v),
            u_mass: per_species(&|f| grid.integrate(f), &state.u),
            min_u: per_species(
                &|f| f.iter().copied().fold(f64::INFINITY, f64::min),
                &state.u,
            ),
            max_u: per_species(
                &|f| f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                &state.u,
            ),
            budget_rate: self.budget_rate(&state.u),
            cumulative_dissipation: 0.0,
            cumulative_noise_work: 0.0,
            cumulative_correction_work: 0.0,
            cumulative_ito_work: 0.0,
            balance_residual: 0.0,
        })
    }

    /// Rate `C(u)` bounding the growth of the expected entropy:
    /// `E H(t) <= H(0) + ∫ E C(u(s)) ds`. Collects the nonnegative terms of
    /// the correction estimate, with the last term in its `|d_x u_i|` form.
    /// Derivative series take the larger of the continuous norms and those of
    /// the discrete operator the noise is actually applied through.
    pub fn budget_rate(&self, u: &Field) -> f64 {
        let grid = &self.grid;
        let n = self.coeffs.species();
        let nf = n as f64;
        let lambda = self.config.lambda;
        let kappa = self.config.budget.kappa;
        let kappa3 = self.config.budget.kappa3;
        let norms = self.basis.norms();
        let applied = self.basis.applied_norms();
        let se = norms.value_sq_sum;
        let sde = norms.derivative_sq_sum.max(applied.derivative_sq_sum);
        let dl2 = self
            .basis
            .derivative_l2_sq_sum()
            .max(self.basis.applied_derivative_l2_sq_sum());
        let c1 = (32.0 * lambda + 1.0) / (2.0 * kappa) + 0.5;
        let mut total = 0.0;
        for i in 0..n {
            let ui = u.species(i);
            let aii = self.coeffs.cross(i, i);
            let grad = grid.gradient(ui);
            let grad_sq: f64 = grad.iter().map(|g| g * g).sum::<f64>() * grid.dx();
            let grad_abs: f64 = grad.iter().map(|g| g.abs()).sum::<f64>() * grid.dx();
            let ent: f64 = ui.iter().map(|v| v * v.ln() - v + 2.0).sum::<f64>() * grid.dx();
            let c4 = 18.0 * (lambda - 1.0).abs() / kappa + 0.5 + 0.5 * lambda * aii;
            total += self.pi.get(i)
                * (c1 * sde * ent
                    + (lambda / 3.0 + kappa3 * nf / 4.0) * se * grad_sq
                    + (lambda / (2.0 * kappa) + 0.5 / kappa3) * dl2
                    + (c4 * se + 0.5 * lambda * aii * sde) * nf / (2.0 * self.coeffs.base(i))
                        * grad_abs);
        }
        total / self.config.n_pop
    }

    /// Runs from `u0` with the configured seed.
    pub fn run(&self, u0: &Field) -> Result<Trajectory, SolverError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        self.run_with_rng(u0, &mut rng)
    }

    pub fn run_with_rng<R: Rng + ?Sized>(
        &self,
        u0: &Field,
        rng: &mut R,
    ) -> Result<Trajectory, SolverError> {
        let mut state = self.initial_state(u0)?;
        let steps = self.steps_for(&state);
        let snapshot = |s: &State| Snapshot {
            t: s.t,
            step: s.step,
            v: s.v.clone(),
            w: s.w.clone(),
            u: s.u.clone(),
        };
        let mut snapshots = vec![snapshot(&state)];
        let first = self.entropy_report(&state)?;
        let h0 = first.entropy;
        let mut reports = Vec::with_capacity(steps + 1);
        reports.push(first);
        let mut cumulative = StepWork::default();
        let mut newton_iterations = 0;
        let mut capped_steps = 0;
        for k in 1..=steps {
            let work = self.step(&mut state, rng)?;
            cumulative.dissipation += work.dissipation;
            cumulative.noise += work.noise;
            cumulative.correction += work.correction;
            cumulative.ito += work.ito;
            newton_iterations += work.newton_iterations;
            if work.capped {
                capped_steps += 1;
            }
            let mut report = self.entropy_report(&state)?;
            report.cumulative_dissipation = cumulative.dissipation;
            report.cumulative_noise_work = cumulative.noise;
            report.cumulative_correction_work = cumulative.correction;
            report.cumulative_ito_work = cumulative.ito;
            report.balance_residual = report.entropy - h0 + cumulative.dissipation
                - cumulative.noise
                - cumulative.correction
                - cumulative.ito;
            reports.push(report);
            if k % self.config.record_every == 0 || k == steps {
                snapshots.push(snapshot(&state));
            }
        }
        Ok(Trajectory {
            dt: state.dt,
            seed: self.config.seed,
            snapshots,
            reports,
            newton_iterations,
            capped_steps,
        })
    }

    /// Independent replicas on separate RNG streams of the configured seed.
    pub fn run_replicas(&self, u0: &Field, count: usize) -> Vec<Result<Trajectory, SolverError>> {
        (0..count)
            .into_par_iter()
            .map(|r| {
                let mut rng = replica_rng(self.config.seed, r as u64);
                self.run_with_rng(u0, &mut rng)
            })
            .collect()
    }
}
