//! Spectral operator `L`, the monotone map `Q_eps(w) = u(w) + eps L*L w`, and
//! its inverse `R_eps` computed by damped Newton.
//!
//! `L` multiplies the Neumann cosine coefficients by `mu_k = (1 + lambda_k)^{m/2}`,
//! so `||L v||` is the spectral `H^m` norm and `mu_0 = 1`. Because `u(w)` acts
//! species by species, `Q_eps` decouples and each species is inverted on its own.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::model::{entropy_functional, BalanceWeights, Field, FieldKind, ModelError, EXP_ARG_CAP};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegularizationError {
    #[error("Sobolev order m = {0} must be at least 2")]
    InvalidOrder(u32),
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("invalid regularization setting: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in the regularized state")]
    NonFinite,
    #[error(
        "Newton solve for species {species} did not converge in {iterations} iterations \
         (residual history {history:?})"
    )]
    NoConvergence {
        species: usize,
        iterations: usize,
        history: Vec<f64>,
    },
    #[error("field has {found} cells, grid has {expected}")]
    CellMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Spectral realization of `L` on the Neumann eigenbasis of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorL {
    order: u32,
    multipliers: Vec<f64>,
}

impl OperatorL {
    /// `m` must exceed `d/2 + 1`; for `d = 1` the smallest integer choice is 2.
    pub fn new(grid: &Grid, order: u32) -> Result<Self, RegularizationError> {
        if order < 2 {
            return Err(RegularizationError::InvalidOrder(order));
        }
        let multipliers = grid
            .eigenbasis()
            .eigenvalues()
            .iter()
            .map(|l| (1.0 + l).powf(0.5 * order as f64))
            .collect();
        Ok(Self { order, multipliers })
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn multipliers(&self) -> &[f64] {
        &self.multipliers
    }

    fn scaled(&self, grid: &Grid, v: &[f64], power: i32) -> Vec<f64> {
        let mut c = grid.to_spectral(v);
        for (ck, mu) in c.iter_mut().zip(&self.multipliers) {
            *ck *= mu.powi(power);
        }
        grid.from_spectral(&c)
    }

    pub fn apply(&self, grid: &Grid, v: &[f64]) -> Vec<f64> {
        self.scaled(grid, v, 1)
    }

    /// `L* L v`; `L` is self-adjoint so this is `L^2 v`.
    pub fn apply_lstar_l(&self, grid: &Grid, v: &[f64]) -> Vec<f64> {
        self.scaled(grid, v, 2)
    }

    pub fn apply_inverse(&self, grid: &Grid, v: &[f64]) -> Vec<f64> {
        self.scaled(grid, v, -1)
    }

    /// `||L v||^2`.
    pub fn norm_sq(&self, grid: &Grid, v: &[f64]) -> f64 {
        grid.to_spectral(v)
            .iter()
            .zip(&self.multipliers)
            .map(|(c, mu)| (c * mu).powi(2))
            .sum()
    }

    /// Dual norm `||L^{-1} r||`, used for all residuals.
    pub fn dual_norm(&self, grid: &Grid, r: &[f64]) -> f64 {
        spectral_dual_norm(&grid.to_spectral(r), &self.multipliers)
    }

    /// Dual norm of a multi-species field, `sqrt(sum_i ||L^{-1} r_i||^2)`.
    pub fn dual_norm_field(&self, grid: &Grid, r: &Field) -> f64 {
        (0..r.species_count())
            .map(|i| self.dual_norm(grid, r.species(i)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `sum_i ||L w_i||^2`.
    pub fn norm_sq_field(&self, grid: &Grid, w: &Field) -> f64 {
        (0..w.species_count())
            .map(|i| self.norm_sq(grid, w.species(i)))
            .sum()
    }
}

fn spectral_dual_norm(c: &[f64], mu: &[f64]) -> f64 {
    c.iter()
        .zip(mu)
        .map(|(ck, m)| (ck / m).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct RegularizationConfig {
    pub epsilon: f64,
    /// Sobolev order `m` of `L`.
    pub order: u32,
    /// Absolute tolerance on `||L^{-1}(Q_eps(w) - v)||` summed over species.
    pub newton_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Floor applied to `v` when forming the initial guess `pi log v`.
    pub initial_floor: f64,
    /// Relative tolerance of the inner conjugate-gradient solves.
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            order: 2,
            newton_tol: 1e-10,
            max_iter: 50,
            max_halvings: 20,
            initial_floor: 1e-12,
            cg_tol: 1e-8,
            cg_max_iter: 1000,
        }
    }
}

impl RegularizationConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RegularizationError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(RegularizationError::InvalidEpsilon(self.epsilon));
        }
        if self.order < 2 {
            return Err(RegularizationError::InvalidOrder(self.order));
        }
        let bad = |what: &str| Err(RegularizationError::InvalidConfig(what.to_string()));
        if !(self.newton_tol > 0.0) {
            return bad("newtonTol must be positive");
        }
        if self.max_iter == 0 || self.cg_max_iter == 0 {
            return bad("iteration limits must be positive");
        }
        if !(self.initial_floor > 0.0) {
            return bad("initialFloor must be positive");
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return bad("cgTol must lie in (0, 1)");
        }
        Ok(())
    }
}

/// `Q_eps(w) = u(w) + eps L*L w`.
pub fn q_eps(grid: &Grid, op: &OperatorL, pi: &BalanceWeights, w: &Field, eps: f64) -> Field {
    let mut out = Field::zeros(FieldKind::RegularizedState, w.species_count(), w.cells());
    for i in 0..w.species_count() {
        let p = pi.get(i);
        let llw = op.apply_lstar_l(grid, w.species(i));
        for ((o, wv), l) in out.species_mut(i).iter_mut().zip(w.species(i)).zip(llw) {
            *o = (wv / p).min(EXP_ARG_CAP).exp() + eps * l;
        }
    }
    out
}

/// Regularized entropy `∫ h(u(w)) dx + (eps/2) ||L w||^2`.
pub fn regularized_entropy(
    grid: &Grid,
    op: &OperatorL,
    pi: &BalanceWeights,
    w: &Field,
    eps: f64,
) -> Result<f64, RegularizationError> {
    let u = crate::model::u_of_w(pi, w);
    Ok(entropy_functional(pi, &u, grid)? + 0.5 * eps * op.norm_sq_field(grid, w))
}

/// Result of an `R_eps` solve.
#[derive(Debug, Clone)]
pub struct Regularized {
    pub w: Field,
    /// Newton iterations summed over species.
    pub iterations: usize,
    /// Final residual `||L^{-1}(Q_eps(w) - v)||` over all species.
    pub residual: f64,
    /// Whether any exponent hit the overflow cap during the solve.
    pub capped: bool,
}

/// Inverse of `Q_eps` for one grid, operator and configuration.
#[derive(Debug, Clone)]
pub struct Regularizer {
    op: OperatorL,
    config: RegularizationConfig,
}

struct Workspace {
    u: Vec<f64>,
    spec: Vec<f64>,
    tmp: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    step: Vec<f64>,
    trial: Vec<f64>,
    rhs: Vec<f64>,
}

impl Workspace {
    fn new(cells: usize) -> Self {
        let v = || vec![0.0; cells];
        Self {
            u: v(),
            spec: v(),
            tmp: v(),
            r: v(),
            z: v(),
            p: v(),
            q: v(),
            step: v(),
            trial: v(),
            rhs: v(),
        }
    }
}

impl Regularizer {
    pub fn new(grid: &Grid, config: RegularizationConfig) -> Result<Self, RegularizationError> {
        config.validate()?;
        let op = OperatorL::new(grid, config.order)?;
        Ok(Self { op, config })
    }

    pub fn operator(&self) -> &OperatorL {
        &self.op
    }

    pub fn config(&self) -> &RegularizationConfig {
        &self.config
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon
    }

    pub fn q_eps(&self, grid: &Grid, pi: &BalanceWeights, w: &Field) -> Field {
        q_eps(grid, &self.op, pi, w, self.config.epsilon)
    }

    /// Solves `Q_eps(w) = v` from the default initial guess `pi log max(v, floor)`.
    pub fn solve(
        &self,
        grid: &Grid,
        pi: &BalanceWeights,
        v: &Field,
    ) -> Result<Regularized, RegularizationError> {
        self.solve_from(grid, pi, v, None)
    }

    /// Solves `Q_eps(w) = v`, starting Newton from `guess` when given.
    pub fn solve_from(
        &self,
        grid: &Grid,
        pi: &BalanceWeights,
        v: &Field,
        guess: Option<&Field>,
    ) -> Result<Regularized, RegularizationError> {
        if v.cells() != grid.cells() {
            return Err(RegularizationError::CellMismatch {
                expected: grid.cells(),
                found: v.cells(),
            });
        }
        if v.species_count() != pi.len() {
            return Err(ModelError::DimensionMismatch {
                expected: pi.len(),
                found: v.species_count(),
            }
            .into());
        }
        if v.values().iter().any(|x| !x.is_finite()) {
            return Err(RegularizationError::NonFinite);
        }
        let n = v.species_count();
        let species_tol = self.config.newton_tol / (n as f64).sqrt();
        let mut w = Field::zeros(FieldKind::EntropyVariable, n, v.cells());
        let mut ws = Workspace::new(v.cells());
        let mut iterations = 0;
        let mut residual_sq = 0.0;
        let mut capped = false;
        for i in 0..n {
            let p = pi.get(i);
            let wi = w.species_mut(i);
            match guess {
                Some(g) if g.cells() == v.cells() && g.species_count() == n => {
                    wi.copy_from_slice(g.species(i))
                }
                _ => {
                    for (wv, vv) in wi.iter_mut().zip(v.species(i)) {
                        *wv = p * vv.max(self.config.initial_floor).ln();
                    }
                }
            }
            let out = self.newton(grid, p, v.species(i), wi, species_tol, &mut ws);
            let (its, res, cap) = out.map_err(|history| RegularizationError::NoConvergence {
                species: i,
                iterations: history.len(),
                history,
            })?;
            iterations += its;
            residual_sq += res * res;
            capped |= cap;
        }
        if w.values().iter().any(|x| !x.is_finite()) {
            return Err(RegularizationError::NonFinite);
        }
        Ok(Regularized {
            w,
            iterations,
            residual: residual_sq.sqrt(),
            capped,
        })
    }

    /// Residual `r = exp(w/p) + eps L*L w - v` into `ws.r`, `exp(w/p)` into
    /// `ws.u`; returns the dual norm of `r` and whether the cap was hit.
    fn residual(
        &self,
        grid: &Grid,
        p: f64,
        v: &[f64],
        w: &[f64],
        ws: &mut Workspace,
    ) -> (f64, bool) {
        let eps = self.config.epsilon;
        let mu = &self.op.multipliers;
        let mut capped = false;
        for (u, wv) in ws.u.iter_mut().zip(w) {
            let arg = wv / p;
            if arg > EXP_ARG_CAP {
                capped = true;
            }
            *u = arg.min(EXP_ARG_CAP).exp();
        }
        grid.to_spectral_into(w, &mut ws.spec);
        for (c, m) in ws.spec.iter_mut().zip(mu) {
            *c *= m * m;
        }
        grid.from_spectral_into(&ws.spec, &mut ws.tmp);
        for (((r, u), l), vv) in ws.r.iter_mut().zip(&ws.u).zip(&ws.tmp).zip(v) {
            *r = u + eps * l - vv;
        }
        grid.to_spectral_into(&ws.r, &mut ws.spec);
        (spectral_dual_norm(&ws.spec, mu), capped)
    }

    /// `Phi(w) = ∫ p exp(w/p) + (eps/2) ||L w||^2 - <v, w>`, whose gradient is
    /// the residual.
    fn merit(&self, grid: &Grid, p: f64, v: &[f64], w: &[f64], spec: &mut [f64]) -> f64 {
        grid.to_spectral_into(w, spec);
        let lw: f64 = spec
            .iter()
            .zip(&self.op.multipliers)
            .map(|(c, m)| (c * m).powi(2))
            .sum();
        let pot: f64 = w
            .iter()
            .zip(v)
            .map(|(wv, vv)| p * (wv / p).min(EXP_ARG_CAP).exp() - vv * wv)
            .sum();
        pot * grid.dx() + 0.5 * self.config.epsilon * lw
    }

    /// Damped Newton for one species. On failure returns the residual history.
    fn newton(
        &self,
        grid: &Grid,
        p: f64,
        v: &[f64],
        w: &mut [f64],
        tol: f64,
        ws: &mut Workspace,
    ) -> Result<(usize, f64, bool), Vec<f64>> {
        let mut history = Vec::new();
        let mut capped = false;
        let (mut res, cap) = self.residual(grid, p, v, w, ws);
        capped |= cap;
        for iter in 0..self.config.max_iter {
            if !res.is_finite() {
                history.push(res);
                return Err(history);
            }
            history.push(res);
            if res <= tol {
                return Ok((iter, res, capped));
            }
            // Newton direction: (diag(u/p) + eps L*L) step = -r
            for (b, r) in ws.rhs.iter_mut().zip(&ws.r) {
                *b = -r;
            }
            self.conjugate_gradient(grid, p, ws);
            let slope = ws.r.iter().zip(&ws.step).map(|(a, b)| a * b).sum::<f64>() * grid.dx();
            let phi0 = self.merit(grid, p, v, w, &mut ws.spec);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..=self.config.max_halvings {
                for ((tr, wv), s) in ws.trial.iter_mut().zip(w.iter()).zip(&ws.step) {
                    *tr = wv + t * s;
                }
                let trial = std::mem::take(&mut ws.trial);
                let phi = self.merit(grid, p, v, &trial, &mut ws.spec);
                let armijo = phi <= phi0 + 1e-4 * t * slope;
                // near convergence the merit change drowns in rounding, so a
                // decrease of the residual itself is also accepted
                let (trial_res, cap) = if armijo {
                    (f64::NAN, false)
                } else {
                    self.residual(grid, p, v, &trial, ws)
                };
                let ok = armijo || trial_res <= (1.0 - 1e-4 * t) * res;
                ws.trial = trial;
                if ok {
                    w.copy_from_slice(&ws.trial);
                    capped |= cap;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return Err(history);
            }
            let (r, cap) = self.residual(grid, p, v, w, ws);
            res = r;
            capped |= cap;
        }
        history.push(res);
        if res <= tol {
            Ok((self.config.max_iter, res, capped))
        } else {
            Err(history)
        }
    }

    /// Preconditioned CG for `(diag(u/p) + eps L*L) x = rhs`, with `u` taken from
    /// `ws.u`. The preconditioner is the spectral multiplier
    /// `1 / (mean(u/p) + eps mu_k^2)`.
    fn conjugate_gradient(&self, grid: &Grid, p: f64, ws: &mut Workspace) {
        let eps = self.config.epsilon;
        let mu = &self.op.multipliers;
        let cells = ws.u.len();
        let diag_mean = ws.u.iter().sum::<f64>() / (p * cells as f64);
        let apply = |x: &[f64], out: &mut [f64], spec: &mut [f64], tmp: &mut [f64], u: &[f64]| {
            grid.to_spectral_into(x, spec);
            for (c, m) in spec.iter_mut().zip(mu) {
                *c *= m * m;
            }
            grid.from_spectral_into(spec, tmp);
            for (((o, xv), uv), l) in out.iter_mut().zip(x).zip(u).zip(tmp.iter()) {
                *o = uv / p * xv + eps * l;
            }
        };
        let precondition = |r: &[f64], out: &mut [f64], spec: &mut [f64]| {
            grid.to_spectral_into(r, spec);
            for (c, m) in spec.iter_mut().zip(mu) {
                *c /= diag_mean + eps * m * m;
            }
            grid.from_spectral_into(spec, out);
        };

        // x0 = P^{-1} rhs
        let Workspace {
            u,
            spec,
            tmp,
            z,
            p: dir,
            q,
            step: x,
            rhs,
            ..
        } = ws;
        precondition(rhs, x, spec);
        apply(x, q, spec, tmp, u);
        let mut resid: Vec<f64> = rhs.iter().zip(q.iter()).map(|(b, ax)| b - ax).collect();
        let rhs_norm = rhs.iter().map(|b| b * b).sum::<f64>().sqrt();
        if rhs_norm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        precondition(&resid, z, spec);
        dir.copy_from_slice(z);
        let mut rz: f64 = resid.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        for _ in 0..self.config.cg_max_iter {
            let rn = resid.iter().map(|r| r * r).sum::<f64>().sqrt();
            if rn <= self.config.cg_tol * rhs_norm {
                break;
            }
            apply(dir, q, spec, tmp, u);
            let dq: f64 = dir.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
            if !(dq > 0.0) {
                break;
            }
            let alpha = rz / dq;
            for ((xv, d), (r, qv)) in x
                .iter_mut()
                .zip(dir.iter())
                .zip(resid.iter_mut().zip(q.iter()))
            {
                *xv += alpha * d;
                *r -= alpha * qv;
            }
            precondition(&resid, z, spec);
            let rz_new: f64 = resid.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for (d, zv) in dir.iter_mut().zip(z.iter()) {
                *d = zv + beta * *d;
            }
        }
    }
}
