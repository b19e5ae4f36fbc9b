//! SKT algebra: coefficients, fields, entropy structure, mobility, detailed
//! balance and the population-size admissibility check.
//!
//! Species are indexed from zero in code. The coefficient `a_{i0}` (linear
//! diffusion) is [`Coefficients::base`], and `a_{ij}` for species `j` is
//! [`Coefficients::cross`]`(i, j)`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

/// Exponent cap for `exp(w / pi)`; larger arguments are clamped.
pub const EXP_ARG_CAP: f64 = 700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("coefficient matrix must have n rows of n + 1 entries (row {row} has {len}, n = {n})")]
    Shape { row: usize, len: usize, n: usize },
    #[error("coefficient a[{row}][{col}] = {value} is negative or not finite")]
    InvalidCoefficient { row: usize, col: usize, value: f64 },
    #[error("need at least one species")]
    NoSpecies,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("negative density {value} (species {species}, entry {index})")]
    NegativeDensity {
        species: usize,
        index: usize,
        value: f64,
    },
    #[error("density must be strictly positive, found {value} (species {species}, entry {index})")]
    NonPositiveDensity {
        species: usize,
        index: usize,
        value: f64,
    },
    #[error("non-finite value in field (species {species}, entry {index})")]
    NonFinite { species: usize, index: usize },
    #[error("balance weights must be positive and finite, got {0:?}")]
    InvalidWeights(Vec<f64>),
    #[error("a[{i}][{j}] > 0 but a[{j}][{i}] = 0: no detailed-balance weights exist")]
    OneWayCoupling { i: usize, j: usize },
    #[error("cycle through species {i} and {j} violates the Kolmogorov criterion (residual {residual:e})")]
    InconsistentCycle { i: usize, j: usize, residual: f64 },
    #[error("solver path requires a_i0 > 0 and a_ii > 0 (species {0})")]
    Degenerate(usize),
    #[error("invalid admissibility parameter: {0}")]
    InvalidParameter(String),
}

/// SKT coefficients `a_{ij}`, `i = 1..n`, `j = 0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Coefficients {
    n: usize,
    a: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for Coefficients {
    type Error = ModelError;

    fn try_from(a: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        Self::new(a)
    }
}

impl From<Coefficients> for Vec<Vec<f64>> {
    fn from(c: Coefficients) -> Self {
        c.a
    }
}

impl Coefficients {
    pub fn new(a: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let n = a.len();
        if n == 0 {
            return Err(ModelError::NoSpecies);
        }
        for (row, r) in a.iter().enumerate() {
            if r.len() != n + 1 {
                return Err(ModelError::Shape {
                    row,
                    len: r.len(),
                    n,
                });
            }
            for (col, &value) in r.iter().enumerate() {
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(ModelError::InvalidCoefficient { row, col, value });
                }
            }
        }
        Ok(Self { n, a })
    }

    /// Builds coefficients from the linear diffusion vector and the `n x n`
    /// interaction matrix.
    pub fn from_parts(base: &[f64], interaction: &[Vec<f64>]) -> Result<Self, ModelError> {
        if base.len() != interaction.len() {
            return Err(ModelError::DimensionMismatch {
                expected: base.len(),
                found: interaction.len(),
            });
        }
        let a = base
            .iter()
            .zip(interaction)
            .map(|(b, row)| std::iter::once(*b).chain(row.iter().copied()).collect())
            .collect();
        Self::new(a)
    }

    pub fn species(&self) -> usize {
        self.n
    }

    /// `a_{i0}`.
    pub fn base(&self, i: usize) -> f64 {
        self.a[i][0]
    }

    /// `a_{ij}` between species `i` and `j` (both zero-based).
    pub fn cross(&self, i: usize, j: usize) -> f64 {
        self.a[i][j + 1]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.a
    }

    /// Checks the hypotheses the SPDE solver relies on.
    pub fn check_solver_ready(&self) -> Result<(), ModelError> {
        for i in 0..self.n {
            if self.base(i) <= 0.0 || self.cross(i, i) <= 0.0 {
                return Err(ModelError::Degenerate(i));
            }
        }
        Ok(())
    }

    /// `a_{i0} + sum_k a_{ik} u_k` at one point.
    pub fn tilde_a_point(&self, i: usize, u: &[f64]) -> f64 {
        self.base(i)
            + u.iter()
                .enumerate()
                .map(|(k, uk)| self.cross(i, k) * uk)
                .sum::<f64>()
    }

    fn check_point(&self, u: &[f64]) -> Result<(), ModelError> {
        if u.len() != self.n {
            return Err(ModelError::DimensionMismatch {
                expected: self.n,
                found: u.len(),
            });
        }
        Ok(())
    }

    /// Diffusion matrix `A_{ij}(u) = delta_ij (a_i0 + sum_k a_ik u_k) + a_ij u_i`.
    pub fn diffusion_matrix(&self, u: &[f64]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_point(u)?;
        Ok((0..self.n)
            .map(|i| {
                let ta = self.tilde_a_point(i, u);
                (0..self.n)
                    .map(|j| {
                        let diag = if i == j { ta } else { 0.0 };
                        diag + self.cross(i, j) * u[i]
                    })
                    .collect()
            })
            .collect())
    }
}

/// What a [`Field`] represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Density,
    EntropyVariable,
    RegularizedState,
    /// Derived quantities (drift, noise, coefficients).
    Auxiliary,
}

/// Per-species grid function, stored species-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    kind: FieldKind,
    species: usize,
    cells: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(kind: FieldKind, species: usize, cells: usize) -> Self {
        Self {
            kind,
            species,
            cells,
            values: vec![0.0; species * cells],
        }
    }

    pub fn constant(kind: FieldKind, species: usize, cells: usize, value: f64) -> Self {
        Self {
            kind,
            species,
            cells,
            values: vec![value; species * cells],
        }
    }

    pub fn from_species(kind: FieldKind, rows: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let species = rows.len();
        if species == 0 {
            return Err(ModelError::NoSpecies);
        }
        let cells = rows[0].len();
        let mut values = Vec::with_capacity(species * cells);
        for row in rows {
            if row.len() != cells {
                return Err(ModelError::DimensionMismatch {
                    expected: cells,
                    found: row.len(),
                });
            }
            values.extend(row);
        }
        let field = Self {
            kind,
            species,
            cells,
            values,
        };
        field.check_finite()?;
        Ok(field)
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn species_count(&self) -> usize {
        self.species
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn species(&self, i: usize) -> &[f64] {
        &self.values[i * self.cells..(i + 1) * self.cells]
    }

    pub fn species_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cells..(i + 1) * self.cells]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.species)
            .map(|i| self.species(i).to_vec())
            .collect()
    }

    /// The `n`-vector of species values in cell `m`.
    pub fn point(&self, m: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.species];
        self.point_into(m, &mut p);
        p
    }

    pub fn point_into(&self, m: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.values[i * self.cells + m];
        }
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => Err(ModelError::NonFinite {
                species: p / self.cells,
                index: p % self.cells,
            }),
        }
    }

    pub fn check_nonnegative(&self) -> Result<(), ModelError> {
        self.check_finite()?;
        match self.values.iter().position(|v| *v < 0.0) {
            None => Ok(()),
            Some(p) => Err(ModelError::NegativeDensity {
                species: p / self.cells,
                index: p % self.cells,
                value: self.values[p],
            }),
        }
    }

    fn check_positive(&self) -> Result<(), ModelError> {
        self.check_finite()?;
        match self.values.iter().position(|v| *v <= 0.0) {
            None => Ok(()),
            Some(p) => Err(ModelError::NonPositiveDensity {
                species: p / self.cells,
                index: p % self.cells,
                value: self.values[p],
            }),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Field) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    /// Maximum absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `Ã_i(u) = a_{i0} + sum_k a_{ik} u_k` at every cell.
pub fn tilde_a(coeffs: &Coefficients, u: &Field) -> Result<Field, ModelError> {
    if u.species_count() != coeffs.species() {
        return Err(ModelError::DimensionMismatch {
            expected: coeffs.species(),
            found: u.species_count(),
        });
    }
    u.check_nonnegative()?;
    let n = coeffs.species();
    let mut out = Field::zeros(FieldKind::Auxiliary, n, u.cells());
    for i in 0..n {
        let row = out.species_mut(i);
        row.iter_mut().for_each(|v| *v = coeffs.base(i));
        for k in 0..n {
            let a = coeffs.cross(i, k);
            if a == 0.0 {
                continue;
            }
            for (o, uk) in row.iter_mut().zip(u.species(k)) {
                *o += a * uk;
            }
        }
    }
    Ok(out)
}

/// Detailed-balance weights `pi_i > 0` with `pi_i a_ij = pi_j a_ji`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BalanceWeights {
    pi: Vec<f64>,
}

impl TryFrom<Vec<f64>> for BalanceWeights {
    type Error = ModelError;

    fn try_from(pi: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(pi)
    }
}

impl From<BalanceWeights> for Vec<f64> {
    fn from(w: BalanceWeights) -> Self {
        w.pi
    }
}

impl BalanceWeights {
    pub fn new(pi: Vec<f64>) -> Result<Self, ModelError> {
        if pi.is_empty() || pi.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(ModelError::InvalidWeights(pi));
        }
        Ok(Self { pi })
    }

    pub fn uniform(n: usize) -> Self {
        Self { pi: vec![1.0; n] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    pub fn get(&self, i: usize) -> f64 {
        self.pi[i]
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// Relative detailed-balance residual
    /// `max_ij |pi_i a_ij - pi_j a_ji| / max_ij pi_i a_ij`.
    pub fn residual(&self, coeffs: &Coefficients) -> f64 {
        let n = coeffs.species();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let lhs = self.pi[i] * coeffs.cross(i, j);
                let rhs = self.pi[j] * coeffs.cross(j, i);
                worst = worst.max((lhs - rhs).abs());
                scale = scale.max(lhs);
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }
}

/// Default relative tolerance for the detailed-balance check.
pub const BALANCE_TOLERANCE: f64 = 1e-12;

/// Solves for detailed-balance weights.
///
/// Species are the vertices of a graph with an edge wherever `a_ij a_ji > 0`.
/// Weights are propagated along a breadth-first spanning tree by
/// `pi_j = pi_i a_ij / a_ji`; every remaining edge closes a cycle and is then
/// checked. Each connected component is scaled so that its smallest weight is
/// one (components are independent, so weights are unique only up to one
/// factor per component).
pub fn solve_balance_weights(
    coeffs: &Coefficients,
    tol: f64,
) -> Result<BalanceWeights, ModelError> {
    let n = coeffs.species();
    for i in 0..n {
        for j in 0..n {
            if i != j && coeffs.cross(i, j) > 0.0 && coeffs.cross(j, i) == 0.0 {
                return Err(ModelError::OneWayCoupling { i, j });
            }
        }
    }
    let mut pi = vec![0.0; n];
    let mut component = vec![usize::MAX; n];
    for root in 0..n {
        if component[root] != usize::MAX {
            continue;
        }
        component[root] = root;
        pi[root] = 1.0;
        let mut members = vec![root];
        let mut queue = VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if j == i || component[j] != usize::MAX || coeffs.cross(i, j) == 0.0 {
                    continue;
                }
                pi[j] = pi[i] * coeffs.cross(i, j) / coeffs.cross(j, i);
                component[j] = root;
                members.push(j);
                queue.push_back(j);
            }
        }
        let min = members.iter().map(|&m| pi[m]).fold(f64::INFINITY, f64::min);
        for &m in &members {
            pi[m] /= min;
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let lhs = pi[i] * coeffs.cross(i, j);
            let rhs = pi[j] * coeffs.cross(j, i);
            let scale = lhs.abs().max(rhs.abs());
            if scale > 0.0 && (lhs - rhs).abs() > tol * scale {
                return Err(ModelError::InconsistentCycle {
                    i,
                    j,
                    residual: (lhs - rhs).abs() / scale,
                });
            }
        }
    }
    BalanceWeights::new(pi)
}

/// Entropy density `h(u) = sum_i pi_i (u_i (log u_i - 1) + 1)`, with the
/// continuous value `pi_i` at `u_i = 0`.
pub fn entropy_density(pi: &BalanceWeights, u: &[f64]) -> Result<f64, ModelError> {
    if u.len() != pi.len() {
        return Err(ModelError::DimensionMismatch {
            expected: pi.len(),
            found: u.len(),
        });
    }
    let mut h = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        if !(ui >= 0.0) {
            return Err(ModelError::NegativeDensity {
                species: i,
                index: 0,
                value: ui,
            });
        }
        h += pi.get(i) * entropy_summand(ui);
    }
    Ok(h)
}

#[inline]
pub(crate) fn entropy_summand(u: f64) -> f64 {
    if u == 0.0 {
        1.0
    } else {
        u * (u.ln() - 1.0) + 1.0
    }
}

/// `∫ h(u) dx` by midpoint quadrature.
pub fn entropy_functional(pi: &BalanceWeights, u: &Field, grid: &Grid) -> Result<f64, ModelError> {
    u.check_nonnegative()?;
    if u.species_count() != pi.len() {
        return Err(ModelError::DimensionMismatch {
            expected: pi.len(),
            found: u.species_count(),
        });
    }
    let total: f64 = (0..pi.len())
        .map(|i| {
            pi.get(i)
                * u.species(i)
                    .iter()
                    .map(|&v| entropy_summand(v))
                    .sum::<f64>()
        })
        .sum();
    Ok(total * grid.dx())
}

/// Entropy variables `w_i = pi_i log u_i`.
pub fn w_of_u(pi: &BalanceWeights, u: &Field) -> Result<Field, ModelError> {
    u.check_positive()?;
    let mut w = u.clone().with_kind(FieldKind::EntropyVariable);
    for i in 0..u.species_count() {
        let p = pi.get(i);
        w.species_mut(i).iter_mut().for_each(|v| *v = p * v.ln());
    }
    Ok(w)
}

/// Densities `u_i = exp(w_i / pi_i)`; exponents above [`EXP_ARG_CAP`] are clamped.
pub fn u_of_w(pi: &BalanceWeights, w: &Field) -> Field {
    let mut u = w.clone().with_kind(FieldKind::Density);
    for i in 0..w.species_count() {
        let p = pi.get(i);
        u.species_mut(i)
            .iter_mut()
            .for_each(|v| *v = (*v / p).min(EXP_ARG_CAP).exp());
    }
    u
}

/// Mobility `B = A(u) h''(u)^{-1}`, i.e. `B_ij = A_ij(u) u_j / pi_j`.
pub fn mobility(
    coeffs: &Coefficients,
    pi: &BalanceWeights,
    u: &[f64],
) -> Result<Vec<Vec<f64>>, ModelError> {
    for (i, &ui) in u.iter().enumerate() {
        if !(ui > 0.0) {
            return Err(ModelError::NonPositiveDensity {
                species: i,
                index: 0,
                value: ui,
            });
        }
    }
    let mut b = coeffs.diffusion_matrix(u)?;
    for row in b.iter_mut() {
        for (j, entry) in row.iter_mut().enumerate() {
            *entry *= u[j] / pi.get(j);
        }
    }
    Ok(b)
}

/// `z . h''(u) A(u) z`.
pub fn entropy_production_form(
    coeffs: &Coefficients,
    pi: &BalanceWeights,
    u: &[f64],
    z: &[f64],
) -> Result<f64, ModelError> {
    let a = coeffs.diffusion_matrix(u)?;
    let mut total = 0.0;
    for i in 0..u.len() {
        let az: f64 = a[i].iter().zip(z).map(|(aij, zj)| aij * zj).sum();
        total += z[i] * pi.get(i) / u[i] * az;
    }
    Ok(total)
}

/// Lower bound `sum_i pi_i (a_i0 z_i^2 / u_i + 2 a_ii z_i^2)` for
/// [`entropy_production_form`] (cross terms dropped).
pub fn production_lower_bound(
    coeffs: &Coefficients,
    pi: &BalanceWeights,
    u: &[f64],
    z: &[f64],
) -> f64 {
    (0..u.len())
        .map(|i| {
            pi.get(i)
                * (coeffs.base(i) * z[i] * z[i] / u[i] + 2.0 * coeffs.cross(i, i) * z[i] * z[i])
        })
        .sum()
}

/// Sup-norm series of the noise family that enter the admissibility check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisNorms {
    /// `sup_{i,l} sum_k ||e_k^{il}||_inf^2`.
    pub value_sq_sum: f64,
    /// `sup_{i,l} sum_k ||d_x e_k^{il}||_inf^2`.
    pub derivative_sq_sum: f64,
}

/// Parameters of the population-size admissibility check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityParams {
    /// Moment exponent `p > 2`.
    pub p: f64,
    /// Young parameter `0 < kappa <= 1/2`.
    pub kappa: f64,
    /// Correction interpolation parameter.
    pub lambda: f64,
    /// Accept `lambda <= 1/2` (outside the guaranteed regime).
    #[serde(default)]
    pub allow_small_lambda: bool,
}

impl Default for AdmissibilityParams {
    fn default() -> Self {
        Self {
            p: 3.0,
            kappa: 0.5,
            lambda: 1.0,
            allow_small_lambda: false,
        }
    }
}

/// One of the three inequalities, evaluated per species (`lhs[i] < rhs[i]`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityCondition {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    /// `min_i (rhs_i - lhs_i)`; the condition holds iff this is positive.
    pub margin: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub n_pop: f64,
    pub conditions: [AdmissibilityCondition; 3],
    pub holds: bool,
    /// Smallest integer population size satisfying all three, if any.
    pub minimal_n: Option<u64>,
}

fn admissibility_conditions(
    coeffs: &Coefficients,
    pi: &BalanceWeights,
    norms: BasisNorms,
    params: &AdmissibilityParams,
    n_pop: f64,
) -> [AdmissibilityCondition; 3] {
    let n = coeffs.species();
    let p = params.p;
    let lambda = params.lambda;
    let three = 3f64.powf((p - 1.0) / p);
    let se = norms.value_sq_sum;
    let sde = norms.derivative_sq_sum;
    let inv_n = 1.0 / n_pop;

    let first = (
        inv_n.sqrt() * three * (p / (p - 1.0)) * 2f64.sqrt() * se.sqrt(),
        1.0,
    );
    let mut second = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut third = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let aii = coeffs.cross(i, i);
        let inner = (n as f64 / 2.0)
            * (18.0 * (lambda - 1.0).abs() / params.kappa + 0.5 + 0.5 * lambda * aii)
            * se
            + 0.5 * lambda * aii * sde;
        second.0.push(inv_n * three * inner);
        second.1.push(4.0 * pi.get(i) * coeffs.base(i));
        third
            .0
            .push(inv_n * three * (lambda / 3.0 + n as f64 / 4.0) * se);
        third.1.push(2.0 * pi.get(i) * aii);
    }
    let build = |lhs: Vec<f64>, rhs: Vec<f64>| {
        let margin = lhs
            .iter()
            .zip(&rhs)
            .map(|(l, r)| r - l)
            .fold(f64::INFINITY, f64::min);
        AdmissibilityCondition {
            lhs,
            rhs,
            margin,
            holds: margin > 0.0,
        }
    };
    [
        build(vec![first.0], vec![first.1]),
        build(second.0, second.1),
        build(third.0, third.1),
    ]
}

/// Evaluates the three smallness conditions on `1/N` and the minimal admissible
/// population size.
pub fn check_admissibility(
    coeffs: &Coefficients,
    pi: &BalanceWeights,
    norms: BasisNorms,
    params: &AdmissibilityParams,
    n_pop: f64,
) -> Result<AdmissibilityReport, ModelError> {
    if !(params.p > 2.0) {
        return Err(ModelError::InvalidParameter(format!(
            "p = {} must exceed 2",
            params.p
        )));
    }
    if !(params.kappa > 0.0 && params.kappa <= 0.5) {
        return Err(ModelError::InvalidParameter(format!(
            "kappa = {} must lie in (0, 1/2]",
            params.kappa
        )));
    }
    if params.lambda <= 0.5 && !params.allow_small_lambda {
        return Err(ModelError::InvalidParameter(format!(
            "lambda = {} must exceed 1/2",
            params.lambda
        )));
    }
    if !(n_pop > 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "population size {n_pop} must be positive"
        )));
    }
    if pi.len() != coeffs.species() {
        return Err(ModelError::DimensionMismatch {
            expected: coeffs.species(),
            found: pi.len(),
        });
    }
    let conditions = admissibility_conditions(coeffs, pi, norms, params, n_pop);
    let holds = conditions.iter().all(|c| c.holds);
    let minimal_n = minimal_population(coeffs, pi, norms, params);
    Ok(AdmissibilityReport {
        n_pop,
        conditions,
        holds,
        minimal_n,
    })
}

fn minimal_population(
    coeffs: &Coefficients,
    pi: &BalanceWeights,
    norms: BasisNorms,
    params: &AdmissibilityParams,
) -> Option<u64> {
    let ok = |n: u64| {
        admissibility_conditions(coeffs, pi, norms, params, n as f64)
            .iter()
            .all(|c| c.holds)
    };
    if ok(1) {
        return Some(1);
    }
    let mut hi = 2u64;
    while !ok(hi) {
        if hi >= 1 << 62 {
            return None;
        }
        hi *= 2;
    }
    let mut lo = hi / 2;
    // invariant: !ok(lo), ok(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::E;

    fn coeffs(a: &[&[f64]]) -> Coefficients {
        Coefficients::new(a.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn rejects_malformed_coefficients() {
        assert!(matches!(
            Coefficients::new(vec![vec![1.0]]),
            Err(ModelError::Shape { .. })
        ));
        assert!(matches!(
            Coefficients::new(vec![vec![1.0, -0.1]]),
            Err(ModelError::InvalidCoefficient { .. })
        ));
        assert_eq!(Coefficients::new(vec![]), Err(ModelError::NoSpecies));
        let c = coeffs(&[&[1.0, 0.0]]);
        assert_eq!(c.check_solver_ready(), Err(ModelError::Degenerate(0)));
    }

    #[test]
    fn tilde_a_examples() {
        let c = coeffs(&[&[1.0, 0.0]]);
        let u = Field::constant(FieldKind::Density, 1, 8, 7.3);
        assert!(tilde_a(&c, &u).unwrap().values().iter().all(|v| *v == 1.0));

        let c = coeffs(&[&[1.0, 0.0, 2.0], &[3.0, 4.0, 0.0]]);
        let u = Field::constant(FieldKind::Density, 2, 8, 1.0);
        let ta = tilde_a(&c, &u).unwrap();
        assert_eq!(ta.point(3), vec![3.0, 7.0]);

        let u0 = Field::zeros(FieldKind::Density, 2, 8);
        let ta = tilde_a(&c, &u0).unwrap();
        assert_eq!(ta.point(0), vec![1.0, 3.0]);

        let bad = Field::zeros(FieldKind::Density, 1, 8);
        assert!(matches!(
            tilde_a(&c, &bad),
            Err(ModelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn diffusion_matrix_examples() {
        let c = coeffs(&[&[1.5, 0.7, 0.2], &[2.5, 0.3, 0.9]]);
        let a = c.diffusion_matrix(&[0.0, 0.0]).unwrap();
        assert_eq!(a, vec![vec![1.5, 0.0], vec![0.0, 2.5]]);

        let c = coeffs(&[&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]]);
        let a = c.diffusion_matrix(&[1.0, 1.0]).unwrap();
        assert_eq!(a, vec![vec![4.0, 1.0], vec![1.0, 4.0]]);

        let c = coeffs(&[&[0.8, 0.3]]);
        let a = c.diffusion_matrix(&[2.0]).unwrap();
        assert!((a[0][0] - (0.8 + 2.0 * 0.3 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn entropy_density_examples() {
        let pi = BalanceWeights::new(vec![1.0, 2.0]).unwrap();
        assert_eq!(entropy_density(&pi, &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(entropy_density(&pi, &[0.0, 0.0]).unwrap(), 3.0);
        assert!((entropy_density(&pi, &[E, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            entropy_density(&pi, &[-1.0, 1.0]),
            Err(ModelError::NegativeDensity { .. })
        ));
    }

    #[test]
    fn entropy_functional_matches_independent_quadrature() {
        let grid = Grid::new(2.0, 32).unwrap();
        let pi = BalanceWeights::new(vec![1.0, 3.0]).unwrap();
        let ones = Field::constant(FieldKind::Density, 2, 32, 1.0);
        assert_eq!(entropy_functional(&pi, &ones, &grid).unwrap(), 0.0);
        let zeros = Field::zeros(FieldKind::Density, 2, 32);
        assert!((entropy_functional(&pi, &zeros, &grid).unwrap() - 2.0 * 4.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..32).map(|_| rng.random_range(0.0..3.0)).collect())
            .collect();
        let u = Field::from_species(FieldKind::Density, rows.clone()).unwrap();
        let mut oracle = 0.0;
        for m in 0..32 {
            let point = [rows[0][m], rows[1][m]];
            oracle += entropy_density(&pi, &point).unwrap() * grid.dx();
        }
        assert!((entropy_functional(&pi, &u, &grid).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn entropy_variable_round_trip() {
        let pi = BalanceWeights::new(vec![2.0]).unwrap();
        let w = Field::constant(FieldKind::EntropyVariable, 1, 8, 2.0 * 3f64.ln());
        let u = u_of_w(&pi, &w);
        assert!(u.values().iter().all(|v| (v - 3.0).abs() < 1e-14));

        let ones = Field::constant(FieldKind::Density, 1, 8, 1.0);
        assert!(w_of_u(&pi, &ones)
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 0.0));

        let zero = Field::zeros(FieldKind::Density, 1, 8);
        assert!(matches!(
            w_of_u(&pi, &zero),
            Err(ModelError::NonPositiveDensity { .. })
        ));

        let pi = BalanceWeights::new(vec![1.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..64).map(|_| rng.random_range(1e-3..10.0)).collect())
            .collect();
        let u = Field::from_species(FieldKind::Density, rows).unwrap();
        let back = u_of_w(&pi, &w_of_u(&pi, &u).unwrap());
        for (a, b) in u.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 1e-14 * a);
        }
    }

    #[test]
    fn mobility_examples() {
        let c = coeffs(&[&[0.7, 0.4]]);
        let pi = BalanceWeights::uniform(1);
        let b = mobility(&c, &pi, &[2.0]).unwrap();
        assert!((b[0][0] - (0.7 + 2.0 * 0.4 * 2.0) * 2.0).abs() < 1e-14);
        let small = mobility(&c, &pi, &[1e-12]).unwrap();
        assert!(small[0][0] < 1e-11);
        assert!(matches!(
            mobility(&c, &pi, &[0.0]),
            Err(ModelError::NonPositiveDensity { .. })
        ));
    }

    fn random_reversible(rng: &mut ChaCha8Rng, n: usize) -> (Coefficients, Vec<f64>) {
        let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..5.0)).collect();
        let mut a = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            a[i][0] = rng.random_range(0.1..2.0);
            a[i][i + 1] = rng.random_range(0.1..2.0);
            for j in (i + 1)..n {
                let s = rng.random_range(0.0..2.0);
                a[i][j + 1] = s / pi[i];
                a[j][i + 1] = s / pi[j];
            }
        }
        (Coefficients::new(a).unwrap(), pi)
    }

    #[test]
    fn production_form_dominates_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.random_range(1..5);
            let (c, pi) = random_reversible(&mut rng, n);
            let pi = BalanceWeights::new(pi).unwrap();
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..5.0)).collect();
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let q = entropy_production_form(&c, &pi, &u, &z).unwrap();
            let lb = production_lower_bound(&c, &pi, &u, &z);
            assert!(q >= lb - 1e-12 * (1.0 + lb.abs()), "{q} < {lb}");
        }
    }

    #[test]
    fn balance_weights_examples() {
        let c = coeffs(&[&[1.0, 1.0, 0.5], &[1.0, 0.5, 1.0]]);
        assert_eq!(
            solve_balance_weights(&c, 1e-12).unwrap().as_slice(),
            &[1.0, 1.0]
        );

        let c = coeffs(&[&[1.0, 1.0, 2.0], &[1.0, 1.0, 1.0]]);
        let pi = solve_balance_weights(&c, 1e-12).unwrap();
        assert_eq!(pi.as_slice(), &[1.0, 2.0]);

        let c = coeffs(&[&[1.0, 1.0, 2.0], &[1.0, 0.0, 1.0]]);
        assert_eq!(
            solve_balance_weights(&c, 1e-12).unwrap_err(),
            ModelError::OneWayCoupling { i: 0, j: 1 }
        );

        // uncoupled species: each component normalized on its own
        let c = coeffs(&[&[1.0, 1.0, 0.0], &[1.0, 0.0, 3.0]]);
        assert_eq!(
            solve_balance_weights(&c, 1e-12).unwrap().as_slice(),
            &[1.0, 1.0]
        );

        // a12 a23 a31 = 8, a21 a32 a13 = 1
        let c = coeffs(&[
            &[1.0, 1.0, 2.0, 1.0],
            &[1.0, 1.0, 1.0, 2.0],
            &[1.0, 2.0, 1.0, 1.0],
        ]);
        assert!(matches!(
            solve_balance_weights(&c, 1e-12),
            Err(ModelError::InconsistentCycle { .. })
        ));

        let c = coeffs(&[&[1.0, 1.0, 0.3], &[1.0, 0.0, 1.0]]);
        assert_eq!(
            solve_balance_weights(&c, 1e-12),
            Err(ModelError::OneWayCoupling { i: 0, j: 1 })
        );
    }

    #[test]
    fn balance_weights_unique_up_to_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let (c, truth) = random_reversible(&mut rng, 4);
            let pi = solve_balance_weights(&c, 1e-12).unwrap();
            assert!(pi.residual(&c) <= 1e-12);
            let min_truth = truth.iter().copied().fold(f64::INFINITY, f64::min);
            if (0..4).all(|i| (0..4).all(|j| i == j || c.cross(i, j) > 0.0)) {
                for (p, t) in pi.as_slice().iter().zip(&truth) {
                    assert!((p - t / min_truth).abs() < 1e-10 * p);
                }
            }
            // permuted species give the same weights after relabelling
            let perm = [2usize, 0, 3, 1];
            let a: Vec<Vec<f64>> = perm
                .iter()
                .map(|&pi_| {
                    std::iter::once(c.base(pi_))
                        .chain(perm.iter().map(|&pj| c.cross(pi_, pj)))
                        .collect()
                })
                .collect();
            let permuted = solve_balance_weights(&Coefficients::new(a).unwrap(), 1e-12).unwrap();
            for (slot, &orig) in perm.iter().enumerate() {
                let ratio = permuted.get(slot) / pi.get(orig);
                let ratio0 = permuted.get(0) / pi.get(perm[0]);
                assert!((ratio - ratio0).abs() < 1e-10 * ratio0);
            }
        }
    }

    fn norms() -> BasisNorms {
        BasisNorms {
            value_sq_sum: 3.0,
            derivative_sq_sum: 40.0,
        }
    }

    #[test]
    fn admissibility_limits() {
        let c = coeffs(&[&[1.0, 1.0, 0.5], &[1.0, 0.5, 1.0]]);
        let pi = BalanceWeights::uniform(2);
        let params = AdmissibilityParams::default();
        let big = check_admissibility(&c, &pi, norms(), &params, 1e12).unwrap();
        assert!(big.holds);
        let small = check_admissibility(
            &c,
            &pi,
            BasisNorms {
                value_sq_sum: 1e3,
                derivative_sq_sum: 1e5,
            },
            &params,
            1.0,
        )
        .unwrap();
        assert!(!small.holds);
        assert!(check_admissibility(
            &c,
            &pi,
            norms(),
            &AdmissibilityParams {
                lambda: 0.4,
                ..params
            },
            10.0
        )
        .is_err());
        assert!(check_admissibility(
            &c,
            &pi,
            norms(),
            &AdmissibilityParams {
                lambda: 0.4,
                allow_small_lambda: true,
                ..params
            },
            10.0
        )
        .is_ok());
    }

    #[test]
    fn minimal_population_matches_scan() {
        let c = coeffs(&[&[0.6, 1.2, 0.5], &[0.9, 0.25, 0.8]]);
        let pi = solve_balance_weights(&c, 1e-12).unwrap();
        let params = AdmissibilityParams {
            p: 3.0,
            kappa: 0.5,
            lambda: 1.0,
            allow_small_lambda: false,
        };
        let report = check_admissibility(&c, &pi, norms(), &params, 10.0).unwrap();
        let minimal = report.minimal_n.unwrap();
        let scan = (1..100_000u64)
            .find(|&n| {
                check_admissibility(&c, &pi, norms(), &params, n as f64)
                    .unwrap()
                    .holds
            })
            .unwrap();
        assert_eq!(minimal, scan);
        // margins increase with N
        let mut last = [f64::NEG_INFINITY; 3];
        for k in 0..10 {
            let n = 10f64.powf(0.5 * k as f64 + 0.5);
            let r = check_admissibility(&c, &pi, norms(), &params, n).unwrap();
            for (l, cond) in last.iter_mut().zip(&r.conditions) {
                assert!(cond.margin > *l);
                *l = cond.margin;
            }
        }
    }

    #[test]
    fn no_minimal_population_without_linear_diffusion() {
        let c = coeffs(&[&[0.0, 1.0]]);
        let pi = BalanceWeights::uniform(1);
        let r =
            check_admissibility(&c, &pi, norms(), &AdmissibilityParams::default(), 1e6).unwrap();
        assert_eq!(r.minimal_n, None);
    }
}
