//! Spatially coloured noise and the fluctuation terms of the regularized SPDE.
//!
//! The noise family is `e_k = phi_k (1 + lambda_k)^{-s/2}` built on the Neumann
//! cosine eigenbasis, shared by every species. All divergence-form terms are
//! assembled as face fluxes with zero boundary flux, so each of them integrates
//! to zero over the domain exactly.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::grid::Grid;
use crate::model::{BalanceWeights, BasisNorms, Coefficients, Field, FieldKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("noise truncation must satisfy 1 <= K <= {cells}, got {modes}")]
    InvalidModes { modes: usize, cells: usize },
    #[error("smoothness exponent s = {0} must exceed d + 1 = 2")]
    InvalidSmoothness(f64),
    #[error("increment has {found} modes per species, basis has {expected}")]
    ModeMismatch { expected: usize, found: usize },
    #[error("increment has {found} species, field has {expected}")]
    SpeciesMismatch { expected: usize, found: usize },
    #[error("grid mismatch: basis has {expected} cells, field has {found}")]
    CellMismatch { expected: usize, found: usize },
    #[error("density must be strictly positive for the unregularized correction")]
    NonPositiveDensity,
}

/// Default smoothness `s = d + 1.5` for `d = 1`.
pub const DEFAULT_SMOOTHNESS: f64 = 2.5;

/// Truncated noise family `e_k`, `k < K`, tabulated at cell centres.
#[derive(Debug, Clone)]
pub struct NoiseBasis {
    modes: usize,
    cells: usize,
    smoothness: f64,
    values: Vec<f64>,
    derivatives: Vec<f64>,
    /// `sum_k e_k(x_m)^2`.
    sum_sq: Vec<f64>,
    /// `sum_k e_k(x_m) e_k'(x_m)`.
    sum_cross: Vec<f64>,
    truncated: BasisNorms,
    analytic: BasisNorms,
    tail: BasisNorms,
    derivative_l2_sq_sum: f64,
    applied: BasisNorms,
    applied_derivative_l2_sq_sum: f64,
}

impl NoiseBasis {
    pub fn new(grid: &Grid, modes: usize, smoothness: f64) -> Result<Self, NoiseError> {
        let cells = grid.cells();
        if modes == 0 || modes > cells {
            return Err(NoiseError::InvalidModes { modes, cells });
        }
        if !(smoothness > 2.0 && smoothness.is_finite()) {
            return Err(NoiseError::InvalidSmoothness(smoothness));
        }
        let eig = grid.eigenbasis();
        let centers = grid.centers();
        let mut values = vec![0.0; modes * cells];
        let mut derivatives = vec![0.0; modes * cells];
        let mut sum_sq = vec![0.0; cells];
        let mut sum_cross = vec![0.0; cells];
        let mut truncated = BasisNorms {
            value_sq_sum: 0.0,
            derivative_sq_sum: 0.0,
        };
        let mut analytic = truncated;
        let mut derivative_l2_sq_sum = 0.0;
        let mut applied = BasisNorms {
            value_sq_sum: 0.0,
            derivative_sq_sum: 0.0,
        };
        let mut applied_derivative_l2_sq_sum = 0.0;
        let mut faces = vec![0.0; cells + 1];
        let mut div = vec![0.0; cells];
        for k in 0..modes {
            let weight = (1.0 + eig.eigenvalue(k)).powf(-0.5 * smoothness);
            let mut sup_v: f64 = 0.0;
            let mut sup_d: f64 = 0.0;
            for (m, &x) in centers.iter().enumerate() {
                let v = weight * eig.value_at(k, x);
                let d = weight * eig.derivative_at(k, x);
                values[k * cells + m] = v;
                derivatives[k * cells + m] = d;
                sum_sq[m] += v * v;
                sum_cross[m] += v * d;
                sup_v = sup_v.max(v.abs());
                sup_d = sup_d.max(d.abs());
            }
            truncated.value_sq_sum += sup_v * sup_v;
            truncated.derivative_sq_sum += sup_d * sup_d;
            let amp = weight * eig.amplitude(k);
            analytic.value_sq_sum += amp * amp;
            analytic.derivative_sq_sum += amp * amp * eig.eigenvalue(k);
            derivative_l2_sq_sum += weight * weight * eig.eigenvalue(k);
            grid.face_average_into(&values[k * cells..(k + 1) * cells], &mut faces);
            grid.divergence_into(&faces, &mut div);
            let sup = div.iter().fold(0.0f64, |a, d| a.max(d.abs()));
            applied.value_sq_sum += sup_v * sup_v;
            applied.derivative_sq_sum += sup * sup;
            applied_derivative_l2_sq_sum += grid.l2_norm(&div).powi(2);
        }
        let tail = tail_bound(grid.length(), modes, smoothness);
        // ||phi_k'||_{L^2}^2 = lambda_k, so the L^2 tail is the sup tail without 2/L
        derivative_l2_sq_sum += 0.5 * grid.length() * tail.derivative_sq_sum;
        Ok(Self {
            modes,
            cells,
            smoothness,
            values,
            derivatives,
            sum_sq,
            sum_cross,
            truncated,
            analytic,
            tail,
            derivative_l2_sq_sum,
            applied,
            applied_derivative_l2_sq_sum,
        })
    }

    /// `K = M / 2` and `s = 2.5`.
    pub fn with_defaults(grid: &Grid) -> Result<Self, NoiseError> {
        Self::new(grid, (grid.cells() / 2).max(1), DEFAULT_SMOOTHNESS)
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    pub fn mode(&self, k: usize) -> &[f64] {
        &self.values[k * self.cells..(k + 1) * self.cells]
    }

    pub fn mode_derivative(&self, k: usize) -> &[f64] {
        &self.derivatives[k * self.cells..(k + 1) * self.cells]
    }

    pub fn sum_sq(&self) -> &[f64] {
        &self.sum_sq
    }

    pub fn sum_cross(&self) -> &[f64] {
        &self.sum_cross
    }

    /// Sup-norm series of the truncated family, maximised over grid points.
    pub fn truncated_norms(&self) -> BasisNorms {
        self.truncated
    }

    /// Analytic bound on the omitted modes `k >= K`.
    pub fn tail_bound(&self) -> BasisNorms {
        self.tail
    }

    /// Truncated analytic sup norms plus the tail bound: an upper bound on the
    /// full infinite series.
    pub fn series_bound(&self) -> BasisNorms {
        BasisNorms {
            value_sq_sum: self.analytic.value_sq_sum + self.tail.value_sq_sum,
            derivative_sq_sum: self.analytic.derivative_sq_sum + self.tail.derivative_sq_sum,
        }
    }

    /// Norms used by the admissibility check: tabulated truncated sums plus the
    /// tail bound.
    pub fn norms(&self) -> BasisNorms {
        BasisNorms {
            value_sq_sum: self.truncated.value_sq_sum + self.tail.value_sq_sum,
            derivative_sq_sum: self.truncated.derivative_sq_sum + self.tail.derivative_sq_sum,
        }
    }

    /// `sum_k ||d_x e_k||_{L^2}^2` including the tail bound.
    pub fn derivative_l2_sq_sum(&self) -> f64 {
        self.derivative_l2_sq_sum
    }

    /// Sup-norm series of the simulated modes under the discrete divergence the
    /// noise goes through. Boundary faces carry no flux, so a mode that is
    /// nonzero at a wall has a derivative of size `e_k(wall) / dx` in the
    /// boundary cell; these sums grow with the number of cells.
    pub fn applied_norms(&self) -> BasisNorms {
        self.applied
    }

    /// `sum_k ||div_h e_k||_{L^2}^2` over the simulated modes.
    pub fn applied_derivative_l2_sq_sum(&self) -> f64 {
        self.applied_derivative_l2_sq_sum
    }

    /// Random field `sum_k e_k dW_k` for one species.
    fn combine(&self, weights: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, &w) in weights.iter().enumerate() {
            for (o, e) in out.iter_mut().zip(self.mode(k)) {
                *o += w * e;
            }
        }
    }
}

fn tail_bound(length: f64, modes: usize, s: f64) -> BasisNorms {
    // sum_{k >= K} (2/L) (1 + lambda_k)^{-s}            <= (2/L) (L/pi)^{2s}    sum k^{-2s}
    // sum_{k >= K} (2/L) lambda_k (1 + lambda_k)^{-s}   <= (2/L) (pi/L)^{2-2s}  sum k^{2-2s}
    let kk = modes as f64;
    let scale = length / std::f64::consts::PI;
    let value_sum = kk.powf(-2.0 * s) + kk.powf(1.0 - 2.0 * s) / (2.0 * s - 1.0);
    let deriv_sum = kk.powf(2.0 - 2.0 * s) + kk.powf(3.0 - 2.0 * s) / (2.0 * s - 3.0);
    BasisNorms {
        value_sq_sum: 2.0 / length * scale.powf(2.0 * s) * value_sum,
        derivative_sq_sum: 2.0 / length * scale.powf(2.0 * s - 2.0) * deriv_sum,
    }
}

/// C^1 regularization of the square root: linear on `[0, delta/2]`, cubic on
/// `[delta/2, delta]`, `sqrt(x)` beyond, and zero for negative arguments.
pub fn g_delta(x: f64, delta: f64) -> f64 {
    let sd = delta.sqrt();
    if x <= 0.0 {
        0.0
    } else if x <= 0.5 * delta {
        x / sd
    } else if x <= delta {
        -2.0 * sd / delta.powi(3) * x.powi(3) + 4.0 / (delta * sd) * x * x - 1.5 / sd * x + 0.5 * sd
    } else {
        x.sqrt()
    }
}

/// Branchwise derivative of [`g_delta`].
pub fn g_delta_prime(x: f64, delta: f64) -> f64 {
    let sd = delta.sqrt();
    if x < 0.0 {
        0.0
    } else if x <= 0.5 * delta {
        1.0 / sd
    } else if x <= delta {
        -6.0 * sd / delta.powi(3) * x * x + 8.0 / (delta * sd) * x - 1.5 / sd
    } else {
        0.5 / x.sqrt()
    }
}

/// Diagonal noise coefficient `g_delta(u_i Ã_i(u))` at every cell.
pub fn sigma_delta(coeffs: &Coefficients, u: &Field, delta: f64) -> Field {
    sigma_with(coeffs, u, |x| g_delta(x, delta))
}

/// Unregularized coefficient `sqrt(u_i Ã_i(u))`.
pub fn sigma_exact(coeffs: &Coefficients, u: &Field) -> Field {
    sigma_with(coeffs, u, |x| x.max(0.0).sqrt())
}

fn sigma_with(coeffs: &Coefficients, u: &Field, g: impl Fn(f64) -> f64) -> Field {
    let n = coeffs.species();
    let mut out = Field::zeros(FieldKind::Auxiliary, n, u.cells());
    let mut point = vec![0.0; n];
    for m in 0..u.cells() {
        u.point_into(m, &mut point);
        for i in 0..n {
            out.species_mut(i)[m] = g(point[i] * coeffs.tilde_a_point(i, &point));
        }
    }
    out
}

/// Independent Gaussian increments `dW_k^{il}` for one time step (`d = 1`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WienerIncrement {
    pub dt: f64,
    species: usize,
    modes: usize,
    values: Vec<f64>,
}

impl WienerIncrement {
    pub fn zeros(species: usize, modes: usize) -> Self {
        Self {
            dt: 0.0,
            species,
            modes,
            values: vec![0.0; species * modes],
        }
    }

    pub fn species_count(&self) -> usize {
        self.species
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn species(&self, i: usize) -> &[f64] {
        &self.values[i * self.modes..(i + 1) * self.modes]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Draws `N(0, dt)` increments for every species and mode of `basis`.
pub fn sample_increment<R: Rng + ?Sized>(
    rng: &mut R,
    basis: &NoiseBasis,
    species: usize,
    dt: f64,
) -> WienerIncrement {
    let sd = dt.max(0.0).sqrt();
    let values = (0..species * basis.modes())
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    WienerIncrement {
        dt,
        species,
        modes: basis.modes(),
        values,
    }
}

fn check_shapes(basis: &NoiseBasis, field: &Field) -> Result<(), NoiseError> {
    if field.cells() != basis.cells() {
        return Err(NoiseError::CellMismatch {
            expected: basis.cells(),
            found: field.cells(),
        });
    }
    Ok(())
}

/// `sqrt(1/N) sum_k d_x(sigma_ii e_k) dW_k^i` for every species.
pub fn noise_divergence_term(
    grid: &Grid,
    basis: &NoiseBasis,
    sigma: &Field,
    dw: &WienerIncrement,
    n_pop: f64,
) -> Result<Field, NoiseError> {
    check_shapes(basis, sigma)?;
    if dw.modes() != basis.modes() {
        return Err(NoiseError::ModeMismatch {
            expected: basis.modes(),
            found: dw.modes(),
        });
    }
    if dw.species_count() != sigma.species_count() {
        return Err(NoiseError::SpeciesMismatch {
            expected: sigma.species_count(),
            found: dw.species_count(),
        });
    }
    let cells = grid.cells();
    let scale = (1.0 / n_pop).sqrt();
    let mut out = Field::zeros(FieldKind::Auxiliary, sigma.species_count(), cells);
    let mut field = vec![0.0; cells];
    let mut faces = vec![0.0; cells + 1];
    for i in 0..sigma.species_count() {
        basis.combine(dw.species(i), &mut field);
        for (f, s) in field.iter_mut().zip(sigma.species(i)) {
            *f *= s * scale;
        }
        grid.face_average_into(&field, &mut faces);
        grid.divergence_into(&faces, out.species_mut(i));
    }
    Ok(out)
}

/// Itô term `(1/2N) sum_k sum_i ∫ (d_x(sigma_ii e_k))^2 pi_i / u_i dx` of the
/// entropy balance, evaluated with the same discrete divergence as the noise.
pub fn ito_entropy_term(
    grid: &Grid,
    basis: &NoiseBasis,
    sigma: &Field,
    u: &Field,
    pi: &BalanceWeights,
    n_pop: f64,
) -> f64 {
    let cells = grid.cells();
    let mut cell = vec![0.0; cells];
    let mut faces = vec![0.0; cells + 1];
    let mut div = vec![0.0; cells];
    let mut total = 0.0;
    for i in 0..sigma.species_count() {
        let s = sigma.species(i);
        let ui = u.species(i);
        for k in 0..basis.modes() {
            for ((c, e), sv) in cell.iter_mut().zip(basis.mode(k)).zip(s) {
                *c = e * sv;
            }
            grid.face_average_into(&cell, &mut faces);
            grid.divergence_into(&faces, &mut div);
            total += pi.get(i) * div.iter().zip(ui).map(|(d, uv)| d * d / uv).sum::<f64>();
        }
    }
    0.5 / n_pop * total * grid.dx()
}

/// Pointwise flux inside the correction term for species `i`:
///
/// ```text
/// (d_{u_i} sigma_ii) (S0 d_x sigma_ii + S1 sigma_ii),
/// S0 = sum_k e_k^2,  S1 = sum_k e_k d_x e_k,
/// ```
///
/// with `d_{u_i} sigma_ii = g'(u_i Ã_i)(Ã_i + a_ii u_i)` and
/// `d_x sigma_ii = g'(u_i Ã_i) d_x(u_i Ã_i)`.
#[allow(clippy::too_many_arguments)]
pub fn correction_flux_point(
    coeffs: &Coefficients,
    i: usize,
    u: &[f64],
    du: &[f64],
    s0: f64,
    s1: f64,
    g: impl Fn(f64) -> f64,
    gp: impl Fn(f64) -> f64,
) -> f64 {
    let ta = coeffs.tilde_a_point(i, u);
    let x = u[i] * ta;
    let slope = gp(x);
    let du_sigma = slope * (ta + coeffs.cross(i, i) * u[i]);
    let mut dx_arg = (ta + coeffs.cross(i, i) * u[i]) * du[i];
    for (j, duj) in du.iter().enumerate() {
        if j != i {
            dx_arg += coeffs.cross(i, j) * u[i] * duj;
        }
    }
    let dx_sigma = slope * dx_arg;
    du_sigma * (s0 * dx_sigma + s1 * g(x))
}

fn correction_with(
    grid: &Grid,
    basis: &NoiseBasis,
    coeffs: &Coefficients,
    u: &Field,
    g: impl Fn(f64) -> f64 + Copy,
    gp: impl Fn(f64) -> f64 + Copy,
) -> Field {
    let n = coeffs.species();
    let cells = grid.cells();
    let grads: Vec<Vec<f64>> = (0..n).map(|j| grid.cell_gradient(u.species(j))).collect();
    let mut out = Field::zeros(FieldKind::Auxiliary, n, cells);
    let mut flux = vec![0.0; cells];
    let mut faces = vec![0.0; cells + 1];
    let mut point = vec![0.0; n];
    let mut dpoint = vec![0.0; n];
    for i in 0..n {
        for m in 0..cells {
            u.point_into(m, &mut point);
            for (j, d) in dpoint.iter_mut().enumerate() {
                *d = grads[j][m];
            }
            flux[m] = correction_flux_point(
                coeffs,
                i,
                &point,
                &dpoint,
                basis.sum_sq()[m],
                basis.sum_cross()[m],
                g,
                gp,
            );
        }
        grid.face_average_into(&flux, &mut faces);
        grid.divergence_into(&faces, out.species_mut(i));
    }
    out
}

/// λ-modified Itô–Stratonovich correction with the regularized coefficient
/// `sigma_delta` (the solver's version). The caller applies the `lambda / N`
/// factor.
pub fn correction_t(
    grid: &Grid,
    basis: &NoiseBasis,
    coeffs: &Coefficients,
    u: &Field,
    delta: f64,
) -> Field {
    correction_with(
        grid,
        basis,
        coeffs,
        u,
        move |x| g_delta(x, delta),
        move |x| g_delta_prime(x, delta),
    )
}

/// The same correction with the unregularized `sqrt(u_i Ã_i)`; requires `u > 0`.
pub fn correction_t_exact(
    grid: &Grid,
    basis: &NoiseBasis,
    coeffs: &Coefficients,
    u: &Field,
) -> Result<Field, NoiseError> {
    if u.values().iter().any(|v| !(*v > 0.0)) {
        return Err(NoiseError::NonPositiveDensity);
    }
    Ok(correction_with(
        grid,
        basis,
        coeffs,
        u,
        |x: f64| x.sqrt(),
        |x: f64| 0.5 / x.sqrt(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DELTAS: [f64; 3] = [1e-3, 1e-2, 1e-1];

    #[test]
    fn g_delta_branch_values() {
        assert_eq!(g_delta(4.0, 1.0), 2.0);
        assert_eq!(g_delta(0.0, 0.1), 0.0);
        assert_eq!(g_delta(-3.0, 0.1), 0.0);
        assert!((g_delta_prime(0.1, 1.0) - 1.0).abs() < 1e-15);
        assert!((g_delta_prime(9.0, 1.0) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn g_delta_is_c1_at_branch_points() {
        for delta in DELTAS {
            let sd = delta.sqrt();
            let lin = |x: f64| x / sd;
            let cubic = |x: f64| {
                -2.0 * sd / delta.powi(3) * x.powi(3) + 4.0 / (delta * sd) * x * x - 1.5 / sd * x
                    + 0.5 * sd
            };
            let cubic_p =
                |x: f64| -6.0 * sd / delta.powi(3) * x * x + 8.0 / (delta * sd) * x - 1.5 / sd;
            let h = 0.5 * delta;
            assert!((lin(h) - cubic(h)).abs() < 1e-12 * sd);
            assert!((1.0 / sd - cubic_p(h)).abs() < 1e-12 / sd);
            assert!((cubic(delta) - delta.sqrt()).abs() < 1e-12 * sd);
            assert!((cubic_p(delta) - 0.5 / delta.sqrt()).abs() < 1e-12 / sd);
        }
    }

    #[test]
    fn g_delta_prime_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let delta = DELTAS[rng.random_range(0..3)];
            let x = rng.random_range(1e-4..3.0 * delta);
            let h = 1e-6 * delta;
            // stay away from the kinks, where central differences straddle branches
            if (x - 0.5 * delta).abs() < 2.0 * h || (x - delta).abs() < 2.0 * h {
                continue;
            }
            let fd = (g_delta(x + h, delta) - g_delta(x - h, delta)) / (2.0 * h);
            let exact = g_delta_prime(x, delta);
            assert!(
                (fd - exact).abs() <= 1e-6 * exact.abs(),
                "x={x} delta={delta}"
            );
        }
    }

    fn grid_and_basis(cells: usize, modes: usize) -> (Grid, NoiseBasis) {
        let grid = Grid::new(1.0, cells).unwrap();
        let basis = NoiseBasis::new(&grid, modes, DEFAULT_SMOOTHNESS).unwrap();
        (grid, basis)
    }

    #[test]
    fn applied_derivative_norms_carry_the_wall_jump() {
        // interior cells see the smooth derivative, the wall cells e_k(0) / dx
        let mut prev = 0.0;
        for cells in [32, 64, 128] {
            let grid = Grid::new(1.0, cells).unwrap();
            let basis = NoiseBasis::new(&grid, 8, 2.5).unwrap();
            let l2 = basis.applied_derivative_l2_sq_sum();
            let wall: f64 = (0..8)
                .map(|k| 2.0 * basis.mode(k)[0].powi(2) / grid.dx())
                .sum();
            let smooth = basis.derivative_l2_sq_sum();
            assert!(
                (l2 - wall - smooth).abs() < 0.05 * wall,
                "{cells}: {l2} vs {wall} + {smooth}"
            );
            assert!(basis.applied_norms().derivative_sq_sum > basis.norms().derivative_sq_sum);
            assert!(l2 > 1.8 * prev);
            prev = l2;
        }
    }

    #[test]
    fn basis_validation() {
        let grid = Grid::new(1.0, 16).unwrap();
        assert!(matches!(
            NoiseBasis::new(&grid, 0, 2.5),
            Err(NoiseError::InvalidModes { .. })
        ));
        assert!(matches!(
            NoiseBasis::new(&grid, 17, 2.5),
            Err(NoiseError::InvalidModes { .. })
        ));
        assert_eq!(
            NoiseBasis::new(&grid, 8, 2.0).unwrap_err(),
            NoiseError::InvalidSmoothness(2.0)
        );
    }

    #[test]
    fn basis_norms_monotone_and_bounded() {
        let grid = Grid::new(1.0, 64).unwrap();
        let mut last = 0.0;
        let mut last_d = 0.0;
        for k in 1..=64 {
            let b = NoiseBasis::new(&grid, k, DEFAULT_SMOOTHNESS).unwrap();
            let t = b.truncated_norms();
            assert!(t.value_sq_sum >= last && t.derivative_sq_sum >= last_d);
            let bound = b.series_bound();
            assert!(t.value_sq_sum <= bound.value_sq_sum);
            assert!(t.derivative_sq_sum <= bound.derivative_sq_sum);
            last = t.value_sq_sum;
            last_d = t.derivative_sq_sum;
        }
        // the bound from a short truncation still dominates a long truncation
        let short = NoiseBasis::new(&grid, 4, DEFAULT_SMOOTHNESS).unwrap();
        assert!(short.series_bound().value_sq_sum >= last);
        assert!(short.series_bound().derivative_sq_sum >= last_d);
    }

    #[test]
    fn tabulated_derivative_matches_gradient() {
        let err = |cells: usize| {
            let (grid, basis) = grid_and_basis(cells, 4);
            let d = grid.cell_gradient(basis.mode(3));
            d[1..cells - 1]
                .iter()
                .zip(&basis.mode_derivative(3)[1..cells - 1])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let order = (err(64) / err(128)).log2();
        assert!(order > 1.9, "order {order}");
    }

    #[test]
    fn sigma_delta_bounds() {
        let c = Coefficients::new(vec![vec![1.0, 0.0]]).unwrap();
        let u = Field::constant(FieldKind::Density, 1, 8, 4.0);
        assert!(sigma_delta(&c, &u, 1.0).values().iter().all(|v| *v == 2.0));
        let z = Field::zeros(FieldKind::Density, 1, 8);
        assert!(sigma_delta(&c, &z, 1.0).values().iter().all(|v| *v == 0.0));

        let c = Coefficients::new(vec![vec![0.5, 1.0, 0.2], vec![0.3, 0.1, 2.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..200).map(|_| rng.random_range(0.0..0.2)).collect())
            .collect();
        let u = Field::from_species(FieldKind::Density, rows).unwrap();
        let exact = sigma_exact(&c, &u);
        let mut prev_gap = f64::INFINITY;
        for delta in [1e-1, 1e-2, 1e-3, 1e-4] {
            let s = sigma_delta(&c, &u, delta);
            let mut gap: f64 = 0.0;
            for (m, (a, b)) in s.values().iter().zip(exact.values()).enumerate() {
                assert!(*a >= 0.0 && *a <= b + 1e-15);
                if b * b >= delta {
                    assert_eq!(a, b, "cell {m}");
                }
                gap = gap.max(b - a);
            }
            assert!(gap <= delta.sqrt());
            assert!(gap < prev_gap);
            prev_gap = gap;
        }
    }

    #[test]
    fn increments_are_reproducible_and_scaled() {
        let (_, basis) = grid_and_basis(32, 16);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            sample_increment(&mut a, &basis, 2, 0.01),
            sample_increment(&mut b, &basis, 2, 0.01)
        );
        assert!(sample_increment(&mut a, &basis, 2, 0.0)
            .values()
            .iter()
            .all(|v| *v == 0.0));

        // 10^5 draws: the sample variance of N(0, dt) has relative sd sqrt(2/n)
        let dt = 0.3;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        while count < 100_000 {
            let inc = sample_increment(&mut a, &basis, 1, dt);
            for v in inc.values() {
                sum += v;
                sum_sq += v * v;
                count += 1;
            }
        }
        let n = count as f64;
        let var = sum_sq / n - (sum / n).powi(2);
        let sd_var = dt * (2.0 / n).sqrt();
        assert!((var - dt).abs() < 4.0 * sd_var);
        assert!((sum / n).abs() < 4.0 * (dt / n).sqrt());
    }

    #[test]
    fn noise_term_conserves_mass_and_vanishes_for_zero_sigma() {
        let (grid, basis) = grid_and_basis(48, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma = Field::from_species(
            FieldKind::Auxiliary,
            vec![
                grid.sample(|x| 1.0 + x * x),
                grid.sample(|x| (3.0 * x).sin().abs()),
            ],
        )
        .unwrap();
        for _ in 0..10 {
            let dw = sample_increment(&mut rng, &basis, 2, 0.01);
            let out = noise_divergence_term(&grid, &basis, &sigma, &dw, 50.0).unwrap();
            for i in 0..2 {
                assert!(grid.integrate(out.species(i)).abs() < 1e-14);
            }
        }
        let dw = sample_increment(&mut rng, &basis, 2, 0.01);
        let zero = Field::zeros(FieldKind::Auxiliary, 2, 48);
        let out = noise_divergence_term(&grid, &basis, &zero, &dw, 50.0).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));

        // only the constant mode: constant sigma times constant e_0 has no divergence inside
        let b0 = NoiseBasis::new(&grid, 1, DEFAULT_SMOOTHNESS).unwrap();
        let dw = sample_increment(&mut rng, &b0, 1, 0.01);
        let s = Field::constant(FieldKind::Auxiliary, 1, 48, 2.0);
        let out = noise_divergence_term(&grid, &b0, &s, &dw, 1.0).unwrap();
        assert!(out.species(0)[1..47].iter().all(|v| v.abs() < 1e-12));

        let wrong = NoiseBasis::new(&grid, 5, DEFAULT_SMOOTHNESS).unwrap();
        let dw = sample_increment(&mut rng, &wrong, 2, 0.01);
        assert!(matches!(
            noise_divergence_term(&grid, &basis, &sigma, &dw, 1.0),
            Err(NoiseError::ModeMismatch { .. })
        ));
    }

    #[test]
    fn noise_term_variance_matches_ito_isometry() {
        let (grid, basis) = grid_and_basis(32, 12);
        let sigma =
            Field::from_species(FieldKind::Auxiliary, vec![grid.sample(|x| 0.5 + x)]).unwrap();
        let phi = grid.sample(|x| (std::f64::consts::PI * x).cos() + x * x);
        let dt = 0.01;
        let n_pop = 20.0;
        // oracle: <div F, phi> = -<F_face, grad phi>, linear in each dW_k
        let grad_phi = grid.gradient(&phi);
        let mut expected = 0.0;
        for k in 0..basis.modes() {
            let cell: Vec<f64> = basis
                .mode(k)
                .iter()
                .zip(sigma.species(0))
                .map(|(e, s)| e * s)
                .collect();
            let faces = grid.face_average(&cell);
            let proj = grid.face_inner(&faces, &grad_phi);
            expected += proj * proj;
        }
        expected *= dt / n_pop;

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let reps = 10_000;
        let samples: Vec<f64> = (0..reps)
            .map(|_| {
                let dw = sample_increment(&mut rng, &basis, 1, dt);
                let out = noise_divergence_term(&grid, &basis, &sigma, &dw, n_pop).unwrap();
                grid.inner(out.species(0), &phi)
            })
            .collect();
        let mean_sq = samples.iter().map(|s| s * s).sum::<f64>() / reps as f64;
        let var_sq = samples
            .iter()
            .map(|s| (s * s - mean_sq).powi(2))
            .sum::<f64>()
            / (reps as f64 - 1.0);
        let se = (var_sq / reps as f64).sqrt();
        assert!(
            (mean_sq - expected).abs() < 3.0 * se,
            "{mean_sq} vs {expected} (se {se})"
        );
    }

    #[test]
    fn correction_vanishes_in_trivial_cases() {
        let (grid, basis) = grid_and_basis(32, 16);
        let c = Coefficients::new(vec![vec![1.0, 0.5, 0.2], vec![0.7, 0.1, 1.0]]).unwrap();
        let zero = Field::zeros(FieldKind::Density, 2, 32);
        let t = correction_t(&grid, &basis, &c, &zero, 0.01);
        assert!(t.values().iter().all(|v| *v == 0.0));

        let b0 = NoiseBasis::new(&grid, 1, DEFAULT_SMOOTHNESS).unwrap();
        let u = Field::constant(FieldKind::Density, 2, 32, 0.8);
        let t = correction_t(&grid, &b0, &c, &u, 0.01);
        assert!(t.values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn correction_integrates_to_zero() {
        let (grid, basis) = grid_and_basis(40, 20);
        let c = Coefficients::new(vec![vec![1.0, 0.5, 0.2], vec![0.7, 0.1, 1.0]]).unwrap();
        let u = Field::from_species(
            FieldKind::Density,
            vec![
                grid.sample(|x| 1.0 + 0.5 * (3.0 * x).cos()),
                grid.sample(|x| 0.01 + x * x),
            ],
        )
        .unwrap();
        let t = correction_t(&grid, &basis, &c, &u, 0.05);
        for i in 0..2 {
            assert!(grid.integrate(t.species(i)).abs() < 1e-13);
        }
    }

    /// Independent expansion for one species and one mode `e(x)`:
    /// flux = g'(x)^2 (a0 + 2 a11 u)^2 e^2 u_x + g'(x) (a0 + 2 a11 u) e e' g(x),
    /// with x = u (a0 + a11 u).
    fn hand_flux(a0: f64, a11: f64, u: f64, ux: f64, e: f64, ep: f64, delta: f64) -> f64 {
        let arg = u * (a0 + a11 * u);
        let gp = g_delta_prime(arg, delta);
        let inner = a0 + 2.0 * a11 * u;
        gp * gp * inner * inner * e * e * ux + gp * inner * e * ep * g_delta(arg, delta)
    }

    #[test]
    fn correction_flux_matches_hand_expansion() {
        let (a0, a11) = (0.7, 1.3);
        let c = Coefficients::new(vec![vec![a0, a11]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let delta = DELTAS[rng.random_range(0..3)];
            let u = rng.random_range(0.0..0.3);
            let ux = rng.random_range(-2.0..2.0);
            let e = rng.random_range(-1.0..1.0);
            let ep = rng.random_range(-5.0..5.0);
            let got = correction_flux_point(
                &c,
                0,
                &[u],
                &[ux],
                e * e,
                e * ep,
                |x| g_delta(x, delta),
                |x| g_delta_prime(x, delta),
            );
            let want = hand_flux(a0, a11, u, ux, e, ep, delta);
            assert!((got - want).abs() <= 1e-8 * want.abs().max(1e-12));
        }
    }

    #[test]
    fn correction_converges_to_derivative_of_hand_flux() {
        // u (a0 + a11 u) ranges over [0.038, 1.0]: delta = 0.01 stays on the sqrt
        // branch and delta = 2 on the linear branch, so the flux is smooth
        for delta in [0.01, 2.0] {
            correction_convergence_case(delta);
        }
    }

    fn correction_convergence_case(delta: f64) {
        let (a0, a11) = (0.7, 1.3);
        let c = Coefficients::new(vec![vec![a0, a11]]).unwrap();
        let uf = |x: f64| 0.05 + 0.3 * (1.0 + (std::f64::consts::PI * x).cos());
        let uxf = |x: f64| -0.3 * std::f64::consts::PI * (std::f64::consts::PI * x).sin();
        let err = |cells: usize| {
            let grid = Grid::new(1.0, cells).unwrap();
            let basis = NoiseBasis::new(&grid, 3, DEFAULT_SMOOTHNESS).unwrap();
            let u = Field::from_species(FieldKind::Density, vec![grid.sample(uf)]).unwrap();
            let t = correction_t(&grid, &basis, &c, &u, delta);
            let flux = |x: f64| {
                (0..3)
                    .map(|k| {
                        let w = (1.0 + grid.eigenbasis().eigenvalue(k)).powf(-1.25);
                        let e = w * grid.eigenbasis().value_at(k, x);
                        let ep = w * grid.eigenbasis().derivative_at(k, x);
                        hand_flux(a0, a11, uf(x), uxf(x), e, ep, delta)
                    })
                    .sum::<f64>()
            };
            let h = 1e-5;
            (0..cells)
                .map(|m| grid.center(m))
                .filter(|x| (0.1..0.9).contains(x))
                .map(|x| {
                    let m = (x / grid.dx()) as usize;
                    let exact = (flux(x + h) - flux(x - h)) / (2.0 * h);
                    (t.species(0)[m] - exact).abs()
                })
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(64), err(128));
        assert!(e2 < e1 / 3.0, "delta {delta}: {e1} -> {e2}");
    }

    #[test]
    fn regularized_correction_approaches_exact_away_from_zero() {
        let (grid, basis) = grid_and_basis(32, 16);
        let c = Coefficients::new(vec![vec![1.0, 0.5, 0.2], vec![0.7, 0.1, 1.0]]).unwrap();
        let u = Field::from_species(
            FieldKind::Density,
            vec![
                grid.sample(|x| 1e-3 + 0.5 * x * x),
                grid.sample(|x| 0.4 + 0.1 * (4.0 * x).sin()),
            ],
        )
        .unwrap();
        let exact = correction_t_exact(&grid, &basis, &c, &u).unwrap();
        let mut prev = f64::INFINITY;
        for delta in [1e-2, 1e-3, 1e-4, 1e-6] {
            let reg = correction_t(&grid, &basis, &c, &u, delta);
            let gap = reg.max_abs_diff(&exact);
            assert!(gap <= prev);
            prev = gap;
        }
        assert!(prev < 1e-12);
    }
}
