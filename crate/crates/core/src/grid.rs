//! Uniform cell-centred grid on `[0, length]` with homogeneous Neumann boundary.
//!
//! Grid functions live at the `M` cell centres `x_m = (m + 1/2) dx`. Fluxes live
//! on the `M + 1` faces `x_{m-1/2}`; the two boundary faces carry zero flux, which
//! is how the no-flux condition enters every divergence. [`Grid::gradient`] and
//! [`Grid::divergence`] form an exact summation-by-parts pair:
//!
//! ```text
//! sum_m dx * div(g)_m * f_m = - sum_faces dx * g_f * grad(f)_f
//! ```
//!
//! The cosine eigenbasis of the Neumann Laplacian is tabulated at the cell
//! centres. At these points it is exactly orthonormal for the discrete inner
//! product `sum_m dx f_m g_m`, so the spectral transforms are exact inverses.

use std::f64::consts::PI;

use thiserror::Error;

/// Smallest admissible number of cells.
pub const MIN_CELLS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("domain length must be positive and finite, got {0}")]
    InvalidLength(f64),
    #[error("grid needs at least {MIN_CELLS} cells, got {0}")]
    TooFewCells(usize),
}

/// Cosine eigenfunctions `phi_k(x) = c_k cos(k pi x / length)` of the Neumann
/// Laplacian, with eigenvalues `(k pi / length)^2`, tabulated at cell centres.
#[derive(Debug, Clone)]
pub struct NeumannEigenbasis {
    cells: usize,
    /// Row-major `cells x cells`: entry `[k * cells + m] = phi_k(x_m)`.
    table: Vec<f64>,
    eigenvalues: Vec<f64>,
    norms: Vec<f64>,
    wavenumbers: Vec<f64>,
}

impl NeumannEigenbasis {
    fn new(length: f64, cells: usize) -> Self {
        let dx = length / cells as f64;
        let mut table = vec![0.0; cells * cells];
        let mut eigenvalues = Vec::with_capacity(cells);
        let mut norms = Vec::with_capacity(cells);
        let mut wavenumbers = Vec::with_capacity(cells);
        for k in 0..cells {
            let c = if k == 0 {
                (1.0 / length).sqrt()
            } else {
                (2.0 / length).sqrt()
            };
            let kappa = k as f64 * PI / length;
            norms.push(c);
            wavenumbers.push(kappa);
            eigenvalues.push(kappa * kappa);
            let row = &mut table[k * cells..(k + 1) * cells];
            for (m, entry) in row.iter_mut().enumerate() {
                let x = (m as f64 + 0.5) * dx;
                *entry = c * (kappa * x).cos();
            }
        }
        Self {
            cells,
            table,
            eigenvalues,
            norms,
            wavenumbers,
        }
    }

    /// `phi_k` at every cell centre.
    pub fn mode(&self, k: usize) -> &[f64] {
        &self.table[k * self.cells..(k + 1) * self.cells]
    }

    /// Laplacian eigenvalue `(k pi / length)^2`.
    pub fn eigenvalue(&self, k: usize) -> f64 {
        self.eigenvalues[k]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Sup norm of `phi_k` on the continuous interval.
    pub fn amplitude(&self, k: usize) -> f64 {
        self.norms[k]
    }

    /// `k pi / length`.
    pub fn wavenumber(&self, k: usize) -> f64 {
        self.wavenumbers[k]
    }

    /// Analytic `phi_k(x)` at an arbitrary point.
    pub fn value_at(&self, k: usize, x: f64) -> f64 {
        self.norms[k] * (self.wavenumbers[k] * x).cos()
    }

    /// Analytic `phi_k'(x)` at an arbitrary point.
    pub fn derivative_at(&self, k: usize, x: f64) -> f64 {
        -self.norms[k] * self.wavenumbers[k] * (self.wavenumbers[k] * x).sin()
    }
}

#[derive(Debug, Clone)]
pub struct Grid {
    length: f64,
    cells: usize,
    dx: f64,
    basis: NeumannEigenbasis,
}

impl Grid {
    pub fn new(length: f64, cells: usize) -> Result<Self, GridError> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(GridError::InvalidLength(length));
        }
        if cells < MIN_CELLS {
            return Err(GridError::TooFewCells(cells));
        }
        Ok(Self {
            length,
            cells,
            dx: length / cells as f64,
            basis: NeumannEigenbasis::new(length, cells),
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn eigenbasis(&self) -> &NeumannEigenbasis {
        &self.basis
    }

    pub fn center(&self, m: usize) -> f64 {
        (m as f64 + 0.5) * self.dx
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells).map(|m| self.center(m)).collect()
    }

    /// Face positions `x_{m-1/2}`, `m = 0..=M`.
    pub fn faces(&self) -> Vec<f64> {
        (0..=self.cells).map(|m| m as f64 * self.dx).collect()
    }

    /// Evaluates `f` at every cell centre.
    pub fn sample<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.cells).map(|m| f(self.center(m))).collect()
    }

    /// Face gradient of a cell function: centred differences between the two
    /// neighbouring cells, with mirror ghost cells at the boundary (so both
    /// boundary entries are exactly zero). Output has `M + 1` entries.
    pub fn gradient(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cells + 1];
        self.gradient_into(f, &mut out);
        out
    }

    pub fn gradient_into(&self, f: &[f64], out: &mut [f64]) {
        debug_assert_eq!(f.len(), self.cells);
        debug_assert_eq!(out.len(), self.cells + 1);
        let inv = 1.0 / self.dx;
        out[0] = 0.0;
        out[self.cells] = 0.0;
        for m in 1..self.cells {
            out[m] = (f[m] - f[m - 1]) * inv;
        }
    }

    /// Cell divergence of a face flux. Boundary faces are no-flux faces: their
    /// entries are ignored and treated as zero, so the result always integrates
    /// to zero.
    pub fn divergence(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cells];
        self.divergence_into(g, &mut out);
        out
    }

    pub fn divergence_into(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.cells + 1);
        debug_assert_eq!(out.len(), self.cells);
        let inv = 1.0 / self.dx;
        let last = self.cells - 1;
        for m in 0..self.cells {
            let left = if m == 0 { 0.0 } else { g[m] };
            let right = if m == last { 0.0 } else { g[m + 1] };
            out[m] = (right - left) * inv;
        }
    }

    /// Cell-centred derivative: centred differences with mirror ghost cells.
    pub fn cell_gradient(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cells];
        self.cell_gradient_into(f, &mut out);
        out
    }

    pub fn cell_gradient_into(&self, f: &[f64], out: &mut [f64]) {
        debug_assert_eq!(f.len(), self.cells);
        let inv = 0.5 / self.dx;
        let last = self.cells - 1;
        for m in 0..self.cells {
            let left = if m == 0 { f[0] } else { f[m - 1] };
            let right = if m == last { f[last] } else { f[m + 1] };
            out[m] = (right - left) * inv;
        }
    }

    /// Arithmetic average of a cell function onto the interior faces; both
    /// boundary faces are set to zero.
    pub fn face_average(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cells + 1];
        self.face_average_into(f, &mut out);
        out
    }

    pub fn face_average_into(&self, f: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[self.cells] = 0.0;
        for m in 1..self.cells {
            out[m] = 0.5 * (f[m] + f[m - 1]);
        }
    }

    /// Midpoint quadrature `sum_m f_m dx`.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() * self.dx
    }

    /// Discrete `L^2` inner product of two cell functions.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * self.dx
    }

    /// Discrete inner product of two face functions (boundary faces included,
    /// they are zero for every flux this crate produces).
    pub fn face_inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.inner(f, g)
    }

    pub fn l2_norm(&self, f: &[f64]) -> f64 {
        self.inner(f, f).sqrt()
    }

    /// Coefficients `c_k = sum_m f_m phi_k(x_m) dx`.
    pub fn to_spectral(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cells];
        self.to_spectral_into(f, &mut out);
        out
    }

    pub fn to_spectral_into(&self, f: &[f64], out: &mut [f64]) {
        debug_assert_eq!(f.len(), self.cells);
        for (k, c) in out.iter_mut().enumerate() {
            let row = self.basis.mode(k);
            *c = row.iter().zip(f).map(|(p, v)| p * v).sum::<f64>() * self.dx;
        }
    }

    /// Grid values `f_m = sum_k c_k phi_k(x_m)`.
    pub fn from_spectral(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cells];
        self.from_spectral_into(coeffs, &mut out);
        out
    }

    pub fn from_spectral_into(&self, coeffs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(coeffs.len(), self.cells);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(self.basis.mode(k)) {
                *o += c * p;
            }
        }
    }
}
