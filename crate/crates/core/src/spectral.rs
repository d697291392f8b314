//! Spectral bending-energy regularization of displacement fields.
//!
//! The raw per-column field carries columnar striations in the cross-PE
//! direction. They are suppressed by dividing every DFT coefficient by
//! `1 + lambda * |k|^4`, the spectral form of the thin-plate bending
//! penalty. Frequencies are dimensionless cycles/voxel scaled by 2*pi;
//! voxel spacing is not folded into |k| because the automatic lambda
//! selection absorbs any fixed kernel rescaling.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, FieldKind};

/// Filtering domain: independent 2D planes containing the PE axis (the
/// default, matching per-slice acquisition), or one 3D transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizeMode {
    Slice2d,
    Full3d,
}

impl std::fmt::Display for RegularizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegularizeMode::Slice2d => write!(f, "slice2d"),
            RegularizeMode::Full3d => write!(f, "full3d"),
        }
    }
}

/// Signed DFT frequency of bin `i` in cycles per voxel.
#[inline]
fn dft_frequency(i: usize, len: usize) -> f64 {
    if i <= len / 2 {
        i as f64 / len as f64
    } else {
        (i as f64 - len as f64) / len as f64
    }
}

/// Per-frequency |k|^4 kernel for a 2D plane, row-major `(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SpectralFilter {
    pub lambda: f64,
    pub kernel_dims: (usize, usize),
    pub k4: Vec<f64>,
}

impl SpectralFilter {
    pub fn new(lambda: f64, kernel_dims: (usize, usize)) -> Result<SpectralFilter> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::NegativeLambda(lambda));
        }
        let (rows, cols) = kernel_dims;
        let mut k4 = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let kr = 2.0 * std::f64::consts::PI * dft_frequency(r, rows);
            for c in 0..cols {
                let kc = 2.0 * std::f64::consts::PI * dft_frequency(c, cols);
                let k2 = kr * kr + kc * kc;
                k4.push(k2 * k2);
            }
        }
        Ok(SpectralFilter { lambda, kernel_dims, k4 })
    }

    /// Attenuation factor at one frequency bin, in (0, 1], equal to 1 at DC.
    #[inline]
    pub fn attenuation(&self, bin: usize) -> f64 {
        1.0 / (1.0 + self.lambda * self.k4[bin])
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plan(planner: &mut FftPlanner<f64>, len: usize) -> Plans {
    Plans {
        forward: planner.plan_fft_forward(len),
        inverse: planner.plan_fft_inverse(len),
    }
}

fn transpose(buf: &[Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::default(); buf.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = buf[r * cols + c];
        }
    }
    out
}

/// In-place 2D DFT over a row-major `(rows, cols)` buffer. `process`
/// handles the whole buffer as contiguous length-`cols` rows; columns go
/// through an explicit transpose.
fn dft_2d(buf: &mut Vec<Complex<f64>>, rows: usize, cols: usize, row_fft: &Arc<dyn Fft<f64>>, col_fft: &Arc<dyn Fft<f64>>) {
    row_fft.process(buf);
    let mut t = transpose(buf, rows, cols);
    col_fft.process(&mut t);
    *buf = transpose(&t, cols, rows);
}

fn filter_plane(plane: &[f64], filter: &SpectralFilter, plans_row: &Plans, plans_col: &Plans) -> Vec<f64> {
    let (rows, cols) = filter.kernel_dims;
    debug_assert_eq!(plane.len(), rows * cols);
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    dft_2d(&mut buf, rows, cols, &plans_row.forward, &plans_col.forward);
    for (bin, v) in buf.iter_mut().enumerate() {
        *v *= filter.attenuation(bin);
    }
    dft_2d(&mut buf, rows, cols, &plans_row.inverse, &plans_col.inverse);
    let scale = 1.0 / (rows * cols) as f64;
    buf.iter().map(|v| v.re * scale).collect()
}

/// Bending-energy low-pass filter of a single 2D field, row-major
/// `(rows, cols)`. The imaginary residue of the inverse transform is
/// discarded.
pub fn bending_filter(plane: &[f64], dims: (usize, usize), lambda: f64) -> Result<Vec<f64>> {
    let (rows, cols) = dims;
    if plane.len() != rows * cols {
        return Err(Error::DimMismatch(format!(
            "plane length {} does not match dims {}x{}",
            plane.len(),
            rows,
            cols
        )));
    }
    let filter = SpectralFilter::new(lambda, dims)?;
    let mut planner = FftPlanner::new();
    let plans_row = plan(&mut planner, cols);
    let plans_col = plan(&mut planner, rows);
    Ok(filter_plane(plane, &filter, &plans_row, &plans_col))
}

/// Apply the bending filter to a whole field.
///
/// `Slice2d` filters each plane spanned by the PE axis and the first
/// cross-PE axis independently (parallel over slices, deterministic for
/// any worker count); `Full3d` runs one 3D transform with |k|^4 built from
/// all three frequency components. The validity mask passes through
/// unchanged: invalid voxels were already in-filled by the transport step.
pub fn regularize_field(field: &DisplacementField, lambda: f64, mode: RegularizeMode) -> Result<DisplacementField> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::NegativeLambda(lambda));
    }
    let u = match mode {
        RegularizeMode::Slice2d => regularize_slice2d(field, lambda)?,
        RegularizeMode::Full3d => regularize_full3d(field, lambda),
    };
    DisplacementField::new(field.dims, field.pe_axis, u, field.validity.clone(), FieldKind::Regularized)
}

fn regularize_slice2d(field: &DisplacementField, lambda: f64) -> Result<Vec<f64>> {
    let axes = field.column_axes();
    let strides = field.strides();
    let n_pe = field.dims[axes.pe];
    let n_cross = field.dims[axes.cross];
    let n_slices = field.dims[axes.slice];

    let filter = SpectralFilter::new(lambda, (n_pe, n_cross))?;
    let mut planner = FftPlanner::new();
    let plans_row = plan(&mut planner, n_cross);
    let plans_col = plan(&mut planner, n_pe);

    let planes: Vec<Vec<f64>> = (0..n_slices)
        .into_par_iter()
        .map(|s| {
            let origin = s * strides[axes.slice];
            let mut plane = vec![0.0; n_pe * n_cross];
            for t in 0..n_pe {
                for c in 0..n_cross {
                    plane[t * n_cross + c] = field.u[origin + t * strides[axes.pe] + c * strides[axes.cross]];
                }
            }
            filter_plane(&plane, &filter, &plans_row, &plans_col)
        })
        .collect();

    let mut out = vec![0.0; field.len()];
    for (s, plane) in planes.iter().enumerate() {
        let origin = s * strides[axes.slice];
        for t in 0..n_pe {
            for c in 0..n_cross {
                out[origin + t * strides[axes.pe] + c * strides[axes.cross]] = plane[t * n_cross + c];
            }
        }
    }
    Ok(out)
}

fn regularize_full3d(field: &DisplacementField, lambda: f64) -> Vec<f64> {
    let [nx, ny, nz] = field.dims;
    let mut planner = FftPlanner::new();
    let plans = [
        plan(&mut planner, nx),
        plan(&mut planner, ny),
        plan(&mut planner, nz),
    ];
    let mut buf: Vec<Complex<f64>> = field.u.iter().map(|&v| Complex::new(v, 0.0)).collect();

    let apply_axis = |buf: &mut Vec<Complex<f64>>, axis: usize, fft: &Arc<dyn Fft<f64>>| {
        let dims = field.dims;
        let strides = [1usize, nx, nx * ny];
        let len = dims[axis];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut line = vec![Complex::default(); len];
        for i in 0..dims[oa] {
            for j in 0..dims[ob] {
                let origin = i * strides[oa] + j * strides[ob];
                for t in 0..len {
                    line[t] = buf[origin + t * strides[axis]];
                }
                fft.process(&mut line);
                for t in 0..len {
                    buf[origin + t * strides[axis]] = line[t];
                }
            }
        }
    };

    for axis in 0..3 {
        apply_axis(&mut buf, axis, &plans[axis].forward);
    }
    for z in 0..nz {
        let kz = 2.0 * std::f64::consts::PI * dft_frequency(z, nz);
        for y in 0..ny {
            let ky = 2.0 * std::f64::consts::PI * dft_frequency(y, ny);
            for x in 0..nx {
                let kx = 2.0 * std::f64::consts::PI * dft_frequency(x, nx);
                let k2 = kx * kx + ky * ky + kz * kz;
                buf[x + nx * (y + ny * z)] /= 1.0 + lambda * k2 * k2;
            }
        }
    }
    for axis in 0..3 {
        apply_axis(&mut buf, axis, &plans[axis].inverse);
    }
    let scale = 1.0 / (nx * ny * nz) as f64;
    buf.iter().map(|v| v.re * scale).collect()
}
