//! Automatic regularization-strength selection by the discrepancy
//! principle: estimate the noise level from background voxels, set the
//! target residual delta = tau * sigma, and bisect lambda until the
//! regularization-induced residual matches it.
//!
//! The residual norm is the RMS of `u_lambda - u_0` over the whole grid
//! (or over a mask, by flag), which keeps delta independent of grid size.
//! The residual is nondecreasing in lambda, so log-space bisection between
//! a geometric bracket is safe and converges in a few dozen steps.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::numeric::{kahan_sum, median_in_place};
use crate::spectral::{regularize_field, RegularizeMode};
use crate::volume::{EpiPair, Mask};

/// Gaussian consistency constant for the MAD scale estimator.
pub const MAD_SCALE: f64 = 1.4826;
/// Default tolerance factor relating sigma to the target discrepancy.
pub const DEFAULT_TAU: f64 = 1.5;
/// Minimum number of background voxels for a usable noise estimate.
pub const MIN_BACKGROUND_VOXELS: usize = 1000;
/// Upper bound of the geometric lambda bracket.
pub const LAMBDA_CAP: f64 = 1e12;
/// Bisection step budget.
pub const MAX_ITERATIONS: usize = 200;
/// Relative residual tolerance for convergence.
pub const RESIDUAL_REL_TOL: f64 = 1e-3;

/// Robust background noise level and the derived discrepancy target.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseEstimate {
    pub sigma: f64,
    pub tau: f64,
    /// Target discrepancy, exactly `tau * sigma`.
    pub delta: f64,
    /// Background grid voxels pooled (each contributes both polarities).
    pub n_background: usize,
}

/// MAD noise estimate over the mask complement, pooling both polarities.
pub fn estimate_noise(pair: &EpiPair, mask: &Mask, tau: f64) -> Result<NoiseEstimate> {
    if mask.dims != pair.dims() {
        return Err(Error::DimMismatch(format!(
            "mask dims {:?} do not match pair dims {:?}",
            mask.dims,
            pair.dims()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive (got {tau})")));
    }
    let n_background = mask.inside.iter().filter(|&&m| !m).count();
    if n_background < MIN_BACKGROUND_VOXELS {
        return Err(Error::InsufficientBackground {
            count: n_background,
            minimum: MIN_BACKGROUND_VOXELS,
        });
    }
    let mut samples = Vec::with_capacity(2 * n_background);
    for v in [&pair.plus, &pair.minus] {
        for (i, &x) in v.data().iter().enumerate() {
            if !mask.inside[i] {
                samples.push(x);
            }
        }
    }
    let center = median_in_place(&mut samples.clone());
    let mut deviations: Vec<f64> = samples.iter().map(|&x| (x - center).abs()).collect();
    let sigma = MAD_SCALE * median_in_place(&mut deviations);
    Ok(NoiseEstimate {
        sigma,
        tau,
        delta: tau * sigma,
        n_background,
    })
}

/// Domain over which the discrepancy RMS is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum NormDomain<'a> {
    WholeGrid,
    Mask(&'a Mask),
}

/// RMS of `u_lambda - u_0` over the chosen domain, in voxel units.
pub fn discrepancy(u0: &DisplacementField, u_lambda: &DisplacementField, domain: NormDomain<'_>) -> Result<f64> {
    if !u0.same_grid(u_lambda) {
        return Err(Error::DimMismatch(format!(
            "field dims {:?} vs {:?}",
            u0.dims, u_lambda.dims
        )));
    }
    match domain {
        NormDomain::WholeGrid => {
            let sq = kahan_sum(
                u0.u.iter()
                    .zip(u_lambda.u.iter())
                    .map(|(a, b)| (b - a) * (b - a)),
            );
            Ok((sq / u0.len() as f64).sqrt())
        }
        NormDomain::Mask(mask) => {
            if mask.dims != u0.dims {
                return Err(Error::DimMismatch(format!(
                    "mask dims {:?} do not match field dims {:?}",
                    mask.dims, u0.dims
                )));
            }
            let count = mask.count();
            if count == 0 {
                return Err(Error::EmptyMask);
            }
            let sq = kahan_sum(u0.u.iter().zip(u_lambda.u.iter()).zip(mask.inside.iter()).filter_map(
                |((a, b), &m)| {
                    if m {
                        Some((b - a) * (b - a))
                    } else {
                        None
                    }
                },
            ));
            Ok((sq / count as f64).sqrt())
        }
    }
}

/// Outcome of the lambda search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MorozovStatus {
    Converged,
    DeltaUnreachable,
    ZeroField,
}

#[derive(Debug, Clone, Serialize)]
pub struct MorozovResult {
    pub lambda_star: f64,
    /// Achieved RMS residual at `lambda_star`.
    pub residual: f64,
    pub delta: f64,
    /// Bisection step count (bracketing evaluations excluded).
    pub iterations: usize,
    pub bracket: (f64, f64),
    pub status: MorozovStatus,
}

fn residual_tolerance(delta: f64) -> f64 {
    if delta < 1e-6 {
        (RESIDUAL_REL_TOL * delta).max(1e-9)
    } else {
        RESIDUAL_REL_TOL * delta
    }
}

/// Select lambda such that the residual RMS matches `delta`.
///
/// The bracket grows geometrically from 1e-6 by factors of 10 until the
/// residual reaches delta or the lambda cap; bisection then runs in log
/// space. Degenerate inputs are encoded in the status: a constant field
/// never produces a residual (`ZeroField`), and a delta above the
/// attenuation ceiling returns the cap (`DeltaUnreachable`).
pub fn select_lambda(
    u0: &DisplacementField,
    delta: f64,
    mode: RegularizeMode,
    domain: NormDomain<'_>,
) -> Result<MorozovResult> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParameter(format!("delta must be nonnegative (got {delta})")));
    }
    let constant = u0.u.windows(2).all(|w| w[0] == w[1]);
    if constant {
        return Ok(MorozovResult {
            lambda_star: 0.0,
            residual: 0.0,
            delta,
            iterations: 0,
            bracket: (0.0, 0.0),
            status: MorozovStatus::ZeroField,
        });
    }
    if delta == 0.0 {
        return Ok(MorozovResult {
            lambda_star: 0.0,
            residual: 0.0,
            delta,
            iterations: 0,
            bracket: (0.0, 0.0),
            status: MorozovStatus::Converged,
        });
    }

    let residual_at = |lambda: f64| -> Result<f64> {
        let filtered = regularize_field(u0, lambda, mode)?;
        discrepancy(u0, &filtered, domain)
    };
    let tol = residual_tolerance(delta);

    // Geometric bracketing from 1e-6 upward, extending downward when the
    // first probe already overshoots.
    let mut lambda_hi = 1e-6;
    let mut r_hi = residual_at(lambda_hi)?;
    let mut lambda_lo;
    if r_hi >= delta {
        lambda_lo = lambda_hi;
        loop {
            lambda_lo /= 10.0;
            if lambda_lo < 1e-30 {
                break;
            }
            if residual_at(lambda_lo)? < delta {
                break;
            }
            lambda_hi = lambda_lo;
        }
    } else {
        loop {
            lambda_lo = lambda_hi;
            lambda_hi *= 10.0;
            if lambda_hi > LAMBDA_CAP {
                let residual = residual_at(LAMBDA_CAP)?;
                if residual < delta {
                    return Ok(MorozovResult {
                        lambda_star: LAMBDA_CAP,
                        residual,
                        delta,
                        iterations: 0,
                        bracket: (lambda_lo, LAMBDA_CAP),
                        status: MorozovStatus::DeltaUnreachable,
                    });
                }
                lambda_hi = LAMBDA_CAP;
                r_hi = residual;
                break;
            }
            r_hi = residual_at(lambda_hi)?;
            if r_hi >= delta {
                break;
            }
        }
    }
    let _ = r_hi;

    // Log-space bisection on the bracket.
    let mut best = (lambda_hi, f64::INFINITY);
    for iteration in 1..=MAX_ITERATIONS {
        let lambda_mid = (0.5 * (lambda_lo.ln() + lambda_hi.ln())).exp();
        let r_mid = residual_at(lambda_mid)?;
        if (r_mid - delta).abs() < (best.1 - delta).abs() {
            best = (lambda_mid, r_mid);
        }
        if (r_mid - delta).abs() <= tol {
            if r_mid < delta {
                lambda_lo = lambda_mid;
            } else {
                lambda_hi = lambda_mid;
            }
            return Ok(MorozovResult {
                lambda_star: lambda_mid,
                residual: r_mid,
                delta,
                iterations: iteration,
                bracket: (lambda_lo, lambda_hi),
                status: MorozovStatus::Converged,
            });
        }
        if r_mid < delta {
            lambda_lo = lambda_mid;
        } else {
            lambda_hi = lambda_mid;
        }
    }
    Ok(MorozovResult {
        lambda_star: best.0,
        residual: best.1,
        delta,
        iterations: MAX_ITERATIONS,
        bracket: (lambda_lo, lambda_hi),
        status: MorozovStatus::DeltaUnreachable,
    })
}
