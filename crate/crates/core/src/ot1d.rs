//! Exact 1D Wasserstein-2 transport between opposite-polarity column
//! profiles, and the barycentric displacement field built from it.
//!
//! For one PE column the two reversed-polarity profiles carry the same
//! signal mass shifted in opposite directions. After normalization to unit
//! mass, the optimal map is the quantile rearrangement: T(t) inverts the
//! target CDF at the source CDF value. The inverse is the left-continuous
//! generalized inverse of the piecewise-linear extension of the discrete
//! CDF (nodes at `(s, Fb[s])` with a zero anchor at `s = -1`), which gives
//! sub-voxel targets. The estimated displacement is half the transport
//! displacement, placing it at the midpoint between the two polarities.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{DisplacementField, FieldKind};
use crate::numeric::KahanAccumulator;
use crate::volume::EpiPair;

/// Relative zero-mass threshold: a column whose clamped mass falls below
/// `MASS_EPSILON_PER_SAMPLE * n * reference_intensity` carries no usable
/// transport information.
pub const MASS_EPSILON_PER_SAMPLE: f64 = 1e-12;

/// A profile scaled to unit mass, or flagged as carrying no mass.
#[derive(Debug, Clone)]
pub struct NormalizedProfile {
    /// Unit-mass weights (all zero when `zero_mass` is set).
    pub weights: Vec<f64>,
    /// Clamped pre-normalization mass.
    pub total_mass: f64,
    pub zero_mass: bool,
}

/// Clamp negatives to zero and scale to unit mass.
///
/// `mass_epsilon` is the absolute mass below which the profile is flagged
/// zero-mass instead of normalized.
pub fn normalize_profile(profile: &[f64], mass_epsilon: f64) -> NormalizedProfile {
    let clamped: Vec<f64> = profile.iter().map(|&v| v.max(0.0)).collect();
    let total_mass = crate::numeric::kahan_sum(clamped.iter().copied());
    if total_mass <= mass_epsilon || total_mass <= 0.0 {
        return NormalizedProfile {
            weights: vec![0.0; profile.len()],
            total_mass,
            zero_mass: true,
        };
    }
    NormalizedProfile {
        weights: clamped.iter().map(|&v| v / total_mass).collect(),
        total_mass,
        zero_mass: false,
    }
}

/// One column's transport solution: normalized profiles, their CDFs, and
/// the sub-voxel quantile map.
#[derive(Debug, Clone)]
pub struct TransportMap {
    pub n: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub fa: Vec<f64>,
    pub fb: Vec<f64>,
    /// T(t) for t = 0..n-1, in voxel units, nondecreasing, within [0, n-1].
    pub tmap: Vec<f64>,
}

/// Compensated inclusive cumulative sum, forced nondecreasing.
fn cdf(weights: &[f64]) -> Vec<f64> {
    let mut acc = KahanAccumulator::default();
    let mut out = Vec::with_capacity(weights.len());
    let mut prev = 0.0f64;
    for &w in weights {
        acc.add(w);
        let v = acc.value().max(prev);
        out.push(v);
        prev = v;
    }
    out
}

/// Left-continuous generalized inverse of the piecewise-linear CDF
/// extension. For q in (Fb[s-1], Fb[s]] the inverse is
/// `(s-1) + (q - Fb[s-1]) / (Fb[s] - Fb[s-1])`, clamped to the grid.
fn invert_cdf(fb: &[f64], q: f64) -> f64 {
    let n = fb.len();
    let total = fb[n - 1];
    let q = q.min(total);
    let s = fb.partition_point(|&f| f < q).min(n - 1);
    let prev = if s > 0 { fb[s - 1] } else { 0.0 };
    let span = fb[s] - prev;
    let pos = if span > 0.0 {
        (s as f64 - 1.0) + (q - prev) / span
    } else {
        s as f64
    };
    pos.clamp(0.0, (n - 1) as f64)
}

/// Exact quantile map between two unit-mass profiles of equal length.
///
/// Samples of `a` with zero mass have no defined target; they receive the
/// value interpolated linearly between their nearest mass-carrying
/// neighbors (constant extension past the ends), which keeps the map
/// continuous for the downstream regularizer.
pub fn transport_map(a: &[f64], b: &[f64]) -> Result<TransportMap> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::ProfileLengthMismatch { a: n, b: b.len() });
    }
    if n == 0 {
        return Err(Error::InvalidParameter("empty profile".into()));
    }
    let fa = cdf(a);
    let fb = cdf(b);
    for (name, f) in [("a", &fa), ("b", &fb)] {
        if (f[n - 1] - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "profile {name} is not unit mass (total {})",
                f[n - 1]
            )));
        }
    }

    let support: Vec<usize> = (0..n).filter(|&t| a[t] > 0.0).collect();
    if support.is_empty() {
        return Err(Error::InvalidParameter("zero-mass profile".into()));
    }

    let mut tmap = vec![f64::NAN; n];
    for &t in &support {
        tmap[t] = invert_cdf(&fb, fa[t]);
    }
    // In-fill zero-mass samples of `a` from their neighbors.
    let first = support[0];
    let last = *support.last().unwrap();
    for t in 0..first {
        tmap[t] = tmap[first];
    }
    for t in last + 1..n {
        tmap[t] = tmap[last];
    }
    for w in support.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi - lo > 1 {
            let span = (hi - lo) as f64;
            for t in lo + 1..hi {
                let frac = (t - lo) as f64 / span;
                tmap[t] = tmap[lo] + frac * (tmap[hi] - tmap[lo]);
            }
        }
    }
    // Remove any float jitter so monotonicity holds exactly.
    for t in 1..n {
        if tmap[t] < tmap[t - 1] {
            tmap[t] = tmap[t - 1];
        }
    }

    Ok(TransportMap {
        n,
        a: a.to_vec(),
        b: b.to_vec(),
        fa,
        fb,
        tmap,
    })
}

impl TransportMap {
    /// Squared W2 cost of the monotone coupling between the two profiles
    /// treated as atomic measures on the integer grid, computed by the
    /// greedy mass sweep.
    pub fn w2_cost(&self) -> f64 {
        let mut cost = KahanAccumulator::default();
        let mut i = 0usize;
        let mut j = 0usize;
        let mut rem_a = 0.0f64;
        let mut rem_b = 0.0f64;
        while i < self.n || rem_a > 0.0 {
            if rem_a <= 0.0 {
                if i >= self.n {
                    break;
                }
                rem_a = self.a[i];
                i += 1;
                continue;
            }
            if rem_b <= 0.0 {
                if j >= self.n {
                    break;
                }
                rem_b = self.b[j];
                j += 1;
                continue;
            }
            let m = rem_a.min(rem_b);
            let d = (i as f64 - 1.0) - (j as f64 - 1.0);
            cost.add(m * d * d);
            rem_a -= m;
            rem_b -= m;
        }
        cost.value()
    }
}

/// Per-sample displacement for one column.
#[derive(Debug, Clone)]
pub struct ColumnDisplacement {
    /// Displacement along PE in voxel units; identically zero when invalid.
    pub u0: Vec<f64>,
    pub valid: bool,
}

impl ColumnDisplacement {
    pub fn invalid(n: usize) -> ColumnDisplacement {
        ColumnDisplacement { u0: vec![0.0; n], valid: false }
    }
}

/// Half the transport displacement: u0(t) = (T(t) - t) / 2.
pub fn barycentric_displacement(map: &TransportMap) -> ColumnDisplacement {
    let u0 = map
        .tmap
        .iter()
        .enumerate()
        .map(|(t, &tt)| 0.5 * (tt - t as f64))
        .collect();
    ColumnDisplacement { u0, valid: true }
}

/// Per-column transport over a whole reversed-polarity pair.
///
/// Columns are processed independently (parallel over slices); the output
/// is identical for any worker count because each column writes a disjoint
/// region. Columns whose clamped mass falls below the relative zero-mass
/// threshold (in either polarity) are marked invalid and hold u = 0.
pub fn column_field(pair: &EpiPair) -> Result<DisplacementField> {
    let dims = pair.dims();
    let pe_axis = pair.pe_axis();
    let n = pair.plus.pe_len();
    let (n_slices, n_cross) = pair.plus.column_grid();

    // Reference intensity scale for the zero-mass threshold.
    let clamped_sum = |v: &crate::volume::Volume| {
        crate::numeric::kahan_sum(v.data().iter().map(|&x| x.max(0.0)))
    };
    let mean_intensity =
        (clamped_sum(&pair.plus) + clamped_sum(&pair.minus)) / (2.0 * pair.plus.len() as f64);
    let mass_epsilon = MASS_EPSILON_PER_SAMPLE * n as f64 * mean_intensity;

    let slices: Vec<(Vec<f64>, Vec<bool>)> = (0..n_slices)
        .into_par_iter()
        .map(|s| -> Result<(Vec<f64>, Vec<bool>)> {
            let mut u_slice = vec![0.0; n_cross * n];
            let mut valid_slice = vec![false; n_cross];
            for c in 0..n_cross {
                let col_plus = pair.plus.extract_column(s, c)?;
                let col_minus = pair.minus.extract_column(s, c)?;
                let a = normalize_profile(&col_plus, mass_epsilon);
                let b = normalize_profile(&col_minus, mass_epsilon);
                if a.zero_mass || b.zero_mass {
                    continue;
                }
                let map = transport_map(&a.weights, &b.weights)?;
                let disp = barycentric_displacement(&map);
                u_slice[c * n..(c + 1) * n].copy_from_slice(&disp.u0);
                valid_slice[c] = true;
            }
            Ok((u_slice, valid_slice))
        })
        .collect::<Result<Vec<_>>>()?;

    let total = dims[0] * dims[1] * dims[2];
    let mut u = vec![0.0; total];
    let mut validity = vec![false; total];
    for (s, (u_slice, valid_slice)) in slices.iter().enumerate() {
        for c in 0..n_cross {
            let (origin, stride) = pair.plus.column_origin_stride(s, c);
            let col = &u_slice[c * n..(c + 1) * n];
            for (t, &val) in col.iter().enumerate() {
                u[origin + t * stride] = val;
                validity[origin + t * stride] = valid_slice[c];
            }
        }
    }

    DisplacementField::new(dims, pe_axis, u, validity, FieldKind::Raw)
}
