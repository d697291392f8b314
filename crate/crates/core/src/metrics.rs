//! Evaluation metrics: mutual information against a structural reference,
//! cross-polarity normalized cross-correlation, and RMSE, volumetric and
//! per axial slice.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{kahan_sum, KahanAccumulator};
use crate::volume::{Mask, Volume};

pub const DEFAULT_BINS: usize = 64;

fn check_dims(a: &Volume, b: &Volume, mask: &Mask) -> Result<()> {
    if a.dims() != b.dims() || a.dims() != mask.dims {
        return Err(Error::DimMismatch(format!(
            "metric inputs disagree: {:?} vs {:?} vs mask {:?}",
            a.dims(),
            b.dims(),
            mask.dims
        )));
    }
    Ok(())
}

fn masked_range(v: &Volume, mask: &[bool]) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in v.data().iter().enumerate() {
        if mask[i] {
            min = min.min(x);
            max = max.max(x);
        }
    }
    (min, max)
}

#[inline]
fn bin_of(x: f64, min: f64, inv_width: f64, bins: usize) -> usize {
    (((x - min) * inv_width) as usize).min(bins - 1)
}

/// Mutual information in nats from a joint histogram with `bins`
/// equal-width bins per image spanning each image's masked min-max range.
/// A constant image yields 0 by convention.
pub fn mutual_information(a: &Volume, b: &Volume, mask: &Mask, bins: usize) -> Result<f64> {
    check_dims(a, b, mask)?;
    if bins < 2 {
        return Err(Error::InvalidParameter(format!("bins must be >= 2 (got {bins})")));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let (min_a, max_a) = masked_range(a, &mask.inside);
    let (min_b, max_b) = masked_range(b, &mask.inside);
    if !(max_a > min_a) || !(max_b > min_b) {
        return Ok(0.0);
    }
    let inv_a = bins as f64 / (max_a - min_a);
    let inv_b = bins as f64 / (max_b - min_b);
    let mut joint = vec![0u64; bins * bins];
    for (i, &m) in mask.inside.iter().enumerate() {
        if m {
            let ia = bin_of(a.data()[i], min_a, inv_a, bins);
            let ib = bin_of(b.data()[i], min_b, inv_b, bins);
            joint[ia * bins + ib] += 1;
        }
    }
    let mut marg_a = vec![0u64; bins];
    let mut marg_b = vec![0u64; bins];
    for ia in 0..bins {
        for ib in 0..bins {
            let c = joint[ia * bins + ib];
            marg_a[ia] += c;
            marg_b[ib] += c;
        }
    }
    let total = count as f64;
    let mut mi = KahanAccumulator::default();
    for ia in 0..bins {
        for ib in 0..bins {
            let c = joint[ia * bins + ib];
            if c == 0 {
                continue;
            }
            let p = c as f64 / total;
            let pa = marg_a[ia] as f64 / total;
            let pb = marg_b[ib] as f64 / total;
            mi.add(p * (p / (pa * pb)).ln());
        }
    }
    Ok(mi.value())
}

/// Pearson correlation of the masked voxel pairs.
pub fn ncc(a: &Volume, b: &Volume, mask: &Mask) -> Result<f64> {
    check_dims(a, b, mask)?;
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mean = |v: &Volume| {
        kahan_sum(
            v.data()
                .iter()
                .zip(mask.inside.iter())
                .filter_map(|(&x, &m)| if m { Some(x) } else { None }),
        ) / count as f64
    };
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = KahanAccumulator::default();
    let mut var_a = KahanAccumulator::default();
    let mut var_b = KahanAccumulator::default();
    for (i, &m) in mask.inside.iter().enumerate() {
        if m {
            let da = a.data()[i] - ma;
            let db = b.data()[i] - mb;
            cov.add(da * db);
            var_a.add(da * da);
            var_b.add(db * db);
        }
    }
    let denom = (var_a.value() * var_b.value()).sqrt();
    if denom == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((cov.value() / denom).clamp(-1.0, 1.0))
}

/// Root-mean-square of `a - b` over the mask.
pub fn rmse(a: &Volume, b: &Volume, mask: &Mask) -> Result<f64> {
    check_dims(a, b, mask)?;
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let sq = kahan_sum(
        a.data()
            .iter()
            .zip(b.data().iter())
            .zip(mask.inside.iter())
            .filter_map(|((&x, &y), &m)| if m { Some((x - y) * (x - y)) } else { None }),
    );
    Ok((sq / count as f64).sqrt())
}

/// One axial slice's metric triple.
#[derive(Debug, Clone, Serialize)]
pub struct SliceMetrics {
    pub slice_index: usize,
    pub mi: Option<f64>,
    pub ncc: f64,
    pub rmse: f64,
}

/// Volumetric and per-slice evaluation of a polarity pair, optionally
/// against a structural reference.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    /// MI of the pair average against the reference, when one is given.
    pub mi_t1: Option<f64>,
    pub ncc_lr_rl: f64,
    pub rmse_lr_rl: f64,
    pub per_slice: Vec<SliceMetrics>,
    /// Axial slices skipped for an empty mask intersection (or degenerate
    /// variance).
    pub skipped_slices: Vec<usize>,
    pub mask_voxels: usize,
    pub histogram_bins: usize,
}

/// Average of two volumes on the same grid.
pub fn average_volume(a: &Volume, b: &Volume) -> Result<Volume> {
    if !a.same_grid(b) {
        return Err(Error::DimMismatch("cannot average volumes on different grids".into()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    a.with_data(data)
}

fn slice_mask(mask: &Mask, z: usize) -> Mask {
    let [nx, ny, _] = mask.dims;
    let mut inside = vec![false; mask.inside.len()];
    let base = z * nx * ny;
    inside[base..base + nx * ny].copy_from_slice(&mask.inside[base..base + nx * ny]);
    Mask { dims: mask.dims, inside }
}

/// Full report: volumetric metrics plus the per-axial-slice breakdown.
///
/// "Per slice" means planes of constant z. Slices whose mask intersection
/// is empty (or whose masked intensities are constant, leaving NCC
/// undefined) are skipped and listed.
pub fn per_slice_report(
    plus: &Volume,
    minus: &Volume,
    reference: Option<&Volume>,
    mask: &Mask,
    bins: usize,
) -> Result<MetricsReport> {
    check_dims(plus, minus, mask)?;
    if let Some(r) = reference {
        check_dims(plus, r, mask)?;
    }
    let avg = average_volume(plus, minus)?;
    let mi_t1 = match reference {
        Some(r) => Some(mutual_information(&avg, r, mask, bins)?),
        None => None,
    };
    let ncc_lr_rl = ncc(plus, minus, mask)?;
    let rmse_lr_rl = rmse(plus, minus, mask)?;

    let nz = plus.dims()[2];
    let mut per_slice = Vec::new();
    let mut skipped_slices = Vec::new();
    for z in 0..nz {
        let sm = slice_mask(mask, z);
        if sm.count() == 0 {
            skipped_slices.push(z);
            continue;
        }
        let slice_ncc = match ncc(plus, minus, &sm) {
            Ok(v) => v,
            Err(Error::ZeroVariance) => {
                skipped_slices.push(z);
                continue;
            }
            Err(e) => return Err(e),
        };
        let slice_rmse = rmse(plus, minus, &sm)?;
        let slice_mi = match reference {
            Some(r) => Some(mutual_information(&avg, r, &sm, bins)?),
            None => None,
        };
        per_slice.push(SliceMetrics {
            slice_index: z,
            mi: slice_mi,
            ncc: slice_ncc,
            rmse: slice_rmse,
        });
    }

    Ok(MetricsReport {
        mi_t1,
        ncc_lr_rl,
        rmse_lr_rl,
        per_slice,
        skipped_slices,
        mask_voxels: mask.count(),
        histogram_bins: bins,
    })
}
