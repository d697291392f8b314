//! Volume, mask, and reversed-polarity pair types.
//!
//! A [`Volume`] is a 3D scalar grid stored as a flat `Vec<f64>` with x
//! fastest: `index = x + nx*(y + ny*z)`. The phase-encoding (PE) axis is a
//! runtime parameter; column extraction handles the striding, so no
//! transposition is ever needed. Volumes are immutable after construction
//! and safe to share across threads.

use crate::error::{Error, Result};

/// Designates the two non-PE axes of a grid, in increasing axis order.
///
/// `cross` is the first cross-PE axis (the lower-numbered one); `slice` is
/// the remaining axis. A PE column is addressed as `(slice_index,
/// cross_index)` on these two axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnAxes {
    pub pe: usize,
    pub cross: usize,
    pub slice: usize,
}

impl ColumnAxes {
    pub fn for_pe_axis(pe_axis: usize) -> ColumnAxes {
        match pe_axis {
            0 => ColumnAxes { pe: 0, cross: 1, slice: 2 },
            1 => ColumnAxes { pe: 1, cross: 0, slice: 2 },
            2 => ColumnAxes { pe: 2, cross: 0, slice: 1 },
            a => panic!("pe_axis must be 0, 1, or 2 (got {a})"),
        }
    }
}

/// 3D scalar grid with axis metadata and a designated phase-encoding axis.
#[derive(Debug, Clone)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    pe_axis: usize,
}

impl Volume {
    /// Build a volume, validating the grid geometry and that every value is
    /// finite.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>, pe_axis: usize) -> Result<Volume> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("zero-sized dims {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!("non-positive spacing {spacing:?}")));
        }
        if pe_axis > 2 {
            return Err(Error::InvalidGeometry(format!("pe_axis {pe_axis} not in 0..=2")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::DimMismatch(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Volume { dims, spacing, data, pe_axis })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn pe_axis(&self) -> usize {
        self.pe_axis
    }

    pub fn data(&self) -> &[f64] {
        self.data
            .as_slice()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Strides of the flat layout (x fastest).
    pub fn strides(&self) -> [usize; 3] {
        [1, self.dims[0], self.dims[0] * self.dims[1]]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn column_axes(&self) -> ColumnAxes {
        ColumnAxes::for_pe_axis(self.pe_axis)
    }

    /// Extent along the PE axis.
    pub fn pe_len(&self) -> usize {
        self.dims[self.pe_axis]
    }

    /// Number of (slice, cross) column positions.
    pub fn column_grid(&self) -> (usize, usize) {
        let axes = self.column_axes();
        (self.dims[axes.slice], self.dims[axes.cross])
    }

    /// Flat index of sample 0 of the PE column at `(slice_index, cross_index)`
    /// plus the PE stride, without bounds checking beyond construction.
    pub(crate) fn column_origin_stride(&self, slice_index: usize, cross_index: usize) -> (usize, usize) {
        let axes = self.column_axes();
        let strides = self.strides();
        let origin = slice_index * strides[axes.slice] + cross_index * strides[axes.cross];
        (origin, strides[axes.pe])
    }

    /// Gather the PE column at `(slice_index, cross_index)`.
    pub fn extract_column(&self, slice_index: usize, cross_index: usize) -> Result<Vec<f64>> {
        let axes = self.column_axes();
        let (n_slices, n_cross) = self.column_grid();
        if slice_index >= n_slices || cross_index >= n_cross {
            return Err(Error::IndexOutOfRange(format!(
                "column (slice {slice_index}, cross {cross_index}) outside {n_slices}x{n_cross} grid (pe_axis {})",
                axes.pe
            )));
        }
        let (origin, stride) = self.column_origin_stride(slice_index, cross_index);
        let n = self.pe_len();
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            out.push(self.data[origin + t * stride]);
        }
        Ok(out)
    }

    /// Mean intensity over the whole grid.
    pub fn mean(&self) -> f64 {
        crate::numeric::kahan_sum(self.data.iter().copied()) / self.data.len() as f64
    }

    /// Maximum value.
    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same grid, new data.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Volume> {
        Volume::new(self.dims, self.spacing, data, self.pe_axis)
    }

    /// True when dims, spacing, and pe_axis all match.
    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.pe_axis == other.pe_axis
    }
}

/// Scatter a column back into a flat buffer; inverse of `extract_column`.
pub fn write_column(buf: &mut [f64], v: &Volume, slice_index: usize, cross_index: usize, column: &[f64]) {
    let (origin, stride) = v.column_origin_stride(slice_index, cross_index);
    for (t, &val) in column.iter().enumerate() {
        buf[origin + t * stride] = val;
    }
}

/// The two opposite-polarity volumes on a shared grid.
#[derive(Debug, Clone)]
pub struct EpiPair {
    pub plus: Volume,
    pub minus: Volume,
}

impl EpiPair {
    pub fn new(plus: Volume, minus: Volume) -> Result<EpiPair> {
        if !plus.same_grid(&minus) {
            return Err(Error::DimMismatch(format!(
                "polarity volumes disagree: dims {:?}/{:?}, spacing {:?}/{:?}, pe_axis {}/{}",
                plus.dims(),
                minus.dims(),
                plus.spacing(),
                minus.spacing(),
                plus.pe_axis(),
                minus.pe_axis()
            )));
        }
        Ok(EpiPair { plus, minus })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.plus.dims()
    }

    pub fn pe_axis(&self) -> usize {
        self.plus.pe_axis()
    }
}

/// Boolean voxel mask on a volume grid.
#[derive(Debug, Clone)]
pub struct Mask {
    pub dims: [usize; 3],
    pub inside: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], inside: Vec<bool>) -> Result<Mask> {
        if inside.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::DimMismatch(format!(
                "mask length {} does not match dims {:?}",
                inside.len(),
                dims
            )));
        }
        Ok(Mask { dims, inside })
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    /// Mask from thresholding a volume: `v > threshold`.
    pub fn from_threshold(v: &Volume, threshold: f64) -> Mask {
        Mask {
            dims: v.dims(),
            inside: v.data().iter().map(|&x| x > threshold).collect(),
        }
    }
}

const OTSU_BINS: usize = 256;

/// Otsu threshold over a 256-bin histogram of the volume's intensity range.
/// Returns the upper edge of the chosen bin, so `v > threshold` selects the
/// foreground class.
fn otsu_threshold(v: &Volume) -> Result<f64> {
    let min = v.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.max_value();
    if !(max > min) {
        return Err(Error::DegenerateIntensityRange);
    }
    let mut hist = [0u64; OTSU_BINS];
    let scale = OTSU_BINS as f64 / (max - min);
    for &x in v.data() {
        let b = (((x - min) * scale) as usize).min(OTSU_BINS - 1);
        hist[b] += 1;
    }
    let total = v.len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum::<f64>()
        / total;

    let mut best_bin = 0;
    let mut best_var = -1.0;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for (i, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64 / total;
        sum0 += i as f64 * c as f64 / total;
        if w0 <= 0.0 || w0 >= 1.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_mean - sum0) / (1.0 - w0);
        let var = w0 * (1.0 - w0) * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_bin = i;
        }
    }
    // Threshold at the upper edge of the chosen bin.
    Ok(min + (best_bin as f64 + 1.0) / scale)
}

#[inline]
fn decompose(idx: usize, nx: usize, ny: usize) -> (usize, usize, usize) {
    let z = idx / (nx * ny);
    let rem = idx % (nx * ny);
    (rem % nx, rem / nx, z)
}

/// Keep only the largest 6-connected true component.
fn largest_component(dims: [usize; 3], mask: &[bool]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut visited = vec![false; n];
    let mut best: Vec<usize> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..n {
        if !mask[start] || visited[start] {
            continue;
        }
        let mut component = Vec::new();
        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            component.push(idx);
            let (x, y, z) = decompose(idx, nx, ny);
            let mut push = |i: usize| {
                if mask[i] && !visited[i] {
                    visited[i] = true;
                    stack.push(i);
                }
            };
            if x > 0 {
                push(idx - 1);
            }
            if x + 1 < nx {
                push(idx + 1);
            }
            if y > 0 {
                push(idx - nx);
            }
            if y + 1 < ny {
                push(idx + nx);
            }
            if z > 0 {
                push(idx - nx * ny);
            }
            if z + 1 < nz {
                push(idx + nx * ny);
            }
        }
        if component.len() > best.len() {
            best = component;
        }
    }
    let mut out = vec![false; n];
    for idx in best {
        out[idx] = true;
    }
    out
}

/// One pass of a 3x3x3 box morphological operation.
fn box_morph(dims: [usize; 3], mask: &[bool], dilate: bool) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = x + nx * (y + ny * z);
                let mut hit = !dilate;
                'outer: for dz in z.saturating_sub(1)..(z + 2).min(nz) {
                    for dy in y.saturating_sub(1)..(y + 2).min(ny) {
                        for dx in x.saturating_sub(1)..(x + 2).min(nx) {
                            let v = mask[dx + nx * (dy + ny * dz)];
                            if dilate && v {
                                hit = true;
                                break 'outer;
                            }
                            if !dilate && !v {
                                hit = false;
                                break 'outer;
                            }
                        }
                    }
                }
                out[idx] = hit;
            }
        }
    }
    out
}

/// Automatic foreground mask: Otsu threshold, largest 6-connected component,
/// one pass of 3x3x3 morphological closing. Deterministic; invariant under
/// positive affine intensity rescaling.
pub fn auto_mask(v: &Volume) -> Result<Mask> {
    let threshold = otsu_threshold(v)?;
    let raw: Vec<bool> = v.data().iter().map(|&x| x > threshold).collect();
    let component = largest_component(v.dims(), &raw);
    let closed = box_morph(v.dims(), &box_morph(v.dims(), &component, true), false);
    Mask::new(v.dims(), closed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_index_volume(n: usize, pe_axis: usize) -> Volume {
        let data: Vec<f64> = (0..n * n * n).map(|i| i as f64).collect();
        Volume::new([n, n, n], [1.0, 1.0, 1.0], data, pe_axis).unwrap()
    }

    #[test]
    fn extract_column_linear_index() {
        let v = linear_index_volume(3, 0);
        assert_eq!(v.extract_column(0, 0).unwrap(), vec![0.0, 1.0, 2.0]);
        // pe_axis = 1: stride nx = 3, cross axis is x, slice axis is z.
        let v = linear_index_volume(3, 1);
        assert_eq!(v.extract_column(0, 1).unwrap(), vec![1.0, 4.0, 7.0]);
        // pe_axis = 2: stride nx*ny = 9.
        let v = linear_index_volume(3, 2);
        assert_eq!(v.extract_column(1, 2).unwrap(), vec![5.0, 14.0, 23.0]);
    }

    #[test]
    fn extract_column_constant() {
        let v = Volume::new([4, 3, 2], [1.0, 1.0, 1.0], vec![7.5; 24], 1).unwrap();
        assert_eq!(v.extract_column(1, 3).unwrap(), vec![7.5, 7.5, 7.5]);
    }

    #[test]
    fn extract_column_matches_triple_loop_gather() {
        // Brute-force per-voxel gather oracle on a pseudo-random 4x4x4 volume.
        let n = 4;
        let data: Vec<f64> = (0..n * n * n)
            .map(|i| ((i as f64 * 12.9898).sin() * 43758.5453).fract())
            .collect();
        for pe_axis in 0..3 {
            let v = Volume::new([n, n, n], [1.0, 1.0, 1.0], data.clone(), pe_axis).unwrap();
            let axes = v.column_axes();
            let (n_slices, n_cross) = v.column_grid();
            for s in 0..n_slices {
                for c in 0..n_cross {
                    let col = v.extract_column(s, c).unwrap();
                    for t in 0..v.pe_len() {
                        let mut coord = [0usize; 3];
                        coord[axes.pe] = t;
                        coord[axes.cross] = c;
                        coord[axes.slice] = s;
                        let mut expected = f64::NAN;
                        for z in 0..n {
                            for y in 0..n {
                                for x in 0..n {
                                    if [x, y, z] == coord {
                                        expected = v.at(x, y, z);
                                    }
                                }
                            }
                        }
                        assert_eq!(col[t], expected);
                    }
                }
            }
        }
    }

    #[test]
    fn extract_column_out_of_range() {
        let v = linear_index_volume(3, 0);
        assert!(v.extract_column(3, 0).is_err());
        assert!(v.extract_column(0, 3).is_err());
    }

    #[test]
    fn extract_then_scatter_is_identity() {
        let v = linear_index_volume(4, 1);
        let mut buf = vec![0.0; v.len()];
        let (n_slices, n_cross) = v.column_grid();
        for s in 0..n_slices {
            for c in 0..n_cross {
                let col = v.extract_column(s, c).unwrap();
                write_column(&mut buf, &v, s, c, &col);
            }
        }
        assert_eq!(buf, v.data());
    }

    #[test]
    fn volume_rejects_bad_input() {
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![], 0).is_err());
        assert!(Volume::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8], 0).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7], 0).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![f64::NAN; 8], 0).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 8], 3).is_err());
    }

    #[test]
    fn pair_requires_matching_grid() {
        let a = linear_index_volume(3, 0);
        let b = linear_index_volume(3, 1);
        assert!(EpiPair::new(a.clone(), b).is_err());
        assert!(EpiPair::new(a.clone(), a).is_ok());
    }

    fn ball_volume(n: usize, radius: f64, value: f64) -> (Volume, Vec<bool>) {
        let c = (n as f64 - 1.0) / 2.0;
        let mut data = vec![0.0; n * n * n];
        let mut membership = vec![false; n * n * n];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                    if d2.sqrt() <= radius {
                        data[x + n * (y + n * z)] = value;
                        membership[x + n * (y + n * z)] = true;
                    }
                }
            }
        }
        (Volume::new([n, n, n], [1.0; 3], data, 0).unwrap(), membership)
    }

    #[test]
    fn auto_mask_recovers_ball_within_one_voxel() {
        let n = 24;
        let (v, ball) = ball_volume(n, 8.0, 100.0);
        let mask = auto_mask(&v).unwrap();
        // Analytic ball membership oracle with a one-voxel dilation tolerance.
        let dilated = box_morph([n, n, n], &ball, true);
        let eroded = box_morph([n, n, n], &ball, false);
        for i in 0..mask.inside.len() {
            if mask.inside[i] {
                assert!(dilated[i], "masked voxel {i} outside dilated ball");
            }
            if eroded[i] {
                assert!(mask.inside[i], "eroded-ball voxel {i} missing from mask");
            }
        }
    }

    #[test]
    fn auto_mask_all_zero_errors() {
        let v = Volume::new([4, 4, 4], [1.0; 3], vec![0.0; 64], 0).unwrap();
        assert!(matches!(auto_mask(&v), Err(Error::DegenerateIntensityRange)));
    }

    #[test]
    fn auto_mask_keeps_largest_component_only() {
        // Two bright boxes: 5x5x4 = 100 voxels and 10 voxels; only the large
        // one survives. Connected-component oracle is the box membership.
        let n = 16;
        let mut data = vec![0.0; n * n * n];
        let mut large = vec![false; n * n * n];
        for z in 1..5 {
            for y in 1..6 {
                for x in 1..6 {
                    data[x + n * (y + n * z)] = 100.0;
                    large[x + n * (y + n * z)] = true;
                }
            }
        }
        let mut small_count = 0;
        for z in 10..11 {
            for y in 10..12 {
                for x in 10..15 {
                    data[x + n * (y + n * z)] = 100.0;
                    small_count += 1;
                }
            }
        }
        assert_eq!(small_count, 10);
        let v = Volume::new([n, n, n], [1.0; 3], data, 0).unwrap();
        let mask = auto_mask(&v).unwrap();
        for z in 9..13 {
            for y in 9..13 {
                for x in 9..16 {
                    assert!(
                        !mask.inside[x + n * (y + n * z)],
                        "small component voxel ({x},{y},{z}) retained"
                    );
                }
            }
        }
        // The large box interior must be present.
        assert!(mask.inside[3 + n * (3 + n * 2)]);
    }

    #[test]
    fn auto_mask_invariant_under_positive_affine_rescale() {
        // Integer-valued intensities keep the affine arithmetic exact, so the
        // Otsu bin assignment (and hence the voxel set) is identical.
        let n = 12;
        let (v, _) = ball_volume(n, 4.0, 200.0);
        let rescaled: Vec<f64> = v.data().iter().map(|&x| 2.0 * x + 10.0).collect();
        let w = v.with_data(rescaled).unwrap();
        let ma = auto_mask(&v).unwrap();
        let mb = auto_mask(&w).unwrap();
        assert_eq!(ma.inside, mb.inside);
    }
}
