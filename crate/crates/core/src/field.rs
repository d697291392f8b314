//! Phase-encoding displacement fields.

use crate::error::{Error, Result};
use crate::volume::ColumnAxes;

/// Whether a field is the raw per-column estimate or a regularized one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Raw,
    Regularized,
}

/// Per-voxel displacement along the PE axis, in voxel units.
///
/// `validity` marks voxels whose column carried enough mass for the
/// transport estimate; invalid columns hold u = 0.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    pub dims: [usize; 3],
    pub pe_axis: usize,
    pub u: Vec<f64>,
    pub validity: Vec<bool>,
    pub kind: FieldKind,
}

impl DisplacementField {
    pub fn new(
        dims: [usize; 3],
        pe_axis: usize,
        u: Vec<f64>,
        validity: Vec<bool>,
        kind: FieldKind,
    ) -> Result<DisplacementField> {
        let n = dims[0] * dims[1] * dims[2];
        if u.len() != n || validity.len() != n {
            return Err(Error::DimMismatch(format!(
                "field length {} / validity length {} do not match dims {:?}",
                u.len(),
                validity.len(),
                dims
            )));
        }
        if pe_axis > 2 {
            return Err(Error::InvalidGeometry(format!("pe_axis {pe_axis} not in 0..=2")));
        }
        if let Some(index) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(DisplacementField { dims, pe_axis, u, validity, kind })
    }

    /// Zero field on the given grid, marked fully valid.
    pub fn zeros(dims: [usize; 3], pe_axis: usize, kind: FieldKind) -> DisplacementField {
        let n = dims[0] * dims[1] * dims[2];
        DisplacementField {
            dims,
            pe_axis,
            u: vec![0.0; n],
            validity: vec![true; n],
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn column_axes(&self) -> ColumnAxes {
        ColumnAxes::for_pe_axis(self.pe_axis)
    }

    pub fn strides(&self) -> [usize; 3] {
        [1, self.dims[0], self.dims[0] * self.dims[1]]
    }

    /// L2 norm over the whole grid.
    pub fn l2_norm(&self) -> f64 {
        crate::numeric::kahan_sum(self.u.iter().map(|v| v * v)).sqrt()
    }

    pub fn same_grid(&self, other: &DisplacementField) -> bool {
        self.dims == other.dims && self.pe_axis == other.pe_axis
    }
}
