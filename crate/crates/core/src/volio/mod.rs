//! Scalar 3D volumes and their on-disk formats.

pub mod dicom;
pub mod nifti;

pub use dicom::{encode_dicom_slice, read_dicom_series, read_dicom_slice, volume_to_slices, DicomSlice};
pub use nifti::{read_nifti, write_nifti, write_nifti_gz};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VolioError {
    #[error("not a single-file NIfTI-1 payload")]
    BadMagic,
    #[error("invalid NIfTI header: {0}")]
    BadHeader(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated voxel data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("gzip stream is corrupt: {0}")]
    Gzip(String),
    #[error("missing DICM marker")]
    NotDicom,
    #[error("slices do not form one series: {0}")]
    MixedSeries(String),
    #[error("unsupported transfer syntax {0}")]
    UnsupportedTransferSyntax(String),
    #[error("malformed DICOM stream: {0}")]
    MalformedDicom(String),
    #[error("empty DICOM series")]
    EmptySeries,
    #[error("volume geometry: {0}")]
    Geometry(String),
}

pub type Result<T> = std::result::Result<T, VolioError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Dtype {
    U8,
    I16,
    U16,
    #[default]
    F32,
}

/// Storage axis `i` runs along canonical axis `perm[i]`, reversed when
/// `flip[i]`. Canonical axes are voxel x→left, y→posterior, z→superior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Orientation {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl Orientation {
    pub const IDENTITY: Orientation = Orientation { perm: [0, 1, 2], flip: [false; 3] };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Nearest axis-aligned orientation of three direction columns given in
    /// LPS. Falls back to the identity when the columns do not select three
    /// distinct axes.
    pub fn from_lps_columns(cols: [[f64; 3]; 3]) -> Self {
        let mut perm = [0; 3];
        let mut flip = [false; 3];
        for (i, c) in cols.iter().enumerate() {
            let a = (0..3).max_by(|&p, &q| c[p].abs().total_cmp(&c[q].abs())).expect("three axes");
            if c[a] == 0.0 || !c[a].is_finite() {
                return Self::IDENTITY;
            }
            perm[i] = a;
            flip[i] = c[a] < 0.0;
        }
        if perm[0] == perm[1] || perm[1] == perm[2] || perm[0] == perm[2] {
            return Self::IDENTITY;
        }
        Self { perm, flip }
    }
}

impl Default for Orientation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// One scalar volume, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub orientation: Orientation,
    pub dtype: Dtype,
    pub data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let v = Self { dims, spacing, orientation: Orientation::IDENTITY, dtype: Dtype::F32, data };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            orientation: Orientation::IDENTITY,
            dtype: Dtype::F32,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.dims.iter().product();
        if self.data.len() != n {
            return Err(VolioError::Geometry(format!("{} values for dims {:?}", self.data.len(), self.dims)));
        }
        if self.dims.contains(&0) {
            return Err(VolioError::Geometry("zero-length axis".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolioError::Geometry(format!("spacing {:?} must be positive", self.spacing)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims
    }

    /// Copy with the same geometry and new values.
    pub fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self { dims: self.dims, spacing: self.spacing, orientation: self.orientation, dtype: Dtype::F32, data }
    }
}

/// Reorders voxels into canonical orientation and marks the volume `f32`.
pub fn canonicalize(v: &Volume3D) -> Volume3D {
    if v.orientation.is_identity() {
        return Volume3D { dtype: Dtype::F32, ..v.clone() };
    }
    let Orientation { perm, flip } = v.orientation;
    let mut dims = [0; 3];
    let mut spacing = [0.0; 3];
    for i in 0..3 {
        dims[perm[i]] = v.dims[i];
        spacing[perm[i]] = v.spacing[i];
    }
    let mut data = vec![0.0; v.data.len()];
    let mut src = 0;
    for k in 0..v.dims[2] {
        for j in 0..v.dims[1] {
            for i in 0..v.dims[0] {
                let mut c = [0; 3];
                for (a, idx) in [i, j, k].into_iter().enumerate() {
                    c[perm[a]] = if flip[a] { v.dims[a] - 1 - idx } else { idx };
                }
                data[c[0] + dims[0] * (c[1] + dims[1] * c[2])] = v.data[src];
                src += 1;
            }
        }
    }
    Volume3D { dims, spacing, orientation: Orientation::IDENTITY, dtype: Dtype::F32, data }
}

/// Reads one volume from uploaded files: a single non-DICOM file is parsed
/// as NIfTI, anything else as one DICOM series.
pub fn read_any(files: &[&[u8]]) -> Result<Volume3D> {
    match files {
        [] => Err(VolioError::EmptySeries),
        [one] if !dicom::is_dicom(one) => read_nifti(one),
        many => read_dicom_series(many),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume3D {
        let n = dims.iter().product();
        Volume3D::new(dims, [1.0, 2.0, 3.0], (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn canonical_is_bitwise_unchanged() {
        let v = ramp([3, 4, 5]);
        assert_eq!(canonicalize(&v), v);
        assert_eq!(canonicalize(&canonicalize(&v)), canonicalize(&v));
    }

    #[test]
    fn z_flip_reverses_slices() {
        let mut v = ramp([3, 4, 5]);
        v.orientation.flip[2] = true;
        let c = canonicalize(&v);
        for k in 0..5 {
            for j in 0..4 {
                for i in 0..3 {
                    assert_eq!(c.get(i, j, k), v.get(i, j, 4 - k));
                }
            }
        }
        assert!(c.orientation.is_identity());
        assert_eq!(canonicalize(&c), c);
    }

    #[test]
    fn permuted_axes_move_dims_and_spacing() {
        let mut v = ramp([2, 3, 4]);
        v.orientation.perm = [2, 0, 1];
        v.dtype = Dtype::I16;
        let c = canonicalize(&v);
        assert_eq!(c.dims, [3, 4, 2]);
        assert_eq!(c.spacing, [2.0, 3.0, 1.0]);
        assert_eq!(c.dtype, Dtype::F32);
        // storage (i, j, k) lands at canonical (j, k, i)
        assert_eq!(c.get(1, 3, 0), v.get(0, 1, 3));
    }

    #[test]
    fn orientation_from_directions() {
        let o = Orientation::from_lps_columns([[0.0, -1.0, 0.0], [0.9, 0.1, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(o.perm, [1, 0, 2]);
        assert_eq!(o.flip, [true, false, false]);
        let degenerate = Orientation::from_lps_columns([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(degenerate.is_identity());
    }
}
