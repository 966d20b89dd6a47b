//! Single-file NIfTI-1 (`n+1`) reader and writer.

use std::io::{Read, Write};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{canonicalize, Dtype, Orientation, Result, Volume3D, VolioError};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_UINT16: i16 = 512;

#[derive(Clone, Copy)]
struct Endian {
    big: bool,
}

impl Endian {
    fn i16(self, b: &[u8], off: usize) -> i16 {
        let a = [b[off], b[off + 1]];
        if self.big { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }
    }

    fn i32(self, b: &[u8], off: usize) -> i32 {
        let a = b[off..off + 4].try_into().expect("4 bytes");
        if self.big { i32::from_be_bytes(a) } else { i32::from_le_bytes(a) }
    }

    fn u16(self, b: &[u8], off: usize) -> u16 {
        self.i16(b, off) as u16
    }

    fn f32(self, b: &[u8], off: usize) -> f32 {
        f32::from_bits(self.i32(b, off) as u32)
    }
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out).map_err(|e| VolioError::Gzip(e.to_string()))?;
    Ok(out)
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.starts_with(&[0x1f, 0x8b])
}

/// Rotation columns of the NIfTI quaternion, in RAS.
fn quaternion_columns(b: f64, c: f64, d: f64, qfac: f64) -> [[f64; 3]; 3] {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let q = if qfac < 0.0 { -1.0 } else { 1.0 };
    [[r[0][0], r[1][0], r[2][0]], [r[0][1], r[1][1], r[2][1]], [q * r[0][2], q * r[1][2], q * r[2][2]]]
}

pub fn read_nifti(bytes: &[u8]) -> Result<Volume3D> {
    let owned;
    let b = if is_gzip(bytes) {
        owned = gunzip(bytes)?;
        &owned[..]
    } else {
        bytes
    };
    if b.len() < HEADER_SIZE {
        return Err(VolioError::BadMagic);
    }
    let e = if i32::from_le_bytes(b[0..4].try_into().expect("4 bytes")) == HEADER_SIZE as i32 {
        Endian { big: false }
    } else if i32::from_be_bytes(b[0..4].try_into().expect("4 bytes")) == HEADER_SIZE as i32 {
        Endian { big: true }
    } else {
        return Err(VolioError::BadMagic);
    };
    if &b[344..348] != b"n+1\0" {
        return Err(VolioError::BadMagic);
    }

    let dim: Vec<i16> = (0..8).map(|i| e.i16(b, 40 + 2 * i)).collect();
    if !(3..=4).contains(&dim[0]) {
        return Err(VolioError::BadHeader(format!("dim[0] = {}", dim[0])));
    }
    if dim[1..=dim[0] as usize].iter().any(|&d| d < 1) {
        return Err(VolioError::BadHeader(format!("dims {:?}", &dim[1..=dim[0] as usize])));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = e.i16(b, 70);
    let (dtype, width) = match datatype {
        DT_UINT8 => (Dtype::U8, 1),
        DT_INT16 => (Dtype::I16, 2),
        DT_INT32 => (Dtype::F32, 4),
        DT_FLOAT32 => (Dtype::F32, 4),
        DT_UINT16 => (Dtype::U16, 2),
        other => return Err(VolioError::UnsupportedDatatype(other)),
    };

    let pixdim: Vec<f32> = (0..8).map(|i| e.f32(b, 76 + 4 * i)).collect();
    let mut spacing = [1.0; 3];
    for (s, &p) in spacing.iter_mut().zip(&pixdim[1..4]) {
        let p = (p as f64).abs();
        if p > 0.0 && p.is_finite() {
            *s = p;
        }
    }

    let vox_offset = e.f32(b, 108);
    if !(vox_offset >= HEADER_SIZE as f32) || !vox_offset.is_finite() {
        return Err(VolioError::BadHeader(format!("vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    // Only the first volume of a 4D series is read.
    let n: usize = dims.iter().product();
    let need = n * width;
    let found = b.len().saturating_sub(start);
    if found < need {
        return Err(VolioError::TruncatedData { expected: need, found });
    }
    let raw = &b[start..start + need];
    let mut data: Vec<f32> = match datatype {
        DT_UINT8 => raw.iter().map(|&v| v as f32).collect(),
        DT_INT16 => (0..n).map(|i| e.i16(raw, 2 * i) as f32).collect(),
        DT_UINT16 => (0..n).map(|i| e.u16(raw, 2 * i) as f32).collect(),
        DT_INT32 => (0..n).map(|i| e.i32(raw, 4 * i) as f32).collect(),
        _ => (0..n).map(|i| e.f32(raw, 4 * i)).collect(),
    };

    let slope = e.f32(b, 112);
    let inter = e.f32(b, 116);
    let scaled = slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0);
    if scaled {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }

    let qform_code = e.i16(b, 252);
    let sform_code = e.i16(b, 254);
    let ras_cols = if sform_code > 0 {
        let row = |off: usize| [e.f32(b, off) as f64, e.f32(b, off + 4) as f64, e.f32(b, off + 8) as f64];
        let (x, y, z) = (row(280), row(296), row(312));
        Some([[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]])
    } else if qform_code > 0 {
        let q = |off| e.f32(b, off) as f64;
        Some(quaternion_columns(q(256), q(260), q(264), pixdim[0] as f64))
    } else {
        None
    };
    let orientation = ras_cols.map_or(Orientation::IDENTITY, |cols| {
        Orientation::from_lps_columns(cols.map(|c| [-c[0], -c[1], c[2]]))
    });

    Ok(Volume3D { dims, spacing, orientation, dtype: if scaled { Dtype::F32 } else { dtype }, data })
}

/// Encodes `v` in canonical orientation. `U8` volumes (label maps) are
/// stored as `uint8` after rounding; everything else as `float32`.
pub fn write_nifti(v: &Volume3D) -> Vec<u8> {
    let label = v.dtype == Dtype::U8;
    let v = canonicalize(v);
    let (datatype, bitpix) = if label { (DT_UINT8, 8i16) } else { (DT_FLOAT32, 32) };
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, x: i16| h[off..off + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, x: f32| h[off..off + 4].copy_from_slice(&x.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dim = [3, v.dims[0] as i16, v.dims[1] as i16, v.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    let [sx, sy, sz] = v.spacing.map(|s| s as f32);
    for (i, p) in [1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0].iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // millimetres
    h[148..156].copy_from_slice(b"gliopipe");
    // Canonical LPS is RAS diag(-1, -1, 1): a half turn about z.
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    put_f32(&mut h, 264, 1.0);
    put_f32(&mut h, 280, -sx);
    put_f32(&mut h, 296 + 4, -sy);
    put_f32(&mut h, 312 + 8, sz);
    h[344..348].copy_from_slice(b"n+1\0");

    if label {
        h.extend(v.data.iter().map(|&x| x.round().clamp(0.0, 255.0) as u8));
    } else {
        h.reserve(4 * v.data.len());
        for x in &v.data {
            h.extend_from_slice(&x.to_le_bytes());
        }
    }
    h
}

pub fn write_nifti_gz(v: &Volume3D) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(&write_nifti(v)).expect("in-memory write");
    enc.finish().expect("in-memory write")
}
