//! Minimal DICOM Part-10 reader for explicit-VR little-endian,
//! uncompressed image series, plus an encoder for the same subset.
//!
//! Only the geometry tags are read; everything else, including patient
//! identifiers, is skipped without being stored.

use super::{Dtype, Orientation, Result, Volume3D, VolioError};

pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";

const ROWS: (u16, u16) = (0x0028, 0x0010);
const COLS: (u16, u16) = (0x0028, 0x0011);
const INSTANCE: (u16, u16) = (0x0020, 0x0013);
const POSITION: (u16, u16) = (0x0020, 0x0032);
const ORIENTATION: (u16, u16) = (0x0020, 0x0037);
const PIXEL_SPACING: (u16, u16) = (0x0028, 0x0030);
const THICKNESS: (u16, u16) = (0x0018, 0x0050);
const BITS_ALLOCATED: (u16, u16) = (0x0028, 0x0100);
const PIXEL_REPR: (u16, u16) = (0x0028, 0x0103);
const PIXEL_DATA: (u16, u16) = (0x7fe0, 0x0010);
const TRANSFER_SYNTAX: (u16, u16) = (0x0002, 0x0010);

const ITEM: (u16, u16) = (0xfffe, 0xe000);
const ITEM_END: (u16, u16) = (0xfffe, 0xe00d);
const SEQ_END: (u16, u16) = (0xfffe, 0xe0dd);
const UNDEFINED: u32 = 0xffff_ffff;

#[derive(Clone, Debug, PartialEq)]
pub struct DicomSlice {
    pub rows: usize,
    pub cols: usize,
    pub instance_number: i64,
    pub image_position: Option<[f64; 3]>,
    /// Row then column direction cosines, LPS.
    pub image_orientation: Option<[f64; 6]>,
    /// (row spacing, column spacing) in mm.
    pub pixel_spacing: [f64; 2],
    pub slice_thickness: Option<f64>,
    pub bits_allocated: u16,
    pub signed: bool,
    pub pixel_data: Vec<f32>,
}

pub fn is_dicom(bytes: &[u8]) -> bool {
    bytes.len() >= 132 && &bytes[128..132] == b"DICM"
}

fn malformed<T>(msg: impl Into<String>) -> Result<T> {
    Err(VolioError::MalformedDicom(msg.into()))
}

fn long_form(vr: &[u8; 2]) -> bool {
    matches!(vr, b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR" | b"UT" | b"UV")
}

struct Element<'a> {
    tag: (u16, u16),
    vr: [u8; 2],
    value: Option<&'a [u8]>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u16(&mut self) -> Result<u16> {
        let s = self.take(2)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            return malformed("element runs past end of stream");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    /// Reads one element; undefined-length sequences are skipped and yield
    /// `value: None`.
    fn element(&mut self) -> Result<Element<'a>> {
        let tag = (self.u16()?, self.u16()?);
        if tag.0 == 0xfffe {
            let len = self.u32()?;
            let value = if len == UNDEFINED { None } else { Some(self.take(len as usize)?) };
            return Ok(Element { tag, vr: *b"  ", value });
        }
        let vr: [u8; 2] = self.take(2)?.try_into().expect("2 bytes");
        let len = if long_form(&vr) {
            self.take(2)?;
            self.u32()?
        } else {
            self.u16()? as u32
        };
        if len == UNDEFINED {
            if tag == PIXEL_DATA {
                return Err(VolioError::UnsupportedTransferSyntax("encapsulated pixel data".into()));
            }
            self.skip_undefined_sequence()?;
            return Ok(Element { tag, vr, value: None });
        }
        Ok(Element { tag, vr, value: Some(self.take(len as usize)?) })
    }

    fn skip_undefined_sequence(&mut self) -> Result<()> {
        loop {
            let e = self.element()?;
            match e.tag {
                SEQ_END => return Ok(()),
                ITEM if e.value.is_none() => self.skip_undefined_item()?,
                ITEM => {}
                other => return malformed(format!("unexpected {other:04x?} inside sequence")),
            }
        }
    }

    fn skip_undefined_item(&mut self) -> Result<()> {
        loop {
            if self.element()?.tag == ITEM_END {
                return Ok(());
            }
        }
    }
}

fn text(v: &[u8]) -> String {
    String::from_utf8_lossy(v).trim_matches(|c: char| c == '\0' || c.is_whitespace()).to_string()
}

fn decimals(v: &[u8]) -> Result<Vec<f64>> {
    text(v)
        .split('\\')
        .map(|s| s.trim().parse::<f64>().or_else(|_| malformed(format!("bad decimal string {s:?}"))))
        .collect()
}

fn us(v: &[u8]) -> Result<u16> {
    match v {
        [a, b, ..] => Ok(u16::from_le_bytes([*a, *b])),
        _ => malformed("short US value"),
    }
}

pub fn read_dicom_slice(bytes: &[u8]) -> Result<DicomSlice> {
    if !is_dicom(bytes) {
        return Err(VolioError::NotDicom);
    }
    let mut c = Cursor { buf: bytes, pos: 132 };
    let mut rows = None;
    let mut cols = None;
    let mut instance_number = 0;
    let mut image_position = None;
    let mut image_orientation = None;
    let mut pixel_spacing = [1.0, 1.0];
    let mut slice_thickness = None;
    let mut bits_allocated = 16;
    let mut signed = false;
    let mut pixels = None;
    let mut syntax = None;
    // The file meta group is always explicit VR little endian.
    while c.buf.len() - c.pos >= 2 && u16::from_le_bytes([c.buf[c.pos], c.buf[c.pos + 1]]) == 0x0002 {
        let e = c.element()?;
        if let (TRANSFER_SYNTAX, Some(v)) = (e.tag, e.value) {
            syntax = Some(text(v));
        }
    }
    match syntax.as_deref() {
        Some(EXPLICIT_VR_LE) => {}
        Some(other) => return Err(VolioError::UnsupportedTransferSyntax(other.to_string())),
        None => return malformed("no transfer syntax in file meta"),
    }
    while !c.done() {
        let e = c.element()?;
        let Some(v) = e.value else { continue };
        match e.tag {
            ROWS => rows = Some(us(v)? as usize),
            COLS => cols = Some(us(v)? as usize),
            INSTANCE => instance_number = text(v).parse::<i64>().unwrap_or(0),
            POSITION => {
                if let [x, y, z] = decimals(v)?[..] {
                    image_position = Some([x, y, z]);
                }
            }
            ORIENTATION => {
                if let Ok(d) = <[f64; 6]>::try_from(decimals(v)?) {
                    image_orientation = Some(d);
                }
            }
            PIXEL_SPACING => {
                if let [r, col] = decimals(v)?[..] {
                    pixel_spacing = [r, col];
                }
            }
            THICKNESS => slice_thickness = decimals(v)?.first().copied(),
            BITS_ALLOCATED => bits_allocated = us(v)?,
            PIXEL_REPR => signed = us(v)? == 1,
            PIXEL_DATA => pixels = Some((v, e.vr)),
            _ => {}
        }
    }
    let (Some(rows), Some(cols)) = (rows, cols) else {
        return malformed("missing rows/columns");
    };
    let Some((raw, _)) = pixels else {
        return malformed("missing pixel data");
    };
    let n = rows * cols;
    let pixel_data: Vec<f32> = match (bits_allocated, signed) {
        (8, false) if raw.len() >= n => raw[..n].iter().map(|&b| b as f32).collect(),
        (8, true) if raw.len() >= n => raw[..n].iter().map(|&b| b as i8 as f32).collect(),
        (16, s) if raw.len() >= 2 * n => raw[..2 * n]
            .chunks_exact(2)
            .map(|p| if s { i16::from_le_bytes([p[0], p[1]]) as f32 } else { u16::from_le_bytes([p[0], p[1]]) as f32 })
            .collect(),
        (8 | 16, _) => return malformed(format!("pixel data holds {} bytes for {rows}x{cols}", raw.len())),
        (b, _) => return malformed(format!("unsupported bits allocated {b}")),
    };
    Ok(DicomSlice {
        rows,
        cols,
        instance_number,
        image_position,
        image_orientation,
        pixel_spacing,
        slice_thickness,
        bits_allocated,
        signed,
        pixel_data,
    })
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

/// Parses and stacks one series. The result does not depend on file order.
pub fn read_dicom_series(files: &[&[u8]]) -> Result<Volume3D> {
    let mut slices = files.iter().map(|f| read_dicom_slice(f)).collect::<Result<Vec<_>>>()?;
    let Some(first) = slices.first().cloned() else {
        return Err(VolioError::EmptySeries);
    };
    let (rows, cols, ps, bits, signed) = (first.rows, first.cols, first.pixel_spacing, first.bits_allocated, first.signed);
    for s in &slices {
        if s.rows != rows || s.cols != cols {
            return Err(VolioError::MixedSeries(format!("{}x{} slice among {}x{}", s.rows, s.cols, rows, cols)));
        }
        if s.pixel_spacing != ps {
            return Err(VolioError::MixedSeries(format!("pixel spacing {:?} among {:?}", s.pixel_spacing, ps)));
        }
        if s.bits_allocated != bits || s.signed != signed {
            return Err(VolioError::MixedSeries("pixel format differs between slices".into()));
        }
    }
    let orient = first.image_orientation.unwrap_or([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let row_dir = [orient[0], orient[1], orient[2]];
    let col_dir = [orient[3], orient[4], orient[5]];
    let normal = cross(row_dir, col_dir);
    let by_position = slices.iter().all(|s| s.image_position.is_some());
    let key = |s: &DicomSlice| if by_position { dot(s.image_position.expect("checked"), normal) } else { 0.0 };
    slices.sort_by(|a, b| {
        key(a)
            .total_cmp(&key(b))
            .then(a.instance_number.cmp(&b.instance_number))
            .then_with(|| a.pixel_data.iter().map(|v| v.to_bits()).cmp(b.pixel_data.iter().map(|v| v.to_bits())))
    });

    let gap = if by_position && slices.len() > 1 {
        let d = (key(&slices[slices.len() - 1]) - key(&slices[0])) / (slices.len() - 1) as f64;
        Some(d.abs())
    } else {
        None
    };
    let sz = gap.filter(|&g| g > 0.0).or(first.slice_thickness).filter(|&t| t > 0.0).unwrap_or(1.0);
    let positive = |v: f64| if v > 0.0 && v.is_finite() { v } else { 1.0 };
    let dims = [cols, rows, slices.len()];
    let spacing = [positive(ps[1]), positive(ps[0]), sz];
    let dtype = match (bits, signed) {
        (8, _) => Dtype::U8,
        (_, true) => Dtype::I16,
        _ => Dtype::U16,
    };
    let orientation = Orientation::from_lps_columns([row_dir, col_dir, normal]);
    let data = slices.into_iter().flat_map(|s| s.pixel_data).collect();
    Ok(Volume3D { dims, spacing, orientation, dtype, data })
}

fn put_element(out: &mut Vec<u8>, tag: (u16, u16), vr: &[u8; 2], value: &[u8]) {
    let mut value = value.to_vec();
    if value.len() % 2 == 1 {
        value.push(if matches!(vr, b"OB" | b"UI") { 0 } else { b' ' });
    }
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(vr);
    if long_form(vr) {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(&value);
}

fn ds(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join("\\").into_bytes()
}

/// Encodes a slice as an explicit-VR little-endian Part-10 stream with
/// 16-bit pixels (8-bit when `bits_allocated == 8`).
pub fn encode_dicom_slice(s: &DicomSlice) -> Vec<u8> {
    let mut body = Vec::new();
    put_element(&mut body, (0x0008, 0x0060), b"CS", b"MR");
    if let Some(t) = s.slice_thickness {
        put_element(&mut body, THICKNESS, b"DS", &ds(&[t]));
    }
    put_element(&mut body, INSTANCE, b"IS", s.instance_number.to_string().as_bytes());
    if let Some(p) = s.image_position {
        put_element(&mut body, POSITION, b"DS", &ds(&p));
    }
    if let Some(o) = s.image_orientation {
        put_element(&mut body, ORIENTATION, b"DS", &ds(&o));
    }
    put_element(&mut body, ROWS, b"US", &(s.rows as u16).to_le_bytes());
    put_element(&mut body, COLS, b"US", &(s.cols as u16).to_le_bytes());
    put_element(&mut body, PIXEL_SPACING, b"DS", &ds(&s.pixel_spacing));
    let bits = if s.bits_allocated == 8 { 8u16 } else { 16 };
    put_element(&mut body, BITS_ALLOCATED, b"US", &bits.to_le_bytes());
    put_element(&mut body, (0x0028, 0x0101), b"US", &bits.to_le_bytes());
    put_element(&mut body, PIXEL_REPR, b"US", &(s.signed as u16).to_le_bytes());
    let pixels: Vec<u8> = if bits == 8 {
        s.pixel_data.iter().map(|&v| v.round() as i64 as u8).collect()
    } else if s.signed {
        s.pixel_data.iter().flat_map(|&v| (v.round() as i16).to_le_bytes()).collect()
    } else {
        s.pixel_data.iter().flat_map(|&v| (v.round() as u16).to_le_bytes()).collect()
    };
    put_element(&mut body, PIXEL_DATA, if bits == 8 { b"OB" } else { b"OW" }, &pixels);

    let mut meta = Vec::new();
    put_element(&mut meta, (0x0002, 0x0001), b"OB", &[0, 1]);
    put_element(&mut meta, TRANSFER_SYNTAX, b"UI", EXPLICIT_VR_LE.as_bytes());
    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    put_element(&mut out, (0x0002, 0x0000), b"UL", &(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&body);
    out
}

/// Splits a canonical volume into axial slices (z = slice index).
pub fn volume_to_slices(v: &Volume3D) -> Vec<DicomSlice> {
    let [nx, ny, nz] = v.dims;
    (0..nz)
        .map(|k| DicomSlice {
            rows: ny,
            cols: nx,
            instance_number: k as i64 + 1,
            image_position: Some([0.0, 0.0, k as f64 * v.spacing[2]]),
            image_orientation: Some([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            pixel_spacing: [v.spacing[1], v.spacing[0]],
            slice_thickness: Some(v.spacing[2]),
            bits_allocated: 16,
            signed: v.data.iter().any(|&x| x < 0.0),
            pixel_data: v.data[k * nx * ny..(k + 1) * nx * ny].to_vec(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(nx: usize, ny: usize, nz: usize) -> Vec<Vec<u8>> {
        let data = (0..nx * ny * nz).map(|i| (i % 1000) as f32).collect();
        let v = Volume3D::new([nx, ny, nz], [0.9, 0.8, 2.5], data).unwrap();
        volume_to_slices(&v).iter().map(encode_dicom_slice).collect()
    }

    fn refs(files: &[Vec<u8>]) -> Vec<&[u8]> {
        files.iter().map(|f| f.as_slice()).collect()
    }

    #[test]
    fn stack_geometry() {
        let files = series(5, 4, 3);
        let v = read_dicom_series(&refs(&files)).unwrap();
        assert_eq!(v.dims, [5, 4, 3]);
        assert_eq!(v.spacing, [0.9, 0.8, 2.5]);
        assert!(v.orientation.is_identity());
        assert_eq!(v.dtype, Dtype::U16);
        assert_eq!(v.get(2, 1, 2), ((2 + 5 * (1 + 4 * 2)) % 1000) as f32);
    }

    #[test]
    fn reversed_order_gives_same_volume() {
        let files = series(3, 3, 6);
        let mut rev = refs(&files);
        rev.reverse();
        assert_eq!(read_dicom_series(&rev).unwrap(), read_dicom_series(&refs(&files)).unwrap());
    }

    #[test]
    fn instance_number_fallback() {
        let v = Volume3D::new([2, 2, 3], [1.0; 3], (0..12).map(|i| i as f32).collect()).unwrap();
        let mut slices = volume_to_slices(&v);
        for s in &mut slices {
            s.image_position = None;
        }
        let mut files: Vec<Vec<u8>> = slices.iter().map(encode_dicom_slice).collect();
        files.swap(0, 2);
        let back = read_dicom_series(&refs(&files)).unwrap();
        assert_eq!(back.data, v.data);
    }

    #[test]
    fn mixed_rows_rejected() {
        let mut files = series(4, 4, 3);
        files.push(series(4, 8, 1).remove(0));
        assert!(matches!(read_dicom_series(&refs(&files)), Err(VolioError::MixedSeries(_))));
    }

    #[test]
    fn not_dicom_and_other_syntax() {
        assert_eq!(read_dicom_slice(&[0u8; 200]), Err(VolioError::NotDicom));
        let f = series(2, 2, 1).remove(0);
        let text = String::from_utf8_lossy(&f).into_owned();
        let at = text.find(EXPLICIT_VR_LE).unwrap();
        let mut jpeg = f.clone();
        jpeg[at..at + 19].copy_from_slice(b"1.2.840.10008.1.2.4");
        assert!(matches!(read_dicom_slice(&jpeg), Err(VolioError::UnsupportedTransferSyntax(_))));
    }

    #[test]
    fn undefined_length_sequence_is_skipped() {
        let f = series(2, 2, 1).remove(0);
        let mut seq = Vec::new();
        seq.extend_from_slice(&0x0008u16.to_le_bytes());
        seq.extend_from_slice(&0x1140u16.to_le_bytes());
        seq.extend_from_slice(b"SQ\0\0");
        seq.extend_from_slice(&UNDEFINED.to_le_bytes());
        seq.extend_from_slice(&[0xfe, 0xff, 0x00, 0xe0]);
        seq.extend_from_slice(&UNDEFINED.to_le_bytes());
        put_element(&mut seq, (0x0010, 0x0010), b"PN", b"Doe^Jane");
        seq.extend_from_slice(&[0xfe, 0xff, 0x0d, 0xe0, 0, 0, 0, 0]);
        seq.extend_from_slice(&[0xfe, 0xff, 0xdd, 0xe0, 0, 0, 0, 0]);
        // insert just after the file meta group
        let meta_len = u32::from_le_bytes(f[140..144].try_into().unwrap()) as usize;
        let split = 144 + meta_len;
        let mut g = f[..split].to_vec();
        g.extend_from_slice(&seq);
        g.extend_from_slice(&f[split..]);
        assert_eq!(read_dicom_slice(&g).unwrap(), read_dicom_slice(&f).unwrap());
    }
}
