//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GPCK" | u32 version | u32 len + UTF-8 descriptor
//!        | u32 param_count | per param: u32 numel + f32 values
//!        | u8 has_optimizer | [u32 len + UTF-8 optimizer header | per param: m blob (+ v blob for Adam)]
//!        | u32 CRC32 of everything before it
//! ```
//!
//! The descriptor is line-oriented text: `arch <name>`, `config <json>`,
//! `meta <key> <value>` and one `param <name> <dims...>` line per tensor,
//! in layer order.

use std::collections::BTreeMap;

use super::{OptimKind, OptimState, Param, Real, Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"GPCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSnapshot {
    pub kind: OptimKind,
    pub lr: f64,
    pub step_count: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimSnapshot {
    pub fn capture<T: Real>(state: &OptimState<T>) -> Self {
        let conv = |b: &Vec<Vec<T>>| b.iter().map(|v| v.iter().map(|x| x.as_f64() as f32).collect()).collect();
        Self { kind: state.kind, lr: state.lr, step_count: state.step_count, m: conv(&state.m), v: conv(&state.v) }
    }

    pub fn restore<T: Real>(&self) -> OptimState<T> {
        let conv = |b: &Vec<Vec<f32>>| b.iter().map(|v| v.iter().map(|&x| T::lit(x as f64)).collect()).collect();
        OptimState { kind: self.kind, lr: self.lr, step_count: self.step_count, m: conv(&self.m), v: conv(&self.v) }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    /// Architecture configuration as JSON.
    pub config: String,
    pub meta: BTreeMap<String, String>,
    pub params: Vec<ParamBlob>,
    pub optimizer: Option<OptimSnapshot>,
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::BadCheckpoint(msg.into()))
}

impl Checkpoint {
    pub fn from_params<'a, T: Real + 'a>(
        arch: &str,
        config: String,
        params: impl IntoIterator<Item = &'a Param<T>>,
    ) -> Self {
        let params = params
            .into_iter()
            .map(|p| ParamBlob {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self { arch: arch.to_string(), config, meta: BTreeMap::new(), params, optimizer: None }
    }

    /// Copies blob values into `params`, checking names and shapes in order.
    pub fn load_into<'a, T: Real + 'a>(&self, params: impl IntoIterator<Item = &'a mut Param<T>>) -> Result<()> {
        let mut blobs = self.params.iter();
        for p in params {
            let Some(b) = blobs.next() else {
                return bad(format!("checkpoint is missing parameter {}", p.name));
            };
            if b.name != p.name || b.shape != p.value.shape() {
                return bad(format!("parameter {} {:?} does not match {} {:?}", b.name, b.shape, p.name, p.value.shape()));
            }
            p.value = Tensor::from_vec(&b.shape, b.data.iter().map(|&v| T::lit(v as f64)).collect())?;
        }
        if blobs.next().is_some() {
            return bad("checkpoint has more parameters than the model");
        }
        Ok(())
    }

    fn descriptor(&self) -> String {
        let mut s = format!("arch {}\nconfig {}\n", self.arch, self.config.replace('\n', " "));
        for (k, v) in &self.meta {
            s.push_str(&format!("meta {} {}\n", k, v));
        }
        for p in &self.params {
            let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("param {} {}\n", p.name, dims.join(" ")));
        }
        s
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.descriptor());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_blob(&mut out, &p.data);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                let header = serde_json::json!({ "optimizer": o.kind, "lr": o.lr, "step_count": o.step_count });
                put_str(&mut out, &header.to_string());
                for (i, m) in o.m.iter().enumerate() {
                    put_blob(&mut out, m);
                    if let Some(v) = o.v.get(i) {
                        put_blob(&mut out, v);
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return bad("missing GPCK magic");
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return bad("CRC mismatch");
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return bad(format!("unsupported checkpoint version {version}"));
        }
        let desc = r.string()?;
        let mut ck = Checkpoint::default();
        let mut shapes = Vec::new();
        for line in desc.lines() {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "arch" => ck.arch = rest.to_string(),
                "config" => ck.config = rest.to_string(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                "param" => {
                    let mut it = rest.split(' ');
                    let name = it.next().unwrap_or_default().to_string();
                    let dims = it.map(|d| d.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>();
                    match dims {
                        Ok(d) => shapes.push((name, d)),
                        Err(_) => return bad(format!("bad param line: {line}")),
                    }
                }
                "" => {}
                _ => return bad(format!("unknown descriptor key {key}")),
            }
        }
        let count = r.u32()? as usize;
        if count != shapes.len() {
            return bad("descriptor and blob counts differ");
        }
        for (name, shape) in shapes {
            let data = r.blob()?;
            if data.len() != shape.iter().product::<usize>() {
                return bad(format!("blob size for {name} does not match its shape"));
            }
            ck.params.push(ParamBlob { name, shape, data });
        }
        if r.u8()? == 1 {
            let header: serde_json::Value =
                serde_json::from_str(&r.string()?).map_err(|e| TensorError::BadCheckpoint(e.to_string()))?;
            let kind: OptimKind = serde_json::from_value(header["optimizer"].clone())
                .map_err(|e| TensorError::BadCheckpoint(e.to_string()))?;
            let lr = header["lr"].as_f64().unwrap_or(0.0);
            let step_count = header["step_count"].as_u64().unwrap_or(0);
            let mut snap = OptimSnapshot { kind, lr, step_count, m: Vec::new(), v: Vec::new() };
            if step_count > 0 {
                for _ in 0..count {
                    snap.m.push(r.blob()?);
                    if matches!(kind, OptimKind::Adam { .. }) {
                        snap.v.push(r.blob()?);
                    }
                }
            }
            ck.optimizer = Some(snap);
        }
        if r.pos != body.len() {
            return bad("trailing bytes before CRC");
        }
        Ok(ck)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_blob(out: &mut Vec<u8>, data: &[f32]) {
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return bad("truncated checkpoint");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TensorError::BadCheckpoint("descriptor is not UTF-8".into()))
    }

    fn blob(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| TensorError::BadCheckpoint("blob too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let p = Param::new("a.weight", Tensor::<f32>::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.25]).unwrap());
        let q = Param::new("a.bias", Tensor::<f32>::from_vec(&[2], vec![0.5, 0.125]).unwrap());
        let mut ck = Checkpoint::from_params("toy", "{\"width\":3}".into(), [&p, &q]);
        ck.meta.insert("epoch".into(), "4".into());
        ck
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"GPCK");
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    }

    #[test]
    fn round_trip_with_optimizer() {
        let mut ck = sample();
        ck.optimizer = Some(OptimSnapshot {
            kind: OptimKind::adam(),
            lr: 1e-3,
            step_count: 3,
            m: vec![vec![0.1; 6], vec![0.2; 2]],
            v: vec![vec![0.3; 6], vec![0.4; 2]],
        });
        assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::decode(&bytes), Err(TensorError::BadCheckpoint(_))));
        assert!(Checkpoint::decode(b"NOPE\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let ck = sample();
        let mut p = Param::new("a.weight", Tensor::<f64>::zeros(&[2, 3]));
        let mut q = Param::new("a.bias", Tensor::<f64>::zeros(&[2]));
        ck.load_into([&mut p, &mut q]).unwrap();
        assert_eq!(p.value.data()[2], 3.5);
        let mut wrong = Param::new("a.weight", Tensor::<f64>::zeros(&[3, 2]));
        assert!(ck.load_into([&mut wrong]).is_err());
    }
}
