//! Little-endian checkpoint container.
//!
//! ```text
//! "MS2T" | version: u32 | n_params: u32 | record* | n_optimizer: u32 | record*
//! record := name_len: u32 | name: utf-8 | rank: u32 | extent: u32 * rank | payload
//! ```
//!
//! Payloads are `f32` values, except for the `__config__` record whose payload
//! is the raw UTF-8 bytes of the model configuration (rank 1, extent = byte
//! count).

use std::io::{Read, Write};
use std::path::Path;

use super::{OptimizerState, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MS2T";
pub const CHECKPOINT_VERSION: u32 = 1;
pub(crate) const CONFIG_RECORD: &str = "__config__";
const OPT_SCALARS: &str = "optim.scalars";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<u32>,
    pub values: Vec<f32>,
}

/// In-memory image of a checkpoint file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: Option<String>,
    pub params: Vec<Record>,
    pub optimizer: Vec<Record>,
}

fn to_record<R: Real>(name: &str, t: &Tensor<R>) -> Record {
    Record {
        name: name.to_string(),
        shape: t.shape().iter().map(|&d| d as u32).collect(),
        values: t.data().iter().map(|v| v.as_f64() as f32).collect(),
    }
}

fn record_tensor<R: Real>(r: &Record) -> Result<Tensor<R>> {
    let shape: Vec<usize> = r.shape.iter().map(|&d| d as usize).collect();
    Tensor::new(&shape, r.values.iter().map(|&v| R::of(v as f64)).collect())
}

impl Checkpoint {
    pub fn from_store<R: Real>(store: &ParamStore<R>, config: Option<String>) -> Self {
        Checkpoint {
            config,
            params: store.iter().map(|(_, p)| to_record(&p.name, &p.value)).collect(),
            optimizer: Vec::new(),
        }
    }

    pub fn with_optimizer<R: Real>(mut self, store: &ParamStore<R>, state: &OptimizerState<R>) -> Self {
        for (id, p) in store.iter() {
            self.optimizer.push(to_record(&format!("optim.m.{}", p.name), &state.first_moment[id.0]));
            self.optimizer.push(to_record(&format!("optim.v.{}", p.name), &state.second_moment[id.0]));
        }
        self.optimizer.push(Record {
            name: OPT_SCALARS.into(),
            shape: vec![4],
            values: vec![
                state.step as f32,
                state.num_decays as f32,
                state.best_metric.unwrap_or(f32::NAN),
                state.bad_reports as f32,
            ],
        });
        self
    }

    pub fn param(&self, name: &str) -> Option<&Record> {
        self.params.iter().find(|r| r.name == name)
    }

    /// Copies every stored parameter into `store`, requiring an exact name and shape match.
    pub fn load_into<R: Real>(&self, store: &mut ParamStore<R>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for r in &self.params {
            let id = store
                .id(&r.name)
                .ok_or_else(|| Error::Data(format!("unexpected parameter {} in checkpoint", r.name)))?;
            let t = record_tensor(r)?;
            store.set(id, t)?;
        }
        Ok(())
    }

    /// Restores optimizer state for `store`. Returns `None` when the checkpoint has none.
    pub fn optimizer_state<R: Real>(&self, store: &ParamStore<R>) -> Result<Option<OptimizerState<R>>> {
        let Some(scalars) = self.optimizer.iter().find(|r| r.name == OPT_SCALARS) else {
            return Ok(None);
        };
        let find = |n: String| {
            self.optimizer
                .iter()
                .find(|r| r.name == n)
                .ok_or_else(|| Error::Data(format!("missing optimizer record {n}")))
                .and_then(record_tensor::<R>)
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, p) in store.iter() {
            m.push(find(format!("optim.m.{}", p.name))?);
            v.push(find(format!("optim.v.{}", p.name))?);
        }
        let s = &scalars.values;
        Ok(Some(OptimizerState {
            step: s[0] as u64,
            first_moment: m,
            second_moment: v,
            num_decays: s[1] as u32,
            best_metric: if s[2].is_nan() { None } else { Some(s[2]) },
            bad_reports: s[3] as u32,
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let n = self.params.len() + usize::from(self.config.is_some());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        if let Some(cfg) = &self.config {
            write_header(&mut out, CONFIG_RECORD, &[cfg.len() as u32]);
            out.extend_from_slice(cfg.as_bytes());
        }
        for r in &self.params {
            write_record(&mut out, r);
        }
        out.extend_from_slice(&(self.optimizer.len() as u32).to_le_bytes());
        for r in &self.optimizer {
            write_record(&mut out, r);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::default();
        let n = cur.u32()?;
        for _ in 0..n {
            let (name, shape) = cur.header()?;
            if name == CONFIG_RECORD {
                let len = shape.first().copied().unwrap_or(0) as usize;
                let raw = cur.take(len)?;
                let text = String::from_utf8(raw.to_vec())
                    .map_err(|_| Error::Data("config record is not UTF-8".into()))?;
                ck.config = Some(text);
            } else {
                let values = cur.f32s(shape.iter().map(|&d| d as usize).product())?;
                ck.params.push(Record { name, shape, values });
            }
        }
        let n = cur.u32()?;
        for _ in 0..n {
            let (name, shape) = cur.header()?;
            let values = cur.f32s(shape.iter().map(|&d| d as usize).product())?;
            ck.optimizer.push(Record { name, shape, values });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&buf)
    }
}

fn write_header(out: &mut Vec<u8>, name: &str, shape: &[u32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend_from_slice(&d.to_le_bytes());
    }
}

fn write_record(out: &mut Vec<u8>, r: &Record) {
    write_header(out, &r.name, &r.shape);
    for v in &r.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn header(&mut self) -> Result<(String, Vec<u32>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Data("record name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        Ok((name, shape))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2));
        store.add("b", Tensor::full(&[4], -1.5));
        let ck = Checkpoint::from_store(&store, Some("model:\n  dim: 4\n".into()));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut other = ParamStore::<f32>::new();
        other.add("a.w", Tensor::zeros(&[2, 3]));
        other.add("b", Tensor::zeros(&[4]));
        back.load_into(&mut other).unwrap();
        for (id, p) in store.iter() {
            assert_eq!(p.value, other.get(id).value);
        }
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint::default();
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"MS2T");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(b.len(), 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0").is_err());
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::full(&[3], 1.0));
        let b = Checkpoint::from_store(&store, None).to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 2]).is_err());
    }

    #[test]
    fn shape_mismatch_on_load() {
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::full(&[3], 1.0));
        let ck = Checkpoint::from_store(&store, None);
        let mut other = ParamStore::<f32>::new();
        other.add("x", Tensor::full(&[4], 1.0));
        assert!(ck.load_into(&mut other).is_err());
    }
}
