//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CAPL" | version u16 | endianness u8 (1 = little) | embed_dim u32 | alpha f64
//! variant: len u16, utf-8
//! classes: count u32, then per class: id u16, role u8 (0 base, 1 novel), name len u16, utf-8
//! tensors: count u32, then per tensor: name len u16, utf-8, dtype u8, ndim u8, dims u32 each, payload
//! crc32 of everything above, u32
//! ```

use std::path::Path;

use crate::backbone::{Backbone, ConvLayer};
use crate::dataset::ClassInfo;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::prototype::{ClassEntry, Classifier, GammaNet, Role};
use crate::scalar::DType;
use crate::tensor::Tensor;
use crate::train::{TrainState, TrainingKind};

pub const MAGIC: &[u8; 4] = b"CAPL";
pub const VERSION: u16 = 1;
const LITTLE_ENDIAN: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: TrainingKind,
    pub classes: Vec<ClassInfo>,
    pub backbone: Backbone<f64>,
    pub classifier: Classifier<f64>,
    pub gamma: Option<GammaNet<f64>>,
    pub velocity: Vec<Tensor<f64>>,
    pub step: usize,
    pub gamma_trace: Vec<f64>,
}

fn kind_from_name(s: &str) -> Result<TrainingKind> {
    [TrainingKind::Plain, TrainingKind::FakeNovel, TrainingKind::Full]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Format(format!("unknown training kind {s:?}")))
}

impl Checkpoint {
    pub fn from_state(state: &TrainState<f64>, classes: &[ClassInfo]) -> Self {
        Self {
            kind: state.kind,
            classes: classes.to_vec(),
            backbone: state.backbone.clone(),
            classifier: state.classifier.clone(),
            gamma: state.gamma.clone(),
            velocity: state.velocity.clone(),
            step: state.step,
            gamma_trace: state.gamma_trace.clone(),
        }
    }

    pub fn to_state(&self) -> TrainState<f64> {
        TrainState {
            kind: self.kind,
            backbone: self.backbone.clone(),
            classifier: self.classifier.clone(),
            gamma: self.gamma.clone(),
            velocity: self.velocity.clone(),
            step: self.step,
            gamma_trace: self.gamma_trace.clone(),
        }
    }

    /// Model parameters are written as `dtype`; optimizer and bookkeeping
    /// tensors always as `f64`.
    pub fn encode(&self, dtype: DType) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(LITTLE_ENDIAN);
        out.extend_from_slice(&(self.classifier.dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.classifier.alpha().to_le_bytes());
        put_str(&mut out, self.kind.name());

        let mut classes = self.classes.clone();
        for e in self.classifier.entries() {
            match classes.iter_mut().find(|c| c.id == e.id) {
                Some(c) => c.role = e.role,
                None => classes.push(ClassInfo {
                    id: e.id,
                    name: format!("class{}", e.id),
                    role: e.role,
                }),
            }
        }
        classes.sort_by_key(|c| c.id);
        out.extend_from_slice(&(classes.len() as u32).to_le_bytes());
        for c in &classes {
            out.extend_from_slice(&(c.id as u16).to_le_bytes());
            out.push(match c.role {
                Role::Base => 0,
                Role::Novel => 1,
            });
            put_str(&mut out, &c.name);
        }

        let mut tensors: Vec<(String, DType, &[usize], Vec<f64>)> = Vec::new();
        for (i, l) in self.backbone.layers().iter().enumerate() {
            tensors.push((format!("backbone.{i}.kernel"), dtype, l.kernel.shape(), l.kernel.data().to_vec()));
            tensors.push((format!("backbone.{i}.bias"), dtype, l.bias.shape(), l.bias.data().to_vec()));
        }
        let dim = [self.classifier.dim()];
        for e in self.classifier.entries() {
            tensors.push((format!("classifier.{}", e.id), dtype, &dim, e.prototype.clone()));
        }
        if let Some(g) = &self.gamma {
            for (name, t) in g.tensors() {
                tensors.push((format!("gamma.{name}"), dtype, t.shape(), t.data().to_vec()));
            }
        }
        for (j, v) in self.velocity.iter().enumerate() {
            tensors.push((format!("optim.velocity.{j}"), DType::F64, v.shape(), v.data().to_vec()));
        }
        tensors.push(("meta.step".into(), DType::F64, &[1], vec![self.step as f64]));
        let trace_shape = [self.gamma_trace.len()];
        tensors.push(("meta.gamma_trace".into(), DType::F64, &trace_shape, self.gamma_trace.clone()));

        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, dt, shape, data) in &tensors {
            put_str(&mut out, name);
            out.push(dt.tag());
            out.push(shape.len() as u8);
            for &d in shape.iter() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                match dt {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 1 + 4 + 8 + 4 {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        if r.u8()? != LITTLE_ENDIAN {
            return Err(Error::Format("unsupported endianness flag".into()));
        }
        let embed_dim = r.u32()? as usize;
        let alpha = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let kind = kind_from_name(&r.string()?)?;

        let n_classes = r.u32()? as usize;
        let mut classes = Vec::with_capacity(n_classes.min(256));
        for _ in 0..n_classes {
            let id = r.u16()?;
            let role = match r.u8()? {
                0 => Role::Base,
                1 => Role::Novel,
                x => return Err(Error::Format(format!("bad role tag {x}"))),
            };
            let name = r.string()?;
            let id = u8::try_from(id).map_err(|_| Error::Format(format!("class id {id} out of range")))?;
            classes.push(ClassInfo { id, name, role });
        }

        let n_tensors = r.u32()? as usize;
        let mut named: Vec<(String, Tensor<f64>)> = Vec::new();
        for _ in 0..n_tensors {
            let name = r.string()?;
            let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::Format(format!("{name}: bad dtype tag")))?;
            let ndim = r.u8()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data: Vec<f64> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            if named.iter().any(|(m, _)| *m == name) {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            named.push((name, Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes before checksum".into()));
        }

        let mut take = |name: &str| -> Option<Tensor<f64>> {
            named.iter().position(|(n, _)| n == name).map(|i| named.remove(i).1)
        };
        let missing = |name: &str| Error::Format(format!("checkpoint lacks tensor {name}"));

        let mut layers = Vec::new();
        while let Some(kernel) = take(&format!("backbone.{}.kernel", layers.len())) {
            let bname = format!("backbone.{}.bias", layers.len());
            let bias = take(&bname).ok_or_else(|| missing(&bname))?;
            layers.push(ConvLayer { kernel, bias });
        }
        let backbone = Backbone::from_layers(layers).map_err(|e| Error::Format(e.to_string()))?;
        if backbone.embed_dim() != embed_dim {
            return Err(Error::Format("embed_dim disagrees with backbone".into()));
        }

        let mut entries = Vec::new();
        for c in &classes {
            if let Some(t) = take(&format!("classifier.{}", c.id)) {
                if t.len() != embed_dim {
                    return Err(Error::Format(format!("classifier row {} has wrong length", c.id)));
                }
                entries.push(ClassEntry {
                    id: c.id,
                    role: c.role,
                    prototype: t.into_data(),
                });
            }
        }
        let classifier = Classifier::new(alpha, entries).map_err(|e| Error::Format(e.to_string()))?;

        let gamma = match take("gamma.w1") {
            None => None,
            Some(w1) => {
                let mut part = |n: &str| take(n).ok_or_else(|| missing(n));
                let (b1, w2, b2) = (part("gamma.b1")?, part("gamma.w2")?, part("gamma.b2")?);
                Some(GammaNet::from_parts(w1, b1, w2, b2).map_err(|e| Error::Format(e.to_string()))?)
            }
        };
        let mut velocity = Vec::new();
        while let Some(v) = take(&format!("optim.velocity.{}", velocity.len())) {
            velocity.push(v);
        }
        let step = take("meta.step").ok_or_else(|| missing("meta.step"))?.item() as usize;
        let gamma_trace = take("meta.gamma_trace").ok_or_else(|| missing("meta.gamma_trace"))?.into_data();
        if let Some((name, _)) = named.first() {
            return Err(Error::Format(format!("unexpected tensor {name} (unknown class id or name)")));
        }
        Ok(Self {
            kind,
            classes,
            backbone,
            classifier,
            gamma,
            velocity,
            step,
            gamma_trace,
        })
    }

    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        write_atomic(path, &self.encode(dtype))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8 in checkpoint".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;

    fn sample(kind: TrainingKind) -> Checkpoint {
        let cfg = TrainConfig {
            embed_dim: 4,
            layers: 2,
            ..TrainConfig::default()
        };
        let mut state = TrainState::<f64>::init(&cfg, kind, &[0, 3, 4]).unwrap();
        state.step = 7;
        state.gamma_trace = vec![0.25, f64::NAN, 0.75];
        let classes = [0u8, 3, 4]
            .iter()
            .map(|&id| ClassInfo {
                id,
                name: format!("c{id}"),
                role: Role::Base,
            })
            .collect::<Vec<_>>();
        Checkpoint::from_state(&state, &classes)
    }

    fn same(a: &Checkpoint, b: &Checkpoint) -> bool {
        // NaN in the trace defeats PartialEq
        a.encode(DType::F64) == b.encode(DType::F64)
    }

    #[test]
    fn round_trip_is_lossless() {
        for kind in [TrainingKind::Plain, TrainingKind::Full] {
            let ck = sample(kind);
            let back = Checkpoint::decode(&ck.encode(DType::F64)).unwrap();
            assert!(same(&ck, &back));
            assert_eq!(back.gamma.is_some(), kind == TrainingKind::Full);
        }
    }

    #[test]
    fn f32_payloads_round_to_single_precision() {
        let ck = sample(TrainingKind::Full);
        let back = Checkpoint::decode(&ck.encode(DType::F32)).unwrap();
        let a = ck.backbone.layers()[0].kernel.data();
        let b = back.backbone.layers()[0].kernel.data();
        for (x, y) in a.iter().zip(b) {
            assert_eq!(*y, *x as f32 as f64);
        }
        assert_eq!(back.step, 7);
    }

    #[test]
    fn every_single_byte_corruption_is_detected() {
        let bytes = sample(TrainingKind::Plain).encode(DType::F32);
        for i in (0..bytes.len()).step_by(7) {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(matches!(Checkpoint::decode(&b), Err(Error::Format(_))), "byte {i}");
        }
        assert!(Checkpoint::decode(&bytes[..10]).is_err());
    }
}
