//! Named-tensor binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PEFTT" 0x01
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 payload
//! ```
//!
//! Model checkpoints carry three `meta.*` tensors describing the encoder
//! shape, head and adapters, so a model can be rebuilt from the file alone.
//! Adapter-only checkpoints hold the metadata plus the adapter factors.

use std::fs;
use std::path::Path;

use crate::adapter::{inject_adapters, AdapterMode};
use crate::encoder::{EncoderConfig, EncoderModel, HeadKind};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PEFTT";
pub const VERSION: u8 = 0x01;

const META_CONFIG: &str = "meta.config";
const META_HEAD: &str = "meta.head";
const META_ADAPTERS: &str = "meta.adapters";

/// Ordered list of named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let count = u32::try_from(self.tensors.len()).map_err(|_| format_err("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| format_err(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len()).map_err(|_| format_err(format!("rank too large for {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| format_err(format!("dimension overflow in {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| format_err("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| format_err(format!("dimension overflow in {name}")))?;
            let payload = r.take(n * 4, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| format_err(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn meta(values: &[usize]) -> Tensor<f32> {
    Tensor::new(vec![values.len()], values.iter().map(|&v| v as f32).collect()).expect("non-empty meta")
}

fn meta_values(ckpt: &Checkpoint, name: &str, len: usize) -> Result<Vec<usize>> {
    let t = ckpt.get(name).ok_or_else(|| format_err(format!("missing {name}")))?;
    if t.len() != len {
        return Err(format_err(format!("{name} has {} entries, expected {len}", t.len())));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as usize)
            } else {
                Err(format_err(format!("{name} holds a non-integer value {v}")))
            }
        })
        .collect()
}

fn header(model: &EncoderModel) -> Checkpoint {
    let c = model.config();
    let mut ckpt = Checkpoint::new();
    ckpt.push(
        META_CONFIG,
        meta(&[c.n_layers, c.d_model, c.d_ff, c.n_heads, c.vocab_size, c.max_len]),
    );
    let head = match model.head_kind() {
        HeadKind::Mlm { tied } => [0, tied as usize, 0],
        HeadKind::Classifier { n_classes } => [1, 0, n_classes],
    };
    ckpt.push(META_HEAD, meta(&head));
    let adapters = match model.adapters() {
        None => [0, 0, 0],
        Some(a) => [
            1,
            a.rank(),
            match a.mode() {
                AdapterMode::ParallelLora => 0,
                AdapterMode::Sequential => 1,
            },
        ],
    };
    ckpt.push(META_ADAPTERS, meta(&adapters));
    ckpt
}

/// Every tensor of the model, adapters included.
pub fn model_checkpoint(model: &EncoderModel) -> Checkpoint {
    let mut ckpt = header(model);
    for (_, name, t) in model.params().iter() {
        ckpt.push(name, t.clone().with_requires_grad(false));
    }
    ckpt
}

/// Metadata plus adapter factors only.
pub fn adapter_checkpoint(model: &EncoderModel) -> Result<Checkpoint> {
    let set = model.adapters().ok_or_else(|| invalid("model has no adapters"))?;
    let mut ckpt = header(model);
    for id in set.param_ids() {
        let p = model.params();
        ckpt.push(p.name(id), p.get(id).clone().with_requires_grad(false));
    }
    Ok(ckpt)
}

pub fn save_checkpoint(model: &EncoderModel, path: &Path, adapters_only: bool) -> Result<()> {
    let ckpt = if adapters_only {
        adapter_checkpoint(model)?
    } else {
        model_checkpoint(model)
    };
    ckpt.save(path)
}

struct Meta {
    config: EncoderConfig,
    head: HeadKind,
    adapters: Option<(usize, AdapterMode)>,
}

fn read_meta(ckpt: &Checkpoint) -> Result<Meta> {
    let c = meta_values(ckpt, META_CONFIG, 6)?;
    let config = EncoderConfig {
        n_layers: c[0],
        d_model: c[1],
        d_ff: c[2],
        n_heads: c[3],
        vocab_size: c[4],
        max_len: c[5],
    };
    let h = meta_values(ckpt, META_HEAD, 3)?;
    let head = match h[0] {
        0 => HeadKind::Mlm { tied: h[1] != 0 },
        1 => HeadKind::Classifier { n_classes: h[2] },
        k => return Err(format_err(format!("unknown head kind {k}"))),
    };
    let a = meta_values(ckpt, META_ADAPTERS, 3)?;
    let adapters = match a[0] {
        0 => None,
        _ => Some((
            a[1],
            match a[2] {
                0 => AdapterMode::ParallelLora,
                1 => AdapterMode::Sequential,
                k => return Err(format_err(format!("unknown adapter mode {k}"))),
            },
        )),
    };
    Ok(Meta { config, head, adapters })
}

fn assign(model: &mut EncoderModel, name: &str, t: &Tensor<f32>) -> Result<()> {
    let id = model
        .params()
        .id(name)
        .ok_or_else(|| format_err(format!("unexpected tensor `{name}`")))?;
    let dst = model.params_mut().get_mut(id);
    if dst.shape() != t.shape() {
        return Err(Error::Shape {
            op: "checkpoint tensor",
            lhs: dst.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    dst.data_mut().copy_from_slice(t.data());
    Ok(())
}

/// Rebuilds a model from a full checkpoint. Adapter models come back with
/// the base frozen, as after injection.
pub fn load_model(ckpt: &Checkpoint) -> Result<EncoderModel> {
    let meta = read_meta(ckpt)?;
    let mut model = EncoderModel::new(meta.config, meta.head, 0)?;
    if let Some((rank, mode)) = meta.adapters {
        inject_adapters(&mut model, rank, mode, 0)?;
    }
    let expected = model.params().len();
    let mut seen = 0;
    for (name, t) in &ckpt.tensors {
        if name.starts_with("meta.") {
            continue;
        }
        assign(&mut model, name, t)?;
        seen += 1;
    }
    if seen != expected {
        return Err(format_err(format!("checkpoint has {seen} tensors, model needs {expected}")));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel> {
    load_model(&Checkpoint::load(path)?)
}

/// Applies an adapter-only checkpoint to `model`, injecting adapters first if
/// it has none. The base shape must match the checkpoint's.
pub fn apply_adapters(model: &mut EncoderModel, ckpt: &Checkpoint) -> Result<()> {
    let meta = read_meta(ckpt)?;
    let (rank, mode) = meta.adapters.ok_or_else(|| format_err("checkpoint has no adapters"))?;
    if meta.config != *model.config() {
        return Err(invalid(format!(
            "adapter checkpoint was saved for {:?}, model is {:?}",
            meta.config,
            model.config()
        )));
    }
    match model.adapters() {
        None => {
            inject_adapters(model, rank, mode, 0)?;
        }
        Some(a) if a.rank() == rank && a.mode() == mode => {}
        Some(_) => return Err(invalid("model already has adapters of a different shape")),
    }
    for (name, t) in &ckpt.tensors {
        if !name.starts_with("meta.") {
            assign(model, name, t)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::inject_adapters;

    fn tiny(head: HeadKind) -> EncoderModel {
        EncoderModel::new(EncoderConfig::desk(40, 16), head, 11).unwrap()
    }

    fn bitwise_equal(a: &EncoderModel, b: &EncoderModel) -> bool {
        a.params().len() == b.params().len()
            && a.params().iter().all(|(_, name, t)| {
                let id = b.params().id(name).unwrap();
                let u = b.params().get(id);
                t.shape() == u.shape() && t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    #[test]
    fn byte_layout() {
        let mut c = Checkpoint::new();
        c.push("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let b = c.to_bytes().unwrap();
        assert_eq!(&b[..6], b"PEFTT\x01");
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[10..12], &1u16.to_le_bytes());
        assert_eq!(b[12], b'w');
        assert_eq!(b[13], 1);
        assert_eq!(&b[14..18], &2u32.to_le_bytes());
        assert_eq!(&b[18..22], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 26);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut c = Checkpoint::new();
        c.push("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let good = c.to_bytes().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = good.clone();
        bad[5] = 2;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&good[..good.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&good[..3]).is_err());
        let mut bad = good.clone();
        bad[14..18].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = good;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn model_round_trip() {
        for head in [HeadKind::Mlm { tied: false }, HeadKind::Mlm { tied: true }, HeadKind::Classifier { n_classes: 5 }] {
            let m = tiny(head);
            let back = load_model(&Checkpoint::from_bytes(&model_checkpoint(&m).to_bytes().unwrap()).unwrap()).unwrap();
            assert!(bitwise_equal(&m, &back));
            assert_eq!(back.head_kind(), head);
        }
        let mut m = tiny(HeadKind::Mlm { tied: false });
        inject_adapters(&mut m, 4, AdapterMode::ParallelLora, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p, false).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert!(bitwise_equal(&m, &back));
        assert_eq!(back.adapters().unwrap().rank(), 4);
        assert!(back.params().iter().all(|(_, n, t)| t.requires_grad() == n.starts_with("adapters.")));
    }

    #[test]
    fn adapter_only_size_and_apply() {
        let base = tiny(HeadKind::Mlm { tied: false });
        let mut m = base.clone();
        inject_adapters(&mut m, 8, AdapterMode::ParallelLora, 1).unwrap();
        // make B non-zero so the round trip is meaningful
        let b_id = m.adapters().unwrap().pairs()[0].b;
        m.params_mut().get_mut(b_id).data_mut()[0] = 0.25;
        let bytes = adapter_checkpoint(&m).unwrap().to_bytes().unwrap();
        let payload = 4 * crate::accounting::adapter_count(m.config(), 8) as usize;
        assert!(bytes.len() > payload && bytes.len() < payload + 1024, "{}", bytes.len());

        let mut restored = base.clone();
        apply_adapters(&mut restored, &Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert!(bitwise_equal(&m, &restored));
        let mut other = EncoderModel::new(EncoderConfig::desk(41, 16), HeadKind::Mlm { tied: false }, 0).unwrap();
        assert!(apply_adapters(&mut other, &Checkpoint::from_bytes(&bytes).unwrap()).is_err());
        assert!(adapter_checkpoint(&base).is_err());
    }
}
