//! Binary checkpoint format. Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "ALRA"
//! version  u32
//! seed     u64
//! header   u32 length + UTF-8 JSON {spec, constraint, layers}
//! config   u32 length + UTF-8 JSON (free-form echo)
//! tensors  u32 count, then per tensor:
//!            u16 name length + UTF-8 name, u32 rows, u32 cols,
//!            rows*cols f64, row-major
//! betas    u32 count, then per vector: u32 layer, u32 k, k f64
//! ```
//!
//! No bytes may follow the last section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{ConstraintMode, LoraLinear};
use crate::model::{BodyLayer, Dense, LayerWeight, Network, NetworkSpec};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ALRA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: serde_json::Value,
    /// Selection logits travel inside the LoRA layers of `net`.
    pub net: Network,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LayerKind {
    Plain,
    Lora,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    constraint: ConstraintMode,
    layers: Vec<LayerKind>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, n: usize, what: &str) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("{what} too large")))?;
    put_u32(out, n);
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format("tensor name too long".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    put_len(out, t.rows(), "tensor")?;
    put_len(out, t.cols(), "tensor")?;
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn named_tensors(net: &Network) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, layer) in net.body().iter().enumerate() {
        match &layer.weight {
            LayerWeight::Plain(w) => out.push((format!("body.{i}.weight"), w)),
            LayerWeight::Lora(l) => {
                out.push((format!("body.{i}.w_tilde"), l.w_tilde()));
                out.push((format!("body.{i}.u"), l.u()));
                out.push((format!("body.{i}.v"), l.v()));
            }
        }
        if let Some(b) = &layer.bias {
            out.push((format!("body.{i}.bias"), b));
        }
    }
    out.push(("head.weight".into(), &net.head().weight));
    out.push(("head.bias".into(), &net.head().bias));
    out.push(("pretrained_head.weight".into(), &net.pretrained_head().weight));
    out.push(("pretrained_head.bias".into(), &net.pretrained_head().bias));
    out
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let net = &ckpt.net;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&ckpt.seed.to_le_bytes());

    let header = Header {
        spec: net.spec().clone(),
        constraint: net.constraint(),
        layers: net
            .body()
            .iter()
            .map(|l| match l.weight {
                LayerWeight::Plain(_) => LayerKind::Plain,
                LayerWeight::Lora(_) => LayerKind::Lora,
            })
            .collect(),
    };
    for json in [
        serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?,
        serde_json::to_vec(&ckpt.config).map_err(|e| Error::Format(e.to_string()))?,
    ] {
        put_len(&mut out, json.len(), "json section")?;
        out.extend_from_slice(&json);
    }

    let tensors = named_tensors(net);
    put_len(&mut out, tensors.len(), "tensor table")?;
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t)?;
    }

    let betas = net.betas();
    put_len(&mut out, betas.len(), "beta table")?;
    for (layer, b) in betas {
        put_len(&mut out, layer, "layer index")?;
        put_len(&mut out, b.len(), "beta")?;
        for v in b.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("{what}: length overflow")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, what: &str) -> Result<T> {
        let n = self.u32(what)?;
        let raw = self.take(n, what)?;
        serde_json::from_slice(raw).map_err(|e| Error::Format(format!("{what}: {e}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}: expected \"ALRA\""
        )));
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let seed = r.u64("seed")?;
    let header: Header = r.json("header")?;
    let config: serde_json::Value = r.json("config")?;

    let count = r.u32("tensor count")?;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let len = r.u16("tensor name")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32("tensor rows")?;
        let cols = r.u32("tensor cols")?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("tensor {name}: size overflow")))?;
        let data = r.f64s(n, &name)?;
        if tensors.insert(name.clone(), Tensor::new(rows, cols, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    let mut betas = std::collections::BTreeMap::new();
    for _ in 0..r.u32("beta count")? {
        let layer = r.u32("beta layer")?;
        let k = r.u32("beta length")?;
        betas.insert(layer, Tensor::new(1, k, r.f64s(k, "beta")?)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }

    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    };
    let spec = header.spec;
    let shapes = spec.body_shapes();
    if header.layers.len() != shapes.len() {
        return Err(Error::Format("layer list does not match spec".into()));
    }
    let mut body = Vec::with_capacity(shapes.len());
    for (i, (kind, &(_, _, has_bias))) in header.layers.iter().zip(&shapes).enumerate() {
        let weight = match kind {
            LayerKind::Plain => LayerWeight::Plain(take(format!("body.{i}.weight"))?),
            LayerKind::Lora => LayerWeight::Lora(LoraLinear::from_parts(
                take(format!("body.{i}.w_tilde"))?,
                take(format!("body.{i}.u"))?,
                take(format!("body.{i}.v"))?,
                betas.remove(&i),
            )?),
        };
        let bias = if has_bias { Some(take(format!("body.{i}.bias"))?) } else { None };
        body.push(BodyLayer { weight, bias });
    }
    let head = Dense {
        weight: take("head.weight".into())?,
        bias: take("head.bias".into())?,
    };
    let pretrained_head = Dense {
        weight: take("pretrained_head.weight".into())?,
        bias: take("pretrained_head.bias".into())?,
    };
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {name}")));
    }
    if let Some(layer) = betas.keys().next() {
        return Err(Error::Format(format!("selection logits for non-LoRA layer {layer}")));
    }
    let net = Network::from_parts(spec, body, head, pretrained_head, header.constraint)?;
    Ok(Checkpoint { seed, config, net })
}

/// Writes the checkpoint atomically.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    super::write_atomic(path.as_ref(), &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Task;

    fn sample() -> Checkpoint {
        let spec = NetworkSpec::mlp(vec![3, 5, 4, 2], Task::Classification { num_classes: 2 });
        let net = Network::init(&spec, 9).unwrap().attach_lora(2).unwrap();
        Checkpoint {
            seed: 42,
            config: serde_json::json!({"search.eta": 0.1}),
            net,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = encode_checkpoint(&c).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn layout_prefix() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"ALRA");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &42u64.to_le_bytes());
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("\"ALRA\""));
        let mut newer = bytes.clone();
        newer[4] = 2;
        assert!(decode_checkpoint(&newer).unwrap_err().to_string().contains("version 2"));
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.alra");
        save_checkpoint(&path, &sample()).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), sample());
        assert!(matches!(
            load_checkpoint(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
