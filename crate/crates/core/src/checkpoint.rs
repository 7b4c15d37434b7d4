//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SCKDCKPT" | version u32 | config_len u32 | config JSON
//! block_count u32 | blocks...
//! block: name_len u16 | name | rows u32 | cols u32 | rows·cols f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a load returns exactly the
//! saved parameters.

use std::io::{Read, Write};
use std::path::Path;

use crate::model::{Linear, ModelConfig, ModelState, ReplicaEncoder, TwoLayer};
use crate::numerics::Matrix;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SCKDCKPT";
const VERSION: u32 = 1;

fn linear_blocks<'a>(prefix: &str, layer: &'a Linear, out: &mut Vec<(String, &'a Matrix, Option<&'a [f64]>)>) {
    out.push((format!("{prefix}.weight"), &layer.weight, None));
    out.push((format!("{prefix}.bias"), &layer.weight, Some(&layer.bias)));
}

fn two_layer_blocks<'a>(prefix: &str, net: &'a TwoLayer, out: &mut Vec<(String, &'a Matrix, Option<&'a [f64]>)>) {
    linear_blocks(&format!("{prefix}.hidden"), &net.hidden, out);
    linear_blocks(&format!("{prefix}.output"), &net.output, out);
}

/// Serializes a model, including its replica encoder if present.
pub fn to_bytes(model: &ModelState) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::Serde(e.to_string()))?;
    let mut blocks = Vec::new();
    two_layer_blocks("encoder", &model.encoder, &mut blocks);
    linear_blocks("known_head", &model.known_head, &mut blocks);
    two_layer_blocks("novel_head", &model.novel_head, &mut blocks);
    if let Some(replica) = &model.replica {
        two_layer_blocks("replica", replica.encoder(), &mut blocks);
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, weight, bias) in blocks {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let (rows, cols, values) = match bias {
            Some(b) => (1, b.len(), b),
            None => (weight.rows(), weight.cols(), weight.as_slice()),
        };
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Serde("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Serde("block too large".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn fill_linear(prefix: &str, layer: &mut Linear, blocks: &mut Vec<(String, usize, usize, Vec<f64>)>) -> Result<()> {
    let mut take = |name: String, rows: usize, cols: usize| -> Result<Vec<f64>> {
        let idx = blocks
            .iter()
            .position(|b| b.0 == name)
            .ok_or_else(|| Error::Serde(format!("checkpoint lacks block `{name}`")))?;
        let (_, r, c, values) = blocks.remove(idx);
        if (r, c) != (rows, cols) {
            return Err(Error::Serde(format!(
                "block `{name}` is {r}×{c}, expected {rows}×{cols}"
            )));
        }
        Ok(values)
    };
    let (rows, cols) = layer.weight.shape();
    layer.weight = Matrix::new(rows, cols, take(format!("{prefix}.weight"), rows, cols)?)?;
    layer.bias = take(format!("{prefix}.bias"), 1, cols)?;
    Ok(())
}

fn fill_two_layer(prefix: &str, net: &mut TwoLayer, blocks: &mut Vec<(String, usize, usize, Vec<f64>)>) -> Result<()> {
    fill_linear(&format!("{prefix}.hidden"), &mut net.hidden, blocks)?;
    fill_linear(&format!("{prefix}.output"), &mut net.output, blocks)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Serde("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Serde(format!("unsupported checkpoint version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(config_len)?).map_err(|e| Error::Serde(e.to_string()))?;
    config.validate()?;
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Serde("block name is not UTF-8".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let values = r.f64s(rows * cols)?;
        blocks.push((name, rows, cols, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::Serde("trailing bytes after checkpoint".into()));
    }

    let mut model = ModelState::init(config, 0)?;
    fill_two_layer("encoder", &mut model.encoder, &mut blocks)?;
    fill_linear("known_head", &mut model.known_head, &mut blocks)?;
    fill_two_layer("novel_head", &mut model.novel_head, &mut blocks)?;
    if blocks.iter().any(|b| b.0.starts_with("replica.")) {
        let mut encoder = model.encoder.clone();
        fill_two_layer("replica", &mut encoder, &mut blocks)?;
        model.replica = Some(ReplicaEncoder::from_parts(encoder, model.config.activation));
    }
    if let Some((name, ..)) = blocks.first() {
        return Err(Error::Serde(format!("unexpected block `{name}`")));
    }
    Ok(model)
}

pub fn save(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
