//! Binary checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! "PYFL"            magic
//! u32               format version (1)
//! u32 u32 u32       levels K, height H, width W
//! u64               init seed
//! per level l = 0..K:
//!   u32             layer count
//!   per layer:      u32 in, u32 out, u32 kernel, u32 activation (0 none, 1 relu)
//! u32 u32 f32 f32   epoch, level, train loss, validation EPE
//! f32 ...           weights then bias of every layer, levels K-1 down to 0
//! u32               CRC-32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{PredictorSpec, PyramidConfig, PyramidNet};
use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvLayer};

const MAGIC: [u8; 4] = *b"PYFL";
const VERSION: u32 = 1;
const FIXED_HEADER: usize = 4 + 4 + 12 + 8;
const META_LEN: usize = 16;
const CRC_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub level: u32,
    pub train_loss: f32,
    pub val_epe: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: PyramidNet,
    pub meta: CheckpointMeta,
}

/// Exact size in bytes of the encoded checkpoint for `net`.
pub fn checkpoint_size_bytes(net: &PyramidNet) -> usize {
    let layer_table: usize = net.levels.iter().map(|lv| 4 + 16 * lv.len()).sum();
    FIXED_HEADER + layer_table + META_LEN + 4 * super::count_params(net) + CRC_LEN
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(net: &PyramidNet, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::with_capacity(checkpoint_size_bytes(net));
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, net.levels.len() as u32);
    put_u32(&mut out, net.config.height as u32);
    put_u32(&mut out, net.config.width as u32);
    out.extend_from_slice(&net.config.seed.to_le_bytes());
    for level in &net.levels {
        put_u32(&mut out, level.len() as u32);
        for layer in level {
            put_u32(&mut out, layer.in_channels as u32);
            put_u32(&mut out, layer.out_channels as u32);
            put_u32(&mut out, layer.kernel as u32);
            put_u32(
                &mut out,
                matches!(layer.activation, Activation::Relu) as u32,
            );
        }
    }
    put_u32(&mut out, meta.epoch);
    put_u32(&mut out, meta.level);
    out.extend_from_slice(&meta.train_loss.to_le_bytes());
    out.extend_from_slice(&meta.val_epe.to_le_bytes());
    for level in net.levels.iter().rev() {
        for layer in level {
            for v in layer.weights.iter().chain(&layer.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn to_spec(layers: &[ConvLayer], level: usize) -> Result<PredictorSpec> {
    let first = layers
        .first()
        .ok_or_else(|| Error::CorruptCheckpoint(format!("level {level} has no layers")))?;
    let mut channels = vec![first.in_channels];
    for (i, layer) in layers.iter().enumerate() {
        let want_act = if i + 1 == layers.len() {
            Activation::None
        } else {
            Activation::Relu
        };
        if layer.in_channels != *channels.last().unwrap()
            || layer.kernel != first.kernel
            || layer.activation != want_act
        {
            return Err(Error::CorruptCheckpoint(format!(
                "level {level} layer {i} does not fit the predictor layout"
            )));
        }
        channels.push(layer.out_channels);
    }
    Ok(PredictorSpec {
        channels,
        kernel: first.kernel,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(Error::CorruptCheckpoint("file shorter than magic".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < FIXED_HEADER + CRC_LEN {
        return Err(Error::CorruptCheckpoint("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }

    let mut r = Reader {
        bytes: body,
        pos: 8,
    };
    let k = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let mut levels = Vec::with_capacity(k);
    for _ in 0..k {
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let (cin, cout, kernel) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let act = match r.u32()? {
                0 => Activation::None,
                1 => Activation::Relu,
                a => {
                    return Err(Error::CorruptCheckpoint(format!(
                        "unknown activation code {a}"
                    )))
                }
            };
            layers.push(
                ConvLayer::zeros(cin, cout, kernel, act)
                    .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?,
            );
        }
        levels.push(layers);
    }
    let meta = CheckpointMeta {
        epoch: r.u32()?,
        level: r.u32()?,
        train_loss: r.f32()?,
        val_epe: r.f32()?,
    };
    for level in levels.iter_mut().rev() {
        for layer in level.iter_mut() {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = r.f32()?;
            }
        }
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }

    let specs = levels
        .iter()
        .enumerate()
        .map(|(l, lv)| to_spec(lv, l))
        .collect::<Result<Vec<_>>>()?;
    let shared = specs.windows(2).all(|w| w[0] == w[1]);
    let config = PyramidConfig {
        levels: k,
        height,
        width,
        predictor: specs.first().cloned().unwrap_or_default(),
        per_level: (!shared).then_some(specs),
        seed,
    };
    config
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok(Checkpoint {
        net: PyramidNet { config, levels },
        meta,
    })
}

/// Write a checkpoint and return its size in bytes.
pub fn save_checkpoint(
    net: &PyramidNet,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(net, meta);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    log::info!(
        "wrote checkpoint {} ({} bytes)",
        path.display(),
        bytes.len()
    );
    Ok(bytes.len())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
