//! Single-file network checkpoints.
//!
//! Layout: one line of JSON ([`CheckpointHeader`]) terminated by `\n`, then
//! every tensor of [`Network::tensors`] as raw little-endian values in
//! header order, then one byte per connection-mask entry of each LG-Conv
//! layer in header order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lg_conv::StageRecord;
use crate::net::{NetConfig, Network};
use crate::tensor::Element;

pub const FORMAT: &str = "lconet-checkpoint";
pub const VERSION: u32 = 1;
/// Headers longer than this are rejected before parsing.
pub const MAX_HEADER_BYTES: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub layer: String,
    /// `[filters, in_channels]`.
    pub shape: [usize; 2],
    pub stage: usize,
    pub history: Vec<StageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: NetConfig,
    /// Epochs completed when the checkpoint was taken.
    pub epoch: usize,
    /// Lowest condensation stage over all LG-Conv layers.
    pub stage: usize,
    pub tensors: Vec<TensorEntry>,
    pub masks: Vec<MaskEntry>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub epoch: usize,
}

pub fn header_of<T: Element>(net: &Network<T>, epoch: usize) -> CheckpointHeader {
    let lg = net.lg_layers();
    CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE.into(),
        config: net.config().clone(),
        epoch,
        stage: lg.iter().map(|l| l.stage()).min().unwrap_or(0),
        tensors: net
            .tensors()
            .into_iter()
            .map(|t| TensorEntry {
                name: t.name,
                shape: t.tensor.shape().to_vec(),
            })
            .collect(),
        masks: lg
            .iter()
            .map(|l| MaskEntry {
                layer: l.name().to_string(),
                shape: [l.filters(), l.in_channels()],
                stage: l.stage(),
                history: l.history().to_vec(),
            })
            .collect(),
    }
}

pub fn encode<T: Element>(net: &Network<T>, epoch: usize) -> Vec<u8> {
    let header = header_of(net, epoch);
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for t in net.tensors() {
        for &v in t.tensor.data() {
            v.write_le(&mut out);
        }
    }
    for l in net.lg_layers() {
        out.extend(l.mask().data().iter().map(|&m| u8::from(m != T::zero())));
    }
    out
}

/// Splits off and parses the JSON header line.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let limit = bytes.len().min(MAX_HEADER_BYTES);
    let nl = bytes[..limit]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("no header line terminator".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.format != FORMAT {
        return Err(Error::MalformedHeader(format!("format {:?} is not {FORMAT:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {}", header.version)));
    }
    Ok((header, &bytes[nl + 1..]))
}

fn product(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Validation(format!("shape {shape:?} overflows")))
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, body) = decode_header(bytes)?;
    if header.dtype != T::DTYPE {
        if header.dtype != "f32" && header.dtype != "f64" {
            return Err(Error::MalformedHeader(format!("unknown dtype {:?}", header.dtype)));
        }
        return Err(Error::DtypeMismatch {
            expected: T::DTYPE.into(),
            found: header.dtype,
        });
    }
    header
        .config
        .validate()
        .map_err(|e| Error::Validation(format!("checkpoint config: {e}")))?;

    let mut weight_elems = 0usize;
    for t in &header.tensors {
        weight_elems = weight_elems
            .checked_add(product(&t.shape)?)
            .ok_or_else(|| Error::Validation("tensor manifest overflows".into()))?;
    }
    let mut mask_elems = 0usize;
    for m in &header.masks {
        mask_elems = mask_elems
            .checked_add(product(&m.shape)?)
            .ok_or_else(|| Error::Validation("mask manifest overflows".into()))?;
    }
    let expected = weight_elems
        .checked_mul(T::BYTES)
        .and_then(|w| w.checked_add(mask_elems))
        .ok_or_else(|| Error::Validation("checkpoint size overflows".into()))?;
    if body.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: body.len(),
        });
    }
    if body.len() > expected {
        return Err(Error::Validation(format!(
            "{} trailing bytes after checkpoint payload",
            body.len() - expected
        )));
    }
    // The network is only built once the file is known to be as large as
    // the network it describes.
    let cfg = &header.config;
    if cfg.dense_param_count().saturating_add(cfg.buffer_count()) != weight_elems {
        return Err(Error::Validation(format!(
            "manifest holds {weight_elems} values but the config describes {}",
            cfg.dense_param_count().saturating_add(cfg.buffer_count())
        )));
    }
    let mut net = Network::<T>::build(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;

    let mut offset = 0;
    {
        let slots = net.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(Error::Validation(format!(
                "manifest lists {} tensors, network has {}",
                header.tensors.len(),
                slots.len()
            )));
        }
        for (slot, entry) in slots.into_iter().zip(&header.tensors) {
            if slot.name != entry.name || slot.tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Validation(format!(
                    "manifest entry {} {:?} does not match network tensor {} {:?}",
                    entry.name,
                    entry.shape,
                    slot.name,
                    slot.tensor.shape()
                )));
            }
            for v in slot.tensor.data_mut() {
                *v = T::read_le(&body[offset..offset + T::BYTES]);
                if !v.is_finite() {
                    return Err(Error::Validation(format!("non-finite value in {}", entry.name)));
                }
                offset += T::BYTES;
            }
        }
    }
    let layers = net.lg_layers_mut();
    if layers.len() != header.masks.len() {
        return Err(Error::Validation(format!(
            "manifest lists {} masks, network has {} LG-Conv layers",
            header.masks.len(),
            layers.len()
        )));
    }
    for (layer, entry) in layers.into_iter().zip(&header.masks) {
        if layer.name() != entry.layer || [layer.filters(), layer.in_channels()] != entry.shape {
            return Err(Error::Validation(format!(
                "mask entry {} does not match layer {}",
                entry.layer,
                layer.name()
            )));
        }
        if entry.history.len() != entry.stage {
            return Err(Error::Validation(format!(
                "{} records {} stages of history for stage {}",
                entry.layer,
                entry.history.len(),
                entry.stage
            )));
        }
        let n = entry.shape[0] * entry.shape[1];
        let mask = &body[offset..offset + n];
        if mask.iter().any(|&b| b > 1) {
            return Err(Error::Validation(format!("mask of {} holds a non-binary byte", entry.layer)));
        }
        layer.set_mask(mask, entry.stage, entry.history.clone())?;
        offset += n;
    }
    Ok(Checkpoint {
        network: net,
        epoch: header.epoch,
    })
}

pub fn save<T: Element>(path: &Path, net: &Network<T>, epoch: usize) -> Result<()> {
    std::fs::write(path, encode(net, epoch))?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?)
}
