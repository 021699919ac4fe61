//! Binary container used for checkpoints and serialized datasets.
//!
//! ```text
//! magic    4 bytes  "SMCK"
//! version  u8       1
//! count    u32 LE   number of sections
//! section  name_len u32 LE | name (UTF-8) | payload_len u64 LE | payload
//! ```
//!
//! Array payloads are `ndim u32 | dims u32 × ndim | values f32 LE`. JSON
//! payloads are UTF-8 text.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Activation, LayerKind, MaskedLayer, Network, Stage};
use crate::autodiff::DenseArray;
use crate::error::{Error, Result};
use crate::mask::MaskParameters;
use crate::rescale::{DwrReading, RescaleState, RescaleStrategy};
use crate::train::RunConfig;

pub const MAGIC: &[u8; 4] = b"SMCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    sections: Vec<(String, Vec<u8>)>,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated {what}: need {n} bytes, {} left", bytes.len())));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4, what)?.try_into().unwrap()))
}

fn take_u64(bytes: &mut &[u8], what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, 8, what)?.try_into().unwrap()))
}

pub fn encode_array(a: &DenseArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * a.shape().len() + 4 * a.len());
    out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
    for &d in a.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in a.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_array(mut bytes: &[u8]) -> Result<DenseArray> {
    let ndim = take_u32(&mut bytes, "array rank")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(take_u32(&mut bytes, "array extent")? as usize);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!(
            "array {shape:?} expects {} value bytes, found {}",
            4 * n,
            bytes.len()
        )));
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    DenseArray::new(shape, values).map_err(|e| Error::Format(e.to_string()))
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, payload: Vec<u8>) {
        self.sections.push((name.into(), payload));
    }

    pub fn push_array(&mut self, name: impl Into<String>, a: &DenseArray) {
        self.push(name, encode_array(a));
    }

    pub fn push_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<()> {
        let text = serde_json::to_vec(value).map_err(|e| Error::Format(e.to_string()))?;
        self.push(name, text);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p.as_slice())
    }

    fn require(&self, name: &str) -> Result<&[u8]> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing section `{name}`")))
    }

    pub fn array(&self, name: &str) -> Result<DenseArray> {
        decode_array(self.require(name)?)
    }

    pub fn json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(self.require(name)?).map_err(|e| Error::Format(format!("section `{name}`: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        if take(&mut bytes, 4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint container (bad magic)".into()));
        }
        let version = take(&mut bytes, 1, "version")?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = take_u32(&mut bytes, "section count")?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = take_u32(&mut bytes, "section name length")? as usize;
            let name = std::str::from_utf8(take(&mut bytes, len, "section name")?)
                .map_err(|e| Error::Format(e.to_string()))?
                .to_owned();
            let plen = take_u64(&mut bytes, "payload length")? as usize;
            let payload = take(&mut bytes, plen, "payload")?.to_vec();
            sections.push((name, payload));
        }
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after last section", bytes.len())));
        }
        Ok(Self { sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "stage")]
enum StageDesc {
    Masked {
        kind: LayerKind,
        activation: Activation,
        bias: bool,
        mask_trainable: bool,
        rescale: RescaleStrategy,
        dwr_reading: DwrReading,
    },
    MaxPool2,
    Flatten,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NetworkDesc {
    input_shape: Vec<usize>,
    stages: Vec<StageDesc>,
}

pub fn network_to_container(net: &Network, config: Option<&RunConfig>) -> Result<Container> {
    let mut c = Container::new();
    let mut stages = Vec::new();
    for s in &net.stages {
        stages.push(match s {
            Stage::MaxPool2 => StageDesc::MaxPool2,
            Stage::Flatten => StageDesc::Flatten,
            Stage::Masked(l) => StageDesc::Masked {
                kind: l.kind,
                activation: l.activation,
                bias: l.bias.is_some(),
                mask_trainable: l.mask.trainable,
                rescale: l.rescale.strategy,
                dwr_reading: l.rescale.dwr_reading,
            },
        });
    }
    c.push_json(
        "network",
        &NetworkDesc {
            input_shape: net.input_shape.clone(),
            stages,
        },
    )?;
    if let Some(cfg) = config {
        c.push_json("config", cfg)?;
    }
    for (i, l) in net.layers().enumerate() {
        c.push_array(format!("layer.{i}.weights"), &l.weights);
        c.push_array(format!("layer.{i}.m_hat"), &l.mask.m_hat);
        c.push_array(format!("layer.{i}.scale"), &l.rescale.scale);
        if let Some(b) = &l.bias {
            c.push_array(format!("layer.{i}.bias"), b);
        }
    }
    Ok(c)
}

pub fn network_from_container(c: &Container) -> Result<(Network, Option<RunConfig>)> {
    let desc: NetworkDesc = c.json("network")?;
    let mut stages = Vec::new();
    let mut i = 0;
    for s in desc.stages {
        stages.push(match s {
            StageDesc::MaxPool2 => Stage::MaxPool2,
            StageDesc::Flatten => Stage::Flatten,
            StageDesc::Masked {
                kind,
                activation,
                bias,
                mask_trainable,
                rescale,
                dwr_reading,
            } => {
                let weights = c.array(&format!("layer.{i}.weights"))?;
                let m_hat = c.array(&format!("layer.{i}.m_hat"))?;
                if m_hat.shape() != weights.shape() {
                    return Err(Error::Format(format!("layer {i}: mask and weight shapes differ")));
                }
                let mask = if mask_trainable {
                    MaskParameters::from_logits(m_hat)
                } else {
                    MaskParameters::exempt(weights.shape())
                };
                let scale = c.array(&format!("layer.{i}.scale"))?;
                let mut state = RescaleState::new(rescale, scale.values()[0], dwr_reading);
                if rescale != RescaleStrategy::Smart {
                    state.scale = scale;
                }
                let bias = if bias { Some(c.array(&format!("layer.{i}.bias"))?) } else { None };
                i += 1;
                Stage::Masked(MaskedLayer {
                    kind,
                    weights,
                    bias,
                    mask,
                    rescale: state,
                    activation,
                })
            }
        });
    }
    let config = if c.get("config").is_some() { Some(c.json("config")?) } else { None };
    Ok((Network::new(stages, desc.input_shape), config))
}

pub fn save_checkpoint(path: &Path, net: &Network, config: Option<&RunConfig>) -> Result<()> {
    network_to_container(net, config)?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, Option<RunConfig>)> {
    network_from_container(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_conv_family_with, ConvShape, ConvVariant, NetworkOptions};

    #[test]
    fn header_layout() {
        let mut c = Container::new();
        c.push("a", vec![7, 8]);
        let b = c.to_bytes();
        assert_eq!(&b[..4], MAGIC);
        assert_eq!(b[4], VERSION);
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(b[13], b'a');
        assert_eq!(&b[14..22], &2u64.to_le_bytes());
        assert_eq!(&b[22..], &[7, 8]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Container::from_bytes(b"NOPE\x01"), Err(Error::Format(_))));
        let mut b = Container::new().to_bytes();
        b[4] = 9;
        assert!(matches!(Container::from_bytes(&b), Err(Error::Format(_))));
        let mut c = Container::new();
        c.push("x", vec![1, 2, 3]);
        let b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn network_roundtrip() {
        let opts = NetworkOptions {
            biases: true,
            rescale: RescaleStrategy::Smart,
            mask_last_layer: false,
            ..NetworkOptions::default()
        };
        let shape = ConvShape { width_divisor: 16, height: 8, width: 8, ..ConvShape::default() };
        let mut net = build_conv_family_with(ConvVariant::Conv2, 4, 3, &shape, &opts).unwrap();
        for l in net.layers_mut() {
            l.mask.m_hat.values_mut()[0] = 1.25;
            l.rescale.scale.values_mut()[0] = 0.75;
        }
        let c = network_to_container(&net, Some(&RunConfig::default())).unwrap();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        let (net2, cfg) = network_from_container(&back).unwrap();
        assert_eq!(cfg, Some(RunConfig::default()));
        assert_eq!(net.frozen_hash(), net2.frozen_hash());
        for (a, b) in net.layers().zip(net2.layers()) {
            assert_eq!(a.mask.trainable, b.mask.trainable);
            if a.mask.trainable {
                assert_eq!(a.mask.m_hat.values(), b.mask.m_hat.values());
            }
            assert_eq!(a.rescale.scale.values(), b.rescale.scale.values());
            assert_eq!(a.kind, b.kind);
        }
    }
}
