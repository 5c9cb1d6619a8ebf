//! Versioned binary checkpoint.
//!
//! ```text
//! magic "ARNETCKP" | u32 version | u32 len | metadata JSON | 32-byte SHA-256 of the config JSON
//! u32 spec count | (u32 kh, u32 kw)*
//! u32 param count | (u32 name len | name | 4 x u32 dims | f32 values)*
//! u32 moment count | (f32 first moment | f32 second moment)*   shapes as the params
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, TrainConfig, Trainer};
use crate::arconv::KernelSpec;
use crate::arnet::{ARNet, ARNetConfig};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ARNETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Human-readable part of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub network: ARNetConfig,
    pub training: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub adam_step: u64,
    /// Ablation switches that are off in at least one layer.
    pub disabled: Vec<String>,
}

#[derive(Serialize)]
struct DigestInput<'a> {
    network: &'a ARNetConfig,
    training: &'a TrainConfig,
}

fn config_digest(network: &ARNetConfig, training: &TrainConfig) -> Result<[u8; 32]> {
    let json = serde_json::to_vec(&DigestInput { network, training })?;
    Ok(Sha256::digest(&json).into())
}

fn disabled_flags(cfg: &ARNetConfig) -> Vec<String> {
    let mut out = Vec::new();
    for (name, off) in [
        ("hwa", cfg.layers.iter().any(|l| !l.flags.hwa)),
        ("nspa", cfg.layers.iter().any(|l| !l.flags.nspa)),
        ("at", cfg.layers.iter().any(|l| !l.flags.at)),
    ] {
        if off {
            out.push(name.to_string());
        }
    }
    out
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::data(format!("{v} does not fit the checkpoint's 32-bit field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_floats(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a trainer's full state.
pub fn write_checkpoint(t: &Trainer<f32>) -> Result<Vec<u8>> {
    let net_cfg = t.net.config();
    let meta = CheckpointMeta {
        network: net_cfg.clone(),
        training: t.cfg.clone(),
        epoch: t.epoch,
        adam_step: t.adam.step,
        disabled: disabled_flags(net_cfg),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, meta_json.len())?;
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&config_digest(net_cfg, &t.cfg)?);
    let specs = t.net.frozen_specs().unwrap_or_default();
    put_u32(&mut buf, specs.len())?;
    for s in &specs {
        put_u32(&mut buf, s.kh)?;
        put_u32(&mut buf, s.kw)?;
    }
    let params = &t.net.params;
    put_u32(&mut buf, params.len())?;
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name);
        for d in params.value(id).shape().dims() {
            put_u32(&mut buf, d)?;
        }
        put_floats(&mut buf, params.value(id));
    }
    put_u32(&mut buf, t.adam.m.len())?;
    for (m, v) in t.adam.m.iter().zip(&t.adam.v) {
        put_floats(&mut buf, m);
        put_floats(&mut buf, v);
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    }

    fn floats(&mut self, shape: Shape, what: &str) -> Result<Tensor<f32>> {
        let n = shape.numel();
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.fail("tensor size overflow"))?, what)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        Tensor::from_vec(shape, data)
    }
}

/// Rebuild a trainer from checkpoint bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Trainer<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("not an ARNet checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32("metadata length")?;
    let meta_start = r.pos;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| Error::Format {
        offset: meta_start as u64,
        msg: format!("metadata: {e}"),
    })?;
    let digest_at = r.pos;
    if r.take(32, "config digest")? != config_digest(&meta.network, &meta.training)? {
        r.pos = digest_at;
        return Err(r.fail("config digest does not match the metadata"));
    }
    let mut net = ARNet::<f32>::new(meta.network.clone())?;
    let spec_count = r.u32("spec count")?;
    let mut specs = Vec::with_capacity(spec_count.min(64));
    for _ in 0..spec_count {
        let at = r.pos;
        let spec = KernelSpec::new(r.u32("spec")?, r.u32("spec")?);
        if spec.validate(meta.network.k_max).is_err() {
            r.pos = at;
            return Err(r.fail(format!("invalid kernel spec {spec}")));
        }
        specs.push(spec);
    }
    if !specs.is_empty() {
        let at = r.pos;
        net.freeze(&specs).map_err(|e| Error::Format {
            offset: at as u64,
            msg: e.to_string(),
        })?;
    }
    let count = r.u32("parameter count")?;
    if count != net.params.len() {
        r.pos -= 4;
        return Err(r.fail(format!("{count} parameters stored, network has {}", net.params.len())));
    }
    let ids: Vec<_> = net.params.ids().collect();
    for &id in &ids {
        let at = r.pos;
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::Format {
            offset: at as u64,
            msg: "parameter name is not UTF-8".into(),
        })?;
        if name != net.params.name(id) {
            r.pos = at;
            return Err(r.fail(format!("expected parameter {}, found {name}", net.params.name(id))));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("dims")?;
        }
        let shape = Shape::from_dims(dims);
        if shape != net.params.value(id).shape() {
            r.pos = at;
            return Err(r.fail(format!("parameter {name} has shape {shape}, expected {}", net.params.value(id).shape())));
        }
        *net.params.value_mut(id) = r.floats(shape, name)?;
    }
    let moments = r.u32("moment count")?;
    let (mut m, mut v) = (Vec::with_capacity(moments), Vec::with_capacity(moments));
    if moments != 0 && moments != ids.len() {
        r.pos -= 4;
        return Err(r.fail(format!("{moments} optimizer moments for {} parameters", ids.len())));
    }
    for &id in ids.iter().take(moments) {
        let shape = net.params.value(id).shape();
        m.push(r.floats(shape, "first moment")?);
        v.push(r.floats(shape, "second moment")?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let adam = if moments == 0 {
        Adam::new(&net.params)
    } else {
        Adam::restore(&net.params, meta.adam_step, m, v)?
    };
    meta.training.validate()?;
    Ok(Trainer {
        net,
        adam,
        cfg: meta.training,
        epoch: meta.epoch,
    })
}

pub fn save_checkpoint(path: &Path, t: &Trainer<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, write_checkpoint(t)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}

/// Metadata only, without rebuilding the network.
pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("not an ARNet checkpoint"));
    }
    r.u32("version")?;
    let n = r.u32("metadata length")?;
    Ok(serde_json::from_slice(r.take(n, "metadata")?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arconv::AblationFlags;
    use crate::arnet::Topology;
    use crate::autodiff::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trainer() -> Trainer<f32> {
        let mut c = ARNetConfig::with_topology(4, Topology::Miniature);
        c.base_channels = 4;
        c.extractor_width = 4;
        c.set_flags(AblationFlags { at: false, ..AblationFlags::default() });
        let cfg = TrainConfig {
            epochs: 4,
            explore_epochs: 1,
            ..TrainConfig::default()
        };
        Trainer::new(ARNet::new(c).unwrap(), cfg).unwrap()
    }

    fn output(net: &ARNet<f32>) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pan = Tensor::uniform(Shape::new(1, 1, 8, 8), 0.0, 1.0, &mut rng);
        let ms = Tensor::uniform(Shape::new(1, 4, 8, 8), 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (p, m) = (g.constant(pan), g.constant(ms));
        let out = net.forward(&mut g, p, m).unwrap();
        g.value(out.fused).clone()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut t = trainer();
        t.net.freeze(&[KernelSpec::new(3, 5), KernelSpec::new(1, 1), KernelSpec::new(7, 3), KernelSpec::new(3, 3)]).unwrap();
        t.adam.step = 7;
        t.adam.m[0].fill(0.25);
        t.epoch = 2;
        let bytes = write_checkpoint(&t).unwrap();
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back.epoch, 2);
        assert_eq!(back.adam, t.adam);
        assert_eq!(back.net.frozen_specs(), t.net.frozen_specs());
        assert_eq!(output(&back.net).data(), output(&t.net).data());
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
        let meta = read_meta(&bytes).unwrap();
        assert_eq!(meta.disabled, vec!["at".to_string()]);
    }

    #[test]
    fn corruption_is_located() {
        let bytes = write_checkpoint(&trainer()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        match read_checkpoint(&bad) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let cut = &bytes[..bytes.len() - 3];
        match read_checkpoint(cut) {
            Err(Error::Format { offset, msg }) => {
                assert!(offset > 0 && msg.contains("truncated"), "{offset} {msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes.clone();
        let meta_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        bad[16 + meta_len] ^= 1;
        match read_checkpoint(&bad) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset as usize, 16 + meta_len);
                assert!(msg.contains("digest"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
