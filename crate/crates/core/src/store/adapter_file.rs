//! Adapter file, version 1. All integers little-endian, floats raw IEEE-754 `f32`.
//!
//! ```text
//! "BA2A"                      4 bytes
//! version = 1                 u16
//! architecture hash           32 bytes (SHA-256 of the layer-shape descriptor)
//! domain length, domain       u32, UTF-8 bytes
//! budget                      f32
//! layer count L               u32
//! L × switches                u32 C_in, ceil(C_in/8) bytes, LSB-first, zero padding
//! L × batch norm              u32 C_out, gamma, beta, running mean, running var (C_out f32 each)
//! classifier                  u32 features, u32 classes, weight (features·classes f32), bias (classes f32)
//! ```
//!
//! Only the binarized switches are stored; a loaded adapter holds `±SWITCH_INIT`
//! relaxed values, which binarize to the same gate.

use std::path::Path;

use crate::arch::Architecture;
use crate::budget::Budget;
use crate::error::{Error, Result, StoreError};
use crate::model::{BnParams, DomainAdapter, Head};
use crate::ops::RunningStats;
use crate::scalar::Scalar;
use crate::store::codec::{read_file, write_atomic, Reader, Writer};
use crate::store::packing::{pack_switches, packed_len, unpack_switches};
use crate::switch::SwitchVector;
use crate::tensor::{Shape4, Tensor};

pub const ADAPTER_MAGIC: [u8; 4] = *b"BA2A";
pub const ADAPTER_VERSION: u16 = 1;

pub fn encode_adapter<T: Scalar>(adapter: &DomainAdapter<T>, arch: &Architecture) -> Result<Vec<u8>> {
    adapter.check(arch)?;
    let mut w = Writer::default();
    w.bytes(&ADAPTER_MAGIC);
    w.u16(ADAPTER_VERSION);
    w.bytes(&arch.hash());
    w.u32(adapter.domain.len());
    w.bytes(adapter.domain.as_bytes());
    w.f32(adapter.budget.as_f32());
    w.u32(adapter.switches.len());
    for s in &adapter.switches {
        w.u32(s.len());
        w.bytes(&pack_switches(s.gate()));
    }
    for bn in &adapter.bn {
        w.u32(bn.channels());
        w.floats(&bn.gamma);
        w.floats(&bn.beta);
        w.floats(&bn.stats.mean);
        w.floats(&bn.stats.var);
    }
    w.u32(adapter.head.features());
    w.u32(adapter.head.classes());
    w.floats(adapter.head.weight.data());
    w.floats(&adapter.head.bias);
    Ok(w.buf)
}

pub fn decode_adapter<T: Scalar>(bytes: &[u8], arch: &Architecture) -> Result<DomainAdapter<T>> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.array()?;
    if magic != ADAPTER_MAGIC {
        return Err(StoreError::BadMagic { expected: ADAPTER_MAGIC, found: magic }.into());
    }
    let version = r.u16()?;
    if version != ADAPTER_VERSION {
        return Err(StoreError::BadVersion(version).into());
    }
    let hash: [u8; 32] = r.array()?;
    if hash != arch.hash() {
        return Err(StoreError::ArchitectureHash { file: hex::encode(hash), backbone: arch.hash_hex() }.into());
    }
    let len = r.u32()?;
    let domain = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| StoreError::Malformed("domain id is not UTF-8".into()))?;
    let budget = Budget::from_f32(r.f32()?).map_err(|e| StoreError::Malformed(e.to_string()))?;
    let convs = arch.convs();
    let layers = r.u32()?;
    if layers != convs.len() {
        return Err(malformed(format!("{layers} layers, architecture has {}", convs.len())));
    }
    let mut switches = Vec::with_capacity(layers);
    for (l, spec) in convs.iter().enumerate() {
        let channels = r.u32()?;
        if channels != spec.c_in {
            return Err(malformed(format!("layer {l}: {channels} switches for {} input channels", spec.c_in)));
        }
        let gate = unpack_switches(r.take(packed_len(channels))?, channels)?;
        switches.push(SwitchVector::from_gate(&gate));
    }
    let mut bn = Vec::with_capacity(layers);
    for (l, spec) in convs.iter().enumerate() {
        let channels = r.u32()?;
        if channels != spec.c_out {
            return Err(malformed(format!("layer {l}: batch norm width {channels}, expected {}", spec.c_out)));
        }
        let gamma = r.floats(channels)?;
        let beta = r.floats(channels)?;
        let mean = r.floats(channels)?;
        let var = r.floats(channels)?;
        bn.push(BnParams { gamma, beta, stats: RunningStats { mean, var } });
    }
    let features = r.u32()?;
    let classes = r.u32()?;
    if features != arch.feature_dim() || classes == 0 {
        return Err(malformed(format!("classifier {features}x{classes}")));
    }
    let weight = Tensor::from_vec(Shape4::new(1, 1, features, classes), r.floats(features * classes)?)?;
    let bias = r.floats(classes)?;
    r.finish()?;
    Ok(DomainAdapter { domain, budget, switches, bn, head: Head { weight, bias } })
}

fn malformed(msg: String) -> Error {
    StoreError::Malformed(msg).into()
}

/// Exact byte size of an adapter file for `arch`.
pub fn adapter_file_size(arch: &Architecture, domain: &str, classes: usize) -> usize {
    let header = 4 + 2 + 32 + 4 + domain.len() + 4 + 4;
    let switches: usize = arch.convs().iter().map(|c| 4 + packed_len(c.c_in)).sum();
    let bn: usize = arch.convs().iter().map(|c| 4 + 4 * 4 * c.c_out).sum();
    let head = 8 + 4 * (arch.feature_dim() * classes + classes);
    header + switches + bn + head
}

pub fn save_adapter<T: Scalar>(path: &Path, adapter: &DomainAdapter<T>, arch: &Architecture) -> Result<()> {
    write_atomic(path, &encode_adapter(adapter, arch)?)?;
    Ok(())
}

pub fn load_adapter<T: Scalar>(path: &Path, arch: &Architecture) -> Result<DomainAdapter<T>> {
    decode_adapter(&read_file(path)?, arch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ResNetConfig;
    use crate::model::Backbone;

    fn setup() -> (Backbone<f32>, DomainAdapter<f32>) {
        let cfg = ResNetConfig { in_channels: 3, height: 8, width: 8, widths: vec![4, 9], blocks_per_stage: 1 };
        let backbone = Backbone::init(Architecture::new(cfg).unwrap(), 5, 1);
        let mut adapter = DomainAdapter::new(&backbone, "digits", Budget::new(0.5).unwrap(), 3, 2);
        adapter.switches[1].update(|s| s[0] = -1.0);
        (backbone, adapter)
    }

    #[test]
    fn size_formula_matches_encoding() {
        let (backbone, adapter) = setup();
        let bytes = encode_adapter(&adapter, backbone.arch()).unwrap();
        assert_eq!(bytes.len(), adapter_file_size(backbone.arch(), "digits", 3));
    }

    #[test]
    fn decode_restores_gates_and_floats() {
        let (backbone, adapter) = setup();
        let bytes = encode_adapter(&adapter, backbone.arch()).unwrap();
        let back: DomainAdapter<f32> = decode_adapter(&bytes, backbone.arch()).unwrap();
        assert_eq!(back.gates(), adapter.gates());
        assert_eq!(back.bn, adapter.bn);
        assert_eq!(back.head, adapter.head);
        assert_eq!(encode_adapter(&back, backbone.arch()).unwrap(), bytes);
    }

    #[test]
    fn distinct_errors() {
        let (backbone, adapter) = setup();
        let arch = backbone.arch();
        let bytes = encode_adapter(&adapter, arch).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_adapter::<f32>(&bad, arch), Err(Error::Store(StoreError::BadMagic { .. }))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_adapter::<f32>(&bad, arch), Err(Error::Store(StoreError::BadVersion(9)))));

        let other = Architecture::new(ResNetConfig { widths: vec![4, 10], ..arch.config().clone() }).unwrap();
        assert!(matches!(
            decode_adapter::<f32>(&bytes, &other),
            Err(Error::Store(StoreError::ArchitectureHash { .. }))
        ));

        assert!(matches!(
            decode_adapter::<f32>(&bytes[..bytes.len() - 3], arch),
            Err(Error::Store(StoreError::Truncated { .. }))
        ));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_adapter::<f32>(&long, arch), Err(Error::Store(StoreError::TrailingBytes(1)))));
    }
}
