//! Backbone checkpoint. Little-endian, floats raw `f32`.
//!
//! ```text
//! "BA2B", u16 version = 1
//! u32 in_channels, u32 height, u32 width, u32 stage count, stage widths (u32 each), u32 blocks per stage
//! architecture hash           32 bytes
//! per conv layer              kernel f32 × rows·cols·C_in·C_out (shape implied by the architecture)
//! per conv layer              u32 C_out, gamma, beta, running mean, running var
//! classifier                  u32 features, u32 classes, weight, bias
//! ```

use std::path::Path;

use crate::arch::{Architecture, ResNetConfig};
use crate::error::{Result, StoreError};
use crate::model::{Backbone, BnParams, Head};
use crate::ops::RunningStats;
use crate::scalar::Scalar;
use crate::store::codec::{read_file, write_atomic, Reader, Writer};
use crate::tensor::{Kernel, Shape4, Tensor};

pub const BACKBONE_MAGIC: [u8; 4] = *b"BA2B";
pub const BACKBONE_VERSION: u16 = 1;

pub fn encode_backbone<T: Scalar>(backbone: &Backbone<T>) -> Result<Vec<u8>> {
    backbone.validate()?;
    let arch = backbone.arch();
    let cfg = arch.config();
    let mut w = Writer::default();
    w.bytes(&BACKBONE_MAGIC);
    w.u16(BACKBONE_VERSION);
    w.u32(cfg.in_channels);
    w.u32(cfg.height);
    w.u32(cfg.width);
    w.u32(cfg.widths.len());
    for &c in &cfg.widths {
        w.u32(c);
    }
    w.u32(cfg.blocks_per_stage);
    w.bytes(&arch.hash());
    for k in &backbone.kernels {
        w.floats(k.tensor().data());
    }
    for bn in &backbone.bn {
        w.u32(bn.channels());
        w.floats(&bn.gamma);
        w.floats(&bn.beta);
        w.floats(&bn.stats.mean);
        w.floats(&bn.stats.var);
    }
    w.u32(backbone.head.features());
    w.u32(backbone.head.classes());
    w.floats(backbone.head.weight.data());
    w.floats(&backbone.head.bias);
    Ok(w.buf)
}

pub fn decode_backbone<T: Scalar>(bytes: &[u8]) -> Result<Backbone<T>> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.array()?;
    if magic != BACKBONE_MAGIC {
        return Err(StoreError::BadMagic { expected: BACKBONE_MAGIC, found: magic }.into());
    }
    let version = r.u16()?;
    if version != BACKBONE_VERSION {
        return Err(StoreError::BadVersion(version).into());
    }
    let in_channels = r.u32()?;
    let height = r.u32()?;
    let width = r.u32()?;
    let stages = r.u32()?;
    let widths = (0..stages).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let blocks_per_stage = r.u32()?;
    let arch = Architecture::new(ResNetConfig { in_channels, height, width, widths, blocks_per_stage })
        .map_err(|e| StoreError::Malformed(e.to_string()))?;
    let hash: [u8; 32] = r.array()?;
    if hash != arch.hash() {
        return Err(StoreError::ArchitectureHash { file: hex::encode(hash), backbone: arch.hash_hex() }.into());
    }
    let mut kernels = Vec::with_capacity(arch.num_convs());
    for c in arch.convs() {
        let t = Tensor::from_vec(Shape4::new(c.rows, c.cols, c.c_in, c.c_out), r.floats(c.kernel_len())?)?;
        kernels.push(Kernel::new(t)?);
    }
    let mut bn = Vec::with_capacity(arch.num_convs());
    for (l, c) in arch.convs().iter().enumerate() {
        let channels = r.u32()?;
        if channels != c.c_out {
            return Err(StoreError::Malformed(format!("layer {l}: batch norm width {channels}")).into());
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
        return Err(StoreError::Malformed(format!("classifier {features}x{classes}")).into());
    }
    let weight = Tensor::from_vec(Shape4::new(1, 1, features, classes), r.floats(features * classes)?)?;
    let bias = r.floats(classes)?;
    r.finish()?;
    Backbone::from_parts(arch, kernels, bn, Head { weight, bias })
}

pub fn save_backbone<T: Scalar>(path: &Path, backbone: &Backbone<T>) -> Result<()> {
    write_atomic(path, &encode_backbone(backbone)?)?;
    Ok(())
}

pub fn load_backbone<T: Scalar>(path: &Path) -> Result<Backbone<T>> {
    decode_backbone(&read_file(path)?)
}
