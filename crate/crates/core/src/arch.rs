//! Structure of the small residual ConvNet every model in the crate shares.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Stem convolution, then `widths.len()` stages of basic residual blocks,
/// global average pooling, and a linear classifier. Stages after the first
/// halve the spatial extent in their first block, which also carries a 1×1
/// projection shortcut.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig { in_channels: 3, height: 32, width: 32, widths: vec![16, 32, 64], blocks_per_stage: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub rows: usize,
    pub cols: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    fn square(size: usize, c_in: usize, c_out: usize, stride: usize) -> Self {
        ConvSpec { rows: size, cols: size, c_in, c_out, stride, padding: size / 2 }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.rows) / self.stride + 1,
            (w + 2 * self.padding - self.cols) / self.stride + 1,
        )
    }

    pub fn kernel_len(&self) -> usize {
        self.rows * self.cols * self.c_in * self.c_out
    }
}

/// Conv layer indices of one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub first: usize,
    pub second: usize,
    pub projection: Option<usize>,
}

/// A conv layer with its spatial extents resolved for the configured input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub spec: ConvSpec,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    config: ResNetConfig,
    convs: Vec<ConvSpec>,
    blocks: Vec<Block>,
}

impl Architecture {
    pub fn new(config: ResNetConfig) -> Result<Self> {
        if config.in_channels == 0 || config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::Architecture("channel counts must be positive".into()));
        }
        if config.blocks_per_stage == 0 {
            return Err(Error::Architecture("each stage needs at least one block".into()));
        }
        let min_extent = 1usize << (config.widths.len() - 1);
        if config.height < min_extent || config.width < min_extent {
            return Err(Error::Architecture(format!(
                "input {}x{} too small for {} downsampling stages",
                config.height,
                config.width,
                config.widths.len() - 1
            )));
        }
        let mut convs = vec![ConvSpec::square(3, config.in_channels, config.widths[0], 1)];
        let mut blocks = Vec::new();
        let mut c = config.widths[0];
        for (stage, &width) in config.widths.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let first = convs.len();
                convs.push(ConvSpec::square(3, c, width, stride));
                convs.push(ConvSpec::square(3, width, width, 1));
                let projection = (stride != 1 || c != width).then(|| {
                    convs.push(ConvSpec::square(1, c, width, stride));
                    convs.len() - 1
                });
                blocks.push(Block { first, second: first + 1, projection });
                c = width;
            }
        }
        Ok(Architecture { config, convs, blocks })
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }

    pub fn convs(&self) -> &[ConvSpec] {
        &self.convs
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_convs(&self) -> usize {
        self.convs.len()
    }

    /// Width of the pooled feature vector fed to the classifier.
    pub fn feature_dim(&self) -> usize {
        *self.config.widths.last().expect("validated nonempty")
    }

    /// Every conv layer with its input/output extents, in layer order.
    pub fn conv_shapes(&self) -> Vec<ConvShape> {
        let mut extents = vec![(0, 0); self.convs.len()];
        let (mut h, mut w) = (self.config.height, self.config.width);
        extents[0] = (h, w);
        (h, w) = self.convs[0].output_extent(h, w);
        for block in &self.blocks {
            extents[block.first] = (h, w);
            if let Some(p) = block.projection {
                extents[p] = (h, w);
            }
            (h, w) = self.convs[block.first].output_extent(h, w);
            extents[block.second] = (h, w);
        }
        self.convs
            .iter()
            .zip(extents)
            .map(|(&spec, (in_h, in_w))| {
                let (out_h, out_w) = spec.output_extent(in_h, in_w);
                ConvShape { spec, in_h, in_w, out_h, out_w }
            })
            .collect()
    }

    /// Ordered layer-shape descriptor; the architecture hash is its digest.
    pub fn descriptor(&self) -> String {
        let mut d = format!("ba2-resnet;in={};", self.config.in_channels);
        for (i, c) in self.convs.iter().enumerate() {
            d += &format!("conv{i}:{}x{}:{}->{}:s{}:p{};", c.rows, c.cols, c.c_in, c.c_out, c.stride, c.padding);
        }
        for b in &self.blocks {
            match b.projection {
                Some(p) => d += &format!("block:{},{},{};", b.first, b.second, p),
                None => d += &format!("block:{},{};", b.first, b.second),
            }
        }
        d
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.descriptor().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let arch = Architecture::new(ResNetConfig::default()).unwrap();
        // stem + 3 blocks × 2 convs + 2 projections
        assert_eq!(arch.num_convs(), 9);
        let shapes = arch.conv_shapes();
        assert_eq!((shapes[0].out_h, shapes[0].out_w), (32, 32));
        let last = shapes.last().unwrap();
        assert_eq!((last.out_h, last.spec.c_out), (8, 64));
        assert_eq!(arch.feature_dim(), 64);
    }

    #[test]
    fn hash_tracks_structure() {
        let a = Architecture::new(ResNetConfig::default()).unwrap();
        let mut cfg = ResNetConfig::default();
        cfg.widths[1] = 24;
        let b = Architecture::new(cfg).unwrap();
        assert_ne!(a.hash(), b.hash());
        let mut same = ResNetConfig::default();
        same.height = 64;
        assert_eq!(a.hash(), Architecture::new(same).unwrap().hash());
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut cfg = ResNetConfig::default();
        cfg.widths.clear();
        assert!(Architecture::new(cfg).is_err());
        let cfg = ResNetConfig { height: 2, width: 2, ..ResNetConfig::default() };
        assert!(Architecture::new(cfg).is_err());
    }
}
