//! Convolutional backbone: five groups of residual conv blocks forming a
//! factor-2 pyramid. Every block's output is kept so the decoder can fuse
//! densely; groups 2..=5 are exposed.

use rand_chacha::ChaCha8Rng;

use crate::elem::Element;
use crate::error::{Error, Result};
use crate::model::{uniform_init, BoundParams, ParamSet};
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

/// One group of the backbone: `blocks` residual conv blocks, the first of
/// which downsamples by `stride`.
#[derive(Clone, Copy, Debug)]
pub struct GroupSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub groups: [GroupSpec; 5],
    /// (H, W) in pixels.
    pub input_size: (usize, usize),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let channels = [16, 32, 64, 96, 128];
        EncoderConfig {
            groups: channels.map(|c| GroupSpec {
                blocks: 2,
                channels: c,
                stride: 2,
            }),
            input_size: (224, 320),
        }
    }
}

impl EncoderConfig {
    /// Skeleton widths on a 64x64 input, small enough for finite differences.
    pub fn toy() -> Self {
        let channels = [4, 5, 6, 7, 8];
        EncoderConfig {
            groups: channels.map(|c| GroupSpec {
                blocks: 1,
                channels: c,
                stride: 2,
            }),
            input_size: (64, 64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (g, spec) in self.groups.iter().enumerate() {
            if spec.blocks == 0 {
                return Err(Error::invalid(format!("group {} has zero blocks", g + 1)));
            }
            if spec.channels == 0 {
                return Err(Error::invalid(format!("group {} has zero channels", g + 1)));
            }
            if spec.stride != 2 {
                return Err(Error::invalid(format!(
                    "group {} stride {} breaks the factor-2 pyramid",
                    g + 1,
                    spec.stride
                )));
            }
        }
        Ok(())
    }

    /// Channel count of the exposed scale `l` (2..=5).
    pub fn scale_channels(&self, scale: usize) -> usize {
        self.groups[scale - 1].channels
    }

    /// Spatial extents of scale `l` for this config's input size.
    pub fn scale_extent(&self, scale: usize) -> (usize, usize) {
        let (h, w) = self.input_size;
        (h >> scale, w >> scale)
    }
}

/// Block outputs of the exposed groups. `scales[s]` holds scale `s + 2`,
/// for s in 0..4; all entries of one scale share spatial extents.
pub struct FeaturePyramid {
    pub scales: Vec<ScaleBlocks>,
}

pub struct ScaleBlocks {
    /// Pyramid level, 2..=5.
    pub scale: usize,
    pub blocks: Vec<Var>,
}

impl FeaturePyramid {
    /// Blocks of pyramid level `scale` (2..=5).
    pub fn at_scale(&self, scale: usize) -> &ScaleBlocks {
        &self.scales[scale - 2]
    }
}

fn conv_name(g: usize, b: usize, part: &str) -> String {
    format!("encoder.g{g}.b{b}.{part}")
}

/// Registers all encoder parameters, drawing weights from `rng` in a fixed
/// order. Biases start at zero.
pub fn init_params<E: Element>(cfg: &EncoderConfig, rng: &mut ChaCha8Rng, params: &mut ParamSet<E>) {
    let mut c_in = 3;
    for (gi, spec) in cfg.groups.iter().enumerate() {
        let g = gi + 1;
        for b in 0..spec.blocks {
            let stride = if b == 0 { spec.stride } else { 1 };
            params.add(
                conv_name(g, b, "conv.weight"),
                uniform_init(vec![spec.channels, c_in, 3, 3], c_in * 9, spec.channels * 9, rng),
            );
            params.add(conv_name(g, b, "conv.bias"), Tensor::zeros(vec![spec.channels]));
            if stride != 1 || c_in != spec.channels {
                params.add(
                    conv_name(g, b, "proj.weight"),
                    uniform_init(vec![spec.channels, c_in, 1, 1], c_in, spec.channels, rng),
                );
            }
            c_in = spec.channels;
        }
    }
}

/// Forward pass. Returns block outputs for groups 2..=5.
pub fn encode<E: Element>(
    tape: &mut GradientTape<E>,
    bound: &BoundParams,
    image: Var,
    cfg: &EncoderConfig,
) -> Result<FeaturePyramid> {
    cfg.validate()?;
    let shape = tape.value(image).shape().to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::shape(format!("encoder expects rank-3 [3,H,W], got {shape:?}")));
    };
    if c != 3 {
        return Err(Error::shape(format!("encoder expects 3 input channels, got {c}")));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::invalid(format!(
            "input {h}x{w} not divisible by 32"
        )));
    }

    let mut x = image;
    let mut c_in = 3usize;
    let mut scales = Vec::new();
    for (gi, spec) in cfg.groups.iter().enumerate() {
        let g = gi + 1;
        let mut blocks = Vec::new();
        for b in 0..spec.blocks {
            let stride = if b == 0 { spec.stride } else { 1 };
            let wv = bound.var(&conv_name(g, b, "conv.weight"))?;
            let bv = bound.var(&conv_name(g, b, "conv.bias"))?;
            let conv = tape.conv2d(x, wv, Some(bv), stride, 1, 1)?;
            let skip = if stride != 1 || c_in != spec.channels {
                let pv = bound.var(&conv_name(g, b, "proj.weight"))?;
                tape.conv2d(x, pv, None, stride, 0, 1)?
            } else {
                x
            };
            let sum = tape.add(conv, skip)?;
            x = tape.relu(sum);
            blocks.push(x);
            c_in = spec.channels;
        }
        if g >= 2 {
            scales.push(ScaleBlocks { scale: g, blocks });
        }
    }
    Ok(FeaturePyramid { scales })
}
