//! Feature enhancement: per-scale dense fusion of block outputs through
//! dilated-conv scale enhancement modules, local self-attention over an
//! r x r neighborhood, and top-down cross-scale fusion via deconvolution.

use rand_chacha::ChaCha8Rng;

use crate::elem::Element;
use crate::encoder::{EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::model::{uniform_init, BoundParams, ParamSet};
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SEMConfig {
    pub dilations: Vec<usize>,
    pub branch_channels: usize,
    pub out_channels: usize,
}

impl Default for SEMConfig {
    fn default() -> Self {
        SEMConfig {
            dilations: vec![1, 4, 8, 12],
            branch_channels: 32,
            out_channels: 21,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LSAConfig {
    /// Neighborhood side; odd so the window centers on the query cell.
    pub r: usize,
    /// Channel width of the q/k/v projections.
    pub inner_channels: usize,
    /// Channel width entering and leaving the attention block.
    pub io_channels: usize,
}

impl Default for LSAConfig {
    fn default() -> Self {
        LSAConfig {
            r: 5,
            inner_channels: 10,
            io_channels: 21,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnhanceConfig {
    pub sem: SEMConfig,
    pub lsa: LSAConfig,
    pub lsa_enabled: bool,
    /// Fuse every block of a group; when off, only the group's last block
    /// feeds the decoder.
    pub dense_fusion: bool,
    /// Top-down fusion of the coarser enhanced map; when off, each scale is
    /// its intra-scale result alone.
    pub cross_scale: bool,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            sem: SEMConfig::default(),
            lsa: LSAConfig::default(),
            lsa_enabled: true,
            dense_fusion: true,
            cross_scale: true,
        }
    }
}

impl EnhanceConfig {
    pub fn toy() -> Self {
        EnhanceConfig {
            sem: SEMConfig {
                dilations: vec![1, 2],
                branch_channels: 4,
                out_channels: 6,
            },
            lsa: LSAConfig {
                r: 3,
                inner_channels: 3,
                io_channels: 6,
            },
            lsa_enabled: true,
            dense_fusion: true,
            cross_scale: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lsa.r % 2 == 0 || self.lsa.r == 0 {
            return Err(Error::invalid(format!("attention radius {} must be odd", self.lsa.r)));
        }
        if self.lsa.io_channels != self.sem.out_channels {
            return Err(Error::invalid(format!(
                "attention io channels {} must match fused channels {}",
                self.lsa.io_channels, self.sem.out_channels
            )));
        }
        if self.sem.dilations.is_empty() {
            return Err(Error::invalid("sem needs at least one dilation branch"));
        }
        Ok(())
    }
}

fn sem_name(scale: usize, branch: usize, di: usize, part: &str) -> String {
    format!("enhance.s{scale}.br{branch}.sem.d{di}.{part}")
}

fn proj_name(scale: usize, branch: usize, part: &str) -> String {
    format!("enhance.s{scale}.br{branch}.proj.{part}")
}

fn lsa_name(scale: usize, head: &str, part: &str) -> String {
    format!("enhance.s{scale}.lsa.{head}.{part}")
}

fn cross_name(scale: usize, stage: &str, part: &str) -> String {
    format!("enhance.s{scale}.{stage}.{part}")
}

/// Registers all decoder-side enhancement parameters in a fixed order.
pub fn init_params<E: Element>(
    enc: &EncoderConfig,
    cfg: &EnhanceConfig,
    rng: &mut ChaCha8Rng,
    params: &mut ParamSet<E>,
) {
    let c_fused = cfg.sem.out_channels;
    for scale in 2..=5 {
        let spec = enc.groups[scale - 1];
        for branch in 0..spec.blocks {
            for (di, &_d) in cfg.sem.dilations.iter().enumerate() {
                params.add(
                    sem_name(scale, branch, di, "weight"),
                    uniform_init(
                        vec![cfg.sem.branch_channels, spec.channels, 3, 3],
                        spec.channels * 9,
                        cfg.sem.branch_channels * 9,
                        rng,
                    ),
                );
                params.add(
                    sem_name(scale, branch, di, "bias"),
                    Tensor::zeros(vec![cfg.sem.branch_channels]),
                );
            }
            params.add(
                proj_name(scale, branch, "weight"),
                uniform_init(
                    vec![c_fused, cfg.sem.branch_channels, 1, 1],
                    cfg.sem.branch_channels,
                    c_fused,
                    rng,
                ),
            );
            params.add(proj_name(scale, branch, "bias"), Tensor::zeros(vec![c_fused]));
        }
        let ci = cfg.lsa.inner_channels;
        for head in ["q", "k", "v"] {
            params.add(
                lsa_name(scale, head, "weight"),
                uniform_init(vec![ci, c_fused, 1, 1], c_fused, ci, rng),
            );
            params.add(lsa_name(scale, head, "bias"), Tensor::zeros(vec![ci]));
        }
        params.add(
            lsa_name(scale, "g", "weight"),
            uniform_init(vec![c_fused, ci, 1, 1], ci, c_fused, rng),
        );
        params.add(lsa_name(scale, "g", "bias"), Tensor::zeros(vec![c_fused]));
        if scale < 5 {
            // deconv weight layout [C_in, C_out, kh, kw]; no bias before concat
            params.add(
                cross_name(scale, "up", "weight"),
                uniform_init(vec![c_fused, c_fused, 4, 4], c_fused * 4, c_fused * 4, rng),
            );
            params.add(
                cross_name(scale, "fuse", "weight"),
                uniform_init(vec![c_fused, 2 * c_fused, 3, 3], 2 * c_fused * 9, c_fused * 9, rng),
            );
            params.add(cross_name(scale, "fuse", "bias"), Tensor::zeros(vec![c_fused]));
        }
    }
}

/// Dense fusion: each block output runs its own SEM (parallel dilated convs
/// with ReLU, summed) then a 1x1 projection; branch results are summed.
pub fn intra_scale_fuse<E: Element>(
    tape: &mut GradientTape<E>,
    bound: &BoundParams,
    scale: usize,
    blocks: &[Var],
    cfg: &EnhanceConfig,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::invalid("intra-scale fusion needs at least one block"));
    }
    let base = tape.value(blocks[0]).shape().to_vec();
    for &b in blocks {
        if tape.value(b).shape() != base.as_slice() {
            return Err(Error::shape("block outputs disagree on spatial extents"));
        }
    }
    let branches: Vec<usize> = if cfg.dense_fusion {
        (0..blocks.len()).collect()
    } else {
        vec![blocks.len() - 1]
    };
    let mut fused: Option<Var> = None;
    for bi in branches {
        let x = blocks[bi];
        let mut sem: Option<Var> = None;
        for (di, &d) in cfg.sem.dilations.iter().enumerate() {
            let w = bound.var(&sem_name(scale, bi, di, "weight"))?;
            let b = bound.var(&sem_name(scale, bi, di, "bias"))?;
            let conv = tape.conv2d(x, w, Some(b), 1, d, d)?;
            let act = tape.relu(conv);
            sem = Some(match sem {
                Some(acc) => tape.add(acc, act)?,
                None => act,
            });
        }
        let w = bound.var(&proj_name(scale, bi, "weight"))?;
        let b = bound.var(&proj_name(scale, bi, "bias"))?;
        let branch = tape.conv2d(sem.expect("nonempty dilations"), w, Some(b), 1, 0, 1)?;
        fused = Some(match fused {
            Some(acc) => tape.add(acc, branch)?,
            None => branch,
        });
    }
    Ok(fused.expect("nonempty branches"))
}

/// Residual local self-attention over the r x r neighborhood of each cell.
/// Keys and values at out-of-bounds slots are zero vectors and still take
/// part in the softmax.
pub fn local_self_attention<E: Element>(
    tape: &mut GradientTape<E>,
    bound: &BoundParams,
    scale: usize,
    x: Var,
    cfg: &LSAConfig,
) -> Result<Var> {
    let [c, h, w] = tape.value(x).shape().to_vec()[..] else {
        return Err(Error::shape("attention input must be rank 3"));
    };
    if c != cfg.io_channels {
        return Err(Error::shape(format!(
            "attention expects {} channels, got {c}",
            cfg.io_channels
        )));
    }
    let (r, ci) = (cfg.r, cfg.inner_channels);

    let head = |tape: &mut GradientTape<E>, name: &str| -> Result<Var> {
        let wv = bound.var(&lsa_name(scale, name, "weight"))?;
        let bv = bound.var(&lsa_name(scale, name, "bias"))?;
        let conv = tape.conv2d(x, wv, Some(bv), 1, 0, 1)?;
        Ok(tape.relu(conv))
    };
    let q = head(tape, "q")?;
    let k = head(tape, "k")?;
    let v = head(tape, "v")?;

    let q = tape.reshape(q, vec![ci, h * w])?;
    let kn = tape.gather_neighborhood(k, r)?;
    let vn = tape.gather_neighborhood(v, r)?;

    let logits = tape.cellwise_dot(q, kn)?;
    let attn = tape.softmax(logits, &[1])?;
    let ctx = tape.cellwise_weighted_sum(vn, attn)?;
    let ctx = tape.reshape(ctx, vec![ci, h, w])?;

    let gw = bound.var(&lsa_name(scale, "g", "weight"))?;
    let gb = bound.var(&lsa_name(scale, "g", "bias"))?;
    let gated = tape.conv2d(ctx, gw, Some(gb), 1, 0, 1)?;
    tape.add(x, gated)
}

/// Top-down fusion: deconvolve the coarser enhanced map to double extents,
/// concatenate with the finer intra-scale map, and mix with a 3x3 conv.
pub fn cross_scale_fuse<E: Element>(
    tape: &mut GradientTape<E>,
    bound: &BoundParams,
    scale: usize,
    upper: Var,
    intra: Var,
) -> Result<Var> {
    let us = tape.value(upper).shape().to_vec();
    let is = tape.value(intra).shape().to_vec();
    if is[1] != 2 * us[1] || is[2] != 2 * us[2] {
        return Err(Error::shape(format!(
            "cross-scale fusion needs halved extents: upper {us:?} vs intra {is:?}"
        )));
    }
    let uw = bound.var(&cross_name(scale, "up", "weight"))?;
    let up = tape.deconv2d(upper, uw, None, 2, 1)?;
    let cat = tape.concat_channels(up, intra)?;
    let fw = bound.var(&cross_name(scale, "fuse", "weight"))?;
    let fb = bound.var(&cross_name(scale, "fuse", "bias"))?;
    tape.conv2d(cat, fw, Some(fb), 1, 1, 1)
}

/// Runs feature enhancement over the whole pyramid, coarse to fine.
/// Returns the enhanced maps indexed by `scale - 2` (scale 2 first).
pub fn enhance_pyramid<E: Element>(
    tape: &mut GradientTape<E>,
    bound: &BoundParams,
    pyr: &FeaturePyramid,
    cfg: &EnhanceConfig,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let mut out: Vec<Option<Var>> = vec![None; 4];
    let mut prev: Option<Var> = None;
    for scale in (2..=5).rev() {
        let blocks = &pyr.at_scale(scale).blocks;
        let mut intra = intra_scale_fuse(tape, bound, scale, blocks, cfg)?;
        if cfg.lsa_enabled {
            intra = local_self_attention(tape, bound, scale, intra, &cfg.lsa)?;
        }
        let enhanced = match prev {
            Some(upper) if cfg.cross_scale => cross_scale_fuse(tape, bound, scale, upper, intra)?,
            _ => intra,
        };
        out[scale - 2] = Some(enhanced);
        prev = Some(enhanced);
    }
    Ok(out.into_iter().map(|v| v.expect("all scales filled")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::random_tensor;
    use rand::SeedableRng;

    fn toy_params(enc: &EncoderConfig, cfg: &EnhanceConfig, seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_params(enc, cfg, &mut rng, &mut params);
        params
    }

    #[test]
    fn zero_gate_is_identity() {
        let enc = EncoderConfig::toy();
        let cfg = EnhanceConfig::toy();
        let mut params = toy_params(&enc, &cfg, 5);
        let gates: Vec<(String, Vec<usize>)> = params
            .iter()
            .filter(|(n, _)| n.contains(".lsa.g."))
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (name, shape) in gates {
            params.set(&name, Tensor::zeros(shape)).unwrap();
        }
        let x = random_tensor(vec![6, 4, 5], 11, 1.0);
        let mut tape = GradientTape::new();
        let bound = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = local_self_attention(&mut tape, &bound, 3, xv, &cfg.lsa).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn r1_attention_reduces_to_pointwise_path() {
        let enc = EncoderConfig::toy();
        let mut cfg = EnhanceConfig::toy();
        cfg.lsa.r = 1;
        let params = toy_params(&enc, &cfg, 9);
        let x = random_tensor(vec![6, 3, 4], 2, 1.0);

        let mut tape = GradientTape::<f64>::new();
        let bound = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = local_self_attention(&mut tape, &bound, 2, xv, &cfg.lsa).unwrap();

        // with one slot the softmax weight is 1, so the context is F_v(X)
        let mut ref_tape = GradientTape::<f64>::new();
        let rb = params.bind(&mut ref_tape, false);
        let xr = ref_tape.constant(x);
        let vw = rb.var(&lsa_name(2, "v", "weight")).unwrap();
        let vb = rb.var(&lsa_name(2, "v", "bias")).unwrap();
        let vc = ref_tape.conv2d(xr, vw, Some(vb), 1, 0, 1).unwrap();
        let va = ref_tape.relu(vc);
        let gw = rb.var(&lsa_name(2, "g", "weight")).unwrap();
        let gb = rb.var(&lsa_name(2, "g", "bias")).unwrap();
        let g = ref_tape.conv2d(va, gw, Some(gb), 1, 0, 1).unwrap();
        let want = ref_tape.add(xr, g).unwrap();

        let got = tape.value(y);
        let expect = ref_tape.value(want);
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_blocks_double_the_fused_map() {
        let enc = EncoderConfig::toy();
        let cfg = EnhanceConfig::toy();
        let params = toy_params(&enc, &cfg, 3);
        // the toy encoder has one block per group; add a second branch that
        // clones branch 0 so identical inputs contribute identically
        let mut two = ParamSet::<f64>::new();
        for (name, t) in params.iter() {
            two.add(name, t.clone());
        }
        let twins: Vec<(String, Tensor<f64>)> = params
            .iter()
            .filter(|(n, _)| n.starts_with("enhance.s2.br0."))
            .map(|(n, t)| (n.replace(".br0.", ".br1."), t.clone()))
            .collect();
        for (n, t) in twins {
            two.add(n, t);
        }

        let x = random_tensor(vec![5, 4, 6], 8, 1.0);
        let mut tape = GradientTape::new();
        let bound = two.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let single = intra_scale_fuse(&mut tape, &bound, 2, &[xv], &cfg).unwrap();
        let xv2 = tape.constant(x);
        let double = intra_scale_fuse(&mut tape, &bound, 2, &[xv2, xv2], &cfg).unwrap();
        let s = tape.value(single).clone();
        let d = tape.value(double);
        for (a, b) in s.data().iter().zip(d.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pyramid_shapes_and_ablation_flags() {
        let enc = EncoderConfig::toy();
        let cfg = EnhanceConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::<f64>::new();
        crate::encoder::init_params(&enc, &mut rng, &mut params);
        init_params(&enc, &cfg, &mut rng, &mut params);
        let mut tape = GradientTape::<f64>::new();
        let bound = params.bind(&mut tape, false);
        let iv = tape.constant(random_tensor(vec![3, 64, 64], 4, 0.5));
        let pyr = crate::encoder::encode(&mut tape, &bound, iv, &enc).unwrap();
        let enhanced = enhance_pyramid(&mut tape, &bound, &pyr, &cfg).unwrap();
        assert_eq!(enhanced.len(), 4);
        for (i, &e) in enhanced.iter().enumerate() {
            let scale = i + 2;
            let side = 64usize >> scale;
            assert_eq!(tape.value(e).shape(), &[6, side, side]);
        }

        // with cross-scale fusion off, each scale is its intra result alone:
        // scale 5 must agree between the two runs
        let mut off = cfg.clone();
        off.cross_scale = false;
        let plain = enhance_pyramid(&mut tape, &bound, &pyr, &off).unwrap();
        assert_eq!(
            tape.value(enhanced[3]).data(),
            tape.value(plain[3]).data()
        );
        assert_ne!(
            tape.value(enhanced[0]).data(),
            tape.value(plain[0]).data()
        );
    }
}
