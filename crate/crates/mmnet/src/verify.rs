//! Independent oracles and gradient-check utilities.
//!
//! Everything here recomputes results by a different route than the
//! production kernels: nested loops instead of GEMM, the cubic convolution
//! kernel function instead of tap tables, central finite differences instead
//! of adjoints. The test suites and the `selftest` subcommand both run
//! against these.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

/// Direct nested-loop cross-correlation, the oracle for `conv2d`.
pub fn conv2d_oracle(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Tensor<f64> {
    let [c_in, h, w] = *input.shape() else { panic!("rank 3 input") };
    let [c_out, _, kh, kw] = *weight.shape() else { panic!("rank 4 weight") };
    let ho = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let wo = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros(vec![c_out, ho, wo]);
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias.map(|b| b.data()[co]).unwrap_or(0.0);
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky * dil) as isize - pad as isize;
                            let ix = (ox * stride + kx * dil) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += input.at(&[ci, iy as usize, ix as usize])
                                * weight.at(&[co, ci, ky, kx]);
                        }
                    }
                }
                out.set(&[co, oy, ox], acc);
            }
        }
    }
    out
}

/// Direct scatter transposed convolution, the oracle for `deconv2d`.
pub fn deconv2d_oracle(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [c_in, h, w] = *input.shape() else { panic!("rank 3 input") };
    let [_, c_out, kh, kw] = *weight.shape() else { panic!("rank 4 weight") };
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (w - 1) * stride + kw - 2 * pad;
    let mut out = Tensor::zeros(vec![c_out, ho, wo]);
    for ci in 0..c_in {
        for y in 0..h {
            for x in 0..w {
                let v = input.at(&[ci, y, x]);
                for co in 0..c_out {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let oy = (y * stride + ky) as isize - pad as isize;
                            let ox = (x * stride + kx) as isize - pad as isize;
                            if oy < 0 || oy >= ho as isize || ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            let idx = [co, oy as usize, ox as usize];
                            out.set(&idx, out.at(&idx) + v * weight.at(&[ci, co, ky, kx]));
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let idx = [co, oy, ox];
                    out.set(&idx, out.at(&idx) + b.data()[co]);
                }
            }
        }
    }
    out
}

/// Triple-loop matrix product, the oracle for `matmul`.
pub fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [m, k] = *a.shape() else { panic!("rank 2") };
    let [_, n] = *b.shape() else { panic!("rank 2") };
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out.set(&[i, j], acc);
        }
    }
    out
}

/// Quadruple-loop 4-D correlation, the oracle for `correlate`.
pub fn correlate_oracle(xs: &Tensor<f64>, xt: &Tensor<f64>) -> Tensor<f64> {
    let [c, hs, ws] = *xs.shape() else { panic!("rank 3") };
    let [_, ht, wt] = *xt.shape() else { panic!("rank 3") };
    let mut out = Tensor::zeros(vec![hs, ws, ht, wt]);
    for i in 0..hs {
        for j in 0..ws {
            for m in 0..ht {
                for n in 0..wt {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += xs.at(&[ch, i, j]) * xt.at(&[ch, m, n]);
                    }
                    out.set(&[i, j, m, n], acc);
                }
            }
        }
    }
    out
}

/// Keys cubic convolution kernel with a = -0.5 (Catmull-Rom).
pub fn cubic_kernel(x: f64) -> f64 {
    let a = -0.5;
    let ax = x.abs();
    if ax <= 1.0 {
        (a + 2.0) * ax * ax * ax - (a + 3.0) * ax * ax + 1.0
    } else if ax < 2.0 {
        a * ax * ax * ax - 5.0 * a * ax * ax + 8.0 * a * ax - 4.0 * a
    } else {
        0.0
    }
}

/// One half-pixel-aligned bicubic doubling pass along `axis`, evaluated
/// through the kernel function with edge-clamped sampling.
pub fn upscale_axis_oracle(t: &Tensor<f64>, axis: usize) -> Tensor<f64> {
    let shape = t.shape();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = 2 * n;
    let mut out = Tensor::zeros(out_shape);
    for ou in 0..outer {
        for o in 0..2 * n {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let base = src.floor() as isize;
            for inn in 0..inner {
                let mut acc = 0.0;
                for k in -1..=2isize {
                    let pos = base + k;
                    let w = cubic_kernel(src - pos as f64);
                    let idx = pos.clamp(0, n as isize - 1) as usize;
                    acc += w * t.data()[(ou * n + idx) * inner + inn];
                }
                out.data_mut()[(ou * 2 * n + o) * inner + inn] = acc;
            }
        }
    }
    out
}

/// Four sequential 1-D bicubic passes, the oracle for `upscale4d`.
pub fn upscale4d_oracle(t: &Tensor<f64>) -> Tensor<f64> {
    let mut cur = t.clone();
    for axis in 0..4 {
        cur = upscale_axis_oracle(&cur, axis);
    }
    cur
}

/// Symmetrized relative error. Magnitudes below 1e-4 are compared on an
/// absolute scale: central differences on a function of order one carry
/// roundoff noise around 1e-10, which would dominate a true ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / ((a.abs() + b.abs()).max(1e-4))
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Fills a tensor with reproducible uniform values in [-scale, scale].
pub fn random_tensor(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Central finite-difference gradient check.
///
/// Builds the loss once with gradient tracking to obtain analytic
/// gradients, then perturbs every input element by ±h and compares. The
/// closure rebuilds the loss on a fresh tape for every evaluation. Returns
/// the maximum relative error over all elements.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: &F, h: f64) -> Result<f64>
where
    F: Fn(&mut GradientTape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = GradientTape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = GradientTape::<f64>::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[ti].data()[ei];
            worst = worst.max(rel_err(fd, an));
        }
    }
    Ok(worst)
}

/// Finite-difference sweep through the complete objective of a skeleton
/// network supervised at the two coarsest scales: encoder, enhancement,
/// complementation, and the bidirectional cross-entropy loss. Checks up to
/// `coords` random coordinates of every parameter tensor; returns the worst
/// relative error against the tape's gradients.
pub fn network_grad_check(seed: u64, coords: usize, h: f64) -> Result<f64> {
    use crate::encoder::{EncoderConfig, GroupSpec};
    use crate::enhance::{EnhanceConfig, LSAConfig, SEMConfig};
    use crate::matching;
    use crate::model::{Model, ModelConfig, ParamSet};
    use crate::supervision::{pair_loss, TrainConfig};

    let config = ModelConfig {
        encoder: EncoderConfig {
            groups: [1, 1, 2, 2, 2].map(|c| GroupSpec {
                blocks: 1,
                channels: c,
                stride: 2,
            }),
            input_size: (64, 64),
        },
        enhance: EnhanceConfig {
            sem: SEMConfig {
                dilations: vec![1],
                branch_channels: 2,
                out_channels: 2,
            },
            lsa: LSAConfig {
                r: 3,
                inner_channels: 1,
                io_channels: 2,
            },
            lsa_enabled: true,
            dense_fusion: true,
            cross_scale: true,
        },
        eval_scale: None,
        complementation: true,
    };
    let mut model = Model::<f64>::init(config, seed)?;
    // Zero-initialized biases put the objective exactly on ReLU kinks (a
    // whole channel shifts through zero at once); check at a generic point.
    for (i, t) in model.params.tensors_mut().iter_mut().enumerate() {
        let noise = random_tensor(t.shape().to_vec(), seed.wrapping_mul(131) + i as u64, 0.05);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let source = random_tensor(vec![3, 64, 64], seed.wrapping_mul(7) + 1, 0.5);
    let target = random_tensor(vec![3, 64, 64], seed.wrapping_mul(7) + 2, 0.5);
    let src_kps = [(33.0, 17.0)];
    let tgt_kps = [(20.5, 41.0)];
    let cfg = TrainConfig {
        supervised_scales: vec![4, 5],
        ..TrainConfig::default()
    };

    let loss_of = |params: &ParamSet<f64>| -> Result<f64> {
        let mut tape = GradientTape::<f64>::new();
        let bound = params.bind(&mut tape, false);
        let (src, tgt) = model.enhanced_pair(&mut tape, &bound, &source, &target)?;
        let scores = matching::accumulate_scores_from(&mut tape, &src, &tgt, true, 4)?;
        let (loss, _) = pair_loss(&mut tape, &src, &tgt, &scores, &src_kps, &tgt_kps, &cfg)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = GradientTape::<f64>::new();
    let bound = model.params.bind(&mut tape, true);
    let (src, tgt) = model.enhanced_pair(&mut tape, &bound, &source, &target)?;
    let scores = matching::accumulate_scores_from(&mut tape, &src, &tgt, true, 4)?;
    let (loss, _) = pair_loss(&mut tape, &src, &tgt, &scores, &src_kps, &tgt_kps, &cfg)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = bound
        .ordered_vars()
        .iter()
        .map(|&(_, v)| {
            tape.grad(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
        })
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut work = model.params.clone();
    let mut worst = 0.0f64;
    for ti in 0..work.len() {
        let numel = work.tensors()[ti].numel();
        for _ in 0..coords.min(numel) {
            let ei = rng.random_range(0..numel);
            let orig = work.tensors()[ti].data()[ei];
            work.tensors_mut()[ti].data_mut()[ei] = orig + h;
            let fp = loss_of(&work)?;
            work.tensors_mut()[ti].data_mut()[ei] = orig - h;
            let fm = loss_of(&work)?;
            work.tensors_mut()[ti].data_mut()[ei] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(fd, analytic[ti].data()[ei]));
        }
    }
    Ok(worst)
}

/// Quick oracle and gradient sweep for the `selftest` subcommand; prints
/// one line per check and fails fast on the first discrepancy.
pub fn run_selftest() -> Result<()> {
    use crate::error::Error;

    let check = |name: &str, err: f64, tol: f64| -> Result<()> {
        if err <= tol && err.is_finite() {
            println!("selftest: {name} ok (err {err:.3e})");
            Ok(())
        } else {
            Err(Error::invalid(format!("selftest: {name} FAILED (err {err:.3e} > {tol:.1e})")))
        }
    };

    // conv2d against the nested-loop oracle
    let x = random_tensor(vec![3, 9, 11], 1, 1.0);
    let w = random_tensor(vec![4, 3, 3, 3], 2, 0.5);
    let b = random_tensor(vec![4], 3, 0.5);
    let mut tape = GradientTape::<f64>::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = tape.constant(b.clone());
    let out = tape.conv2d(xv, wv, Some(bv), 2, 1, 1)?;
    let want = conv2d_oracle(&x, &w, Some(&b), 2, 1, 1);
    check("conv2d oracle", max_abs_diff(tape.value(out), &want), 1e-10)?;

    // conv/deconv adjoint identity
    let y = random_tensor(vec![4, 5, 6], 4, 1.0);
    check(
        "conv adjoint identity",
        conv_adjoint_discrepancy(&x, &w, &y, 2, 1)?,
        1e-9,
    )?;

    // 4-D correlation against the quadruple loop
    let xs = random_tensor(vec![21, 3, 4], 5, 1.0);
    let xt = random_tensor(vec![21, 3, 4], 6, 1.0);
    let mut tape = GradientTape::<f64>::new();
    let a = tape.constant(xs.clone());
    let bt = tape.constant(xt.clone());
    let corr = tape.correlate(a, bt)?;
    check(
        "correlate oracle",
        max_abs_diff(tape.value(corr), &correlate_oracle(&xs, &xt)),
        1e-10,
    )?;

    // separable bicubic upscaling against the kernel-function oracle
    let s = random_tensor(vec![3, 3, 3, 3], 7, 1.0);
    let mut tape = GradientTape::<f64>::new();
    let sv = tape.constant(s.clone());
    let up = tape.upscale4d(sv)?;
    check(
        "upscale4d oracle",
        max_abs_diff(tape.value(up), &upscale4d_oracle(&s)),
        1e-9,
    )?;

    // gradient checks through representative ops
    let gc_conv = grad_check(
        &[
            random_tensor(vec![2, 5, 6], 8, 1.0),
            random_tensor(vec![3, 2, 3, 3], 9, 0.5),
        ],
        &|tape, vars| {
            let c = tape.conv2d(vars[0], vars[1], None, 1, 1, 1)?;
            let r = tape.relu(c);
            tape.sum_of_squares(r)
        },
        1e-5,
    )?;
    check("conv+relu gradient", gc_conv, 1e-4)?;

    let gc_attn = grad_check(
        &[random_tensor(vec![4, 3, 3], 10, 1.0)],
        &|tape, vars| {
            let g = tape.gather_neighborhood(vars[0], 3)?;
            let g = tape.reshape(g, vec![4, 9, 9])?;
            let q = tape.reshape(vars[0], vec![4, 9])?;
            let logits = tape.cellwise_dot(q, g)?;
            let attn = tape.softmax(logits, &[1])?;
            let ctx = tape.cellwise_weighted_sum(g, attn)?;
            tape.sum_of_squares(ctx)
        },
        1e-5,
    )?;
    check("attention gradient", gc_attn, 1e-4)?;

    let gc_match = grad_check(
        &[
            random_tensor(vec![3, 4, 4], 11, 1.0),
            random_tensor(vec![3, 4, 4], 12, 1.0),
        ],
        &|tape, vars| {
            let corr = tape.correlate(vars[0], vars[1])?;
            let up = tape.upscale4d(corr)?;
            let slice = tape.slice_source(up, 1, 2)?;
            let prob = tape.softmax(slice, &[0, 1])?;
            let target = crate::tensor::Tensor::filled(vec![8, 8], 1.0 / 64.0);
            tape.bce_loss(prob, target)
        },
        1e-5,
    )?;
    check("correlation/upscale/bce gradient", gc_match, 1e-4)?;

    println!("selftest: all checks passed");
    Ok(())
}

/// Inner-product adjoint identity `<conv(x), y> == <x, deconv(y)>` for a
/// shared weight tensor; returns the absolute discrepancy.
pub fn conv_adjoint_discrepancy(
    x: &Tensor<f64>,
    weight: &Tensor<f64>,
    y: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Result<f64> {
    let mut tape = GradientTape::<f64>::new();
    let xv = tape.constant(x.clone());
    // conv reads the weight as [C_out, C_in, kh, kw]
    let wv = tape.constant(weight.clone());
    let conv = tape.conv2d(xv, wv, None, stride, pad, 1)?;
    let yv = tape.constant(y.clone());
    // deconv reads the same buffer as [C_in=C_out_conv, C_out=C_in_conv, kh, kw]
    let [c_out, c_in, kh, kw] = *weight.shape() else { unreachable!() };
    let wt = tape.constant(weight.clone().reshaped(vec![c_out, c_in, kh, kw])?);
    let deconv = tape.deconv2d(yv, wt, None, stride, pad)?;
    let lhs: f64 = tape
        .value(conv)
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| a * b)
        .sum();
    let rhs: f64 = tape
        .value(deconv)
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| a * b)
        .sum();
    Ok((lhs - rhs).abs())
}
