//! Oracle and gradient checks for the tensor/tape layer.

use mmnet::tape::{GradientTape, Var};
use mmnet::tensor::Tensor;
use mmnet::verify;
use mmnet::Result;

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

#[test]
fn conv2d_matches_nested_loop_oracle() {
    for seed in 0..SEEDS {
        let input = verify::random_tensor(vec![2, 4, 4], 100 + seed, 1.0);
        let weight = verify::random_tensor(vec![3, 2, 3, 3], 200 + seed, 1.0);
        let bias = verify::random_tensor(vec![3], 300 + seed, 1.0);
        for &(stride, pad, dil) in &[(1, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 2)] {
            let expected = verify::conv2d_oracle(&input, &weight, Some(&bias), stride, pad, dil);
            let mut tape = GradientTape::<f64>::new();
            let x = tape.constant(input.clone());
            let w = tape.constant(weight.clone());
            let b = tape.constant(bias.clone());
            let y = tape.conv2d(x, w, Some(b), stride, pad, dil).unwrap();
            assert!(
                verify::max_abs_diff(tape.value(y), &expected) < 1e-12,
                "seed {seed} stride {stride} pad {pad} dil {dil}"
            );
        }
    }
}

#[test]
fn deconv2d_matches_scatter_oracle() {
    for seed in 0..SEEDS {
        let input = verify::random_tensor(vec![3, 5, 4], 400 + seed, 1.0);
        let weight = verify::random_tensor(vec![3, 2, 4, 4], 500 + seed, 1.0);
        let mut tape = GradientTape::<f64>::new();
        let x = tape.constant(input.clone());
        let w = tape.constant(weight.clone());
        let y = tape.deconv2d(x, w, None, 2, 1).unwrap();
        let expected = verify::deconv2d_oracle(&input, &weight, None, 2, 1);
        assert_eq!(tape.value(y).shape(), &[2, 10, 8]);
        assert!(verify::max_abs_diff(tape.value(y), &expected) < 1e-12, "seed {seed}");
    }
}

#[test]
fn conv_deconv_adjoint_inner_product_identity() {
    for seed in 0..SEEDS {
        let x = verify::random_tensor(vec![2, 8, 6], 600 + seed, 1.0);
        let w = verify::random_tensor(vec![3, 2, 4, 4], 700 + seed, 1.0);
        // y in the conv output space: (8+2-4)/2+1 = 4, (6+2-4)/2+1 = 3
        let y = verify::random_tensor(vec![3, 4, 3], 800 + seed, 1.0);
        let d = verify::conv_adjoint_discrepancy(&x, &w, &y, 2, 1).unwrap();
        assert!(d < 1e-10, "seed {seed}: discrepancy {d}");
    }
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    for seed in 0..SEEDS {
        let a = verify::random_tensor(vec![4, 6], 900 + seed, 1.0);
        let b = verify::random_tensor(vec![6, 5], 1000 + seed, 1.0);
        let expected = verify::matmul_oracle(&a, &b);
        let mut tape = GradientTape::<f64>::new();
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let y = tape.matmul(av, bv).unwrap();
        assert!(verify::max_abs_diff(tape.value(y), &expected) < 1e-12);
    }
}

#[test]
fn batched_matmul_matches_per_batch_oracle() {
    let a = verify::random_tensor(vec![3, 2, 4], 42, 1.0);
    let b = verify::random_tensor(vec![3, 4, 5], 43, 1.0);
    let mut tape = GradientTape::<f64>::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let y = tape.matmul(av, bv).unwrap();
    assert_eq!(tape.value(y).shape(), &[3, 2, 5]);
    for batch in 0..3 {
        let ab = Tensor::new(vec![2, 4], a.data()[batch * 8..(batch + 1) * 8].to_vec()).unwrap();
        let bb = Tensor::new(vec![4, 5], b.data()[batch * 20..(batch + 1) * 20].to_vec()).unwrap();
        let expected = verify::matmul_oracle(&ab, &bb);
        for i in 0..2 {
            for j in 0..5 {
                assert!((tape.value(y).at(&[batch, i, j]) - expected.at(&[i, j])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_sums_to_one_under_extreme_inputs() {
    for seed in 0..SEEDS {
        let x = verify::random_tensor(vec![5, 7], 1100 + seed, 300.0);
        let mut tape = GradientTape::<f64>::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, &[1]).unwrap();
        for row in tape.value(y).data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

fn check<const N: usize>(
    seeds: std::ops::Range<u64>,
    shapes: [&[usize]; N],
    scale: f64,
    f: impl Fn(&mut GradientTape<f64>, &[Var]) -> Result<Var>,
) {
    for seed in seeds {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| verify::random_tensor(s.to_vec(), seed * 31 + i as u64, scale))
            .collect();
        let worst = verify::grad_check(&inputs, &f, FD_H).unwrap();
        assert!(worst < FD_TOL, "seed {seed}: max rel err {worst}");
    }
}

#[test]
fn grad_conv2d() {
    check(0..SEEDS, [&[2, 5, 4], &[3, 2, 3, 3], &[3]], 1.0, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
        Ok(t.sum_of_squares(y)?)
    });
}

#[test]
fn grad_conv2d_strided_dilated() {
    check(0..SEEDS, [&[2, 7, 7], &[2, 2, 3, 3], &[2]], 1.0, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 2, 2)?;
        Ok(t.sum_of_squares(y)?)
    });
}

#[test]
fn grad_deconv2d() {
    check(0..SEEDS, [&[2, 3, 4], &[2, 3, 4, 4], &[3]], 1.0, |t, v| {
        let y = t.deconv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        Ok(t.sum_of_squares(y)?)
    });
}

#[test]
fn grad_relu_add_mul_scale_concat() {
    for seed in 0..SEEDS {
        let mut inputs = vec![
            verify::random_tensor(vec![2, 3, 4], seed * 31, 1.0),
            verify::random_tensor(vec![2, 3, 4], seed * 31 + 1, 1.0),
        ];
        // keep values clear of the ReLU kink so finite differences are valid
        for v in inputs[0].data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.01 * v.signum();
            }
        }
        let worst = verify::grad_check(
            &inputs,
            &|t: &mut GradientTape<f64>, v: &[Var]| {
                let r = t.relu(v[0]);
                let s = t.add(r, v[1])?;
                let m = t.mul(s, v[1])?;
                let c = t.concat_channels(m, v[0])?;
                let sc = t.scalar_mul(c, 0.7);
                Ok(t.sum_of_squares(sc)?)
            },
            FD_H,
        )
        .unwrap();
        assert!(worst < FD_TOL, "seed {seed}: {worst}");
    }
}

#[test]
fn grad_matmul() {
    check(0..SEEDS, [&[3, 4], &[4, 5]], 1.0, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        Ok(t.sum_of_squares(y)?)
    });
}

#[test]
fn grad_softmax_matches_finite_differences() {
    // relative error < 1e-6 for the plain softmax gradient (64-bit, h=1e-5)
    for seed in 0..SEEDS {
        let x = verify::random_tensor(vec![6], 2000 + seed, 2.0);
        let coeff = verify::random_tensor(vec![6], 3000 + seed, 1.0);
        let worst = verify::grad_check(
            &[x],
            &move |t: &mut GradientTape<f64>, v: &[Var]| {
                let y = t.softmax(v[0], &[0])?;
                let c = t.constant(coeff.clone());
                let p = t.mul(y, c)?;
                Ok(t.sum(p))
            },
            FD_H,
        )
        .unwrap();
        assert!(worst < 1e-6, "seed {seed}: {worst}");
    }
}

#[test]
fn grad_softmax_spatial_axes() {
    check(0..SEEDS, [&[3, 4]], 2.0, |t, v| {
        let y = t.softmax(v[0], &[0, 1])?;
        Ok(t.sum_of_squares(y)?)
    });
}

#[test]
fn grad_gather_and_cellwise_attention_ops() {
    check(0..SEEDS, [&[3, 3, 4], &[2, 12], &[2, 12, 9]], 1.0, |t, v| {
        let gathered = t.gather_neighborhood(v[0], 3)?;
        let g = t.reshape(gathered, vec![3, 12, 9])?;
        let dots = t.cellwise_dot(v[1], v[2])?;
        let attn = t.softmax(dots, &[1])?;
        let mixed = t.cellwise_weighted_sum(g, attn)?;
        Ok(t.sum_of_squares(mixed)?)
    });
}

#[test]
fn grad_correlate_and_slices() {
    check(0..SEEDS, [&[4, 3, 4], &[4, 2, 3]], 1.0, |t, v| {
        let s = t.correlate(v[0], v[1])?;
        let a = t.slice_source(s, 1, 2)?;
        let b = t.slice_target(s, 1, 1)?;
        let cs = t.corr_slice_source(v[0], v[1], 2, 0)?;
        let ct = t.corr_slice_target(v[0], v[1], 0, 2)?;
        let sa = t.sum_of_squares(a)?;
        let sb = t.sum_of_squares(b)?;
        let sc = t.sum_of_squares(cs)?;
        let sd = t.sum_of_squares(ct)?;
        let x = t.add(sa, sb)?;
        let y = t.add(sc, sd)?;
        Ok(t.add(x, y)?)
    });
}

#[test]
fn grad_upscale_and_contract_taps() {
    check(0..SEEDS, [&[2, 3, 2, 3]], 1.0, |t, v| {
        let up = t.upscale4d(v[0])?;
        let c1 = t.contract_source_taps(v[0], 3, 1)?;
        let c2 = t.contract_target_taps(v[0], 1, 4)?;
        let u2 = t.upscale2d(c1)?;
        let s1 = t.sum_of_squares(up)?;
        let s2 = t.sum_of_squares(u2)?;
        let s3 = t.sum_of_squares(c2)?;
        let x = t.add(s1, s2)?;
        Ok(t.add(x, s3)?)
    });
}

#[test]
fn grad_bce_loss() {
    for seed in 0..SEEDS {
        let logits = verify::random_tensor(vec![3, 4], 4000 + seed, 2.0);
        let mut target = verify::random_tensor(vec![3, 4], 5000 + seed, 0.5);
        for v in target.data_mut() {
            *v = v.abs();
        }
        let worst = verify::grad_check(
            &[logits],
            &move |t: &mut GradientTape<f64>, v: &[Var]| {
                let p = t.softmax(v[0], &[0, 1])?;
                Ok(t.bce_loss(p, target.clone())?)
            },
            FD_H,
        )
        .unwrap();
        assert!(worst < FD_TOL, "seed {seed}: {worst}");
    }
}

#[test]
fn forward_is_deterministic_across_runs() {
    let run = || {
        let input = verify::random_tensor(vec![3, 6, 6], 7, 1.0);
        let weight = verify::random_tensor(vec![4, 3, 3, 3], 8, 1.0);
        let mut tape = GradientTape::<f64>::new();
        let x = tape.constant(input);
        let w = tape.constant(weight);
        let y = tape.conv2d(x, w, None, 1, 1, 1).unwrap();
        let r = tape.relu(y);
        let s = tape.correlate(r, r).unwrap();
        tape.value(s).data().to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "repeated forward runs must be bit-identical");
}
