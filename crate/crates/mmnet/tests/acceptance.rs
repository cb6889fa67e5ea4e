//! End-to-end acceptance suite. Each test prints one `criterion N: PASS/FAIL`
//! line; the training-based criteria share one trained model.

use std::sync::LazyLock;
use std::time::Instant;

use mmnet::data::{self, DatasetPair, SyntheticSpec, WarpFamily};
use mmnet::enhance::{self, LSAConfig};
use mmnet::eval::{self, EvalPair, NormalizerKind, PckItem};
use mmnet::matching;
use mmnet::model::{Model, ModelConfig, ParamSet};
use mmnet::supervision::{self, build_gt_map, TrainConfig, TrainPair};
use mmnet::tape::GradientTape;
use mmnet::tensor::Tensor;
use mmnet::verify::{
    self, correlate_oracle, grad_check, max_abs_diff, random_tensor, upscale4d_oracle,
};

type E = f32;

fn report(n: usize, ok: bool, detail: &str) {
    println!("criterion {n}: {} — {detail}", if ok { "PASS" } else { "FAIL" });
}

fn tmp_dir(tag: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("mmnet-accept-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

// --- shared trained state for criteria 6 and 7 ------------------------------

const TRAIN_SEED: u64 = 11;
const HELD_SEED: u64 = 22;

fn synth(seed: u64, pairs: usize) -> Vec<DatasetPair<E>> {
    let spec = SyntheticSpec {
        seed,
        warp: WarpFamily::Tps,
        magnitude: 1.0,
        keypoints_per_pair: 10,
        pairs,
    };
    // round-trip through the manifest layout so training sees exactly what
    // the CLI pipeline would
    let dir = tmp_dir(&format!("data{seed}"));
    let generated = data::generate_synthetic::<E>(&spec).unwrap();
    data::write_dataset(&dir, &generated).unwrap();
    let loaded = data::load_dataset(&dir).unwrap();
    let _ = std::fs::remove_dir_all(&dir);
    loaded
}

fn to_train(pairs: &[DatasetPair<E>]) -> Vec<TrainPair<E>> {
    pairs
        .iter()
        .filter_map(|p| {
            let (s, t, _) = supervision::filter_annotations(
                &p.annotation.src_kps,
                &p.annotation.tgt_kps,
                (data::CANVAS_H, data::CANVAS_W),
            );
            (!s.is_empty()).then(|| TrainPair {
                source: p.source.clone(),
                target: p.target.clone(),
                src_kps: s,
                tgt_kps: t,
            })
        })
        .collect()
}

fn to_eval(pairs: &[DatasetPair<E>]) -> Vec<EvalPair<E>> {
    pairs
        .iter()
        .map(|p| EvalPair {
            pair_id: p.annotation.pair_id.clone(),
            category: p.annotation.category.clone(),
            source: p.source.clone(),
            target: p.target.clone(),
            src_kps: p.annotation.src_kps.clone(),
            tgt_kps: p.annotation.tgt_kps.clone(),
            tgt_bbox: p.annotation.tgt_bbox,
        })
        .collect()
}

struct Bench {
    train: Vec<TrainPair<E>>,
    held: Vec<EvalPair<E>>,
    untrained_pck10: f64,
    full_pck10: f64,
    full_pck05: f64,
    train_secs: f64,
}

fn train_model(complementation: bool, supervised_scales: Vec<usize>, train: &[TrainPair<E>]) -> Model<E> {
    let cfg = TrainConfig {
        supervised_scales,
        ..TrainConfig::default()
    };
    let mc = ModelConfig {
        complementation,
        ..ModelConfig::default()
    };
    let mut model = Model::<E>::init(mc, cfg.seed).unwrap();
    supervision::train(&mut model, train, &cfg, None, |_| {}).unwrap();
    model
}

/// Validation-driven scale choice on the first 20 held pairs, PCK on all.
fn held_pck(model: &Model<E>, held: &[EvalPair<E>], alpha: f64) -> f64 {
    let take = held.len().min(20);
    let scale = eval::select_scale(model, &held[..take], alpha).unwrap();
    let items = eval::score_pairs(model, held, scale, NormalizerKind::ImageLongerSide).unwrap();
    eval::pck(&items, alpha, NormalizerKind::ImageLongerSide).unwrap().aggregate()
}

static BENCH: LazyLock<Bench> = LazyLock::new(|| {
    let train = to_train(&synth(TRAIN_SEED, 200));
    let held = to_eval(&synth(HELD_SEED, 50));
    assert_eq!(train.len(), 200);
    assert_eq!(held.len(), 50);

    let untrained = Model::<E>::init(ModelConfig::default(), TrainConfig::default().seed).unwrap();
    let untrained_pck10 = held_pck(&untrained, &held, 0.1);

    let start = Instant::now();
    let full = train_model(true, vec![2, 3, 4, 5], &train);
    let train_secs = start.elapsed().as_secs_f64();

    let full_pck10 = held_pck(&full, &held, 0.1);
    let full_pck05 = held_pck(&full, &held, 0.05);
    Bench {
        train,
        held,
        untrained_pck10,
        full_pck10,
        full_pck05,
        train_secs,
    }
});

// --- 1: gradient suite -------------------------------------------------------

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let h = 1e-5;
    for seed in 0..10u64 {
        let s = |i: u64| seed * 97 + i;
        let checks: [(&str, f64); 8] = [
            ("conv", grad_check(
                &[random_tensor(vec![2, 5, 6], s(0), 1.0), random_tensor(vec![3, 2, 3, 3], s(1), 0.5), random_tensor(vec![3], s(2), 0.5)],
                &|t, v| {
                    let c = t.conv2d(v[0], v[1], Some(v[2]), 2, 2, 2)?;
                    let r = t.relu(c);
                    t.sum_of_squares(r)
                },
                h,
            ).unwrap()),
            ("deconv", grad_check(
                &[random_tensor(vec![3, 4, 5], s(3), 1.0), random_tensor(vec![3, 2, 4, 4], s(4), 0.5)],
                &|t, v| {
                    let d = t.deconv2d(v[0], v[1], None, 2, 1)?;
                    t.sum_of_squares(d)
                },
                h,
            ).unwrap()),
            ("matmul", grad_check(
                &[random_tensor(vec![3, 4], s(5), 1.0), random_tensor(vec![4, 5], s(6), 1.0)],
                &|t, v| {
                    let m = t.matmul(v[0], v[1])?;
                    t.sum_of_squares(m)
                },
                h,
            ).unwrap()),
            ("softmax", grad_check(
                &[random_tensor(vec![4, 5], s(7), 2.0)],
                &|t, v| {
                    let p = t.softmax(v[0], &[0, 1])?;
                    let q = t.mul(p, p)?;
                    t.sum_of_squares(q)
                },
                h,
            ).unwrap()),
            ("correlate", grad_check(
                &[random_tensor(vec![4, 3, 4], s(8), 1.0), random_tensor(vec![4, 3, 4], s(9), 1.0)],
                &|t, v| {
                    let c = t.correlate(v[0], v[1])?;
                    t.sum_of_squares(c)
                },
                h,
            ).unwrap()),
            ("upscale4d", grad_check(
                &[random_tensor(vec![2, 3, 2, 3], s(10), 1.0)],
                &|t, v| {
                    let u = t.upscale4d(v[0])?;
                    t.sum_of_squares(u)
                },
                h,
            ).unwrap()),
            ("attention", grad_check(
                &[random_tensor(vec![4, 3, 3], s(11), 1.0)],
                &|t, v| {
                    let g = t.gather_neighborhood(v[0], 3)?;
                    let q = t.reshape(v[0], vec![4, 9])?;
                    let logits = t.cellwise_dot(q, g)?;
                    let attn = t.softmax(logits, &[1])?;
                    let ctx = t.cellwise_weighted_sum(g, attn)?;
                    t.sum_of_squares(ctx)
                },
                h,
            ).unwrap()),
            ("bce", grad_check(
                &[random_tensor(vec![3, 4], s(12), 1.0)],
                &|t, v| {
                    let p = t.softmax(v[0], &[0, 1])?;
                    let gt = build_gt_map((100.0, 70.0), 5, (3, 4)).unwrap();
                    t.bce_loss(p, gt)
                },
                h,
            ).unwrap()),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "seed {seed} {name}: rel err {err}");
            worst = worst.max(err);
        }
        let net = verify::network_grad_check(seed, 2, h).unwrap();
        assert!(net < 1e-4, "seed {seed} network: rel err {net}");
        worst = worst.max(net);
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-4 && secs < 120.0;
    report(1, ok, &format!("max rel err {worst:.3e} over 10 seeds in {secs:.1}s"));
    assert!(ok);
}

// --- 2: correlation oracle ---------------------------------------------------

#[test]
fn criterion_2_correlation_oracle() {
    let mut worst = 0.0f64;
    for (c, hh, ww) in [(3usize, 2usize, 2usize), (7, 4, 5), (21, 6, 8)] {
        let xs = random_tensor(vec![c, hh, ww], c as u64, 1.0);
        let xt = random_tensor(vec![c, hh, ww], c as u64 + 50, 1.0);
        let mut tape = GradientTape::<f64>::new();
        let (a, b) = (tape.constant(xs.clone()), tape.constant(xt.clone()));
        let st = tape.correlate(a, b).unwrap();
        worst = worst.max(max_abs_diff(tape.value(st), &correlate_oracle(&xs, &xt)));
        // transpose symmetry: corr(t, s)[m,n,i,j] == corr(s, t)[i,j,m,n]
        let ts = tape.correlate(b, a).unwrap();
        let n = hh * ww;
        for q in 0..n {
            for r in 0..n {
                assert_eq!(
                    tape.value(st).data()[q * n + r],
                    tape.value(ts).data()[r * n + q],
                    "transpose mismatch at ({q},{r})"
                );
            }
        }
    }
    let ok = worst < 1e-10;
    report(2, ok, &format!("quadruple-loop max diff {worst:.3e}, transpose exact"));
    assert!(ok);
}

// --- 3: bicubic upscaling machinery ------------------------------------------

#[test]
fn criterion_3_upscale_machinery() {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let t = random_tensor(vec![3, 3, 3, 3], seed, 1.0);
        let mut tape = GradientTape::<f64>::new();
        let v = tape.constant(t.clone());
        let up = tape.upscale4d(v).unwrap();
        assert_eq!(tape.value(up).shape(), &[6, 6, 6, 6]);
        worst = worst.max(max_abs_diff(tape.value(up), &upscale4d_oracle(&t)));
    }

    // constants preserved exactly
    for c in [1.0f64, 0.5, -2.0, 0.3] {
        let t = Tensor::filled(vec![2, 3, 2, 3], c);
        let mut tape = GradientTape::<f64>::new();
        let v = tape.constant(t);
        let up = tape.upscale4d(v).unwrap();
        for &x in tape.value(up).data() {
            assert_eq!(x, c, "constant {c} not preserved");
        }
    }

    // complement against a zero coarser tensor is the identity
    let residual = random_tensor(vec![4, 6, 4, 6], 9, 1.0);
    let mut tape = GradientTape::<f64>::new();
    let res = tape.constant(residual.clone());
    let zero = tape.constant(Tensor::zeros(vec![2, 3, 2, 3]));
    let up = tape.upscale4d(zero).unwrap();
    let sum = tape.add(res, up).unwrap();
    assert_eq!(tape.value(sum).data(), residual.data());

    let ok = worst < 1e-9;
    report(3, ok, &format!("separable oracle max diff {worst:.3e}; constants and zero-complement exact"));
    assert!(ok);
}

// --- 4: attention residual identity and oracle -------------------------------

const LSA_SCALE: usize = 2;

fn lsa_params(cfg: &LSAConfig, seed: u64, zero_g: bool) -> ParamSet<f64> {
    let (c, ci) = (cfg.io_channels, cfg.inner_channels);
    let mut params = ParamSet::new();
    for (i, head) in ["q", "k", "v"].iter().enumerate() {
        params.add(
            format!("enhance.s{LSA_SCALE}.lsa.{head}.weight"),
            random_tensor(vec![ci, c, 1, 1], seed + i as u64, 0.4),
        );
        params.add(
            format!("enhance.s{LSA_SCALE}.lsa.{head}.bias"),
            random_tensor(vec![ci], seed + 10 + i as u64, 0.1),
        );
    }
    let (gw, gb) = if zero_g {
        (Tensor::zeros(vec![c, ci, 1, 1]), Tensor::zeros(vec![c]))
    } else {
        (random_tensor(vec![c, ci, 1, 1], seed + 20, 0.4), random_tensor(vec![c], seed + 21, 0.1))
    };
    params.add(format!("enhance.s{LSA_SCALE}.lsa.g.weight"), gw);
    params.add(format!("enhance.s{LSA_SCALE}.lsa.g.bias"), gb);
    params
}

/// Explicit per-cell attention: 1x1 ReLU projections, dot products over the
/// zero-padded r x r window, softmax over slots, value mixing, output
/// projection, residual.
fn lsa_oracle(x: &Tensor<f64>, params: &ParamSet<f64>, cfg: &LSAConfig) -> Tensor<f64> {
    let [c, h, w] = *x.shape() else { panic!("rank 3") };
    let ci = cfg.inner_channels;
    let r = cfg.r;
    let half = r as isize / 2;
    let head = |name: &str, i: usize, j: usize| -> Vec<f64> {
        let wt = params.get(&format!("enhance.s{LSA_SCALE}.lsa.{name}.weight")).unwrap();
        let bias = params.get(&format!("enhance.s{LSA_SCALE}.lsa.{name}.bias")).unwrap();
        (0..ci)
            .map(|o| {
                let mut s = bias.data()[o];
                for cc in 0..c {
                    s += wt.data()[o * c + cc] * x.data()[(cc * h + i) * w + j];
                }
                s.max(0.0)
            })
            .collect()
    };
    let gw = params.get(&format!("enhance.s{LSA_SCALE}.lsa.g.weight")).unwrap();
    let gb = params.get(&format!("enhance.s{LSA_SCALE}.lsa.g.bias")).unwrap();
    let mut out = vec![0.0f64; c * h * w];
    for i in 0..h {
        for j in 0..w {
            let q = head("q", i, j);
            let mut logits = Vec::new();
            let mut values = Vec::new();
            for a in 0..r {
                for b in 0..r {
                    let y = i as isize + a as isize - half;
                    let xx = j as isize + b as isize - half;
                    let (k, v) = if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                        (vec![0.0; ci], vec![0.0; ci])
                    } else {
                        (head("k", y as usize, xx as usize), head("v", y as usize, xx as usize))
                    };
                    logits.push(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>());
                    values.push(v);
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let ctx: Vec<f64> = (0..ci)
                .map(|o| values.iter().zip(&exps).map(|(v, &e)| v[o] * e / z).sum())
                .collect();
            for cc in 0..c {
                let mut g = gb.data()[cc];
                for o in 0..ci {
                    g += gw.data()[cc * ci + o] * ctx[o];
                }
                out[(cc * h + i) * w + j] = x.data()[(cc * h + i) * w + j] + g;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

#[test]
fn criterion_4_attention_residual_identity() {
    let cfg = LSAConfig {
        r: 5,
        inner_channels: 10,
        io_channels: 21,
    };
    // zero G: bit-for-bit identity
    let params = lsa_params(&cfg, 300, true);
    let x = random_tensor(vec![21, 4, 5], 60, 1.0);
    let mut tape = GradientTape::<f64>::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = enhance::local_self_attention(&mut tape, &bound, LSA_SCALE, xv, &cfg).unwrap();
    assert_eq!(tape.value(y).data(), x.data(), "zero-G output differs from input");

    // random G: per-cell oracle
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let params = lsa_params(&cfg, 400 + seed * 31, false);
        let x = random_tensor(vec![21, 4, 5], 70 + seed, 1.0);
        let mut tape = GradientTape::<f64>::new();
        let bound = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = enhance::local_self_attention(&mut tape, &bound, LSA_SCALE, xv, &cfg).unwrap();
        worst = worst.max(max_abs_diff(tape.value(y), &lsa_oracle(&x, &params, &cfg)));
    }
    let ok = worst < 1e-10;
    report(4, ok, &format!("zero-G identity exact; per-cell oracle max diff {worst:.3e}"));
    assert!(ok);
}

// --- 5: probability normalization --------------------------------------------

#[test]
fn criterion_5_probability_normalization() {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    let mut configs = 0;
    // 50 predicted maps of random extents and score ranges
    for i in 0..50u64 {
        let h = rng.random_range(1..15usize);
        let w = rng.random_range(1..21usize);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let t = random_tensor(vec![h, w], 500 + i, scale);
        let mut tape = GradientTape::<f64>::new();
        let v = tape.constant(t);
        let p = matching::to_probability(&mut tape, v).unwrap();
        let s: f64 = tape.value(p).data().iter().sum();
        worst = worst.max((s - 1.0).abs());
        configs += 1;
    }
    // 50 ground-truth maps at random keypoints and scales
    for _ in 0..50 {
        let scale = rng.random_range(2..=5usize);
        let x = rng.random_range(0.0..319.9f64);
        let y = rng.random_range(0.0..223.9f64);
        let m = build_gt_map((x, y), scale, (224 >> scale, 320 >> scale)).unwrap();
        let s: f64 = m.data().iter().sum();
        worst = worst.max((s - 1.0).abs());
        configs += 1;
    }
    let ok = worst < 1e-6 && configs == 100;
    report(5, ok, &format!("{configs} random maps, worst |sum - 1| = {worst:.3e}"));
    assert!(ok);
}

// --- 6: end-to-end training --------------------------------------------------

#[test]
fn criterion_6_end_to_end_training() {
    let b = &*BENCH;
    // the reference budget is 15 minutes on 4 cores; scale by what this
    // machine actually has
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let budget = 900.0 * 4.0 / cores as f64;
    let ok = b.full_pck10 >= 0.70
        && b.full_pck10 >= 3.0 * b.untrained_pck10
        && b.train_secs < budget;
    report(
        6,
        ok,
        &format!(
            "held-out PCK@0.1 {:.4} (untrained {:.4}, ratio {:.1}x), trained in {:.0}s on {cores} core(s) (budget {budget:.0}s)",
            b.full_pck10,
            b.untrained_pck10,
            b.full_pck10 / b.untrained_pck10.max(1e-9),
            b.train_secs
        ),
    );
    assert!(ok);
}

// --- 7: ablation direction checks --------------------------------------------

#[test]
fn criterion_7_ablation_directions() {
    let b = &*BENCH;
    let nosup = train_model(true, vec![2], &b.train);
    let nosup_pck05 = held_pck(&nosup, &b.held, 0.05);
    let nocomp = train_model(false, vec![2, 3, 4, 5], &b.train);
    let nocomp_pck05 = held_pck(&nocomp, &b.held, 0.05);
    let ok = nosup_pck05 < b.full_pck05 && nocomp_pck05 <= b.full_pck05 + 0.01;
    report(
        7,
        ok,
        &format!(
            "PCK@0.05 full {:.4}, supervision-off {:.4} (must be lower), complementation-off {:.4} (must be <= full + 0.01)",
            b.full_pck05, nosup_pck05, nocomp_pck05
        ),
    );
    assert!(ok);
}

// --- 8: PCK metric oracle ----------------------------------------------------

#[test]
fn criterion_8_pck_hand_enumerated() {
    // (displacements, d, alpha, expected correct count)
    let cases: [(&[(f64, f64)], f64, f64, usize); 20] = [
        (&[(0.0, 0.0)], 100.0, 0.1, 1),
        (&[(10.0, 0.0)], 100.0, 0.1, 1),            // boundary, inclusive
        (&[(0.0, 10.0)], 100.0, 0.1, 1),            // boundary on y
        (&[(10.0001, 0.0)], 100.0, 0.1, 0),         // just outside
        (&[(6.0, 8.0)], 100.0, 0.1, 1),             // 3-4-5 triangle radius 10
        (&[(6.0, 8.001)], 100.0, 0.1, 0),
        (&[(-10.0, 0.0)], 100.0, 0.1, 1),           // sign-symmetric boundary
        (&[(0.0, -10.0001)], 100.0, 0.1, 0),
        (&[(16.0, 0.0)], 320.0, 0.05, 1),           // canvas normalizer boundary
        (&[(16.1, 0.0)], 320.0, 0.05, 0),
        (&[(0.0, 0.0), (5.0, 0.0), (15.0, 0.0)], 100.0, 0.1, 2),
        (&[(9.99, 0.0), (10.01, 0.0)], 100.0, 0.1, 1),
        (&[(1.0, 1.0)], 10.0, 0.15, 1),             // sqrt(2) <= 1.5
        (&[(1.1, 1.1)], 10.0, 0.15, 0),             // sqrt(2.42) > 1.5
        (&[(0.0, 0.0); 5], 100.0, 0.01, 5),
        (&[(50.0, 50.0); 4], 100.0, 0.1, 0),
        (&[(3.0, 4.0)], 100.0, 0.05, 1),            // exactly 5 = alpha d
        (&[(3.0, 4.0)], 99.9, 0.05, 0),             // shrink d below boundary
        (&[(30.0, 0.0), (0.0, 29.0), (29.0, 0.0)], 100.0, 0.3, 3),
        (&[(0.0, 30.1), (30.0, 0.0)], 100.0, 0.3, 1),
    ];
    let mut all_ok = true;
    for (i, (disps, d, alpha, want)) in cases.iter().enumerate() {
        let items: Vec<PckItem> = disps
            .iter()
            .map(|&(dx, dy)| PckItem {
                category: "c".into(),
                pred: (50.0 + dx, 60.0 + dy),
                gt: (50.0, 60.0),
                d: *d,
            })
            .collect();
        let r = eval::pck(&items, *alpha, NormalizerKind::ImageLongerSide).unwrap();
        if r.correct != *want || r.total != disps.len() {
            all_ok = false;
            eprintln!("case {i}: got {}/{}, want {want}/{}", r.correct, r.total, disps.len());
        }
    }
    report(8, all_ok, "20 hand-enumerated cases incl. boundary displacements match exactly");
    assert!(all_ok);
}

// --- 9: thin-plate splines ---------------------------------------------------

#[test]
fn criterion_9_tps_and_warp_round_trip() {
    // interpolation at lambda = 0
    let src = [(12.0, 15.0), (280.0, 40.0), (60.0, 190.0), (300.0, 200.0), (150.0, 90.0), (40.0, 60.0)];
    let dst = [(20.0, 11.0), (270.0, 52.0), (75.0, 180.0), (290.0, 210.0), (160.0, 80.0), (52.0, 71.0)];
    let warp = eval::tps_fit(&src, &dst, 0.0).unwrap();
    let mut interp_err = 0.0f64;
    for (s, d) in src.iter().zip(&dst) {
        let got = warp.apply(*s);
        interp_err = interp_err.max((got.0 - d.0).abs().max((got.1 - d.1).abs()));
    }

    // affine-consistent data: radial part vanishes
    let aff: Vec<(f64, f64)> = src
        .iter()
        .map(|&(x, y)| (0.8 * x + 0.3 * y - 12.0, -0.1 * x + 1.2 * y + 4.0))
        .collect();
    let radial = eval::tps_fit(&src, &aff, 0.0).unwrap().max_radial_weight();

    // `warp` subcommand on identity correspondences reproduces the source
    let spec = SyntheticSpec {
        seed: 77,
        warp: WarpFamily::Identity,
        magnitude: 0.0,
        keypoints_per_pair: 6,
        pairs: 1,
    };
    let pairs = data::generate_synthetic::<E>(&spec).unwrap();
    let dir = tmp_dir("warpdata");
    data::write_dataset(&dir, &pairs).unwrap();
    let preds = tmp_dir("warppred").join("preds.csv");
    let mut csv = String::from("pair_id,kp_index,src_x,src_y,pred_x,pred_y,gt_x,gt_y\n");
    for (i, kp) in pairs[0].annotation.src_kps.iter().enumerate() {
        let id = &pairs[0].annotation.pair_id;
        csv.push_str(&format!("{id},{i},{},{},{},{},{},{}\n", kp.0, kp.1, kp.0, kp.1, kp.0, kp.1));
    }
    std::fs::write(&preds, csv).unwrap();
    let out = tmp_dir("warpout");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_mmnet"))
        .args(["warp", "--predictions"])
        .arg(&preds)
        .arg("--data")
        .arg(&dir)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "warp subcommand failed");
    let warped: Tensor<f64> =
        data::read_ppm(&out.join(format!("{}_warped.ppm", pairs[0].annotation.pair_id))).unwrap();
    let original: Tensor<f64> = data::read_ppm(&dir.join(&pairs[0].annotation.src_image)).unwrap();
    let round_trip = max_abs_diff(&warped, &original);

    for d in [dir, preds.parent().unwrap().to_path_buf(), out] {
        let _ = std::fs::remove_dir_all(d);
    }
    let ok = interp_err < 1e-9 && radial < 1e-8 && round_trip < 1e-7;
    report(
        9,
        ok,
        &format!("interpolation {interp_err:.3e}, affine radial {radial:.3e}, identity round-trip {round_trip:.3e}"),
    );
    assert!(ok);
}

// --- 10: determinism ---------------------------------------------------------

#[test]
fn criterion_10_train_determinism() {
    let spec = SyntheticSpec {
        seed: 33,
        warp: WarpFamily::Tps,
        magnitude: 1.0,
        keypoints_per_pair: 5,
        pairs: 8,
    };
    let pairs = data::generate_synthetic::<E>(&spec).unwrap();
    let dir = tmp_dir("detdata");
    data::write_dataset(&dir, &pairs).unwrap();

    let run = |tag: &str| -> std::path::PathBuf {
        let out = tmp_dir(&format!("det-{tag}"));
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_mmnet"))
            .args(["train", "--data"])
            .arg(&dir)
            .arg("--out")
            .arg(&out)
            .args([
                "--set", "train.max_iters=20",
                "--set", "train.batch_size=2",
                "--set", "train.checkpoint_interval=10",
            ])
            .status()
            .unwrap();
        assert!(status.success(), "train run {tag} failed");
        out
    };
    let a = run("a");
    let b = run("b");

    let mut identical = true;
    let log_a = std::fs::read(a.join("train_log.csv")).unwrap();
    let log_b = std::fs::read(b.join("train_log.csv")).unwrap();
    if log_a != log_b {
        identical = false;
        eprintln!("loss logs differ");
    }
    for ckpt in ["iter000010", "iter000020"] {
        let mut names: Vec<String> = std::fs::read_dir(a.join(ckpt))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for n in &names {
            let fa = std::fs::read(a.join(ckpt).join(n)).unwrap();
            let fb = std::fs::read(b.join(ckpt).join(n)).unwrap();
            if fa != fb {
                identical = false;
                eprintln!("checkpoint file {ckpt}/{n} differs");
            }
        }
    }
    for d in [dir, a, b] {
        let _ = std::fs::remove_dir_all(d);
    }
    report(10, identical, "two seeded runs: loss logs and checkpoints byte-identical");
    assert!(identical);
}
