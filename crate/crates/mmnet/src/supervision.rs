//! Supervision: ground-truth probability maps, the bidirectional
//! multi-scale cross-entropy objective, and the SGD training loop.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::elem::Element;
use crate::error::{Error, Result};
use crate::matching::{self, Direction, ScaleScores};
use crate::model::{BoundParams, Model};
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub decay_interval: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    /// alpha_l for scales 2..=5, indexed by `scale - 2`.
    pub loss_weights: [f64; 4],
    pub supervised_scales: Vec<usize>,
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0005,
            momentum: 0.9,
            weight_decay: 0.0002,
            lr_decay_factor: 0.1,
            decay_interval: 10000,
            batch_size: 5,
            max_iters: 2000,
            loss_weights: [1.0; 4],
            supervised_scales: vec![2, 3, 4, 5],
            checkpoint_interval: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.lr_decay_factor <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.decay_interval == 0 {
            return Err(Error::Config("batch size and decay interval must be positive".into()));
        }
        if self.supervised_scales.is_empty() {
            return Err(Error::Config("at least one supervised scale required".into()));
        }
        if self.supervised_scales.iter().any(|s| !(2..=5).contains(s)) {
            return Err(Error::Config("supervised scales must lie in 2..=5".into()));
        }
        Ok(())
    }
}

/// One annotated training pair in the canonical 224x320 frame.
pub struct TrainPair<E: Element> {
    pub source: Tensor<E>,
    pub target: Tensor<E>,
    pub src_kps: Vec<(f64, f64)>,
    pub tgt_kps: Vec<(f64, f64)>,
}

/// Drops keypoint pairs with either endpoint outside its image; returns the
/// kept pairs and the dropped count.
pub fn filter_annotations(
    src_kps: &[(f64, f64)],
    tgt_kps: &[(f64, f64)],
    canvas: (usize, usize),
) -> (Vec<(f64, f64)>, Vec<(f64, f64)>, usize) {
    let (h, w) = (canvas.0 as f64, canvas.1 as f64);
    let inside = |p: &(f64, f64)| p.0 >= 0.0 && p.0 < w && p.1 >= 0.0 && p.1 < h;
    let mut s = Vec::new();
    let mut t = Vec::new();
    let mut dropped = 0;
    for (ps, pt) in src_kps.iter().zip(tgt_kps) {
        if inside(ps) && inside(pt) {
            s.push(*ps);
            t.push(*pt);
        } else {
            dropped += 1;
        }
    }
    (s, t, dropped)
}

/// Ground-truth probability map for one keypoint at one scale: bilinear
/// weights on the 4 surrounding cells, 3x3 Gaussian smoothing (sigma 1),
/// then renormalization to sum 1.
pub fn build_gt_map(kp: (f64, f64), scale: usize, extents: (usize, usize)) -> Result<Tensor<f64>> {
    let (hc, wc) = extents;
    let stride = (1usize << scale) as f64;
    let (x, y) = kp;
    if x < 0.0 || y < 0.0 || x >= wc as f64 * stride || y >= hc as f64 * stride {
        return Err(Error::invalid(format!("keypoint ({x}, {y}) outside the image")));
    }
    let (u, v) = (x / stride, y / stride);
    let (j0, i0) = (u.floor(), v.floor());
    let (fu, fv) = (u - j0, v - i0);
    let mut raw = Tensor::<f64>::zeros(vec![hc, wc]);
    for (di, wi) in [(0usize, 1.0 - fv), (1, fv)] {
        for (dj, wj) in [(0usize, 1.0 - fu), (1, fu)] {
            let (i, j) = (i0 as usize + di, j0 as usize + dj);
            if i < hc && j < wc {
                raw.set(&[i, j], raw.at(&[i, j]) + wi * wj);
            }
        }
    }

    let mut kernel = [[0.0f64; 3]; 3];
    let mut ksum = 0.0;
    for (di, row) in kernel.iter_mut().enumerate() {
        for (dj, k) in row.iter_mut().enumerate() {
            let (dy, dx) = (di as f64 - 1.0, dj as f64 - 1.0);
            *k = (-(dx * dx + dy * dy) / 2.0).exp();
            ksum += *k;
        }
    }
    for row in kernel.iter_mut() {
        for k in row.iter_mut() {
            *k /= ksum;
        }
    }

    let mut smooth = Tensor::<f64>::zeros(vec![hc, wc]);
    for i in 0..hc {
        for j in 0..wc {
            let mut acc = 0.0;
            for (di, row) in kernel.iter().enumerate() {
                for (dj, &k) in row.iter().enumerate() {
                    let si = i as isize + di as isize - 1;
                    let sj = j as isize + dj as isize - 1;
                    if si >= 0 && si < hc as isize && sj >= 0 && sj < wc as isize {
                        acc += k * raw.at(&[si as usize, sj as usize]);
                    }
                }
            }
            smooth.set(&[i, j], acc);
        }
    }
    let total: f64 = smooth.data().iter().sum();
    for v in smooth.data_mut() {
        *v /= total;
    }
    Ok(smooth)
}

/// Pre-smoothing 4-neighbor bilinear assignment, exposed for oracles.
pub fn bilinear_cell_weights(
    kp: (f64, f64),
    scale: usize,
    extents: (usize, usize),
) -> Vec<((usize, usize), f64)> {
    let stride = (1usize << scale) as f64;
    let (u, v) = (kp.0 / stride, kp.1 / stride);
    let (j0, i0) = (u.floor(), v.floor());
    let (fu, fv) = (u - j0, v - i0);
    let mut out = Vec::new();
    for (di, wi) in [(0usize, 1.0 - fv), (1, fv)] {
        for (dj, wj) in [(0usize, 1.0 - fu), (1, fu)] {
            let (i, j) = (i0 as usize + di, j0 as usize + dj);
            if i < extents.0 && j < extents.1 && wi * wj > 0.0 {
                out.push(((i, j), wi * wj));
            }
        }
    }
    out
}

/// Per-pair objective: for every supervised scale and keypoint, binary
/// cross-entropy between predicted and ground-truth maps in both matching
/// directions, summed over cells, averaged over keypoints, weighted by
/// alpha_l. Returns the total plus per-scale values for logging.
pub fn pair_loss<E: Element>(
    tape: &mut GradientTape<E>,
    src_feats: &[Var],
    tgt_feats: &[Var],
    scores: &[ScaleScores],
    src_kps: &[(f64, f64)],
    tgt_kps: &[(f64, f64)],
    cfg: &TrainConfig,
) -> Result<(Var, [f64; 4])> {
    if src_kps.is_empty() || src_kps.len() != tgt_kps.len() {
        return Err(Error::invalid("pair loss needs matched, nonempty keypoint lists"));
    }
    let k = src_kps.len();
    let complementation = true;
    let mut total: Option<Var> = None;
    let mut per_scale = [0.0f64; 4];
    for &scale in &cfg.supervised_scales {
        let sshape = tape.value(src_feats[scale - 2]).shape().to_vec();
        let tshape = tape.value(tgt_feats[scale - 2]).shape().to_vec();
        let sext = (sshape[1], sshape[2]);
        let text = (tshape[1], tshape[2]);
        let mut scale_sum: Option<Var> = None;
        for i in 0..k {
            for (dir, query, gt_kp, gt_ext) in [
                (Direction::SourceToTarget, src_kps[i], tgt_kps[i], text),
                (Direction::TargetToSource, tgt_kps[i], src_kps[i], sext),
            ] {
                let q_ext = if dir == Direction::SourceToTarget { sext } else { text };
                let cell = matching::cell_of(query.0, query.1, scale, q_ext);
                let slice = matching::query_slice(
                    tape,
                    src_feats,
                    tgt_feats,
                    scores,
                    scale,
                    cell,
                    dir,
                    complementation,
                )?;
                let prob = matching::to_probability(tape, slice)?;
                let gt = build_gt_map(gt_kp, scale, gt_ext)?.cast::<E>();
                let bce = tape.bce_loss(prob, gt)?;
                scale_sum = Some(match scale_sum {
                    Some(acc) => tape.add(acc, bce)?,
                    None => bce,
                });
            }
        }
        let alpha = cfg.loss_weights[scale - 2];
        let scaled = tape.scalar_mul(
            scale_sum.expect("k >= 1"),
            E::from_f64(alpha / k as f64),
        );
        per_scale[scale - 2] = tape.value(scaled).data()[0].to_f64();
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok((total.expect("supervised scales nonempty"), per_scale))
}

/// SGD with momentum and coupled weight decay:
/// v <- momentum v + grad + wd p;  p <- p - lr v.
pub struct Sgd<E: Element> {
    velocity: Vec<Tensor<E>>,
    pub iter: usize,
}

impl<E: Element> Sgd<E> {
    pub fn new(model: &Model<E>) -> Self {
        Sgd {
            velocity: model
                .params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            iter: 0,
        }
    }

    pub fn lr_at(&self, cfg: &TrainConfig) -> f64 {
        cfg.lr * cfg.lr_decay_factor.powi((self.iter / cfg.decay_interval) as i32)
    }

    /// One update over all parameters; `grads` is in parameter order, `None`
    /// meaning zero gradient (the weight-decay pull still applies).
    pub fn step(
        &mut self,
        model: &mut Model<E>,
        grads: &[Option<Tensor<E>>],
        cfg: &TrainConfig,
    ) -> Result<()> {
        let lr = E::from_f64(self.lr_at(cfg));
        let m = E::from_f64(cfg.momentum);
        let wd = E::from_f64(cfg.weight_decay);
        for ((p, v), g) in model
            .params
            .tensors_mut()
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(grads)
        {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape("gradient/parameter shape mismatch"));
                }
            }
            for i in 0..p.numel() {
                let gi = g.as_ref().map(|g| g.data()[i]).unwrap_or(E::ZERO);
                let pv = p.data()[i];
                let vel = m * v.data()[i] + gi + wd * pv;
                v.data_mut()[i] = vel;
                p.data_mut()[i] = pv - lr * vel;
            }
        }
        self.iter += 1;
        Ok(())
    }
}

pub struct StepStats {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    /// Batch-mean loss of scales 2..=5; zero for unsupervised scales.
    pub per_scale: [f64; 4],
}

/// Forward + backward + SGD update over one batch.
pub fn train_step<E: Element>(
    model: &mut Model<E>,
    opt: &mut Sgd<E>,
    batch: &[&TrainPair<E>],
    cfg: &TrainConfig,
) -> Result<StepStats> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let lr = opt.lr_at(cfg);
    let mut tape = GradientTape::<E>::new();
    let bound: BoundParams = model.params.bind(&mut tape, true);
    let mut total: Option<Var> = None;
    let mut per_scale = [0.0f64; 4];
    for pair in batch {
        let (src, tgt) = model.enhanced_pair(&mut tape, &bound, &pair.source, &pair.target)?;
        let min_scale = matching::auto_min_full_scale(&tape, &src, &tgt);
        let scores = matching::accumulate_scores_from(
            &mut tape,
            &src,
            &tgt,
            model.config.complementation,
            min_scale,
        )?;
        let (loss, ps) = pair_loss(
            &mut tape,
            &src,
            &tgt,
            &scores,
            &pair.src_kps,
            &pair.tgt_kps,
            cfg,
        )?;
        for (acc, v) in per_scale.iter_mut().zip(ps) {
            *acc += v / batch.len() as f64;
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    let mean = tape.scalar_mul(total.expect("nonempty batch"), E::from_f64(1.0 / batch.len() as f64));
    let loss_value = tape.value(mean).data()[0].to_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss_value} at iteration {} (lr {lr})",
            opt.iter
        )));
    }
    tape.backward(mean)?;
    let grads: Vec<Option<Tensor<E>>> = bound
        .ordered_vars()
        .iter()
        .map(|&(_, v)| tape.grad(v))
        .collect();
    drop(tape);
    opt.step(model, &grads, cfg)?;
    Ok(StepStats {
        iter: opt.iter,
        lr,
        loss: loss_value,
        per_scale,
    })
}

/// Full training loop: seeded batch sampling, per-iteration stats callback,
/// periodic checkpoints (plus a final one) when a directory is given.
pub fn train<E: Element>(
    model: &mut Model<E>,
    data: &[TrainPair<E>],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_iter: impl FnMut(&StepStats),
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let mut opt = Sgd::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.max_iters {
        let batch: Vec<&TrainPair<E>> = (0..cfg.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let stats = train_step(model, &mut opt, &batch, cfg)?;
        on_iter(&stats);
        if let Some(dir) = checkpoint_dir {
            if stats.iter % cfg.checkpoint_interval == 0 || stats.iter == cfg.max_iters {
                checkpoint::save(&dir.join(format!("iter{:06}", stats.iter)), &model.params)?;
            }
        }
    }
    Ok(())
}

/// CSV header matching the per-iteration log rows.
pub const LOG_HEADER: &str = "iter,lr,loss,loss_scale2,loss_scale3,loss_scale4,loss_scale5";

pub fn log_row(s: &StepStats) -> String {
    format!(
        "{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10}",
        s.iter, s.lr, s.loss, s.per_scale[0], s.per_scale[1], s.per_scale[2], s.per_scale[3]
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gt_map_on_cell_center_before_smoothing() {
        // keypoint exactly on integer feature coords -> single bilinear cell
        let w = bilinear_cell_weights((32.0, 16.0), 4, (14, 20));
        assert_eq!(w, vec![((1, 2), 1.0)]);
        // midpoint of four cells -> quarter weights
        let w = bilinear_cell_weights((40.0, 24.0), 4, (14, 20));
        assert_eq!(w.len(), 4);
        for (_, wt) in w {
            assert!((wt - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn gt_map_is_normalized_everywhere() {
        for seed in 0..20u64 {
            let x = (seed as f64 * 15.37) % 319.0;
            let y = (seed as f64 * 9.11) % 223.0;
            for scale in 2..=5 {
                let ext = (224 >> scale, 320 >> scale);
                let m = build_gt_map((x, y), scale, ext).unwrap();
                let s: f64 = m.data().iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "scale {scale} kp ({x},{y}): {s}");
                assert!(m.data().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn gt_map_rejects_out_of_bounds() {
        assert!(build_gt_map((-1.0, 5.0), 4, (14, 20)).is_err());
        assert!(build_gt_map((5.0, 224.0), 4, (14, 20)).is_err());
    }

    #[test]
    fn filter_drops_out_of_bounds_pairs() {
        let s = vec![(1.0, 1.0), (-1.0, 5.0), (10.0, 10.0)];
        let t = vec![(2.0, 2.0), (3.0, 3.0), (400.0, 10.0)];
        let (fs, ft, dropped) = filter_annotations(&s, &t, (224, 320));
        assert_eq!(fs, vec![(1.0, 1.0)]);
        assert_eq!(ft, vec![(2.0, 2.0)]);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn sgd_matches_hand_recurrence() {
        let cfg = TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let config = crate::model::ModelConfig::toy();
        let mut model = Model::<f64>::init(config, 1).unwrap();
        let mut opt = Sgd::new(&model);
        let p0 = model.params.tensors()[0].data()[0];
        let g = 2.0;
        let mut grads: Vec<Option<Tensor<f64>>> = model
            .params
            .tensors()
            .iter()
            .map(|t| Some(Tensor::zeros(t.shape().to_vec())))
            .collect();
        grads[0].as_mut().unwrap().data_mut()[0] = g;
        opt.step(&mut model, &grads, &cfg).unwrap();
        opt.step(&mut model, &grads, &cfg).unwrap();
        // v1 = g, p1 = p0 - lr g; v2 = 0.9 g + g, p2 = p1 - lr (1.9 g)
        let want = p0 - 0.1 * g - 0.1 * 1.9 * g;
        assert!((model.params.tensors()[0].data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_update_is_pure_weight_decay() {
        let cfg = TrainConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let config = crate::model::ModelConfig::toy();
        let mut model = Model::<f64>::init(config, 2).unwrap();
        let before: Vec<f64> = model.params.tensors()[0].data().to_vec();
        let grads: Vec<Option<Tensor<f64>>> = model.params.tensors().iter().map(|_| None).collect();
        let mut opt = Sgd::new(&model);
        opt.step(&mut model, &grads, &cfg).unwrap();
        for (b, a) in before.iter().zip(model.params.tensors()[0].data()) {
            assert!((a - b * (1.0 - 0.5 * 0.01)).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_decays_at_interval_boundaries() {
        let cfg = TrainConfig {
            lr: 0.0005,
            decay_interval: 10,
            ..TrainConfig::default()
        };
        let model = Model::<f64>::init(crate::model::ModelConfig::toy(), 3).unwrap();
        let mut opt = Sgd::new(&model);
        assert_eq!(opt.lr_at(&cfg), 0.0005);
        opt.iter = 9;
        assert_eq!(opt.lr_at(&cfg), 0.0005);
        opt.iter = 10;
        assert!((opt.lr_at(&cfg) - 0.00005).abs() < 1e-15);
        opt.iter = 25;
        assert!((opt.lr_at(&cfg) - 0.000005).abs() < 1e-15);
    }
}
