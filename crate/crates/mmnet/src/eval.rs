//! Evaluation: PCK metrics with per-category aggregation, PCK-alpha curves,
//! thin-plate-spline warping for qualitative outputs, and the inference
//! drivers that turn a model plus an image pair into predicted keypoints.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::elem::Element;
use crate::error::{Error, Result};
use crate::matching::{self, Direction};
use crate::model::Model;
use crate::tape::GradientTape;
use crate::tensor::Tensor;

pub const CANVAS: (usize, usize) = (224, 320);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizerKind {
    ImageLongerSide,
    BboxLongerSide,
}

impl NormalizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormalizerKind::ImageLongerSide => "image",
            NormalizerKind::BboxLongerSide => "bbox",
        }
    }
}

/// One scored keypoint: predicted and ground-truth pixel locations plus the
/// normalizing length d for its pair.
#[derive(Clone, Debug)]
pub struct PckItem {
    pub category: String,
    pub pred: (f64, f64),
    pub gt: (f64, f64),
    pub d: f64,
}

#[derive(Clone, Debug)]
pub struct PckResult {
    pub alpha: f64,
    pub normalizer: NormalizerKind,
    /// category -> (correct, total)
    pub per_category: BTreeMap<String, (usize, usize)>,
    pub correct: usize,
    pub total: usize,
}

impl PckResult {
    pub fn aggregate(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn category_pck(&self, category: &str) -> Option<f64> {
        self.per_category
            .get(category)
            .map(|&(c, t)| c as f64 / t as f64)
    }
}

/// A keypoint counts as correct iff its error radius is at most alpha * d
/// (boundary inclusive).
pub fn pck(items: &[PckItem], alpha: f64, normalizer: NormalizerKind) -> Result<PckResult> {
    if items.is_empty() {
        return Err(Error::invalid("pck needs at least one keypoint"));
    }
    let mut per_category: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for item in items {
        if item.d <= 0.0 {
            return Err(Error::invalid(format!("nonpositive normalizer d = {}", item.d)));
        }
        let dist = ((item.pred.0 - item.gt.0).powi(2) + (item.pred.1 - item.gt.1).powi(2)).sqrt();
        let ok = dist <= alpha * item.d;
        let entry = per_category.entry(item.category.clone()).or_insert((0, 0));
        entry.1 += 1;
        if ok {
            entry.0 += 1;
            correct += 1;
        }
    }
    Ok(PckResult {
        alpha,
        normalizer,
        per_category,
        correct,
        total: items.len(),
    })
}

/// PCK at each alpha of an ascending grid; the result is nondecreasing.
pub fn pck_curve(
    items: &[PckItem],
    alphas: &[f64],
    normalizer: NormalizerKind,
) -> Result<Vec<(f64, f64)>> {
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("alphas must be strictly ascending"));
    }
    alphas
        .iter()
        .map(|&a| Ok((a, pck(items, a, normalizer)?.aggregate())))
        .collect()
}

pub fn pck_json(result: &PckResult) -> String {
    let mut per = serde_json::Map::new();
    for (cat, &(c, t)) in &result.per_category {
        per.insert(
            cat.clone(),
            serde_json::json!({"correct": c, "total": t, "pck": c as f64 / t as f64}),
        );
    }
    serde_json::json!({
        "alpha": result.alpha,
        "normalizer": result.normalizer.as_str(),
        "per_category": per,
        "all": result.aggregate(),
    })
    .to_string()
}

/// Thin-plate spline R^2 -> R^2: affine part plus radial terms
/// U(r) = r^2 log r^2 at the control points.
#[derive(Clone, Debug)]
pub struct TpsWarp {
    control: Vec<(f64, f64)>,
    /// Radial weights then affine (1, x, y) coefficients, per output axis.
    wx: Vec<f64>,
    wy: Vec<f64>,
    ax: [f64; 3],
    ay: [f64; 3],
}

fn tps_u(rsq: f64) -> f64 {
    if rsq > 0.0 {
        rsq * rsq.ln()
    } else {
        0.0
    }
}

/// Fits the interpolating (lambda = 0) or regularized spline mapping
/// `src[i]` to `dst[i]`.
pub fn tps_fit(src: &[(f64, f64)], dst: &[(f64, f64)], lambda: f64) -> Result<TpsWarp> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return Err(Error::invalid("tps needs >= 3 matched control points"));
    }
    if lambda < 0.0 {
        return Err(Error::invalid("tps regularization must be nonnegative"));
    }
    let m = n + 3;
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        for j in 0..n {
            let dx = src[i].0 - src[j].0;
            let dy = src[i].1 - src[j].1;
            a[(i, j)] = tps_u(dx * dx + dy * dy);
        }
        a[(i, i)] += lambda;
        a[(i, n)] = 1.0;
        a[(i, n + 1)] = src[i].0;
        a[(i, n + 2)] = src[i].1;
        a[(n, i)] = 1.0;
        a[(n + 1, i)] = src[i].0;
        a[(n + 2, i)] = src[i].1;
    }
    let lu = a.full_piv_lu();
    let solve_axis = |values: Vec<f64>| -> Result<(Vec<f64>, [f64; 3])> {
        let mut rhs = DVector::<f64>::zeros(m);
        for (i, v) in values.iter().enumerate() {
            rhs[i] = *v;
        }
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("tps system is singular (collinear or duplicate control points)".into()))?;
        let w = (0..n).map(|i| sol[i]).collect();
        Ok((w, [sol[n], sol[n + 1], sol[n + 2]]))
    };
    let (wx, ax) = solve_axis(dst.iter().map(|p| p.0).collect())?;
    let (wy, ay) = solve_axis(dst.iter().map(|p| p.1).collect())?;
    Ok(TpsWarp {
        control: src.to_vec(),
        wx,
        wy,
        ax,
        ay,
    })
}

impl TpsWarp {
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let mut x = self.ax[0] + self.ax[1] * p.0 + self.ax[2] * p.1;
        let mut y = self.ay[0] + self.ay[1] * p.0 + self.ay[2] * p.1;
        for (i, c) in self.control.iter().enumerate() {
            let dx = p.0 - c.0;
            let dy = p.1 - c.1;
            let u = tps_u(dx * dx + dy * dy);
            x += self.wx[i] * u;
            y += self.wy[i] * u;
        }
        (x, y)
    }

    /// Largest radial weight magnitude; vanishes for affine-consistent data.
    pub fn max_radial_weight(&self) -> f64 {
        self.wx
            .iter()
            .chain(&self.wy)
            .fold(0.0f64, |m, w| m.max(w.abs()))
    }
}

/// Pull-back warp of an image: the spline maps output pixels to source
/// sample positions (fit dst -> src), sampled bilinearly with edge clamping.
pub fn tps_warp_image<E: Element>(warp: &TpsWarp, image: &Tensor<E>) -> Result<Tensor<E>> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::shape("image warp expects rank 3"));
    };
    let mut out = Tensor::zeros(vec![c, h, w]);
    for oy in 0..h {
        for ox in 0..w {
            let (sx, sy) = warp.apply((ox as f64, oy as f64));
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let v00 = image.at(&[ch, y0, x0]).to_f64();
                let v01 = image.at(&[ch, y0, x1]).to_f64();
                let v10 = image.at(&[ch, y1, x0]).to_f64();
                let v11 = image.at(&[ch, y1, x1]).to_f64();
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out.set(&[ch, oy, ox], E::from_f64(v));
            }
        }
    }
    Ok(out)
}

/// Predicted target points for the source keypoints of one pair, at every
/// requested scale. One forward pass serves all scales.
pub fn predict_pair<E: Element>(
    model: &Model<E>,
    source: &Tensor<E>,
    target: &Tensor<E>,
    src_kps: &[(f64, f64)],
    scales: &[usize],
) -> Result<Vec<Vec<(f64, f64)>>> {
    let mut tape = GradientTape::<E>::new();
    let bound = model.params.bind(&mut tape, false);
    let (src, tgt) = model.enhanced_pair(&mut tape, &bound, source, target)?;
    let min_scale = matching::auto_min_full_scale(&tape, &src, &tgt);
    let scores = matching::accumulate_scores_from(
        &mut tape,
        &src,
        &tgt,
        model.config.complementation,
        min_scale,
    )?;
    let mut out = Vec::with_capacity(scales.len());
    for &scale in scales {
        let sshape = tape.value(src[scale - 2]).shape().to_vec();
        let mut preds = Vec::with_capacity(src_kps.len());
        for &kp in src_kps {
            let cell = matching::cell_of(kp.0, kp.1, scale, (sshape[1], sshape[2]));
            let slice = matching::query_slice(
                &mut tape,
                &src,
                &tgt,
                &scores,
                scale,
                cell,
                Direction::SourceToTarget,
                model.config.complementation,
            )?;
            let prob = matching::to_probability(&mut tape, slice)?;
            preds.push(matching::transfer_keypoint(tape.value(prob), scale)?);
        }
        out.push(preds);
    }
    Ok(out)
}

/// An evaluation pair: images plus annotations in the canonical frame.
pub struct EvalPair<E: Element> {
    pub pair_id: String,
    pub category: String,
    pub source: Tensor<E>,
    pub target: Tensor<E>,
    pub src_kps: Vec<(f64, f64)>,
    pub tgt_kps: Vec<(f64, f64)>,
    /// (x0, y0, x1, y1) of the target object, for bbox normalization.
    pub tgt_bbox: Option<[f64; 4]>,
}

impl<E: Element> EvalPair<E> {
    pub fn normalizer_d(&self, kind: NormalizerKind) -> f64 {
        match (kind, self.tgt_bbox) {
            (NormalizerKind::BboxLongerSide, Some([x0, y0, x1, y1])) => {
                (x1 - x0).abs().max((y1 - y0).abs())
            }
            _ => CANVAS.0.max(CANVAS.1) as f64,
        }
    }
}

/// PCK items at one scale over a set of pairs.
pub fn score_pairs<E: Element>(
    model: &Model<E>,
    pairs: &[EvalPair<E>],
    scale: usize,
    normalizer: NormalizerKind,
) -> Result<Vec<PckItem>> {
    let mut items = Vec::new();
    for pair in pairs {
        let preds = predict_pair(model, &pair.source, &pair.target, &pair.src_kps, &[scale])?;
        let d = pair.normalizer_d(normalizer);
        for (pred, gt) in preds[0].iter().zip(&pair.tgt_kps) {
            items.push(PckItem {
                category: pair.category.clone(),
                pred: *pred,
                gt: *gt,
                d,
            });
        }
    }
    Ok(items)
}

/// Validation-driven scale choice: PCK@alpha per scale, ties to the finer.
pub fn select_scale<E: Element>(
    model: &Model<E>,
    pairs: &[EvalPair<E>],
    alpha: f64,
) -> Result<usize> {
    if pairs.is_empty() {
        return Err(Error::invalid("scale selection needs validation pairs"));
    }
    let scales = [2usize, 3, 4, 5];
    let mut by_scale = Vec::new();
    let mut per_scale_items: Vec<Vec<PckItem>> = vec![Vec::new(); 4];
    for pair in pairs {
        let preds = predict_pair(model, &pair.source, &pair.target, &pair.src_kps, &scales)?;
        let d = pair.normalizer_d(NormalizerKind::ImageLongerSide);
        for (si, scale_preds) in preds.iter().enumerate() {
            for (pred, gt) in scale_preds.iter().zip(&pair.tgt_kps) {
                per_scale_items[si].push(PckItem {
                    category: pair.category.clone(),
                    pred: *pred,
                    gt: *gt,
                    d,
                });
            }
        }
    }
    for (si, scale) in scales.iter().enumerate() {
        let r = pck(&per_scale_items[si], alpha, NormalizerKind::ImageLongerSide)?;
        by_scale.push((*scale, r.aggregate()));
    }
    matching::select_scale(&by_scale)
}
