//! Matching pathway: unnormalized 4-D correlation per scale, top-down
//! complementation through separable bicubic upscaling, spatial softmax to
//! probabilities, and keypoint transfer.
//!
//! Two routes produce accumulated scores. The full route materializes the
//! rank-4 tensors, which is fine at coarse scales and in tests. For a single
//! query cell the sliced route computes just that cell's score map: the
//! residual part is one correlation row, and the complement part contracts
//! the bicubic taps over the query axes before upscaling the remaining two.
//! Both routes agree exactly because the four separable passes act on
//! disjoint axes.

use crate::elem::Element;
use crate::error::{Error, Result};
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

/// Scores of one scale: the residual correlation and the accumulated tensor
/// after complementation (equal at the coarsest scale).
pub struct ScaleScores {
    pub scale: usize,
    pub residual: Var,
    pub accumulated: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

/// Full accumulated score tensors for scales `min_scale..=5`.
///
/// `feats` are the enhanced maps indexed by `scale - 2`. With
/// `complementation` off every accumulated tensor equals its residual.
pub fn accumulate_scores_from<E: Element>(
    tape: &mut GradientTape<E>,
    src: &[Var],
    tgt: &[Var],
    complementation: bool,
    min_scale: usize,
) -> Result<Vec<ScaleScores>> {
    if !(2..=5).contains(&min_scale) {
        return Err(Error::invalid(format!("min_scale {min_scale} outside 2..=5")));
    }
    let mut out: Vec<ScaleScores> = Vec::new();
    for scale in (min_scale..=5).rev() {
        let residual = tape.correlate(src[scale - 2], tgt[scale - 2])?;
        let accumulated = match out.last() {
            Some(upper) if complementation => {
                let up = tape.upscale4d(upper.accumulated)?;
                tape.add(residual, up)?
            }
            _ => residual,
        };
        out.push(ScaleScores {
            scale,
            residual,
            accumulated,
        });
    }
    out.reverse();
    Ok(out)
}

/// Full accumulated tensors at every scale. Intended for coarse scales and
/// small test inputs; the finest production tensor is large.
pub fn accumulate_scores<E: Element>(
    tape: &mut GradientTape<E>,
    src: &[Var],
    tgt: &[Var],
    complementation: bool,
) -> Result<Vec<ScaleScores>> {
    accumulate_scores_from(tape, src, tgt, complementation, 2)
}

/// Entry-count ceiling above which a scale's full rank-4 tensor is not
/// materialized and queries fall back to the sliced route.
pub const FULL_VOLUME_LIMIT: usize = 1 << 21;

/// Finest scale whose full correlation volume stays under the limit.
pub fn auto_min_full_scale<E: Element>(tape: &GradientTape<E>, src: &[Var], tgt: &[Var]) -> usize {
    for scale in 2..=5 {
        let s = tape.value(src[scale - 2]).shape();
        let t = tape.value(tgt[scale - 2]).shape();
        if s[1] * s[2] * t[1] * t[2] <= FULL_VOLUME_LIMIT {
            return scale;
        }
    }
    5
}

pub fn find_scale(scores: &[ScaleScores], scale: usize) -> Result<&ScaleScores> {
    scores
        .iter()
        .find(|s| s.scale == scale)
        .ok_or_else(|| Error::invalid(format!("no scores at scale {scale}")))
}

/// Accumulated-score map of one query cell: the opposite image's cells at
/// `scale`. Uses the materialized tensor when present, otherwise the sliced
/// route (which needs the next-coarser accumulated tensor).
pub fn query_slice<E: Element>(
    tape: &mut GradientTape<E>,
    src: &[Var],
    tgt: &[Var],
    scores: &[ScaleScores],
    scale: usize,
    cell: (usize, usize),
    dir: Direction,
    complementation: bool,
) -> Result<Var> {
    let (a, b) = cell;
    if let Ok(full) = find_scale(scores, scale) {
        return match dir {
            Direction::SourceToTarget => tape.slice_source(full.accumulated, a, b),
            Direction::TargetToSource => tape.slice_target(full.accumulated, a, b),
        };
    }
    let (xs, xt) = (src[scale - 2], tgt[scale - 2]);
    let residual = match dir {
        Direction::SourceToTarget => tape.corr_slice_source(xs, xt, a, b)?,
        Direction::TargetToSource => tape.corr_slice_target(xs, xt, a, b)?,
    };
    if !complementation {
        return Ok(residual);
    }
    let upper = find_scale(scores, scale + 1).map_err(|_| {
        Error::invalid(format!(
            "sliced query at scale {scale} needs accumulated scores at scale {}",
            scale + 1
        ))
    })?;
    let taps = match dir {
        Direction::SourceToTarget => tape.contract_source_taps(upper.accumulated, a, b)?,
        Direction::TargetToSource => tape.contract_target_taps(upper.accumulated, a, b)?,
    };
    let up = tape.upscale2d(taps)?;
    tape.add(residual, up)
}

/// Spatial softmax of a rank-2 score slice into a probability map.
pub fn to_probability<E: Element>(tape: &mut GradientTape<E>, slice: Var) -> Result<Var> {
    if tape.value(slice).rank() != 2 {
        return Err(Error::shape("probability map expects a rank-2 score slice"));
    }
    tape.softmax(slice, &[0, 1])
}

/// Feature-grid cell of a pixel coordinate: floor(coord / stride), clamped
/// to the grid.
pub fn cell_of(x: f64, y: f64, scale: usize, extents: (usize, usize)) -> (usize, usize) {
    let stride = (1usize << scale) as f64;
    let row = ((y / stride).floor() as isize).clamp(0, extents.0 as isize - 1) as usize;
    let col = ((x / stride).floor() as isize).clamp(0, extents.1 as isize - 1) as usize;
    (row, col)
}

/// Center pixel coordinates (x, y) of a feature-grid cell.
pub fn cell_center(row: usize, col: usize, scale: usize) -> (f64, f64) {
    let stride = (1usize << scale) as f64;
    (col as f64 * stride + stride / 2.0, row as f64 * stride + stride / 2.0)
}

/// Argmax keypoint transfer: the highest-probability cell, ties broken by
/// lowest row-major index, mapped back to its center pixel.
pub fn transfer_keypoint<E: Element>(prob: &Tensor<E>, scale: usize) -> Result<(f64, f64)> {
    let [_h, w] = *prob.shape() else {
        return Err(Error::shape("keypoint transfer expects a rank-2 map"));
    };
    let mut best = 0usize;
    let mut best_v = prob.data()[0];
    for (i, &v) in prob.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    Ok(cell_center(best / w, best % w, scale))
}

/// Best scale by score, ties toward the finer (numerically smaller) scale.
pub fn select_scale(pck_by_scale: &[(usize, f64)]) -> Result<usize> {
    if pck_by_scale.is_empty() {
        return Err(Error::invalid("scale selection needs at least one candidate"));
    }
    let mut best = pck_by_scale[0];
    for &(scale, pck) in &pck_by_scale[1..] {
        if pck > best.1 || (pck == best.1 && scale < best.0) {
            best = (scale, pck);
        }
    }
    Ok(best.0)
}
