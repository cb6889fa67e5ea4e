//! Data ingestion and generation: P6 PPM raster I/O, bilinear resizing to
//! the canonical 224x320 frame, annotation CSV parsing, and a synthetic
//! correspondence-pair generator with analytically exact ground truth.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::elem::Element;
use crate::error::{Error, Result};
use crate::eval::{tps_fit, TpsWarp};
use crate::tensor::Tensor;

pub const CANVAS_H: usize = 224;
pub const CANVAS_W: usize = 320;

// --- PPM (P6) ---------------------------------------------------------------

fn read_ppm_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match r.read_exact(&mut byte) {
            Ok(()) => {}
            Err(_) if !tok.is_empty() => return Ok(tok),
            Err(e) => return Err(Error::Parse(format!("ppm header ended early: {e}"))),
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
        } else if c == '#' {
            in_comment = true;
        } else if c.is_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(c);
        }
    }
}

/// Decodes a binary P6 PPM (maxval 255) into [3,H,W] values in [0,1].
pub fn read_ppm<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let magic = read_ppm_token(&mut r)?;
    if magic != "P6" {
        return Err(Error::Parse(format!("{}: not a P6 ppm (magic {magic})", path.display())));
    }
    let parse = |t: String| -> Result<usize> {
        t.parse()
            .map_err(|_| Error::Parse(format!("{}: bad ppm header token {t}", path.display())))
    };
    let w = parse(read_ppm_token(&mut r)?)?;
    let h = parse(read_ppm_token(&mut r)?)?;
    let maxval = parse(read_ppm_token(&mut r)?)?;
    if maxval != 255 {
        return Err(Error::Parse(format!("{}: only maxval 255 supported", path.display())));
    }
    if w == 0 || h == 0 {
        return Err(Error::Parse(format!("{}: empty image", path.display())));
    }
    let mut payload = vec![0u8; w * h * 3];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Parse(format!("{}: truncated payload: {e}", path.display())))?;
    let mut out = Tensor::zeros(vec![3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = payload[(y * w + x) * 3 + c] as f64 / 255.0;
                out.set(&[c, y, x], E::from_f64(v));
            }
        }
    }
    Ok(out)
}

/// Writes [3,H,W] values in [0,1] as a binary P6 PPM.
pub fn write_ppm<E: Element>(path: &Path, image: &Tensor<E>) -> Result<()> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::shape("ppm writer expects rank-3 [3,H,W]"));
    };
    if c != 3 {
        return Err(Error::shape("ppm writer expects 3 channels"));
    }
    let mut payload = Vec::with_capacity(w * h * 3 + 32);
    payload.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.at(&[ch, y, x]).to_f64();
                payload.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&payload)?;
    Ok(())
}

/// Half-pixel-aligned bilinear resize with edge clamping.
pub fn resize_bilinear<E: Element>(image: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::shape("resize expects rank-3 input"));
    };
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    let fy = h as f64 / oh as f64;
    let fx = w as f64 / ow as f64;
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) * fy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) * fx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let v = image.at(&[ch, y0, x0]).to_f64() * (1.0 - ty) * (1.0 - tx)
                    + image.at(&[ch, y0, x1]).to_f64() * (1.0 - ty) * tx
                    + image.at(&[ch, y1, x0]).to_f64() * ty * (1.0 - tx)
                    + image.at(&[ch, y1, x1]).to_f64() * ty * tx;
                out.set(&[ch, oy, ox], E::from_f64(v));
            }
        }
    }
    Ok(out)
}

/// Loads an image and resizes it to the canonical frame; also returns the
/// (sx, sy) factors that map original keypoints into that frame.
pub fn load_canvas_image<E: Element>(path: &Path) -> Result<(Tensor<E>, (f64, f64))> {
    let raw = read_ppm::<E>(path)?;
    let [_, h, w] = *raw.shape() else { unreachable!() };
    let factors = (CANVAS_W as f64 / w as f64, CANVAS_H as f64 / h as f64);
    let resized = if (h, w) == (CANVAS_H, CANVAS_W) {
        raw
    } else {
        resize_bilinear(&raw, CANVAS_H, CANVAS_W)?
    };
    Ok((resized, factors))
}

/// Keypoint rescale into the canonical frame: plain per-axis factors.
pub fn scale_keypoint(kp: (f64, f64), factors: (f64, f64)) -> (f64, f64) {
    (kp.0 * factors.0, kp.1 * factors.1)
}

// --- Annotations ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PairAnnotation {
    pub pair_id: String,
    pub category: String,
    pub src_image: String,
    pub tgt_image: String,
    pub src_kps: Vec<(f64, f64)>,
    pub tgt_kps: Vec<(f64, f64)>,
    /// (x0, y0, x1, y1)
    pub src_bbox: Option<[f64; 4]>,
    pub tgt_bbox: Option<[f64; 4]>,
}

pub const ANNOTATION_HEADER: &str = "pair_id,category,src_image,tgt_image,src_kps,tgt_kps,src_bbox,tgt_bbox";

fn format_kps(kps: &[(f64, f64)]) -> String {
    kps.iter()
        .map(|(x, y)| format!("{x:.6}:{y:.6}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_kps(field: &str) -> Result<Vec<(f64, f64)>> {
    field
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (x, y) = pair
                .split_once(':')
                .ok_or_else(|| Error::Parse(format!("keypoint `{pair}` is not x:y")))?;
            Ok((
                x.trim().parse().map_err(|_| Error::Parse(format!("bad x `{x}`")))?,
                y.trim().parse().map_err(|_| Error::Parse(format!("bad y `{y}`")))?,
            ))
        })
        .collect()
}

fn format_bbox(b: &Option<[f64; 4]>) -> String {
    match b {
        Some([x0, y0, x1, y1]) => format!("{x0:.6}:{y0:.6}:{x1:.6}:{y1:.6}"),
        None => String::new(),
    }
}

fn parse_bbox(field: &str) -> Result<Option<[f64; 4]>> {
    if field.trim().is_empty() {
        return Ok(None);
    }
    let parts: Vec<&str> = field.split(':').collect();
    if parts.len() != 4 {
        return Err(Error::Parse(format!("bbox `{field}` is not x0:y0:x1:y1")));
    }
    let mut out = [0.0; 4];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| Error::Parse(format!("bad bbox value `{p}`")))?;
    }
    Ok(Some(out))
}

fn parse_row(line: &str) -> Result<PairAnnotation> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() < 6 {
        return Err(Error::Parse(format!("expected >= 6 columns, got {}", fields.len())));
    }
    let src_kps = parse_kps(fields[4])?;
    let tgt_kps = parse_kps(fields[5])?;
    if src_kps.is_empty() || src_kps.len() != tgt_kps.len() {
        return Err(Error::Parse(format!(
            "keypoint lists disagree: {} source vs {} target",
            src_kps.len(),
            tgt_kps.len()
        )));
    }
    let in_canvas = |p: &(f64, f64)| {
        p.0 >= 0.0 && p.0 < CANVAS_W as f64 && p.1 >= 0.0 && p.1 < CANVAS_H as f64
    };
    if let Some(p) = src_kps.iter().chain(&tgt_kps).find(|p| !in_canvas(p)) {
        return Err(Error::Parse(format!("keypoint ({}, {}) outside the canvas", p.0, p.1)));
    }
    Ok(PairAnnotation {
        pair_id: fields[0].trim().to_string(),
        category: fields[1].trim().to_string(),
        src_image: fields[2].trim().to_string(),
        tgt_image: fields[3].trim().to_string(),
        src_kps,
        tgt_kps,
        src_bbox: fields.get(6).map(|f| parse_bbox(f)).transpose()?.flatten(),
        tgt_bbox: fields.get(7).map(|f| parse_bbox(f)).transpose()?.flatten(),
    })
}

/// Parses the annotation CSV. Malformed rows are skipped with a warning on
/// stderr naming the pair; a file with no valid rows is an error.
pub fn parse_annotations(path: &Path) -> Result<Vec<PairAnnotation>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || ln == 0 {
            continue;
        }
        match parse_row(line) {
            Ok(row) => rows.push(row),
            Err(e) => {
                let pair_id = line.split(',').next().unwrap_or("?");
                eprintln!(
                    "warning: {} line {}: skipping pair `{pair_id}`: {e}",
                    path.display(),
                    ln + 1
                );
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: no valid annotation rows", path.display())));
    }
    Ok(rows)
}

pub fn write_annotations(path: &Path, rows: &[PairAnnotation]) -> Result<()> {
    let mut out = String::from(ANNOTATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.pair_id,
            r.category,
            r.src_image,
            r.tgt_image,
            format_kps(&r.src_kps),
            format_kps(&r.tgt_kps),
            format_bbox(&r.src_bbox),
            format_bbox(&r.tgt_bbox),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

// --- Synthetic generation ---------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpFamily {
    Identity,
    Affine,
    Tps,
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub warp: WarpFamily,
    /// Scales all geometric and photometric perturbations; 1.0 = moderate.
    pub magnitude: f64,
    pub keypoints_per_pair: usize,
    pub pairs: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            warp: WarpFamily::Tps,
            magnitude: 1.0,
            keypoints_per_pair: 10,
            pairs: 200,
        }
    }
}

pub struct DatasetPair<E: Element> {
    pub annotation: PairAnnotation,
    pub source: Tensor<E>,
    pub target: Tensor<E>,
}

/// Target-frame-to-source-frame coordinate map of one synthetic pair.
enum WarpMap {
    Affine { a: [f64; 4], t: [f64; 2], c: [f64; 2] },
    Tps(TpsWarp),
}

impl WarpMap {
    fn apply(&self, q: (f64, f64)) -> (f64, f64) {
        match self {
            WarpMap::Affine { a, t, c } => {
                let (dx, dy) = (q.0 - c[0], q.1 - c[1]);
                (
                    a[0] * dx + a[1] * dy + c[0] + t[0],
                    a[2] * dx + a[3] * dy + c[1] + t[1],
                )
            }
            WarpMap::Tps(w) => w.apply(q),
        }
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    color: [f64; 3],
}

fn render_source(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Vec<Blob>) {
    let (h, w) = (CANVAS_H, CANVAS_W);
    let top: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.5));
    let bot: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.5));
    let mut img = Tensor::<f64>::zeros(vec![3, h, w]);
    for y in 0..h {
        let t = y as f64 / (h - 1) as f64;
        for x in 0..w {
            for c in 0..3 {
                img.set(&[c, y, x], top[c] * (1.0 - t) + bot[c] * t);
            }
        }
    }

    // grid lines give the texture long-range structure
    let spacing = rng.random_range(28..44) as f64;
    let phase_x = rng.random_range(0.0..spacing);
    let phase_y = rng.random_range(0.0..spacing);
    let line: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    for y in 0..h {
        for x in 0..w {
            let on_x = (x as f64 + phase_x) % spacing < 2.0;
            let on_y = (y as f64 + phase_y) % spacing < 2.0;
            if on_x || on_y {
                for c in 0..3 {
                    let v = img.at(&[c, y, x]);
                    img.set(&[c, y, x], 0.5 * v + 0.5 * line[c]);
                }
            }
        }
    }

    // localizable blobs; keypoints later sample their centers
    let nblobs = rng.random_range(10..16);
    let blobs: Vec<Blob> = (0..nblobs)
        .map(|_| Blob {
            cx: rng.random_range(25.0..(w as f64 - 25.0)),
            cy: rng.random_range(25.0..(h as f64 - 25.0)),
            sigma: rng.random_range(5.0..14.0),
            color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        })
        .collect();
    for blob in &blobs {
        let reach = (3.0 * blob.sigma).ceil() as isize;
        let (bx, by) = (blob.cx.round() as isize, blob.cy.round() as isize);
        for y in (by - reach).max(0)..(by + reach).min(h as isize) {
            for x in (bx - reach).max(0)..(bx + reach).min(w as isize) {
                let dx = x as f64 - blob.cx;
                let dy = y as f64 - blob.cy;
                let g = (-(dx * dx + dy * dy) / (2.0 * blob.sigma * blob.sigma)).exp();
                for c in 0..3 {
                    let v = img.at(&[c, y as usize, x as usize]);
                    img.set(&[c, y as usize, x as usize], v + g * (blob.color[c] - v));
                }
            }
        }
    }
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    (img, blobs)
}

fn sample_warp(rng: &mut ChaCha8Rng, family: WarpFamily, m: f64) -> Result<WarpMap> {
    let affine = |rng: &mut ChaCha8Rng, m: f64| -> WarpMap {
        let theta = rng.random_range(-0.10..0.10) * m;
        let scale = 1.0 + rng.random_range(-0.08..0.08) * m;
        let shear = rng.random_range(-0.05..0.05) * m;
        let (s, c) = theta.sin_cos();
        WarpMap::Affine {
            a: [
                scale * c + shear * s,
                -scale * s + shear * c,
                scale * s,
                scale * c,
            ],
            t: [
                rng.random_range(-12.0..12.0) * m,
                rng.random_range(-12.0..12.0) * m,
            ],
            c: [CANVAS_W as f64 / 2.0, CANVAS_H as f64 / 2.0],
        }
    };
    match family {
        WarpFamily::Identity => Ok(WarpMap::Affine {
            a: [1.0, 0.0, 0.0, 1.0],
            t: [0.0, 0.0],
            c: [0.0, 0.0],
        }),
        WarpFamily::Affine => Ok(affine(rng, m)),
        WarpFamily::Tps => {
            let base = affine(rng, 0.6 * m);
            let mut ctrl_t = Vec::new();
            let mut ctrl_s = Vec::new();
            for gy in 0..3 {
                for gx in 0..4 {
                    let q = (
                        20.0 + gx as f64 * (CANVAS_W as f64 - 40.0) / 3.0,
                        20.0 + gy as f64 * (CANVAS_H as f64 - 40.0) / 2.0,
                    );
                    let p = base.apply(q);
                    ctrl_t.push(q);
                    ctrl_s.push((
                        p.0 + rng.random_range(-7.0..7.0) * m,
                        p.1 + rng.random_range(-7.0..7.0) * m,
                    ));
                }
            }
            Ok(WarpMap::Tps(tps_fit(&ctrl_t, &ctrl_s, 0.0)?))
        }
    }
}

fn sample_bilinear(img: &Tensor<f64>, x: f64, y: f64) -> [f64; 3] {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    std::array::from_fn(|c| {
        img.at(&[c, y0, x0]) * (1.0 - fy) * (1.0 - fx)
            + img.at(&[c, y0, x1]) * (1.0 - fy) * fx
            + img.at(&[c, y1, x0]) * fy * (1.0 - fx)
            + img.at(&[c, y1, x1]) * fy * fx
    })
}

/// Approximate inverse of the target->source map at `p` by fixed-point
/// iteration; the warps are near-identity so this converges fast.
fn invert_map(map: &WarpMap, p: (f64, f64)) -> Option<(f64, f64)> {
    let mut q = p;
    for _ in 0..40 {
        let fq = map.apply(q);
        q = (q.0 + p.0 - fq.0, q.1 + p.1 - fq.1);
    }
    let fq = map.apply(q);
    let err = ((fq.0 - p.0).powi(2) + (fq.1 - p.1).powi(2)).sqrt();
    (err < 0.25).then_some(q)
}

/// Builds the dataset in memory. Each pair: procedural source, target
/// sampled through an invertible warp, keypoints at blob centers with the
/// analytic warp as ground truth, mild photometric jitter on the target.
pub fn generate_synthetic<E: Element>(spec: &SyntheticSpec) -> Result<Vec<DatasetPair<E>>> {
    if spec.pairs == 0 || spec.keypoints_per_pair == 0 {
        return Err(Error::invalid("need at least one pair and one keypoint"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let margin = 10.0;
    let mut out = Vec::with_capacity(spec.pairs);
    for idx in 0..spec.pairs {
        let (source, blobs) = render_source(&mut rng);
        let map = sample_warp(&mut rng, spec.warp, spec.magnitude)?;

        let (h, w) = (CANVAS_H, CANVAS_W);
        let mut target = Tensor::<f64>::zeros(vec![3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let p = map.apply((x as f64, y as f64));
                let v = sample_bilinear(&source, p.0, p.1);
                for c in 0..3 {
                    target.set(&[c, y, x], v[c]);
                }
            }
        }
        // photometric jitter keeps raw pixel correlation from being trivial
        let gain: [f64; 3] =
            std::array::from_fn(|_| 1.0 + rng.random_range(-0.12..0.12) * spec.magnitude);
        let offset: [f64; 3] =
            std::array::from_fn(|_| rng.random_range(-0.06..0.06) * spec.magnitude);
        for c in 0..3 {
            for i in 0..h * w {
                let v = target.data()[c * h * w + i];
                target.data_mut()[c * h * w + i] = (v * gain[c] + offset[c]).clamp(0.0, 1.0);
            }
        }

        let inside = |p: (f64, f64), m: f64| {
            p.0 >= m && p.0 < w as f64 - m && p.1 >= m && p.1 < h as f64 - m
        };
        let mut src_kps = Vec::new();
        let mut tgt_kps = Vec::new();
        let mut attempts = 0;
        while src_kps.len() < spec.keypoints_per_pair {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::invalid(
                    "could not place keypoints inside both images; reduce the warp magnitude",
                ));
            }
            // anchor on a blob center, jittered, so the point is localizable
            let blob = &blobs[rng.random_range(0..blobs.len())];
            let p_s = (
                blob.cx + rng.random_range(-4.0..4.0),
                blob.cy + rng.random_range(-4.0..4.0),
            );
            if !inside(p_s, margin) {
                continue;
            }
            let Some(q_t) = invert_map(&map, p_s) else { continue };
            if !inside(q_t, margin) {
                continue;
            }
            let p_exact = map.apply(q_t);
            src_kps.push(p_exact);
            tgt_kps.push(q_t);
        }

        let annotation = PairAnnotation {
            pair_id: format!("syn{idx:04}"),
            category: format!("cat{}", idx % 5),
            src_image: format!("images/syn{idx:04}_s.ppm"),
            tgt_image: format!("images/syn{idx:04}_t.ppm"),
            src_kps,
            tgt_kps,
            src_bbox: None,
            tgt_bbox: None,
        };
        out.push(DatasetPair {
            annotation,
            source: source.cast(),
            target: target.cast(),
        });
    }
    Ok(out)
}

/// Writes the manifest layout: `images/` of P6 PPMs plus `annotations.csv`.
pub fn write_dataset<E: Element>(dir: &Path, pairs: &[DatasetPair<E>]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    for pair in pairs {
        write_ppm(&dir.join(&pair.annotation.src_image), &pair.source)?;
        write_ppm(&dir.join(&pair.annotation.tgt_image), &pair.target)?;
    }
    let rows: Vec<PairAnnotation> = pairs.iter().map(|p| p.annotation.clone()).collect();
    write_annotations(&dir.join("annotations.csv"), &rows)
}

/// Loads a manifest directory back into memory, resizing any off-canvas
/// images (keypoints are stored post-resize and pass through unchanged).
pub fn load_dataset<E: Element>(dir: &Path) -> Result<Vec<DatasetPair<E>>> {
    let rows = parse_annotations(&dir.join("annotations.csv"))?;
    rows.into_iter()
        .map(|annotation| {
            let (source, _) = load_canvas_image(&dir.join(&annotation.src_image))?;
            let (target, _) = load_canvas_image(&dir.join(&annotation.tgt_image))?;
            Ok(DatasetPair {
                annotation,
                source,
                target,
            })
        })
        .collect()
}
