//! Command-line surface: dataset synthesis, training, matching, evaluation,
//! PCK curves, TPS warps, and the oracle selftest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmnet::config::Config;
use mmnet::data::{self, DatasetPair, SyntheticSpec, WarpFamily};
use mmnet::eval::{self, EvalPair, NormalizerKind, PckItem};
use mmnet::model::{Model, ModelConfig};
use mmnet::supervision::{self, TrainConfig, TrainPair};
use mmnet::{checkpoint, verify, Error, Result};

type E = f32;

#[derive(Parser)]
#[command(name = "mmnet", about = "Multi-scale matching network for semantic correspondence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key-value configuration file (`key = value`, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set train.lr=0.001 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::from_file(path)?,
            None => Config::empty(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic correspondence dataset (images/ + annotations.csv).
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 10)]
        keypoints: usize,
        /// Warp family: identity | affine | tps.
        #[arg(long, default_value = "tps")]
        warp: String,
        #[arg(long, default_value_t = 1.0)]
        magnitude: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset directory; writes checkpoints and a loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and train_log.csv.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint: per-category PCK table and JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        /// Normalizer: image | bbox.
        #[arg(long, default_value = "image")]
        normalizer: String,
        /// Pyramid scale 2..=5; defaults to validation-driven selection.
        #[arg(long)]
        scale: Option<usize>,
        /// Where to write the PCK JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Predict matches for every annotated keypoint; writes a CSV.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scale: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Warp source images onto targets through TPS fits of predictions.
    Warp {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TPS regularization.
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
    },
    /// PCK-alpha curve from a predictions CSV.
    Curve {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated ascending alphas.
        #[arg(long, default_value = "0.01,0.02,0.03,0.05,0.08,0.1,0.15,0.2")]
        alphas: String,
    },
    /// Run the oracle and gradient self-checks.
    Selftest,
}

fn parse_warp(s: &str) -> Result<WarpFamily> {
    match s {
        "identity" => Ok(WarpFamily::Identity),
        "affine" => Ok(WarpFamily::Affine),
        "tps" => Ok(WarpFamily::Tps),
        _ => Err(Error::invalid(format!("unknown warp family `{s}`"))),
    }
}

fn parse_normalizer(s: &str) -> Result<NormalizerKind> {
    match s {
        "image" => Ok(NormalizerKind::ImageLongerSide),
        "bbox" => Ok(NormalizerKind::BboxLongerSide),
        _ => Err(Error::invalid(format!("unknown normalizer `{s}`"))),
    }
}

fn model_config(cfg: &Config) -> Result<ModelConfig> {
    let mut mc = ModelConfig::default();
    cfg.apply_to_model(&mut mc)?;
    Ok(mc)
}

/// Loads a checkpoint into a model of the given configuration, validating
/// that names and shapes line up with a freshly initialized instance.
fn load_model(cfg: ModelConfig, dir: &Path) -> Result<Model<E>> {
    let reference = Model::<E>::init(cfg.clone(), 0)?;
    let loaded = checkpoint::load::<E>(dir)?;
    if loaded.names() != reference.params.names() {
        return Err(Error::Checkpoint(format!(
            "{}: parameter names do not match the configured architecture",
            dir.display()
        )));
    }
    for ((name, a), (_, b)) in loaded.iter().zip(reference.params.iter()) {
        if a.shape() != b.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?} vs configured {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(Model::from_params(cfg, loaded))
}

fn to_eval_pairs(pairs: &[DatasetPair<E>]) -> Vec<EvalPair<E>> {
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

fn choose_scale(
    model: &Model<E>,
    pairs: &[EvalPair<E>],
    requested: Option<usize>,
    alpha: f64,
) -> Result<usize> {
    if let Some(s) = requested.or(model.config.eval_scale) {
        if !(2..=5).contains(&s) {
            return Err(Error::invalid(format!("scale {s} outside 2..=5")));
        }
        return Ok(s);
    }
    let take = pairs.len().min(20);
    let scale = eval::select_scale(model, &pairs[..take], alpha)?;
    eprintln!("selected scale {scale} on {take} validation pairs");
    Ok(scale)
}

const PRED_HEADER: &str = "pair_id,kp_index,src_x,src_y,pred_x,pred_y,gt_x,gt_y";

struct PredRow {
    pair_id: String,
    kp_index: usize,
    src: (f64, f64),
    pred: (f64, f64),
    gt: (f64, f64),
}

fn write_predictions(path: &Path, rows: &[PredRow]) -> Result<()> {
    let mut out = String::from(PRED_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.pair_id, r.kp_index, r.src.0, r.src.1, r.pred.0, r.pred.1, r.gt.0, r.gt.1
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<PredRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Parse(format!("{} line {}: expected 8 columns", path.display(), ln + 1)));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("{} line {}: bad number `{s}`", path.display(), ln + 1)))
        };
        rows.push(PredRow {
            pair_id: f[0].to_string(),
            kp_index: f[1]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("{} line {}: bad index", path.display(), ln + 1)))?,
            src: (num(f[2])?, num(f[3])?),
            pred: (num(f[4])?, num(f[5])?),
            gt: (num(f[6])?, num(f[7])?),
        });
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: no prediction rows", path.display())));
    }
    Ok(rows)
}

fn predict_dataset(
    model: &Model<E>,
    pairs: &[DatasetPair<E>],
    scale: usize,
) -> Result<Vec<PredRow>> {
    let mut rows = Vec::new();
    let start = std::time::Instant::now();
    for pair in pairs {
        let preds = eval::predict_pair(
            model,
            &pair.source,
            &pair.target,
            &pair.annotation.src_kps,
            &[scale],
        )?;
        for (i, (pred, (&src, &gt))) in preds[0]
            .iter()
            .zip(pair.annotation.src_kps.iter().zip(&pair.annotation.tgt_kps))
            .enumerate()
        {
            rows.push(PredRow {
                pair_id: pair.annotation.pair_id.clone(),
                kp_index: i,
                src,
                pred: *pred,
                gt,
            });
        }
    }
    let ms = start.elapsed().as_millis() as f64 / pairs.len().max(1) as f64;
    eprintln!("matched {} pairs at {ms:.1} ms/pair", pairs.len());
    Ok(rows)
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Synth {
            out,
            pairs,
            keypoints,
            warp,
            magnitude,
            seed,
        } => {
            let cfg = Config::empty();
            let spec = SyntheticSpec {
                seed: cfg.seed(seed)?,
                warp: parse_warp(&warp)?,
                magnitude,
                keypoints_per_pair: keypoints,
                pairs,
            };
            let dataset: Vec<DatasetPair<E>> = data::generate_synthetic(&spec)?;
            data::write_dataset(&out, &dataset)?;
            println!("wrote {} pairs to {}", dataset.len(), out.display());
            Ok(())
        }
        Command::Train { data: dir, out, cfg } => {
            let cfg = cfg.load()?;
            let mut train_cfg = TrainConfig::default();
            cfg.apply_to_train(&mut train_cfg)?;
            train_cfg.seed = cfg.seed(train_cfg.seed)?;
            let mc = model_config(&cfg)?;

            let dataset: Vec<DatasetPair<E>> = data::load_dataset(&dir)?;
            let mut dropped_total = 0;
            let train_pairs: Vec<TrainPair<E>> = dataset
                .into_iter()
                .filter_map(|p| {
                    let (s, t, dropped) = supervision::filter_annotations(
                        &p.annotation.src_kps,
                        &p.annotation.tgt_kps,
                        (data::CANVAS_H, data::CANVAS_W),
                    );
                    dropped_total += dropped;
                    (!s.is_empty()).then_some(TrainPair {
                        source: p.source,
                        target: p.target,
                        src_kps: s,
                        tgt_kps: t,
                    })
                })
                .collect();
            if dropped_total > 0 {
                eprintln!("dropped {dropped_total} out-of-bounds keypoints");
            }

            fs::create_dir_all(&out)?;
            let mut model = Model::<E>::init(mc, train_cfg.seed)?;
            let mut log = String::from(supervision::LOG_HEADER);
            log.push('\n');
            let log_path = out.join("train_log.csv");
            let mut last_print = std::time::Instant::now();
            supervision::train(&mut model, &train_pairs, &train_cfg, Some(&out), |s| {
                log.push_str(&supervision::log_row(s));
                log.push('\n');
                if s.iter == 1 || s.iter % 50 == 0 || last_print.elapsed().as_secs() >= 30 {
                    eprintln!("iter {} lr {:.2e} loss {:.5}", s.iter, s.lr, s.loss);
                    last_print = std::time::Instant::now();
                }
            })?;
            fs::write(&log_path, log)?;
            println!("training complete; log at {}", log_path.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data: dir,
            alpha,
            normalizer,
            scale,
            out,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let model = load_model(model_config(&cfg)?, &checkpoint)?;
            let dataset: Vec<DatasetPair<E>> = data::load_dataset(&dir)?;
            let pairs = to_eval_pairs(&dataset);
            let normalizer = parse_normalizer(&normalizer)?;
            let scale = choose_scale(&model, &pairs, scale, alpha)?;
            let items = eval::score_pairs(&model, &pairs, scale, normalizer)?;
            let result = eval::pck(&items, alpha, normalizer)?;
            println!("category          pck    correct/total");
            for (cat, &(c, t)) in &result.per_category {
                println!("{cat:<16}  {:.4}  {c}/{t}", c as f64 / t as f64);
            }
            println!("{:<16}  {:.4}  {}/{}", "all", result.aggregate(), result.correct, result.total);
            let json = eval::pck_json(&result);
            if let Some(path) = out {
                fs::write(&path, &json)?;
                println!("wrote {}", path.display());
            } else {
                println!("{json}");
            }
            Ok(())
        }
        Command::Match {
            checkpoint,
            data: dir,
            out,
            scale,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let model = load_model(model_config(&cfg)?, &checkpoint)?;
            let dataset: Vec<DatasetPair<E>> = data::load_dataset(&dir)?;
            let pairs = to_eval_pairs(&dataset);
            let scale = choose_scale(&model, &pairs, scale, 0.1)?;
            let rows = predict_dataset(&model, &dataset, scale)?;
            write_predictions(&out, &rows)?;
            println!("wrote {} predictions to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Warp {
            predictions,
            data: dir,
            out,
            lambda,
        } => {
            let rows = read_predictions(&predictions)?;
            let dataset: Vec<DatasetPair<E>> = data::load_dataset(&dir)?;
            let by_id: BTreeMap<&str, &DatasetPair<E>> = dataset
                .iter()
                .map(|p| (p.annotation.pair_id.as_str(), p))
                .collect();
            let mut grouped: BTreeMap<String, Vec<&PredRow>> = BTreeMap::new();
            for r in &rows {
                grouped.entry(r.pair_id.clone()).or_default().push(r);
            }
            fs::create_dir_all(&out)?;
            for (pair_id, rows) in grouped {
                let Some(pair) = by_id.get(pair_id.as_str()) else {
                    eprintln!("warning: predictions reference unknown pair `{pair_id}`");
                    continue;
                };
                // pull-back fit: target-frame anchor points to source samples.
                // Grid-snapped predictions can coincide; keep one per location.
                let mut seen: Vec<(f64, f64)> = Vec::new();
                let mut ctrl = Vec::new();
                let mut dst = Vec::new();
                for r in &rows {
                    if seen.iter().any(|&(x, y)| x == r.pred.0 && y == r.pred.1) {
                        continue;
                    }
                    seen.push(r.pred);
                    ctrl.push(r.pred);
                    dst.push(r.src);
                }
                if ctrl.len() < 3 {
                    eprintln!("warning: pair `{pair_id}` has fewer than 3 distinct matches; skipped");
                    continue;
                }
                let warp = match eval::tps_fit(&ctrl, &dst, lambda) {
                    Ok(w) => w,
                    Err(e) => {
                        eprintln!("warning: pair `{pair_id}` fit failed ({e}); skipped");
                        continue;
                    }
                };
                let warped = eval::tps_warp_image(&warp, &pair.source)?;
                let path = out.join(format!("{pair_id}_warped.ppm"));
                data::write_ppm(&path, &warped)?;
            }
            println!("wrote warped images to {}", out.display());
            Ok(())
        }
        Command::Curve {
            predictions,
            out,
            alphas,
        } => {
            let rows = read_predictions(&predictions)?;
            let items: Vec<PckItem> = rows
                .iter()
                .map(|r| PckItem {
                    category: "all".into(),
                    pred: r.pred,
                    gt: r.gt,
                    d: data::CANVAS_W.max(data::CANVAS_H) as f64,
                })
                .collect();
            let grid: Vec<f64> = alphas
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad alpha `{s}`")))
                })
                .collect::<Result<_>>()?;
            let curve = eval::pck_curve(&items, &grid, NormalizerKind::ImageLongerSide)?;
            let mut text = String::from("alpha,pck\n");
            for (a, v) in &curve {
                text.push_str(&format!("{a},{v:.6}\n"));
            }
            fs::write(&out, text)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Selftest => verify::run_selftest(),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
