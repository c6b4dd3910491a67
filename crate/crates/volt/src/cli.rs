//! Command implementations behind the binary: dataset generation, training,
//! evaluation with view-count and threshold sweeps, attention diagnostics,
//! and the gradient check. Each command echoes its fully resolved
//! configuration and writes deterministic outputs ordered by object id.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{RunConfig, TrainSplit, Variant};
use crate::data::{self, Dataset, LoadedSample, Split, ViewEmbedder};
use crate::error::{Result, VoltError};
use crate::gradcheck::GradCheckReport;
use crate::metrics::{self, DivergenceInput, HeadSelect};
use crate::model::{full_grad_check, ModelConfig, VoltModel};
use crate::train::{train, write_train_log, TrainItem, TrainOptions};
use crate::voxel::VoxelGrid;

pub const METRICS_CSV_HEADER: &str = "object_id,views,iou,fscore,precision,recall";
pub const DIVERGENCE_CSV_HEADER: &str = "layer,object_id,D";
pub const KDE_CSV_HEADER: &str = "layer,D_grid,density";
pub const ATTENTION_CSV_HEADER: &str = "layer,object_id,head,row,col,score";

fn echo_config(cfg: &RunConfig) {
    println!("resolved configuration:");
    print!("{}", cfg.echo());
}

fn write_resolved(out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(out_dir.join("resolved_config.txt"), cfg.echo())?;
    Ok(())
}

fn embedder_for(cfg: &RunConfig, p: usize, d: usize) -> Result<ViewEmbedder> {
    ViewEmbedder::new(p, d, cfg.embed_seed)
}

/// `gen`: build a synthetic dataset under `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    if out.exists() {
        let occupied = out.is_file()
            || fs::read_dir(out)
                .map(|mut entries| entries.next().is_some())
                .unwrap_or(true);
        if occupied && !force {
            return Err(VoltError::config(format!(
                "output directory {} already exists; pass --force to write into it",
                out.display()
            )));
        }
    }
    echo_config(cfg);
    let embedder = embedder_for(cfg, cfg.p, cfg.d)?;
    let manifest = data::build_dataset(out, cfg.objects, cfg.views, cfg.g, cfg.seed, &embedder)?;
    write_resolved(out, cfg)?;
    println!("manifest: {}", manifest.display());
    Ok(manifest)
}

fn load_verified_dataset(cfg: &RunConfig, manifest: &Path) -> Result<Dataset> {
    // Probe the header first so the embedder can be built with the dataset's
    // raster size, then verify the fingerprint.
    let unverified = data::load_dataset(manifest, None)?;
    let embedder = embedder_for(cfg, unverified.header.p, unverified.header.d)?;
    if embedder.fingerprint() != unverified.header.embed_fingerprint {
        return Err(VoltError::data(format!(
            "dataset was generated with embed seed {} (fingerprint {:016x}); \
             configured embed seed {} does not reproduce it",
            unverified.header.embed_seed, unverified.header.embed_fingerprint, cfg.embed_seed
        )));
    }
    Ok(unverified)
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub best_iou: f64,
    pub best_step: usize,
    pub final_loss: f64,
    pub samples_used: usize,
}

/// `train`: fit the configured variant on a generated dataset and write the
/// best checkpoint plus the per-step CSV log.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    echo_config(cfg);
    let dataset = load_verified_dataset(cfg, manifest)?;
    if dataset.header.d != cfg.d {
        return Err(VoltError::config(format!(
            "dataset embeddings have width {}, model d = {}",
            dataset.header.d, cfg.d
        )));
    }
    if dataset.header.g != cfg.g {
        return Err(VoltError::config(format!(
            "dataset grids have edge {}, model g = {}",
            dataset.header.g, cfg.g
        )));
    }
    if dataset.header.views > cfg.m_max {
        return Err(VoltError::config(format!(
            "dataset has {} views per object, model m_max = {}",
            dataset.header.views, cfg.m_max
        )));
    }

    let selected: Vec<&LoadedSample> = match cfg.train_split {
        TrainSplit::All => dataset.samples.iter().collect(),
        TrainSplit::Train => dataset.split(Split::Train),
    };
    let items: Vec<TrainItem<'_>> = selected
        .iter()
        .map(|s| TrainItem {
            id: &s.id,
            views: &s.embeddings,
            grid: &s.grid,
        })
        .collect();

    let opts = TrainOptions {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        optimizer: cfg.optimizer_config(),
        seed: cfg.seed,
    };
    let result = train(&cfg.model_config(), &items, &opts)?;

    fs::create_dir_all(out)?;
    write_resolved(out, cfg)?;
    let log_path = out.join("train_log.csv");
    write_train_log(&log_path, &result.log)?;
    let ckpt_path = out.join("checkpoint.vltc");
    save_checkpoint(&ckpt_path, &cfg.echo(), &result.model.params, None)?;

    let final_loss = result.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} samples; best train IoU {:.4} at step {}",
        result.log.len(),
        items.len(),
        result.best_iou,
        result.best_step
    );
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        log_path,
        best_iou: result.best_iou,
        best_step: result.best_step,
        final_loss,
        samples_used: items.len(),
    })
}

/// Load a model and its embedded configuration from a checkpoint.
pub fn load_model(checkpoint: &Path) -> Result<(VoltModel, RunConfig)> {
    let loaded = load_checkpoint(checkpoint)?;
    let cfg = RunConfig::from_echo(&loaded.config_text)?;
    let model = VoltModel::from_named_tensors(cfg.model_config(), loaded.tensors)?;
    Ok((model, cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    All,
}

impl EvalSplit {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            "all" => Ok(EvalSplit::All),
            other => Err(VoltError::config(format!("unknown eval split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ThresholdSpec {
    /// Sweep t over {0.2, 0.25, …, 0.5} and report the best per view count.
    Sweep,
    Fixed(Vec<f64>),
}

impl ThresholdSpec {
    pub fn parse(text: &str) -> Result<Self> {
        if text == "sweep" {
            return Ok(ThresholdSpec::Sweep);
        }
        let values: Result<Vec<f64>> = text
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| VoltError::config(format!("bad threshold `{v}`")))
            })
            .collect();
        Ok(ThresholdSpec::Fixed(values?))
    }

    fn values(&self) -> Vec<f64> {
        match self {
            ThresholdSpec::Sweep => vec![0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5],
            ThresholdSpec::Fixed(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    /// View counts to evaluate (azimuth-prefix subsampling). Empty → the
    /// dataset's full view count.
    pub views: Vec<usize>,
    pub thresholds: ThresholdSpec,
    pub split: EvalSplit,
}

#[derive(Clone, Debug)]
pub struct ObjectMetrics {
    pub object_id: String,
    pub views: usize,
    pub iou: f64,
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
}

pub struct EvalSummary {
    pub rows: Vec<ObjectMetrics>,
    /// Per view count: (views, best threshold, mean IoU, mean F-score).
    pub per_view_count: Vec<(usize, f64, f64, f64)>,
    pub metrics_path: PathBuf,
}

/// `eval`: per-object IoU and F-score@1% across requested view counts, with
/// a voxelization-threshold sweep per view count.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path, out: &Path, args: &EvalArgs) -> Result<EvalSummary> {
    let (model, cfg) = load_model(checkpoint)?;
    echo_config(&cfg);
    let dataset = load_verified_dataset(&cfg, manifest)?;
    if dataset.header.d != model.config.d || dataset.header.g != model.config.g {
        return Err(VoltError::config(format!(
            "checkpoint (d={}, g={}) does not match dataset (d={}, g={})",
            model.config.d, model.config.g, dataset.header.d, dataset.header.g
        )));
    }

    let objects: Vec<&LoadedSample> = match args.split {
        EvalSplit::All => dataset.samples.iter().collect(),
        EvalSplit::Train => dataset.split(Split::Train),
        EvalSplit::Val => dataset.split(Split::Val),
    };
    if objects.is_empty() {
        return Err(VoltError::data("no objects in the selected split"));
    }

    let view_counts = if args.views.is_empty() {
        vec![dataset.header.views]
    } else {
        args.views.clone()
    };
    let thresholds = args.thresholds.values();
    for &t in &thresholds {
        if !(0.0 < t && t < 1.0) {
            return Err(VoltError::config(format!("threshold {t} not in (0,1)")));
        }
    }

    let mut rows = Vec::new();
    let mut per_view_count = Vec::new();
    let mut sweep_lines = Vec::new();
    for &m in &view_counts {
        if m == 0 || m > dataset.header.views {
            return Err(VoltError::config(format!(
                "cannot evaluate {m} views; dataset stores {}",
                dataset.header.views
            )));
        }
        if m > model.config.m_max {
            return Err(VoltError::config(format!(
                "view count {m} exceeds model m_max {}",
                model.config.m_max
            )));
        }
        let preds: Vec<VoxelGrid> = objects
            .par_iter()
            .map(|s| {
                let views = data::view_prefix(&s.embeddings, m)?;
                model.predict_volume(&views)
            })
            .collect::<Result<_>>()?;

        let mut best: Option<(f64, f64)> = None; // (threshold, mean iou)
        for &t in &thresholds {
            let mut total = 0.0;
            for (pred, s) in preds.iter().zip(&objects) {
                total += metrics::iou(pred, &s.grid, t)?;
            }
            let mean = total / objects.len() as f64;
            sweep_lines.push(format!("{m},{t},{mean:.6}"));
            if best.map_or(true, |(_, bi)| mean > bi) {
                best = Some((t, mean));
            }
        }
        let (best_t, mean_iou) = best.expect("at least one threshold");

        let count_rows: Vec<ObjectMetrics> = preds
            .par_iter()
            .zip(objects.par_iter())
            .map(|(pred, s)| {
                let iou = metrics::iou(pred, &s.grid, best_t)?;
                let pred_surface = metrics::voxel_surface_points(&pred.threshold(best_t)?)?;
                let gt_surface = metrics::voxel_surface_points(&s.grid)?;
                let (precision, recall) =
                    metrics::precision_recall(&pred_surface, &gt_surface, metrics::FSCORE_DISTANCE)?;
                Ok(ObjectMetrics {
                    object_id: s.id.clone(),
                    views: m,
                    iou,
                    fscore: metrics::f_score(precision, recall),
                    precision,
                    recall,
                })
            })
            .collect::<Result<_>>()?;
        let mean_f = count_rows.iter().map(|r| r.fscore).sum::<f64>() / count_rows.len() as f64;
        println!(
            "views {m}: best t {best_t}, mean IoU {mean_iou:.4}, mean F-score@1% {mean_f:.4}"
        );
        per_view_count.push((m, best_t, mean_iou, mean_f));
        rows.extend(count_rows);
    }

    fs::create_dir_all(out)?;
    let metrics_path = out.join("metrics.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{:.9},{:.9},{:.9},{:.9}",
            r.object_id, r.views, r.iou, r.fscore, r.precision, r.recall
        )?;
    }
    w.flush()?;

    let mut sweep = std::io::BufWriter::new(fs::File::create(out.join("threshold_sweep.csv"))?);
    writeln!(sweep, "views,t,mean_iou")?;
    for line in &sweep_lines {
        writeln!(sweep, "{line}")?;
    }
    sweep.flush()?;

    Ok(EvalSummary {
        rows,
        per_view_count,
        metrics_path,
    })
}

#[derive(Clone, Debug)]
pub struct DiagnoseArgs {
    /// How many objects (in manifest order) to trace.
    pub objects: usize,
    /// Views per object; defaults to the dataset's full count.
    pub views: Option<usize>,
}

pub struct DiagnoseSummary {
    pub divergence_path: PathBuf,
    pub kde_path: PathBuf,
    pub attention_path: PathBuf,
    /// Mean D per encoder layer.
    pub layer_means: Vec<f64>,
}

/// `diagnose`: export per-layer view-attention matrices, per-object D
/// values, and per-layer KDE curves for a trained checkpoint.
pub fn cmd_diagnose(
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    args: &DiagnoseArgs,
) -> Result<DiagnoseSummary> {
    let (model, cfg) = load_model(checkpoint)?;
    echo_config(&cfg);
    let dataset = load_verified_dataset(&cfg, manifest)?;
    if dataset.header.d != model.config.d {
        return Err(VoltError::config(format!(
            "checkpoint d={} does not match dataset d={}",
            model.config.d, dataset.header.d
        )));
    }
    if args.objects == 0 {
        return Err(VoltError::config("diagnose needs at least one object"));
    }
    let m_views = args.views.unwrap_or(dataset.header.views);
    if m_views == 0 || m_views > dataset.header.views || m_views > model.config.m_max {
        return Err(VoltError::config(format!(
            "cannot trace {m_views} views (dataset {}, m_max {})",
            dataset.header.views, model.config.m_max
        )));
    }

    let selected: Vec<&LoadedSample> = dataset.samples.iter().take(args.objects).collect();
    let views: Vec<crate::tensor::Tensor> = selected
        .iter()
        .map(|s| data::view_prefix(&s.embeddings, m_views))
        .collect::<Result<_>>()?;
    let inputs: Vec<DivergenceInput<'_>> = selected
        .iter()
        .zip(&views)
        .map(|(s, v)| DivergenceInput {
            id: s.id.clone(),
            views: v,
        })
        .collect();

    let report = metrics::divergence_report(&model, &inputs, HeadSelect::Mean, 201)?;

    fs::create_dir_all(out)?;
    let divergence_path = out.join("divergence.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&divergence_path)?);
    writeln!(w, "{DIVERGENCE_CSV_HEADER}")?;
    for layer in &report.layers {
        for (id, d) in &layer.values {
            writeln!(w, "{},{},{:.12}", layer.layer, id, d)?;
        }
    }
    w.flush()?;

    let kde_path = out.join("kde.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&kde_path)?);
    writeln!(w, "{KDE_CSV_HEADER}")?;
    for layer in &report.layers {
        if let Some(kde) = &layer.kde {
            for (x, p) in kde.grid.iter().zip(&kde.density) {
                writeln!(w, "{},{:.12},{:.12}", layer.layer, x, p)?;
            }
        }
    }
    w.flush()?;

    // Per-head view-attention matrices for the same objects.
    let attention_path = out.join("attention.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&attention_path)?);
    writeln!(w, "{ATTENTION_CSV_HEADER}")?;
    for (s, v) in selected.iter().zip(&views) {
        let (_, traces) = model.encode(v)?;
        for trace in traces {
            if trace.role != crate::attention::AttnRole::ViewView {
                continue;
            }
            for row in 0..trace.scores.rows() {
                for col in 0..trace.scores.cols() {
                    writeln!(
                        w,
                        "{},{},{},{},{},{:.12}",
                        trace.layer,
                        s.id,
                        trace.head,
                        row,
                        col,
                        trace.scores.get2(row, col)
                    )?;
                }
            }
        }
    }
    w.flush()?;

    let layer_means: Vec<f64> = report.layers.iter().map(|l| l.mean()).collect();
    let mut w = std::io::BufWriter::new(fs::File::create(out.join("divergence_layer_means.csv"))?);
    writeln!(w, "layer,mean_D")?;
    for (layer, mean) in layer_means.iter().enumerate() {
        writeln!(w, "{layer},{mean:.12}")?;
        println!("layer {layer}: mean D {mean:.6}");
    }
    w.flush()?;

    Ok(DiagnoseSummary {
        divergence_path,
        kde_path,
        attention_path,
        layer_means,
    })
}

/// Geometry for the gradient-correctness check: d=8, H=2, d_k=4,
/// L_enc=L_dec=2, G=4, s=2.
pub fn grad_check_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        enhance: variant == Variant::Evolt,
        ..ModelConfig::micro()
    }
}

/// `grad-check`: compare the full model's analytic gradients against central
/// differences on the micro configuration.
pub fn cmd_grad_check(
    variant: Variant,
    seed: u64,
    m_views: usize,
    epsilon: f64,
) -> Result<GradCheckReport> {
    use rand::Rng;
    let config = grad_check_config(variant);
    let model = VoltModel::new(config.clone(), seed)?;
    let mut view_rng = crate::rng::stream(seed, "gradcheck/views");
    let views = crate::tensor::Tensor::new(
        vec![m_views, config.d],
        (0..m_views * config.d)
            .map(|_| view_rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let mut grid_rng = crate::rng::stream(seed, "gradcheck/grid");
    let gt = VoxelGrid::new_binary(
        config.g,
        (0..config.g.pow(3))
            .map(|_| f64::from(grid_rng.random_range(0.0..1.0) < 0.5))
            .collect(),
    )?;
    let report = full_grad_check(&model, &views, &gt, epsilon)?;
    println!(
        "grad-check ({}, {} parameters, {} entries): max relative error {:.3e}{}",
        variant.as_str(),
        model.params.len(),
        report.entries_checked,
        report.max_rel_err,
        report
            .worst
            .as_ref()
            .map(|(name, idx)| format!(" (worst: {name}[{idx}])"))
            .unwrap_or_default()
    );
    Ok(report)
}
