//! Deterministic training loop: per-sample gradients may be computed in
//! parallel, but they are always summed in sample order and the optimizer
//! step is single-threaded, so a fixed seed gives bit-identical runs.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Result, VoltError};
use crate::metrics;
use crate::model::{ModelConfig, VoltModel};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::params::Grads;
use crate::tensor::Tensor;
use crate::voxel::VoxelGrid;

/// One training sample, borrowed from a loaded dataset.
pub struct TrainItem<'a> {
    pub id: &'a str,
    pub views: &'a Tensor,
    pub grid: &'a VoxelGrid,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub train_iou: f64,
    pub wallclock_s: f64,
}

pub struct TrainResult {
    /// Best model by batch IoU at threshold 0.5 (parameters as they were
    /// when that batch was evaluated, before the following update).
    pub model: VoltModel,
    pub log: Vec<LogRow>,
    pub best_step: usize,
    pub best_iou: f64,
}

/// Train a fresh model on `items`. Metrics in each log row describe the
/// parameters *before* that step's update, so the best checkpoint reproduces
/// its logged IoU exactly when re-evaluated.
pub fn train(config: &ModelConfig, items: &[TrainItem<'_>], opts: &TrainOptions) -> Result<TrainResult> {
    if items.is_empty() {
        return Err(VoltError::data("training requires a nonempty dataset"));
    }
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(VoltError::config("steps and batch size must be positive"));
    }
    let mut model = VoltModel::new(config.clone(), opts.seed)?;
    let mut state = AdamWState::new(opts.optimizer);
    let mut log = Vec::with_capacity(opts.steps);
    let mut best: Option<(f64, usize, crate::params::ParamStore)> = None;
    let start = Instant::now();

    let mut step = 0usize;
    let mut epoch = 0usize;
    'outer: loop {
        let order = shuffled_indices(items.len(), opts.seed, epoch);
        for batch in order.chunks(opts.batch_size) {
            if step >= opts.steps {
                break 'outer;
            }
            // Per-sample forward/backward in parallel; order-preserving.
            let per_sample: Vec<Result<(f64, Grads, f64)>> = batch
                .par_iter()
                .map(|&i| {
                    let item = &items[i];
                    let (loss, grads, pred) = model.loss_and_grads(item.views, item.grid)?;
                    let iou = metrics::iou(&pred, item.grid, 0.5)?;
                    Ok((loss, grads, iou))
                })
                .collect();

            let mut loss_sum = 0.0;
            let mut iou_sum = 0.0;
            let mut grad_sum = Grads::new();
            for r in per_sample {
                let (loss, grads, iou) = r?;
                loss_sum += loss;
                iou_sum += iou;
                grad_sum.accumulate(&grads)?;
            }
            let b = batch.len() as f64;
            let loss = loss_sum / b;
            let train_iou = iou_sum / b;
            grad_sum.scale(1.0 / b);

            if !loss.is_finite() {
                return Err(VoltError::numeric(format!(
                    "training loss became non-finite at step {step}"
                )));
            }

            if best.as_ref().map_or(true, |(bi, _, _)| train_iou > *bi) {
                best = Some((train_iou, step, model.params.clone()));
            }
            log.push(LogRow {
                epoch,
                step,
                loss,
                train_iou,
                wallclock_s: start.elapsed().as_secs_f64(),
            });

            adamw_step(&mut model.params, &grad_sum, &mut state)?;
            step += 1;
        }
        epoch += 1;
    }

    let (best_iou, best_step, best_params) = best.expect("at least one step ran");
    Ok(TrainResult {
        model: VoltModel {
            config: config.clone(),
            params: best_params,
        },
        log,
        best_step,
        best_iou,
    })
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::stream(seed, &format!("train/shuffle/epoch{epoch}"));
    order.shuffle(&mut rng);
    order
}

pub const TRAIN_LOG_HEADER: &str = "epoch,step,loss,train_iou,wallclock_s";

pub fn write_train_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{TRAIN_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.17e},{:.17e},{:.3}",
            r.epoch, r.step, r.loss, r.train_iou, r.wallclock_s
        )?;
    }
    w.flush()?;
    Ok(())
}
