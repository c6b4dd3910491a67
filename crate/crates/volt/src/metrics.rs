//! Evaluation metrics: voxel IoU, surface-point precision/recall and
//! F-score, the view-divergence measure D over attention rows, and its
//! kernel density estimate.

use crate::attention::{AttentionTrace, AttnRole};
use crate::error::{Result, VoltError};
use crate::model::VoltModel;
use crate::tensor::{self, Tensor};
use crate::voxel::{GridKind, VoxelGrid};

/// Default surface-distance threshold: 1% of the unit cube.
pub const FSCORE_DISTANCE: f64 = 0.01;

/// Intersection-over-union of the thresholded prediction against a binary
/// ground truth. Both grids empty counts as a perfect match (IoU = 1).
pub fn iou(pred: &VoxelGrid, gt: &VoxelGrid, t: f64) -> Result<f64> {
    if pred.g() != gt.g() {
        return Err(VoltError::shape(format!(
            "iou: grid sizes {} vs {}",
            pred.g(),
            gt.g()
        )));
    }
    if gt.kind() != GridKind::Binary {
        return Err(VoltError::data("iou: ground truth must be binary"));
    }
    if !(0.0 < t && t < 1.0) {
        return Err(VoltError::config(format!("iou: threshold {t} not in (0,1)")));
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&p, &y) in pred.values().iter().zip(gt.values()) {
        let p_occ = p > t;
        let y_occ = y != 0.0;
        if p_occ && y_occ {
            intersection += 1;
        }
        if p_occ || y_occ {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(intersection as f64 / union as f64)
    }
}

/// A set of 3D points in normalized object space [0,1]³.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<[f64; 3]>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Centers of occupied voxels that touch the outside: at least one of the
/// six axis neighbors is empty or out of bounds. Centers are normalized to
/// the unit cube as (i+0.5)/G.
pub fn voxel_surface_points(grid: &VoxelGrid) -> Result<PointSet> {
    if grid.kind() != GridKind::Binary {
        return Err(VoltError::data("surface extraction requires a binary grid"));
    }
    let g = grid.g();
    let gi = g as isize;
    let mut points = Vec::new();
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                if !grid.occupied(x, y, z) {
                    continue;
                }
                let neighbors = [
                    (x as isize - 1, y as isize, z as isize),
                    (x as isize + 1, y as isize, z as isize),
                    (x as isize, y as isize - 1, z as isize),
                    (x as isize, y as isize + 1, z as isize),
                    (x as isize, y as isize, z as isize - 1),
                    (x as isize, y as isize, z as isize + 1),
                ];
                let exposed = neighbors.iter().any(|&(nx, ny, nz)| {
                    if nx < 0 || ny < 0 || nz < 0 || nx >= gi || ny >= gi || nz >= gi {
                        true
                    } else {
                        !grid.occupied(nx as usize, ny as usize, nz as usize)
                    }
                });
                if exposed {
                    points.push([
                        (x as f64 + 0.5) / g as f64,
                        (y as f64 + 0.5) / g as f64,
                        (z as f64 + 0.5) / g as f64,
                    ]);
                }
            }
        }
    }
    Ok(PointSet { points })
}

fn min_dist(p: &[f64; 3], set: &PointSet) -> f64 {
    set.points
        .iter()
        .map(|q| {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let dz = p[2] - q[2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Precision = fraction of reconstructed points within `d` of the ground
/// truth; recall = fraction of ground-truth points within `d` of the
/// reconstruction. Exact brute-force nearest neighbors. Conventions for
/// degenerate sets: both empty → (1,1); exactly one empty → (0,0).
pub fn precision_recall(r: &PointSet, g: &PointSet, d: f64) -> Result<(f64, f64)> {
    if d <= 0.0 {
        return Err(VoltError::config(format!(
            "precision_recall: distance {d} must be positive"
        )));
    }
    match (r.is_empty(), g.is_empty()) {
        (true, true) => return Ok((1.0, 1.0)),
        (true, false) | (false, true) => return Ok((0.0, 0.0)),
        _ => {}
    }
    let p_hits = r.points.iter().filter(|p| min_dist(p, g) < d).count();
    let r_hits = g.points.iter().filter(|p| min_dist(p, r) < d).count();
    Ok((
        p_hits as f64 / r.len() as f64,
        r_hits as f64 / g.len() as f64,
    ))
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// View divergence of a stochastic attention matrix: the mean Euclidean
/// distance of rows from their mean row. Zero iff all rows coincide.
pub fn view_divergence(s: &Tensor) -> Result<f64> {
    if s.rank() != 2 || s.rows() == 0 {
        return Err(VoltError::shape(format!(
            "view_divergence: need a nonempty rank-2 matrix, got {:?}",
            s.shape()
        )));
    }
    let (m, cols) = (s.rows(), s.cols());
    for i in 0..m {
        let sum: f64 = (0..cols).map(|j| s.get2(i, j)).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(VoltError::data(format!(
                "view_divergence: row {i} sums to {sum}, not a stochastic matrix"
            )));
        }
    }
    let mut mean = vec![0.0; cols];
    for i in 0..m {
        for j in 0..cols {
            mean[j] += s.get2(i, j);
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut total = 0.0;
    for i in 0..m {
        let sq: f64 = (0..cols)
            .map(|j| {
                let diff = s.get2(i, j) - mean[j];
                diff * diff
            })
            .sum();
        total += sq.sqrt();
    }
    Ok(total / m as f64)
}

/// Scott's rule-of-thumb bandwidth for 1-D samples: h = σ̂·n^(−1/5) with the
/// sample (n−1) standard deviation. Returns the fallback flag when σ̂ = 0.
pub fn scott_bandwidth(samples: &[f64]) -> Result<(f64, bool)> {
    if samples.len() < 2 {
        return Err(VoltError::data(
            "kde: at least two samples are required for a bandwidth",
        ));
    }
    // Identical samples have zero variance regardless of roundoff in the mean.
    if samples.iter().all(|&v| v == samples[0]) {
        return Ok((1e-3, true));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((var.sqrt() * n.powf(-0.2), false))
}

/// Gaussian-kernel density estimate with an explicit bandwidth:
/// p̂(x) = (1/(n·h))·Σᵢ K((xᵢ−x)/h), K the standard normal density.
pub fn kde_density_with_bandwidth(samples: &[f64], eval_grid: &[f64], h: f64) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(VoltError::data("kde: at least two samples are required"));
    }
    if h <= 0.0 {
        return Err(VoltError::config("kde: bandwidth must be positive"));
    }
    let norm = 1.0 / (samples.len() as f64 * h);
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    Ok(eval_grid
        .iter()
        .map(|&x| {
            let sum: f64 = samples
                .iter()
                .map(|&xi| {
                    let u = (xi - x) / h;
                    inv_sqrt_2pi * (-0.5 * u * u).exp()
                })
                .sum();
            norm * sum
        })
        .collect())
}

/// KDE with Scott's bandwidth.
pub fn kde_density(samples: &[f64], eval_grid: &[f64]) -> Result<Vec<f64>> {
    let (h, _) = scott_bandwidth(samples)?;
    kde_density_with_bandwidth(samples, eval_grid, h)
}

/// Which attention matrix feeds the divergence measure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadSelect {
    /// Mean over heads (default: head-agnostic and stable).
    #[default]
    Mean,
    First,
    Index(usize),
}

/// Pick or average the view-view score matrices of one encoder layer.
pub fn layer_view_matrix(
    traces: &[AttentionTrace],
    layer: usize,
    select: HeadSelect,
) -> Result<Tensor> {
    let layer_scores: Vec<&Tensor> = traces
        .iter()
        .filter(|t| t.role == AttnRole::ViewView && t.layer == layer)
        .map(|t| &t.scores)
        .collect();
    if layer_scores.is_empty() {
        return Err(VoltError::data(format!(
            "no view-attention traces for layer {layer}"
        )));
    }
    match select {
        HeadSelect::First => Ok(layer_scores[0].clone()),
        HeadSelect::Index(h) => layer_scores
            .get(h)
            .map(|t| (*t).clone())
            .ok_or_else(|| VoltError::config(format!("head index {h} out of range"))),
        HeadSelect::Mean => {
            let mut acc = layer_scores[0].clone();
            for s in &layer_scores[1..] {
                acc = tensor::add(&acc, s)?;
            }
            tensor::scale(&acc, 1.0 / layer_scores.len() as f64)
        }
    }
}

/// Density curve for one layer's divergence samples.
#[derive(Clone, Debug)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    /// True when the zero-variance fallback bandwidth was used.
    pub bandwidth_fallback: bool,
}

#[derive(Clone, Debug)]
pub struct LayerDivergence {
    pub layer: usize,
    /// (object id, D) in evaluation order.
    pub values: Vec<(String, f64)>,
    pub kde: Option<KdeCurve>,
}

impl LayerDivergence {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().map(|(_, d)| d).sum::<f64>() / self.values.len() as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct DivergenceReport {
    pub layers: Vec<LayerDivergence>,
    pub head_select: HeadSelect,
}

/// Objects fed to a divergence report: id plus view embeddings.
pub struct DivergenceInput<'a> {
    pub id: String,
    pub views: &'a Tensor,
}

/// Run the encoder over each object, collect D per encoder layer from the
/// selected view-attention matrices, and attach a KDE curve per layer.
/// The evaluation grid spans all samples ±5 bandwidths.
pub fn divergence_report(
    model: &VoltModel,
    objects: &[DivergenceInput<'_>],
    select: HeadSelect,
    kde_points: usize,
) -> Result<DivergenceReport> {
    if objects.is_empty() {
        return Err(VoltError::data("divergence report needs at least one object"));
    }
    let l_enc = model.config.l_enc;
    let mut layers: Vec<LayerDivergence> = (0..l_enc)
        .map(|layer| LayerDivergence {
            layer,
            values: Vec::new(),
            kde: None,
        })
        .collect();

    for obj in objects {
        let (_, traces) = model.encode(obj.views)?;
        for layer in 0..l_enc {
            let s = layer_view_matrix(&traces, layer, select)?;
            let d = view_divergence(&s)?;
            layers[layer].values.push((obj.id.clone(), d));
        }
    }

    for layer in &mut layers {
        let samples: Vec<f64> = layer.values.iter().map(|(_, d)| *d).collect();
        if samples.len() >= 2 && kde_points >= 2 {
            let (h, fallback) = scott_bandwidth(&samples)?;
            let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 5.0 * h;
            let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 5.0 * h;
            let step = (hi - lo) / (kde_points - 1) as f64;
            let grid: Vec<f64> = (0..kde_points).map(|i| lo + step * i as f64).collect();
            let density = kde_density_with_bandwidth(&samples, &grid, h)?;
            layer.kde = Some(KdeCurve {
                grid,
                density,
                bandwidth: h,
                bandwidth_fallback: fallback,
            });
        }
    }

    Ok(DivergenceReport {
        layers,
        head_select: select,
    })
}
