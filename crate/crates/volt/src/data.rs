//! Synthetic multi-view dataset: parametric voxel shapes, orthographic
//! silhouettes rendered from evenly spaced azimuths, and a frozen seeded
//! linear projection that stands in for a pretrained view-shared embedder.
//!
//! Dataset generation is a pure function of (n_objects, m_views, g, seed,
//! embedder seed); identical inputs produce byte-identical files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, VoltError};
use crate::rng::{stable_hash64, stream};
use crate::tensor::Tensor;
use crate::voxel::{GridKind, VoxelGrid};

/// Frozen default seed for the view embedder; shared across train and eval.
pub const DEFAULT_EMBED_SEED: u64 = 1337;

const EMBED_MAGIC: &[u8; 4] = b"VE01";
const MANIFEST_HEADER: &str = "volt-dataset v1";

// ── Shapes ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub enum ShapeSpec {
    /// Axis-aligned box occupying [min, min+size) per axis, in voxels.
    Box { min: [usize; 3], size: [usize; 3] },
    /// Ball: voxel occupied iff its center lies within `radius` of `center`
    /// (both in voxel units).
    Sphere { center: [f64; 3], radius: f64 },
    /// L shape: a vertical post with a foot along +y.
    Ell {
        min: [usize; 3],
        post: [usize; 3],
        foot: [usize; 3],
    },
    /// Three orthogonal bars crossing at the grid center.
    Cross { half_width: usize, margin: usize },
    /// Two boxes stacked along z, the upper one smaller and offset.
    Stack {
        base_min: [usize; 3],
        base_size: [usize; 3],
        top_size: [usize; 3],
    },
}

impl ShapeSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ShapeSpec::Box { .. } => "box",
            ShapeSpec::Sphere { .. } => "sphere",
            ShapeSpec::Ell { .. } => "ell",
            ShapeSpec::Cross { .. } => "cross",
            ShapeSpec::Stack { .. } => "stack",
        }
    }
}

fn fill_box(grid: &mut VoxelGrid, min: [usize; 3], size: [usize; 3], g: usize) -> Result<()> {
    if size.iter().any(|&s| s == 0) {
        return Err(VoltError::data("degenerate box with zero extent"));
    }
    for axis in 0..3 {
        if min[axis] + size[axis] > g {
            return Err(VoltError::data(format!(
                "box exceeds grid bounds on axis {axis}: {}+{} > {g}",
                min[axis], size[axis]
            )));
        }
    }
    for z in min[2]..min[2] + size[2] {
        for y in min[1]..min[1] + size[1] {
            for x in min[0]..min[0] + size[0] {
                grid.set(x, y, z, 1.0);
            }
        }
    }
    Ok(())
}

/// Rasterize a shape into a binary grid. The result is guaranteed nonempty
/// and inside the bounds, otherwise an error is returned.
pub fn generate_shape(spec: &ShapeSpec, g: usize) -> Result<VoxelGrid> {
    if g < 2 {
        return Err(VoltError::config("shape grids need g >= 2"));
    }
    let mut grid = VoxelGrid::empty_binary(g);
    match spec {
        ShapeSpec::Box { min, size } => fill_box(&mut grid, *min, *size, g)?,
        ShapeSpec::Sphere { center, radius } => {
            if *radius <= 0.0 {
                return Err(VoltError::data("sphere radius must be positive"));
            }
            for axis in 0..3 {
                if center[axis] - radius < 0.0 || center[axis] + radius > g as f64 {
                    return Err(VoltError::data("sphere exceeds grid bounds"));
                }
            }
            let r2 = radius * radius;
            for z in 0..g {
                for y in 0..g {
                    for x in 0..g {
                        let dx = x as f64 + 0.5 - center[0];
                        let dy = y as f64 + 0.5 - center[1];
                        let dz = z as f64 + 0.5 - center[2];
                        if dx * dx + dy * dy + dz * dz <= r2 {
                            grid.set(x, y, z, 1.0);
                        }
                    }
                }
            }
        }
        ShapeSpec::Ell { min, post, foot } => {
            fill_box(&mut grid, *min, *post, g)?;
            fill_box(&mut grid, *min, *foot, g)?;
        }
        ShapeSpec::Cross { half_width, margin } => {
            let w = *half_width;
            let m = *margin;
            if 2 * m >= g || w == 0 {
                return Err(VoltError::data("cross does not fit in the grid"));
            }
            let c = g / 2;
            if c < w || c + w > g {
                return Err(VoltError::data("cross arms exceed grid bounds"));
            }
            let lo = c - w;
            let width = 2 * w;
            let span = g - 2 * m;
            fill_box(&mut grid, [m, lo, lo], [span, width, width], g)?;
            fill_box(&mut grid, [lo, m, lo], [width, span, width], g)?;
            fill_box(&mut grid, [lo, lo, m], [width, width, span], g)?;
        }
        ShapeSpec::Stack {
            base_min,
            base_size,
            top_size,
        } => {
            fill_box(&mut grid, *base_min, *base_size, g)?;
            let top_min = [
                base_min[0] + base_size[0].saturating_sub(top_size[0]) / 2,
                base_min[1] + base_size[1].saturating_sub(top_size[1]) / 2,
                base_min[2] + base_size[2],
            ];
            fill_box(&mut grid, top_min, *top_size, g)?;
        }
    }
    if grid.count_occupied() == 0 {
        return Err(VoltError::data("shape rasterized to an empty grid"));
    }
    Ok(grid)
}

/// Deterministic random shape for object index `i`: kinds cycle so every
/// dataset carries all five, parameters are drawn from the object's stream.
pub fn random_shape(seed: u64, object_index: usize, g: usize) -> ShapeSpec {
    let mut rng = stream(seed, &format!("data/obj{object_index:04}/shape"));
    let quarter = (g / 4).max(1);
    match object_index % 5 {
        0 => {
            let size = [
                rng.random_range(quarter..=g / 2),
                rng.random_range(quarter..=g / 2),
                rng.random_range(quarter..=g / 2),
            ];
            let min = [
                rng.random_range(0..=g - size[0]),
                rng.random_range(0..=g - size[1]),
                rng.random_range(0..=g - size[2]),
            ];
            ShapeSpec::Box { min, size }
        }
        1 => {
            let radius = rng.random_range(g as f64 / 6.0..g as f64 / 3.0);
            let jitter = g as f64 / 2.0 - radius;
            let c = g as f64 / 2.0;
            let center = [
                c + rng.random_range(-jitter..jitter) * 0.5,
                c + rng.random_range(-jitter..jitter) * 0.5,
                c + rng.random_range(-jitter..jitter) * 0.5,
            ];
            ShapeSpec::Sphere { center, radius }
        }
        2 => {
            // Bars thinner than g/8 are sub-resolution for silhouettes.
            let post_h = rng.random_range(g / 2..=g - 2);
            let foot_len = rng.random_range(g / 2..=g - 2);
            let thick = rng.random_range((g / 8).max(2)..=quarter.max(3));
            let min = [
                rng.random_range(0..=g - thick),
                rng.random_range(0..=g - foot_len),
                rng.random_range(0..=g - post_h),
            ];
            ShapeSpec::Ell {
                min,
                post: [thick, thick, post_h],
                foot: [thick, foot_len, thick],
            }
        }
        3 => {
            let half_width = rng.random_range((g / 8).max(1)..=(g / 6).max(1));
            let margin = rng.random_range(1..=(g / 4).max(1));
            ShapeSpec::Cross { half_width, margin }
        }
        _ => {
            let base_size = [
                rng.random_range((g / 3).max(1)..=g / 2),
                rng.random_range((g / 3).max(1)..=g / 2),
                rng.random_range(quarter..=(g / 3).max(quarter)),
            ];
            let base_min = [
                rng.random_range(0..=g - base_size[0]),
                rng.random_range(0..=g - base_size[1]),
                rng.random_range(0..=g / 4),
            ];
            // base_min[2] + base_size[2] ≤ g/4 + g/3 < g, so room ≥ 1.
            let room = g - base_min[2] - base_size[2];
            let top_size = [
                (base_size[0] / 2).max(1),
                (base_size[1] / 2).max(1),
                rng.random_range(1..=room),
            ];
            ShapeSpec::Stack {
                base_min,
                base_size,
                top_size,
            }
        }
    }
}

// ── Silhouettes ──────────────────────────────────────────────────────

/// Binary orthographic silhouette, `idx = col + p·row`. Columns follow the
/// rotated y axis, rows the (vertical) z axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Silhouette {
    p: usize,
    pixels: Vec<bool>,
}

impl Silhouette {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[col + self.p * row]
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&b| b).count()
    }

    /// Horizontal mirror (columns reversed).
    pub fn mirrored_cols(&self) -> Silhouette {
        let mut pixels = vec![false; self.pixels.len()];
        for row in 0..self.p {
            for col in 0..self.p {
                pixels[(self.p - 1 - col) + self.p * row] = self.get(row, col);
            }
        }
        Silhouette { p: self.p, pixels }
    }
}

/// Rotate occupied voxel centers about the vertical (z) axis by −azimuth
/// around the grid center, orthographically project along +x, and rasterize
/// the (y, z) coordinates over the unit square: a pixel is set iff some
/// projected center lands in it. Centers leaving the unit square are
/// discarded.
pub fn render_silhouette(grid: &VoxelGrid, azimuth: f64, p: usize) -> Result<Silhouette> {
    if grid.kind() != GridKind::Binary {
        return Err(VoltError::data("silhouettes are rendered from binary grids"));
    }
    if p == 0 {
        return Err(VoltError::config("raster size must be positive"));
    }
    let g = grid.g();
    let gf = g as f64;
    let c = gf / 2.0;
    let (sin_a, cos_a) = (-azimuth).sin_cos();
    let mut pixels = vec![false; p * p];
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                if !grid.occupied(x, y, z) {
                    continue;
                }
                let cx = x as f64 + 0.5 - c;
                let cy = y as f64 + 0.5 - c;
                let y_rot = cx * sin_a + cy * cos_a + c;
                let z_cen = z as f64 + 0.5;
                let u = y_rot / gf;
                let v = z_cen / gf;
                if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) {
                    let col = (u * p as f64) as usize;
                    let row = (v * p as f64) as usize;
                    pixels[col + p * row] = true;
                }
            }
        }
    }
    Ok(Silhouette { p, pixels })
}

/// Evenly spaced azimuths 2πk/m, k = 0..m.
pub fn azimuths(m_views: usize) -> Vec<f64> {
    (0..m_views)
        .map(|k| 2.0 * std::f64::consts::PI * k as f64 / m_views as f64)
        .collect()
}

// ── Frozen view embedder ─────────────────────────────────────────────

/// A frozen seeded linear map from flattened silhouettes to d-dimensional
/// view embeddings; shared across all views and never trained.
#[derive(Clone, Debug)]
pub struct ViewEmbedder {
    p: usize,
    d: usize,
    seed: u64,
    matrix: Tensor,
    fingerprint: u64,
}

impl ViewEmbedder {
    pub fn new(p: usize, d: usize, seed: u64) -> Result<Self> {
        if p == 0 || d == 0 {
            return Err(VoltError::config("embedder needs positive p and d"));
        }
        let mut rng = stream(seed, "embedder/matrix");
        let std = 1.0 / (p * p) as f64;
        let dist = Normal::new(0.0, std.sqrt()).expect("valid normal");
        let len = p * p * d;
        let data: Vec<f64> = (0..len).map(|_| dist.sample(&mut rng)).collect();
        let mut bytes = Vec::with_capacity(len * 8);
        for v in &data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let fingerprint = stable_hash64(&bytes);
        Ok(ViewEmbedder {
            p,
            d,
            seed,
            matrix: Tensor::from_parts(vec![p * p, d], data),
            fingerprint,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn embed_one(&self, s: &Silhouette) -> Result<Tensor> {
        if s.p() != self.p {
            return Err(VoltError::shape(format!(
                "silhouette raster {} does not match embedder {}",
                s.p(),
                self.p
            )));
        }
        let flat: Vec<f64> = s.pixels().iter().map(|&b| f64::from(b)).collect();
        let row = Tensor::from_parts(vec![1, self.p * self.p], flat);
        crate::tensor::matmul(&row, &self.matrix)
    }

    /// Embed M silhouettes into an M×d matrix, row m from silhouette m.
    pub fn embed(&self, silhouettes: &[Silhouette]) -> Result<Tensor> {
        if silhouettes.is_empty() {
            return Err(VoltError::data("no silhouettes to embed"));
        }
        let mut data = Vec::with_capacity(silhouettes.len() * self.d);
        for s in silhouettes {
            let row = self.embed_one(s)?;
            data.extend_from_slice(row.data());
        }
        Tensor::new(vec![silhouettes.len(), self.d], data)
    }
}

// ── Dataset files ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// 80/20 split decided by a stable hash of the object id.
pub fn split_of(id: &str) -> Split {
    if stable_hash64(id.as_bytes()) % 5 == 4 {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug)]
pub struct DatasetHeader {
    pub seed: u64,
    pub objects: usize,
    pub views: usize,
    pub g: usize,
    pub p: usize,
    pub d: usize,
    pub embed_seed: u64,
    pub embed_fingerprint: u64,
}

#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub id: String,
    pub kind: String,
    pub views: usize,
    pub grid_path: String,
    pub embed_path: String,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub kind: String,
    pub split: Split,
    pub grid: VoxelGrid,
    /// M×d stored view embeddings; row m belongs to azimuth 2πm/M.
    pub embeddings: Tensor,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&LoadedSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

fn write_embeddings(path: &Path, m: usize, d: usize, data: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMBED_MAGIC)?;
    w.write_all(&(m as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_embeddings(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EMBED_MAGIC {
        return Err(VoltError::data("bad embedding file magic"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let m = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let d = u32::from_le_bytes(word) as usize;
    let mut buf = vec![0u8; m * d * 8];
    r.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![m, d], data)
}

/// Generate `n_objects` shapes, render `m_views` silhouettes each, embed
/// them, and write grids + embeddings + manifest under `out_dir`.
/// Returns the manifest path.
pub fn build_dataset(
    out_dir: &Path,
    n_objects: usize,
    m_views: usize,
    g: usize,
    seed: u64,
    embedder: &ViewEmbedder,
) -> Result<PathBuf> {
    if n_objects < 2 {
        return Err(VoltError::config("dataset needs at least 2 objects"));
    }
    if !(1..=24).contains(&m_views) {
        return Err(VoltError::config("m_views must be in [1, 24]"));
    }
    fs::create_dir_all(out_dir.join("grids"))?;
    fs::create_dir_all(out_dir.join("embeds"))?;

    let header = DatasetHeader {
        seed,
        objects: n_objects,
        views: m_views,
        g,
        p: embedder.p(),
        d: embedder.d(),
        embed_seed: embedder.seed(),
        embed_fingerprint: embedder.fingerprint(),
    };

    let mut records = Vec::with_capacity(n_objects);
    let angles = azimuths(m_views);
    for i in 0..n_objects {
        let id = format!("obj{i:04}");
        let spec = random_shape(seed, i, g);
        let grid = generate_shape(&spec, g)?;
        let silhouettes: Vec<Silhouette> = angles
            .iter()
            .map(|&a| render_silhouette(&grid, a, embedder.p()))
            .collect::<Result<_>>()?;
        let embeddings = embedder.embed(&silhouettes)?;

        let grid_rel = format!("grids/{id}.vg");
        let embed_rel = format!("embeds/{id}.ve");
        grid.save(&out_dir.join(&grid_rel))?;
        write_embeddings(
            &out_dir.join(&embed_rel),
            m_views,
            embedder.d(),
            embeddings.data(),
        )?;
        records.push(SampleRecord {
            id: id.clone(),
            kind: spec.kind_name().to_string(),
            views: m_views,
            grid_path: grid_rel,
            embed_path: embed_rel,
            split: split_of(&id),
        });
    }

    let manifest_path = out_dir.join("manifest.txt");
    let mut w = BufWriter::new(File::create(&manifest_path)?);
    writeln!(w, "{MANIFEST_HEADER}")?;
    writeln!(w, "seed = {}", header.seed)?;
    writeln!(w, "objects = {}", header.objects)?;
    writeln!(w, "views = {}", header.views)?;
    writeln!(w, "g = {}", header.g)?;
    writeln!(w, "p = {}", header.p)?;
    writeln!(w, "d = {}", header.d)?;
    writeln!(w, "embed_seed = {}", header.embed_seed)?;
    writeln!(w, "embed_fingerprint = {:016x}", header.embed_fingerprint)?;
    writeln!(w, "# id kind views grid embed split")?;
    for r in &records {
        writeln!(
            w,
            "{} {} {} {} {} {}",
            r.id,
            r.kind,
            r.views,
            r.grid_path,
            r.embed_path,
            r.split.as_str()
        )?;
    }
    w.flush()?;
    Ok(manifest_path)
}

fn parse_header_line(line: &str, key: &str) -> Result<u64> {
    let rest = line
        .strip_prefix(key)
        .and_then(|r| r.trim_start().strip_prefix('='))
        .ok_or_else(|| VoltError::data(format!("manifest: expected `{key} = ...`, got `{line}`")))?;
    let text = rest.trim();
    if key == "embed_fingerprint" {
        u64::from_str_radix(text, 16)
            .map_err(|_| VoltError::data(format!("manifest: bad hex value in `{line}`")))
    } else {
        text.parse()
            .map_err(|_| VoltError::data(format!("manifest: bad integer in `{line}`")))
    }
}

/// Load a dataset from its manifest. When `expected_embedder` is given, the
/// stored fingerprint must match; mixing shards from different frozen
/// embedders is refused.
pub fn load_dataset(manifest_path: &Path, expected_embedder: Option<&ViewEmbedder>) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)?;
    let mut lines = text.lines();
    let first = lines.next().unwrap_or_default();
    if first != MANIFEST_HEADER {
        return Err(VoltError::data(format!(
            "not a dataset manifest (header `{first}`)"
        )));
    }
    let mut next = || {
        lines
            .next()
            .ok_or_else(|| VoltError::data("manifest truncated"))
    };
    let seed = parse_header_line(next()?, "seed")?;
    let objects = parse_header_line(next()?, "objects")? as usize;
    let views = parse_header_line(next()?, "views")? as usize;
    let g = parse_header_line(next()?, "g")? as usize;
    let p = parse_header_line(next()?, "p")? as usize;
    let d = parse_header_line(next()?, "d")? as usize;
    let embed_seed = parse_header_line(next()?, "embed_seed")?;
    let embed_fingerprint = parse_header_line(next()?, "embed_fingerprint")?;
    let header = DatasetHeader {
        seed,
        objects,
        views,
        g,
        p,
        d,
        embed_seed,
        embed_fingerprint,
    };

    if let Some(embedder) = expected_embedder {
        if embedder.fingerprint() != header.embed_fingerprint {
            return Err(VoltError::data(format!(
                "embedder fingerprint mismatch: dataset {:016x}, expected {:016x} \
                 (was the dataset generated with a different embed seed?)",
                header.embed_fingerprint,
                embedder.fingerprint()
            )));
        }
    }

    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(objects);
    for line in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(VoltError::data(format!("manifest record malformed: `{line}`")));
        }
        let split = match fields[5] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(VoltError::data(format!("unknown split `{other}`"))),
        };
        let grid = VoxelGrid::load(&base.join(fields[3]))?;
        if grid.g() != g {
            return Err(VoltError::data(format!(
                "grid {} has edge {}, manifest says {}",
                fields[3],
                grid.g(),
                g
            )));
        }
        let embeddings = read_embeddings(&base.join(fields[4]))?;
        if embeddings.cols() != d {
            return Err(VoltError::data(format!(
                "embeddings {} have width {}, manifest says {}",
                fields[4],
                embeddings.cols(),
                d
            )));
        }
        samples.push(LoadedSample {
            id: fields[0].to_string(),
            kind: fields[1].to_string(),
            split,
            grid,
            embeddings,
        });
    }
    if samples.len() != objects {
        return Err(VoltError::data(format!(
            "manifest promises {objects} objects, found {}",
            samples.len()
        )));
    }
    Ok(Dataset { header, samples })
}

/// First `m` stored view rows of a sample (the azimuth-prefix subsample).
pub fn view_prefix(embeddings: &Tensor, m: usize) -> Result<Tensor> {
    if m == 0 || m > embeddings.rows() {
        return Err(VoltError::data(format!(
            "cannot take {m} views from {} stored",
            embeddings.rows()
        )));
    }
    Tensor::new(
        vec![m, embeddings.cols()],
        embeddings.data()[..m * embeddings.cols()].to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn full_box_fills_the_grid() {
        let spec = ShapeSpec::Box {
            min: [0, 0, 0],
            size: [4, 4, 4],
        };
        let grid = generate_shape(&spec, 4).unwrap();
        assert_eq!(grid.count_occupied(), 64);
    }

    #[test]
    fn centered_sphere_occupancy_matches_enumeration() {
        // Center on the voxel-center nearest the middle of a G=16 grid.
        let spec = ShapeSpec::Sphere {
            center: [8.5, 8.5, 8.5],
            radius: 3.0,
        };
        let grid = generate_shape(&spec, 16).unwrap();

        // Independent enumeration of all 16³ centers against the radius test.
        let mut count = 0;
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let dx = x as f64 + 0.5 - 8.5;
                    let dy = y as f64 + 0.5 - 8.5;
                    let dz = z as f64 + 0.5 - 8.5;
                    if dx * dx + dy * dy + dz * dz <= 9.0 {
                        count += 1;
                        assert!(grid.occupied(x, y, z));
                    }
                }
            }
        }
        assert_eq!(count, 123);
        assert_eq!(grid.count_occupied(), 123);
    }

    #[test]
    fn degenerate_and_out_of_bounds_shapes_are_rejected() {
        let zero = ShapeSpec::Box {
            min: [0, 0, 0],
            size: [0, 2, 2],
        };
        assert!(generate_shape(&zero, 8).is_err());
        let outside = ShapeSpec::Box {
            min: [6, 0, 0],
            size: [4, 2, 2],
        };
        assert!(generate_shape(&outside, 8).is_err());
        let big_sphere = ShapeSpec::Sphere {
            center: [4.0, 4.0, 4.0],
            radius: 5.0,
        };
        assert!(generate_shape(&big_sphere, 8).is_err());
    }

    #[test]
    fn random_shapes_are_valid_for_all_kinds() {
        for g in [8usize, 16] {
            for i in 0..10 {
                let spec = random_shape(99, i, g);
                let grid = generate_shape(&spec, g).unwrap();
                assert!(grid.count_occupied() > 0, "{spec:?}");
            }
        }
    }

    #[test]
    fn full_cube_renders_solid_square_at_zero_azimuth() {
        let grid = generate_shape(
            &ShapeSpec::Box {
                min: [0, 0, 0],
                size: [16, 16, 16],
            },
            16,
        )
        .unwrap();
        let s = render_silhouette(&grid, 0.0, 16).unwrap();
        assert_eq!(s.count(), 16 * 16);
    }

    #[test]
    fn centered_sphere_silhouette_is_azimuth_invariant_at_quarter_turns() {
        let grid = generate_shape(
            &ShapeSpec::Sphere {
                center: [8.0, 8.0, 8.0],
                radius: 5.0,
            },
            16,
        )
        .unwrap();
        let base = render_silhouette(&grid, 0.0, 16).unwrap();
        for az in [PI / 2.0, PI, 3.0 * PI / 2.0] {
            assert_eq!(render_silhouette(&grid, az, 16).unwrap(), base);
        }
        // Arbitrary azimuths agree within rasterization tolerance.
        let rot = render_silhouette(&grid, 0.7, 16).unwrap();
        let diff = rot
            .pixels()
            .iter()
            .zip(base.pixels())
            .filter(|(a, b)| a != b)
            .count();
        assert!(diff <= base.count() / 5, "pixel diff {diff}");
    }

    #[test]
    fn ell_at_pi_is_the_horizontal_mirror_of_zero() {
        let spec = ShapeSpec::Ell {
            min: [2, 2, 2],
            post: [2, 2, 10],
            foot: [2, 9, 2],
        };
        let grid = generate_shape(&spec, 16).unwrap();
        let front = render_silhouette(&grid, 0.0, 16).unwrap();
        let back = render_silhouette(&grid, PI, 16).unwrap();
        assert_ne!(front, back, "shape should be asymmetric");
        assert_eq!(back, front.mirrored_cols());
    }

    #[test]
    fn embedder_is_deterministic_and_linear() {
        let embedder = ViewEmbedder::new(8, 12, 5).unwrap();
        let grid = generate_shape(
            &ShapeSpec::Box {
                min: [1, 1, 1],
                size: [3, 4, 5],
            },
            8,
        )
        .unwrap();
        let s = render_silhouette(&grid, 0.3, 8).unwrap();
        let a = embedder.embed(&[s.clone(), s.clone()]).unwrap();
        // Identical silhouettes → bit-identical rows.
        assert_eq!(a.data()[..12], a.data()[12..]);

        // All-zero silhouette → zero embedding.
        let blank = Silhouette {
            p: 8,
            pixels: vec![false; 64],
        };
        let zero = embedder.embed_one(&blank).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        // Disjoint union maps to the sum of embeddings.
        let mut left = vec![false; 64];
        let mut right = vec![false; 64];
        let mut both = vec![false; 64];
        for i in 0..16 {
            left[i] = true;
            both[i] = true;
        }
        for i in 40..52 {
            right[i] = true;
            both[i] = true;
        }
        let ea = embedder
            .embed_one(&Silhouette { p: 8, pixels: left })
            .unwrap();
        let eb = embedder
            .embed_one(&Silhouette { p: 8, pixels: right })
            .unwrap();
        let eboth = embedder
            .embed_one(&Silhouette { p: 8, pixels: both })
            .unwrap();
        for i in 0..12 {
            assert!((eboth.data()[i] - ea.data()[i] - eb.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_build_is_byte_identical_across_runs() {
        let tmp = tempfile::tempdir().unwrap();
        let embedder = ViewEmbedder::new(8, 16, DEFAULT_EMBED_SEED).unwrap();
        let dir_a = tmp.path().join("a");
        let dir_b = tmp.path().join("b");
        build_dataset(&dir_a, 4, 6, 8, 17, &embedder).unwrap();
        build_dataset(&dir_b, 4, 6, 8, 17, &embedder).unwrap();

        for rel in ["manifest.txt", "grids/obj0000.vg", "embeds/obj0003.ve"] {
            let a = fs::read(dir_a.join(rel)).unwrap();
            let b = fs::read(dir_b.join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identical runs");
        }
    }

    #[test]
    fn dataset_roundtrip_split_and_fingerprint() {
        let tmp = tempfile::tempdir().unwrap();
        let embedder = ViewEmbedder::new(8, 16, DEFAULT_EMBED_SEED).unwrap();
        let manifest = build_dataset(tmp.path(), 10, 4, 8, 23, &embedder).unwrap();

        let ds = load_dataset(&manifest, Some(&embedder)).unwrap();
        assert_eq!(ds.samples.len(), 10);
        assert_eq!(ds.header.views, 4);
        // Split is disjoint and covers all objects.
        let train = ds.split(Split::Train).len();
        let val = ds.split(Split::Val).len();
        assert_eq!(train + val, 10);
        for s in &ds.samples {
            assert_eq!(s.split, split_of(&s.id));
            assert!(s.grid.count_occupied() > 0);
        }

        // A different embedder seed is refused.
        let other = ViewEmbedder::new(8, 16, DEFAULT_EMBED_SEED + 1).unwrap();
        assert!(load_dataset(&manifest, Some(&other)).is_err());
    }

    #[test]
    fn view_prefix_matches_fresh_render_at_those_azimuths() {
        let tmp = tempfile::tempdir().unwrap();
        let embedder = ViewEmbedder::new(8, 16, DEFAULT_EMBED_SEED).unwrap();
        let manifest = build_dataset(tmp.path(), 3, 6, 8, 29, &embedder).unwrap();
        let ds = load_dataset(&manifest, Some(&embedder)).unwrap();

        let sample = &ds.samples[1];
        let m_sub = 3;
        let subset = view_prefix(&sample.embeddings, m_sub).unwrap();

        // Fresh render at the first three stored azimuths.
        let spec_grid = &sample.grid;
        let angles = azimuths(6);
        let silhouettes: Vec<Silhouette> = angles[..m_sub]
            .iter()
            .map(|&a| render_silhouette(spec_grid, a, 8).unwrap())
            .collect();
        let fresh = embedder.embed(&silhouettes).unwrap();
        assert_eq!(subset.data(), fresh.data());
    }

    #[test]
    fn small_datasets_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let embedder = ViewEmbedder::new(8, 16, DEFAULT_EMBED_SEED).unwrap();
        assert!(build_dataset(tmp.path(), 1, 4, 8, 1, &embedder).is_err());
        assert!(build_dataset(tmp.path(), 4, 25, 8, 1, &embedder).is_err());
    }
}
