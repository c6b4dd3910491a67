//! The volume transformer: a divergence-enhanced view encoder, a volume
//! decoder driven by learnable queries, and a per-token occupancy head whose
//! outputs are stitched into a voxel grid.
//!
//! The encoder carries no positional encodings of any kind, so the whole
//! model is permutation-invariant in its input views. Volume queries are
//! trainable; the decoder's positional encodings are frozen sinusoids over
//! the token lattice.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{self, AttentionTrace, AttnRole, HeadIds};
use crate::error::{Result, VoltError};
use crate::graph::{Graph, NodeId};
use crate::params::{Grads, ParamStore};
use crate::tensor::{self, Tensor};
use crate::voxel::{GridKind, VoxelGrid};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Per-head feature width.
    pub d_k: usize,
    pub ffn_hidden: usize,
    /// Encoder blocks.
    pub l_enc: usize,
    /// Decoder blocks.
    pub l_dec: usize,
    /// Voxel resolution per axis.
    pub g: usize,
    /// Token sub-volume edge; each volume token owns an s³ block.
    pub s: usize,
    /// Maximum number of input views.
    pub m_max: usize,
    /// true = divergence-enhanced variant (evolt), false = vanilla (volt).
    pub enhance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            d_k: 16,
            ffn_hidden: 256,
            l_enc: 6,
            l_dec: 6,
            g: 16,
            s: 4,
            m_max: 24,
            enhance: true,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used by gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            d: 8,
            heads: 2,
            d_k: 4,
            ffn_hidden: 16,
            l_enc: 2,
            l_dec: 2,
            g: 4,
            s: 2,
            m_max: 8,
            enhance: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return Err(VoltError::config("d must be at least 3"));
        }
        if self.heads == 0 || self.d_k == 0 || self.ffn_hidden == 0 {
            return Err(VoltError::config("heads, d_k, and ffn_hidden must be positive"));
        }
        if self.l_enc < 1 || self.l_dec < 1 {
            return Err(VoltError::config("l_enc and l_dec must be at least 1"));
        }
        if self.s == 0 || self.g == 0 || self.g % self.s != 0 {
            return Err(VoltError::config(format!(
                "voxel resolution g={} must be a positive multiple of token edge s={}",
                self.g, self.s
            )));
        }
        if self.m_max == 0 {
            return Err(VoltError::config("m_max must be positive"));
        }
        Ok(())
    }

    /// Tokens per axis of the token lattice.
    pub fn tokens_per_axis(&self) -> usize {
        self.g / self.s
    }

    /// Number of volume tokens N = (g/s)³.
    pub fn n_tokens(&self) -> usize {
        let t = self.tokens_per_axis();
        t * t * t
    }

    /// Occupancy logits per token (s³).
    pub fn token_logits(&self) -> usize {
        self.s * self.s * self.s
    }

    fn w_view_rows(&self) -> usize {
        if self.enhance {
            self.heads * self.d_k + self.d
        } else {
            self.heads * self.d_k
        }
    }
}

enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
    Sinusoid,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

fn linear(name: String, rows: usize, cols: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![rows, cols],
        init: Init::Xavier {
            fan_in: rows,
            fan_out: cols,
        },
        trainable: true,
    }
}

fn norm_pair(prefix: &str, d: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec {
        name: format!("{prefix}.gamma"),
        shape: vec![d],
        init: Init::Ones,
        trainable: true,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.beta"),
        shape: vec![d],
        init: Init::Zeros,
        trainable: true,
    });
}

fn param_manifest(c: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let d = c.d;
    for l in 0..c.l_enc {
        for h in 0..c.heads {
            specs.push(linear(format!("enc.{l}.attn.h{h}.wq"), d, c.d_k));
            specs.push(linear(format!("enc.{l}.attn.h{h}.wk"), d, c.d_k));
            specs.push(linear(format!("enc.{l}.attn.h{h}.wv"), d, c.d_k));
        }
        specs.push(linear(format!("enc.{l}.attn.w_view"), c.w_view_rows(), d));
        norm_pair(&format!("enc.{l}.norm1"), d, &mut specs);
        specs.push(linear(format!("enc.{l}.ffn.w1"), d, c.ffn_hidden));
        specs.push(linear(format!("enc.{l}.ffn.w2"), c.ffn_hidden, d));
        norm_pair(&format!("enc.{l}.norm2"), d, &mut specs);
    }
    for l in 0..c.l_dec {
        for h in 0..c.heads {
            specs.push(linear(format!("dec.{l}.vol.h{h}.wq"), d, c.d_k));
            specs.push(linear(format!("dec.{l}.vol.h{h}.wk"), d, c.d_k));
            specs.push(linear(format!("dec.{l}.vol.h{h}.wv"), d, c.d_k));
        }
        specs.push(linear(format!("dec.{l}.vol.w"), c.heads * c.d_k, d));
        norm_pair(&format!("dec.{l}.norm1"), d, &mut specs);
        for h in 0..c.heads {
            specs.push(linear(format!("dec.{l}.cross.h{h}.wq"), d, c.d_k));
            specs.push(linear(format!("dec.{l}.cross.h{h}.wk"), d, c.d_k));
            specs.push(linear(format!("dec.{l}.cross.h{h}.wv"), d, c.d_k));
        }
        specs.push(linear(format!("dec.{l}.cross.w"), c.heads * c.d_k, d));
        norm_pair(&format!("dec.{l}.norm2"), d, &mut specs);
        specs.push(linear(format!("dec.{l}.ffn.w1"), d, c.ffn_hidden));
        specs.push(linear(format!("dec.{l}.ffn.w2"), c.ffn_hidden, d));
        norm_pair(&format!("dec.{l}.norm3"), d, &mut specs);
    }
    specs.push(ParamSpec {
        name: "queries".to_string(),
        shape: vec![c.n_tokens(), d],
        init: Init::Normal { std: 0.02 },
        trainable: true,
    });
    specs.push(ParamSpec {
        name: "epos".to_string(),
        shape: vec![c.n_tokens(), d],
        init: Init::Sinusoid,
        trainable: false,
    });
    // Zero-initialized head: an untrained model predicts exactly 0.5.
    specs.push(ParamSpec {
        name: "head.w".to_string(),
        shape: vec![d, c.token_logits()],
        init: Init::Zeros,
        trainable: true,
    });
    specs
}

/// Token index → lattice coordinates, x fastest.
pub fn token_lattice(n: usize, tokens_per_axis: usize) -> (usize, usize, usize) {
    let t = tokens_per_axis;
    (n % t, (n / t) % t, n / (t * t))
}

/// Frozen sinusoidal positional encodings over the token lattice: d/3
/// sin-cos features per axis, concatenated and zero-padded to d.
fn positional_encoding(c: &ModelConfig) -> Tensor {
    let n = c.n_tokens();
    let d = c.d;
    let per_axis = d / 3;
    let mut data = vec![0.0; n * d];
    for token in 0..n {
        let (a, b, cc) = token_lattice(token, c.tokens_per_axis());
        for (axis, pos) in [a, b, cc].into_iter().enumerate() {
            for k in 0..per_axis {
                let exponent = 2.0 * (k / 2) as f64 / per_axis as f64;
                let angle = pos as f64 / 10000f64.powf(exponent);
                let value = if k % 2 == 0 { angle.sin() } else { angle.cos() };
                data[token * d + axis * per_axis + k] = value;
            }
        }
    }
    Tensor::from_parts(vec![n, d], data)
}

fn init_tensor(spec: &ParamSpec, config: &ModelConfig, seed: u64) -> Tensor {
    let len: usize = spec.shape.iter().product();
    match &spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::from_parts(spec.shape.clone(), vec![1.0; len]),
        Init::Xavier { fan_in, fan_out } => {
            let bound = (6.0 / (*fan_in as f64 + *fan_out as f64)).sqrt();
            let mut rng = crate::rng::stream(seed, &format!("init/{}", spec.name));
            let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_parts(spec.shape.clone(), data)
        }
        Init::Normal { std } => {
            let mut rng = crate::rng::stream(seed, &format!("init/{}", spec.name));
            let dist = Normal::new(0.0, *std).expect("valid normal");
            let data = (0..len).map(|_| dist.sample(&mut rng)).collect();
            Tensor::from_parts(spec.shape.clone(), data)
        }
        Init::Sinusoid => positional_encoding(config),
    }
}

#[derive(Clone, Debug)]
pub struct VoltModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Full forward outputs for one sample.
pub struct Forward {
    pub x_l: Tensor,
    pub y_l: Tensor,
    /// Per-token occupancy probabilities, N×s³.
    pub probs: Tensor,
    pub grid: VoxelGrid,
    pub traces: Vec<AttentionTrace>,
    pub loss: Option<f64>,
}

struct BuiltGraph {
    graph: Graph,
    param_ids: Vec<(String, NodeId)>,
    x_l: NodeId,
    y_l: NodeId,
    probs: NodeId,
    loss: Option<NodeId>,
    traces: Vec<(usize, AttnRole, Vec<NodeId>)>,
}

impl VoltModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for spec in param_manifest(&config) {
            let tensor = init_tensor(&spec, &config, seed);
            params.insert(spec.name, tensor, spec.trainable)?;
        }
        Ok(VoltModel { config, params })
    }

    /// Rebuild a model from checkpoint tensors; trainability is reassigned
    /// from the parameter manifest.
    pub fn from_named_tensors(
        config: ModelConfig,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        let manifest = param_manifest(&config);
        let mut params = ParamStore::new();
        for (name, tensor) in tensors {
            let spec = manifest
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| VoltError::config(format!("unexpected parameter {name}")))?;
            params.insert(name, tensor, spec.trainable)?;
        }
        Self::from_parts(config, params)
    }

    /// Rebuild a model from loaded parameters, validating the manifest.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let manifest = param_manifest(&config);
        if params.len() != manifest.len() {
            return Err(VoltError::config(format!(
                "parameter count {} does not match configuration ({} expected)",
                params.len(),
                manifest.len()
            )));
        }
        for spec in &manifest {
            let entry = params.get(&spec.name)?;
            if entry.tensor.shape() != spec.shape.as_slice() {
                return Err(VoltError::config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    entry.tensor.shape(),
                    spec.shape
                )));
            }
            if entry.trainable != spec.trainable {
                return Err(VoltError::config(format!(
                    "parameter {} trainable flag mismatch",
                    spec.name
                )));
            }
        }
        Ok(VoltModel { config, params })
    }

    pub fn positional_encodings(&self) -> &Tensor {
        self.params
            .tensor("epos")
            .expect("epos exists by construction")
    }

    fn validate_views(&self, views: &Tensor) -> Result<()> {
        if views.rank() != 2 {
            return Err(VoltError::shape(format!(
                "view embeddings must be rank 2, got {:?}",
                views.shape()
            )));
        }
        let m = views.rows();
        if m == 0 {
            return Err(VoltError::data("empty view set: at least one view is required"));
        }
        if m > self.config.m_max {
            return Err(VoltError::data(format!(
                "{m} views exceed the configured maximum {}",
                self.config.m_max
            )));
        }
        if views.cols() != self.config.d {
            return Err(VoltError::shape(format!(
                "view embedding width {} does not match d={}",
                views.cols(),
                self.config.d
            )));
        }
        Ok(())
    }

    fn bind(&self, g: &mut Graph, ids: &mut Vec<(String, NodeId)>, name: &str) -> Result<NodeId> {
        let entry = self.params.get(name)?;
        let id = if entry.trainable {
            let id = g.param(entry.tensor.clone());
            ids.push((name.to_string(), id));
            id
        } else {
            g.input(entry.tensor.clone())
        };
        Ok(id)
    }

    fn bind_heads(
        &self,
        g: &mut Graph,
        ids: &mut Vec<(String, NodeId)>,
        prefix: &str,
    ) -> Result<Vec<HeadIds>> {
        (0..self.config.heads)
            .map(|h| {
                Ok(HeadIds {
                    w_q: self.bind(g, ids, &format!("{prefix}.h{h}.wq"))?,
                    w_k: self.bind(g, ids, &format!("{prefix}.h{h}.wk"))?,
                    w_v: self.bind(g, ids, &format!("{prefix}.h{h}.wv"))?,
                })
            })
            .collect()
    }

    fn ffn(
        &self,
        g: &mut Graph,
        ids: &mut Vec<(String, NodeId)>,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let w1 = self.bind(g, ids, &format!("{prefix}.w1"))?;
        let w2 = self.bind(g, ids, &format!("{prefix}.w2"))?;
        let hidden = g.matmul(x, w1)?;
        let act = g.relu(hidden)?;
        g.matmul(act, w2)
    }

    fn norm(
        &self,
        g: &mut Graph,
        ids: &mut Vec<(String, NodeId)>,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = self.bind(g, ids, &format!("{prefix}.gamma"))?;
        let beta = self.bind(g, ids, &format!("{prefix}.beta"))?;
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }

    fn build_encoder(
        &self,
        g: &mut Graph,
        ids: &mut Vec<(String, NodeId)>,
        traces: &mut Vec<(usize, AttnRole, Vec<NodeId>)>,
        x0: NodeId,
    ) -> Result<NodeId> {
        let mut x = x0;
        for l in 0..self.config.l_enc {
            let heads = self.bind_heads(g, ids, &format!("enc.{l}.attn"))?;
            let w_view = self.bind(g, ids, &format!("enc.{l}.attn.w_view"))?;
            let (a, scores) =
                attention::mh_deatt(g, x, x0, &heads, w_view, self.config.enhance)?;
            traces.push((l, AttnRole::ViewView, scores));
            let res = g.add(a, x)?;
            let xhat = self.norm(g, ids, &format!("enc.{l}.norm1"), res)?;
            let f = self.ffn(g, ids, &format!("enc.{l}.ffn"), xhat)?;
            let res2 = g.add(f, xhat)?;
            x = self.norm(g, ids, &format!("enc.{l}.norm2"), res2)?;
        }
        Ok(x)
    }

    fn build_decoder(
        &self,
        g: &mut Graph,
        ids: &mut Vec<(String, NodeId)>,
        traces: &mut Vec<(usize, AttnRole, Vec<NodeId>)>,
        x_l: NodeId,
    ) -> Result<NodeId> {
        let queries = self.bind(g, ids, "queries")?;
        let epos = self.bind(g, ids, "epos")?;
        let mut y = g.add(queries, epos)?;
        for l in 0..self.config.l_dec {
            let vol_heads = self.bind_heads(g, ids, &format!("dec.{l}.vol"))?;
            let w_vol = self.bind(g, ids, &format!("dec.{l}.vol.w"))?;
            let (a, s_vol) = attention::mh_vol_attn(g, y, &vol_heads, w_vol)?;
            traces.push((l, AttnRole::VolumeVolume, s_vol));
            let res = g.add(a, y)?;
            let yhat = self.norm(g, ids, &format!("dec.{l}.norm1"), res)?;

            let cross_heads = self.bind_heads(g, ids, &format!("dec.{l}.cross"))?;
            let w_cross = self.bind(g, ids, &format!("dec.{l}.cross.w"))?;
            let (c, s_cross) = attention::mh_view_vol_attn(g, yhat, x_l, &cross_heads, w_cross)?;
            traces.push((l, AttnRole::ViewVolume, s_cross));
            let res2 = g.add(c, yhat)?;
            let ytilde = self.norm(g, ids, &format!("dec.{l}.norm2"), res2)?;

            let f = self.ffn(g, ids, &format!("dec.{l}.ffn"), ytilde)?;
            let res3 = g.add(f, ytilde)?;
            y = self.norm(g, ids, &format!("dec.{l}.norm3"), res3)?;
        }
        Ok(y)
    }

    fn build_forward(&self, views: &Tensor, gt: Option<&VoxelGrid>) -> Result<BuiltGraph> {
        self.validate_views(views)?;
        let mut g = Graph::new();
        let mut ids = Vec::new();
        let mut traces = Vec::new();

        let x0 = g.input(views.clone());
        let x_l = self.build_encoder(&mut g, &mut ids, &mut traces, x0)?;
        let y_l = self.build_decoder(&mut g, &mut ids, &mut traces, x_l)?;

        let head = self.bind(&mut g, &mut ids, "head.w")?;
        let logits = g.matmul(y_l, head)?;
        let probs = g.sigmoid(logits)?;

        let loss = match gt {
            Some(grid) => {
                let rows = grid_to_token_rows(grid, &self.config)?;
                let target = g.input(rows);
                Some(g.bce_mean(probs, target)?)
            }
            None => None,
        };

        Ok(BuiltGraph {
            graph: g,
            param_ids: ids,
            x_l,
            y_l,
            probs,
            loss,
            traces,
        })
    }

    fn collect_traces(
        graph: &Graph,
        trace_ids: &[(usize, AttnRole, Vec<NodeId>)],
    ) -> Vec<AttentionTrace> {
        let mut out = Vec::new();
        for (layer, role, score_ids) in trace_ids {
            for (head, &id) in score_ids.iter().enumerate() {
                out.push(AttentionTrace {
                    layer: *layer,
                    head,
                    role: *role,
                    scores: graph.value(id).clone(),
                });
            }
        }
        out
    }

    /// Full forward pass; traces are captured when `capture_traces` is set.
    pub fn forward(
        &self,
        views: &Tensor,
        gt: Option<&VoxelGrid>,
        capture_traces: bool,
    ) -> Result<Forward> {
        let built = self.build_forward(views, gt)?;
        let probs = built.graph.value(built.probs).clone();
        let grid = stitch_to_grid(&probs, &self.config)?;
        let loss = match built.loss {
            Some(id) => Some(built.graph.value(id).as_scalar()?),
            None => None,
        };
        Ok(Forward {
            x_l: built.graph.value(built.x_l).clone(),
            y_l: built.graph.value(built.y_l).clone(),
            probs,
            grid,
            traces: if capture_traces {
                Self::collect_traces(&built.graph, &built.traces)
            } else {
                Vec::new()
            },
            loss,
        })
    }

    /// Encoder only: layer-L view embeddings plus per-layer view-attention
    /// traces.
    pub fn encode(&self, views: &Tensor) -> Result<(Tensor, Vec<AttentionTrace>)> {
        self.validate_views(views)?;
        let mut g = Graph::new();
        let mut ids = Vec::new();
        let mut trace_ids = Vec::new();
        let x0 = g.input(views.clone());
        let x_l = self.build_encoder(&mut g, &mut ids, &mut trace_ids, x0)?;
        Ok((g.value(x_l).clone(), Self::collect_traces(&g, &trace_ids)))
    }

    /// Decoder only, from already-encoded view embeddings.
    pub fn decode(&self, x_l: &Tensor) -> Result<(Tensor, Vec<AttentionTrace>)> {
        if x_l.rank() != 2 || x_l.cols() != self.config.d {
            return Err(VoltError::shape(format!(
                "decoder input must be M×{}, got {:?}",
                self.config.d,
                x_l.shape()
            )));
        }
        let mut g = Graph::new();
        let mut ids = Vec::new();
        let mut trace_ids = Vec::new();
        let xi = g.input(x_l.clone());
        let y_l = self.build_decoder(&mut g, &mut ids, &mut trace_ids, xi)?;
        Ok((g.value(y_l).clone(), Self::collect_traces(&g, &trace_ids)))
    }

    /// Predict the probabilistic occupancy grid for a set of views.
    pub fn predict_volume(&self, views: &Tensor) -> Result<VoxelGrid> {
        Ok(self.forward(views, None, false)?.grid)
    }

    /// Per-sample loss without gradients.
    pub fn loss(&self, views: &Tensor, gt: &VoxelGrid) -> Result<f64> {
        self.forward(views, Some(gt), false)?
            .loss
            .ok_or_else(|| VoltError::numeric("loss missing from forward"))
    }

    /// Per-sample loss, analytic gradients, and the predicted grid.
    pub fn loss_and_grads(
        &self,
        views: &Tensor,
        gt: &VoxelGrid,
    ) -> Result<(f64, Grads, VoxelGrid)> {
        let built = self.build_forward(views, Some(gt))?;
        let loss_id = built.loss.expect("loss node present");
        let loss = built.graph.value(loss_id).as_scalar()?;
        let mut node_grads = built.graph.backward(loss_id)?;
        let mut grads = Grads::new();
        for (name, id) in &built.param_ids {
            let g = node_grads
                .take(*id)
                .unwrap_or_else(|| Tensor::zeros(built.graph.value(*id).shape().to_vec()));
            grads.insert(name.clone(), g);
        }
        let probs = built.graph.value(built.probs).clone();
        let grid = stitch_to_grid(&probs, &self.config)?;
        Ok((loss, grads, grid))
    }
}

/// Mean binary cross-entropy between a probabilistic prediction and a binary
/// ground-truth grid of the same resolution.
pub fn bce_loss(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<f64> {
    if pred.g() != gt.g() {
        return Err(VoltError::shape(format!(
            "grid size mismatch: {} vs {}",
            pred.g(),
            gt.g()
        )));
    }
    if gt.kind() != GridKind::Binary {
        return Err(VoltError::data("ground truth grid must be binary"));
    }
    let p = Tensor::new(vec![pred.values().len()], pred.values().to_vec())?;
    let y = Tensor::new(vec![gt.values().len()], gt.values().to_vec())?;
    tensor::bce_mean(&p, &y)?.as_scalar()
}

/// Stitch per-token probabilities (N×s³) into a G³ probabilistic grid.
/// Token n with lattice coordinates (a,b,c) fills the sub-volume
/// [a·s, a·s+s) × [b·s, b·s+s) × [c·s, c·s+s); offsets are x-fastest.
pub fn stitch_to_grid(probs: &Tensor, config: &ModelConfig) -> Result<VoxelGrid> {
    let n = config.n_tokens();
    let s = config.s;
    let g = config.g;
    if probs.rank() != 2 || probs.rows() != n || probs.cols() != config.token_logits() {
        return Err(VoltError::shape(format!(
            "token probabilities must be {}×{}, got {:?}",
            n,
            config.token_logits(),
            probs.shape()
        )));
    }
    let mut values = vec![0.0; g * g * g];
    for token in 0..n {
        let (a, b, c) = token_lattice(token, config.tokens_per_axis());
        for offset in 0..config.token_logits() {
            let (u, v, w) = token_lattice(offset, s);
            let (x, y, z) = (a * s + u, b * s + v, c * s + w);
            values[x + g * (y + g * z)] = probs.get2(token, offset);
        }
    }
    VoxelGrid::new_probabilistic(g, values)
}

/// Inverse of `stitch_to_grid`: arrange a grid's voxels into token rows.
pub fn grid_to_token_rows(grid: &VoxelGrid, config: &ModelConfig) -> Result<Tensor> {
    if grid.g() != config.g {
        return Err(VoltError::shape(format!(
            "grid edge {} does not match configured g={}",
            grid.g(),
            config.g
        )));
    }
    let n = config.n_tokens();
    let s = config.s;
    let logits = config.token_logits();
    let mut data = vec![0.0; n * logits];
    for token in 0..n {
        let (a, b, c) = token_lattice(token, config.tokens_per_axis());
        for offset in 0..logits {
            let (u, v, w) = token_lattice(offset, s);
            data[token * logits + offset] = grid.get(a * s + u, b * s + v, c * s + w);
        }
    }
    Tensor::new(vec![n, logits], data)
}

/// Central-difference check of the full model's analytic gradients on one
/// sample. Used by the `grad-check` command and the acceptance suite.
pub fn full_grad_check(
    model: &VoltModel,
    views: &Tensor,
    gt: &VoxelGrid,
    epsilon: f64,
) -> Result<crate::gradcheck::GradCheckReport> {
    let (_, analytic, _) = model.loss_and_grads(views, gt)?;
    let config = model.config.clone();
    let loss_fn = move |p: &ParamStore| -> Result<f64> {
        let m = VoltModel {
            config: config.clone(),
            params: p.clone(),
        };
        m.loss(views, gt)
    };
    crate::gradcheck::grad_check(loss_fn, &model.params, &analytic, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::HeadParams;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 6,
            heads: 2,
            d_k: 3,
            ffn_hidden: 8,
            l_enc: 2,
            l_dec: 2,
            g: 4,
            s: 2,
            m_max: 8,
            enhance: true,
        }
    }

    fn random_views(rng: &mut impl Rng, m: usize, d: usize) -> Tensor {
        Tensor::new(
            vec![m, d],
            (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_binary_grid(rng: &mut impl Rng, g: usize) -> VoxelGrid {
        let values = (0..g * g * g)
            .map(|_| if rng.random_range(0.0..1.0) < 0.5 { 0.0 } else { 1.0 })
            .collect();
        VoxelGrid::new_binary(g, values).unwrap()
    }

    fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
        let cols = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for &i in perm {
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        Tensor::new(vec![perm.len(), cols], data).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn config_validation_catches_bad_geometry() {
        let mut c = ModelConfig::default();
        c.g = 15;
        assert!(c.validate().is_err());
        c.g = 16;
        assert!(c.validate().is_ok());
        c.l_enc = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encode_keeps_identical_rows_identical() {
        let model = VoltModel::new(tiny_config(), 1).unwrap();
        let mut rng = crate::rng::stream(2, "test/encode-sym");
        let row = random_views(&mut rng, 1, 6);
        let x = Tensor::new(vec![4, 6], row.data().repeat(4)).unwrap();
        let (out, traces) = model.encode(&x).unwrap();
        for i in 1..4 {
            for j in 0..6 {
                assert!((out.get2(i, j) - out.get2(0, j)).abs() < 1e-12);
            }
        }
        assert_eq!(traces.len(), 2 * 2); // l_enc layers × heads
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let model = VoltModel::new(tiny_config(), 3).unwrap();
        let mut rng = crate::rng::stream(4, "test/encode-perm");
        let x = random_views(&mut rng, 5, 6);
        let perm = [2, 0, 4, 3, 1];
        let (out, _) = model.encode(&x).unwrap();
        let (out_p, _) = model.encode(&permute_rows(&x, &perm)).unwrap();
        let expect = permute_rows(&out, &perm);
        assert!(max_abs_diff(expect.data(), out_p.data()) < 1e-9);
    }

    #[test]
    fn encode_rejects_empty_and_oversized_view_sets() {
        let model = VoltModel::new(tiny_config(), 5).unwrap();
        let empty = Tensor::new(vec![0, 6], vec![]).unwrap();
        assert!(model.encode(&empty).is_err());
        let mut rng = crate::rng::stream(6, "test/encode-too-many");
        let too_many = random_views(&mut rng, 9, 6);
        assert!(model.encode(&too_many).is_err());
    }

    /// Compose the encoder by hand from tensor primitives and compare.
    #[test]
    fn encode_matches_manual_composition() {
        let mut config = tiny_config();
        config.d = 4;
        config.heads = 2;
        config.d_k = 2;
        let model = VoltModel::new(config.clone(), 7).unwrap();
        let mut rng = crate::rng::stream(8, "test/encode-hand");
        let x0 = random_views(&mut rng, 3, 4);

        let p = |name: &str| model.params.tensor(name).unwrap().clone();
        let heads = |prefix: &str| -> Vec<HeadParams> {
            (0..config.heads)
                .map(|h| HeadParams {
                    w_q: p(&format!("{prefix}.h{h}.wq")),
                    w_k: p(&format!("{prefix}.h{h}.wk")),
                    w_v: p(&format!("{prefix}.h{h}.wv")),
                })
                .collect()
        };

        let mut x = x0.clone();
        for l in 0..config.l_enc {
            // MH-DEAtt from primitives.
            let mut parts = Vec::new();
            for hp in heads(&format!("enc.{l}.attn")) {
                let q = tensor::matmul(&x, &hp.w_q).unwrap();
                let k = tensor::matmul(&x, &hp.w_k).unwrap();
                let v = tensor::matmul(&x, &hp.w_v).unwrap();
                let logits = tensor::matmul_nt(&q, &k).unwrap();
                let scaled = tensor::scale(&logits, 1.0 / (config.d_k as f64).sqrt()).unwrap();
                parts.push(tensor::matmul(&tensor::softmax_rows(&scaled).unwrap(), &v).unwrap());
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            let cat = tensor::concat_cols(&refs).unwrap();
            let pre = tensor::concat_cols(&[&cat, &x0]).unwrap();
            let a = tensor::matmul(&pre, &p(&format!("enc.{l}.attn.w_view"))).unwrap();

            let res = tensor::add(&a, &x).unwrap();
            let xhat = tensor::layer_norm(
                &res,
                &p(&format!("enc.{l}.norm1.gamma")),
                &p(&format!("enc.{l}.norm1.beta")),
                LAYER_NORM_EPS,
            )
            .unwrap();
            let h1 = tensor::matmul(&xhat, &p(&format!("enc.{l}.ffn.w1"))).unwrap();
            let f = tensor::matmul(&tensor::relu(&h1).unwrap(), &p(&format!("enc.{l}.ffn.w2")))
                .unwrap();
            let res2 = tensor::add(&f, &xhat).unwrap();
            x = tensor::layer_norm(
                &res2,
                &p(&format!("enc.{l}.norm2.gamma")),
                &p(&format!("enc.{l}.norm2.beta")),
                LAYER_NORM_EPS,
            )
            .unwrap();
        }

        let (out, _) = model.encode(&x0).unwrap();
        assert!(max_abs_diff(out.data(), x.data()) < 1e-12);
    }

    /// Compose the decoder by hand (N = 8 tokens, M = 2 views).
    #[test]
    fn decode_matches_manual_composition() {
        let config = tiny_config();
        let model = VoltModel::new(config.clone(), 9).unwrap();
        let mut rng = crate::rng::stream(10, "test/decode-hand");
        let x_l = random_views(&mut rng, 2, 6);

        let p = |name: &str| model.params.tensor(name).unwrap().clone();
        let attn_block = |q_src: &Tensor, kv_src: &Tensor, prefix: &str, w_name: &str| {
            let mut parts = Vec::new();
            for h in 0..config.heads {
                let wq = p(&format!("{prefix}.h{h}.wq"));
                let wk = p(&format!("{prefix}.h{h}.wk"));
                let wv = p(&format!("{prefix}.h{h}.wv"));
                let q = tensor::matmul(q_src, &wq).unwrap();
                let k = tensor::matmul(kv_src, &wk).unwrap();
                let v = tensor::matmul(kv_src, &wv).unwrap();
                let logits = tensor::matmul_nt(&q, &k).unwrap();
                let scaled = tensor::scale(&logits, 1.0 / (config.d_k as f64).sqrt()).unwrap();
                parts.push(tensor::matmul(&tensor::softmax_rows(&scaled).unwrap(), &v).unwrap());
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            tensor::matmul(&tensor::concat_cols(&refs).unwrap(), &p(w_name)).unwrap()
        };
        let ln = |x: &Tensor, prefix: &str| {
            tensor::layer_norm(
                x,
                &p(&format!("{prefix}.gamma")),
                &p(&format!("{prefix}.beta")),
                LAYER_NORM_EPS,
            )
            .unwrap()
        };

        let mut y = tensor::add(&p("queries"), &p("epos")).unwrap();
        assert_eq!(y.rows(), 8);
        for l in 0..config.l_dec {
            let a = attn_block(&y, &y, &format!("dec.{l}.vol"), &format!("dec.{l}.vol.w"));
            let yhat = ln(&tensor::add(&a, &y).unwrap(), &format!("dec.{l}.norm1"));
            let c = attn_block(
                &yhat,
                &x_l,
                &format!("dec.{l}.cross"),
                &format!("dec.{l}.cross.w"),
            );
            let ytilde = ln(&tensor::add(&c, &yhat).unwrap(), &format!("dec.{l}.norm2"));
            let h1 = tensor::matmul(&ytilde, &p(&format!("dec.{l}.ffn.w1"))).unwrap();
            let f = tensor::matmul(&tensor::relu(&h1).unwrap(), &p(&format!("dec.{l}.ffn.w2")))
                .unwrap();
            y = ln(&tensor::add(&f, &ytilde).unwrap(), &format!("dec.{l}.norm3"));
        }

        let (out, traces) = model.decode(&x_l).unwrap();
        assert_eq!(out.shape(), &[8, 6]);
        assert!(max_abs_diff(out.data(), y.data()) < 1e-12);
        // Per layer: heads volume-volume + heads view-volume traces.
        assert_eq!(traces.len(), config.l_dec * config.heads * 2);
    }

    #[test]
    fn decode_is_invariant_to_view_permutation() {
        let model = VoltModel::new(tiny_config(), 11).unwrap();
        let mut rng = crate::rng::stream(12, "test/decode-perm");
        let x_l = random_views(&mut rng, 4, 6);
        let (out, _) = model.decode(&x_l).unwrap();
        let (out_p, _) = model.decode(&permute_rows(&x_l, &[3, 1, 0, 2])).unwrap();
        assert!(max_abs_diff(out.data(), out_p.data()) < 1e-9);
    }

    #[test]
    fn untrained_model_predicts_exactly_half() {
        let model = VoltModel::new(tiny_config(), 13).unwrap();
        let mut rng = crate::rng::stream(14, "test/predict-half");
        let views = random_views(&mut rng, 3, 6);
        let grid = model.predict_volume(&views).unwrap();
        assert_eq!(grid.g(), 4);
        assert_eq!(grid.values().len(), 64);
        assert!(grid.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn predict_is_invariant_to_view_permutation() {
        let model = VoltModel::new(tiny_config(), 15).unwrap();
        let mut rng = crate::rng::stream(16, "test/predict-perm");
        let views = random_views(&mut rng, 5, 6);
        let a = model.predict_volume(&views).unwrap();
        let b = model
            .predict_volume(&permute_rows(&views, &[4, 0, 2, 1, 3]))
            .unwrap();
        assert!(max_abs_diff(a.values(), b.values()) < 1e-9);
    }

    #[test]
    fn enhance_flag_changes_encoder_output() {
        let mut on = tiny_config();
        on.enhance = true;
        let mut off = tiny_config();
        off.enhance = false;
        let m_on = VoltModel::new(on, 17).unwrap();
        let m_off = VoltModel::new(off, 17).unwrap();
        let mut rng = crate::rng::stream(18, "test/enhance-diff");
        let views = random_views(&mut rng, 4, 6);
        let (a, _) = m_on.encode(&views).unwrap();
        let (b, _) = m_off.encode(&views).unwrap();
        assert!(max_abs_diff(a.data(), b.data()) > 1e-6);
    }

    #[test]
    fn superset_of_views_keeps_shape_and_bounds() {
        let model = VoltModel::new(tiny_config(), 19).unwrap();
        let mut rng = crate::rng::stream(20, "test/view-superset");
        let views = random_views(&mut rng, 8, 6);
        for m in [2usize, 5, 8] {
            let subset = Tensor::new(vec![m, 6], views.data()[..m * 6].to_vec()).unwrap();
            let grid = model.predict_volume(&subset).unwrap();
            assert_eq!(grid.values().len(), 64);
            assert!(grid.values().iter().all(|&v| 0.0 < v && v < 1.0));
        }
    }

    #[test]
    fn bce_loss_examples_on_grids() {
        let g = 2;
        let gt = VoxelGrid::new_binary(g, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let half = VoxelGrid::new_probabilistic(g, vec![0.5; 8]).unwrap();
        assert!((bce_loss(&half, &gt).unwrap() - 2.0_f64.ln()).abs() < 1e-12);

        let exact = VoxelGrid::new_probabilistic(g, gt.values().to_vec()).unwrap();
        let floor = -(1.0 - crate::tensor::BCE_CLAMP).ln();
        assert!((bce_loss(&exact, &gt).unwrap() - floor).abs() < 1e-12);

        let other = VoxelGrid::new_binary(4, vec![0.0; 64]).unwrap();
        assert!(bce_loss(&half, &other).is_err());
    }

    #[test]
    fn loss_decreases_after_one_adamw_step() {
        use crate::optim::{adamw_step, AdamWConfig, AdamWState};
        let mut model = VoltModel::new(tiny_config(), 21).unwrap();
        let mut rng = crate::rng::stream(22, "test/one-step");
        let views = random_views(&mut rng, 3, 6);
        let gt = random_binary_grid(&mut rng, 4);
        let (loss0, grads, _) = model.loss_and_grads(&views, &gt).unwrap();
        let mut state = AdamWState::new(AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        adamw_step(&mut model.params, &grads, &mut state).unwrap();
        let loss1 = model.loss(&views, &gt).unwrap();
        assert!(loss1 < loss0, "{loss1} !< {loss0}");
    }

    #[test]
    fn micro_config_passes_full_grad_check() {
        let config = ModelConfig::micro();
        let model = VoltModel::new(config.clone(), 23).unwrap();
        let mut rng = crate::rng::stream(24, "test/micro-gradcheck");
        let views = random_views(&mut rng, 2, config.d);
        let gt = random_binary_grid(&mut rng, config.g);
        let report = full_grad_check(&model, &views, &gt, 1e-5).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn positional_encoding_is_frozen_and_padded() {
        let config = tiny_config();
        let model = VoltModel::new(config.clone(), 25).unwrap();
        let epos = model.positional_encodings();
        assert_eq!(epos.shape(), &[8, 6]);
        assert!(!model.params.get("epos").unwrap().trainable);
        // d = 6 → per-axis width 2, no padding; token 0 sits at the origin:
        // sin(0) = 0, cos(0) = 1 for every axis.
        assert_eq!(&epos.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    proptest! {
        /// Voxel ↔ (token, offset) is a bijection.
        #[test]
        fn stitching_is_a_bijection(gi in 1usize..4, si in 1usize..3) {
            let s = si;
            let g = s * gi;
            let config = ModelConfig { g, s, ..ModelConfig::micro() };
            let n = config.n_tokens();
            let logits = config.token_logits();
            // Give every (token, offset) a unique value.
            let probs = Tensor::new(
                vec![n, logits],
                (0..n * logits).map(|i| i as f64 / (n * logits) as f64).collect(),
            ).unwrap();
            let grid = stitch_to_grid(&probs, &config).unwrap();
            // Every voxel written exactly once, and the inverse recovers rows.
            let mut seen: Vec<f64> = grid.values().to_vec();
            seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (i, v) in seen.iter().enumerate() {
                prop_assert!((v - i as f64 / (n * logits) as f64).abs() < 1e-15);
            }
            let back = grid_to_token_rows(&grid, &config).unwrap();
            prop_assert_eq!(back.data(), probs.data());
        }
    }
}
