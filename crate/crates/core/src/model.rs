//! Stream encoders, fusion heads and the classification head.
//!
//! Each active stream runs conv3d/relu blocks, global average pooling and a
//! linear layer to an n-dimensional encoding. Encodings are fused by
//! averaging, element-wise multiplication or convolutional fusion, and a
//! final linear layer produces the unified embedding. A separate linear head
//! maps the embedding to class logits; its weight rows are the per-class
//! filters targeted by the MaxNorm constraint.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Snippet;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    Avg,
    Elem,
    Conv,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoding_dim: usize,
    /// Defaults to `encoding_dim` when absent.
    pub embedding_dim: Option<usize>,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub fusion_method: FusionMethod,
    pub conv_fusion_out_channels: usize,
    pub num_classes: usize,
    pub stream_channels: Vec<usize>,
    /// Which of the three streams feed the fusion head.
    pub active_streams: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoding_dim: 128,
            embedding_dim: None,
            conv_channels: vec![8, 16],
            kernel: 3,
            fusion_method: FusionMethod::Conv,
            conv_fusion_out_channels: 8,
            num_classes: 9,
            stream_channels: vec![3, 2, 3],
            active_streams: vec![0, 1, 2],
        }
    }
}

impl ModelConfig {
    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim.unwrap_or(self.encoding_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoding_dim == 0 || self.embedding_dim() == 0 {
            return Err(Error::Config("encoding_dim must be >= 1".into()));
        }
        if self.conv_channels.is_empty() {
            return Err(Error::Config("need at least one conv layer".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.active_streams.is_empty()
            || self
                .active_streams
                .iter()
                .any(|&s| s >= self.stream_channels.len())
        {
            return Err(Error::Config("active_streams out of range".into()));
        }
        let mut sorted = self.active_streams.clone();
        sorted.dedup();
        if sorted.len() != self.active_streams.len() {
            return Err(Error::Config("active_streams contains duplicates".into()));
        }
        Ok(())
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Glorot-uniform weights, zero biases; draw order is fixed so the result is
/// fully determined by the seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let k = cfg.kernel;
    for &s in &cfg.active_streams {
        let mut cin = cfg.stream_channels[s];
        for (l, &cout) in cfg.conv_channels.iter().enumerate() {
            let shape = [cout, cin, k, k, k];
            let w = uniform_init(&mut rng, &shape, cin * k * k * k, cout * k * k * k);
            store.insert(&format!("enc{s}.conv{l}.weight"), w)?;
            store.insert(&format!("enc{s}.conv{l}.bias"), Tensor::zeros(&[cout]))?;
            cin = cout;
        }
        let n = cfg.encoding_dim;
        let w = uniform_init(&mut rng, &[n, cin], cin, n);
        store.insert(&format!("enc{s}.fc.weight"), w)?;
        store.insert(&format!("enc{s}.fc.bias"), Tensor::zeros(&[n]))?;
    }
    let n = cfg.encoding_dim;
    let emb = cfg.embedding_dim();
    let fc_in = match cfg.fusion_method {
        FusionMethod::Avg | FusionMethod::Elem => n,
        FusionMethod::Conv => {
            let f = cfg.conv_fusion_out_channels;
            let s = cfg.active_streams.len();
            let w = uniform_init(&mut rng, &[f, 1, 3, 1, 3], 9, f * 9);
            store.insert("fusion.conv.weight", w)?;
            store.insert("fusion.conv.bias", Tensor::zeros(&[f]))?;
            f * s * n
        }
    };
    let w = uniform_init(&mut rng, &[emb, fc_in], fc_in, emb);
    store.insert("fusion.fc.weight", w)?;
    store.insert("fusion.fc.bias", Tensor::zeros(&[emb]))?;
    let w = uniform_init(&mut rng, &[cfg.num_classes, emb], emb, cfg.num_classes);
    store.insert("head.weight", w)?;
    store.insert("head.bias", Tensor::zeros(&[cfg.num_classes]))?;
    Ok(store)
}

/// Graph plus a per-graph cache of parameter leaf nodes, so each parameter
/// appears as a single leaf no matter how many samples reference it.
pub struct ModelGraph {
    pub graph: Graph,
    param_nodes: HashMap<String, NodeId>,
}

impl ModelGraph {
    pub fn new() -> Self {
        ModelGraph {
            graph: Graph::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let id = self.graph.param(store, name)?;
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }
}

impl Default for ModelGraph {
    fn default() -> Self {
        Self::new()
    }
}

fn linear(
    mg: &mut ModelGraph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = mg.param(store, &format!("{prefix}.weight"))?;
    let b = mg.param(store, &format!("{prefix}.bias"))?;
    let y = mg.graph.matmul(w, x)?;
    mg.graph.add(y, b)
}

/// conv3d/relu stack, global average pooling and the per-stream linear layer.
pub fn encode_stream(
    mg: &mut ModelGraph,
    store: &ParamStore,
    cfg: &ModelConfig,
    stream: usize,
    x: NodeId,
) -> Result<NodeId> {
    let mut h = x;
    for l in 0..cfg.conv_channels.len() {
        let w = mg.param(store, &format!("enc{stream}.conv{l}.weight"))?;
        let b = mg.param(store, &format!("enc{stream}.conv{l}.bias"))?;
        h = mg.graph.conv3d(h, w, b)?;
        h = mg.graph.relu(h);
    }
    h = mg.graph.global_avg_pool(h)?;
    linear(mg, store, &format!("enc{stream}.fc"), h)
}

/// Fuse per-stream encodings into the unified embedding.
pub fn fuse(
    mg: &mut ModelGraph,
    store: &ParamStore,
    cfg: &ModelConfig,
    encodings: &[NodeId],
) -> Result<NodeId> {
    if encodings.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            detail: "no encodings".into(),
        });
    }
    let n = cfg.encoding_dim;
    for &e in encodings {
        if mg.graph.value(e).shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                detail: format!("encoding shape {:?}, expected [{n}]", mg.graph.value(e).shape()),
            });
        }
    }
    match cfg.fusion_method {
        FusionMethod::Avg => {
            let mut acc = encodings[0];
            for &e in &encodings[1..] {
                acc = mg.graph.add(acc, e)?;
            }
            let mean = mg.graph.scalar_mul(1.0 / encodings.len() as f64, acc);
            linear(mg, store, "fusion.fc", mean)
        }
        FusionMethod::Elem => {
            let mut prod = encodings[0];
            for &e in &encodings[1..] {
                prod = mg.graph.mul(prod, e)?;
            }
            if mg.graph.value(prod).data().iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroProductVector);
            }
            let normed = mg.graph.l2_normalize(prod)?;
            let out = linear(mg, store, "fusion.fc", normed)?;
            // Unit-norm embedding contract for elem fusion.
            mg.graph.l2_normalize(out)
        }
        FusionMethod::Conv => {
            let s = encodings.len();
            let stacked = mg.graph.concat(encodings)?;
            let vol = mg.graph.reshape(stacked, &[1, s, 1, n])?;
            let w = mg.param(store, "fusion.conv.weight")?;
            let b = mg.param(store, "fusion.conv.bias")?;
            let conv = mg.graph.conv3d(vol, w, b)?;
            let act = mg.graph.relu(conv);
            let f = cfg.conv_fusion_out_channels;
            let flat = mg.graph.reshape(act, &[f * s * n])?;
            linear(mg, store, "fusion.fc", flat)
        }
    }
}

/// Linear classification head; its weight matrix is the MaxNorm target.
pub fn classify(mg: &mut ModelGraph, store: &ParamStore, embedding: NodeId) -> Result<NodeId> {
    linear(mg, store, "head", embedding)
}

/// Full forward pass for one snippet: (embedding node, logits node).
pub fn forward_snippet(
    mg: &mut ModelGraph,
    store: &ParamStore,
    cfg: &ModelConfig,
    snippet: &Snippet,
) -> Result<(NodeId, NodeId)> {
    let mut encodings = Vec::with_capacity(cfg.active_streams.len());
    for &s in &cfg.active_streams {
        let x = mg.graph.constant(snippet.streams[s].clone());
        encodings.push(encode_stream(mg, store, cfg, s, x)?);
    }
    let emb = fuse(mg, store, cfg, &encodings)?;
    let logits = classify(mg, store, emb)?;
    Ok((emb, logits))
}

/// Evaluation-path embedding of one snippet (fresh throwaway graph).
pub fn embed_snippet(
    store: &ParamStore,
    cfg: &ModelConfig,
    snippet: &Snippet,
) -> Result<Vec<f64>> {
    let mut mg = ModelGraph::new();
    let mut encodings = Vec::with_capacity(cfg.active_streams.len());
    for &s in &cfg.active_streams {
        let x = mg.graph.constant(snippet.streams[s].clone());
        encodings.push(encode_stream(&mut mg, store, cfg, s, x)?);
    }
    let emb = fuse(&mut mg, store, cfg, &encodings)?;
    Ok(mg.graph.value(emb).data().to_vec())
}

/// Evaluation-path logits of one snippet.
pub fn logits_snippet(
    store: &ParamStore,
    cfg: &ModelConfig,
    snippet: &Snippet,
) -> Result<Vec<f64>> {
    let mut mg = ModelGraph::new();
    let (_, logits) = forward_snippet(&mut mg, store, cfg, snippet)?;
    Ok(mg.graph.value(logits).data().to_vec())
}
