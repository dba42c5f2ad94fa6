//! Mini-batch training loop: PK batch sampling, hybrid loss assembly,
//! SGD updates, the weight-balancing hook, per-epoch evaluation, and
//! checkpoint persistence.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{Dataset, DatasetConfig};
use crate::error::{Error, Result};
use crate::evaluator::{build_index, knn_predict, knn_predict_excluding, report_from_confusion};
use crate::losses::{
    self, graph_class_balanced_focal, graph_cross_entropy, graph_logit_adjusted_ce,
    graph_reciprocal_triplet, graph_triplet, mine_triplets, ClassPriors, LossConfig, LossFamily,
    MiningStrategy,
};
use crate::model::{embed_snippet, forward_snippet, init_params, ModelConfig, ModelGraph};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Training hyper-parameters reported for the full-scale system. The
/// defaults below are desk-scale overrides; these constants document the
/// original values.
pub const PAPER_LR: f64 = 1e-4;
pub const PAPER_EPOCHS: usize = 100;
pub const BATCH_SIZE: usize = 32;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Classes per batch.
    pub p: usize,
    /// Samples per class per batch.
    pub k: usize,
    pub loss: LossConfig,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: BATCH_SIZE,
            lr: 1e-2,
            epochs: 50,
            p: 8,
            k: 4,
            loss: LossConfig::default(),
            train_fraction: 0.8,
            seed: 13,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p * self.k != self.batch_size {
            return Err(Error::Config(format!(
                "P*K ({}*{}) must equal batch_size {}",
                self.p, self.k, self.batch_size
            )));
        }
        if self.k < 2 {
            return Err(Error::Config("K must be >= 2".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0,1)".into()));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    pub test_top1: f64,
    pub test_cavg: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_top1,test_top1,test_cavg\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_top1, r.test_top1, r.test_cavg
            ));
        }
        out
    }
}

/// Trained model state plus the configs that produced it.
pub struct Checkpoint {
    pub epoch: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
}

/// P distinct classes uniformly at random, K samples each (with replacement
/// only when the class holds fewer than K samples).
pub fn pk_sample(
    dataset: &Dataset,
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut classes: Vec<usize> = (0..dataset.num_classes())
        .filter(|&c| dataset.class_counts[c] > 0)
        .collect();
    if classes.len() < p {
        return Err(Error::TooFewClasses {
            needed: p,
            found: classes.len(),
        });
    }
    classes.shuffle(rng);
    classes.truncate(p);
    let mut batch = Vec::with_capacity(p * k);
    for &c in &classes {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.snippets[i].label == c)
            .collect();
        if idx.len() >= k {
            idx.shuffle(rng);
            batch.extend_from_slice(&idx[..k]);
        } else {
            for _ in 0..k {
                batch.push(idx[rng.random_range(0..idx.len())]);
            }
        }
    }
    Ok(batch)
}

fn classification_term(
    mg: &mut ModelGraph,
    logits: crate::graph::NodeId,
    y: usize,
    cfg: &LossConfig,
    priors: &ClassPriors,
) -> Result<crate::graph::NodeId> {
    let g = &mut mg.graph;
    match cfg.family {
        LossFamily::TL | LossFamily::RC => graph_cross_entropy(g, logits, y),
        LossFamily::LA => graph_logit_adjusted_ce(g, logits, y, priors, cfg.tau),
        LossFamily::CB | LossFamily::WB => {
            graph_class_balanced_focal(g, logits, y, priors, cfg.beta, cfg.gamma, cfg.literal_eq5)
        }
    }
}

pub fn embed_dataset(
    params: &ParamStore,
    cfg: &ModelConfig,
    ds: &Dataset,
) -> Result<Vec<Vec<f64>>> {
    ds.snippets
        .iter()
        .map(|s| embed_snippet(params, cfg, s))
        .collect()
}

fn epoch_eval(
    params: &ParamStore,
    model_cfg: &ModelConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    eval_k: usize,
    head_classes: &[usize],
) -> Result<(f64, f64, f64)> {
    let index = build_index(params, model_cfg, train_ds)?;
    // train top-1 via leave-one-out k-NN over the gallery itself
    let mut correct = 0usize;
    for (i, (emb, label)) in index.points.iter().enumerate() {
        let pred = knn_predict_excluding(&index, emb, eval_k, Some(i))?;
        if pred == *label {
            correct += 1;
        }
    }
    let train_top1 = correct as f64 / index.len() as f64;
    let c = model_cfg.num_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    for s in &test_ds.snippets {
        let emb = embed_snippet(params, model_cfg, s)?;
        let pred = knn_predict(&index, &emb, eval_k)?;
        confusion[s.label][pred] += 1;
    }
    let report = report_from_confusion(confusion, eval_k, head_classes)?;
    Ok((train_top1, report.top1, report.c_avg))
}

/// Train on the given splits; returns the checkpoint and the per-epoch
/// history. `dataset_cfg` supplies the head/tail class split for the
/// per-epoch evaluation and is echoed into the checkpoint.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset_cfg: &DatasetConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    eval_k: usize,
) -> Result<(Checkpoint, History)> {
    let head_classes: &[usize] = &dataset_cfg.head_classes;
    model_cfg.validate()?;
    train_cfg.validate()?;
    let priors = losses::estimate_priors(&train_ds.labels(), model_cfg.num_classes)?;
    let mut params = init_params(model_cfg, train_cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let steps_per_epoch = (train_ds.len() / train_cfg.batch_size).max(1);
    let mut history = History::default();
    let mut global_step = 0usize;
    for epoch in 1..=train_cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            global_step += 1;
            let batch = pk_sample(train_ds, train_cfg.p, train_cfg.k, &mut rng)?;
            let loss = train_step(
                &mut params,
                model_cfg,
                train_cfg,
                &priors,
                train_ds,
                &batch,
                global_step,
            )?;
            loss_sum += loss;
        }
        let (train_top1, test_top1, test_cavg) = epoch_eval(
            &params,
            model_cfg,
            train_ds,
            test_ds,
            eval_k,
            head_classes,
        )?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            train_top1,
            test_top1,
            test_cavg,
        });
    }
    let ckpt = Checkpoint {
        epoch: train_cfg.epochs,
        dataset: dataset_cfg.clone(),
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        params,
    };
    Ok((ckpt, history))
}

fn train_step(
    params: &mut ParamStore,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    priors: &ClassPriors,
    train_ds: &Dataset,
    batch: &[usize],
    step: usize,
) -> Result<f64> {
    let loss_cfg = &train_cfg.loss;
    let mut mg = ModelGraph::new();
    let mut emb_nodes = Vec::with_capacity(batch.len());
    let mut cls_nodes = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &i in batch {
        let snippet = &train_ds.snippets[i];
        let (emb, logits) = forward_snippet(&mut mg, params, model_cfg, snippet)?;
        let term = classification_term(&mut mg, logits, snippet.label, loss_cfg, priors)?;
        emb_nodes.push(emb);
        cls_nodes.push(term);
        labels.push(snippet.label);
    }
    let embeddings: Vec<Vec<f64>> = emb_nodes
        .iter()
        .map(|&e| mg.graph.value(e).data().to_vec())
        .collect();
    let triplets = mine_triplets(&embeddings, &labels, MiningStrategy::BatchHard)?;
    let mut metric_nodes = Vec::with_capacity(triplets.len());
    for t in &triplets {
        let d_ap = mg
            .graph
            .euclidean_distance(emb_nodes[t.anchor], emb_nodes[t.positive])?;
        let d_an = mg
            .graph
            .euclidean_distance(emb_nodes[t.anchor], emb_nodes[t.negative])?;
        let node = match loss_cfg.family {
            LossFamily::TL => graph_triplet(&mut mg.graph, d_ap, d_an, loss_cfg.margin)?,
            _ => graph_reciprocal_triplet(&mut mg.graph, d_ap, d_an)?,
        };
        metric_nodes.push(node);
    }
    let cls_vec = mg.graph.concat(&cls_nodes)?;
    let mut cls_mean = mg.graph.mean_axis(cls_vec, 0)?;
    if matches!(loss_cfg.family, LossFamily::CB | LossFamily::WB) {
        // Renormalise the class-balanced weights to unit batch mean, as in
        // the reference implementation of the class-balanced loss. The raw
        // weights (1-beta)/(1-beta^n) are all << 1 on realistic counts, so
        // without this the CB/WB classification term is uniformly weaker
        // than plain CE and the intended head->tail rebalancing vanishes
        // under the class-balanced PK sampler.
        let mean_w: f64 = batch
            .iter()
            .map(|&i| losses::cb_weight(loss_cfg.beta, priors.counts[train_ds.snippets[i].label]))
            .sum::<f64>()
            / batch.len() as f64;
        cls_mean = mg.graph.scalar_mul(1.0 / mean_w, cls_mean);
    }
    let met_vec = mg.graph.concat(&metric_nodes)?;
    let met_mean = mg.graph.mean_axis(met_vec, 0)?;
    let weighted = mg.graph.scalar_mul(loss_cfg.lambda, met_mean);
    let total = mg.graph.add(cls_mean, weighted)?;
    let loss = mg.graph.value(total).item();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, value: loss });
    }
    mg.graph.accumulate_grads(total, params)?;
    params.sgd_step(train_cfg.lr)?;
    if loss_cfg.family == LossFamily::WB {
        losses::weight_balancing_hook(params, loss_cfg.delta)?;
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Checkpoint persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into weights.bin.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    version: u32,
    epoch: usize,
    dataset: DatasetConfig,
    model: ModelConfig,
    train: TrainConfig,
    tensors: Vec<TensorEntry>,
    /// SHA-256 of weights.bin, hex.
    checksum: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for name in ckpt.params.names() {
        let t = ckpt.params.value(name)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        epoch: ckpt.epoch,
        dataset: ckpt.dataset.clone(),
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        checksum: sha256_hex(&blob),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::MalformedManifest(e.to_string()))?;
    fs::write(dir.join("checkpoint.json"), json)?;
    fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join("checkpoint.json"))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: manifest.version,
        });
    }
    let blob = fs::read(dir.join("weights.bin"))?;
    if sha256_hex(&blob) != manifest.checksum {
        return Err(Error::CorruptBlob("weights.bin checksum mismatch".into()));
    }
    let total: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 8)
        .sum();
    if blob.len() != total {
        return Err(Error::CorruptBlob(format!(
            "weights.bin holds {} bytes, manifest expects {}",
            blob.len(),
            total
        )));
    }
    let mut params = ParamStore::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * 8;
        if end > blob.len() {
            return Err(Error::CorruptBlob(format!(
                "tensor '{}' extends past the blob",
                entry.name
            )));
        }
        let data: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.insert(&entry.name, Tensor::from_vec(entry.shape.clone(), data)?)?;
    }
    Ok(Checkpoint {
        epoch: manifest.epoch,
        dataset: manifest.dataset,
        model: manifest.model,
        train: manifest.train,
        params,
    })
}
