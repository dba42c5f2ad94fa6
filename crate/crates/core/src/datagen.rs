//! Synthetic long-tailed three-stream snippet datasets.
//!
//! Each class gets one random prototype pattern per stream; samples are the
//! prototype under a random circular temporal phase shift plus Gaussian
//! noise. Class sizes decay geometrically from the largest class down to the
//! imbalance floor.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Amplitude of the per-class prototype patterns relative to unit noise.
const PROTO_SCALE: f64 = 0.12;

pub const MANIFEST_VERSION: u32 = 1;
pub const NUM_STREAMS: usize = 3;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    /// Classes treated as "head" for the head/tail accuracy split.
    pub head_classes: Vec<usize>,
    pub snippet_len: usize,
    pub spatial: usize,
    /// Channels per stream (appearance-, flow-, pose-like).
    pub channels: [usize; NUM_STREAMS],
    pub imbalance_ratio: f64,
    /// Sample count of the largest class.
    pub max_class_samples: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 9,
            head_classes: vec![0, 1, 2],
            snippet_len: 8,
            spatial: 8,
            channels: [3, 2, 3],
            imbalance_ratio: 60.0,
            max_class_samples: 400,
            noise_sigma: 0.6,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.head_classes.iter().any(|&c| c >= self.num_classes) {
            return Err(Error::Config("head_classes outside class range".into()));
        }
        if self.imbalance_ratio < 1.0 {
            return Err(Error::Config("imbalance_ratio must be >= 1".into()));
        }
        if self.snippet_len < 1 || self.spatial < 1 {
            return Err(Error::Config("snippet_len and spatial must be >= 1".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stream channels must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    fn stream_shape(&self, m: usize) -> Vec<usize> {
        vec![
            self.channels[m],
            self.snippet_len,
            self.spatial,
            self.spatial,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snippet {
    pub streams: Vec<Tensor>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub snippets: Vec<Snippet>,
    pub class_counts: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.snippets.iter().map(|s| s.label).collect()
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let snippets: Vec<Snippet> = indices.iter().map(|&i| self.snippets[i].clone()).collect();
        let mut class_counts = vec![0; self.class_counts.len()];
        for s in &snippets {
            class_counts[s.label] += 1;
        }
        Dataset {
            snippets,
            class_counts,
            seed: self.seed,
        }
    }
}

/// Per-class sample counts: geometric decay from `max_class_samples` down to
/// the clamped floor max(ceil(N_max/r), 4), ordered by class id.
pub fn class_sizes(cfg: &DatasetConfig) -> Vec<usize> {
    let n_max = cfg.max_class_samples as f64;
    let floor = ((n_max / cfg.imbalance_ratio).ceil() as usize).max(4);
    let c = cfg.num_classes;
    (0..c)
        .map(|i| {
            let frac = i as f64 / (c - 1) as f64;
            let raw = n_max * cfg.imbalance_ratio.powf(-frac);
            (raw.round() as usize).clamp(floor, cfg.max_class_samples)
        })
        .collect()
}

/// Circular shift along the temporal axis of a [C,T,H,W] tensor.
fn phase_shift(proto: &Tensor, shift: usize) -> Tensor {
    let shape = proto.shape().to_vec();
    let (c, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut out = vec![0.0; proto.numel()];
    for ch in 0..c {
        for tt in 0..t {
            let src = (tt + shift) % t;
            let dst_off = (ch * t + tt) * plane;
            let src_off = (ch * t + src) * plane;
            out[dst_off..dst_off + plane]
                .copy_from_slice(&proto.data()[src_off..src_off + plane]);
        }
    }
    Tensor::from_vec(shape, out).unwrap()
}

/// Quantize through f32 so the in-memory dataset round-trips the 32-bit disk
/// format bit-exactly.
fn q32(v: f64) -> f64 {
    (v as f32) as f64
}

pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let counts = class_sizes(cfg);

    // One prototype per (class, stream); stream 2's prototype is drawn from
    // the same independent stream of randomness, so it carries class signal
    // of its own. Prototypes are constant over H x W and random over
    // (channel, frame): the class signal lives in the temporal profile, so a
    // per-sample phase shift stays discriminative while spatial pooling
    // averages per-voxel noise away instead of the signal.
    let mut protos: Vec<Vec<Tensor>> = Vec::with_capacity(cfg.num_classes);
    for _class in 0..cfg.num_classes {
        let mut per_stream = Vec::with_capacity(NUM_STREAMS);
        for m in 0..NUM_STREAMS {
            let shape = cfg.stream_shape(m);
            let plane = shape[2] * shape[3];
            let mut data = Vec::with_capacity(shape.iter().product());
            for _c in 0..shape[0] {
                for _t in 0..shape[1] {
                    let v = PROTO_SCALE * rng.sample::<f64, _>(StandardNormal);
                    data.extend(std::iter::repeat(v).take(plane));
                }
            }
            per_stream.push(Tensor::from_vec(shape, data).unwrap());
        }
        protos.push(per_stream);
    }

    let mut snippets = Vec::new();
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let shift = rng.random_range(0..cfg.snippet_len);
            let mut streams = Vec::with_capacity(NUM_STREAMS);
            for m in 0..NUM_STREAMS {
                let mut t = phase_shift(&protos[class][m], shift);
                for v in t.data_mut() {
                    *v = q32(*v + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal));
                }
                streams.push(t);
            }
            snippets.push(Snippet {
                streams,
                label: class,
            });
        }
    }
    Ok(Dataset {
        snippets,
        class_counts: counts,
        seed: cfg.seed,
    })
}

/// Stratified train/test split; every class keeps at least one sample on each
/// side.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..dataset.num_classes() {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.snippets[i].label == class)
            .collect();
        if idx.len() < 2 {
            return Err(Error::ClassTooSmall {
                class,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        train_idx.extend_from_slice(&idx[..n_train]);
        test_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    num_classes: usize,
    snippet_len: usize,
    height: usize,
    width: usize,
    channels: Vec<usize>,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    seed: u64,
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let first = dataset
        .snippets
        .first()
        .ok_or_else(|| Error::MalformedManifest("cannot write empty dataset".into()))?;
    let t = first.streams[0].shape()[1];
    let h = first.streams[0].shape()[2];
    let w = first.streams[0].shape()[3];
    let channels: Vec<usize> = (0..NUM_STREAMS)
        .map(|m| first.streams[m].shape()[0])
        .collect();
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        num_classes: dataset.num_classes(),
        snippet_len: t,
        height: h,
        width: w,
        channels: channels.clone(),
        labels: dataset.labels(),
        class_counts: dataset.class_counts.clone(),
        seed: dataset.seed,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::MalformedManifest(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    for m in 0..NUM_STREAMS {
        let mut bytes = Vec::new();
        for s in &dataset.snippets {
            for &v in s.streams[m].data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(dir.join(format!("stream{m}.bin")), bytes)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            expected: MANIFEST_VERSION,
            found: manifest.version,
        });
    }
    if manifest.channels.len() != NUM_STREAMS {
        return Err(Error::MalformedManifest(format!(
            "expected {} streams, manifest lists {}",
            NUM_STREAMS,
            manifest.channels.len()
        )));
    }
    let n = manifest.labels.len();
    if manifest.class_counts.len() != manifest.num_classes
        || manifest.class_counts.iter().sum::<usize>() != n
    {
        return Err(Error::MalformedManifest(
            "class_counts disagree with labels".into(),
        ));
    }
    if manifest.labels.iter().any(|&l| l >= manifest.num_classes) {
        return Err(Error::MalformedManifest("label out of range".into()));
    }
    let mut per_stream: Vec<Vec<f64>> = Vec::with_capacity(NUM_STREAMS);
    for (m, &ch) in manifest.channels.iter().enumerate() {
        let path = dir.join(format!("stream{m}.bin"));
        let bytes = fs::read(&path)?;
        let expected =
            n * ch * manifest.snippet_len * manifest.height * manifest.width * 4;
        if bytes.len() != expected {
            return Err(Error::TruncatedBlob {
                path: path.display().to_string(),
                expected,
                found: bytes.len(),
            });
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        per_stream.push(vals);
    }
    let mut snippets = Vec::with_capacity(n);
    for (i, &label) in manifest.labels.iter().enumerate() {
        let mut streams = Vec::with_capacity(NUM_STREAMS);
        for (m, &ch) in manifest.channels.iter().enumerate() {
            let vol = ch * manifest.snippet_len * manifest.height * manifest.width;
            let shape = vec![ch, manifest.snippet_len, manifest.height, manifest.width];
            let data = per_stream[m][i * vol..(i + 1) * vol].to_vec();
            streams.push(Tensor::from_vec(shape, data)?);
        }
        snippets.push(Snippet { streams, label });
    }
    Ok(Dataset {
        snippets,
        class_counts: manifest.class_counts,
        seed: manifest.seed,
    })
}
