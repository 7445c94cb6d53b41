//! The estimator: per-segment CNN, shared transformer encoder and six
//! independent task heads (projection, encoder, attention pooling, linear).

mod config;
mod container;

pub use config::{EncoderConfig, ModelConfig};
pub use container::{read_container, write_container, Container, TensorRecord, FORMAT_VERSION, MAGIC};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustics::AcousticLabels;
use crate::audio::{resample, AudioBuffer, MODEL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::frontend::{Frontend, SegmentTensor};
use crate::tensor::{Graph, Groups, NodeId, ParamId, ParamStore, Scalar, Tensor};

/// CNN segments processed per graph at inference time.
const INFERENCE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mos,
    Snr,
    Sti,
    T60,
    Drr,
    C50,
}

impl Task {
    pub const ALL: [Task; 6] = [Task::Mos, Task::Snr, Task::Sti, Task::T60, Task::Drr, Task::C50];
    pub const ACOUSTIC: [Task; 5] = [Task::Snr, Task::Sti, Task::T60, Task::Drr, Task::C50];

    pub fn name(self) -> &'static str {
        match self {
            Task::Mos => "mos",
            Task::Snr => "snr",
            Task::Sti => "sti",
            Task::T60 => "t60",
            Task::Drr => "drr",
            Task::C50 => "c50",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Position within [`Task::ACOUSTIC`], `None` for MOS.
    pub fn acoustic_index(self) -> Option<usize> {
        self.index().checked_sub(1)
    }

    pub fn label(self, labels: &AcousticLabels) -> Option<f64> {
        match self {
            Task::Mos => None,
            Task::Snr => Some(labels.snr_db),
            Task::Sti => Some(labels.sti),
            Task::T60 => Some(labels.t60_s),
            Task::Drr => Some(labels.drr_db),
            Task::C50 => Some(labels.c50_db),
        }
    }
}

/// Per-task mean and standard deviation of the acoustic labels, in
/// [`Task::ACOUSTIC`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 5],
            std: [1.0; 5],
        }
    }
}

impl NormStats {
    pub fn normalize(&self, task: Task, value: f64) -> f64 {
        match task.acoustic_index() {
            Some(i) => (value - self.mean[i]) / self.std[i],
            None => value,
        }
    }

    pub fn denormalize(&self, task: Task, value: f64) -> f64 {
        match task.acoustic_index() {
            Some(i) => value * self.std[i] + self.mean[i],
            None => value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mos: f64,
    pub snr_db: f64,
    pub sti: f64,
    pub t60_s: f64,
    pub drr_db: f64,
    pub c50_db: f64,
}

impl Prediction {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Mos => self.mos,
            Task::Snr => self.snr_db,
            Task::Sti => self.sti,
            Task::T60 => self.t60_s,
            Task::Drr => self.drr_db,
            Task::C50 => self.c50_db,
        }
    }

    fn from_outputs(out: [f64; 6], norm: &NormStats) -> Self {
        let v = |t: Task| norm.denormalize(t, out[t.index()]);
        Self {
            mos: out[0],
            snr_db: v(Task::Snr),
            sti: v(Task::Sti),
            t60_s: v(Task::T60),
            drr_db: v(Task::Drr),
            c50_db: v(Task::C50),
        }
    }
}

/// Segments of several utterances stacked along the first axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch<T> {
    /// `n_segments × n_mels × width`, row-major.
    pub data: Vec<T>,
    /// Segments per utterance.
    pub lengths: Vec<usize>,
}

impl<T: Scalar> SegmentBatch<T> {
    pub fn from_tensors<'a>(items: impl IntoIterator<Item = &'a SegmentTensor>) -> Self {
        let mut data = Vec::new();
        let mut lengths = Vec::new();
        for s in items {
            data.extend(s.values.iter().map(|&v| T::from_f64(v as f64)));
            lengths.push(s.n_segments);
        }
        Self { data, lengths }
    }

    pub fn n_segments(&self) -> usize {
        self.lengths.iter().sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: Norm,
    ff1: Linear,
    ff2: Linear,
    ln2: Norm,
}

#[derive(Debug, Clone)]
struct Head {
    proj: Linear,
    layers: Vec<EncoderLayer>,
    score1: Linear,
    score2: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    input_bn: BatchNorm,
    convs: Vec<(ParamId, BatchNorm)>,
    fc: Linear,
    shared: Vec<EncoderLayer>,
    heads: Vec<Head>,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.rng.gen_range(-bound..bound))).collect();
        self.store.add(name, Tensor { shape, data }, true)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f64, trainable: bool) -> ParamId {
        self.store.add(name, Tensor::filled(shape, T::from_f64(value)), trainable)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let bound = 1.0 / (din as f64).sqrt();
        Linear {
            w: self.uniform(format!("{name}.weight"), vec![din, dout], bound),
            b: self.uniform(format!("{name}.bias"), vec![dout], bound),
        }
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.constant(format!("{name}.gamma"), vec![d], 1.0, true),
            beta: self.constant(format!("{name}.beta"), vec![d], 0.0, true),
        }
    }

    fn batch_norm(&mut self, name: &str, c: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.constant(format!("{name}.gamma"), vec![c], 1.0, true),
            beta: self.constant(format!("{name}.beta"), vec![c], 0.0, true),
            mean: self.constant(format!("{name}.running_mean"), vec![c], 0.0, false),
            var: self.constant(format!("{name}.running_var"), vec![c], 1.0, false),
        }
    }

    fn encoder(&mut self, name: &str, cfg: &EncoderConfig) -> Vec<EncoderLayer> {
        let d = cfg.d_model;
        (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    q: self.linear(&format!("{p}.attn.q"), d, d),
                    k: self.linear(&format!("{p}.attn.k"), d, d),
                    v: self.linear(&format!("{p}.attn.v"), d, d),
                    o: self.linear(&format!("{p}.attn.out"), d, d),
                    ln1: self.layer_norm(&format!("{p}.norm1"), d),
                    ff1: self.linear(&format!("{p}.ff1"), d, cfg.d_ff),
                    ff2: self.linear(&format!("{p}.ff2"), cfg.d_ff, d),
                    ln2: self.layer_norm(&format!("{p}.norm2"), d),
                }
            })
            .collect()
    }
}

/// Output node of one head together with its attention-pooling weights.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `(n_utterances, 1)`
    pub value: NodeId,
    /// `(n_segments, 1)`, summing to one within each utterance.
    pub pool_weights: NodeId,
}

#[derive(Debug, Clone)]
pub struct Mosra<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    norm: NormStats,
    layout: Layout,
}

/// Sinusoidal position encoding, restarting at position 0 for each group.
pub fn positional_encoding<T: Scalar>(groups: &Groups, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(groups.total() * d);
    for len in groups.lengths() {
        for pos in 0..len {
            for i in 0..d {
                let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
                let a = pos as f64 * freq;
                data.push(T::from_f64(if i % 2 == 0 { a.sin() } else { a.cos() }));
            }
        }
    }
    Tensor {
        shape: vec![groups.total(), d],
        data,
    }
}

impl<T: Scalar> Mosra<T> {
    /// Randomly initialised model; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let input_bn = b.batch_norm("cnn.input_norm", 1);
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &cout) in config.cnn_channels.iter().enumerate() {
            let bound = 1.0 / ((cin * 9) as f64).sqrt();
            let w = b.uniform(format!("cnn.block{i}.conv.weight"), vec![cout, cin, 3, 3], bound);
            let bn = b.batch_norm(&format!("cnn.block{i}.norm"), cout);
            convs.push((w, bn));
            cin = cout;
        }
        let fc = b.linear("cnn.fc", cin, config.feature_dim);
        let shared = b.encoder("shared", &config.shared);
        let dh = config.head.d_model;
        let heads = Task::ALL
            .iter()
            .map(|t| {
                let p = format!("head.{}", t.name());
                Head {
                    proj: b.linear(&format!("{p}.proj"), config.feature_dim, dh),
                    layers: b.encoder(&format!("{p}.encoder"), &config.head),
                    score1: b.linear(&format!("{p}.pool.score1"), dh, config.pool_hidden),
                    score2: b.linear(&format!("{p}.pool.score2"), config.pool_hidden, 1),
                    out: b.linear(&format!("{p}.out"), dh, 1),
                }
            })
            .collect();
        let layout = Layout {
            input_bn,
            convs,
            fc,
            shared,
            heads,
        };
        Ok(Self {
            config,
            params,
            norm: NormStats::default(),
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: NormStats) {
        self.norm = norm;
    }

    /// Number of trainable scalars; batch-norm running statistics excluded.
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Parameter ids belonging to one task head.
    pub fn head_params(&self, task: Task) -> Vec<ParamId> {
        let prefix = format!("head.{}.", task.name());
        self.params
            .ids()
            .filter(|&id| self.params.entry(id).name.starts_with(&prefix))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Mosra<U> {
        Mosra {
            config: self.config.clone(),
            params: self.params.cast(),
            norm: self.norm,
            layout: self.layout.clone(),
        }
    }

    fn lin(g: &mut Graph<T>, x: NodeId, l: &Linear) -> Result<NodeId> {
        let (w, b) = (g.param(l.w), g.param(l.b));
        g.linear(x, w, Some(b))
    }

    fn ln(&self, g: &mut Graph<T>, x: NodeId, n: &Norm) -> Result<NodeId> {
        let (gamma, beta) = (g.param(n.gamma), g.param(n.beta));
        g.layer_norm(x, gamma, beta, self.config.ln_eps)
    }

    fn bn(&self, g: &mut Graph<T>, x: NodeId, n: &BatchNorm) -> Result<NodeId> {
        let (gamma, beta) = (g.param(n.gamma), g.param(n.beta));
        g.batch_norm(x, gamma, beta, n.mean, n.var, self.config.bn_momentum, self.config.bn_eps)
    }

    /// `(N, 1, n_mels, width)` segments to `(N, feature_dim)` features.
    pub fn cnn(&self, g: &mut Graph<T>, segments: NodeId) -> Result<NodeId> {
        let mut x = self.bn(g, segments, &self.layout.input_bn)?;
        for (i, (w, bn)) in self.layout.convs.iter().enumerate() {
            let w = g.param(*w);
            x = g.conv2d(x, w, None, 1, 1)?;
            x = self.bn(g, x, bn)?;
            x = g.relu(x);
            if self.config.pool_after.contains(&i) {
                x = g.max_pool2(x)?;
            }
        }
        let x = g.global_avg_pool(x)?;
        Self::lin(g, x, &self.layout.fc)
    }

    fn encoder_layer(&self, g: &mut Graph<T>, x: NodeId, l: &EncoderLayer, groups: &Groups, p: f64) -> Result<NodeId> {
        let q = Self::lin(g, x, &l.q)?;
        let k = Self::lin(g, x, &l.k)?;
        let v = Self::lin(g, x, &l.v)?;
        let a = g.grouped_attention(q, k, v, groups)?;
        let a = Self::lin(g, a, &l.o)?;
        let a = g.dropout(a, p);
        let x = g.add(x, a)?;
        let x = self.ln(g, x, &l.ln1)?;
        let f = Self::lin(g, x, &l.ff1)?;
        let f = g.relu(f);
        let f = g.dropout(f, p);
        let f = Self::lin(g, f, &l.ff2)?;
        let f = g.dropout(f, p);
        let x = g.add(x, f)?;
        self.ln(g, x, &l.ln2)
    }

    /// Adds position encodings and runs the shared encoder over each utterance.
    pub fn shared(&self, g: &mut Graph<T>, features: NodeId, groups: &Groups) -> Result<NodeId> {
        let pe = g.input(positional_encoding(groups, self.config.feature_dim));
        let mut x = g.add(features, pe)?;
        for l in &self.layout.shared {
            x = self.encoder_layer(g, x, l, groups, self.config.shared.dropout)?;
        }
        Ok(x)
    }

    pub fn head(&self, g: &mut Graph<T>, context: NodeId, groups: &Groups, task: Task) -> Result<HeadOutput> {
        let h = &self.layout.heads[task.index()];
        let mut x = Self::lin(g, context, &h.proj)?;
        for l in &h.layers {
            x = self.encoder_layer(g, x, l, groups, self.config.head.dropout)?;
        }
        let s = Self::lin(g, x, &h.score1)?;
        let s = g.relu(s);
        let s = Self::lin(g, s, &h.score2)?;
        let w = g.group_softmax(s, groups)?;
        let pooled = g.group_weighted_sum(x, w, groups)?;
        let value = Self::lin(g, pooled, &h.out)?;
        Ok(HeadOutput { value, pool_weights: w })
    }

    fn segments_input(&self, data: Vec<T>) -> Result<Tensor<T>> {
        let (m, w) = (self.config.frontend.n_mels, self.config.frontend.segment_width_frames);
        let n = data.len() / (m * w).max(1);
        Tensor::new(vec![n, 1, m, w], data)
    }

    /// Full forward pass; returns one `(n_utterances, 1)` node per requested task.
    pub fn forward(&self, g: &mut Graph<T>, batch: &SegmentBatch<T>, tasks: &[Task]) -> Result<Vec<NodeId>> {
        let groups = Groups::from_lengths(&batch.lengths)?;
        let x = g.input(self.segments_input(batch.data.clone())?);
        if g.shape(x)[0] != groups.total() {
            return Err(Error::shape("segment batch", g.shape(x), &[groups.total()]));
        }
        let feats = self.cnn(g, x)?;
        let ctx = self.shared(g, feats, &groups)?;
        tasks.iter().map(|&t| Ok(self.head(g, ctx, &groups, t)?.value)).collect()
    }

    /// Eval-mode CNN features `(n_segments, feature_dim)`, computed in chunks.
    pub fn segment_features(&self, segments: &SegmentTensor) -> Result<Tensor<T>> {
        let per = segments.n_mels * segments.width;
        if segments.n_mels != self.config.frontend.n_mels || segments.width != self.config.frontend.segment_width_frames {
            return Err(Error::shape(
                "segments",
                &[segments.n_mels, segments.width],
                &[self.config.frontend.n_mels, self.config.frontend.segment_width_frames],
            ));
        }
        let d = self.config.feature_dim;
        let mut out = Vec::with_capacity(segments.n_segments * d);
        let mut g = Graph::new(&self.params, false, 0);
        for chunk in segments.values.chunks(INFERENCE_CHUNK * per) {
            g.clear();
            let data = chunk.iter().map(|&v| T::from_f64(v as f64)).collect();
            let x = g.input(self.segments_input(data)?);
            let f = self.cnn(&mut g, x)?;
            out.extend_from_slice(g.value(f));
        }
        Tensor::new(vec![segments.n_segments, d], out)
    }

    /// Eval-mode outputs in [`Task::ALL`] order; acoustic values still normalised.
    pub fn raw_outputs(&self, segments: &SegmentTensor) -> Result<[f64; 6]> {
        if segments.n_segments == 0 {
            return Err(Error::Empty("no segments".into()));
        }
        let feats = self.segment_features(segments)?;
        let groups = Groups::from_lengths(&[segments.n_segments])?;
        let mut g = Graph::new(&self.params, false, 0);
        let f = g.input(feats);
        let ctx = self.shared(&mut g, f, &groups)?;
        let mut out = [0.0; 6];
        for t in Task::ALL {
            let h = self.head(&mut g, ctx, &groups, t)?;
            out[t.index()] = g.value(h.value)[0].as_f64();
        }
        Ok(out)
    }

    pub fn predict_segments(&self, segments: &SegmentTensor) -> Result<Prediction> {
        Ok(Prediction::from_outputs(self.raw_outputs(segments)?, &self.norm))
    }

    /// Frontend, network and de-normalisation; resamples to 48 kHz if needed.
    pub fn predict(&self, audio: &AudioBuffer) -> Result<Prediction> {
        let frontend = Frontend::new(&self.config.frontend)?;
        let segments = if audio.sample_rate_hz == MODEL_SAMPLE_RATE {
            frontend.featurize(audio)?
        } else {
            frontend.featurize(&resample(audio, MODEL_SAMPLE_RATE)?)?
        };
        self.predict_segments(&segments)
    }
}

impl Mosra<f32> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let tensors: Vec<_> = self
            .params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), &e.tensor, e.trainable))
            .collect();
        let meta = ModelMeta {
            config: self.config.clone(),
            label_norm: self.norm,
        };
        write_container(path, "model", &meta, &tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = read_container(path)?;
        if c.kind != "model" {
            return Err(Error::ModelFormat(format!("expected a model file, found '{}'", c.kind)));
        }
        let meta: ModelMeta =
            serde_json::from_value(c.meta).map_err(|e| Error::ModelFormat(format!("bad metadata: {e}")))?;
        let mut model = Mosra::<f32>::new(meta.config, 0)?;
        model.norm = meta.label_norm;
        if c.tensors.len() != model.params.len() {
            return Err(Error::ModelFormat(format!(
                "file has {} tensors, configuration expects {}",
                c.tensors.len(),
                model.params.len()
            )));
        }
        let mut seen = vec![false; model.params.len()];
        for (rec, t) in c.tensors {
            let id = model
                .params
                .find(&rec.name)
                .ok_or_else(|| Error::ModelFormat(format!("unexpected tensor '{}'", rec.name)))?;
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::ModelFormat(format!("duplicate tensor '{}'", rec.name)));
            }
            let entry = model.params.entry(id);
            if entry.tensor.shape != t.shape || entry.trainable != rec.trainable {
                return Err(Error::ModelFormat(format!(
                    "tensor '{}' has shape {:?}, configuration expects {:?}",
                    rec.name, t.shape, entry.tensor.shape
                )));
            }
            *model.params.get_mut(id) = t;
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    config: ModelConfig,
    label_norm: NormStats,
}
