//! Interleaved multi-task training: every iteration runs one MOS batch and
//! one room-acoustics batch through the model, sums the weighted losses and
//! takes a single Adam step. Early stopping watches validation MOS MSE.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustics::AcousticLabels;
use crate::audio::{load_wav, resample, MODEL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::frontend::{Frontend, FrontendConfig, SegmentTensor};
use crate::model::{Mosra, NormStats, SegmentBatch, Task};
use crate::synth::{derive_seed, DatasetManifest, Role};
use crate::tensor::{Adam, Graph, NodeId, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mos: f64,
    /// Weight of the summed acoustic losses; zero gives MOS-only training.
    pub acoustic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mos: 2.0, acoustic: 0.2 }
    }
}

impl LossWeights {
    pub fn mos_only() -> Self {
        Self {
            acoustic: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mos > 0.0) || !(self.acoustic >= 0.0) || !self.acoustic.is_finite() || !self.mos.is_finite() {
            return Err(Error::Invalid(format!(
                "loss weights must satisfy mos > 0 and acoustic >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 32,
            patience: 15,
            max_epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 || !(self.lr > 0.0) {
            return Err(Error::Invalid(format!(
                "patience, batch_size, max_epochs and lr must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// A featurised utterance with whatever labels its manifest row carries.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub segments: SegmentTensor,
    pub mos: Option<f64>,
    pub labels: Option<AcousticLabels>,
}

/// Loads and featurises every row of `role`, using up to `threads` workers.
/// Output order follows the manifest.
pub fn load_examples(
    manifest: &DatasetManifest,
    role: Option<Role>,
    frontend: &FrontendConfig,
    threads: usize,
) -> Result<Vec<Example>> {
    let rows: Vec<_> = manifest.rows.iter().filter(|r| role.is_none_or(|ro| r.role == ro)).collect();
    let fe = Frontend::new(frontend)?;
    let load = |row: &crate::synth::ManifestRow| -> Result<Example> {
        let path = manifest.resolve(row);
        let mut audio = load_wav(&path)?;
        if audio.sample_rate_hz != MODEL_SAMPLE_RATE {
            audio = resample(&audio, MODEL_SAMPLE_RATE)?;
        }
        Ok(Example {
            segments: fe.featurize(&audio)?,
            mos: row.mos,
            labels: row.acoustic_labels(),
        })
    };
    let threads = threads.clamp(1, rows.len().max(1));
    let per = rows.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<Example>>> = std::thread::scope(|s| {
        let handles: Vec<_> = rows
            .chunks(per)
            .map(|chunk| s.spawn(|| chunk.iter().map(|r| load(r)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("featurisation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(rows.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Mean and population standard deviation of each acoustic label.
pub fn compute_norm_stats<'a>(labels: impl IntoIterator<Item = &'a AcousticLabels>) -> Result<NormStats> {
    let values: Vec<[f64; 5]> = labels
        .into_iter()
        .map(|l| Task::ACOUSTIC.map(|t| t.label(l).unwrap()))
        .collect();
    if values.is_empty() {
        return Err(Error::Empty("no acoustic labels for normalisation".into()));
    }
    let n = values.len() as f64;
    let mut stats = NormStats::default();
    for (i, task) in Task::ACOUSTIC.iter().enumerate() {
        let mean = values.iter().map(|v| v[i]).sum::<f64>() / n;
        let var = values.iter().map(|v| (v[i] - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::Degenerate(format!(
                "label '{}' is constant over the training split",
                task.name()
            )));
        }
        stats.mean[i] = mean;
        stats.std[i] = var.sqrt();
    }
    Ok(stats)
}

/// `λ_mos·MSE_mos + λ_acoustic·Σ MSE_task` as a graph node.
///
/// `acoustic` holds `(prediction, normalised target)` pairs and is ignored
/// when the acoustic weight is zero.
pub fn compute_loss<T: Scalar>(
    g: &mut Graph<T>,
    mos: (NodeId, NodeId),
    acoustic: &[(NodeId, NodeId)],
    w: &LossWeights,
) -> Result<NodeId> {
    let m = g.mse(mos.0, mos.1)?;
    let mut total = g.scale(m, w.mos);
    if w.acoustic > 0.0 {
        let mut sum = None;
        for &(p, t) in acoustic {
            let l = g.mse(p, t)?;
            sum = Some(match sum {
                None => l,
                Some(s) => g.add(s, l)?,
            });
        }
        if let Some(s) = sum {
            let s = g.scale(s, w.acoustic);
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

fn column<T: Scalar>(values: impl Iterator<Item = f64>) -> Tensor<T> {
    let data: Vec<T> = values.map(T::from_f64).collect();
    Tensor {
        shape: vec![data.len(), 1],
        data,
    }
}

/// Builds the training loss of one interleaved iteration on `g`.
pub fn iteration_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Mosra<T>,
    mos_batch: &[&Example],
    ra_batch: &[&Example],
    w: &LossWeights,
) -> Result<NodeId> {
    if mos_batch.is_empty() {
        return Err(Error::Empty("empty MOS batch".into()));
    }
    let batch = SegmentBatch::from_tensors(mos_batch.iter().map(|e| &e.segments));
    let out = model.forward(g, &batch, &[Task::Mos])?[0];
    let mos = mos_batch
        .iter()
        .map(|e| e.mos.ok_or_else(|| Error::Invalid("MOS example without a MOS label".into())))
        .collect::<Result<Vec<f64>>>()?;
    let target = g.input(column(mos.into_iter()));
    let mut acoustic = Vec::new();
    if w.acoustic > 0.0 {
        if ra_batch.is_empty() {
            return Err(Error::Empty("empty room-acoustics batch".into()));
        }
        let labels = ra_batch
            .iter()
            .map(|e| e.labels.ok_or_else(|| Error::Invalid("acoustics example without labels".into())))
            .collect::<Result<Vec<_>>>()?;
        let batch = SegmentBatch::from_tensors(ra_batch.iter().map(|e| &e.segments));
        let outs = model.forward(g, &batch, &Task::ACOUSTIC)?;
        for (task, pred) in Task::ACOUSTIC.into_iter().zip(outs) {
            let t = column(labels.iter().map(|l| model.norm().normalize(task, task.label(l).unwrap())));
            acoustic.push((pred, g.input(t)));
        }
    }
    compute_loss(g, (out, target), &acoustic, w)
}

/// Epoch-end bookkeeping for early stopping on a minimised metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records `metric` for `epoch`; returns whether it is a new best.
    pub fn update(&mut self, epoch: usize, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// Yields batches from a pool forever, reshuffling after each pass.
#[derive(Debug)]
pub struct CyclingLoader {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclingLoader {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("room-acoustics loader has no examples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self { order, pos: 0, rng })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean combined loss over the epoch's iterations.
    pub train_loss: f64,
    pub val_mos_mse: f64,
    pub improved: bool,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_mos_mse,improved";

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        s.push_str(&format!(
            "{},{:.8},{:.8},{}\n",
            r.epoch, r.train_loss, r.val_mos_mse, r.improved as u8
        ));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Eval-mode outputs of `tasks` for each example, acoustic values normalised.
pub fn batch_outputs(model: &Mosra<f32>, examples: &[&Example], tasks: &[Task]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(CHUNK) {
        let batch = SegmentBatch::from_tensors(chunk.iter().map(|e| &e.segments));
        let mut g = Graph::new(model.params(), false, 0);
        let nodes = model.forward(&mut g, &batch, tasks)?;
        for i in 0..chunk.len() {
            out.push(nodes.iter().map(|&n| g.value(n)[i] as f64).collect());
        }
    }
    Ok(out)
}

pub fn mos_mse(model: &Mosra<f32>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("no validation examples".into()));
    }
    let refs: Vec<&Example> = examples.iter().collect();
    let preds = batch_outputs(model, &refs, &[Task::Mos])?;
    let mut sum = 0.0;
    for (p, e) in preds.iter().zip(examples) {
        let mos = e.mos.ok_or_else(|| Error::Invalid("validation example without MOS".into()))?;
        sum += (p[0] - mos).powi(2);
    }
    Ok(sum / examples.len() as f64)
}

/// Owns the model and optimiser for step-wise training.
pub struct Trainer<'d> {
    pub model: Mosra<f32>,
    adam: Adam<f32>,
    mos: &'d [Example],
    acoustics: &'d [Example],
    ra_loader: Option<CyclingLoader>,
    cfg: TrainConfig,
    weights: LossWeights,
    iteration: u64,
    epoch: usize,
}

impl<'d> Trainer<'d> {
    /// Normalisation statistics come from `acoustics` when it is non-empty.
    pub fn new(
        mut model: Mosra<f32>,
        mos: &'d [Example],
        acoustics: &'d [Example],
        cfg: &TrainConfig,
        weights: &LossWeights,
    ) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        if mos.is_empty() {
            return Err(Error::Empty("MOS training set is empty".into()));
        }
        if !acoustics.is_empty() {
            let labels = acoustics
                .iter()
                .map(|e| e.labels.as_ref().ok_or_else(|| Error::Invalid("acoustics example without labels".into())))
                .collect::<Result<Vec<_>>>()?;
            model.set_norm(compute_norm_stats(labels)?);
        }
        let ra_loader = if weights.acoustic > 0.0 {
            Some(CyclingLoader::new(acoustics.len(), derive_seed(cfg.seed, 0x5241))?)
        } else {
            None
        };
        Ok(Self {
            model,
            adam: Adam::new(cfg.lr),
            mos,
            acoustics,
            ra_loader,
            cfg: cfg.clone(),
            weights: *weights,
            iteration: 0,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One iteration on the given MOS and RA example indices; returns the loss.
    pub fn step(&mut self, mos_idx: &[usize], ra_idx: &[usize]) -> Result<f64> {
        let mos: Vec<&Example> = mos_idx.iter().map(|&i| &self.mos[i]).collect();
        let ra: Vec<&Example> = ra_idx.iter().map(|&i| &self.acoustics[i]).collect();
        let seed = derive_seed(self.cfg.seed, 1_000_000 + self.iteration);
        let (loss, grads, stats) = {
            let mut g = Graph::new(self.model.params(), true, seed);
            let loss = iteration_loss(&mut g, &self.model, &mos, &ra, &self.weights)?;
            let grads = g.backward(loss)?;
            (g.value(loss)[0] as f64, grads, g.take_buffer_updates())
        };
        if !loss.is_finite() {
            return Err(Error::Invalid(format!("training diverged: loss {loss} at iteration {}", self.iteration)));
        }
        self.adam.step(self.model.params_mut(), &grads);
        for s in &stats {
            s.apply(self.model.params_mut());
        }
        self.iteration += 1;
        Ok(loss)
    }

    /// One pass over the MOS set, `⌈|mos| / batch⌉` iterations; returns the mean loss.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, self.epoch as u64));
        let mut order: Vec<usize> = (0..self.mos.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let ra = match &mut self.ra_loader {
                Some(l) => l.next_batch(self.cfg.batch_size),
                None => Vec::new(),
            };
            total += self.step(chunk, &ra)?;
            n += 1;
        }
        self.epoch += 1;
        Ok(total / n as f64)
    }
}

/// What to do after an epoch, as decided by a [`fit_with`] observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Snapshot with the lowest validation MOS MSE.
    pub model: Mosra<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub fn fit(
    model: Mosra<f32>,
    mos: &[Example],
    acoustics: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<FitResult> {
    fit_with(model, mos, acoustics, val, cfg, weights, |_, _| Control::Continue)
}

/// [`fit`] with an observer called after every epoch with the current model.
pub fn fit_with(
    model: Mosra<f32>,
    mos: &[Example],
    acoustics: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut observe: impl FnMut(&EpochRecord, &Mosra<f32>) -> Control,
) -> Result<FitResult> {
    let mut trainer = Trainer::new(model, mos, acoustics, cfg, weights)?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = trainer.model.clone();
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let train_loss = trainer.train_epoch()?;
        let val_mos_mse = mos_mse(&trainer.model, val)?;
        let improved = stopper.update(epoch, val_mos_mse);
        if improved {
            best = trainer.model.clone();
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_mos_mse,
            improved,
        };
        let control = observe(&rec, &trainer.model);
        history.push(rec);
        if stopper.should_stop() || control == Control::Stop {
            break;
        }
    }
    Ok(FitResult {
        model: best,
        history,
        best_epoch: stopper.best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_semantics() {
        let mut s = EarlyStopping::new(15);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            s.update(epoch, epoch as f64);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(16));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn cycling_loader_covers_pool_each_pass() {
        let mut l = CyclingLoader::new(5, 1).unwrap();
        let mut a = l.next_batch(5);
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert_eq!(l.next_batch(12).len(), 12);
    }

    #[test]
    fn constant_label_rejected() {
        let l = AcousticLabels {
            snr_db: 10.0,
            sti: 0.5,
            t60_s: 0.5,
            drr_db: 3.0,
            c50_db: 4.0,
        };
        assert!(compute_norm_stats([&l, &l]).is_err());
    }
}
