mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mosra::audio::{load_wav, resample, MODEL_SAMPLE_RATE};
use mosra::eval::{EvalReport, TaskScores};
use mosra::frontend::Frontend;
use mosra::model::{write_container, Mosra, Prediction, Task};
use mosra::synth::{build_corpus, write_speech_dir, CorpusJob, DatasetManifest, Role};
use mosra::tensor::Tensor;
use mosra::train::{fit_with, load_examples, write_history, Control};
use serde::Serialize;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "mosra", version, about = "Joint speech-quality (MOS) and room-acoustics estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a labelled corpus of degraded speech.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for synthesis.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        n_mos: Option<usize>,
        #[arg(long)]
        n_acoustics: Option<usize>,
        /// Directory of clean speech WAVs; speech-like signals are generated when omitted.
        #[arg(long)]
        speech_dir: Option<PathBuf>,
    },
    /// Train a model on a manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Drop the room-acoustics loss (acoustic weight 0).
        #[arg(long)]
        mos_only: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        /// Per-epoch history CSV (default: <out>.history.csv).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Predict MOS and room-acoustic parameters for one file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        json: bool,
        /// Report wall-clock time and peak additional memory on stderr.
        #[arg(long)]
        bench: bool,
    },
    /// Score a model on a manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Show tensors, parameter count, configuration and label statistics.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Dump the segment tensor of a file to a tensor container.
    Featurize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            out,
            seed,
            threads,
            n_mos,
            n_acoustics,
            speech_dir,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let seed = seed.unwrap_or(cfg.train.seed);
            let speech_dir = match speech_dir.or(cfg.paths.speech_dir.clone()) {
                Some(d) => d,
                None => {
                    let d = out.join("speech");
                    write_speech_dir(&d, cfg.synth.speech_count, cfg.synth.speech_duration_s, seed)?;
                    d
                }
            };
            let job = CorpusJob {
                n_mos: n_mos.unwrap_or(cfg.synth.n_mos),
                n_acoustics: n_acoustics.unwrap_or(cfg.synth.n_acoustics),
                speech_dir,
                out_dir: out.clone(),
                seed,
                threads,
            };
            let manifest = build_corpus(&job, &cfg.synth.corpus)?;
            println!(
                "wrote {} rows ({} mos, {} acoustics) to {}",
                manifest.rows.len(),
                manifest.count(Role::Mos),
                manifest.count(Role::Acoustics),
                out.join("manifest.csv").display()
            );
            Ok(())
        }
        Command::Train {
            config,
            train,
            val,
            out,
            mos_only,
            seed,
            max_epochs,
            lr,
            batch_size,
            patience,
            history,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            if let Some(v) = max_epochs {
                cfg.train.max_epochs = v;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = patience {
                cfg.train.patience = v;
            }
            if mos_only {
                cfg.loss.acoustic = 0.0;
            }
            let train = train.or(cfg.paths.train.clone()).context("no training manifest (--train)")?;
            let val = val.or(cfg.paths.val.clone()).context("no validation manifest (--val)")?;
            let out = out.or(cfg.paths.model.clone()).context("no output path (--out)")?;
            let history = history
                .or(cfg.paths.history.clone())
                .unwrap_or_else(|| PathBuf::from(format!("{}.history.csv", out.display())));
            train_cmd(&cfg, &train, &val, &out, &history)
        }
        Command::Predict {
            model,
            audio,
            json,
            bench,
        } => predict_cmd(&model, &audio, json, bench),
        Command::Eval {
            model,
            manifest,
            report,
        } => eval_cmd(&model, &manifest, &report),
        Command::Inspect { model, json } => inspect_cmd(&model, json),
        Command::Featurize { config, audio, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let buf = resample(&load_wav(&audio)?, MODEL_SAMPLE_RATE)?;
            let seg = Frontend::new(&cfg.model.frontend)?.featurize(&buf)?;
            let t = Tensor::new(vec![seg.n_segments, seg.n_mels, seg.width], seg.values)?;
            write_container(&out, "segments", &cfg.model.frontend, &[("segments".to_string(), &t, false)])?;
            println!("{} segments of {}x{} written to {}", seg.n_segments, seg.n_mels, seg.width, out.display());
            Ok(())
        }
    }
}

fn train_cmd(cfg: &RunConfig, train: &Path, val: &Path, out: &Path, history_path: &Path) -> Result<()> {
    let train_m = DatasetManifest::read(train)?;
    let val_m = DatasetManifest::read(val)?;
    let fe = &cfg.model.frontend;
    let mos = load_examples(&train_m, Some(Role::Mos), fe, 1)?;
    let acoustics = load_examples(&train_m, Some(Role::Acoustics), fe, 1)?;
    let val_ex = load_examples(&val_m, Some(Role::Mos), fe, 1)?;
    if val_ex.is_empty() {
        bail!("validation manifest {} has no MOS rows", val.display());
    }
    eprintln!(
        "training on {} mos + {} acoustics rows, validating on {} ({} loss weights {:?})",
        mos.len(),
        acoustics.len(),
        val_ex.len(),
        if cfg.loss.acoustic == 0.0 { "mos-only" } else { "multi-task" },
        cfg.loss
    );
    let model = Mosra::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let result = fit_with(model, &mos, &acoustics, &val_ex, &cfg.train, &cfg.loss, |rec, _| {
        eprintln!(
            "epoch {:>3}  train_loss {:.5}  val_mos_mse {:.5}{}",
            rec.epoch,
            rec.train_loss,
            rec.val_mos_mse,
            if rec.improved { "  *" } else { "" }
        );
        Control::Continue
    })?;
    result.model.save(out)?;
    write_history(history_path, &result.history)?;
    println!(
        "best epoch {} of {}; model written to {}",
        result.best_epoch,
        result.history.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionJson {
    mos: f64,
    mos_raw: f64,
    snr_db: f64,
    sti: f64,
    t60_s: f64,
    drr_db: f64,
    c50_db: f64,
}

impl From<Prediction> for PredictionJson {
    fn from(p: Prediction) -> Self {
        Self {
            mos: p.mos.clamp(1.0, 5.0),
            mos_raw: p.mos,
            snr_db: p.snr_db,
            sti: p.sti,
            t60_s: p.t60_s,
            drr_db: p.drr_db,
            c50_db: p.c50_db,
        }
    }
}

fn status_kib(field: &str) -> Option<u64> {
    let s = std::fs::read_to_string("/proc/self/status").ok()?;
    s.lines()
        .find(|l| l.starts_with(field))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

fn predict_cmd(model: &Path, audio: &Path, json: bool, bench: bool) -> Result<()> {
    let rss_before = status_kib("VmRSS:");
    let start = Instant::now();
    let m = Mosra::<f32>::load(model)?;
    let buf = load_wav(audio)?;
    let p = m.predict(&buf)?;
    let elapsed = start.elapsed();
    let out = PredictionJson::from(p);
    if json {
        println!("{}", serde_json::to_string(&out)?);
    } else {
        println!("mos     {:.3}", out.mos);
        println!("snr_db  {:.2}", out.snr_db);
        println!("sti     {:.3}", out.sti);
        println!("t60_s   {:.3}", out.t60_s);
        println!("drr_db  {:.2}", out.drr_db);
        println!("c50_db  {:.2}", out.c50_db);
    }
    if bench {
        let extra = match (rss_before, status_kib("VmHWM:")) {
            (Some(b), Some(p)) => format!("{:.1}", p.saturating_sub(b) as f64 / 1024.0),
            _ => "unavailable".into(),
        };
        eprintln!(
            "bench: audio_s={:.3} wall_ms={:.1} peak_extra_mb={extra}",
            buf.duration_s(),
            elapsed.as_secs_f64() * 1000.0
        );
    }
    Ok(())
}

fn eval_cmd(model: &Path, manifest: &Path, report: &Path) -> Result<()> {
    let m = Mosra::<f32>::load(model)?;
    let man = DatasetManifest::read(manifest)?;
    let dataset = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); Task::ALL.len()];
    for row in &man.rows {
        let path = man.resolve(row);
        let p = m
            .predict(&load_wav(&path)?)
            .with_context(|| format!("predicting {}", path.display()))?;
        if let Some(mos) = row.mos {
            pairs[0].0.push(p.mos);
            pairs[0].1.push(mos);
        }
        if let Some(labels) = row.acoustic_labels() {
            for t in Task::ACOUSTIC {
                pairs[t.index()].0.push(p.get(t));
                pairs[t.index()].1.push(t.label(&labels).unwrap());
            }
        }
    }
    let mut rep = EvalReport::default();
    for t in Task::ALL {
        let (pred, truth) = &pairs[t.index()];
        if !pred.is_empty() {
            rep.rows.push(TaskScores::compute(&dataset, t.name(), pred, truth)?);
        }
    }
    if rep.rows.is_empty() {
        bail!("manifest {} has no labelled rows", manifest.display());
    }
    rep.write_csv(report)?;
    print!("{}", rep.table());
    Ok(())
}

#[derive(Serialize)]
struct TensorInfo<'a> {
    name: &'a str,
    shape: &'a [usize],
    trainable: bool,
}

#[derive(Serialize)]
struct Inspection<'a> {
    trainable_parameters: usize,
    buffer_values: usize,
    tensors: Vec<TensorInfo<'a>>,
    config: &'a mosra::model::ModelConfig,
    label_norm: &'a mosra::model::NormStats,
}

fn inspect_cmd(model: &Path, json: bool) -> Result<()> {
    let m = Mosra::<f32>::load(model)?;
    let entries = m.params().entries();
    let info = Inspection {
        trainable_parameters: m.param_count(),
        buffer_values: entries.iter().filter(|e| !e.trainable).map(|e| e.tensor.len()).sum(),
        tensors: entries
            .iter()
            .map(|e| TensorInfo {
                name: &e.name,
                shape: &e.tensor.shape,
                trainable: e.trainable,
            })
            .collect(),
        config: m.config(),
        label_norm: m.norm(),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&info)?);
        return Ok(());
    }
    for t in &info.tensors {
        println!(
            "{:<44} {:<16} {}",
            t.name,
            format!("{:?}", t.shape),
            if t.trainable { "" } else { "buffer" }
        );
    }
    println!("trainable parameters: {}", info.trainable_parameters);
    println!("buffer values: {}", info.buffer_values);
    println!("config: {}", serde_json::to_string(info.config)?);
    let norm = info.label_norm;
    for (i, t) in Task::ACOUSTIC.iter().enumerate() {
        println!("label_norm {:<4} mean {:>10.4} std {:>10.4}", t.name(), norm.mean[i], norm.std[i]);
    }
    Ok(())
}
