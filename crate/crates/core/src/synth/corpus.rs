//! Corpus synthesis and the manifest CSV.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{degrade_components, derive_seed, proxy_mos, DegradationSpec, RirSpec};
use crate::acoustics::AcousticLabels;
use crate::audio::{load_wav, resample, save_wav, AudioBuffer, WavEncoding, MODEL_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Which task pool a manifest row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Mos,
    Acoustics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub role: Role,
    pub mos: Option<f64>,
    pub snr_db: Option<f64>,
    pub sti: Option<f64>,
    pub t60_s: Option<f64>,
    pub drr_db: Option<f64>,
    pub c50_db: Option<f64>,
}

impl ManifestRow {
    pub fn acoustic_labels(&self) -> Option<AcousticLabels> {
        Some(AcousticLabels {
            snr_db: self.snr_db?,
            sti: self.sti?,
            t60_s: self.t60_s?,
            drr_db: self.drr_db?,
            c50_db: self.c50_db?,
        })
    }

    fn with_labels(path: String, role: Role, mos: Option<f64>, l: &AcousticLabels) -> Self {
        Self {
            path,
            role,
            mos,
            snr_db: Some(l.snr_db),
            sti: Some(l.sti),
            t60_s: Some(l.t60_s),
            drr_db: Some(l.drr_db),
            c50_db: Some(l.c50_db),
        }
    }

    fn validate(&self) -> Result<()> {
        match self.role {
            Role::Acoustics if self.acoustic_labels().is_none() => Err(Error::Manifest(format!(
                "acoustics row {} is missing labels",
                self.path
            ))),
            Role::Mos if !self.mos.is_some_and(|m| (1.0..=5.0).contains(&m)) => Err(Error::Manifest(format!(
                "mos row {} needs a MOS in [1, 5], got {:?}",
                self.path, self.mos
            ))),
            _ => Ok(()),
        }
    }
}

/// Rows plus the directory their relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Manifest(format!("cannot open {}: {e}", path.display())))?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Manifest(format!(
                "{}: expected header {:?}, found {:?}",
                path.display(),
                MANIFEST_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let rows = reader.deserialize().collect::<Result<Vec<ManifestRow>, _>>()?;
        rows.iter().try_for_each(ManifestRow::validate)?;
        Ok(Self {
            rows,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path.as_ref())?;
        for row in &self.rows {
            writer.serialize(row)?;
        }
        if self.rows.is_empty() {
            writer.write_record(MANIFEST_HEADER)?;
        }
        writer.flush().map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.base_dir.join(&row.path)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.role == role)
    }

    pub fn count(&self, role: Role) -> usize {
        self.with_role(role).count()
    }
}

pub const MANIFEST_HEADER: [&str; 8] = ["path", "role", "mos", "snr_db", "sti", "t60_s", "drr_db", "c50_db"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Clip duration in seconds; reverberant tails are cut at this length.
    pub clip_s: f64,
    /// T60 is drawn log-uniformly from this range.
    pub t60_range_s: [f64; 2],
    pub drr_range_db: [f64; 2],
    pub snr_range_db: [f64; 2],
    /// Fraction of rows with no added noise.
    pub clean_fraction: f64,
    pub gain_range_db: [f64; 2],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            clip_s: 1.0,
            t60_range_s: [0.15, 1.5],
            drr_range_db: [-6.0, 18.0],
            snr_range_db: [0.0, 40.0],
            clean_fraction: 0.2,
            gain_range_db: [-6.0, 0.0],
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if self.clip_s <= 0.0
            || !ordered(self.t60_range_s)
            || !ordered(self.drr_range_db)
            || !ordered(self.snr_range_db)
            || !ordered(self.gain_range_db)
            || !(0.0..=1.0).contains(&self.clean_fraction)
            || self.t60_range_s[0] < 0.1
            || self.t60_range_s[1] > 3.0
        {
            return Err(Error::Invalid(format!("bad corpus config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CorpusJob {
    pub n_mos: usize,
    pub n_acoustics: usize,
    pub speech_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: usize,
}

fn load_speech_pool(dir: &Path) -> Result<Vec<AudioBuffer>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no WAV files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| resample(&load_wav(p)?, MODEL_SAMPLE_RATE))
        .collect()
}

const MAX_ATTEMPTS: usize = 16;

fn synth_row(
    index: usize,
    role: Role,
    pool: &[AudioBuffer],
    cfg: &CorpusConfig,
    job: &CorpusJob,
) -> Result<ManifestRow> {
    let clip_len = (cfg.clip_s * MODEL_SAMPLE_RATE as f64).round() as usize;
    let mut last_err = None;
    for attempt in 0..MAX_ATTEMPTS {
        let seed = derive_seed(derive_seed(job.seed, index as u64), attempt as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = &pool[rng.gen_range(0..pool.len())];
        let len = clip_len.min(src.len());
        let offset = rng.gen_range(0..=src.len() - len);
        let excerpt = AudioBuffer::new(src.samples[offset..offset + len].to_vec(), MODEL_SAMPLE_RATE)?;

        let (lo, hi) = (cfg.t60_range_s[0].ln(), cfg.t60_range_s[1].ln());
        let t60 = if hi > lo { rng.gen_range(lo..hi).exp() } else { lo.exp() };
        let drr = uniform(&mut rng, cfg.drr_range_db);
        let snr = if rng.gen_bool(cfg.clean_fraction) {
            f64::INFINITY
        } else {
            uniform(&mut rng, cfg.snr_range_db)
        };
        let spec = DegradationSpec {
            rir: Some(RirSpec::new(t60, drr, MODEL_SAMPLE_RATE, rng.gen())),
            snr_db: snr,
            gain_db: uniform(&mut rng, cfg.gain_range_db),
        };
        let degraded = match degrade_components(&excerpt, &spec, rng.gen(), Some(len)) {
            Ok(d) => d,
            Err(e @ (Error::Silent(_) | Error::Invalid(_))) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };

        let stem = format!("{}_{index:05}", if role == Role::Mos { "mos" } else { "ra" });
        let clip_rel = format!("clips/{stem}.wav");
        save_wav(job.out_dir.join(&clip_rel), &degraded.mix, WavEncoding::Float32)?;
        if let Some(ir) = &degraded.ir {
            save_wav(job.out_dir.join(format!("rirs/{stem}.wav")), &ir.to_audio(), WavEncoding::Float32)?;
        }
        // noise exactly as it sits inside the stored mix
        let noise_in_mix = AudioBuffer::new(
            degraded.noise.samples.iter().map(|v| v * degraded.mix_scale).collect(),
            MODEL_SAMPLE_RATE,
        )?;
        save_wav(job.out_dir.join(format!("noise/{stem}.wav")), &noise_in_mix, WavEncoding::Float32)?;

        let labels = degraded.labels;
        let mos = (role == Role::Mos).then(|| proxy_mos(&labels));
        return Ok(ManifestRow::with_labels(clip_rel, role, mos, &labels));
    }
    Err(last_err.unwrap_or_else(|| Error::Invalid(format!("row {index}: synthesis failed"))))
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Synthesises `n_mos` proxy-MOS rows followed by `n_acoustics` acoustics rows.
///
/// Writes `clips/`, `rirs/` and `noise/` WAVs plus `manifest.csv` under
/// `out_dir`. Rows are generated from per-row seeds, so the result does not
/// depend on the thread count.
pub fn build_corpus(job: &CorpusJob, cfg: &CorpusConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let pool = load_speech_pool(&job.speech_dir)?;
    for sub in ["clips", "rirs", "noise"] {
        let d = job.out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let total = job.n_mos + job.n_acoustics;
    let role_of = |i: usize| if i < job.n_mos { Role::Mos } else { Role::Acoustics };
    let threads = job.threads.clamp(1, total.max(1));
    let rows: Vec<ManifestRow> = if threads == 1 {
        (0..total)
            .map(|i| synth_row(i, role_of(i), &pool, cfg, job))
            .collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<ManifestRow>>> = (0..total).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let pool = &pool;
                    scope.spawn(move || {
                        (t..total)
                            .step_by(threads)
                            .map(|i| (i, synth_row(i, role_of(i), pool, cfg, job)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("corpus worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every row assigned"))
            .collect::<Result<_>>()?
    };
    let manifest = DatasetManifest {
        rows,
        base_dir: job.out_dir.clone(),
    };
    manifest.write(job.out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            rows: vec![
                ManifestRow {
                    path: "a.wav".into(),
                    role: Role::Mos,
                    mos: Some(3.25),
                    snr_db: None,
                    sti: None,
                    t60_s: None,
                    drr_db: None,
                    c50_db: None,
                },
                ManifestRow::with_labels(
                    "b.wav".into(),
                    Role::Acoustics,
                    None,
                    &AcousticLabels {
                        snr_db: 12.5,
                        sti: 0.61,
                        t60_s: 0.7,
                        drr_db: -1.0,
                        c50_db: 3.0,
                    },
                ),
            ],
            base_dir: dir.path().into(),
        };
        let path = dir.path().join("m.csv");
        m.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("path,role,mos,snr_db,sti,t60_s,drr_db,c50_db\n"));
        assert!(text.contains("a.wav,mos,3.25,,,,,\n"));
        assert!(!text.contains('\r'));
        assert_eq!(DatasetManifest::read(&path).unwrap(), m);

        std::fs::write(&path, "path,role,mos,snr_db,sti,t60_s,drr_db,c50_db\nx.wav,mos,7,,,,,\n").unwrap();
        assert!(DatasetManifest::read(&path).is_err());
        std::fs::write(&path, "path,role,mos,snr_db,sti,t60_s,drr_db,c50_db\nx.wav,acoustics,,1,0.5,,0,0\n").unwrap();
        assert!(DatasetManifest::read(&path).is_err());
    }

    #[test]
    fn empty_speech_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let job = CorpusJob {
            n_mos: 1,
            n_acoustics: 1,
            speech_dir: dir.path().into(),
            out_dir: dir.path().join("out"),
            seed: 0,
            threads: 1,
        };
        assert!(matches!(build_corpus(&job, &CorpusConfig::default()), Err(Error::Empty(_))));
    }
}
