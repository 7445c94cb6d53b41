//! Synthetic impulse responses, degraded mixtures and corpus generation.
//!
//! Every label produced here is measured by [`crate::acoustics`] on the
//! realised signals, never copied from the synthesis targets.

mod corpus;
mod speech;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::acoustics::{self, AcousticLabels, BandSnr, ImpulseResponse, NOISE_FREE, RATIO_CAP_DB, SNR_CAP_DB};
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

pub use corpus::{build_corpus, CorpusConfig, CorpusJob, DatasetManifest, ManifestRow, Role};
pub use speech::{speech_like, write_speech_dir};

/// T60 label used when an impulse response has no measurable decay.
pub const T60_FLOOR_S: f64 = 0.01;
/// Direct arrival time of synthesised impulse responses.
pub const DIRECT_DELAY_S: f64 = 0.005;

/// Derives an independent per-item seed.
pub fn derive_seed(global: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(global ^ splitmix(index.wrapping_add(1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RirSpec {
    pub t60_s: f64,
    pub drr_db: f64,
    pub sample_rate_hz: u32,
    pub length_s: f64,
    pub seed: u64,
}

impl RirSpec {
    /// Spec with the minimum allowed length (1.5 × T60).
    pub fn new(t60_s: f64, drr_db: f64, sample_rate_hz: u32, seed: u64) -> Self {
        Self {
            t60_s,
            drr_db,
            sample_rate_hz,
            length_s: 1.5 * t60_s,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.1..=3.0).contains(&self.t60_s) {
            return Err(Error::Invalid(format!("t60 {} s outside [0.1, 3.0]", self.t60_s)));
        }
        // small slack for length_s computed as 1.5 * t60 in floating point
        if self.length_s < 1.5 * self.t60_s * (1.0 - 1e-12) {
            return Err(Error::Invalid(format!(
                "rir length {} s shorter than 1.5 x t60 {} s",
                self.length_s, self.t60_s
            )));
        }
        if self.sample_rate_hz == 0 || !self.drr_db.is_finite() {
            return Err(Error::Invalid(format!("bad rir spec {self:?}")));
        }
        Ok(())
    }
}

/// Labels of an impulse response heard without noise.
pub fn ir_labels(ir: &ImpulseResponse, band_snr: &BandSnr) -> Result<AcousticLabels> {
    let t60_s = match acoustics::t60_schroeder(ir) {
        Ok(t) => t,
        Err(Error::InsufficientDecay { .. }) => T60_FLOOR_S,
        Err(e) => return Err(e),
    };
    Ok(AcousticLabels {
        snr_db: SNR_CAP_DB,
        sti: acoustics::sti(ir, band_snr),
        t60_s,
        drr_db: acoustics::drr(ir),
        c50_db: acoustics::c50(ir)?,
    })
}

/// Unit direct impulse at 5 ms followed, 2.5 ms later, by a Gaussian noise
/// tail with amplitude envelope `10^(-3 t / T60)`, scaled to hit the DRR target.
pub fn synth_rir(spec: &RirSpec) -> Result<(ImpulseResponse, AcousticLabels)> {
    let ir = synth_ir(spec)?;
    let labels = ir_labels(&ir, &NOISE_FREE)?;
    Ok((ir, labels))
}

fn synth_ir(spec: &RirSpec) -> Result<ImpulseResponse> {
    spec.validate()?;
    let fs = spec.sample_rate_hz as f64;
    let n = (spec.length_s * fs).round() as usize;
    let direct = (DIRECT_DELAY_S * fs).round() as usize;
    let half = (0.0025 * fs).round() as usize;
    let tail_start = direct + half + 1;
    if tail_start >= n {
        return Err(Error::Invalid(format!("rir of {n} samples leaves no room for a tail")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut h = vec![0.0; n];
    h[direct] = 1.0;
    let decay = -3.0 / (spec.t60_s * fs);
    for (i, v) in h.iter_mut().enumerate().skip(tail_start) {
        let g: f64 = rng.sample(StandardNormal);
        *v = g * 10f64.powf(decay * (i - direct) as f64);
    }
    let tail_energy: f64 = h[tail_start..].iter().map(|v| v * v).sum();
    let scale = (10f64.powf(-spec.drr_db / 10.0) / tail_energy).sqrt();
    let mut peak = 0.0f64;
    for v in &mut h[tail_start..] {
        *v *= scale;
        peak = peak.max(v.abs());
    }
    if peak >= 1.0 {
        return Err(Error::Invalid(format!(
            "DRR target {} dB unreachable: tail peak {peak:.3} exceeds the direct impulse",
            spec.drr_db
        )));
    }
    ImpulseResponse::new(h, spec.sample_rate_hz)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub rir: Option<RirSpec>,
    /// Target SNR in dB; `f64::INFINITY` adds no noise.
    pub snr_db: f64,
    pub gain_db: f64,
}

impl DegradationSpec {
    fn validate(&self) -> Result<()> {
        let snr_ok = self.snr_db == f64::INFINITY || (-10.0..=60.0).contains(&self.snr_db);
        if !snr_ok || !self.gain_db.is_finite() {
            return Err(Error::Invalid(format!("bad degradation spec {self:?}")));
        }
        Ok(())
    }
}

/// Degraded signal with its separated components.
#[derive(Debug, Clone)]
pub struct Degraded {
    pub mix: AudioBuffer,
    /// Reverberant speech before noise and gain.
    pub speech: AudioBuffer,
    /// Noise before gain.
    pub noise: AudioBuffer,
    pub ir: Option<ImpulseResponse>,
    /// Overall factor (gain and peak normalisation) applied to `speech + noise`.
    pub mix_scale: f32,
    pub labels: AcousticLabels,
}

/// Reverberates `speech`, adds white noise at the requested SNR, applies the
/// gain and peak-normalises to -1 dBFS if the result would clip.
pub fn degrade(speech: &AudioBuffer, spec: &DegradationSpec, seed: u64) -> Result<(AudioBuffer, AcousticLabels)> {
    let d = degrade_components(speech, spec, seed, None)?;
    Ok((d.mix, d.labels))
}

/// [`degrade`] with the reverberant signal optionally truncated to
/// `crop_len` samples before noise is added; labels describe the stored clip.
pub fn degrade_components(
    speech: &AudioBuffer,
    spec: &DegradationSpec,
    seed: u64,
    crop_len: Option<usize>,
) -> Result<Degraded> {
    spec.validate()?;
    if speech.sample_rate_hz != crate::audio::MODEL_SAMPLE_RATE {
        return Err(Error::SampleRate {
            expected: crate::audio::MODEL_SAMPLE_RATE,
            actual: speech.sample_rate_hz,
        });
    }
    if speech.energy() == 0.0 {
        return Err(Error::Silent("speech input has zero energy".into()));
    }
    let fs = speech.sample_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ir = match &spec.rir {
        Some(rir_spec) => Some(synth_ir(rir_spec)?),
        None => None,
    };
    let mut reverberant: Vec<f32> = match &ir {
        Some(ir) => {
            let x: Vec<f64> = speech.samples.iter().map(|&v| v as f64).collect();
            convolve(&x, &ir.h).into_iter().map(|v| v as f32).collect()
        }
        None => speech.samples.clone(),
    };
    if let Some(len) = crop_len {
        reverberant.truncate(len);
    }
    let speech_part = AudioBuffer::new(reverberant, fs)?;
    if speech_part.energy() == 0.0 {
        return Err(Error::Silent("reverberant clip has zero energy".into()));
    }

    let noise_samples: Vec<f32> = if spec.snr_db.is_finite() {
        let raw: Vec<f64> = (0..speech_part.len()).map(|_| rng.sample(StandardNormal)).collect();
        let raw_energy: f64 = raw.iter().map(|v| v * v).sum();
        let alpha = (speech_part.energy() / (raw_energy * 10f64.powf(spec.snr_db / 10.0))).sqrt();
        raw.iter().map(|v| (v * alpha) as f32).collect()
    } else {
        vec![0.0; speech_part.len()]
    };
    let noise = AudioBuffer::new(noise_samples, fs)?;

    let gain = 10f64.powf(spec.gain_db / 20.0) as f32;
    let mut mix: Vec<f32> = speech_part
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(&s, &n)| (s + n) * gain)
        .collect();
    let peak = mix.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let mut mix_scale = gain;
    if peak > 1.0 {
        let norm = 10f32.powf(-1.0 / 20.0) / peak;
        mix.iter_mut().for_each(|v| *v *= norm);
        mix_scale *= norm;
    }

    let (snr_db, band) = if spec.snr_db.is_finite() {
        (
            acoustics::snr_of_mix(&speech_part, &noise)?.min(SNR_CAP_DB),
            acoustics::band_snr(&speech_part, &noise)?,
        )
    } else {
        (SNR_CAP_DB, NOISE_FREE)
    };
    let labels = match &ir {
        Some(ir) => AcousticLabels {
            snr_db,
            ..ir_labels(ir, &band)?
        },
        None => {
            let delta = ImpulseResponse::delta((0.1 * fs as f64) as usize, 0, fs)?;
            AcousticLabels {
                snr_db,
                sti: acoustics::sti(&delta, &band),
                t60_s: T60_FLOOR_S,
                drr_db: RATIO_CAP_DB,
                c50_db: RATIO_CAP_DB,
            }
        }
    };
    Ok(Degraded {
        mix: AudioBuffer::new(mix, fs)?,
        speech: speech_part,
        noise,
        ir,
        mix_scale,
        labels,
    })
}

/// Deterministic stand-in for a subjective score: `1 + 4·STI·σ((SNR − 10)/5)`.
pub fn proxy_mos(labels: &AcousticLabels) -> f64 {
    let logistic = 1.0 / (1.0 + (-(labels.snr_db - 10.0) / 5.0).exp());
    (1.0 + 4.0 * labels.sti * logistic).clamp(1.0, 5.0)
}

thread_local! {
    // planners cache twiddle tables, which dominate the cost of one-off plans
    static PLANNER: std::cell::RefCell<FftPlanner<f64>> = std::cell::RefCell::new(FftPlanner::new());
}

/// Full linear convolution via FFT.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let (fwd, inv) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    });
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex<f64>> = x.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let mut fa = pad(a);
    let mut fb = pad(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    fa.iter_mut().zip(&fb).for_each(|(x, y)| *x *= y);
    inv.process(&mut fa);
    fa.iter().take(out_len).map(|c| c.re / n as f64).collect()
}
