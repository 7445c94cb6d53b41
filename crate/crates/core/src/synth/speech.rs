//! Speech-like test signals: harmonic syllables with vowel formants,
//! fricative bursts and pauses at a syllabic rate.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::acoustics::octave::Biquad;
use crate::audio::{save_wav, AudioBuffer, WavEncoding};
use crate::error::{Error, Result};

// (F1, F2, F3) in Hz
const VOWELS: [(f64, f64, f64); 6] = [
    (730.0, 1090.0, 2440.0),
    (270.0, 2290.0, 3010.0),
    (530.0, 1840.0, 2480.0),
    (570.0, 840.0, 2410.0),
    (300.0, 870.0, 2240.0),
    (660.0, 1720.0, 2410.0),
];
const FORMANT_BW_HZ: f64 = 90.0;
const MAX_HARMONIC_HZ: f64 = 7000.0;
const TARGET_RMS: f64 = 0.1;

fn raised_cosine_env(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    let x = if i < ramp {
        i as f64 / ramp as f64
    } else if i >= len - ramp {
        (len - 1 - i) as f64 / ramp as f64
    } else {
        1.0
    };
    0.5 - 0.5 * (std::f64::consts::PI * x).cos()
}

fn voiced(out: &mut [f64], fs: f64, rng: &mut ChaCha8Rng, f0_base: f64) {
    let (f1, f2, f3) = VOWELS[rng.gen_range(0..VOWELS.len())];
    let f0_start = f0_base * rng.gen_range(0.9..1.15);
    let f0_end = f0_base * rng.gen_range(0.8..1.05);
    let n_harm = (MAX_HARMONIC_HZ / f0_start.max(f0_end)).floor() as usize;
    let amps: Vec<f64> = (1..=n_harm)
        .map(|k| {
            let f = k as f64 * f0_start;
            let formant = [(f1, 1.0), (f2, 0.6), (f3, 0.3)]
                .iter()
                .map(|&(fc, g)| g / (1.0 + ((f - fc) / FORMANT_BW_HZ).powi(2)))
                .sum::<f64>();
            (formant + 0.02) / (k as f64).sqrt()
        })
        .collect();
    let len = out.len();
    let ramp = (0.02 * fs) as usize;
    let mut phase = 0.0f64;
    for (i, o) in out.iter_mut().enumerate() {
        let f0 = f0_start + (f0_end - f0_start) * i as f64 / len as f64;
        phase += 2.0 * std::f64::consts::PI * f0 / fs;
        let v: f64 = amps
            .iter()
            .enumerate()
            .map(|(k, a)| a * ((k + 1) as f64 * phase).sin())
            .sum();
        *o = v * raised_cosine_env(i, len, ramp);
    }
}

fn fricative(out: &mut [f64], fs: f64, rng: &mut ChaCha8Rng) {
    let hp = Biquad::highpass(rng.gen_range(2500.0..4500.0), 0.7, fs);
    for o in out.iter_mut() {
        *o = rng.sample::<f64, _>(StandardNormal) * 0.3;
    }
    hp.process_in_place(out);
    let len = out.len();
    let ramp = (0.01 * fs) as usize;
    for (i, o) in out.iter_mut().enumerate() {
        *o *= raised_cosine_env(i, len, ramp);
    }
}

/// Deterministic speech-like signal of `duration_s` seconds, normalised to
/// an RMS of 0.1 (about -20 dBFS).
pub fn speech_like(duration_s: f64, sample_rate_hz: u32, seed: u64) -> Result<AudioBuffer> {
    if duration_s <= 0.0 {
        return Err(Error::Invalid("duration must be positive".into()));
    }
    let fs = sample_rate_hz as f64;
    let n = (duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0_base = rng.gen_range(95.0..230.0);
    let mut x = vec![0.0f64; n];
    let mut pos = (rng.gen_range(0.0..0.05) * fs) as usize;
    while pos < n {
        let is_fricative = rng.gen_bool(0.25);
        let dur = if is_fricative {
            rng.gen_range(0.06..0.12)
        } else {
            rng.gen_range(0.12..0.30)
        };
        let len = ((dur * fs) as usize).min(n - pos);
        if len > 8 {
            let seg = &mut x[pos..pos + len];
            if is_fricative {
                fricative(seg, fs, &mut rng);
            } else {
                voiced(seg, fs, &mut rng, f0_base);
            }
            let level = rng.gen_range(0.5..1.0);
            seg.iter_mut().for_each(|v| *v *= level);
        }
        pos += len + (rng.gen_range(0.03..0.15) * fs) as usize;
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let scale = if rms > 0.0 { TARGET_RMS / rms } else { 0.0 };
    AudioBuffer::new(x.iter().map(|v| (v * scale) as f32).collect(), sample_rate_hz)
}

/// Writes `count` speech-like files (`speech_000.wav`, ...) into `dir`.
pub fn write_speech_dir(dir: &Path, count: usize, duration_s: f64, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..count {
        let buf = speech_like(duration_s, crate::audio::MODEL_SAMPLE_RATE, super::derive_seed(seed, i as u64))?;
        save_wav(dir.join(format!("speech_{i:03}.wav")), &buf, WavEncoding::Float32)?;
    }
    Ok(())
}
