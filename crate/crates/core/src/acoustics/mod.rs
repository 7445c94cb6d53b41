//! Reference room-acoustics labels computed from impulse responses and
//! separately available speech/noise components.

pub mod octave;

use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
pub use octave::{OctaveFilter, OCTAVE_CENTERS_HZ};

/// Cap applied to energy ratios whose denominator is zero.
pub const RATIO_CAP_DB: f64 = 100.0;
/// Cap applied to the SNR label of noise-free mixtures.
pub const SNR_CAP_DB: f64 = 60.0;

/// Male-speech octave weights, 125 Hz .. 8 kHz.
pub const STI_WEIGHTS: [f64; 7] = [0.13, 0.14, 0.11, 0.12, 0.19, 0.17, 0.14];
pub const MODULATION_FREQS_HZ: [f64; 14] = [
    0.63, 0.8, 1.0, 1.25, 1.6, 2.0, 2.5, 3.15, 4.0, 5.0, 6.3, 8.0, 10.0, 12.5,
];

/// Per-octave-band SNR in dB; `f64::INFINITY` means noise-free.
pub type BandSnr = [f64; 7];
pub const NOISE_FREE: BandSnr = [f64::INFINITY; 7];

const EDC_START_DB: f64 = -5.0;
const EDC_END_DB: f64 = -25.0;
const C50_WINDOW_S: f64 = 0.050;
const DIRECT_HALF_WINDOW_S: f64 = 0.0025;
const APPARENT_SNR_LIMIT_DB: f64 = 15.0;
const MTF_CLIP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub h: Vec<f64>,
    pub sample_rate_hz: u32,
    /// Index of the direct-path arrival, `argmax |h|`.
    pub direct_index: usize,
}

impl ImpulseResponse {
    pub fn new(h: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if h.iter().any(|v| !v.is_finite()) || h.iter().all(|&v| v == 0.0) {
            return Err(Error::Invalid("impulse response must be finite with nonzero energy".into()));
        }
        let direct_index = h
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, &v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
            .0;
        Ok(Self {
            h,
            sample_rate_hz,
            direct_index,
        })
    }

    /// Unit impulse at `index` in a buffer of `len` samples.
    pub fn delta(len: usize, index: usize, sample_rate_hz: u32) -> Result<Self> {
        if index >= len {
            return Err(Error::Invalid(format!("delta index {index} outside length {len}")));
        }
        let mut h = vec![0.0; len];
        h[index] = 1.0;
        Self::new(h, sample_rate_hz)
    }

    pub fn energy(&self) -> f64 {
        self.h.iter().map(|v| v * v).sum()
    }

    fn samples(&self, seconds: f64) -> usize {
        (seconds * self.sample_rate_hz as f64).round() as usize
    }

    pub fn to_audio(&self) -> AudioBuffer {
        AudioBuffer {
            samples: self.h.iter().map(|&v| v as f32).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn from_audio(buf: &AudioBuffer) -> Result<Self> {
        Self::new(buf.samples.iter().map(|&v| v as f64).collect(), buf.sample_rate_hz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcousticLabels {
    pub snr_db: f64,
    pub sti: f64,
    pub t60_s: f64,
    pub drr_db: f64,
    pub c50_db: f64,
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        RATIO_CAP_DB
    } else {
        (10.0 * (num / den).log10()).min(RATIO_CAP_DB)
    }
}

/// Schroeder energy decay curve in dB, normalised to 0 dB at the start.
pub fn energy_decay_curve(h: &[f64]) -> Vec<f64> {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for (e, v) in edc.iter_mut().zip(h).rev() {
        acc += v * v;
        *e = acc;
    }
    let total = edc.first().copied().unwrap_or(0.0);
    edc.iter_mut().for_each(|e| *e = 10.0 * (*e / total).log10());
    edc
}

/// Reverberation time from a least-squares line through the -5..-25 dB
/// region of the energy decay curve, extrapolated to 60 dB.
pub fn t60_schroeder(ir: &ImpulseResponse) -> Result<f64> {
    let edc = energy_decay_curve(&ir.h);
    let floor_db = edc.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::min);
    let insufficient = || Error::InsufficientDecay {
        floor_db,
        needed_db: EDC_END_DB,
    };
    if !edc.iter().any(|&v| v <= EDC_END_DB) {
        return Err(insufficient());
    }
    let fs = ir.sample_rate_hz as f64;
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &y) in edc.iter().enumerate() {
        if !(EDC_END_DB..=EDC_START_DB).contains(&y) {
            continue;
        }
        let x = i as f64 / fs;
        n += 1.0;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    if n < 2.0 {
        return Err(insufficient());
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    if !(slope < 0.0) {
        return Err(insufficient());
    }
    Ok(-60.0 / slope)
}

/// Clarity: energy in the first 50 ms after the direct arrival over all later energy.
pub fn c50(ir: &ImpulseResponse) -> Result<f64> {
    let td = ir.direct_index;
    let split = td + ir.samples(C50_WINDOW_S);
    if ir.h.len() < split {
        return Err(Error::TooShort {
            len: ir.h.len(),
            min: split,
        });
    }
    let early: f64 = ir.h[td..split].iter().map(|v| v * v).sum();
    let late: f64 = ir.h[split..].iter().map(|v| v * v).sum();
    Ok(ratio_db(early, late))
}

/// Direct-to-reverberant ratio with a ±2.5 ms window (inclusive) around the direct arrival.
pub fn drr(ir: &ImpulseResponse) -> f64 {
    let (lo, hi) = direct_window(ir);
    let total = ir.energy();
    let direct: f64 = ir.h[lo..=hi].iter().map(|v| v * v).sum();
    ratio_db(direct, total - direct)
}

/// Inclusive sample range counted as direct sound by [`drr`].
pub fn direct_window(ir: &ImpulseResponse) -> (usize, usize) {
    let half = ir.samples(DIRECT_HALF_WINDOW_S);
    let lo = ir.direct_index.saturating_sub(half);
    let hi = (ir.direct_index + half).min(ir.h.len() - 1);
    (lo, hi)
}

/// Normalised magnitude of the Fourier transform of an energy envelope at
/// each modulation frequency.
fn envelope_mtf(energy: &[f64], fs: f64) -> [f64; 14] {
    const ANCHOR: usize = 4096;
    let total: f64 = energy.iter().sum();
    if total <= 0.0 {
        return [0.0; 14];
    }
    let steps = MODULATION_FREQS_HZ.map(|f| -2.0 * std::f64::consts::PI * f / fs);
    let rot = steps.map(|w| w.sin_cos());
    let (mut re, mut im) = ([0.0f64; 14], [0.0f64; 14]);
    for (block, chunk) in energy.chunks(ANCHOR).enumerate() {
        // re-anchor the rotating phasors every block to bound drift
        let mut c = [0.0f64; 14];
        let mut s = [0.0f64; 14];
        for k in 0..14 {
            (s[k], c[k]) = (steps[k] * (block * ANCHOR) as f64).sin_cos();
        }
        for &e in chunk {
            for k in 0..14 {
                re[k] += e * c[k];
                im[k] += e * s[k];
                let (sd, cd) = rot[k];
                (c[k], s[k]) = (c[k] * cd - s[k] * sd, c[k] * sd + s[k] * cd);
            }
        }
    }
    std::array::from_fn(|k| (re[k] * re[k] + im[k] * im[k]).sqrt() / total)
}

/// Transmission index contribution of one modulation transfer value.
pub fn transmission_index(m: f64) -> f64 {
    let m = m.clamp(MTF_CLIP, 1.0 - MTF_CLIP);
    let snr_app = (10.0 * (m / (1.0 - m)).log10()).clamp(-APPARENT_SNR_LIMIT_DB, APPARENT_SNR_LIMIT_DB);
    (snr_app + APPARENT_SNR_LIMIT_DB) / (2.0 * APPARENT_SNR_LIMIT_DB)
}

/// Combines per-band modulation transfer indices with the octave weights.
pub fn sti_from_mti(mti: &[f64; 7]) -> f64 {
    STI_WEIGHTS.iter().zip(mti).map(|(w, m)| w * m).sum()
}

/// Modulation transfer matrix (7 bands × 14 modulation frequencies).
///
/// The octave filter's own ringing is divided out by normalising against the
/// same filter applied to a unit impulse at the direct-arrival index, so an
/// ideal channel transfers every modulation with m = 1.
pub fn modulation_transfer(ir: &ImpulseResponse, snr_per_band_db: &BandSnr) -> [[f64; 14]; 7] {
    let fs = ir.sample_rate_hz as f64;
    // The reference magnitude is shift invariant, and the filter's ringing has
    // decayed by hundreds of dB within half a second, so a short buffer suffices.
    let mut delta = vec![0.0; (ir.h.len() - ir.direct_index).min(ir.samples(0.5).max(1))];
    delta[0] = 1.0;
    let mut out = [[0.0; 14]; 7];
    for (band, &fc) in OCTAVE_CENTERS_HZ.iter().enumerate() {
        let filter = OctaveFilter::new(fc, fs);
        let energy: Vec<f64> = filter.apply(&ir.h).iter().map(|v| v * v).collect();
        let reference: Vec<f64> = filter.apply(&delta).iter().map(|v| v * v).collect();
        let snr = snr_per_band_db[band];
        let noise_factor = if snr.is_infinite() && snr > 0.0 {
            1.0
        } else {
            1.0 / (1.0 + 10f64.powf(-snr / 10.0))
        };
        let raw = envelope_mtf(&energy, fs);
        let ideal = envelope_mtf(&reference, fs);
        for k in 0..MODULATION_FREQS_HZ.len() {
            let m = if ideal[k] > 0.0 { raw[k] / ideal[k] } else { raw[k] };
            out[band][k] = m * noise_factor;
        }
    }
    out
}

/// Speech transmission index by the indirect (impulse-response) method.
pub fn sti(ir: &ImpulseResponse, snr_per_band_db: &BandSnr) -> f64 {
    let mtf = modulation_transfer(ir, snr_per_band_db);
    let mut mti = [0.0; 7];
    for (band, row) in mtf.iter().enumerate() {
        mti[band] = row.iter().map(|&m| transmission_index(m)).sum::<f64>() / row.len() as f64;
    }
    sti_from_mti(&mti)
}

fn check_pair(a: &AudioBuffer, b: &AudioBuffer) -> Result<()> {
    if a.len() != b.len() || a.sample_rate_hz != b.sample_rate_hz {
        return Err(Error::Invalid(format!(
            "speech/noise mismatch: {} samples @{} Hz vs {} samples @{} Hz",
            a.len(),
            a.sample_rate_hz,
            b.len(),
            b.sample_rate_hz
        )));
    }
    Ok(())
}

/// Full-file signal-to-noise ratio in dB. Zero noise energy gives `+inf`.
pub fn snr_of_mix(speech: &AudioBuffer, noise: &AudioBuffer) -> Result<f64> {
    check_pair(speech, noise)?;
    Ok(10.0 * (speech.energy() / noise.energy()).log10())
}

/// SNR in each STI octave band, measured on the separated components.
pub fn band_snr(speech: &AudioBuffer, noise: &AudioBuffer) -> Result<BandSnr> {
    check_pair(speech, noise)?;
    let fs = speech.sample_rate_hz as f64;
    let s: Vec<f64> = speech.samples.iter().map(|&v| v as f64).collect();
    let n: Vec<f64> = noise.samples.iter().map(|&v| v as f64).collect();
    let mut out = NOISE_FREE;
    for (band, &fc) in OCTAVE_CENTERS_HZ.iter().enumerate() {
        let filter = OctaveFilter::new(fc, fs);
        let es: f64 = filter.apply(&s).iter().map(|v| v * v).sum();
        let en: f64 = filter.apply(&n).iter().map(|v| v * v).sum();
        out[band] = 10.0 * (es / en).log10();
    }
    Ok(out)
}
