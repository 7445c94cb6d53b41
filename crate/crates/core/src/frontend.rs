//! Log-mel spectrogram and overlapping segment extraction.

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, MODEL_SAMPLE_RATE};
use crate::error::{Error, Result};

const POWER_OFFSET: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub fft_window_ms: f64,
    pub hop_ms: f64,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    /// Segment width in spectrogram frames (15 × 10 ms = 150 ms).
    pub segment_width_frames: usize,
    /// Segment hop in spectrogram frames (4 × 10 ms = 40 ms).
    pub segment_hop_frames: usize,
    pub log_floor_db: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: 48,
            fft_window_ms: 20.0,
            hop_ms: 10.0,
            f_min_hz: 0.0,
            f_max_hz: 20_000.0,
            segment_width_frames: 15,
            segment_hop_frames: 4,
            log_floor_db: -80.0,
        }
    }
}

impl FrontendConfig {
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (self.fft_window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of STFT frames produced for `n_samples` input samples.
    pub fn n_frames(&self, n_samples: usize, sample_rate: u32) -> Option<usize> {
        let win = self.window_len(sample_rate);
        (n_samples >= win).then(|| 1 + (n_samples - win) / self.hop_len(sample_rate))
    }

    /// Number of segments produced from `n_frames` spectrogram frames.
    pub fn n_segments(&self, n_frames: usize) -> usize {
        if n_frames < self.segment_width_frames {
            1
        } else {
            1 + (n_frames - self.segment_width_frames) / self.segment_hop_frames
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_mels == 0
            || self.segment_width_frames == 0
            || self.segment_hop_frames == 0
            || self.fft_window_ms <= 0.0
            || self.hop_ms <= 0.0
            || self.f_max_hz <= self.f_min_hz
        {
            return Err(Error::Invalid(format!("bad frontend config {self:?}")));
        }
        Ok(())
    }
}

/// Log-power mel spectrogram, row-major `n_mels × n_frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub frame_hop_s: f64,
}

impl MelSpectrogram {
    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }
}

/// Spectrogram patches, row-major `n_segments × n_mels × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTensor {
    pub values: Vec<f32>,
    pub n_segments: usize,
    pub n_mels: usize,
    pub width: usize,
}

impl SegmentTensor {
    pub fn segment(&self, k: usize) -> &[f32] {
        let len = self.n_mels * self.width;
        &self.values[k * len..(k + 1) * len]
    }

    pub fn get(&self, k: usize, mel: usize, col: usize) -> f32 {
        self.values[(k * self.n_mels + mel) * self.width + col]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank with unit peaks, row-major `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Vec<f64> {
    let n_bins = n_fft / 2 + 1;
    let (mel_lo, mel_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[m * n_bins + k] = w;
        }
    }
    fb
}

/// Reusable feature extractor: FFT plan, window and filterbank for one config.
pub struct Frontend {
    cfg: FrontendConfig,
    sample_rate: u32,
    window: Vec<f64>,
    filterbank: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend")
            .field("cfg", &self.cfg)
            .field("sample_rate", &self.sample_rate)
            .finish_non_exhaustive()
    }
}

impl Frontend {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        Self::with_rate(cfg, MODEL_SAMPLE_RATE)
    }

    pub fn with_rate(cfg: &FrontendConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        if cfg.f_max_hz > sample_rate as f64 / 2.0 {
            return Err(Error::Invalid(format!(
                "f_max {} Hz exceeds Nyquist of {} Hz",
                cfg.f_max_hz, sample_rate
            )));
        }
        let n_fft = cfg.window_len(sample_rate);
        // periodic Hann
        let window = (0..n_fft)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos())
            .collect();
        let filterbank = mel_filterbank(cfg.n_mels, n_fft, sample_rate, cfg.f_min_hz, cfg.f_max_hz);
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn mel_spectrogram(&self, buf: &AudioBuffer) -> Result<MelSpectrogram> {
        if buf.sample_rate_hz != self.sample_rate {
            return Err(Error::SampleRate {
                expected: self.sample_rate,
                actual: buf.sample_rate_hz,
            });
        }
        let n_fft = self.window.len();
        let hop = self.cfg.hop_len(self.sample_rate);
        let n_frames = self
            .cfg
            .n_frames(buf.len(), self.sample_rate)
            .ok_or(Error::TooShort {
                len: buf.len(),
                min: n_fft,
            })?;
        let n_bins = n_fft / 2 + 1;
        let n_mels = self.cfg.n_mels;
        let mut values = vec![0.0f32; n_mels * n_frames];
        let mut frame = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; n_bins];
        for t in 0..n_frames {
            let start = t * hop;
            for (i, c) in frame.iter_mut().enumerate() {
                *c = Complex::new(buf.samples[start + i] as f64 * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut frame, &mut scratch);
            for (p, c) in power.iter_mut().zip(&frame) {
                *p = c.norm_sqr();
            }
            for m in 0..n_mels {
                let row = &self.filterbank[m * n_bins..(m + 1) * n_bins];
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                let db = (10.0 * (e + POWER_OFFSET).log10()).max(self.cfg.log_floor_db);
                values[m * n_frames + t] = db as f32;
            }
        }
        Ok(MelSpectrogram {
            values,
            n_mels,
            n_frames,
            frame_hop_s: hop as f64 / self.sample_rate as f64,
        })
    }

    pub fn segment(&self, spec: &MelSpectrogram) -> SegmentTensor {
        segment(spec, &self.cfg)
    }

    pub fn featurize(&self, buf: &AudioBuffer) -> Result<SegmentTensor> {
        Ok(self.segment(&self.mel_spectrogram(buf)?))
    }
}

/// Log-mel spectrogram of a 48 kHz buffer.
pub fn mel_spectrogram(buf: &AudioBuffer, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    Frontend::new(cfg)?.mel_spectrogram(buf)
}

/// Cuts a spectrogram into overlapping fixed-width segments.
///
/// Frames past the last full segment are dropped; inputs shorter than one
/// segment are padded on the right with the log floor.
pub fn segment(spec: &MelSpectrogram, cfg: &FrontendConfig) -> SegmentTensor {
    let width = cfg.segment_width_frames;
    let n_mels = spec.n_mels;
    let n_segments = cfg.n_segments(spec.n_frames);
    let mut values = vec![cfg.log_floor_db as f32; n_segments * n_mels * width];
    for k in 0..n_segments {
        let start = k * cfg.segment_hop_frames;
        let cols = width.min(spec.n_frames - start);
        for m in 0..n_mels {
            let src = &spec.values[m * spec.n_frames + start..m * spec.n_frames + start + cols];
            let dst = (k * n_mels + m) * width;
            values[dst..dst + cols].copy_from_slice(src);
        }
    }
    SegmentTensor {
        values,
        n_segments,
        n_mels,
        width,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with_frames(n_frames: usize) -> MelSpectrogram {
        let n_mels = 3;
        MelSpectrogram {
            values: (0..n_mels * n_frames).map(|i| i as f32).collect(),
            n_mels,
            n_frames,
            frame_hop_s: 0.01,
        }
    }

    #[test]
    fn eight_seconds_gives_799_frames() {
        let cfg = FrontendConfig::default();
        assert_eq!(cfg.window_len(48_000), 960);
        assert_eq!(cfg.hop_len(48_000), 480);
        assert_eq!(cfg.n_frames(384_000, 48_000), Some(799));
        assert_eq!(cfg.n_segments(799), 197);
    }

    #[test]
    fn silence_hits_floor() {
        let buf = AudioBuffer::new(vec![0.0; 4800], 48_000).unwrap();
        let spec = mel_spectrogram(&buf, &FrontendConfig::default()).unwrap();
        assert_eq!(spec.n_frames, 9);
        assert!(spec.values.iter().all(|&v| v == -80.0));
    }

    #[test]
    fn exact_fit_segment_is_identity() {
        let spec = spec_with_frames(15);
        let seg = segment(&spec, &FrontendConfig::default());
        assert_eq!(seg.n_segments, 1);
        for m in 0..3 {
            for j in 0..15 {
                assert_eq!(seg.get(0, m, j), spec.get(m, j));
            }
        }
    }

    #[test]
    fn short_input_is_floor_padded() {
        let spec = spec_with_frames(10);
        let seg = segment(&spec, &FrontendConfig::default());
        assert_eq!(seg.n_segments, 1);
        for m in 0..3 {
            for j in 0..10 {
                assert_eq!(seg.get(0, m, j), spec.get(m, j));
            }
            for j in 10..15 {
                assert_eq!(seg.get(0, m, j), -80.0);
            }
        }
    }

    #[test]
    fn rejects_wrong_rate_and_short_input() {
        let cfg = FrontendConfig::default();
        let buf = AudioBuffer::new(vec![0.0; 2000], 16_000).unwrap();
        assert!(matches!(mel_spectrogram(&buf, &cfg), Err(Error::SampleRate { .. })));
        let buf = AudioBuffer::new(vec![0.0; 959], 48_000).unwrap();
        assert!(matches!(mel_spectrogram(&buf, &cfg), Err(Error::TooShort { .. })));
    }

    #[test]
    fn filter_rows_are_positive_and_cover_the_band() {
        let fb = mel_filterbank(48, 960, 48_000, 0.0, 20_000.0);
        let n_bins = 481;
        for m in 0..48 {
            assert!(fb[m * n_bins..(m + 1) * n_bins].iter().sum::<f64>() > 0.0);
        }
        let first_center = mel_to_hz(hz_to_mel(20_000.0) / 49.0);
        let last_center = mel_to_hz(hz_to_mel(20_000.0) * 48.0 / 49.0);
        for k in 0..n_bins {
            let f = k as f64 * 50.0;
            if f >= first_center && f <= last_center {
                let total: f64 = (0..48).map(|m| fb[m * n_bins + k]).sum();
                assert!(total > 0.0, "bin {k} uncovered");
            }
        }
    }
}
