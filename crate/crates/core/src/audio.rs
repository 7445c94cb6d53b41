//! WAV input/output and sample-rate conversion.

use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate the model operates at.
pub const MODEL_SAMPLE_RATE: u32 = 48_000;

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }
}

/// Sample encoding used by [`save_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Reads a PCM16 or float32 WAV file, averaging stereo down to mono.
///
/// PCM16 values are scaled by 1/32768, so full scale maps to `[-1, 32767/32768]`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::Unsupported => Error::UnsupportedWav {
            path: path.into(),
            reason: "unsupported WAV feature".into(),
        },
        other => Error::UnreadableWav {
            path: path.into(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedWav {
            path: path.into(),
            reason: format!("{channels} channels (only mono and stereo are supported)"),
        });
    }
    let unreadable = |e: hound::Error| Error::UnreadableWav {
        path: path.into(),
        reason: e.to_string(),
    };
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(unreadable)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(unreadable)?,
        (format, bits) => {
            return Err(Error::UnsupportedWav {
                path: path.into(),
                reason: format!("{bits}-bit {format:?} samples (need 16-bit PCM or 32-bit float)"),
            })
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|pair| (pair[0] + pair[1]) * 0.5)
            .collect()
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes a mono WAV file.
pub fn save_wav(path: impl AsRef<Path>, buf: &AudioBuffer, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate_hz,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Invalid(format!("writing {}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &buf.samples {
        match encoding {
            WavEncoding::Pcm16 => {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v).map_err(to_err)?;
            }
            WavEncoding::Float32 => writer.write_sample(s).map_err(to_err)?,
        }
    }
    writer.finalize().map_err(to_err)
}

const TAPS: usize = 64;
const HALF_TAPS: f64 = (TAPS / 2) as f64;
const KAISER_BETA: f64 = 8.0;
const ROLLOFF: f64 = 0.9;

/// Polyphase windowed-sinc rate converter for a fixed rational ratio.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    // up × TAPS, row per phase
    table: Vec<f64>,
}

impl Resampler {
    pub fn new(source_hz: u32, target_hz: u32) -> Result<Self> {
        if source_hz == 0 || target_hz == 0 {
            return Err(Error::Invalid("resample rates must be positive".into()));
        }
        let g = gcd(source_hz as usize, target_hz as usize);
        let up = target_hz as usize / g;
        let down = source_hz as usize / g;
        // cutoff in cycles per input sample
        let cutoff = 0.5 * (up as f64 / down as f64).min(1.0) * ROLLOFF;
        let norm = bessel_i0(KAISER_BETA);
        let mut table = vec![0.0; up * TAPS];
        for phase in 0..up {
            let frac = phase as f64 / up as f64;
            let row = &mut table[phase * TAPS..(phase + 1) * TAPS];
            for (j, w) in row.iter_mut().enumerate() {
                let t = j as f64 - (HALF_TAPS - 1.0) - frac;
                let r = t / HALF_TAPS;
                let window = if r.abs() >= 1.0 {
                    0.0
                } else {
                    bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
                };
                *w = 2.0 * cutoff * sinc(2.0 * cutoff * t) * window;
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= sum);
        }
        Ok(Self { up, down, table })
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        ((input_len as f64) * self.up as f64 / self.down as f64).round() as usize
    }

    pub fn process(&self, input: &[f32]) -> Vec<f32> {
        let out_len = self.output_len(input.len());
        let n_in = input.len() as isize;
        let offset = TAPS as isize / 2 - 1;
        (0..out_len)
            .map(|n| {
                let pos = n * self.down;
                let base = (pos / self.up) as isize;
                let phase = pos % self.up;
                let row = &self.table[phase * TAPS..(phase + 1) * TAPS];
                let mut acc = 0.0f64;
                for (j, &w) in row.iter().enumerate() {
                    let idx = base + j as isize - offset;
                    if idx >= 0 && idx < n_in {
                        acc += w * input[idx as usize] as f64;
                    }
                }
                acc as f32
            })
            .collect()
    }
}

/// Converts `buf` to `target_hz`. Equal rates return an identical copy.
pub fn resample(buf: &AudioBuffer, target_hz: u32) -> Result<AudioBuffer> {
    if target_hz == 0 {
        return Err(Error::Invalid("target sample rate must be positive".into()));
    }
    if target_hz == buf.sample_rate_hz {
        return Ok(buf.clone());
    }
    let r = Resampler::new(buf.sample_rate_hz, target_hz)?;
    AudioBuffer::new(r.process(&buf.samples), target_hz)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}
