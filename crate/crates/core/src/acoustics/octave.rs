//! Octave-band filtering for the STI computation.

/// Octave band centre frequencies used by STI.
pub const OCTAVE_CENTERS_HZ: [f64; 7] = [125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0];

/// Direct-form-I biquad section, coefficients normalised by a0.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    pub fn lowpass(fc: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * fc / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 - cos) / 2.0 / a0, (1.0 - cos) / a0, (1.0 - cos) / 2.0 / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    pub fn highpass(fc: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * fc / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 + cos) / 2.0 / a0, -(1.0 + cos) / a0, (1.0 + cos) / 2.0 / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    pub fn process_in_place(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for s in x.iter_mut() {
            let x0 = *s;
            let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *s = y0;
        }
    }
}

// Pole-pair Q values of a 4th-order Butterworth prototype.
const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_5];

/// 4th-order Butterworth high-pass at `f_c/√2` cascaded with a 4th-order
/// Butterworth low-pass at `f_c·√2`. The low-pass is omitted when its edge
/// would sit too close to Nyquist.
#[derive(Debug, Clone)]
pub struct OctaveFilter {
    sections: Vec<Biquad>,
}

impl OctaveFilter {
    pub fn new(center_hz: f64, fs: f64) -> Self {
        let lo = center_hz / std::f64::consts::SQRT_2;
        let hi = center_hz * std::f64::consts::SQRT_2;
        let mut sections: Vec<Biquad> = BUTTER4_Q.iter().map(|&q| Biquad::highpass(lo, q, fs)).collect();
        if hi < 0.45 * fs {
            sections.extend(BUTTER4_Q.iter().map(|&q| Biquad::lowpass(hi, q, fs)));
        }
        Self { sections }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            s.process_in_place(&mut y);
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gain_at(filter: &OctaveFilter, freq: f64, fs: f64) -> f64 {
        let n = fs as usize;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin()).collect();
        let y = filter.apply(&x);
        let tail = n / 2;
        let rms = |v: &[f64]| (v.iter().map(|s| s * s).sum::<f64>() / v.len() as f64).sqrt();
        rms(&y[tail..]) / rms(&x[tail..])
    }

    #[test]
    fn passes_centre_and_rejects_neighbours() {
        let fs = 48_000.0;
        let f = OctaveFilter::new(1000.0, fs);
        // analog Butterworth magnitudes of both edges at the centre: (1 + 2^-4)^-1
        let centre = gain_at(&f, 1000.0, fs);
        assert!((centre - 1.0 / (1.0 + 1.0 / 16.0)).abs() < 0.01, "centre gain {centre}");
        // band edges sit at -3 dB
        let edge = gain_at(&f, 1000.0 * std::f64::consts::SQRT_2, fs);
        assert!((edge - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.05, "edge gain {edge}");
        assert!(gain_at(&f, 250.0, fs) < 0.1);
        assert!(gain_at(&f, 4000.0, fs) < 0.1);
    }
}
