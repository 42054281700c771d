//! Second-order Bessel sections discretized by the prewarped bilinear transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// -3 dB frequency (rad/s) of the delay-normalized prototype `3 / (s² + 3s + 3)`.
///
/// Root of `ω⁴ + 3ω² − 9 = 0`.
pub fn bessel2_cutoff_factor() -> f64 {
    ((45f64.sqrt() - 3.0) / 2.0).sqrt()
}

/// `H(z) = (b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`, direct form II transposed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Bilinear image of the analog section
    /// `(n0 + n1 s + n2 s²) / (d0 + d1 s + d2 s²)` at sample rate `fs`.
    pub fn bilinear(num: [f64; 3], den: [f64; 3], fs: f64) -> Self {
        let k = 2.0 * fs;
        let map = |c: [f64; 3]| {
            [
                c[0] + c[1] * k + c[2] * k * k,
                2.0 * c[0] - 2.0 * c[2] * k * k,
                c[0] - c[1] * k + c[2] * k * k,
            ]
        };
        let (b, a) = (map(num), map(den));
        let a0 = a[0];
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [1.0, a[1] / a0, a[2] / a0],
        }
    }

    fn prewarp(f_c: f64, fs: f64) -> f64 {
        2.0 * fs * (std::f64::consts::PI * f_c / fs).tan()
    }

    pub fn bessel_lowpass(f_c: f64, fs: f64) -> Self {
        let w0 = bessel2_cutoff_factor();
        let omega = Self::prewarp(f_c, fs);
        Self::bilinear([3.0, 0.0, 0.0], [3.0, 3.0 * w0 / omega, w0 * w0 / (omega * omega)], fs)
    }

    pub fn bessel_highpass(f_c: f64, fs: f64) -> Self {
        let w0 = bessel2_cutoff_factor();
        let omega = Self::prewarp(f_c, fs);
        Self::bilinear([0.0, 0.0, 3.0], [w0 * w0 * omega * omega, 3.0 * w0 * omega, 3.0], fs)
    }

    /// Pole magnitudes from the denominator coefficients.
    pub fn pole_radii(&self) -> [f64; 2] {
        let (a1, a2) = (self.a[1], self.a[2]);
        let disc = a1 * a1 - 4.0 * a2;
        if disc < 0.0 {
            // complex pair: |p|² = a2
            let r = a2.sqrt();
            [r, r]
        } else {
            let s = disc.sqrt();
            [((-a1 + s) / 2.0).abs(), ((-a1 - s) / 2.0).abs()]
        }
    }

    pub fn is_stable(&self) -> bool {
        self.pole_radii().iter().all(|&r| r < 1.0)
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let (mut s1, mut s2) = (0.0, 0.0);
        input
            .iter()
            .map(|&x| {
                let y = self.b[0] * x + s1;
                s1 = self.b[1] * x - self.a[1] * y + s2;
                s2 = self.b[2] * x - self.a[2] * y;
                y
            })
            .collect()
    }

    /// Magnitude of the digital response at `f` Hz.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        let eval = |c: &[f64; 3]| {
            let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
            let im = -c[1] * w.sin() - c[2] * (2.0 * w).sin();
            (re * re + im * im).sqrt()
        };
        eval(&self.b) / eval(&self.a)
    }
}

/// High-pass at `f_lo` followed by low-pass at `f_hi`.
#[derive(Clone, Debug, PartialEq)]
pub struct BesselBandpass {
    pub sections: [Biquad; 2],
    pub fs: f64,
}

impl BesselBandpass {
    pub fn new(f_lo: f64, f_hi: f64, fs: f64) -> Result<Self> {
        if !(f_hi < fs / 2.0) {
            return Err(Error::Param(format!(
                "upper cutoff {f_hi} Hz must be below Nyquist ({} Hz)",
                fs / 2.0
            )));
        }
        if !(f_lo > 0.0 && f_lo < f_hi) {
            return Err(Error::Param(format!("need 0 < f_lo ({f_lo}) < f_hi ({f_hi})")));
        }
        Ok(Self {
            sections: [Biquad::bessel_highpass(f_lo, fs), Biquad::bessel_lowpass(f_hi, fs)],
            fs,
        })
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let mid = self.sections[0].process(input);
        self.sections[1].process(&mid)
    }

    pub fn magnitude(&self, f: f64) -> f64 {
        self.sections.iter().map(|s| s.magnitude(f, self.fs)).product()
    }
}
