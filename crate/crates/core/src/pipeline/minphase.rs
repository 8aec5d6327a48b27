//! Minimum-phase impulse responses from log-magnitude spectra via the real cepstrum.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{contract, Error, Result};

/// Impulse response of length `n_fft` whose magnitude follows `magnitude_db`.
///
/// `magnitude_db` samples the spectrum at evenly spaced frequencies from 0 to Nyquist
/// inclusive. When it does not already hold `n_fft/2 + 1` bins it is resampled
/// linearly in dB onto the FFT grid.
pub fn min_phase_reconstruct(magnitude_db: &[f64], n_fft: usize) -> Result<Vec<f64>> {
    let l = magnitude_db.len();
    if l < 2 {
        return Err(contract(
            "minimum-phase reconstruction needs at least 2 bins",
        ));
    }
    if n_fft % 2 != 0 || n_fft < 2 * (l - 1) {
        return Err(contract(format!(
            "n_fft must be even and at least {}, got {n_fft}",
            2 * (l - 1)
        )));
    }
    if magnitude_db.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "min_phase_reconstruct input".into(),
        });
    }
    let half = resample_db(magnitude_db, n_fft / 2 + 1);
    Ok(min_phase_from_half_spectrum(&half, n_fft))
}

/// Linear interpolation of an inclusive `0..=Nyquist` grid onto `bins` points.
pub fn resample_db(values: &[f64], bins: usize) -> Vec<f64> {
    let l = values.len();
    if l == bins {
        return values.to_vec();
    }
    (0..bins)
        .map(|k| {
            let x = k as f64 * (l - 1) as f64 / (bins - 1) as f64;
            let i = (x.floor() as usize).min(l - 2);
            let lam = x - i as f64;
            (1.0 - lam) * values[i] + lam * values[i + 1]
        })
        .collect()
}

fn min_phase_from_half_spectrum(half_db: &[f64], n: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let to_ln = std::f64::consts::LN_10 / 20.0;
    let mut buf: Vec<Complex64> = (0..n)
        .map(|k| {
            let j = if k <= n / 2 { k } else { n - k };
            Complex64::new(half_db[j] * to_ln, 0.0)
        })
        .collect();
    inv.process(&mut buf);
    let scale = 1.0 / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let fold = match k {
            0 => 1.0,
            k if k == n / 2 => 1.0,
            k if k < n / 2 => 2.0,
            _ => 0.0,
        };
        *c = Complex64::new(c.re * scale * fold, 0.0);
    }
    fwd.process(&mut buf);
    for c in buf.iter_mut() {
        *c = c.exp();
    }
    inv.process(&mut buf);
    buf.iter().map(|c| c.re * scale).collect()
}

/// Magnitude in dB of the first `n/2 + 1` FFT bins of `impulse`.
pub fn magnitude_db(impulse: &[f64]) -> Vec<f64> {
    let n = impulse.len();
    let mut buf: Vec<Complex64> = impulse.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::<f64>::new()
        .plan_fft_forward(n)
        .process(&mut buf);
    buf[..n / 2 + 1]
        .iter()
        .map(|c| 20.0 * c.norm().log10())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_spectrum_is_unit_impulse() {
        let h = min_phase_reconstruct(&[0.0; 33], 128).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-9);
        assert!(h[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn recovers_known_minimum_phase_filter() {
        // H(z) = 1 − 0.5 z⁻¹ sampled on 65 bins, exactly the half spectrum of n_fft = 128.
        let n = 128;
        let mag: Vec<f64> = (0..=n / 2)
            .map(|k| {
                let w = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                let (re, im) = (1.0 - 0.5 * w.cos(), 0.5 * w.sin());
                10.0 * (re * re + im * im).log10()
            })
            .collect();
        let h = min_phase_reconstruct(&mag, n).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-6);
        assert!((h[1] + 0.5).abs() < 1e-6);
        assert!(h[2..].iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn rejects_short_fft_and_non_finite() {
        assert!(min_phase_reconstruct(&[0.0; 33], 62).is_err());
        assert!(min_phase_reconstruct(&[0.0; 33], 65).is_err());
        assert!(min_phase_reconstruct(&[0.0, f64::NAN, 0.0], 8).is_err());
    }

    #[test]
    fn resampling_keeps_endpoints() {
        let r = resample_db(&[0.0, 10.0, -2.0], 9);
        assert_eq!((r[0], r[4], r[8]), (0.0, 10.0, -2.0));
        assert!((r[2] - 5.0).abs() < 1e-12);
    }
}
