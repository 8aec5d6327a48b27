use hrtf_latent::data::synth::synth_magnitude_db;
use hrtf_latent::data::Ear;
use hrtf_latent::diffusion::SamplerConfig;
use hrtf_latent::pipeline::min_phase_reconstruct;
use wasm_bindgen::prelude::*;

const F_MAX_HZ: f64 = 20_000.0;

fn ear(right: bool) -> Ear {
    if right {
        Ear::Right
    } else {
        Ear::Left
    }
}

fn horizontal_dir(azimuth_deg: f64) -> [f64; 3] {
    let a = azimuth_deg.to_radians();
    [a.cos(), a.sin(), 0.0]
}

fn frequency(bin: usize, bins: usize) -> f64 {
    F_MAX_HZ * bin as f64 / (bins.max(2) - 1) as f64
}

/// Horizontal-plane magnitude map of the synthetic head, `azimuths × bins` dB, row-major.
#[wasm_bindgen]
pub fn magnitude_map(
    head_width_cm: f64,
    concha_depth_cm: f64,
    right: bool,
    azimuths: usize,
    bins: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(azimuths * bins);
    for a in 0..azimuths {
        let dir = horizontal_dir(360.0 * a as f64 / azimuths as f64);
        for k in 0..bins {
            out.push(synth_magnitude_db(
                dir,
                ear(right),
                frequency(k, bins),
                F_MAX_HZ,
                head_width_cm,
                concha_depth_cm,
            ));
        }
    }
    out
}

/// Minimum-phase impulse response of one azimuth of the synthetic head (`4·bins` taps).
#[wasm_bindgen]
pub fn impulse_response(
    head_width_cm: f64,
    concha_depth_cm: f64,
    right: bool,
    azimuth_deg: f64,
    bins: usize,
) -> Result<Vec<f64>, JsError> {
    let dir = horizontal_dir(azimuth_deg);
    let mag: Vec<f64> = (0..bins)
        .map(|k| {
            synth_magnitude_db(
                dir,
                ear(right),
                frequency(k, bins),
                F_MAX_HZ,
                head_width_cm,
                concha_depth_cm,
            )
        })
        .collect();
    Ok(min_phase_reconstruct(&mag, 4 * bins)?)
}

/// DDIM inference schedule as `[t, √ᾱ_t, σ_t]` triples, earliest timestep first.
#[wasm_bindgen]
pub fn ddim_schedule(infer_steps: usize, eta: f64) -> Result<Vec<f64>, JsError> {
    let cfg = SamplerConfig {
        infer_steps,
        eta,
        ..SamplerConfig::default()
    };
    let sched = cfg.schedule()?;
    let steps = sched.inference_timesteps(infer_steps)?;
    let mut out = Vec::with_capacity(3 * steps.len());
    let mut prev = 0;
    for &t in &steps {
        let (a, a_prev) = (sched.alpha_bar(t), sched.alpha_bar(prev));
        let sigma = eta * ((1.0 - a_prev) / (1.0 - a)).sqrt() * (1.0 - a / a_prev).sqrt();
        out.extend([t as f64, a.sqrt(), sigma]);
        prev = t;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_has_notch_only_on_the_ear_side() {
        let bins = 64;
        let m = magnitude_map(15.0, 1.3, false, 4, bins);
        assert_eq!(m.len(), 4 * bins);
        // Azimuth 90° faces the left ear axis (0, 1, 0); 270° is the far side.
        let near = &m[bins..2 * bins];
        let far = &m[3 * bins..];
        assert!(near.iter().cloned().fold(f64::INFINITY, f64::min) < -10.0);
        assert!(far.iter().all(|&v| v > -13.0));
    }

    #[test]
    fn impulse_length_and_energy_front_loaded() {
        let h = impulse_response(15.0, 1.3, true, 270.0, 32).unwrap();
        assert_eq!(h.len(), 128);
        let total: f64 = h.iter().map(|v| v * v).sum();
        let head: f64 = h[..16].iter().map(|v| v * v).sum();
        assert!(head / total > 0.9);
    }

    #[test]
    fn schedule_is_monotone_and_deterministic_at_zero_eta() {
        let s = ddim_schedule(10, 0.0).unwrap();
        assert_eq!(s.len(), 30);
        let roots: Vec<f64> = s.chunks(3).map(|c| c[1]).collect();
        assert!(roots.windows(2).all(|w| w[1] < w[0]));
        assert!(s.chunks(3).all(|c| c[2] == 0.0));
        // The step that lands on t = 0 has ᾱ = 1 and no noise even when stochastic.
        let noisy = ddim_schedule(10, 1.0).unwrap();
        assert_eq!(noisy[2], 0.0);
        assert!(noisy.chunks(3).skip(1).all(|c| c[2] > 0.0));
    }
}
