//! Formant estimation: pre-emphasis, decimation to 10 kHz, order-10 Burg
//! linear prediction per voiced frame, and root solving of the prediction
//! polynomial. Utterance values are medians over voiced frames.

use nalgebra::DMatrix;

use crate::audio_io::{Waveform, Window};
use crate::error::Result;
use crate::features::PitchTrack;

const DECIMATED_RATE_HZ: f64 = 10_000.0;
const LPC_ORDER: usize = 10;
const FRAME_S: f64 = 0.025;
const FREQ_MIN_HZ: f64 = 90.0;
const FREQ_MAX_HZ: f64 = 4_800.0;
const BW_MAX_HZ: f64 = 400.0;

/// One-zero pre-emphasis with coefficient exp(-2*pi*50/rate).
fn pre_emphasize(x: &[f64], rate: f64) -> Vec<f64> {
    let a = (-2.0 * std::f64::consts::PI * 50.0 / rate).exp();
    let mut y = Vec::with_capacity(x.len());
    y.push(x[0]);
    for n in 1..x.len() {
        y.push(x[n] - a * x[n - 1]);
    }
    y
}

/// Rational 5/8 resampler (16 kHz -> 10 kHz) with a windowed-sinc anti-alias
/// low-pass designed at the 80 kHz upsampled rate.
fn resample_16k_to_10k(x: &[f64]) -> Vec<f64> {
    const UP: usize = 5;
    const DOWN: usize = 8;
    const TAPS: usize = 191; // odd, center at 95
    let center = (TAPS - 1) / 2;
    let fc_norm = 4_500.0 / 80_000.0; // cutoff below the 5 kHz Nyquist
    let mut h = [0.0f64; TAPS];
    for (i, tap) in h.iter_mut().enumerate() {
        let t = i as f64 - center as f64;
        let sinc = if t == 0.0 {
            2.0 * fc_norm
        } else {
            (2.0 * std::f64::consts::PI * fc_norm * t).sin() / (std::f64::consts::PI * t)
        };
        let hamming =
            0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (TAPS - 1) as f64).cos();
        *tap = UP as f64 * sinc * hamming;
    }

    let out_len = x.len() * UP / DOWN;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let j0 = m * DOWN; // position on the 80 kHz grid
        let mut acc = 0.0;
        // Nonzero input samples sit at multiples of UP on the fine grid.
        let n_lo = (j0.saturating_sub(center) + UP - 1) / UP;
        let n_hi = ((j0 + center) / UP).min(x.len() - 1);
        for n in n_lo..=n_hi {
            let j = j0 as i64 - (n * UP) as i64 + center as i64;
            if (0..TAPS as i64).contains(&j) {
                acc += x[n] * h[j as usize];
            }
        }
        out.push(acc);
    }
    out
}

/// Burg recursion: reflection-coefficient estimate of the order-`order`
/// linear prediction polynomial A(z) = 1 + a1 z^-1 + ... Returns the a_k.
fn burg(x: &[f64], order: usize) -> Option<Vec<f64>> {
    let n = x.len();
    if n <= order + 1 {
        return None;
    }
    let mut f = x.to_vec();
    let mut b = x.to_vec();
    let mut a = vec![0.0f64; order];
    let mut dk = f.iter().map(|v| 2.0 * v * v).sum::<f64>() - f[0] * f[0] - f[n - 1] * f[n - 1];

    for k in 0..order {
        let mut num = 0.0;
        for i in k + 1..n {
            num += f[i] * b[i - 1];
        }
        if dk.abs() < 1e-300 {
            return None;
        }
        let mu = 2.0 * num / dk;
        if !mu.is_finite() {
            return None;
        }
        // Update coefficients: a'_i = a_i + mu * a_{k-i}.
        let prev = a.clone();
        a[k] = -mu;
        for i in 0..k {
            a[i] = prev[i] - mu * prev[k - 1 - i];
        }
        // Update forward/backward errors.
        for i in (k + 1..n).rev() {
            let fi = f[i];
            let bi = b[i - 1];
            f[i] = fi - mu * bi;
            b[i] = bi - mu * fi;
        }
        dk = (1.0 - mu * mu) * dk - f[k + 1] * f[k + 1] - b[n - 2] * b[n - 2];
    }
    Some(a)
}

/// Roots of z^p + a1 z^(p-1) + ... + ap via the companion matrix.
fn polynomial_roots(a: &[f64]) -> Vec<(f64, f64)> {
    let p = a.len();
    let mut companion = DMatrix::<f64>::zeros(p, p);
    for i in 1..p {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..p {
        companion[(i, p - 1)] = -a[p - 1 - i];
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|c| (c.re, c.im))
        .collect()
}

/// First three formant frequencies as medians over voiced frames, or `None`
/// when no frame yields three qualifying resonances.
pub fn formants(w: &Waveform, track: &PitchTrack) -> Result<Option<[f64; 3]>> {
    if track.voiced_count() == 0 {
        return Ok(None);
    }
    let rate = w.sample_rate_hz as f64;
    let centered = w.centered();
    let emphasized = pre_emphasize(&centered, rate);
    let decimated = resample_16k_to_10k(&emphasized);
    let frame_len = (FRAME_S * DECIMATED_RATE_HZ).round() as usize;
    // Without a taper Burg locks onto individual harmonics of a periodic
    // frame (near-zero-bandwidth poles) instead of the resonance envelope.
    let window = Window::Hann.values(frame_len);

    let mut f1s = Vec::new();
    let mut f2s = Vec::new();
    let mut f3s = Vec::new();
    let mut attempted = 0usize;
    for frame in track.frames.iter().filter(|f| f.f0_hz.is_some()) {
        attempted += 1;
        let start = (frame.time_s * DECIMATED_RATE_HZ).round() as usize;
        if start + frame_len > decimated.len() {
            continue;
        }
        let block = &decimated[start..start + frame_len];
        let mean = block.iter().sum::<f64>() / frame_len as f64;
        let frame_data: Vec<f64> = block
            .iter()
            .zip(&window)
            .map(|(v, w)| (v - mean) * w)
            .collect();
        let Some(a) = burg(&frame_data, LPC_ORDER) else {
            continue;
        };

        let mut freqs: Vec<f64> = polynomial_roots(&a)
            .into_iter()
            .filter(|&(_, im)| im > 0.0)
            .filter_map(|(re, im)| {
                let radius = (re * re + im * im).sqrt();
                if radius <= 0.0 || radius >= 1.0 {
                    return None;
                }
                let freq = im.atan2(re) * DECIMATED_RATE_HZ / (2.0 * std::f64::consts::PI);
                let bw = -radius.ln() * DECIMATED_RATE_HZ / std::f64::consts::PI;
                (freq > FREQ_MIN_HZ && freq < FREQ_MAX_HZ && bw < BW_MAX_HZ).then_some(freq)
            })
            .collect();
        if freqs.len() < 3 {
            continue;
        }
        freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        f1s.push(freqs[0]);
        f2s.push(freqs[1]);
        f3s.push(freqs[2]);
    }

    // Degenerate audio (no real resonance structure) yields three qualifying
    // roots only sporadically; require a majority of frames to agree.
    if f1s.is_empty() || (f1s.len() as f64) < 0.5 * attempted as f64 {
        return Ok(None);
    }
    Ok(Some([median(&mut f1s), median(&mut f2s), median(&mut f3s)]))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::{Waveform, PIPELINE_RATE_HZ};
    use crate::features::{track_pitch, PitchConfig};
    use crate::synth::{synth_voice, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resampler_preserves_tone_frequency() {
        // 1 kHz tone at 16 kHz stays 1 kHz at 10 kHz: count zero crossings.
        let x: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16_000.0).sin())
            .collect();
        let y = resample_16k_to_10k(&x);
        assert_eq!(y.len(), 10_000);
        let crossings = y
            .windows(2)
            .skip(100)
            .take(9_800)
            .filter(|w| w[0] < 0.0 && w[1] >= 0.0)
            .count();
        // ~1000 positive-going crossings in 0.98 s.
        assert!((975..=985).contains(&crossings), "crossings {crossings}");
    }

    #[test]
    fn burg_recovers_known_ar2() {
        // AR(2): x[n] = 1.5 x[n-1] - 0.7 x[n-2] + e[n], so a = [-1.5, 0.7].
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut x = vec![0.0f64; 4_000];
        for n in 2..x.len() {
            x[n] = 1.5 * x[n - 1] - 0.7 * x[n - 2] + noise.sample(&mut rng);
        }
        let a = burg(&x[1_000..], 2).unwrap();
        assert!((a[0] + 1.5).abs() < 0.05, "a1 {}", a[0]);
        assert!((a[1] - 0.7).abs() < 0.05, "a2 {}", a[1]);
    }

    #[test]
    fn roots_of_known_quadratic() {
        // z^2 - 1.2 z + 0.72: roots 0.6 +- 0.6i.
        let roots = polynomial_roots(&[-1.2, 0.72]);
        assert_eq!(roots.len(), 2);
        for (re, im) in roots {
            assert!((re - 0.6).abs() < 1e-9);
            assert!((im.abs() - 0.6).abs() < 1e-9);
        }
    }

    #[test]
    fn synthetic_formants_recovered_within_seven_percent() {
        let targets = [700.0, 1220.0, 2600.0];
        let spec = SynthSpec {
            f0_hz: 120.0,
            duration_s: 2.0,
            formants_hz: targets,
            formant_bw_hz: [80.0, 90.0, 120.0],
            ..Default::default()
        };
        let w = synth_voice(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cfg = PitchConfig::default();
        let track = track_pitch(&w, &cfg).unwrap();
        let got = formants(&w, &track).unwrap().expect("formants defined");
        for (g, t) in got.iter().zip(targets) {
            assert!((g - t).abs() / t < 0.07, "formant {g} vs target {t}");
        }
    }

    #[test]
    fn unvoiced_audio_yields_none() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..32_000).map(|_| rng.gen_range(0.3..0.7)).collect();
        let w = Waveform::new(samples, PIPELINE_RATE_HZ, "noise").unwrap();
        let cfg = PitchConfig::default();
        let track = track_pitch(&w, &cfg).unwrap();
        assert_eq!(formants(&w, &track).unwrap(), None);
    }
}
