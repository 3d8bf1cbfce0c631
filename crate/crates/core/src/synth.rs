//! Synthetic voiced-signal generation.
//!
//! Produces pulse-train "voices" with known ground-truth pitch, jitter,
//! shimmer, noise level, and formants. The returned [`SynthTruth`] carries the
//! realized pulse positions, periods, amplitudes and component powers, which
//! the feature tests use as independent oracles. [`make_corpus`] builds
//! gender-labeled corpora from configurable f0 distributions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio_io::{Gender, Waveform, PIPELINE_RATE_HZ};
use crate::error::{Error, Result};

/// Excitation pulse shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseShape {
    /// Single-sample impulse; exact-period oracles.
    Impulse,
    /// Rosenberg glottal pulse; more speech-like spectrum.
    Rosenberg,
}

/// Specification of one synthetic voiced utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub f0_hz: f64,
    pub duration_s: f64,
    /// Per-period std as a fraction of the period.
    pub jitter_frac: f64,
    /// Per-pulse amplitude std as a fraction of the nominal amplitude.
    pub shimmer_frac: f64,
    /// White-noise RMS relative to the voiced-part RMS.
    pub noise_rms_frac: f64,
    pub formants_hz: [f64; 3],
    pub formant_bw_hz: [f64; 3],
    pub pulse_shape: PulseShape,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            f0_hz: 120.0,
            duration_s: 2.0,
            jitter_frac: 0.0,
            shimmer_frac: 0.0,
            noise_rms_frac: 0.0,
            formants_hz: [700.0, 1220.0, 2600.0],
            formant_bw_hz: [80.0, 90.0, 120.0],
            pulse_shape: PulseShape::Rosenberg,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(50.0..=600.0).contains(&self.f0_hz) {
            return Err(Error::config(format!(
                "f0_hz {} outside [50, 600]",
                self.f0_hz
            )));
        }
        if self.duration_s <= 0.0 {
            return Err(Error::config("duration_s must be positive"));
        }
        for (name, v) in [
            ("jitter_frac", self.jitter_frac),
            ("shimmer_frac", self.shimmer_frac),
            ("noise_rms_frac", self.noise_rms_frac),
        ] {
            if !(0.0..0.5).contains(&v) {
                return Err(Error::config(format!("{name} {v} outside [0, 0.5)")));
            }
        }
        Ok(())
    }
}

/// Realized ground truth of a synthesized utterance.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// Pulse onset sample indices, strictly increasing.
    pub pulse_samples: Vec<usize>,
    /// Realized periods in seconds (diffs of the rounded pulse positions).
    pub periods_s: Vec<f64>,
    /// Realized pulse amplitudes (pre-filter excitation scale).
    pub amplitudes: Vec<f64>,
    /// Mean power of the voiced (filtered, noiseless) component.
    pub harmonic_power: f64,
    /// Mean power of the additive noise component.
    pub noise_power: f64,
}

/// Cascade of three two-pole resonators; pole radius exp(-pi*bw/rate).
fn resonate(x: &[f64], formants_hz: &[f64; 3], bw_hz: &[f64; 3], rate: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    for (&f, &bw) in formants_hz.iter().zip(bw_hz) {
        let r = (-std::f64::consts::PI * bw / rate).exp();
        let theta = 2.0 * std::f64::consts::PI * f / rate;
        let a1 = 2.0 * r * theta.cos();
        let a2 = -r * r;
        // Unity gain at the resonance frequency.
        let gain = (1.0 - r) * (1.0 - 2.0 * r * (2.0 * theta).cos() + r * r).sqrt();
        let mut y1 = 0.0;
        let mut y2 = 0.0;
        for v in y.iter_mut() {
            let out = gain * *v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = out;
            *v = out;
        }
    }
    y
}

/// Rosenberg glottal pulse sampled at `len` points spanning one period.
/// Opening phase 40% of the period, closing phase 16%.
fn rosenberg_pulse(len: usize) -> Vec<f64> {
    let tp = 0.40 * len as f64;
    let tn = 0.16 * len as f64;
    (0..len)
        .map(|i| {
            let t = i as f64;
            if t <= tp {
                0.5 * (1.0 - (std::f64::consts::PI * t / tp).cos())
            } else if t <= tp + tn {
                (std::f64::consts::PI * (t - tp) / (2.0 * tn)).cos()
            } else {
                0.0
            }
        })
        .collect()
}

/// Synthesize one utterance and return the realized ground truth.
pub fn synth_voice_with_truth(spec: &SynthSpec, rng: &mut impl Rng) -> Result<(Waveform, SynthTruth)> {
    spec.validate()?;
    let rate = PIPELINE_RATE_HZ as f64;
    let n = (spec.duration_s * rate).round() as usize;
    let nominal_period = 1.0 / spec.f0_hz;

    let jitter_dist = Normal::new(0.0, spec.jitter_frac.max(1e-300)).unwrap();
    let shimmer_dist = Normal::new(0.0, spec.shimmer_frac.max(1e-300)).unwrap();

    // Pulse onsets: cumulative perturbed periods, rounded to samples.
    let mut onsets_s = Vec::new();
    let mut amps = Vec::new();
    let mut t = nominal_period / 2.0;
    while t < spec.duration_s - nominal_period * 0.25 {
        onsets_s.push(t);
        let xi: f64 = if spec.shimmer_frac > 0.0 {
            shimmer_dist.sample(rng)
        } else {
            0.0
        };
        amps.push((1.0 + xi).max(0.05));
        let eta: f64 = if spec.jitter_frac > 0.0 {
            jitter_dist.sample(rng)
        } else {
            0.0
        };
        t += nominal_period * (1.0 + eta);
    }
    let pulse_samples: Vec<usize> = onsets_s
        .iter()
        .map(|&s| (s * rate).round() as usize)
        .filter(|&i| i < n)
        .collect();
    let amps = amps[..pulse_samples.len()].to_vec();

    // Excitation.
    let mut excitation = vec![0.0f64; n];
    match spec.pulse_shape {
        PulseShape::Impulse => {
            for (&p, &a) in pulse_samples.iter().zip(&amps) {
                excitation[p] += a;
            }
        }
        PulseShape::Rosenberg => {
            for (k, (&p, &a)) in pulse_samples.iter().zip(&amps).enumerate() {
                let period_samples = if k + 1 < pulse_samples.len() {
                    pulse_samples[k + 1] - p
                } else {
                    (nominal_period * rate).round() as usize
                };
                let pulse = rosenberg_pulse(period_samples.max(4));
                for (i, &g) in pulse.iter().enumerate() {
                    if p + i < n {
                        excitation[p + i] += a * g;
                    }
                }
            }
        }
    }

    let voiced = resonate(&excitation, &spec.formants_hz, &spec.formant_bw_hz, rate);
    let harmonic_power = voiced.iter().map(|v| v * v).sum::<f64>() / n as f64;

    let mut noise = vec![0.0f64; n];
    let mut noise_power = 0.0;
    if spec.noise_rms_frac > 0.0 {
        let target_rms = spec.noise_rms_frac * harmonic_power.sqrt();
        let unit = Normal::new(0.0, 1.0).unwrap();
        for v in noise.iter_mut() {
            *v = unit.sample(rng);
        }
        let raw_rms = (noise.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let scale = if raw_rms > 0.0 { target_rms / raw_rms } else { 0.0 };
        for v in noise.iter_mut() {
            *v *= scale;
        }
        noise_power = noise.iter().map(|v| v * v).sum::<f64>() / n as f64;
    }

    let raw: Vec<f64> = voiced.iter().zip(&noise).map(|(v, e)| v + e).collect();
    let periods_s: Vec<f64> = pulse_samples
        .windows(2)
        .map(|w| (w[1] - w[0]) as f64 / rate)
        .collect();

    let wave = Waveform::from_raw(&raw, PIPELINE_RATE_HZ, "synth")?;
    Ok((
        wave,
        SynthTruth {
            pulse_samples,
            periods_s,
            amplitudes: amps,
            harmonic_power,
            noise_power,
        },
    ))
}

/// Synthesize one utterance.
pub fn synth_voice(spec: &SynthSpec, rng: &mut impl Rng) -> Result<Waveform> {
    synth_voice_with_truth(spec, rng).map(|(w, _)| w)
}

/// Specification of a gender-labeled synthetic corpus.
///
/// The default f0 distributions (F: 210/30 Hz, M: 120/25 Hz) are configuration
/// defaults chosen to be separable yet overlapping; they are not measured
/// speech statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_per_gender: usize,
    pub f0_mean_f: f64,
    pub f0_std_f: f64,
    pub f0_mean_m: f64,
    pub f0_std_m: f64,
    pub jitter_range: (f64, f64),
    pub shimmer_range: (f64, f64),
    pub noise_range: (f64, f64),
    pub formants_f: [f64; 3],
    pub formants_m: [f64; 3],
    pub formant_bw_hz: [f64; 3],
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_per_gender: 50,
            f0_mean_f: 210.0,
            f0_std_f: 30.0,
            f0_mean_m: 120.0,
            f0_std_m: 25.0,
            jitter_range: (0.002, 0.012),
            shimmer_range: (0.01, 0.05),
            noise_range: (0.01, 0.05),
            formants_f: [800.0, 1400.0, 2780.0],
            formants_m: [700.0, 1220.0, 2600.0],
            formant_bw_hz: [90.0, 110.0, 170.0],
            duration_s: 6.0,
            seed: 0,
        }
    }
}

fn uniform_in(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.gen_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Generate a labeled corpus: `n_per_gender` F utterances then M utterances.
/// Deterministic for a fixed spec.
pub fn make_corpus(spec: &CorpusSpec) -> Result<Vec<Waveform>> {
    make_corpus_inner(spec, None, "default")
}

/// The "overlyhappy" vocal-adversary proxy: every utterance, regardless of
/// its gender label, draws its pitch from the female f0 distribution.
pub fn make_overlyhappy_corpus(spec: &CorpusSpec) -> Result<Vec<Waveform>> {
    make_corpus_inner(spec, Some((spec.f0_mean_f, spec.f0_std_f)), "overlyhappy")
}

fn make_corpus_inner(
    spec: &CorpusSpec,
    f0_override: Option<(f64, f64)>,
    tag: &str,
) -> Result<Vec<Waveform>> {
    if spec.n_per_gender == 0 {
        return Err(Error::config("n_per_gender must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(2 * spec.n_per_gender);
    for gender in [Gender::F, Gender::M] {
        let (mut mean, mut std, formants) = match gender {
            Gender::F => (spec.f0_mean_f, spec.f0_std_f, spec.formants_f),
            Gender::M => (spec.f0_mean_m, spec.f0_std_m, spec.formants_m),
        };
        if let Some((m, s)) = f0_override {
            (mean, std) = (m, s);
        }
        let f0_dist = Normal::new(mean, std).map_err(|e| Error::config(e.to_string()))?;
        for i in 0..spec.n_per_gender {
            let f0 = f0_dist.sample(&mut rng).clamp(60.0, 400.0);
            let mut formants_hz = formants;
            for f in formants_hz.iter_mut() {
                *f *= 1.0 + 0.03 * rng.gen_range(-1.0..1.0);
            }
            let utt = SynthSpec {
                f0_hz: f0,
                duration_s: spec.duration_s,
                jitter_frac: uniform_in(&mut rng, spec.jitter_range),
                shimmer_frac: uniform_in(&mut rng, spec.shimmer_range),
                noise_rms_frac: uniform_in(&mut rng, spec.noise_range),
                formants_hz,
                formant_bw_hz: spec.formant_bw_hz,
                pulse_shape: PulseShape::Rosenberg,
            };
            let mut w = synth_voice(&utt, &mut rng)?;
            w.source_id = format!("{}{:03}", gender.as_str().to_lowercase(), i);
            w.gender = Some(gender);
            w.tags.insert(tag.to_string());
            out.push(w);
        }
    }
    Ok(out)
}
