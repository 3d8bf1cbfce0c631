//! Glottal pulse extraction.
//!
//! Within each voiced run of the pitch track, pulses sit at local maxima of
//! the absolute deviation from the local frame mean, seeded from the
//! strongest peak in the run and propagated period-by-period with a +-20%
//! search window around each predicted position.

use crate::audio_io::Waveform;
use crate::features::PitchTrack;

/// Located pulses: strictly increasing times plus peak deviations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PulseSequence {
    pub pulse_times_s: Vec<f64>,
    /// Peak absolute deviation from the local frame mean at each pulse.
    pub pulse_amplitudes: Vec<f64>,
}

impl PulseSequence {
    pub fn len(&self) -> usize {
        self.pulse_times_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pulse_times_s.is_empty()
    }
}

/// Argmax of the deviation signal over `range`.
fn peak_in(dev: &[f64], range: std::ops::Range<usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for n in range {
        if n >= dev.len() {
            break;
        }
        if best.is_none_or(|(_, v)| dev[n] > v) {
            best = Some((n, dev[n]));
        }
    }
    best.map(|(n, _)| n)
}

/// Locate pulses within the voiced regions of `track`. An empty voiced set
/// yields an empty sequence.
pub fn extract_pulses(w: &Waveform, track: &PitchTrack) -> PulseSequence {
    let rate = w.sample_rate_hz as f64;
    let frame_len = (track.frame_s * rate).round() as usize;
    let hop = (track.hop_s * rate).round() as usize;
    if track.frames.is_empty() || hop == 0 {
        return PulseSequence::default();
    }

    // Local mean per frame on the track grid; deviation = |x - local mean|.
    let frame_mean = |i: usize| -> f64 {
        let start = (i * hop).min(w.samples.len().saturating_sub(1));
        let end = (start + frame_len).min(w.samples.len());
        let block = &w.samples[start..end];
        block.iter().sum::<f64>() / block.len().max(1) as f64
    };
    let means: Vec<f64> = (0..track.frames.len()).map(frame_mean).collect();
    let frame_of = |n: usize| -> usize {
        let centered = n.saturating_sub(frame_len / 2);
        (centered / hop).min(track.frames.len() - 1)
    };
    let dev: Vec<f64> = w
        .samples
        .iter()
        .enumerate()
        .map(|(n, &s)| (s - means[frame_of(n)]).abs())
        .collect();

    // Period (in samples) at a sample position, from the nearest voiced frame.
    let period_at = |n: usize| -> Option<f64> {
        let i = frame_of(n);
        let f = track.frames[i]
            .f0_hz
            .or_else(|| {
                // Nearest voiced neighbor within the run.
                let left = track.frames[..i].iter().rev().find_map(|f| f.f0_hz);
                let right = track.frames[i..].iter().find_map(|f| f.f0_hz);
                left.or(right)
            })?;
        Some(rate / f)
    };

    let mut pulses: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < track.frames.len() {
        if track.frames[i].f0_hz.is_none() {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < track.frames.len() && track.frames[i].f0_hz.is_some() {
            i += 1;
        }
        let region_start = run_start * hop;
        let region_end = (((i - 1) * hop) + frame_len).min(w.samples.len());
        if region_end <= region_start {
            continue;
        }

        let Some(seed) = peak_in(&dev, region_start..region_end) else {
            continue;
        };
        if dev[seed] <= 0.0 {
            continue;
        }

        let mut run_pulses = vec![seed];
        // Propagate right.
        let mut p = seed;
        loop {
            let Some(t) = period_at(p) else { break };
            let predict = p as f64 + t;
            let lo = (predict - 0.2 * t).round().max(0.0) as usize;
            let hi = ((predict + 0.2 * t).round() as usize).min(region_end);
            if lo >= hi || predict >= region_end as f64 {
                break;
            }
            match peak_in(&dev, lo..hi) {
                Some(q) if q > p => {
                    run_pulses.push(q);
                    p = q;
                }
                _ => break,
            }
        }
        // Propagate left.
        let mut p = seed;
        loop {
            let Some(t) = period_at(p) else { break };
            let predict = p as f64 - t;
            if predict < region_start as f64 {
                break;
            }
            let lo = (predict - 0.2 * t).round().max(region_start as f64) as usize;
            let hi = ((predict + 0.2 * t).round() as usize).min(region_end);
            if lo >= hi {
                break;
            }
            match peak_in(&dev, lo..hi) {
                Some(q) if q < p => {
                    run_pulses.push(q);
                    p = q;
                }
                _ => break,
            }
        }
        run_pulses.sort_unstable();
        pulses.extend(run_pulses);
    }

    pulses.sort_unstable();
    pulses.dedup();
    PulseSequence {
        pulse_times_s: pulses.iter().map(|&n| n as f64 / rate).collect(),
        pulse_amplitudes: pulses.iter().map(|&n| dev[n]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::{Waveform, PIPELINE_RATE_HZ};
    use crate::features::{track_pitch, PitchConfig};
    use crate::synth::{synth_voice_with_truth, PulseShape, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pulse_count_matches_generator() {
        let spec = SynthSpec {
            f0_hz: 120.0,
            duration_s: 2.0,
            pulse_shape: PulseShape::Impulse,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (w, truth) = synth_voice_with_truth(&spec, &mut rng).unwrap();
        let cfg = PitchConfig::default();
        let track = track_pitch(&w, &cfg).unwrap();
        let pulses = extract_pulses(&w, &track);
        // ~ duration * f0 with edge effects; generator count is exact truth.
        assert!(
            (pulses.len() as i64 - truth.pulse_samples.len() as i64).abs() <= 5,
            "found {} pulses, generator made {}",
            pulses.len(),
            truth.pulse_samples.len()
        );
        assert!((235..=241).contains(&pulses.len()), "count {}", pulses.len());
    }

    #[test]
    fn empty_voiced_set_yields_empty_sequence() {
        let w = Waveform::new(vec![0.5; 32_000], PIPELINE_RATE_HZ, "silent").unwrap();
        let cfg = PitchConfig::default();
        let track = track_pitch(&w, &cfg).unwrap();
        let pulses = extract_pulses(&w, &track);
        assert!(pulses.is_empty());
    }

    #[test]
    fn pulses_avoid_silent_gap() {
        // Voiced - 0.5 s silence - voiced inside 2 s.
        let spec = SynthSpec {
            f0_hz: 120.0,
            duration_s: 0.7,
            pulse_shape: PulseShape::Impulse,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, _) = synth_voice_with_truth(&spec, &mut rng).unwrap();
        let (b, _) = synth_voice_with_truth(&spec, &mut rng).unwrap();
        let mut samples = a.samples.clone();
        samples.extend(std::iter::repeat(0.5).take(8_000)); // 0.5 s silence
        samples.extend(b.samples.iter().copied());
        let w = Waveform::new(samples, PIPELINE_RATE_HZ, "gap").unwrap();
        let cfg = PitchConfig::default();
        let track = track_pitch(&w, &cfg).unwrap();
        let pulses = extract_pulses(&w, &track);
        assert!(!pulses.is_empty());
        let gap_start = 0.7 + 0.05;
        let gap_end = 1.2 - 0.05;
        for &t in &pulses.pulse_times_s {
            assert!(
                !(gap_start..gap_end).contains(&t),
                "pulse at {t} inside silent gap"
            );
        }
    }

    #[test]
    fn strictly_increasing_times() {
        let spec = SynthSpec {
            f0_hz: 180.0,
            duration_s: 1.0,
            jitter_frac: 0.01,
            shimmer_frac: 0.03,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = crate::synth::synth_voice(&spec, &mut rng).unwrap();
        let cfg = PitchConfig::default();
        let track = track_pitch(&w, &cfg).unwrap();
        let pulses = extract_pulses(&w, &track);
        for pair in pulses.pulse_times_s.windows(2) {
            assert!(pair[1] > pair[0]);
        }
        assert!(pulses.pulse_amplitudes.iter().all(|&a| a > 0.0));
    }
}
