//! Autocorrelation pitch tracking.
//!
//! Per frame: normalized autocorrelation of the DC-removed, Hann-windowed
//! frame, divided by the window's own autocorrelation (lag-domain
//! correction). The best candidate lag is refined to sub-sample precision by
//! maximizing the band-limited interpolant of the correlation ratio, so peak
//! strengths stay accurate enough for harmonicity estimates on clean signals.
//! A greedy per-frame choice plus a 3-point median filter stands in for a
//! full Viterbi path search.

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::audio_io::{frame_signal, Waveform, Window};
use crate::error::Result;
use crate::features::{PitchConfig, INTENSITY_FLOOR_DB};

/// One analysis frame of the pitch track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchFrame {
    pub time_s: f64,
    /// Fundamental frequency, or `None` for unvoiced frames.
    pub f0_hz: Option<f64>,
    /// Normalized autocorrelation peak strength in [0,1].
    pub strength: f64,
}

/// Frame-level pitch contour.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub frames: Vec<PitchFrame>,
    pub frame_s: f64,
    pub hop_s: f64,
}

impl PitchTrack {
    pub fn voiced_count(&self) -> usize {
        self.frames.iter().filter(|f| f.f0_hz.is_some()).count()
    }

    pub fn fraction_unvoiced(&self) -> f64 {
        if self.frames.is_empty() {
            return 1.0;
        }
        1.0 - self.voiced_count() as f64 / self.frames.len() as f64
    }
}

/// Power spectrum of `x` zero-padded to `fft_n`.
fn power_spectrum(x: &[f64], fft_n: usize, fft: &dyn Fft<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(fft_n)
        .collect();
    fft.process(&mut buf);
    buf.iter().map(|c| c.norm_sqr()).collect()
}

/// Autocorrelation at integer lags from a power spectrum (unnormalized).
fn autocorr(power: &[f64], ifft: &dyn Fft<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = power.iter().map(|&p| Complex::new(p, 0.0)).collect();
    ifft.process(&mut buf);
    buf.iter().map(|c| c.re / power.len() as f64).collect()
}

/// Band-limited interpolation of the autocorrelation at fractional lag `tau`,
/// evaluated directly from the power spectrum via a Chebyshev cosine
/// recurrence. Unnormalized; divide by the value at lag 0.
fn autocorr_at(power: &[f64], tau: f64) -> f64 {
    let n = power.len();
    let half = n / 2;
    let theta = 2.0 * std::f64::consts::PI * tau / n as f64;
    let step = theta.cos();
    // cos(k*theta) by recurrence: c_{k+1} = 2 cos(theta) c_k - c_{k-1}.
    let mut prev = 1.0; // k = 0
    let mut cur = step; // k = 1
    let mut sum = power[0];
    for k in 1..half {
        sum += 2.0 * power[k] * cur;
        let next = 2.0 * step * cur - prev;
        prev = cur;
        cur = next;
    }
    sum += power[half] * cur;
    sum
}

struct Candidate {
    lag: f64,
    strength: f64,
    score: f64,
}

/// Track pitch over the whole waveform. All-silent input yields an
/// all-unvoiced track; input shorter than one frame yields an empty track.
pub fn track_pitch(w: &Waveform, cfg: &PitchConfig) -> Result<PitchTrack> {
    cfg.validate()?;
    let rate = w.sample_rate_hz as f64;
    let frame_len = (cfg.frame_s * rate).round() as usize;
    let hop = (cfg.hop_s * rate).round() as usize;
    if w.samples.len() < frame_len {
        return Ok(PitchTrack {
            frames: vec![],
            frame_s: cfg.frame_s,
            hop_s: cfg.hop_s,
        });
    }

    let frames = frame_signal(w, cfg.frame_s, cfg.hop_s, Window::Hann)?;
    let fft_n = (2 * frame_len).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(fft_n);
    let inv = planner.plan_fft_inverse(fft_n);

    // Window autocorrelation, coarse and spectral, computed once.
    let win = Window::Hann.values(frame_len);
    let win_power = power_spectrum(&win, fft_n, fwd.as_ref());
    let win_ac = autocorr(&win_power, inv.as_ref());
    let win_ac0 = win_ac[0];

    // Per-frame intensity for the silence gate.
    let dbs: Vec<f64> = (0..frames.len())
        .map(|i| {
            let block = &w.samples[i * hop..i * hop + frame_len];
            let m = block.iter().sum::<f64>() / frame_len as f64;
            let p = block.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / frame_len as f64;
            if p > 0.0 {
                (10.0 * p.log10()).max(INTENSITY_FLOOR_DB)
            } else {
                INTENSITY_FLOOR_DB
            }
        })
        .collect();
    let max_db = dbs.iter().cloned().fold(INTENSITY_FLOOR_DB, f64::max);

    let lag_min = ((rate / cfg.ceiling_hz).floor() as usize).max(2);
    let lag_max = ((rate / cfg.floor_hz).ceil() as usize).min(frame_len - 1);

    let mut out = Vec::with_capacity(frames.len());
    for (i, frame) in frames.frames.iter().enumerate() {
        let time_s = frames.start_times[i];
        let loud_enough = dbs[i] > max_db + cfg.silence_threshold_db && dbs[i] > INTENSITY_FLOOR_DB;

        let power = power_spectrum(frame, fft_n, fwd.as_ref());
        let ac = autocorr(&power, inv.as_ref());
        let ac0 = ac[0];
        if ac0 <= 0.0 || !loud_enough {
            out.push(PitchFrame {
                time_s,
                f0_hz: None,
                strength: 0.0,
            });
            continue;
        }

        // Window-corrected normalized autocorrelation at integer lags.
        let nr = |l: usize| (ac[l] / ac0) / (win_ac[l] / win_ac0);

        // Local maxima over the candidate lag range; greedy best by
        // octave-cost-penalized strength.
        let mut best: Option<Candidate> = None;
        for l in lag_min..=lag_max.min(fft_n / 2 - 1) {
            let v = nr(l);
            if v < nr(l - 1) || v < nr(l + 1) || v < 0.1 {
                continue;
            }
            // Parabolic vertex from the three coarse values.
            let (a, b, c) = (nr(l - 1), v, nr(l + 1));
            let denom = a - 2.0 * b + c;
            let offset = if denom.abs() > 1e-12 {
                (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            let lag = l as f64 + offset;
            let f = rate / lag;
            let score = b - cfg.octave_cost * (cfg.ceiling_hz / f).log2();
            if best.as_ref().is_none_or(|prev| score > prev.score) {
                best = Some(Candidate {
                    lag,
                    strength: b,
                    score,
                });
            }
        }

        let frame_out = match best {
            Some(cand) => {
                // Refine by maximizing the band-limited interpolant of
                // ra(tau)/rw(tau) within one sample of the coarse vertex.
                let sa0 = autocorr_at(&power, 0.0);
                let sw0 = autocorr_at(&win_power, 0.0);
                let g = |tau: f64| {
                    let num = autocorr_at(&power, tau) / sa0;
                    let den = autocorr_at(&win_power, tau) / sw0;
                    if den > 1e-9 {
                        num / den
                    } else {
                        0.0
                    }
                };
                let mut lo = (cand.lag - 1.0).max(lag_min as f64 - 0.5);
                let mut hi = (cand.lag + 1.0).min(lag_max as f64 + 0.5);
                for _ in 0..40 {
                    let m1 = lo + (hi - lo) / 3.0;
                    let m2 = hi - (hi - lo) / 3.0;
                    if g(m1) < g(m2) {
                        lo = m1;
                    } else {
                        hi = m2;
                    }
                }
                let lag = 0.5 * (lo + hi);
                let strength = g(lag).clamp(0.0, 1.0 - 1e-9).max(cand.strength.min(1.0 - 1e-9));
                let f0 = (rate / lag).clamp(cfg.floor_hz, cfg.ceiling_hz);
                if strength >= cfg.voicing_threshold {
                    PitchFrame {
                        time_s,
                        f0_hz: Some(f0),
                        strength,
                    }
                } else {
                    PitchFrame {
                        time_s,
                        f0_hz: None,
                        strength,
                    }
                }
            }
            None => PitchFrame {
                time_s,
                f0_hz: None,
                strength: 0.0,
            },
        };
        out.push(frame_out);
    }

    median_filter_voiced(&mut out);
    Ok(PitchTrack {
        frames: out,
        frame_s: cfg.frame_s,
        hop_s: cfg.hop_s,
    })
}

/// 3-point median filter over each voiced run; removes isolated octave errors.
fn median_filter_voiced(frames: &mut [PitchFrame]) {
    let n = frames.len();
    let mut i = 0;
    while i < n {
        if frames[i].f0_hz.is_none() {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && frames[i].f0_hz.is_some() {
            i += 1;
        }
        let run: Vec<f64> = frames[start..i].iter().map(|f| f.f0_hz.unwrap()).collect();
        if run.len() < 3 {
            continue;
        }
        for (j, frame) in frames[start + 1..i - 1].iter_mut().enumerate() {
            let mut tri = [run[j], run[j + 1], run[j + 2]];
            tri.sort_by(|a, b| a.partial_cmp(b).unwrap());
            frame.f0_hz = Some(tri[1]);
        }
    }
}
