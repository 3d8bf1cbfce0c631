//! Praat-style acoustic feature inventory.
//!
//! The registry holds 34 named measures per utterance: pitch statistics,
//! jitter and shimmer families, harmonicity, intensity, formants, spectral
//! centre of gravity, and voicing/break bookkeeping. Undefined measures get a
//! sentinel (0, or -80 dB for intensity) plus a quality flag rather than a
//! missing value, so downstream classifiers always see fixed-width vectors.

mod formant;
mod pitch;
mod pulses;

pub use formant::formants;
pub use pitch::{track_pitch, PitchFrame, PitchTrack};
pub use pulses::{extract_pulses, PulseSequence};

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio_io::{Gender, Waveform};
use crate::error::{Error, Result};

/// Registry version emitted with every feature file.
pub const REGISTRY_VERSION: &str = "v1";

/// Intensity sentinel for silent/undefined frames, in dB re full scale.
pub const INTENSITY_FLOOR_DB: f64 = -80.0;

macro_rules! feature_registry {
    ($(($variant:ident, $name:literal)),+ $(,)?) => {
        /// Named feature slots, in fixed registry order.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[allow(non_camel_case_types)]
        pub enum Feature {
            $($variant),+
        }

        impl Feature {
            pub const ALL: &'static [Feature] = &[$(Feature::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $(Feature::$variant => $name),+
                }
            }

            pub fn from_name(name: &str) -> Option<Feature> {
                match name {
                    $($name => Some(Feature::$variant),)+
                    _ => None,
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

feature_registry![
    (DurationS, "duration_s"),
    (PitchMin, "pitch_min"),
    (PitchMax, "pitch_max"),
    (PitchMean, "pitch_mean"),
    (PitchMedian, "pitch_median"),
    (PitchStd, "pitch_std"),
    (F0, "f0"),
    (PeriodMean, "period_mean"),
    (PeriodStd, "period_std"),
    (NumPulses, "num_pulses"),
    (NumPeriods, "num_periods"),
    (NumVoicebreaks, "num_voicebreaks"),
    (DegreeVoicebreaks, "degree_voicebreaks"),
    (FractionUnvoiced, "fraction_unvoiced"),
    (JitterLocal, "jitter_local"),
    (JitterRap, "jitter_rap"),
    (JitterPpq5, "jitter_ppq5"),
    (JitterLocalAbsolute, "jitter_local_absolute"),
    (ShimmerLocal, "shimmer_local"),
    (ShimmerApq3, "shimmer_apq3"),
    (ShimmerApq5, "shimmer_apq5"),
    (ShimmerApq11, "shimmer_apq11"),
    (ShimmerLocalDb, "shimmer_local_db"),
    (AutocorMean, "autocor_mean"),
    (NhrMean, "nhr_mean"),
    (HnrMean, "hnr_mean"),
    (IntensityMin, "intensity_min"),
    (IntensityMax, "intensity_max"),
    (IntensityMean, "intensity_mean"),
    (IntensityStd, "intensity_std"),
    (FormantF1Mean, "formant_f1_mean"),
    (FormantF2Mean, "formant_f2_mean"),
    (FormantF3Mean, "formant_f3_mean"),
    (SpectralCog, "spectral_cog"),
];

/// Number of registry slots.
pub const NUM_FEATURES: usize = Feature::ALL.len();

/// A populated 34-slot feature vector with quality flags.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: [f64; NUM_FEATURES],
    pub flags: BTreeSet<String>,
}

impl Default for FeatureVector {
    fn default() -> Self {
        FeatureVector {
            values: [0.0; NUM_FEATURES],
            flags: BTreeSet::new(),
        }
    }
}

impl FeatureVector {
    pub fn get(&self, f: Feature) -> f64 {
        self.values[f.index()]
    }

    pub fn set(&mut self, f: Feature, v: f64) {
        self.values[f.index()] = v;
    }

    pub fn flag(&mut self, name: impl Into<String>) {
        self.flags.insert(name.into());
    }
}

/// Pitch-analysis configuration; defaults follow common Praat conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitchConfig {
    pub floor_hz: f64,
    pub ceiling_hz: f64,
    pub frame_s: f64,
    pub hop_s: f64,
    /// Minimum normalized autocorrelation peak for a voiced decision.
    pub voicing_threshold: f64,
    /// Frame intensity gate relative to the utterance maximum, in dB.
    pub silence_threshold_db: f64,
    /// Strength penalty per octave below the ceiling, favoring the higher
    /// of two near-equal period candidates.
    pub octave_cost: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        PitchConfig {
            floor_hz: 75.0,
            ceiling_hz: 600.0,
            frame_s: 0.040,
            hop_s: 0.010,
            voicing_threshold: 0.45,
            silence_threshold_db: -40.0,
            octave_cost: 0.01,
        }
    }
}

impl PitchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor_hz > 0.0 && self.floor_hz < self.ceiling_hz) {
            return Err(Error::config("pitch floor must be positive and below ceiling"));
        }
        if !(self.hop_s > 0.0 && self.frame_s >= self.hop_s) {
            return Err(Error::config("frame_s >= hop_s > 0 required"));
        }
        if !(0.0..1.0).contains(&self.voicing_threshold) {
            return Err(Error::config("voicing_threshold must be in (0,1)"));
        }
        Ok(())
    }

    /// Longest period that still counts as regular voicing; larger inter-pulse
    /// gaps delimit a voice break.
    pub fn max_period_s(&self) -> f64 {
        1.25 / self.floor_hz
    }

    pub fn min_period_s(&self) -> f64 {
        1.0 / self.ceiling_hz
    }
}

/// Jitter slots computed from a pulse sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JitterMeasures {
    pub local: f64,
    pub local_absolute_s: f64,
    pub rap: f64,
    pub ppq5: f64,
    pub defined: bool,
}

/// Valid consecutive period runs: periods within the plausible range,
/// split where a pulse gap spans a voice break.
fn period_runs(p: &PulseSequence, cfg: &PitchConfig) -> Vec<Vec<f64>> {
    let mut runs = Vec::new();
    let mut current: Vec<f64> = Vec::new();
    for pair in p.pulse_times_s.windows(2) {
        let t = pair[1] - pair[0];
        if t >= cfg.min_period_s() && t <= cfg.max_period_s() {
            current.push(t);
        } else if !current.is_empty() {
            runs.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        runs.push(current);
    }
    runs
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean absolute consecutive difference within runs; pairs never span breaks.
fn mean_abs_diff(runs: &[Vec<f64>]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for run in runs {
        for w in run.windows(2) {
            sum += (w[1] - w[0]).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean absolute deviation from the centered `k`-point moving average.
fn mean_abs_dev_from_avg(runs: &[Vec<f64>], k: usize) -> Option<f64> {
    let half = k / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for run in runs {
        if run.len() < k {
            continue;
        }
        for i in half..run.len() - half {
            let window = &run[i - half..=i + half];
            sum += (run[i] - mean(window)).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Jitter family: local, local absolute, rap, ppq5.
pub fn jitter_measures(p: &PulseSequence, cfg: &PitchConfig) -> JitterMeasures {
    let runs = period_runs(p, cfg);
    let periods: Vec<f64> = runs.iter().flatten().copied().collect();
    let period_mean = mean(&periods);
    let mut out = JitterMeasures::default();
    if periods.len() < 3 || period_mean <= 0.0 {
        return out;
    }
    if let Some(mad) = mean_abs_diff(&runs) {
        out.local = mad / period_mean;
        out.local_absolute_s = mad;
        out.defined = true;
    }
    if periods.len() >= 4 {
        if let Some(rap) = mean_abs_dev_from_avg(&runs, 3) {
            out.rap = rap / period_mean;
        }
    }
    if periods.len() >= 6 {
        if let Some(ppq5) = mean_abs_dev_from_avg(&runs, 5) {
            out.ppq5 = ppq5 / period_mean;
        }
    }
    out
}

/// Shimmer slots computed from a pulse sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ShimmerMeasures {
    pub local: f64,
    pub local_db: f64,
    pub apq3: f64,
    pub apq5: f64,
    pub apq11: f64,
    pub defined: bool,
    pub excluded_pulses: usize,
}

/// Amplitude runs aligned with the period runs: consecutive pulse amplitudes
/// whose connecting periods are valid, non-positive amplitudes dropped.
fn amplitude_runs(p: &PulseSequence, cfg: &PitchConfig) -> (Vec<Vec<f64>>, usize) {
    let mut runs = Vec::new();
    let mut current: Vec<f64> = Vec::new();
    let mut excluded = 0usize;
    let n = p.pulse_times_s.len();
    for i in 0..n {
        let a = p.pulse_amplitudes[i];
        if a <= 0.0 {
            excluded += 1;
            if !current.is_empty() {
                runs.push(std::mem::take(&mut current));
            }
            continue;
        }
        let connected = i == 0 || {
            let t = p.pulse_times_s[i] - p.pulse_times_s[i - 1];
            t >= cfg.min_period_s() && t <= cfg.max_period_s()
        };
        if !connected && !current.is_empty() {
            runs.push(std::mem::take(&mut current));
        }
        current.push(a);
    }
    if !current.is_empty() {
        runs.push(current);
    }
    (runs, excluded)
}

/// Shimmer family: local, local dB, apq3/5/11.
pub fn shimmer_measures(p: &PulseSequence, cfg: &PitchConfig) -> ShimmerMeasures {
    let (runs, excluded) = amplitude_runs(p, cfg);
    let amps: Vec<f64> = runs.iter().flatten().copied().collect();
    let amp_mean = mean(&amps);
    let mut out = ShimmerMeasures {
        excluded_pulses: excluded,
        ..Default::default()
    };
    if amps.len() < 2 || amp_mean <= 0.0 {
        return out;
    }
    if let Some(mad) = mean_abs_diff(&runs) {
        out.local = mad / amp_mean;
        out.defined = true;
    }
    // local dB: mean |20 log10(A_i / A_{i-1})| over consecutive in-run pairs.
    let mut db_sum = 0.0;
    let mut db_n = 0usize;
    for run in &runs {
        for w in run.windows(2) {
            db_sum += (20.0 * (w[1] / w[0]).log10()).abs();
            db_n += 1;
        }
    }
    if db_n > 0 {
        out.local_db = db_sum / db_n as f64;
    }
    if amps.len() >= 3 {
        if let Some(v) = mean_abs_dev_from_avg(&runs, 3) {
            out.apq3 = v / amp_mean;
        }
    }
    if amps.len() >= 5 {
        if let Some(v) = mean_abs_dev_from_avg(&runs, 5) {
            out.apq5 = v / amp_mean;
        }
    }
    if amps.len() >= 11 {
        if let Some(v) = mean_abs_dev_from_avg(&runs, 11) {
            out.apq11 = v / amp_mean;
        }
    }
    out
}

/// Harmonicity summary over voiced frames.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Harmonicity {
    pub autocor_mean: f64,
    pub nhr_mean: f64,
    pub hnr_mean_db: f64,
    pub defined: bool,
}

/// Frame-level autocorrelation strength turned into NHR/HNR means.
pub fn harmonicity(track: &PitchTrack) -> Harmonicity {
    let strengths: Vec<f64> = track
        .frames
        .iter()
        .filter(|f| f.f0_hz.is_some())
        .map(|f| f.strength.clamp(1e-6, 1.0 - 1e-6))
        .collect();
    if strengths.is_empty() {
        return Harmonicity::default();
    }
    let n = strengths.len() as f64;
    let autocor_mean = strengths.iter().sum::<f64>() / n;
    let nhr_mean = strengths.iter().map(|r| (1.0 - r) / r).sum::<f64>() / n;
    let hnr_mean_db = strengths
        .iter()
        .map(|r| 10.0 * (r / (1.0 - r)).log10())
        .sum::<f64>()
        / n;
    Harmonicity {
        autocor_mean,
        nhr_mean,
        hnr_mean_db,
        defined: true,
    }
}

/// Intensity summary in dB re full scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityStats {
    pub min_db: f64,
    pub max_db: f64,
    pub mean_db: f64,
    pub std_db: f64,
    pub defined: bool,
}

impl Default for IntensityStats {
    fn default() -> Self {
        IntensityStats {
            min_db: INTENSITY_FLOOR_DB,
            max_db: INTENSITY_FLOOR_DB,
            mean_db: INTENSITY_FLOOR_DB,
            std_db: 0.0,
            defined: false,
        }
    }
}

/// Frame RMS energies in dB: 32 ms frames every 10 ms, floored at -80 dB;
/// statistics over frames above the floor only.
pub fn intensity_stats(w: &Waveform) -> IntensityStats {
    let rate = w.sample_rate_hz as f64;
    let frame_len = (0.032 * rate).round() as usize;
    let hop = (0.010 * rate).round() as usize;
    if w.samples.len() < frame_len {
        return IntensityStats::default();
    }
    let count = (w.samples.len() - frame_len) / hop + 1;
    let mut dbs = Vec::with_capacity(count);
    for i in 0..count {
        let block = &w.samples[i * hop..i * hop + frame_len];
        let m = block.iter().sum::<f64>() / frame_len as f64;
        let power = block.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / frame_len as f64;
        let db = if power > 0.0 {
            (10.0 * power.log10()).max(INTENSITY_FLOOR_DB)
        } else {
            INTENSITY_FLOOR_DB
        };
        if db > INTENSITY_FLOOR_DB {
            dbs.push(db);
        }
    }
    if dbs.is_empty() {
        return IntensityStats::default();
    }
    let n = dbs.len() as f64;
    let mean_db = dbs.iter().sum::<f64>() / n;
    let var = dbs.iter().map(|d| (d - mean_db) * (d - mean_db)).sum::<f64>() / n;
    IntensityStats {
        min_db: dbs.iter().cloned().fold(f64::INFINITY, f64::min),
        max_db: dbs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean_db,
        std_db: var.sqrt(),
        defined: true,
    }
}

/// Power-weighted mean frequency of the magnitude spectrum, in Hz.
pub fn spectral_cog(w: &Waveform) -> f64 {
    let n = w.samples.len();
    let m = w.samples.iter().sum::<f64>() / n as f64;
    let fft_n = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = w
        .samples
        .iter()
        .map(|s| Complex::new(s - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(fft_n)
        .collect();
    FftPlanner::new().plan_fft_forward(fft_n).process(&mut buf);
    let rate = w.sample_rate_hz as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, c) in buf.iter().enumerate().take(fft_n / 2 + 1).skip(1) {
        let p = c.norm_sqr();
        let f = k as f64 * rate / fft_n as f64;
        num += f * p;
        den += p;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Voicing bookkeeping derived from pulses and the pitch track.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VoiceBreakStats {
    pub num_pulses: f64,
    pub num_periods: f64,
    pub num_voicebreaks: f64,
    pub degree_voicebreaks: f64,
    pub fraction_unvoiced: f64,
    pub period_mean_s: f64,
    pub period_std_s: f64,
    pub f0_hz: f64,
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub pitch_mean: f64,
    pub pitch_median: f64,
    pub pitch_std: f64,
}

/// Pulse/period/voice-break counts plus frame-based pitch statistics.
pub fn voice_break_stats(
    p: &PulseSequence,
    track: &PitchTrack,
    cfg: &PitchConfig,
    total_s: f64,
) -> VoiceBreakStats {
    let mut out = VoiceBreakStats {
        num_pulses: p.pulse_times_s.len() as f64,
        ..Default::default()
    };

    let total_frames = track.frames.len();
    let unvoiced = track.frames.iter().filter(|f| f.f0_hz.is_none()).count();
    out.fraction_unvoiced = if total_frames > 0 {
        unvoiced as f64 / total_frames as f64
    } else {
        1.0
    };

    let mut break_dur = 0.0;
    for pair in p.pulse_times_s.windows(2) {
        let gap = pair[1] - pair[0];
        if gap > cfg.max_period_s() {
            out.num_voicebreaks += 1.0;
            break_dur += gap;
        }
    }
    if total_s > 0.0 {
        out.degree_voicebreaks = break_dur / total_s;
    }

    let periods: Vec<f64> = period_runs(p, cfg).into_iter().flatten().collect();
    out.num_periods = periods.len() as f64;
    if !periods.is_empty() {
        let pm = mean(&periods);
        let var = periods.iter().map(|t| (t - pm) * (t - pm)).sum::<f64>() / periods.len() as f64;
        out.period_mean_s = pm;
        out.period_std_s = var.sqrt();
        out.f0_hz = 1.0 / pm;
    }

    let mut voiced: Vec<f64> = track.frames.iter().filter_map(|f| f.f0_hz).collect();
    if !voiced.is_empty() {
        voiced.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = voiced.len();
        let pm = mean(&voiced);
        let var = voiced.iter().map(|f| (f - pm) * (f - pm)).sum::<f64>() / n as f64;
        out.pitch_min = voiced[0];
        out.pitch_max = voiced[n - 1];
        out.pitch_mean = pm;
        out.pitch_median = if n % 2 == 1 {
            voiced[n / 2]
        } else {
            0.5 * (voiced[n / 2 - 1] + voiced[n / 2])
        };
        out.pitch_std = var.sqrt();
    }
    out
}

/// Run the full chain and populate every registry slot.
///
/// Never aborts on degenerate audio: undefined measures take their sentinel
/// and a quality flag.
pub fn extract_all(w: &Waveform, cfg: &PitchConfig) -> Result<FeatureVector> {
    cfg.validate()?;
    let mut fv = FeatureVector::default();
    fv.set(Feature::DurationS, w.duration_s());

    let track = track_pitch(w, cfg)?;
    let pulses = extract_pulses(w, &track);

    let vb = voice_break_stats(&pulses, &track, cfg, w.duration_s());
    fv.set(Feature::NumPulses, vb.num_pulses);
    fv.set(Feature::NumPeriods, vb.num_periods);
    fv.set(Feature::NumVoicebreaks, vb.num_voicebreaks);
    fv.set(Feature::DegreeVoicebreaks, vb.degree_voicebreaks);
    fv.set(Feature::FractionUnvoiced, vb.fraction_unvoiced);
    fv.set(Feature::PeriodMean, vb.period_mean_s);
    fv.set(Feature::PeriodStd, vb.period_std_s);
    fv.set(Feature::F0, vb.f0_hz);
    fv.set(Feature::PitchMin, vb.pitch_min);
    fv.set(Feature::PitchMax, vb.pitch_max);
    fv.set(Feature::PitchMean, vb.pitch_mean);
    fv.set(Feature::PitchMedian, vb.pitch_median);
    fv.set(Feature::PitchStd, vb.pitch_std);
    if vb.pitch_mean == 0.0 {
        fv.flag("no_voiced_frames");
    }

    let jit = jitter_measures(&pulses, cfg);
    fv.set(Feature::JitterLocal, jit.local);
    fv.set(Feature::JitterRap, jit.rap);
    fv.set(Feature::JitterPpq5, jit.ppq5);
    fv.set(Feature::JitterLocalAbsolute, jit.local_absolute_s);
    if !jit.defined {
        fv.flag("jitter_undefined");
    }

    let shim = shimmer_measures(&pulses, cfg);
    fv.set(Feature::ShimmerLocal, shim.local);
    fv.set(Feature::ShimmerApq3, shim.apq3);
    fv.set(Feature::ShimmerApq5, shim.apq5);
    fv.set(Feature::ShimmerApq11, shim.apq11);
    fv.set(Feature::ShimmerLocalDb, shim.local_db);
    if !shim.defined {
        fv.flag("shimmer_undefined");
    }
    if shim.excluded_pulses > 0 {
        fv.flag("shimmer_excluded_pulses");
    }

    let harm = harmonicity(&track);
    fv.set(Feature::AutocorMean, harm.autocor_mean);
    fv.set(Feature::NhrMean, harm.nhr_mean);
    fv.set(Feature::HnrMean, harm.hnr_mean_db);
    if !harm.defined {
        fv.flag("harmonicity_undefined");
    }

    let inten = intensity_stats(w);
    fv.set(Feature::IntensityMin, inten.min_db);
    fv.set(Feature::IntensityMax, inten.max_db);
    fv.set(Feature::IntensityMean, inten.mean_db);
    fv.set(Feature::IntensityStd, inten.std_db);
    if !inten.defined {
        fv.flag("intensity_silent");
    }

    match formants(w, &track)? {
        Some([f1, f2, f3]) => {
            fv.set(Feature::FormantF1Mean, f1);
            fv.set(Feature::FormantF2Mean, f2);
            fv.set(Feature::FormantF3Mean, f3);
        }
        None => fv.flag("formants_undefined"),
    }

    fv.set(Feature::SpectralCog, spectral_cog(w));
    Ok(fv)
}

/// One feature row with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub source_id: String,
    pub gender: Option<Gender>,
    pub tags: BTreeSet<String>,
    pub vector: FeatureVector,
}

/// Extract features for every waveform in a corpus.
pub fn extract_corpus(waves: &[Waveform], cfg: &PitchConfig) -> Result<Vec<FeatureRow>> {
    waves
        .iter()
        .map(|w| {
            Ok(FeatureRow {
                source_id: w.source_id.clone(),
                gender: w.gender,
                tags: w.tags.clone(),
                vector: extract_all(w, cfg)?,
            })
        })
        .collect()
}

/// Write rows as delimited text with a registry-version header comment.
pub fn write_features_csv(rows: &[FeatureRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    writeln!(out, "# feature registry {REGISTRY_VERSION}").map_err(io_err)?;
    let names: Vec<&str> = Feature::ALL.iter().map(|f| f.name()).collect();
    writeln!(out, "source_id,gender,tags,{},quality_flags", names.join(",")).map_err(io_err)?;
    for row in rows {
        let gender = row.gender.map(|g| g.as_str()).unwrap_or("");
        let tags = row.tags.iter().cloned().collect::<Vec<_>>().join(";");
        let values: Vec<String> = row.vector.values.iter().map(|v| format!("{v:?}")).collect();
        let flags = row.vector.flags.iter().cloned().collect::<Vec<_>>().join(";");
        writeln!(
            out,
            "{},{},{},{},{}",
            row.source_id,
            gender,
            tags,
            values.join(","),
            flags
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Read rows written by [`write_features_csv`].
pub fn read_features_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();

    let version_line = lines
        .next()
        .transpose()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .ok_or_else(|| Error::data(format!("{}: empty feature file", path.display())))?;
    if !version_line.starts_with("# feature registry") {
        return Err(Error::data(format!(
            "{}: missing registry header comment",
            path.display()
        )));
    }
    if !version_line.ends_with(REGISTRY_VERSION) {
        return Err(Error::data(format!(
            "{}: registry version mismatch ({version_line})",
            path.display()
        )));
    }
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .ok_or_else(|| Error::data(format!("{}: missing header row", path.display())))?;
    let names: Vec<&str> = Feature::ALL.iter().map(|f| f.name()).collect();
    let expected = format!("source_id,gender,tags,{},quality_flags", names.join(","));
    if header != expected {
        return Err(Error::data(format!("{}: unexpected header row", path.display())));
    }

    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != NUM_FEATURES + 4 {
            return Err(Error::data(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                lineno + 3,
                fields.len(),
                NUM_FEATURES + 4
            )));
        }
        let gender = match fields[1] {
            "" => None,
            g => Some(Gender::parse(g)?),
        };
        let tags: BTreeSet<String> = fields[2]
            .split(';')
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect();
        let mut vector = FeatureVector::default();
        for (i, raw) in fields[3..3 + NUM_FEATURES].iter().enumerate() {
            vector.values[i] = raw
                .parse()
                .map_err(|e| Error::data(format!("{}: bad value {raw:?}: {e}", path.display())))?;
        }
        vector.flags = fields[NUM_FEATURES + 3]
            .split(';')
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect();
        rows.push(FeatureRow {
            source_id: fields[0].to_owned(),
            gender,
            tags,
            vector,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::PIPELINE_RATE_HZ;

    #[test]
    fn registry_has_34_stable_names() {
        assert_eq!(NUM_FEATURES, 34);
        assert_eq!(Feature::ALL[0].name(), "duration_s");
        assert_eq!(Feature::ALL[33].name(), "spectral_cog");
        assert_eq!(Feature::from_name("pitch_mean"), Some(Feature::PitchMean));
        assert_eq!(Feature::PitchMean.index(), 3);
    }

    fn pulses_from_periods(periods: &[f64], amps: &[f64]) -> PulseSequence {
        let mut times = vec![0.1];
        for &p in periods {
            times.push(times.last().unwrap() + p);
        }
        PulseSequence {
            pulse_times_s: times,
            pulse_amplitudes: amps.to_vec(),
        }
    }

    #[test]
    fn jitter_zero_for_perfect_periods() {
        let cfg = PitchConfig::default();
        let p = pulses_from_periods(&[0.008; 40], &[1.0; 41]);
        let j = jitter_measures(&p, &cfg);
        assert!(j.defined);
        // Times come from accumulated sums; allow float accumulation noise.
        assert!(j.local < 1e-12);
        assert!(j.rap < 1e-12);
        assert!(j.ppq5 < 1e-12);
    }

    #[test]
    fn jitter_alternating_closed_form() {
        let cfg = PitchConfig::default();
        let t = 0.008;
        let eps = 0.01;
        let periods: Vec<f64> = (0..40)
            .map(|i| if i % 2 == 0 { t * (1.0 + eps) } else { t * (1.0 - eps) })
            .collect();
        let p = pulses_from_periods(&periods, &vec![1.0; 41]);
        let j = jitter_measures(&p, &cfg);
        // |T_i - T_{i-1}| = 2*t*eps everywhere, mean period = t.
        assert!((j.local - 2.0 * eps).abs() < 1e-9, "local {}", j.local);
        assert!((j.local_absolute_s - 2.0 * t * eps).abs() < 1e-12);
    }

    #[test]
    fn jitter_gaussian_matches_half_normal_expectation() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let cfg = PitchConfig::default();
        let t = 0.008;
        let sigma_rel = 0.01;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dist = Normal::new(0.0, sigma_rel * t).unwrap();
        let periods: Vec<f64> = (0..2000).map(|_| t + dist.sample(&mut rng)).collect();
        let p = pulses_from_periods(&periods, &vec![1.0; 2001]);
        let j = jitter_measures(&p, &cfg);
        // Brute-force oracle: sample mean of |dT| over the same period list.
        let oracle: f64 = periods.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>()
            / (periods.len() - 1) as f64;
        assert!((j.local_absolute_s - oracle).abs() < 1e-12);
        // Analytic E|X - Y| for iid normals: 2*sigma/sqrt(pi).
        let analytic = 2.0 * sigma_rel / std::f64::consts::PI.sqrt();
        assert!(
            (j.local - analytic).abs() / analytic < 0.2,
            "local {} vs analytic {analytic}",
            j.local
        );
    }

    #[test]
    fn jitter_sentinel_below_minimum_periods() {
        let cfg = PitchConfig::default();
        let p = pulses_from_periods(&[0.008, 0.008], &[1.0; 3]);
        let j = jitter_measures(&p, &cfg);
        assert!(!j.defined);
        assert_eq!(j.local, 0.0);
    }

    #[test]
    fn shimmer_constant_amplitudes_zero() {
        let cfg = PitchConfig::default();
        let p = pulses_from_periods(&[0.008; 30], &[0.4; 31]);
        let s = shimmer_measures(&p, &cfg);
        assert!(s.defined);
        assert!(s.local < 1e-12);
        assert!(s.local_db < 1e-12);
        assert!(s.apq11 < 1e-12);
    }

    #[test]
    fn shimmer_alternating_closed_form() {
        let cfg = PitchConfig::default();
        // Even count so the mean amplitude is exactly 1.0.
        let amps: Vec<f64> = (0..40)
            .map(|i| if i % 2 == 0 { 1.05 } else { 0.95 })
            .collect();
        let p = pulses_from_periods(&[0.008; 39], &amps);
        let s = shimmer_measures(&p, &cfg);
        assert!((s.local - 0.10).abs() < 1e-9, "local {}", s.local);
        let db = (20.0f64 * (1.05f64 / 0.95).log10()).abs();
        assert!((s.local_db - db).abs() < 1e-9, "db {}", s.local_db);
        assert!((db - 0.869).abs() < 2e-3);
    }

    #[test]
    fn shimmer_excludes_nonpositive_amplitudes() {
        let cfg = PitchConfig::default();
        let mut amps = vec![1.0; 31];
        amps[10] = 0.0;
        let p = pulses_from_periods(&[0.008; 30], &amps);
        let s = shimmer_measures(&p, &cfg);
        assert_eq!(s.excluded_pulses, 1);
        assert!(s.defined);
        assert_eq!(s.local, 0.0);
    }

    #[test]
    fn harmonicity_plug_in_values() {
        let track = PitchTrack {
            frames: (0..10)
                .map(|i| PitchFrame {
                    time_s: i as f64 * 0.01,
                    f0_hz: Some(120.0),
                    strength: 0.5,
                })
                .collect(),
            frame_s: 0.04,
            hop_s: 0.01,
        };
        let h = harmonicity(&track);
        assert!((h.autocor_mean - 0.5).abs() < 1e-12);
        assert!((h.nhr_mean - 1.0).abs() < 1e-12);
        assert!(h.hnr_mean_db.abs() < 1e-12);
    }

    #[test]
    fn harmonicity_empty_track_sentinel() {
        let track = PitchTrack {
            frames: vec![],
            frame_s: 0.04,
            hop_s: 0.01,
        };
        let h = harmonicity(&track);
        assert!(!h.defined);
        assert_eq!(h.hnr_mean_db, 0.0);
    }

    #[test]
    fn intensity_square_wave_level() {
        // Alternating 0/1: DC-removed frame is +-0.5, RMS 0.5 -> -6.02 dB.
        let samples: Vec<f64> = (0..16_000).map(|i| (i % 2) as f64).collect();
        let w = Waveform::new(samples, PIPELINE_RATE_HZ, "sq").unwrap();
        let s = intensity_stats(&w);
        assert!(s.defined);
        assert!((s.mean_db + 6.0206).abs() < 0.01, "mean {}", s.mean_db);
    }

    #[test]
    fn intensity_halving_drops_six_db() {
        let loud: Vec<f64> = (0..16_000)
            .map(|i| 0.5 + 0.4 * (2.0 * std::f64::consts::PI * 200.0 * i as f64 / 16_000.0).sin())
            .collect();
        let soft: Vec<f64> = loud.iter().map(|s| 0.5 + (s - 0.5) * 0.5).collect();
        let wl = Waveform::new(loud, PIPELINE_RATE_HZ, "l").unwrap();
        let ws = Waveform::new(soft, PIPELINE_RATE_HZ, "s").unwrap();
        let dl = intensity_stats(&wl).mean_db;
        let ds = intensity_stats(&ws).mean_db;
        assert!((dl - ds - 6.0206).abs() < 0.05, "{dl} vs {ds}");
    }

    #[test]
    fn intensity_constant_signal_sentinel() {
        let w = Waveform::new(vec![0.0; 16_000], PIPELINE_RATE_HZ, "c").unwrap();
        let s = intensity_stats(&w);
        assert!(!s.defined);
        assert_eq!(s.mean_db, INTENSITY_FLOOR_DB);
    }

    #[test]
    fn cog_pure_tone() {
        let samples: Vec<f64> = (0..32_000)
            .map(|i| 0.5 + 0.4 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16_000.0).sin())
            .collect();
        let w = Waveform::new(samples, PIPELINE_RATE_HZ, "tone").unwrap();
        let cog = spectral_cog(&w);
        assert!((990.0..=1010.0).contains(&cog), "cog {cog}");
    }

    #[test]
    fn cog_two_equal_tones_symmetric() {
        let samples: Vec<f64> = (0..32_000)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                0.5 + 0.2 * (2.0 * std::f64::consts::PI * 500.0 * t).sin()
                    + 0.2 * (2.0 * std::f64::consts::PI * 1500.0 * t).sin()
            })
            .collect();
        let w = Waveform::new(samples, PIPELINE_RATE_HZ, "pair").unwrap();
        let cog = spectral_cog(&w);
        assert!((cog - 1000.0).abs() < 15.0, "cog {cog}");
    }

    #[test]
    fn voice_break_counting() {
        let cfg = PitchConfig::default();
        // Two voiced stretches of pulses separated by a 0.5 s gap in 2 s.
        let mut times: Vec<f64> = (0..60).map(|i| 0.1 + i as f64 * 0.008).collect();
        let resume = times.last().unwrap() + 0.5;
        times.extend((0..60).map(|i| resume + i as f64 * 0.008));
        let p = PulseSequence {
            pulse_amplitudes: vec![1.0; times.len()],
            pulse_times_s: times,
        };
        let track = PitchTrack {
            frames: vec![],
            frame_s: 0.04,
            hop_s: 0.01,
        };
        let vb = voice_break_stats(&p, &track, &cfg, 2.0);
        assert_eq!(vb.num_voicebreaks, 1.0);
        assert!((vb.degree_voicebreaks - 0.25).abs() < 0.01);
        assert_eq!(vb.num_periods, 118.0);
    }

    #[test]
    fn feature_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        let mut vector = FeatureVector::default();
        vector.set(Feature::PitchMean, 123.456789012345);
        vector.flag("jitter_undefined");
        let rows = vec![FeatureRow {
            source_id: "f000".into(),
            gender: Some(Gender::F),
            tags: ["default".to_string()].into_iter().collect(),
            vector,
        }];
        write_features_csv(&rows, &path).unwrap();
        let back = read_features_csv(&path).unwrap();
        assert_eq!(back, rows);
    }
}
