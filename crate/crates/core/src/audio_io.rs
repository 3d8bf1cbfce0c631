//! Audio loading, normalization, and framing.
//!
//! Every pipeline stage consumes [`Waveform`]s: mono signals at 16 kHz with
//! samples normalized to the [0,1] range. Silence in this representation is
//! the midpoint 0.5, which is also the padding value used by [`fix_length`].

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical sample rate for all pipeline entry points.
pub const PIPELINE_RATE_HZ: u32 = 16_000;

/// Padding value: silence in the [0,1] representation.
pub const PAD_VALUE: f64 = 0.5;

/// Binary gender label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl Gender {
    /// Fixed label-sign mapping: F maps to +1, M to -1.
    pub fn sign(self) -> f64 {
        match self {
            Gender::F => 1.0,
            Gender::M => -1.0,
        }
    }

    pub fn from_sign(score: f64) -> Gender {
        // Ties break toward F.
        if score >= 0.0 {
            Gender::F
        } else {
            Gender::M
        }
    }

    /// The opposite gender label.
    pub fn flip(self) -> Gender {
        match self {
            Gender::F => Gender::M,
            Gender::M => Gender::F,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::F => "F",
            Gender::M => "M",
        }
    }

    pub fn parse(s: &str) -> Result<Gender> {
        match s.trim() {
            "F" | "f" => Ok(Gender::F),
            "M" | "m" => Ok(Gender::M),
            other => Err(Error::data(format!("unknown gender label {other:?}"))),
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Mono audio in [0,1] with provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub source_id: String,
    pub gender: Option<Gender>,
    pub tags: BTreeSet<String>,
    /// Set when min-max normalization hit a degenerate (constant) signal.
    pub degenerate_range: bool,
}

impl Waveform {
    /// Build a waveform from already-normalized samples, checking invariants.
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32, source_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("waveform must contain at least one sample"));
        }
        if sample_rate_hz == 0 {
            return Err(Error::data("sample rate must be positive"));
        }
        if samples.iter().any(|s| !(0.0..=1.0).contains(s) || !s.is_finite()) {
            return Err(Error::data("waveform samples must lie in [0,1]"));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
            source_id: source_id.into(),
            gender: None,
            tags: BTreeSet::new(),
            degenerate_range: false,
        })
    }

    /// Min-max normalize raw samples to [0,1] and build a waveform.
    ///
    /// A constant signal maps to all-zeros with `degenerate_range` set.
    pub fn from_raw(raw: &[f64], sample_rate_hz: u32, source_id: impl Into<String>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::data("waveform must contain at least one sample"));
        }
        let (samples, degenerate) = normalize_unit(raw);
        let mut w = Waveform::new(samples, sample_rate_hz, source_id)?;
        w.degenerate_range = degenerate;
        Ok(w)
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

    pub fn with_gender(mut self, gender: Gender) -> Self {
        self.gender = Some(gender);
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tags.insert(tag.into());
        self
    }

    /// Samples with the [0,1] midpoint removed, i.e. centered around silence.
    /// DSP code that needs a zero-mean-ish signal starts from this.
    pub fn centered(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s - PAD_VALUE).collect()
    }
}

/// Min-max normalize to [0,1]. Returns (normalized, degenerate_range).
pub fn normalize_unit(raw: &[f64]) -> (Vec<f64>, bool) {
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 || !range.is_finite() {
        return (vec![0.0; raw.len()], true);
    }
    (raw.iter().map(|s| (s - min) / range).collect(), false)
}

/// Load a RIFF WAV file (PCM integer or IEEE float), average channels to
/// mono, and min-max normalize to [0,1].
///
/// Rejects sample rates other than 16 kHz: resampling silently would change
/// every downstream feature.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_rate != PIPELINE_RATE_HZ {
        return Err(Error::SampleRate {
            path: path.to_path_buf(),
            got: spec.sample_rate,
            want: PIPELINE_RATE_HZ,
        });
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "zero channels".into(),
        });
    }

    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("unsupported float bit depth {}", spec.bits_per_sample),
                });
            }
            reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?
        }
        hound::SampleFormat::Int => {
            let shift = 1i64 << (spec.bits_per_sample - 1);
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / shift as f64))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?
        }
    };

    if interleaved.is_empty() {
        return Err(Error::EmptyAudio {
            path: path.to_path_buf(),
        });
    }
    let frames = interleaved.len() / channels;
    if frames == 0 {
        return Err(Error::EmptyAudio {
            path: path.to_path_buf(),
        });
    }
    let mono: Vec<f64> = (0..frames)
        .map(|i| {
            let row = &interleaved[i * channels..(i + 1) * channels];
            row.iter().sum::<f64>() / channels as f64
        })
        .collect();

    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned());
    Waveform::from_raw(&mono, spec.sample_rate, source_id)
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io {
            path: path.to_path_buf(),
            source: io,
        },
        other => Error::Format {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    }
}

/// Write a waveform as 32-bit IEEE float WAV, preserving the [0,1] samples.
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &w.samples {
        writer.write_sample(s as f32).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))?;
    Ok(())
}

/// Pad (with 0.5, silence) or truncate to exactly `seconds`.
pub fn fix_length(w: &Waveform, seconds: f64) -> Waveform {
    assert!(seconds > 0.0, "fix_length needs positive duration");
    let target = (seconds * w.sample_rate_hz as f64).round() as usize;
    let mut out = w.clone();
    if out.samples.len() >= target {
        out.samples.truncate(target);
    } else {
        out.samples.resize(target, PAD_VALUE);
    }
    out
}

/// Extract a contiguous chunk of exactly `seconds`, start offset uniform over
/// the valid range. Inputs shorter than the chunk are padded first.
pub fn random_chunk(w: &Waveform, seconds: f64, rng: &mut impl Rng) -> Waveform {
    assert!(seconds > 0.0, "random_chunk needs positive duration");
    let target = (seconds * w.sample_rate_hz as f64).round() as usize;
    if w.samples.len() <= target {
        return fix_length(w, seconds);
    }
    let max_start = w.samples.len() - target;
    let start = rng.gen_range(0..=max_start);
    let mut out = w.clone();
    out.samples = w.samples[start..start + target].to_vec();
    out
}

/// Analysis window shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Rectangular,
    Hann,
    Gaussian,
}

impl Window {
    /// Window sample values for a frame of `len` samples.
    pub fn values(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; len],
            Window::Hann => (0..len)
                .map(|n| {
                    let x = n as f64 / (len - 1).max(1) as f64;
                    0.5 - 0.5 * (2.0 * std::f64::consts::PI * x).cos()
                })
                .collect(),
            Window::Gaussian => {
                let half = (len - 1) as f64 / 2.0;
                let sigma = half / 2.5;
                (0..len)
                    .map(|n| {
                        let d = (n as f64 - half) / sigma;
                        (-0.5 * d * d).exp()
                    })
                    .collect()
            }
        }
    }
}

/// Windowed, DC-removed frames cut from a waveform.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<Vec<f64>>,
    pub frame_s: f64,
    pub hop_s: f64,
    pub window: Window,
    pub start_times: Vec<f64>,
    /// Per-frame mean removed before windowing (the frame DC level).
    pub frame_means: Vec<f64>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Cut `w` into frames of `frame_s` every `hop_s`, remove each frame's mean,
/// then apply the window. Frame count = floor((N - L)/H) + 1.
pub fn frame_signal(w: &Waveform, frame_s: f64, hop_s: f64, window: Window) -> Result<FrameSequence> {
    if !(hop_s > 0.0 && frame_s >= hop_s) {
        return Err(Error::config("frame_s >= hop_s > 0 required"));
    }
    let rate = w.sample_rate_hz as f64;
    let frame_len = (frame_s * rate).round() as usize;
    let hop = (hop_s * rate).round() as usize;
    if frame_len == 0 || hop == 0 {
        return Err(Error::config("frame and hop must span at least one sample"));
    }
    if w.samples.len() < frame_len {
        return Err(Error::data(format!(
            "signal of {} samples shorter than one frame ({frame_len})",
            w.samples.len()
        )));
    }
    let count = (w.samples.len() - frame_len) / hop + 1;
    let win = window.values(frame_len);
    let mut frames = Vec::with_capacity(count);
    let mut start_times = Vec::with_capacity(count);
    let mut frame_means = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * hop;
        let block = &w.samples[start..start + frame_len];
        let mean = block.iter().sum::<f64>() / frame_len as f64;
        frames.push(
            block
                .iter()
                .zip(&win)
                .map(|(s, w)| (s - mean) * w)
                .collect(),
        );
        start_times.push(start as f64 / rate);
        frame_means.push(mean);
    }
    Ok(FrameSequence {
        frames,
        frame_s,
        hop_s,
        window,
        start_times,
        frame_means,
    })
}

/// One row of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub speaker_id: String,
    pub gender: Option<Gender>,
    pub tags: BTreeSet<String>,
}

/// Corpus manifest: delimited text, one row per utterance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.path.clone()) {
                return Err(Error::data(format!(
                    "duplicate manifest path {}",
                    e.path.display()
                )));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Read the CSV form: header `path,speaker_id,gender,tags`, tags
    /// semicolon-separated, gender optionally empty.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::data(format!("manifest {}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::data(format!("manifest {}: {e}", path.display())))?
            .clone();
        let expected = ["path", "speaker_id", "gender", "tags"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::data(format!(
                "manifest {} header {:?}; expected {:?}",
                path.display(),
                got,
                expected
            )));
        }
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::data(format!("manifest {}: {e}", path.display())))?;
            let gender = match record.get(2).unwrap_or("").trim() {
                "" => None,
                g => Some(Gender::parse(g)?),
            };
            let tags: BTreeSet<String> = record
                .get(3)
                .unwrap_or("")
                .split(';')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(str::to_owned)
                .collect();
            entries.push(ManifestEntry {
                path: PathBuf::from(record.get(0).unwrap_or("")),
                speaker_id: record.get(1).unwrap_or("").to_owned(),
                gender,
                tags,
            });
        }
        Manifest::new(entries)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::data(format!("manifest {}: {e}", path.display())))?;
        writer
            .write_record(["path", "speaker_id", "gender", "tags"])
            .map_err(|e| Error::data(format!("manifest {}: {e}", path.display())))?;
        for e in &self.entries {
            let tags = e.tags.iter().cloned().collect::<Vec<_>>().join(";");
            let gender = e.gender.map(|g| g.as_str()).unwrap_or("");
            writer
                .write_record([
                    e.path.to_string_lossy().as_ref(),
                    e.speaker_id.as_str(),
                    gender,
                    tags.as_str(),
                ])
                .map_err(|e| Error::data(format!("manifest {}: {e}", path.display())))?;
        }
        writer
            .flush()
            .map_err(|e| Error::data(format!("manifest {}: {e}", path.display())))?;
        Ok(())
    }

    /// Load every referenced waveform, attaching gender and tags.
    /// Relative paths resolve against `base`.
    pub fn load_waveforms(&self, base: impl AsRef<Path>) -> Result<Vec<Waveform>> {
        let base = base.as_ref();
        self.entries
            .iter()
            .map(|e| {
                let full = if e.path.is_absolute() {
                    e.path.clone()
                } else {
                    base.join(&e.path)
                };
                let mut w = load_wav(&full)?;
                w.gender = e.gender;
                w.tags.extend(e.tags.iter().cloned());
                w.source_id = e.speaker_id.clone();
                Ok(w)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, PIPELINE_RATE_HZ, "t").unwrap()
    }

    #[test]
    fn normalize_maps_to_unit_interval() {
        let (n, degen) = normalize_unit(&[-1.0, 0.0, 1.0]);
        assert_eq!(n, vec![0.0, 0.5, 1.0]);
        assert!(!degen);
    }

    #[test]
    fn normalize_constant_signal_flags_degenerate() {
        let (n, degen) = normalize_unit(&[0.7, 0.7, 0.7]);
        assert_eq!(n, vec![0.0, 0.0, 0.0]);
        assert!(degen);
    }

    #[test]
    fn normalize_is_idempotent() {
        let (once, _) = normalize_unit(&[0.2, 0.9, 0.4, 0.1]);
        let (twice, _) = normalize_unit(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn fix_length_truncates_and_pads() {
        let w = wave(vec![0.1; 8 * 16000]);
        let cut = fix_length(&w, 6.0);
        assert_eq!(cut.len(), 96_000);
        assert_eq!(&cut.samples[..], &w.samples[..96_000]);

        let short = wave(vec![0.1; 4 * 16000]);
        let padded = fix_length(&short, 6.0);
        assert_eq!(padded.len(), 96_000);
        assert_eq!(padded.samples[63_999], 0.1);
        assert!(padded.samples[64_000..].iter().all(|&s| s == PAD_VALUE));
    }

    #[test]
    fn fix_length_identity_and_idempotent() {
        let w = wave((0..96_000).map(|i| (i % 100) as f64 / 100.0).collect());
        let out = fix_length(&w, 6.0);
        assert_eq!(out.samples, w.samples);
        let twice = fix_length(&fix_length(&w, 6.0), 6.0);
        assert_eq!(twice.samples, out.samples);
    }

    #[test]
    fn random_chunk_is_seed_deterministic() {
        let w = wave((0..96_000).map(|i| (i % 997) as f64 / 997.0).collect());
        let a = random_chunk(&w, 3.0, &mut ChaCha8Rng::seed_from_u64(7));
        let b = random_chunk(&w, 3.0, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.len(), 48_000);
    }

    #[test]
    fn random_chunk_exact_length_is_identity() {
        let w = wave(vec![0.3; 48_000]);
        let c = random_chunk(&w, 3.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(c.samples, w.samples);
    }

    #[test]
    fn random_chunk_pads_short_input() {
        let w = wave(vec![0.3; 32_000]);
        let c = random_chunk(&w, 3.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(c.samples, fix_length(&w, 3.0).samples);
    }

    #[test]
    fn frame_count_formula() {
        let w = wave(vec![0.5; 16_000]);
        let fs = frame_signal(&w, 0.040, 0.010, Window::Rectangular).unwrap();
        assert_eq!(fs.len(), 97); // floor((16000-640)/160)+1
    }

    #[test]
    fn frames_remove_dc() {
        let w = wave(vec![0.7; 16_000]);
        let fs = frame_signal(&w, 0.040, 0.010, Window::Rectangular).unwrap();
        for frame in &fs.frames {
            assert!(frame.iter().all(|&s| s.abs() < 1e-12));
        }
    }

    #[test]
    fn hann_endpoints_near_zero() {
        let win = Window::Hann.values(640);
        assert!(win[0].abs() < 1e-12);
        assert!(win[639].abs() < 1e-12);
        assert!((win[319] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn too_short_signal_errors() {
        let w = wave(vec![0.5; 100]);
        assert!(frame_signal(&w, 0.040, 0.010, Window::Hann).is_err());
    }

    #[test]
    fn wav_round_trip_stereo_average() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        // 4-sample stereo fixture; channel average then min-max normalize.
        let left: [i16; 4] = [0, 8192, 16384, -16384];
        let right: [i16; 4] = [0, 0, 16384, -16384];
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..4 {
            wr.write_sample(left[i]).unwrap();
            wr.write_sample(right[i]).unwrap();
        }
        wr.finalize().unwrap();

        let w = load_wav(&path).unwrap();
        assert_eq!(w.len(), 4);
        // mono = (c1+c2)/2 in [-1,1): [0, 0.125, 0.5, -0.5]; min-max over range 1.0
        let expect = [0.5, 0.625, 1.0, 0.0];
        for (got, want) in w.samples.iter().zip(expect) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn wav_wrong_rate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rate.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        match load_wav(&path) {
            Err(Error::SampleRate { got, .. }) => assert_eq!(got, 44_100),
            other => panic!("expected rate error, got {other:?}"),
        }
    }

    #[test]
    fn wav_malformed_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a riff file at all").unwrap();
        assert!(matches!(load_wav(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.wav");
        let w = wave((0..16_000).map(|i| (i % 320) as f64 / 319.0).collect());
        save_wav(&w, &path).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.len(), w.len());
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn manifest_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let m = Manifest::new(vec![
            ManifestEntry {
                path: PathBuf::from("a.wav"),
                speaker_id: "spk1".into(),
                gender: Some(Gender::F),
                tags: ["default".to_string()].into_iter().collect(),
            },
            ManifestEntry {
                path: PathBuf::from("b.wav"),
                speaker_id: "spk2".into(),
                gender: Some(Gender::M),
                tags: ["default".to_string(), "perturbed".to_string()]
                    .into_iter()
                    .collect(),
            },
        ])
        .unwrap();
        m.write_csv(&path).unwrap();
        let back = Manifest::read_csv(&path).unwrap();
        assert_eq!(back, m);

        let dup = Manifest::new(vec![
            ManifestEntry {
                path: PathBuf::from("a.wav"),
                speaker_id: "x".into(),
                gender: None,
                tags: BTreeSet::new(),
            },
            ManifestEntry {
                path: PathBuf::from("a.wav"),
                speaker_id: "y".into(),
                gender: None,
                tags: BTreeSet::new(),
            },
        ]);
        assert!(dup.is_err());
    }
}
