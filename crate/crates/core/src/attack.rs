//! PGD waveform perturbations against a reference classifier.
//!
//! The untargeted attack ascends the cross-entropy of the true gender:
//! x_{i+1} = x_i + alpha * sign(grad J(x_i, y)), with the cumulative
//! perturbation clipped to an L-infinity ball of radius `epsilon_clip` and
//! the signal clamped to [0, 1] after every step. A targeted "flip" mode
//! descends toward the opposite gender instead.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio_io::{fix_length, save_wav, Gender, Waveform, PIPELINE_RATE_HZ};
use crate::error::{Error, Result};
use crate::neuralnet::M5Model;

/// A reference model that exposes exact input gradients.
pub trait InputGradModel {
    fn model_id(&self) -> String;
    /// Cross-entropy of the given label and its gradient w.r.t. samples.
    fn loss_and_input_grad(&self, samples: &[f64], label: Gender) -> Result<(f64, Vec<f64>)>;
}

impl InputGradModel for M5Model<f32> {
    fn model_id(&self) -> String {
        "m5".to_string()
    }

    fn loss_and_input_grad(&self, samples: &[f64], label: Gender) -> Result<(f64, Vec<f64>)> {
        let x: Vec<f32> = samples.iter().map(|&v| v as f32).collect();
        let (loss, grad) = M5Model::loss_and_input_grad(self, &x, label)?;
        Ok((loss, grad.into_iter().map(|v| v as f64).collect()))
    }
}

/// Wrapper giving a reference model an explicit provenance id.
pub struct NamedRef<'a, M: InputGradModel> {
    pub model: &'a M,
    pub id: String,
}

impl<M: InputGradModel> InputGradModel for NamedRef<'_, M> {
    fn model_id(&self) -> String {
        self.id.clone()
    }

    fn loss_and_input_grad(&self, samples: &[f64], label: Gender) -> Result<(f64, Vec<f64>)> {
        self.model.loss_and_input_grad(samples, label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    pub alpha: f64,
    pub iterations: usize,
    pub epsilon_clip: f64,
    pub segment_s: f64,
    /// Descend toward the opposite gender instead of ascending the true
    /// gender's loss.
    pub flip_target: bool,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0005,
            iterations: 100,
            epsilon_clip: 0.1,
            segment_s: 6.0,
            flip_target: false,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.epsilon_clip > 0.0) {
            return Err(Error::config(format!(
                "epsilon_clip must be positive, got {}",
                self.epsilon_clip
            )));
        }
        if !(self.segment_s > 0.0) {
            return Err(Error::config(format!(
                "segment_s must be positive, got {}",
                self.segment_s
            )));
        }
        Ok(())
    }

    pub fn segment_len(&self) -> usize {
        (self.segment_s * PIPELINE_RATE_HZ as f64).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct PerturbationResult {
    pub adversarial: Waveform,
    pub delta_linf: f64,
    pub delta_l2: f64,
    /// Loss at each iterate before its update; `iterations` entries.
    pub loss_trace: Vec<f64>,
    pub reference_model_id: String,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Run PGD against `reference`. The waveform must already be shaped to
/// `segment_s` and carry a gender label.
pub fn pgd_perturb<M: InputGradModel + ?Sized>(
    reference: &M,
    w: &Waveform,
    cfg: &PgdConfig,
) -> Result<PerturbationResult> {
    cfg.validate()?;
    let y = w.gender.ok_or_else(|| {
        Error::data(format!("utterance {} has no gender label to attack", w.source_id))
    })?;
    let want = cfg.segment_len();
    if w.samples.len() != want {
        return Err(Error::data(format!(
            "utterance {} has {} samples, expected the {}s segment of {want}",
            w.source_id,
            w.samples.len(),
            cfg.segment_s
        )));
    }

    let (label, step) = if cfg.flip_target {
        (y.flip(), -cfg.alpha)
    } else {
        (y, cfg.alpha)
    };

    let mut x = w.samples.clone();
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let (loss, grad) = reference.loss_and_input_grad(&x, label)?;
        loss_trace.push(loss);
        for j in 0..x.len() {
            let moved = x[j] + step * sign(grad[j]);
            let delta = (moved - w.samples[j]).clamp(-cfg.epsilon_clip, cfg.epsilon_clip);
            x[j] = (w.samples[j] + delta).clamp(0.0, 1.0);
        }
    }

    let delta_linf = x
        .iter()
        .zip(&w.samples)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let delta_l2 = x
        .iter()
        .zip(&w.samples)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();

    let mut adversarial = Waveform::new(x, w.sample_rate_hz, w.source_id.clone())?
        .with_gender(y)
        .with_tag("perturbed");
    for tag in &w.tags {
        adversarial = adversarial.with_tag(tag.clone());
    }
    Ok(PerturbationResult {
        adversarial,
        delta_linf,
        delta_l2,
        loss_trace,
        reference_model_id: reference.model_id(),
    })
}

/// Per-corpus attack summary: results for the utterances that succeeded
/// and one message per skipped file.
pub struct CorpusPerturbation {
    pub results: Vec<PerturbationResult>,
    pub skipped: Vec<String>,
}

/// Fix every utterance to `segment_s` and perturb it. Per-file failures
/// are collected as skip messages rather than aborting the corpus.
pub fn perturb_corpus<M: InputGradModel + ?Sized>(
    reference: &M,
    corpus: &[Waveform],
    cfg: &PgdConfig,
) -> Result<CorpusPerturbation> {
    cfg.validate()?;
    let mut results = Vec::with_capacity(corpus.len());
    let mut skipped = Vec::new();
    for w in corpus {
        let shaped = fix_length(w, cfg.segment_s);
        match pgd_perturb(reference, &shaped, cfg) {
            Ok(r) => results.push(r),
            Err(e) => skipped.push(format!("{}: {e}", w.source_id)),
        }
    }
    Ok(CorpusPerturbation { results, skipped })
}

#[derive(Serialize)]
struct Provenance<'a> {
    reference_model_id: &'a str,
    config: &'a PgdConfig,
    files: Vec<ProvenanceFile>,
}

#[derive(Serialize)]
struct ProvenanceFile {
    file: String,
    source_id: String,
    gender: String,
    delta_linf: f64,
    delta_l2: f64,
}

/// Write perturbed audio as WAV files plus a JSON provenance sidecar
/// (`provenance.json`) recording the reference model, the attack config,
/// and per-file delta norms.
pub fn write_perturbed(out_dir: &Path, perturbed: &CorpusPerturbation, cfg: &PgdConfig) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let mut files = Vec::new();
    for r in &perturbed.results {
        let name = format!("{}_perturbed.wav", r.adversarial.source_id);
        save_wav(&r.adversarial, &out_dir.join(&name))?;
        files.push(ProvenanceFile {
            file: name,
            source_id: r.adversarial.source_id.clone(),
            gender: r
                .adversarial
                .gender
                .map(|g| g.to_string())
                .unwrap_or_default(),
            delta_linf: r.delta_linf,
            delta_l2: r.delta_l2,
        });
    }
    let reference_model_id = perturbed
        .results
        .first()
        .map(|r| r.reference_model_id.as_str())
        .unwrap_or("");
    let sidecar = Provenance {
        reference_model_id,
        config: cfg,
        files,
    };
    let path = out_dir.join("provenance.json");
    let text = serde_json::to_string_pretty(&sidecar).expect("provenance serializes");
    fs::write(&path, text).map_err(|e| Error::Io {
        path,
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{M5Config, ConvBlockSpec};
    use crate::synth::{make_corpus, CorpusSpec};

    fn tiny_model(seed: u64) -> M5Model<f32> {
        let cfg = M5Config {
            blocks: vec![
                ConvBlockSpec {
                    out_channels: 8,
                    kernel: 16,
                    stride: 4,
                },
                ConvBlockSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                },
            ],
            desk_scale: false,
        };
        M5Model::new(&cfg, seed).unwrap()
    }

    fn short_cfg() -> PgdConfig {
        PgdConfig {
            segment_s: 0.5,
            iterations: 20,
            alpha: 0.005,
            ..Default::default()
        }
    }

    fn labeled_utterance(seed: u64, seconds: f64) -> Waveform {
        let spec = CorpusSpec {
            n_per_gender: 1,
            duration_s: seconds,
            seed,
            ..Default::default()
        };
        make_corpus(&spec).unwrap().remove(0)
    }

    #[test]
    fn zero_iterations_is_exact_identity() {
        let model = tiny_model(0);
        let w = labeled_utterance(0, 0.5);
        let cfg = PgdConfig {
            iterations: 0,
            ..short_cfg()
        };
        let r = pgd_perturb(&model, &w, &cfg).unwrap();
        assert_eq!(r.adversarial.samples, w.samples);
        assert_eq!(r.delta_linf, 0.0);
        assert_eq!(r.delta_l2, 0.0);
        assert!(r.loss_trace.is_empty());
    }

    #[test]
    fn projection_contracts_hold() {
        let model = tiny_model(1);
        let w = labeled_utterance(1, 0.5);
        // Aggressive steps so both projections bind.
        let cfg = PgdConfig {
            alpha: 0.02,
            iterations: 30,
            epsilon_clip: 0.1,
            ..short_cfg()
        };
        let r = pgd_perturb(&model, &w, &cfg).unwrap();
        assert!(r.delta_linf <= cfg.epsilon_clip + 1e-9, "linf {}", r.delta_linf);
        assert!(r
            .adversarial
            .samples
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        // The ball actually binds at this step size.
        assert!(r.delta_linf > 0.09, "linf {}", r.delta_linf);
    }

    #[test]
    fn loss_ascends_under_untargeted_attack() {
        let model = tiny_model(2);
        let cfg = short_cfg();
        let mut ascended = 0;
        let total = 10;
        for seed in 0..total {
            let w = labeled_utterance(seed, 0.5);
            let r = pgd_perturb(&model, &w, &cfg).unwrap();
            if *r.loss_trace.last().unwrap() >= r.loss_trace[0] {
                ascended += 1;
            }
        }
        assert!(ascended * 10 >= total * 9, "ascended {ascended}/{total}");
    }

    #[test]
    fn flip_mode_descends_opposite_loss() {
        let model = tiny_model(3);
        let w = labeled_utterance(5, 0.5);
        let cfg = PgdConfig {
            flip_target: true,
            ..short_cfg()
        };
        let r = pgd_perturb(&model, &w, &cfg).unwrap();
        // Trace records the opposite-gender loss, which PGD minimizes.
        assert!(*r.loss_trace.last().unwrap() <= r.loss_trace[0]);
    }

    #[test]
    fn wrong_length_and_missing_gender_error() {
        let model = tiny_model(4);
        let w = labeled_utterance(6, 0.25);
        assert!(pgd_perturb(&model, &w, &short_cfg()).is_err());
        let unlabeled = Waveform::new(vec![0.5; 8000], PIPELINE_RATE_HZ, "anon").unwrap();
        assert!(pgd_perturb(&model, &unlabeled, &short_cfg()).is_err());
    }

    #[test]
    fn corpus_attack_tags_and_is_deterministic() {
        let model = tiny_model(5);
        let spec = CorpusSpec {
            n_per_gender: 3,
            duration_s: 0.7,
            seed: 9,
            ..Default::default()
        };
        let corpus = make_corpus(&spec).unwrap();
        let cfg = PgdConfig {
            iterations: 5,
            ..short_cfg()
        };
        let a = perturb_corpus(&model, &corpus, &cfg).unwrap();
        let b = perturb_corpus(&model, &corpus, &cfg).unwrap();
        assert_eq!(a.results.len(), 6);
        assert!(a.skipped.is_empty());
        for (ra, rb) in a.results.iter().zip(&b.results) {
            assert!(ra.adversarial.tags.contains("perturbed"));
            assert_eq!(ra.adversarial.samples, rb.adversarial.samples);
            assert_eq!(ra.reference_model_id, "m5");
        }
    }

    #[test]
    fn sidecar_written_with_norms() {
        let model = NamedRef {
            model: &tiny_model(6),
            id: "m5-test".to_string(),
        };
        let spec = CorpusSpec {
            n_per_gender: 1,
            duration_s: 0.5,
            seed: 11,
            ..Default::default()
        };
        let corpus = make_corpus(&spec).unwrap();
        let cfg = PgdConfig {
            iterations: 2,
            ..short_cfg()
        };
        let perturbed = perturb_corpus(&model, &corpus, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_perturbed(dir.path(), &perturbed, &cfg).unwrap();
        let sidecar = std::fs::read_to_string(dir.path().join("provenance.json")).unwrap();
        assert!(sidecar.contains("m5-test"));
        assert!(sidecar.contains("delta_linf"));
        assert!(dir.path().join("f000_perturbed.wav").exists());
    }
}
