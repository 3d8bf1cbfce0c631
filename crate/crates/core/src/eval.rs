//! Evaluation artifacts: per-gender accuracy reports, attack matrices,
//! RFE-intersection analysis, signal-level utility metrics, and the
//! vocal-adversary adaptation table.
//!
//! Accuracy cells are formatted "All (F/M)" with one decimal. Evaluation
//! always uses the first `eval_s` seconds of each utterance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array2;

use crate::attack::{perturb_corpus, InputGradModel, PgdConfig};
use crate::audio_io::{fix_length, Gender, Waveform};
use crate::error::{Error, Result};
use crate::features::{extract_all, Feature, PitchConfig, NUM_FEATURES};
use crate::linmodels::{feature_matrix, svm_rfe, train_linear_svm, LinearModel, RfeRanking};
use crate::neuralnet::M5Model;

/// Anything that can label an utterance with a gender.
pub trait GenderClassifier {
    fn id(&self) -> String;
    fn classify(&self, w: &Waveform) -> Result<Gender>;
}

/// M5 CNN classifier over the first `eval_s` seconds of raw samples.
pub struct CnnClassifier {
    pub model: M5Model<f32>,
    pub id: String,
    pub eval_s: f64,
}

impl GenderClassifier for CnnClassifier {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn classify(&self, w: &Waveform) -> Result<Gender> {
        let shaped = fix_length(w, self.eval_s);
        let x: Vec<f32> = shaped.samples.iter().map(|&v| v as f32).collect();
        self.model.classify(&x)
    }
}

/// Linear model over extracted features of the first `eval_s` seconds.
pub struct FeatureClassifier {
    pub model: LinearModel,
    pub id: String,
    pub pitch: PitchConfig,
    pub eval_s: f64,
}

impl GenderClassifier for FeatureClassifier {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn classify(&self, w: &Waveform) -> Result<Gender> {
        let shaped = fix_length(w, self.eval_s);
        let features = extract_all(&shaped, &self.pitch)?;
        Ok(self.model.predict(&features.values)?.0)
    }
}

/// Per-gender accuracy with exact pooled counts, so the pooling identity
/// accuracy_all = (n_f * acc_f + n_m * acc_m) / (n_f + n_m) holds by
/// construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalReport {
    pub model_id: String,
    pub corpus_id: String,
    pub n_f: usize,
    pub n_m: usize,
    pub correct_f: usize,
    pub correct_m: usize,
}

impl EvalReport {
    pub fn accuracy_f(&self) -> f64 {
        percentage(self.correct_f, self.n_f)
    }

    pub fn accuracy_m(&self) -> f64 {
        percentage(self.correct_m, self.n_m)
    }

    pub fn accuracy_all(&self) -> f64 {
        percentage(self.correct_f + self.correct_m, self.n_f + self.n_m)
    }

    /// Table cell in the "All (F/M)" style, one decimal.
    pub fn cell(&self) -> String {
        format!(
            "{:.1} ({:.1}/{:.1})",
            self.accuracy_all(),
            self.accuracy_f(),
            self.accuracy_m()
        )
    }
}

fn percentage(correct: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * correct as f64 / n as f64
    }
}

/// Evaluate a classifier per gender on the first `eval_s` seconds of each
/// utterance. Every utterance must carry a gender label.
pub fn accuracy_by_gender(
    model: &dyn GenderClassifier,
    corpus: &[Waveform],
    corpus_id: &str,
    eval_s: f64,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        model_id: model.id(),
        corpus_id: corpus_id.to_string(),
        n_f: 0,
        n_m: 0,
        correct_f: 0,
        correct_m: 0,
    };
    for w in corpus {
        let truth = w.gender.ok_or_else(|| {
            Error::data(format!("utterance {} has no gender label", w.source_id))
        })?;
        let shaped = fix_length(w, eval_s);
        let correct = model.classify(&shaped)? == truth;
        match truth {
            Gender::F => {
                report.n_f += 1;
                report.correct_f += correct as usize;
            }
            Gender::M => {
                report.n_m += 1;
                report.correct_m += correct as usize;
            }
        }
    }
    Ok(report)
}

/// One attack-matrix cell: an evaluation or a per-cell error marker.
#[derive(Debug, Clone)]
pub struct MatrixCell {
    pub attacker_id: String,
    pub white_box: bool,
    pub outcome: std::result::Result<EvalReport, String>,
}

#[derive(Debug, Clone)]
pub struct MatrixRow {
    /// Reference model id, or "Original" for the unperturbed corpus.
    pub ref_id: String,
    pub cells: Vec<MatrixCell>,
}

#[derive(Debug, Clone)]
pub struct AttackMatrix {
    pub rows: Vec<MatrixRow>,
}

pub const ORIGINAL_ROW: &str = "Original";

/// Build the attack matrix: an "Original" row on the clean corpus, then
/// one row per reference model, each evaluated on a corpus perturbed once
/// against that reference. White-box cells are those where the attacker id
/// equals the reference id. Cell failures become error markers, not
/// aborts.
pub fn attack_matrix(
    refs: &[&dyn InputGradModel],
    attackers: &[&dyn GenderClassifier],
    corpus: &[Waveform],
    pgd: &PgdConfig,
) -> Result<AttackMatrix> {
    let mut rows = Vec::with_capacity(refs.len() + 1);
    let clean: Vec<Waveform> = corpus.iter().map(|w| fix_length(w, pgd.segment_s)).collect();
    let eval_row = |row_corpus: &[Waveform], ref_id: &str| -> MatrixRow {
        let cells = attackers
            .iter()
            .map(|attacker| MatrixCell {
                attacker_id: attacker.id(),
                white_box: attacker.id() == ref_id,
                outcome: accuracy_by_gender(*attacker, row_corpus, ref_id, pgd.segment_s)
                    .map_err(|e| e.to_string()),
            })
            .collect();
        MatrixRow {
            ref_id: ref_id.to_string(),
            cells,
        }
    };
    rows.push(eval_row(&clean, ORIGINAL_ROW));
    for reference in refs {
        // One perturbation run per reference, shared by every attacker.
        let ref_id = reference.model_id();
        match perturb_corpus(*reference, &clean, pgd) {
            Ok(p) => {
                let perturbed: Vec<Waveform> =
                    p.results.into_iter().map(|r| r.adversarial).collect();
                let mut row = eval_row(&perturbed, &ref_id);
                if !p.skipped.is_empty() {
                    for cell in &mut row.cells {
                        cell.outcome = Err(format!("{} files skipped", p.skipped.len()));
                    }
                }
                rows.push(row);
            }
            Err(e) => {
                let cells = attackers
                    .iter()
                    .map(|attacker| MatrixCell {
                        attacker_id: attacker.id(),
                        white_box: attacker.id() == ref_id,
                        outcome: Err(e.to_string()),
                    })
                    .collect();
                rows.push(MatrixRow {
                    ref_id,
                    cells,
                });
            }
        }
    }
    Ok(AttackMatrix { rows })
}

impl AttackMatrix {
    /// Aligned plain-text table; white-box cells are marked with '*'.
    pub fn render_text(&self) -> String {
        let headers: Vec<String> = self
            .rows
            .first()
            .map(|r| r.cells.iter().map(|c| c.attacker_id.clone()).collect())
            .unwrap_or_default();
        let mut grid: Vec<Vec<String>> = vec![];
        let mut first_col = vec!["ref \\ attacker".to_string()];
        for row in &self.rows {
            first_col.push(row.ref_id.clone());
            grid.push(
                row.cells
                    .iter()
                    .map(|c| {
                        let body = match &c.outcome {
                            Ok(r) => r.cell(),
                            Err(e) => format!("error: {e}"),
                        };
                        if c.white_box {
                            format!("{body}*")
                        } else {
                            body
                        }
                    })
                    .collect(),
            );
        }
        let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
        for row in &grid {
            for (j, cell) in row.iter().enumerate() {
                widths[j] = widths[j].max(cell.len());
            }
        }
        let col0 = first_col.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut out = String::new();
        let _ = write!(out, "{:col0$}", first_col[0]);
        for (h, w) in headers.iter().zip(&widths) {
            let _ = write!(out, " | {h:>w$}");
        }
        out.push('\n');
        for (label, row) in first_col[1..].iter().zip(&grid) {
            let _ = write!(out, "{label:col0$}");
            for (cell, w) in row.iter().zip(&widths) {
                let _ = write!(out, " | {cell:>w$}");
            }
            out.push('\n');
        }
        out.push_str("* = white-box cell (attacker equals the reference model)\n");
        out
    }

    /// Machine-readable CSV: one line per cell with raw fields.
    pub fn render_csv(&self) -> String {
        let mut out =
            String::from("ref,attacker,white_box,all,f,m,n_f,n_m,error\n");
        for row in &self.rows {
            for cell in &row.cells {
                match &cell.outcome {
                    Ok(r) => {
                        let _ = writeln!(
                            out,
                            "{},{},{},{:.1},{:.1},{:.1},{},{},",
                            row.ref_id,
                            cell.attacker_id,
                            cell.white_box,
                            r.accuracy_all(),
                            r.accuracy_f(),
                            r.accuracy_m(),
                            r.n_f,
                            r.n_m
                        );
                    }
                    Err(e) => {
                        let _ = writeln!(
                            out,
                            "{},{},{},,,,,,{}",
                            row.ref_id,
                            cell.attacker_id,
                            cell.white_box,
                            e.replace(',', ";")
                        );
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct IntersectionReport {
    /// Top features separating F from M, most important first.
    pub top_gender: Vec<Feature>,
    /// Top features separating perturbed from clean, most important first.
    pub top_perturb: Vec<Feature>,
    /// Set intersection of the two lists, in registry order.
    pub intersection: Vec<Feature>,
    /// Train accuracy of the origin (clean vs perturbed) SVM.
    pub origin_accuracy: f64,
    /// False when the origin task is at chance (clean = perturbed).
    pub origin_separable: bool,
}

/// RFE on the gender task (clean corpus) and the origin task (clean vs
/// perturbed), using already-extracted feature rows aligned with `labels`.
pub fn rfe_intersection(
    clean: &[(Vec<f64>, Gender)],
    perturbed: &[Vec<f64>],
    n: usize,
    c: f64,
    seed: u64,
) -> Result<IntersectionReport> {
    let gender_x = feature_matrix(
        &clean.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>(),
    )?;
    let gender_y: Vec<f64> = clean.iter().map(|(_, g)| g.sign()).collect();
    let gender_rfe = svm_rfe(&gender_x, &gender_y, n, c, seed)?;

    let mut origin_rows: Vec<Vec<f64>> = clean.iter().map(|(v, _)| v.clone()).collect();
    origin_rows.extend(perturbed.iter().cloned());
    let origin_x = feature_matrix(&origin_rows)?;
    let mut origin_y = vec![-1.0; clean.len()];
    origin_y.extend(std::iter::repeat(1.0).take(perturbed.len()));
    let origin_rfe = svm_rfe(&origin_x, &origin_y, n, c, seed)?;

    let origin_accuracy = origin_svm_accuracy(&origin_x, &origin_y, c, seed)?;
    Ok(build_intersection(
        &gender_rfe,
        &origin_rfe,
        origin_accuracy,
    ))
}

fn origin_svm_accuracy(x: &Array2<f64>, y: &[f64], c: f64, seed: u64) -> Result<f64> {
    let model = train_linear_svm(x, y, c, seed)?;
    let mut correct = 0usize;
    for (row, &label) in x.outer_iter().zip(y) {
        let (g, _) = model.predict(row.as_slice().expect("contiguous"))?;
        if g.sign() == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / y.len() as f64)
}

fn build_intersection(
    gender: &RfeRanking,
    origin: &RfeRanking,
    origin_accuracy: f64,
) -> IntersectionReport {
    let to_features = |r: &RfeRanking| -> Vec<Feature> {
        r.top_n
            .iter()
            .map(|&i| Feature::ALL[i])
            .collect()
    };
    let top_gender = to_features(gender);
    let top_perturb = to_features(origin);
    let gender_set: BTreeSet<usize> = gender.top_n.iter().copied().collect();
    let intersection = Feature::ALL
        .iter()
        .enumerate()
        .filter(|(i, _)| gender_set.contains(i) && origin.top_n.contains(i))
        .map(|(_, f)| *f)
        .collect();
    IntersectionReport {
        top_gender,
        top_perturb,
        intersection,
        origin_accuracy,
        // At chance the "discriminating" features are noise.
        origin_separable: origin_accuracy >= 0.75,
    }
}

impl IntersectionReport {
    pub fn render_text(&self) -> String {
        let names = |fs: &[Feature]| -> String {
            fs.iter().map(|f| f.name()).collect::<Vec<_>>().join(", ")
        };
        let mut out = String::new();
        let _ = writeln!(out, "top gender features:  {}", names(&self.top_gender));
        let _ = writeln!(out, "top perturb features: {}", names(&self.top_perturb));
        let _ = writeln!(out, "intersection:         {}", names(&self.intersection));
        let _ = writeln!(
            out,
            "origin SVM accuracy:  {:.1}%{}",
            100.0 * self.origin_accuracy,
            if self.origin_separable {
                ""
            } else {
                " (at chance: origin task not separable)"
            }
        );
        out
    }
}

/// Signal-level utility of one perturbed utterance.
#[derive(Debug, Clone)]
pub struct UtteranceUtility {
    pub source_id: String,
    pub delta_linf: f64,
    pub delta_l2: f64,
    /// Segmental SNR in dB over 32 ms segments; +inf when the
    /// perturbation is identically zero.
    pub seg_snr_db: f64,
}

#[derive(Debug, Clone)]
pub struct UtilityReport {
    pub per_utterance: Vec<UtteranceUtility>,
    pub mean_seg_snr_db: f64,
    /// Mean absolute feature drift in train-std units, one entry per
    /// registry slot.
    pub feature_drift: Vec<f64>,
}

const SNR_SEGMENT_S: f64 = 0.032;

fn segmental_snr(orig: &[f64], pert: &[f64], rate: f64) -> f64 {
    let seg = (SNR_SEGMENT_S * rate).round() as usize;
    let mut ratios = Vec::new();
    for (o, p) in orig.chunks(seg).zip(pert.chunks(seg)) {
        let sig: f64 = o.iter().map(|v| (v - 0.5) * (v - 0.5)).sum();
        let noise: f64 = o.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if noise > 0.0 && sig > 0.0 {
            ratios.push(10.0 * (sig / noise).log10());
        }
    }
    if ratios.is_empty() {
        f64::INFINITY
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }
}

/// Pair corpora by source_id and compute delta norms, segmental SNR, and
/// per-feature drift in units of the provided per-feature training stds.
pub fn utility_metrics(
    orig: &[Waveform],
    perturbed: &[Waveform],
    train_std: &[f64],
    pitch: &PitchConfig,
) -> Result<UtilityReport> {
    if train_std.len() != NUM_FEATURES {
        return Err(Error::data(format!(
            "train_std has {} entries, expected {NUM_FEATURES}",
            train_std.len()
        )));
    }
    let by_id: BTreeMap<&str, &Waveform> =
        orig.iter().map(|w| (w.source_id.as_str(), w)).collect();
    let missing: Vec<&str> = perturbed
        .iter()
        .filter(|w| !by_id.contains_key(w.source_id.as_str()))
        .map(|w| w.source_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::data(format!(
            "perturbed utterances without originals: {}",
            missing.join(", ")
        )));
    }

    let mut per_utterance = Vec::with_capacity(perturbed.len());
    let mut drift_sums = vec![0.0f64; NUM_FEATURES];
    let mut snr_sum = 0.0f64;
    let mut snr_count = 0usize;
    for p in perturbed {
        let o = by_id[p.source_id.as_str()];
        let o = fix_length(o, p.duration_s());
        let delta_linf = o
            .samples
            .iter()
            .zip(&p.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let delta_l2 = o
            .samples
            .iter()
            .zip(&p.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let snr = segmental_snr(&o.samples, &p.samples, o.sample_rate_hz as f64);
        if snr.is_finite() {
            snr_sum += snr;
            snr_count += 1;
        }
        let fo = extract_all(&o, pitch)?;
        let fp = extract_all(p, pitch)?;
        for j in 0..NUM_FEATURES {
            let std = if train_std[j] > 0.0 { train_std[j] } else { 1.0 };
            drift_sums[j] += (fp.values[j] - fo.values[j]).abs() / std;
        }
        per_utterance.push(UtteranceUtility {
            source_id: p.source_id.clone(),
            delta_linf,
            delta_l2,
            seg_snr_db: snr,
        });
    }
    let n = perturbed.len().max(1) as f64;
    Ok(UtilityReport {
        per_utterance,
        mean_seg_snr_db: if snr_count == 0 {
            f64::INFINITY
        } else {
            snr_sum / snr_count as f64
        },
        feature_drift: drift_sums.iter().map(|s| s / n).collect(),
    })
}

impl UtilityReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "utterance  delta_linf  delta_l2  seg_snr_db");
        for u in &self.per_utterance {
            let snr = if u.seg_snr_db.is_finite() {
                format!("{:.1}", u.seg_snr_db)
            } else {
                "inf".to_string()
            };
            let _ = writeln!(
                out,
                "{:<10} {:>10.4} {:>9.4} {:>10}",
                u.source_id, u.delta_linf, u.delta_l2, snr
            );
        }
        let mean = if self.mean_seg_snr_db.is_finite() {
            format!("{:.1} dB", self.mean_seg_snr_db)
        } else {
            "inf".to_string()
        };
        let _ = writeln!(out, "mean segmental SNR: {mean}");
        let _ = writeln!(out, "feature drift (train-std units):");
        for (f, d) in Feature::ALL.iter().zip(&self.feature_drift) {
            let _ = writeln!(out, "  {:<24} {:.4}", f.name(), d);
        }
        out
    }
}

/// Per-adaptation accuracy table: one row per adaptation tag, one column
/// per model.
#[derive(Debug, Clone)]
pub struct AdaptationReport {
    pub model_ids: Vec<String>,
    pub rows: Vec<(String, Vec<EvalReport>)>,
    pub skipped: Vec<String>,
}

/// Group utterances by adaptation tag and evaluate every model per group.
/// Untagged utterances are skipped with a warning entry.
pub fn adaptation_report(
    models: &[&dyn GenderClassifier],
    corpus: &[Waveform],
    eval_s: f64,
) -> Result<AdaptationReport> {
    let mut groups: BTreeMap<String, Vec<&Waveform>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for w in corpus {
        match w.tags.iter().next() {
            Some(tag) => groups.entry(tag.clone()).or_default().push(w),
            None => skipped.push(format!("{}: no adaptation tag", w.source_id)),
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (tag, members) in groups {
        let owned: Vec<Waveform> = members.into_iter().cloned().collect();
        let mut cells = Vec::with_capacity(models.len());
        for model in models {
            cells.push(accuracy_by_gender(*model, &owned, &tag, eval_s)?);
        }
        rows.push((tag, cells));
    }
    Ok(AdaptationReport {
        model_ids: models.iter().map(|m| m.id()).collect(),
        rows,
        skipped,
    })
}

impl AdaptationReport {
    pub fn render_text(&self) -> String {
        let col0 = self
            .rows
            .iter()
            .map(|(t, _)| t.len())
            .chain(["adaptation".len()])
            .max()
            .unwrap_or(0);
        let mut widths: Vec<usize> = self.model_ids.iter().map(|m| m.len()).collect();
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(_, reports)| reports.iter().map(|r| r.cell()).collect())
            .collect();
        for row in &cells {
            for (j, cell) in row.iter().enumerate() {
                widths[j] = widths[j].max(cell.len());
            }
        }
        let mut out = String::new();
        let _ = write!(out, "{:col0$}", "adaptation");
        for (m, w) in self.model_ids.iter().zip(&widths) {
            let _ = write!(out, " | {m:>w$}");
        }
        out.push('\n');
        for ((tag, _), row) in self.rows.iter().zip(&cells) {
            let _ = write!(out, "{tag:col0$}");
            for (cell, w) in row.iter().zip(&widths) {
                let _ = write!(out, " | {cell:>w$}");
            }
            out.push('\n');
        }
        for s in &self.skipped {
            let _ = writeln!(out, "skipped {s}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::PIPELINE_RATE_HZ;
    use crate::synth::{make_corpus, CorpusSpec};

    struct Oracle;
    impl GenderClassifier for Oracle {
        fn id(&self) -> String {
            "oracle".to_string()
        }
        fn classify(&self, w: &Waveform) -> Result<Gender> {
            w.gender
                .ok_or_else(|| Error::data("unlabeled".to_string()))
        }
    }

    struct ConstantF;
    impl GenderClassifier for ConstantF {
        fn id(&self) -> String {
            "always-f".to_string()
        }
        fn classify(&self, _: &Waveform) -> Result<Gender> {
            Ok(Gender::F)
        }
    }

    /// Reference with identically zero gradients: PGD becomes the
    /// identity, which makes matrix plumbing testable without a CNN.
    struct ZeroGrad;
    impl InputGradModel for ZeroGrad {
        fn model_id(&self) -> String {
            "zero-grad".to_string()
        }
        fn loss_and_input_grad(&self, samples: &[f64], _: Gender) -> Result<(f64, Vec<f64>)> {
            Ok((1.0, vec![0.0; samples.len()]))
        }
    }

    fn small_corpus(n: usize, seed: u64) -> Vec<Waveform> {
        make_corpus(&CorpusSpec {
            n_per_gender: n,
            duration_s: 0.5,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn perfect_classifier_scores_100() {
        let corpus = small_corpus(3, 0);
        let r = accuracy_by_gender(&Oracle, &corpus, "clean", 0.5).unwrap();
        assert_eq!(r.cell(), "100.0 (100.0/100.0)");
        assert_eq!((r.n_f, r.n_m), (3, 3));
    }

    #[test]
    fn constant_f_on_balanced_corpus() {
        let corpus = small_corpus(4, 1);
        let r = accuracy_by_gender(&ConstantF, &corpus, "clean", 0.5).unwrap();
        assert_eq!(r.cell(), "50.0 (100.0/0.0)");
    }

    #[test]
    fn pooling_identity_holds() {
        let corpus = small_corpus(5, 2);
        let r = accuracy_by_gender(&ConstantF, &corpus, "clean", 0.5).unwrap();
        let pooled = (r.n_f as f64 * r.accuracy_f() + r.n_m as f64 * r.accuracy_m())
            / (r.n_f + r.n_m) as f64;
        assert!((pooled - r.accuracy_all()).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_utterance_errors() {
        let w = Waveform::new(vec![0.5; 8000], PIPELINE_RATE_HZ, "anon").unwrap();
        assert!(accuracy_by_gender(&Oracle, &[w], "clean", 0.5).is_err());
    }

    #[test]
    fn matrix_has_original_row_and_white_box_flags() {
        let corpus = small_corpus(2, 3);
        let pgd = PgdConfig {
            iterations: 1,
            segment_s: 0.5,
            ..Default::default()
        };
        let refs: Vec<&dyn InputGradModel> = vec![&ZeroGrad];
        let oracle = Oracle;
        let constant = ConstantF;
        let attackers: Vec<&dyn GenderClassifier> = vec![&oracle, &constant];
        let m = attack_matrix(&refs, &attackers, &corpus, &pgd).unwrap();
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[0].ref_id, ORIGINAL_ROW);
        assert_eq!(m.rows[1].ref_id, "zero-grad");
        assert!(m.rows.iter().all(|r| r.cells.len() == 2));
        assert!(m.rows[1].cells.iter().all(|c| !c.white_box));
        // Zero gradients leave the corpus unchanged: rows agree.
        for (a, b) in m.rows[0].cells.iter().zip(&m.rows[1].cells) {
            let (ra, rb) = (a.outcome.as_ref().unwrap(), b.outcome.as_ref().unwrap());
            assert_eq!(ra.correct_f, rb.correct_f);
            assert_eq!(ra.correct_m, rb.correct_m);
        }
        let text = m.render_text();
        assert!(text.contains("Original"));
        let csv = m.render_csv();
        assert!(csv.starts_with("ref,attacker,white_box"));
    }

    #[test]
    fn identical_corpora_flag_origin_at_chance() {
        let corpus = small_corpus(6, 4);
        let cfg = PitchConfig::default();
        let clean: Vec<(Vec<f64>, Gender)> = corpus
            .iter()
            .map(|w| {
                (
                    extract_all(w, &cfg).unwrap().values.to_vec(),
                    w.gender.unwrap(),
                )
            })
            .collect();
        let same: Vec<Vec<f64>> = clean.iter().map(|(v, _)| v.clone()).collect();
        let r = rfe_intersection(&clean, &same, 5, 1.0, 0).unwrap();
        assert!(!r.origin_separable, "accuracy {}", r.origin_accuracy);
        assert!(r.render_text().contains("at chance"));
    }

    #[test]
    fn intensity_shift_dominates_origin_task() {
        let corpus = small_corpus(6, 5);
        let cfg = PitchConfig::default();
        let clean: Vec<(Vec<f64>, Gender)> = corpus
            .iter()
            .map(|w| {
                (
                    extract_all(w, &cfg).unwrap().values.to_vec(),
                    w.gender.unwrap(),
                )
            })
            .collect();
        // Scale deviations around the midline: only intensity moves.
        let perturbed: Vec<Vec<f64>> = corpus
            .iter()
            .map(|w| {
                let scaled: Vec<f64> =
                    w.samples.iter().map(|&v| 0.5 + 0.8 * (v - 0.5)).collect();
                let sw = Waveform::new(scaled, w.sample_rate_hz, w.source_id.clone()).unwrap();
                extract_all(&sw, &cfg).unwrap().values.to_vec()
            })
            .collect();
        let r = rfe_intersection(&clean, &perturbed, 2, 1.0, 0).unwrap();
        assert!(r.origin_separable, "accuracy {}", r.origin_accuracy);
        let intensity = [
            Feature::IntensityMin,
            Feature::IntensityMax,
            Feature::IntensityMean,
        ];
        for f in &r.top_perturb {
            assert!(intensity.contains(f), "unexpected top feature {}", f.name());
        }
    }

    #[test]
    fn utility_on_identical_corpora_is_degenerate() {
        let corpus = small_corpus(2, 6);
        let std = vec![1.0; NUM_FEATURES];
        let r = utility_metrics(&corpus, &corpus, &std, &PitchConfig::default()).unwrap();
        assert!(r.mean_seg_snr_db.is_infinite());
        for u in &r.per_utterance {
            assert_eq!(u.delta_linf, 0.0);
            assert_eq!(u.delta_l2, 0.0);
            assert!(u.seg_snr_db.is_infinite());
        }
        assert!(r.feature_drift.iter().all(|&d| d == 0.0));
        assert!(r.render_text().contains("inf"));
    }

    #[test]
    fn constant_delta_gives_expected_linf() {
        let corpus = small_corpus(1, 7);
        let shifted: Vec<Waveform> = corpus
            .iter()
            .map(|w| {
                let s: Vec<f64> = w
                    .samples
                    .iter()
                    .map(|&v| (v * 0.8 + 0.1).clamp(0.0, 1.0))
                    .collect();
                let mut sw = Waveform::new(s, w.sample_rate_hz, w.source_id.clone()).unwrap();
                sw.gender = w.gender;
                sw
            })
            .collect();
        let std = vec![1.0; NUM_FEATURES];
        let r = utility_metrics(&corpus, &shifted, &std, &PitchConfig::default()).unwrap();
        // Max shift of v*0.8+0.1 on [0,1] is 0.1 at the extremes.
        assert!((r.per_utterance[0].delta_linf - 0.1).abs() < 1e-6);
        assert!(r.per_utterance[0].seg_snr_db.is_finite());
    }

    #[test]
    fn utility_rejects_unmatched_ids() {
        let a = small_corpus(1, 8);
        let mut b = a.clone();
        b[0].source_id = "stranger".to_string();
        let std = vec![1.0; NUM_FEATURES];
        assert!(utility_metrics(&a, &b, &std, &PitchConfig::default()).is_err());
    }

    #[test]
    fn adaptation_report_shape_and_skips() {
        let mut corpus = small_corpus(2, 9);
        for w in corpus.iter_mut().take(2) {
            w.tags.clear();
            w.tags.insert("overlyhappy".to_string());
        }
        let mut untagged = corpus[0].clone();
        untagged.source_id = "untagged".to_string();
        untagged.tags.clear();
        corpus.push(untagged);
        let oracle = Oracle;
        let constant = ConstantF;
        let models: Vec<&dyn GenderClassifier> = vec![&oracle, &constant];
        let r = adaptation_report(&models, &corpus, 0.5).unwrap();
        assert_eq!(r.model_ids, vec!["oracle", "always-f"]);
        assert_eq!(r.rows.len(), 2); // default + overlyhappy
        assert_eq!(r.skipped.len(), 1);
        for (_, cells) in &r.rows {
            assert_eq!(cells.len(), 2);
        }
        let text = r.render_text();
        assert!(text.contains("overlyhappy"));
        assert!(text.contains("skipped"));
    }
}
