//! Batch command-line surface for the voxshield pipeline.
//!
//! Every run is driven by a TOML config file with one section per module;
//! flags override individual keys. The resolved config is written next to
//! the artifacts so each experiment is reconstructable from its output
//! directory alone.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use voxshield::attack::{perturb_corpus, write_perturbed, NamedRef, PgdConfig};
use voxshield::audio_io::{fix_length, Gender, Manifest, ManifestEntry, Waveform};
use voxshield::eval::{
    accuracy_by_gender, adaptation_report, attack_matrix, rfe_intersection, utility_metrics,
    CnnClassifier, FeatureClassifier, GenderClassifier,
};
use voxshield::features::{
    extract_corpus, write_features_csv, Feature, FeatureRow, PitchConfig,
};
use voxshield::linmodels::{
    feature_matrix, svm_rfe, train_linear_svm, train_linear_svm_subset, train_ridge_single,
    LinearModel,
};
use voxshield::neuralnet::{
    load_model, save_model, train, M5Config, M5Model, TrainConfig,
};
use voxshield::synth::{make_corpus, make_overlyhappy_corpus, CorpusSpec};
use voxshield::{Error, Result};

/// Evaluation knobs that have no module config of their own.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalConfig {
    /// Seconds of audio evaluated per utterance.
    eval_s: f64,
    svm_c: f64,
    ridge_lambda: f64,
    rfe_top_n: usize,
    seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_s: 6.0,
            svm_c: 1.0,
            ridge_lambda: 1.0,
            rfe_top_n: 10,
            seed: 0,
        }
    }
}

/// One section per module; unknown keys are rejected everywhere.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    pitch: PitchConfig,
    synth: CorpusSpec,
    cnn: M5Config,
    train: TrainConfig,
    pgd: PgdConfig,
    eval: EvalConfig,
}

#[derive(Parser)]
#[command(
    name = "voxshield",
    about = "Speaker-gender protection pipeline: synthesis, features, models, attacks, reports",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML config file; omitted keys fall back to built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and the resolved config
    #[arg(long)]
    out: PathBuf,
    /// Override every seed in the config
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Adaptation {
    Default,
    Overlyhappy,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled synthetic corpus (WAV directory + manifest)
    Synth {
        #[command(flatten)]
        common: Common,
        /// Vocal-adversary proxy to apply during synthesis
        #[arg(long, value_enum, default_value = "default")]
        adaptation: Adaptation,
    },
    /// Extract the 34-feature registry for every manifest entry
    Extract {
        #[command(flatten)]
        common: Common,
        /// Corpus manifest (path,speaker_id,gender,tags)
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train a full-feature linear SVM and write it as JSON
    TrainSvm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Rank features by SVM-RFE and train an SVM on the top subset
    Rfe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the single-feature mean-pitch ridge classifier
    TrainRidge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the raw-waveform CNN and write a checkpoint + loss trace
    TrainCnn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run PGD against a CNN checkpoint; write perturbed WAVs + provenance
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// CNN checkpoint the attack differentiates through
        #[arg(long)]
        ref_model: PathBuf,
    },
    /// Per-gender accuracy of one or more models on a corpus
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Model file (.m5 checkpoint or .json linear model); repeatable
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
    },
    /// Attack matrix: Original row plus one row per reference checkpoint
    Matrix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Attacker model file; repeatable
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        /// Reference CNN checkpoint; repeatable
        #[arg(long, required = true)]
        ref_model: Vec<PathBuf>,
    },
    /// RFE top-feature overlap between the gender task and clean-vs-perturbed
    Intersect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ref_model: PathBuf,
    },
    /// Signal-level utility of a perturbed corpus against its original
    Utility {
        #[command(flatten)]
        common: Common,
        /// Manifest of the original corpus
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest of the perturbed corpus, aligned by speaker_id
        #[arg(long)]
        perturbed_manifest: PathBuf,
    },
    /// Per-adaptation accuracy table over a tag-labeled corpus
    Adaptations {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Numeric(_) => 4,
                _ => 3,
            })
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            toml::from_str(&text)
                .map_err(|e| Error::config(format!("config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.synth.seed = s;
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    Ok(cfg)
}

/// Write the resolved config verbatim into the output directory.
fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::config(format!("config serialization: {e}")))?;
    write_text(&out.join("config_resolved.toml"), &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_corpus(manifest: &Path) -> Result<Vec<Waveform>> {
    let m = Manifest::read_csv(manifest)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    m.load_waveforms(base)
}

/// Write WAVs under `<out>/wav/` plus `<out>/manifest.csv`.
fn write_corpus(out: &Path, waves: &[Waveform]) -> Result<()> {
    let wav_dir = out.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::Io {
        path: wav_dir.clone(),
        source: e,
    })?;
    let mut entries = Vec::with_capacity(waves.len());
    for w in waves {
        let rel = PathBuf::from("wav").join(format!("{}.wav", w.source_id));
        voxshield::audio_io::save_wav(w, out.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            speaker_id: w.source_id.clone(),
            gender: w.gender,
            tags: w.tags.clone(),
        });
    }
    Manifest::new(entries)?.write_csv(out.join("manifest.csv"))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Dispatch on extension: `.m5` checkpoints become CNN classifiers,
/// `.json` files linear-model classifiers. The classifier id is the file
/// stem, which is what matrix white-box flags compare against.
fn load_classifier(
    path: &Path,
    pitch: &PitchConfig,
    eval_s: f64,
) -> Result<Box<dyn GenderClassifier>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("m5") => Ok(Box::new(CnnClassifier {
            model: load_model(path)?,
            id: stem(path),
            eval_s,
        })),
        Some("json") => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            Ok(Box::new(FeatureClassifier {
                model: LinearModel::from_json(&text)?,
                id: stem(path),
                pitch: pitch.clone(),
                eval_s,
            }))
        }
        _ => Err(Error::config(format!(
            "model {}: expected a .m5 checkpoint or .json linear model",
            path.display()
        ))),
    }
}

/// Feature rows for a corpus, each utterance shaped to `eval_s` first.
fn corpus_features(
    waves: &[Waveform],
    pitch: &PitchConfig,
    eval_s: f64,
) -> Result<Vec<FeatureRow>> {
    let shaped: Vec<Waveform> = waves.iter().map(|w| fix_length(w, eval_s)).collect();
    extract_corpus(&shaped, pitch)
}

fn labeled_xy(rows: &[FeatureRow]) -> Result<(ndarray::Array2<f64>, Vec<f64>)> {
    let mut y = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len());
    for r in rows {
        let g = r.gender.ok_or_else(|| {
            Error::data(format!("utterance {} has no gender label", r.source_id))
        })?;
        y.push(g.sign());
        values.push(r.vector.values.to_vec());
    }
    Ok((feature_matrix(&values)?, y))
}

fn write_model(out: &Path, name: &str, model: &LinearModel) -> Result<()> {
    write_text(&out.join(name), &model.to_json())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { common, adaptation } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let corpus = match adaptation {
                Adaptation::Default => make_corpus(&cfg.synth)?,
                Adaptation::Overlyhappy => make_overlyhappy_corpus(&cfg.synth)?,
            };
            write_corpus(&common.out, &corpus)?;
            println!("wrote {} utterances to {}", corpus.len(), common.out.display());
            Ok(())
        }
        Cmd::Extract { common, manifest } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let corpus = load_corpus(&manifest)?;
            let rows = corpus_features(&corpus, &cfg.pitch, cfg.eval.eval_s)?;
            let path = common.out.join("features.csv");
            write_features_csv(&rows, &path)?;
            println!("wrote {} feature rows to {}", rows.len(), path.display());
            Ok(())
        }
        Cmd::TrainSvm { common, manifest } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let corpus = load_corpus(&manifest)?;
            let rows = corpus_features(&corpus, &cfg.pitch, cfg.eval.eval_s)?;
            let (x, y) = labeled_xy(&rows)?;
            let model = train_linear_svm(&x, &y, cfg.eval.svm_c, cfg.eval.seed)?;
            write_model(&common.out, "svm_full.json", &model)?;
            println!("wrote {}", common.out.join("svm_full.json").display());
            Ok(())
        }
        Cmd::Rfe { common, manifest } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let corpus = load_corpus(&manifest)?;
            let rows = corpus_features(&corpus, &cfg.pitch, cfg.eval.eval_s)?;
            let (x, y) = labeled_xy(&rows)?;
            let ranking = svm_rfe(&x, &y, cfg.eval.rfe_top_n, cfg.eval.svm_c, cfg.eval.seed)?;
            let names = |idx: &[usize]| -> Vec<&str> {
                idx.iter().map(|&i| Feature::ALL[i].name()).collect()
            };
            let report = serde_json::json!({
                "top_n": names(&ranking.top_n),
                "elimination_order": names(&ranking.elimination_order),
            });
            write_text(
                &common.out.join("rfe.json"),
                &serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::data(e.to_string()))?,
            )?;
            let model = train_linear_svm_subset(
                &x,
                &y,
                cfg.eval.svm_c,
                cfg.eval.seed,
                &ranking.top_n,
            )?;
            write_model(&common.out, "svm_top.json", &model)?;
            println!(
                "top {} features: {}",
                ranking.top_n.len(),
                names(&ranking.top_n).join(", ")
            );
            Ok(())
        }
        Cmd::TrainRidge { common, manifest } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let corpus = load_corpus(&manifest)?;
            let rows = corpus_features(&corpus, &cfg.pitch, cfg.eval.eval_s)?;
            let slot = Feature::PitchMean.index();
            let mut y = Vec::with_capacity(rows.len());
            let mut col = Vec::with_capacity(rows.len());
            for r in &rows {
                let g = r.gender.ok_or_else(|| {
                    Error::data(format!("utterance {} has no gender label", r.source_id))
                })?;
                y.push(g.sign());
                col.push(r.vector.values[slot]);
            }
            let model = train_ridge_single(&col, &y, cfg.eval.ridge_lambda, slot)?;
            write_model(&common.out, "ridge.json", &model)?;
            println!("wrote {}", common.out.join("ridge.json").display());
            Ok(())
        }
        Cmd::TrainCnn { common, manifest } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let corpus = load_corpus(&manifest)?;
            let (model, trace) = train::<f32>(&cfg.cnn, &cfg.train, &corpus)?;
            save_model(&model, &common.out.join("cnn.m5"))?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in trace.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            write_text(&common.out.join("loss_trace.csv"), &csv)?;
            println!(
                "wrote {} after {} steps (final loss {:.4})",
                common.out.join("cnn.m5").display(),
                trace.len(),
                trace.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Cmd::Attack {
            common,
            manifest,
            ref_model,
        } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let corpus = load_corpus(&manifest)?;
            let cnn = load_model(&ref_model)?;
            let named = NamedRef {
                model: &cnn,
                id: stem(&ref_model),
            };
            let result = perturb_corpus(&named, &corpus, &cfg.pgd)?;
            for s in &result.skipped {
                eprintln!("skipped {s}");
            }
            write_perturbed(&common.out, &result, &cfg.pgd)?;
            let entries: Vec<ManifestEntry> = result
                .results
                .iter()
                .map(|r| ManifestEntry {
                    path: PathBuf::from(format!("{}_perturbed.wav", r.adversarial.source_id)),
                    speaker_id: r.adversarial.source_id.clone(),
                    gender: r.adversarial.gender,
                    tags: r.adversarial.tags.clone(),
                })
                .collect();
            Manifest::new(entries)?.write_csv(common.out.join("manifest.csv"))?;
            println!(
                "perturbed {} utterances ({} skipped)",
                result.results.len(),
                result.skipped.len()
            );
            Ok(())
        }
        Cmd::Evaluate {
            common,
            manifest,
            model,
        } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let corpus = load_corpus(&manifest)?;
            let corpus_id = stem(&manifest);
            let mut text = String::new();
            let mut csv = String::from("model,corpus,all,f,m,n_f,n_m\n");
            for path in &model {
                let clf = load_classifier(path, &cfg.pitch, cfg.eval.eval_s)?;
                let r = accuracy_by_gender(clf.as_ref(), &corpus, &corpus_id, cfg.eval.eval_s)?;
                text.push_str(&format!("{}: {}\n", r.model_id, r.cell()));
                csv.push_str(&format!(
                    "{},{},{:.1},{:.1},{:.1},{},{}\n",
                    r.model_id,
                    r.corpus_id,
                    r.accuracy_all(),
                    r.accuracy_f(),
                    r.accuracy_m(),
                    r.n_f,
                    r.n_m
                ));
            }
            write_text(&common.out.join("evaluate.txt"), &text)?;
            write_text(&common.out.join("evaluate.csv"), &csv)?;
            print!("{text}");
            Ok(())
        }
        Cmd::Matrix {
            common,
            manifest,
            model,
            ref_model,
        } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let corpus = load_corpus(&manifest)?;
            let cnns: Vec<(M5Model<f32>, String)> = ref_model
                .iter()
                .map(|p| Ok((load_model(p)?, stem(p))))
                .collect::<Result<_>>()?;
            let named: Vec<NamedRef<M5Model<f32>>> = cnns
                .iter()
                .map(|(m, id)| NamedRef {
                    model: m,
                    id: id.clone(),
                })
                .collect();
            let refs: Vec<&dyn voxshield::attack::InputGradModel> =
                named.iter().map(|n| n as _).collect();
            let classifiers: Vec<Box<dyn GenderClassifier>> = model
                .iter()
                .map(|p| load_classifier(p, &cfg.pitch, cfg.eval.eval_s))
                .collect::<Result<_>>()?;
            let attackers: Vec<&dyn GenderClassifier> =
                classifiers.iter().map(|c| c.as_ref()).collect();
            let m = attack_matrix(&refs, &attackers, &corpus, &cfg.pgd)?;
            write_text(&common.out.join("matrix.txt"), &m.render_text())?;
            write_text(&common.out.join("matrix.csv"), &m.render_csv())?;
            print!("{}", m.render_text());
            Ok(())
        }
        Cmd::Intersect {
            common,
            manifest,
            ref_model,
        } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let corpus = load_corpus(&manifest)?;
            let cnn = load_model(&ref_model)?;
            let named = NamedRef {
                model: &cnn,
                id: stem(&ref_model),
            };
            let clean_rows =
                corpus_features(&corpus, &cfg.pitch, cfg.pgd.segment_s)?;
            let clean: Vec<(Vec<f64>, Gender)> = clean_rows
                .iter()
                .map(|r| {
                    let g = r.gender.ok_or_else(|| {
                        Error::data(format!("utterance {} has no gender label", r.source_id))
                    })?;
                    Ok((r.vector.values.to_vec(), g))
                })
                .collect::<Result<_>>()?;
            let perturbed_waves = perturb_corpus(&named, &corpus, &cfg.pgd)?;
            for s in &perturbed_waves.skipped {
                eprintln!("skipped {s}");
            }
            let adv: Vec<Waveform> = perturbed_waves
                .results
                .into_iter()
                .map(|r| r.adversarial)
                .collect();
            let pert_rows = extract_corpus(&adv, &cfg.pitch)?;
            let perturbed: Vec<Vec<f64>> = pert_rows
                .iter()
                .map(|r| r.vector.values.to_vec())
                .collect();
            let report = rfe_intersection(
                &clean,
                &perturbed,
                cfg.eval.rfe_top_n,
                cfg.eval.svm_c,
                cfg.eval.seed,
            )?;
            write_text(&common.out.join("intersection.txt"), &report.render_text())?;
            print!("{}", report.render_text());
            Ok(())
        }
        Cmd::Utility {
            common,
            manifest,
            perturbed_manifest,
        } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let orig = load_corpus(&manifest)?;
            let pert = load_corpus(&perturbed_manifest)?;
            // Per-feature stds of the original corpus define the drift unit.
            let rows = corpus_features(&orig, &cfg.pitch, cfg.eval.eval_s)?;
            let n = rows.len().max(1) as f64;
            let mut std = vec![0.0f64; voxshield::features::NUM_FEATURES];
            let mut mean = vec![0.0f64; std.len()];
            for r in &rows {
                for (m, v) in mean.iter_mut().zip(&r.vector.values) {
                    *m += v / n;
                }
            }
            for r in &rows {
                for ((s, m), v) in std.iter_mut().zip(&mean).zip(&r.vector.values) {
                    *s += (v - m) * (v - m) / n;
                }
            }
            for s in &mut std {
                *s = s.sqrt();
            }
            let report = utility_metrics(&orig, &pert, &std, &cfg.pitch)?;
            write_text(&common.out.join("utility.txt"), &report.render_text())?;
            print!("{}", report.render_text());
            Ok(())
        }
        Cmd::Adaptations {
            common,
            manifest,
            model,
        } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            prepare_out(&common.out, &cfg)?;
            let corpus = load_corpus(&manifest)?;
            let classifiers: Vec<Box<dyn GenderClassifier>> = model
                .iter()
                .map(|p| load_classifier(p, &cfg.pitch, cfg.eval.eval_s))
                .collect::<Result<_>>()?;
            let models: Vec<&dyn GenderClassifier> =
                classifiers.iter().map(|c| c.as_ref()).collect();
            let report = adaptation_report(&models, &corpus, cfg.eval.eval_s)?;
            write_text(&common.out.join("adaptations.txt"), &report.render_text())?;
            print!("{}", report.render_text());
            Ok(())
        }
    }
}
