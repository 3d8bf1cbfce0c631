//! Classic linear classifiers over feature vectors: a soft-margin linear
//! SVM solved by dual coordinate descent, SVM-RFE feature selection, and a
//! closed-form single-feature ridge classifier.
//!
//! Labels map as F -> +1, M -> -1 throughout; a score of exactly zero
//! resolves to F. Features are standardized internally before training, so
//! predictions are invariant to positive per-column rescaling of the inputs.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::Gender;
use crate::error::{Error, Result};

/// Duality-gap tolerance for the dual coordinate descent solver.
const SVM_GAP_TOL: f64 = 1e-6;
/// Epoch cap when the gap tolerance is not reached.
const SVM_MAX_EPOCHS: usize = 10_000;
/// Serialized model format version.
const MODEL_FORMAT_VERSION: u32 = 1;

/// Per-column mean/std computed on training data. Columns with zero
/// variance keep std = 1 and are marked frozen; they standardize to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub frozen: Vec<bool>,
}

impl Standardizer {
    /// Fit column statistics. Requires at least two rows.
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        let (rows, cols) = x.dim();
        if rows < 2 {
            return Err(Error::data(format!(
                "standardizer needs at least 2 rows, got {rows}"
            )));
        }
        let mut mean = Vec::with_capacity(cols);
        let mut std = Vec::with_capacity(cols);
        let mut frozen = Vec::with_capacity(cols);
        for col in x.axis_iter(Axis(1)) {
            let m = col.sum() / rows as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / rows as f64;
            let s = var.sqrt();
            if s > 0.0 && s.is_finite() {
                mean.push(m);
                std.push(s);
                frozen.push(false);
            } else {
                mean.push(m);
                std.push(1.0);
                frozen.push(true);
            }
        }
        Ok(Self { mean, std, frozen })
    }

    /// Standardize a matrix column-wise with the fitted train statistics.
    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::data(format!(
                "standardizer fitted on {} columns, input has {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        let mut z = x.clone();
        for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
            if self.frozen[j] {
                col.fill(0.0);
            } else {
                col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
            }
        }
        Ok(z)
    }

    /// Standardize one row.
    pub fn apply_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::data(format!(
                "standardizer fitted on {} columns, row has {}",
                self.mean.len(),
                x.len()
            )));
        }
        Ok(x.iter()
            .enumerate()
            .map(|(j, &v)| {
                if self.frozen[j] {
                    0.0
                } else {
                    (v - self.mean[j]) / self.std[j]
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SvmHinge,
    Ridge,
}

/// A trained linear classifier over a subset of registry feature slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub kind: ModelKind,
    /// One weight per entry of `feature_subset`, in subset order.
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Standardizer fitted over the subset columns, in subset order.
    pub standardizer: Standardizer,
    /// Registry slot indices this model reads, in training column order.
    pub feature_subset: Vec<usize>,
    /// C for svm_hinge, lambda for ridge.
    pub hyperparam: f64,
}

impl LinearModel {
    /// Score a full-length registry feature vector and map the sign to a
    /// gender. Ties (score exactly zero) resolve to F.
    pub fn predict(&self, features: &[f64]) -> Result<(Gender, f64)> {
        let mut subset = Vec::with_capacity(self.feature_subset.len());
        for &slot in &self.feature_subset {
            let v = features.get(slot).ok_or_else(|| {
                Error::data(format!(
                    "feature vector of length {} is missing slot {slot}",
                    features.len()
                ))
            })?;
            subset.push(*v);
        }
        let z = self.standardizer.apply_row(&subset)?;
        let score: f64 = self
            .weights
            .iter()
            .zip(&z)
            .map(|(w, v)| w * v)
            .sum::<f64>()
            + self.bias;
        Ok((Gender::from_sign(score), score))
    }

    /// Serialize to versioned JSON. The float representations round-trip
    /// bit-exactly through `from_json`.
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)
            .map_err(|e| Error::data(format!("bad model file: {e}")))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported model format version {}",
                file.format_version
            )));
        }
        if file.model.weights.len() != file.model.feature_subset.len() {
            return Err(Error::data(
                "model weight count does not match feature subset".to_string(),
            ));
        }
        Ok(file.model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    model: LinearModel,
}

/// SVM-RFE result: features removed least-important first, and the
/// survivors ranked by final-model |w| descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeRanking {
    pub elimination_order: Vec<usize>,
    pub top_n: Vec<usize>,
}

fn check_labels(y: &[f64], rows: usize) -> Result<()> {
    if y.len() != rows {
        return Err(Error::data(format!(
            "{} labels for {} rows",
            y.len(),
            rows
        )));
    }
    if !y.iter().all(|&v| v == 1.0 || v == -1.0) {
        return Err(Error::data("labels must be +1 or -1".to_string()));
    }
    let pos = y.iter().filter(|&&v| v > 0.0).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::data(
            "training labels contain a single class".to_string(),
        ));
    }
    Ok(())
}

/// Dual coordinate descent for the L2-regularized hinge objective
///   min_w 1/2 ||w||^2 + C sum_i max(0, 1 - y_i w.x_i)
/// over inputs augmented with a constant-1 column, so the bias is the last
/// weight component and is regularized with the rest. Runs until the
/// duality gap falls below `SVM_GAP_TOL` or the epoch cap. Coordinate order
/// is reshuffled each epoch from the seed, making the solve deterministic.
fn solve_dual(z: &Array2<f64>, y: &[f64], c: f64, seed: u64) -> Vec<f64> {
    let (rows, cols) = z.dim();
    let dim = cols + 1;
    let mut w = vec![0.0f64; dim];
    let mut alpha = vec![0.0f64; rows];
    // Q_ii = ||x_i||^2 including the constant column.
    let q: Vec<f64> = z
        .axis_iter(Axis(0))
        .map(|row| row.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .collect();

    let dot = |w: &[f64], i: usize| -> f64 {
        z.row(i)
            .iter()
            .zip(w.iter())
            .map(|(x, wv)| x * wv)
            .sum::<f64>()
            + w[cols]
    };

    let mut order: Vec<usize> = (0..rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SVM_MAX_EPOCHS {
        order.shuffle(&mut rng);
        for &i in &order {
            let g = y[i] * dot(&w, i) - 1.0;
            let a_new = (alpha[i] - g / q[i]).clamp(0.0, c);
            let delta = a_new - alpha[i];
            if delta != 0.0 {
                alpha[i] = a_new;
                let step = delta * y[i];
                for (wv, x) in w.iter_mut().zip(z.row(i).iter()) {
                    *wv += step * x;
                }
                w[cols] += step;
            }
        }
        let norm_sq: f64 = w.iter().map(|v| v * v).sum();
        let hinge: f64 = (0..rows)
            .map(|i| (1.0 - y[i] * dot(&w, i)).max(0.0))
            .sum();
        let primal = 0.5 * norm_sq + c * hinge;
        let dual = alpha.iter().sum::<f64>() - 0.5 * norm_sq;
        if primal - dual < SVM_GAP_TOL {
            break;
        }
    }
    w
}

/// Train a soft-margin linear SVM on full-width rows restricted to
/// `feature_subset` columns of the registry layout.
pub fn train_linear_svm_subset(
    x: &Array2<f64>,
    y: &[f64],
    c: f64,
    seed: u64,
    feature_subset: &[usize],
) -> Result<LinearModel> {
    check_labels(y, x.nrows())?;
    if !(c > 0.0) {
        return Err(Error::config(format!("C must be positive, got {c}")));
    }
    if feature_subset.is_empty() {
        return Err(Error::data("empty feature subset".to_string()));
    }
    for &slot in feature_subset {
        if slot >= x.ncols() {
            return Err(Error::data(format!(
                "feature subset slot {slot} exceeds matrix width {}",
                x.ncols()
            )));
        }
    }
    let sub = x.select(Axis(1), feature_subset);
    let standardizer = Standardizer::fit(&sub)?;
    let z = standardizer.apply(&sub)?;
    let w_aug = solve_dual(&z, y, c, seed);
    let (bias, weights) = w_aug.split_last().expect("solver output nonempty");
    Ok(LinearModel {
        kind: ModelKind::SvmHinge,
        weights: weights.to_vec(),
        bias: *bias,
        standardizer,
        feature_subset: feature_subset.to_vec(),
        hyperparam: c,
    })
}

/// Train a linear SVM on all columns of `x`.
pub fn train_linear_svm(x: &Array2<f64>, y: &[f64], c: f64, seed: u64) -> Result<LinearModel> {
    let all: Vec<usize> = (0..x.ncols()).collect();
    train_linear_svm_subset(x, y, c, seed, &all)
}

/// Recursive feature elimination: repeatedly train an SVM on the surviving
/// columns and drop the single feature with minimum w_j^2 (ties drop the
/// lowest registry index) until `n` remain. The intermediate SVMs are
/// discarded; `top_n` ranks survivors by final-model |w| descending.
pub fn svm_rfe(x: &Array2<f64>, y: &[f64], n: usize, c: f64, seed: u64) -> Result<RfeRanking> {
    let cols = x.ncols();
    if n == 0 || n > cols {
        return Err(Error::config(format!(
            "RFE target size {n} out of range 1..={cols}"
        )));
    }
    let mut surviving: Vec<usize> = (0..cols).collect();
    let mut elimination_order = Vec::with_capacity(cols - n);
    let mut model = train_linear_svm_subset(x, y, c, seed, &surviving)?;
    while surviving.len() > n {
        let worst_pos = model
            .weights
            .iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| {
                let (a2, b2) = (*a * *a, *b * *b);
                a2.partial_cmp(&b2)
                    .unwrap()
                    .then(surviving[*ia].cmp(&surviving[*ib]))
            })
            .map(|(i, _)| i)
            .expect("surviving set nonempty");
        elimination_order.push(surviving.remove(worst_pos));
        model = train_linear_svm_subset(x, y, c, seed, &surviving)?;
    }
    let mut ranked: Vec<(usize, f64)> = surviving
        .iter()
        .zip(&model.weights)
        .map(|(&slot, &w)| (slot, w.abs()))
        .collect();
    ranked.sort_by(|(sa, a), (sb, b)| b.partial_cmp(a).unwrap().then(sa.cmp(sb)));
    Ok(RfeRanking {
        elimination_order,
        top_n: ranked.into_iter().map(|(slot, _)| slot).collect(),
    })
}

/// Closed-form ridge regression of +-1 labels on one standardized feature
/// column: w = sum(z y) / (sum(z^2) + lambda), b = mean(y). `feature_slot`
/// records which registry slot the column came from.
pub fn train_ridge_single(
    x_col: &[f64],
    y: &[f64],
    lambda: f64,
    feature_slot: usize,
) -> Result<LinearModel> {
    check_labels(y, x_col.len())?;
    if lambda < 0.0 {
        return Err(Error::config(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let col = Array2::from_shape_vec((x_col.len(), 1), x_col.to_vec())
        .expect("column shape is consistent");
    let standardizer = Standardizer::fit(&col)?;
    if standardizer.frozen[0] {
        return Err(Error::data(
            "ridge feature column has zero variance".to_string(),
        ));
    }
    let z = standardizer.apply(&col)?;
    let z = z.column(0);
    let sum_zy: f64 = z.iter().zip(y).map(|(zv, yv)| zv * yv).sum();
    let sum_zz: f64 = z.iter().map(|zv| zv * zv).sum();
    let w = sum_zy / (sum_zz + lambda);
    let b = y.iter().sum::<f64>() / y.len() as f64;
    Ok(LinearModel {
        kind: ModelKind::Ridge,
        weights: vec![w],
        bias: b,
        standardizer,
        feature_subset: vec![feature_slot],
        hyperparam: lambda,
    })
}

/// Hinge objective of a trained SVM on its own training matrix, using the
/// regularized-bias convention of the solver. Exposed for oracle tests.
pub fn svm_primal_objective(model: &LinearModel, x: &Array2<f64>, y: &[f64]) -> Result<f64> {
    let sub = x.select(Axis(1), &model.feature_subset);
    let z = model.standardizer.apply(&sub)?;
    let norm_sq: f64 =
        model.weights.iter().map(|v| v * v).sum::<f64>() + model.bias * model.bias;
    let hinge: f64 = z
        .axis_iter(Axis(0))
        .zip(y)
        .map(|(row, &yv)| {
            let s: f64 = row
                .iter()
                .zip(&model.weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
                + model.bias;
            (1.0 - yv * s).max(0.0)
        })
        .sum();
    Ok(0.5 * norm_sq + model.hyperparam * hinge)
}

/// Build a label vector from genders using the fixed F -> +1 mapping.
pub fn labels_from_genders(genders: &[Gender]) -> Vec<f64> {
    genders.iter().map(|g| g.sign()).collect()
}

/// Stack full-length registry feature rows into a matrix.
pub fn feature_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(Error::data("empty feature matrix".to_string()));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::data("ragged feature matrix".to_string()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), width), flat)
        .map_err(|e| Error::data(format!("feature matrix shape: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn blobs(n_per: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
        // Two well-separated 2D Gaussian blobs.
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n_per {
            rows.push(vec![2.0 + noise.sample(&mut rng), 1.0 + noise.sample(&mut rng)]);
            y.push(1.0);
        }
        for _ in 0..n_per {
            rows.push(vec![-2.0 + noise.sample(&mut rng), -1.0 + noise.sample(&mut rng)]);
            y.push(-1.0);
        }
        (feature_matrix(&rows).unwrap(), y)
    }

    fn train_accuracy(m: &LinearModel, x: &Array2<f64>, y: &[f64]) -> f64 {
        let mut correct = 0usize;
        for (row, &yv) in x.axis_iter(Axis(0)).zip(y) {
            let (g, _) = m.predict(row.as_slice().unwrap()).unwrap();
            if g.sign() == yv {
                correct += 1;
            }
        }
        correct as f64 / y.len() as f64
    }

    #[test]
    fn standardizer_basic_column() {
        let x = array![[1.0], [3.0]];
        let s = Standardizer::fit(&x).unwrap();
        assert_abs_diff_eq!(s.mean[0], 2.0);
        assert_abs_diff_eq!(s.std[0], 1.0);
        let z = s.apply(&x).unwrap();
        assert_abs_diff_eq!(z[[0, 0]], -1.0);
        assert_abs_diff_eq!(z[[1, 0]], 1.0);
    }

    #[test]
    fn standardizer_columns_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let x = feature_matrix(&rows).unwrap();
        let s = Standardizer::fit(&x).unwrap();
        let z = s.apply(&x).unwrap();
        for col in z.axis_iter(Axis(1)) {
            let m = col.sum() / 50.0;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 50.0;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var.sqrt(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn standardizer_freezes_constant_column() {
        let x = array![[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]];
        let s = Standardizer::fit(&x).unwrap();
        assert!(s.frozen[0]);
        assert!(!s.frozen[1]);
        let z = s.apply(&x).unwrap();
        assert!(z.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardizer_uses_train_stats_on_heldout() {
        let train = array![[0.0], [2.0]];
        let s = Standardizer::fit(&train).unwrap();
        let test = array![[10.0]];
        let z = s.apply(&test).unwrap();
        // (10 - 1) / 1, not re-fitted to the test data.
        assert_abs_diff_eq!(z[[0, 0]], 9.0);
    }

    #[test]
    fn standardizer_rejects_single_row() {
        let x = array![[1.0, 2.0]];
        assert!(Standardizer::fit(&x).is_err());
    }

    #[test]
    fn svm_separable_blobs_perfect_train_accuracy() {
        let (x, y) = blobs(30, 0);
        let m = train_linear_svm(&x, &y, 1.0, 0).unwrap();
        assert_abs_diff_eq!(train_accuracy(&m, &x, &y), 1.0);
    }

    #[test]
    fn svm_xor_stays_at_chance() {
        let x = array![[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]];
        let y = vec![1.0, 1.0, -1.0, -1.0];
        let m = train_linear_svm(&x, &y, 1.0, 0).unwrap();
        let acc = train_accuracy(&m, &x, &y);
        assert!(acc <= 0.5 + 1e-12, "XOR accuracy {acc}");
    }

    #[test]
    fn svm_rejects_single_class() {
        let x = array![[0.0], [1.0]];
        assert!(train_linear_svm(&x, &[1.0, 1.0], 1.0, 0).is_err());
    }

    #[test]
    fn svm_deterministic_under_seed() {
        let (x, y) = blobs(20, 5);
        let a = train_linear_svm(&x, &y, 1.0, 42).unwrap();
        let b = train_linear_svm(&x, &y, 1.0, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn svm_matches_grid_search_oracle() {
        // Tiny 2D instance; dense zooming grid search over (w1, w2, b) on
        // the standardized data minimizes the same regularized-bias hinge
        // objective the solver uses.
        let x = array![[0.0, 1.0], [1.0, 0.5], [2.0, -1.0], [3.0, 0.2], [1.5, 2.0]];
        let y = vec![-1.0, -1.0, 1.0, 1.0, -1.0];
        let c = 1.0;
        let m = train_linear_svm(&x, &y, c, 0).unwrap();
        let z = m.standardizer.apply(&x).unwrap();

        let objective = |w1: f64, w2: f64, b: f64| -> f64 {
            let hinge: f64 = z
                .axis_iter(Axis(0))
                .zip(&y)
                .map(|(row, &yv)| (1.0 - yv * (w1 * row[0] + w2 * row[1] + b)).max(0.0))
                .sum();
            0.5 * (w1 * w1 + w2 * w2 + b * b) + c * hinge
        };

        let mut best = (0.0, 0.0, 0.0);
        let mut best_obj = f64::INFINITY;
        let mut span = 3.0f64;
        let mut step = 0.1f64;
        for _ in 0..4 {
            let (cw1, cw2, cb) = best;
            let n = (2.0 * span / step).round() as i64;
            for i in -n / 2..=n / 2 {
                for j in -n / 2..=n / 2 {
                    for k in -n / 2..=n / 2 {
                        let w1 = cw1 + i as f64 * step;
                        let w2 = cw2 + j as f64 * step;
                        let b = cb + k as f64 * step;
                        let o = objective(w1, w2, b);
                        if o < best_obj {
                            best_obj = o;
                            best = (w1, w2, b);
                        }
                    }
                }
            }
            span = 2.0 * step;
            step /= 10.0;
        }

        let solver_obj = svm_primal_objective(&m, &x, &y).unwrap();
        assert!(
            (solver_obj - best_obj).abs() <= 1e-4,
            "solver {solver_obj} vs grid {best_obj}"
        );
    }

    #[test]
    fn predict_fixed_weight_scores() {
        let m = LinearModel {
            kind: ModelKind::SvmHinge,
            weights: vec![1.0],
            bias: 0.0,
            standardizer: Standardizer {
                mean: vec![0.0],
                std: vec![1.0],
                frozen: vec![false],
            },
            feature_subset: vec![3],
            hyperparam: 1.0,
        };
        let mut features = vec![0.0; 34];
        features[3] = 2.3;
        let (g, score) = m.predict(&features).unwrap();
        assert_eq!(g, Gender::F);
        assert_abs_diff_eq!(score, 2.3);
        // Exact zero resolves to F.
        features[3] = 0.0;
        assert_eq!(m.predict(&features).unwrap().0, Gender::F);
        // Missing slot errors.
        assert!(m.predict(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn svm_predictions_invariant_to_column_scale() {
        let (x, y) = blobs(25, 9);
        let m1 = train_linear_svm(&x, &y, 1.0, 1).unwrap();
        let mut x2 = x.clone();
        x2.column_mut(0).mapv_inplace(|v| 1000.0 * v);
        let m2 = train_linear_svm(&x2, &y, 1.0, 1).unwrap();
        for (row1, row2) in x.axis_iter(Axis(0)).zip(x2.axis_iter(Axis(0))) {
            let g1 = m1.predict(row1.as_slice().unwrap()).unwrap().0;
            let g2 = m2.predict(row2.as_slice().unwrap()).unwrap().0;
            assert_eq!(g1, g2);
        }
    }

    #[test]
    fn rfe_full_size_ranks_without_elimination() {
        let (x, y) = blobs(20, 2);
        let r = svm_rfe(&x, &y, 2, 1.0, 0).unwrap();
        assert!(r.elimination_order.is_empty());
        assert_eq!(r.top_n.len(), 2);
        let mut sorted = r.top_n.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1]);
    }

    #[test]
    fn rfe_elimination_is_permutation_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let cls = if i < 30 { 1.0 } else { -1.0 };
                (0..6)
                    .map(|j| {
                        if j == 2 {
                            cls * 2.0 + rng.gen_range(-0.5..0.5)
                        } else {
                            rng.gen_range(-1.0..1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let y: Vec<f64> = (0..60).map(|i| if i < 30 { 1.0 } else { -1.0 }).collect();
        let x = feature_matrix(&rows).unwrap();
        let a = svm_rfe(&x, &y, 1, 1.0, 7).unwrap();
        let b = svm_rfe(&x, &y, 1, 1.0, 7).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.elimination_order.clone();
        all.extend(&a.top_n);
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert_eq!(a.top_n, vec![2]);
    }

    #[test]
    fn rfe_duplicated_informative_column_keeps_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows: Vec<Vec<f64>> = (0..80)
            .map(|i| {
                let cls = if i < 40 { 1.0 } else { -1.0 };
                let signal = cls * 1.5 + rng.gen_range(-0.4..0.4);
                vec![
                    signal,
                    signal, // exact duplicate splits the weight
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let y: Vec<f64> = (0..80).map(|i| if i < 40 { 1.0 } else { -1.0 }).collect();
        let x = feature_matrix(&rows).unwrap();
        let r = svm_rfe(&x, &y, 1, 1.0, 3).unwrap();
        assert!(r.top_n == vec![0] || r.top_n == vec![1], "top {:?}", r.top_n);
    }

    #[test]
    fn ridge_matches_midpoint_threshold() {
        // Perfectly correlated column, lambda = 0: boundary at the midpoint.
        let col = vec![1.0, 2.0, 3.0, 7.0, 8.0, 9.0];
        let y = vec![-1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
        let m = train_ridge_single(&col, &y, 0.0, 3).unwrap();
        let mid = 5.0;
        for probe in [1.5, 4.0, 4.99, 5.01, 6.0, 8.5] {
            let mut features = vec![0.0; 34];
            features[3] = probe;
            let (g, _) = m.predict(&features).unwrap();
            let want = if probe > mid { Gender::F } else { Gender::M };
            assert_eq!(g, want, "probe {probe}");
        }
    }

    #[test]
    fn ridge_large_lambda_follows_class_imbalance() {
        let col = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let y = vec![1.0, 1.0, 1.0, -1.0, -1.0]; // majority F
        let m = train_ridge_single(&col, &y, 1e12, 0).unwrap();
        assert!(m.weights[0].abs() < 1e-9);
        for probe in [0.0, 2.5, 100.0] {
            let mut features = vec![0.0; 34];
            features[0] = probe;
            assert_eq!(m.predict(&features).unwrap().0, Gender::F);
        }
    }

    #[test]
    fn ridge_rejects_zero_variance() {
        assert!(train_ridge_single(&[2.0, 2.0, 2.0], &[1.0, -1.0, 1.0], 0.1, 0).is_err());
    }

    #[test]
    fn model_json_round_trip_is_bit_exact() {
        let (x, y) = blobs(15, 21);
        let m = train_linear_svm(&x, &y, 0.7, 3).unwrap();
        let text = m.to_json();
        let back = LinearModel::from_json(&text).unwrap();
        assert_eq!(m, back);
        assert_eq!(text, back.to_json());
    }

    #[test]
    fn model_json_rejects_bad_version() {
        let (x, y) = blobs(5, 1);
        let m = train_linear_svm(&x, &y, 1.0, 0).unwrap();
        let text = m.to_json().replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(LinearModel::from_json(&text).is_err());
    }
}
