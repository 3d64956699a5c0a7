//! Macro-F1 and sensitivity tooling: permutation importance on a fixed model
//! and adjective-subset sweeps with retraining.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::training::{evaluate, mean_std, train, TrainingConfig, TrainingError, TrainingSet};

pub const DEFAULT_REPETITIONS: usize = 10;
pub const DEFAULT_TRIALS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("configuration error: {0}")]
    ConfigError(String),
    #[error(transparent)]
    Training(#[from] TrainingError),
}

/// Unweighted mean of per-class F1.
///
/// A class contributes when it occurs in the truth or in the predictions
/// (with F1 = 0 if it has no true positives); a class absent from both is
/// skipped. Returns 0 when no class occurs at all.
pub fn macro_f1(predictions: &[usize], truth: &[usize], n_classes: usize) -> Result<f64, AnalysisError> {
    if predictions.len() != truth.len() {
        return Err(AnalysisError::ShapeError(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if let Some(l) = predictions.iter().chain(truth).find(|&&l| l >= n_classes) {
        return Err(AnalysisError::ShapeError(format!(
            "label {l} out of range for {n_classes} classes"
        )));
    }
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut actual = vec![0usize; n_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        predicted[p] += 1;
        actual[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..n_classes {
        if predicted[c] + actual[c] == 0 {
            continue;
        }
        present += 1;
        // F1 = 2 tp / (2 tp + fp + fn) = 2 tp / (predicted + actual)
        sum += 2.0 * tp[c] as f64 / (predicted[c] + actual[c]) as f64;
    }
    Ok(if present == 0 { 0.0 } else { sum / present as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjectiveImportance {
    pub index: usize,
    pub adjective: String,
    /// Mean of `permuted F1 - baseline F1` over the repetitions.
    pub mean_delta: f64,
    pub std_delta: f64,
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub baseline_f1: f64,
    pub repetitions: usize,
    pub seed: u64,
    pub per_adjective: Vec<AdjectiveImportance>,
}

impl PermutationReport {
    /// Entries sorted by mean delta, most harmful permutation first.
    pub fn ranked(&self) -> Vec<&AdjectiveImportance> {
        let mut out: Vec<_> = self.per_adjective.iter().collect();
        out.sort_by(|a, b| a.mean_delta.total_cmp(&b.mean_delta).then(a.index.cmp(&b.index)));
        out
    }
}

/// The row permutation applied to `column` in repetition `rep`. Row `r`
/// receives the original value of row `perm[r]`.
pub fn column_permutation(rows: usize, column: usize, rep: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((column as u64) << 32) | rep as u64);
    let mut perm: Vec<usize> = (0..rows).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Macro-F1 of the fixed model after permuting one column of `data`.
pub fn permuted_f1(
    params: &ModelParams,
    data: &TrainingSet,
    column: usize,
    perm: &[usize],
    n_classes: usize,
) -> Result<f64, AnalysisError> {
    if perm.len() != data.len() {
        return Err(AnalysisError::ShapeError(
            "permutation length differs from row count".into(),
        ));
    }
    let mut shuffled = data.clone();
    for (r, &src) in perm.iter().enumerate() {
        shuffled.inputs[r][column] = data.inputs[src][column];
    }
    Ok(evaluate(params, &shuffled, n_classes)?)
}

/// Fixed-model importance of each adjective: the change in macro-F1 when its
/// column is shuffled across samples. The model is never retrained.
pub fn permutation_importance(
    params: &ModelParams,
    data: &TrainingSet,
    adjectives: &[String],
    n_classes: usize,
    repetitions: usize,
    seed: u64,
) -> Result<PermutationReport, AnalysisError> {
    let a = params.dims().concepts;
    if adjectives.len() != a {
        return Err(AnalysisError::ShapeError(format!(
            "{} adjective names for {a} concepts",
            adjectives.len()
        )));
    }
    if data.inputs.iter().any(|v| v.len() != a) {
        return Err(AnalysisError::ShapeError("matrix width differs from the model".into()));
    }
    if repetitions == 0 {
        return Err(AnalysisError::ConfigError("repetitions must be positive".into()));
    }
    let baseline_f1 = evaluate(params, data, n_classes)?;
    let per_adjective = (0..a)
        .into_par_iter()
        .map(|j| {
            let deltas = (0..repetitions)
                .map(|rep| {
                    let perm = column_permutation(data.len(), j, rep, seed);
                    permuted_f1(params, data, j, &perm, n_classes).map(|f| f - baseline_f1)
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let (mean_delta, std_delta) = mean_std(&deltas);
            Ok(AdjectiveImportance {
                index: j,
                adjective: adjectives[j].clone(),
                mean_delta,
                std_delta,
                deltas,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    Ok(PermutationReport {
        baseline_f1,
        repetitions,
        seed,
        per_adjective,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTrial {
    pub size: usize,
    pub trial: usize,
    pub columns: Vec<usize>,
    pub train_f1: f64,
    pub test_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: usize,
    pub mean_train_f1: f64,
    pub std_train_f1: f64,
    pub mean_test_f1: f64,
    pub std_test_f1: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSweepReport {
    pub points: Vec<SweepPoint>,
    pub trials_per_size: usize,
    pub seed: u64,
    pub trials: Vec<SweepTrial>,
}

impl SubsetSweepReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "size",
            "mean_train_f1",
            "std_train_f1",
            "mean_test_f1",
            "std_test_f1",
            "trials",
        ])
        .expect("in-memory write");
        for p in &self.points {
            w.write_record([
                p.size.to_string(),
                format!("{:.9}", p.mean_train_f1),
                format!("{:.9}", p.std_train_f1),
                format!("{:.9}", p.mean_test_f1),
                format!("{:.9}", p.std_test_f1),
                p.trials.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }
}

/// Sorted random subset of `size` out of `concepts` columns for one trial.
pub fn sweep_subset(concepts: usize, size: usize, trial: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((size as u64) << 32) | trial as u64);
    let mut cols = index::sample(&mut rng, concepts, size).into_vec();
    cols.sort_unstable();
    cols
}

/// For every size, train `trials` fresh models on random adjective subsets
/// and record train and test macro-F1. Every trial uses the same training
/// seed, so trials differ only in their subset.
#[allow(clippy::too_many_arguments)]
pub fn subset_sweep(
    train_set: &TrainingSet,
    val_set: &TrainingSet,
    test_set: &TrainingSet,
    n_classes: usize,
    sizes: &[usize],
    trials: usize,
    config: &TrainingConfig,
    seed: u64,
) -> Result<SubsetSweepReport, AnalysisError> {
    let concepts = train_set.inputs.first().map_or(0, Vec::len);
    if sizes.is_empty() {
        return Err(AnalysisError::ConfigError("no subset sizes given".into()));
    }
    if trials == 0 {
        return Err(AnalysisError::ConfigError("trials must be positive".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnalysisError::ConfigError(
            "subset sizes must be strictly increasing".into(),
        ));
    }
    if sizes[0] == 0 || sizes[sizes.len() - 1] > concepts {
        return Err(AnalysisError::ConfigError(format!(
            "subset sizes must lie in 1..={concepts}"
        )));
    }
    let jobs: Vec<(usize, usize)> = sizes.iter().flat_map(|&s| (0..trials).map(move |t| (s, t))).collect();
    let results = jobs
        .par_iter()
        .map(|&(size, trial)| {
            let columns = sweep_subset(concepts, size, trial, seed);
            let tr = train_set.select_columns(&columns);
            let va = val_set.select_columns(&columns);
            let te = test_set.select_columns(&columns);
            let outcome = train(&tr, &va, n_classes, config)?;
            Ok(SweepTrial {
                size,
                trial,
                train_f1: evaluate(&outcome.params, &tr, n_classes)?,
                test_f1: evaluate(&outcome.params, &te, n_classes)?,
                columns,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    let points = sizes
        .iter()
        .map(|&size| {
            let group: Vec<&SweepTrial> = results.iter().filter(|t| t.size == size).collect();
            let (mean_train_f1, std_train_f1) = mean_std(&group.iter().map(|t| t.train_f1).collect::<Vec<_>>());
            let (mean_test_f1, std_test_f1) = mean_std(&group.iter().map(|t| t.test_f1).collect::<Vec<_>>());
            SweepPoint {
                size,
                mean_train_f1,
                std_train_f1,
                mean_test_f1,
                std_test_f1,
                trials: group.len(),
            }
        })
        .collect();
    Ok(SubsetSweepReport {
        points,
        trials_per_size: trials,
        seed,
        trials: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use proptest::prelude::*;
    use rand::Rng;

    /// Straight confusion-matrix evaluation.
    fn brute_macro_f1(pred: &[usize], truth: &[usize], n: usize) -> f64 {
        let mut scores = Vec::new();
        for c in 0..n {
            let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count() as f64;
            let fp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t != c).count() as f64;
            let fn_ = pred.iter().zip(truth).filter(|(p, t)| **p != c && **t == c).count() as f64;
            if tp + fp + fn_ == 0.0 {
                continue;
            }
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            scores.push(if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            });
        }
        scores.iter().sum::<f64>() / scores.len() as f64
    }

    #[test]
    fn macro_f1_cases() {
        assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        let truth = [0, 0, 1, 1];
        let f = macro_f1(&[0, 0, 0, 0], &truth, 2).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        // Class 2 never occurs and is skipped.
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
        assert!(matches!(macro_f1(&[0], &[0, 1], 2), Err(AnalysisError::ShapeError(_))));
        assert!(macro_f1(&[5], &[0], 2).is_err());
    }

    fn decisive_task(seed: u64, rows: usize) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..rows {
            let y = i % 2;
            let mut v: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            v[1] = if y == 1 { 0.9 } else { 0.1 };
            v[3] = 0.5;
            inputs.push(v);
            labels.push(y);
        }
        TrainingSet::new(inputs, labels)
    }

    fn hand_model() -> ModelParams {
        // Predicts class 1 exactly when v[1] > 0.5.
        let mut p = ModelParams::zeros(ModelDims::new(4, 1, 2));
        p.hidden_w[[0, 1]] = 10.0;
        p.out_w[[1, 0]] = 1.0;
        p.out_b[1] = -2.5 * 0.5;
        p
    }

    #[test]
    fn permutation_of_constant_column_is_neutral() {
        let data = decisive_task(1, 60);
        let names: Vec<String> = (0..4).map(|i| format!("a{i}")).collect();
        let report = permutation_importance(&hand_model(), &data, &names, 2, DEFAULT_REPETITIONS, 3).unwrap();
        assert_eq!(report.baseline_f1, 1.0);
        assert!(report.per_adjective[3].deltas.iter().all(|&d| d == 0.0));
        assert!(report.per_adjective[0].deltas.iter().all(|&d| d == 0.0));
        assert!(report.per_adjective[1].mean_delta < -0.3);
        assert_eq!(report.ranked()[0].index, 1);
    }

    #[test]
    fn decisive_column_matches_brute_force() {
        let data = decisive_task(2, 40);
        let names: Vec<String> = (0..4).map(|i| format!("a{i}")).collect();
        let params = hand_model();
        let report = permutation_importance(&params, &data, &names, 2, 10, 77).unwrap();
        for rep in 0..10 {
            let perm = column_permutation(40, 1, rep, 77);
            let mut rows = data.inputs.clone();
            for r in 0..40 {
                rows[r][1] = data.inputs[perm[r]][1];
            }
            let pred: Vec<usize> = rows.iter().map(|v| params.classify(v).unwrap().label_index).collect();
            let expect = brute_macro_f1(&pred, &data.labels, 2) - 1.0;
            assert!((report.per_adjective[1].deltas[rep] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_permutation_reproduces_baseline() {
        let data = decisive_task(3, 30);
        let ident: Vec<usize> = (0..30).collect();
        let base = evaluate(&hand_model(), &data, 2).unwrap();
        assert_eq!(permuted_f1(&hand_model(), &data, 1, &ident, 2).unwrap(), base);
    }

    #[test]
    fn sweep_validation_and_subsets() {
        let data = decisive_task(4, 20);
        let cfg = TrainingConfig {
            epochs: 2,
            ..TrainingConfig::default()
        };
        assert!(matches!(
            subset_sweep(&data, &data, &data, 2, &[], 1, &cfg, 0),
            Err(AnalysisError::ConfigError(_))
        ));
        assert!(subset_sweep(&data, &data, &data, 2, &[2, 2], 1, &cfg, 0).is_err());
        assert!(subset_sweep(&data, &data, &data, 2, &[5], 1, &cfg, 0).is_err());
        let s = sweep_subset(30, 5, 7, 1);
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sweep_subset(30, 5, 7, 1));
        assert_eq!(sweep_subset(4, 4, 0, 9), vec![0, 1, 2, 3]);
    }

    #[test]
    fn full_size_single_trial_equals_plain_training() {
        let train_set = decisive_task(5, 40);
        let test = decisive_task(6, 20);
        let cfg = TrainingConfig {
            epochs: 10,
            seed: 4,
            ..TrainingConfig::default()
        };
        let report = subset_sweep(&train_set, &test, &test, 2, &[4], 1, &cfg, 0).unwrap();
        let plain = train(&train_set, &test, 2, &cfg).unwrap();
        assert_eq!(report.trials[0].test_f1, evaluate(&plain.params, &test, 2).unwrap());
        assert_eq!(
            report.trials[0].train_f1,
            evaluate(&plain.params, &train_set, 2).unwrap()
        );
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("size,mean_train_f1"));
    }

    proptest! {
        #[test]
        fn macro_f1_matches_brute_force(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..40)) {
            let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let f = macro_f1(&pred, &truth, 4).unwrap();
            prop_assert!((f - brute_macro_f1(&pred, &truth, 4)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn macro_f1_invariant_under_relabeling(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..40),
            seed in 0u64..100,
        ) {
            let mut relabel: Vec<usize> = (0..4).collect();
            relabel.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let rp: Vec<usize> = pred.iter().map(|&p| relabel[p]).collect();
            let rt: Vec<usize> = truth.iter().map(|&t| relabel[t]).collect();
            let a = macro_f1(&pred, &truth, 4).unwrap();
            let b = macro_f1(&rp, &rt, 4).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
