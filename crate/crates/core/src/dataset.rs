//! Labeled text corpora in a normalized JSONL schema.
//!
//! One record per line:
//!
//! ```text
//! {"id": "...", "text": "...", "context": "...", "label": "...", "split": "train"}
//! ```
//!
//! `context` and `split` are optional. An optional first record
//! `{"label_order": ["a", "b", ...]}` fixes the class order; otherwise labels
//! are ordered by first appearance.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hashing::FieldHasher;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("schema error at line {line}: {reason}")]
    SchemaError { line: usize, reason: String },
    #[error("class {0:?} has fewer samples than folds")]
    InsufficientClassSize(String),
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("dataset needs at least two labels, found {0}")]
    TooFewLabels(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            "unassigned" => Some(Split::Unassigned),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(DatasetError::InvalidArgument(format!("duplicate label {l:?}")));
            }
        }
        if labels.len() < 2 {
            return Err(DatasetError::TooFewLabels(labels.len()));
        }
        Ok(LabelSet { labels })
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<TextSample>,
    label_set: LabelSet,
    fingerprint: String,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    text: Option<String>,
    context: Option<String>,
    label: Option<String>,
    split: Option<String>,
    label_order: Option<Vec<String>>,
}

impl Dataset {
    /// Assemble a dataset from samples; label order is first appearance
    /// unless `label_order` is given.
    pub fn new(samples: Vec<TextSample>, label_order: Option<Vec<String>>) -> Result<Self, DatasetError> {
        let labels = match label_order {
            Some(order) => order,
            None => {
                let mut order: Vec<String> = Vec::new();
                for s in &samples {
                    if !order.contains(&s.label) {
                        order.push(s.label.clone());
                    }
                }
                order
            }
        };
        let label_set = LabelSet::new(labels)?;
        let mut ids = HashSet::new();
        for (i, s) in samples.iter().enumerate() {
            if !ids.insert(s.id.as_str()) {
                return Err(DatasetError::DuplicateId(s.id.clone()));
            }
            if s.text.trim().is_empty() {
                return Err(DatasetError::SchemaError {
                    line: i + 1,
                    reason: "empty text".into(),
                });
            }
            if label_set.index_of(&s.label).is_none() {
                return Err(DatasetError::SchemaError {
                    line: i + 1,
                    reason: format!("label {:?} not in label order", s.label),
                });
            }
        }
        let fingerprint = dataset_fingerprint(&samples, &label_set);
        Ok(Dataset {
            samples,
            label_set,
            fingerprint,
        })
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, DatasetError> {
        let mut samples = Vec::new();
        let mut label_order = None;
        let mut line_of_sample = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let schema = |reason: String| DatasetError::SchemaError { line: lineno, reason };
            let raw: RawRecord = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
            if let Some(order) = raw.label_order {
                if !samples.is_empty() || label_order.is_some() {
                    return Err(schema("label_order header must be the first record".into()));
                }
                label_order = Some(order);
                continue;
            }
            let id = raw.id.ok_or_else(|| schema("missing field \"id\"".into()))?;
            let text = raw.text.ok_or_else(|| schema("missing field \"text\"".into()))?;
            let label = raw.label.ok_or_else(|| schema("missing field \"label\"".into()))?;
            if text.trim().is_empty() {
                return Err(schema("empty text".into()));
            }
            let split = match raw.split.as_deref() {
                None => Split::Unassigned,
                Some(s) => Split::parse(s).ok_or_else(|| schema(format!("unknown split {s:?}")))?,
            };
            line_of_sample.push(lineno);
            samples.push(TextSample {
                id,
                text,
                context: raw.context,
                label,
                split,
            });
        }
        // Re-map sample-relative errors to file line numbers.
        Dataset::new(samples, label_order).map_err(|e| match e {
            DatasetError::SchemaError { line, reason } => DatasetError::SchemaError {
                line: line_of_sample[line - 1],
                reason,
            },
            other => other,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({ "label_order": self.label_set.labels() }).to_string();
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn samples(&self) -> &[TextSample] {
        &self.samples
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_context(&self) -> bool {
        self.samples.iter().any(|s| s.context.is_some())
    }

    /// Class index of every sample.
    pub fn label_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| self.label_set.index_of(&s.label).expect("validated on load"))
            .collect()
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    /// Sample counts keyed by (split, label).
    pub fn counts(&self) -> BTreeMap<(Split, String), usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            *m.entry((s.split, s.label.clone())).or_insert(0) += 1;
        }
        m
    }

    /// Move a seeded, stratified `fraction` of the train split into the
    /// validation split. Used for corpora that ship without a validation set.
    pub fn carve_validation(&self, fraction: f64, seed: u64) -> Result<Dataset, DatasetError> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(DatasetError::InvalidArgument(format!(
                "validation fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let train = self.indices_in(Split::Train);
        let labels = self.label_indices();
        let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let held = stratified_holdout(&train_labels, self.label_set.len(), fraction, seed);
        let mut samples = self.samples.clone();
        for local in held {
            samples[train[local]].split = Split::Validation;
        }
        Dataset::new(samples, Some(self.label_set.labels().to_vec()))
    }
}

fn dataset_fingerprint(samples: &[TextSample], labels: &LabelSet) -> String {
    let mut h = FieldHasher::new("scbm.dataset/1");
    for l in labels.labels() {
        h.str(l);
    }
    for s in samples {
        h.str(&s.id)
            .str(&s.text)
            .str(s.context.as_deref().unwrap_or("\u{0}none"))
            .str(&s.label)
            .str(s.split.as_str());
    }
    h.finish_hex()
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Dataset::parse_jsonl(&text)
}

/// One fold: (train indices, validation indices), each ascending.
pub type Fold = (Vec<usize>, Vec<usize>);

/// Stratified k-fold over a dataset's samples.
pub fn stratified_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>, DatasetError> {
    stratified_kfold_labels(&dataset.label_indices(), dataset.label_set().labels(), k, seed)
}

/// Stratified k-fold over raw class indices. Each class is shuffled with a
/// seeded RNG and dealt round-robin into folds; the dealing position carries
/// over between classes so fold sizes stay balanced.
pub fn stratified_kfold_labels(
    labels: &[usize],
    label_names: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<Fold>, DatasetError> {
    if k < 2 {
        return Err(DatasetError::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    for (c, members) in &by_class {
        if members.len() < k {
            let name = label_names.get(*c).cloned().unwrap_or_else(|| c.to_string());
            return Err(DatasetError::InsufficientClassSize(name));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; labels.len()];
    let mut next = 0usize;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            fold_of[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| fold_of[i] == f);
            (train, val)
        })
        .collect())
}

/// Seeded per-class holdout. Returns local indices selected for holdout.
pub fn stratified_holdout(labels: &[usize], n_classes: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = Vec::new();
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let take = (members.len() as f64 * fraction).round() as usize;
        held.extend_from_slice(&members[..take.min(members.len())]);
    }
    held.sort_unstable();
    held
}

/// Per-class counts of `indices` under `labels`.
pub fn class_counts(labels: &[usize], indices: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for &i in indices {
        counts[labels[i]] += 1;
    }
    counts
}

/// Lookup from sample id to dataset position.
pub fn id_index(dataset: &Dataset) -> HashMap<&str, usize> {
    dataset
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn label_order_is_first_appearance() {
        let ds = Dataset::parse_jsonl(
            r#"{"id":"1","text":"a","label":"hate"}
{"id":"2","text":"b","label":"neutral"}
{"id":"3","text":"c","label":"hate"}"#,
        )
        .unwrap();
        assert_eq!(ds.label_set().labels(), ["hate", "neutral"]);
        assert_eq!(ds.label_indices(), vec![0, 1, 0]);
        assert_eq!(ds.samples()[0].split, Split::Unassigned);
    }

    #[test]
    fn header_overrides_label_order() {
        let ds = Dataset::parse_jsonl(
            r#"{"label_order":["neutral","hate"]}
{"id":"1","text":"a","label":"hate"}
{"id":"2","text":"b","label":"neutral"}"#,
        )
        .unwrap();
        assert_eq!(ds.label_set().labels(), ["neutral", "hate"]);
    }

    #[test]
    fn missing_text_reports_line() {
        let err = Dataset::parse_jsonl(
            r#"{"id":"1","text":"a","label":"x"}
{"id":"2","label":"y"}"#,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::SchemaError { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_split_and_label_outside_header() {
        let err = Dataset::parse_jsonl(r#"{"id":"1","text":"a","label":"x","split":"dev"}"#).unwrap_err();
        assert!(matches!(err, DatasetError::SchemaError { line: 1, .. }));
        let err = Dataset::parse_jsonl(
            r#"{"label_order":["a","b"]}
{"id":"1","text":"t","label":"a"}
{"id":"2","text":"t","label":"c"}"#,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::SchemaError { line: 3, .. }), "{err}");
    }

    #[test]
    fn context_is_carried() {
        let ds = Dataset::parse_jsonl(
            r#"{"id":"p1","context":"you are all clowns","text":"that is not a nice thing to say","label":"covert","split":"train"}
{"id":"p2","context":"troll","text":"reply","label":"overt","split":"test"}"#,
        )
        .unwrap();
        let s = &ds.samples()[0];
        assert_eq!(s.context.as_deref(), Some("you are all clowns"));
        assert_eq!(s.text, "that is not a nice thing to say");
        assert!(ds.has_context());
        assert_eq!(ds.indices_in(Split::Test), vec![1]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = Dataset::parse_jsonl(
            r#"{"id":"1","text":"a","label":"x"}
{"id":"1","text":"b","label":"y"}"#,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateId(_)));
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn exact_stratification_five_by_two() {
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let folds = stratified_kfold_labels(&labels, &names(2), 5, 3).unwrap();
        for (_, val) in &folds {
            assert_eq!(class_counts(&labels, val, 2), vec![1, 1]);
        }
        assert_eq!(folds, stratified_kfold_labels(&labels, &names(2), 5, 3).unwrap());
    }

    #[test]
    fn seventy_thirty_split_counts() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 70)).collect();
        let folds = stratified_kfold_labels(&labels, &names(2), 5, 11).unwrap();
        for (train, val) in &folds {
            // Brute-force count.
            let ones = val.iter().filter(|&&i| labels[i] == 1).count();
            let zeros = val.iter().filter(|&&i| labels[i] == 0).count();
            assert_eq!((zeros, ones), (14, 6));
            assert_eq!(train.len() + val.len(), 100);
        }
    }

    #[test]
    fn insufficient_class_size() {
        let labels = vec![0, 0, 0, 1, 1];
        let err = stratified_kfold_labels(&labels, &names(2), 3, 0).unwrap_err();
        assert!(matches!(err, DatasetError::InsufficientClassSize(c) if c == "c1"));
    }

    #[test]
    fn carve_validation_moves_train_samples() {
        let mut lines = String::new();
        for i in 0..40 {
            lines.push_str(&format!(
                "{{\"id\":\"{i}\",\"text\":\"t{i}\",\"label\":\"{}\",\"split\":\"train\"}}\n",
                if i % 4 == 0 { "a" } else { "b" }
            ));
        }
        let ds = Dataset::parse_jsonl(&lines).unwrap();
        let carved = ds.carve_validation(0.25, 1).unwrap();
        let val = carved.indices_in(Split::Validation);
        // round(2.5) = 3 of class a, round(7.5) = 8 of class b
        let labels = carved.label_indices();
        assert_eq!(class_counts(&labels, &val, 2), vec![3, 8]);
        assert_eq!(carved.indices_in(Split::Train).len(), 29);
    }

    proptest! {
        #[test]
        fn folds_partition_indices(
            labels in proptest::collection::vec(0usize..3, 30..120),
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let n_classes = 3;
            let counts = class_counts(&labels, &(0..labels.len()).collect::<Vec<_>>(), n_classes);
            prop_assume!(counts.iter().all(|&c| c == 0 || c >= k));
            let folds = stratified_kfold_labels(&labels, &names(n_classes), k, seed).unwrap();
            let mut seen = vec![0usize; labels.len()];
            for (train, val) in &folds {
                for &i in val { seen[i] += 1; }
                prop_assert_eq!(train.len() + val.len(), labels.len());
                let vc = class_counts(&labels, val, n_classes);
                for c in 0..n_classes {
                    let expected = counts[c] as f64 / k as f64;
                    prop_assert!((vc[c] as f64 - expected).abs() <= 1.0);
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }
    }
}
