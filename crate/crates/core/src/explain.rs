//! Local and global explanations read off the latent encoding, and the
//! plot-ready heatmap export.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::atomic_write;
use crate::model::{ModelError, ModelParams};
use crate::training::{overlap_statistic, TrainingSet};

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed heatmap file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConcept {
    pub index: usize,
    pub adjective: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalExplanation {
    pub sample_id: String,
    pub predicted_index: usize,
    pub predicted_label: String,
    pub probs: Vec<f64>,
    pub k: usize,
    pub ranked: Vec<RankedConcept>,
}

/// Top `k` entries of `z`, descending, ties by lower index.
pub fn rank_concepts(z: &[f64], adjectives: &[String], k: usize) -> Vec<RankedConcept> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| RankedConcept {
            index: i,
            adjective: adjectives[i].clone(),
            score: z[i],
        })
        .collect()
}

/// Explain one prediction by its `k` most active gated concepts.
pub fn explain_local(
    params: &ModelParams,
    v: &[f64],
    embedding: Option<&[f64]>,
    adjectives: &[String],
    labels: &[String],
    sample_id: &str,
    k: usize,
) -> Result<LocalExplanation, ExplainError> {
    let dims = params.dims();
    if adjectives.len() != dims.concepts || labels.len() != dims.classes {
        return Err(ExplainError::ShapeError(format!(
            "{} adjectives and {} labels for a model with {} concepts and {} classes",
            adjectives.len(),
            labels.len(),
            dims.concepts,
            dims.classes
        )));
    }
    if k > dims.concepts {
        return Err(ExplainError::ShapeError(format!(
            "k = {k} exceeds {} adjectives",
            dims.concepts
        )));
    }
    let f = params.forward(v, embedding)?;
    let probs = f.probs.to_vec();
    let predicted_index = crate::model::argmax(&probs);
    Ok(LocalExplanation {
        sample_id: sample_id.to_string(),
        predicted_index,
        predicted_label: labels[predicted_index].clone(),
        probs,
        k,
        ranked: rank_concepts(f.z.as_slice().expect("contiguous"), adjectives, k),
    })
}

/// Per-class mean latent encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalExplanation {
    pub labels: Vec<String>,
    pub adjectives: Vec<String>,
    /// `per_class[j][i]`: mean `z[i]` over the contributing instances of class `j`.
    pub per_class: Vec<Vec<f64>>,
    pub support: Vec<usize>,
    pub include_errors: bool,
}

impl GlobalExplanation {
    /// `sum_i sum_{k<j} row_j[i] row_k[i]` over the class rows.
    pub fn overlap_statistic(&self) -> f64 {
        let transposed: Vec<Vec<f64>> = (0..self.adjectives.len())
            .map(|i| self.per_class.iter().map(|row| row[i]).collect())
            .collect();
        overlap_statistic(&transposed)
    }

    pub fn heatmap(&self) -> HeatmapData {
        HeatmapData {
            kind: "global".into(),
            columns: self.adjectives.clone(),
            row_labels: self.labels.clone(),
            values: self.per_class.clone(),
        }
    }
}

/// Average `z` per true class over the instances the model gets right (or over
/// all instances with `include_errors`).
pub fn explain_global(
    params: &ModelParams,
    data: &TrainingSet,
    adjectives: &[String],
    labels: &[String],
    include_errors: bool,
) -> Result<GlobalExplanation, ExplainError> {
    let dims = params.dims();
    if adjectives.len() != dims.concepts || labels.len() != dims.classes {
        return Err(ExplainError::ShapeError(
            "adjective or label names do not match the model".into(),
        ));
    }
    let mut sums = vec![vec![0.0; dims.concepts]; dims.classes];
    let mut support = vec![0usize; dims.classes];
    for (i, v) in data.inputs.iter().enumerate() {
        let f = params.forward(v, data.embedding(i))?;
        let y = data.labels[i];
        let pred = crate::model::argmax(f.probs.as_slice().expect("contiguous"));
        if pred != y && !include_errors {
            continue;
        }
        support[y] += 1;
        for (s, z) in sums[y].iter_mut().zip(f.z.iter()) {
            *s += z;
        }
    }
    for (row, &n) in sums.iter_mut().zip(&support) {
        if n > 0 {
            row.iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    Ok(GlobalExplanation {
        labels: labels.to_vec(),
        adjectives: adjectives.to_vec(),
        per_class: sums,
        support,
        include_errors,
    })
}

/// Indices of the `per_class` most confidently and correctly predicted
/// instances of each class, grouped by class. Confidence is the predicted
/// class probability; ties go to the lower index.
pub fn top_confident(params: &ModelParams, data: &TrainingSet, per_class: usize) -> Result<Vec<usize>, ExplainError> {
    let n = params.dims().classes;
    let mut by_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); n];
    for (i, v) in data.inputs.iter().enumerate() {
        let pred = params.predict(v, data.embedding(i))?;
        if pred.label_index == data.labels[i] {
            by_class[pred.label_index].push((pred.probs[pred.label_index], i));
        }
    }
    let mut out = Vec::new();
    for mut group in by_class {
        group.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        out.extend(group.into_iter().take(per_class).map(|(_, i)| i));
    }
    Ok(out)
}

/// Rows of full latent encodings for the given instances.
pub fn local_heatmap(
    params: &ModelParams,
    data: &TrainingSet,
    indices: &[usize],
    row_labels: Vec<String>,
    adjectives: &[String],
) -> Result<HeatmapData, ExplainError> {
    let values = indices
        .iter()
        .map(|&i| params.forward(&data.inputs[i], data.embedding(i)).map(|f| f.z.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(HeatmapData {
        kind: "local".into(),
        columns: adjectives.to_vec(),
        row_labels,
        values,
    })
}

/// Matrix behind a heatmap figure. The CSV holds only the adjective header
/// and the values; row labels live in a `.meta.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapData {
    pub kind: String,
    pub columns: Vec<String>,
    pub row_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct HeatmapMeta {
    kind: String,
    row_labels: Vec<String>,
    score: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

impl HeatmapData {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.values {
            w.write_record(row.iter().map(|v| format!("{v:.9}")))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    /// Write the CSV and its sidecar. Scores are raw `z`, noted in the sidecar.
    pub fn write(&self, path: &Path) -> Result<(), ExplainError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |e: crate::container::ContainerError| ExplainError::Format {
                path,
                reason: e.to_string(),
            }
        };
        atomic_write(path, self.to_csv().as_bytes()).map_err(io(path))?;
        let meta = HeatmapMeta {
            kind: self.kind.clone(),
            row_labels: self.row_labels.clone(),
            score: "raw latent encoding z (not normalized per instance)".into(),
        };
        let side = sidecar_path(path);
        let json = serde_json::to_vec_pretty(&meta).expect("serializable");
        atomic_write(&side, &json).map_err(io(&side))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ExplainError> {
        let format = |reason: String| ExplainError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| format(e.to_string()))?;
        let columns: Vec<String> = r
            .headers()
            .map_err(|e| format(e.to_string()))?
            .iter()
            .map(String::from)
            .collect();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| format(e.to_string()))?;
            let row = rec
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| format(format!("{f:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            values.push(row);
        }
        let side = sidecar_path(path);
        let (kind, row_labels) = match std::fs::read(&side) {
            Ok(bytes) => {
                let meta: HeatmapMeta = serde_json::from_slice(&bytes).map_err(|e| format(e.to_string()))?;
                (meta.kind, meta.row_labels)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (String::new(), Vec::new()),
            Err(source) => return Err(ExplainError::Io { path: side, source }),
        };
        Ok(HeatmapData {
            kind,
            columns,
            row_labels,
            values,
        })
    }
}
