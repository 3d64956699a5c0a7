//! Concept evaluation: score every (sample, adjective) pair and assemble the
//! concept matrix.
//!
//! Progress is checkpointed per cell into `<cache_dir>/encode.ckpt`, so an
//! interrupted run resumes without re-querying finished cells. A checkpoint
//! written for a different dataset, lexicon, template, model or yes-token set
//! is never reused.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::container::{self, bytes_to_f32s, f32s_to_bytes, ContainerError};
use crate::dataset::Dataset;
use crate::gateway::{first_token_distribution, yes_probability, Backend, GatewayError, QueryRequest, RetryPolicy};
use crate::lexicon::Lexicon;
use crate::prompting::{PromptError, PromptTemplate};

pub const MATRIX_FORMAT: &str = "scbm-matrix/1";
const CHECKPOINT_FORMAT: &str = "scbm-encode-checkpoint/2";
pub const CHECKPOINT_FILE: &str = "encode.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum MatrixError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("integrity error: {0}")]
    IntegrityError(String),
    #[error("invalid matrix: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("cache conflict in {path}: {field} differs (cached {cached}, current {current})")]
    CacheConflict {
        path: PathBuf,
        field: String,
        cached: String,
        current: String,
    },
    #[error("encoding interrupted after {completed}/{total} cells; resume from {checkpoint}: {source}")]
    EncodeInterrupted {
        completed: usize,
        total: usize,
        checkpoint: PathBuf,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MatrixHeader {
    format: String,
    rows: usize,
    cols: usize,
    sample_ids: Vec<String>,
    adjectives: Vec<String>,
    lexicon_fingerprint: String,
    template_fingerprint: String,
    model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<String>,
}

/// `|D| x |A|` matrix of yes-probabilities, row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMatrix {
    values: Vec<f32>,
    rows: usize,
    cols: usize,
    sample_ids: Vec<String>,
    adjectives: Vec<String>,
    lexicon_fingerprint: String,
    template_fingerprint: String,
    model_id: String,
    manifest: Option<String>,
}

impl ConceptMatrix {
    pub fn new(
        values: Vec<f32>,
        adjectives: Vec<String>,
        sample_ids: Vec<String>,
        lexicon_fingerprint: &str,
        template_fingerprint: &str,
        model_id: &str,
    ) -> Result<Self, MatrixError> {
        let rows = sample_ids.len();
        let cols = adjectives.len();
        if cols == 0 {
            return Err(MatrixError::Invalid("matrix needs at least one column".into()));
        }
        if values.len() != rows * cols {
            return Err(MatrixError::Invalid(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MatrixError::Invalid(format!("entry {bad} outside [0, 1]")));
        }
        Ok(ConceptMatrix {
            values,
            rows,
            cols,
            sample_ids,
            adjectives,
            lexicon_fingerprint: lexicon_fingerprint.to_string(),
            template_fingerprint: template_fingerprint.to_string(),
            model_id: model_id.to_string(),
            manifest: None,
        })
    }

    pub fn with_manifest(mut self, manifest_hash: &str) -> Self {
        self.manifest = Some(manifest_hash.to_string());
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_f64(&self, row: usize) -> Vec<f64> {
        self.row(row).iter().map(|&v| f64::from(v)).collect()
    }

    /// All rows widened to `f64`.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row_f64(i)).collect()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    /// Adjective surfaces, one per column.
    pub fn adjectives(&self) -> &[String] {
        &self.adjectives
    }

    pub fn lexicon_fingerprint(&self) -> &str {
        &self.lexicon_fingerprint
    }

    pub fn template_fingerprint(&self) -> &str {
        &self.template_fingerprint
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn manifest(&self) -> Option<&str> {
        self.manifest.as_deref()
    }

    pub fn position_of(&self, sample_id: &str) -> Option<usize> {
        self.sample_ids.iter().position(|s| s == sample_id)
    }

    /// Matrix restricted to `rows`, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> ConceptMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        ConceptMatrix {
            values,
            rows: rows.len(),
            cols: self.cols,
            sample_ids: rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            adjectives: self.adjectives.clone(),
            lexicon_fingerprint: self.lexicon_fingerprint.clone(),
            template_fingerprint: self.template_fingerprint.clone(),
            model_id: self.model_id.clone(),
            manifest: self.manifest.clone(),
        }
    }

    /// Check that two matrices come from the same lexicon and prompt.
    pub fn compatible_with(&self, other: &ConceptMatrix) -> Result<(), MatrixError> {
        if self.cols != other.cols
            || self.lexicon_fingerprint != other.lexicon_fingerprint
            || self.template_fingerprint != other.template_fingerprint
        {
            return Err(MatrixError::Invalid(
                "matrices differ in lexicon or template fingerprint".into(),
            ));
        }
        Ok(())
    }

    fn header(&self) -> MatrixHeader {
        MatrixHeader {
            format: MATRIX_FORMAT.to_string(),
            rows: self.rows,
            cols: self.cols,
            sample_ids: self.sample_ids.clone(),
            adjectives: self.adjectives.clone(),
            lexicon_fingerprint: self.lexicon_fingerprint.clone(),
            template_fingerprint: self.template_fingerprint.clone(),
            model_id: self.model_id.clone(),
            manifest: self.manifest.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        container::encode_framed(&self.header(), &f32s_to_bytes(&self.values))
    }

    pub fn save(&self, path: &Path) -> Result<(), MatrixError> {
        container::write_framed(path, &self.header(), &f32s_to_bytes(&self.values))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MatrixError> {
        let (header, payload): (MatrixHeader, Vec<u8>) = container::read_framed(path)?;
        if header.format != MATRIX_FORMAT {
            return Err(MatrixError::Invalid(format!("unsupported format {:?}", header.format)));
        }
        if header.sample_ids.len() != header.rows || header.adjectives.len() != header.cols {
            return Err(MatrixError::IntegrityError(format!(
                "{} sample ids and {} adjectives for a {}x{} matrix",
                header.sample_ids.len(),
                header.adjectives.len(),
                header.rows,
                header.cols
            )));
        }
        let values = bytes_to_f32s(&payload)
            .filter(|v| v.len() == header.rows * header.cols)
            .ok_or_else(|| MatrixError::IntegrityError("payload size does not match dimensions".into()))?;
        let mut m = ConceptMatrix::new(
            values,
            header.adjectives,
            header.sample_ids,
            &header.lexicon_fingerprint,
            &header.template_fingerprint,
            &header.model_id,
        )?;
        m.manifest = header.manifest;
        Ok(m)
    }
}

pub fn save_matrix(matrix: &ConceptMatrix, path: &Path) -> Result<(), MatrixError> {
    matrix.save(path)
}

pub fn load_matrix(path: &Path) -> Result<ConceptMatrix, MatrixError> {
    ConceptMatrix::load(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeOptions {
    /// Maximum concurrent backend calls.
    pub parallel: usize,
    /// Cells between checkpoint writes.
    pub checkpoint_every: usize,
    pub retry: RetryPolicy,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            parallel: 4,
            checkpoint_every: 1000,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    dataset_fingerprint: String,
    lexicon_fingerprint: String,
    template_fingerprint: String,
    model_id: String,
    yes_fingerprint: String,
    rows: usize,
    cols: usize,
    sample_ids: Vec<String>,
}

struct CheckpointState {
    header: CheckpointHeader,
    values: Vec<f32>,
    /// Total probability mass the backend listed for each cell's first token.
    coverage: Vec<f32>,
    done: Vec<bool>,
}

impl CheckpointState {
    fn completed(&self) -> usize {
        self.done.iter().filter(|d| **d).count()
    }

    fn save(&self, path: &Path) -> Result<(), ContainerError> {
        let mut payload = f32s_to_bytes(&self.values);
        payload.extend_from_slice(&f32s_to_bytes(&self.coverage));
        let mut bitmap = vec![0u8; self.done.len().div_ceil(8)];
        for (i, &d) in self.done.iter().enumerate() {
            if d {
                bitmap[i / 8] |= 1 << (i % 8);
            }
        }
        payload.extend_from_slice(&bitmap);
        container::write_framed(path, &self.header, &payload)
    }

    fn load(path: &Path) -> Result<Self, ContainerError> {
        let (header, payload): (CheckpointHeader, Vec<u8>) = container::read_framed(path)?;
        let cells = header.rows * header.cols;
        let corrupt = |reason: &str| ContainerError::Integrity {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if header.format != CHECKPOINT_FORMAT {
            return Err(corrupt("unsupported checkpoint format"));
        }
        if payload.len() != cells * 8 + cells.div_ceil(8) {
            return Err(corrupt("checkpoint payload size does not match dimensions"));
        }
        let values = bytes_to_f32s(&payload[..cells * 4]).expect("length checked");
        let coverage = bytes_to_f32s(&payload[cells * 4..cells * 8]).expect("length checked");
        let bitmap = &payload[cells * 8..];
        let done = (0..cells).map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0).collect();
        Ok(CheckpointState {
            header,
            values,
            coverage,
            done,
        })
    }
}

fn check_field(path: &Path, field: &str, cached: &str, current: &str) -> Result<(), EncodeError> {
    if cached != current {
        return Err(EncodeError::CacheConflict {
            path: path.to_path_buf(),
            field: field.to_string(),
            cached: cached.to_string(),
            current: current.to_string(),
        });
    }
    Ok(())
}

/// How much first-token probability mass the backend reported per query.
///
/// Backends that only return the top-k candidates truncate the
/// distribution; low coverage means the yes-mass may be underestimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub cells: usize,
    pub min: f64,
    pub mean: f64,
    pub threshold: f64,
    pub below_threshold: usize,
    /// Up to 20 lowest-coverage cells as (sample id, adjective, coverage).
    pub worst: Vec<(String, String, f64)>,
}

/// Default level under which a query counts as heavily truncated.
pub const LOW_COVERAGE: f64 = 0.9;

/// Summarize per-query coverage stored in the encode checkpoint of `cache_dir`.
pub fn coverage_summary(
    cache_dir: &Path,
    adjectives: &[String],
    threshold: f64,
) -> Result<CoverageSummary, ContainerError> {
    let path = cache_dir.join(CHECKPOINT_FILE);
    let state = CheckpointState::load(&path)?;
    let cols = state.header.cols;
    if adjectives.len() != cols {
        return Err(ContainerError::Integrity {
            path,
            reason: format!("checkpoint has {cols} adjectives, expected {}", adjectives.len()),
        });
    }
    let mut cells: Vec<(usize, f64)> = (0..state.done.len())
        .filter(|&c| state.done[c])
        .map(|c| (c, state.coverage[c] as f64))
        .collect();
    let n = cells.len();
    let mean = if n == 0 {
        0.0
    } else {
        cells.iter().map(|c| c.1).sum::<f64>() / n as f64
    };
    let below_threshold = cells.iter().filter(|c| c.1 < threshold).count();
    cells.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let min = cells.first().map_or(0.0, |c| c.1);
    let worst = cells
        .iter()
        .take(20)
        .map(|&(c, v)| {
            (
                state.header.sample_ids[c / cols].clone(),
                adjectives[c % cols].clone(),
                v,
            )
        })
        .collect();
    Ok(CoverageSummary {
        cells: n,
        min,
        mean,
        threshold,
        below_threshold,
        worst,
    })
}

/// Score every (sample, adjective) pair of `dataset` x `lexicon`.
///
/// Cells are issued sample by sample, adjectives in lexicon order within a
/// sample, so prefix-caching backends see long runs of the shared prefix. The
/// result does not depend on completion order.
pub fn encode(
    dataset: &Dataset,
    lexicon: &Lexicon,
    template: &PromptTemplate,
    backend: &dyn Backend,
    cache_dir: &Path,
    options: &EncodeOptions,
) -> Result<ConceptMatrix, EncodeError> {
    for s in dataset.samples() {
        template.check_context(s.context.is_some())?;
    }
    let rows = dataset.len();
    let cols = lexicon.len();
    let yes = backend.yes_tokens();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        dataset_fingerprint: dataset.fingerprint().to_string(),
        lexicon_fingerprint: lexicon.fingerprint().to_string(),
        template_fingerprint: template.run_fingerprint(lexicon),
        model_id: backend.model_id().to_string(),
        yes_fingerprint: yes.fingerprint(),
        rows,
        cols,
        sample_ids: dataset.samples().iter().map(|s| s.id.clone()).collect(),
    };
    let ckpt_path = cache_dir.join(CHECKPOINT_FILE);

    let mut state = if ckpt_path.exists() {
        let cached = CheckpointState::load(&ckpt_path)?;
        let c = &cached.header;
        check_field(
            &ckpt_path,
            "lexicon_fingerprint",
            &c.lexicon_fingerprint,
            &header.lexicon_fingerprint,
        )?;
        check_field(
            &ckpt_path,
            "template_fingerprint",
            &c.template_fingerprint,
            &header.template_fingerprint,
        )?;
        check_field(&ckpt_path, "model_id", &c.model_id, &header.model_id)?;
        check_field(
            &ckpt_path,
            "yes_fingerprint",
            &c.yes_fingerprint,
            &header.yes_fingerprint,
        )?;
        check_field(
            &ckpt_path,
            "dataset_fingerprint",
            &c.dataset_fingerprint,
            &header.dataset_fingerprint,
        )?;
        cached
    } else {
        CheckpointState {
            header: header.clone(),
            values: vec![0.0; rows * cols],
            coverage: vec![0.0; rows * cols],
            done: vec![false; rows * cols],
        }
    };

    let pending: Vec<usize> = (0..rows * cols).filter(|&c| !state.done[c]).collect();
    let total = rows * cols;
    log::info!(
        "encoding {rows}x{cols} cells with {}: {} cached, {} to query",
        backend.describe(),
        total - pending.len(),
        pending.len()
    );

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = options.parallel.max(1).min(pending.len().max(1));
    let mut failure: Option<GatewayError> = None;
    let mut since_checkpoint = 0usize;
    let mut checkpoint_error: Option<ContainerError> = None;

    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, Result<(f64, f64), GatewayError>)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (pending, next, abort, yes) = (&pending, &next, &abort, &yes);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&cell) = pending.get(k) else { break };
                let (i, j) = (cell / cols, cell % cols);
                let sample = &dataset.samples()[i];
                let adjective = &lexicon.adjectives()[j];
                let result = template
                    .render(adjective, sample)
                    .map_err(|e| GatewayError::ProtocolError(e.to_string()))
                    .and_then(|prompt| {
                        let req =
                            QueryRequest::new(prompt, &adjective.surface, &sample.text, sample.context.as_deref());
                        first_token_distribution(backend, &req, &options.retry)
                    })
                    .map(|dist| (yes_probability(&dist, yes), dist.coverage()));
                if tx.send((cell, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        for (cell, result) in rx {
            match result {
                Ok((p, cov)) => {
                    state.values[cell] = p as f32;
                    state.coverage[cell] = cov as f32;
                    state.done[cell] = true;
                    since_checkpoint += 1;
                    if since_checkpoint >= options.checkpoint_every.max(1) {
                        since_checkpoint = 0;
                        if let Err(e) = state.save(&ckpt_path) {
                            checkpoint_error.get_or_insert(e);
                            abort.store(true, Ordering::SeqCst);
                        }
                        log::info!("checkpoint: {}/{total} cells", state.completed());
                    }
                }
                Err(e) => {
                    abort.store(true, Ordering::SeqCst);
                    failure.get_or_insert(e);
                }
            }
        }
    });

    if let Some(e) = checkpoint_error {
        return Err(e.into());
    }
    state.save(&ckpt_path)?;
    if let Some(source) = failure {
        return Err(EncodeError::EncodeInterrupted {
            completed: state.completed(),
            total,
            checkpoint: ckpt_path,
            source,
        });
    }

    Ok(ConceptMatrix::new(
        state.values,
        lexicon.surfaces().iter().map(|s| s.to_string()).collect(),
        state.header.sample_ids,
        &header.lexicon_fingerprint,
        &header.template_fingerprint,
        &header.model_id,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FlakyBackend, KeywordRule, MockBackend};
    use crate::prompting::builtin_templates;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|j| format!("adj{j}")).collect()
    }

    fn fixture() -> (Dataset, Lexicon, MockBackend) {
        let ds = Dataset::parse_jsonl(
            r#"{"id":"a","text":"you idiot, go away","label":"hate"}
{"id":"b","text":"thanks, I appreciate your support","label":"counter"}"#,
        )
        .unwrap();
        let lex = Lexicon::from_surfaces(&["insulting", "supportive", "sarcastic"], "en").unwrap();
        let mock = MockBackend::new(
            vec![
                KeywordRule::new("insulting", "idiot", 0.9, 0.1),
                KeywordRule::new("supportive", "support", 0.8, 0.2),
                KeywordRule::new("supportive", "thanks", 0.7, 0.15),
            ],
            0,
        );
        (ds, lex, mock)
    }

    #[test]
    fn two_by_three_matches_rules() {
        let (ds, lex, mock) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let t = &builtin_templates()["plain_text"];
        let m = encode(&ds, &lex, t, &mock, dir.path(), &EncodeOptions::default()).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 3));
        // Each cell evaluated by hand from the rules.
        let expected: [[f64; 3]; 2] = [[0.9, 0.2, 0.05], [0.1, 0.8, 0.05]];
        for (i, row) in expected.iter().enumerate() {
            for (j, &want) in row.iter().enumerate() {
                assert_eq!(m.get(i, j), want as f32, "cell ({i},{j})");
            }
        }
        assert_eq!(m.sample_ids(), ["a", "b"]);
        assert_eq!(m.adjectives(), ["insulting", "supportive", "sarcastic"]);
        assert_eq!(m.lexicon_fingerprint(), lex.fingerprint());
        assert_eq!(m.template_fingerprint(), t.fingerprint());
        assert_eq!(m.model_id(), "mock-keyword");
    }

    #[test]
    fn coverage_is_recorded_per_query() {
        let (ds, lex, mock) = fixture();
        let t = &builtin_templates()["plain_text"];
        let names: Vec<String> = lex.surfaces().iter().map(|s| s.to_string()).collect();
        let dir = tempfile::tempdir().unwrap();
        encode(&ds, &lex, t, &mock, dir.path(), &EncodeOptions::default()).unwrap();
        let full = coverage_summary(dir.path(), &names, LOW_COVERAGE).unwrap();
        assert_eq!(full.cells, 6);
        assert!((full.min - 1.0).abs() < 1e-6 && full.below_threshold == 0);

        // Top-k style truncation: only 0.3 + 0.25 of the mass is listed.
        let truncated = crate::gateway::StaticBackend {
            distribution: crate::gateway::FirstTokenDistribution::from_pairs([("Yes", 0.3), ("No", 0.25)]).unwrap(),
            yes: crate::gateway::YesTokenSet::english(),
        };
        let dir = tempfile::tempdir().unwrap();
        encode(&ds, &lex, t, &truncated, dir.path(), &EncodeOptions::default()).unwrap();
        let low = coverage_summary(dir.path(), &names, LOW_COVERAGE).unwrap();
        assert_eq!(low.below_threshold, 6);
        assert!((low.mean - 0.55).abs() < 1e-6);
        assert_eq!(low.worst.len(), 6);
        assert_eq!(low.worst[0].0, "a");
        assert!(coverage_summary(dir.path(), &names[..2], LOW_COVERAGE).is_err());
    }

    #[test]
    fn completed_cache_is_not_requeried() {
        let (ds, lex, mock) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let t = &builtin_templates()["plain_text"];
        let first = encode(&ds, &lex, t, &mock, dir.path(), &EncodeOptions::default()).unwrap();
        assert_eq!(mock.calls(), 6);
        let second = encode(&ds, &lex, t, &mock, dir.path(), &EncodeOptions::default()).unwrap();
        assert_eq!(mock.calls(), 6);
        assert_eq!(first, second);
    }

    #[test]
    fn changed_lexicon_conflicts_with_cache() {
        let (ds, lex, mock) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let t = &builtin_templates()["plain_text"];
        encode(&ds, &lex, t, &mock, dir.path(), &EncodeOptions::default()).unwrap();
        let bigger = Lexicon::from_surfaces(&["insulting", "supportive", "sarcastic", "hateful"], "en").unwrap();
        let err = encode(&ds, &bigger, t, &mock, dir.path(), &EncodeOptions::default()).unwrap_err();
        assert!(
            matches!(err, EncodeError::CacheConflict { ref field, .. } if field == "lexicon_fingerprint"),
            "{err}"
        );
        let other = builtin_templates()["plain_text"].clone().with_persona("");
        let err = encode(&ds, &lex, &other, &mock, dir.path(), &EncodeOptions::default()).unwrap_err();
        assert!(matches!(err, EncodeError::CacheConflict { ref field, .. } if field == "template_fingerprint"));
    }

    #[test]
    fn context_mismatch_fails_early() {
        let (ds, lex, mock) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let t = &builtin_templates()["conversation_ab"];
        assert!(matches!(
            encode(&ds, &lex, t, &mock, dir.path(), &EncodeOptions::default()),
            Err(EncodeError::Prompt(_))
        ));
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn interrupted_run_resumes_to_identical_matrix() {
        let (ds, lex, _) = fixture();
        let t = &builtin_templates()["plain_text"];
        let opts = EncodeOptions {
            parallel: 3,
            checkpoint_every: 1,
            retry: RetryPolicy::no_delay(2),
        };
        let clean_dir = tempfile::tempdir().unwrap();
        let clean = encode(&ds, &lex, t, &fixture().2, clean_dir.path(), &opts).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let flaky = FlakyBackend::new(fixture().2).fail_after(3);
        let err = encode(&ds, &lex, t, &flaky, dir.path(), &opts).unwrap_err();
        match err {
            EncodeError::EncodeInterrupted { completed, total, .. } => {
                assert_eq!((completed, total), (3, 6));
            }
            other => panic!("unexpected {other}"),
        }
        let resumed_backend = fixture().2;
        let resumed = encode(&ds, &lex, t, &resumed_backend, dir.path(), &opts).unwrap();
        assert_eq!(resumed_backend.calls(), 3);
        assert_eq!(resumed.to_bytes(), clean.to_bytes());
    }

    #[test]
    fn matrix_file_layout_and_size() {
        let rows = 1000;
        let cols = 270;
        let values: Vec<f32> = (0..rows * cols).map(|k| (k % 997) as f32 / 997.0).collect();
        let ids: Vec<String> = (0..rows).map(|i| format!("s{i}")).collect();
        let adjectives = (0..cols).map(|j| format!("adj{j}")).collect();
        let m = ConceptMatrix::new(values, adjectives, ids, "lexfp", "tplfp", "mock").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.scm");
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_line = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        // Metadata line + 4 bytes per cell + 32-byte checksum.
        assert_eq!(bytes.len(), header_line + 4 * 270_000 + 32);
        assert_eq!(ConceptMatrix::load(&path).unwrap(), m);
    }

    #[test]
    fn truncated_or_corrupted_matrix_rejected() {
        let m = ConceptMatrix::new(vec![0.25; 6], names(3), vec!["a".into(), "b".into()], "l", "t", "m").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.scm");
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            ConceptMatrix::load(&path),
            Err(MatrixError::Container(ContainerError::Integrity { .. }))
        ));
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 40] ^= 0x80;
        std::fs::write(&path, &flipped).unwrap();
        assert!(ConceptMatrix::load(&path).is_err());
    }

    #[test]
    fn rejects_out_of_range_entries() {
        assert!(ConceptMatrix::new(vec![1.5], names(1), vec!["a".into()], "l", "t", "m").is_err());
        assert!(ConceptMatrix::new(vec![f32::NAN], names(1), vec!["a".into()], "l", "t", "m").is_err());
        assert!(ConceptMatrix::new(vec![0.5; 3], names(2), vec!["a".into()], "l", "t", "m").is_err());
    }

    proptest! {
        #[test]
        fn save_load_is_bitwise(values in proptest::collection::vec(0.0f32..=1.0, 1..60), cols in 1usize..6) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let values = values[..rows * cols].to_vec();
            let ids = (0..rows).map(|i| format!("id-{i}")).collect();
            let m = ConceptMatrix::new(values, names(cols), ids, "l", "t", "m").unwrap().with_manifest("abc");
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.scm");
            m.save(&path).unwrap();
            let back = ConceptMatrix::load(&path).unwrap();
            prop_assert_eq!(back.to_bytes(), m.to_bytes());
            prop_assert_eq!(back, m);
        }
    }
}
