//! The gated bottleneck classifier.
//!
//! `z = sigmoid(W v) * v` (the relevance gate), followed by a single
//! ReLU hidden layer and a softmax. The fused variant projects `z` to the
//! width `d` of an external sentence embedding and classifies the
//! concatenation `[W' z ; e]`.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, bytes_to_f32s, f32s_to_bytes, ContainerError};

pub const CHECKPOINT_FORMAT: &str = "scbm-checkpoint/1";
pub const EMBEDDING_FORMAT: &str = "scbm-embeddings/1";
pub const DEFAULT_HIDDEN: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("numeric error: {0}")]
    NumericError(String),
    #[error("model has no fusion projection")]
    FusionUnavailable,
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("invalid file: {0}")]
    Invalid(String),
}

/// `concepts` = |A|, `hidden` = H, `classes` = n, `embedding` = d for the
/// fused variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub concepts: usize,
    pub hidden: usize,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<usize>,
}

impl ModelDims {
    pub fn new(concepts: usize, hidden: usize, classes: usize) -> Self {
        ModelDims {
            concepts,
            hidden,
            classes,
            embedding: None,
        }
    }

    pub fn fused(concepts: usize, hidden: usize, classes: usize, embedding: usize) -> Self {
        ModelDims {
            embedding: Some(embedding),
            ..ModelDims::new(concepts, hidden, classes)
        }
    }

    /// Width of the MLP input: |A|, or 2d when fused.
    pub fn mlp_input(&self) -> usize {
        self.embedding.map_or(self.concepts, |d| 2 * d)
    }

    /// Total trainable parameters.
    pub fn parameter_count(&self) -> usize {
        let (a, h, n) = (self.concepts, self.hidden, self.classes);
        a * a + h * self.mlp_input() + h + n * h + n + self.embedding.map_or(0, |d| d * a)
    }
}

pub fn parameter_count(dims: &ModelDims) -> usize {
    dims.parameter_count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub gate_w: Array2<f64>,
    pub hidden_w: Array2<f64>,
    pub hidden_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
    pub fusion_wp: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label_index: usize,
}

/// Every intermediate of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub gate: Array1<f64>,
    pub z: Array1<f64>,
    pub mlp_in: Array1<f64>,
    pub hidden_pre: Array1<f64>,
    pub hidden: Array1<f64>,
    pub probs: Array1<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with the maximum logit subtracted.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exp = logits.mapv(|x| (x - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let (a, h, n) = (dims.concepts, dims.hidden, dims.classes);
        ModelParams {
            gate_w: Array2::zeros((a, a)),
            hidden_w: Array2::zeros((h, dims.mlp_input())),
            hidden_b: Array1::zeros(h),
            out_w: Array2::zeros((n, h)),
            out_b: Array1::zeros(n),
            fusion_wp: dims.embedding.map(|d| Array2::zeros((d, a))),
        }
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for every weight and bias.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(dims);
        let fill = |m: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for x in m {
                *x = rng.random_range(-bound..bound);
            }
        };
        fill(p.gate_w.as_slice_mut().unwrap(), dims.concepts, &mut rng);
        if let Some(wp) = p.fusion_wp.as_mut() {
            fill(wp.as_slice_mut().unwrap(), dims.concepts, &mut rng);
        }
        fill(p.hidden_w.as_slice_mut().unwrap(), dims.mlp_input(), &mut rng);
        fill(p.hidden_b.as_slice_mut().unwrap(), dims.mlp_input(), &mut rng);
        fill(p.out_w.as_slice_mut().unwrap(), dims.hidden, &mut rng);
        fill(p.out_b.as_slice_mut().unwrap(), dims.hidden, &mut rng);
        p
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            concepts: self.gate_w.nrows(),
            hidden: self.hidden_w.nrows(),
            classes: self.out_w.nrows(),
            embedding: self.fusion_wp.as_ref().map(|w| w.nrows()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.dims().parameter_count()
    }

    /// Shape consistency and finiteness of every entry.
    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.dims();
        let shape = |name: &str, got: &[usize], want: &[usize]| {
            if got != want {
                Err(ModelError::ShapeError(format!("{name} is {got:?}, expected {want:?}")))
            } else {
                Ok(())
            }
        };
        shape("gate_w", self.gate_w.shape(), &[d.concepts, d.concepts])?;
        shape("hidden_w", self.hidden_w.shape(), &[d.hidden, d.mlp_input()])?;
        shape("hidden_b", self.hidden_b.shape(), &[d.hidden])?;
        shape("out_w", self.out_w.shape(), &[d.classes, d.hidden])?;
        shape("out_b", self.out_b.shape(), &[d.classes])?;
        if let (Some(wp), Some(e)) = (&self.fusion_wp, d.embedding) {
            shape("fusion_wp", wp.shape(), &[e, d.concepts])?;
        }
        if d.classes < 2 {
            return Err(ModelError::ShapeError("at least two classes required".into()));
        }
        if !self.flat().iter().all(|x| x.is_finite()) {
            return Err(ModelError::NumericError("non-finite parameter".into()));
        }
        Ok(())
    }

    /// All parameters in checkpoint order: gate, fusion projection (if any),
    /// hidden weights and bias, output weights and bias. Row-major.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        out.extend(self.gate_w.iter());
        if let Some(wp) = &self.fusion_wp {
            out.extend(wp.iter());
        }
        out.extend(self.hidden_w.iter());
        out.extend(self.hidden_b.iter());
        out.extend(self.out_w.iter());
        out.extend(self.out_b.iter());
        out
    }

    /// Inverse of [`flat`](Self::flat).
    pub fn from_flat(dims: ModelDims, values: &[f64]) -> Result<Self, ModelError> {
        if values.len() != dims.parameter_count() {
            return Err(ModelError::ShapeError(format!(
                "{} values for {} parameters",
                values.len(),
                dims.parameter_count()
            )));
        }
        let mut p = ModelParams::zeros(dims);
        let mut rest = values;
        for slot in p.slots_mut() {
            let (head, tail) = rest.split_at(slot.len());
            slot.copy_from_slice(head);
            rest = tail;
        }
        Ok(p)
    }

    /// Mutable views in [`flat`](Self::flat) order.
    pub fn slots_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.gate_w.as_slice_mut().expect("standard layout")];
        if let Some(wp) = self.fusion_wp.as_mut() {
            out.push(wp.as_slice_mut().expect("standard layout"));
        }
        out.push(self.hidden_w.as_slice_mut().expect("standard layout"));
        out.push(self.hidden_b.as_slice_mut().expect("standard layout"));
        out.push(self.out_w.as_slice_mut().expect("standard layout"));
        out.push(self.out_b.as_slice_mut().expect("standard layout"));
        out
    }

    fn check_input(&self, v: &[f64]) -> Result<(), ModelError> {
        if v.len() != self.gate_w.nrows() {
            return Err(ModelError::ShapeError(format!(
                "bottleneck vector has {} entries, model expects {}",
                v.len(),
                self.gate_w.nrows()
            )));
        }
        Ok(())
    }

    /// Latent encoding `sigmoid(W v) * v`.
    pub fn gate_forward(&self, v: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(v)?;
        let (_, z) = self.gate(ArrayView1::from(v));
        Ok(z.to_vec())
    }

    fn gate(&self, v: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
        let g = self.gate_w.dot(&v).mapv(sigmoid);
        let z = &g * &v;
        (g, z)
    }

    /// Full forward pass. `embedding` is required exactly when the model is
    /// fused.
    pub fn forward(&self, v: &[f64], embedding: Option<&[f64]>) -> Result<Forward, ModelError> {
        self.check_input(v)?;
        let (gate, z) = self.gate(ArrayView1::from(v));
        let mlp_in = match (&self.fusion_wp, embedding) {
            (None, None) => z.clone(),
            (None, Some(_)) => return Err(ModelError::FusionUnavailable),
            (Some(_), None) => {
                return Err(ModelError::ShapeError("fused model needs an embedding".into()));
            }
            (Some(wp), Some(e)) => {
                if e.len() != wp.nrows() {
                    return Err(ModelError::ShapeError(format!(
                        "embedding has {} entries, model expects {}",
                        e.len(),
                        wp.nrows()
                    )));
                }
                let mut cat = wp.dot(&z).to_vec();
                cat.extend_from_slice(e);
                Array1::from(cat)
            }
        };
        let hidden_pre = self.hidden_w.dot(&mlp_in) + &self.hidden_b;
        let hidden = hidden_pre.mapv(|x| x.max(0.0));
        let logits = self.out_w.dot(&hidden) + &self.out_b;
        if !logits.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NumericError("non-finite logits".into()));
        }
        let probs = softmax(&logits);
        Ok(Forward {
            gate,
            z,
            mlp_in,
            hidden_pre,
            hidden,
            probs,
        })
    }

    pub fn classify(&self, v: &[f64]) -> Result<Prediction, ModelError> {
        if self.fusion_wp.is_some() {
            return Err(ModelError::ShapeError(
                "fused model needs an embedding; use classify_fused".into(),
            ));
        }
        Ok(self.forward(v, None)?.into())
    }

    pub fn classify_fused(&self, v: &[f64], embedding: &[f64]) -> Result<Prediction, ModelError> {
        if self.fusion_wp.is_none() {
            return Err(ModelError::FusionUnavailable);
        }
        Ok(self.forward(v, Some(embedding))?.into())
    }

    /// Dispatches to [`classify`](Self::classify) or
    /// [`classify_fused`](Self::classify_fused).
    pub fn predict(&self, v: &[f64], embedding: Option<&[f64]>) -> Result<Prediction, ModelError> {
        Ok(self.forward(v, embedding)?.into())
    }
}

impl From<Forward> for Prediction {
    fn from(f: Forward) -> Self {
        let probs = f.probs.to_vec();
        Prediction {
            label_index: argmax(&probs),
            probs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub dims: ModelDims,
    pub seed: u64,
    pub lexicon_fingerprint: String,
    pub template_fingerprint: String,
    pub label_order: Vec<String>,
    pub adjectives: Vec<String>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

/// Trained parameters plus everything needed to apply them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        seed: u64,
        lexicon_fingerprint: &str,
        template_fingerprint: &str,
        label_order: Vec<String>,
        adjectives: Vec<String>,
        lambda: f64,
    ) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT.to_string(),
                dims: params.dims(),
                seed,
                lexicon_fingerprint: lexicon_fingerprint.to_string(),
                template_fingerprint: template_fingerprint.to_string(),
                label_order,
                adjectives,
                lambda,
                manifest: None,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let values: Vec<f32> = self.params.flat().iter().map(|&x| x as f32).collect();
        container::encode_framed(&self.meta, &f32s_to_bytes(&values))
    }

    /// Parameters are stored as `f32`; a loaded checkpoint holds the rounded
    /// values.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.params.validate()?;
        container::atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (meta, payload): (CheckpointMeta, Vec<u8>) = container::read_framed(path)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Invalid(format!("unsupported format {:?}", meta.format)));
        }
        if meta.label_order.len() != meta.dims.classes || meta.adjectives.len() != meta.dims.concepts {
            return Err(ModelError::Invalid("metadata disagrees with dimensions".into()));
        }
        let values = bytes_to_f32s(&payload)
            .ok_or_else(|| ModelError::Invalid("payload is not a whole number of f32".into()))?;
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let params = ModelParams::from_flat(meta.dims, &values)?;
        params.validate()?;
        Ok(Checkpoint { meta, params })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddingHeader {
    format: String,
    dim: usize,
    sample_ids: Vec<String>,
}

/// Precomputed sentence embeddings keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, ids: Vec<String>, values: Vec<f32>) -> Result<Self, ModelError> {
        if dim == 0 || values.len() != dim * ids.len() {
            return Err(ModelError::ShapeError(format!(
                "{} values for {} embeddings of width {dim}",
                values.len(),
                ids.len()
            )));
        }
        if !values.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NumericError("non-finite embedding entry".into()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(ModelError::Invalid(format!("duplicate sample id {id:?}")));
            }
        }
        Ok(EmbeddingTable {
            dim,
            ids,
            values,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<Vec<f64>> {
        let i = *self.index.get(id)?;
        Some(
            self.values[i * self.dim..(i + 1) * self.dim]
                .iter()
                .map(|&x| f64::from(x))
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let header = EmbeddingHeader {
            format: EMBEDDING_FORMAT.to_string(),
            dim: self.dim,
            sample_ids: self.ids.clone(),
        };
        container::write_framed(path, &header, &f32s_to_bytes(&self.values))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (header, payload): (EmbeddingHeader, Vec<u8>) = container::read_framed(path)?;
        if header.format != EMBEDDING_FORMAT {
            return Err(ModelError::Invalid(format!("unsupported format {:?}", header.format)));
        }
        let values = bytes_to_f32s(&payload)
            .ok_or_else(|| ModelError::Invalid("payload is not a whole number of f32".into()))?;
        EmbeddingTable::new(header.dim, header.sample_ids, values)
    }
}
