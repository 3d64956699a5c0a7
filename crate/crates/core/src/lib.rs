//! Speech concept bottleneck toolkit.
//!
//! Texts are encoded as vectors of LLM-derived probabilities that each
//! adjective of a fixed lexicon describes them. A small gated classifier is
//! trained on those vectors, and its gated activations double as local and
//! global explanations.
//!
//! The pipeline, bottom-up:
//!
//! - [`lexicon`]: the ordered adjective set defining the bottleneck.
//! - [`dataset`]: labeled JSONL corpora, splits and stratified folds.
//! - [`prompting`]: templates, personas and the prefix/suffix split.
//! - [`gateway`]: first-token distributions and yes-token mass.
//! - [`encoder`]: the resumable (sample, adjective) scoring loop and the
//!   `.scm` concept matrix format.
//! - [`model`], [`training`]: the relevance gate, MLP head and RMSProp
//!   training with the class-discriminative penalty.
//! - [`explain`], [`analysis`]: explanations, macro-F1 and sensitivity tools.

pub mod analysis;
pub mod container;
pub mod dataset;
pub mod encoder;
pub mod explain;
pub mod gateway;
pub mod hashing;
pub mod lexicon;
pub mod model;
pub mod prompting;
pub mod synthetic;
pub mod training;

pub use analysis::{macro_f1, permutation_importance, subset_sweep, PermutationReport, SubsetSweepReport};
pub use dataset::{load_dataset, stratified_kfold, Dataset, LabelSet, Split, TextSample};
pub use encoder::{encode, ConceptMatrix, EncodeOptions};
pub use explain::{explain_global, explain_local, GlobalExplanation, LocalExplanation};
pub use gateway::{yes_probability, Backend, FirstTokenDistribution, MockBackend, YesTokenSet};
pub use lexicon::{load_lexicon, Adjective, Lexicon};
pub use model::{ModelDims, ModelParams, Prediction};
pub use prompting::{builtin_templates, PromptTemplate, RenderedPrompt};
pub use training::{train, TrainingConfig, TrainingLog};
