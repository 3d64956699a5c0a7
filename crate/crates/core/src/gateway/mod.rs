//! LLM gateway: first-token distributions and the affirmative-token mass
//! derived from them.
//!
//! A concept score is the total probability the model assigns to starting its
//! answer with a "yes" token. Only the top-k first-token candidates a backend
//! reports are seen; affirmative mass outside them counts as zero.

mod http;
mod mock;

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::hashing::FieldHasher;
use crate::prompting::RenderedPrompt;

pub use http::{parse_logprobs_response, Endpoint, HttpBackend, HttpConfig};
pub use mock::{FlakyBackend, KeywordRule, MockBackend, StaticBackend, DEFAULT_MOCK_PROBABILITY};

const YES_TABLE: &str = include_str!("../../assets/yes_tokens.json");

#[derive(Debug, Clone, thiserror::Error)]
pub enum GatewayError {
    #[error("backend does not return token log-probabilities: {0}")]
    UnsupportedBackend(String),
    #[error("gateway unavailable after {attempts} attempts: {last}")]
    GatewayUnavailable { attempts: u32, last: String },
    #[error("protocol error: {0}")]
    ProtocolError(String),
    /// Retryable transport failure. Surfaces to callers only through
    /// [`GatewayError::GatewayUnavailable`] once retries are exhausted.
    #[error("transient failure: {0}")]
    Transient(String),
}

/// Normalize a token string for yes-set matching: drop leading whitespace,
/// word-boundary markers (`▁`, `Ġ`) and punctuation, trim trailing whitespace,
/// and case-fold.
pub fn normalize_token(token: &str) -> String {
    token
        .trim_start_matches(|c: char| !c.is_alphanumeric() || c == 'Ġ')
        .trim_end()
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YesTokenSet {
    model_id: String,
    entries: BTreeSet<String>,
    token_ids: BTreeSet<u32>,
}

#[derive(Deserialize)]
struct YesTable {
    models: Vec<YesTableModel>,
}

#[derive(Deserialize)]
struct YesTableModel {
    model_id: String,
    #[serde(rename = "match")]
    patterns: Vec<String>,
    tokens: Vec<YesTableToken>,
}

#[derive(Deserialize)]
struct YesTableToken {
    id: u32,
    text: String,
}

impl YesTokenSet {
    /// Build a set from raw token strings. Returns `None` if no entry survives
    /// normalization.
    pub fn new<S: AsRef<str>>(model_id: &str, tokens: &[S]) -> Option<Self> {
        let entries: BTreeSet<String> = tokens
            .iter()
            .map(|t| normalize_token(t.as_ref()))
            .filter(|t| !t.is_empty())
            .collect();
        if entries.is_empty() {
            return None;
        }
        Some(YesTokenSet {
            model_id: model_id.to_string(),
            entries,
            token_ids: BTreeSet::new(),
        })
    }

    pub fn with_ids(mut self, ids: impl IntoIterator<Item = u32>) -> Self {
        self.token_ids.extend(ids);
        self
    }

    /// English affirmatives, used when no model table applies.
    pub fn english() -> Self {
        Self::new("generic-en", &["yes"]).expect("non-empty")
    }

    /// English and German affirmatives.
    pub fn bilingual() -> Self {
        Self::new("generic", &["yes", "ja"]).expect("non-empty")
    }

    /// Shipped table for a model. Accepts canonical ids (`llama-2-7b`,
    /// `leolm-7b`, `llama-3.1-8b`) or any id containing one of their match
    /// patterns, case-insensitively (e.g. `meta-llama/Llama-3.1-8B-Instruct`).
    pub fn for_model(model_id: &str) -> Option<Self> {
        let table: YesTable = serde_json::from_str(YES_TABLE).expect("yes-token table parses");
        let lowered = model_id.to_lowercase();
        table
            .models
            .into_iter()
            .find(|m| m.model_id == lowered || m.patterns.iter().any(|p| lowered.contains(p.as_str())))
            .map(|m| {
                let texts: Vec<&str> = m.tokens.iter().map(|t| t.text.as_str()).collect();
                Self::new(&m.model_id, &texts)
                    .expect("table entries are non-empty")
                    .with_ids(m.tokens.iter().map(|t| t.id))
            })
    }

    /// Raw (unnormalized) token strings listed for a model in the shipped table.
    pub fn table_strings(model_id: &str) -> Option<Vec<String>> {
        let table: YesTable = serde_json::from_str(YES_TABLE).expect("yes-token table parses");
        table
            .models
            .into_iter()
            .find(|m| m.model_id == model_id)
            .map(|m| m.tokens.into_iter().map(|t| t.text).collect())
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn entries(&self) -> &BTreeSet<String> {
        &self.entries
    }

    pub fn matches(&self, token: &str, id: Option<u32>) -> bool {
        if let Some(id) = id {
            if self.token_ids.contains(&id) {
                return true;
            }
        }
        self.entries.contains(&normalize_token(token))
    }

    pub fn fingerprint(&self) -> String {
        let mut h = FieldHasher::new("scbm.yes-tokens/1");
        for e in &self.entries {
            h.str(e);
        }
        for id in &self.token_ids {
            h.field(&id.to_le_bytes());
        }
        h.finish_hex()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
    pub prob: f64,
}

/// Top-k candidates for the first generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstTokenDistribution {
    items: Vec<TokenProb>,
}

impl FirstTokenDistribution {
    pub fn new(items: Vec<TokenProb>) -> Result<Self, GatewayError> {
        if items.is_empty() {
            return Err(GatewayError::ProtocolError("empty token distribution".into()));
        }
        for it in &items {
            if !it.prob.is_finite() || !(0.0..=1.0).contains(&it.prob) {
                return Err(GatewayError::ProtocolError(format!(
                    "probability {} for token {:?} outside [0, 1]",
                    it.prob, it.token
                )));
            }
        }
        let dist = FirstTokenDistribution { items };
        if dist.coverage() > 1.0 + 1e-9 {
            return Err(GatewayError::ProtocolError(format!(
                "probabilities sum to {} > 1",
                dist.coverage()
            )));
        }
        Ok(dist)
    }

    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Result<Self, GatewayError> {
        Self::new(
            pairs
                .into_iter()
                .map(|(t, p)| TokenProb {
                    token: t.into(),
                    id: None,
                    prob: p,
                })
                .collect(),
        )
    }

    /// From `(token, natural-log probability)` pairs.
    pub fn from_logprobs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Result<Self, GatewayError> {
        Self::from_pairs(pairs.into_iter().map(|(t, lp)| (t, lp.exp())))
    }

    pub fn items(&self) -> &[TokenProb] {
        &self.items
    }

    /// Total probability mass of the listed candidates.
    pub fn coverage(&self) -> f64 {
        self.items.iter().map(|t| t.prob).sum()
    }
}

/// Affirmative first-token mass: the summed probability of listed candidates
/// in the yes-set.
pub fn yes_probability(dist: &FirstTokenDistribution, yes_set: &YesTokenSet) -> f64 {
    let p: f64 = dist
        .items
        .iter()
        .filter(|t| yes_set.matches(&t.token, t.id))
        .map(|t| t.prob)
        .sum();
    p.clamp(0.0, 1.0)
}

/// One scoring query: the rendered prompt plus the structured inputs it was
/// rendered from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub key: String,
    pub prompt: RenderedPrompt,
    pub adjective: String,
    pub text: String,
    pub context: Option<String>,
}

impl QueryRequest {
    pub fn new(prompt: RenderedPrompt, adjective: &str, text: &str, context: Option<&str>) -> Self {
        let mut h = FieldHasher::new("scbm.query/1");
        h.str(prompt.chat.as_str()).str(&prompt.system).str(&prompt.full);
        QueryRequest {
            key: h.finish_hex(),
            prompt,
            adjective: adjective.to_string(),
            text: text.to_string(),
            context: context.map(str::to_string),
        }
    }
}

/// A source of first-token distributions. Implementations must tolerate
/// concurrent calls.
pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;

    /// Affirmative tokens for this backend's model.
    fn yes_tokens(&self) -> YesTokenSet;

    /// One attempt. Retryable failures are reported as
    /// [`GatewayError::Transient`].
    fn query(&self, request: &QueryRequest) -> Result<FirstTokenDistribution, GatewayError>;

    /// Description of the framing applied to prompts, for run metadata.
    fn describe(&self) -> String {
        self.model_id().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 250,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Query a backend, retrying transient failures with exponential backoff.
pub fn first_token_distribution(
    backend: &dyn Backend,
    request: &QueryRequest,
    retry: &RetryPolicy,
) -> Result<FirstTokenDistribution, GatewayError> {
    let attempts = retry.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=attempts {
        match backend.query(request) {
            Ok(dist) => return Ok(dist),
            Err(GatewayError::Transient(msg)) => {
                log::debug!(
                    "transient failure for {} (attempt {attempt}): {msg}",
                    &request.key[..12]
                );
                last = msg;
                if attempt < attempts {
                    std::thread::sleep(retry.delay(attempt));
                }
            }
            Err(other) => return Err(other),
        }
    }
    Err(GatewayError::GatewayUnavailable { attempts, last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(pairs: &[(&str, f64)]) -> FirstTokenDistribution {
        FirstTokenDistribution::from_pairs(pairs.iter().map(|(t, p)| (*t, *p))).unwrap()
    }

    #[test]
    fn sums_affirmative_variants() {
        let d = dist(&[("Yes", 0.6), ("yes", 0.1), ("No", 0.3)]);
        let set = YesTokenSet::new("m", &["Yes", "yes", "YES"]).unwrap();
        // Oracle: enumerate and sum.
        let oracle: f64 = [0.6, 0.1].iter().sum();
        assert!((yes_probability(&d, &set) - oracle).abs() < 1e-15);
        assert!((d.coverage() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_affirmative_tokens() {
        let d = dist(&[("No", 0.8), ("Maybe", 0.1)]);
        assert_eq!(yes_probability(&d, &YesTokenSet::english()), 0.0);
    }

    #[test]
    fn llama2_table_normalizes_to_bare_forms() {
        let raw = YesTokenSet::table_strings("llama-2-7b").unwrap();
        assert_eq!(raw.len(), 6);
        let set = YesTokenSet::for_model("meta-llama/Llama-2-7b-chat-hf").unwrap();
        assert_eq!(set.model_id(), "llama-2-7b");
        for t in &raw {
            assert!(set.matches(t, None), "{t}");
        }
        for t in ["_Yes", "\\_yes", " YES", "▁Ye"] {
            assert!(set.matches(t, None), "{t}");
        }
        assert!(set.matches("whatever", Some(3869)));
        assert!(!set.matches("No", None));
        assert_eq!(set.entries().iter().cloned().collect::<Vec<_>>(), ["ye", "yes"]);
    }

    #[test]
    fn llama3_and_leolm_tables() {
        let l3 = YesTokenSet::for_model("meta-llama/Llama-3.1-8B-Instruct").unwrap();
        for t in [":YES", ".Yes", ",Yes", "JA", " yes"] {
            assert!(l3.matches(t, None));
        }
        assert_eq!(YesTokenSet::table_strings("llama-3.1-8b").unwrap().len(), 13);
        let leo = YesTokenSet::for_model("LeoLM/leo-hessianai-7b-chat").unwrap();
        assert!(leo.matches("▁Ja", None));
        assert!(!leo.matches("Yes", None));
        assert!(YesTokenSet::for_model("gpt-4o").is_none());
    }

    #[test]
    fn normalization_is_idempotent() {
        for t in ["_Yes", " Yes", "YES", "▁Yes", "ĠYes"] {
            assert_eq!(normalize_token(t), "yes");
            assert_eq!(normalize_token(&normalize_token(t)), "yes");
        }
    }

    #[test]
    fn rejects_invalid_distributions() {
        assert!(FirstTokenDistribution::from_pairs([("a", 0.7), ("b", 0.7)]).is_err());
        assert!(FirstTokenDistribution::from_pairs([("a", -0.1)]).is_err());
        assert!(FirstTokenDistribution::from_pairs([("a", f64::NAN)]).is_err());
        assert!(FirstTokenDistribution::from_pairs(Vec::<(&str, f64)>::new()).is_err());
    }

    #[test]
    fn logprob_coverage() {
        let lps = [0.5f64, 0.2, 0.1, 0.08, 0.05].map(|p| p.ln());
        let d = FirstTokenDistribution::from_logprobs(lps.iter().enumerate().map(|(i, lp)| (format!("t{i}"), *lp)))
            .unwrap();
        assert!((d.coverage() - 0.93).abs() < 1e-12);
    }

    #[test]
    fn retry_delays_grow() {
        let r = RetryPolicy::default();
        assert_eq!(r.delay(1), Duration::from_millis(250));
        assert_eq!(r.delay(2), Duration::from_millis(500));
        assert_eq!(r.delay(3), Duration::from_millis(1000));
        assert_eq!(r.delay(30), Duration::from_millis(8000));
    }

    proptest! {
        #[test]
        fn bounded_and_monotone(
            probs in proptest::collection::vec(0.0f64..1.0, 1..10),
            extra in 0.0f64..1.0,
            yes_mask in proptest::collection::vec(any::<bool>(), 10),
        ) {
            let total: f64 = probs.iter().sum::<f64>() + extra;
            let scale = if total > 1.0 { 1.0 / total } else { 1.0 };
            let items: Vec<(String, f64)> = probs
                .iter()
                .enumerate()
                .map(|(i, p)| (if yes_mask[i] { format!(" Yes{}", "") } else { format!("no{i}") }, p * scale))
                .collect();
            let set = YesTokenSet::english();
            let d = FirstTokenDistribution::from_pairs(items.clone()).unwrap();
            let p = yes_probability(&d, &set);
            prop_assert!(p <= d.coverage() + 1e-12);
            prop_assert!(d.coverage() <= 1.0 + 1e-9);
            let mut more = items;
            more.push(("YES".to_string(), extra * scale));
            let d2 = FirstTokenDistribution::from_pairs(more).unwrap();
            prop_assert!(yes_probability(&d2, &set) >= p);
        }
    }
}
