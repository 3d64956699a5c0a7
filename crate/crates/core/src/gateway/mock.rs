//! Deterministic in-process backends for tests and the synthetic demo.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, FirstTokenDistribution, GatewayError, QueryRequest, YesTokenSet};
use crate::hashing::FieldHasher;

pub const DEFAULT_MOCK_PROBABILITY: f64 = 0.05;

/// `adjective` scores `hit` when the sample text contains `keyword`
/// (case-insensitive), otherwise `miss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub adjective: String,
    pub keyword: String,
    pub hit: f64,
    pub miss: f64,
}

impl KeywordRule {
    pub fn new(adjective: &str, keyword: &str, hit: f64, miss: f64) -> Self {
        KeywordRule {
            adjective: adjective.to_string(),
            keyword: keyword.to_string(),
            hit,
            miss,
        }
    }
}

/// Keyword-rule oracle. Returns `{"Yes": p, "No": 1 - p}` where `p` is:
///
/// - the largest `hit` among the adjective's rules whose keyword occurs,
/// - else the largest `miss` among the adjective's rules,
/// - else the default probability,
///
/// plus optional seeded jitter of amplitude `noise`, clamped to `[0, 1]`.
#[derive(Debug)]
pub struct MockBackend {
    rules: Vec<KeywordRule>,
    default_probability: f64,
    noise: f64,
    noise_seed: u64,
    model_id: String,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(rules: Vec<KeywordRule>, noise_seed: u64) -> Self {
        MockBackend {
            rules,
            default_probability: DEFAULT_MOCK_PROBABILITY,
            noise: 0.0,
            noise_seed,
            model_id: "mock-keyword".to_string(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_default_probability(mut self, p: f64) -> Self {
        self.default_probability = p;
        self
    }

    pub fn with_noise(mut self, amplitude: f64) -> Self {
        self.noise = amplitude;
        self
    }

    pub fn rules(&self) -> &[KeywordRule] {
        &self.rules
    }

    /// Number of `query` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Rule evaluation without jitter.
    pub fn rule_probability(&self, adjective: &str, text: &str) -> f64 {
        let lowered = text.to_lowercase();
        let adj = adjective.to_lowercase();
        let mut hit: Option<f64> = None;
        let mut miss: Option<f64> = None;
        for r in self.rules.iter().filter(|r| r.adjective.to_lowercase() == adj) {
            if lowered.contains(&r.keyword.to_lowercase()) {
                hit = Some(hit.map_or(r.hit, |h| h.max(r.hit)));
            } else {
                miss = Some(miss.map_or(r.miss, |m| m.max(r.miss)));
            }
        }
        hit.or(miss).unwrap_or(self.default_probability)
    }

    /// Final yes-probability for a pair, jitter included.
    pub fn probability(&self, adjective: &str, text: &str) -> f64 {
        let base = self.rule_probability(adjective, text);
        if self.noise == 0.0 {
            return base;
        }
        let mut h = FieldHasher::new("scbm.mock-noise/1");
        h.field(&self.noise_seed.to_le_bytes()).str(adjective).str(text);
        let digest = h.finish_hex();
        let bits = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
        (base + self.noise * (2.0 * unit - 1.0)).clamp(0.0, 1.0)
    }
}

impl Backend for MockBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn yes_tokens(&self) -> YesTokenSet {
        YesTokenSet::english()
    }

    fn query(&self, request: &QueryRequest) -> Result<FirstTokenDistribution, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let p = self.probability(&request.adjective, &request.text);
        FirstTokenDistribution::from_pairs([("Yes", p), ("No", 1.0 - p)])
    }
}

/// Returns the same distribution for every prompt.
#[derive(Debug, Clone)]
pub struct StaticBackend {
    pub distribution: FirstTokenDistribution,
    pub yes: YesTokenSet,
}

impl Backend for StaticBackend {
    fn model_id(&self) -> &str {
        "static"
    }

    fn yes_tokens(&self) -> YesTokenSet {
        self.yes.clone()
    }

    fn query(&self, _request: &QueryRequest) -> Result<FirstTokenDistribution, GatewayError> {
        Ok(self.distribution.clone())
    }
}

/// Fault-injecting wrapper.
///
/// - `transient_per_key`: the first N attempts for every request key fail
///   with a transient error.
/// - `fail_after`: after this many successful calls in total, every further
///   call fails transiently (simulates a backend going away mid-run).
#[derive(Debug)]
pub struct FlakyBackend<B> {
    inner: B,
    transient_per_key: usize,
    fail_after: Option<usize>,
    attempts: Mutex<HashMap<String, usize>>,
    successes: AtomicUsize,
}

impl<B: Backend> FlakyBackend<B> {
    pub fn new(inner: B) -> Self {
        FlakyBackend {
            inner,
            transient_per_key: 0,
            fail_after: None,
            attempts: Mutex::new(HashMap::new()),
            successes: AtomicUsize::new(0),
        }
    }

    pub fn transient_per_key(mut self, n: usize) -> Self {
        self.transient_per_key = n;
        self
    }

    pub fn fail_after(mut self, n: usize) -> Self {
        self.fail_after = Some(n);
        self
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn successes(&self) -> usize {
        self.successes.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for FlakyBackend<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn yes_tokens(&self) -> YesTokenSet {
        self.inner.yes_tokens()
    }

    fn query(&self, request: &QueryRequest) -> Result<FirstTokenDistribution, GatewayError> {
        if self.transient_per_key > 0 {
            let mut attempts = self.attempts.lock().expect("poisoned");
            let n = attempts.entry(request.key.clone()).or_insert(0);
            *n += 1;
            if *n <= self.transient_per_key {
                return Err(GatewayError::Transient(format!("injected failure #{n}")));
            }
        }
        if let Some(limit) = self.fail_after {
            // Reserve a success slot; give it back if over the limit.
            let prev = self.successes.fetch_add(1, Ordering::SeqCst);
            if prev >= limit {
                self.successes.fetch_sub(1, Ordering::SeqCst);
                return Err(GatewayError::Transient("injected outage".into()));
            }
            return self.inner.query(request);
        }
        let out = self.inner.query(request);
        if out.is_ok() {
            self.successes.fetch_add(1, Ordering::SeqCst);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{first_token_distribution, yes_probability, RetryPolicy};
    use crate::prompting::{ChatFormat, RenderedPrompt};

    fn request(adjective: &str, text: &str) -> QueryRequest {
        let prompt = RenderedPrompt {
            prefix: String::new(),
            suffix: format!("{adjective} {text}"),
            full: format!("{adjective} {text}"),
            system: String::new(),
            user: format!("{adjective} {text}"),
            chat: ChatFormat::Plain,
        };
        QueryRequest::new(prompt, adjective, text, None)
    }

    fn insulting() -> MockBackend {
        MockBackend::new(vec![KeywordRule::new("insulting", "idiot", 0.9, 0.1)], 0)
    }

    #[test]
    fn keyword_rule_evaluation() {
        let b = insulting();
        let d = b.query(&request("insulting", "you idiot")).unwrap();
        assert!((yes_probability(&d, &b.yes_tokens()) - 0.9).abs() < 1e-12);
        let d = b.query(&request("insulting", "have a nice day")).unwrap();
        assert!((yes_probability(&d, &b.yes_tokens()) - 0.1).abs() < 1e-12);
        assert_eq!(b.calls(), 2);
    }

    #[test]
    fn default_probability_without_rule() {
        let b = insulting();
        let d = b.query(&request("supportive", "you idiot")).unwrap();
        assert_eq!(yes_probability(&d, &b.yes_tokens()), DEFAULT_MOCK_PROBABILITY);
        assert_eq!(d.items().len(), 2);
    }

    #[test]
    fn static_backend_passes_through() {
        let dist = FirstTokenDistribution::from_pairs([("Yes", 0.6), ("yes", 0.1), ("No", 0.3)]).unwrap();
        let b = StaticBackend {
            distribution: dist.clone(),
            yes: YesTokenSet::english(),
        };
        let got = b.query(&request("a", "b")).unwrap();
        assert_eq!(got, dist);
        assert!((got.coverage() - 1.0).abs() < 1e-12);
        assert_eq!(
            b.query(&request("a", "b")).unwrap(),
            b.query(&request("c", "d")).unwrap()
        );
    }

    #[test]
    fn noise_is_seeded() {
        let a = insulting().with_noise(0.05);
        let b = insulting().with_noise(0.05);
        let c = MockBackend::new(a.rules().to_vec(), 1).with_noise(0.05);
        let r = request("insulting", "you idiot");
        assert_eq!(a.query(&r).unwrap(), b.query(&r).unwrap());
        assert_ne!(a.query(&r).unwrap(), c.query(&r).unwrap());
        let p = a.probability("insulting", "you idiot");
        assert!((p - 0.9).abs() <= 0.05);
    }

    #[test]
    fn retries_recover_from_transient_failures() {
        let b = FlakyBackend::new(insulting()).transient_per_key(2);
        let d = first_token_distribution(&b, &request("insulting", "idiot"), &RetryPolicy::no_delay(3)).unwrap();
        assert!((yes_probability(&d, &b.yes_tokens()) - 0.9).abs() < 1e-12);

        let b = FlakyBackend::new(insulting()).transient_per_key(3);
        let err = first_token_distribution(&b, &request("insulting", "idiot"), &RetryPolicy::no_delay(3)).unwrap_err();
        assert!(matches!(err, GatewayError::GatewayUnavailable { attempts: 3, .. }));
    }

    #[test]
    fn outage_after_n_successes() {
        let b = FlakyBackend::new(insulting()).fail_after(2);
        assert!(b.query(&request("a", "1")).is_ok());
        assert!(b.query(&request("a", "2")).is_ok());
        assert!(b.query(&request("a", "3")).is_err());
        assert_eq!(b.successes(), 2);
    }
}
