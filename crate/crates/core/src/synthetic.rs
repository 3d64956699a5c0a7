//! Generated corpora paired with keyword-rule mock backends.
//!
//! Labels are functions of the class keywords planted in each text, and the
//! mock backend scores adjectives from the same keywords, so the right answer
//! for every stage of the pipeline is known in advance.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{stratified_holdout, Dataset, Split, TextSample};
use crate::gateway::{KeywordRule, MockBackend};
use crate::lexicon::Lexicon;

pub const KEYWORD_LABELS: [&str; 3] = ["hateful", "counter", "neutral"];

const HATEFUL_WORDS: [&str; 5] = ["vermin", "parasites", "filth", "scum", "trash"];
const COUNTER_WORDS: [&str; 5] = ["respect", "dignity", "solidarity", "welcome", "kindness"];
const NEUTRAL_WORDS: [&str; 5] = ["weather", "recipe", "timetable", "football", "garden"];

const FILLERS: [&str; 24] = [
    "people",
    "today",
    "city",
    "news",
    "market",
    "music",
    "school",
    "family",
    "holiday",
    "evening",
    "neighbours",
    "council",
    "bus",
    "coffee",
    "river",
    "festival",
    "library",
    "office",
    "weekend",
    "parliament",
    "village",
    "concert",
    "bridge",
    "harbour",
];

const KEYWORD_ADJECTIVES: [&str; 30] = [
    "sarcastic",
    "hopeful",
    "angry",
    "calm",
    "insulting",
    "curious",
    "formal",
    "casual",
    "humorous",
    "serious",
    "optimistic",
    "pessimistic",
    "polite",
    "ironic",
    "emotional",
    "nostalgic",
    "enthusiastic",
    "supportive",
    "anxious",
    "confident",
    "playful",
    "thoughtful",
    "critical",
    "friendly",
    "bored",
    "excited",
    "surprised",
    "skeptical",
    "informative",
    "descriptive",
];

/// A generated dataset with its lexicon and the rules of its mock oracle.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub lexicon: Lexicon,
    pub rules: Vec<KeywordRule>,
    /// (label, adjective) pairs whose adjective alone signals the label.
    pub decisive: Vec<(String, String)>,
    pub noise: f64,
    pub noise_seed: u64,
}

impl SyntheticCorpus {
    pub fn backend(&self) -> MockBackend {
        MockBackend::new(self.rules.clone(), self.noise_seed).with_noise(self.noise)
    }

    pub fn decisive_adjective(&self, label: &str) -> Option<&str> {
        self.decisive.iter().find(|(l, _)| l == label).map(|(_, a)| a.as_str())
    }
}

struct Spec<'a> {
    labels: &'a [&'a str],
    keywords: Vec<&'a [&'a str]>,
    /// (word, classes whose texts may contain it, inclusion probability)
    shared: Vec<(&'a str, Vec<usize>, f64)>,
    fillers: &'a [&'a str],
    fillers_per_text: (usize, usize),
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn generate(spec: &Spec, samples: usize, seed: u64, prefix: &str) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.labels.len();
    let mut out = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % n;
        let mut words: Vec<&str> = Vec::new();
        if !spec.keywords[class].is_empty() {
            let k = rng.random_range(1..=2);
            words.extend(spec.keywords[class].choose_multiple(&mut rng, k));
        }
        for (word, classes, p) in &spec.shared {
            if classes.contains(&class) && rng.random_bool(*p) {
                words.push(word);
            }
        }
        let (lo, hi) = spec.fillers_per_text;
        let f = rng.random_range(lo..=hi);
        words.extend(spec.fillers.choose_multiple(&mut rng, f));
        words.shuffle(&mut rng);
        out.push(TextSample {
            id: format!("{prefix}-{i:04}"),
            text: format!("{}.", capitalize(&words.join(" "))),
            context: None,
            label: spec.labels[class].to_string(),
            split: Split::Train,
        });
    }
    // 20% test, then 1/8 of the remainder for validation: 70/10/20.
    let labels: Vec<usize> = (0..samples).map(|i| i % n).collect();
    for i in stratified_holdout(&labels, n, 0.2, seed ^ 0x7e57) {
        out[i].split = Split::Test;
    }
    let rest: Vec<usize> = (0..samples).filter(|&i| out[i].split == Split::Train).collect();
    let rest_labels: Vec<usize> = rest.iter().map(|&i| labels[i]).collect();
    for local in stratified_holdout(&rest_labels, n, 0.125, seed ^ 0x7a11) {
        out[rest[local]].split = Split::Validation;
    }
    Dataset::new(out, Some(spec.labels.iter().map(|s| s.to_string()).collect())).expect("generated corpus is valid")
}

/// Three classes over 30 adjectives. Hateful texts carry slur-like keywords
/// that trigger "insulting"; counter-speech keywords trigger "supportive";
/// neutral texts trigger neither. The 24 filler words each trigger one of the
/// other adjectives and are spread evenly over all classes.
pub fn keyword_corpus(samples: usize, seed: u64) -> SyntheticCorpus {
    let spec = Spec {
        labels: &KEYWORD_LABELS,
        keywords: vec![&HATEFUL_WORDS, &COUNTER_WORDS, &NEUTRAL_WORDS],
        shared: vec![],
        fillers: &FILLERS,
        fillers_per_text: (2, 4),
    };
    let dataset = generate(&spec, samples, seed, "kw");
    let mut rules = Vec::new();
    for w in HATEFUL_WORDS {
        rules.push(KeywordRule::new("insulting", w, 0.92, 0.04));
    }
    for w in COUNTER_WORDS {
        rules.push(KeywordRule::new("supportive", w, 0.9, 0.05));
    }
    let noise_adjectives: Vec<&str> = KEYWORD_ADJECTIVES
        .iter()
        .copied()
        .filter(|a| *a != "insulting" && *a != "supportive")
        .collect();
    for (k, w) in FILLERS.iter().enumerate() {
        let hit = 0.5 + 0.3 * (k % 4) as f64 / 3.0;
        let miss = 0.02 + 0.02 * (k % 5) as f64;
        rules.push(KeywordRule::new(noise_adjectives[k], w, hit, miss));
    }
    SyntheticCorpus {
        dataset,
        lexicon: Lexicon::from_surfaces(&KEYWORD_ADJECTIVES, "en").expect("distinct adjectives"),
        rules,
        decisive: vec![
            ("hateful".into(), "insulting".into()),
            ("counter".into(), "supportive".into()),
        ],
        noise: 0.03,
        noise_seed: seed,
    }
}

const SHARED_ADJECTIVES: [&str; 12] = [
    "hostile",
    "emotional",
    "supportive",
    "serious",
    "hopeful",
    "informative",
    "critical",
    "casual",
    "curious",
    "calm",
    "playful",
    "formal",
];

/// Three classes with one decisive adjective each plus concepts that fire
/// across classes: "emotional" (hateful, counter), "hopeful" (counter,
/// neutral), "critical" (hateful, neutral), and "serious"/"casual" (all).
pub fn shared_concept_corpus(samples: usize, seed: u64) -> SyntheticCorpus {
    let spec = Spec {
        labels: &KEYWORD_LABELS,
        keywords: vec![&HATEFUL_WORDS, &COUNTER_WORDS, &NEUTRAL_WORDS],
        shared: vec![
            ("people", vec![0, 1], 0.85),
            ("future", vec![1, 2], 0.85),
            ("government", vec![0, 2], 0.85),
            ("today", vec![0, 1, 2], 0.7),
            ("really", vec![0, 1, 2], 0.7),
        ],
        fillers: &FILLERS[..8],
        fillers_per_text: (1, 2),
    };
    let dataset = generate(&spec, samples, seed, "sc");
    let mut rules = Vec::new();
    for (adj, words) in [
        ("hostile", &HATEFUL_WORDS),
        ("supportive", &COUNTER_WORDS),
        ("informative", &NEUTRAL_WORDS),
    ] {
        for w in words {
            rules.push(KeywordRule::new(adj, w, 0.9, 0.05));
        }
    }
    for (adj, w) in [
        ("emotional", "people"),
        ("hopeful", "future"),
        ("critical", "government"),
        ("serious", "today"),
        ("casual", "really"),
    ] {
        rules.push(KeywordRule::new(adj, w, 0.85, 0.05));
    }
    for (adj, w) in [
        ("curious", "city"),
        ("calm", "river"),
        ("playful", "music"),
        ("formal", "council"),
    ] {
        rules.push(KeywordRule::new(adj, w, 0.7, 0.05));
    }
    SyntheticCorpus {
        dataset,
        lexicon: Lexicon::from_surfaces(&SHARED_ADJECTIVES, "en").expect("distinct adjectives"),
        rules,
        decisive: vec![
            ("hateful".into(), "hostile".into()),
            ("counter".into(), "supportive".into()),
            ("neutral".into(), "informative".into()),
        ],
        noise: 0.03,
        noise_seed: seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_corpus_shape_and_splits() {
        let c = keyword_corpus(1000, 7);
        assert_eq!(c.dataset.len(), 1000);
        assert_eq!(c.lexicon.len(), 30);
        let test = c.dataset.indices_in(Split::Test).len();
        let val = c.dataset.indices_in(Split::Validation).len();
        assert!((195..=205).contains(&test), "{test}");
        assert!((95..=105).contains(&val), "{val}");
        assert!(c.rules.iter().all(|r| c.lexicon.find(&r.adjective).is_some()));
    }

    #[test]
    fn labels_follow_keywords() {
        let c = keyword_corpus(300, 1);
        for s in c.dataset.samples() {
            let t = s.text.to_lowercase();
            let hateful = HATEFUL_WORDS.iter().any(|w| t.contains(w));
            let counter = COUNTER_WORDS.iter().any(|w| t.contains(w));
            let expected = if hateful {
                "hateful"
            } else if counter {
                "counter"
            } else {
                "neutral"
            };
            assert_eq!(s.label, expected, "{}", s.text);
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(keyword_corpus(50, 3).dataset, keyword_corpus(50, 3).dataset);
        assert_ne!(keyword_corpus(50, 3).dataset, keyword_corpus(50, 4).dataset);
        assert_eq!(
            shared_concept_corpus(40, 2).dataset,
            shared_concept_corpus(40, 2).dataset
        );
    }

    #[test]
    fn decisive_adjective_lookup() {
        let c = keyword_corpus(10, 0);
        assert_eq!(c.decisive_adjective("hateful"), Some("insulting"));
        assert_eq!(c.decisive_adjective("neutral"), None);
        let b = c.backend();
        assert!((b.rule_probability("insulting", "You filth.") - 0.92).abs() < 1e-12);
    }
}
