//! Adjective lexicon: the concept set that fixes the bottleneck width and the
//! column order of every concept matrix.
//!
//! File format: UTF-8 text, one adjective per line, optionally followed by a
//! TAB and a gloss. Blank lines and lines starting with `#` are ignored.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::hashing::FieldHasher;

/// English rendering of the curated hate/counter speech lexicon.
pub const BUILTIN_EN: &str = include_str!("../assets/lexicon_en.txt");
/// German rendering of the same lexicon, row-aligned with [`BUILTIN_EN`].
pub const BUILTIN_DE: &str = include_str!("../assets/lexicon_de.txt");

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("lexicon contains no adjectives")]
    EmptyLexicon,
    #[error("duplicate adjective {0:?}")]
    DuplicateAdjective(String),
    #[error("lexicon is not valid UTF-8: {0}")]
    DecodeError(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjective {
    pub index: usize,
    pub surface: String,
    pub gloss: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    adjectives: Vec<Adjective>,
    language: String,
    fingerprint: String,
}

/// Case-folded, whitespace-collapsed key used for uniqueness.
fn normalized_key(surface: &str) -> String {
    surface.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl Lexicon {
    /// Build a lexicon from `(surface, gloss)` pairs in order.
    pub fn from_entries<I, S>(entries: I, language: &str) -> Result<Self, LexiconError>
    where
        I: IntoIterator<Item = (S, Option<String>)>,
        S: AsRef<str>,
    {
        let mut seen: HashMap<String, ()> = HashMap::new();
        let mut adjectives = Vec::new();
        for (surface, gloss) in entries {
            let surface = surface.as_ref().trim();
            if surface.is_empty() {
                continue;
            }
            if seen.insert(normalized_key(surface), ()).is_some() {
                return Err(LexiconError::DuplicateAdjective(surface.to_string()));
            }
            let gloss = gloss.map(|g| g.trim().to_string()).filter(|g| !g.is_empty());
            adjectives.push(Adjective {
                index: adjectives.len(),
                surface: surface.to_string(),
                gloss,
            });
        }
        if adjectives.is_empty() {
            return Err(LexiconError::EmptyLexicon);
        }
        let fingerprint = surface_fingerprint(adjectives.iter().map(|a| a.surface.as_str()));
        Ok(Lexicon {
            adjectives,
            language: language.to_string(),
            fingerprint,
        })
    }

    pub fn from_surfaces<S: AsRef<str>>(surfaces: &[S], language: &str) -> Result<Self, LexiconError> {
        Self::from_entries(surfaces.iter().map(|s| (s.as_ref(), None)), language)
    }

    pub fn parse(text: &str, language: &str) -> Result<Self, LexiconError> {
        let entries = text.lines().filter_map(|line| {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                return None;
            }
            Some(match line.split_once('\t') {
                Some((surface, gloss)) => (surface.to_string(), Some(gloss.to_string())),
                None => (line.to_string(), None),
            })
        });
        Self::from_entries(entries, language)
    }

    /// The shipped lexicon for `language` (`"en"` or `"de"`).
    pub fn builtin(language: &str) -> Option<Self> {
        let text = match language {
            "en" => BUILTIN_EN,
            "de" => BUILTIN_DE,
            _ => return None,
        };
        Some(Self::parse(text, language).expect("builtin lexicon is valid"))
    }

    /// Serialize back into the line format.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for adj in &self.adjectives {
            out.push_str(&adj.surface);
            if let Some(g) = &adj.gloss {
                out.push('\t');
                out.push_str(g);
            }
            out.push('\n');
        }
        out
    }

    /// Keep only the given columns, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, LexiconError> {
        Self::from_entries(
            indices
                .iter()
                .map(|&i| (self.adjectives[i].surface.as_str(), self.adjectives[i].gloss.clone())),
            &self.language,
        )
    }

    pub fn adjectives(&self) -> &[Adjective] {
        &self.adjectives
    }

    pub fn get(&self, index: usize) -> Option<&Adjective> {
        self.adjectives.get(index)
    }

    pub fn find(&self, surface: &str) -> Option<&Adjective> {
        let key = normalized_key(surface);
        self.adjectives.iter().find(|a| normalized_key(&a.surface) == key)
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.adjectives.iter().map(|a| a.surface.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.adjectives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjectives.is_empty()
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Hash that additionally covers glosses. Used when prompts include
    /// adjective definitions.
    pub fn gloss_fingerprint(&self) -> String {
        let mut h = FieldHasher::new("scbm.lexicon.glosses/1");
        for adj in &self.adjectives {
            h.str(&adj.surface).str(adj.gloss.as_deref().unwrap_or(""));
        }
        h.finish_hex()
    }
}

/// Fingerprint over the ordered surface sequence only.
pub fn fingerprint(lexicon: &Lexicon) -> String {
    lexicon.fingerprint.clone()
}

fn surface_fingerprint<'a>(surfaces: impl Iterator<Item = &'a str>) -> String {
    let mut h = FieldHasher::new("scbm.lexicon/1");
    for s in surfaces {
        h.str(s);
    }
    h.finish_hex()
}

pub fn load_lexicon(path: &Path, language: &str) -> Result<Lexicon, LexiconError> {
    let bytes = fs::read(path).map_err(|source| LexiconError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| LexiconError::DecodeError(e.to_string()))?;
    Lexicon::parse(&text, language)
}
