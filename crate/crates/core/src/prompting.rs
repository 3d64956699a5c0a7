//! Prompt templates for concept scoring.
//!
//! A template is a persona (system text) plus an interaction with `{adjective}`,
//! `{text}` and optionally `{context}` placeholders. Literal braces are written
//! `{{` and `}}`. Rendering yields the full prompt split into a prefix that is
//! identical for every (adjective, sample) pair and a suffix holding the rest,
//! so prefix-caching backends can reuse the shared part.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::TextSample;
use crate::hashing::FieldHasher;
use crate::lexicon::{Adjective, Lexicon};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template mismatch: {0}")]
    TemplateMismatch(String),
    #[error("invalid template file: {0}")]
    InvalidFile(String),
}

/// Persona presets used in the persona sensitivity study. Preset 3 is the
/// empty persona.
pub const PERSONAS: [&str; 9] = [
    "You are an expert in social psychology. When you are asked a question, you prefer to give short, concrete answers.",
    "You are an expert in social psychology.",
    "",
    "You are a linguist.",
    "You are a content moderator.",
    "You are a psychologist.",
    "You are a social media expert.",
    "You are a political scientist.",
    "You are a sociologist.",
];

pub const DEFAULT_PERSONA: &str = PERSONAS[0];

pub const GERMAN_PERSONA: &str = "Sie sind ein Experte für Sozialpsychologie. Wenn Ihnen eine Frage gestellt wird, geben Sie lieber kurze und konkrete Antworten.";

/// Persona preset by 1-based id.
pub fn persona(id: usize) -> Option<&'static str> {
    id.checked_sub(1).and_then(|i| PERSONAS.get(i)).copied()
}

/// How system and user text are framed for a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChatFormat {
    /// System and user roles passed as separate chat messages. The flattened
    /// text is the persona, a blank line, then the interaction.
    #[default]
    Messages,
    /// Plain text, same flattening as `Messages`, for completion endpoints.
    Plain,
    /// `[INST] <<SYS>> ... <</SYS>> ... [/INST]` framing.
    Llama2,
    /// Llama 3 header-token framing, ending at the assistant header.
    Llama3,
}

impl ChatFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            ChatFormat::Messages => "messages",
            ChatFormat::Plain => "plain",
            ChatFormat::Llama2 => "llama2",
            ChatFormat::Llama3 => "llama3",
        }
    }

    /// Literal text before and after the user turn, given the system text.
    fn framing(self, system: &str) -> (String, String) {
        match self {
            ChatFormat::Messages | ChatFormat::Plain => {
                if system.is_empty() {
                    (String::new(), String::new())
                } else {
                    (format!("{system}\n\n"), String::new())
                }
            }
            ChatFormat::Llama2 => {
                if system.is_empty() {
                    ("[INST] ".to_string(), " [/INST]".to_string())
                } else {
                    (
                        format!("[INST] <<SYS>>\n{system}\n<</SYS>>\n\n"),
                        " [/INST]".to_string(),
                    )
                }
            }
            ChatFormat::Llama3 => {
                let mut head = String::from("<|begin_of_text|>");
                if !system.is_empty() {
                    head.push_str("<|start_header_id|>system<|end_header_id|>\n\n");
                    head.push_str(system);
                    head.push_str("<|eot_id|>");
                }
                head.push_str("<|start_header_id|>user<|end_header_id|>\n\n");
                (
                    head,
                    "<|eot_id|><|start_header_id|>assistant<|end_header_id|>\n\n".to_string(),
                )
            }
        }
    }
}

impl fmt::Display for ChatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Adjective,
    Text,
    Context,
    Gloss,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(Slot),
}

fn parse_segments(interaction: &str) -> Result<Vec<Segment>, PromptError> {
    let mut segments = Vec::new();
    let mut lit = String::new();
    let mut chars = interaction.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                lit.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                lit.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) => name.push(ch),
                        None => {
                            return Err(PromptError::TemplateMismatch(format!(
                                "unterminated placeholder {{{name}"
                            )))
                        }
                    }
                }
                let slot = match name.as_str() {
                    "adjective" => Slot::Adjective,
                    "text" => Slot::Text,
                    "context" => Slot::Context,
                    other => {
                        return Err(PromptError::TemplateMismatch(format!(
                            "unresolved placeholder {{{other}}}"
                        )))
                    }
                };
                if !lit.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut lit)));
                }
                segments.push(Segment::Slot(slot));
            }
            '}' => return Err(PromptError::TemplateMismatch("unmatched '}'".into())),
            other => lit.push(other),
        }
    }
    if !lit.is_empty() {
        segments.push(Segment::Literal(lit));
    }
    Ok(segments)
}

fn count_slot(segments: &[Segment], slot: Slot) -> usize {
    segments.iter().filter(|s| **s == Segment::Slot(slot)).count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    style: String,
    language: String,
    persona: String,
    interaction: String,
    chat: ChatFormat,
    use_gloss: bool,
    segments: Vec<Segment>,
}

/// On-disk template description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateFile {
    pub style: String,
    #[serde(default = "default_language")]
    pub language: String,
    #[serde(default)]
    pub persona: String,
    pub interaction: String,
    #[serde(default)]
    pub chat: ChatFormat,
    #[serde(default)]
    pub use_gloss: bool,
}

fn default_language() -> String {
    "en".to_string()
}

impl PromptTemplate {
    pub fn new(style: &str, language: &str, persona: &str, interaction: &str) -> Result<Self, PromptError> {
        let segments = parse_segments(interaction)?;
        for (slot, name) in [(Slot::Adjective, "adjective"), (Slot::Text, "text")] {
            let n = count_slot(&segments, slot);
            if n != 1 {
                return Err(PromptError::TemplateMismatch(format!(
                    "{{{name}}} must appear exactly once, found {n}"
                )));
            }
        }
        if count_slot(&segments, Slot::Context) > 1 {
            return Err(PromptError::TemplateMismatch(
                "{context} may appear at most once".into(),
            ));
        }
        Ok(PromptTemplate {
            style: style.to_string(),
            language: language.to_string(),
            persona: persona.to_string(),
            interaction: interaction.to_string(),
            chat: ChatFormat::default(),
            use_gloss: false,
            segments,
        })
    }

    pub fn from_file_spec(spec: &TemplateFile) -> Result<Self, PromptError> {
        Ok(
            Self::new(&spec.style, &spec.language, &spec.persona, &spec.interaction)?
                .with_chat(spec.chat)
                .with_gloss(spec.use_gloss),
        )
    }

    pub fn to_file_spec(&self) -> TemplateFile {
        TemplateFile {
            style: self.style.clone(),
            language: self.language.clone(),
            persona: self.persona.clone(),
            interaction: self.interaction.clone(),
            chat: self.chat,
            use_gloss: self.use_gloss,
        }
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text =
            fs::read_to_string(path).map_err(|e| PromptError::InvalidFile(format!("{}: {e}", path.display())))?;
        let spec: TemplateFile =
            serde_json::from_str(&text).map_err(|e| PromptError::InvalidFile(format!("{}: {e}", path.display())))?;
        Self::from_file_spec(&spec)
    }

    pub fn with_persona(mut self, persona: &str) -> Self {
        self.persona = persona.to_string();
        self
    }

    pub fn with_chat(mut self, chat: ChatFormat) -> Self {
        self.chat = chat;
        self
    }

    /// Enable the definition-in-prompt variant: when an adjective has a gloss,
    /// a definition line is inserted before the line that asks about it.
    pub fn with_gloss(mut self, use_gloss: bool) -> Self {
        self.use_gloss = use_gloss;
        self
    }

    pub fn style(&self) -> &str {
        &self.style
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn persona(&self) -> &str {
        &self.persona
    }

    pub fn interaction(&self) -> &str {
        &self.interaction
    }

    pub fn chat(&self) -> ChatFormat {
        self.chat
    }

    pub fn use_gloss(&self) -> bool {
        self.use_gloss
    }

    pub fn expects_context(&self) -> bool {
        count_slot(&self.segments, Slot::Context) == 1
    }

    /// Hash over every field, including the chat framing and the gloss flag.
    pub fn fingerprint(&self) -> String {
        let mut h = FieldHasher::new("scbm.template/1");
        h.str(&self.style)
            .str(&self.language)
            .str(&self.persona)
            .str(&self.interaction)
            .str(self.chat.as_str())
            .str(if self.use_gloss { "gloss" } else { "plain" });
        h.finish_hex()
    }

    /// Template fingerprint for a run over `lexicon`. With glosses enabled the
    /// glosses become part of the prompt and are folded in.
    pub fn run_fingerprint(&self, lexicon: &Lexicon) -> String {
        if !self.use_gloss {
            return self.fingerprint();
        }
        let mut h = FieldHasher::new("scbm.template+glosses/1");
        h.str(&self.fingerprint()).str(&lexicon.gloss_fingerprint());
        h.finish_hex()
    }

    /// Check that the template can be used with samples that do (or do not)
    /// carry context.
    pub fn check_context(&self, has_context: bool) -> Result<(), PromptError> {
        match (self.expects_context(), has_context) {
            (true, false) => Err(PromptError::TemplateMismatch(format!(
                "template {:?} expects {{context}} but the sample has none",
                self.style
            ))),
            (false, true) => Err(PromptError::TemplateMismatch(format!(
                "sample carries context but template {:?} has no {{context}} placeholder",
                self.style
            ))),
            _ => Ok(()),
        }
    }

    fn gloss_line(&self) -> Vec<Segment> {
        let lead = match self.language.as_str() {
            "de" => "Definition von \"",
            _ => "Definition of \"",
        };
        vec![
            Segment::Literal(lead.to_string()),
            Segment::Slot(Slot::Adjective),
            Segment::Literal("\": ".to_string()),
            Segment::Slot(Slot::Gloss),
            Segment::Literal("\n".to_string()),
        ]
    }

    /// Interaction segments with the optional definition line spliced in.
    fn effective_segments(&self, with_gloss: bool) -> Vec<Segment> {
        if !with_gloss {
            return self.segments.clone();
        }
        let adj_pos = self
            .segments
            .iter()
            .position(|s| *s == Segment::Slot(Slot::Adjective))
            .expect("validated");
        // Start of the line holding {adjective}.
        let mut out = Vec::new();
        let mut split_at: Option<(usize, usize)> = None;
        for (i, seg) in self.segments[..adj_pos].iter().enumerate().rev() {
            if let Segment::Literal(l) = seg {
                if let Some(nl) = l.rfind('\n') {
                    split_at = Some((i, nl + 1));
                    break;
                }
            }
        }
        match split_at {
            None => {
                out.extend(self.gloss_line());
                out.extend(self.segments.iter().cloned());
            }
            Some((i, byte)) => {
                out.extend(self.segments[..i].iter().cloned());
                let Segment::Literal(l) = &self.segments[i] else {
                    unreachable!()
                };
                out.push(Segment::Literal(l[..byte].to_string()));
                out.extend(self.gloss_line());
                if byte < l.len() {
                    out.push(Segment::Literal(l[byte..].to_string()));
                }
                out.extend(self.segments[i + 1..].iter().cloned());
            }
        }
        out
    }

    /// Instantiate the template for one (adjective, sample) pair.
    pub fn render(&self, adjective: &Adjective, sample: &TextSample) -> Result<RenderedPrompt, PromptError> {
        self.check_context(sample.context.is_some())?;
        let with_gloss = self.use_gloss && adjective.gloss.is_some();
        let segments = self.effective_segments(with_gloss);

        let mut prefix_user = String::new();
        let mut suffix_user = String::new();
        let mut in_suffix = false;
        for seg in &segments {
            let piece = match seg {
                Segment::Literal(l) => l.as_str(),
                Segment::Slot(slot) => {
                    in_suffix = true;
                    match slot {
                        Slot::Adjective => adjective.surface.as_str(),
                        Slot::Text => sample.text.as_str(),
                        Slot::Context => sample.context.as_deref().unwrap_or_default(),
                        Slot::Gloss => adjective.gloss.as_deref().unwrap_or_default(),
                    }
                }
            };
            if in_suffix {
                suffix_user.push_str(piece);
            } else {
                prefix_user.push_str(piece);
            }
        }
        let (head, tail) = self.chat.framing(&self.persona);
        let prefix = format!("{head}{prefix_user}");
        let suffix = format!("{suffix_user}{tail}");
        let full = format!("{prefix}{suffix}");
        Ok(RenderedPrompt {
            prefix,
            suffix,
            full,
            system: self.persona.clone(),
            user: format!("{prefix_user}{suffix_user}"),
            chat: self.chat,
        })
    }

    /// The (adjective, sample)-independent framing that precedes the user turn.
    pub fn framing_head(&self) -> String {
        self.chat.framing(&self.persona).0
    }
}

/// A rendered prompt. `full == prefix + suffix` byte-for-byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub prefix: String,
    pub suffix: String,
    pub full: String,
    /// System-role text (the persona), for chat-message backends.
    pub system: String,
    /// User-role text (the instantiated interaction).
    pub user: String,
    pub chat: ChatFormat,
}

/// Free-function form of [`PromptTemplate::render`] with an explicit gloss flag.
pub fn render(
    template: &PromptTemplate,
    adjective: &Adjective,
    sample: &TextSample,
    use_gloss: bool,
) -> Result<RenderedPrompt, PromptError> {
    if template.use_gloss == use_gloss {
        template.render(adjective, sample)
    } else {
        template.clone().with_gloss(use_gloss).render(adjective, sample)
    }
}

/// Built-in templates keyed by style.
///
/// - `plain_text`: a single text, no context (YouTube-comment style corpora).
/// - `conversation_ab`: a two-person exchange; the context is A's turn.
/// - `context_statement`: a statement made around a given context.
/// - `german_sentence`: German single-sentence template with a German persona.
pub fn builtin_templates() -> BTreeMap<String, PromptTemplate> {
    let defs = [
        (
            "plain_text",
            "en",
            DEFAULT_PERSONA,
            "Tell me if adjective \"{adjective}\" describes the content below: \"{text}\".",
        ),
        (
            "conversation_ab",
            "en",
            DEFAULT_PERSONA,
            "Consider carefully the following conversation between person \"A\" and \"B\".\nA: {context}\nB: {text}\nTell me if the response of B seems to be \"{adjective}\".",
        ),
        (
            "context_statement",
            "en",
            DEFAULT_PERSONA,
            "Consider what a person \"A\" states around a \"CONTEXT\".\nCONTEXT: {context}\n\"A\": {text}\nTell me if the response of \"A\" seems to be \"{adjective}\".",
        ),
        (
            "german_sentence",
            "de",
            GERMAN_PERSONA,
            "Überlege genau und sage mir, ob das Adjektiv \"{adjective}\" den folgenden Satz in irgendeiner Weise beschreibt: \"{text}\".",
        ),
    ];
    defs.into_iter()
        .map(|(style, lang, persona, interaction)| {
            (
                style.to_string(),
                PromptTemplate::new(style, lang, persona, interaction).expect("builtin template is valid"),
            )
        })
        .collect()
}

/// Resolve a template argument: a built-in style name or a JSON file path.
pub fn resolve_template(name_or_path: &str) -> Result<PromptTemplate, PromptError> {
    if let Some(t) = builtin_templates().remove(name_or_path) {
        return Ok(t);
    }
    PromptTemplate::load(Path::new(name_or_path))
}
