//! Label vocabulary, instance/prediction records and model-output parsing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One of the six emotion classes. No other value can be constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmotionLabel {
    Love,
    Joy,
    Anger,
    Fear,
    Sadness,
    Neutral,
}

impl EmotionLabel {
    /// All labels in canonical order.
    pub const ALL: [EmotionLabel; 6] = [
        EmotionLabel::Love,
        EmotionLabel::Joy,
        EmotionLabel::Anger,
        EmotionLabel::Fear,
        EmotionLabel::Sadness,
        EmotionLabel::Neutral,
    ];

    /// The five non-neutral labels, in canonical order.
    pub const NON_NEUTRAL: [EmotionLabel; 5] = [
        EmotionLabel::Love,
        EmotionLabel::Joy,
        EmotionLabel::Anger,
        EmotionLabel::Fear,
        EmotionLabel::Sadness,
    ];

    pub fn canonical_text(self) -> &'static str {
        match self {
            EmotionLabel::Love => "Love",
            EmotionLabel::Joy => "Joy",
            EmotionLabel::Anger => "Anger",
            EmotionLabel::Fear => "Fear",
            EmotionLabel::Sadness => "Sadness",
            EmotionLabel::Neutral => "Neutral",
        }
    }

    /// Position in canonical order (0..6).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<EmotionLabel> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_text())
    }
}

impl FromStr for EmotionLabel {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_label(s)
    }
}

/// Joins labels as `Love, Joy, Anger` for prompt rendering.
pub fn join_labels(labels: &[EmotionLabel]) -> String {
    labels
        .iter()
        .map(|l| l.canonical_text())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unrecognized label: {0:?}")]
    UnrecognizedLabel(String),
    #[error("missing '||' separator in output: {0:?}")]
    MissingSeparator(String),
    #[error("expected yes/no, got {0:?}")]
    UnrecognizedBinary(String),
}

// Terminal characters stripped before matching. Internal punctuation is kept.
const TERMINAL_PUNCT: &[char] = &[
    '.', '!', '?', ',', ';', ':', '"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}',
];

fn normalize(raw: &str) -> &str {
    raw.trim_matches(|c: char| c.is_whitespace() || TERMINAL_PUNCT.contains(&c))
}

/// Parses a bare label, ignoring case, surrounding whitespace, quotes and
/// terminal punctuation.
pub fn parse_label(raw: &str) -> Result<EmotionLabel, ParseError> {
    let norm = normalize(raw);
    EmotionLabel::ALL
        .into_iter()
        .find(|l| l.canonical_text().eq_ignore_ascii_case(norm))
        .ok_or_else(|| ParseError::UnrecognizedLabel(raw.to_string()))
}

/// Splits an `explanation || label` output at the last `||`.
pub fn parse_explained_output(raw: &str) -> Result<(String, EmotionLabel), ParseError> {
    let (expl, label) = raw
        .rsplit_once("||")
        .ok_or_else(|| ParseError::MissingSeparator(raw.to_string()))?;
    let label = parse_label(label)?;
    Ok((expl.trim().to_string(), label))
}

pub fn parse_yes_no(raw: &str) -> Result<bool, ParseError> {
    let norm = normalize(raw);
    if norm.eq_ignore_ascii_case("yes") {
        Ok(true)
    } else if norm.eq_ignore_ascii_case("no") {
        Ok(false)
    } else {
        Err(ParseError::UnrecognizedBinary(raw.to_string()))
    }
}

/// Names a strategy+backend combination, e.g. `zsec-gpt4o`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelId(String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("model id must be non-empty")]
pub struct EmptyModelId;

impl ModelId {
    pub fn new(id: impl Into<String>) -> Result<Self, EmptyModelId> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(EmptyModelId);
        }
        Ok(ModelId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ModelId {
    type Error = EmptyModelId;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        ModelId::new(s)
    }
}

impl From<ModelId> for String {
    fn from(m: ModelId) -> String {
        m.0
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub language: Option<String>,
    pub gold: Option<EmotionLabel>,
}

impl Instance {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Instance {
            id: id.into(),
            text: text.into(),
            language: None,
            gold: None,
        }
    }

    pub fn with_gold(mut self, gold: EmotionLabel) -> Self {
        self.gold = Some(gold);
        self
    }
}

/// A model's labeled output for one instance.
///
/// Construct through [`Prediction::labeled`] or [`Prediction::fallback`];
/// a prediction with `fallback_applied` always carries `Neutral`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub label: EmotionLabel,
    pub explanation: Option<String>,
    pub model_id: ModelId,
    pub raw_output: String,
    fallback_applied: bool,
}

impl Prediction {
    pub fn labeled(
        instance_id: impl Into<String>,
        label: EmotionLabel,
        model_id: ModelId,
        raw_output: impl Into<String>,
    ) -> Self {
        Prediction {
            instance_id: instance_id.into(),
            label,
            explanation: None,
            model_id,
            raw_output: raw_output.into(),
            fallback_applied: false,
        }
    }

    /// The malformed-output replacement: Neutral, flagged.
    pub fn fallback(
        instance_id: impl Into<String>,
        model_id: ModelId,
        raw_output: impl Into<String>,
    ) -> Self {
        Prediction {
            fallback_applied: true,
            ..Prediction::labeled(instance_id, EmotionLabel::Neutral, model_id, raw_output)
        }
    }

    pub fn with_explanation(mut self, explanation: impl Into<String>) -> Self {
        let e = explanation.into();
        self.explanation = if e.is_empty() { None } else { Some(e) };
        self
    }

    pub fn fallback_applied(&self) -> bool {
        self.fallback_applied
    }
}
