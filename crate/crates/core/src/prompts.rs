//! Prompt templates, stored as text assets under `prompts/`.
//!
//! Placeholders are `{name}` with an identifier name. Rendering is a single
//! pass over the template: substituted values are never re-scanned, so a
//! tweet containing braces renders verbatim.

use std::collections::BTreeSet;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    FinetuneSystem,
    ZeroShotSystem,
    ZeroShotUser,
    FewShotAssistant,
    ZseSystem,
    ZseCorrectionSystem,
    ZseUser,
    MiawfSystem,
    BinarySystem,
    NeutralCheckSystem,
    PickSystem,
}

impl TemplateId {
    pub const ALL: [TemplateId; 11] = [
        TemplateId::FinetuneSystem,
        TemplateId::ZeroShotSystem,
        TemplateId::ZeroShotUser,
        TemplateId::FewShotAssistant,
        TemplateId::ZseSystem,
        TemplateId::ZseCorrectionSystem,
        TemplateId::ZseUser,
        TemplateId::MiawfSystem,
        TemplateId::BinarySystem,
        TemplateId::NeutralCheckSystem,
        TemplateId::PickSystem,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::FinetuneSystem => "finetune_system.txt",
            TemplateId::ZeroShotSystem => "zero_shot_system.txt",
            TemplateId::ZeroShotUser => "zero_shot_user.txt",
            TemplateId::FewShotAssistant => "few_shot_assistant.txt",
            TemplateId::ZseSystem => "zse_system.txt",
            TemplateId::ZseCorrectionSystem => "zse_correction_system.txt",
            TemplateId::ZseUser => "zse_user.txt",
            TemplateId::MiawfSystem => "miawf_system.txt",
            TemplateId::BinarySystem => "mbcawf_binary_system.txt",
            TemplateId::NeutralCheckSystem => "mbcawf_neutral_check_system.txt",
            TemplateId::PickSystem => "mbcawf_pick_system.txt",
        }
    }

    fn source(self) -> &'static str {
        match self {
            TemplateId::FinetuneSystem => include_str!("../prompts/finetune_system.txt"),
            TemplateId::ZeroShotSystem => include_str!("../prompts/zero_shot_system.txt"),
            TemplateId::ZeroShotUser => include_str!("../prompts/zero_shot_user.txt"),
            TemplateId::FewShotAssistant => include_str!("../prompts/few_shot_assistant.txt"),
            TemplateId::ZseSystem => include_str!("../prompts/zse_system.txt"),
            TemplateId::ZseCorrectionSystem => include_str!("../prompts/zse_correction_system.txt"),
            TemplateId::ZseUser => include_str!("../prompts/zse_user.txt"),
            TemplateId::MiawfSystem => include_str!("../prompts/miawf_system.txt"),
            TemplateId::BinarySystem => include_str!("../prompts/mbcawf_binary_system.txt"),
            TemplateId::NeutralCheckSystem => include_str!("../prompts/mbcawf_neutral_check_system.txt"),
            TemplateId::PickSystem => include_str!("../prompts/mbcawf_pick_system.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name().trim_end_matches(".txt"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template {template}: unbound placeholder {{{name}}}")]
    Unbound { template: TemplateId, name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn segments(text: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_ident(&after[..close]) => {
                if open > 0 {
                    out.push(Segment::Literal(&rest[..open]));
                }
                out.push(Segment::Placeholder(&after[..close]));
                rest = &after[close + 1..];
            }
            _ => {
                out.push(Segment::Literal(&rest[..open + 1]));
                rest = after;
            }
        }
    }
    if !rest.is_empty() {
        out.push(Segment::Literal(rest));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub text: &'static str,
}

impl PromptTemplate {
    pub fn get(id: TemplateId) -> Self {
        PromptTemplate {
            id,
            text: id.source(),
        }
    }

    pub fn placeholders(&self) -> BTreeSet<&'static str> {
        segments(self.text)
            .into_iter()
            .filter_map(|s| match s {
                Segment::Placeholder(p) => Some(p),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    /// Substitutes every placeholder from `vars`. Extra bindings are ignored.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len() + 64);
        for seg in segments(self.text) {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Placeholder(name) => {
                    let value = vars
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::Unbound {
                            template: self.id,
                            name: name.to_string(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// Shorthand for `PromptTemplate::get(id).render(vars)`.
pub fn render(id: TemplateId, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
    PromptTemplate::get(id).render(vars)
}

/// SHA-256 over every template (file name, NUL, text, NUL), for manifests.
pub fn templates_checksum() -> String {
    let mut h = Sha256::new();
    for id in TemplateId::ALL {
        h.update(id.file_name().as_bytes());
        h.update([0]);
        h.update(id.source().as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn required_placeholders() {
        let set = |id| PromptTemplate::get(id).placeholders().into_iter().collect::<Vec<_>>();
        assert_eq!(set(TemplateId::FinetuneSystem), Vec::<&str>::new());
        assert_eq!(set(TemplateId::ZeroShotUser), vec!["tweet_text"]);
        assert_eq!(set(TemplateId::FewShotAssistant), vec!["label"]);
        assert_eq!(set(TemplateId::ZseCorrectionSystem), vec!["emotion"]);
        assert_eq!(set(TemplateId::ZseUser), vec!["tweet"]);
        assert_eq!(set(TemplateId::MiawfSystem), vec!["emotion1", "emotion2"]);
        assert_eq!(set(TemplateId::BinarySystem), vec!["emotion"]);
        assert_eq!(set(TemplateId::NeutralCheckSystem), vec!["emotions"]);
        assert_eq!(set(TemplateId::PickSystem), vec!["emotions"]);
    }

    #[test]
    fn unbound_placeholder_fails() {
        let err = render(TemplateId::ZseUser, &[("tweet_text", "x")]).unwrap_err();
        assert_eq!(
            err,
            TemplateError::Unbound {
                template: TemplateId::ZseUser,
                name: "tweet".into()
            }
        );
    }

    #[test]
    fn values_are_not_rescanned() {
        let out = render(TemplateId::ZseUser, &[("tweet", "{emotion} {tweet} }{")]).unwrap();
        assert_eq!(out, "What is the emotion label of this tweet '{emotion} {tweet} }{'?");
    }

    #[test]
    fn every_template_renders_without_residual_placeholders() {
        let vars = [
            ("tweet_text", "t"),
            ("tweet", "t"),
            ("label", "Joy"),
            ("emotion", "Joy"),
            ("emotions", "Joy, Anger"),
            ("emotion1", "Joy"),
            ("emotion2", "Anger"),
        ];
        for id in TemplateId::ALL {
            let out = render(id, &vars).unwrap();
            assert!(!out.contains('{') && !out.contains('}'), "{id}: {out}");
        }
    }

    #[test]
    fn segment_parser_keeps_non_identifier_braces() {
        assert_eq!(
            segments("a {b} {not one} {}"),
            vec![
                Segment::Literal("a "),
                Segment::Placeholder("b"),
                Segment::Literal(" {"),
                Segment::Literal("not one} {"),
                Segment::Literal("}"),
            ]
        );
    }

    #[test]
    fn checksum_is_stable_hex() {
        assert_eq!(templates_checksum(), templates_checksum());
        assert_eq!(templates_checksum().len(), 64);
    }
}
