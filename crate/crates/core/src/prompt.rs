//! Prompt rendering from plain-text templates.
//!
//! A template is free text containing each of `{instruction}`, `{exemplar}`,
//! `{dialogue}`, `{terms}` and `{relation_definitions}` exactly once.
//! Substitution is a single pass, so values that happen to contain
//! placeholder syntax are inserted verbatim.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::triplet::{canonical_term, MatchMode, RelationType};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template is missing the {{{0}}} placeholder")]
    MissingPlaceholder(&'static str),
    #[error("template repeats the {{{0}}} placeholder")]
    DuplicatePlaceholder(&'static str),
    #[error("term list is empty")]
    EmptyTerms,
    #[error("exemplar relation {0} uses a term missing from the exemplar term list")]
    ExemplarInconsistent(String),
    #[error("cannot read template {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placeholder {
    Instruction,
    Exemplar,
    Dialogue,
    Terms,
    RelationDefinitions,
}

impl Placeholder {
    pub const ALL: [Placeholder; 5] = [
        Placeholder::Instruction,
        Placeholder::Exemplar,
        Placeholder::Dialogue,
        Placeholder::Terms,
        Placeholder::RelationDefinitions,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Instruction => "instruction",
            Placeholder::Exemplar => "exemplar",
            Placeholder::Dialogue => "dialogue",
            Placeholder::Terms => "terms",
            Placeholder::RelationDefinitions => "relation_definitions",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    #[default]
    PerType,
    Joint,
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-type" | "per_type" => Ok(Self::PerType),
            "joint" => Ok(Self::Joint),
            _ => Err(format!("unknown prompt mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Placeholder),
}

pub const DEFAULT_TEMPLATE: &str = "\
{instruction}
Relations:
{relation_definitions}
{exemplar}
Dialogue:
{dialogue}
Terms:
{terms}
Answer:
";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pieces: Vec<Piece>,
    pub mode: PromptMode,
}

impl PromptTemplate {
    pub fn parse(text: &str, mode: PromptMode) -> Result<Self, PromptError> {
        let mut pieces = Vec::new();
        let mut rest = text;
        let mut literal = String::new();
        let mut seen = Vec::new();
        while let Some(start) = rest.find('{') {
            literal.push_str(&rest[..start]);
            let after = &rest[start..];
            let hit = Placeholder::ALL
                .into_iter()
                .find(|p| after[1..].starts_with(p.name()) && after[1 + p.name().len()..].starts_with('}'));
            match hit {
                Some(p) => {
                    if seen.contains(&p) {
                        return Err(PromptError::DuplicatePlaceholder(p.name()));
                    }
                    seen.push(p);
                    if !literal.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut literal)));
                    }
                    pieces.push(Piece::Slot(p));
                    rest = &after[p.name().len() + 2..];
                }
                None => {
                    literal.push('{');
                    rest = &after[1..];
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            pieces.push(Piece::Text(literal));
        }
        if let Some(p) = Placeholder::ALL.into_iter().find(|p| !seen.contains(p)) {
            return Err(PromptError::MissingPlaceholder(p.name()));
        }
        Ok(Self { pieces, mode })
    }

    pub fn load(path: &Path, mode: PromptMode) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, mode)
    }

    pub fn default_with(mode: PromptMode) -> Self {
        Self::parse(DEFAULT_TEMPLATE, mode).expect("default template is valid")
    }

    fn fill(&self, value: impl Fn(Placeholder) -> String) -> String {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(p) => out.push_str(&value(*p)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub utterance: String,
}

pub fn format_dialogue(turns: &[Turn]) -> String {
    let mut out = String::new();
    for (i, t) in turns.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let who = match t.speaker {
            Speaker::User => "user:",
            Speaker::System => "system:",
        };
        let _ = write!(out, "{who} {}", t.utterance);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub dialogue: String,
    pub terms: Vec<String>,
    pub relations: Vec<(String, RelationType, String)>,
}

impl Exemplar {
    pub fn validate(&self) -> Result<(), PromptError> {
        let known: Vec<String> = self
            .terms
            .iter()
            .map(|t| canonical_term(t, MatchMode::Normalized))
            .collect();
        for (h, r, t) in &self.relations {
            for term in [h, t] {
                if !known.contains(&canonical_term(term, MatchMode::Normalized)) {
                    return Err(PromptError::ExemplarInconsistent(format!(
                        "[{h}, {}, {t}]",
                        r.verbaliser()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    /// `None` for a joint prompt.
    pub relation: Option<RelationType>,
    pub text: String,
}

pub fn instruction(relation: Option<RelationType>) -> String {
    match relation {
        None => "Find every relation between the terms of the dialogue below. \
                 Write each relation as [head, relation, tail] using only the listed terms."
            .to_string(),
        Some(r) => format!(
            "Find every \"{}\" relation between the terms of the dialogue below. \
             Write each relation as [head, {}, tail] using only the listed terms.",
            r.verbaliser(),
            r.verbaliser()
        ),
    }
}

pub fn relation_definitions(relations: &[RelationType]) -> String {
    relations
        .iter()
        .map(|r| r.definition())
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn term_inventory<S: AsRef<str>>(terms: &[S]) -> String {
    terms
        .iter()
        .map(|t| format!("- {}", t.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn exemplar_block(ex: &Exemplar, relation: Option<RelationType>) -> String {
    let rels: Vec<String> = ex
        .relations
        .iter()
        .filter(|(_, r, _)| relation.is_none_or(|want| *r == want))
        .map(|(h, r, t)| format!("[{h}, {}, {t}]", r.verbaliser()))
        .collect();
    format!(
        "Example dialogue:\n{}\nExample terms:\n{}\nExample answer:\n{}\n",
        ex.dialogue,
        term_inventory(&ex.terms),
        rels.join("\n")
    )
}

/// Renders one prompt per relation type in per-type mode (or only
/// `relation` when given), and a single prompt in joint mode.
pub fn render<S: AsRef<str>>(
    template: &PromptTemplate,
    dialogue: &str,
    terms: &[S],
    exemplar: Option<&Exemplar>,
    relation: Option<RelationType>,
) -> Result<Vec<RenderedPrompt>, PromptError> {
    if terms.is_empty() {
        return Err(PromptError::EmptyTerms);
    }
    if let Some(ex) = exemplar {
        ex.validate()?;
    }
    let targets: Vec<Option<RelationType>> = match (template.mode, relation) {
        (PromptMode::Joint, _) => vec![None],
        (PromptMode::PerType, Some(r)) => vec![Some(r)],
        (PromptMode::PerType, None) => RelationType::ALL.into_iter().map(Some).collect(),
    };
    let inventory = term_inventory(terms);
    Ok(targets
        .into_iter()
        .map(|target| {
            let defs = match target {
                Some(r) => relation_definitions(&[r]),
                None => relation_definitions(&RelationType::ALL),
            };
            let text = template.fill(|p| match p {
                Placeholder::Instruction => instruction(target),
                Placeholder::Exemplar => exemplar
                    .map(|ex| exemplar_block(ex, target))
                    .unwrap_or_default(),
                Placeholder::Dialogue => dialogue.to_string(),
                Placeholder::Terms => inventory.clone(),
                Placeholder::RelationDefinitions => defs.clone(),
            });
            RenderedPrompt {
                relation: target,
                text,
            }
        })
        .collect())
}

/// Surrounds a prompt with a backend-declared chat wrapper.
pub fn wrap_chat(prompt: &str, wrapper: Option<&(String, String)>) -> String {
    match wrapper {
        Some((pre, post)) => format!("{pre}{prompt}{post}"),
        None => prompt.to_string(),
    }
}
