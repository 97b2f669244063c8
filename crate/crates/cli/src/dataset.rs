//! Line-delimited dialogue records.
//!
//! Each non-blank line is one JSON object:
//!
//! ```json
//! {"dialogue_id": "d1",
//!  "turns": [{"speaker": "user", "utterance": "a cheap hotel please"}],
//!  "terms": ["hotel", "cheap", "price range"],
//!  "gold_relations": [["price range", "has value", "cheap"]]}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use dore_core::eval::GoldOntology;
use dore_core::prompt::{format_dialogue, Exemplar, Turn};
use dore_core::triplet::{canonical_term, MatchMode, RelationTriplet, RelationType, Source};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}, dialogue {id:?}: {message}")]
    Invalid {
        line: usize,
        id: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
    pub terms: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_relations: Option<Vec<(String, String, String)>>,
}

impl DialogueRecord {
    pub fn dialogue_text(&self) -> String {
        format_dialogue(&self.turns)
    }

    /// Gold relations with their verbalisers resolved.
    pub fn gold(&self, mode: MatchMode) -> Vec<RelationTriplet> {
        self.gold_relations
            .iter()
            .flatten()
            .filter_map(|(h, v, t)| {
                RelationType::from_verbaliser(v)
                    .map(|r| RelationTriplet::new(h, r, t, Source::Gold, mode))
            })
            .collect()
    }

    pub fn as_exemplar(&self) -> Exemplar {
        Exemplar {
            dialogue: self.dialogue_text(),
            terms: self.terms.clone(),
            relations: self
                .gold(MatchMode::Normalized)
                .into_iter()
                .map(|t| (t.head_surface, t.relation, t.tail_surface))
                .collect(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.dialogue_id.is_empty() {
            return Err("empty dialogue_id".into());
        }
        for (h, v, t) in self.gold_relations.iter().flatten() {
            if RelationType::from_verbaliser(v).is_none() {
                return Err(format!("unknown verbaliser {v:?} in [{h}, {v}, {t}]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub dialogues: usize,
    pub without_terms: usize,
    /// Gold relations after deduplication and the within-dialogue filter.
    pub gold_per_type: BTreeMap<RelationType, usize>,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} dialogues", self.dialogues)?;
        if self.without_terms > 0 {
            write!(f, " ({} without terms)", self.without_terms)?;
        }
        for (r, n) in &self.gold_per_type {
            write!(f, ", {n} {}", r.label())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<DialogueRecord>,
    /// Hex sha256 of the file contents.
    pub digest: String,
}

impl Dataset {
    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DialogueRecord =
                serde_json::from_str(line).map_err(|e| IngestError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let invalid = |message: String| IngestError::Invalid {
                line: line_no,
                id: rec.dialogue_id.clone(),
                message,
            };
            rec.validate().map_err(invalid)?;
            if !seen.insert(rec.dialogue_id.clone()) {
                return Err(invalid("duplicate dialogue_id".into()));
            }
            records.push(rec);
        }
        Ok(Self {
            records,
            digest: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, id: &str) -> Option<&DialogueRecord> {
        self.records.iter().find(|r| r.dialogue_id == id)
    }

    /// Gold relations of every record, restricted to terms that co-occur in
    /// some dialogue.
    pub fn gold(&self, mode: MatchMode) -> GoldOntology {
        let mut gold = GoldOntology::new();
        for r in &self.records {
            for t in r.gold(mode) {
                gold.add_relation(&t);
            }
            gold.add_dialogue(
                &r.dialogue_id,
                r.terms.iter().map(|t| canonical_term(t, mode)),
            );
        }
        gold.filter_within_dialogue()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            dialogues: self.records.len(),
            without_terms: self.records.iter().filter(|r| r.terms.is_empty()).count(),
            gold_per_type: self.gold(MatchMode::Normalized).counts_by_type(),
        }
    }
}
