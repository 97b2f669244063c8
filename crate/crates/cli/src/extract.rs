//! Relation extraction over a whole dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use dore_core::backend::{token_ids, BackendError, LanguageModel};
use dore_core::constraint::TripletGrammar;
use dore_core::decoder::{decode_with_grammar, DecodeError, DecodeResult, DecoderConfig, Selection};
use dore_core::ontology::Ontology;
use dore_core::prompt::{render, wrap_chat, Exemplar, PromptError, PromptMode, PromptTemplate};
use dore_core::triplet::{RelationTriplet, RelationType, TripletKey};

use crate::dataset::{Dataset, DialogueRecord};
use crate::output::{file_stem, sha256_hex, unix_now, write_atomic};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("prompt of {length} tokens exceeds the context limit of {limit}")]
    PromptTooLong { length: usize, limit: usize },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("cannot write {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone)]
pub struct ExtractConfig {
    pub decoder: DecoderConfig,
    pub template: PromptTemplate,
    /// Template path, or `builtin` for the default template.
    pub template_source: String,
    pub template_text: String,
    pub exemplar: Option<(String, Exemplar)>,
    pub seed: Option<u64>,
    pub workers: usize,
}

impl ExtractConfig {
    pub fn new(decoder: DecoderConfig, mode: PromptMode) -> Self {
        Self {
            decoder,
            template: PromptTemplate::default_with(mode),
            template_source: "builtin".into(),
            template_text: dore_core::prompt::DEFAULT_TEMPLATE.into(),
            exemplar: None,
            seed: None,
            workers: 1,
        }
    }

    pub fn with_template_file(mut self, path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.template = PromptTemplate::parse(&text, self.template.mode)?;
        self.template_source = path.display().to_string();
        self.template_text = text;
        Ok(self)
    }
}

/// Picks the one-shot exemplar: a random annotated record when a seed is
/// given, else the first annotated record.
pub fn choose_exemplar(pool: &Dataset, seed: Option<u64>) -> Option<&DialogueRecord> {
    let annotated: Vec<&DialogueRecord> = pool
        .records
        .iter()
        .filter(|r| r.gold_relations.as_ref().is_some_and(|g| !g.is_empty()))
        .collect();
    if annotated.is_empty() {
        return None;
    }
    let i = match seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s).gen_range(0..annotated.len()),
        None => 0,
    };
    Some(annotated[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDecode {
    pub relation: Option<RelationType>,
    pub prompt_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<DecodeResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueOutput {
    pub dialogue_id: String,
    pub relations: Vec<RelationTriplet>,
    pub prompts: Vec<PromptDecode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl DialogueOutput {
    fn from_prompts(dialogue_id: String, prompts: Vec<PromptDecode>) -> Self {
        let mut out = Self {
            dialogue_id,
            relations: Vec::new(),
            prompts,
            error: None,
        };
        let errors: Vec<&str> = out.prompts.iter().filter_map(|p| p.error.as_deref()).collect();
        if !errors.is_empty() {
            out.error = Some(errors.join("; "));
        }
        out.relations = union_selected(out.prompts.iter().filter_map(|p| p.result.as_ref()).map(|r| r.selected.clone()));
        out
    }

    /// The same decodes under another selection rule.
    pub fn reselect(&self, selection: Selection, threshold: f64) -> DialogueOutput {
        let prompts: Vec<PromptDecode> = self
            .prompts
            .iter()
            .map(|p| {
                let mut p = p.clone();
                if let Some(r) = &mut p.result {
                    r.reselect(selection, threshold);
                }
                p
            })
            .collect();
        Self::from_prompts(self.dialogue_id.clone(), prompts)
    }

    pub fn partial(&self) -> bool {
        self.error.is_some()
            || self
                .prompts
                .iter()
                .any(|p| p.result.as_ref().is_some_and(|r| r.partial))
    }

    pub fn keys(&self) -> Vec<TripletKey> {
        self.relations.iter().map(|t| t.key()).collect()
    }
}

/// Union of several selected sets, one entry per canonical relation, in key
/// order.
fn union_selected<I: IntoIterator<Item = Vec<RelationTriplet>>>(sets: I) -> Vec<RelationTriplet> {
    let mut by_key: BTreeMap<TripletKey, RelationTriplet> = BTreeMap::new();
    for set in sets {
        for t in set {
            by_key.entry(t.key()).or_insert(t);
        }
    }
    by_key.into_values().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractRun {
    /// Sorted by dialogue id.
    pub outputs: Vec<DialogueOutput>,
    pub skipped: Vec<String>,
}

impl ExtractRun {
    pub fn failed(&self) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|o| o.partial())
            .map(|o| o.dialogue_id.clone())
            .collect()
    }

    pub fn partial(&self) -> bool {
        !self.failed().is_empty()
    }

    pub fn ontology(&self) -> Ontology {
        dore_core::ontology::accumulate(
            self.outputs
                .iter()
                .map(|o| (o.dialogue_id.as_str(), o.relations.as_slice())),
        )
    }

    pub fn predictions(&self) -> BTreeMap<String, Vec<TripletKey>> {
        self.outputs
            .iter()
            .map(|o| (o.dialogue_id.clone(), o.keys()))
            .collect()
    }

    pub fn reselect(&self, selection: Selection, threshold: f64) -> ExtractRun {
        ExtractRun {
            outputs: self
                .outputs
                .iter()
                .map(|o| o.reselect(selection, threshold))
                .collect(),
            skipped: self.skipped.clone(),
        }
    }

    /// One line per dialogue: `{"dialogue_id": .., "relations": [[h, r, t], ..]}`.
    pub fn predictions_jsonl(&self) -> String {
        let mut out = String::new();
        for o in &self.outputs {
            let line = PredictionLine {
                dialogue_id: o.dialogue_id.clone(),
                relations: o.keys(),
            };
            out.push_str(&serde_json::to_string(&line).expect("prediction serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub dialogue_id: String,
    pub relations: Vec<TripletKey>,
}

fn decode_prompt(
    text: &str,
    relation: Option<RelationType>,
    grammar: Option<&TripletGrammar>,
    cfg: &ExtractConfig,
    backend: &dyn LanguageModel,
) -> PromptDecode {
    let caps = backend.capabilities();
    let attempt = || -> Result<(usize, DecodeResult), ExtractError> {
        let wrapped = wrap_chat(text, caps.chat_wrapper.as_ref());
        let tokens = token_ids(&backend.tokenize(&wrapped)?);
        if tokens.len() >= caps.max_context {
            return Err(ExtractError::PromptTooLong {
                length: tokens.len(),
                limit: caps.max_context,
            });
        }
        let result = decode_with_grammar(&tokens, grammar, &cfg.decoder, backend)?;
        Ok((tokens.len(), result))
    };
    match attempt() {
        Ok((n, result)) => PromptDecode {
            relation,
            prompt_tokens: n,
            result: Some(result),
            error: None,
        },
        Err(e) => PromptDecode {
            relation,
            prompt_tokens: 0,
            result: None,
            error: Some(e.to_string()),
        },
    }
}

/// Renders and decodes every prompt of one dialogue.
pub fn extract_dialogue(
    record: &DialogueRecord,
    cfg: &ExtractConfig,
    backend: &dyn LanguageModel,
) -> DialogueOutput {
    let failed = |msg: String| DialogueOutput {
        dialogue_id: record.dialogue_id.clone(),
        relations: Vec::new(),
        prompts: Vec::new(),
        error: Some(msg),
    };
    let prompts = match render(
        &cfg.template,
        &record.dialogue_text(),
        &record.terms,
        cfg.exemplar.as_ref().map(|(_, e)| e),
        None,
    ) {
        Ok(p) => p,
        Err(e) => return failed(e.to_string()),
    };
    let grammar = if cfg.decoder.constrained {
        match TripletGrammar::new(&record.terms, backend) {
            Ok(g) => Some(g),
            Err(e) => return failed(e.to_string()),
        }
    } else {
        None
    };
    let decodes = prompts
        .iter()
        .map(|p| decode_prompt(&p.text, p.relation, grammar.as_ref(), cfg, backend))
        .collect();
    DialogueOutput::from_prompts(record.dialogue_id.clone(), decodes)
}

/// Decodes every dialogue with terms; records without terms are skipped.
pub fn run_extract(
    dataset: &Dataset,
    cfg: &ExtractConfig,
    backend: &dyn LanguageModel,
) -> Result<ExtractRun, ExtractError> {
    let (todo, skipped): (Vec<&DialogueRecord>, Vec<&DialogueRecord>) =
        dataset.records.iter().partition(|r| !r.terms.is_empty());
    for r in &skipped {
        log::warn!("dialogue {} has no terms, skipped", r.dialogue_id);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| ExtractError::Pool(e.to_string()))?;
    let mut outputs: Vec<DialogueOutput> = pool.install(|| {
        todo.par_iter()
            .map(|r| {
                let out = extract_dialogue(r, cfg, backend);
                if let Some(e) = &out.error {
                    log::warn!("dialogue {}: {e}", r.dialogue_id);
                }
                out
            })
            .collect()
    });
    outputs.sort_by(|a, b| a.dialogue_id.cmp(&b.dialogue_id));
    let mut skipped: Vec<String> = skipped.iter().map(|r| r.dialogue_id.clone()).collect();
    skipped.sort();
    Ok(ExtractRun { outputs, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub decoder: DecoderConfig,
    pub mode: PromptMode,
    pub template: String,
    pub template_sha256: String,
    pub backend: String,
    pub seed: Option<u64>,
    pub exemplar_id: Option<String>,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ManifestConfig,
    pub dataset: String,
    pub dataset_sha256: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub predictions: String,
    pub ontology: String,
    pub dialogues: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<String>,
    pub partial: bool,
}

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const ONTOLOGY_FILE: &str = "ontology.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DIALOGUE_DIR: &str = "dialogues";

pub struct RunInfo<'a> {
    pub dataset_path: &'a Path,
    pub dataset: &'a Dataset,
    pub backend: String,
    pub started_unix: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExtractError + '_ {
    move |source| ExtractError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes predictions, per-dialogue decodes, the ontology and the manifest.
pub fn write_run(
    out_dir: &Path,
    run: &ExtractRun,
    cfg: &ExtractConfig,
    info: &RunInfo<'_>,
) -> Result<RunManifest, ExtractError> {
    let mut dialogues = Vec::new();
    let mut used = BTreeSet::new();
    for o in &run.outputs {
        let mut stem = file_stem(&o.dialogue_id);
        while !used.insert(stem.clone()) {
            stem.push('_');
        }
        let rel: PathBuf = [DIALOGUE_DIR, &format!("{stem}.json")].iter().collect();
        let path = out_dir.join(&rel);
        let body = serde_json::to_string_pretty(o).expect("dialogue output serializes");
        write_atomic(&path, body.as_bytes()).map_err(io_err(&path))?;
        dialogues.push(rel.display().to_string());
    }
    let pred_path = out_dir.join(PREDICTIONS_FILE);
    write_atomic(&pred_path, run.predictions_jsonl().as_bytes()).map_err(io_err(&pred_path))?;
    let onto_path = out_dir.join(ONTOLOGY_FILE);
    write_atomic(&onto_path, run.ontology().to_json().as_bytes()).map_err(io_err(&onto_path))?;

    let failed = run.failed();
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: ManifestConfig {
            decoder: cfg.decoder.clone(),
            mode: cfg.template.mode,
            template: cfg.template_source.clone(),
            template_sha256: sha256_hex(cfg.template_text.as_bytes()),
            backend: info.backend.clone(),
            seed: cfg.seed,
            exemplar_id: cfg.exemplar.as_ref().map(|(id, _)| id.clone()),
            workers: cfg.workers,
        },
        dataset: info.dataset_path.display().to_string(),
        dataset_sha256: info.dataset.digest.clone(),
        started_unix: info.started_unix,
        finished_unix: unix_now(),
        predictions: PREDICTIONS_FILE.into(),
        ontology: ONTOLOGY_FILE.into(),
        dialogues,
        skipped: run.skipped.clone(),
        partial: !failed.is_empty(),
        failed,
    };
    let man_path = out_dir.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&man_path, body.as_bytes()).map_err(io_err(&man_path))?;
    Ok(manifest)
}
