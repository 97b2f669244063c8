//! Exact-match evaluation with gold equivalence substitution.
//!
//! Predictions and gold relations are compared as sets of canonical
//! triplets. Gold "refers to same concept as" relations define which terms
//! are interchangeable: a predicted `[a, r, t]` also counts as `[b, r, t]`
//! when `a` and `b` are gold-equivalent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::UnionFind;
use crate::stats::{paired_ttest, StatsError, TTest};
use crate::triplet::{RelationTriplet, RelationType, Source, TripletKey};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dialogue ids differ between the compared runs: {0}")]
    IdMismatch(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClosureMode {
    #[default]
    Transitive,
    Pairwise,
}

impl FromStr for ClosureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "transitive" => Ok(Self::Transitive),
            "pairwise" => Ok(Self::Pairwise),
            _ => Err(format!("unknown closure mode {s:?}")),
        }
    }
}

/// Gold relations plus the term list of every dialogue.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldOntology {
    relations: BTreeMap<TripletKey, RelationTriplet>,
    dialogue_terms: BTreeMap<String, BTreeSet<String>>,
}

impl GoldOntology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_relation(&mut self, triplet: &RelationTriplet) {
        let mut t = triplet.clone();
        t.source = Source::Gold;
        self.relations.entry(t.key()).or_insert(t);
    }

    /// Records a dialogue's canonical term list.
    pub fn add_dialogue<I, S>(&mut self, id: &str, canonical_terms: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.dialogue_terms
            .entry(id.to_string())
            .or_default()
            .extend(canonical_terms.into_iter().map(Into::into));
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &TripletKey> {
        self.relations.keys()
    }

    pub fn relations(&self) -> impl Iterator<Item = &RelationTriplet> {
        self.relations.values()
    }

    pub fn dialogue_ids(&self) -> impl Iterator<Item = &String> {
        self.dialogue_terms.keys()
    }

    /// Keeps relations whose head and tail both occur in some dialogue's
    /// term list.
    pub fn filter_within_dialogue(&self) -> GoldOntology {
        let mut where_seen: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for (i, terms) in self.dialogue_terms.values().enumerate() {
            for t in terms {
                where_seen.entry(t).or_default().insert(i);
            }
        }
        let empty = BTreeSet::new();
        let relations = self
            .relations
            .iter()
            .filter(|(k, _)| {
                let h = where_seen.get(k.head.as_str()).unwrap_or(&empty);
                let t = where_seen.get(k.tail.as_str()).unwrap_or(&empty);
                !h.is_disjoint(t)
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        GoldOntology {
            relations,
            dialogue_terms: self.dialogue_terms.clone(),
        }
    }

    /// Gold relations whose terms both occur in one dialogue.
    pub fn for_dialogue(&self, id: &str) -> Vec<TripletKey> {
        let Some(terms) = self.dialogue_terms.get(id) else {
            return Vec::new();
        };
        self.relations
            .keys()
            .filter(|k| terms.contains(&k.head) && terms.contains(&k.tail))
            .cloned()
            .collect()
    }

    pub fn counts_by_type(&self) -> BTreeMap<RelationType, usize> {
        let mut counts: BTreeMap<RelationType, usize> =
            RelationType::ALL.iter().map(|&r| (r, 0)).collect();
        for k in self.relations.keys() {
            *counts.entry(k.relation).or_default() += 1;
        }
        counts
    }

    pub fn closure(&self, mode: ClosureMode) -> EquivalenceClosure {
        EquivalenceClosure::from_relations(self.relations.keys(), mode)
    }
}

/// Term substitution derived from equivalence relations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EquivalenceClosure {
    pub mode: ClosureMode,
    representative: BTreeMap<String, String>,
    variants: BTreeMap<String, BTreeSet<String>>,
}

impl EquivalenceClosure {
    pub fn from_relations<'a, I>(keys: I, mode: ClosureMode) -> Self
    where
        I: IntoIterator<Item = &'a TripletKey>,
    {
        let edges: Vec<(&str, &str)> = keys
            .into_iter()
            .filter(|k| k.relation == RelationType::Equivalence)
            .map(|k| (k.head.as_str(), k.tail.as_str()))
            .collect();
        let mut representative = BTreeMap::new();
        let mut variants: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        match mode {
            ClosureMode::Transitive => {
                let mut uf = UnionFind::new();
                for (a, b) in &edges {
                    uf.union(a, b);
                }
                for class in uf.classes() {
                    let rep = class.first().expect("classes are non-empty").clone();
                    for term in &class {
                        representative.insert(term.clone(), rep.clone());
                        variants.insert(term.clone(), class.clone());
                    }
                }
            }
            ClosureMode::Pairwise => {
                for (a, b) in &edges {
                    for (x, y) in [(a, b), (b, a)] {
                        let v = variants.entry(x.to_string()).or_default();
                        v.insert(x.to_string());
                        v.insert(y.to_string());
                    }
                }
            }
        }
        Self {
            mode,
            representative,
            variants,
        }
    }

    /// Class representative (transitive mode), or the term itself.
    pub fn representative<'a>(&'a self, term: &'a str) -> &'a str {
        self.representative
            .get(term)
            .map(String::as_str)
            .unwrap_or(term)
    }

    /// Terms a term may stand for, itself included.
    pub fn variants(&self, term: &str) -> BTreeSet<String> {
        self.variants
            .get(term)
            .cloned()
            .unwrap_or_else(|| BTreeSet::from([term.to_string()]))
    }

    /// Substitutes representatives into a non-equivalence triplet.
    pub fn apply(&self, key: &TripletKey) -> TripletKey {
        if key.relation == RelationType::Equivalence {
            return key.clone();
        }
        TripletKey::new(
            self.representative(&key.head),
            key.relation,
            self.representative(&key.tail),
        )
    }

    fn key_variants(&self, key: &TripletKey) -> Vec<TripletKey> {
        if key.relation == RelationType::Equivalence {
            return vec![key.clone()];
        }
        let tails = self.variants(&key.tail);
        self.variants(&key.head)
            .into_iter()
            .flat_map(|h| {
                tails
                    .iter()
                    .map(move |t| TripletKey::new(h.clone(), key.relation, t.clone()))
            })
            .collect()
    }
}

pub fn apply_closure<'a, I>(keys: I, closure: &EquivalenceClosure) -> BTreeSet<TripletKey>
where
    I: IntoIterator<Item = &'a TripletKey>,
{
    keys.into_iter().map(|k| closure.apply(k)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub n_pred: usize,
    pub n_gold: usize,
    /// Predictions matching some gold relation.
    pub matched_pred: usize,
    /// Gold relations matched by some prediction.
    pub matched_gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No gold relations, so recall is reported as 0.
    pub recall_undefined: bool,
}

impl Prf {
    pub fn from_counts(n_pred: usize, n_gold: usize, matched_pred: usize, matched_gold: usize) -> Self {
        let precision = if n_pred == 0 {
            0.0
        } else {
            matched_pred as f64 / n_pred as f64
        };
        let recall = if n_gold == 0 {
            0.0
        } else {
            matched_gold as f64 / n_gold as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            n_pred,
            n_gold,
            matched_pred,
            matched_gold,
            precision,
            recall,
            f1,
            recall_undefined: n_gold == 0,
        }
    }

    pub fn false_positives(&self) -> usize {
        self.n_pred - self.matched_pred
    }

    pub fn false_negatives(&self) -> usize {
        self.n_gold - self.matched_gold
    }
}

/// Micro precision, recall and F1 of `pred` against `gold`.
///
/// Transitive closure maps both sides onto class representatives and
/// compares sets. Pairwise closure counts a prediction as correct when a
/// direct substitution of its head and tail yields a gold relation, and a
/// gold relation as found when a direct substitution yields a prediction.
pub fn micro_prf<'a, P, G>(pred: P, gold: G, closure: &EquivalenceClosure) -> Prf
where
    P: IntoIterator<Item = &'a TripletKey>,
    G: IntoIterator<Item = &'a TripletKey>,
{
    match closure.mode {
        ClosureMode::Transitive => {
            let p = apply_closure(pred, closure);
            let g = apply_closure(gold, closure);
            let tp = p.intersection(&g).count();
            Prf::from_counts(p.len(), g.len(), tp, tp)
        }
        ClosureMode::Pairwise => {
            let p: BTreeSet<&TripletKey> = pred.into_iter().collect();
            let g: BTreeSet<&TripletKey> = gold.into_iter().collect();
            let hits = |k: &TripletKey, other: &BTreeSet<&TripletKey>| {
                closure.key_variants(k).iter().any(|v| other.contains(v))
            };
            let matched_pred = p.iter().filter(|k| hits(k, &g)).count();
            let matched_gold = g.iter().filter(|k| hits(k, &p)).count();
            Prf::from_counts(p.len(), g.len(), matched_pred, matched_gold)
        }
    }
}

pub fn per_type_breakdown<'a, P, G>(
    pred: P,
    gold: G,
    closure: &EquivalenceClosure,
) -> BTreeMap<RelationType, Prf>
where
    P: IntoIterator<Item = &'a TripletKey>,
    G: IntoIterator<Item = &'a TripletKey>,
{
    let pred: Vec<&TripletKey> = pred.into_iter().collect();
    let gold: Vec<&TripletKey> = gold.into_iter().collect();
    RelationType::ALL
        .into_iter()
        .map(|r| {
            let p = pred.iter().copied().filter(|k| k.relation == r);
            let g = gold.iter().copied().filter(|k| k.relation == r);
            (r, micro_prf(p, g, closure))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueMetric {
    pub dialogue_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub closure: ClosureMode,
    /// Also evaluate with equivalences predicted by the system added to the
    /// gold closure.
    pub prediction_closure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub closure: ClosureMode,
    pub global: Prf,
    pub per_type: BTreeMap<RelationType, Prf>,
    pub dialogue_level: Vec<DialogueMetric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub with_prediction_closure: Option<Prf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<TTest>,
}

/// Evaluates per-dialogue predictions against the gold ontology.
pub fn evaluate(
    predictions: &BTreeMap<String, Vec<TripletKey>>,
    gold: &GoldOntology,
    options: &EvalOptions,
) -> EvalReport {
    let closure = gold.closure(options.closure);
    let all_pred: BTreeSet<&TripletKey> = predictions.values().flatten().collect();
    let global = micro_prf(all_pred.iter().copied(), gold.keys(), &closure);
    let per_type = per_type_breakdown(all_pred.iter().copied(), gold.keys(), &closure);

    let dialogue_level = gold
        .dialogue_ids()
        .map(|id| {
            let local_gold = gold.for_dialogue(id);
            let local_pred = predictions.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let m = micro_prf(local_pred, &local_gold, &closure);
            DialogueMetric {
                dialogue_id: id.clone(),
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            }
        })
        .collect();

    let with_prediction_closure = options.prediction_closure.then(|| {
        let joint = EquivalenceClosure::from_relations(
            gold.keys().chain(all_pred.iter().copied()),
            options.closure,
        );
        micro_prf(all_pred.iter().copied(), gold.keys(), &joint)
    });

    EvalReport {
        closure: options.closure,
        global,
        per_type,
        dialogue_level,
        with_prediction_closure,
        significance: None,
    }
}

/// Paired t-test on dialogue-level F1 of two reports over the same dialogues.
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<TTest, EvalError> {
    let ids_a: Vec<&str> = a.dialogue_level.iter().map(|d| d.dialogue_id.as_str()).collect();
    let ids_b: Vec<&str> = b.dialogue_level.iter().map(|d| d.dialogue_id.as_str()).collect();
    if ids_a != ids_b {
        let diff: BTreeSet<&str> = ids_a
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .symmetric_difference(&ids_b.iter().copied().collect())
            .copied()
            .collect();
        return Err(EvalError::IdMismatch(
            diff.into_iter().take(5).collect::<Vec<_>>().join(", "),
        ));
    }
    let fa: Vec<f64> = a.dialogue_level.iter().map(|d| d.f1).collect();
    let fb: Vec<f64> = b.dialogue_level.iter().map(|d| d.f1).collect();
    Ok(paired_ttest(&fa, &fb)?)
}

impl EvalReport {
    /// Plain-text summary with F1, precision and recall columns.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:>8} {:>9} {:>7} {:>7} {:>7} {:>7}",
            "", "F1-Score", "Precision", "Recall", "TP", "Pred", "Gold"
        );
        let mut row = |name: &str, p: &Prf| {
            let _ = writeln!(
                out,
                "{:<28} {:>8.1} {:>9.1} {:>7.1} {:>7} {:>7} {:>7}{}",
                name,
                100.0 * p.f1,
                100.0 * p.precision,
                100.0 * p.recall,
                p.matched_gold,
                p.n_pred,
                p.n_gold,
                if p.recall_undefined { "  (no gold)" } else { "" }
            );
        };
        row("all", &self.global);
        for (r, p) in &self.per_type {
            row(r.label(), p);
        }
        if let Some(p) = &self.with_prediction_closure {
            row("all (+predicted equivalence)", p);
        }
        if let Some(t) = &self.significance {
            let _ = writeln!(
                out,
                "{}: t = {:.4}, df = {:.2}, p = {:.4}{}{}",
                t.test,
                t.statistic,
                t.df,
                t.p_value,
                if t.significant { ", significant at 5%" } else { "" },
                if t.degenerate { " (degenerate)" } else { "" }
            );
        }
        out
    }
}
