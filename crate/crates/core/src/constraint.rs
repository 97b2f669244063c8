//! Constrained generation of bracketed triplets.
//!
//! Generation is free until the model emits `[`. From there the output must
//! follow `term , verbaliser , term ]`, with both terms taken from the input
//! term list and the verbaliser from the four relation verbalisers. After the
//! closing bracket generation is free again.
//!
//! Terms may contain the separator token (addresses such as
//! `"etobicoke, ontario"`). When a term is complete and can also continue
//! with a comma, a comma is ambiguous between "separator" and "part of the
//! term". The state therefore tracks a small set of cursors, one per live
//! interpretation, and the next tokens decide which survive.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    mock, BackendError, LanguageModel, RankedDistribution, RankedEntry, Token, TokenId,
};
use crate::triplet::RelationType;

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("term list is empty")]
    EmptyTermList,
    #[error("term {0:?} tokenizes to zero tokens")]
    EmptyTerm(String),
    #[error("term {0:?} contains a bracket token")]
    TermContainsBracket(String),
    #[error("term {0:?} contains a comma-delimited relation verbaliser")]
    TermContainsVerbaliser(String),
    #[error("backend cannot represent {0:?} as a single token")]
    MissingStructuralToken(&'static str),
    #[error("token {token} is not legal in phase {phase:?}")]
    IllegalToken { token: TokenId, phase: Phase },
    #[error("constrained state has no legal continuation")]
    DeadEnd,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Free,
    Head,
    Relation,
    Tail,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<TokenId, usize>,
    term: Option<usize>,
}

/// Prefix tree over the token sequences of a set of strings.
#[derive(Debug, Clone)]
pub struct TermTrie {
    nodes: Vec<TrieNode>,
    terms: Vec<String>,
    sequences: Vec<Vec<TokenId>>,
    surfaces: HashMap<TokenId, String>,
}

impl TermTrie {
    pub const ROOT: usize = 0;

    pub fn build<S, L>(terms: &[S], backend: &L) -> Result<Self, ConstraintError>
    where
        S: AsRef<str>,
        L: LanguageModel + ?Sized,
    {
        let tokenized = terms
            .iter()
            .map(|t| Ok((t.as_ref().to_string(), backend.tokenize(t.as_ref())?)))
            .collect::<Result<Vec<_>, BackendError>>()?;
        Self::from_tokenized(tokenized)
    }

    pub fn from_tokenized(terms: Vec<(String, Vec<Token>)>) -> Result<Self, ConstraintError> {
        if terms.is_empty() {
            return Err(ConstraintError::EmptyTermList);
        }
        let mut trie = TermTrie {
            nodes: vec![TrieNode::default()],
            terms: Vec::new(),
            sequences: Vec::new(),
            surfaces: HashMap::new(),
        };
        for (term, tokens) in terms {
            if tokens.is_empty() {
                return Err(ConstraintError::EmptyTerm(term));
            }
            let mut node = Self::ROOT;
            for tok in &tokens {
                trie.surfaces
                    .entry(tok.id)
                    .or_insert_with(|| tok.surface.clone());
                node = match trie.nodes[node].children.get(&tok.id) {
                    Some(&next) => next,
                    None => {
                        trie.nodes.push(TrieNode::default());
                        let next = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(tok.id, next);
                        next
                    }
                };
            }
            if trie.nodes[node].term.is_none() {
                trie.nodes[node].term = Some(trie.terms.len());
                trie.terms.push(term);
                trie.sequences.push(tokens.iter().map(|t| t.id).collect());
            }
        }
        Ok(trie)
    }

    pub fn child(&self, node: usize, token: TokenId) -> Option<usize> {
        self.nodes[node].children.get(&token).copied()
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = TokenId> + '_ {
        self.nodes[node].children.keys().copied()
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.nodes[node].term.is_some()
    }

    pub fn term_index(&self, node: usize) -> Option<usize> {
        self.nodes[node].term
    }

    pub fn term_at(&self, node: usize) -> Option<&str> {
        self.nodes[node].term.map(|i| self.terms[i].as_str())
    }

    /// Distinct terms, in insertion order.
    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn sequences(&self) -> &[Vec<TokenId>] {
        &self.sequences
    }

    pub fn walk(&self, tokens: &[TokenId]) -> Option<usize> {
        tokens
            .iter()
            .try_fold(Self::ROOT, |node, &t| self.child(node, t))
    }

    pub fn accepts(&self, tokens: &[TokenId]) -> bool {
        self.walk(tokens).is_some_and(|n| self.is_terminal(n))
    }

    pub fn surface(&self, token: TokenId) -> Option<&str> {
        self.surfaces.get(&token).map(String::as_str)
    }
}

/// The relation verbalisers as a token trie.
#[derive(Debug, Clone)]
pub struct VerbaliserSet {
    trie: TermTrie,
    relations: Vec<RelationType>,
}

impl VerbaliserSet {
    pub fn build<L: LanguageModel + ?Sized>(backend: &L) -> Result<Self, ConstraintError> {
        let verbs: Vec<&str> = RelationType::ALL.iter().map(|r| r.verbaliser()).collect();
        let trie = TermTrie::build(&verbs, backend)?;
        debug_assert_eq!(trie.terms().len(), RelationType::ALL.len());
        Ok(Self {
            trie,
            relations: RelationType::ALL.to_vec(),
        })
    }

    pub fn trie(&self) -> &TermTrie {
        &self.trie
    }

    pub fn relation_at(&self, node: usize) -> Option<RelationType> {
        self.trie.term_index(node).map(|i| self.relations[i])
    }

    pub fn sequence(&self, relation: RelationType) -> &[TokenId] {
        let i = self
            .relations
            .iter()
            .position(|r| *r == relation)
            .expect("every relation type has a verbaliser");
        &self.trie.sequences()[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StructuralTokens {
    pub open: TokenId,
    pub sep: TokenId,
    pub close: TokenId,
    /// Optional whitespace token accepted after `[` and separators.
    pub space: Option<TokenId>,
}

impl StructuralTokens {
    pub fn from_backend<L: LanguageModel + ?Sized>(backend: &L) -> Result<Self, ConstraintError> {
        let one = |s: &'static str| {
            backend
                .single_token(s)
                .map(|t| t.id)
                .ok_or(ConstraintError::MissingStructuralToken(s))
        };
        Ok(Self {
            open: one(mock::OPEN)?,
            sep: one(mock::SEP)?,
            close: one(mock::CLOSE)?,
            space: backend.single_token(" ").map(|t| t.id),
        })
    }

    pub fn is_structural(&self, token: TokenId) -> bool {
        token == self.open || token == self.sep || token == self.close || Some(token) == self.space
    }
}

/// Tokens allowed at the next step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenSet {
    All,
    Only(BTreeMap<TokenId, String>),
}

impl TokenSet {
    pub fn contains(&self, token: TokenId) -> bool {
        match self {
            TokenSet::All => true,
            TokenSet::Only(set) => set.contains_key(&token),
        }
    }

    pub fn ids(&self) -> Option<BTreeSet<TokenId>> {
        match self {
            TokenSet::All => None,
            TokenSet::Only(set) => Some(set.keys().copied().collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Cursor {
    phase: Phase,
    node: usize,
    space_ok: bool,
}

/// Per-branch position in the triplet grammar.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConstraintState {
    cursors: Vec<Cursor>,
}

impl ConstraintState {
    pub fn free() -> Self {
        Self {
            cursors: vec![Cursor {
                phase: Phase::Free,
                node: TermTrie::ROOT,
                space_ok: false,
            }],
        }
    }

    /// The earliest phase among the live interpretations.
    pub fn phase(&self) -> Phase {
        self.cursors[0].phase
    }

    pub fn phases(&self) -> Vec<Phase> {
        let mut p: Vec<_> = self.cursors.iter().map(|c| c.phase).collect();
        p.dedup();
        p
    }

    pub fn is_free(&self) -> bool {
        self.phase() == Phase::Free
    }

    /// Number of interpretations still alive.
    pub fn ambiguity(&self) -> usize {
        self.cursors.len()
    }
}

/// Immutable grammar shared by every branch decoded for one prompt.
#[derive(Debug, Clone)]
pub struct TripletGrammar {
    terms: TermTrie,
    verbalisers: VerbaliserSet,
    structural: StructuralTokens,
}

impl TripletGrammar {
    pub fn new<S, L>(terms: &[S], backend: &L) -> Result<Self, ConstraintError>
    where
        S: AsRef<str>,
        L: LanguageModel + ?Sized,
    {
        let structural = StructuralTokens::from_backend(backend)?;
        let verbalisers = VerbaliserSet::build(backend)?;
        let terms = TermTrie::build(terms, backend)?;
        for (term, seq) in terms.terms().iter().zip(terms.sequences()) {
            if seq
                .iter()
                .any(|&t| t == structural.open || t == structural.close)
            {
                return Err(ConstraintError::TermContainsBracket(term.clone()));
            }
            let fields = seq.split(|&t| t == structural.sep).map(|f| {
                let f: Vec<TokenId> = f
                    .iter()
                    .copied()
                    .filter(|&t| Some(t) != structural.space)
                    .collect();
                f
            });
            let inner: Vec<Vec<TokenId>> = fields.collect();
            // only fields between two commas can be read as a verbaliser
            if inner.len() >= 3
                && inner[1..inner.len() - 1]
                    .iter()
                    .any(|f| verbalisers.trie().accepts(f))
            {
                return Err(ConstraintError::TermContainsVerbaliser(term.clone()));
            }
            if inner.len() >= 2
                && (verbalisers.trie().accepts(&inner[0])
                    || verbalisers.trie().accepts(&inner[inner.len() - 1]))
            {
                return Err(ConstraintError::TermContainsVerbaliser(term.clone()));
            }
        }
        Ok(Self {
            terms,
            verbalisers,
            structural,
        })
    }

    pub fn terms(&self) -> &TermTrie {
        &self.terms
    }

    pub fn verbalisers(&self) -> &VerbaliserSet {
        &self.verbalisers
    }

    pub fn structural(&self) -> &StructuralTokens {
        &self.structural
    }

    fn surface(&self, token: TokenId) -> String {
        let s = &self.structural;
        if token == s.open {
            return mock::OPEN.into();
        }
        if token == s.sep {
            return mock::SEP.into();
        }
        if token == s.close {
            return mock::CLOSE.into();
        }
        if Some(token) == s.space {
            return " ".into();
        }
        self.terms
            .surface(token)
            .or_else(|| self.verbalisers.trie().surface(token))
            .unwrap_or_default()
            .to_string()
    }

    fn trie_for(&self, phase: Phase) -> &TermTrie {
        match phase {
            Phase::Relation => self.verbalisers.trie(),
            _ => &self.terms,
        }
    }

    pub fn legal_next_tokens(&self, state: &ConstraintState) -> Result<TokenSet, ConstraintError> {
        let s = &self.structural;
        let mut legal = BTreeSet::new();
        for c in &state.cursors {
            if c.phase == Phase::Free {
                return Ok(TokenSet::All);
            }
            let trie = self.trie_for(c.phase);
            legal.extend(trie.children(c.node));
            if trie.is_terminal(c.node) {
                legal.insert(if c.phase == Phase::Tail { s.close } else { s.sep });
            }
            if c.space_ok {
                legal.extend(s.space);
            }
        }
        if legal.is_empty() {
            return Err(ConstraintError::DeadEnd);
        }
        Ok(TokenSet::Only(
            legal.into_iter().map(|t| (t, self.surface(t))).collect(),
        ))
    }

    pub fn advance(
        &self,
        state: &ConstraintState,
        token: TokenId,
    ) -> Result<ConstraintState, ConstraintError> {
        let s = &self.structural;
        let mut next = BTreeSet::new();
        for c in &state.cursors {
            if c.phase == Phase::Free {
                next.insert(if token == s.open {
                    Cursor {
                        phase: Phase::Head,
                        node: TermTrie::ROOT,
                        space_ok: true,
                    }
                } else {
                    *c
                });
                continue;
            }
            let trie = self.trie_for(c.phase);
            if let Some(child) = trie.child(c.node, token) {
                next.insert(Cursor {
                    phase: c.phase,
                    node: child,
                    space_ok: false,
                });
            }
            if trie.is_terminal(c.node) {
                let exit = match c.phase {
                    Phase::Head if token == s.sep => Some((Phase::Relation, true)),
                    Phase::Relation if token == s.sep => Some((Phase::Tail, true)),
                    Phase::Tail if token == s.close => Some((Phase::Free, false)),
                    _ => None,
                };
                if let Some((phase, space_ok)) = exit {
                    next.insert(Cursor {
                        phase,
                        node: TermTrie::ROOT,
                        space_ok,
                    });
                }
            }
            if c.space_ok && Some(token) == s.space {
                next.insert(Cursor {
                    space_ok: false,
                    ..*c
                });
            }
        }
        if next.is_empty() {
            return Err(ConstraintError::IllegalToken {
                token,
                phase: state.phase(),
            });
        }
        // a closed triplet leaves no other reading alive
        if next.iter().any(|c| c.phase == Phase::Free) {
            return Ok(ConstraintState::free());
        }
        Ok(ConstraintState {
            cursors: next.into_iter().collect(),
        })
    }
}

/// Result of restricting a distribution to the legal tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Masked {
    pub dist: RankedDistribution,
    /// Set when no legal token appeared among the reported entries.
    pub fallback: bool,
}

/// Zeroes illegal tokens and renormalizes the rest.
///
/// If none of the reported entries is legal the result is uniform over the
/// legal set and `fallback` is set.
pub fn mask_distribution(dist: &RankedDistribution, legal: &TokenSet) -> Masked {
    let set = match legal {
        TokenSet::All => {
            return Masked {
                dist: dist.clone(),
                fallback: false,
            }
        }
        TokenSet::Only(set) => set,
    };
    let kept: Vec<&RankedEntry> = dist
        .entries
        .iter()
        .filter(|e| set.contains_key(&e.token.id))
        .collect();
    let mass: f64 = kept.iter().map(|e| e.prob).sum();
    if mass > 0.0 {
        return Masked {
            dist: RankedDistribution {
                entries: kept
                    .into_iter()
                    .map(|e| RankedEntry {
                        token: e.token.clone(),
                        prob: e.prob / mass,
                    })
                    .collect(),
                residual: 0.0,
                context_length: dist.context_length,
            },
            fallback: false,
        };
    }
    let p = 1.0 / set.len().max(1) as f64;
    Masked {
        dist: RankedDistribution {
            entries: set
                .iter()
                .map(|(&id, s)| RankedEntry {
                    token: Token::new(id, s.clone()),
                    prob: p,
                })
                .collect(),
            residual: 0.0,
            context_length: dist.context_length,
        },
        fallback: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript};
    use crate::triplet::{extract_triplets, MatchMode};
    use proptest::prelude::*;

    const WORDS: [&str; 16] = [
        "hotel", "cheap", "price", "range", "area", "west", "has", "slot", "value", "domain",
        "refers", "to", "same", "concept", "as", "pizza",
    ];

    fn backend() -> MockBackend {
        MockBackend::new(MockScript::default().words(&WORDS)).unwrap()
    }

    fn id(b: &MockBackend, s: &str) -> TokenId {
        b.token(s).unwrap().id
    }

    fn legal_surfaces(g: &TripletGrammar, st: &ConstraintState) -> BTreeSet<String> {
        match g.legal_next_tokens(st).unwrap() {
            TokenSet::All => panic!("expected a constrained set"),
            TokenSet::Only(m) => m.into_values().collect(),
        }
    }

    fn feed(g: &TripletGrammar, b: &MockBackend, text: &str) -> ConstraintState {
        b.tokenize(text)
            .unwrap()
            .iter()
            .fold(ConstraintState::free(), |st, t| g.advance(&st, t.id).unwrap())
    }

    fn set(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn singleton_trie() {
        let b = backend();
        let trie = TermTrie::build(&["hotel"], &b).unwrap();
        assert!(trie.accepts(&[id(&b, "hotel")]));
        assert!(!trie.accepts(&[]));
        assert!(!trie.accepts(&[id(&b, "cheap")]));
    }

    #[test]
    fn prefix_term_is_terminal_and_internal() {
        let b = backend();
        let trie = TermTrie::build(&["price", "price range"], &b).unwrap();
        let node = trie.walk(&[id(&b, "price")]).unwrap();
        assert!(trie.is_terminal(node));
        assert_eq!(trie.children(node).collect::<Vec<_>>(), vec![id(&b, "range")]);
    }

    #[test]
    fn address_term_keeps_inner_commas() {
        let words = [
            "135", "carlingview", "drive", "etobicoke", "ontario", "m9w", "5e7", "canada",
        ];
        let b = MockBackend::new(MockScript::default().words(&words)).unwrap();
        let term = "135 carlingview drive etobicoke, ontario m9w 5e7, canada";
        let trie = TermTrie::build(&[term], &b).unwrap();
        let seq = &trie.sequences()[0];
        assert_eq!(seq.iter().filter(|&&t| t == id(&b, ",")).count(), 2);
        assert!(trie.accepts(seq));
    }

    #[test]
    fn build_errors() {
        let b = backend();
        assert!(matches!(
            TermTrie::build::<&str, _>(&[], &b),
            Err(ConstraintError::EmptyTermList)
        ));
        assert!(matches!(
            TermTrie::build(&["  "], &b),
            Err(ConstraintError::EmptyTerm(_))
        ));
        assert!(matches!(
            TripletGrammar::new(&["hotel [west]"], &b),
            Err(ConstraintError::TermContainsBracket(_))
        ));
        assert!(matches!(
            TripletGrammar::new(&["hotel, has slot, area"], &b),
            Err(ConstraintError::TermContainsVerbaliser(_))
        ));
    }

    #[test]
    fn phase_transitions() {
        let b = backend();
        let g = TripletGrammar::new(&["hotel", "cheap"], &b).unwrap();
        let st = g.advance(&ConstraintState::free(), id(&b, "[")).unwrap();
        assert_eq!(st.phase(), Phase::Head);
        assert_eq!(legal_surfaces(&g, &st), set(&["hotel", "cheap"]));

        let st = feed(&g, &b, "[hotel,");
        assert_eq!(st.phase(), Phase::Relation);
        assert_eq!(legal_surfaces(&g, &st), set(&["has", "refers"]));

        let st = feed(&g, &b, "[hotel, has value, cheap");
        assert_eq!(st.phase(), Phase::Tail);
        assert_eq!(legal_surfaces(&g, &st), set(&["]"]));
        let st = g.advance(&st, id(&b, "]")).unwrap();
        assert_eq!(st, ConstraintState::free());
        assert_eq!(g.legal_next_tokens(&st).unwrap(), TokenSet::All);
    }

    #[test]
    fn terminal_internal_node_offers_separator_and_continuation() {
        let b = backend();
        let g = TripletGrammar::new(&["price", "price range"], &b).unwrap();
        let st = feed(&g, &b, "[price");
        assert_eq!(legal_surfaces(&g, &st), set(&["range", ","]));
    }

    #[test]
    fn comma_inside_term_stays_ambiguous_until_resolved() {
        let words = ["a", "b", "c"];
        let b = MockBackend::new(MockScript::default().words(&words).words(&WORDS)).unwrap();
        let g = TripletGrammar::new(&["a", "a, b", "c"], &b).unwrap();
        let st = feed(&g, &b, "[a,");
        assert_eq!(st.ambiguity(), 2);
        assert_eq!(st.phases(), vec![Phase::Head, Phase::Relation]);
        assert_eq!(legal_surfaces(&g, &st), set(&["b", "has", "refers"]));
        let st = g.advance(&st, id(&b, "b")).unwrap();
        assert_eq!(st.phase(), Phase::Head);
        assert_eq!(st.ambiguity(), 1);
        let st = feed(&g, &b, "[a, has");
        assert_eq!(st.phases(), vec![Phase::Relation]);
    }

    #[test]
    fn illegal_token_is_an_error() {
        let b = backend();
        let g = TripletGrammar::new(&["hotel"], &b).unwrap();
        let st = feed(&g, &b, "[");
        assert!(matches!(
            g.advance(&st, id(&b, "pizza")),
            Err(ConstraintError::IllegalToken { phase: Phase::Head, .. })
        ));
    }

    #[test]
    fn every_triplet_has_a_legal_path() {
        let b = backend();
        let terms = ["hotel", "cheap", "price range", "price"];
        let g = TripletGrammar::new(&terms, &b).unwrap();
        for h in terms {
            for r in RelationType::ALL {
                for t in terms {
                    let text = format!("[{h}, {}, {t}]", r.verbaliser());
                    let mut st = ConstraintState::free();
                    for tok in b.tokenize(&text).unwrap() {
                        assert!(g.legal_next_tokens(&st).unwrap().contains(tok.id), "{text}");
                        st = g.advance(&st, tok.id).unwrap();
                    }
                    assert!(st.is_free());
                }
            }
        }
    }

    fn dist(b: &MockBackend, probs: &[(&str, f64)]) -> RankedDistribution {
        RankedDistribution::from_probs(
            probs.iter().map(|(s, p)| (b.token(s).unwrap(), *p)).collect(),
            16,
            0,
        )
    }

    fn only(b: &MockBackend, words: &[&str]) -> TokenSet {
        TokenSet::Only(words.iter().map(|w| (id(b, w), w.to_string())).collect())
    }

    #[test]
    fn mask_renormalizes() {
        let b = backend();
        let d = dist(&b, &[("hotel", 0.5), ("area", 0.3), ("pizza", 0.2)]);
        let m = mask_distribution(&d, &only(&b, &["hotel", "area"]));
        assert!(!m.fallback);
        assert_eq!(m.dist.entries.len(), 2);
        assert!((m.dist.entries[0].prob - 0.625).abs() < 1e-12);
        assert!((m.dist.entries[1].prob - 0.375).abs() < 1e-12);
        m.dist.validate().unwrap();
    }

    #[test]
    fn mask_all_is_identity() {
        let b = backend();
        let d = dist(&b, &[("hotel", 0.5), ("area", 0.3), ("pizza", 0.2)]);
        assert_eq!(mask_distribution(&d, &TokenSet::All).dist, d);
    }

    #[test]
    fn mask_falls_back_to_uniform() {
        let b = backend();
        let d = dist(&b, &[("pizza", 1.0)]);
        let m = mask_distribution(&d, &only(&b, &["hotel"]));
        assert!(m.fallback);
        assert_eq!(m.dist.entries.len(), 1);
        assert_eq!(m.dist.entries[0].token.surface, "hotel");
        assert_eq!(m.dist.entries[0].prob, 1.0);
    }

    const TERM_WORDS: [&str; 6] = ["hotel", "cheap", "price", "range", "area", "west"];

    fn term_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec(0usize..TERM_WORDS.len(), 1..4).prop_flat_map(|idx| {
            proptest::collection::vec(proptest::bool::ANY, idx.len()).prop_map(move |commas| {
                let mut s = String::new();
                for (i, &w) in idx.iter().enumerate() {
                    if i > 0 {
                        s.push_str(if commas[i] { ", " } else { " " });
                    }
                    s.push_str(TERM_WORDS[w]);
                }
                s
            })
        })
    }

    proptest! {
        #[test]
        fn random_legal_walks_parse_into_valid_triplets(
            terms in proptest::collection::vec(term_strategy(), 1..5),
            choices in proptest::collection::vec(0usize..1000, 80),
        ) {
            let b = backend();
            let g = TripletGrammar::new(&terms, &b).unwrap();
            let mut st = ConstraintState::free();
            let mut out = Vec::new();
            let open = id(&b, "[");
            let pool: Vec<TokenId> = WORDS.iter().map(|w| id(&b, w)).chain([open]).collect();
            for c in choices {
                let tok = match g.legal_next_tokens(&st).unwrap() {
                    TokenSet::All => if c % 3 == 0 { open } else { pool[c % pool.len()] },
                    TokenSet::Only(m) => *m.keys().nth(c % m.len()).unwrap(),
                };
                st = g.advance(&st, tok).unwrap();
                out.push(tok);
            }
            let text = b.detokenize(&out).unwrap();
            let ex = extract_triplets(&text, MatchMode::Normalized);
            prop_assert_eq!(ex.malformed, 0, "{}", text);
            let canon: BTreeSet<String> = terms.iter().map(|t| crate::triplet::canonicalize(t)).collect();
            for p in &ex.triplets {
                prop_assert!(canon.contains(&p.triplet.head), "{} in {}", p.triplet.head, text);
                prop_assert!(canon.contains(&p.triplet.tail), "{} in {}", p.triplet.tail, text);
            }
        }
    }
}
