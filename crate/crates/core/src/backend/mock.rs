//! Deterministic scripted backend.
//!
//! The mock tokenizer is word-level: whitespace separates words and the
//! structural characters `[`, `,` and `]` always form tokens of their own.
//! Next-token distributions come from a script of suffix rules; the rule with
//! the longest suffix matching the end of the context wins, and contexts that
//! match no rule get the uniform distribution over the vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, Capabilities, LanguageModel, RankedDistribution, Token, TokenId};

pub const EOS: &str = "<eos>";
pub const OPEN: &str = "[";
pub const SEP: &str = ",";
pub const CLOSE: &str = "]";

const STRUCTURAL: [char; 3] = ['[', ',', ']'];
const DEFAULT_MAX_CONTEXT: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub suffix: Vec<String>,
    pub dist: BTreeMap<String, f64>,
}

impl MockRule {
    pub fn new<S: AsRef<str>>(suffix: &[S], dist: &[(&str, f64)]) -> Self {
        Self {
            suffix: suffix.iter().map(|s| s.as_ref().to_string()).collect(),
            dist: dist.iter().map(|(s, p)| (s.to_string(), *p)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    /// Extra vocabulary beyond the surfaces mentioned by rules.
    #[serde(default)]
    pub vocab: Vec<String>,
    #[serde(default = "default_eos")]
    pub eos: Option<String>,
    #[serde(default = "default_max_context")]
    pub max_context: usize,
    #[serde(default)]
    pub chat_wrapper: Option<(String, String)>,
    pub rules: Vec<MockRule>,
}

fn default_eos() -> Option<String> {
    Some(EOS.to_string())
}

fn default_max_context() -> usize {
    DEFAULT_MAX_CONTEXT
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            vocab: Vec::new(),
            eos: default_eos(),
            max_context: DEFAULT_MAX_CONTEXT,
            chat_wrapper: None,
            rules: Vec::new(),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Rules(Vec<MockRule>),
    Full(MockScript),
}

impl MockScript {
    pub fn with_rules(rules: Vec<MockRule>) -> Self {
        Self {
            rules,
            ..Self::default()
        }
    }

    pub fn rule<S: AsRef<str>>(mut self, suffix: &[S], dist: &[(&str, f64)]) -> Self {
        self.rules.push(MockRule::new(suffix, dist));
        self
    }

    pub fn words<S: AsRef<str>>(mut self, words: &[S]) -> Self {
        self.vocab
            .extend(words.iter().map(|w| w.as_ref().to_string()));
        self
    }

    /// Accepts either a bare list of rules or a full script object.
    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let file: ScriptFile =
            serde_json::from_str(text).map_err(|e| BackendError::InvalidScript(e.to_string()))?;
        Ok(match file {
            ScriptFile::Rules(rules) => Self::with_rules(rules),
            ScriptFile::Full(script) => script,
        })
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            BackendError::InvalidScript(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }
}

/// Splits text into mock-tokenizer pieces with their byte offsets.
pub fn split_pieces(text: &str) -> Vec<(usize, &str)> {
    let mut pieces = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || STRUCTURAL.contains(&c) {
            if let Some(s) = start.take() {
                pieces.push((s, &text[s..i]));
            }
            if !c.is_whitespace() {
                pieces.push((i, &text[i..i + c.len_utf8()]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        pieces.push((s, &text[s..]));
    }
    pieces
}

/// Whether the mock spacing rule puts a space between `prev` and `next`.
pub fn space_between(prev: &str, next: &str) -> bool {
    prev != OPEN && next != SEP && next != CLOSE
}

/// Canonical mock rendering of a sequence of surfaces.
pub fn join_surfaces<S: AsRef<str>>(surfaces: &[S]) -> String {
    let mut out = String::new();
    for (i, s) in surfaces.iter().enumerate() {
        if i > 0 && space_between(surfaces[i - 1].as_ref(), s.as_ref()) {
            out.push(' ');
        }
        out.push_str(s.as_ref());
    }
    out
}

/// Whitespace normalization under the mock tokenizer's spacing rule.
pub fn normalize_ws(text: &str) -> String {
    let pieces: Vec<&str> = split_pieces(text).into_iter().map(|(_, p)| p).collect();
    join_surfaces(&pieces)
}

fn is_single_piece(surface: &str) -> bool {
    let pieces = split_pieces(surface);
    pieces.len() == 1 && pieces[0].1 == surface
}

#[derive(Debug, Clone)]
struct CompiledRule {
    /// Explicit probabilities from the script.
    listed: Vec<(TokenId, f64)>,
    /// Probability given to each token the rule does not list.
    remainder_share: f64,
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
    rules: HashMap<Vec<TokenId>, CompiledRule>,
    max_suffix: usize,
    eos: Option<TokenId>,
    max_context: usize,
    chat_wrapper: Option<(String, String)>,
}

impl MockBackend {
    /// Builds the vocabulary and compiles the rules.
    ///
    /// Token ids are assigned in a fixed order: the end-of-sequence token,
    /// the three structural tokens, the script's explicit vocabulary, then
    /// surfaces in order of first appearance in the rules.
    pub fn new(script: MockScript) -> Result<Self, BackendError> {
        let mut surfaces = Vec::new();
        let mut index = HashMap::new();
        let mut intern = |s: &str| -> Result<TokenId, BackendError> {
            if let Some(&id) = index.get(s) {
                return Ok(id);
            }
            if !is_single_piece(s) {
                return Err(BackendError::InvalidScript(format!(
                    "{s:?} is not a single mock token"
                )));
            }
            let id = surfaces.len() as TokenId;
            surfaces.push(s.to_string());
            index.insert(s.to_string(), id);
            Ok(id)
        };

        let eos = script.eos.as_deref().map(&mut intern).transpose()?;
        for s in [OPEN, SEP, CLOSE] {
            intern(s)?;
        }
        for w in &script.vocab {
            intern(w)?;
        }
        let mut raw_rules = Vec::with_capacity(script.rules.len());
        for rule in &script.rules {
            let suffix = rule
                .suffix
                .iter()
                .map(|s| intern(s))
                .collect::<Result<Vec<_>, _>>()?;
            let listed = rule
                .dist
                .iter()
                .map(|(s, p)| intern(s).map(|id| (id, *p)))
                .collect::<Result<Vec<_>, _>>()?;
            raw_rules.push((suffix, listed));
        }

        let vocab_size = surfaces.len();
        let mut rules = HashMap::new();
        let mut max_suffix = 0;
        for (suffix, listed) in raw_rules {
            let mut sum = 0.0;
            for &(id, p) in &listed {
                if !(0.0..=1.0).contains(&p) || p.is_nan() {
                    return Err(BackendError::InvalidScript(format!(
                        "probability {p} for {:?} is outside [0, 1]",
                        surfaces[id as usize]
                    )));
                }
                sum += p;
            }
            if sum > 1.0 + super::PROB_EPS {
                return Err(BackendError::InvalidScript(format!(
                    "rule {:?} has total mass {sum}",
                    render(&surfaces, &suffix)
                )));
            }
            let unlisted = vocab_size - listed.len();
            let remainder = (1.0 - sum).max(0.0);
            let remainder_share = if unlisted > 0 && remainder > super::PROB_EPS {
                remainder / unlisted as f64
            } else {
                0.0
            };
            max_suffix = max_suffix.max(suffix.len());
            let key_text = render(&surfaces, &suffix);
            if rules
                .insert(
                    suffix,
                    CompiledRule {
                        listed,
                        remainder_share,
                    },
                )
                .is_some()
            {
                return Err(BackendError::InvalidScript(format!(
                    "duplicate rule for suffix {key_text:?}"
                )));
            }
        }

        Ok(Self {
            surfaces,
            index,
            rules,
            max_suffix,
            eos,
            max_context: script.max_context,
            chat_wrapper: script.chat_wrapper,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Self::new(MockScript::load(path)?)
    }

    pub fn vocab_size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn token(&self, surface: &str) -> Option<Token> {
        self.index
            .get(surface)
            .map(|&id| Token::new(id, surface))
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id as usize).map(String::as_str)
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    /// Full (untruncated) probability of every vocabulary token.
    pub fn full_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let v = self.surfaces.len();
        match self.matching_rule(context) {
            None => vec![1.0 / v as f64; v],
            Some(rule) => {
                let mut probs = vec![rule.remainder_share; v];
                for &(id, p) in &rule.listed {
                    probs[id as usize] = p;
                }
                probs
            }
        }
    }

    fn matching_rule(&self, context: &[TokenId]) -> Option<&CompiledRule> {
        let longest = self.max_suffix.min(context.len());
        (0..=longest)
            .rev()
            .find_map(|len| self.rules.get(&context[context.len() - len..]))
    }
}

fn render(surfaces: &[String], ids: &[TokenId]) -> String {
    let parts: Vec<&str> = ids.iter().map(|&i| surfaces[i as usize].as_str()).collect();
    join_surfaces(&parts)
}

impl LanguageModel for MockBackend {
    fn tokenize(&self, text: &str) -> Result<Vec<Token>, BackendError> {
        split_pieces(text)
            .into_iter()
            .map(|(offset, piece)| {
                self.token(piece)
                    .ok_or_else(|| BackendError::UnknownCharacters {
                        fragment: piece.to_string(),
                        offset,
                    })
            })
            .collect()
    }

    fn detokenize_with_offsets(
        &self,
        tokens: &[TokenId],
    ) -> Result<(String, Vec<Range<usize>>), BackendError> {
        let mut text = String::new();
        let mut offsets = Vec::with_capacity(tokens.len());
        let mut prev: Option<&str> = None;
        for &id in tokens {
            let surface = self.surface(id).ok_or(BackendError::UnknownToken(id))?;
            if prev.is_some_and(|p| space_between(p, surface)) {
                text.push(' ');
            }
            let start = text.len();
            text.push_str(surface);
            offsets.push(start..text.len());
            prev = Some(surface);
        }
        Ok((text, offsets))
    }

    fn next_distribution(
        &self,
        context: &[TokenId],
        top_m: usize,
    ) -> Result<RankedDistribution, BackendError> {
        if top_m < 2 {
            return Err(BackendError::TopMTooSmall(top_m));
        }
        if context.len() > self.max_context {
            return Err(BackendError::ContextTooLong {
                length: context.len(),
                limit: self.max_context,
            });
        }
        if let Some(&bad) = context.iter().find(|&&id| id as usize >= self.surfaces.len()) {
            return Err(BackendError::UnknownToken(bad));
        }
        let probs = self
            .full_distribution(context)
            .into_iter()
            .enumerate()
            .map(|(id, p)| (Token::new(id as TokenId, self.surfaces[id].clone()), p))
            .collect();
        Ok(RankedDistribution::from_probs(probs, top_m, context.len()))
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            eos: self
                .eos
                .map(|id| Token::new(id, self.surfaces[id as usize].clone())),
            max_context: self.max_context,
            vocab_size: Some(self.surfaces.len()),
            concurrent: true,
            chat_wrapper: self.chat_wrapper.clone(),
        }
    }

    fn describe(&self) -> String {
        format!(
            "mock(vocab={}, rules={})",
            self.surfaces.len(),
            self.rules.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slot_backend() -> MockBackend {
        let script = MockScript::default()
            .words(&["hotel", "area", "price", "range"])
            .rule(&["has"], &[("slot", 0.7), ("value", 0.2), ("domain", 0.1)]);
        MockBackend::new(script).unwrap()
    }

    fn surfaces(b: &MockBackend, toks: &[Token]) -> Vec<String> {
        toks.iter()
            .map(|t| b.surface(t.id).unwrap().to_string())
            .collect()
    }

    #[test]
    fn tokenize_empty() {
        assert!(slot_backend().tokenize("").unwrap().is_empty());
    }

    #[test]
    fn tokenize_triplet_splits_structure() {
        let b = slot_backend();
        let toks = b.tokenize("[hotel, has slot, area]").unwrap();
        assert_eq!(
            surfaces(&b, &toks),
            ["[", "hotel", ",", "has", "slot", ",", "area", "]"]
        );
    }

    #[test]
    fn tokenize_rejects_unknown_text() {
        let err = slot_backend().tokenize("hotel pizza").unwrap_err();
        match err {
            BackendError::UnknownCharacters { fragment, offset } => {
                assert_eq!(fragment, "pizza");
                assert_eq!(offset, 6);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn detokenize_spacing() {
        let b = slot_backend();
        assert_eq!(b.detokenize(&[]).unwrap(), "");
        let ids = |s: &[&str]| s.iter().map(|w| b.token(w).unwrap().id).collect::<Vec<_>>();
        assert_eq!(b.detokenize(&ids(&["price", "range"])).unwrap(), "price range");
        assert_eq!(b.detokenize(&ids(&["[", "hotel", "]"])).unwrap(), "[hotel]");
        assert!(matches!(
            b.detokenize(&[999]),
            Err(BackendError::UnknownToken(999))
        ));
    }

    #[test]
    fn offsets_cover_token_surfaces() {
        let b = slot_backend();
        let toks = b.tokenize("[hotel, has slot, price range]").unwrap();
        let ids: Vec<_> = toks.iter().map(|t| t.id).collect();
        let (text, offsets) = b.detokenize_with_offsets(&ids).unwrap();
        for (t, r) in toks.iter().zip(&offsets) {
            assert_eq!(&text[r.clone()], t.surface);
        }
    }

    #[test]
    fn uniform_default() {
        let script = MockScript::default().words(&["a", "b", "c", "d"]);
        let b = MockBackend::new(script).unwrap();
        assert_eq!(b.vocab_size(), 8);
        let d = b.next_distribution(&[], 8).unwrap();
        assert_eq!(d.entries.len(), 8);
        for e in &d.entries {
            assert_eq!(e.prob, 0.125);
        }
        d.validate().unwrap();
    }

    #[test]
    fn rule_lookup() {
        let b = slot_backend();
        let ctx: Vec<_> = b
            .tokenize("hotel has")
            .unwrap()
            .iter()
            .map(|t| t.id)
            .collect();
        let d = b.next_distribution(&ctx, 8).unwrap();
        let got: Vec<_> = d
            .entries
            .iter()
            .map(|e| (e.token.surface.as_str(), e.prob))
            .collect();
        assert_eq!(got, [("slot", 0.7), ("value", 0.2), ("domain", 0.1)]);
        d.validate().unwrap();
    }

    #[test]
    fn longest_suffix_wins() {
        let script = MockScript::default()
            .rule(&["b"], &[("x", 1.0)])
            .rule(&["a", "b"], &[("y", 1.0)])
            .rule::<&str>(&[], &[("z", 1.0)]);
        let b = MockBackend::new(script).unwrap();
        let id = |s: &str| b.token(s).unwrap().id;
        let top = |ctx: &[TokenId]| b.next_distribution(ctx, 4).unwrap().top().unwrap().token.surface.clone();
        assert_eq!(top(&[id("a"), id("b")]), "y");
        assert_eq!(top(&[id("x"), id("b")]), "x");
        assert_eq!(top(&[id("x")]), "z");
    }

    #[test]
    fn remainder_is_spread_over_unlisted() {
        let script = MockScript::default()
            .words(&["a", "b"])
            .rule::<&str>(&[], &[("a", 0.5)]);
        let b = MockBackend::new(script).unwrap();
        let d = b.next_distribution(&[], 16).unwrap();
        // 6 tokens: eos [ , ] a b; 0.5 spread over 5 unlisted
        assert_eq!(d.entries[0].token.surface, "a");
        assert!((d.entries[1].prob - 0.1).abs() < 1e-12);
        d.validate().unwrap();
    }

    #[test]
    fn script_errors() {
        assert!(MockBackend::new(MockScript::default().rule(&["a"], &[("b", 0.8), ("c", 0.3)])).is_err());
        assert!(MockBackend::new(MockScript::default().rule(&["a b"], &[("b", 0.5)])).is_err());
        assert!(MockBackend::new(
            MockScript::default()
                .rule(&["a"], &[("b", 0.5)])
                .rule(&["a"], &[("c", 0.5)])
        )
        .is_err());
    }

    #[test]
    fn errors_for_bad_requests() {
        let mut script = MockScript::default().words(&["a"]);
        script.max_context = 2;
        let b = MockBackend::new(script).unwrap();
        assert!(matches!(b.next_distribution(&[], 1), Err(BackendError::TopMTooSmall(1))));
        assert!(matches!(
            b.next_distribution(&[1, 1, 1], 4),
            Err(BackendError::ContextTooLong { length: 3, limit: 2 })
        ));
    }

    #[test]
    fn loads_bare_rule_list() {
        let s = MockScript::from_json(r#"[{"suffix": ["has"], "dist": {"slot": 1.0}}]"#).unwrap();
        assert_eq!(s.rules.len(), 1);
        assert_eq!(s.eos.as_deref(), Some(EOS));
    }

    const WORDS: [&str; 8] = ["[", ",", "]", "hotel", "price", "range", "has", "slot"];

    proptest! {
        #[test]
        fn roundtrip_over_vocabulary(
            picks in proptest::collection::vec(0usize..WORDS.len(), 0..20),
            gaps in proptest::collection::vec(0usize..4, 20),
        ) {
            let b = slot_backend();
            let mut text = String::new();
            for (i, &p) in picks.iter().enumerate() {
                let w = WORDS[p];
                let prev_structural = i > 0 && STRUCTURAL.iter().any(|c| WORDS[picks[i - 1]].starts_with(*c));
                let this_structural = STRUCTURAL.iter().any(|c| w.starts_with(*c));
                let min_gap = usize::from(i > 0 && !prev_structural && !this_structural);
                let gap = min_gap.max(gaps[i] % 3);
                text.push_str(&[" ", "\t", "\n"][gaps[i] % 3].repeat(gap));
                text.push_str(w);
            }
            let toks = b.tokenize(&text).unwrap();
            let ids: Vec<_> = toks.iter().map(|t| t.id).collect();
            prop_assert_eq!(b.detokenize(&ids).unwrap(), normalize_ws(&text));
            prop_assert_eq!(surfaces(&b, &toks), picks.iter().map(|&p| WORDS[p].to_string()).collect::<Vec<_>>());
        }

        #[test]
        fn truncation_is_a_prefix(m1 in 2usize..10, m2 in 2usize..10, ctx in proptest::collection::vec(0u32..8, 0..5)) {
            let b = slot_backend();
            let (lo, hi) = (m1.min(m2), m1.max(m2));
            let short = b.next_distribution(&ctx, lo).unwrap();
            let long = b.next_distribution(&ctx, hi).unwrap();
            prop_assert_eq!(&long.entries[..short.entries.len()], &short.entries[..]);
            short.validate().unwrap();
            long.validate().unwrap();
            prop_assert_eq!(b.next_distribution(&ctx, lo).unwrap(), short);
        }
    }
}
