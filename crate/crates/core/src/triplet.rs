//! Relation types, canonical triplets and the bracket-format parser.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationType {
    DomainSlot,
    SlotValue,
    ValueDomain,
    Equivalence,
}

impl RelationType {
    pub const ALL: [RelationType; 4] = [
        RelationType::DomainSlot,
        RelationType::SlotValue,
        RelationType::ValueDomain,
        RelationType::Equivalence,
    ];

    pub fn verbaliser(self) -> &'static str {
        match self {
            RelationType::DomainSlot => "has slot",
            RelationType::SlotValue => "has value",
            RelationType::ValueDomain => "has domain",
            RelationType::Equivalence => "refers to same concept as",
        }
    }

    pub fn from_verbaliser(text: &str) -> Option<Self> {
        let text = canonicalize(text);
        Self::ALL.into_iter().find(|r| r.verbaliser() == text)
    }

    pub fn label(self) -> &'static str {
        match self {
            RelationType::DomainSlot => "domain-slot",
            RelationType::SlotValue => "slot-value",
            RelationType::ValueDomain => "value-domain",
            RelationType::Equivalence => "equivalence",
        }
    }

    pub fn from_label(text: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.label() == text)
    }

    /// Bracket template shown to the model, e.g. `[Domain, has slot, Slot]`.
    pub fn definition(self) -> &'static str {
        match self {
            RelationType::DomainSlot => "[Domain, has slot, Slot]",
            RelationType::SlotValue => "[Slot, has value, Value]",
            RelationType::ValueDomain => "[Value, has domain, Domain]",
            RelationType::Equivalence => "[Term1, refers to same concept as, Term2]",
        }
    }

    pub fn is_directed(self) -> bool {
        self != RelationType::Equivalence
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// How strictly term strings must agree to count as the same term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    ByteExact,
    #[default]
    Normalized,
}

/// Trims, collapses whitespace runs to one space and case-folds.
pub fn canonicalize(surface: &str) -> String {
    surface
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn canonical_term(surface: &str, mode: MatchMode) -> String {
    match mode {
        MatchMode::ByteExact => surface.to_string(),
        MatchMode::Normalized => canonicalize(surface),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Parsed,
    Gold,
}

/// Canonical identity of a relation.
///
/// Equivalence keys store their two terms in sorted order, so the pair is
/// unordered; every other relation keeps its direction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripletKey {
    pub head: String,
    pub relation: RelationType,
    pub tail: String,
}

impl TripletKey {
    pub fn new(head: impl Into<String>, relation: RelationType, tail: impl Into<String>) -> Self {
        let (mut head, mut tail) = (head.into(), tail.into());
        if !relation.is_directed() && tail < head {
            std::mem::swap(&mut head, &mut tail);
        }
        Self {
            head,
            relation,
            tail,
        }
    }

    pub fn render(&self) -> String {
        format!("[{}, {}, {}]", self.head, self.relation.verbaliser(), self.tail)
    }
}

impl fmt::Display for TripletKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl Serialize for TripletKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (&self.head, self.relation.verbaliser(), &self.tail).serialize(s)
    }
}

impl<'de> Deserialize<'de> for TripletKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (head, verb, tail) = <(String, String, String)>::deserialize(d)?;
        let relation = RelationType::from_verbaliser(&verb)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown verbaliser {verb:?}")))?;
        Ok(TripletKey::new(head, relation, tail))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTriplet {
    pub head_surface: String,
    pub tail_surface: String,
    pub head: String,
    pub tail: String,
    pub relation: RelationType,
    pub source: Source,
}

impl RelationTriplet {
    pub fn new(
        head: &str,
        relation: RelationType,
        tail: &str,
        source: Source,
        mode: MatchMode,
    ) -> Self {
        Self {
            head_surface: head.to_string(),
            tail_surface: tail.to_string(),
            head: canonical_term(head, mode),
            tail: canonical_term(tail, mode),
            relation,
            source,
        }
    }

    pub fn key(&self) -> TripletKey {
        TripletKey::new(self.head.clone(), self.relation, self.tail.clone())
    }
}

/// A triplet located in generated text, with byte ranges for every part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTriplet {
    pub triplet: RelationTriplet,
    /// The whole segment including both brackets.
    pub segment: Range<usize>,
    pub head: Range<usize>,
    pub relation: Range<usize>,
    pub tail: Range<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub triplets: Vec<ParsedTriplet>,
    /// Bracketed segments that did not parse as `[head, verbaliser, tail]`.
    pub malformed: usize,
}

/// Extracts `[head, verbaliser, tail]` triplets from free text.
///
/// The verbaliser, delimited by commas on both sides, splits the segment, so
/// terms may themselves contain commas. A segment without exactly one such
/// verbaliser, or with an empty head or tail, counts as malformed.
pub fn extract_triplets(text: &str, mode: MatchMode) -> Extraction {
    let mut out = Extraction::default();
    let mut open: Option<usize> = None;
    for (i, c) in text.char_indices() {
        match c {
            '[' => {
                if open.replace(i).is_some() {
                    out.malformed += 1;
                }
            }
            ']' => {
                if let Some(start) = open.take() {
                    match parse_segment(text, start + 1..i, mode) {
                        Some((triplet, head, relation, tail)) => out.triplets.push(ParsedTriplet {
                            triplet,
                            segment: start..i + 1,
                            head,
                            relation,
                            tail,
                        }),
                        None => out.malformed += 1,
                    }
                }
            }
            _ => {}
        }
    }
    out
}

type SegmentParts = (RelationTriplet, Range<usize>, Range<usize>, Range<usize>);

fn parse_segment(text: &str, interior: Range<usize>, mode: MatchMode) -> Option<SegmentParts> {
    let body = &text[interior.clone()];
    let mut found = Vec::new();
    for relation in RelationType::ALL {
        let verb = relation.verbaliser();
        let mut from = 0;
        while let Some(pos) = find_ascii_ci(&body[from..], verb) {
            let start = from + pos;
            let end = start + verb.len();
            let before = body[..start].trim_end();
            let after = body[end..].trim_start();
            if before.ends_with(',') && after.starts_with(',') {
                let left_comma = before.len() - 1;
                let right_comma = body.len() - after.len();
                found.push((relation, start..end, left_comma, right_comma));
            }
            from = start + 1;
            while !body.is_char_boundary(from) {
                from += 1;
            }
        }
    }
    if found.len() != 1 {
        return None;
    }
    let (relation, verb_range, left_comma, right_comma) = found.pop()?;
    let head = trimmed(body, 0..left_comma)?;
    let tail = trimmed(body, right_comma + 1..body.len())?;
    let shift = |r: Range<usize>| interior.start + r.start..interior.start + r.end;
    let triplet = RelationTriplet::new(
        &body[head.clone()],
        relation,
        &body[tail.clone()],
        Source::Parsed,
        mode,
    );
    Some((triplet, shift(head), shift(verb_range), shift(tail)))
}

fn find_ascii_ci(haystack: &str, needle: &str) -> Option<usize> {
    let (h, n) = (haystack.as_bytes(), needle.as_bytes());
    if n.len() > h.len() {
        return None;
    }
    (0..=h.len() - n.len()).find(|&i| {
        haystack.is_char_boundary(i) && h[i..i + n.len()].eq_ignore_ascii_case(n)
    })
}

fn trimmed(body: &str, range: Range<usize>) -> Option<Range<usize>> {
    let s = &body[range.clone()];
    let lead = s.len() - s.trim_start().len();
    let inner = s.trim();
    if inner.is_empty() {
        return None;
    }
    Some(range.start + lead..range.start + lead + inner.len())
}

/// Keeps the first occurrence of every canonical identity.
pub fn dedupe(triplets: &[RelationTriplet]) -> Vec<RelationTriplet> {
    let mut seen = HashSet::new();
    triplets
        .iter()
        .filter(|t| seen.insert(t.key()))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(text: &str) -> RelationTriplet {
        let ex = extract_triplets(text, MatchMode::Normalized);
        assert_eq!(ex.malformed, 0, "{text}");
        assert_eq!(ex.triplets.len(), 1, "{text}");
        ex.triplets[0].triplet.clone()
    }

    #[test]
    fn verbaliser_bijection() {
        for r in RelationType::ALL {
            assert_eq!(RelationType::from_verbaliser(r.verbaliser()), Some(r));
            assert_eq!(RelationType::from_label(r.label()), Some(r));
        }
        assert_eq!(RelationType::from_verbaliser("is a"), None);
    }

    #[test]
    fn verbalisers_are_not_prefixes_of_each_other() {
        for a in RelationType::ALL {
            for b in RelationType::ALL {
                if a != b {
                    assert!(!b.verbaliser().starts_with(a.verbaliser()));
                }
            }
        }
    }

    #[test]
    fn parses_simple_triplet() {
        let t = one("[hotel, has slot, price range]");
        assert_eq!(
            (t.head.as_str(), t.relation, t.tail.as_str()),
            ("hotel", RelationType::DomainSlot, "price range")
        );
    }

    #[test]
    fn verbaliser_delimits_terms_with_commas() {
        let t = one("[135 carlingview drive etobicoke, ontario m9w 5e7, canada, has domain, hotel]");
        assert_eq!(t.head, "135 carlingview drive etobicoke, ontario m9w 5e7, canada");
        assert_eq!(t.relation, RelationType::ValueDomain);
        assert_eq!(t.tail, "hotel");
    }

    #[test]
    fn tolerates_missing_spaces() {
        let t = one("- [price per night,refers to same concept as,cost]");
        assert_eq!(t.relation, RelationType::Equivalence);
        assert_eq!((t.head.as_str(), t.tail.as_str()), ("price per night", "cost"));
        assert_eq!(t.key().head, "cost");
    }

    #[test]
    fn missing_tail_is_malformed() {
        let ex = extract_triplets("- [price per night, has domain],", MatchMode::Normalized);
        assert!(ex.triplets.is_empty());
        assert_eq!(ex.malformed, 1);
    }

    #[test]
    fn noisy_baseline_output() {
        let text = "- [price per night, has domain], [best western plus toronto north york hotel & suites, has domain], '$ 63', 'hotel', 'has slot', 'has domain', 'hotel' ] nessunize \"$ 63\" $ 117' - [hotel, has slot],'refers to same concept as','stay' ]";
        let ex = extract_triplets(text, MatchMode::Normalized);
        assert!(ex.triplets.is_empty());
        assert_eq!(ex.malformed, 3);
    }

    #[test]
    fn two_verbalisers_are_ambiguous() {
        let ex = extract_triplets("[a, has slot, b, has value, c]", MatchMode::Normalized);
        assert!(ex.triplets.is_empty());
        assert_eq!(ex.malformed, 1);
    }

    #[test]
    fn verbaliser_inside_a_term_is_not_a_delimiter() {
        let t = one("[what has slot machines, has value, many]");
        assert_eq!(t.head, "what has slot machines");
        assert_eq!(t.relation, RelationType::SlotValue);
    }

    #[test]
    fn spans_point_at_components() {
        let text = "ok [hotel, has slot, area] and [area, has value, west]";
        let ex = extract_triplets(text, MatchMode::Normalized);
        assert_eq!(ex.triplets.len(), 2);
        let p = &ex.triplets[0];
        assert_eq!(&text[p.head.clone()], "hotel");
        assert_eq!(&text[p.relation.clone()], "has slot");
        assert_eq!(&text[p.tail.clone()], "area");
        assert_eq!(&text[p.segment.clone()], "[hotel, has slot, area]");
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize("Price  Range "), "price range");
        assert_eq!(canonicalize("cheap"), "cheap");
        assert_eq!(canonicalize(""), "");
    }

    #[test]
    fn byte_exact_keeps_surface() {
        let t = RelationTriplet::new("Price Range", RelationType::SlotValue, "cheap", Source::Gold, MatchMode::ByteExact);
        assert_eq!(t.head, "Price Range");
    }

    #[test]
    fn dedupe_rules() {
        let mk = |h: &str, r, t: &str| RelationTriplet::new(h, r, t, Source::Parsed, MatchMode::Normalized);
        use RelationType::*;
        assert_eq!(dedupe(&[mk("a", DomainSlot, "b"), mk("a", DomainSlot, "b")]).len(), 1);
        assert_eq!(dedupe(&[mk("x", Equivalence, "y"), mk("y", Equivalence, "x")]).len(), 1);
        assert_eq!(dedupe(&[mk("a", DomainSlot, "b"), mk("b", DomainSlot, "a")]).len(), 2);
    }

    #[test]
    fn key_serializes_as_bracket_triple() {
        let k = TripletKey::new("hotel", RelationType::DomainSlot, "area");
        let json = serde_json::to_string(&k).unwrap();
        assert_eq!(json, r#"["hotel","has slot","area"]"#);
        assert_eq!(serde_json::from_str::<TripletKey>(&json).unwrap(), k);
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(s in "\\PC{0,40}") {
            let once = canonicalize(&s);
            prop_assert_eq!(canonicalize(&once), once);
        }

        #[test]
        fn spans_map_back_to_text(
            prefix in "[a-z ]{0,10}",
            head in "[a-z][a-z ]{0,8}[a-z]",
            tail in "[a-z][a-z ,]{0,8}[a-z]",
            r in 0usize..4,
        ) {
            let rel = RelationType::ALL[r];
            let text = format!("{prefix}[{head}, {}, {tail}] trailing", rel.verbaliser());
            let ex = extract_triplets(&text, MatchMode::ByteExact);
            // generated terms may accidentally contain a comma-delimited verbaliser
            prop_assume!(ex.malformed == 0);
            prop_assert_eq!(ex.triplets.len(), 1);
            let p = &ex.triplets[0];
            prop_assert_eq!(&text[p.head.clone()], p.triplet.head_surface.as_str());
            prop_assert_eq!(&text[p.tail.clone()], p.triplet.tail_surface.as_str());
            prop_assert_eq!(&text[p.head.clone()], head.trim());
            prop_assert_eq!(&text[p.tail.clone()], tail.trim());
        }
    }
}
