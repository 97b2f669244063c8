//! Dataset-level ontology accumulated from per-dialogue predictions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::triplet::{RelationTriplet, RelationType, TripletKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermType {
    Domain,
    Slot,
    Value,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermVotes {
    pub domain: usize,
    pub slot: usize,
    pub value: usize,
}

impl TermVotes {
    fn add(&mut self, t: TermType) {
        match t {
            TermType::Domain => self.domain += 1,
            TermType::Slot => self.slot += 1,
            TermType::Value => self.value += 1,
        }
    }

    fn count(&self, t: TermType) -> usize {
        match t {
            TermType::Domain => self.domain,
            TermType::Slot => self.slot,
            TermType::Value => self.value,
        }
    }

    /// Majority label, ties resolved domain before slot before value, and
    /// whether a tie occurred.
    pub fn label(&self) -> (TermType, bool) {
        let order = [TermType::Domain, TermType::Slot, TermType::Value];
        let best = order.iter().map(|&t| self.count(t)).max().unwrap_or(0);
        let winners: Vec<TermType> = order
            .into_iter()
            .filter(|&t| self.count(t) == best)
            .collect();
        (winners[0], winners.len() > 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermTypeEntry {
    pub votes: TermVotes,
    pub label: TermType,
    pub conflict: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyRelation {
    pub triplet: RelationTriplet,
    pub provenance: BTreeSet<String>,
}

/// Union of relation sets, keyed by canonical identity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ontology {
    relations: BTreeMap<TripletKey, OntologyRelation>,
}

impl Ontology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn insert(&mut self, dialogue_id: &str, triplet: &RelationTriplet) {
        let key = triplet.key();
        match self.relations.get_mut(&key) {
            Some(rel) => {
                rel.provenance.insert(dialogue_id.to_string());
                // smallest surface form wins so the result ignores input order
                if surface_order(triplet) < surface_order(&rel.triplet) {
                    rel.triplet = triplet.clone();
                }
            }
            None => {
                self.relations.insert(
                    key,
                    OntologyRelation {
                        triplet: triplet.clone(),
                        provenance: BTreeSet::from([dialogue_id.to_string()]),
                    },
                );
            }
        }
    }

    /// Associative, commutative union.
    pub fn merge(mut self, other: Ontology) -> Ontology {
        for (_, rel) in other.relations {
            for d in &rel.provenance {
                self.insert(d, &rel.triplet);
            }
        }
        self
    }

    pub fn relations(&self) -> impl Iterator<Item = &OntologyRelation> {
        self.relations.values()
    }

    pub fn keys(&self) -> impl Iterator<Item = &TripletKey> {
        self.relations.keys()
    }

    pub fn triplets(&self) -> Vec<RelationTriplet> {
        self.relations.values().map(|r| r.triplet.clone()).collect()
    }

    pub fn get(&self, key: &TripletKey) -> Option<&OntologyRelation> {
        self.relations.get(key)
    }

    pub fn term_types(&self) -> BTreeMap<String, TermTypeEntry> {
        infer_term_types(self.relations.keys())
    }

    pub fn equivalence_classes(&self) -> Vec<BTreeSet<String>> {
        equivalence_classes(self.relations.keys())
    }

    pub fn export(&self) -> OntologyFile {
        OntologyFile {
            relations: self
                .relations
                .iter()
                .map(|(k, r)| ExportedRelation {
                    key: k.clone(),
                    head_surface: r.triplet.head_surface.clone(),
                    tail_surface: r.triplet.tail_surface.clone(),
                    provenance: r.provenance.iter().cloned().collect(),
                })
                .collect(),
            term_types: self.term_types(),
            equivalence_classes: self
                .equivalence_classes()
                .into_iter()
                .map(|c| c.into_iter().collect())
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.export()).expect("ontology serializes")
    }
}

fn surface_order(t: &RelationTriplet) -> (&str, &str) {
    (&t.head_surface, &t.tail_surface)
}

/// Builds an ontology from `(dialogue id, relations)` pairs.
pub fn accumulate<'a, I>(per_dialogue: I) -> Ontology
where
    I: IntoIterator<Item = (&'a str, &'a [RelationTriplet])>,
{
    let mut onto = Ontology::new();
    for (id, rels) in per_dialogue {
        for t in rels {
            onto.insert(id, t);
        }
    }
    onto
}

fn roles(relation: RelationType) -> Option<(TermType, TermType)> {
    match relation {
        RelationType::DomainSlot => Some((TermType::Domain, TermType::Slot)),
        RelationType::SlotValue => Some((TermType::Slot, TermType::Value)),
        RelationType::ValueDomain => Some((TermType::Value, TermType::Domain)),
        RelationType::Equivalence => None,
    }
}

/// Votes every head and tail into a hierarchy level. Equivalence relations
/// carry no level and do not vote.
pub fn infer_term_types<'a, I>(keys: I) -> BTreeMap<String, TermTypeEntry>
where
    I: IntoIterator<Item = &'a TripletKey>,
{
    let mut votes: BTreeMap<String, TermVotes> = BTreeMap::new();
    for k in keys {
        if let Some((h, t)) = roles(k.relation) {
            votes.entry(k.head.clone()).or_default().add(h);
            votes.entry(k.tail.clone()).or_default().add(t);
        }
    }
    votes
        .into_iter()
        .map(|(term, votes)| {
            let (label, conflict) = votes.label();
            (
                term,
                TermTypeEntry {
                    votes,
                    label,
                    conflict,
                },
            )
        })
        .collect()
}

/// Disjoint-set forest over strings.
#[derive(Debug, Clone, Default)]
pub struct UnionFind {
    index: BTreeMap<String, usize>,
    parent: Vec<usize>,
    names: Vec<String>,
}

impl UnionFind {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, item: &str) -> usize {
        if let Some(&i) = self.index.get(item) {
            return i;
        }
        let i = self.parent.len();
        self.index.insert(item.to_string(), i);
        self.parent.push(i);
        self.names.push(item.to_string());
        i
    }

    fn root(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    pub fn union(&mut self, a: &str, b: &str) {
        let (a, b) = (self.add(a), self.add(b));
        let (ra, rb) = (self.root(a), self.root(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }

    /// All classes, each sorted, ordered by their smallest member.
    pub fn classes(&mut self) -> Vec<BTreeSet<String>> {
        let mut by_root: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        for i in 0..self.parent.len() {
            let r = self.root(i);
            by_root.entry(r).or_default().insert(self.names[i].clone());
        }
        let mut classes: Vec<_> = by_root.into_values().collect();
        classes.sort();
        classes
    }
}

/// Partition of every term mentioned in an Equivalence relation.
pub fn equivalence_classes<'a, I>(keys: I) -> Vec<BTreeSet<String>>
where
    I: IntoIterator<Item = &'a TripletKey>,
{
    let mut uf = UnionFind::new();
    for k in keys {
        if k.relation == RelationType::Equivalence {
            uf.union(&k.head, &k.tail);
        }
    }
    uf.classes()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedRelation {
    #[serde(flatten, with = "key_fields")]
    pub key: TripletKey,
    pub head_surface: String,
    pub tail_surface: String,
    pub provenance: Vec<String>,
}

mod key_fields {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::triplet::{RelationType, TripletKey};

    #[derive(Serialize, Deserialize)]
    struct Fields {
        head: String,
        relation: String,
        tail: String,
    }

    pub fn serialize<S: Serializer>(k: &TripletKey, s: S) -> Result<S::Ok, S::Error> {
        Fields {
            head: k.head.clone(),
            relation: k.relation.verbaliser().to_string(),
            tail: k.tail.clone(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<TripletKey, D::Error> {
        let f = Fields::deserialize(d)?;
        let relation = RelationType::from_verbaliser(&f.relation).ok_or_else(|| {
            serde::de::Error::custom(format!("unknown verbaliser {:?}", f.relation))
        })?;
        Ok(TripletKey::new(f.head, relation, f.tail))
    }
}

/// On-disk form of an [`Ontology`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyFile {
    pub relations: Vec<ExportedRelation>,
    pub term_types: BTreeMap<String, TermTypeEntry>,
    pub equivalence_classes: Vec<Vec<String>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplet::{MatchMode, Source};
    use proptest::prelude::*;

    fn t(h: &str, r: RelationType, tl: &str) -> RelationTriplet {
        RelationTriplet::new(h, r, tl, Source::Parsed, MatchMode::Normalized)
    }

    use RelationType::*;

    #[test]
    fn accumulate_unions_with_provenance() {
        let a = [t("hotel", DomainSlot, "area")];
        let b = [t("Hotel", DomainSlot, "area"), t("area", SlotValue, "west")];
        let onto = accumulate([("d1", &a[..]), ("d2", &b[..])]);
        assert_eq!(onto.len(), 2);
        let rel = onto.get(&a[0].key()).unwrap();
        assert_eq!(
            rel.provenance.iter().collect::<Vec<_>>(),
            ["d1", "d2"]
        );
        assert_eq!(rel.triplet.head_surface, "Hotel");
        assert!(accumulate(std::iter::empty::<(&str, &[RelationTriplet])>()).is_empty());
        let c = [t("restaurant", DomainSlot, "food")];
        assert_eq!(accumulate([("d1", &a[..]), ("d3", &c[..])]).len(), 2);
    }

    #[test]
    fn term_type_votes() {
        let onto = accumulate([(
            "d",
            &[t("hotel", DomainSlot, "area"), t("area", SlotValue, "west")][..],
        )]);
        let types = onto.term_types();
        assert_eq!(types["hotel"].label, TermType::Domain);
        assert_eq!(types["area"].label, TermType::Slot);
        assert_eq!(types["area"].votes.slot, 2);
        assert_eq!(types["west"].label, TermType::Value);
        assert!(types.values().all(|e| !e.conflict));

        let single = accumulate([("d", &[t("cheap", ValueDomain, "hotel")][..])]).term_types();
        assert_eq!(single["cheap"].label, TermType::Value);
        assert_eq!(single["hotel"].label, TermType::Domain);

        let clash = accumulate([(
            "d",
            &[t("hotel", DomainSlot, "area"), t("price", DomainSlot, "hotel")][..],
        )])
        .term_types();
        assert!(clash["hotel"].conflict);
        assert_eq!(clash["hotel"].label, TermType::Domain);
    }

    #[test]
    fn equivalence_partition() {
        let keys = [
            TripletKey::new("a", Equivalence, "b"),
            TripletKey::new("c", Equivalence, "b"),
            TripletKey::new("x", DomainSlot, "y"),
            TripletKey::new("q", Equivalence, "q"),
        ];
        let classes = equivalence_classes(&keys);
        assert_eq!(
            classes,
            vec![
                BTreeSet::from(["a".to_string(), "b".into(), "c".into()]),
                BTreeSet::from(["q".to_string()]),
            ]
        );
        assert!(equivalence_classes(&keys[2..3]).is_empty());
    }

    #[test]
    fn export_round_trips() {
        let onto = accumulate([(
            "d",
            &[t("hotel", DomainSlot, "area"), t("high-end", Equivalence, "expensive")][..],
        )]);
        let file = onto.export();
        let json = onto.to_json();
        let back: OntologyFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back, file);
        assert_eq!(file.equivalence_classes, vec![vec!["expensive", "high-end"]]);
        assert!(json.contains("\"relation\": \"has slot\""));
    }

    fn rel_strategy() -> impl Strategy<Value = (usize, RelationTriplet)> {
        let words = ["hotel", "area", "west", "cheap", "Hotel", "price range"];
        (0usize..4, 0usize..6, 0usize..4, 0usize..6)
            .prop_map(move |(d, h, r, tl)| (d, t(words[h], RelationType::ALL[r], words[tl])))
    }

    proptest! {
        #[test]
        fn order_and_grouping_do_not_matter(
            rels in proptest::collection::vec(rel_strategy(), 0..30),
            seed in any::<u64>(),
            split in 0usize..30,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let ids = ["d0", "d1", "d2", "d3"];
            let build = |rs: &[(usize, RelationTriplet)]| {
                let mut o = Ontology::new();
                for (d, tr) in rs { o.insert(ids[*d], tr); }
                o
            };
            let whole = build(&rels);
            let mut shuffled = rels.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&build(&shuffled), &whole);
            let cut = split.min(rels.len());
            let (a, b) = rels.split_at(cut);
            prop_assert_eq!(&build(b).merge(build(a)), &whole);

            let classes = whole.equivalence_classes();
            let mut seen = BTreeSet::new();
            for c in &classes {
                for term in c {
                    prop_assert!(seen.insert(term.clone()));
                }
            }
            let mentioned: BTreeSet<String> = whole
                .keys()
                .filter(|k| k.relation == Equivalence)
                .flat_map(|k| [k.head.clone(), k.tail.clone()])
                .collect();
            prop_assert_eq!(seen, mentioned);
        }
    }
}
