//! Writes the toy dataset, prompt template and mock script under
//! `crates/cli/fixtures/toy/`.
//!
//! For every per-type prompt the script offers five first tokens. When the
//! dialogue has gold relations of that type, one branch lists them all with
//! high confidence and the others list a partial set plus one wrong relation
//! with lower confidence. Otherwise every branch stops straight away.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dore_cli::dataset::{Dataset, DialogueRecord};
use dore_cli::extract::{run_extract, ExtractConfig};
use dore_core::backend::mock::{split_pieces, MockBackend, MockRule, MockScript, CLOSE, EOS, OPEN, SEP};
use dore_core::backend::{LanguageModel, TokenId};
use dore_core::constraint::{ConstraintState, TokenSet, TripletGrammar};
use dore_core::decoder::DecoderConfig;
use dore_core::prompt::{render, PromptMode, PromptTemplate, Speaker, Turn, DEFAULT_TEMPLATE};
use dore_core::triplet::{MatchMode, RelationType};

const FILLERS: [&str; 5] = ["so", "ok", "well", "then", "here"];
const FIRST_PROBS: [f64; 5] = [0.3, 0.25, 0.2, 0.15, 0.1];

type Rel = (&'static str, &'static str, &'static str);

struct Toy {
    id: &'static str,
    turns: &'static [(&'static str, &'static str)],
    terms: &'static [&'static str],
    gold: &'static [Rel],
}

const HS: &str = "has slot";
const HV: &str = "has value";
const HD: &str = "has domain";
const EQ: &str = "refers to same concept as";

const TOYS: &[Toy] = &[
    Toy {
        id: "toy-01",
        turns: &[("user", "i need a cheap hotel in the north"), ("system", "the acorn guest house is cheap")],
        terms: &["hotel", "cheap", "north", "price range", "area"],
        gold: &[
            ("hotel", HS, "price range"),
            ("hotel", HS, "area"),
            ("price range", HV, "cheap"),
            ("area", HV, "north"),
            ("cheap", HD, "hotel"),
            ("north", HD, "hotel"),
        ],
    },
    Toy {
        id: "toy-02",
        turns: &[("user", "i want an expensive italian restaurant"), ("system", "there are 3 , what area ?")],
        terms: &["restaurant", "expensive", "italian", "food", "price range"],
        gold: &[
            ("restaurant", HS, "food"),
            ("restaurant", HS, "price range"),
            ("food", HV, "italian"),
            ("price range", HV, "expensive"),
            ("expensive", HD, "restaurant"),
            ("italian", HD, "restaurant"),
        ],
    },
    Toy {
        id: "toy-03",
        turns: &[("user", "a hotel with free parking please"), ("system", "yes , it has parking")],
        terms: &["hotel", "parking", "free", "yes"],
        gold: &[
            ("hotel", HS, "parking"),
            ("parking", HV, "free"),
            ("parking", HV, "yes"),
            ("free", EQ, "yes"),
            ("free", HD, "hotel"),
            ("yes", HD, "hotel"),
        ],
    },
    Toy {
        id: "toy-04",
        turns: &[("user", "somewhere in the centre for chinese food"), ("system", "the golden house is in the center")],
        terms: &["restaurant", "area", "centre", "center", "food", "chinese"],
        gold: &[
            ("restaurant", HS, "area"),
            ("restaurant", HS, "food"),
            ("area", HV, "centre"),
            ("food", HV, "chinese"),
            ("centre", EQ, "center"),
            ("centre", HD, "restaurant"),
            ("chinese", HD, "restaurant"),
        ],
    },
    Toy {
        id: "toy-05",
        turns: &[("user", "is there a 4 star hotel"), ("system", "the lensfield has 4 stars")],
        terms: &["hotel", "stars", "4"],
        gold: &[("hotel", HS, "stars"), ("stars", HV, "4"), ("4", HD, "hotel")],
    },
    Toy {
        id: "toy-06",
        turns: &[("user", "book a table for 2 people"), ("system", "done , the restaurant is booked")],
        terms: &["restaurant", "book people", "2"],
        gold: &[
            ("restaurant", HS, "book people"),
            ("book people", HV, "2"),
            ("2", HD, "restaurant"),
        ],
    },
    Toy {
        id: "toy-07",
        turns: &[("user", "hello"), ("system", "how can i help ?")],
        terms: &[],
        gold: &[],
    },
    Toy {
        id: "toy-08",
        turns: &[("user", "thanks for the hotel , goodbye"), ("system", "goodbye")],
        terms: &["hotel"],
        gold: &[],
    },
    Toy {
        id: "toy-09",
        turns: &[("user", "a moderate price range in the south"), ("system", "pizza hut is a restaurant there")],
        terms: &["restaurant", "price range", "moderate", "south", "area"],
        gold: &[
            ("restaurant", HS, "price range"),
            ("restaurant", HS, "area"),
            ("price range", HV, "moderate"),
            ("area", HV, "south"),
            ("moderate", HD, "restaurant"),
            ("south", HD, "restaurant"),
        ],
    },
    Toy {
        id: "toy-10",
        turns: &[("user", "a guesthouse hotel in the east"), ("system", "a and b guest house is in the east area")],
        terms: &["hotel", "type", "guesthouse", "guest house", "east", "area"],
        gold: &[
            ("hotel", HS, "type"),
            ("hotel", HS, "area"),
            ("type", HV, "guesthouse"),
            ("area", HV, "east"),
            ("guesthouse", EQ, "guest house"),
            ("east", HD, "hotel"),
            ("guesthouse", HD, "hotel"),
        ],
    },
];

fn records() -> Vec<DialogueRecord> {
    TOYS.iter()
        .map(|t| DialogueRecord {
            dialogue_id: t.id.into(),
            turns: t
                .turns
                .iter()
                .map(|(s, u)| Turn {
                    speaker: if *s == "user" { Speaker::User } else { Speaker::System },
                    utterance: (*u).into(),
                })
                .collect(),
            terms: t.terms.iter().map(|s| s.to_string()).collect(),
            gold_relations: (!t.gold.is_empty()).then(|| {
                t.gold
                    .iter()
                    .map(|(h, v, t)| (h.to_string(), v.to_string(), t.to_string()))
                    .collect()
            }),
        })
        .collect()
}

/// One planned continuation after the first token: surfaces and the
/// probability of each.
struct Plan {
    tokens: Vec<String>,
    probs: Vec<f64>,
}

fn words(s: &str) -> Vec<String> {
    split_pieces(s).into_iter().map(|(_, p)| p.to_string()).collect()
}

fn plan(rels: &[(String, String, String)], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Plan {
    let mut tokens = Vec::new();
    for (h, v, t) in rels {
        tokens.push(OPEN.to_string());
        tokens.extend(words(h));
        tokens.push(SEP.into());
        tokens.extend(words(v));
        tokens.push(SEP.into());
        tokens.extend(words(t));
        tokens.push(CLOSE.into());
    }
    tokens.push(EOS.into());
    let probs = tokens.iter().map(|_| rng.gen_range(lo..hi)).collect();
    Plan { tokens, probs }
}

fn wrong_relation(
    terms: &[&str],
    verb: &str,
    gold: &BTreeSet<(String, String, String)>,
    rng: &mut ChaCha8Rng,
) -> (String, String, String) {
    loop {
        let h = terms[rng.gen_range(0..terms.len())];
        let t = terms[rng.gen_range(0..terms.len())];
        let cand = (h.to_string(), verb.to_string(), t.to_string());
        let flipped = (t.to_string(), verb.to_string(), h.to_string());
        if h != t && !gold.contains(&cand) && !(verb == EQ && gold.contains(&flipped)) {
            return cand;
        }
    }
}

type Dist = Vec<(String, f64)>;

struct Builder {
    /// Visited context and the listed distribution there.
    contexts: Vec<(Vec<TokenId>, Dist)>,
}

impl Builder {
    fn walk(
        &mut self,
        backend: &MockBackend,
        grammar: &TripletGrammar,
        prompt: &[TokenId],
        first: &str,
        plan: &Plan,
    ) {
        let id = |s: &str| backend.token(s).unwrap_or_else(|| panic!("{s:?} not in vocab")).id;
        let mut ctx = prompt.to_vec();
        ctx.push(id(first));
        let mut state = grammar.advance(&ConstraintState::free(), id(first)).unwrap();
        for (tok, &p) in plan.tokens.iter().zip(&plan.probs) {
            let chosen = id(tok);
            let alt = match grammar.legal_next_tokens(&state).unwrap() {
                TokenSet::All => {
                    if tok == OPEN { EOS.to_string() } else { OPEN.to_string() }
                }
                TokenSet::Only(set) => set
                    .values()
                    .find(|s| s.as_str() != tok && !s.is_empty())
                    .cloned()
                    .unwrap_or_else(|| if tok == SEP { CLOSE.into() } else { SEP.into() }),
            };
            self.contexts
                .push((ctx.clone(), vec![(tok.clone(), p), (alt, 1.0 - p)]));
            if tok == EOS {
                break;
            }
            state = grammar.advance(&state, chosen).unwrap();
            ctx.push(chosen);
        }
    }

    /// Shortest suffix per context that no context with another
    /// distribution shares.
    fn rules(&self, backend: &MockBackend) -> Vec<MockRule> {
        let key = |d: &[(String, f64)]| format!("{d:?}");
        let mut trie: Vec<(HashMap<TokenId, usize>, BTreeSet<String>)> = vec![Default::default()];
        for (ctx, d) in &self.contexts {
            let k = key(d);
            let mut node = 0;
            trie[0].1.insert(k.clone());
            for &t in ctx.iter().rev() {
                node = match trie[node].0.get(&t) {
                    Some(&n) => n,
                    None => {
                        trie.push(Default::default());
                        let n = trie.len() - 1;
                        trie[node].0.insert(t, n);
                        n
                    }
                };
                trie[node].1.insert(k.clone());
            }
        }
        let mut out: BTreeMap<Vec<TokenId>, Vec<(String, f64)>> = BTreeMap::new();
        for (ctx, d) in &self.contexts {
            let mut node = 0;
            let mut len = 0;
            while trie[node].1.len() > 1 {
                node = trie[node].0[&ctx[ctx.len() - 1 - len]];
                len += 1;
            }
            let suffix = ctx[ctx.len() - len..].to_vec();
            if let Some(prev) = out.insert(suffix, d.clone()) {
                assert_eq!(key(&prev), key(d));
            }
        }
        out.into_iter()
            .map(|(suffix, dist)| MockRule {
                suffix: suffix
                    .iter()
                    .map(|&t| backend.surface(t).unwrap().to_string())
                    .collect(),
                dist: dist.into_iter().collect(),
            })
            .collect()
    }
}

fn main() -> anyhow::Result<()> {
    let dir: PathBuf = [env!("CARGO_MANIFEST_DIR"), "fixtures", "toy"].iter().collect();
    std::fs::create_dir_all(&dir)?;
    let recs = records();
    let template = PromptTemplate::default_with(PromptMode::PerType);

    let mut prompts = Vec::new();
    let mut vocab = BTreeSet::new();
    for w in FILLERS {
        vocab.insert(w.to_string());
    }
    for r in RelationType::ALL {
        vocab.extend(words(r.verbaliser()));
    }
    for rec in &recs {
        for t in &rec.terms {
            vocab.extend(words(t));
        }
        if rec.terms.is_empty() {
            continue;
        }
        for p in render(&template, &rec.dialogue_text(), &rec.terms, None, None)? {
            vocab.extend(words(&p.text));
            prompts.push((rec, p));
        }
    }
    for s in [EOS, OPEN, SEP, CLOSE] {
        vocab.remove(s);
    }
    let vocab: Vec<String> = vocab.into_iter().collect();
    let backend = MockBackend::new(MockScript::default().words(&vocab))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut builder = Builder { contexts: Vec::new() };
    for (n, (rec, p)) in prompts.iter().enumerate() {
        let relation = p.relation.expect("per-type prompt");
        let ids: Vec<TokenId> = backend.tokenize(&p.text)?.iter().map(|t| t.id).collect();
        builder.contexts.push((
            ids.clone(),
            FILLERS
                .iter()
                .zip(FIRST_PROBS)
                .map(|(f, q)| (f.to_string(), q))
                .collect(),
        ));
        let grammar = TripletGrammar::new(&rec.terms, &backend)?;
        let gold: Vec<(String, String, String)> = rec
            .gold_relations
            .iter()
            .flatten()
            .filter(|(_, v, _)| v == relation.verbaliser())
            .cloned()
            .collect();
        let gold_set: BTreeSet<_> = gold.iter().cloned().collect();
        let correct = n % FILLERS.len();
        for (b, first) in FILLERS.iter().enumerate() {
            let plan = if gold.is_empty() {
                Plan { tokens: vec![EOS.into()], probs: vec![rng.gen_range(0.6..0.9)] }
            } else if b == correct {
                plan(&gold, &mut rng, 0.82, 0.98)
            } else {
                let keep = rng.gen_range(0..gold.len());
                let mut rels: Vec<_> = gold[..keep].to_vec();
                let terms: Vec<&str> = rec.terms.iter().map(String::as_str).collect();
                rels.push(wrong_relation(&terms, relation.verbaliser(), &gold_set, &mut rng));
                plan(&rels, &mut rng, 0.5, 0.7)
            };
            builder.walk(&backend, &grammar, &ids, first, &plan);
        }
    }

    let script = MockScript {
        vocab,
        rules: builder.rules(&backend),
        ..MockScript::default()
    };
    let mut dataset = String::new();
    for r in &recs {
        dataset.push_str(&serde_json::to_string(r)?);
        dataset.push('\n');
    }
    std::fs::write(dir.join("dialogues.jsonl"), &dataset)?;
    std::fs::write(dir.join("template.txt"), DEFAULT_TEMPLATE)?;
    std::fs::write(dir.join("script.json"), serde_json::to_string_pretty(&script)?)?;

    let ds = Dataset::parse(&dataset)?;
    let n_rules = script.rules.len();
    let mock = MockBackend::new(script)?;
    for constrained in [true, false] {
        let decoder = DecoderConfig { constrained, ..DecoderConfig::default() };
        let run = run_extract(&ds, &ExtractConfig::new(decoder, PromptMode::PerType), &mock)?;
        for o in &run.outputs {
            let want = ds.gold(MatchMode::Normalized).for_dialogue(&o.dialogue_id);
            let mut got = o.keys();
            got.sort();
            let mut want = want;
            want.sort();
            assert_eq!(got, want, "dialogue {} constrained={constrained}", o.dialogue_id);
        }
    }
    println!("{}", ds.stats());
    println!("{n_rules} rules, {} tokens, written to {}", mock.vocab_size(), dir.display());
    Ok(())
}
