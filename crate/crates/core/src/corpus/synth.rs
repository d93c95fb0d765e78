//! Deterministic synthetic world: a class-structured knowledge graph, a
//! pretraining corpus verbalizing it, a gazetteer, and typing / relation
//! task files.
//!
//! Entity `i` belongs to group `i / C` and class `i mod C`, where `C` is the
//! relation count. Relation `P{c}` always links a class `c` head to a class
//! `c + 1` tail, and the graph is built from group-level edges: an edge
//! `(g, g')` contributes the triple `(g·C + c, P{c}, g'·C + c + 1)` for every
//! class `c`. In an ambiguous group all `C` entities share one short name,
//! so a relation sentence written with short names has exactly one triple
//! per label behind it.

use std::collections::{BTreeSet, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::taskfile::{self, TaskRecord, TaskToken};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub vocab_size: usize,
    pub sentences: usize,
    pub sentences_per_doc: usize,
    /// Fraction of entities whose short name is shared with the other
    /// classes of their group.
    pub ambiguity: f64,
    /// Fraction of group edges held out for the relation test file.
    pub test_fraction: f64,
    pub typing_mentions_per_entity: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            entities: 50,
            relations: 5,
            triples: 200,
            vocab_size: 400,
            sentences: 256,
            sentences_per_doc: 4,
            ambiguity: 1.0,
            test_fraction: 0.2,
            typing_mentions_per_entity: 2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.relations;
        if c < 2 {
            return Err(Error::config("synthetic world needs at least 2 relations"));
        }
        if self.entities < 2 * c || self.entities % c != 0 {
            return Err(Error::config(
                "entity count must be a multiple of the relation count with at least two groups",
            ));
        }
        let groups = self.entities / c;
        if self.triples % c != 0 || self.triples / c > groups * groups || self.triples / c < groups {
            return Err(Error::config(
                "triple count must be a multiple of the relation count, at least one edge per group",
            ));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("ambiguity must lie in [0, 1] and test fraction in [0, 1)"));
        }
        if self.sentences == 0 || self.sentences_per_doc == 0 {
            return Err(Error::config("sentence counts must be positive"));
        }
        if self.vocab_size < super::vocab::RESERVED.len() {
            return Err(Error::config("vocab size smaller than the reserved tokens"));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.entities / self.relations
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    pub spec: SynthSpec,
    /// Short surface form per entity (possibly shared).
    pub short_names: Vec<String>,
    /// Unique `short qualifier` name per entity.
    pub full_names: Vec<String>,
    pub verbs: Vec<String>,
    pub fillers: Vec<String>,
    /// Group-level edges `(g, g')`.
    pub edges: Vec<(usize, usize)>,
    pub test_edges: Vec<(usize, usize)>,
    pub corpus: String,
    pub gazetteer: String,
    pub triples: String,
    pub relation_train: Vec<TaskRecord>,
    pub relation_test: Vec<TaskRecord>,
    pub typing_train: Vec<TaskRecord>,
    pub typing_test: Vec<TaskRecord>,
}

pub fn entity_id(i: usize) -> String {
    format!("Q{i}")
}

pub fn relation_id(c: usize) -> String {
    format!("P{c}")
}

pub fn class_label(c: usize) -> String {
    format!("class_{c}")
}

pub fn tier_label(c: usize) -> String {
    format!("tier_{}", c % 2)
}

struct Namer {
    used: HashSet<String>,
}

impl Namer {
    const ONSETS: [&'static str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: [&'static str; 5] = ["a", "e", "i", "o", "u"];
    const CODAS: [&'static str; 5] = ["", "n", "r", "s", "k"];

    fn word(&mut self, rng: &mut ChaCha8Rng, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(Self::ONSETS[rng.random_range(0..Self::ONSETS.len())]);
                w.push_str(Self::VOWELS[rng.random_range(0..Self::VOWELS.len())]);
            }
            w.push_str(Self::CODAS[rng.random_range(0..Self::CODAS.len())]);
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn record(words: &[String], mentions: Vec<(String, usize, usize)>, marked: Vec<usize>, labels: Vec<String>) -> TaskRecord {
    TaskRecord {
        tokens: words.iter().cloned().map(TaskToken::Text).collect(),
        mentions,
        marked,
        labels,
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let c = spec.relations;
    let groups = spec.groups();
    let mut rng = rng::stream(spec.seed, &[0x73796e]);
    let mut namer = Namer { used: HashSet::new() };

    let ambiguous_groups = (spec.ambiguity * spec.entities as f64 / c as f64).round() as usize;
    let mut group_order: Vec<usize> = (0..groups).collect();
    rng::shuffle(&mut group_order, &mut rng);
    let ambiguous: HashSet<usize> = group_order[..ambiguous_groups].iter().copied().collect();

    let mut short_names = vec![String::new(); spec.entities];
    for g in 0..groups {
        if ambiguous.contains(&g) {
            let name = namer.word(&mut rng, 2);
            for k in 0..c {
                short_names[g * c + k] = name.clone();
            }
        } else {
            for k in 0..c {
                short_names[g * c + k] = namer.word(&mut rng, 2);
            }
        }
    }
    let full_names: Vec<String> = short_names
        .iter()
        .map(|s| format!("{s} {}", namer.word(&mut rng, 1)))
        .collect();
    let verbs: Vec<String> = (0..c).map(|_| namer.word(&mut rng, 2)).collect();
    let fillers: Vec<String> = (0..6).map(|_| namer.word(&mut rng, 1)).collect();

    // Group edges: every group gets one outgoing edge first so walks never
    // stall, then the rest are drawn uniformly.
    let target = spec.triples / c;
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut out_edges = Vec::new();
    for g in 0..groups {
        let e = (g, rng.random_range(0..groups));
        edges.insert(e);
        out_edges.push(e);
    }
    while edges.len() < target {
        let e = (rng.random_range(0..groups), rng.random_range(0..groups));
        if edges.insert(e) {
            out_edges.push(e);
        }
    }
    let mut edge_list = out_edges;
    let triple_of = |(g, h): (usize, usize), k: usize| (g * c + k, k, h * c + (k + 1) % c);

    let mut triples = String::new();
    for &e in &edge_list {
        for k in 0..c {
            let (head, r, tail) = triple_of(e, k);
            triples.push_str(&format!("{}\t{}\t{}\n", entity_id(head), relation_id(r), entity_id(tail)));
        }
    }

    let mut gazetteer = String::new();
    for (i, name) in full_names.iter().enumerate() {
        gazetteer.push_str(&format!("{name}\t{}\n", entity_id(i)));
    }

    // Corpus: each document is a walk; a sentence verbalizes two chained
    // triples and the next sentence starts where the previous one ended.
    let outgoing = |entity: usize| -> Vec<(usize, usize)> {
        let (g, k) = (entity / c, entity % c);
        edge_list
            .iter()
            .filter(|e| e.0 == g)
            .map(|&e| {
                let (_, r, t) = triple_of(e, k);
                (r, t)
            })
            .collect()
    };
    let mut corpus = String::new();
    let mut written = 0;
    while written < spec.sentences {
        if written > 0 {
            corpus.push('\n');
        }
        let mut at = rng.random_range(0..spec.entities);
        for _ in 0..spec.sentences_per_doc.min(spec.sentences - written) {
            let mut line = full_names[at].clone();
            for _ in 0..2 {
                let options = outgoing(at);
                let (r, t) = options[rng.random_range(0..options.len())];
                line.push(' ');
                line.push_str(&verbs[r]);
                line.push(' ');
                line.push_str(&full_names[t]);
                at = t;
            }
            line.push_str(" .\n");
            corpus.push_str(&line);
            written += 1;
        }
    }

    // Relation task: split at group-edge level so test texts are unseen.
    rng::shuffle(&mut edge_list, &mut rng);
    let n_test = ((spec.test_fraction * edge_list.len() as f64).round() as usize)
        .clamp(usize::from(spec.test_fraction > 0.0), edge_list.len() - 1);
    let test_edges = edge_list[..n_test].to_vec();
    let train_edges = edge_list[n_test..].to_vec();
    let relation = |edges: &[(usize, usize)], rng: &mut ChaCha8Rng| -> Vec<TaskRecord> {
        let mut out = Vec::new();
        for &e in edges {
            for k in 0..c {
                let (head, r, tail) = triple_of(e, k);
                let filler = fillers[rng.random_range(0..fillers.len())].clone();
                let words = vec![short_names[head].clone(), filler, short_names[tail].clone(), ".".into()];
                out.push(record(
                    &words,
                    vec![(entity_id(head), 0, 1), (entity_id(tail), 2, 3)],
                    vec![0, 1],
                    vec![relation_id(r)],
                ));
            }
        }
        rng::shuffle(&mut out, rng);
        out
    };
    let relation_train = relation(&train_edges, &mut rng);
    let relation_test = relation(&test_edges, &mut rng);

    let mut typing = Vec::new();
    for e in 0..spec.entities {
        for _ in 0..spec.typing_mentions_per_entity {
            let before = fillers[rng.random_range(0..fillers.len())].clone();
            let after = fillers[rng.random_range(0..fillers.len())].clone();
            let words = vec![before, short_names[e].clone(), after, ".".into()];
            let k = e % c;
            typing.push(record(
                &words,
                vec![(entity_id(e), 1, 2)],
                vec![0],
                vec![class_label(k), tier_label(k)],
            ));
        }
    }
    rng::shuffle(&mut typing, &mut rng);
    let n_typing_test = (spec.test_fraction * typing.len() as f64).round() as usize;
    let typing_test = typing[..n_typing_test].to_vec();
    let typing_train = typing[n_typing_test..].to_vec();

    Ok(SynthWorld {
        spec: spec.clone(),
        short_names,
        full_names,
        verbs,
        fillers,
        edges: edge_list,
        test_edges,
        corpus,
        gazetteer,
        triples,
        relation_train,
        relation_test,
        typing_train,
        typing_test,
    })
}

impl SynthWorld {
    /// Best accuracy any classifier seeing only the relation test texts
    /// can reach: for each test example, the largest share of one label
    /// among all graph triples written with the same head and tail surface.
    pub fn text_only_bound(&self) -> f64 {
        let c = self.spec.relations;
        let mut total = 0.0;
        for rec in &self.relation_test {
            let surface = |m: usize| {
                let (e, _, _) = &rec.mentions[rec.marked[m]];
                let i: usize = e[1..].parse().expect("synthetic id");
                self.short_names[i].clone()
            };
            let (hs, ts) = (surface(0), surface(1));
            let mut counts = vec![0usize; c];
            for &e in &self.edges {
                for k in 0..c {
                    let head = e.0 * c + k;
                    let tail = e.1 * c + (k + 1) % c;
                    if self.short_names[head] == hs && self.short_names[tail] == ts {
                        counts[k] += 1;
                    }
                }
            }
            let n: usize = counts.iter().sum();
            total += *counts.iter().max().expect("nonempty") as f64 / n as f64;
        }
        total / self.relation_test.len() as f64
    }

    /// All text the subword vocabulary is learned from.
    pub fn vocab_texts(&self) -> Vec<String> {
        let mut texts: Vec<String> = self.corpus.lines().map(str::to_owned).collect();
        texts.extend(self.short_names.iter().cloned());
        texts.extend(self.fillers.iter().cloned());
        texts
    }

    pub fn relation_train_jsonl(&self) -> String {
        taskfile::to_jsonl(&self.relation_train)
    }

    pub fn relation_test_jsonl(&self) -> String {
        taskfile::to_jsonl(&self.relation_test)
    }

    pub fn typing_train_jsonl(&self) -> String {
        taskfile::to_jsonl(&self.typing_train)
    }

    pub fn typing_test_jsonl(&self) -> String {
        taskfile::to_jsonl(&self.typing_test)
    }
}
