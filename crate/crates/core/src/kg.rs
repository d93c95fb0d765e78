//! Knowledge-graph triples and TransE embeddings.
//!
//! Training is plain SGD on the margin ranking loss
//! `max(0, γ + d(h, r, t) − d(h', r, t'))` with one side of each positive
//! corrupted uniformly at random. Entity rows are projected back to the unit
//! sphere after initialization and after every epoch.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::ids::IdTable;
use crate::numerics::{Real, Tensor};
use crate::rng::{self, Draw};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TripleStore {
    entities: IdTable,
    relations: IdTable,
    triples: Vec<Triple>,
    known: HashSet<Triple>,
}

impl TripleStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a store whose entity and relation indices follow the given
    /// tables, so embeddings line up with an existing vocabulary.
    pub fn with_vocab(entities: IdTable, relations: IdTable) -> Self {
        TripleStore {
            entities,
            relations,
            ..Self::default()
        }
    }

    /// Adds a triple by string ids. Returns false for a duplicate.
    pub fn insert(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let t = Triple {
            head: self.entities.intern(head),
            relation: self.relations.intern(relation),
            tail: self.entities.intern(tail),
        };
        self.insert_indexed(t)
    }

    fn insert_indexed(&mut self, t: Triple) -> bool {
        if self.known.insert(t) {
            self.triples.push(t);
            true
        } else {
            false
        }
    }

    /// Parses `head<TAB>relation<TAB>tail` lines. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut store = Self::new();
        store.extend_from_text(text, "triples")?;
        Ok(store)
    }

    pub fn extend_from_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::format(
                    format!("{source}:{}", lineno + 1),
                    "expected head<TAB>relation<TAB>tail",
                ));
            }
            self.insert(fields[0], fields[1], fields[2]);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut store = Self::new();
        store.extend_from_text(&text, &path.display().to_string())?;
        Ok(store)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(self.entities.name(t.head));
            out.push('\t');
            out.push_str(self.relations.name(t.relation));
            out.push('\t');
            out.push_str(self.entities.name(t.tail));
            out.push('\n');
        }
        out
    }

    pub fn entities(&self) -> &IdTable {
        &self.entities
    }

    pub fn relations(&self) -> &IdTable {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.known.contains(t)
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" | "l1" | "L1" => Ok(Norm::L1),
            "2" | "l2" | "L2" => Ok(Norm::L2),
            other => Err(Error::config(format!("norm must be 1 or 2, got {other:?}"))),
        }
    }

    pub fn order(self) -> u8 {
        match self {
            Norm::L1 => 1,
            Norm::L2 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgEmbedConfig {
    pub dim: usize,
    pub margin: f64,
    pub negatives: usize,
    pub norm: Norm,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for KgEmbedConfig {
    fn default() -> Self {
        KgEmbedConfig {
            dim: 16,
            margin: 1.0,
            negatives: 1,
            norm: Norm::L2,
            learning_rate: 0.01,
            epochs: 50,
            seed: 0,
        }
    }
}

impl KgEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("kg dim must be positive"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::config("kg margin must be positive"));
        }
        if self.negatives == 0 {
            return Err(Error::config("kg negatives must be positive"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("kg learning rate must be non-negative"));
        }
        Ok(())
    }
}

/// Entity and relation tables with their id vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub entity: Tensor<f32>,
    pub relation: Tensor<f32>,
    pub entity_ids: IdTable,
    pub relation_ids: IdTable,
}

impl EmbeddingStore {
    pub fn dim(&self) -> usize {
        self.entity.last_dim()
    }

    pub fn entity_row(&self, i: usize) -> &[f32] {
        self.entity.row(i)
    }

    pub fn relation_row(&self, i: usize) -> &[f32] {
        self.relation.row(i)
    }

    pub fn distance(&self, t: &Triple, norm: Norm) -> f32 {
        distance(
            self.entity_row(t.head),
            self.relation_row(t.relation),
            self.entity_row(t.tail),
            norm,
        )
    }
}

/// `‖h + r − t‖` under the given norm.
pub fn transe_distance<T: Real>(h: &[T], r: &[T], t: &[T], norm: Norm) -> Result<T> {
    if h.len() != r.len() || h.len() != t.len() {
        return Err(Error::Shape {
            op: "transe_distance",
            lhs: vec![h.len(), r.len()],
            rhs: vec![t.len()],
        });
    }
    Ok(distance(h, r, t, norm))
}

fn distance<T: Real>(h: &[T], r: &[T], t: &[T], norm: Norm) -> T {
    let diffs = h.iter().zip(r).zip(t).map(|((&h, &r), &t)| h + r - t);
    match norm {
        Norm::L1 => diffs.map(T::abs).sum(),
        Norm::L2 => diffs.map(|d| d * d).sum::<T>().sqrt(),
    }
}

/// `max(0, γ + pos − neg)`.
pub fn margin_loss<T: Real>(pos: T, neg: T, margin: T) -> T {
    (margin + pos - neg).max(T::zero())
}

fn normalize_rows(data: &mut [f32], dim: usize) {
    for row in data.chunks_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Seeded initialization: uniform in `±6/√d`, every row unit-normalized.
pub fn init(store: &TripleStore, cfg: &KgEmbedConfig) -> Result<EmbeddingStore> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(Error::config("triple store is empty"));
    }
    let d = cfg.dim;
    let bound = 6.0 / (d as f32).sqrt();
    let dist = Uniform::new(-bound, bound).expect("finite bounds");
    let mut rng = rng::stream(cfg.seed, &[0x6b67]);
    let mut table = |rows: usize| -> Result<Tensor<f32>> {
        let mut data: Vec<f32> = (0..rows * d).map(|_| dist.sample(&mut rng)).collect();
        normalize_rows(&mut data, d);
        Tensor::new(vec![rows, d], data)
    };
    Ok(EmbeddingStore {
        entity: table(store.entities().len())?,
        relation: table(store.relations().len())?,
        entity_ids: store.entities().clone(),
        relation_ids: store.relations().clone(),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean margin loss over all (positive, negative) pairs in each epoch.
    pub epoch_losses: Vec<f64>,
    /// Positives for which no non-true corruption was found.
    pub skipped_negatives: usize,
}

/// Draws a corruption of `t` that is not a known triple, or `None` after a
/// bounded number of attempts.
fn corrupt<D: Draw + ?Sized>(store: &TripleStore, t: &Triple, draw: &mut D) -> Option<Triple> {
    let n = store.entities().len();
    if n < 2 {
        return None;
    }
    for _ in 0..(8 * n).max(64) {
        let corrupt_head = draw.unit() < 0.5;
        let mut e = draw.below(n - 1);
        let original = if corrupt_head { t.head } else { t.tail };
        if e >= original {
            e += 1;
        }
        let c = if corrupt_head {
            Triple { head: e, ..*t }
        } else {
            Triple { tail: e, ..*t }
        };
        if !store.contains(&c) {
            return Some(c);
        }
    }
    None
}

/// Gradient of the distance with respect to `h` (and `r`; `t` gets the
/// negation), written into `out`.
fn distance_grad(h: &[f32], r: &[f32], t: &[f32], norm: Norm, out: &mut [f32]) {
    for (o, ((&h, &r), &t)) in out.iter_mut().zip(h.iter().zip(r).zip(t)) {
        *o = h + r - t;
    }
    match norm {
        Norm::L1 => out.iter_mut().for_each(|v| {
            *v = if *v > 0.0 {
                1.0
            } else if *v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Norm::L2 => {
            let n = out.iter().map(|v| v * v).sum::<f32>().sqrt();
            if n > 0.0 {
                out.iter_mut().for_each(|v| *v /= n);
            } else {
                out.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

fn step_triple(
    ent: &mut [f32],
    rel: &mut [f32],
    d: usize,
    t: &Triple,
    sign: f32,
    lr: f32,
    norm: Norm,
    grad: &mut [f32],
) {
    distance_grad(
        &ent[t.head * d..(t.head + 1) * d],
        &rel[t.relation * d..(t.relation + 1) * d],
        &ent[t.tail * d..(t.tail + 1) * d],
        norm,
        grad,
    );
    let s = sign * lr;
    for k in 0..d {
        ent[t.head * d + k] -= s * grad[k];
        rel[t.relation * d + k] -= s * grad[k];
        ent[t.tail * d + k] += s * grad[k];
    }
}

/// Trains TransE from the seeded initialization.
pub fn train(store: &TripleStore, cfg: &KgEmbedConfig) -> Result<(EmbeddingStore, TrainLog)> {
    let mut emb = init(store, cfg)?;
    let d = cfg.dim;
    let lr = cfg.learning_rate as f32;
    let margin = cfg.margin as f32;
    let mut ent = emb.entity.data().to_vec();
    let mut rel = emb.relation.data().to_vec();
    let mut grad = vec![0.0f32; d];
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..store.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(cfg.seed, &[0x7472, epoch as u64]);
        rng::shuffle(&mut order, &mut rng);
        let mut total = 0.0f64;
        let mut pairs = 0usize;
        for &i in &order {
            let pos = store.triples()[i];
            for _ in 0..cfg.negatives {
                let Some(neg) = corrupt(store, &pos, &mut rng) else {
                    log.skipped_negatives += 1;
                    continue;
                };
                let dp = distance(
                    &ent[pos.head * d..(pos.head + 1) * d],
                    &rel[pos.relation * d..(pos.relation + 1) * d],
                    &ent[pos.tail * d..(pos.tail + 1) * d],
                    cfg.norm,
                );
                let dn = distance(
                    &ent[neg.head * d..(neg.head + 1) * d],
                    &rel[neg.relation * d..(neg.relation + 1) * d],
                    &ent[neg.tail * d..(neg.tail + 1) * d],
                    cfg.norm,
                );
                let loss = margin_loss(dp, dn, margin);
                total += f64::from(loss);
                pairs += 1;
                if loss > 0.0 {
                    step_triple(&mut ent, &mut rel, d, &pos, 1.0, lr, cfg.norm, &mut grad);
                    step_triple(&mut ent, &mut rel, d, &neg, -1.0, lr, cfg.norm, &mut grad);
                }
            }
        }
        normalize_rows(&mut ent, d);
        if ent.iter().chain(&rel).any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: epoch as u64,
                detail: "non-finite TransE embedding".into(),
            });
        }
        log.epoch_losses
            .push(if pairs == 0 { 0.0 } else { total / pairs as f64 });
    }

    emb.entity = Tensor::new(emb.entity.shape().to_vec(), ent)?;
    emb.relation = Tensor::new(emb.relation.shape().to_vec(), rel)?;
    Ok((emb, log))
}

/// Means over consecutive disjoint windows of `width` epochs; a trailing
/// partial window is dropped.
pub fn window_means(losses: &[f64], width: usize) -> Vec<f64> {
    losses
        .chunks_exact(width)
        .map(|w| w.iter().sum::<f64>() / width as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkPredictionReport {
    pub hits_at_1: f64,
    pub hits_at_10: f64,
    pub mean_rank: f64,
}

/// Filtered tail ranking. Candidates forming another known triple are
/// skipped; ties with the true tail count against it.
pub fn rank_tail(store: &TripleStore, emb: &EmbeddingStore, t: &Triple, norm: Norm) -> usize {
    let target = emb.distance(t, norm);
    let mut rank = 1;
    for e in 0..emb.entity_ids.len() {
        if e == t.tail {
            continue;
        }
        let c = Triple { tail: e, ..*t };
        if store.contains(&c) {
            continue;
        }
        if emb.distance(&c, norm) <= target {
            rank += 1;
        }
    }
    rank
}

pub fn link_prediction_eval(
    store: &TripleStore,
    emb: &EmbeddingStore,
    triples: &[Triple],
    norm: Norm,
) -> LinkPredictionReport {
    if triples.is_empty() {
        return LinkPredictionReport {
            hits_at_1: 0.0,
            hits_at_10: 0.0,
            mean_rank: 0.0,
        };
    }
    let ranks: Vec<usize> = triples
        .iter()
        .map(|t| rank_tail(store, emb, t, norm))
        .collect();
    let n = ranks.len() as f64;
    LinkPredictionReport {
        hits_at_1: ranks.iter().filter(|&&r| r <= 1).count() as f64 / n,
        hits_at_10: ranks.iter().filter(|&&r| r <= 10).count() as f64 / n,
        mean_rank: ranks.iter().sum::<usize>() as f64 / n,
    }
}

/// Random knowledge graph used by tests and the acceptance suite: entities
/// `Q0..`, relations `P0..`, distinct random triples without self loops.
pub fn random_store<R: Rng + ?Sized>(
    entities: usize,
    relations: usize,
    triples: usize,
    rng: &mut R,
) -> Result<TripleStore> {
    if entities < 2 || relations == 0 || triples > entities * (entities - 1) * relations {
        return Err(Error::config("cannot place that many distinct triples"));
    }
    let ent = IdTable::from_names((0..entities).map(|i| format!("Q{i}")))?;
    let rel = IdTable::from_names((0..relations).map(|i| format!("P{i}")))?;
    let mut store = TripleStore::with_vocab(ent, rel);
    while store.len() < triples {
        let head = rng.random_range(0..entities);
        let tail = rng.random_range(0..entities);
        if head == tail {
            continue;
        }
        let relation = rng.random_range(0..relations);
        store.insert_indexed(Triple {
            head,
            relation,
            tail,
        });
    }
    Ok(store)
}

/// Knowledge graph with class structure: entity `i` has class
/// `i mod relations`, and relation `P{c}` links class `c` heads to class
/// `c + 1` tails. Triples are spread round-robin over relations.
pub fn typed_store<R: Rng + ?Sized>(
    entities: usize,
    relations: usize,
    triples: usize,
    rng: &mut R,
) -> Result<TripleStore> {
    if relations == 0 || entities < 2 * relations {
        return Err(Error::config("need at least two entities per class"));
    }
    let class_size = |c: usize| (entities - c).div_ceil(relations);
    let capacity: usize = (0..relations)
        .map(|c| class_size(c) * class_size((c + 1) % relations))
        .sum();
    if triples > capacity {
        return Err(Error::config("cannot place that many distinct typed triples"));
    }
    let ent = IdTable::from_names((0..entities).map(|i| format!("Q{i}")))?;
    let rel = IdTable::from_names((0..relations).map(|i| format!("P{i}")))?;
    let mut store = TripleStore::with_vocab(ent, rel);
    let mut relation = 0;
    while store.len() < triples {
        let next = (relation + 1) % relations;
        let head = relation + relations * rng.random_range(0..class_size(relation));
        let tail = next + relations * rng.random_range(0..class_size(next));
        if store.insert_indexed(Triple {
            head,
            relation,
            tail,
        }) || store.known.iter().filter(|t| t.relation == relation).count()
            == class_size(relation) * class_size(next)
        {
            relation = next;
        }
    }
    Ok(store)
}
