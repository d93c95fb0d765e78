//! Fine-tuning for entity typing and relation classification.

pub mod metrics;
pub mod rewrite;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::pretrain::EntitySlot;
use crate::corpus::taskfile::{TaskRecord, TaskToken};
use crate::corpus::SubwordVocab;
use crate::encoder::layers::{Dropout, Init, Linear};
use crate::encoder::{Bound, Encoder, EncoderInput};
use crate::error::{Error, Result};
use crate::ids::IdTable;
use crate::numerics::{kernels, Real, RowPick, Tape, Var};
use crate::optim::{Adam, AdamConfig, Schedule};
use crate::rng;

pub use metrics::{metrics_relation, metrics_typing, score, MetricReport};
pub use rewrite::{rewrite_relation, rewrite_typing, Rewrite};

const HEAD_STREAM: u64 = 0x7461_736b;
const SHUFFLE_STREAM: u64 = 0x7368_7566;
const DROPOUT_STREAM: u64 = 0x6674_6472;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Multi-label, independent sigmoids.
    Typing,
    /// Single-label softmax.
    Relation,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Typing => "typing",
            TaskKind::Relation => "relation",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "typing" => Ok(TaskKind::Typing),
            "relation" => Ok(TaskKind::Relation),
            other => Err(Error::config(format!("unknown task {other:?}; expected typing or relation"))),
        }
    }
}

/// Labels seen in training, in sorted order. Labels met only at
/// evaluation get ids past [`LabelSet::trained`] and can never be
/// predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    table: IdTable,
    trained: usize,
}

impl LabelSet {
    pub fn from_records(records: &[TaskRecord]) -> Self {
        let names: BTreeSet<&str> = records.iter().flat_map(|r| r.labels.iter().map(String::as_str)).collect();
        let table = IdTable::from_names(names).expect("distinct by construction");
        let trained = table.len();
        LabelSet { table, trained }
    }

    pub fn from_names(names: &[String]) -> Result<Self> {
        let table = IdTable::from_names(names)?;
        Ok(LabelSet {
            trained: table.len(),
            table,
        })
    }

    pub fn trained(&self) -> usize {
        self.trained
    }

    pub fn names(&self) -> &[String] {
        &self.table.names()[..self.trained]
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.table.get(name)
    }

    pub fn name(&self, id: usize) -> &str {
        self.table.name(id)
    }

    fn id_for_eval(&mut self, name: &str) -> (usize, bool) {
        match self.table.get(name) {
            Some(i) => (i, i >= self.trained),
            None => (self.table.intern(name), true),
        }
    }
}

/// A rewritten, aligned, labelled fine-tuning input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskExample {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub slots: Vec<EntitySlot>,
    /// `(token position, slot)`, sorted by position.
    pub alignment: Vec<(usize, usize)>,
    pub labels: BTreeSet<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PrepareStats {
    /// Mentions whose entity is not in the entity table.
    pub unknown_entities: usize,
    /// Gold labels absent from training.
    pub unseen_labels: usize,
}

fn subword_ids(rec: &TaskRecord, vocab: &SubwordVocab) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut ids = Vec::new();
    let mut starts = Vec::with_capacity(rec.tokens.len() + 1);
    for t in &rec.tokens {
        starts.push(ids.len());
        match t {
            TaskToken::Id(i) => {
                if *i >= vocab.len() {
                    return Err(Error::TaskData(format!("token id {i} outside vocabulary of {}", vocab.len())));
                }
                ids.push(*i);
            }
            TaskToken::Text(w) => {
                let pieces = vocab.tokenize(w);
                if pieces.is_empty() {
                    return Err(Error::TaskData(format!("token {w:?} produces no subwords")));
                }
                ids.extend(pieces.iter().map(|p| p.id));
            }
        }
    }
    starts.push(ids.len());
    Ok((ids, starts))
}

fn prepare_one(
    rec: &TaskRecord,
    kind: TaskKind,
    vocab: &SubwordVocab,
    entities: &IdTable,
    labels: &mut LabelSet,
    stats: &mut PrepareStats,
) -> Result<TaskExample> {
    rec.validate()?;
    let (ids, starts) = subword_ids(rec, vocab)?;
    let span = |k: usize| -> Option<(usize, usize)> {
        rec.marked
            .get(k)
            .and_then(|&m| rec.mentions.get(m))
            .map(|(_, s, e)| (starts[*s], starts[*e]))
    };
    let rewrite = match kind {
        TaskKind::Typing => {
            if rec.marked.len() > 1 {
                return Err(Error::TaskData("typing example marks more than one mention".into()));
            }
            rewrite_typing(&ids, span(0))?
        }
        TaskKind::Relation => {
            let (Some(head), Some(tail)) = (span(0), span(1)) else {
                return Err(Error::TaskData("relation example needs a head and a tail mention".into()));
            };
            rewrite_relation(&ids, head, tail)?
        }
    };
    let mut aligned: Vec<(usize, usize)> = Vec::new();
    for (entity, s, _) in &rec.mentions {
        match entities.get(entity) {
            Some(e) => {
                let pos = rewrite.positions[starts[*s]];
                if !aligned.iter().any(|a| a.0 == pos) {
                    aligned.push((pos, e));
                }
            }
            None => stats.unknown_entities += 1,
        }
    }
    aligned.sort();
    let slots = aligned.iter().map(|&(_, e)| EntitySlot::Entity(e)).collect();
    let alignment = aligned.iter().enumerate().map(|(slot, &(pos, _))| (pos, slot)).collect();
    if kind == TaskKind::Relation && rec.labels.len() != 1 {
        return Err(Error::TaskData(format!(
            "relation example has {} labels, expected one",
            rec.labels.len()
        )));
    }
    let mut label_ids = BTreeSet::new();
    for l in &rec.labels {
        let (id, unseen) = labels.id_for_eval(l);
        if unseen {
            stats.unseen_labels += 1;
        }
        label_ids.insert(id);
    }
    Ok(TaskExample {
        segments: vec![0; rewrite.tokens.len()],
        tokens: rewrite.tokens,
        slots,
        alignment,
        labels: label_ids,
    })
}

/// Tokenizes, rewrites and aligns task records. Unknown labels are kept
/// with ids past the trained range and counted.
pub fn prepare(
    records: &[TaskRecord],
    kind: TaskKind,
    vocab: &SubwordVocab,
    entities: &IdTable,
    labels: &mut LabelSet,
) -> Result<(Vec<TaskExample>, PrepareStats)> {
    let mut stats = PrepareStats::default();
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let ex = prepare_one(rec, kind, vocab, entities, labels, &mut stats)
            .map_err(|e| Error::TaskData(format!("record {}: {e}", i + 1)))?;
        out.push(ex);
    }
    if stats.unseen_labels > 0 {
        log::warn!(
            "{} gold labels do not occur in training and will always be scored wrong",
            stats.unseen_labels
        );
    }
    Ok((out, stats))
}

/// Encoder with a classification head on the `[CLS]` output.
#[derive(Clone, Debug)]
pub struct TaskModel<T: Real> {
    pub encoder: Encoder<T>,
    pub head: Linear,
    pub kind: TaskKind,
}

impl<T: Real> TaskModel<T> {
    /// Adds a fresh head with `labels` outputs to `encoder`.
    pub fn new(mut encoder: Encoder<T>, kind: TaskKind, labels: usize, seed: u64) -> Result<Self> {
        if labels == 0 {
            return Err(Error::TaskData("no labels in training data".into()));
        }
        let hidden = encoder.config.hidden;
        let std = encoder.config.init_std;
        let mut r = rng::stream(seed, &[HEAD_STREAM]);
        let head = Linear::new(
            &mut Init {
                store: &mut encoder.params,
                rng: &mut r,
                std,
            },
            "task.head",
            hidden,
            labels,
            true,
        );
        Ok(TaskModel { encoder, head, kind })
    }

    pub fn labels(&self) -> usize {
        self.encoder.params.get(self.head.weight).shape()[1]
    }

    /// `[batch, labels]` logits. Without entities every mention is
    /// dropped, which leaves each token on the unaligned fusion path.
    pub fn logits<R: rand::Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        batch: &[&TaskExample],
        use_entities: bool,
        drop: &mut Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let mut outputs = Vec::with_capacity(batch.len());
        for ex in batch {
            let (slots, alignment): (&[EntitySlot], &[(usize, usize)]) =
                if use_entities { (&ex.slots, &ex.alignment) } else { (&[], &[]) };
            let out = self.encoder.encode(
                tape,
                p,
                &EncoderInput {
                    tokens: &ex.tokens,
                    segments: &ex.segments,
                    slots,
                    alignment,
                },
                drop,
            )?;
            outputs.push(out.tokens);
        }
        let picks: Vec<RowPick> = (0..batch.len()).map(|i| RowPick::From { source: i, row: 0 }).collect();
        let cls = tape.rows(&outputs, &picks, self.encoder.config.hidden)?;
        self.head.forward(tape, p, cls)
    }

    pub fn loss(&self, tape: &mut Tape<T>, logits: Var, batch: &[&TaskExample]) -> Result<Var> {
        let n = self.labels();
        match self.kind {
            TaskKind::Relation => {
                let targets: Vec<usize> = batch
                    .iter()
                    .map(|ex| *ex.labels.iter().next().expect("one label"))
                    .collect();
                tape.cross_entropy(logits, &targets)
            }
            TaskKind::Typing => {
                let mut targets = Vec::with_capacity(batch.len() * n);
                for ex in batch {
                    targets.extend((0..n).map(|l| if ex.labels.contains(&l) { T::one() } else { T::zero() }));
                }
                tape.bce_with_logits(logits, &targets)
            }
        }
    }

    /// Softmax probabilities for relations, per-label sigmoids for typing.
    pub fn scores(&self, ex: &TaskExample, use_entities: bool) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.encoder.bind(&mut tape);
        let logits = self.logits::<ChaCha8Rng>(&mut tape, &p, &[ex], use_entities, &mut None)?;
        let row: Vec<f64> = tape.value(logits).data().iter().map(|v| v.as_f64()).collect();
        Ok(match self.kind {
            TaskKind::Relation => {
                let mut out = vec![0.0; row.len()];
                kernels::softmax_row(&row, &mut out);
                out
            }
            TaskKind::Typing => row.into_iter().map(kernels::sigmoid).collect(),
        })
    }

    pub fn predict(&self, ex: &TaskExample, use_entities: bool) -> Result<BTreeSet<usize>> {
        let s = self.scores(ex, use_entities)?;
        Ok(match self.kind {
            TaskKind::Relation => {
                let mut best = 0;
                for (i, &v) in s.iter().enumerate() {
                    if v > s[best] {
                        best = i;
                    }
                }
                BTreeSet::from([best])
            }
            TaskKind::Typing => s.iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub use_entities: bool,
}

impl FinetuneConfig {
    pub fn desk() -> Self {
        FinetuneConfig {
            epochs: 6,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            use_entities: true,
        }
    }
}

/// Trains every parameter except the frozen entity table. Returns the
/// mean loss of each epoch.
pub fn finetune(model: &mut TaskModel<f32>, train: &[TaskExample], cfg: &FinetuneConfig) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if train.is_empty() {
        return Err(Error::TaskData("empty training set".into()));
    }
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = Schedule::new(cfg.learning_rate, (batches_per_epoch * cfg.epochs) as u64);
    let mut adam = Adam::new(&model.encoder.params, AdamConfig::default());
    let mut drop_rng = rng::stream(cfg.seed, &[DROPOUT_STREAM]);
    let p_drop = model.encoder.config.dropout;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng::shuffle(&mut order, &mut rng::stream(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TaskExample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let p = model.encoder.bind(&mut tape);
            let mut drop = Some(Dropout {
                p: p_drop,
                rng: &mut drop_rng,
            });
            let logits = model.logits(&mut tape, &p, &batch, cfg.use_entities, &mut drop)?;
            let loss = model.loss(&mut tape, logits, &batch)?;
            let value = tape.scalar(loss).as_f64();
            let step = adam.step + 1;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("task loss {value} in epoch {}", epoch + 1),
                });
            }
            total += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            adam.update(&mut model.encoder.params, &p, &grads, schedule.rate(step));
        }
        let mean = total / train.len() as f64;
        log::info!("epoch {} task loss {mean:.4}", epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}

/// Predictions and metrics on `examples`. `null` names a label excluded
/// from per-class scores.
pub fn evaluate(model: &TaskModel<f32>, examples: &[TaskExample], use_entities: bool, null: Option<usize>) -> Result<MetricReport> {
    let mut pred = Vec::with_capacity(examples.len());
    for ex in examples {
        pred.push(model.predict(ex, use_entities)?);
    }
    let gold: Vec<BTreeSet<usize>> = examples.iter().map(|e| e.labels.clone()).collect();
    score(&pred, &gold, null)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{ENT, HD, TL};
    use crate::encoder::ModelConfig;
    use crate::numerics::{grad_check, GradCheckOptions, Tensor};
    use rand::SeedableRng;

    fn vocab() -> SubwordVocab {
        SubwordVocab::learn(&["alpha beta gamma delta .", "alpha gamma"], 40)
    }

    fn record(labels: &[&str]) -> TaskRecord {
        TaskRecord {
            tokens: ["alpha", "beta", "gamma", "delta", "."].iter().map(|w| TaskToken::Text(w.to_string())).collect(),
            mentions: vec![("Q1".into(), 0, 1), ("Q2".into(), 2, 4), ("Q9".into(), 4, 5)],
            marked: vec![0, 1],
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn entities() -> IdTable {
        IdTable::from_names(["Q0", "Q1", "Q2"]).unwrap()
    }

    #[test]
    fn relation_preparation() {
        let v = vocab();
        let recs = [record(&["P1"])];
        let mut labels = LabelSet::from_records(&recs);
        let (ex, stats) = prepare(&recs, TaskKind::Relation, &v, &entities(), &mut labels).unwrap();
        let ex = &ex[0];
        assert_eq!(ex.tokens[1], HD);
        assert_eq!(ex.tokens.iter().filter(|&&t| t == HD).count(), 2);
        assert_eq!(ex.tokens.iter().filter(|&&t| t == TL).count(), 2);
        assert_eq!(ex.slots, [EntitySlot::Entity(1), EntitySlot::Entity(2)]);
        assert_eq!(ex.alignment[0], (2, 0));
        assert_eq!(ex.tokens[ex.alignment[1].0 - 1], TL);
        assert_eq!(stats.unknown_entities, 1);
        assert_eq!(ex.labels, BTreeSet::from([0]));
    }

    #[test]
    fn typing_preparation_and_unseen_labels() {
        let v = vocab();
        let mut rec = record(&["b", "a"]);
        rec.marked = vec![1];
        let mut labels = LabelSet::from_records(&[rec.clone()]);
        assert_eq!(labels.names(), ["a", "b"]);
        let mut test = rec.clone();
        test.labels.push("zz".into());
        let (ex, stats) = prepare(&[test], TaskKind::Typing, &v, &entities(), &mut labels).unwrap();
        assert_eq!(stats.unseen_labels, 1);
        assert_eq!(ex[0].labels, BTreeSet::from([0, 1, 2]));
        assert_eq!(labels.trained(), 2);
        assert_eq!(ex[0].tokens.iter().filter(|&&t| t == ENT).count(), 2);

        rec.marked.clear();
        assert!(prepare(&[rec], TaskKind::Typing, &v, &entities(), &mut labels).is_err());
    }

    #[test]
    fn overlapping_relation_mentions_rejected() {
        let v = vocab();
        let mut rec = record(&["P1"]);
        rec.mentions[1] = ("Q2".into(), 0, 2);
        let mut labels = LabelSet::from_records(&[rec.clone()]);
        assert!(matches!(
            prepare(&[rec], TaskKind::Relation, &v, &entities(), &mut labels),
            Err(Error::TaskData(_))
        ));
    }

    fn tiny_encoder<T: Real>(vocab: usize) -> Encoder<T> {
        let c = ModelConfig {
            text_layers: 1,
            knowledge_layers: 1,
            hidden: 8,
            entity_hidden: 4,
            heads: 2,
            entity_heads: 2,
            vocab_size: vocab,
            entity_count: 3,
            max_len: 16,
            ff_mult: 2,
            dropout: 0.0,
            init_std: 0.3,
            seed: 1,
        };
        let t = Tensor::<f64>::randn(&[3, 4], 0.5, &mut ChaCha8Rng::seed_from_u64(2));
        Encoder::new(c, t.cast()).unwrap()
    }

    fn examples(kind: TaskKind) -> (Vec<TaskExample>, usize) {
        let v = vocab();
        let mut recs = vec![record(&["P1"]), record(&["P2"])];
        recs[1].tokens.swap(1, 3);
        if kind == TaskKind::Typing {
            recs[0].labels = vec!["a".into(), "b".into()];
            recs[1].labels = vec!["c".into()];
            for r in &mut recs {
                r.marked = vec![0];
            }
        }
        let mut labels = LabelSet::from_records(&recs);
        let (ex, _) = prepare(&recs, kind, &v, &entities(), &mut labels).unwrap();
        (ex, v.len())
    }

    #[test]
    fn zero_head_is_uniform() {
        for kind in [TaskKind::Relation, TaskKind::Typing] {
            let (ex, v) = examples(kind);
            let mut m = TaskModel::new(tiny_encoder::<f32>(v), kind, 3, 0).unwrap();
            m.encoder.params.get_mut(m.head.weight).data_mut().fill(0.0);
            let s = m.scores(&ex[0], true).unwrap();
            assert_eq!(s.len(), 3);
            let expect = if kind == TaskKind::Relation { 1.0 / 3.0 } else { 0.5 };
            assert!(s.iter().all(|&x| (x - expect).abs() < 1e-12), "{s:?}");
        }
    }

    #[test]
    fn task_loss_gradients() {
        for kind in [TaskKind::Relation, TaskKind::Typing] {
            let (ex, v) = examples(kind);
            let m = TaskModel::new(tiny_encoder::<f64>(v), kind, 3, 0).unwrap();
            let batch: Vec<&TaskExample> = ex.iter().collect();
            let report = grad_check(
                |tape, vars| {
                    let p = Bound::from_vars(vars.to_vec());
                    let l = m.logits::<ChaCha8Rng>(tape, &p, &batch, true, &mut None)?;
                    m.loss(tape, l, &batch)
                },
                m.encoder.params.tensors(),
                &GradCheckOptions {
                    max_probes: Some(12),
                    ..GradCheckOptions::default()
                },
            )
            .unwrap();
            assert!(report.passes(1e-6), "{kind}: {}", report.max_rel_err);
        }
    }

    #[test]
    fn finetune_is_deterministic_and_learns() {
        let (ex, v) = examples(TaskKind::Relation);
        let run = || {
            let mut m = TaskModel::new(tiny_encoder::<f32>(v), TaskKind::Relation, 2, 4).unwrap();
            let cfg = FinetuneConfig {
                epochs: 30,
                batch_size: 2,
                learning_rate: 1e-2,
                seed: 4,
                use_entities: true,
            };
            let losses = finetune(&mut m, &ex, &cfg).unwrap();
            (losses, evaluate(&m, &ex, true, None).unwrap(), m.encoder.params.clone())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert!(a.0.last().unwrap() < &a.0[0]);
        assert_eq!(a.1.strict, 1.0);
    }

    #[test]
    fn zero_epochs_leave_model_untrained() {
        let (ex, v) = examples(TaskKind::Relation);
        let mut m = TaskModel::new(tiny_encoder::<f32>(v), TaskKind::Relation, 2, 4).unwrap();
        let before = m.encoder.params.clone();
        let losses = finetune(&mut m, &ex, &FinetuneConfig { epochs: 0, ..FinetuneConfig::desk() }).unwrap();
        assert!(losses.is_empty());
        assert_eq!(m.encoder.params, before);
    }
}
