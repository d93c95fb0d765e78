//! Pretraining heads and losses: entity prediction over the aligned
//! candidates (dEA), masked tokens (MLM) and next-sentence (NSP), plus
//! the training loop that sums them.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::aligned::IndexedSentence;
use crate::corpus::pretrain::{self, CorruptionStats, PipelineConfig, PretrainExample};
use crate::encoder::layers::{Dropout, Init, Linear};
use crate::encoder::{Bound, Encoder, EncoderInput, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Real, RowPick, Tape, Tensor, Var};
use crate::optim::{Adam, AdamConfig, Schedule};
use crate::rng;

const HEAD_STREAM: u64 = 0x6865_6164;
const DROPOUT_STREAM: u64 = 0x6472_6f70;

pub const LOSS_LOG_HEADER: &str = "step,total,dea,mlm,nsp";

#[derive(Clone, Debug)]
pub struct PretrainHeads {
    /// Token output to entity space.
    pub dea: Linear,
    pub mlm: Linear,
    pub nsp: Linear,
}

/// Encoder plus pretraining heads, all in one parameter store.
#[derive(Clone, Debug)]
pub struct PretrainModel<T: Real> {
    pub encoder: Encoder<T>,
    pub heads: PretrainHeads,
}

impl<T: Real> PretrainModel<T> {
    pub fn new(config: ModelConfig, entity_table: Tensor<T>) -> Result<Self> {
        let mut encoder = Encoder::new(config, entity_table)?;
        let c = encoder.config.clone();
        let mut r = rng::stream(c.seed, &[HEAD_STREAM]);
        let mut init = Init {
            store: &mut encoder.params,
            rng: &mut r,
            std: c.init_std,
        };
        let heads = PretrainHeads {
            dea: Linear::new(&mut init, "head.dea", c.hidden, c.entity_hidden, true),
            mlm: Linear::new(&mut init, "head.mlm", c.hidden, c.vocab_size, true),
            nsp: Linear::new(&mut init, "head.nsp", c.hidden, 2, true),
        };
        Ok(PretrainModel { encoder, heads })
    }

    pub fn cast<U: Real>(&self) -> PretrainModel<U> {
        PretrainModel {
            encoder: self.encoder.cast(),
            heads: self.heads.clone(),
        }
    }
}

/// `linear(w) · e_j` for every token row and candidate.
pub fn dea_logits<T: Real>(tape: &mut Tape<T>, p: &Bound, head: &Linear, tokens: Var, candidates: Var) -> Result<Var> {
    let projected = head.forward(tape, p, tokens)?;
    let ct = tape.transpose(candidates)?;
    tape.matmul(projected, ct)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Include the entity prediction loss.
    pub dea: bool,
    /// Score only corrupted alignments in the entity loss.
    pub dea_corrupted_only: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            dea: true,
            dea_corrupted_only: false,
        }
    }
}

/// Component losses of one batch. Each component is a mean over its
/// pooled targets; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub dea: f64,
    pub mlm: f64,
    pub nsp: f64,
    pub dea_targets: usize,
    pub dea_correct: usize,
    pub mlm_targets: usize,
    /// Examples with no entity target.
    pub dea_skipped: usize,
    /// Examples with no masked token.
    pub mlm_skipped: usize,
}

impl LossReport {
    pub fn dea_accuracy(&self) -> f64 {
        if self.dea_targets == 0 {
            0.0
        } else {
            self.dea_correct as f64 / self.dea_targets as f64
        }
    }

    pub fn csv_line(&self, step: u64) -> String {
        format!("{step},{},{},{},{}", self.total, self.dea, self.mlm, self.nsp)
    }
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Builds the summed pretraining loss of `batch` on `tape`.
pub fn batch_loss<T: Real, R: Rng + ?Sized>(
    model: &PretrainModel<T>,
    tape: &mut Tape<T>,
    p: &Bound,
    batch: &[PretrainExample],
    opts: &LossOptions,
    drop: &mut Option<Dropout<'_, R>>,
) -> Result<(Var, LossReport)> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let enc = &model.encoder;
    let d = enc.config.entity_hidden;
    let mut report = LossReport::default();
    let mut outputs = Vec::with_capacity(batch.len());
    let mut dea_terms = Vec::new();
    for ex in batch {
        let out = enc.encode(
            tape,
            p,
            &EncoderInput {
                tokens: &ex.tokens,
                segments: &ex.segments,
                slots: &ex.slots,
                alignment: &ex.alignment,
            },
            drop,
        )?;
        outputs.push(out.tokens);
        if !opts.dea {
            continue;
        }
        let targets: Vec<_> = ex
            .entity_targets
            .iter()
            .filter(|t| t.corrupted || !opts.dea_corrupted_only)
            .collect();
        if targets.is_empty() {
            report.dea_skipped += 1;
            continue;
        }
        let picks: Vec<RowPick> = targets.iter().map(|t| RowPick::From { source: 0, row: t.position }).collect();
        let rows = tape.rows(&[out.tokens], &picks, enc.config.hidden)?;
        let mut cand = Vec::with_capacity(ex.candidates.len() * d);
        for &e in &ex.candidates {
            if e >= enc.config.entity_count {
                return Err(Error::Index {
                    context: "dEA candidate",
                    index: e,
                    bound: enc.config.entity_count,
                });
            }
            cand.extend_from_slice(enc.entity_table().row(e));
        }
        let cand = tape.constant(Tensor::new(vec![ex.candidates.len(), d], cand)?);
        let logits = dea_logits(tape, p, &model.heads.dea, rows, cand)?;
        let labels: Vec<usize> = targets.iter().map(|t| t.candidate).collect();
        for (i, &l) in labels.iter().enumerate() {
            if argmax(tape.value(logits).row(i)) == l {
                report.dea_correct += 1;
            }
        }
        let ce = tape.cross_entropy(logits, &labels)?;
        let weighted = tape.scale(ce, T::from_usize(labels.len()).expect("count fits"))?;
        report.dea_targets += labels.len();
        dea_terms.push(weighted);
    }

    let dea = if dea_terms.is_empty() {
        zero(tape)
    } else {
        let mut s = dea_terms[0];
        for &t in &dea_terms[1..] {
            s = tape.add(s, t)?;
        }
        tape.scale(s, T::from_real(1.0 / report.dea_targets as f64))?
    };

    let mut mlm_picks = Vec::new();
    let mut mlm_labels = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        if ex.token_targets.is_empty() {
            report.mlm_skipped += 1;
        }
        for &(pos, tok) in &ex.token_targets {
            mlm_picks.push(RowPick::From { source: i, row: pos });
            mlm_labels.push(tok);
        }
    }
    report.mlm_targets = mlm_labels.len();
    let mlm = if mlm_labels.is_empty() {
        zero(tape)
    } else {
        let rows = tape.rows(&outputs, &mlm_picks, enc.config.hidden)?;
        let logits = model.heads.mlm.forward(tape, p, rows)?;
        tape.cross_entropy(logits, &mlm_labels)?
    };

    let cls: Vec<RowPick> = (0..batch.len()).map(|i| RowPick::From { source: i, row: 0 }).collect();
    let cls = tape.rows(&outputs, &cls, enc.config.hidden)?;
    let nsp_logits = model.heads.nsp.forward(tape, p, cls)?;
    let nsp_labels: Vec<usize> = batch.iter().map(|ex| usize::from(ex.is_next)).collect();
    let nsp = tape.cross_entropy(nsp_logits, &nsp_labels)?;

    let total = tape.add(dea, mlm)?;
    let total = tape.add(total, nsp)?;
    report.dea = tape.scalar(dea).as_f64();
    report.mlm = tape.scalar(mlm).as_f64();
    report.nsp = tape.scalar(nsp).as_f64();
    report.total = report.dea + report.mlm + report.nsp;
    Ok((total, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossOptions,
    pub corrupt_entities: bool,
    pub corrupt_tokens: bool,
}

impl PretrainConfig {
    pub fn desk() -> Self {
        PretrainConfig {
            steps: 500,
            batch_size: 24,
            learning_rate: 3e-3,
            seed: 0,
            loss: LossOptions::default(),
            corrupt_entities: true,
            corrupt_tokens: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate must be non-negative"));
        }
        Ok(())
    }
}

/// Endless deterministic supply of pretraining examples: epoch `k` is
/// built from `(seed, k)` and consumed in order.
pub struct ExampleStream<'a> {
    sentences: &'a [IndexedSentence],
    entity_count: usize,
    vocab_size: usize,
    pipeline: PipelineConfig,
    epoch: u64,
    buffer: Vec<PretrainExample>,
    next: usize,
    pub stats: CorruptionStats,
}

impl<'a> ExampleStream<'a> {
    pub fn new(sentences: &'a [IndexedSentence], entity_count: usize, vocab_size: usize, pipeline: PipelineConfig) -> Self {
        ExampleStream {
            sentences,
            entity_count,
            vocab_size,
            pipeline,
            epoch: 0,
            buffer: Vec::new(),
            next: 0,
            stats: CorruptionStats::default(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batch(&mut self, size: usize) -> Result<Vec<PretrainExample>> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.next == self.buffer.len() {
                let (examples, stats) =
                    pretrain::build_epoch(self.sentences, self.entity_count, self.vocab_size, &self.pipeline, self.epoch)?;
                self.stats.merge(&stats);
                self.buffer = examples;
                self.next = 0;
                self.epoch += 1;
            }
            out.push(self.buffer[self.next].clone());
            self.next += 1;
        }
        Ok(out)
    }
}

/// Optimizer owner for pretraining.
pub struct Pretrainer {
    pub model: PretrainModel<f32>,
    pub adam: Adam<f32>,
    pub schedule: Schedule,
    pub config: PretrainConfig,
    dropout_rng: ChaCha8Rng,
}

impl Pretrainer {
    pub fn new(model: PretrainModel<f32>, config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Pretrainer {
            adam: Adam::new(&model.encoder.params, AdamConfig::default()),
            schedule: Schedule::new(config.learning_rate, config.steps),
            dropout_rng: rng::stream(config.seed, &[DROPOUT_STREAM]),
            model,
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// One forward/backward pass and Adam update. A non-finite loss aborts
    /// before any parameter changes.
    pub fn step(&mut self, batch: &[PretrainExample]) -> Result<LossReport> {
        let step = self.adam.step + 1;
        let mut tape = Tape::new();
        let p = self.model.encoder.bind(&mut tape);
        let p_drop = self.model.encoder.config.dropout;
        let mut drop = Some(Dropout {
            p: p_drop,
            rng: &mut self.dropout_rng,
        });
        let (loss, report) = match batch_loss(&self.model, &mut tape, &p, batch, &self.config.loss, &mut drop) {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => {
                return Err(Error::Diverged {
                    step,
                    detail: format!("non-finite value in {op} during the forward pass"),
                })
            }
            Err(e) => return Err(e),
        };
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "total={} dea={} mlm={} nsp={}",
                    report.total, report.dea, report.mlm, report.nsp
                ),
            });
        }
        let grads = match tape.backward(loss) {
            Ok(g) => g,
            Err(Error::NonFinite { op }) => {
                return Err(Error::Diverged {
                    step,
                    detail: format!("non-finite gradient in {op}; dea={} mlm={} nsp={}", report.dea, report.mlm, report.nsp),
                })
            }
            Err(e) => return Err(e),
        };
        let lr = self.schedule.rate(step);
        self.adam.update(&mut self.model.encoder.params, &p, &grads, lr);
        Ok(report)
    }

    /// Runs `config.steps` steps, appending one CSV line per step to `log`.
    pub fn run(&mut self, stream: &mut ExampleStream<'_>, mut log: Option<&mut dyn Write>) -> Result<Vec<LossReport>> {
        let mut reports = Vec::new();
        while self.adam.step < self.config.steps {
            let batch = stream.batch(self.config.batch_size)?;
            let report = self.step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", report.csv_line(self.adam.step)).map_err(|e| Error::io("loss log", e))?;
            }
            log::debug!(
                "step {} total {:.4} dea {:.4} mlm {:.4} nsp {:.4}",
                self.adam.step,
                report.total,
                report.dea,
                report.mlm,
                report.nsp
            );
            reports.push(report);
        }
        Ok(reports)
    }
}
