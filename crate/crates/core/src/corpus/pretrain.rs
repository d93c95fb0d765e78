//! Pretraining examples: sentence pairing, entity-alignment corruption and
//! token masking.

use std::collections::HashMap;

use super::aligned::IndexedSentence;
use super::vocab::{CLS, MASK, RESERVED, SEP};
use crate::error::{Error, Result};
use crate::rng::{self, Draw};

pub const ENTITY_REPLACE_RATE: f64 = 0.05;
pub const ENTITY_MASK_RATE: f64 = 0.15;
pub const TOKEN_SELECT_RATE: f64 = 0.15;
pub const TOKEN_MASK_SHARE: f64 = 0.8;
pub const TOKEN_RANDOM_SHARE: f64 = 0.1;

const PAIR_STREAM: u64 = 0x6e73_70;
const CORRUPT_STREAM: u64 = 0x6465_61;

/// Entity fed into the entity stream for one mention slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EntitySlot {
    Entity(usize),
    /// Alignment masked; the encoder substitutes its learned mask vector.
    Masked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntityTarget {
    /// Token position of the aligned first subword.
    pub position: usize,
    /// Index into `PretrainExample::candidates` of the original entity.
    pub candidate: usize,
    /// Whether the slot was replaced or masked.
    pub corrupted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainExample {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    /// One slot per mention, in token order.
    pub slots: Vec<EntitySlot>,
    /// Uncorrupted entity per slot.
    pub original_entities: Vec<usize>,
    /// `(token position, slot index)`, sorted by position.
    pub alignment: Vec<(usize, usize)>,
    /// Distinct original entities of the pair in first-occurrence order.
    pub candidates: Vec<usize>,
    pub entity_targets: Vec<EntityTarget>,
    /// `(position, original token id)`, sorted by position.
    pub token_targets: Vec<(usize, usize)>,
    pub is_next: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorruptionStats {
    pub alignments: usize,
    pub replaced: usize,
    pub masked: usize,
    pub kept: usize,
    /// Replacements that fell back to masking because no other entity exists.
    pub replace_fallbacks: usize,
    pub tokens_selected: usize,
    pub tokens_masked: usize,
    pub tokens_randomized: usize,
    pub tokens_kept: usize,
    /// Pairs dropped for exceeding the maximum sequence length.
    pub overlength_pairs: usize,
}

impl CorruptionStats {
    pub fn merge(&mut self, o: &CorruptionStats) {
        self.alignments += o.alignments;
        self.replaced += o.replaced;
        self.masked += o.masked;
        self.kept += o.kept;
        self.replace_fallbacks += o.replace_fallbacks;
        self.tokens_selected += o.tokens_selected;
        self.tokens_masked += o.tokens_masked;
        self.tokens_randomized += o.tokens_randomized;
        self.tokens_kept += o.tokens_kept;
        self.overlength_pairs += o.overlength_pairs;
    }
}

/// Packs `[CLS] a [SEP] b [SEP]` with segments 0/1 and no corruption.
pub fn pack(a: &IndexedSentence, b: &IndexedSentence, is_next: bool) -> PretrainExample {
    let mut tokens = Vec::with_capacity(a.tokens.len() + b.tokens.len() + 3);
    tokens.push(CLS);
    tokens.extend(&a.tokens);
    tokens.push(SEP);
    let b_offset = tokens.len();
    tokens.extend(&b.tokens);
    tokens.push(SEP);
    let mut segments = vec![0; b_offset];
    segments.resize(tokens.len(), 1);

    let mentions = a
        .mentions
        .iter()
        .map(|&(e, s, _)| (e, s + 1))
        .chain(b.mentions.iter().map(|&(e, s, _)| (e, s + b_offset)));
    let mut original_entities = Vec::new();
    let mut alignment = Vec::new();
    let mut candidates: Vec<usize> = Vec::new();
    let mut candidate_of: HashMap<usize, usize> = HashMap::new();
    let mut entity_targets = Vec::new();
    for (slot, (entity, position)) in mentions.enumerate() {
        original_entities.push(entity);
        alignment.push((position, slot));
        let candidate = *candidate_of.entry(entity).or_insert_with(|| {
            candidates.push(entity);
            candidates.len() - 1
        });
        entity_targets.push(EntityTarget {
            position,
            candidate,
            corrupted: false,
        });
    }
    PretrainExample {
        tokens,
        segments,
        slots: original_entities.iter().map(|&e| EntitySlot::Entity(e)).collect(),
        original_entities,
        alignment,
        candidates,
        entity_targets,
        token_targets: Vec::new(),
        is_next,
    }
}

/// Per alignment: replace with a different random entity (5%), mask
/// (15%), or keep. Targets always keep the original entity.
pub fn corrupt_entities<D: Draw + ?Sized>(
    mut ex: PretrainExample,
    entity_count: usize,
    draw: &mut D,
    stats: &mut CorruptionStats,
) -> PretrainExample {
    for (k, &(_, slot)) in ex.alignment.iter().enumerate() {
        stats.alignments += 1;
        let u = draw.unit();
        let original = ex.original_entities[slot];
        if u < ENTITY_REPLACE_RATE {
            ex.entity_targets[k].corrupted = true;
            if entity_count < 2 {
                stats.replace_fallbacks += 1;
                stats.masked += 1;
                ex.slots[slot] = EntitySlot::Masked;
            } else {
                stats.replaced += 1;
                let mut e = draw.below(entity_count - 1);
                if e >= original {
                    e += 1;
                }
                ex.slots[slot] = EntitySlot::Entity(e);
            }
        } else if u < ENTITY_REPLACE_RATE + ENTITY_MASK_RATE {
            ex.entity_targets[k].corrupted = true;
            stats.masked += 1;
            ex.slots[slot] = EntitySlot::Masked;
        } else {
            stats.kept += 1;
        }
    }
    ex
}

/// Number of positions selected for masking among `maskable`.
pub fn selection_count(maskable: usize) -> usize {
    if maskable == 0 {
        0
    } else {
        ((TOKEN_SELECT_RATE * maskable as f64).round() as usize).max(1)
    }
}

/// Selects 15% of non-special positions; of those 80% become `[MASK]`,
/// 10% a random learned token, 10% stay.
pub fn corrupt_tokens<D: Draw + ?Sized>(
    mut ex: PretrainExample,
    vocab_size: usize,
    draw: &mut D,
    stats: &mut CorruptionStats,
) -> PretrainExample {
    let mut maskable: Vec<usize> = (0..ex.tokens.len())
        .filter(|&i| ex.tokens[i] != CLS && ex.tokens[i] != SEP)
        .collect();
    let count = selection_count(maskable.len());
    for i in 0..count {
        let j = i + draw.below(maskable.len() - i);
        maskable.swap(i, j);
    }
    let mut chosen = maskable[..count].to_vec();
    chosen.sort_unstable();
    let random_low = if vocab_size > RESERVED.len() { RESERVED.len() } else { 0 };
    for &pos in &chosen {
        stats.tokens_selected += 1;
        ex.token_targets.push((pos, ex.tokens[pos]));
        let u = draw.unit();
        if u < TOKEN_MASK_SHARE {
            stats.tokens_masked += 1;
            ex.tokens[pos] = MASK;
        } else if u < TOKEN_MASK_SHARE + TOKEN_RANDOM_SHARE {
            stats.tokens_randomized += 1;
            ex.tokens[pos] = random_low + draw.below(vocab_size - random_low);
        } else {
            stats.tokens_kept += 1;
        }
    }
    ex
}

/// Sentence pair by index into the sentence list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub first: usize,
    pub second: usize,
    pub is_next: bool,
}

/// Pairs every sentence that has a successor in its document: half the
/// time with that successor, otherwise with a random sentence from another
/// document (from the same document, excluding the successor, when the
/// corpus has one document).
pub fn pair_sentences<D: Draw + ?Sized>(
    sentences: &[IndexedSentence],
    draw: &mut D,
) -> Result<Vec<SentencePair>> {
    let mut docs: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        match docs.last_mut() {
            Some((d, members)) if *d == s.doc => members.push(i),
            _ => docs.push((s.doc, vec![i])),
        }
    }
    let mut pairs = Vec::new();
    for (di, (_, members)) in docs.iter().enumerate() {
        for w in members.windows(2) {
            let (first, next) = (w[0], w[1]);
            if draw.unit() < 0.5 {
                pairs.push(SentencePair {
                    first,
                    second: next,
                    is_next: true,
                });
                continue;
            }
            let second = if docs.len() > 1 {
                let mut other = draw.below(docs.len() - 1);
                if other >= di {
                    other += 1;
                }
                let pool = &docs[other].1;
                pool[draw.below(pool.len())]
            } else {
                let pool: Vec<usize> = members
                    .iter()
                    .copied()
                    .filter(|&m| m != first && m != next)
                    .collect();
                if pool.is_empty() {
                    return Err(Error::config(
                        "single-document corpus too small for random sentence pairs",
                    ));
                }
                pool[draw.below(pool.len())]
            };
            pairs.push(SentencePair {
                first,
                second,
                is_next: false,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::config("corpus has no sentence with a successor"));
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub max_len: usize,
    pub corrupt_entities: bool,
    pub corrupt_tokens: bool,
}

/// Builds one epoch of examples. Pairing uses a stream keyed by
/// `(seed, epoch)`; each pair's corruption uses a stream keyed by
/// `(seed, epoch, doc, sentence)` of its first sentence.
pub fn build_epoch(
    sentences: &[IndexedSentence],
    entity_count: usize,
    vocab_size: usize,
    cfg: &PipelineConfig,
    epoch: u64,
) -> Result<(Vec<PretrainExample>, CorruptionStats)> {
    let mut pair_rng = rng::stream(cfg.seed, &[PAIR_STREAM, epoch]);
    let pairs = pair_sentences(sentences, &mut pair_rng)?;
    let mut stats = CorruptionStats::default();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (a, b) = (&sentences[p.first], &sentences[p.second]);
        if a.tokens.len() + b.tokens.len() + 3 > cfg.max_len {
            stats.overlength_pairs += 1;
            continue;
        }
        let mut r = rng::stream(cfg.seed, &[CORRUPT_STREAM, epoch, a.doc as u64, a.sent as u64]);
        let mut ex = pack(a, b, p.is_next);
        if cfg.corrupt_entities {
            ex = corrupt_entities(ex, entity_count, &mut r, &mut stats);
        }
        if cfg.corrupt_tokens {
            ex = corrupt_tokens(ex, vocab_size, &mut r, &mut stats);
        }
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::config("every sentence pair exceeds the maximum length"));
    }
    Ok((out, stats))
}
