//! Sentences with entity mentions anchored to their first subword.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::gazetteer::{Gazetteer, Mention};
use super::vocab::SubwordVocab;
use crate::error::{Error, Result};
use crate::ids::IdTable;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedSentence {
    pub tokens: Vec<usize>,
    pub mentions: Vec<Mention>,
    pub doc: usize,
    pub sent: usize,
}

/// Maps the first token of each mention to the mention's local index.
/// Mentions must be sorted and non-overlapping.
pub fn align(mentions: &[Mention]) -> Result<BTreeMap<usize, usize>> {
    let mut map = BTreeMap::new();
    let mut covered = 0;
    for (k, m) in mentions.iter().enumerate() {
        if m.start >= m.end || (k > 0 && m.start < covered) {
            return Err(Error::Invariant(format!(
                "mention {k} [{}, {}) overlaps or is empty",
                m.start, m.end
            )));
        }
        covered = m.end;
        map.insert(m.start, k);
    }
    Ok(map)
}

impl AlignedSentence {
    pub fn entity_count(&self) -> usize {
        self.mentions.len()
    }

    pub fn alignment(&self) -> Result<BTreeMap<usize, usize>> {
        align(&self.mentions)
    }

    pub fn validate(&self) -> Result<()> {
        align(&self.mentions)?;
        if let Some(m) = self.mentions.last() {
            if m.end > self.tokens.len() {
                return Err(Error::Invariant(format!(
                    "mention ends at {} past {} tokens",
                    m.end,
                    self.tokens.len()
                )));
            }
        }
        Ok(())
    }
}

/// Keeps sentences with at least `min_entities` mentions.
pub fn filter_sentences(sentences: Vec<AlignedSentence>, min_entities: usize) -> Vec<AlignedSentence> {
    sentences
        .into_iter()
        .filter(|s| s.entity_count() >= min_entities)
        .collect()
}

/// Splits corpus text into documents (blank-line separated) of sentences
/// (one per line).
pub fn split_documents(text: &str) -> Vec<Vec<&str>> {
    let mut docs = Vec::new();
    let mut cur = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    docs
}

/// Tokenizes every sentence of the corpus and matches mentions.
pub fn annotate(text: &str, vocab: &SubwordVocab, gazetteer: &Gazetteer) -> Vec<AlignedSentence> {
    let mut out = Vec::new();
    for (doc, sentences) in split_documents(text).into_iter().enumerate() {
        for (sent, line) in sentences.into_iter().enumerate() {
            let tokens: Vec<usize> = vocab.tokenize(line).iter().map(|p| p.id).collect();
            let mentions = gazetteer.match_mentions(&tokens, vocab);
            out.push(AlignedSentence {
                tokens,
                mentions,
                doc,
                sent,
            });
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<usize>,
    mentions: Vec<(String, usize, usize)>,
    doc: usize,
    sent: usize,
}

pub fn to_jsonl(sentences: &[AlignedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        let rec = Record {
            tokens: s.tokens.clone(),
            mentions: s
                .mentions
                .iter()
                .map(|m| (m.entity.clone(), m.start, m.end))
                .collect(),
            doc: s.doc,
            sent: s.sent,
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str, vocab_size: usize) -> Result<Vec<AlignedSentence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("annotated:{}", i + 1);
        let rec: Record =
            serde_json::from_str(line).map_err(|e| Error::format(loc(), e.to_string()))?;
        if let Some(&t) = rec.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::format(loc(), format!("token id {t} outside vocabulary")));
        }
        let s = AlignedSentence {
            tokens: rec.tokens,
            mentions: rec
                .mentions
                .into_iter()
                .map(|(entity, start, end)| Mention { entity, start, end })
                .collect(),
            doc: rec.doc,
            sent: rec.sent,
        };
        s.validate().map_err(|e| Error::format(loc(), e.to_string()))?;
        out.push(s);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, vocab_size: usize) -> Result<Vec<AlignedSentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, vocab_size)
}

/// Sentence with mentions resolved to dense entity indices. Mentions whose
/// entity has no embedding are dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexedSentence {
    pub tokens: Vec<usize>,
    /// `(entity index, start, end)` in token order.
    pub mentions: Vec<(usize, usize, usize)>,
    pub doc: usize,
    pub sent: usize,
}

pub fn index_entities(sentences: &[AlignedSentence], entities: &IdTable) -> (Vec<IndexedSentence>, usize) {
    let mut dropped = 0;
    let out = sentences
        .iter()
        .map(|s| IndexedSentence {
            tokens: s.tokens.clone(),
            mentions: s
                .mentions
                .iter()
                .filter_map(|m| {
                    let e = entities.get(&m.entity);
                    if e.is_none() {
                        dropped += 1;
                    }
                    e.map(|e| (e, m.start, m.end))
                })
                .collect(),
            doc: s.doc,
            sent: s.sent,
        })
        .collect();
    (out, dropped)
}
