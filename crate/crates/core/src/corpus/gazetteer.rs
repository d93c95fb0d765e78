//! Surface-form dictionary matched leftmost-longest over subword tokens.

use std::collections::HashMap;
use std::path::Path;

use super::vocab::{SubwordVocab, UNK};
use crate::error::{Error, Result};

/// A matched span `[start, end)` over token positions.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Mention {
    pub entity: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Default, Debug)]
struct Node {
    children: HashMap<usize, usize>,
    entity: Option<usize>,
}

/// Surface forms tokenized with a fixed vocabulary and stored in a trie
/// keyed by token id.
#[derive(Debug)]
pub struct Gazetteer {
    nodes: Vec<Node>,
    entities: Vec<String>,
    surfaces: usize,
}

/// Parses `surface<TAB>entity_id` lines.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((s, e)) if !s.trim().is_empty() && !e.is_empty() && !e.contains('\t') => {
                out.push((s.to_owned(), e.to_owned()))
            }
            _ => {
                return Err(Error::format(
                    format!("gazetteer:{}", i + 1),
                    "expected surface<TAB>entity_id",
                ))
            }
        }
    }
    Ok(out)
}

impl Gazetteer {
    /// Surfaces containing characters the vocabulary cannot cover are
    /// skipped, since `[UNK]` would match any unknown text. When a surface
    /// appears twice the first entity listed keeps it.
    pub fn build(entries: &[(String, String)], vocab: &SubwordVocab) -> Result<Self> {
        let mut g = Gazetteer {
            nodes: vec![Node::default()],
            entities: Vec::new(),
            surfaces: 0,
        };
        for (surface, entity) in entries {
            let ids: Vec<usize> = vocab.tokenize(surface).iter().map(|p| p.id).collect();
            if ids.is_empty() || ids.contains(&UNK) {
                continue;
            }
            let mut node = 0;
            for id in ids {
                let next = g.nodes.len();
                node = *g.nodes[node].children.entry(id).or_insert(next);
                if node == next {
                    g.nodes.push(Node::default());
                }
            }
            if g.nodes[node].entity.is_none() {
                g.nodes[node].entity = Some(g.entities.len());
                g.entities.push(entity.clone());
                g.surfaces += 1;
            }
        }
        if g.surfaces == 0 {
            return Err(Error::config("gazetteer has no usable surface forms"));
        }
        Ok(g)
    }

    pub fn load(path: &Path, vocab: &SubwordVocab) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::build(&parse_entries(&text)?, vocab)
    }

    pub fn len(&self) -> usize {
        self.surfaces
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces == 0
    }

    /// Leftmost-longest non-overlapping matches. A match must start at a
    /// word-initial token and must not be followed by a continuation piece,
    /// so surfaces never match inside a longer word.
    pub fn match_mentions(&self, tokens: &[usize], vocab: &SubwordVocab) -> Vec<Mention> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if vocab.is_continuation(tokens[i]) {
                i += 1;
                continue;
            }
            let mut node = 0;
            let mut best = None;
            for (j, id) in tokens.iter().enumerate().skip(i) {
                match self.nodes[node].children.get(id) {
                    Some(&n) => node = n,
                    None => break,
                }
                let boundary = tokens.get(j + 1).is_none_or(|&t| !vocab.is_continuation(t));
                if let (Some(e), true) = (self.nodes[node].entity, boundary) {
                    best = Some((e, j + 1));
                }
            }
            match best {
                Some((e, end)) => {
                    out.push(Mention {
                        entity: self.entities[e].clone(),
                        start: i,
                        end,
                    });
                    i = end;
                }
                None => i += 1,
            }
        }
        out
    }
}
