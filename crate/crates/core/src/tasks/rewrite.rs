//! Mark-token rewrites for fine-tuning inputs.

use crate::corpus::vocab::{CLS, ENT, HD, SEP, TL};
use crate::error::{Error, Result};

/// A rewritten sequence with `[CLS] ... [SEP]` and mark tokens around
/// each marked span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rewrite {
    pub tokens: Vec<usize>,
    /// New index of each original token.
    pub positions: Vec<usize>,
    /// Marked spans in rewritten coordinates, marks excluded.
    pub spans: Vec<(usize, usize)>,
}

impl Rewrite {
    /// Original tokens, recovered through `positions`.
    pub fn original(&self) -> Vec<usize> {
        self.positions.iter().map(|&p| self.tokens[p]).collect()
    }
}

fn check_span(span: (usize, usize), len: usize, what: &str) -> Result<()> {
    if span.0 >= span.1 || span.1 > len {
        return Err(Error::TaskData(format!(
            "{what} span [{}, {}) is not inside {len} tokens",
            span.0, span.1
        )));
    }
    Ok(())
}

fn enclose(tokens: &[usize], marks: &[((usize, usize), usize)]) -> Rewrite {
    let mut out = Vec::with_capacity(tokens.len() + 2 * marks.len() + 2);
    let mut positions = Vec::with_capacity(tokens.len());
    let mut spans = vec![(0, 0); marks.len()];
    out.push(CLS);
    for (i, &t) in tokens.iter().enumerate() {
        for (k, &((s, _), mark)) in marks.iter().enumerate() {
            if s == i {
                out.push(mark);
                spans[k].0 = out.len();
            }
        }
        positions.push(out.len());
        out.push(t);
        for (k, &((_, e), mark)) in marks.iter().enumerate() {
            if e == i + 1 {
                spans[k].1 = out.len();
                out.push(mark);
            }
        }
    }
    out.push(SEP);
    Rewrite {
        tokens: out,
        positions,
        spans,
    }
}

/// Encloses the head span in `[HD]` and the tail span in `[TL]`.
pub fn rewrite_relation(tokens: &[usize], head: (usize, usize), tail: (usize, usize)) -> Result<Rewrite> {
    check_span(head, tokens.len(), "head")?;
    check_span(tail, tokens.len(), "tail")?;
    if head.0 < tail.1 && tail.0 < head.1 {
        return Err(Error::TaskData(format!(
            "head [{}, {}) and tail [{}, {}) overlap",
            head.0, head.1, tail.0, tail.1
        )));
    }
    Ok(enclose(tokens, &[(head, HD), (tail, TL)]))
}

/// Encloses the mention span in `[ENT]`.
pub fn rewrite_typing(tokens: &[usize], mention: Option<(usize, usize)>) -> Result<Rewrite> {
    let mention = mention.ok_or_else(|| Error::TaskData("typing example has no mention".into()))?;
    check_span(mention, tokens.len(), "mention")?;
    Ok(enclose(tokens, &[(mention, ENT)]))
}
