//! JSON-lines task files shared by entity typing and relation
//! classification.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A token given either as raw text or as a vocabulary id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskToken {
    Id(usize),
    Text(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub tokens: Vec<TaskToken>,
    /// `(entity id, start, end)` over `tokens`.
    pub mentions: Vec<(String, usize, usize)>,
    /// Indices into `mentions`: one for typing, head then tail for relations.
    pub marked: Vec<usize>,
    pub labels: Vec<String>,
}

impl TaskRecord {
    pub fn validate(&self) -> Result<()> {
        for (e, s, t) in &self.mentions {
            if s >= t || *t > self.tokens.len() {
                return Err(Error::TaskData(format!(
                    "mention {e} [{s}, {t}) outside {} tokens",
                    self.tokens.len()
                )));
            }
        }
        if let Some(&k) = self.marked.iter().find(|&&k| k >= self.mentions.len()) {
            return Err(Error::TaskData(format!("marked mention {k} does not exist")));
        }
        Ok(())
    }
}

pub fn to_jsonl(records: &[TaskRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("plain record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str, source: &str) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{source}:{}", i + 1);
        let rec: TaskRecord =
            serde_json::from_str(line).map_err(|e| Error::format(loc.clone(), e.to_string()))?;
        rec.validate().map_err(|e| Error::format(loc, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<TaskRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_tokens_round_trip() {
        let r = TaskRecord {
            tokens: vec![TaskToken::Text("a".into()), TaskToken::Id(9)],
            mentions: vec![("Q1".into(), 0, 1)],
            marked: vec![0],
            labels: vec!["x".into()],
        };
        let text = to_jsonl(&[r.clone()]);
        assert!(text.contains(r#"["a",9]"#));
        assert_eq!(parse_jsonl(&text, "t").unwrap(), vec![r]);
    }

    #[test]
    fn bad_spans_are_rejected() {
        let line = r#"{"tokens":["a"],"mentions":[["Q1",0,2]],"marked":[0],"labels":[]}"#;
        assert!(parse_jsonl(line, "t").is_err());
        let line = r#"{"tokens":["a"],"mentions":[["Q1",0,1]],"marked":[1],"labels":[]}"#;
        assert!(parse_jsonl(line, "t").is_err());
    }
}
