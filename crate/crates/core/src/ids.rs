use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Bidirectional map between opaque string ids and dense indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdTable {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut table = Self::new();
        for name in names {
            let name = name.into();
            if table.index.contains_key(&name) {
                return Err(Error::format("id table", format!("duplicate id {name:?}")));
            }
            table.intern(&name);
        }
        Ok(table)
    }

    /// Returns the index of `name`, adding it if new.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// One id per line; line number is the dense index.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for n in &self.names {
            out.push_str(n);
            out.push('\n');
        }
        out
    }

    pub fn parse_lines(text: &str) -> Result<Self> {
        Self::from_names(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_lines(&text)
    }
}
