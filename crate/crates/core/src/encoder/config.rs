use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and regularization settings of the two-stack encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Text layers below the aggregators.
    pub text_layers: usize,
    /// Aggregator layers fusing tokens with entities.
    pub knowledge_layers: usize,
    pub hidden: usize,
    pub entity_hidden: usize,
    pub heads: usize,
    pub entity_heads: usize,
    pub vocab_size: usize,
    pub entity_count: usize,
    pub max_len: usize,
    /// Feed-forward and fusion inner width as a multiple of `hidden`.
    pub ff_mult: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Small shape used for tests and desk runs.
    pub fn desk(vocab_size: usize, entity_count: usize) -> Self {
        ModelConfig {
            text_layers: 2,
            knowledge_layers: 2,
            hidden: 64,
            entity_hidden: 16,
            heads: 4,
            entity_heads: 2,
            vocab_size,
            entity_count,
            max_len: 64,
            ff_mult: 4,
            dropout: 0.0,
            init_std: 0.1,
            seed: 0,
        }
    }

    /// Six text layers, six aggregators, 768/100 hidden sizes, 12/4 heads.
    pub fn full(vocab_size: usize, entity_count: usize) -> Self {
        ModelConfig {
            text_layers: 6,
            knowledge_layers: 6,
            hidden: 768,
            entity_hidden: 100,
            heads: 12,
            entity_heads: 4,
            vocab_size,
            entity_count,
            max_len: 512,
            ff_mult: 4,
            dropout: 0.1,
            init_std: 0.02,
            seed: 0,
        }
    }

    pub fn preset(name: &str, vocab_size: usize, entity_count: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(vocab_size, entity_count)),
            "full" => Ok(Self::full(vocab_size, entity_count)),
            other => Err(Error::config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn inner(&self) -> usize {
        self.hidden * self.ff_mult
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("text_layers", self.text_layers),
            ("hidden", self.hidden),
            ("entity_hidden", self.entity_hidden),
            ("heads", self.heads),
            ("entity_heads", self.entity_heads),
            ("vocab_size", self.vocab_size),
            ("entity_count", self.entity_count),
            ("max_len", self.max_len),
            ("ff_mult", self.ff_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config("hidden must be divisible by heads"));
        }
        if self.entity_hidden % self.entity_heads != 0 {
            return Err(Error::config("entity_hidden must be divisible by entity_heads"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("init_std must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk(100, 10).validate().unwrap();
        let full = ModelConfig::full(30_000, 5_000);
        full.validate().unwrap();
        assert_eq!(
            (full.text_layers, full.knowledge_layers, full.hidden, full.entity_hidden, full.heads, full.entity_heads),
            (6, 6, 768, 100, 12, 4)
        );
    }

    #[test]
    fn head_divisibility_checked() {
        let mut c = ModelConfig::desk(100, 10);
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(100, 10);
        c.entity_heads = 3;
        assert!(c.validate().is_err());
    }
}
