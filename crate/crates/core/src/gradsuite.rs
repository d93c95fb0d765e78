//! Finite-difference checks over every differentiable op, each layer,
//! the fusion aggregator and the full pretraining loss.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::aligned::IndexedSentence;
use crate::corpus::pretrain::{self, PipelineConfig};
use crate::encoder::layers::{Aggregator, AlignmentMap, AttentionBlock, Fusion, Init, Linear, Norm, TextLayer};
use crate::encoder::{Bound, ModelConfig, ParamStore};
use crate::error::Result;
use crate::numerics::{grad_check, GradCheckOptions, RowPick, Tape, Tensor, Var};
use crate::objectives::{batch_loss, LossOptions, PretrainModel};

/// Bound on the maximum relative error of every check.
pub const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted sum so every output element carries a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(randn(&shape, seed));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

struct Runner {
    entries: Vec<SuiteEntry>,
    opts: GradCheckOptions,
}

impl Runner {
    fn check<F>(&mut self, name: &str, params: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let report = grad_check(f, params, &self.opts)?;
        log::debug!("{name}: {:.3e}", report.max_rel_err);
        self.entries.push(SuiteEntry {
            name: name.to_owned(),
            max_rel_err: report.max_rel_err,
            probes: report.params.iter().map(|p| p.probes).sum(),
            passed: report.passes(TOLERANCE),
        });
        Ok(())
    }

    fn check_store<F>(&mut self, name: &str, store: &ParamStore<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
    {
        self.check(name, store.tensors(), |tape, vars| f(tape, &Bound::from_vars(vars.to_vec())))
    }
}

fn ops(r: &mut Runner) -> Result<()> {
    r.check("matmul", &[randn(&[3, 4], 1), randn(&[4, 2], 2)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe(t, y, 3)
    })?;
    r.check("transpose", &[randn(&[3, 4], 4)], |t, v| {
        let y = t.transpose(v[0])?;
        probe(t, y, 5)
    })?;
    r.check("add", &[randn(&[2, 3], 6), randn(&[2, 3], 7)], |t, v| {
        let y = t.add(v[0], v[1])?;
        probe(t, y, 8)
    })?;
    r.check("add_bias", &[randn(&[4, 3], 9), randn(&[3], 10)], |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        probe(t, y, 11)
    })?;
    r.check("mul", &[randn(&[2, 3], 12), randn(&[2, 3], 13)], |t, v| {
        let y = t.mul(v[0], v[1])?;
        probe(t, y, 14)
    })?;
    r.check("scale", &[randn(&[2, 3], 15)], |t, v| {
        let y = t.scale(v[0], -1.7)?;
        probe(t, y, 16)
    })?;
    r.check("sum", &[randn(&[2, 3], 17)], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    })?;
    r.check("mean", &[randn(&[2, 3], 18)], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    })?;
    r.check("gelu", &[randn(&[3, 5], 19)], |t, v| {
        let y = t.gelu(v[0])?;
        probe(t, y, 20)
    })?;
    r.check("softmax", &[randn(&[3, 5], 21)], |t, v| {
        let y = t.softmax(v[0])?;
        probe(t, y, 22)
    })?;
    r.check("layer_norm", &[randn(&[3, 6], 23), randn(&[6], 24), randn(&[6], 25)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(t, y, 26)
    })?;
    r.check("slice_cols", &[randn(&[3, 6], 27)], |t, v| {
        let y = t.slice_cols(v[0], 1, 4)?;
        probe(t, y, 28)
    })?;
    r.check("concat_cols", &[randn(&[3, 2], 29), randn(&[3, 4], 30)], |t, v| {
        let y = t.concat_cols(&[v[0], v[1], v[0]])?;
        probe(t, y, 31)
    })?;
    r.check("split_merge_heads", &[randn(&[3, 6], 32)], |t, v| {
        let heads = t.split_heads(v[0], 3)?;
        let sq: Vec<Var> = heads.iter().map(|&h| t.mul(h, h)).collect::<Result<_>>()?;
        let y = t.merge_heads(&[sq[2], sq[0], sq[1]])?;
        probe(t, y, 33)
    })?;
    r.check("rows", &[randn(&[3, 4], 34), randn(&[2, 4], 35)], |t, v| {
        let picks = [
            RowPick::From { source: 1, row: 0 },
            RowPick::Zero,
            RowPick::From { source: 0, row: 2 },
            RowPick::From { source: 0, row: 2 },
        ];
        let y = t.rows(&[v[0], v[1]], &picks, 4)?;
        probe(t, y, 36)
    })?;
    r.check("embedding", &[randn(&[5, 3], 37)], |t, v| {
        let y = t.embedding(v[0], &[4, 0, 4, 2])?;
        probe(t, y, 38)
    })?;
    r.check("cross_entropy", &[randn(&[4, 5], 39)], |t, v| t.cross_entropy(v[0], &[0, 4, 2, 2]))?;
    r.check("bce_with_logits", &[randn(&[2, 3], 40)], |t, v| {
        t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0])
    })?;
    r.check("dropout", &[randn(&[4, 5], 41)], |t, v| {
        // Same seed on every evaluation, so the mask is fixed.
        let y = t.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(42))?;
        probe(t, y, 43)
    })?;
    Ok(())
}

fn layers(r: &mut Runner) -> Result<()> {
    let x = randn(&[5, 8], 50);
    let e = randn(&[3, 4], 51);
    let map = AlignmentMap::new(5, 3, &[(0, 1), (2, 0), (4, 2)])?;

    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let init = &mut Init { store: &mut store, rng: &mut rng, std: 0.4 };
    let linear = Linear::new(init, "linear", 8, 6, true);
    let norm = Norm::new(init, "norm", 8);
    r.check_store("linear+norm", &store, |t, p| {
        let xv = t.constant(x.clone());
        let y = linear.forward(t, p, xv)?;
        let z = norm.forward(t, p, xv)?;
        let a = probe(t, y, 53)?;
        let b = probe(t, z, 54)?;
        t.add(a, b)
    })?;

    let mut store = ParamStore::<f64>::new();
    let block = AttentionBlock::new(&mut Init { store: &mut store, rng: &mut rng, std: 0.4 }, "attention", 8, 2);
    r.check_store("attention_block", &store, |t, p| {
        let xv = t.constant(x.clone());
        let y = block.forward::<f64, ChaCha8Rng>(t, p, xv, &mut None)?;
        probe(t, y, 55)
    })?;

    let mut store = ParamStore::<f64>::new();
    let layer = TextLayer::new(&mut Init { store: &mut store, rng: &mut rng, std: 0.4 }, "text", 8, 2, 16);
    r.check_store("text_layer", &store, |t, p| {
        let xv = t.constant(x.clone());
        let y = layer.forward::<f64, ChaCha8Rng>(t, p, xv, &mut None)?;
        probe(t, y, 56)
    })?;

    let mut store = ParamStore::<f64>::new();
    let fusion = Fusion::new(&mut Init { store: &mut store, rng: &mut rng, std: 0.4 }, "fusion", 8, 4, 12);
    let mut params = store.tensors().to_vec();
    params.push(x.clone());
    params.push(e.clone());
    let n = store.len();
    r.check("fusion", &params, |t, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        let (w, ent) = fusion.forward(t, &p, v[n], Some(v[n + 1]), &map)?;
        let a = probe(t, w, 57)?;
        let b = probe(t, ent.expect("entities in"), 58)?;
        t.add(a, b)
    })?;

    let mut store = ParamStore::<f64>::new();
    let agg = Aggregator::new(&mut Init { store: &mut store, rng: &mut rng, std: 0.4 }, "aggregator", 8, 2, 4, 2, 12);
    let mut params = store.tensors().to_vec();
    params.push(e);
    let n = store.len();
    r.check("aggregator", &params, |t, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        let xv = t.constant(x.clone());
        let (w, ent) = agg.forward::<f64, ChaCha8Rng>(t, &p, xv, Some(v[n]), &map, &mut None)?;
        let a = probe(t, w, 59)?;
        let b = probe(t, ent.expect("entities in"), 60)?;
        t.add(a, b)
    })?;
    Ok(())
}

/// Sentences of a small random corpus with three mentions each.
fn toy_sentences(vocab: usize, entities: usize, seed: u64) -> Vec<IndexedSentence> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for doc in 0..2 {
        for sent in 0..3 {
            let tokens: Vec<usize> = (0..9).map(|_| rng.random_range(8..vocab)).collect();
            let mentions = [(0, 2), (3, 5), (6, 8)]
                .iter()
                .map(|&(s, e)| (rng.random_range(0..entities), s, e))
                .collect();
            out.push(IndexedSentence { tokens, mentions, doc, sent });
        }
    }
    out
}

fn full_loss(r: &mut Runner, seed: u64) -> Result<()> {
    let (vocab, entities) = (140, 50);
    let mut cfg = ModelConfig::desk(vocab, entities);
    cfg.seed = seed;
    // Unit-scale entity rows keep the first entity attention away from
    // uniform, so its query and key gradients stand above roundoff.
    let table = Tensor::<f64>::randn(&[entities, cfg.entity_hidden], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x7461));
    let model = PretrainModel::<f64>::new(cfg.clone(), table)?;
    let sentences = toy_sentences(vocab, entities, seed);
    let pipeline = PipelineConfig {
        seed,
        max_len: cfg.max_len,
        corrupt_entities: true,
        corrupt_tokens: true,
    };
    let (examples, _) = pretrain::build_epoch(&sentences, entities, vocab, &pipeline, 0)?;
    let batch = &examples[..2];
    r.check_store("pretraining_loss_desk", &model.encoder.params, |t, p| {
        Ok(batch_loss::<f64, ChaCha8Rng>(&model, t, p, batch, &LossOptions::default(), &mut None)?.0)
    })
}

/// Runs every check. `max_probes` limits the coordinates probed per
/// tensor of the full model; the op and layer checks probe everything.
pub fn run(seed: u64, max_probes: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut r = Runner {
        entries: Vec::new(),
        opts: GradCheckOptions { seed, ..GradCheckOptions::default() },
    };
    ops(&mut r)?;
    layers(&mut r)?;
    r.opts.max_probes = Some(max_probes);
    full_loss(&mut r, seed)?;
    Ok(SuiteReport {
        entries: r.entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_and_layer_checks_pass() {
        let mut r = Runner {
            entries: Vec::new(),
            opts: GradCheckOptions::default(),
        };
        ops(&mut r).unwrap();
        layers(&mut r).unwrap();
        for e in &r.entries {
            assert!(e.passed, "{}: {}", e.name, e.max_rel_err);
            assert!(e.probes > 0);
        }
    }
}
