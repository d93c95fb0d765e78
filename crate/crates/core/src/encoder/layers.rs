//! Building blocks of the encoder. Each block holds parameter ids into a
//! shared [`ParamStore`] and runs on a bound tape.

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::numerics::{Real, RowPick, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Registers parameters under a name prefix.
pub struct Init<'a, T, R: ?Sized> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub std: f64,
}

impl<T: Real, R: Rng + ?Sized> Init<'_, T, R> {
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add_normal(name, shape, self.std, self.rng)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add_zeros(name, shape)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add_ones(name, shape)
    }
}

/// Optional dropout source for a forward pass.
pub struct Dropout<'a, R: ?Sized> {
    pub p: f64,
    pub rng: &'a mut R,
}

pub fn maybe_dropout<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    drop: &mut Option<Dropout<'_, R>>,
) -> Result<Var> {
    match drop {
        Some(d) if d.p > 0.0 => tape.dropout(x, d.p, d.rng),
        _ => Ok(x),
    }
}

/// `x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        init: &mut Init<'_, T, R>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
    ) -> Self {
        Linear {
            weight: init.normal(&format!("{name}.weight"), &[inputs, outputs]),
            bias: bias.then(|| init.zeros(&format!("{name}.bias"), &[outputs])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Real, R: Rng + ?Sized>(init: &mut Init<'_, T, R>, name: &str, dim: usize) -> Self {
        Norm {
            gain: init.ones(&format!("{name}.gain"), &[dim]),
            bias: init.zeros(&format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias), T::from_real(LAYER_NORM_EPS))
    }
}

/// Multi-head scaled dot-product self-attention. The key projection has
/// no bias.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Attention result with the per-head `[L, L]` weight matrices.
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(init: &mut Init<'_, T, R>, name: &str, dim: usize, heads: usize) -> Self {
        Attention {
            heads,
            query: Linear::new(init, &format!("{name}.query"), dim, dim, true),
            key: Linear::new(init, &format!("{name}.key"), dim, dim, false),
            value: Linear::new(init, &format!("{name}.value"), dim, dim, true),
            output: Linear::new(init, &format!("{name}.output"), dim, dim, true),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Attended> {
        let dim = tape.value(x).last_dim();
        let scale = T::from_real(1.0 / ((dim / self.heads) as f64).sqrt());
        let q = self.query.forward(tape, p, x)?;
        let k = self.key.forward(tape, p, x)?;
        let v = self.value.forward(tape, p, x)?;
        let qs = tape.split_heads(q, self.heads)?;
        let ks = tape.split_heads(k, self.heads)?;
        let vs = tape.split_heads(v, self.heads)?;
        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let kt = tape.transpose(ks[h])?;
            let scores = tape.matmul(qs[h], kt)?;
            let scores = tape.scale(scores, scale)?;
            let w = tape.softmax(scores)?;
            contexts.push(tape.matmul(w, vs[h])?);
            weights.push(w);
        }
        let merged = tape.merge_heads(&contexts)?;
        Ok(Attended {
            output: self.output.forward(tape, p, merged)?,
            weights,
        })
    }
}

/// Attention wrapped in a residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub attention: Attention,
    pub norm: Norm,
}

impl AttentionBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(init: &mut Init<'_, T, R>, name: &str, dim: usize, heads: usize) -> Self {
        AttentionBlock {
            attention: Attention::new(init, &format!("{name}.attention"), dim, heads),
            norm: Norm::new(init, &format!("{name}.norm"), dim),
        }
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        drop: &mut Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let a = self.attention.forward(tape, p, x)?.output;
        let a = maybe_dropout(tape, a, drop)?;
        let sum = tape.add(x, a)?;
        self.norm.forward(tape, p, sum)
    }
}

/// Post-norm transformer layer: attention block, then a GELU
/// feed-forward with residual and layer norm.
#[derive(Clone, Debug)]
pub struct TextLayer {
    pub attention: AttentionBlock,
    pub expand: Linear,
    pub contract: Linear,
    pub norm: Norm,
}

impl TextLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dim: usize,
        heads: usize,
        inner: usize,
    ) -> Self {
        TextLayer {
            attention: AttentionBlock::new(init, &format!("{name}.self"), dim, heads),
            expand: Linear::new(init, &format!("{name}.ff.expand"), dim, inner, true),
            contract: Linear::new(init, &format!("{name}.ff.contract"), inner, dim, true),
            norm: Norm::new(init, &format!("{name}.ff.norm"), dim),
        }
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        drop: &mut Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let a = self.attention.forward(tape, p, x, drop)?;
        let h = self.expand.forward(tape, p, a)?;
        let h = tape.gelu(h)?;
        let f = self.contract.forward(tape, p, h)?;
        let f = maybe_dropout(tape, f, drop)?;
        let sum = tape.add(a, f)?;
        self.norm.forward(tape, p, sum)
    }
}

/// Token/entity information fusion.
///
/// Aligned token j with entity k:
/// `h = gelu(w̃ Wt̃ + ẽ Wẽ + b̃)`, `w = gelu(h Wt + bt)`, `e = gelu(h We + be)`.
/// Unaligned tokens drop the entity term and produce no entity output.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub token_in: Linear,
    pub entity_in: Linear,
    pub token_out: Linear,
    pub entity_out: Linear,
}

/// Token-to-slot map of one example, checked for range and injectivity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentMap {
    pub slot_of_token: Vec<Option<usize>>,
    pub token_of_slot: Vec<Option<usize>>,
}

impl AlignmentMap {
    pub fn new(tokens: usize, slots: usize, alignment: &[(usize, usize)]) -> Result<Self> {
        let mut slot_of_token = vec![None; tokens];
        let mut token_of_slot = vec![None; slots];
        for &(t, s) in alignment {
            if t >= tokens || s >= slots {
                return Err(crate::Error::Invariant(format!(
                    "alignment ({t}, {s}) outside {tokens} tokens and {slots} entities"
                )));
            }
            if slot_of_token[t].is_some() || token_of_slot[s].is_some() {
                return Err(crate::Error::Invariant(format!("alignment ({t}, {s}) is not injective")));
            }
            slot_of_token[t] = Some(s);
            token_of_slot[s] = Some(t);
        }
        Ok(AlignmentMap {
            slot_of_token,
            token_of_slot,
        })
    }
}

impl Fusion {
    pub fn new<T: Real, R: Rng + ?Sized>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dim: usize,
        entity_dim: usize,
        inner: usize,
    ) -> Self {
        Fusion {
            token_in: Linear::new(init, &format!("{name}.token_in"), dim, inner, true),
            entity_in: Linear::new(init, &format!("{name}.entity_in"), entity_dim, inner, false),
            token_out: Linear::new(init, &format!("{name}.token_out"), inner, dim, true),
            entity_out: Linear::new(init, &format!("{name}.entity_out"), inner, entity_dim, true),
        }
    }

    /// `tokens` is `[n, H_w]`; `entities` is `[m, H_e]` when `m > 0`.
    /// Entities without an aligned token pass through unchanged.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: Var,
        entities: Option<Var>,
        map: &AlignmentMap,
    ) -> Result<(Var, Option<Var>)> {
        let mut pre = tape.matmul(tokens, p.var(self.token_in.weight))?;
        if let Some(e) = entities {
            let projected = tape.matmul(e, p.var(self.entity_in.weight))?;
            let inner = tape.value(projected).last_dim();
            let picks: Vec<RowPick> = map
                .slot_of_token
                .iter()
                .map(|s| match s {
                    Some(row) => RowPick::From { source: 0, row: *row },
                    None => RowPick::Zero,
                })
                .collect();
            let scattered = tape.rows(&[projected], &picks, inner)?;
            pre = tape.add(pre, scattered)?;
        }
        if let Some(b) = self.token_in.bias {
            pre = tape.add_bias(pre, p.var(b))?;
        }
        let h = tape.gelu(pre)?;
        let w = self.token_out.forward(tape, p, h)?;
        let w = tape.gelu(w)?;
        let e_out = match entities {
            None => None,
            Some(e) => {
                let fused = self.entity_out.forward(tape, p, h)?;
                let fused = tape.gelu(fused)?;
                let d = tape.value(e).last_dim();
                let picks: Vec<RowPick> = map
                    .token_of_slot
                    .iter()
                    .enumerate()
                    .map(|(slot, t)| match t {
                        Some(row) => RowPick::From { source: 0, row: *row },
                        None => RowPick::From { source: 1, row: slot },
                    })
                    .collect();
                Some(tape.rows(&[fused, e], &picks, d)?)
            }
        };
        Ok((w, e_out))
    }
}

/// One knowledgeable layer: attention over each stream, then fusion.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub token_attention: AttentionBlock,
    pub entity_attention: AttentionBlock,
    pub fusion: Fusion,
}

impl Aggregator {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dim: usize,
        heads: usize,
        entity_dim: usize,
        entity_heads: usize,
        inner: usize,
    ) -> Self {
        Aggregator {
            token_attention: AttentionBlock::new(init, &format!("{name}.token"), dim, heads),
            entity_attention: AttentionBlock::new(init, &format!("{name}.entity"), entity_dim, entity_heads),
            fusion: Fusion::new(init, &format!("{name}.fusion"), dim, entity_dim, inner),
        }
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: Var,
        entities: Option<Var>,
        map: &AlignmentMap,
        drop: &mut Option<Dropout<'_, R>>,
    ) -> Result<(Var, Option<Var>)> {
        let w = self.token_attention.forward(tape, p, tokens, drop)?;
        let e = match entities {
            Some(e) => Some(self.entity_attention.forward(tape, p, e, drop)?),
            None => None,
        };
        self.fusion.forward(tape, p, w, e, map)
    }
}
