use rand::Rng;

use super::config::ModelConfig;
use super::layers::{maybe_dropout, Aggregator, AlignmentMap, Dropout, Init, Norm, TextLayer};
use super::params::{Bound, ParamId, ParamStore};
use crate::corpus::pretrain::EntitySlot;
use crate::error::{Error, Result};
use crate::numerics::{Real, RowPick, Tape, Tensor, Var};
use crate::rng;

const INIT_STREAM: u64 = 0x656e_63;

/// Parameter ids of the encoder inside its store.
#[derive(Clone, Debug)]
pub struct Layout {
    pub token_embedding: ParamId,
    pub segment_embedding: ParamId,
    pub position_embedding: ParamId,
    pub embedding_norm: Norm,
    pub text: Vec<TextLayer>,
    pub knowledge: Vec<Aggregator>,
    /// Entity-stream input for masked alignments.
    pub entity_mask: ParamId,
}

impl Layout {
    pub fn build<T: Real, R: Rng + ?Sized>(init: &mut Init<'_, T, R>, c: &ModelConfig) -> Self {
        let inner = c.inner();
        Layout {
            token_embedding: init.normal("embed.token", &[c.vocab_size, c.hidden]),
            segment_embedding: init.normal("embed.segment", &[2, c.hidden]),
            position_embedding: init.normal("embed.position", &[c.max_len, c.hidden]),
            embedding_norm: Norm::new(init, "embed.norm", c.hidden),
            text: (0..c.text_layers)
                .map(|i| TextLayer::new(init, &format!("text.{i}"), c.hidden, c.heads, inner))
                .collect(),
            knowledge: (0..c.knowledge_layers)
                .map(|i| {
                    Aggregator::new(
                        init,
                        &format!("knowledge.{i}"),
                        c.hidden,
                        c.heads,
                        c.entity_hidden,
                        c.entity_heads,
                        inner,
                    )
                })
                .collect(),
            entity_mask: init.normal("embed.entity_mask", &[1, c.entity_hidden]),
        }
    }
}

/// One encoder input: a token sequence and the entities aligned to it.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub tokens: &'a [usize],
    pub segments: &'a [usize],
    pub slots: &'a [EntitySlot],
    /// `(token position, slot)` pairs.
    pub alignment: &'a [(usize, usize)],
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[n, hidden]`.
    pub tokens: Var,
    /// `[m, entity_hidden]`, absent when the input has no entities.
    pub entities: Option<Var>,
}

/// Two-stack encoder with its trainable parameters and the frozen entity
/// table. The table never enters the parameter store, so no optimizer
/// step can reach it.
#[derive(Clone, Debug)]
pub struct Encoder<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub layout: Layout,
    entity_table: Tensor<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: ModelConfig, entity_table: Tensor<T>) -> Result<Self> {
        config.validate()?;
        if entity_table.shape() != [config.entity_count, config.entity_hidden] {
            return Err(Error::Shape {
                op: "entity table",
                lhs: entity_table.shape().to_vec(),
                rhs: vec![config.entity_count, config.entity_hidden],
            });
        }
        let mut params = ParamStore::new();
        let mut r = rng::stream(config.seed, &[INIT_STREAM]);
        let layout = Layout::build(
            &mut Init {
                store: &mut params,
                rng: &mut r,
                std: config.init_std,
            },
            &config,
        );
        Ok(Encoder {
            config,
            params,
            layout,
            entity_table,
        })
    }

    pub fn entity_table(&self) -> &Tensor<T> {
        &self.entity_table
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            entity_table: self.entity_table.cast(),
        }
    }

    /// Copies every parameter whose name and shape match one in `source`.
    /// Returns the number copied.
    pub fn load_matching(&mut self, source: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for (name, t) in source.iter() {
            if let Some(id) = self.params.id(name) {
                if self.params.get(id).shape() == t.shape() {
                    *self.params.get_mut(id) = t.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.params.bind(tape)
    }

    /// Text stack: summed token, segment and position embeddings, then
    /// the post-norm layers.
    pub fn t_encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[usize],
        segments: &[usize],
        drop: &mut Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Invariant("empty token sequence".into()));
        }
        if n > self.config.max_len {
            return Err(Error::Invariant(format!(
                "sequence of {n} tokens exceeds max_len {}; truncate before encoding",
                self.config.max_len
            )));
        }
        if segments.len() != n {
            return Err(Error::Shape {
                op: "segments",
                lhs: vec![n],
                rhs: vec![segments.len()],
            });
        }
        let l = &self.layout;
        let tok = tape.embedding(p.var(l.token_embedding), tokens)?;
        let seg = tape.embedding(p.var(l.segment_embedding), segments)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.embedding(p.var(l.position_embedding), &positions)?;
        let x = tape.add(tok, seg)?;
        let x = tape.add(x, pos)?;
        let x = l.embedding_norm.forward(tape, p, x)?;
        let mut x = maybe_dropout(tape, x, drop)?;
        for layer in &l.text {
            x = layer.forward(tape, p, x, drop)?;
        }
        Ok(x)
    }

    /// Entity-stream input: frozen table rows, or the learned mask vector
    /// for masked slots.
    pub fn entity_input(&self, tape: &mut Tape<T>, p: &Bound, slots: &[EntitySlot]) -> Result<Option<Var>> {
        if slots.is_empty() {
            return Ok(None);
        }
        let d = self.config.entity_hidden;
        let mut gathered = Vec::new();
        let mut picks = Vec::with_capacity(slots.len());
        for slot in slots {
            match *slot {
                EntitySlot::Entity(e) => {
                    if e >= self.config.entity_count {
                        return Err(Error::Index {
                            context: "entity table",
                            index: e,
                            bound: self.config.entity_count,
                        });
                    }
                    picks.push(RowPick::From {
                        source: 0,
                        row: gathered.len() / d,
                    });
                    gathered.extend_from_slice(self.entity_table.row(e));
                }
                EntitySlot::Masked => picks.push(RowPick::From { source: 1, row: 0 }),
            }
        }
        if gathered.is_empty() {
            gathered.resize(d, T::zero());
        }
        let rows = gathered.len() / d;
        let table = tape.constant(Tensor::new(vec![rows, d], gathered)?);
        Ok(Some(tape.rows(&[table, p.var(self.layout.entity_mask)], &picks, d)?))
    }

    /// Knowledgeable stack over text features and entity inputs.
    pub fn k_encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: Var,
        entities: Option<Var>,
        alignment: &[(usize, usize)],
        drop: &mut Option<Dropout<'_, R>>,
    ) -> Result<EncoderOutput> {
        let n = tape.value(tokens).rows();
        let m = entities.map_or(0, |e| tape.value(e).rows());
        let map = AlignmentMap::new(n, m, alignment)?;
        let (mut w, mut e) = (tokens, entities);
        for agg in &self.layout.knowledge {
            (w, e) = agg.forward(tape, p, w, e, &map, drop)?;
        }
        Ok(EncoderOutput { tokens: w, entities: e })
    }

    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: &EncoderInput<'_>,
        drop: &mut Option<Dropout<'_, R>>,
    ) -> Result<EncoderOutput> {
        let w = self.t_encode(tape, p, input.tokens, input.segments, drop)?;
        let e = self.entity_input(tape, p, input.slots)?;
        self.k_encode(tape, p, w, e, input.alignment, drop)
    }

    /// Forward pass without dropout.
    pub fn encode_eval(&self, tape: &mut Tape<T>, p: &Bound, input: &EncoderInput<'_>) -> Result<EncoderOutput> {
        self.encode::<rand_chacha::ChaCha8Rng>(tape, p, input, &mut None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            text_layers: 1,
            knowledge_layers: 2,
            hidden: 8,
            entity_hidden: 4,
            heads: 2,
            entity_heads: 2,
            vocab_size: 20,
            entity_count: 6,
            max_len: 12,
            ff_mult: 2,
            dropout: 0.0,
            init_std: 0.3,
            seed: 7,
        }
    }

    fn table(c: &ModelConfig, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[c.entity_count, c.entity_hidden], 0.5, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn model() -> Encoder<f64> {
        let c = tiny();
        let t = table(&c, 1);
        Encoder::new(c, t).unwrap()
    }

    const TOKENS: [usize; 6] = [2, 9, 11, 3, 14, 3];
    const SEGMENTS: [usize; 6] = [0, 0, 0, 0, 1, 1];

    #[test]
    fn single_token_shape() {
        let enc = model();
        let mut tape = Tape::new();
        let p = enc.bind(&mut tape);
        let out = enc
            .encode_eval(&mut tape, &p, &EncoderInput { tokens: &[2], segments: &[0], slots: &[], alignment: &[] })
            .unwrap();
        assert_eq!(tape.shape(out.tokens), [1, 8]);
        assert!(out.entities.is_none());
    }

    #[test]
    fn shapes_follow_inputs() {
        let enc = model();
        let mut tape = Tape::new();
        let p = enc.bind(&mut tape);
        let slots = [EntitySlot::Entity(4), EntitySlot::Masked, EntitySlot::Entity(0)];
        let out = enc
            .encode_eval(
                &mut tape,
                &p,
                &EncoderInput { tokens: &TOKENS, segments: &SEGMENTS, slots: &slots, alignment: &[(1, 0), (4, 2)] },
            )
            .unwrap();
        assert_eq!(tape.shape(out.tokens), [6, 8]);
        assert_eq!(tape.shape(out.entities.unwrap()), [3, 4]);
    }

    #[test]
    fn errors_on_bad_inputs() {
        let enc = model();
        let mut tape = Tape::new();
        let p = enc.bind(&mut tape);
        let long = vec![2; 13];
        let seg = vec![0; 13];
        let r = enc.encode_eval(&mut tape, &p, &EncoderInput { tokens: &long, segments: &seg, slots: &[], alignment: &[] });
        assert!(matches!(r, Err(Error::Invariant(_))));
        let r = enc.encode_eval(
            &mut tape,
            &p,
            &EncoderInput { tokens: &TOKENS, segments: &SEGMENTS, slots: &[EntitySlot::Entity(6)], alignment: &[(0, 0)] },
        );
        assert!(matches!(r, Err(Error::Index { .. })));
        let r = enc.encode_eval(
            &mut tape,
            &p,
            &EncoderInput { tokens: &TOKENS, segments: &SEGMENTS, slots: &[EntitySlot::Entity(1)], alignment: &[(0, 1)] },
        );
        assert!(matches!(r, Err(Error::Invariant(_))));
    }

    #[test]
    fn masked_slot_uses_learned_vector() {
        let enc = model();
        let mut tape = Tape::new();
        let p = enc.bind(&mut tape);
        let e = enc.entity_input(&mut tape, &p, &[EntitySlot::Masked, EntitySlot::Entity(3)]).unwrap().unwrap();
        let v = tape.value(e);
        assert_eq!(v.row(0), enc.params.get(enc.layout.entity_mask).data());
        assert_eq!(v.row(1), enc.entity_table().row(3));
    }

    #[test]
    fn no_entities_takes_token_only_path() {
        let enc = model();
        let mut tape = Tape::new();
        let p = enc.bind(&mut tape);
        let a = enc
            .encode_eval(&mut tape, &p, &EncoderInput { tokens: &TOKENS, segments: &SEGMENTS, slots: &[], alignment: &[] })
            .unwrap();
        // An unaligned entity changes nothing on the token side.
        let b = enc
            .encode_eval(
                &mut tape,
                &p,
                &EncoderInput { tokens: &TOKENS, segments: &SEGMENTS, slots: &[EntitySlot::Entity(2)], alignment: &[] },
            )
            .unwrap();
        assert_eq!(tape.value(a.tokens).data(), tape.value(b.tokens).data());
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let enc = model().cast::<f32>();
        let slots = [EntitySlot::Entity(4), EntitySlot::Masked];
        let input = EncoderInput { tokens: &TOKENS, segments: &SEGMENTS, slots: &slots, alignment: &[(1, 0), (4, 1)] };
        let run = || {
            let mut tape = Tape::new();
            let p = enc.bind(&mut tape);
            let out = enc.encode_eval(&mut tape, &p, &input).unwrap();
            (tape.value(out.tokens).clone(), tape.value(out.entities.unwrap()).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_encoder_gradients() {
        let enc = model();
        let slots = [EntitySlot::Entity(4), EntitySlot::Masked, EntitySlot::Entity(1)];
        let alignment = [(1, 0), (4, 1), (5, 2)];
        let weights_w = Tensor::<f64>::randn(&[6, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let weights_e = Tensor::<f64>::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let report = grad_check(
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let out = enc.encode_eval(
                    tape,
                    &p,
                    &EncoderInput { tokens: &TOKENS, segments: &SEGMENTS, slots: &slots, alignment: &alignment },
                )?;
                let ww = tape.constant(weights_w.clone());
                let we = tape.constant(weights_e.clone());
                let a = tape.mul(out.tokens, ww)?;
                let a = tape.sum(a)?;
                let b = tape.mul(out.entities.unwrap(), we)?;
                let b = tape.sum(b)?;
                tape.add(a, b)
            },
            enc.params.tensors(),
            &GradCheckOptions {
                max_probes: Some(24),
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.passes(1e-6), "{}", report.max_rel_err);
    }
}
