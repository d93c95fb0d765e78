use kern_core::corpus::pretrain::EntitySlot;
use kern_core::encoder::{Encoder, EncoderInput, ModelConfig, ParamStore};
use kern_core::numerics::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

/// Plain nested-loop forward pass reading parameters by name.
struct Reference<'a> {
    p: &'a ParamStore<f32>,
    c: &'a ModelConfig,
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

impl Reference<'_> {
    fn t(&self, name: &str) -> Vec<f64> {
        let id = self.p.id(name).unwrap_or_else(|| panic!("missing {name}"));
        self.p.get(id).data().iter().map(|&v| v as f64).collect()
    }

    fn has(&self, name: &str) -> bool {
        self.p.id(name).is_some()
    }

    fn linear(&self, x: &Mat, name: &str) -> Mat {
        let w = self.t(&format!("{name}.weight"));
        let bias = if self.has(&format!("{name}.bias")) {
            Some(self.t(&format!("{name}.bias")))
        } else {
            None
        };
        let inputs = x[0].len();
        let outputs = w.len() / inputs;
        x.iter()
            .map(|row| {
                (0..outputs)
                    .map(|o| {
                        let mut s = 0.0;
                        for i in 0..inputs {
                            s += row[i] * w[i * outputs + o];
                        }
                        s + bias.as_ref().map_or(0.0, |b| b[o])
                    })
                    .collect()
            })
            .collect()
    }

    fn norm(&self, x: &Mat, name: &str) -> Mat {
        let g = self.t(&format!("{name}.gain"));
        let b = self.t(&format!("{name}.bias"));
        x.iter()
            .map(|row| {
                let d = row.len() as f64;
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    fn attention(&self, x: &Mat, name: &str, heads: usize) -> Mat {
        let q = self.linear(x, &format!("{name}.query"));
        let k = self.linear(x, &format!("{name}.key"));
        let v = self.linear(x, &format!("{name}.value"));
        let (l, d) = (x.len(), x[0].len());
        let dh = d / heads;
        let mut ctx = vec![vec![0.0; d]; l];
        for h in 0..heads {
            for i in 0..l {
                let scores: Vec<f64> = (0..l)
                    .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..l {
                    for c in 0..dh {
                        ctx[i][h * dh + c] += exps[j] / z * v[j][h * dh + c];
                    }
                }
            }
        }
        self.linear(&ctx, &format!("{name}.output"))
    }

    fn block(&self, x: &Mat, name: &str, heads: usize) -> Mat {
        let a = self.attention(x, &format!("{name}.attention"), heads);
        self.norm(&add(x, &a), &format!("{name}.norm"))
    }

    fn forward(&self, tokens: &[usize], segments: &[usize], entities: &Mat, alignment: &[(usize, usize)]) -> (Mat, Mat) {
        let h = self.c.hidden;
        let (te, se, pe) = (self.t("embed.token"), self.t("embed.segment"), self.t("embed.position"));
        let x: Mat = tokens
            .iter()
            .zip(segments)
            .enumerate()
            .map(|(i, (&t, &s))| (0..h).map(|j| te[t * h + j] + se[s * h + j] + pe[i * h + j]).collect())
            .collect();
        let mut x = self.norm(&x, "embed.norm");
        for i in 0..self.c.text_layers {
            let a = self.block(&x, &format!("text.{i}.self"), self.c.heads);
            let f = self.linear(&a, &format!("text.{i}.ff.expand"));
            let f: Mat = f.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
            let f = self.linear(&f, &format!("text.{i}.ff.contract"));
            x = self.norm(&add(&a, &f), &format!("text.{i}.ff.norm"));
        }
        let mut e = entities.clone();
        for i in 0..self.c.knowledge_layers {
            let name = format!("knowledge.{i}");
            let w = self.block(&x, &format!("{name}.token"), self.c.heads);
            let et = if e.is_empty() { e.clone() } else { self.block(&e, &format!("{name}.entity"), self.c.entity_heads) };
            let mut new_w = Vec::new();
            let mut new_e = et.clone();
            for (j, row) in w.iter().enumerate() {
                let mut pre = self.linear(&vec![row.clone()], &format!("{name}.fusion.token_in"))[0].clone();
                let slot = alignment.iter().find(|a| a.0 == j).map(|a| a.1);
                if let Some(s) = slot {
                    let pe = self.linear(&vec![et[s].clone()], &format!("{name}.fusion.entity_in"))[0].clone();
                    // Bias is added after the entity term in the tape; order
                    // only matters at roundoff level here.
                    for (a, b) in pre.iter_mut().zip(pe) {
                        *a += b;
                    }
                }
                let hid: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
                let wo = self.linear(&vec![hid.clone()], &format!("{name}.fusion.token_out"))[0]
                    .iter()
                    .map(|&v| gelu(v))
                    .collect();
                new_w.push(wo);
                if let Some(s) = slot {
                    new_e[s] = self.linear(&vec![hid], &format!("{name}.fusion.entity_out"))[0]
                        .iter()
                        .map(|&v| gelu(v))
                        .collect();
                }
            }
            x = new_w;
            e = new_e;
        }
        (x, e)
    }
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        text_layers: 2,
        knowledge_layers: 2,
        hidden: 8,
        entity_hidden: 4,
        heads: 2,
        entity_heads: 2,
        vocab_size: 30,
        entity_count: 10,
        max_len: 16,
        ff_mult: 2,
        dropout: 0.0,
        init_std: 0.2,
        seed,
    }
}

fn encoder(seed: u64) -> Encoder<f32> {
    let c = tiny(seed);
    let table = Tensor::randn(&[c.entity_count, c.entity_hidden], 0.5, &mut ChaCha8Rng::seed_from_u64(seed + 100));
    Encoder::new(c, table).unwrap()
}

struct Case {
    tokens: Vec<usize>,
    segments: Vec<usize>,
    slots: Vec<EntitySlot>,
    alignment: Vec<(usize, usize)>,
}

fn random_case(r: &mut ChaCha8Rng, c: &ModelConfig) -> Case {
    let n = r.random_range(1..=c.max_len);
    let tokens: Vec<usize> = (0..n).map(|_| r.random_range(0..c.vocab_size)).collect();
    let split = r.random_range(0..=n);
    let segments = (0..n).map(|i| usize::from(i >= split)).collect();
    let m = r.random_range(0..=n.min(5));
    let slots = (0..m)
        .map(|_| {
            if r.random::<f64>() < 0.2 {
                EntitySlot::Masked
            } else {
                EntitySlot::Entity(r.random_range(0..c.entity_count))
            }
        })
        .collect();
    let mut positions: Vec<usize> = (0..n).collect();
    kern_core::rng::shuffle(&mut positions, r);
    let aligned = r.random_range(0..=m);
    let mut alignment: Vec<(usize, usize)> = (0..aligned).map(|s| (positions[s], s)).collect();
    alignment.sort();
    Case {
        tokens,
        segments,
        slots,
        alignment,
    }
}

fn run(enc: &Encoder<f32>, case: &Case) -> (Tensor<f32>, Option<Tensor<f32>>) {
    let mut tape = Tape::new();
    let p = enc.bind(&mut tape);
    let out = enc
        .encode_eval(
            &mut tape,
            &p,
            &EncoderInput {
                tokens: &case.tokens,
                segments: &case.segments,
                slots: &case.slots,
                alignment: &case.alignment,
            },
        )
        .unwrap();
    (tape.value(out.tokens).clone(), out.entities.map(|e| tape.value(e).clone()))
}

#[test]
fn forward_matches_scalar_reference() {
    for seed in 0..5 {
        let enc = encoder(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..4 {
            let case = random_case(&mut r, &enc.config);
            let (w, e) = run(&enc, &case);
            let mask: Vec<f64> = enc.params.get(enc.layout.entity_mask).data().iter().map(|&v| v as f64).collect();
            let ents: Mat = case
                .slots
                .iter()
                .map(|s| match s {
                    EntitySlot::Entity(i) => enc.entity_table().row(*i).iter().map(|&v| v as f64).collect(),
                    EntitySlot::Masked => mask.clone(),
                })
                .collect();
            let reference = Reference { p: &enc.params, c: &enc.config };
            let (rw, re) = reference.forward(&case.tokens, &case.segments, &ents, &case.alignment);
            for (i, row) in rw.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert!((w.at(i, j) as f64 - v).abs() < 1e-5, "token ({i},{j}): {} vs {v}", w.at(i, j));
                }
            }
            if let Some(e) = e {
                for (i, row) in re.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        assert!((e.at(i, j) as f64 - v).abs() < 1e-5);
                    }
                }
            }
        }
    }
}

#[test]
fn outputs_finite_over_many_random_inputs() {
    let enc = encoder(3);
    let mut r = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let case = random_case(&mut r, &enc.config);
        let (w, e) = run(&enc, &case);
        assert!(w.is_finite());
        assert_eq!(w.shape(), [case.tokens.len(), 8]);
        match e {
            Some(e) => {
                assert!(e.is_finite());
                assert_eq!(e.shape(), [case.slots.len(), 4]);
            }
            None => assert!(case.slots.is_empty()),
        }
    }
}

#[test]
fn examples_are_encoded_independently() {
    let enc = encoder(1);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let cases: Vec<Case> = (0..6).map(|_| random_case(&mut r, &enc.config)).collect();
    let forward: Vec<_> = cases.iter().map(|c| run(&enc, c)).collect();
    let backward: Vec<_> = cases.iter().rev().map(|c| run(&enc, c)).collect();
    for (a, b) in forward.iter().zip(backward.iter().rev()) {
        assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entity_permutation_equivariance(seed in 0u64..1000) {
        let enc = encoder(seed % 4);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut r, &enc.config);
        let m = case.slots.len();
        let mut perm: Vec<usize> = (0..m).collect();
        kern_core::rng::shuffle(&mut perm, &mut r);
        // Slot s moves to position perm[s].
        let mut slots = vec![EntitySlot::Masked; m];
        for (s, &to) in perm.iter().enumerate() {
            slots[to] = case.slots[s];
        }
        let alignment = case.alignment.iter().map(|&(t, s)| (t, perm[s])).collect();
        let permuted = Case { tokens: case.tokens.clone(), segments: case.segments.clone(), slots, alignment };
        let (w1, e1) = run(&enc, &case);
        let (w2, e2) = run(&enc, &permuted);
        for (a, b) in w1.data().iter().zip(w2.data()) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
        if let (Some(e1), Some(e2)) = (e1, e2) {
            for (s, &to) in perm.iter().enumerate() {
                for (a, b) in e1.row(s).iter().zip(e2.row(to)) {
                    prop_assert!((a - b).abs() <= 1e-5);
                }
            }
        }
    }
}
