use std::collections::HashMap;

use kern_core::corpus::aligned::{self, IndexedSentence};
use kern_core::corpus::pretrain::{self, CorruptionStats, EntitySlot, PipelineConfig};
use kern_core::corpus::synth::{self, SynthSpec};
use kern_core::corpus::taskfile::TaskToken;
use kern_core::corpus::{Gazetteer, SubwordVocab};
use kern_core::corpus::gazetteer::parse_entries;
use kern_core::ids::IdTable;
use kern_core::kg::TripleStore;
use kern_core::rng;

fn annotated_world(spec: &SynthSpec) -> (synth::SynthWorld, SubwordVocab, Vec<IndexedSentence>, IdTable) {
    let world = synth::generate(spec).unwrap();
    let vocab = SubwordVocab::learn(&world.vocab_texts(), spec.vocab_size);
    let gaz = Gazetteer::build(&parse_entries(&world.gazetteer).unwrap(), &vocab).unwrap();
    let sentences = aligned::annotate(&world.corpus, &vocab, &gaz);
    let store = TripleStore::parse(&world.triples).unwrap();
    let entities = store.entities().clone();
    let (indexed, dropped) = aligned::index_entities(&sentences, &entities);
    assert_eq!(dropped, 0);
    (world, vocab, indexed, entities)
}

#[test]
fn synthetic_corpus_annotates_three_mentions_per_sentence() {
    let spec = SynthSpec::default();
    let world = synth::generate(&spec).unwrap();
    let vocab = SubwordVocab::learn(&world.vocab_texts(), spec.vocab_size);
    let gaz = Gazetteer::build(&parse_entries(&world.gazetteer).unwrap(), &vocab).unwrap();
    let sentences = aligned::annotate(&world.corpus, &vocab, &gaz);
    assert_eq!(sentences.len(), spec.sentences);
    let names: HashMap<String, String> = parse_entries(&world.gazetteer)
        .unwrap()
        .into_iter()
        .map(|(s, e)| (e, s))
        .collect();
    for (line, s) in world.corpus.lines().filter(|l| !l.is_empty()).zip(&sentences) {
        assert_eq!(s.mentions.len(), 3, "{line}");
        let align = s.alignment().unwrap();
        let starts: Vec<usize> = s.mentions.iter().map(|m| m.start).collect();
        assert_eq!(align.keys().copied().collect::<Vec<_>>(), starts);
        for m in &s.mentions {
            assert!(line.contains(&names[&m.entity]));
        }
    }
    assert_eq!(aligned::filter_sentences(sentences, 3).len(), spec.sentences);
}

#[test]
fn annotated_jsonl_round_trips() {
    let spec = SynthSpec { sentences: 16, ..SynthSpec::default() };
    let world = synth::generate(&spec).unwrap();
    let vocab = SubwordVocab::learn(&world.vocab_texts(), spec.vocab_size);
    let gaz = Gazetteer::build(&parse_entries(&world.gazetteer).unwrap(), &vocab).unwrap();
    let sentences = aligned::annotate(&world.corpus, &vocab, &gaz);
    let back = aligned::parse_jsonl(&aligned::to_jsonl(&sentences), vocab.len()).unwrap();
    assert_eq!(back, sentences);
}

#[test]
fn entity_corruption_rates() {
    let (_, _, sentences, entities) = annotated_world(&SynthSpec::default());
    let mut stats = CorruptionStats::default();
    let mut r = rng::stream(2024, &[]);
    let mut examples = 0;
    while stats.alignments < 200_000 {
        let a = &sentences[examples % sentences.len()];
        let b = &sentences[(examples + 1) % sentences.len()];
        let ex = pretrain::pack(a, b, true);
        let out = pretrain::corrupt_entities(ex.clone(), entities.len(), &mut r, &mut stats);
        assert_eq!(out.tokens, ex.tokens);
        assert_eq!(out.entity_targets.len(), ex.alignment.len());
        for t in &out.entity_targets {
            assert!(t.candidate < out.candidates.len());
            assert_eq!(out.candidates[t.candidate], ex.original_entities[ex.alignment.iter().find(|a| a.0 == t.position).unwrap().1]);
        }
        examples += 1;
    }
    let n = stats.alignments as f64;
    let (rep, mask, keep) = (
        stats.replaced as f64 / n,
        stats.masked as f64 / n,
        stats.kept as f64 / n,
    );
    assert!((rep - 0.05).abs() <= 0.005, "replaced {rep}");
    assert!((mask - 0.15).abs() <= 0.005, "masked {mask}");
    assert!((keep - 0.80).abs() <= 0.005, "kept {keep}");
}

#[test]
fn token_masking_split() {
    let (_, vocab, sentences, _) = annotated_world(&SynthSpec::default());
    let mut stats = CorruptionStats::default();
    let mut r = rng::stream(77, &[]);
    let mut i = 0;
    while stats.tokens_selected < 100_000 {
        let ex = pretrain::pack(&sentences[i % sentences.len()], &sentences[(i + 3) % sentences.len()], false);
        let out = pretrain::corrupt_tokens(ex.clone(), vocab.len(), &mut r, &mut stats);
        assert_eq!(out.slots, ex.slots);
        assert_eq!(out.alignment, ex.alignment);
        i += 1;
    }
    let n = stats.tokens_selected as f64;
    assert!((stats.tokens_masked as f64 / n - 0.8).abs() <= 0.01);
    assert!((stats.tokens_randomized as f64 / n - 0.1).abs() <= 0.01);
    assert!((stats.tokens_kept as f64 / n - 0.1).abs() <= 0.01);
}

#[test]
fn pairing_label_balance() {
    let (_, _, sentences, _) = annotated_world(&SynthSpec::default());
    let mut next = 0;
    let mut total = 0;
    let mut epoch = 0;
    while total < 10_000 {
        let pairs = pretrain::pair_sentences(&sentences, &mut rng::stream(9, &[epoch])).unwrap();
        for p in pairs {
            total += 1;
            if p.is_next {
                next += 1;
                assert_eq!(sentences[p.second].sent, sentences[p.first].sent + 1);
            } else {
                assert_ne!(sentences[p.second].doc, sentences[p.first].doc);
            }
        }
        epoch += 1;
    }
    let frac = next as f64 / total as f64;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
}

#[test]
fn epoch_examples_are_well_formed_and_reproducible() {
    let (_, vocab, sentences, entities) = annotated_world(&SynthSpec { sentences: 64, ..SynthSpec::default() });
    let cfg = PipelineConfig {
        seed: 3,
        max_len: 128,
        corrupt_entities: true,
        corrupt_tokens: true,
    };
    let (a, stats) = pretrain::build_epoch(&sentences, entities.len(), vocab.len(), &cfg, 0).unwrap();
    let (b, _) = pretrain::build_epoch(&sentences, entities.len(), vocab.len(), &cfg, 0).unwrap();
    assert_eq!(a, b);
    let (c, _) = pretrain::build_epoch(&sentences, entities.len(), vocab.len(), &cfg, 1).unwrap();
    assert_ne!(a, c);
    assert_eq!(stats.overlength_pairs, 0);
    for ex in &a {
        assert_eq!(ex.tokens.len(), ex.segments.len());
        assert_eq!(ex.slots.len(), ex.original_entities.len());
        assert_eq!(ex.alignment.len(), 6);
        for t in &ex.entity_targets {
            assert!(t.candidate < ex.candidates.len());
        }
        for s in &ex.slots {
            if let EntitySlot::Entity(e) = s {
                assert!(*e < entities.len());
            }
        }
    }
}

/// Exhaustive oracle over the written files: the label distribution of
/// every graph triple, grouped by the surface text a relation example
/// would show for it.
#[test]
fn text_only_bound_at_full_ambiguity() {
    for seed in 0..3 {
        let world = synth::generate(&SynthSpec { seed, ..SynthSpec::default() }).unwrap();
        let mut surface: HashMap<String, String> = HashMap::new();
        for rec in world.typing_train.iter().chain(&world.typing_test).chain(&world.relation_train).chain(&world.relation_test) {
            for (e, s, t) in &rec.mentions {
                let words: Vec<String> = rec.tokens[*s..*t]
                    .iter()
                    .map(|t| match t {
                        TaskToken::Text(w) => w.clone(),
                        TaskToken::Id(i) => i.to_string(),
                    })
                    .collect();
                surface.insert(e.clone(), words.join(" "));
            }
        }
        let mut by_text: HashMap<(String, String), HashMap<String, usize>> = HashMap::new();
        for line in world.triples.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            *by_text
                .entry((surface[f[0]].clone(), surface[f[2]].clone()))
                .or_default()
                .entry(f[1].to_owned())
                .or_default() += 1;
        }
        let mut acc = 0.0;
        for rec in &world.relation_test {
            let key = (surface[&rec.mentions[rec.marked[0]].0].clone(), surface[&rec.mentions[rec.marked[1]].0].clone());
            let counts = &by_text[&key];
            acc += *counts.values().max().unwrap() as f64 / counts.values().sum::<usize>() as f64;
        }
        acc /= world.relation_test.len() as f64;
        assert!((acc - 1.0 / world.spec.relations as f64).abs() < 1e-12, "{acc}");
        assert!((world.text_only_bound() - acc).abs() < 1e-12);
    }
}
