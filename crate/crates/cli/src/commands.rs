//! One function per subcommand. Each returns a JSON report; `main`
//! prints it or its human-readable rendering.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use kern_core::checkpoint::{write_atomic, Checkpoint};
use kern_core::corpus::gazetteer::parse_entries;
use kern_core::corpus::synth::{self, SynthSpec};
use kern_core::corpus::{aligned, taskfile, Gazetteer, SubwordVocab};
use kern_core::encoder::ModelConfig;
use kern_core::gradsuite;
use kern_core::ids::IdTable;
use kern_core::kg::{self, KgEmbedConfig, Norm, TripleStore};
use kern_core::objectives::{PretrainConfig, LOSS_LOG_HEADER};
use kern_core::pipeline::{self, Corpus, ModelSnapshot, KG_ENTITY, MIN_ENTITIES};
use kern_core::tasks::{self, FinetuneConfig, LabelSet, TaskKind};
use kern_core::{Error, Result};

use crate::settings::Settings;

pub type Keys = Vec<(&'static str, String)>;

fn s<T: ToString>(v: T) -> String {
    v.to_string()
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("json value serializes");
    text.push('\n');
    write_text(path, &text)
}

/// Sidecar id files written next to a knowledge-graph checkpoint.
pub fn sidecar(kg: &Path, what: &str) -> PathBuf {
    let mut name = kg.as_os_str().to_owned();
    name.push(format!(".{what}.txt"));
    PathBuf::from(name)
}

pub fn synth_keys() -> Keys {
    let d = SynthSpec::default();
    vec![
        ("out_dir", String::new()),
        ("entities", s(d.entities)),
        ("relations", s(d.relations)),
        ("triples", s(d.triples)),
        ("vocab_size", s(d.vocab_size)),
        ("sentences", s(d.sentences)),
        ("sentences_per_doc", s(d.sentences_per_doc)),
        ("ambiguity", s(d.ambiguity)),
        ("test_fraction", s(d.test_fraction)),
        ("typing_mentions_per_entity", s(d.typing_mentions_per_entity)),
        ("seed", s(d.seed)),
    ]
}

pub fn synth_gen(st: &Settings) -> Result<Value> {
    let spec = SynthSpec {
        entities: st.get("entities")?,
        relations: st.get("relations")?,
        triples: st.get("triples")?,
        vocab_size: st.get("vocab_size")?,
        sentences: st.get("sentences")?,
        sentences_per_doc: st.get("sentences_per_doc")?,
        ambiguity: st.get("ambiguity")?,
        test_fraction: st.get("test_fraction")?,
        typing_mentions_per_entity: st.get("typing_mentions_per_entity")?,
        seed: st.get("seed")?,
    };
    let out = st.path("out_dir")?;
    let world = synth::generate(&spec)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut files = Vec::new();
    for (name, text) in pipeline::world_files(&world) {
        write_text(&out.join(name), &text)?;
        files.push(name);
    }
    Ok(json!({
        "files": files,
        "sentences": spec.sentences,
        "relation_train": world.relation_train.len(),
        "relation_test": world.relation_test.len(),
        "text_only_bound": world.text_only_bound(),
    }))
}

pub fn kg_keys() -> Keys {
    let d = KgEmbedConfig::default();
    vec![
        ("triples", String::new()),
        ("out", String::new()),
        ("dim", s(d.dim)),
        ("margin", s(d.margin)),
        ("negatives", s(d.negatives)),
        ("norm", s(d.norm.order())),
        ("learning_rate", s(d.learning_rate)),
        ("epochs", s(d.epochs)),
        ("seed", s(d.seed)),
    ]
}

pub fn kg_train(st: &Settings) -> Result<Value> {
    let cfg = KgEmbedConfig {
        dim: st.get("dim")?,
        margin: st.get("margin")?,
        negatives: st.get("negatives")?,
        norm: Norm::parse(st.raw("norm"))?,
        learning_rate: st.get("learning_rate")?,
        epochs: st.get("epochs")?,
        seed: st.get("seed")?,
    };
    let out = st.path("out")?;
    let store = TripleStore::load(&st.path("triples")?)?;
    let (emb, log) = kg::train(&store, &cfg)?;
    let lp = kg::link_prediction_eval(&store, &emb, store.triples(), cfg.norm);
    pipeline::kg_checkpoint(&emb, &cfg, &log.epoch_losses).save(&out)?;
    write_text(&sidecar(&out, "entities"), &emb.entity_ids.to_lines())?;
    write_text(&sidecar(&out, "relations"), &emb.relation_ids.to_lines())?;
    Ok(json!({
        "entities": emb.entity_ids.len(),
        "relations": emb.relation_ids.len(),
        "triples": store.len(),
        "final_loss": log.epoch_losses.last().copied().unwrap_or(0.0),
        "skipped_negatives": log.skipped_negatives,
        "hits_at_1": lp.hits_at_1,
        "hits_at_10": lp.hits_at_10,
        "mean_rank": lp.mean_rank,
    }))
}

pub fn annotate_keys() -> Keys {
    vec![
        ("corpus", String::new()),
        ("gazetteer", String::new()),
        ("vocab", String::new()),
        ("learn_vocab", s(false)),
        ("vocab_size", s(SynthSpec::default().vocab_size)),
        ("out", String::new()),
        ("min_entities", s(MIN_ENTITIES)),
    ]
}

pub fn annotate(st: &Settings) -> Result<Value> {
    let text = read(&st.path("corpus")?)?;
    let gaz_path = st.path("gazetteer")?;
    let entries = parse_entries(&read(&gaz_path)?)?;
    let vocab_path = st.path("vocab")?;
    let vocab = if st.flag("learn_vocab")? {
        let mut texts: Vec<&str> = text.lines().collect();
        texts.extend(entries.iter().map(|(surface, _)| surface.as_str()));
        let v = SubwordVocab::learn(&texts, st.get("vocab_size")?);
        write_text(&vocab_path, &v.to_lines())?;
        v
    } else {
        SubwordVocab::load(&vocab_path)?
    };
    let gazetteer = Gazetteer::build(&entries, &vocab)?;
    let all = aligned::annotate(&text, &vocab, &gazetteer);
    let total = all.len();
    let mentions: usize = all.iter().map(|s| s.mentions.len()).sum();
    let kept = aligned::filter_sentences(all, st.get("min_entities")?);
    write_text(&st.path("out")?, &aligned::to_jsonl(&kept))?;
    Ok(json!({
        "sentences": total,
        "kept": kept.len(),
        "mentions": mentions,
        "vocab_size": vocab.len(),
    }))
}

const MODEL_KEYS: [&str; 10] = [
    "text_layers",
    "knowledge_layers",
    "hidden",
    "heads",
    "entity_heads",
    "max_len",
    "ff_mult",
    "dropout",
    "init_std",
    "entity_hidden",
];

pub fn pretrain_keys() -> Keys {
    let d = PretrainConfig::desk();
    let mut k = vec![
        ("corpus", String::new()),
        ("vocab", String::new()),
        ("kg", String::new()),
        ("entities", String::new()),
        ("out", String::new()),
        ("loss_log", String::new()),
        ("preset", s("desk")),
        ("steps", s(d.steps)),
        ("batch_size", s(d.batch_size)),
        ("learning_rate", s(d.learning_rate)),
        ("dea", s(d.loss.dea)),
        ("dea_corrupted_only", s(d.loss.dea_corrupted_only)),
        ("corrupt_entities", s(d.corrupt_entities)),
        ("corrupt_tokens", s(d.corrupt_tokens)),
        ("min_entities", s(MIN_ENTITIES)),
        ("seed", s(d.seed)),
    ];
    k.extend(MODEL_KEYS.iter().map(|&m| (m, String::new())));
    k
}

fn model_config(st: &Settings, vocab: usize, entities: usize, entity_dim: usize, seed: u64) -> Result<ModelConfig> {
    let mut c = ModelConfig::preset(st.raw("preset"), vocab, entities)?;
    macro_rules! set {
        ($($f:ident),*) => {$(
            if let Some(v) = st.opt(stringify!($f))? {
                c.$f = v;
            }
        )*};
    }
    set!(text_layers, knowledge_layers, hidden, heads, entity_heads, max_len, ff_mult, dropout, init_std);
    match st.opt::<usize>("entity_hidden")? {
        Some(h) if h != entity_dim => {
            return Err(Error::config(format!(
                "entity_hidden {h} differs from the entity table width {entity_dim}"
            )))
        }
        _ => c.entity_hidden = entity_dim,
    }
    c.seed = seed;
    c.validate()?;
    Ok(c)
}

fn entity_ids(st: &Settings, kg_path: &Path) -> Result<IdTable> {
    let path = st.opt::<String>("entities")?.map_or_else(|| sidecar(kg_path, "entities"), PathBuf::from);
    IdTable::load(&path)
}

pub fn pretrain(st: &Settings) -> Result<Value> {
    let seed: u64 = st.get("seed")?;
    let vocab = SubwordVocab::load(&st.path("vocab")?)?;
    let kg_path = st.path("kg")?;
    let kg = Checkpoint::load(&kg_path)?;
    let table = kg.f32(KG_ENTITY)?.clone();
    let entities = entity_ids(st, &kg_path)?;
    let annotated = aligned::load_jsonl(&st.path("corpus")?, vocab.len())?;
    let corpus = Corpus::new(annotated, entities, table, st.get("min_entities")?)?;
    if corpus.unknown_mentions > 0 {
        log::warn!("{} mentions have no entity embedding and were dropped", corpus.unknown_mentions);
    }
    let model_cfg = model_config(st, vocab.len(), corpus.entities.len(), corpus.table.shape()[1], seed)?;
    let mut cfg = PretrainConfig {
        steps: st.get("steps")?,
        batch_size: st.get("batch_size")?,
        learning_rate: st.get("learning_rate")?,
        seed,
        corrupt_entities: st.flag("corrupt_entities")?,
        corrupt_tokens: st.flag("corrupt_tokens")?,
        ..PretrainConfig::desk()
    };
    cfg.loss.dea = st.flag("dea")?;
    cfg.loss.dea_corrupted_only = st.flag("dea_corrupted_only")?;
    log::info!(
        "pretraining {} sentences, {} entities, model {:?}",
        corpus.sentences.len(),
        corpus.entities.len(),
        model_cfg
    );

    let mut log_file = match st.opt::<String>("loss_log")? {
        Some(p) => {
            let path = PathBuf::from(p);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let empty = f.metadata().map_err(|e| Error::io(&path, e))?.len() == 0;
            if empty {
                writeln!(f, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some(f)
        }
        None => None,
    };
    let (model, reports) = pipeline::pretrain(
        &corpus,
        model_cfg.clone(),
        &cfg,
        log_file.as_mut().map(|f| f as &mut dyn Write),
    )?;
    let snap = ModelSnapshot {
        kind: "pretrain".into(),
        model: model_cfg,
        step: reports.len() as u64,
        pretrain: Some(cfg),
        task: None,
        labels: Vec::new(),
        finetune: None,
    };
    pipeline::model_checkpoint(&model.encoder, &snap).save(&st.path("out")?)?;
    let last = reports.last();
    Ok(json!({
        "steps": reports.len(),
        "parameters": model.encoder.params.numel(),
        "first_loss": reports.first().map(|r| r.total),
        "last_loss": last.map(|r| r.total),
        "last_dea_accuracy": last.map(|r| r.dea_accuracy()),
    }))
}

pub fn finetune_keys() -> Keys {
    let d = FinetuneConfig::desk();
    vec![
        ("task", String::new()),
        ("train", String::new()),
        ("test", String::new()),
        ("vocab", String::new()),
        ("entities", String::new()),
        ("checkpoint", String::new()),
        ("out", String::new()),
        ("report", String::new()),
        ("epochs", s(d.epochs)),
        ("batch_size", s(d.batch_size)),
        ("learning_rate", s(d.learning_rate)),
        ("use_entities", s(d.use_entities)),
        ("null_label", String::new()),
        ("seed", s(d.seed)),
    ]
}

fn metrics_json(report: &tasks::MetricReport) -> Value {
    serde_json::to_value(report).expect("metrics serialize")
}

pub fn finetune(st: &Settings) -> Result<Value> {
    let kind: TaskKind = st.get("task")?;
    let vocab = SubwordVocab::load(&st.path("vocab")?)?;
    let entities = IdTable::load(&st.path("entities")?)?;
    let base = Checkpoint::load(&st.path("checkpoint")?)?;
    let (pretrained, base_snap) = pipeline::pretrain_model_from(&base)?;
    let train = taskfile::load_jsonl(&st.path("train")?)?;
    let test = taskfile::load_jsonl(&st.path("test")?)?;
    let cfg = FinetuneConfig {
        epochs: st.get("epochs")?,
        batch_size: st.get("batch_size")?,
        learning_rate: st.get("learning_rate")?,
        seed: st.get("seed")?,
        use_entities: st.flag("use_entities")?,
    };
    let null = st.opt::<String>("null_label")?;
    let run = pipeline::finetune(
        &pretrained.encoder,
        kind,
        &train,
        &test,
        &vocab,
        &entities,
        &cfg,
        null.as_deref(),
    )?;
    let snap = ModelSnapshot {
        kind: "finetune".into(),
        model: base_snap.model,
        step: base_snap.step,
        pretrain: base_snap.pretrain,
        task: Some(kind),
        labels: run.labels.names().to_vec(),
        finetune: Some(cfg),
    };
    pipeline::model_checkpoint(&run.model.encoder, &snap).save(&st.path("out")?)?;
    let metrics = metrics_json(&run.report);
    if let Some(p) = st.opt::<String>("report")? {
        write_json(Path::new(&p), &metrics)?;
    }
    Ok(json!({
        "task": kind.to_string(),
        "labels": run.labels.trained(),
        "epoch_losses": run.epoch_losses,
        "metrics": metrics,
    }))
}

pub fn evaluate_keys() -> Keys {
    vec![
        ("checkpoint", String::new()),
        ("test", String::new()),
        ("vocab", String::new()),
        ("entities", String::new()),
        ("report", String::new()),
        ("use_entities", s(true)),
        ("null_label", String::new()),
    ]
}

pub fn evaluate(st: &Settings) -> Result<Value> {
    let c = Checkpoint::load(&st.path("checkpoint")?)?;
    let (model, snap) = pipeline::task_model_from(&c)?;
    let vocab = SubwordVocab::load(&st.path("vocab")?)?;
    let entities = IdTable::load(&st.path("entities")?)?;
    let test = taskfile::load_jsonl(&st.path("test")?)?;
    let mut labels = LabelSet::from_names(&snap.labels)?;
    let (examples, _) = tasks::prepare(&test, model.kind, &vocab, &entities, &mut labels)?;
    let null = st.opt::<String>("null_label")?.and_then(|n| labels.get(&n));
    let report = tasks::evaluate(&model, &examples, st.flag("use_entities")?, null)?;
    let metrics = metrics_json(&report);
    if let Some(p) = st.opt::<String>("report")? {
        write_json(Path::new(&p), &metrics)?;
    }
    Ok(json!({
        "task": model.kind.to_string(),
        "examples": examples.len(),
        "metrics": metrics,
    }))
}

pub fn grad_check_keys() -> Keys {
    vec![("seed", s(0)), ("max_probes", s(8))]
}

pub fn grad_check(st: &Settings) -> Result<Value> {
    let report = gradsuite::run(st.get("seed")?, st.get("max_probes")?)?;
    let failed: Vec<&str> = report
        .entries
        .iter()
        .filter(|e| !e.passed)
        .map(|e| e.name.as_str())
        .collect();
    let v = serde_json::to_value(&report).expect("suite report serializes");
    if failed.is_empty() {
        Ok(v)
    } else {
        for e in report.entries.iter().filter(|e| !e.passed) {
            log::error!("{}: max relative error {:.3e}", e.name, e.max_rel_err);
        }
        Err(Error::Verification(format!(
            "gradient checks failed: {} (tolerance {:e})",
            failed.join(", "),
            gradsuite::TOLERANCE
        )))
    }
}
