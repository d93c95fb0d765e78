//! End-to-end glue shared by the command line and the acceptance tests:
//! corpus preparation, checkpoint conversion and the relation ablation run.

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, TensorData};
use crate::corpus::aligned::{self, AlignedSentence, IndexedSentence};
use crate::corpus::gazetteer::parse_entries;
use crate::corpus::pretrain::PipelineConfig;
use crate::corpus::synth::{self, SynthSpec, SynthWorld};
use crate::corpus::{Gazetteer, SubwordVocab, TaskRecord};
use crate::encoder::{Encoder, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::ids::IdTable;
use crate::kg::{self, EmbeddingStore, KgEmbedConfig, TripleStore};
use crate::numerics::Tensor;
use crate::objectives::{ExampleStream, LossReport, PretrainConfig, PretrainModel, Pretrainer};
use crate::tasks::{self, FinetuneConfig, LabelSet, MetricReport, TaskKind, TaskModel};

/// Checkpoint name of the frozen entity table.
pub const ENTITY_TABLE: &str = "frozen.entity_table";
pub const KG_ENTITY: &str = "kg.entity";
pub const KG_RELATION: &str = "kg.relation";
/// Default: sentences with fewer linked entities are left out of
/// pretraining.
pub const MIN_ENTITIES: usize = 3;

/// File name and contents of every artifact of a synthetic world.
pub fn world_files(world: &SynthWorld) -> Vec<(&'static str, String)> {
    vec![
        ("corpus.txt", world.corpus.clone()),
        ("gazetteer.tsv", world.gazetteer.clone()),
        ("triples.tsv", world.triples.clone()),
        ("relation_train.jsonl", world.relation_train_jsonl()),
        ("relation_test.jsonl", world.relation_test_jsonl()),
        ("typing_train.jsonl", world.typing_train_jsonl()),
        ("typing_test.jsonl", world.typing_test_jsonl()),
        ("vocab.txt", SubwordVocab::learn(&world.vocab_texts(), world.spec.vocab_size).to_lines()),
    ]
}

pub fn kg_checkpoint(emb: &EmbeddingStore, cfg: &KgEmbedConfig, losses: &[f64]) -> Checkpoint {
    let mut c = Checkpoint::new(json!({
        "kind": "kg",
        "dim": cfg.dim,
        "margin": cfg.margin,
        "negatives": cfg.negatives,
        "norm": cfg.norm.order(),
        "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "epoch_losses": losses,
    }));
    c.push(KG_ENTITY, TensorData::F32(emb.entity.clone()));
    c.push(KG_RELATION, TensorData::F32(emb.relation.clone()));
    c
}

/// Annotated pretraining sentences, dense entity indices and the frozen
/// entity table in matching row order.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub sentences: Vec<IndexedSentence>,
    pub entities: IdTable,
    pub table: Tensor<f32>,
    /// Sentences dropped for having too few entities.
    pub filtered: usize,
    /// Mentions whose entity has no embedding.
    pub unknown_mentions: usize,
}

impl Corpus {
    /// Filters and indexes annotated sentences against `entities`, whose
    /// rows in `table` are in the same order.
    pub fn new(annotated: Vec<AlignedSentence>, entities: IdTable, table: Tensor<f32>, min_entities: usize) -> Result<Self> {
        if table.shape()[0] != entities.len() {
            return Err(Error::config(format!(
                "entity table has {} rows for {} entity ids",
                table.shape()[0],
                entities.len()
            )));
        }
        let total = annotated.len();
        let kept = aligned::filter_sentences(annotated, min_entities);
        let filtered = total - kept.len();
        let (sentences, unknown_mentions) = aligned::index_entities(&kept, &entities);
        if sentences.is_empty() {
            return Err(Error::config(format!(
                "no sentence has {min_entities} or more linked entities"
            )));
        }
        Ok(Corpus {
            sentences,
            entities,
            table,
            filtered,
            unknown_mentions,
        })
    }
}

pub fn build_corpus(text: &str, vocab: &SubwordVocab, gazetteer: &Gazetteer, emb: &EmbeddingStore) -> Result<Corpus> {
    Corpus::new(
        aligned::annotate(text, vocab, gazetteer),
        emb.entity_ids.clone(),
        emb.entity.clone(),
        MIN_ENTITIES,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub kind: String,
    pub model: ModelConfig,
    pub step: u64,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub task: Option<TaskKind>,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub finetune: Option<FinetuneConfig>,
}

/// Every parameter plus the frozen entity table.
pub fn model_checkpoint(encoder: &Encoder<f32>, snapshot: &ModelSnapshot) -> Checkpoint {
    let mut c = Checkpoint::new(serde_json::to_value(snapshot).expect("snapshot serializes"));
    for (name, t) in encoder.params.iter() {
        c.push(name, TensorData::F32(t.clone()));
    }
    c.push(ENTITY_TABLE, TensorData::F32(encoder.entity_table().clone()));
    c
}

pub fn snapshot_of(c: &Checkpoint) -> Result<ModelSnapshot> {
    serde_json::from_value(c.snapshot.clone()).map_err(|e| Error::format("checkpoint snapshot", e.to_string()))
}

/// Named parameters of a checkpoint, entity table excluded.
pub fn checkpoint_params(c: &Checkpoint) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for (name, t) in &c.tensors {
        if name == ENTITY_TABLE {
            continue;
        }
        match t {
            TensorData::F32(t) => {
                store.add(name, t.clone());
            }
            _ => return Err(Error::format("checkpoint", format!("parameter {name} is not f32"))),
        }
    }
    Ok(store)
}

/// Rebuilds the pretraining model of a checkpoint. Every encoder and head
/// parameter must be present with the registered shape.
pub fn pretrain_model_from(c: &Checkpoint) -> Result<(PretrainModel<f32>, ModelSnapshot)> {
    let snap = snapshot_of(c)?;
    let table = c.f32(ENTITY_TABLE)?.clone();
    let mut model = PretrainModel::new(snap.model.clone(), table)?;
    let source = checkpoint_params(c)?;
    let copied = model.encoder.load_matching(&source);
    if copied != model.encoder.params.len() {
        return Err(Error::format(
            "checkpoint",
            format!(
                "{copied} of {} model parameters found with matching shape",
                model.encoder.params.len()
            ),
        ));
    }
    Ok((model, snap))
}

pub fn task_model_from(c: &Checkpoint) -> Result<(TaskModel<f32>, ModelSnapshot)> {
    let snap = snapshot_of(c)?;
    let kind = snap
        .task
        .ok_or_else(|| Error::format("checkpoint", "not a fine-tuned checkpoint"))?;
    let table = c.f32(ENTITY_TABLE)?.clone();
    let encoder = Encoder::new(snap.model.clone(), table)?;
    let mut model = TaskModel::new(encoder, kind, snap.labels.len(), 0)?;
    let source = checkpoint_params(c)?;
    let copied = model.encoder.load_matching(&source);
    if copied != model.encoder.params.len() {
        return Err(Error::format(
            "checkpoint",
            format!(
                "{copied} of {} task model parameters found with matching shape",
                model.encoder.params.len()
            ),
        ));
    }
    Ok((model, snap))
}

/// Builds a fresh model and pretrains it for `cfg.steps` steps.
pub fn pretrain(
    corpus: &Corpus,
    model_cfg: ModelConfig,
    cfg: &PretrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<(PretrainModel<f32>, Vec<LossReport>)> {
    let model = PretrainModel::new(model_cfg.clone(), corpus.table.clone())?;
    let mut stream = ExampleStream::new(
        &corpus.sentences,
        corpus.entities.len(),
        model_cfg.vocab_size,
        PipelineConfig {
            seed: cfg.seed,
            max_len: model_cfg.max_len,
            corrupt_entities: cfg.corrupt_entities,
            corrupt_tokens: cfg.corrupt_tokens,
        },
    );
    let mut trainer = Pretrainer::new(model, cfg.clone())?;
    let reports = trainer.run(&mut stream, log)?;
    Ok((trainer.model, reports))
}

/// Fine-tuning result on a held-out file.
#[derive(Clone, Debug)]
pub struct TaskRun {
    pub model: TaskModel<f32>,
    pub labels: LabelSet,
    pub epoch_losses: Vec<f64>,
    pub report: MetricReport,
}

/// Swaps the pretraining heads for a fresh task head, fine-tunes and
/// scores the test records.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    encoder: &Encoder<f32>,
    kind: TaskKind,
    train: &[TaskRecord],
    test: &[TaskRecord],
    vocab: &SubwordVocab,
    entities: &IdTable,
    cfg: &FinetuneConfig,
    null_label: Option<&str>,
) -> Result<TaskRun> {
    let mut labels = LabelSet::from_records(train);
    let (train_ex, _) = tasks::prepare(train, kind, vocab, entities, &mut labels)?;
    let trained = labels.trained();
    let (test_ex, _) = tasks::prepare(test, kind, vocab, entities, &mut labels)?;
    let fresh = Encoder::new(encoder.config.clone(), encoder.entity_table().clone())?;
    let mut base = fresh;
    base.load_matching(&encoder.params);
    let mut model = TaskModel::new(base, kind, trained, cfg.seed)?;
    let epoch_losses = tasks::finetune(&mut model, &train_ex, cfg)?;
    let null = null_label.and_then(|n| labels.get(n));
    let report = tasks::evaluate(&model, &test_ex, cfg.use_entities, null)?;
    Ok(TaskRun {
        model,
        labels,
        epoch_losses,
        report,
    })
}

/// Outcome of the knowledge ablation on one seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub seed: u64,
    pub full: f64,
    pub without_entities: f64,
    pub without_dea: f64,
    pub text_only_bound: f64,
}

/// Relation-task settings for the ablation.
#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub world: SynthSpec,
    pub kg: KgEmbedConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl AblationConfig {
    pub fn desk(seed: u64) -> Self {
        AblationConfig {
            world: SynthSpec {
                ambiguity: 1.0,
                seed,
                ..SynthSpec::default()
            },
            kg: KgEmbedConfig {
                seed,
                ..KgEmbedConfig::default()
            },
            pretrain: PretrainConfig {
                seed,
                ..PretrainConfig::desk()
            },
            finetune: FinetuneConfig {
                seed,
                ..FinetuneConfig::desk()
            },
        }
    }
}

/// Full model against fine-tuning without entities and against
/// pretraining without the entity objective, all on the same world.
pub fn relation_ablation(cfg: &AblationConfig) -> Result<AblationResult> {
    let world = synth::generate(&cfg.world)?;
    let vocab = SubwordVocab::learn(&world.vocab_texts(), cfg.world.vocab_size);
    let gazetteer = Gazetteer::build(&parse_entries(&world.gazetteer)?, &vocab)?;
    let store = TripleStore::parse(&world.triples)?;
    let (emb, _) = kg::train(&store, &cfg.kg)?;
    let corpus = build_corpus(&world.corpus, &vocab, &gazetteer, &emb)?;
    let mut model_cfg = ModelConfig::desk(vocab.len(), corpus.entities.len());
    model_cfg.seed = cfg.world.seed;

    let (full_model, _) = pretrain(&corpus, model_cfg.clone(), &cfg.pretrain, None)?;
    let mut no_dea = cfg.pretrain.clone();
    no_dea.loss.dea = false;
    let (no_dea_model, _) = pretrain(&corpus, model_cfg, &no_dea, None)?;

    let run = |encoder: &Encoder<f32>, use_entities: bool| -> Result<f64> {
        let ft = FinetuneConfig {
            use_entities,
            ..cfg.finetune.clone()
        };
        let r = finetune(
            encoder,
            TaskKind::Relation,
            &world.relation_train,
            &world.relation_test,
            &vocab,
            &corpus.entities,
            &ft,
            None,
        )?;
        Ok(r.report.strict)
    };
    Ok(AblationResult {
        seed: cfg.world.seed,
        full: run(&full_model.encoder, true)?,
        without_entities: run(&full_model.encoder, false)?,
        without_dea: run(&no_dea_model.encoder, true)?,
        text_only_bound: world.text_only_bound(),
    })
}
