//! `kern`: command-line pipelines for the knowledge-enhanced encoder.

mod commands;
mod settings;

use std::io::ErrorKind;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use kern_core::{Error, Result};
use settings::{Settings, SEED_ENV};

#[derive(Parser)]
#[command(name = "kern", version, about = "Knowledge-enhanced encoder pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; `--key value` arguments override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Setting overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic world: corpus, gazetteer, triples, task files, vocabulary.
    SynthGen(Common),
    /// Train TransE entity and relation embeddings.
    KgTrain(Common),
    /// Link gazetteer mentions in a corpus and keep entity-rich sentences.
    Annotate(Common),
    /// Pretrain the encoder with the entity, masked-token and next-sentence losses.
    Pretrain(Common),
    /// Fine-tune a pretrained checkpoint on a typing or relation task.
    Finetune(Common),
    /// Score a fine-tuned checkpoint on a task file.
    Evaluate(Common),
    /// Run the finite-difference gradient suite.
    GradCheck(Common),
}

type Handler = fn(&Settings) -> Result<Value>;

/// Distinct exit code and short kind per error class.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) => (2, "config"),
        Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => (3, "missing_file"),
        Error::Io { .. } => (4, "io"),
        Error::Format { .. } => (5, "format"),
        Error::Version { .. } => (6, "version"),
        Error::TaskData(_) => (7, "task_data"),
        Error::Diverged { .. } | Error::NonFinite { .. } => (8, "numeric"),
        Error::Verification(_) => (9, "verification"),
        _ => (10, "internal"),
    }
}

fn human(v: &Value, prefix: &str, out: &mut String) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                human(x, &key, out);
            }
        }
        Value::Array(a) if a.iter().any(|x| x.is_object()) => {
            for (i, x) in a.iter().enumerate() {
                human(x, &format!("{prefix}[{i}]"), out);
            }
        }
        _ => out.push_str(&format!("{prefix}: {v}\n")),
    }
}

fn run(name: &str, common: Common, keys: commands::Keys, handler: Handler) -> Result<()> {
    let mut json = common.json;
    let overrides: Vec<String> = common
        .overrides
        .into_iter()
        .filter(|a| {
            let flag = a == "--json";
            json |= flag;
            !flag
        })
        .collect();
    let settings = Settings::resolve(&keys, common.config.as_deref(), &overrides, std::env::var(SEED_ENV).ok())?;
    log::info!("{name} resolved config: {}", settings.render().trim_end().replace('\n', "; "));
    let report = handler(&settings)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("json value serializes"));
    } else {
        let mut text = String::new();
        human(&report, "", &mut text);
        print!("{text}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let (name, common, keys, handler): (&str, Common, commands::Keys, Handler) = match cli.command {
        Command::SynthGen(c) => ("synth-gen", c, commands::synth_keys(), commands::synth_gen),
        Command::KgTrain(c) => ("kg-train", c, commands::kg_keys(), commands::kg_train),
        Command::Annotate(c) => ("annotate", c, commands::annotate_keys(), commands::annotate),
        Command::Pretrain(c) => ("pretrain", c, commands::pretrain_keys(), commands::pretrain),
        Command::Finetune(c) => ("finetune", c, commands::finetune_keys(), commands::finetune),
        Command::Evaluate(c) => ("evaluate", c, commands::evaluate_keys(), commands::evaluate),
        Command::GradCheck(c) => ("grad-check", c, commands::grad_check_keys(), commands::grad_check),
    };
    match run(name, common, keys, handler) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: command={name} kind={kind} code={code} message={msg:?}");
            ExitCode::from(code)
        }
    }
}
