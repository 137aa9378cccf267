//! Command-line surface: argument parsing and the five commands.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flexdata::{Dataset, TaskId};
use crate::model::Model;
use crate::report::report_csv;
use crate::routing::{fingerprint_csv, routing_fingerprint};
use crate::spectra::{model_spectra, spectra_csv};
use crate::trainer::{count_params, run_stream, Method, StageLedger, TaskData};

#[derive(Debug, Parser)]
#[command(name = "flame", version, about = "Flexi-modal mixture-of-experts with compress-and-stack continual learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Flame,
    #[value(name = "simple_ft")]
    SimpleFt,
    Ewc,
    Lora,
}

impl MethodArg {
    fn name(self) -> &'static str {
        match self {
            MethodArg::Flame => "flame",
            MethodArg::SimpleFt => "simple_ft",
            MethodArg::Ewc => "ewc",
            MethodArg::Lora => "lora",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multitask pretraining on the first stream stage.
    Pretrain { config: PathBuf },
    /// Pretraining followed by every later stage under one method.
    Continual {
        config: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Weight, input and data-aware spectra of every expert sublayer.
    Spectra {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Stage whose weights and tasks are analysed.
        #[arg(long, default_value_t = 0)]
        cursor: usize,
    },
    /// Per-expert routing statistics for every task in the checkpoint.
    Fingerprint {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Comma-separated subset of tasks.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
    },
    /// Stored scalars per component.
    Params { checkpoint: PathBuf },
}

/// Process exit code for an error: 2 config, 3 data, 4 invariant.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Precondition(_) => 2,
        Error::Io { .. } | Error::Format(_) | Error::NumericInput(_) => 3,
        Error::Invariant(_) => 4,
        _ => 1,
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_ledger(path: &Path, ledger: &StageLedger) -> Result<()> {
    let text = serde_json::to_string_pretty(ledger).map_err(|e| Error::Format(e.to_string()))?;
    write(path, &text)
}

/// `<dir>/<checkpoint stem>.<suffix>`, with the `.ckpt.json` tail removed.
fn derived_path(dir: &Path, checkpoint: &Path, suffix: &str) -> PathBuf {
    let name = checkpoint.file_name().and_then(|n| n.to_str()).unwrap_or("model");
    let stem = name
        .strip_suffix(".ckpt.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(name);
    dir.join(format!("{stem}.{suffix}"))
}

/// Runs one command and returns the files it wrote.
pub fn run(cmd: &Command) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::Pretrain { config } => pretrain(&RunConfig::load(config)?),
        Command::Continual { config, method } => continual(&RunConfig::load(config)?, *method),
        Command::Spectra {
            checkpoint,
            config,
            cursor,
        } => spectra(&Model::load(checkpoint)?, checkpoint, &RunConfig::load(config)?, *cursor),
        Command::Fingerprint {
            checkpoint,
            config,
            tasks,
        } => fingerprint(&Model::load(checkpoint)?, checkpoint, &RunConfig::load(config)?, tasks),
        Command::Params { checkpoint } => params(&Model::load(checkpoint)?, checkpoint),
    }
}

pub fn pretrain(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let stages = cfg.load_stages()?;
    let out = cfg.output_dir();
    let mut written = Vec::new();
    let mut ledger = None;
    let run = run_stream(&stages[..1], Method::Flame, &cfg.model, &cfg.train_config(), cfg.seed, |_, l| {
        ledger = Some(l.clone());
        Ok(())
    })?;
    let ckpt = out.join("pretrain.ckpt.json");
    run.model.save(&ckpt)?;
    written.push(ckpt);
    let csv = out.join("pretrain_metrics.csv");
    write(&csv, &report_csv(&run.rows))?;
    written.push(csv);
    let lpath = out.join("pretrain_ledger.json");
    write_ledger(&lpath, ledger.as_ref().expect("stage 0 reported"))?;
    written.push(lpath);
    Ok(written)
}

pub fn continual(cfg: &RunConfig, method: MethodArg) -> Result<Vec<PathBuf>> {
    let stages = cfg.load_stages()?;
    if stages.len() < 2 {
        return Err(Error::Config {
            path: "stream.stages".into(),
            message: "continual runs need at least two stages".into(),
        });
    }
    let out = cfg.output_dir();
    let name = method.name();
    let mut written = Vec::new();
    let run = run_stream(&stages, cfg.method(name)?, &cfg.model, &cfg.train_config(), cfg.seed, |model, ledger| {
        let ckpt = out.join(format!("{name}_stage{}.ckpt.json", ledger.stage));
        model.save(&ckpt)?;
        let lpath = out.join(format!("{name}_stage{}_ledger.json", ledger.stage));
        write_ledger(&lpath, ledger)?;
        written.push(ckpt);
        written.push(lpath);
        Ok(())
    })?;
    let csv = out.join(format!("{name}_report.csv"));
    write(&csv, &report_csv(&run.rows))?;
    written.push(csv);
    Ok(written)
}

/// Evaluation splits of the configured tasks the model knows, paired with
/// their cursors, optionally restricted to `only`.
fn known_tasks(model: &Model, cfg: &RunConfig, only: &[String]) -> Result<Vec<(TaskData, usize)>> {
    let mut out = Vec::new();
    for t in &cfg.tasks {
        if !only.is_empty() && !only.contains(&t.id) {
            continue;
        }
        if let Some(rec) = model.tasks.get(&TaskId(t.id.clone())) {
            out.push((cfg.load_task(&t.id)?, rec.cursor));
        }
    }
    for id in only {
        if !out.iter().any(|(t, _)| &t.id().0 == id) {
            return Err(Error::Precondition(format!("task {id} is not in both the checkpoint and the config")));
        }
    }
    Ok(out)
}

pub fn spectra(model: &Model, checkpoint: &Path, cfg: &RunConfig, cursor: usize) -> Result<Vec<PathBuf>> {
    let tasks = known_tasks(model, cfg, &[])?;
    let sets: Vec<(&Dataset, usize)> = tasks
        .iter()
        .filter(|(_, c)| *c == cursor)
        .map(|(t, c)| (&t.eval, *c))
        .collect();
    if sets.is_empty() {
        return Err(Error::Precondition(format!("no configured task has cursor {cursor}")));
    }
    let reports = model_spectra(model, &sets, cursor)?;
    let path = derived_path(&cfg.output_dir(), checkpoint, "spectra.csv");
    write(&path, &spectra_csv(&reports))?;
    Ok(vec![path])
}

pub fn fingerprint(model: &Model, checkpoint: &Path, cfg: &RunConfig, only: &[String]) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::new();
    for (t, cursor) in known_tasks(model, cfg, only)? {
        rows.push((t.id().clone(), routing_fingerprint(model, t.id(), &t.eval, cursor)?));
    }
    let path = derived_path(&cfg.output_dir(), checkpoint, "fingerprint.csv");
    write(&path, &fingerprint_csv(&rows))?;
    Ok(vec![path])
}

pub const PARAMS_HEADER: &str = "component,scalars";

pub fn params_csv(model: &Model) -> String {
    let c = count_params(model, None);
    format!(
        "{PARAMS_HEADER}\nencoder,{}\nmoe,{}\nrouter,{}\nhead,{}\ntotal,{}\n",
        c.encoder,
        c.moe,
        c.router,
        c.head,
        c.total()
    )
}

pub fn params(model: &Model, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let path = derived_path(dir, checkpoint, "params.csv");
    let csv = params_csv(model);
    print!("{csv}");
    write(&path, &csv)?;
    Ok(vec![path])
}
