use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use solaudit_core::augment::{histogram, ros_balance};
use solaudit_core::dataset::{self, load_samples, read_sample_lines, AuditSample, Granularity};
use solaudit_core::eval_metrics::render_table;
use solaudit_core::finetune::tasks::{build_task, ToyTask};
use solaudit_core::finetune::{merged_checksum, train, Mode, TrainConfig};
use solaudit_core::jsonl;
use solaudit_core::model_client::{run_batch, BatchItem, EndpointConfig, HttpBackend, ReplayBackend};
use solaudit_core::pipeline::{evaluate, predictions_from, render_all, verifier_prompts};
use solaudit_core::prompts::{PromptTemplate, RenderedPrompt, TemplateName, DEFAULT_TOKEN_BUDGET};
use solaudit_core::solgraph::{self, Remapping, ResolverConfig};

#[derive(Parser)]
#[command(name = "solaudit", version, about = "Smart contract audit dataset, prompting and evaluation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    PerFile,
    PerProject,
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateArg {
    Basic,
    Cot,
    Verifier,
}

impl From<TemplateArg> for TemplateName {
    fn from(t: TemplateArg) -> Self {
        match t {
            TemplateArg::Basic => TemplateName::Basic,
            TemplateArg::Cot => TemplateName::Cot,
            TemplateArg::Verifier => TemplateName::Verifier,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fft,
    Lora,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    FullRank,
    RankOne,
    Teacher,
}

#[derive(Subcommand)]
enum Command {
    /// Resolve a Solidity project's import graph.
    Collect {
        #[arg(long)]
        root: PathBuf,
        /// Import remapping in `prefix=target` form; repeatable.
        #[arg(long = "remap", value_name = "PREFIX=DIR")]
        remaps: Vec<Remapping>,
        /// Extra directory (relative to the root) searched for bare imports; repeatable.
        #[arg(long = "lib")]
        libs: Vec<String>,
        /// Stub library used to fill missing imports into `<root>/vendored/`.
        #[arg(long)]
        stubs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build train/test dialogue files from a sample manifest.
    BuildDataset {
        /// Manifest file or a directory holding `manifest.json`.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "per-file")]
        granularity: GranularityArg,
        #[arg(long)]
        out_train: PathBuf,
        /// Test samples, one JSON object per line (id, code, description, label, project).
        #[arg(long)]
        out_test: PathBuf,
    },
    /// Balance a training file by random over-sampling.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render prompts for one or more samples.
    Prompt {
        #[arg(long, value_enum)]
        template: TemplateArg,
        /// A sample as `.json`, or samples / dialogue records as `.jsonl`.
        #[arg(long)]
        sample: PathBuf,
        /// Auditor responses supplying the claims for the verifier template.
        #[arg(long)]
        responses: Option<PathBuf>,
        /// Directory with `<template>.txt` overriding the builtin templates.
        #[arg(long)]
        template_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOKEN_BUDGET)]
        token_budget: usize,
        /// `.json` for a single prompt (or an array), `.jsonl` for one per line.
        #[arg(long)]
        out: PathBuf,
    },
    /// Send prompts to a chat-completion endpoint, or replay stored responses.
    Infer {
        #[arg(long, required_unless_present = "replay")]
        endpoint: Option<String>,
        #[arg(long, default_value = "model")]
        model: String,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
        #[arg(long, default_value_t = 3)]
        max_retries: u32,
        /// Read `<dir>/<template>/<sample_id>.txt` instead of calling an endpoint.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score responses against gold labels.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        verifier: Option<PathBuf>,
        /// Row name in the report table.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Train the toy attention layer with full fine-tuning or LoRA.
    TrainToy {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "full-rank")]
        task: TaskArg,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

fn read_samples(path: &Path) -> Result<Vec<AuditSample>> {
    let bytes = read(path)?;
    if is_jsonl(path) {
        return read_sample_lines(&bytes).with_context(|| format!("parsing {}", path.display()));
    }
    let one: AuditSample = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok(vec![one])
}

fn read_prompts(path: &Path) -> Result<Vec<RenderedPrompt>> {
    let bytes = read(path)?;
    if is_jsonl(path) {
        return jsonl::from_jsonl(&bytes).with_context(|| format!("parsing {}", path.display()));
    }
    let value: serde_json::Value = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    if value.is_array() {
        Ok(serde_json::from_value(value)?)
    } else {
        Ok(vec![serde_json::from_value(value)?])
    }
}

fn read_items(path: &Path) -> Result<Vec<BatchItem>> {
    jsonl::from_jsonl(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

#[derive(Serialize)]
struct ToyRunConfig {
    mode: Mode,
    task: ToyTask,
    dim: usize,
    rank: Option<usize>,
    steps: usize,
    learning_rate: f64,
    seed: u64,
    samples: usize,
}

#[derive(Serialize)]
struct ToyRun {
    config: ToyRunConfig,
    loss_trace: Vec<f64>,
    final_loss: f64,
    trainable_count: usize,
    merged_checksum: String,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect {
            root,
            remaps,
            libs,
            stubs,
            out,
        } => {
            let config = ResolverConfig {
                remappings: remaps,
                library_roots: libs,
            };
            let (_, doc) = solgraph::collect(&root, &config, stubs.as_deref())?;
            write(&out, doc.to_json())?;
            let r = &doc.report;
            println!(
                "{} files, {} edges, {} unresolved, {} patched",
                r.file_count,
                r.edge_count,
                doc.graph.unresolved.len(),
                r.patched.len()
            );
        }
        Command::BuildDataset {
            samples,
            ratio,
            seed,
            granularity,
            out_train,
            out_test,
        } => {
            let granularity = match granularity {
                GranularityArg::PerFile => Granularity::PerFile,
                GranularityArg::PerProject => Granularity::PerProject,
            };
            let all = load_samples(&samples, granularity)?;
            let split = dataset::split(&all, ratio, seed)?;
            for w in &split.warnings {
                eprintln!("warning: {w}");
            }
            write(&out_train, dataset::serialize(&split.train))?;
            write(&out_test, jsonl::to_jsonl(&split.test))?;
            println!("{} train / {} test", split.train.len(), split.test.len());
        }
        Command::Augment { input, seed, out } => {
            let records = dataset::parse(&read(&input)?)?;
            let balanced = ros_balance(&records, seed)?;
            println!("before:\n{}", histogram(&records)?);
            println!("after:\n{}", histogram(&balanced)?);
            write(&out, dataset::serialize(&balanced))?;
        }
        Command::Prompt {
            template,
            sample,
            responses,
            template_dir,
            token_budget,
            out,
        } => {
            let name = TemplateName::from(template);
            let tpl = match &template_dir {
                Some(dir) => PromptTemplate::load(dir, name)?,
                None => PromptTemplate::builtin(name),
            }
            .with_token_budget(token_budget);
            let samples = read_samples(&sample)?;
            let prompts = if name == TemplateName::Verifier {
                let Some(responses) = responses else {
                    bail!("the verifier template needs --responses with the auditor's answers");
                };
                if template_dir.is_some() {
                    bail!("custom verifier templates are not supported by this command");
                }
                verifier_prompts(&predictions_from(&read_items(&responses)?), &samples)?
            } else {
                render_all(&tpl, &samples)?
            };
            if is_jsonl(&out) {
                write(&out, jsonl::to_jsonl(&prompts))?;
            } else if prompts.len() == 1 {
                write(&out, pretty(&prompts[0])?)?;
            } else {
                write(&out, pretty(&prompts)?)?;
            }
            println!("{} prompts", prompts.len());
        }
        Command::Infer {
            endpoint,
            model,
            prompts,
            concurrency,
            timeout_secs,
            max_retries,
            replay,
            out,
        } => {
            if concurrency == 0 {
                bail!("--concurrency must be at least 1");
            }
            let prompts = read_prompts(&prompts)?;
            let rt = runtime()?;
            let items = match (replay, endpoint) {
                (Some(dir), _) => rt.block_on(run_batch(&ReplayBackend::new(dir), &prompts, concurrency)),
                (None, Some(url)) => {
                    let mut config = EndpointConfig::new(url, model).with_token_from_env();
                    config.timeout = Duration::from_secs(timeout_secs);
                    config.max_retries = max_retries;
                    let backend = HttpBackend::new(config)?;
                    rt.block_on(run_batch(&backend, &prompts, concurrency))
                }
                (None, None) => bail!("either --endpoint or --replay is required"),
            };
            let failed = items.iter().filter(|i| i.response().is_none()).count();
            write(&out, jsonl::to_jsonl(&items))?;
            println!("{} responses, {} failed", items.len() - failed, failed);
        }
        Command::Evaluate {
            gold,
            responses,
            verifier,
            method,
            out,
            table,
        } => {
            let gold = read_samples(&gold)?;
            let responses = read_items(&responses)?;
            let verdicts = verifier.as_deref().map(read_items).transpose()?;
            let mut report = evaluate(&gold, &responses, verdicts.as_deref())?;
            if let Some(m) = method {
                report = report.with_method(m);
            }
            write(&out, report.to_json())?;
            let md = render_table(std::slice::from_ref(&report));
            if let Some(path) = table {
                write(&path, &md)?;
            }
            print!("{md}");
        }
        Command::TrainToy {
            mode,
            dim,
            rank,
            steps,
            lr,
            seed,
            task,
            samples,
            out,
        } => {
            let mode = match mode {
                ModeArg::Fft => Mode::Fft,
                ModeArg::Lora => Mode::Lora,
            };
            let task = match task {
                TaskArg::FullRank => ToyTask::FullRank,
                TaskArg::RankOne => ToyTask::RankOne,
                TaskArg::Teacher => ToyTask::Teacher,
            };
            let rank = (mode == Mode::Lora).then_some(rank);
            let (base, data) = build_task(task, dim, samples, seed);
            let config = TrainConfig {
                learning_rate: lr,
                steps,
                seed,
                mode,
                rank,
            };
            let trained = train(&base, &data, &config)?;
            let final_loss = *trained.loss_trace.last().expect("trace has steps + 1 entries");
            let run = ToyRun {
                config: ToyRunConfig {
                    mode,
                    task,
                    dim,
                    rank,
                    steps,
                    learning_rate: lr,
                    seed,
                    samples,
                },
                final_loss,
                trainable_count: trained.layer.trainable_count(),
                merged_checksum: merged_checksum(&trained.layer),
                loss_trace: trained.loss_trace,
            };
            write(&out, pretty(&run)?)?;
            println!("{mode}: final loss {final_loss:.6e}, {} trainable parameters", run.trainable_count);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
