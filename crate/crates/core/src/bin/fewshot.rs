use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fewshot_core::pipeline::{
    cmd_augment, cmd_cost, cmd_embed, cmd_evaluate, cmd_ingest, cmd_rerun, cmd_run_fewshot, cmd_run_rag, cmd_sample,
    Context, ExemplarSource, PipelineError, RunOptions, RunOutput, SampleSource, Settings,
};
use fewshot_core::promptkit::Placement;

/// Few-shot intent classification experiments with LLM prompting.
#[derive(Parser)]
#[command(name = "fewshot", version)]
struct Cli {
    #[command(flatten)]
    global: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// TOML settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Label file (one name per line) or `banking77`.
    #[arg(long, global = true)]
    labels: Option<String>,
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,
    /// Embedding cache file.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Exemplars retrieved per query in RAG runs.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Exemplars per class.
    #[arg(long, global = true)]
    shots: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `system` or `chat`.
    #[arg(long, global = true)]
    placement: Option<Placement>,
    /// A `[providers]` entry, `mock-oracle`, or `replay:<file>`.
    #[arg(long, global = true)]
    provider: Option<String>,
    /// Allow network providers.
    #[arg(long, global = true)]
    live: bool,
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Setting name shown in cost reports.
    #[arg(long, global = true)]
    setting: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a CSV/JSONL dataset and write it as canonical JSONL.
    Ingest {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Embed dataset texts into the cache.
    Embed {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Draw few-shot exemplars from a training file.
    Sample {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take the best-ranked items of this curated file instead.
        #[arg(long, conflicts_with = "generated")]
        curated: Option<PathBuf>,
        /// Top up each class from this generated file.
        #[arg(long, requires = "generated_shots")]
        generated: Option<PathBuf>,
        #[arg(long, requires = "generated")]
        generated_shots: Option<usize>,
    },
    /// Classify a test set.
    #[command(subcommand)]
    Run(RunCommand),
    /// Score a run.
    Evaluate {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rows in the most-confused table.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Price one or more runs.
    Cost {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        pricing: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate extra examples for groups of confusable labels.
    Augment {
        #[arg(long)]
        exemplars: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        /// JSON array of arrays of label names.
        #[arg(long = "override")]
        override_groups: Option<PathBuf>,
    },
    /// Re-execute a run from its manifest, replaying recorded answers
    /// unless --provider is given.
    Rerun { manifest: PathBuf },
}

#[derive(Subcommand)]
enum RunCommand {
    /// Every prompt carries the same exemplar block.
    Fewshot {
        #[arg(long, required_unless_present = "train", conflicts_with = "train")]
        exemplars: Option<PathBuf>,
        /// Sample exemplars from this file with --shots and --seed.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
    },
    /// Each prompt carries the k pool exemplars nearest the query.
    Rag {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

fn settings(o: &Overrides) -> Result<Settings> {
    let mut s = match &o.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    if let Some(v) = &o.labels {
        s.labels = Some(v.clone());
    }
    if let Some(v) = &o.runs_dir {
        s.runs_dir = v.clone();
    }
    if let Some(v) = &o.cache {
        s.embedding.cache = v.clone();
    }
    if let Some(v) = o.k {
        s.k = v;
    }
    if let Some(v) = o.shots {
        s.shots = v;
    }
    if let Some(v) = o.seed {
        s.seed = v;
    }
    if let Some(v) = o.placement {
        s.placement = v;
    }
    if let Some(v) = &o.provider {
        s.provider = v.clone();
    }
    Ok(s)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report_run(run: &RunOutput) {
    let m = &run.manifest;
    let failed = m.records.iter().filter(|r| r.error.is_some()).count();
    println!("run {} ({})", m.run_id, m.setting);
    println!("  items: {}  failed calls: {failed}", m.records.len());
    println!("  mean estimated prompt tokens: {:.1}", m.mean_estimated_tokens);
    println!("  manifest: {}", run.dir.join(fewshot_core::pipeline::MANIFEST_FILE).display());
}

fn run(cli: Cli) -> Result<()> {
    let o = &cli.global;
    let mut ctx = Context {
        settings: settings(o)?,
        live: o.live,
    };
    let options = RunOptions {
        run_id: o.run_id.clone(),
        setting: o.setting.clone(),
    };
    match cli.command {
        Command::Ingest { input, out, labels_out } => {
            let summary = cmd_ingest(&ctx, &input, &out, labels_out.as_deref())?;
            println!("{} items over {} labels -> {}", summary.items, summary.labels, out.display());
        }
        Command::Embed { inputs } => {
            let summary = cmd_embed(&ctx, &inputs)?;
            println!(
                "{} texts, {} newly embedded, {} cached in {}",
                summary.texts,
                summary.newly_embedded,
                summary.cache_entries,
                summary.cache.display()
            );
        }
        Command::Sample {
            train,
            out,
            curated,
            generated,
            generated_shots,
        } => {
            let source = match (curated, generated, generated_shots) {
                (Some(path), _, _) => SampleSource::Curated(path),
                (None, Some(generated), Some(generated_per_class)) => SampleSource::Mixed {
                    generated,
                    generated_per_class,
                },
                _ => SampleSource::Random,
            };
            let set = cmd_sample(&ctx, &train, &source, &out)?;
            println!("{} exemplars over {} labels -> {}", set.len(), set.label_set().len(), out.display());
        }
        Command::Run(RunCommand::Fewshot { exemplars, train, test }) => {
            let source = match (exemplars, train) {
                (Some(path), _) => ExemplarSource::File(path),
                (None, Some(path)) => ExemplarSource::Sample(path),
                (None, None) => unreachable!("clap requires one of them"),
            };
            report_run(&cmd_run_fewshot(&ctx, &source, &test, &options)?);
        }
        Command::Run(RunCommand::Rag { pool, test }) => {
            report_run(&cmd_run_rag(&ctx, &pool, &test, &options)?);
        }
        Command::Evaluate {
            manifest,
            format,
            out,
            top,
        } => {
            let top = top.unwrap_or(ctx.settings.top_confusions);
            let report = cmd_evaluate(&manifest, top)?;
            let text = match format {
                Format::Text => report.to_text(top),
                Format::Json => report.to_json() + "\n",
                Format::Csv => report.to_csv(),
            };
            emit(&text, out.as_deref())?;
        }
        Command::Cost {
            manifests,
            pricing,
            format,
            out,
        } => {
            let pricing = pricing
                .or(ctx.settings.pricing.clone())
                .ok_or_else(|| PipelineError::Usage("cost needs --pricing or a pricing entry in --config".into()))?;
            let report = cmd_cost(&manifests, &pricing)?;
            let text = match format {
                Format::Csv => report.to_csv(),
                Format::Json => serde_json::to_string_pretty(&report)? + "\n",
                Format::Text => report.to_text(),
            };
            emit(&text, out.as_deref())?;
        }
        Command::Augment {
            exemplars,
            out,
            groups,
            per_class,
            override_groups,
        } => {
            let a = &mut ctx.settings.augment;
            a.groups = groups.unwrap_or(a.groups);
            a.per_class = per_class.unwrap_or(a.per_class);
            a.override_groups = override_groups.or(a.override_groups.take());
            let summary = cmd_augment(&ctx, &exemplars, &out, &options)?;
            println!(
                "{} groups, {} candidate lines, {} accepted, {} rejected -> {}",
                summary.groups.len(),
                summary.candidate_lines,
                summary.accepted,
                summary.rejections.len(),
                out.display()
            );
        }
        Command::Rerun { manifest } => {
            let rerun = cmd_rerun(&ctx, &manifest, o.provider.as_deref(), &options)?;
            for d in &rerun.drift {
                eprintln!("drift: {} recorded {} now {}", d.what, d.recorded, d.current);
            }
            report_run(&rerun.run);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(2, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
