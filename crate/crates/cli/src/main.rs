//! `bench`: train, evaluate and tabulate few-shot SAR methods.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use fewshot_sar::data::{ingest, load_dataset, make_split, save_dataset, SplitManifest, SynthConfig};
use fewshot_sar::harness::report::{read_csv, reference_results, to_csv_string, write_csv};
use fewshot_sar::harness::timing::Hardware;
use fewshot_sar::harness::{self, registry, render_markdown, BenchmarkResult, Model, RunConfig};

const CHECKPOINT: &str = "model.ckpt";
const RESULT: &str = "result.csv";

#[derive(Parser, Debug)]
#[command(name = "bench", version, about = "Few-shot SAR target classification benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate one configured run
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Directory that receives one subdirectory per run
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Skip evaluation after training
        #[arg(long)]
        no_eval: bool,
    },
    /// Evaluate a checkpoint on the novel classes of its run's split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 600)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset directory, when it moved since training
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the result row here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect every result.csv under a directory into one table
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        /// Add the published reference rows
        #[arg(long)]
        reference: bool,
        /// Output file (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show implemented and reserved method names
    ListMethods,
    /// Convert a directory of raw chips into a dataset directory
    Ingest {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset from a TOML generator config
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded class split manifest for a dataset
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Md,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, out, no_eval } => run(&config, &out, no_eval),
        Command::Eval {
            ckpt,
            episodes,
            seed,
            data,
            out,
        } => eval(&ckpt, episodes, seed, data, out),
        Command::Report {
            input,
            format,
            reference,
            out,
        } => report(&input, format, reference, out),
        Command::ListMethods => {
            list_methods();
            Ok(())
        }
        Command::Ingest { src, out } => {
            let m = ingest(&src, &out)?;
            let total: usize = m.counts.values().sum();
            println!("ingested {total} chips in {} classes into {}", m.counts.len(), out.display());
            if m.degenerate_chips > 0 {
                println!("{} chips were constant and left at zero", m.degenerate_chips);
            }
            Ok(())
        }
        Command::Synth { config, out } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let synth: SynthConfig = toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            let dataset = fewshot_sar::data::generate_synthetic(&synth)?;
            save_dataset(&dataset, &out, "synthetic")?;
            println!("wrote {} chips in {} classes to {}", dataset.len(), dataset.classes.len(), out.display());
            Ok(())
        }
        Command::Split { data, seed, out } => {
            let dataset = load_dataset(&data)?;
            let ids: BTreeSet<usize> = dataset.chips.keys().copied().collect();
            let split = make_split(&ids, seed)?;
            let manifest = SplitManifest::from_split(&split, &dataset);
            manifest.save(&out)?;
            println!("train: {}", manifest.train.join(", "));
            println!("test:  {}", manifest.test.join(", "));
            Ok(())
        }
    }
}

fn run_dir(out: &Path, cfg: &RunConfig) -> PathBuf {
    let t = &cfg.run.test_episode;
    let name = format!(
        "{}_{}way{}shot_seed{}",
        cfg.method.name.replace('+', "p"),
        t.n_way,
        t.k_shot,
        cfg.run.seed
    );
    out.join(name)
}

fn run(config: &Path, out: &Path, no_eval: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = run_dir(out, &cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let (dataset, split) = harness::load_data(&cfg)?;
    SplitManifest::from_split(&split, &dataset).save(&dir.join("split.toml"))?;
    eprintln!(
        "{}: {} base / {} novel classes, {} chips",
        cfg.method.name,
        split.train_classes.len(),
        split.test_classes.len(),
        dataset.len()
    );
    let (mut model, log) = harness::train_on(&cfg, &dataset, &split, &mut |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  acc {:.2}%  {:.1}s",
            e.epoch,
            e.mean_loss,
            100.0 * e.mean_accuracy,
            e.seconds
        )
    })?;
    let extra = serde_json::json!({
        "config": cfg,
        "seed": cfg.run.seed,
        "hardware": Hardware::detect(),
    });
    model.save(&dir.join(CHECKPOINT), extra)?;
    std::fs::write(dir.join("train_log.json"), serde_json::to_string_pretty(&log)?)?;
    if no_eval {
        println!("saved {}", dir.display());
        return Ok(());
    }
    let (_, result) = harness::evaluate_on(&cfg, &mut model, &dataset, &split, log.minutes_per_epoch())?;
    write_csv(std::slice::from_ref(&result), &dir.join(RESULT))?;
    print_result(&result);
    println!("saved {}", dir.display());
    Ok(())
}

fn print_result(r: &BenchmarkResult) {
    println!(
        "{} ({}) {}-way {}-shot: {:.2} ± {:.2}%  {:.3} min/epoch",
        r.method, r.category, r.n_way, r.k_shot, r.accuracy, r.ci95, r.minutes_per_epoch
    );
}

fn eval(ckpt: &Path, episodes: usize, seed: u64, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let (mut model, meta) = Model::load(ckpt)?;
    let Some(cfg) = meta.extra.get("config") else {
        bail!("{} does not record its run config", ckpt.display());
    };
    let mut cfg: RunConfig = serde_json::from_value(cfg.clone()).context("reading the stored run config")?;
    if let Some(dir) = data {
        cfg.data.dir = Some(dir);
        cfg.data.synthetic = None;
    }
    cfg.run.test_episodes = episodes;
    cfg.run.seed = seed;
    let (dataset, split) = harness::load_data(&cfg)?;
    let (_, result) = harness::evaluate_on(&cfg, &mut model, &dataset, &split, 0.0)?;
    print_result(&result);
    if let Some(path) = out {
        write_csv(std::slice::from_ref(&result), &path)?;
    }
    Ok(())
}

fn collect_results(dir: &Path) -> Result<Vec<BenchmarkResult>> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == RESULT)
        .map(|e| e.into_path())
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_csv(&f)?);
    }
    Ok(rows)
}

fn report(input: &Path, format: Format, reference: bool, out: Option<PathBuf>) -> Result<()> {
    if !input.is_dir() {
        bail!("{} is not a directory", input.display());
    }
    let rows = collect_results(input)?;
    match format {
        Format::Csv => {
            let mut all = rows;
            if reference {
                all.extend(reference_results());
            }
            match out {
                Some(path) => write_csv(&all, &path)?,
                None => print!("{}", to_csv_string(&all)?),
            }
        }
        Format::Md => {
            let mut text = render_markdown(&rows)?;
            text.push_str(&format!("\nTimed on {}.\n", Hardware::detect()));
            if reference {
                text.push_str("\nPublished reference (no intervals reported):\n\n");
                text.push_str(&render_markdown(&reference_results())?);
            }
            match out {
                Some(path) => std::fs::write(&path, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn list_methods() {
    println!("{:<12} {:<12} {:<8} pooling", "method", "category", "status");
    for e in registry::entries() {
        let pooling = e.pooling.map_or("-".to_string(), |p| format!("{p:?}").to_lowercase());
        let status = if e.implemented { "ready" } else { "reserved" };
        println!("{:<12} {:<12} {:<8} {pooling}", e.name, e.category.as_str(), status);
    }
}
