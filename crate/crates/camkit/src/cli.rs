//! The `camkit` command-line surface: `synth`, `check`, `train`, `embed`,
//! `eval`, `report`. Exit codes: 0 success, 1 validation failure, 2 runtime
//! error, 64 usage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::Config;
use crate::data::{
    chammi_task_specs, read_metadata, split_integrity_check, synth_generate,
    task_specs_from_metadata, ImageStore, LoadOptions, MetadataRecord, SynthSpec, TaskSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_all, read_embeddings, write_embeddings, EmbeddingStore, EvalOptions};
use crate::registry::ChannelRegistry;
use crate::report::{code_version, radar_svg, read_report, write_report, RunReport};
use crate::train::{embed_records, load_trained, train, RunManifest, TrainConfig};

#[derive(Parser)]
#[command(
    name = "camkit",
    version,
    about = "Channel-adaptive embedding models and their 1-NN / macro-F1 / CPS evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic varying-channel corpus.
    Synth {
        /// Output directory for images, metadata.csv and registry.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the reduced test-sized corpus.
        #[arg(long)]
        tiny: bool,
        /// Run the raw-pixel 1-NN separability check after generating.
        #[arg(long)]
        sanity_check: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override any config key, e.g. --set synth.image_size=48.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Validate metadata splits against the benchmark task definitions.
    Check {
        #[arg(long)]
        meta: PathBuf,
        /// "auto" derives datasets from the metadata; "chammi" pins WTC/HPA/CP.
        #[arg(long, default_value = "auto")]
        tasks: String,
    },
    /// Train a strategy on a corpus directory (metadata.csv + registry.csv).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Run N log-spaced learning-rate trials between 1e-6 and 1e-3 and
        /// report the best CPS.
        #[arg(long)]
        sweep_lr: Option<usize>,
        /// Restore the published recipe (15 epochs, batch 128).
        #[arg(long)]
        paper_recipe: bool,
        /// Force sequential, sorted processing everywhere.
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed a corpus with a trained checkpoint, writing CEMB files.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score embeddings: per-task macro-F1 + CPS into report.json.
    Eval {
        /// One or more CEMB files (repeat the flag or comma-separate).
        #[arg(long, value_delimiter = ',', required = true)]
        embeddings: Vec<PathBuf>,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        #[arg(long, default_value = "auto")]
        tasks: String,
        /// Average macro-F1 over the task's full label universe.
        #[arg(long)]
        all_classes: bool,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Pretty-print an existing report.json (optionally render the radar SVG).
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

/// Run the CLI on the given argv (including the program name).
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    64
                }
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_)
                | Error::Contract(_)
                | Error::Format(_)
                | Error::Dimension { .. }
                | Error::Index(_)
                | Error::StrategyMismatch(_)
                | Error::UnknownChannel(_)
                | Error::ZeroNorm { .. } => 1,
                _ => 2,
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::from_file(p)?,
        None => Config::new(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn synth_spec_from_config(cfg: &Config, tiny: bool) -> Result<SynthSpec> {
    let mut spec = if tiny { SynthSpec::tiny() } else { SynthSpec::default() };
    spec.image_size = cfg.get_usize("synth.image_size", spec.image_size)?;
    spec.train_per_dataset = cfg.get_usize("synth.train_per_dataset", spec.train_per_dataset)?;
    spec.test_per_task = cfg.get_usize("synth.test_per_task", spec.test_per_task)?;
    spec.novel_test_per_task =
        cfg.get_usize("synth.novel_test_per_task", spec.novel_test_per_task)?;
    Ok(spec)
}

fn task_specs_for_mode(mode: &str, records: &[MetadataRecord]) -> Result<Vec<TaskSpec>> {
    match mode {
        "chammi" => Ok(chammi_task_specs()),
        "auto" => task_specs_from_metadata(records),
        other => Err(Error::config(format!(
            "unknown task set {other:?}; expected auto or chammi"
        ))),
    }
}

/// Load a corpus directory: registry.csv, metadata.csv, decoded images.
fn load_corpus(data: &Path) -> Result<(Arc<ChannelRegistry>, Vec<MetadataRecord>, ImageStore)> {
    let registry = Arc::new(ChannelRegistry::from_csv(&data.join("registry.csv"))?);
    let records = read_metadata(&data.join("metadata.csv"))?;
    let store = ImageStore::load(data, &records, &registry, LoadOptions::default())?;
    Ok((registry, records, store))
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Cmd::Synth {
            out,
            seed,
            tiny,
            sanity_check,
            config,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let spec = synth_spec_from_config(&cfg, tiny)?;
            let records = synth_generate(&spec, seed, &out)?;
            let mut by_split: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &records {
                *by_split.entry(r.split.as_str()).or_default() += 1;
            }
            println!("generated {} images under {}", records.len(), out.display());
            for (split, n) in by_split {
                println!("  {split}: {n}");
            }
            if sanity_check {
                let registry = ChannelRegistry::from_csv(&out.join("registry.csv"))?;
                let store = ImageStore::load(&out, &records, &registry, LoadOptions::default())?;
                for task in ["W1", "H1", "C1"] {
                    let f1 = crate::data::raw_pixel_knn_f1(&records, &store, task)?;
                    println!("raw-pixel 1-NN macro-F1 on {task}: {f1:.3}");
                    if f1 < 0.8 {
                        return Err(Error::contract(format!(
                            "raw-pixel separability check failed on {task}: {f1:.3} < 0.8"
                        )));
                    }
                }
            }
            Ok(0)
        }
        Cmd::Check { meta, tasks } => {
            let records = read_metadata(&meta)?;
            let specs = task_specs_for_mode(&tasks, &records)?;
            let report = split_integrity_check(&records, &specs);
            if report.is_clean() {
                println!("OK: {} records, splits are consistent", records.len());
                Ok(0)
            } else {
                for v in &report.violations {
                    eprintln!("violation: {v}");
                }
                eprintln!("{} violation(s)", report.violations.len());
                Ok(1)
            }
        }
        Cmd::Train {
            data,
            out,
            strategy,
            config,
            overrides,
            sweep_lr,
            paper_recipe,
            deterministic,
            seed,
        } => {
            let mut cfg = load_config(&config, &overrides)?;
            if let Some(s) = strategy {
                cfg.set("train.strategy", &s);
            }
            if paper_recipe {
                cfg.set("train.paper_recipe", "true");
            }
            if deterministic {
                cfg.set("train.deterministic", "true");
            }
            if let Some(s) = seed {
                cfg.set("train.seed", &s.to_string());
            }
            let tc = TrainConfig::from_config(&cfg)?;
            let (registry, records, store) = load_corpus(&data)?;

            match sweep_lr {
                None => {
                    let outcome = train(&tc, &records, &store, registry, &out)?;
                    println!(
                        "trained {} for {} epochs; final loss {:.4}; checkpoint {}",
                        tc.strategy,
                        tc.epochs,
                        outcome.manifest.loss_history.last().copied().unwrap_or(f64::NAN),
                        outcome.checkpoint_path.display()
                    );
                    Ok(0)
                }
                Some(n) => {
                    if n < 2 {
                        return Err(Error::config("--sweep-lr needs at least 2 trials"));
                    }
                    let (lo, hi) = (1e-6f64, 1e-3f64);
                    let mut best: Option<(f64, f64, PathBuf)> = None;
                    for trial in 0..n {
                        let t = trial as f64 / (n - 1) as f64;
                        let lr = 10f64.powf(lo.log10() + t * (hi.log10() - lo.log10()));
                        let mut trial_cfg = tc.clone();
                        trial_cfg.lr = lr;
                        let trial_dir = out.join(format!("lr_{lr:.2e}"));
                        let outcome =
                            train(&trial_cfg, &records, &store, Arc::clone(&registry) , &trial_dir)?;
                        let model = load_trained(
                            &outcome.manifest,
                            &outcome.checkpoint_path,
                            Arc::clone(&registry),
                        )?;
                        let embeddings =
                            embed_records(&model, &store, &records, trial_cfg.resolution)?;
                        let specs = task_specs_from_metadata(&records)?;
                        let metrics =
                            evaluate_all(&embeddings, &records, &specs, EvalOptions::default())?;
                        println!("lr {lr:.3e}: CPS {:.4}", metrics.cps);
                        if best.as_ref().map(|(c, _, _)| metrics.cps > *c).unwrap_or(true) {
                            best = Some((metrics.cps, lr, trial_dir));
                        }
                    }
                    let (cps, lr, dir) = best.expect("at least one trial");
                    println!("best: lr {lr:.3e} with CPS {cps:.4} ({})", dir.display());
                    Ok(0)
                }
            }
        }
        Cmd::Embed {
            checkpoint,
            data,
            out,
        } => {
            let manifest_path = checkpoint
                .parent()
                .unwrap_or(Path::new("."))
                .join("manifest.json");
            let manifest = RunManifest::load(&manifest_path)?;
            let (registry, records, store) = load_corpus(&data)?;
            let model = load_trained(&manifest, &checkpoint, Arc::clone(&registry))?;
            let resolution: usize = manifest
                .config
                .get("train.resolution")
                .and_then(|v| v.parse().ok())
                .unwrap_or(128);
            let embeddings = embed_records(&model, &store, &records, resolution)?;
            let written = write_embedding_files(&out, &records, &embeddings)?;
            for (path, n, d) in &written {
                println!("wrote {n} embeddings (d={d}) to {}", path.display());
            }
            Ok(0)
        }
        Cmd::Eval {
            embeddings,
            meta,
            out,
            tasks,
            all_classes,
            svg,
        } => {
            let records = read_metadata(&meta)?;
            let specs = task_specs_for_mode(&tasks, &records)?;
            let mut store = EmbeddingStore::new();
            for path in &embeddings {
                let part = read_embeddings(path)?;
                for (id, v) in part.iter() {
                    store.insert(id.clone(), v.clone());
                }
            }
            let metrics = evaluate_all(&store, &records, &specs, EvalOptions { all_classes })?;
            let mut config = BTreeMap::new();
            config.insert("eval.tasks".to_string(), tasks);
            config.insert("eval.all_classes".to_string(), all_classes.to_string());
            let report = RunReport {
                metrics,
                config,
                code_version: code_version(),
            };
            write_report(&out, &report)?;
            if let Some(svg_path) = svg {
                std::fs::write(&svg_path, radar_svg(&report.metrics))?;
            }
            for (task, f1) in &report.metrics.per_task_f1 {
                println!("{task}: macro-F1 {f1:.4}");
            }
            println!("CPS {:.4}", report.metrics.cps);
            Ok(0)
        }
        Cmd::Report { report, svg } => {
            let loaded = read_report(&report)?;
            loaded.metrics.verify_cps()?;
            println!("code version: {}", loaded.code_version);
            for (task, f1) in &loaded.metrics.per_task_f1 {
                let support: usize = loaded
                    .metrics
                    .counts
                    .get(task)
                    .map(|m| m.values().sum())
                    .unwrap_or(0);
                println!("{task}: macro-F1 {f1:.4} ({support} images)");
            }
            println!("CPS {:.4}", loaded.metrics.cps);
            if let Some(svg_path) = svg {
                std::fs::write(&svg_path, radar_svg(&loaded.metrics))?;
                println!("radar plot written to {}", svg_path.display());
            }
            Ok(0)
        }
    }
}

/// Write embeddings to CEMB file(s). Rows with one shared dimension go into
/// a single file at `out`; mixed dimensions (the channel-replication
/// baseline) produce one file per dataset, suffixed with the dataset name.
pub fn write_embedding_files(
    out: &Path,
    records: &[MetadataRecord],
    store: &EmbeddingStore,
) -> Result<Vec<(PathBuf, usize, usize)>> {
    let mut dims: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let v = store
            .get(&r.image_id)
            .ok_or_else(|| Error::contract(format!("no embedding for {}", r.image_id)))?;
        dims.insert(&r.dataset, v.len());
    }
    let distinct: std::collections::BTreeSet<usize> = dims.values().copied().collect();
    let mut written = Vec::new();
    if distinct.len() <= 1 {
        let dim = distinct.into_iter().next().unwrap_or(0);
        let mut ids = Vec::with_capacity(records.len());
        let mut data = Vec::with_capacity(records.len() * dim);
        for r in records {
            ids.push(r.image_id.clone());
            data.extend_from_slice(store.get(&r.image_id).unwrap());
        }
        write_embeddings(out, &ids, dim, &data)?;
        written.push((out.to_path_buf(), ids.len(), dim));
    } else {
        let stem = out.file_stem().unwrap_or_default().to_string_lossy();
        let parent = out.parent().unwrap_or(Path::new("."));
        for (dataset, dim) in dims {
            let path = parent.join(format!("{stem}.{dataset}.cemb"));
            let rows: Vec<&MetadataRecord> =
                records.iter().filter(|r| r.dataset == dataset).collect();
            let mut ids = Vec::with_capacity(rows.len());
            let mut data = Vec::with_capacity(rows.len() * dim);
            for r in rows {
                ids.push(r.image_id.clone());
                data.extend_from_slice(store.get(&r.image_id).unwrap());
            }
            write_embeddings(&path, &ids, dim, &data)?;
            written.push((path, ids.len(), dim));
        }
    }
    Ok(written)
}
