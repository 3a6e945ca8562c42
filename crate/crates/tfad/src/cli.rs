//! Command-line front end: `train`, `score`, `counterfactual`,
//! `evaluate`, `plot`, and `synth` verbs over the library pipeline.
//!
//! Every verb resolves one [`RunConfig`] (preset or `--config` file,
//! then flag overrides), acts on the datasets picked by `--dataset`,
//! and leaves self-describing outputs: each output directory carries
//! the resolved `config.toml` and a `run.toml` naming the checkpoint
//! that produced it. Exit codes: 0 success, 2 configuration error,
//! 3 data error, 4 training divergence, 5 wall-clock budget exhausted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::counterfactual::{
    compute_threshold, detect_anomalous_steps, flagged_window_origins, resample_counterfactual,
    write_counterfactual_csv, CounterfactualResult, Threshold,
};
use crate::data::{
    desk_corpus, extract_windows, generate_synthetic, list_archive_files, load_manifest,
    load_period_table, load_ucr_dataset, parse_archive_stem, save_manifest, save_period_table,
    save_ucr_dataset, window_at, SeriesRecord, Split,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_archive, evaluate_dataset, write_summary_csv, EvalResult};
use crate::nn::{derive_seed, Budget, Checkpointer};
use crate::plot::{read_overlay_csv, write_figure, Overlay};
use crate::prior::{train_stage2, Prior};
use crate::scoring::{read_score_csv, read_score_table, score_split, write_score_csv, ScoreBundle};
use crate::tokenizer::{train_stage1, Tokenizer};

/// Anomaly detection on univariate series via time-frequency token
/// grids and a masked generative prior.
#[derive(Debug, Parser)]
#[command(name = "tfad", version, about)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Read the run configuration from a TOML file instead of a preset.
    #[arg(long, global = true, conflicts_with_all = ["desk", "full"])]
    config: Option<PathBuf>,

    /// Use the desk preset: small models that train in minutes on one
    /// CPU core (the default).
    #[arg(long, global = true)]
    desk: bool,

    /// Use the paper-scale preset (hours of training per dataset).
    #[arg(long, global = true, conflicts_with = "desk")]
    full: bool,

    /// Dataset selector: an archive name, `all`, or `synthetic`
    /// (generates the built-in corpus on first use).
    #[arg(long, global = true, default_value = "all")]
    dataset: String,

    /// Override the master random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the rolling-window stride as a fraction of the window
    /// length T.
    #[arg(long, global = true)]
    stride_rate: Option<f64>,

    /// Override the threshold quantile.
    #[arg(long, global = true)]
    quantile: Option<f64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the checkpoint directory.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the tokenizer (stage 1) then the prior (stage 2) per dataset.
    Train {
        /// Continue from the epochs recorded in an existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score the test split of each dataset and write score CSVs.
    Score,
    /// Threshold the scores, resample flagged windows, and write
    /// counterfactual CSVs and figures.
    Counterfactual,
    /// Summarize saved score CSVs against the labels.
    Evaluate,
    /// Re-render figures from saved score/counterfactual CSVs.
    Plot,
    /// Generate the synthetic corpus into the data directory.
    Synth,
}

/// Parse the process arguments, run the selected command, and return
/// the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    match &cli.command {
        Command::Train { resume } => cmd_train(&config, &cli.dataset, *resume),
        Command::Score => cmd_score(&config, &cli.dataset),
        Command::Counterfactual => cmd_counterfactual(&config, &cli.dataset),
        Command::Evaluate => cmd_evaluate(&config, &cli.dataset),
        Command::Plot => cmd_plot(&config, &cli.dataset),
        Command::Synth => cmd_synth(&config),
    }
}

/// Preset or file, then flag overrides, then validation.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = if let Some(path) = &cli.config {
        RunConfig::from_toml_file(path)?
    } else if cli.full {
        RunConfig::full()
    } else {
        RunConfig::desk()
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(rate) = cli.stride_rate {
        config.scoring.stride_rate = rate;
    }
    if let Some(quantile) = cli.quantile {
        config.scoring.quantile = quantile;
    }
    if let Some(out) = &cli.out {
        config.paths.out_dir = out.clone();
    }
    if let Some(checkpoint) = &cli.checkpoint {
        config.paths.checkpoint_dir = checkpoint.clone();
    }
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// Dataset resolution
// ---------------------------------------------------------------------------

fn stem_matches(stem: &str, selector: &str) -> bool {
    stem == selector || stem.contains(&format!("_UCR_Anomaly_{selector}_"))
}

/// Load the datasets picked by `--dataset`. `synthetic` provisions the
/// built-in corpus on first use; `all` takes every archive file; a name
/// matches a file stem or its name component.
fn resolve_records(config: &RunConfig, selector: &str) -> Result<Vec<SeriesRecord>> {
    let data_dir = &config.paths.data_dir;
    if selector == "synthetic" && list_archive_files(data_dir).map_or(true, |f| f.is_empty()) {
        cmd_synth(config)?;
    }
    let files = list_archive_files(data_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no archive files in {} (run `tfad synth` or add *.txt series)",
            data_dir.display()
        )));
    }
    let periods = load_period_table(&config.paths.period_csv)?;
    let selected: Vec<&PathBuf> = if selector == "all" || selector == "synthetic" {
        files.iter().collect()
    } else {
        files
            .iter()
            .filter(|p| {
                p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|stem| stem_matches(stem, selector))
            })
            .collect()
    };
    if selected.is_empty() {
        let mut names: Vec<String> = files
            .iter()
            .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
            .collect();
        names.sort();
        let shown = if names.len() > 20 {
            format!("{}, ... ({} total)", names[..20].join(", "), names.len())
        } else {
            names.join(", ")
        };
        return Err(Error::Data(format!(
            "unknown dataset '{selector}'; available: {shown}"
        )));
    }
    selected
        .into_iter()
        .map(|path| load_ucr_dataset(path, &periods))
        .collect()
}

// ---------------------------------------------------------------------------
// Run metadata
// ---------------------------------------------------------------------------

/// Provenance sidecar written next to every score/counterfactual CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub dataset: String,
    /// Hash of the resolved config the command ran under.
    pub config_hash: String,
    /// Hash of the checkpoint files the scores came from.
    pub checkpoint_hash: String,
    /// Wall time of the scoring pass. Recorded once here and re-read by
    /// `evaluate`, so summaries are reproducible bit for bit.
    pub runtime_s: f64,
}

impl RunMeta {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize run metadata: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// SHA-256 over both checkpoint files, identifying the exact weights.
fn checkpoint_hash(ckpt: &Checkpointer) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for path in [ckpt.stage1_path(), ckpt.stage2_path()] {
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Write loss-log rows. A fresh run truncates (so reruns are
/// bit-identical); a resumed run appends to what the interrupted run
/// logged, writing the header only when the file is new.
fn write_loss_csv(path: &Path, header: &str, rows: &[String], append: bool) -> Result<()> {
    let mut text = if append && path.exists() {
        std::fs::read_to_string(path)?
    } else {
        format!("{header}\n")
    };
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_train(config: &RunConfig, selector: &str, resume: bool) -> Result<()> {
    let records = resolve_records(config, selector)?;
    let budget = Budget::new(config.train.wall_clock_secs);
    let config_hash = config.hash();
    for record in &records {
        let dir = config.paths.checkpoint_dir.join(&record.name);
        let windows = extract_windows(record, Split::Train, config.train.train_stride)?;
        if windows.is_empty() {
            return Err(Error::Data(format!(
                "{}: train split shorter than one window", record.name
            )));
        }
        let series_len = windows[0].x.len();

        // Open or create the checkpoint; on resume, rebuild and load
        // whatever stages it already holds.
        let (mut ckpt, resume1) = if resume && dir.join("checkpoint.toml").exists() {
            let ckpt = Checkpointer::open(&dir)?;
            if ckpt.meta().config_hash != config_hash {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained under a different configuration; \
                     rerun without --resume to start over",
                    dir.display()
                )));
            }
            let done = ckpt.meta().stage1_epochs_done;
            let loaded = if done > 0 {
                let tokenizer =
                    Tokenizer::new(config, series_len, derive_seed(config.seed, "stage1-init"))?;
                tokenizer.load_params(&ckpt.stage1_path())?;
                Some((tokenizer, done))
            } else {
                None
            };
            (ckpt, loaded)
        } else {
            (
                Checkpointer::create(&dir, config_hash.clone(), record.name.clone())?,
                None,
            )
        };
        config.write_toml_file(&dir.join("config.toml"))?;

        let resume2_epoch = if resume { ckpt.meta().stage2_epochs_done } else { 0 };

        let (tokenizer, stage1_log) =
            train_stage1(&windows, config, &budget, Some(&mut ckpt), resume1)?;
        write_loss_csv(
            &dir.join("stage1_loss.csv"),
            "epoch,train_loss,holdout_loss,codes_used",
            &stage1_log
                .iter()
                .map(|e| format!("{},{},{},{}", e.epoch, e.train_loss, e.holdout_loss, e.codes_used))
                .collect::<Vec<_>>(),
            resume,
        )?;

        let grids = windows
            .iter()
            .map(|w| tokenizer.tokenize_window(w))
            .collect::<Result<Vec<_>>>()?;
        let resume2 = if resume2_epoch > 0 {
            let prior = Prior::new(
                config,
                tokenizer.shape.freq_rows,
                tokenizer.shape.width,
                derive_seed(config.seed, "stage2-init"),
            )?;
            prior.load_params(&ckpt.stage2_path())?;
            Some((prior, resume2_epoch))
        } else {
            None
        };
        let (_prior, stage2_log) =
            train_stage2(&grids, config, &budget, Some(&mut ckpt), resume2)?;
        write_loss_csv(
            &dir.join("stage2_loss.csv"),
            "epoch,train_loss",
            &stage2_log
                .iter()
                .map(|e| format!("{},{}", e.epoch, e.train_loss))
                .collect::<Vec<_>>(),
            resume,
        )?;

        let loss = |log_last: Option<f64>| {
            log_last.map_or_else(|| "cached".to_string(), |l| format!("loss {l:.4}"))
        };
        println!(
            "train {}: stage1 {} epochs ({}), stage2 {} epochs ({}) -> {}",
            record.name,
            ckpt.meta().stage1_epochs_done,
            loss(stage1_log.last().map(|e| e.train_loss)),
            ckpt.meta().stage2_epochs_done,
            loss(stage2_log.last().map(|e| e.train_loss)),
            dir.display(),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// score / counterfactual
// ---------------------------------------------------------------------------

/// Rebuild both models from a dataset's checkpoint directory.
fn load_models(config: &RunConfig, record: &SeriesRecord) -> Result<(Tokenizer, Prior, Checkpointer)> {
    let dir = config.paths.checkpoint_dir.join(&record.name);
    if !dir.join("checkpoint.toml").exists() {
        return Err(Error::Data(format!(
            "no checkpoint for '{}' under {} (run `tfad train` first)",
            record.name,
            config.paths.checkpoint_dir.display()
        )));
    }
    let ckpt = Checkpointer::open(&dir)?;
    if ckpt.meta().config_hash != config.hash() {
        eprintln!(
            "note: {} was trained under a different configuration; \
             model geometry must still match",
            dir.display()
        );
    }
    let tokenizer = Tokenizer::new(
        config,
        record.window_len(),
        derive_seed(config.seed, "stage1-init"),
    )?;
    tokenizer.load_params(&ckpt.stage1_path())?;
    let prior = Prior::new(
        config,
        tokenizer.shape.freq_rows,
        tokenizer.shape.width,
        derive_seed(config.seed, "stage2-init"),
    )?;
    prior.load_params(&ckpt.stage2_path())?;
    Ok((tokenizer, prior, ckpt))
}

/// Write the standard sidecars next to a dataset's output CSVs.
fn write_sidecars(
    out: &Path,
    config: &RunConfig,
    record: &SeriesRecord,
    ckpt: &Checkpointer,
    runtime_s: f64,
) -> Result<()> {
    config.write_toml_file(&out.join("config.toml"))?;
    RunMeta {
        dataset: record.name.clone(),
        config_hash: config.hash(),
        checkpoint_hash: checkpoint_hash(ckpt)?,
        runtime_s,
    }
    .save(&out.join("run.toml"))
}

fn cmd_score(config: &RunConfig, selector: &str) -> Result<()> {
    let records = resolve_records(config, selector)?;
    for record in &records {
        let (tokenizer, prior, ckpt) = load_models(config, record)?;
        let started = Instant::now();
        let bundle = score_split(record, Split::Test, &tokenizer, &prior, config)?;
        let runtime_s = started.elapsed().as_secs_f64();
        let out = config.paths.out_dir.join(&record.name);
        write_score_csv(&out.join("scores.csv"), &bundle)?;
        write_sidecars(&out, config, record, &ckpt, runtime_s)?;
        println!(
            "score {}: {} timesteps in {runtime_s:.1}s -> {}",
            record.name,
            bundle.len(),
            out.join("scores.csv").display(),
        );
    }
    Ok(())
}

fn counterfactuals_for(
    record: &SeriesRecord,
    bundle: &ScoreBundle,
    threshold: &Threshold,
    tokenizer: &Tokenizer,
    prior: &Prior,
    config: &RunConfig,
) -> Result<Vec<CounterfactualResult>> {
    let flags = detect_anomalous_steps(&bundle.a_final, threshold);
    let t = record.window_len();
    let mut results = Vec::new();
    for rel_origin in flagged_window_origins(&flags, t) {
        let abs_origin = bundle.start_t + rel_origin;
        let window = window_at(record, abs_origin)?;
        let window_flags = &flags[rel_origin..rel_origin + t];
        let window_scores = &bundle.a_final[rel_origin..rel_origin + t];
        for trial in 0..config.scoring.counterfactual_samples {
            let seed = derive_seed(
                config.seed,
                &format!("counterfactual-{}-{abs_origin}-{trial}", record.name),
            );
            results.push(resample_counterfactual(
                &window,
                window_flags,
                window_scores,
                tokenizer,
                prior,
                config,
                seed,
            )?);
        }
    }
    Ok(results)
}

fn cmd_counterfactual(config: &RunConfig, selector: &str) -> Result<()> {
    let records = resolve_records(config, selector)?;
    for record in &records {
        let (tokenizer, prior, ckpt) = load_models(config, record)?;
        let started = Instant::now();

        // Threshold from the train split's score distribution, then
        // score and flag the test split.
        let train_bundle = score_split(record, Split::Train, &tokenizer, &prior, config)?;
        let threshold = compute_threshold(
            &train_bundle.a_final,
            config.scoring.quantile,
            &record.name,
            &config.hash(),
        )?;
        let bundle = score_split(record, Split::Test, &tokenizer, &prior, config)?;
        let results = counterfactuals_for(record, &bundle, &threshold, &tokenizer, &prior, config)?;
        let runtime_s = started.elapsed().as_secs_f64();

        let out = config.paths.out_dir.join(&record.name);
        write_score_csv(&out.join("scores.csv"), &bundle)?;
        write_counterfactual_csv(&out.join("counterfactuals.csv"), &results)?;
        std::fs::write(
            out.join("threshold.toml"),
            toml::to_string_pretty(&threshold)
                .map_err(|e| Error::Config(format!("serialize threshold: {e}")))?,
        )?;
        let overlays: Vec<Overlay> = results.iter().map(Overlay::from).collect();
        write_figure(
            &out.join("figure.svg"),
            record,
            &bundle.table(),
            Some(threshold.value),
            &overlays,
        )?;
        write_sidecars(&out, config, record, &ckpt, runtime_s)?;

        if results.is_empty() {
            println!(
                "counterfactual {}: no test scores above the q{} threshold ({:.4}); \
                 nothing to resample -> {}",
                record.name, threshold.quantile, threshold.value, out.display(),
            );
        } else {
            println!(
                "counterfactual {}: {} resamples above threshold {:.4} -> {}",
                record.name,
                results.len(),
                threshold.value,
                out.display(),
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate / plot / synth
// ---------------------------------------------------------------------------

/// Output subdirectories holding a `scores.csv`, filtered by selector.
fn scored_datasets(out_dir: &Path, selector: &str) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(out_dir)
        .map_err(|e| Error::Input(format!("cannot list score directory {}: {e}", out_dir.display())))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(String::from) else {
            continue;
        };
        if path.join("scores.csv").exists()
            && (selector == "all" || selector == "synthetic" || stem_matches(&name, selector))
        {
            found.push((name, path));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::Input(format!(
            "no score CSVs under {} match '{selector}' (run `tfad score` first)",
            out_dir.display()
        )));
    }
    Ok(found)
}

/// Anomaly intervals keyed by dataset stem, read from archive filenames.
fn label_table(config: &RunConfig) -> Result<BTreeMap<String, (usize, usize)>> {
    let mut labels = BTreeMap::new();
    for path in list_archive_files(&config.paths.data_dir).unwrap_or_default() {
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Ok((_, _, begin, end)) = parse_archive_stem(stem) {
                labels.insert(stem.to_string(), (begin, end));
            }
        }
    }
    Ok(labels)
}

fn cmd_evaluate(config: &RunConfig, selector: &str) -> Result<()> {
    let scored = scored_datasets(&config.paths.out_dir, selector)?;
    let labels = label_table(config)?;

    let missing: Vec<&str> = scored
        .iter()
        .filter(|(name, _)| !labels.contains_key(name))
        .map(|(name, _)| name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no labels in {} for: {}",
            config.paths.data_dir.display(),
            missing.join(", ")
        )));
    }

    let mut results: Vec<EvalResult> = Vec::new();
    for (name, dir) in &scored {
        let series = read_score_csv(&dir.join("scores.csv"))?;
        let runtime_s = match RunMeta::load(&dir.join("run.toml")) {
            Ok(meta) => meta.runtime_s,
            Err(_) => {
                eprintln!("note: {} has no run.toml; runtime recorded as 0", dir.display());
                0.0
            }
        };
        let (begin, end) = labels[name];
        results.push(evaluate_dataset(
            name,
            &series.a_final,
            series.timesteps[0],
            begin,
            end,
            runtime_s,
        )?);
    }

    let summary = evaluate_archive(results)?;
    let path = config.paths.out_dir.join("summary.csv");
    write_summary_csv(&path, &summary)?;
    config.write_toml_file(&config.paths.out_dir.join("config.toml"))?;
    println!(
        "evaluate: {} datasets  top1 {:.3}  top3 {:.3}  top5 {:.3} -> {}",
        summary.results.len(),
        summary.top1,
        summary.top3,
        summary.top5,
        path.display(),
    );
    Ok(())
}

fn cmd_plot(config: &RunConfig, selector: &str) -> Result<()> {
    let scored = scored_datasets(&config.paths.out_dir, selector)?;
    let periods = load_period_table(&config.paths.period_csv)?;
    let by_stem: BTreeMap<String, PathBuf> = list_archive_files(&config.paths.data_dir)?
        .into_iter()
        .filter_map(|p| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .map(|stem| (stem.to_string(), p.clone()))
        })
        .collect();
    for (name, dir) in &scored {
        let data_path = by_stem.get(name).ok_or_else(|| {
            Error::Data(format!(
                "no archive file for scored dataset '{name}' in {}",
                config.paths.data_dir.display()
            ))
        })?;
        let record = load_ucr_dataset(data_path, &periods)?;
        let table = read_score_table(&dir.join("scores.csv"))?;
        let threshold = match std::fs::read_to_string(dir.join("threshold.toml")) {
            Ok(text) => Some(
                toml::from_str::<Threshold>(&text)
                    .map_err(|e| Error::Data(format!("threshold.toml: {e}")))?
                    .value,
            ),
            Err(_) => None,
        };
        let cf_path = dir.join("counterfactuals.csv");
        let overlays = if cf_path.exists() {
            read_overlay_csv(&cf_path)?
        } else {
            Vec::new()
        };
        let path = dir.join("figure.svg");
        write_figure(&path, &record, &table, threshold, &overlays)?;
        println!("plot {name}: -> {}", path.display());
    }
    Ok(())
}

fn cmd_synth(config: &RunConfig) -> Result<()> {
    let data_dir = &config.paths.data_dir;
    std::fs::create_dir_all(data_dir)?;
    let manifest_path = data_dir.join("manifest.csv");
    let specs = if manifest_path.exists() {
        load_manifest(&manifest_path)?
    } else {
        let specs = desk_corpus(config.seed);
        save_manifest(&manifest_path, &specs)?;
        specs
    };
    let mut periods = BTreeMap::new();
    for (id, spec) in specs.iter().enumerate() {
        let record = generate_synthetic(spec)?;
        save_ucr_dataset(&record, data_dir, id)?;
        periods.insert(spec.name.clone(), spec.period);
    }
    save_period_table(&config.paths.period_csv, &periods)?;
    println!("synth: wrote {} series to {}", specs.len(), data_dir.display());
    Ok(())
}
