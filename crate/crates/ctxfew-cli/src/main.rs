//! Command-line driver: dataset generation, training, evaluation, the
//! retrieval probe, and attention-map export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use ctxfew::collapse;
use ctxfew::episodes::{sample_episode, Dataset, Split};
use ctxfew::evaluator::{self, EvalReport};
use ctxfew::rng::derive_rng;
use ctxfew::heads::ProtoMetric;
use ctxfew::trainer::{self, Checkpoint, HeadKind, Model};

use config::{file_overlays, parse_flag_value, resolve, Overlay, RunConfig};

enum CliError {
    /// Bad flags or config values; exit 2.
    Usage(String),
    /// The command itself failed; exit 1.
    Runtime(String),
}

impl From<ctxfew::error::Error> for CliError {
    fn from(e: ctxfew::error::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage<T: Into<String>>(msg: T) -> CliError {
    CliError::Usage(msg.into())
}

/// Value-taking convenience flag that feeds a config key.
struct AliasSpec {
    flag: &'static str,
    key: &'static str,
    help: &'static str,
}

const GEN_ALIASES: &[AliasSpec] = &[
    AliasSpec { flag: "classes", key: "data.num_classes", help: "Shorthand for --data.num_classes" },
    AliasSpec {
        flag: "per-class",
        key: "data.images_per_class",
        help: "Shorthand for --data.images_per_class",
    },
];

const TRAIN_ALIASES: &[AliasSpec] = &[
    AliasSpec { flag: "head", key: "train.head", help: "Shorthand for --train.head" },
    AliasSpec {
        flag: "simclr-fraction",
        key: "sampler.simclr_fraction",
        help: "Shorthand for --sampler.simclr_fraction",
    },
    AliasSpec { flag: "episodes", key: "train.max_episodes", help: "Shorthand for --train.max_episodes" },
];

const EVAL_ALIASES: &[AliasSpec] =
    &[AliasSpec { flag: "episodes", key: "eval.n_episodes", help: "Shorthand for --eval.n_episodes" }];

fn config_args(aliases: &'static [AliasSpec]) -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("JSON config file with flat dotted keys; flags override it")];
    for key in config::schema_keys() {
        let help = config::help_for(&key).expect("schema key has help");
        args.push(Arg::new(key.clone()).long(key).value_name("VALUE").help(help));
    }
    for spec in aliases {
        args.push(Arg::new(spec.flag).long(spec.flag).value_name("VALUE").help(spec.help));
    }
    args
}

fn build_command() -> Command {
    Command::new("ctxfew")
        .about("Episodic few-shot classification: data, training, evaluation, diagnostics")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(
            "Every config key doubles as a flag of the same name. \
             CTX_FEWSHOT_SEED provides a fallback for seed keys not set by file or flag.",
        )
        .subcommand(
            Command::new("gen-data")
                .about("Render a synthetic glyph dataset to --paths.data")
                .args(config_args(GEN_ALIASES))
                .arg(
                    Arg::new("force")
                        .long("force")
                        .action(ArgAction::SetTrue)
                        .help("Replace the output directory if it already exists"),
                ),
        )
        .subcommand(
            Command::new("train")
                .about("Train a model episodically; writes a checkpoint and a CSV log")
                .args(config_args(TRAIN_ALIASES)),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint; writes a report as JSON and CSV")
                .args(config_args(EVAL_ALIASES))
                .arg(
                    Arg::new("five-shot")
                        .long("five-shot")
                        .action(ArgAction::SetTrue)
                        .help("Shorthand for --eval.mode five-shot"),
                ),
        )
        .subcommand(
            Command::new("probe")
                .about("Nearest-neighbour retrieval diagnostics; writes histogram CSV")
                .args(config_args(&[])),
        )
        .subcommand(
            Command::new("viz-attention")
                .about("Export attention maps for one query as PGM files plus a JSON sidecar")
                .args(config_args(&[])),
        )
}

/// Gathers overlays in precedence order: config file, then flags, then
/// convenience aliases.
fn gather_config(matches: &ArgMatches, aliases: &'static [AliasSpec]) -> Result<RunConfig, CliError> {
    let mut overlays: Vec<Overlay> = Vec::new();
    if let Some(path) = matches.get_one::<String>("config") {
        overlays.extend(file_overlays(Path::new(path)).map_err(usage)?);
    }
    for key in config::schema_keys() {
        if let Some(raw) = matches.get_one::<String>(&key) {
            overlays.push(Overlay { key, value: parse_flag_value(raw) });
        }
    }
    for spec in aliases {
        if let Some(raw) = matches.get_one::<String>(spec.flag) {
            overlays.push(Overlay { key: spec.key.to_string(), value: parse_flag_value(raw) });
        }
    }
    if matches!(matches.try_get_one::<bool>("five-shot"), Ok(Some(&true))) {
        overlays.push(Overlay {
            key: "eval.mode".to_string(),
            value: serde_json::Value::String("five-shot".to_string()),
        });
    }
    let env_seed = match std::env::var("CTX_FEWSHOT_SEED") {
        Ok(raw) => Some(
            raw.parse::<u64>()
                .map_err(|_| usage(format!("CTX_FEWSHOT_SEED: '{raw}' is not a valid seed")))?,
        ),
        Err(_) => None,
    };
    resolve(&overlays, env_seed).map_err(usage)
}

fn required_path<'a>(value: &'a str, key: &str) -> Result<&'a Path, CliError> {
    if value.is_empty() {
        return Err(usage(format!("{key}: required for this command")));
    }
    Ok(Path::new(value))
}

/// Sibling file name with a tag spliced in before the extension.
fn tagged_path(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.{tag}.{ext}"),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

fn method_name(cfg: &RunConfig) -> &'static str {
    match cfg.train.head {
        HeadKind::Ctx => "ctx",
        HeadKind::Proto => match cfg.train.proto_metric {
            ProtoMetric::SqEuclid => "proto-sq-euclid",
            ProtoMetric::Cosine => "proto-cosine",
        },
    }
}

fn dataset_name(cfg: &RunConfig) -> String {
    Path::new(&cfg.paths.data)
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string()
}

/// Loads a checkpoint and insists the active configuration matches the one
/// it was trained under, so eval/probe/viz never mix settings silently.
fn load_matching_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = required_path(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let ckpt = trainer::load_checkpoint(path)?;
    if ckpt.model.cfg != cfg.embedder {
        return Err(usage("embedder settings differ from the ones in the checkpoint"));
    }
    let expect = trainer::config_hash(&cfg.train, &ckpt.model.cfg, &cfg.sampler, &cfg.transform);
    if expect != ckpt.config_hash {
        return Err(usage(
            "checkpoint was trained under a different configuration; \
             pass the config file used for training",
        ));
    }
    Ok(ckpt)
}

fn cmd_gen_data(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    cfg.data.validate().map_err(|e| usage(format!("data: {e}")))?;
    let out = required_path(&cfg.paths.data, "paths.data")?;
    if out.exists() {
        if !force {
            return Err(CliError::Runtime(format!(
                "{} already exists; pass --force to replace it",
                out.display()
            )));
        }
        std::fs::remove_dir_all(out).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let mut rng = derive_rng(cfg.seed, "gen-data");
    let dataset = ctxfew::episodes::synthetic::make_synthetic_dataset(&cfg.data, &mut rng)?;
    dataset.save(out)?;
    let m = &dataset.manifest;
    let per_split = |s: Split| m.classes.iter().filter(|c| c.split == s).count();
    println!(
        "wrote {} classes x {} images ({}x{} px, {} channel) to {}",
        m.classes.len(),
        cfg.data.images_per_class,
        m.image_size,
        m.image_size,
        m.channels,
        out.display()
    );
    println!(
        "splits: train {} / val {} / test {}; hierarchy depth {}",
        per_split(Split::Train),
        per_split(Split::Val),
        per_split(Split::Test),
        cfg.data.hierarchy_depth
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.embedder.validate().map_err(|e| usage(format!("embedder: {e}")))?;
    cfg.sampler.validate().map_err(|e| usage(format!("sampler: {e}")))?;
    cfg.train.validate().map_err(|e| usage(format!("train: {e}")))?;
    cfg.transform.validate().map_err(|e| usage(format!("transform: {e}")))?;
    let data_dir = required_path(&cfg.paths.data, "paths.data")?;
    let ckpt_path = required_path(&cfg.paths.checkpoint, "paths.checkpoint")?.to_path_buf();

    let dataset = Dataset::load(data_dir)?;
    let start = if cfg.paths.resume.is_empty() {
        let aux_ids: Option<Vec<usize>> = cfg
            .train
            .aux_loss
            .then(|| dataset.class_ids_in_split(Split::Train));
        let mut rng = derive_rng(cfg.train.seed, "init");
        let model = Model::init(&cfg.embedder, &cfg.train, aux_ids.as_deref(), &mut rng)?;
        Checkpoint::init(model, &cfg.train, &cfg.sampler, &cfg.transform)
    } else {
        let resumed = trainer::load_checkpoint(Path::new(&cfg.paths.resume))?;
        let expect =
            trainer::config_hash(&cfg.train, &resumed.model.cfg, &cfg.sampler, &cfg.transform);
        if expect != resumed.config_hash {
            return Err(usage("resume checkpoint was trained under a different configuration"));
        }
        resumed
    };

    let outcome = trainer::train(start, &dataset, &cfg.train, &cfg.sampler, &cfg.transform)?;
    if let Some(dir) = ckpt_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    trainer::save_checkpoint(&ckpt_path, &outcome.last)?;
    let best_path = tagged_path(&ckpt_path, "best");
    trainer::save_checkpoint(&best_path, &outcome.best)?;
    let log_path = if cfg.paths.log.is_empty() {
        PathBuf::from(format!("{}.log.csv", ckpt_path.display()))
    } else {
        PathBuf::from(&cfg.paths.log)
    };
    trainer::write_log_csv(&log_path, &outcome.log)?;

    println!(
        "trained {} episodes ({} head); wrote {} and {}",
        outcome.last.episode,
        method_name(cfg),
        ckpt_path.display(),
        best_path.display()
    );
    println!("log: {}", log_path.display());
    match outcome.last.best_val_acc {
        Some(acc) => println!("best validation accuracy: {:.2}%", acc * 100.0),
        None => println!("no validation pass ran"),
    }
    if let Some(detail) = &outcome.diverged {
        println!("warning: training diverged, checkpoint holds the last good state ({detail})");
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.sampler.validate().map_err(|e| usage(format!("sampler: {e}")))?;
    let data_dir = required_path(&cfg.paths.data, "paths.data")?;
    let report_path = required_path(&cfg.paths.report, "paths.report")?.to_path_buf();
    let ckpt = load_matching_checkpoint(cfg)?;
    let dataset = Dataset::load(data_dir)?;

    let entry = evaluator::evaluate(
        &ckpt.model,
        &cfg.train,
        &dataset,
        &cfg.sampler,
        &cfg.eval,
        method_name(cfg),
        &dataset_name(cfg),
    )?;
    for warning in &entry.warnings {
        eprintln!("warning: {warning}");
    }
    println!(
        "{} on {} [{:?}]: {:.2}% +/- {:.2} (n={})",
        entry.method, entry.dataset, cfg.eval.split, entry.mean, entry.ci95, entry.n
    );
    let report = evaluator::with_ranks(EvalReport { entries: vec![entry], ranks: vec![] })?;
    if let Some(dir) = report_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    std::fs::write(&report_path, evaluator::report_json(&report)?)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let csv_path = report_path.with_extension("csv");
    std::fs::write(&csv_path, evaluator::report_csv(&report))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("report: {} and {}", report_path.display(), csv_path.display());
    Ok(())
}

fn cmd_probe(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.probe.validate().map_err(|e| usage(format!("probe: {e}")))?;
    let data_dir = required_path(&cfg.paths.data, "paths.data")?;
    let report_path = required_path(&cfg.paths.report, "paths.report")?.to_path_buf();
    let ckpt = load_matching_checkpoint(cfg)?;
    let dataset = Dataset::load(data_dir)?;

    let stats = collapse::run_probe(&ckpt.model, &dataset, &cfg.probe)?;
    if let Some(dir) = report_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    std::fs::write(&report_path, collapse::histogram_csv(&stats))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "probed {} queries with k={}: {:.1}% had no correct-class neighbour, \
         {:.1}% had >=2 neighbours from one train class (chance train share {:.1}%)",
        stats.queries,
        stats.k,
        stats.frac_no_correct * 100.0,
        stats.frac_train_clump * 100.0,
        stats.chance_train_fraction * 100.0
    );
    println!("histograms: {}", report_path.display());
    Ok(())
}

fn cmd_viz(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.sampler.validate().map_err(|e| usage(format!("sampler: {e}")))?;
    if cfg.viz.positions.is_empty() {
        return Err(usage("viz.positions: at least one (row, col) pair is required"));
    }
    let data_dir = required_path(&cfg.paths.data, "paths.data")?;
    let out_dir = required_path(&cfg.paths.out_dir, "paths.out_dir")?.to_path_buf();
    let ckpt = load_matching_checkpoint(cfg)?;
    let grid = ckpt.model.cfg.grid_size();
    for &(row, col) in &cfg.viz.positions {
        if row >= grid || col >= grid {
            return Err(usage(format!(
                "viz.positions: ({row}, {col}) is outside the {grid}x{grid} query grid"
            )));
        }
    }
    let dataset = Dataset::load(data_dir)?;
    let mut rng = derive_rng(cfg.viz.seed, "viz");
    let episode = sample_episode(&dataset, cfg.eval.split, &cfg.sampler, &mut rng)?;
    if cfg.viz.query_index >= episode.query.len() {
        return Err(usage(format!(
            "viz.query_index: {} is out of range for an episode with {} queries",
            cfg.viz.query_index,
            episode.query.len()
        )));
    }
    let export = collapse::export_attention(
        &ckpt.model,
        &episode,
        cfg.viz.query_index,
        &cfg.viz.positions,
        &out_dir,
    )?;
    println!(
        "wrote {} attention maps for query {} ({} classes, {} support images) to {}",
        export.maps.len(),
        cfg.viz.query_index,
        episode.n_classes,
        episode.support.len(),
        out_dir.display()
    );
    println!("raw weights: {}", export.sidecar.display());
    Ok(())
}

fn run(matches: &ArgMatches) -> Result<(), CliError> {
    match matches.subcommand() {
        Some(("gen-data", sub)) => {
            let cfg = gather_config(sub, GEN_ALIASES)?;
            cmd_gen_data(&cfg, sub.get_flag("force"))
        }
        Some(("train", sub)) => cmd_train(&gather_config(sub, TRAIN_ALIASES)?),
        Some(("eval", sub)) => cmd_eval(&gather_config(sub, EVAL_ALIASES)?),
        Some(("probe", sub)) => cmd_probe(&gather_config(sub, &[])?),
        Some(("viz-attention", sub)) => cmd_viz(&gather_config(sub, &[])?),
        _ => unreachable!("subcommand is required"),
    }
}

fn main() -> ExitCode {
    let matches = match build_command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            // clap exits 2 for usage errors and 0 for --help/--version.
            e.exit();
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
