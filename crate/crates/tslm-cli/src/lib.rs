//! Command implementations behind the `tslm` binary.
//!
//! Fixed artifact names under each `--out` directory: `dataset.jsonl`,
//! `manifest.json`, `checkpoint.tok1`, `losses.csv`, `eval.json`,
//! `report.txt`. Exit codes: 0 success, 2 usage/config error, 3 training
//! divergence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tslm::config::RunConfig;
use tslm::dataset::{generate_toy_suite, load_dataset, write_dataset, ToySizes};
use tslm::metrics::{build_rank_tables, render_report, score_run, EvalReport};
use tslm::model::{evaluate_dataset, Model};
use tslm::numerics::load_checkpoint;
use tslm::training::{Adam, LossRow, TrainError, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, unreadable config, missing files, I/O failures.
    Usage(String),
    /// Training hit a non-finite loss; carries the last completed step.
    Diverged { last_good_step: usize, detail: String },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Diverged { last_good_step, detail } => {
                write!(f, "training diverged after step {last_good_step}: {detail}")
            }
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Diverged { .. } => EXIT_DIVERGED,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Usage(format!("{context}: {e}"))
}

/// Parses `--sizes` entries like `forecasting=50,classification=10`.
pub fn parse_sizes(spec: &str) -> Result<ToySizes> {
    let mut sizes = ToySizes::default();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--sizes entry `{part}` is not key=value")))?;
        let count: usize = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("--sizes count `{value}` is not a number")))?;
        if count == 0 {
            return Err(CliError::Usage(format!("--sizes `{key}` must be at least 1")));
        }
        if !sizes.set(key.trim(), count) {
            return Err(CliError::Usage(format!("unknown toy family `{key}`")));
        }
    }
    Ok(sizes)
}

/// `gen-toy`: writes the synthetic suite plus its manifest.
pub fn cmd_gen_toy(seed: u64, out: &Path, sizes: &ToySizes) -> Result<()> {
    std::fs::create_dir_all(out).map_err(usage("creating output directory"))?;
    let dataset = generate_toy_suite(seed, sizes);
    let jsonl = out.join("dataset.jsonl");
    write_dataset(&dataset, &jsonl).map_err(usage("writing dataset"))?;
    let manifest = serde_json::to_string_pretty(dataset.manifest()).expect("manifest serializes");
    std::fs::write(out.join("manifest.json"), manifest + "\n").map_err(usage("writing manifest"))?;
    println!("wrote {} instances across {} tasks to {}", dataset.len(), dataset.manifest().len(), jsonl.display());
    for (task_id, entry) in dataset.manifest() {
        println!("  {task_id}: {} ({:?})", entry.count, entry.task_type);
    }
    Ok(())
}

pub fn read_config(path: &Path) -> Result<(RunConfig, Vec<u8>)> {
    let raw = std::fs::read(path).map_err(usage(&format!("reading config {}", path.display())))?;
    let text = std::str::from_utf8(&raw).map_err(usage("config is not UTF-8"))?;
    let cfg: RunConfig = toml::from_str(text).map_err(usage("parsing config"))?;
    Ok((cfg, raw))
}

fn build_model(cfg: &RunConfig) -> Result<Model> {
    let mut model = Model::init(cfg.model_config(), cfg.seed);
    if cfg.train.dora {
        model
            .apply_dora(cfg.train.dora_rank, cfg.train.dora_alpha, cfg.seed)
            .map_err(usage("applying adapters"))?;
    }
    Ok(model)
}

fn write_losses_csv(path: &Path, log: &[LossRow]) -> Result<()> {
    let mut csv = String::from("step,lr,loss_u,loss_g\n");
    for row in log {
        writeln!(csv, "{},{},{},{}", row.step, row.lr, row.loss_u, row.loss_g).expect("string write");
    }
    std::fs::write(path, csv).map_err(usage("writing loss log"))?;
    Ok(())
}

/// `train`: runs the configured schedule over `data.dataset`, writing
/// `checkpoint.tok1` (with the raw config embedded) and `losses.csv`.
pub fn cmd_train(config_path: &Path, out: &Path) -> Result<()> {
    let (cfg, raw) = read_config(config_path)?;
    if cfg.data.dataset.is_empty() {
        return Err(CliError::Usage("config field `data.dataset` is empty".into()));
    }
    let data_path = PathBuf::from(&cfg.data.dataset);
    if !data_path.exists() {
        return Err(CliError::Usage(format!(
            "config field `data.dataset` points to missing file {}",
            data_path.display()
        )));
    }
    std::fs::create_dir_all(out).map_err(usage("creating output directory"))?;
    let dataset = load_dataset(&data_path).map_err(usage("loading dataset"))?;
    let mut model = build_model(&cfg)?;

    let mut trainer =
        Trainer::new(&mut model, &dataset, cfg.train_config()).map_err(usage("initialising trainer"))?;
    let total = trainer.total_steps();
    let mut log: Vec<LossRow> = Vec::with_capacity(total);
    while trainer.current_step() < total {
        match trainer.step_once() {
            Ok(row) => log.push(row),
            Err(TrainError::NonFiniteLoss { step, loss_u, loss_g }) => {
                write_losses_csv(&out.join("losses.csv"), &log)?;
                return Err(CliError::Diverged {
                    last_good_step: step.saturating_sub(1),
                    detail: format!("loss_u {loss_u}, loss_g {loss_g}"),
                });
            }
            Err(e) => return Err(CliError::Usage(format!("training failed: {e}"))),
        }
    }
    let opt = trainer.opt.clone();
    write_losses_csv(&out.join("losses.csv"), &log)?;
    save_checkpoint_with_state(&model, &opt, total, raw, &out.join("checkpoint.tok1"))?;
    println!("trained {total} steps; checkpoint and loss log written to {}", out.display());
    Ok(())
}

/// Saves a checkpoint embedding optimizer state, the step counter, and the
/// verbatim config bytes.
pub fn save_checkpoint_with_state(
    model: &Model,
    opt: &Adam,
    step: usize,
    config_echo: Vec<u8>,
    path: &Path,
) -> Result<()> {
    let mut extras = opt.to_extras();
    extras.insert("train.step".into(), tslm::numerics::Tensor::scalar(step as f64));
    model
        .save_checkpoint(path, extras, Some(config_echo))
        .map_err(usage("writing checkpoint"))?;
    Ok(())
}

/// `eval`: runs the checkpointed model over a dataset; per-instance
/// failures become records, never aborts. Writes `eval.json`,
/// `report.txt`, and `manifest.json`.
pub fn cmd_eval(config_path: &Path, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let (cfg, _) = read_config(config_path)?;
    let ckpt = load_checkpoint(checkpoint).map_err(usage("loading checkpoint"))?;
    let mut model = build_model(&cfg)?;
    model.load_params(&ckpt).map_err(usage("restoring parameters"))?;
    let dataset = load_dataset(data).map_err(usage("loading dataset"))?;
    std::fs::create_dir_all(out).map_err(usage("creating output directory"))?;

    let records = evaluate_dataset(&model, &dataset);
    let mut per_model = BTreeMap::new();
    per_model.insert(cfg.eval.model_name.clone(), records);
    let report = score_run(&dataset, &per_model).map_err(usage("scoring run"))?;

    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out.join("eval.json"), json + "\n").map_err(usage("writing eval.json"))?;
    std::fs::write(out.join("report.txt"), render_report(&report)).map_err(usage("writing report"))?;
    let manifest = serde_json::to_string_pretty(dataset.manifest()).expect("manifest serializes");
    std::fs::write(out.join("manifest.json"), manifest + "\n").map_err(usage("writing manifest"))?;
    println!("evaluated {} instances; results in {}", dataset.len(), out.display());
    Ok(())
}

/// `report`: merges one `eval.json` per run directory into a cross-model
/// table with fresh AvgRk columns.
pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(CliError::Usage("at least one run directory is required".into()));
    }
    let mut merged: BTreeMap<String, Vec<tslm::metrics::TaskScore>> = BTreeMap::new();
    for run in runs {
        let path = run.join("eval.json");
        let raw = std::fs::read_to_string(&path)
            .map_err(usage(&format!("reading {}", path.display())))?;
        let report: EvalReport = serde_json::from_str(&raw)
            .map_err(usage(&format!("parsing {}", path.display())))?;
        for (model, scores) in report.task_scores {
            // Disambiguate duplicate model names by run directory.
            let name = if merged.contains_key(&model) {
                format!("{model} ({})", run.display())
            } else {
                model
            };
            merged.insert(name, scores);
        }
    }
    let (understanding_ranks, generation_ranks) =
        build_rank_tables(&merged).map_err(usage("ranking models"))?;
    let report = EvalReport {
        models: merged.keys().cloned().collect(),
        task_scores: merged,
        understanding_ranks,
        generation_ranks,
    };
    std::fs::create_dir_all(out).map_err(usage("creating output directory"))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out.join("report.json"), json + "\n").map_err(usage("writing report.json"))?;
    let text = render_report(&report);
    std::fs::write(out.join("report.txt"), &text).map_err(usage("writing report.txt"))?;
    print!("{text}");
    Ok(())
}
