//! Subcommands of the `dualintent-sr` binary.
//!
//! Relative paths in a config file are resolved against the directory that
//! holds the config file.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dualintent::config::{ConfigError, RunConfig, SweepParam};
use dualintent::corpus::{read_raw_records, synthesize_dataset, write_raw_records, CorpusError, RawRecord, Splits, SyntheticWorld};
use dualintent::experiment::{self, check_gradients, split_days, Dataset, ExperimentError};
use dualintent::metrics::EvalReport;
use dualintent::model::{Checkpoint, CheckpointError, EpochRecord, Scorer, StepLog, TrainContext, TrainError, Trainer};
use thiserror::Error;

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALID_FILE: &str = "valid.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "run.conf";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const EPOCHS_FILE: &str = "epochs.tsv";
pub const EVAL_STEM: &str = "eval";
pub const EXPORT_FILE: &str = "embeddings.tsv";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Eval,
    Export,
    CheckGrads,
    Sweep,
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: PathBuf,
    pub force: bool,
    pub seed: Option<u64>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Corpus(c) => c.into(),
            ExperimentError::Train(TrainError::Config(m)) => CliError::Config(m),
            ExperimentError::Train(e @ TrainError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            ExperimentError::Train(TrainError::Tensor(e)) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        ExperimentError::Train(e).into()
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Loads the config, applies `--seed` and resolves relative paths.
pub fn load_config(inv: &Invocation) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&inv.config)?;
    if let Some(seed) = inv.seed {
        cfg.seed = seed;
    }
    let base = inv.config.parent().unwrap_or(Path::new(""));
    for dir in [&mut cfg.data_dir, &mut cfg.out_dir] {
        if dir.is_relative() {
            *dir = base.join(&*dir);
        }
    }
    Ok(cfg)
}

/// Runs one subcommand and returns a short human-readable summary.
pub fn run(inv: &Invocation) -> Result<String> {
    let cfg = load_config(inv)?;
    match inv.command {
        Command::Synth => synth(&cfg, inv.force),
        Command::Train => train(&cfg),
        Command::Eval => eval(&cfg),
        Command::Export => export(&cfg),
        Command::CheckGrads => grad_report(&cfg),
        Command::Sweep => sweep(&cfg),
    }
}

/// The config text stored inside checkpoints: everything but file locations.
pub fn config_echo(cfg: &RunConfig) -> String {
    cfg.to_text()
        .lines()
        .filter(|l| !l.starts_with("run.data_dir") && !l.starts_with("run.out_dir"))
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn synth(cfg: &RunConfig, force: bool) -> Result<String> {
    let dir = &cfg.data_dir;
    let targets = [TRAIN_FILE, VALID_FILE, TEST_FILE, MANIFEST_FILE, CONFIG_FILE];
    if !force {
        if let Some(existing) = targets.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(CliError::Data(format!(
                "{} already exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    let (raw, world) = synthesize_dataset(&cfg.world, cfg.seed)?;
    let splits = split_days(&raw).map_err(CliError::from)?;
    ensure_dir(dir)?;
    for (name, part) in [(TRAIN_FILE, &splits.train), (VALID_FILE, &splits.valid), (TEST_FILE, &splits.test)] {
        write_raw_records(&dir.join(name), part)?;
    }
    world.write_manifest(&dir.join(MANIFEST_FILE))?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    Ok(format!(
        "wrote {} train / {} valid / {} test records to {}",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        dir.display()
    ))
}

/// Reads the three split files. User and item counts come from the
/// manifest when present and from the largest ids otherwise.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = &cfg.data_dir;
    let mut splits = Splits::<RawRecord>::default();
    for (name, slot) in [(TRAIN_FILE, &mut splits.train), (VALID_FILE, &mut splits.valid), (TEST_FILE, &mut splits.test)] {
        let path = dir.join(name);
        if !path.exists() {
            return Err(CliError::Data(format!("missing data file {}", path.display())));
        }
        *slot = read_raw_records(&path)?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    let (n_users, n_items) = if manifest.exists() {
        let (world, _) = SyntheticWorld::read_manifest(&manifest)?;
        (world.users, world.items)
    } else {
        let all = || splits.train.iter().chain(&splits.valid).chain(&splits.test);
        (
            all().map(|r| r.user + 1).max().unwrap_or(0),
            all().map(|r| r.item + 1).max().unwrap_or(0),
        )
    };
    Ok(Dataset::from_splits(&splits, n_users, n_items)?)
}

fn write_eval(dir: &Path, report: &EvalReport) -> Result<()> {
    report.write(dir, EVAL_STEM).map_err(|e| CliError::Data(e.to_string()))
}

struct RunFiles {
    log: BufWriter<fs::File>,
    log_path: PathBuf,
    epochs: String,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<Self> {
        let log_path = dir.join(LOG_FILE);
        let f = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
        Ok(Self {
            log: BufWriter::new(f),
            log_path,
            epochs: String::from("epoch\tmean_loss\tvalid_ndcg@5\n"),
        })
    }
}

/// Trains into `dir` and evaluates on the test split.
fn train_into(cfg: &RunConfig, data: &Dataset, dir: &Path) -> Result<EvalReport> {
    ensure_dir(dir)?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    let ctx = data.context().map_err(CliError::from)?;
    let mut files = RunFiles::create(dir)?;
    let mut io_error = None;
    let outcome = {
        let log = &mut files.log;
        let epochs = &mut files.epochs;
        let mut on_step = |s: &StepLog| {
            if let Err(e) = writeln!(log, "{s}") {
                io_error.get_or_insert(e);
            }
        };
        let mut on_epoch = |e: &EpochRecord| {
            let _ = writeln!(epochs, "{}\t{:.9e}\t{:.9e}", e.epoch, e.mean_loss, e.valid_ndcg);
        };
        experiment::run(data, &ctx, &cfg.dims, &cfg.train_config(), cfg.eval_seed, &mut on_step, &mut on_epoch)
    };
    files.log.flush().map_err(|e| io_err(&files.log_path, e))?;
    if let Some(e) = io_error {
        return Err(io_err(&files.log_path, e));
    }
    write_file(&dir.join(EPOCHS_FILE), &files.epochs)?;
    let outcome = match outcome {
        Ok(o) => o,
        Err(ExperimentError::Train(TrainError::NonFinite {
            what,
            epoch,
            step,
            mut last_good,
        })) => {
            last_good.config = config_echo(cfg);
            let path = dir.join(LAST_GOOD_FILE);
            last_good.save(&path)?;
            return Err(CliError::Numeric(format!(
                "non-finite {what} at epoch {epoch} step {step}; last good state saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    outcome.trainer.checkpoint(&config_echo(cfg)).save(&dir.join(CHECKPOINT_FILE))?;
    write_eval(dir, &outcome.test)?;
    Ok(outcome.test)
}

pub fn train(cfg: &RunConfig) -> Result<String> {
    let data = load_dataset(cfg)?;
    let report = train_into(cfg, &data, &cfg.out_dir)?;
    Ok(format!("{}\ncheckpoint: {}", report.to_text(), cfg.out_dir.join(CHECKPOINT_FILE).display()))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.out_dir.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint not found: expected {}", path.display())));
    }
    Ok(Checkpoint::load(&path)?)
}

/// Dataset and training context matching a stored checkpoint.
fn restore(cfg: &RunConfig) -> Result<(Dataset, Trainer, TrainContext)> {
    let ckpt = load_checkpoint(cfg)?;
    let data = load_dataset(cfg)?;
    let layout = &ckpt.model.layout;
    if (layout.n_users, layout.n_items, layout.vocab_size) != (data.n_users, data.n_items, data.vocab.len()) {
        return Err(CliError::Data(format!(
            "checkpoint expects {} users, {} items, {} terms; data has {}, {}, {}",
            layout.n_users,
            layout.n_items,
            layout.vocab_size,
            data.n_users,
            data.n_items,
            data.vocab.len()
        )));
    }
    let ctx = data.context().map_err(CliError::from)?;
    let mut train_cfg = cfg.train_config();
    train_cfg.ablation = ckpt.model.ablation;
    let trainer = Trainer::from_checkpoint(ckpt, train_cfg, &ctx)?;
    Ok((data, trainer, ctx))
}

pub fn eval(cfg: &RunConfig) -> Result<String> {
    let (data, trainer, ctx) = restore(cfg)?;
    let report = trainer.evaluate(&ctx, &data.test_trials(cfg.eval_seed))?;
    write_file(&cfg.out_dir.join(format!("{EVAL_STEM}.conf")), &cfg.to_text())?;
    write_eval(&cfg.out_dir, &report)?;
    Ok(report.to_text())
}

fn push_row<'a>(out: &mut String, kind: &str, id: usize, row: impl IntoIterator<Item = &'a f64>) {
    let _ = write!(out, "{kind}\t{id}");
    for &x in row {
        let _ = write!(out, "\t{:.8e}", x as f32);
    }
    out.push('\n');
}

/// Rows `kind \t id \t d floats` for users, items and the translated
/// intent `e_u* + intent` of every training record.
pub fn export_rows(scorer: &Scorer<'_>, ctx: &TrainContext) -> String {
    let mut out = String::new();
    for (u, r) in scorer.users_star.rows().into_iter().enumerate() {
        push_row(&mut out, "user", u, r);
    }
    for (i, r) in scorer.items_star.rows().into_iter().enumerate() {
        push_row(&mut out, "item", i, r);
    }
    for (k, rec) in ctx.train.iter().enumerate() {
        let t = &scorer.users_star.row(rec.user) + &scorer.edge_intents.row(k);
        push_row(&mut out, "intent", k, &t);
    }
    out
}

pub fn export(cfg: &RunConfig) -> Result<String> {
    let (_, trainer, ctx) = restore(cfg)?;
    let scorer = Scorer::new(&trainer.model, &ctx).map_err(|e| CliError::Numeric(e.to_string()))?;
    let path = cfg.out_dir.join(EXPORT_FILE);
    write_file(&path, &export_rows(&scorer, &ctx))?;
    write_file(&cfg.out_dir.join("export.conf"), &cfg.to_text())?;
    Ok(format!("wrote {}", path.display()))
}

pub fn grad_report(cfg: &RunConfig) -> Result<String> {
    let gc = &cfg.grad_check;
    let run = check_gradients(gc, cfg.seed)?;
    let mut text = format!(
        "seed={} (requested {}) relu_margin={:.3e} eps={:.0e}\n",
        run.seed, run.requested_seed, run.relu_margin, gc.eps
    );
    for (name, r) in &run.reports {
        let _ = writeln!(text, "{name}\t{r}");
    }
    let worst = run.max_rel_error();
    let pass = worst < gc.tolerance;
    let _ = writeln!(
        text,
        "max_rel_error={worst:.3e} tolerance={:.0e} {}",
        gc.tolerance,
        if pass { "PASS" } else { "FAIL" }
    );
    ensure_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(GRADCHECK_FILE), &text)?;
    write_file(&cfg.out_dir.join(CONFIG_FILE), &cfg.to_text())?;
    if pass {
        Ok(text)
    } else {
        Err(CliError::Numeric(format!("gradient check failed\n{text}")))
    }
}

/// Directory name of one sweep point, e.g. `lambda1=0.5`.
pub fn sweep_point_dir(cfg: &RunConfig, value: f64) -> PathBuf {
    cfg.out_dir.join("sweep").join(format!("{}={value}", cfg.sweep_param.key()))
}

pub fn sweep(cfg: &RunConfig) -> Result<String> {
    let data = load_dataset(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(CONFIG_FILE), &cfg.to_text())?;
    let key = cfg.sweep_param.key();
    let mut table = format!(
        "{key}\tsearch_hit@5\tsearch_ndcg@5\tsearch_mrr\tsearch_auc\trec_hit@5\trec_ndcg@5\trec_mrr\trec_auc\n"
    );
    for &value in &cfg.sweep_values {
        let mut point = cfg.clone();
        match cfg.sweep_param {
            SweepParam::Lambda1 => point.train.lambda1 = value,
            SweepParam::Lambda2 => point.train.lambda2 = value,
        }
        let dir = sweep_point_dir(cfg, value);
        point.out_dir = dir.clone();
        log::info!("sweep {key}={value}");
        let report = train_into(&point, &data, &dir)?;
        let _ = write!(table, "{value}");
        for m in [report.search, report.rec] {
            match m {
                Some(m) => {
                    let _ = write!(table, "\t{:.6}\t{:.6}\t{:.6}\t{:.6}", m.hit, m.ndcg, m.mrr, m.auc);
                }
                None => table.push_str("\tNA\tNA\tNA\tNA"),
            }
        }
        table.push('\n');
    }
    let path = cfg.out_dir.join(format!("sweep_{key}.tsv"));
    write_file(&path, &table)?;
    Ok(table)
}
