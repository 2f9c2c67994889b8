//! `dgl` command-line runner and its CSV artifacts.
//!
//! Every command takes `--config <path>`, `--seed <u64>` and `--out <dir>`;
//! flags override the file. Output CSVs have fixed headers (schema version
//! [`SCHEMA_VERSION`]) and are byte-identical across re-runs with the same
//! config and seed. Exit codes: 0 success, 1 config error, 2 data error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::analysis::{self, ConcatHead};
use crate::autodiff::Tensor;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::MultimodalModel;
use crate::rng::{self, Stream};
use crate::synthdata::{self, Split, SyntheticDataset};
use crate::train::{self, EpochMetrics, Evaluation, Mode, StepReport, TrainOutput};

pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------- CSV schemas

pub fn metrics_header(m: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "split".into(), "multi_acc".into()];
    h.extend((1..=m).map(|k| format!("uni_acc_{k}")));
    h.extend(["loss_d".to_string(), "loss_uni_sum".into()]);
    h
}

pub const GRADNORMS_HEADER: [&str; 3] = ["step", "group", "norm"];
pub const SUPPRESSION_HEADER: [&str; 3] = ["step", "sample", "geo_mean_s"];
pub const GRADCOMPARE_HEADER: [&str; 4] = ["step", "norm_g_uni", "norm_g_multi", "margin"];

fn summary_header(first: &str, m: usize) -> Vec<String> {
    let mut h = vec![first.to_string(), "multi_acc".into()];
    h.extend((1..=m).map(|k| format!("uni_acc_{k}")));
    h
}

/// One parsed row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub multi_acc: f64,
    pub uni_acc: Vec<f64>,
    pub loss_d: f64,
    pub loss_uni_sum: f64,
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn write_csv<I, R>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>())
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn write_metrics(path: &Path, epochs: &[EpochMetrics], m: usize) -> Result<()> {
    let rows = epochs.iter().map(|e| {
        let mut r = vec![e.epoch.to_string(), e.split.as_str().to_string(), fmt(e.eval.multi_acc)];
        r.extend(e.eval.uni_acc.iter().map(|&a| fmt(a)));
        r.extend([fmt(e.eval.loss_multi), fmt(e.eval.loss_uni_sum)]);
        r
    });
    write_csv(path, &metrics_header(m), rows)
}

fn open_checked(path: &Path, expected: &[String]) -> Result<csv::Reader<std::fs::File>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != expected {
        return Err(Error::Schema(format!(
            "{}: header {:?} does not match schema v{SCHEMA_VERSION} {:?}",
            path.display(),
            header,
            expected
        )));
    }
    Ok(r)
}

/// Reads `metrics.csv` for an `m`-modality run; any header deviation is an error.
pub fn read_metrics(path: &Path, m: usize) -> Result<Vec<MetricsRow>> {
    let mut r = open_checked(path, &metrics_header(m))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: msg.to_string(),
        };
        let num = |j: usize| -> Result<f64> {
            rec.get(j).and_then(|v| v.parse().ok()).ok_or_else(|| bad("invalid number"))
        };
        let split = match rec.get(1) {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            _ => return Err(bad("invalid split")),
        };
        let row = MetricsRow {
            epoch: rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("invalid epoch"))?,
            split,
            multi_acc: num(2)?,
            uni_acc: (0..m).map(|k| num(3 + k)).collect::<Result<_>>()?,
            loss_d: num(3 + m)?,
            loss_uni_sum: num(4 + m)?,
        };
        let accs = std::iter::once(row.multi_acc).chain(row.uni_acc.iter().copied());
        if accs.into_iter().any(|a| !(0.0..=1.0).contains(&a)) {
            return Err(bad("accuracy outside [0, 1]"));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_gradnorms(path: &Path, steps: &[StepReport], group_names: &[String]) -> Result<()> {
    let header: Vec<String> = GRADNORMS_HEADER.iter().map(|s| s.to_string()).collect();
    let rows = steps.iter().flat_map(|s| {
        s.grad_norms
            .iter()
            .zip(group_names)
            .map(move |(n, g)| vec![s.step.to_string(), g.clone(), fmt(*n)])
    });
    write_csv(path, &header, rows)
}

/// Reads `gradnorms.csv` as `(step, group, norm)`.
pub fn read_gradnorms(path: &Path) -> Result<Vec<(usize, String, f64)>> {
    let header: Vec<String> = GRADNORMS_HEADER.iter().map(|s| s.to_string()).collect();
    let mut r = open_checked(path, &header)?;
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let parsed = (|| {
                Some((
                    rec.get(0)?.parse().ok()?,
                    rec.get(1)?.to_string(),
                    rec.get(2)?.parse().ok()?,
                ))
            })();
            parsed.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: "invalid gradnorms row".into(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------- shared setup

fn load_or_generate(cfg: &RunConfig) -> Result<(SyntheticDataset, Option<SyntheticDataset>)> {
    match &cfg.data.path {
        Some(dir) => {
            let train = SyntheticDataset::load(&dir.join("train.dgl"))?;
            let test_path = dir.join("test.dgl");
            let test = if test_path.exists() {
                Some(SyntheticDataset::load(&test_path)?)
            } else {
                None
            };
            Ok((train, test))
        }
        None => {
            let (train, test) = synthdata::generate(&cfg.data.gen_spec(cfg.seed))?;
            Ok((train, (!test.is_empty()).then_some(test)))
        }
    }
}

fn init_model(cfg: &RunConfig, data: &SyntheticDataset) -> Result<MultimodalModel> {
    let dims: Vec<usize> = data.features.iter().map(Tensor::cols).collect();
    let spec = cfg.model.model_spec(&dims, data.num_classes())?;
    MultimodalModel::new(spec, &mut rng::stream(cfg.seed, Stream::Init))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    schema_version: u32,
    command: &'a str,
    mode: String,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    first_batch_hash: Option<&'a str>,
    steps: usize,
    epochs_completed: usize,
    config: &'a RunConfig,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Result of one training run as kept by the coordinator.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub mode: Mode,
    pub alpha: f64,
    pub output: TrainOutput,
    pub model: MultimodalModel,
    pub error: Option<String>,
    /// Numbered checkpoints taken during training: `(epoch, step, model)`.
    pub snapshots: Vec<(usize, usize, MultimodalModel)>,
}

impl RunResult {
    /// Final evaluation on the test split, or on train when there is no test split.
    pub fn final_eval(&self) -> Option<&Evaluation> {
        self.output
            .last(Split::Test)
            .or_else(|| self.output.last(Split::Train))
    }
}

/// Trains one model without touching the filesystem. Errors are captured in
/// the result so partial trajectories survive.
pub fn execute_run(
    cfg: &RunConfig,
    train_set: &SyntheticDataset,
    test_set: Option<&SyntheticDataset>,
) -> Result<RunResult> {
    let mut model = init_model(cfg, train_set)?;
    cfg.train.validate(model.num_modalities())?;
    let steps_per_epoch = train_set.len().div_ceil(cfg.train.batch_size);
    let mut output = TrainOutput::default();
    let mut snapshots = Vec::new();
    let every = cfg.checkpoint_every;
    let res = train::train_into(&mut model, train_set, test_set, &cfg.train, &mut output, |epoch, m| {
        if every > 0 && epoch % every == 0 {
            snapshots.push((epoch, epoch * steps_per_epoch, m.clone()));
        }
        Ok(())
    });
    let error = match res {
        Ok(()) => None,
        Err(Error::Numerical(msg)) => Some(msg),
        Err(e) => return Err(e),
    };
    Ok(RunResult {
        mode: cfg.train.mode,
        alpha: cfg.train.alpha,
        output,
        model,
        error,
        snapshots,
    })
}

/// Writes a run's artifacts into `dir`: metrics.csv, gradnorms.csv,
/// final.ckpt, checkpoints/ and run.json.
pub fn write_run(dir: &Path, command: &str, cfg: &RunConfig, run: &RunResult) -> Result<()> {
    create_dir(dir)?;
    let m = run.model.num_modalities();
    write_metrics(&dir.join("metrics.csv"), &run.output.epochs, m)?;
    let names: Vec<String> = run.model.groups().iter().map(|g| g.name.clone()).collect();
    write_gradnorms(&dir.join("gradnorms.csv"), &run.output.steps, &names)?;
    let epochs_done = run.output.epochs.iter().map(|e| e.epoch).max().unwrap_or(0);
    checkpoint::save(&dir.join("final.ckpt"), &run.model, epochs_done, run.output.steps.len())?;
    if !run.snapshots.is_empty() {
        let ck = dir.join("checkpoints");
        create_dir(&ck)?;
        for (epoch, step, model) in &run.snapshots {
            checkpoint::save(&ck.join(format!("epoch-{epoch:04}.ckpt")), model, *epoch, *step)?;
        }
    }
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        command,
        mode: run.mode.to_string(),
        status: if run.error.is_some() { "failed" } else { "ok" },
        error: run.error.clone(),
        first_batch_hash: run.output.first_batch_hash.as_deref(),
        steps: run.output.steps.len(),
        epochs_completed: epochs_done,
        config: cfg,
    };
    write_json(&dir.join("run.json"), &manifest)
}

fn fail_if_diverged(run: &RunResult) -> Result<()> {
    match &run.error {
        Some(e) => Err(Error::Numerical(format!("{} run: {e} (partial artifacts written)", run.mode))),
        None => Ok(()),
    }
}

/// Runs member configs on up to `threads` worker threads, returning results in input order.
fn run_members(
    cfgs: &[RunConfig],
    train_set: &SyntheticDataset,
    test_set: Option<&SyntheticDataset>,
    threads: usize,
) -> Result<Vec<RunResult>> {
    let threads = threads.max(1);
    let mut results = Vec::with_capacity(cfgs.len());
    for chunk in cfgs.chunks(threads) {
        if threads == 1 {
            results.push(execute_run(&chunk[0], train_set, test_set)?);
            continue;
        }
        let chunk_results: Vec<Result<RunResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|c| s.spawn(move || execute_run(c, train_set, test_set)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });
        for r in chunk_results {
            results.push(r?);
        }
    }
    Ok(results)
}

// ---------------------------------------------------------------- commands

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let spec = cfg.data.gen_spec(cfg.seed);
    let (train, test) = synthdata::generate(&spec)?;
    train.save(&out.join("train.dgl"))?;
    test.save(&out.join("test.dgl"))?;
    write_json(&out.join("genspec.json"), &spec)?;
    info!("wrote {} train / {} test samples to {}", train.len(), test.len(), out.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<RunResult> {
    let (train_set, test_set) = load_or_generate(cfg)?;
    let run = execute_run(cfg, &train_set, test_set.as_ref())?;
    write_run(out, "train", cfg, &run)?;
    fail_if_diverged(&run)?;
    if let Some(e) = run.final_eval() {
        info!("{}: final multi_acc {:.4} uni_acc {:?}", run.mode, e.multi_acc, e.uni_acc);
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    /// Mode name for ablations, alpha for sweeps.
    pub key: String,
    pub multi_acc: f64,
    pub uni_acc: Vec<f64>,
    pub first_batch_hash: String,
}

fn summarize(key: String, run: &RunResult) -> Result<SummaryRow> {
    let e = run
        .final_eval()
        .ok_or_else(|| Error::config("run recorded no epochs"))?;
    Ok(SummaryRow {
        key,
        multi_acc: e.multi_acc,
        uni_acc: e.uni_acc.clone(),
        first_batch_hash: run.output.first_batch_hash.clone().unwrap_or_default(),
    })
}

fn write_summary(path: &Path, first: &str, rows: &[SummaryRow], with_hash: bool) -> Result<()> {
    let m = rows.first().map_or(0, |r| r.uni_acc.len());
    let mut header = summary_header(first, m);
    if with_hash {
        header.push("first_batch_hash".into());
    }
    let body = rows.iter().map(|r| {
        let mut v = vec![r.key.clone(), fmt(r.multi_acc)];
        v.extend(r.uni_acc.iter().map(|&a| fmt(a)));
        if with_hash {
            v.push(r.first_batch_hash.clone());
        }
        v
    });
    write_csv(path, &header, body)
}

pub const ABLATION_MODES: [Mode; 4] = [Mode::Vanilla, Mode::MtOnly, Mode::UtOnly, Mode::Dgl];

/// Trains vanilla, mt_only, ut_only and dgl on identical data, init and shuffling.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<SummaryRow>> {
    let (train_set, test_set) = load_or_generate(cfg)?;
    let cfgs: Vec<RunConfig> = ABLATION_MODES
        .iter()
        .map(|&mode| {
            let mut c = cfg.clone();
            c.train.mode = mode;
            c
        })
        .collect();
    let runs = run_members(&cfgs, &train_set, test_set.as_ref(), cfg.sweep.threads)?;
    create_dir(out)?;
    let mut rows = Vec::with_capacity(runs.len());
    for (c, run) in cfgs.iter().zip(&runs) {
        write_run(&out.join(run.mode.to_string()), "ablate", c, run)?;
        rows.push(summarize(run.mode.to_string(), run)?);
    }
    write_summary(&out.join("ablation.csv"), "mode", &rows, true)?;
    runs.iter().try_for_each(fail_if_diverged)?;
    Ok(rows)
}

/// One dgl run per alpha.
pub fn cmd_sweep_alpha(cfg: &RunConfig, alphas: &[f64], out: &Path) -> Result<Vec<SummaryRow>> {
    if alphas.is_empty() {
        return Err(Error::config("alpha sweep needs at least one alpha"));
    }
    let (train_set, test_set) = load_or_generate(cfg)?;
    let cfgs: Vec<RunConfig> = alphas
        .iter()
        .map(|&a| {
            let mut c = cfg.clone();
            c.train.mode = Mode::Dgl;
            c.train.alpha = a;
            c
        })
        .collect();
    let runs = run_members(&cfgs, &train_set, test_set.as_ref(), cfg.sweep.threads)?;
    create_dir(out)?;
    let mut rows = Vec::with_capacity(runs.len());
    for (c, run) in cfgs.iter().zip(&runs) {
        let key = fmt(run.alpha);
        write_run(&out.join(format!("alpha-{key}")), "sweep-alpha", c, run)?;
        rows.push(summarize(key, run)?);
    }
    write_summary(&out.join("sweep.csv"), "alpha", &rows, false)?;
    runs.iter().try_for_each(fail_if_diverged)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeSummary {
    pub checkpoints: usize,
    /// Mean over samples of the off-target geometric-mean factor, per checkpoint.
    pub mean_suppression: Vec<f64>,
    pub inequality: Vec<analysis::InequalityVerdict>,
}

fn default_checkpoints(out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join("checkpoints");
    let mut found: Vec<PathBuf> = match std::fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect(),
        Err(_) => Vec::new(),
    };
    found.sort();
    if found.is_empty() && out.join("final.ckpt").exists() {
        found.push(out.join("final.ckpt"));
    }
    if found.is_empty() {
        return Err(Error::config(format!("no checkpoints found under {}", out.display())));
    }
    Ok(found)
}

/// Suppression factors and closed-form gradient comparisons for each checkpoint.
pub fn cmd_analyze(cfg: &RunConfig, checkpoints: &[PathBuf], out: &Path) -> Result<AnalyzeSummary> {
    let paths = if checkpoints.is_empty() {
        default_checkpoints(out)?
    } else {
        checkpoints.to_vec()
    };
    let (train_set, test_set) = load_or_generate(cfg)?;
    let data = match cfg.analyze.split {
        Split::Train => &train_set,
        Split::Test => test_set
            .as_ref()
            .ok_or_else(|| Error::config("no test split to analyze"))?,
    };
    let k = cfg
        .analyze
        .modality
        .checked_sub(1)
        .ok_or_else(|| Error::config("analyze.modality is one-based"))?;

    let mut supp_rows = Vec::new();
    let mut cmp_rows = Vec::new();
    let mut summary = AnalyzeSummary {
        checkpoints: paths.len(),
        mean_suppression: Vec::new(),
        inequality: Vec::new(),
    };
    for path in &paths {
        let ck = checkpoint::load(path)?;
        let model = &ck.model;
        if k >= model.num_modalities() {
            return Err(Error::config(format!("checkpoint has no modality {}", k + 1)));
        }
        let expected: Vec<usize> = model.spec().encoders.iter().map(|e| e.input_dim).collect();
        let actual: Vec<usize> = data.features.iter().map(Tensor::cols).collect();
        if expected != actual || model.num_classes() != data.num_classes() {
            return Err(Error::Schema(format!(
                "{} expects inputs {expected:?} / {} classes, data has {actual:?} / {}",
                path.display(),
                model.num_classes(),
                data.num_classes()
            )));
        }
        let head = ConcatHead::from_model(model)?;
        let mut reps = model.representations(&data.features)?;
        if cfg.analyze.zero_others {
            for (j, r) in reps.iter_mut().enumerate() {
                if j != k {
                    *r = Tensor::zeros(r.shape().to_vec());
                }
            }
        }
        let (records, comparisons) = analysis::analyze_samples(&head, &reps, &data.labels, k, ck.step)?;
        let mut total = 0.0;
        for r in &records {
            let g = r.geo_mean_off_target();
            total += g;
            supp_rows.push(vec![ck.step.to_string(), r.sample.to_string(), fmt(g)]);
        }
        summary.mean_suppression.push(total / records.len().max(1) as f64);
        for c in &comparisons {
            cmp_rows.push(vec![
                ck.step.to_string(),
                fmt(c.norm_uni()),
                fmt(c.norm_multi()),
                fmt(c.margin()),
            ]);
        }
        summary
            .inequality
            .push(analysis::inequality_verdict(&comparisons, 0.0));
    }
    create_dir(out)?;
    let header = |h: &[&str]| h.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    write_csv(&out.join("suppression.csv"), &header(&SUPPRESSION_HEADER), supp_rows)?;
    write_csv(&out.join("gradcompare.csv"), &header(&GRADCOMPARE_HEADER), cmp_rows)?;
    Ok(summary)
}

// ---------------------------------------------------------------- argument parsing

#[derive(Debug, Parser)]
#[command(name = "dgl", version, about = "Disentangled gradient learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training mode: vanilla, dgl, mt_only, ut_only or unimodal_<k>.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated alphas (overrides `sweep.alphas`).
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to analyze; repeat for a trajectory.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/test split.
    GenData(Common),
    /// Train one model.
    Train(TrainArgs),
    /// Compare vanilla, mt_only, ut_only and dgl.
    Ablate(AblateArgs),
    /// Train dgl for several alphas.
    SweepAlpha(SweepArgs),
    /// Suppression factors and gradient comparisons over checkpoints.
    Analyze(AnalyzeArgs),
}

impl Common {
    fn resolve(&self, command: &str) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(command));
        cfg.out = Some(out.clone());
        Ok((cfg, out))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, out) = c.resolve("gen-data")?;
            cmd_gen_data(&cfg, &out)
        }
        Command::Train(a) => {
            let (mut cfg, out) = a.common.resolve("train")?;
            if let Some(m) = a.mode {
                cfg.train.mode = m;
            }
            if let Some(al) = a.alpha {
                cfg.train.alpha = al;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            cmd_train(&cfg, &out).map(|_| ())
        }
        Command::Ablate(a) => {
            let (mut cfg, out) = a.common.resolve("ablate")?;
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            for r in cmd_ablate(&cfg, &out)? {
                println!("{:<8} multi_acc={:.4} uni_acc={:?}", r.key, r.multi_acc, r.uni_acc);
            }
            Ok(())
        }
        Command::SweepAlpha(a) => {
            let (mut cfg, out) = a.common.resolve("sweep-alpha")?;
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            let alphas = a.alphas.unwrap_or_else(|| cfg.sweep.alphas.clone());
            for r in cmd_sweep_alpha(&cfg, &alphas, &out)? {
                println!("alpha={:<6} multi_acc={:.4} uni_acc={:?}", r.key, r.multi_acc, r.uni_acc);
            }
            Ok(())
        }
        Command::Analyze(a) => {
            let (cfg, out) = a.common.resolve("analyze")?;
            let ckpts = if a.checkpoints.is_empty() {
                cfg.analyze.checkpoints.clone()
            } else {
                a.checkpoints
            };
            let s = cmd_analyze(&cfg, &ckpts, &out)?;
            println!("analyzed {} checkpoint(s); mean suppression {:?}", s.checkpoints, s.mean_suppression);
            Ok(())
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
