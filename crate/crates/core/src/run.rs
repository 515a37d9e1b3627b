//! Run orchestration behind the `moe` commands: training directories,
//! evaluation with telemetry export, multi-run comparison and parameter
//! accounting.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig, ParamCounts};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::telemetry::{ExpertUsageStats, LayerSummary, LAYER_AVERAGING, SUMMARY_FILE};
use crate::train::checkpoint::{load_checkpoint, save_checkpoint};
use crate::train::{eval_rng, evaluate, evaluate_usage, load_corpus, split_corpus, MetricsRecord, Trainer, VAL_FRACTION};


pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";
pub const STATS_DIR: &str = "stats";
pub const EVAL_FILE: &str = "eval.json";

/// Contents of `eval.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub val_loss: f64,
    pub tokens: usize,
    pub moe_layers: usize,
}

/// Train/validation split of a corpus file.
pub struct Corpus {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
}

impl Corpus {
    pub fn load(path: &Path, seq_len: usize) -> Result<Self> {
        let tokens = load_corpus(path)?;
        let (train, val) = split_corpus(&tokens, VAL_FRACTION);
        for (part, len) in [("training", train.len()), ("validation", val.len())] {
            if len <= seq_len {
                return Err(Error::Data(format!(
                    "{}: {part} split has {len} tokens, needs more than seq_len {seq_len}",
                    path.display()
                )));
            }
        }
        Ok(Corpus {
            train: train.to_vec(),
            val: val.to_vec(),
        })
    }
}

/// Validation loss on the fixed evaluation stream of `seed`.
pub fn validation_loss<S: Scalar>(model: &Model<S>, val: &[u8], batch: usize, n_batches: usize, seed: u64) -> Result<f64> {
    let mut rng = eval_rng(seed);
    evaluate(model, val, batch, model.cfg.seq_len, n_batches, &mut rng, |_| Ok(()))
}

/// Trains until `trainer.step() == until`, emitting a record every
/// `eval_every` steps and at the configured final step.
pub fn train_until<S: Scalar>(
    trainer: &mut Trainer<S>,
    corpus: &Corpus,
    until: usize,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<()> {
    while trainer.step() < until {
        let m = trainer.train_step(&corpus.train)?;
        let step = trainer.step();
        if step.is_multiple_of(trainer.cfg.eval_every) || step == trainer.cfg.steps {
            let val_loss = validation_loss(
                &trainer.model,
                &corpus.val,
                trainer.cfg.batch_size,
                trainer.cfg.eval_batches,
                trainer.cfg.seed,
            )?;
            if !val_loss.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: format!("validation loss {val_loss}"),
                });
            }
            on_record(&MetricsRecord {
                step,
                task_loss: m.task_loss,
                balance_loss: m.balance_loss,
                val_loss,
            })?;
        }
    }
    Ok(())
}

pub fn record_line(r: &MetricsRecord) -> String {
    let mut s = serde_json::to_string(r).expect("metrics record serializes");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Evaluates `model` on `val` and writes `eval.json`, plus the heatmap and
/// summary when the model has MoE layers.
pub fn write_stats<S: Scalar>(
    model: &Model<S>,
    val: &[u8],
    batch: usize,
    n_batches: usize,
    seed: u64,
    dir: &Path,
) -> Result<(EvalReport, ExpertUsageStats)> {
    let mut rng = eval_rng(seed);
    let (val_loss, stats) = evaluate_usage(model, val, batch, model.cfg.seq_len, n_batches, &mut rng)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if !stats.is_empty() {
        stats.export(dir)?;
    }
    let report = EvalReport {
        val_loss,
        tokens: batch * model.cfg.seq_len * n_batches,
        moe_layers: stats.layers.len(),
    };
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_file(&dir.join(EVAL_FILE), json)?;
    Ok((report, stats))
}

/// `moe train`: trains from scratch and populates `out`.
pub fn train_command(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&MetricsRecord)) -> Result<EvalReport> {
    let corpus = Corpus::load(&cfg.data.corpus, cfg.model.seq_len)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(RESOLVED_CONFIG_FILE), cfg.to_toml())?;
    let model = Model::build(&cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let metrics_path = out.join(METRICS_FILE);
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    train_until(&mut trainer, &corpus, cfg.train.steps, |r| {
        progress(r);
        log.write_all(record_line(r).as_bytes())
            .map_err(|e| Error::io(&metrics_path, e))
    })?;
    save_checkpoint(&trainer, &out.join(CHECKPOINT_FILE))?;
    let (report, _) = write_stats(
        &trainer.model,
        &corpus.val,
        cfg.train.batch_size,
        cfg.train.eval_batches,
        cfg.train.seed,
        &out.join(STATS_DIR),
    )?;
    Ok(report)
}

/// `moe eval`: evaluates at least `tokens` validation tokens.
pub fn eval_command(checkpoint: &Path, corpus: &Path, tokens: usize, stats: &Path, seed: Option<u64>) -> Result<EvalReport> {
    let trainer = load_checkpoint(checkpoint)?;
    let cfg = &trainer.model.cfg;
    let corpus = Corpus::load(corpus, cfg.seq_len)?;
    let batch = trainer.cfg.batch_size;
    let per_batch = batch * cfg.seq_len;
    let n_batches = tokens.div_ceil(per_batch).max(1);
    let (report, _) = write_stats(
        &trainer.model,
        &corpus.val,
        batch,
        n_batches,
        seed.unwrap_or(trainer.cfg.seed),
        stats,
    )?;
    Ok(report)
}

/// One run's row in a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub val_loss: f64,
    pub mean_normalized_entropy: f64,
    pub mean_max_fraction: f64,
}

fn stats_dir(run: &Path) -> PathBuf {
    if run.join(EVAL_FILE).is_file() {
        run.to_path_buf()
    } else {
        run.join(STATS_DIR)
    }
}

/// Reads a completed run's stats from `<run>/stats` (or `run` itself).
pub fn read_run(run: &Path) -> Result<RunSummary> {
    let name = run.display().to_string();
    let missing = |what: &str| Error::Data(format!("run {name}: missing {what}"));
    let dir = stats_dir(run);
    let eval_path = dir.join(EVAL_FILE);
    let text = fs::read_to_string(&eval_path).map_err(|_| missing(EVAL_FILE))?;
    let report: EvalReport =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("run {name}: {EVAL_FILE}: {e}")))?;
    let (entropy, max_fraction) = if report.moe_layers == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let text = fs::read_to_string(dir.join(SUMMARY_FILE)).map_err(|_| missing(SUMMARY_FILE))?;
        let agg = text
            .lines()
            .filter_map(|l| serde_json::from_str::<LayerSummary>(l).ok())
            .find(|s| s.layer == LAYER_AVERAGING)
            .ok_or_else(|| missing("aggregate summary record"))?;
        (agg.normalized_entropy, agg.max_fraction)
    };
    Ok(RunSummary {
        name,
        val_loss: report.val_loss,
        mean_normalized_entropy: entropy,
        mean_max_fraction: max_fraction,
    })
}

/// CSV comparison table with one row per run and a `b-a` delta row for
/// every pair.
pub fn compare_table(runs: &[RunSummary]) -> String {
    let mut s = String::from("run,val_loss,mean_normalized_entropy,mean_max_fraction\n");
    for r in runs {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6}",
            r.name, r.val_loss, r.mean_normalized_entropy, r.mean_max_fraction
        );
    }
    for (i, a) in runs.iter().enumerate() {
        for b in &runs[i + 1..] {
            let _ = writeln!(
                s,
                "delta:{}-{},{:.6},{:.6},{:.6}",
                b.name,
                a.name,
                b.val_loss - a.val_loss,
                b.mean_normalized_entropy - a.mean_normalized_entropy,
                b.mean_max_fraction - a.mean_max_fraction
            );
        }
    }
    s
}

/// `moe compare`.
pub fn compare_command(runs: &[PathBuf], out: &Path) -> Result<String> {
    if runs.len() < 2 {
        return Err(Error::config("runs", "need at least two runs"));
    }
    let rows = runs.iter().map(|r| read_run(r)).collect::<Result<Vec<_>>>()?;
    let table = compare_table(&rows);
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_file(out, &table)?;
    Ok(table)
}

/// `moe params` output.
pub fn params_report(cfg: &ModelConfig) -> String {
    let ParamCounts {
        total,
        learned_router,
        expert,
        backbone,
        frozen,
    } = cfg.param_counts();
    format!(
        "gate {}\nmoe_layers {}\ntotal {total}\nbackbone {backbone}\nexpert {expert}\nfrozen {frozen}\nrouter {learned_router}\n",
        cfg.gate,
        cfg.moe_layers()
    )
}
