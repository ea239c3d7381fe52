//! End-to-end runs: corpus, then per leave-one-speaker-out fold
//! stage 1 → stage 2 → stage 3 → evaluation, then aggregation and reports.
//!
//! Every fold draws from its own seed, `derive_seed(seed, "fold", index)`,
//! so results do not depend on how many folds run in parallel.
//!
//! Output directory layout:
//!
//! ```text
//! config.toml  corpus.bin  metrics.json  report.txt  confusion.csv  report.json
//! folds/<speaker>/baseline.ckpt  baseline_trace.csv  gan.ckpt  gan_trace.csv
//!                 final.ckpt  confusion.csv
//! ```
//!
//! `metrics.json` holds only values derived from the config and seed, so
//! replaying a run reproduces it byte for byte. `report.json` adds the full
//! config and the SHA-256 of every other emitted file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{
    augment_multimodal, augment_ser, balance_set, train_final_classifier,
    train_final_classifier_resampled, AugmentedSet, FinalClassifier, Mode, Origin, TextPrior,
};
use crate::baseline::{evaluate_uar, train_baseline, BaselineEpoch, BaselineModel};
use crate::config::RunConfig;
use crate::corpus::{
    loso_splits, read_corpus, read_corpus_csv, synth_corpus, write_corpus, Corpus, Fold,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_folds, feature_distribution_report, render_fold_table, write_confusion_csv,
    Aggregate, DistributionReport, FoldResult,
};
use crate::infogan::{
    mi_diagnostics, sample_noise, train_infogan, write_trace_csv, GanBundle, MiDiagnostics,
};
use crate::rng::{self, derive_seed};

pub fn fold_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, "fold", index as u64)
}

/// Reads the configured corpus file, or generates the synthetic corpus.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus {
        Some(path) if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => {
            read_corpus_csv(path, cfg.corpus_classes)
        }
        Some(path) => read_corpus(path),
        None => Ok(synth_corpus(&cfg.synth())?.0),
    }
}

/// Training data, optional held-out test data and seed for running stages
/// one at a time.
///
/// With `held_out` set, the split and seed are those of that speaker's fold
/// in [`run_pipeline`], so chaining the stages reproduces the fold's
/// checkpoints. Without it every record is used for training under the
/// master seed.
#[derive(Clone, Debug)]
pub struct StageData {
    pub train: Corpus,
    pub test: Option<Corpus>,
    pub seed: u64,
}

impl StageData {
    pub fn new(cfg: &RunConfig, corpus: Corpus, held_out: Option<&str>) -> Result<Self> {
        let Some(speaker) = held_out else {
            return Ok(Self {
                train: corpus,
                test: None,
                seed: cfg.seed,
            });
        };
        let folds = loso_splits(&corpus)?;
        let (index, fold) = folds
            .into_iter()
            .enumerate()
            .find(|(_, f)| f.held_out == speaker)
            .ok_or_else(|| Error::InvalidInput(format!("no speaker `{speaker}` in the corpus")))?;
        Ok(Self {
            train: fold.train,
            test: Some(fold.test),
            seed: fold_seed(cfg.seed, index),
        })
    }

    /// Seed of stage 1, 2 or 3.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        derive_seed(self.seed, "stage", stage)
    }
}

/// Final training set: real records, plus generated features when
/// `augment` is on, topped up to a uniform histogram when `balance` is on.
pub fn build_final_set(
    cfg: &RunConfig,
    train: &Corpus,
    bundle: &GanBundle,
    rng: &mut rng::Rng,
) -> Result<AugmentedSet> {
    let fusion = cfg.mode == Mode::Fusion;
    let set = match (cfg.augment, cfg.mode) {
        (true, Mode::Audio) => augment_ser(train, bundle, rng)?,
        (true, Mode::Fusion) => augment_multimodal(train, bundle, rng)?,
        (false, _) => AugmentedSet::from_corpus(train, fusion),
    };
    if cfg.balance {
        balance_set(set, bundle, &TextPrior::fit(train), rng)
    } else {
        Ok(set)
    }
}

/// Stage-3 training, with per-epoch regeneration when `resample` is on.
pub fn train_final(
    cfg: &RunConfig,
    train: &Corpus,
    bundle: &GanBundle,
    seed: u64,
) -> Result<(AugmentedSet, FinalClassifier)> {
    let set = build_final_set(cfg, train, bundle, &mut rng::stream(seed, "augment", 0))?;
    let head_cfg = cfg.final_head(seed);
    let head = if cfg.resample && set.generated_count() > 0 {
        train_final_classifier_resampled(
            &set,
            |epoch| build_final_set(cfg, train, bundle, &mut rng::stream(seed, "augment", epoch as u64)),
            cfg.mode,
            &head_cfg,
        )?
    } else {
        train_final_classifier(&set, cfg.mode, &head_cfg)?
    };
    Ok((set, head))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    /// Final classifier trained on the (possibly augmented) set.
    pub result: FoldResult,
    /// Same head trained on the real training records only.
    pub control_uar: f64,
    /// Stage-1 emotion head on the held-out speaker.
    pub baseline_uar: f64,
    pub final_set_size: usize,
    pub generated_in_final_set: usize,
    /// Information metrics of generated samples conditioned on the training records.
    pub mi: MiDiagnostics,
    pub distribution: DistributionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub held_out: String,
    pub seed: u64,
    pub metrics: Option<FoldMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub status: RunStatus,
    /// Config with the output location and job count cleared.
    pub config: RunConfig,
    pub corpus_records: usize,
    pub speakers: usize,
    pub folds: Vec<FoldRecord>,
    pub aggregate: Option<Aggregate>,
    pub control_aggregate: Option<Aggregate>,
    pub baseline_aggregate: Option<Aggregate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub metrics: Metrics,
    /// Relative path → hex SHA-256, for every file written except `report.json`.
    pub artifacts: BTreeMap<String, String>,
}

impl RunReport {
    pub fn status(&self) -> RunStatus {
        self.metrics.status
    }
}

pub fn write_baseline_trace(trace: &[BaselineEpoch], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "total", "L_SER", "L_CL", "L_MI"])?;
    for (i, e) in trace.iter().enumerate() {
        w.write_record([
            i.to_string(),
            e.total.to_string(),
            e.ser.to_string(),
            e.cl.to_string(),
            e.mi.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn fold_dir_name(speaker: &str) -> String {
    speaker
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs stages 1–3 on one fold and evaluates on the held-out speaker.
/// Artifacts go to `dir` when given.
pub fn run_fold(cfg: &RunConfig, fold: &Fold, seed: u64, dir: Option<&Path>) -> Result<FoldMetrics> {
    // keep in step with StageData::stage_seed
    let baseline = train_baseline(&fold.train, &cfg.baseline(derive_seed(seed, "stage", 1)))?;
    let (bundle, gan_trace) = train_infogan(&fold.train, &baseline, &cfg.gan(derive_seed(seed, "stage", 2)))?;
    let stage3 = derive_seed(seed, "stage", 3);
    let (set, head) = train_final(cfg, &fold.train, &bundle, stage3)?;
    let control = train_final_classifier(
        &AugmentedSet::from_corpus(&fold.train, cfg.mode == Mode::Fusion),
        cfg.mode,
        &cfg.final_head(stage3),
    )?;

    let train_labels = fold.train.labels();
    let mut probe = rng::stream(seed, "probe", 0);
    let z = sample_noise(fold.train.len(), bundle.noise_dim, &mut probe);
    let mi = mi_diagnostics(&bundle, &z, &train_labels, &fold.train.text_matrix())?;
    let generated: Vec<_> = set
        .items
        .iter()
        .filter(|it| it.origin_audio == Origin::Generated)
        .collect();
    let distribution = if generated.is_empty() {
        let hhat = crate::infogan::generate(&bundle, &z, &train_labels, &fold.train.text_matrix())?;
        feature_distribution_report(&fold.train.audio_matrix(), &train_labels, &hhat, &train_labels, fold.train.num_classes())?
    } else {
        let rows: Vec<&[f64]> = generated.iter().map(|it| it.audio.as_slice()).collect();
        let labels: Vec<usize> = generated.iter().map(|it| it.label).collect();
        feature_distribution_report(
            &fold.train.audio_matrix(),
            &train_labels,
            &crate::numkit::Matrix::from_rows(&rows)?,
            &labels,
            fold.train.num_classes(),
        )?
    };

    let report = head.evaluate(fold.test.records())?;
    let mut result = FoldResult::new(&fold.held_out, report);
    let traces = &mut result.traces;
    traces.insert("baseline_total".into(), baseline.trace.iter().map(|e| e.total).collect());
    traces.insert("gan_d_loss".into(), gan_trace.iter().map(|e| e.d_loss).collect());
    traces.insert("gan_g_loss".into(), gan_trace.iter().map(|e| e.g_loss).collect());
    traces.insert("gan_l_iy".into(), gan_trace.iter().map(|e| e.l_iy).collect());
    traces.insert("gan_l_it".into(), gan_trace.iter().map(|e| e.l_it).collect());
    traces.insert("gan_mi_bound_t".into(), gan_trace.iter().map(|e| e.mi_bound_t).collect());
    traces.insert("final_loss".into(), head.trace.clone());

    if let Some(dir) = dir {
        create_dir(dir)?;
        baseline.to_checkpoint()?.write(dir.join("baseline.ckpt"))?;
        write_baseline_trace(&baseline.trace, &dir.join("baseline_trace.csv"))?;
        bundle.to_checkpoint()?.write(dir.join("gan.ckpt"))?;
        write_trace_csv(&gan_trace, dir.join("gan_trace.csv"))?;
        head.to_checkpoint()?.write(dir.join("final.ckpt"))?;
        write_confusion_csv(&result.confusion, dir.join("confusion.csv"))?;
    }

    Ok(FoldMetrics {
        control_uar: control.evaluate(fold.test.records())?.uar,
        baseline_uar: evaluate_uar(&baseline, fold.test.records())?.uar,
        final_set_size: set.len(),
        generated_in_final_set: set.generated_count(),
        mi,
        distribution,
        result,
    })
}

/// Runs `task` for every index with up to `jobs` worker threads; results keep index order.
fn parallel_map<T: Send>(n: usize, jobs: usize, task: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = task(i);
                slots.lock().expect("no worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|o| o.expect("every index ran"))
        .collect()
}

fn aggregate_of(folds: &[FoldRecord], uar: impl Fn(&FoldMetrics) -> FoldResult) -> Option<Aggregate> {
    let results: Vec<FoldResult> = folds.iter().filter_map(|f| f.metrics.as_ref()).map(uar).collect();
    aggregate_folds(&results).ok()
}

fn with_uar(m: &FoldMetrics, uar: f64) -> FoldResult {
    FoldResult { uar, ..m.result.clone() }
}

fn render_report(metrics: &Metrics) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "status {:?}, {} records, {} speakers, mode {:?}, augment {}, balance {}, lambda {}",
        metrics.status,
        metrics.corpus_records,
        metrics.speakers,
        metrics.config.mode,
        metrics.config.augment,
        metrics.config.balance,
        metrics.config.lambda
    );
    let _ = writeln!(out);
    let ok: Vec<FoldResult> = metrics
        .folds
        .iter()
        .filter_map(|f| f.metrics.as_ref().map(|m| m.result.clone()))
        .collect();
    if let Some(agg) = &metrics.aggregate {
        out.push_str(&render_fold_table(&ok, agg));
    }
    let _ = writeln!(out);
    let width = metrics.folds.iter().map(|f| f.held_out.len()).max().unwrap_or(4).max(4);
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}",
        "fold", "final", "control", "stage1", "q_acc", "mi_t"
    );
    for f in &metrics.folds {
        match (&f.metrics, &f.error) {
            (Some(m), _) => {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
                    f.held_out,
                    m.result.uar,
                    m.control_uar,
                    m.baseline_uar,
                    m.mi.q_label_accuracy,
                    m.mi.mi_bound_t
                );
            }
            (None, e) => {
                let _ = writeln!(out, "{:<width$}  failed: {}", f.held_out, e.as_deref().unwrap_or("?"));
            }
        }
    }
    for (name, agg) in [
        ("final", &metrics.aggregate),
        ("control", &metrics.control_aggregate),
        ("stage1", &metrics.baseline_aggregate),
    ] {
        if let Some(a) = agg {
            let _ = writeln!(out, "{name:<8} mean UAR {:.4} ± {:.4}", a.mean_uar, a.std_uar);
        }
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn checksums(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            checksums(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if rel == "report.json" {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(rel, sha256_hex(&bytes));
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Runs every fold and writes all artifacts under `cfg.out_dir`.
///
/// A fold that fails is recorded with its error and the run is marked
/// partial; configuration, corpus and I/O errors outside folds abort the run.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    create_dir(out)?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    let corpus = load_corpus(cfg)?;
    write_corpus(&corpus, out.join("corpus.bin"))?;
    let folds = loso_splits(&corpus)?;

    let records = parallel_map(folds.len(), cfg.jobs, |i| {
        let fold = &folds[i];
        let seed = fold_seed(cfg.seed, i);
        let dir = out.join("folds").join(fold_dir_name(&fold.held_out));
        let outcome = run_fold(cfg, fold, seed, Some(&dir));
        FoldRecord {
            held_out: fold.held_out.clone(),
            seed,
            error: outcome.as_ref().err().map(ToString::to_string),
            metrics: outcome.ok(),
        }
    });

    let status = if records.iter().all(|r| r.metrics.is_some()) {
        RunStatus::Complete
    } else {
        RunStatus::Partial
    };
    let metrics = Metrics {
        status,
        config: RunConfig {
            out_dir: PathBuf::new(),
            jobs: 1,
            ..cfg.clone()
        },
        corpus_records: corpus.len(),
        speakers: folds.len(),
        aggregate: aggregate_of(&records, |m| m.result.clone()),
        control_aggregate: aggregate_of(&records, |m| with_uar(m, m.control_uar)),
        baseline_aggregate: aggregate_of(&records, |m| with_uar(m, m.baseline_uar)),
        folds: records,
    };

    write_file(&out.join("metrics.json"), serde_json::to_vec_pretty(&metrics)?)?;
    write_file(&out.join("report.txt"), render_report(&metrics))?;
    if let Some(agg) = &metrics.aggregate {
        write_confusion_csv(&agg.pooled_confusion, out.join("confusion.csv"))?;
    }
    let mut artifacts = BTreeMap::new();
    checksums(out, out, &mut artifacts)?;
    let report = RunReport {
        config: cfg.clone(),
        metrics,
        artifacts,
    };
    write_file(&out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Reads back a stage-1 checkpoint.
pub fn load_baseline(path: &Path) -> Result<BaselineModel> {
    BaselineModel::from_checkpoint(&crate::checkpoint::Checkpoint::read(path)?)
}

pub fn load_bundle(path: &Path) -> Result<GanBundle> {
    GanBundle::from_checkpoint(&crate::checkpoint::Checkpoint::read(path)?)
}

pub fn load_final(path: &Path) -> Result<FinalClassifier> {
    FinalClassifier::from_checkpoint(&crate::checkpoint::Checkpoint::read(path)?)
}
