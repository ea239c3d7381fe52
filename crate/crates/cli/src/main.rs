//! Command-line front end: run the whole pipeline or one stage at a time.
//!
//! Exit codes: 0 on success, 2 when some pipeline folds failed, 1 on
//! configuration, I/O or stage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use miaug::augment::Mode;
use miaug::baseline::{evaluate_uar, train_baseline};
use miaug::config::RunConfig;
use miaug::corpus::{write_corpus, write_corpus_csv, FeatureRecord};
use miaug::eval::{write_confusion_csv, UarReport};
use miaug::infogan::{train_infogan, write_trace_csv};
use miaug::pipeline::{
    build_final_set, load_baseline, load_bundle, load_corpus, load_final, run_pipeline,
    train_final, write_baseline_trace, RunStatus, StageData,
};
use miaug::rng;
use miaug::Error;

#[derive(Debug, Parser)]
#[command(name = "miaug", version, about = "Feature-level augmentation for emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus (corpus.bin, corpus.csv).
    Synth(Common),
    /// Stage 1: train the baseline (baseline.ckpt, baseline_trace.csv).
    Baseline(Stage),
    /// Stage 2: train the generator (gan.ckpt, gan_trace.csv).
    Gan(Stage),
    /// Stage 3 data: build the final training set (augmented.bin, augmented.csv).
    Augment(Stage),
    /// Stage 3: train the final classifier and evaluate it (final.ckpt, eval.json).
    Eval(Stage),
    /// Every stage for every leave-one-speaker-out fold, with reports.
    Pipeline(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; `MIAUG_<KEY>` environment variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Folds trained in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_parser = ["audio", "fusion"])]
    mode: Option<String>,
    /// Top up every class to the size of the largest one with generated features.
    #[arg(long)]
    balance: bool,
}

#[derive(Debug, Args)]
struct Stage {
    #[command(flatten)]
    common: Common,
    /// Corpus file (`.csv` or binary); overrides the config.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Train without this speaker and evaluate on it, seeded like its pipeline fold.
    #[arg(long)]
    holdout: Option<String>,
    /// Stage-1 checkpoint [default: <out>/baseline.ckpt].
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Stage-2 checkpoint [default: <out>/gan.ckpt].
    #[arg(long)]
    gan: Option<PathBuf>,
    /// Evaluate this final classifier instead of training one.
    #[arg(long)]
    classifier: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(jobs) = self.jobs {
            cfg.jobs = jobs;
        }
        if let Some(mode) = &self.mode {
            cfg.mode = mode.parse()?;
        }
        if self.balance {
            cfg.balance = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_out(cfg: &RunConfig) -> Result<&Path, Error> {
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    Ok(out)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| io_error(path, e))
}

struct Loaded {
    cfg: RunConfig,
    data: StageData,
}

impl Stage {
    fn load(&self) -> Result<Loaded, Error> {
        let mut cfg = self.common.config()?;
        if let Some(corpus) = &self.corpus {
            cfg.corpus = Some(corpus.clone());
        }
        let data = StageData::new(&cfg, load_corpus(&cfg)?, self.holdout.as_deref())?;
        Ok(Loaded { cfg, data })
    }

    fn input(&self, given: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| cfg.out_dir.join(name))
    }
}

fn summary(report: &UarReport) -> String {
    let recalls: Vec<String> = report
        .recalls
        .iter()
        .map(|r| r.map_or("-".to_string(), |v| format!("{v:.3}")))
        .collect();
    format!("UAR {:.4}  recalls [{}]", report.uar, recalls.join(", "))
}

fn synth(args: &Common) -> Result<(), Error> {
    let cfg = args.config()?;
    let out = create_out(&cfg)?;
    let corpus = load_corpus(&cfg)?;
    write_corpus(&corpus, out.join("corpus.bin"))?;
    write_corpus_csv(&corpus, out.join("corpus.csv"))?;
    println!(
        "{} records, {} speakers, class histogram {:?} -> {}",
        corpus.len(),
        corpus.speakers().len(),
        corpus.histogram(),
        out.display()
    );
    Ok(())
}

fn baseline(args: &Stage) -> Result<(), Error> {
    let Loaded { cfg, data } = args.load()?;
    let out = create_out(&cfg)?;
    let model = train_baseline(&data.train, &cfg.baseline(data.stage_seed(1)))?;
    model.to_checkpoint()?.write(out.join("baseline.ckpt"))?;
    write_baseline_trace(&model.trace, &out.join("baseline_trace.csv"))?;
    let (what, records) = eval_records(&data);
    println!("baseline {what}: {}", summary(&evaluate_uar(&model, records)?));
    Ok(())
}

fn eval_records(data: &StageData) -> (&'static str, &[FeatureRecord]) {
    match &data.test {
        Some(test) => ("held-out", test.records()),
        None => ("train", data.train.records()),
    }
}

fn gan(args: &Stage) -> Result<(), Error> {
    let Loaded { cfg, data } = args.load()?;
    let out = create_out(&cfg)?;
    let model = load_baseline(&args.input(&args.baseline, &cfg, "baseline.ckpt"))?;
    let (bundle, trace) = train_infogan(&data.train, &model, &cfg.gan(data.stage_seed(2)))?;
    bundle.to_checkpoint()?.write(out.join("gan.ckpt"))?;
    write_trace_csv(&trace, out.join("gan_trace.csv"))?;
    if let Some(last) = trace.last() {
        println!(
            "{} epochs: d_loss {:.4} g_loss {:.4} L_Iy {:.4} L_It {:.4} mi_bound_t {:.4}",
            trace.len(),
            last.d_loss,
            last.g_loss,
            last.l_iy,
            last.l_it,
            last.mi_bound_t
        );
    }
    Ok(())
}

fn augment(args: &Stage) -> Result<(), Error> {
    let Loaded { cfg, data } = args.load()?;
    let out = create_out(&cfg)?;
    let bundle = load_bundle(&args.input(&args.gan, &cfg, "gan.ckpt"))?;
    let set = build_final_set(
        &cfg,
        &data.train,
        &bundle,
        &mut rng::stream(data.stage_seed(3), "augment", 0),
    )?;
    set.write(out.join("augmented.bin"))?;
    set.write_csv(out.join("augmented.csv"))?;
    println!(
        "{} items ({} generated), class histogram {:?}",
        set.len(),
        set.generated_count(),
        set.histogram()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalReport<'a> {
    held_out: Option<&'a str>,
    records: usize,
    mode: Mode,
    report: &'a UarReport,
}

fn eval(args: &Stage) -> Result<(), Error> {
    let Loaded { cfg, data } = args.load()?;
    let out = create_out(&cfg)?;
    let head = match &args.classifier {
        Some(path) => load_final(path)?,
        None => {
            let bundle = load_bundle(&args.input(&args.gan, &cfg, "gan.ckpt"))?;
            let (_, head) = train_final(&cfg, &data.train, &bundle, data.stage_seed(3))?;
            head.to_checkpoint()?.write(out.join("final.ckpt"))?;
            head
        }
    };
    let (what, records) = eval_records(&data);
    let report = head.evaluate(records)?;
    write_confusion_csv(&report.confusion, out.join("confusion.csv"))?;
    write_json(
        &out.join("eval.json"),
        &EvalReport {
            held_out: args.holdout.as_deref(),
            records: records.len(),
            mode: head.mode,
            report: &report,
        },
    )?;
    println!("final {what}: {}", summary(&report));
    Ok(())
}

fn pipeline(args: &Common) -> Result<RunStatus, Error> {
    let cfg = args.config()?;
    let report = run_pipeline(&cfg)?;
    let text = std::fs::read_to_string(cfg.out_dir.join("report.txt"))
        .map_err(|e| io_error(&cfg.out_dir.join("report.txt"), e))?;
    print!("{text}");
    Ok(report.status())
}

fn run(cli: Cli) -> Result<RunStatus, Error> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Baseline(a) => baseline(a),
        Command::Gan(a) => gan(a),
        Command::Augment(a) => augment(a),
        Command::Eval(a) => eval(a),
        Command::Pipeline(a) => return pipeline(a),
    }?;
    Ok(RunStatus::Complete)
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
        Ok(RunStatus::Complete) => ExitCode::SUCCESS,
        Ok(RunStatus::Partial) => {
            eprintln!("some folds failed; see metrics.json");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
