//! `fast`: generate data, sample splits, train, evaluate and run experiment
//! grids from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fast_core::dataset::femb::Precision;
use fast_core::encoder::{self, Provenance, SyntheticPrompts, DEFAULT_TEST_BAGS_PER_CLASS};
use fast_core::gradcheck::{self, DEFAULT_TRIALS};
use fast_core::harness::{self, Variant};
use fast_core::sampler::FewShotSplit;
use fast_core::trainer::{load_checkpoint, save_checkpoint};
use fast_core::{
    emit_report, few_shot_split, resolve_source, run_experiment, save_dataset, synth_generate,
    train, Error, EvalReport, ExperimentConfig, ReportFormat, RunRecord, SynthSpec,
};

#[derive(Parser, Debug)]
#[command(
    name = "fast",
    version,
    about = "Few-shot bag classification with a cache and a prior branch"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Base seed; overrides the one in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CellArgs {
    /// Bags per class; defaults to the first entry of the config grid.
    #[arg(long)]
    bag_shot: Option<usize>,
    /// Labeled instances per class; defaults to the first grid entry.
    #[arg(long)]
    instance_shot: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (config: synthetic spec).
    Synth {
        /// Also write a held-out set with this many bags per class.
        #[arg(long, default_value_t = DEFAULT_TEST_BAGS_PER_CLASS)]
        test_bags_per_class: usize,
        /// Also write noisy class prompt features at this noise level.
        #[arg(long)]
        prompt_noise: Option<f64>,
    },
    /// Draw one few-shot split (config: experiment).
    Sample {
        #[command(flatten)]
        cell: CellArgs,
    },
    /// Train one variant on one split (config: experiment).
    Train {
        #[command(flatten)]
        cell: CellArgs,
        /// Split file from `sample`; drawn afresh when absent.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Variant name from the config; defaults to the first.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Pick α and score a trained checkpoint on the test set (config: experiment).
    Eval {
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Run the full experiment grid and write every report (config: experiment).
    Sweep,
    /// Run every finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
    },
    /// Render tables from a run record, or from a fresh run of the config.
    Report {
        #[arg(long)]
        record: Option<PathBuf>,
        /// csv, json or all.
        #[arg(long, default_value = "all")]
        format: String,
    },
}

struct Failure {
    code: &'static str,
    message: String,
    exit: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let exit = if matches!(e, Error::MissingFile(_)) {
            2
        } else {
            1
        };
        Failure {
            code: e.code(),
            message: e.to_string(),
            exit,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.code, f.message.replace('\n', " "));
            ExitCode::from(f.exit)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let c = &cli.common;
    match cli.command {
        Command::Synth {
            test_bags_per_class,
            prompt_noise,
        } => synth(c, test_bags_per_class, prompt_noise),
        Command::Sample { cell } => sample(c, &cell),
        Command::Train {
            cell,
            split,
            variant,
        } => train_cmd(c, &cell, split.as_deref(), variant.as_deref()),
        Command::Eval {
            cell,
            checkpoint,
            split,
            variant,
        } => eval(c, &cell, &checkpoint, split.as_deref(), variant.as_deref()),
        Command::Sweep => sweep(c),
        Command::Gradcheck { trials } => gradcheck_cmd(c, trials),
        Command::Report { record, format } => report(c, record.as_deref(), &format),
    }
}

fn out_dir(c: &Common) -> CliResult<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(Error::from)?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    std::fs::write(path, bytes).map_err(Error::from)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        }
        .into()
    })
}

fn experiment(c: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.base_seed = s;
    }
    Ok(cfg)
}

fn cell_shots(cfg: &ExperimentConfig, cell: &CellArgs) -> (usize, usize) {
    (
        cell.bag_shot.unwrap_or(cfg.bag_shots[0]),
        cell.instance_shot.unwrap_or(cfg.instance_shots[0]),
    )
}

fn pick_variant(cfg: &ExperimentConfig, name: Option<&str>) -> CliResult<Variant> {
    match name {
        None => Ok(cfg.variants[0].clone()),
        Some(n) => cfg
            .variants
            .iter()
            .find(|v| v.name == n)
            .cloned()
            .ok_or_else(|| {
                Error::Unknown {
                    what: "variant",
                    name: n.to_string(),
                }
                .into()
            }),
    }
}

fn split_for(
    cfg: &ExperimentConfig,
    cell: &CellArgs,
    src: &fast_core::EmbeddingSource,
    path: Option<&Path>,
) -> CliResult<FewShotSplit> {
    let split = match path {
        Some(p) => FewShotSplit::load(p)?,
        None => {
            let (b, i) = cell_shots(cfg, cell);
            few_shot_split(&src.train, &cfg.few_shot_spec(b, i, cfg.base_seed))?
        }
    };
    split.check(&src.train)?;
    Ok(split)
}

fn synth(c: &Common, test_bags: usize, prompt_noise: Option<f64>) -> CliResult<()> {
    let mut spec: SynthSpec = match &c.config {
        Some(p) => serde_json::from_slice(&read_file(p)?).map_err(Error::from)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let dir = out_dir(c)?;
    let manifest = save_dataset(&synth_generate(&spec)?, &dir)?;
    println!("wrote {}", manifest.display());
    if test_bags > 0 {
        let test = synth_generate(&encoder::test_spec(&spec, test_bags))?;
        let manifest = save_dataset(&test, &dir.join("test"))?;
        println!("wrote {}", manifest.display());
    }
    if let Some(noise) = prompt_noise {
        let features = encoder::synthetic_prompt_features(
            &spec,
            &SyntheticPrompts {
                noise,
                seed: spec.seed,
            },
        )?;
        let path = dir.join("prompts.femb");
        let prov = Provenance {
            encoder: "synthetic".into(),
            preprocessing: format!("class directions plus N(0, {noise}^2) noise, unit norm"),
            checksum: String::new(),
            sequence_lengths: None,
        };
        encoder::write_with_sidecar(&path, &features, Precision::F64, prov)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn sample(c: &Common, cell: &CellArgs) -> CliResult<()> {
    let cfg = experiment(c)?;
    let src = resolve_source(&cfg.source)?;
    let split = split_for(&cfg, cell, &src, None)?;
    let path = out_dir(c)?.join("split.json");
    split.save(&path)?;
    println!(
        "{} bags, {} labeled, {} unlabeled core rows",
        split.selected_bags.len(),
        split.num_labeled(),
        split.unlabeled_core.len()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn train_cmd(
    c: &Common,
    cell: &CellArgs,
    split: Option<&Path>,
    variant: Option<&str>,
) -> CliResult<()> {
    let cfg = experiment(c)?;
    let variant = pick_variant(&cfg, variant)?;
    let src = resolve_source(&cfg.source)?;
    let split = split_for(&cfg, cell, &src, split)?;
    let (cache, prior) = harness::build_models(&cfg, &src, &split, cfg.base_seed)?;
    let tc = harness::variant_train_config(&cfg.train, &variant.ablation, cfg.base_seed);
    let (cache, prior, state) = train(cache, prior, &split, &src.train.store, &tc)?;
    let dir = out_dir(c)?;
    let ckpt = dir.join("model.fckp");
    save_checkpoint(&ckpt, &cache, &prior)?;
    state.write_history(&dir.join("history.csv"))?;
    split.save(&dir.join("split.json"))?;
    if let Some(l) = state.final_loss() {
        println!(
            "variant {} trained {} steps, final loss {l:.6}",
            variant.name, state.step
        );
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn describe(report: &EvalReport) {
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    println!(
        "alpha {:.2} ({}), instance AUC {}, bag AUC {}",
        report.alpha,
        report.alpha_source,
        fmt(report.instance_auc.macro_mean),
        fmt(report.bag_auc.macro_mean)
    );
    let flagged: Vec<&str> = report
        .bag_auc
        .undefined
        .iter()
        .chain(&report.instance_auc.undefined)
        .map(|&k| report.classes[k].as_str())
        .collect();
    if !flagged.is_empty() {
        println!("undefined AUC for classes: {}", flagged.join(", "));
    }
}

fn eval(
    c: &Common,
    cell: &CellArgs,
    ckpt: &Path,
    split: Option<&Path>,
    variant: Option<&str>,
) -> CliResult<()> {
    let cfg = experiment(c)?;
    let variant = pick_variant(&cfg, variant)?;
    let src = resolve_source(&cfg.source)?;
    let test = src
        .test
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("no test dataset to evaluate on".into()))?;
    let split = split_for(&cfg, cell, &src, split)?;
    let (cache, prior) = load_checkpoint(ckpt, Some(cfg.prior.mode))?;
    let (alpha, _) = harness::select_alpha(
        &cfg.fusion,
        &variant.ablation,
        &cache,
        &prior,
        &src.train,
        &split,
    )?;
    let report = harness::evaluate_models(
        &cache,
        &prior,
        &alpha,
        test,
        cfg.fusion.pooling,
        cfg.base_seed,
    )?;
    describe(&report);
    write_json(&out_dir(c)?.join("eval.json"), &report)
}

fn summarize(record: &RunRecord) {
    for row in &record.table.rows {
        for s in &row.stats {
            let m = s
                .instance_auc_mean
                .map_or("-".into(), |x| format!("{x:.4}"));
            println!(
                "bags {:>3} instances {:>3} {:<16} instance AUC {m} (n={})",
                row.bag_shot, row.instance_shot, s.variant, s.n
            );
        }
    }
    let failed: usize = record.table.rows.iter().map(|r| r.failed_cells).sum();
    if failed > 0 {
        println!("{failed} cells failed; see record.json");
    }
}

fn sweep(c: &Common) -> CliResult<()> {
    let cfg = experiment(c)?;
    let record = run_experiment(&cfg)?;
    summarize(&record);
    for p in emit_report(&record, ReportFormat::All, &out_dir(c)?)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn gradcheck_cmd(c: &Common, trials: usize) -> CliResult<()> {
    let reports = gradcheck::run_all(trials, c.seed.unwrap_or(0));
    for r in &reports {
        println!(
            "{:<12} {} trials, {} failures, max relative error {:.3e}",
            r.suite.to_string(),
            r.trials,
            r.failures,
            r.max_rel_error
        );
    }
    if c.out.is_some() {
        write_json(&out_dir(c)?.join("gradcheck.json"), &reports)?;
    }
    match reports.iter().find(|r| !r.passed()) {
        None => Ok(()),
        Some(r) => Err(Failure {
            code: "gradient-mismatch",
            message: format!(
                "suite {} failed {} of {} trials (worst trial {}, error {:.3e})",
                r.suite, r.failures, r.trials, r.worst_trial, r.max_rel_error
            ),
            exit: 1,
        }),
    }
}

fn report(c: &Common, record: Option<&Path>, format: &str) -> CliResult<()> {
    let format: ReportFormat = format.parse()?;
    let record: RunRecord = match record {
        Some(p) => serde_json::from_slice(&read_file(p)?).map_err(Error::from)?,
        None if c.config.is_some() => run_experiment(&experiment(c)?)?,
        None => {
            return Err(Failure {
                code: "usage",
                message: "report needs --record or --config".into(),
                exit: 2,
            })
        }
    };
    for p in emit_report(&record, format, &out_dir(c)?)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
