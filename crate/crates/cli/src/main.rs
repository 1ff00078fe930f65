//! `sccl` experiment command line.

mod config;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use sccl::corpus::{generate_synthetic, save_corpus, Sample, SyntheticSpec};
use sccl::encoder::{load_checkpoint, save_checkpoint, EncoderConfig};
use sccl::exec::Execution;
use sccl::metrics::export_vad_scatter;
use sccl::prototypes::PrototypeTable;
use sccl::tensor::GradCheckOptions;
use sccl::trainer::{
    batch_stability_experiment, compare, evaluate, full_model_gradcheck, gradcheck_setup, train, Dataset,
};
use serde_json::json;

use config::{DataConfig, ExperimentConfig, LoadedConfig};
use error::CliError;
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "sccl", version = manifest::VERSION, about = "Cluster-level contrastive learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, its vocabulary, prototypes and a starter config.
    Generate {
        /// Synthetic spec JSON; the built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured method on every configured seed.
    Train(ConfigArgs),
    /// Score a checkpoint on one split.
    Evaluate {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Train every configured method over shared seeds and summarise.
    Compare(ConfigArgs),
    /// Weighted-F1 across batch sizes for the configured methods.
    Stability(ConfigArgs),
    /// Export a checkpoint's VAD predictions as CSV.
    Scatter {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Finite-difference check of the full model under every auxiliary loss.
    Gradcheck {
        /// Take encoder, adapter and loss settings from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Check at most this many entries per parameter tensor.
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run seeds and grid cells one after another.
    #[arg(long)]
    sequential: bool,
}

impl ConfigArgs {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl SplitArg {
    fn samples(self, data: &Dataset) -> &[Sample] {
        match self {
            SplitArg::Train => &data.train,
            SplitArg::Valid => &data.valid,
            SplitArg::Test => &data.test,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCCL_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate { spec, seed, out } => cmd_generate(spec.as_deref(), seed, &out),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate { common, checkpoint, split } => cmd_evaluate(&common, &checkpoint, split, false),
        Command::Scatter { common, checkpoint, split } => cmd_evaluate(&common, &checkpoint, split, true),
        Command::Compare(a) => cmd_compare(&a),
        Command::Stability(a) => cmd_stability(&a),
        Command::Gradcheck { config, seed, tol, max_entries, out } => {
            cmd_gradcheck(config.as_deref(), seed, tol, max_entries, &out)
        }
    }
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn write_text(out: &Path, name: &str, text: &str, manifest: &mut Manifest) -> Result<(), CliError> {
    let path = out.join(name);
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    manifest.outputs.push(name.into());
    Ok(())
}

fn write_json<T: serde::Serialize>(out: &Path, name: &str, value: &T, manifest: &mut Manifest) -> Result<(), CliError> {
    write_text(out, name, &(serde_json::to_string_pretty(value)? + "\n"), manifest)
}

fn cmd_generate(spec_path: Option<&Path>, seed: u64, out: &Path) -> Result<(), CliError> {
    let mut manifest = Manifest::new("generate");
    let spec: SyntheticSpec = match spec_path {
        Some(p) => {
            manifest = manifest.with_config_file(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    let table = spec.prototypes()?;
    let dialogues = generate_synthetic(&spec, seed)?;
    create_dir(out)?;
    save_corpus(out.join("corpus.jsonl"), &dialogues, &table.emotions)?;
    spec.vocab().save(out.join("vocab.json"))?;
    manifest.outputs.extend(["corpus.jsonl".to_string(), "vocab.json".to_string()]);
    write_text(out, "prototypes.json", &(table.to_json()? + "\n"), &mut manifest)?;
    let experiment = ExperimentConfig {
        encoder: EncoderConfig { vocab_size: spec.vocab_size, ..EncoderConfig::default() },
        data: DataConfig {
            prototypes: Some("prototypes.json".into()),
            ..DataConfig::default()
        },
        ..ExperimentConfig::default()
    };
    write_json(out, "experiment.json", &experiment, &mut manifest)?;
    manifest.config = serde_json::to_value(&spec)?;
    manifest.seeds = vec![seed];
    manifest.write(out)?;
    let n: usize = dialogues.iter().map(|d| d.len()).sum();
    info!("wrote {} dialogues ({n} utterances) to {}", dialogues.len(), out.display());
    Ok(())
}

/// Loads config and data, creates `out` and starts its manifest.
fn prepare(command: &str, args: &ConfigArgs) -> Result<(LoadedConfig, Dataset, Manifest), CliError> {
    let loaded = LoadedConfig::load(&args.config)?;
    let mut manifest = Manifest::new(command).with_config_file(&args.config)?;
    for p in loaded.inputs() {
        manifest.add_input(&p)?;
    }
    manifest.config = serde_json::to_value(&loaded.config)?;
    manifest.seeds = loaded.config.train.seeds.clone();
    let data = loaded.dataset()?;
    info!(
        "{} train / {} valid / {} test utterances, {} emotions",
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        data.emotions.len()
    );
    create_dir(&args.out)?;
    Ok((loaded, data, manifest))
}

fn cmd_train(args: &ConfigArgs) -> Result<(), CliError> {
    let (loaded, data, mut manifest) = prepare("train", args)?;
    let setup = loaded.config.setup();
    let runs = train(&data, &setup, args.exec())?;
    let mut csv = String::from("seed,method,weighted_f1,micro_f1_excl,cluster_distance,wallclock_s\n");
    for run in &runs {
        let r = &run.result;
        let ckpt = format!("checkpoint_seed{}.json", r.seed);
        save_checkpoint(args.out.join(&ckpt), &run.model, &data.emotions)?;
        manifest.outputs.push(ckpt);
        write_json(&args.out, &format!("run_seed{}.json", r.seed), r, &mut manifest)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        csv += &format!(
            "{},{},{:.6},{},{},{:.3}\n",
            r.seed,
            r.method,
            r.final_report.weighted_f1,
            opt(r.final_report.micro_f1_excl),
            opt(r.cluster_distance),
            r.wallclock
        );
        info!("seed {}: weighted-F1 {:.4}", r.seed, r.final_report.weighted_f1);
    }
    write_text(&args.out, "summary.csv", &csv, &mut manifest)?;
    manifest.write(&args.out)
}

fn cmd_evaluate(args: &ConfigArgs, checkpoint: &Path, split: SplitArg, scatter: bool) -> Result<(), CliError> {
    let (loaded, data, mut manifest) = prepare(if scatter { "scatter" } else { "evaluate" }, args)?;
    manifest.add_input(checkpoint)?;
    let (model, emotions) = load_checkpoint(checkpoint)?;
    model.check_vocab(&data.vocab)?;
    if emotions != data.emotions {
        return Err(sccl::Error::Data(format!(
            "checkpoint labels {:?} differ from the corpus labels {:?}",
            emotions.names(),
            data.emotions.names()
        ))
        .into());
    }
    let report = evaluate(&model, split.samples(&data), &emotions, loaded.config.train.eval_batch_size)?;
    if scatter {
        export_vad_scatter(&report, args.out.join("scatter.csv"))?;
        manifest.outputs.push("scatter.csv".into());
        info!("{} points written", report.vad_scatter.len());
    } else {
        write_json(&args.out, "report.json", &report, &mut manifest)?;
        info!(
            "weighted-F1 {:.4}, accuracy {:.4}{}",
            report.weighted_f1,
            report.accuracy(),
            report
                .micro_f1_excl
                .map(|m| format!(", micro-F1 excluding neutral {m:.4}"))
                .unwrap_or_default()
        );
    }
    manifest.write(&args.out)
}

fn cmd_compare(args: &ConfigArgs) -> Result<(), CliError> {
    let (loaded, data, mut manifest) = prepare("compare", args)?;
    let report = compare(&data, &loaded.config.setup(), &loaded.config.methods, args.exec())?;
    for row in &report.rows {
        info!("{}: weighted-F1 {:.4} ± {:.4}", row.method, row.weighted_f1_mean, row.weighted_f1_sd);
    }
    write_text(&args.out, "compare.csv", &report.to_csv(), &mut manifest)?;
    write_json(&args.out, "compare.json", &report, &mut manifest)?;
    manifest.write(&args.out)
}

fn cmd_stability(args: &ConfigArgs) -> Result<(), CliError> {
    let (loaded, data, mut manifest) = prepare("stability", args)?;
    let c = &loaded.config;
    let table = batch_stability_experiment(&data, &c.setup(), &c.stability_methods, &c.batch_sizes, args.exec())?;
    for (m, sd) in &table.sd_by_method {
        info!("{m}: SD across batch sizes {sd:.4}");
    }
    write_text(&args.out, "stability.csv", &table.to_csv(), &mut manifest)?;
    write_json(&args.out, "stability.json", &table, &mut manifest)?;
    manifest.write(&args.out)
}

fn cmd_gradcheck(config: Option<&Path>, seed: u64, tol: f64, max_entries: Option<usize>, out: &Path) -> Result<(), CliError> {
    let mut manifest = Manifest::new("gradcheck");
    let mut setup = gradcheck_setup();
    let table = match config {
        Some(p) => {
            let loaded = LoadedConfig::load(p)?;
            manifest = manifest.with_config_file(p)?;
            setup = loaded.config.setup();
            loaded.prototypes()?
        }
        None => PrototypeTable::builtin(sccl::prototypes::BuiltinSet::Iemocap),
    };
    manifest.config = serde_json::to_value(&setup)?;
    manifest.seeds = vec![seed];
    let opts = GradCheckOptions { tol, max_entries, seed, ..GradCheckOptions::default() };
    let start = std::time::Instant::now();
    let check = full_model_gradcheck(&setup, &table, seed, &opts)?;
    let secs = start.elapsed().as_secs_f64();
    create_dir(out)?;
    write_json(out, "gradcheck.json", &json!({ "seconds": secs, "check": &check }), &mut manifest)?;
    manifest.write(out)?;
    let worst = check.max_rel_err;
    println!(
        "{} gradcheck: max rel err {worst:.3e} (tol {tol:e}) over {} parameters, {} methods, {secs:.1}s",
        if check.passed { "PASS" } else { "FAIL" },
        check.parameters,
        check.methods.len()
    );
    if check.passed {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {worst:e} >= {tol:e}")))
    }
}
