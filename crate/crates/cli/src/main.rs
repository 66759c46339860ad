use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use senscov::baselines::{baseline_campaign, BaselineConfig, BaselineState, Metric};
use senscov::campaign::{load_campaign, save_campaign, CampaignResult};
use senscov::coverage::CoverageConfig;
use senscov::data::{load_csv, load_mnist_split, Dataset, Split};
use senscov::engine::{accuracy, load_model, model_hash, save_model, sgd_train, Model, TrainConfig};
use senscov::experiments::{correlate_experiment, fault_corpus, retrain_experiment, CorrelateConfig, RetrainConfig};
use senscov::fuzzer::{run_campaign, FuzzConfig};
use senscov::{Family, PerturbSpec};

const GIT_DESCRIBE: &str = env!("SENSCOV_GIT_DESCRIBE");

#[derive(Parser)]
#[command(
    name = "senscov",
    version,
    about = "Sensitivity-convergence coverage testing for neural classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an MLP or LeNet-1 model and save it as a THM1 file.
    Train(TrainArgs),
    /// Run a sensitivity-guided fuzzing campaign.
    Fuzz(FuzzArgs),
    /// Run an NC or KMNC coverage-driven baseline campaign.
    Baseline(BaselineArgs),
    /// Correlate error rate with faults found across a magnitude sweep.
    Correlate(CorrelateArgs),
    /// Fine-tune a model on a campaign's faults and measure the gain.
    Retrain(RetrainArgs),
    /// Print tables from a saved campaign.
    Report(ReportArgs),
}

#[derive(Args, Serialize)]
struct DataArgs {
    /// `mnist`, `mnist:train`, `mnist:test`, an IDX directory, or a CSV file.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the MNIST IDX files.
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    /// Half-open slice `start..end` of the dataset.
    #[arg(long)]
    range: Option<String>,
    /// Number of classes for CSV datasets.
    #[arg(long, default_value_t = 10)]
    num_classes: usize,
    /// CSV file has a header row.
    #[arg(long)]
    csv_header: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Arch {
    Mlp,
    Lenet1,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "mlp")]
    arch: Arch,
    /// Hidden widths of the MLP, comma separated.
    #[arg(long, default_value = "64", value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct CoverageArgs {
    /// Sampler size k.
    #[arg(long, default_value_t = 1000)]
    sample_size: usize,
    /// MCSE convergence threshold t.
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
    /// Keep the first iteration's neuron selection.
    #[arg(long)]
    freeze_selection: bool,
    #[arg(long, default_value_t = 2)]
    chains: usize,
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[arg(long, default_value_t = 500)]
    warmup: usize,
}

impl CoverageArgs {
    fn config(&self) -> CoverageConfig {
        let mut c = CoverageConfig {
            sample_size: self.sample_size,
            threshold: self.threshold,
            freeze_selection: self.freeze_selection,
            ..CoverageConfig::default()
        };
        c.mcmc.chains = self.chains;
        c.mcmc.draws = self.draws;
        c.mcmc.warmup = self.warmup;
        c
    }
}

#[derive(Args, Serialize)]
struct CampaignArgs {
    #[arg(long, default_value_t = 1.0)]
    coverage_target: f64,
    #[arg(long, default_value_t = 50)]
    max_iterations: usize,
    #[arg(long, default_value_t = 10)]
    inner_steps: usize,
    #[arg(long, default_value_t = 0.01)]
    step_size: f64,
    #[arg(long, default_value_t = 500)]
    batch_size: usize,
    #[command(flatten)]
    coverage: CoverageArgs,
}

impl CampaignArgs {
    fn apply(&self, cfg: &mut FuzzConfig) {
        cfg.coverage_target = self.coverage_target;
        cfg.max_iterations = self.max_iterations;
        cfg.inner_steps = self.inner_steps;
        cfg.step_size = self.step_size;
        cfg.batch_size = self.batch_size;
        cfg.coverage = self.coverage.config();
    }
}

#[derive(Args, Serialize)]
struct FuzzArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Fixed perturbation, e.g. `gaussian:sigma=0.03` or `pgd:eps=0.2,steps=10`.
    #[arg(long, conflicts_with = "family")]
    perturb: Option<String>,
    /// Family whose sweep range supplies random magnitudes.
    #[arg(long)]
    family: Option<String>,
    /// L-inf budget for ascent (defaults to the largest magnitude).
    #[arg(long)]
    budget: Option<f64>,
    #[command(flatten)]
    campaign: CampaignArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record per-phase wall-clock timings (output is no longer reproducible).
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MetricArg {
    Nc,
    Kmnc,
}

#[derive(Args, Serialize)]
struct BaselineArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    metric: MetricArg,
    #[arg(long, default_value_t = senscov::baselines::NC_THRESHOLD)]
    nc_threshold: f64,
    #[arg(long, default_value_t = senscov::baselines::KMNC_SECTIONS)]
    sections: usize,
    /// Training data for the KMNC profile.
    #[arg(long, default_value = "mnist:train")]
    profile_dataset: String,
    #[arg(long)]
    profile_range: Option<String>,
    #[arg(long, default_value = "gaussian")]
    family: String,
    #[arg(long, default_value_t = 5000)]
    max_attempts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct CorrelateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "gaussian")]
    family: String,
    #[command(flatten)]
    campaign: CampaignArgs,
    /// Perturbed copies averaged into each error rate.
    #[arg(long, default_value_t = 10)]
    error_replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct RetrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    campaign: PathBuf,
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    #[arg(long, default_value = "mnist:train")]
    train: String,
    #[arg(long)]
    train_range: Option<String>,
    #[arg(long, default_value = "mnist:test")]
    heldout: String,
    #[arg(long)]
    heldout_range: Option<String>,
    #[arg(long, default_value_t = 10)]
    num_classes: usize,
    #[arg(long)]
    csv_header: bool,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Perturbation applied to the held-out set.
    #[arg(long, default_value = "fgsm:eps=0.1")]
    eval_perturb: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Path of the fine-tuned model; a `.report.json` is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Table {
    Iterations,
    Faults,
    Coverage,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    #[arg(long)]
    campaign: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long, value_enum, default_value = "iterations")]
    table: Table,
    /// Iteration for the coverage table (defaults to the last).
    #[arg(long)]
    iteration: Option<usize>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once("..")
        .with_context(|| format!("range `{s}` is not of the form start..end"))?;
    let a: usize = a.trim().parse().with_context(|| format!("bad range start in `{s}`"))?;
    let b: usize = b.trim().parse().with_context(|| format!("bad range end in `{s}`"))?;
    if b <= a {
        bail!("empty range `{s}`");
    }
    Ok((a, b))
}

fn load_dataset(
    source: &str,
    data_dir: &Path,
    default_split: Split,
    range: Option<&str>,
    num_classes: usize,
    csv_header: bool,
) -> Result<Dataset> {
    let data = match source {
        "mnist" => load_mnist_split(data_dir, default_split)?,
        "mnist:train" => load_mnist_split(data_dir, Split::Train)?,
        "mnist:test" => load_mnist_split(data_dir, Split::Test)?,
        path if path.ends_with(".csv") => load_csv(path, num_classes, csv_header)?,
        dir if Path::new(dir).is_dir() => load_mnist_split(dir, default_split)?,
        other => bail!("unknown dataset `{other}`"),
    };
    match range {
        None => Ok(data),
        Some(r) => {
            let (a, b) = parse_range(r)?;
            if b > data.len() {
                bail!("range {r} exceeds the dataset size {}", data.len());
            }
            Ok(data.slice(a, b - a))
        }
    }
}

impl DataArgs {
    fn load(&self, default_split: Split) -> Result<Dataset> {
        let source = self.dataset.as_deref().unwrap_or("mnist");
        load_dataset(
            source,
            &self.data_dir,
            default_split,
            self.range.as_deref(),
            self.num_classes,
            self.csv_header,
        )
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn write_manifest(
    command: &str,
    out: &Path,
    seed: Option<u64>,
    config: &impl Serialize,
    extra: serde_json::Value,
) -> Result<()> {
    let manifest = json!({
        "tool": "senscov",
        "version": env!("CARGO_PKG_VERSION"),
        "git_describe": GIT_DESCRIBE,
        "command": command,
        "seed": seed,
        "config": config,
        "output": out.file_name().map(|s| s.to_string_lossy().into_owned()),
        "details": extra,
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = manifest_path(out);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_family(s: &str) -> Result<Family> {
    Ok(s.parse::<Family>()?)
}

fn load(model: &Path) -> Result<Model> {
    load_model(model).with_context(|| format!("loading model {}", model.display()))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = a.data.load(Split::Train)?;
    let input_shape = data.inputs[0].shape().to_vec();
    let init = match a.arch {
        Arch::Mlp => {
            let features: usize = input_shape.iter().product();
            let mut widths = vec![features];
            widths.extend(&a.hidden);
            widths.push(data.num_classes);
            Model::mlp(input_shape, &widths, a.seed)?
        }
        Arch::Lenet1 => {
            if input_shape != [1, 28, 28] {
                bail!("lenet1 needs 1x28x28 inputs, got {input_shape:?}");
            }
            Model::lenet1(a.seed)?
        }
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let model = sgd_train(&init, &data, &cfg)?;
    let acc = accuracy(&model, &data)?;
    save_model(&model, &a.out)?;
    write_manifest(
        "train",
        &a.out,
        Some(a.seed),
        a,
        json!({
            "model_hash": model_hash(&model)?,
            "num_neurons": model.num_neurons(),
            "training_examples": data.len(),
            "training_accuracy": acc,
        }),
    )?;
    println!(
        "trained {} ({} neurons) on {} examples: training accuracy {:.4}",
        model.arch_name(),
        model.num_neurons(),
        data.len(),
        acc
    );
    Ok(())
}

fn partial_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "campaign".into());
    out.with_file_name(format!("{stem}.partial.json"))
}

fn remove_partial(partial: &Path) {
    let _ = fs::remove_file(senscov::campaign::blob_path(partial));
    let _ = fs::remove_file(partial);
}

fn summarize(result: &CampaignResult) -> serde_json::Value {
    json!({
        "model_hash": result.model_hash,
        "iterations": result.iterations.len(),
        "inputs_generated": result.inputs_generated,
        "faults": result.faults.len(),
        "final_coverage": result.final_coverage(),
        "termination": result.termination,
    })
}

fn cmd_fuzz(a: &FuzzArgs) -> Result<()> {
    let model = load(&a.model)?;
    let data = a.data.load(Split::Test)?;
    let mut cfg = match (&a.perturb, &a.family) {
        (Some(p), _) => FuzzConfig::for_spec(p.parse::<PerturbSpec>()?, a.seed),
        (None, Some(f)) => FuzzConfig::for_family(parse_family(f)?, a.seed),
        (None, None) => FuzzConfig::for_family(Family::Gaussian, a.seed),
    };
    a.campaign.apply(&mut cfg);
    if let Some(b) = a.budget {
        cfg.budget = b;
    }
    cfg.record_timings = a.timings;
    let partial = partial_path(&a.out);
    let result = run_campaign(&model, &data, &cfg, |r| save_campaign(r, &partial))?;
    save_campaign(&result, &a.out)?;
    remove_partial(&partial);
    let summary = summarize(&result);
    write_manifest(
        "fuzz",
        &a.out,
        Some(a.seed),
        &json!({ "args": a, "resolved": cfg }),
        summary.clone(),
    )?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_baseline(a: &BaselineArgs) -> Result<()> {
    let model = load(&a.model)?;
    let data = a.data.load(Split::Test)?;
    let metric = match a.metric {
        MetricArg::Nc => Metric::Nc {
            threshold: a.nc_threshold,
        },
        MetricArg::Kmnc => Metric::Kmnc { sections: a.sections },
    };
    let profile = match a.metric {
        MetricArg::Kmnc => Some(load_dataset(
            &a.profile_dataset,
            &a.data.data_dir,
            Split::Train,
            a.profile_range.as_deref(),
            a.data.num_classes,
            a.data.csv_header,
        )?),
        MetricArg::Nc => None,
    };
    let mut state = BaselineState::for_model(&model, &metric, profile.as_ref())?;
    let cfg = BaselineConfig {
        metric,
        family: parse_family(&a.family)?,
        max_attempts: a.max_attempts,
        seed: a.seed,
    };
    let result = baseline_campaign(&model, &data, &mut state, &cfg)?;
    save_campaign(&result, &a.out)?;
    let summary = summarize(&result);
    write_manifest(
        "baseline",
        &a.out,
        Some(a.seed),
        &json!({ "args": a, "resolved": cfg }),
        summary.clone(),
    )?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_correlate(a: &CorrelateArgs) -> Result<()> {
    let model = load(&a.model)?;
    let data = a.data.load(Split::Test)?;
    let mut cfg = CorrelateConfig::new(parse_family(&a.family)?, a.seed);
    a.campaign.apply(&mut cfg.campaign);
    cfg.error_replicates = a.error_replicates;
    let report = correlate_experiment(&model, &data, &cfg)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(&a.out, text)?;
    write_manifest(
        "correlate",
        &a.out,
        Some(a.seed),
        &json!({ "args": a, "resolved": cfg }),
        json!({ "pearson": report.pearson }),
    )?;
    print!("{}", report.to_csv());
    println!("pearson,{}", report.pearson);
    Ok(())
}

fn cmd_retrain(a: &RetrainArgs) -> Result<()> {
    let model = load(&a.model)?;
    let campaign: CampaignResult = load_campaign(&a.campaign)?;
    let train = load_dataset(
        &a.train,
        &a.data_dir,
        Split::Train,
        a.train_range.as_deref(),
        a.num_classes,
        a.csv_header,
    )?;
    let heldout = load_dataset(
        &a.heldout,
        &a.data_dir,
        Split::Test,
        a.heldout_range.as_deref(),
        a.num_classes,
        a.csv_header,
    )?;
    let (inputs, labels) = fault_corpus(&campaign);
    let cfg = RetrainConfig {
        train: TrainConfig {
            epochs: a.epochs,
            learning_rate: a.lr,
            batch_size: a.batch_size,
            seed: a.seed,
        },
        eval_spec: a.eval_perturb.parse()?,
    };
    let (tuned, report) = retrain_experiment(&model, &train, &heldout, &inputs, &labels, &cfg)?;
    save_model(&tuned, &a.out)?;
    let stem = a
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "retrained".into());
    let report_path = a.out.with_file_name(format!("{stem}.report.json"));
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(&report_path, text)?;
    write_manifest(
        "retrain",
        &a.out,
        Some(a.seed),
        &json!({ "args": a, "resolved": cfg }),
        json!({ "model_hash": model_hash(&tuned)?, "report": report, "campaign": a.campaign }),
    )?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let c: CampaignResult = load_campaign(&a.campaign)?;
    let report = match a.table {
        Table::Iterations => match a.format {
            Format::Csv => c.iterations_csv(),
            Format::Json => serde_json::to_string_pretty(&c.iterations)? + "\n",
        },
        Table::Faults => match a.format {
            Format::Csv => c.faults_csv(),
            Format::Json => serde_json::to_string_pretty(&c.faults)? + "\n",
        },
        Table::Coverage => {
            let r = match a.iteration {
                Some(i) => c.reports.iter().find(|r| r.iteration == i),
                None => c.reports.last(),
            }
            .context("campaign has no coverage report for that iteration")?;
            match a.format {
                Format::Csv => r.to_csv(),
                Format::Json => serde_json::to_string_pretty(r)? + "\n",
            }
        }
    };
    print!("{report}");
    if let Some(out) = &a.out {
        fs::write(out, &report)?;
        write_manifest("report", out, None, a, json!({ "model_hash": c.model_hash }))?;
    }
    Ok(())
}

fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var("SENSCOV_WORKERS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("SENSCOV_WORKERS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("SENSCOV_WORKERS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let run = configure_workers().and_then(|_| match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Fuzz(a) => cmd_fuzz(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Correlate(a) => cmd_correlate(a),
        Command::Retrain(a) => cmd_retrain(a),
        Command::Report(a) => cmd_report(a),
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
