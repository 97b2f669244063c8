use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dore_cli::backend::{BackendSpec, BACKEND_URL_VAR};
use dore_cli::dataset::Dataset;
use dore_cli::evaluate::{compare, compare_runs, load_predictions, run_eval};
use dore_cli::extract::{choose_exemplar, run_extract, write_run, ExtractConfig, RunInfo};
use dore_cli::output::{unix_now, write_atomic};
use dore_cli::serve::serve_blocking;
use dore_cli::sweep::{k_sweep, threshold_grid, threshold_sweep, to_table};
use dore_core::backend::mock::MockBackend;
use dore_core::backend::LanguageModel;
use dore_core::decoder::{DecoderConfig, DisparitySource, Selection};
use dore_core::eval::{ClosureMode, EvalOptions};
use dore_core::prompt::PromptMode;
use dore_core::scoring::Aggregation;
use dore_core::triplet::MatchMode;

#[derive(Parser)]
#[command(name = "dore", version, about = "Dialogue ontology relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract relations from every dialogue of a dataset.
    Extract(ExtractArgs),
    /// Score prediction files against gold relations.
    Eval(EvalArgs),
    /// Sweep the selection threshold or the branch count.
    Sweep(SweepArgs),
    /// Serve a scripted mock model over HTTP.
    ServeMock(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatchArg {
    Normalized,
    Exact,
}

impl From<MatchArg> for MatchMode {
    fn from(m: MatchArg) -> Self {
        match m {
            MatchArg::Normalized => MatchMode::Normalized,
            MatchArg::Exact => MatchMode::ByteExact,
        }
    }
}

#[derive(Args, Clone)]
struct DecodeArgs {
    /// Dialogue records, one JSON object per line.
    #[arg(long)]
    data: PathBuf,
    /// `mock:<script.json>` or an HTTP base URL.
    #[arg(long, env = BACKEND_URL_VAR)]
    backend: String,
    /// Number of first-token branches.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value = "mean")]
    aggregation: Aggregation,
    #[arg(long, default_value = "branch-argmax")]
    selection: Selection,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "on")]
    constrained: OnOff,
    #[arg(long, default_value = "per-type")]
    mode: PromptMode,
    /// Prompt template file; the built-in template is used otherwise.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value = "masked")]
    disparity_source: DisparitySource,
    #[arg(long = "match", value_enum, default_value = "normalized")]
    match_mode: MatchArg,
    #[arg(long, default_value_t = 512)]
    max_new_tokens: usize,
    /// Ranked entries requested per step.
    #[arg(long, default_value_t = 32)]
    top_m: usize,
    /// Annotated records to draw the one-shot exemplar from.
    #[arg(long)]
    exemplars: Option<PathBuf>,
    /// Seed for exemplar choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Dialogues decoded concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Dialogue records with gold relations.
    #[arg(long)]
    gold: PathBuf,
    /// Predictions file to score.
    #[arg(long, required_unless_present = "runs_a")]
    pred: Option<PathBuf>,
    /// Second predictions file for a paired comparison.
    #[arg(long, requires = "pred")]
    compare: Option<PathBuf>,
    /// Prediction files of system A across seeds.
    #[arg(long, num_args = 2.., requires = "runs_b")]
    runs_a: Vec<PathBuf>,
    /// Prediction files of system B across seeds.
    #[arg(long, num_args = 2.., requires = "runs_a")]
    runs_b: Vec<PathBuf>,
    #[arg(long, default_value = "transitive")]
    closure: ClosureMode,
    /// Also report scores with predicted equivalences added to the closure.
    #[arg(long)]
    prediction_closure: bool,
    #[arg(long = "match", value_enum, default_value = "normalized")]
    match_mode: MatchArg,
    /// Write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Threshold,
    K,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(value_enum)]
    kind: SweepKind,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Threshold grid step.
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    /// Branch counts for the k sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 5])]
    ks: Vec<usize>,
    #[arg(long, default_value = "transitive")]
    closure: ClosureMode,
    /// Write the rows as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Mock script in JSON.
    #[arg(long)]
    script: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

struct Prepared {
    dataset: Dataset,
    cfg: ExtractConfig,
    backend: Arc<dyn LanguageModel>,
    backend_desc: String,
}

fn prepare(a: &DecodeArgs) -> Result<Prepared> {
    let decoder = DecoderConfig {
        k: a.k,
        max_new_tokens: a.max_new_tokens,
        top_m: a.top_m,
        constrained: matches!(a.constrained, OnOff::On),
        disparity_source: a.disparity_source,
        aggregation: a.aggregation,
        selection: a.selection,
        threshold: a.threshold,
        match_mode: a.match_mode.into(),
        ..DecoderConfig::default()
    };
    decoder.validate()?;
    let mut cfg = ExtractConfig::new(decoder, a.mode);
    if let Some(t) = &a.template {
        cfg = cfg.with_template_file(t)?;
    }
    cfg.seed = a.seed;
    cfg.workers = a.workers;
    if let Some(pool_path) = &a.exemplars {
        let pool = Dataset::load(pool_path)?;
        let rec = choose_exemplar(&pool, a.seed)
            .with_context(|| format!("{} has no annotated dialogue", pool_path.display()))?;
        cfg.exemplar = Some((rec.dialogue_id.clone(), rec.as_exemplar()));
    }
    let dataset = Dataset::load(&a.data)?;
    log::info!("{}: {}", a.data.display(), dataset.stats());
    let spec = BackendSpec::resolve(Some(&a.backend)).map_err(anyhow::Error::msg)?;
    let backend = spec.connect()?;
    let backend_desc = format!("{spec} ({})", backend.describe());
    Ok(Prepared {
        dataset,
        cfg,
        backend,
        backend_desc,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    write_atomic(path, body.as_bytes()).with_context(|| path.display().to_string())
}

fn extract(a: ExtractArgs) -> Result<ExitCode> {
    let started = unix_now();
    let p = prepare(&a.decode)?;
    let run = run_extract(&p.dataset, &p.cfg, p.backend.as_ref())?;
    let info = RunInfo {
        dataset_path: &a.decode.data,
        dataset: &p.dataset,
        backend: p.backend_desc,
        started_unix: started,
    };
    let manifest = write_run(&a.out, &run, &p.cfg, &info)?;
    println!(
        "{} dialogues decoded, {} skipped, {} with errors; {} relations in the ontology",
        run.outputs.len(),
        manifest.skipped.len(),
        manifest.failed.len(),
        run.ontology().len()
    );
    Ok(if manifest.partial {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let dataset = Dataset::load(&a.gold)?;
    let mode: MatchMode = a.match_mode.into();
    let options = EvalOptions {
        closure: a.closure,
        prediction_closure: a.prediction_closure,
    };
    let score = |path: &Path| -> Result<_> {
        let preds = load_predictions(path, mode)?;
        Ok(run_eval(&preds, &path.display().to_string(), &dataset, mode, &options)?)
    };
    if let Some(pred) = &a.pred {
        let mut report = score(pred)?;
        if let Some(other) = &a.compare {
            report.significance = Some(compare(&report, &score(other)?)?);
        }
        print!("{}", report.to_table());
        if let Some(out) = &a.json {
            write_json(out, &report)?;
        }
    }
    if !a.runs_a.is_empty() {
        let ra = a.runs_a.iter().map(|p| score(p)).collect::<Result<Vec<_>>>()?;
        let rb = a.runs_b.iter().map(|p| score(p)).collect::<Result<Vec<_>>>()?;
        let t = compare_runs(&ra, &rb)?;
        println!(
            "{}: t = {:.4}, df = {:.2}, p = {:.4}{}",
            t.test,
            t.statistic,
            t.df,
            t.p_value,
            if t.significant { ", significant at 5%" } else { "" }
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: SweepArgs) -> Result<ExitCode> {
    if !(a.step > 0.0 && a.step <= 1.0) {
        bail!("--step must lie in (0, 1]");
    }
    let p = prepare(&a.decode)?;
    let options = EvalOptions {
        closure: a.closure,
        prediction_closure: false,
    };
    let mode = p.cfg.decoder.match_mode;
    let rows = match a.kind {
        SweepKind::Threshold => {
            let run = run_extract(&p.dataset, &p.cfg, p.backend.as_ref())?;
            threshold_sweep(&run, &threshold_grid(a.step), &p.dataset, mode, &options)?
        }
        SweepKind::K => k_sweep(&a.ks, &p.cfg, &p.dataset, p.backend.as_ref(), &options)?,
    };
    print!("{}", to_table(&rows));
    if let Some(out) = &a.json {
        write_json(out, &rows)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn serve_mock(a: ServeArgs) -> Result<ExitCode> {
    let backend = MockBackend::from_file(&a.script)?;
    log::info!("serving {} on http://{}", a.script.display(), a.addr);
    serve_blocking(Arc::new(backend), a.addr)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract(a) => extract(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::ServeMock(a) => serve_mock(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
