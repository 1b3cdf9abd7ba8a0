//! `wpnas` command-line driver. Every subcommand prints a one-line JSON
//! summary on success; failures print to stderr and exit with status 1,
//! usage errors with status 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use wpnas::engine::pipeline::{self, Artifacts, PipelineConfig, RunOptions};
use wpnas::engine::{BackendKind, SearchTrace};
use wpnas::metrics::{kendall_tau, mse, normalized_mse, pearson};
use wpnas::oracle::{generate_surrogate_calibrated, load_table, BenchmarkTable};
use wpnas::predictor::{load_labeled, save_labeled, FewShotPredictor};
use wpnas::{Error, Result};

#[derive(Parser)]
#[command(
    name = "wpnas",
    version,
    about = "Architecture search with self-critical policy gradients"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Run configuration (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long, default_value = "out")]
    output: PathBuf,
    /// Benchmark table file, or a directory searched instead of $WPNAS_TABLE_DIR.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark table.
    GenSurrogate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        space: Option<String>,
        /// Kendall τ between GT and WS accuracies.
        #[arg(long)]
        target_tau: Option<f64>,
    },
    /// Uniform-sampling SuperNet warmup (toy space).
    Warmup {
        #[command(flatten)]
        common: Common,
    },
    /// Collect ground-truth architecture/accuracy pairs.
    CollectGt {
        #[command(flatten)]
        common: Common,
    },
    /// Train the few-shot predictor on collected pairs.
    TrainPredictor {
        #[command(flatten)]
        common: Common,
        /// Labelled pairs; defaults to <output>/gt_pairs.csv.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Run the architecture search.
    Search {
        #[command(flatten)]
        common: Common,
    },
    /// All five stages end to end.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Correlation metrics between two labelled CSV files.
    EvalMetrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Trace curves (raw and moving averages) as CSV for plotting.
    ExportTrace {
        #[command(flatten)]
        common: Common,
        /// Trace JSON; defaults to <output>/trace.json.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        window: usize,
    },
}

struct Ctx {
    cfg: PipelineConfig,
    art: Artifacts,
    opts: RunOptions,
}

impl Common {
    fn load(&self) -> Result<Ctx> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let mut opts = RunOptions {
            jobs: self.jobs.max(1),
            table_dir: None,
        };
        match &self.table {
            Some(t) if t.is_dir() => opts.table_dir = Some(t.clone()),
            Some(t) => cfg.table = Some(t.clone()),
            None => {}
        }
        cfg.validate()?;
        Ok(Ctx {
            cfg,
            art: Artifacts::new(&self.output)?,
            opts,
        })
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

impl Ctx {
    /// Table from an earlier stage in the output directory, else stage 1.
    fn table(&self) -> Result<BenchmarkTable> {
        if self.cfg.table.is_none() && self.art.table().exists() {
            return load_table(&self.art.table());
        }
        pipeline::benchmark_table(&self.cfg, &self.opts)
    }

    fn warmed_supernet(&self) -> Result<wpnas::supernet::SuperNet> {
        let mut net = pipeline::fresh_supernet(&self.cfg)?;
        if !self.art.dir.join("supernet_base.json").exists() {
            return Err(wpnas::Error::InvalidArgument(format!(
                "no SuperNet checkpoint in {}; run `warmup` first",
                self.art.dir.display()
            )));
        }
        net.load_weights(&self.art.dir)?;
        Ok(net)
    }

    fn predictor(&self) -> Result<Option<FewShotPredictor>> {
        if !self.cfg.ablation.predictor {
            return Ok(None);
        }
        let p = self.art.predictor();
        if !p.exists() {
            return Err(Error::InvalidArgument(format!(
                "predictor enabled but {} is missing; run `train-predictor` first",
                p.display()
            )));
        }
        FewShotPredictor::load(&p).map(Some)
    }
}

fn gen_surrogate(common: &Common, space: Option<String>, target_tau: Option<f64>) -> Result<Value> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = space {
        cfg.space = s;
    }
    if let Some(t) = target_tau {
        cfg.surrogate.ws_rank_corr_target = t;
    }
    if let Some(s) = common.seed {
        cfg.surrogate.seed = s;
    }
    let space = cfg.search_space()?;
    let (table, cal) = generate_surrogate_calibrated(&space, &cfg.surrogate)?;
    let art = Artifacts::new(&common.output)?;
    table.save(&art.table())?;
    Ok(json!({
        "command": "gen-surrogate",
        "space": space.id,
        "rows": table.len(),
        "rho": cal.rho,
        "measured_tau": cal.measured_tau,
        "path": path_str(&art.table()),
    }))
}

fn warmup(common: &Common) -> Result<Value> {
    let ctx = common.load()?;
    let (net, _, log) = pipeline::run_warmup(&ctx.cfg)?;
    net.save(&ctx.art.dir)?;
    pipeline::save_warmup_log(&ctx.art.warmup_log(), &log)?;
    Ok(json!({
        "command": "warmup",
        "epochs": log.epoch_loss.len(),
        "final_loss": log.epoch_loss.last(),
        "hyper": net.hyper.is_some(),
        "dir": path_str(&ctx.art.dir),
    }))
}

fn collect_gt(common: &Common) -> Result<Value> {
    let ctx = common.load()?;
    let pairs = match ctx.cfg.search.backend {
        BackendKind::Tabular => pipeline::collect_tabular(&ctx.cfg, &ctx.table()?)?,
        BackendKind::ToySupernet => {
            let net = ctx.warmed_supernet()?;
            let data = pipeline::toy_dataset(&ctx.cfg)?;
            pipeline::collect_toy(&ctx.cfg, &net, &data, ctx.opts.jobs)?
        }
    };
    save_labeled(&ctx.art.gt_pairs(), &pairs)?;
    Ok(json!({
        "command": "collect-gt",
        "pairs": pairs.len(),
        "path": path_str(&ctx.art.gt_pairs()),
    }))
}

fn train_predictor(common: &Common, pairs: Option<PathBuf>) -> Result<Value> {
    let ctx = common.load()?;
    let path = pairs.unwrap_or_else(|| ctx.art.gt_pairs());
    let data = load_labeled(&path)?;
    let trained = pipeline::train_predictor(&ctx.cfg, &data)?;
    trained.model.save(&ctx.art.predictor())?;
    Ok(json!({
        "command": "train-predictor",
        "pairs": data.len(),
        "val_kendall_tau": trained.val_tau,
        "final_loss": trained.final_loss,
        "path": path_str(&ctx.art.predictor()),
    }))
}

fn search(common: &Common) -> Result<Value> {
    let ctx = common.load()?;
    let predictor = ctx.predictor()?;
    let outcome = match ctx.cfg.search.backend {
        BackendKind::Tabular => pipeline::search_tabular(&ctx.cfg, &ctx.table()?, predictor.as_ref()),
        BackendKind::ToySupernet => {
            let net = ctx.warmed_supernet()?;
            let data = pipeline::toy_dataset(&ctx.cfg)?;
            pipeline::search_toy(&ctx.cfg, net, data, predictor.as_ref()).and_then(|(o, net, _)| {
                net.save(&ctx.art.dir.join("searched"))?;
                Ok(o)
            })
        }
    };
    let outcome = outcome.inspect_err(|e| dump_diverged(e, &ctx.art))?;
    outcome.save(&ctx.art)?;
    Ok(json!({
        "command": "search",
        "arch": outcome.arch.key(),
        "steps": outcome.trace.len(),
        "trace": path_str(&ctx.art.trace_csv()),
    }))
}

fn run_pipeline(common: &Common) -> Result<Value> {
    let ctx = common.load()?;
    let report = pipeline::pipeline(&ctx.cfg, &ctx.art.dir, &ctx.opts).inspect_err(|e| dump_diverged(e, &ctx.art))?;
    let mut v = serde_json::to_value(&report)?;
    v["command"] = json!("pipeline");
    v["seed"] = json!(ctx.cfg.seed);
    v["config_hash"] = json!(format!("{:016x}", ctx.cfg.hash()?));
    Ok(v)
}

/// Writes the partial trace of a diverged search next to the other outputs.
fn dump_diverged(e: &Error, art: &Artifacts) {
    let mut e = e;
    while let Error::Stage { source, .. } = e {
        e = source;
    }
    if let Error::Diverged { trace, .. } = e {
        let path = art.dir.join("trace_diverged.csv");
        match trace.save_csv(&path) {
            Ok(()) => eprintln!("partial trace written to {}", path.display()),
            Err(w) => eprintln!("could not write partial trace: {w}"),
        }
    }
}

fn eval_metrics(pred: &Path, truth: &Path) -> Result<Value> {
    let p = load_labeled(pred)?;
    let t = load_labeled(truth)?;
    let truth_by_arch: std::collections::HashMap<_, _> = t.iter().map(|l| (&l.arch, l.accuracy)).collect();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for l in &p {
        let Some(&y) = truth_by_arch.get(&l.arch) else {
            return Err(Error::InvalidArgument(format!(
                "architecture {} from {} is missing in {}",
                l.arch.key(),
                pred.display(),
                truth.display()
            )));
        };
        a.push(l.accuracy);
        b.push(y);
    }
    Ok(json!({
        "command": "eval-metrics",
        "n": a.len(),
        "kendall_tau": kendall_tau(&a, &b)?,
        "pearson": pearson(&a, &b)?,
        "mse": mse(&a, &b)?,
        "normalized_mse": normalized_mse(&a, &b)?,
    }))
}

fn export_trace(common: &Common, input: Option<PathBuf>, window: usize) -> Result<Value> {
    let art = Artifacts::new(&common.output)?;
    let input = input.unwrap_or_else(|| art.trace_json());
    let trace = SearchTrace::load_json(&input)?;
    let path = art.dir.join("curves.csv");
    trace.write_curves_csv(std::fs::File::create(&path)?, window)?;
    Ok(json!({
        "command": "export-trace",
        "rows": trace.len(),
        "window": window,
        "path": path_str(&path),
    }))
}

fn run(cli: Cli) -> Result<Value> {
    match cli.cmd {
        Cmd::GenSurrogate {
            common,
            space,
            target_tau,
        } => gen_surrogate(&common, space, target_tau),
        Cmd::Warmup { common } => warmup(&common),
        Cmd::CollectGt { common } => collect_gt(&common),
        Cmd::TrainPredictor { common, pairs } => train_predictor(&common, pairs),
        Cmd::Search { common } => search(&common),
        Cmd::Pipeline { common } => run_pipeline(&common),
        Cmd::EvalMetrics { pred, truth } => eval_metrics(&pred, &truth),
        Cmd::ExportTrace { common, input, window } => export_trace(&common, input, window),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
