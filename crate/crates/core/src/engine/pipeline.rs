//! The five-stage run: (1) SuperNet warmup or surrogate generation,
//! (2) ground-truth pairs, (3) predictor training, (4) search, (5) final
//! evaluation. Each stage is callable on its own; [`pipeline`] chains them
//! in memory and writes every artifact under one output directory.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{search, BackendKind, CachedScorer, SearchConfig, SearchTrace, TabularBackend, ToySuperNetBackend};
use crate::distribution::ArchDistribution;
use crate::error::{invalid, Error, Result};
use crate::metrics::{best_rank, kendall_tau, EvalReport};
use crate::numerics::rng::{child, derive_indexed, derive_seed, fnv1a};
use crate::oracle::{generate_surrogate, load_table, resolve_table_path, BenchmarkTable, SurrogateConfig};
use crate::predictor::{save_labeled, FewShotPredictor, LabeledArch, PredictorConfig};
use crate::search_space::{Architecture, FlopsModel, SearchSpace};
use crate::supernet::{
    collect_gt_pairs, finetune, train_from_scratch, warmup, SuperNet, SuperNetConfig, ToyDataset, WarmupLog,
};

/// Row-structure toggles: probabilistic sampling, predictor reward term,
/// weakly weight sharing. All off is the uniform-sampling baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub ps: bool,
    pub predictor: bool,
    pub wws: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            ps: true,
            predictor: true,
            wws: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub space: String,
    /// Root of every derived stream except the surrogate's, whose own seed
    /// identifies the benchmark.
    pub seed: u64,
    /// Ground-truth pairs collected in stage 2.
    pub collect_n: usize,
    /// Pairs held out from predictor training for validation.
    pub predictor_val: usize,
    /// TABULAR: architectures sampled for the correlation metrics.
    pub eval_sample: usize,
    /// TOY: from-scratch training epochs for the final architecture.
    pub eval_epochs: usize,
    /// TABULAR: existing table file instead of a generated surrogate.
    pub table: Option<PathBuf>,
    pub ablation: Ablation,
    pub surrogate: SurrogateConfig,
    pub supernet: SuperNetConfig,
    pub predictor: PredictorConfig,
    pub search: SearchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            space: "toy".into(),
            seed: 0,
            collect_n: 200,
            predictor_val: 30,
            eval_sample: 200,
            eval_epochs: 600,
            table: None,
            ablation: Ablation::default(),
            surrogate: SurrogateConfig::default(),
            supernet: SuperNetConfig::default(),
            predictor: PredictorConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let space = self.search_space()?;
        self.surrogate.validate()?;
        self.supernet.validate()?;
        self.predictor.validate()?;
        self.search.validate()?;
        if self.collect_n < 2 {
            return Err(invalid("collect_n must be at least 2"));
        }
        if self.search.backend == BackendKind::ToySupernet && space.id != "toy" {
            return Err(invalid(format!(
                "TOY_SUPERNET backend needs the toy space, got {}",
                space.id
            )));
        }
        Ok(())
    }

    pub fn search_space(&self) -> Result<SearchSpace> {
        SearchSpace::from_id(&self.space)
    }

    /// Hash of the canonical JSON with the seed zeroed, so runs of one
    /// configuration under different seeds share a hash.
    pub fn hash(&self) -> Result<u64> {
        let mut c = self.clone();
        c.seed = 0;
        Ok(fnv1a(serde_json::to_string(&c)?.as_bytes()))
    }

    /// Sub-configs with seeds derived from `seed` and ablation flags applied.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.predictor.seed = derive_seed(self.seed, "predictor");
        c.search.seed = derive_seed(self.seed, "search");
        c.search.probabilistic_sampling = self.ablation.ps;
        c.supernet.hyper_enabled &= self.ablation.wws;
        c
    }
}

/// File names inside an output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn table(&self) -> PathBuf {
        self.dir.join("table.csv")
    }
    pub fn warmup_log(&self) -> PathBuf {
        self.dir.join("warmup.csv")
    }
    pub fn gt_pairs(&self) -> PathBuf {
        self.dir.join("gt_pairs.csv")
    }
    pub fn predictor(&self) -> PathBuf {
        self.dir.join("predictor.json")
    }
    pub fn dist(&self) -> PathBuf {
        self.dir.join("dist.json")
    }
    pub fn trace_csv(&self) -> PathBuf {
        self.dir.join("trace.csv")
    }
    pub fn trace_json(&self) -> PathBuf {
        self.dir.join("trace.json")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
    pub fn results(&self) -> PathBuf {
        self.dir.join("results.csv")
    }
}

/// Runtime knobs that are not part of the experiment's identity.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub jobs: usize,
    /// Directory searched for relative table paths; overrides `WPNAS_TABLE_DIR`.
    pub table_dir: Option<PathBuf>,
}

/// Stage 1 (TABULAR): the configured table file or a generated surrogate.
pub fn benchmark_table(cfg: &PipelineConfig, opts: &RunOptions) -> Result<BenchmarkTable> {
    let space = cfg.search_space()?;
    let table = match &cfg.table {
        Some(name) => load_table(&resolve_table_path(name, opts.table_dir.as_deref())?)?,
        None => generate_surrogate(&space, &cfg.surrogate)?,
    };
    if table.space_id != space.id {
        return Err(invalid(format!(
            "table is for space {}, config says {}",
            table.space_id, space.id
        )));
    }
    Ok(table)
}

pub fn toy_dataset(cfg: &PipelineConfig) -> Result<ToyDataset> {
    ToyDataset::generate(
        derive_seed(cfg.seed, "dataset"),
        cfg.supernet.n_train,
        cfg.supernet.n_val,
    )
}

/// Freshly initialised SuperNet for `cfg` (HyperNet per the WWS flag).
pub fn fresh_supernet(cfg: &PipelineConfig) -> Result<SuperNet> {
    let e = cfg.effective();
    SuperNet::new(&e.search_space()?, &e.supernet, derive_seed(cfg.seed, "supernet"))
}

/// Stage 1 (TOY): uniform-sampling warmup.
pub fn run_warmup(cfg: &PipelineConfig) -> Result<(SuperNet, ToyDataset, WarmupLog)> {
    let e = cfg.effective();
    let data = toy_dataset(cfg)?;
    let mut net = fresh_supernet(cfg)?;
    let log = warmup(&mut net, &data, &e.supernet, derive_seed(cfg.seed, "warmup"))?;
    Ok((net, data, log))
}

pub fn save_warmup_log(path: &Path, log: &WarmupLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in log.epoch_loss.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Stage 2 (TABULAR): `collect_n` distinct uniform architectures labelled
/// with their table GT accuracy.
pub fn collect_tabular(cfg: &PipelineConfig, table: &BenchmarkTable) -> Result<Vec<LabeledArch>> {
    if cfg.collect_n > table.len() {
        return Err(invalid(format!(
            "collect_n {} exceeds the {} table rows",
            cfg.collect_n,
            table.len()
        )));
    }
    let mut archs: Vec<&Architecture> = table.iter().map(|(a, _)| a).collect();
    archs.shuffle(&mut child(cfg.seed, "pipeline/collect"));
    archs[..cfg.collect_n]
        .iter()
        .map(|&a| LabeledArch::new(a.clone(), table.lookup(a)?.gt))
        .collect()
}

/// Stage 2 (TOY): fine-tuned labels from the warmed-up SuperNet.
pub fn collect_toy(cfg: &PipelineConfig, net: &SuperNet, data: &ToyDataset, jobs: usize) -> Result<Vec<LabeledArch>> {
    let e = cfg.effective();
    collect_gt_pairs(
        net,
        data,
        cfg.collect_n,
        &e.supernet,
        derive_seed(cfg.seed, "collect"),
        jobs,
    )
}

#[derive(Clone, Debug)]
pub struct TrainedPredictor {
    pub model: FewShotPredictor,
    /// Kendall τ on the held-out pairs, when enough pairs exist to hold some out.
    pub val_tau: Option<f64>,
    pub final_loss: f64,
}

/// Stage 3: few-shot predictor on all but the last `predictor_val` pairs.
pub fn train_predictor(cfg: &PipelineConfig, pairs: &[LabeledArch]) -> Result<TrainedPredictor> {
    let e = cfg.effective();
    let space = e.search_space()?;
    let holdout = cfg.predictor_val >= 2 && pairs.len() >= cfg.predictor_val + e.predictor.support_size + 2;
    let (train, val) = if holdout {
        pairs.split_at(pairs.len() - cfg.predictor_val)
    } else {
        (pairs, &pairs[..0])
    };
    let (model, curve) = FewShotPredictor::train(&space, train, &e.predictor)?;
    let val_tau = if holdout {
        let q: Vec<Architecture> = val.iter().map(|l| l.arch.clone()).collect();
        let truth: Vec<f64> = val.iter().map(|l| l.accuracy).collect();
        kendall_tau(&model.predict_many(&q)?, &truth).ok()
    } else {
        None
    };
    Ok(TrainedPredictor {
        model,
        val_tau,
        final_loss: curve.last().copied().unwrap_or(0.0),
    })
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub arch: Architecture,
    pub dist: ArchDistribution,
    pub trace: SearchTrace,
}

impl SearchOutcome {
    pub fn save(&self, art: &Artifacts) -> Result<()> {
        self.dist.save(&art.dist())?;
        self.trace.save_csv(&art.trace_csv())?;
        self.trace.save_json(&art.trace_json())
    }
}

fn scorer<'a>(cfg: &PipelineConfig, predictor: Option<&'a FewShotPredictor>) -> Option<CachedScorer<'a>> {
    predictor
        .filter(|_| cfg.ablation.predictor)
        .map(|p| CachedScorer::new(p as &dyn super::ArchScorer))
}

/// Stage 4 (TABULAR).
pub fn search_tabular(
    cfg: &PipelineConfig,
    table: &BenchmarkTable,
    predictor: Option<&FewShotPredictor>,
) -> Result<SearchOutcome> {
    let e = cfg.effective();
    let space = e.search_space()?;
    let mut backend = TabularBackend::new(&space, table, e.search.minibatch_sigma)?;
    let mut dist = ArchDistribution::init_uniform(&space);
    let mut sc = scorer(cfg, predictor);
    let flops = FlopsModel::for_space(&space);
    let (arch, trace) = search(&mut dist, &mut backend, sc.as_mut(), &flops, &e.search)?;
    Ok(SearchOutcome { arch, dist, trace })
}

/// Stage 4 (TOY): search with interleaved weight steps; returns the
/// updated SuperNet.
pub fn search_toy(
    cfg: &PipelineConfig,
    net: SuperNet,
    data: ToyDataset,
    predictor: Option<&FewShotPredictor>,
) -> Result<(SearchOutcome, SuperNet, ToyDataset)> {
    let e = cfg.effective();
    let space = e.search_space()?;
    let steps = e.search.epochs * e.supernet.n_train.div_ceil(e.supernet.batch_size);
    let lr = (e.search.weight_lr_start, e.search.weight_lr_end);
    let mut backend = ToySuperNetBackend::new(net, data, &e.supernet, lr, steps)?;
    let mut dist = ArchDistribution::init_uniform(&space);
    let mut sc = scorer(cfg, predictor);
    let flops = FlopsModel::for_space(&space);
    let (arch, trace) = search(&mut dist, &mut backend, sc.as_mut(), &flops, &e.search)?;
    let data = backend.data().clone();
    Ok((SearchOutcome { arch, dist, trace }, backend.into_net(), data))
}

/// Stage 5 (TABULAR): best rank against the GT table, and WS-vs-GT
/// correlations over `eval_sample` distinct architectures.
pub fn evaluate_tabular(cfg: &PipelineConfig, table: &BenchmarkTable, arch: &Architecture) -> Result<EvalReport> {
    let (rank, acc) = best_rank(arch, table)?;
    let mut rows: Vec<_> = table.iter().collect();
    rows.shuffle(&mut child(cfg.seed, "pipeline/eval-sample"));
    rows.truncate(cfg.eval_sample.max(2));
    let proxy: Vec<f64> = rows.iter().map(|(_, r)| r.ws).collect();
    let truth: Vec<f64> = rows.iter().map(|(_, r)| r.gt).collect();
    let flops = table.lookup(arch)?.flops;
    EvalReport::from_scores(&proxy, &truth, rank, acc, arch.clone(), flops)
}

/// Stage 5 (TOY): SuperNet WS accuracy vs fine-tuned labels over the
/// collected pairs; `best_acc` from training `arch` from scratch for
/// `eval_epochs`; `best_rank` among the collected labels.
pub fn evaluate_toy(
    cfg: &PipelineConfig,
    net: &SuperNet,
    data: &ToyDataset,
    pairs: &[LabeledArch],
    arch: &Architecture,
) -> Result<EvalReport> {
    let e = cfg.effective();
    let space = e.search_space()?;
    let mut proxy = Vec::with_capacity(pairs.len());
    for p in pairs {
        proxy.push(net.evaluate(&p.arch, &data.val)?.accuracy);
    }
    let truth: Vec<f64> = pairs.iter().map(|p| p.accuracy).collect();
    let label = match pairs.iter().find(|p| &p.arch == arch) {
        Some(p) => p.accuracy,
        None => {
            let s = derive_indexed(cfg.seed, "evaluate/finetune", space.index_of(arch) as u64);
            let lr = (e.supernet.finetune_lr_start, e.supernet.finetune_lr_end);
            let tuned = finetune(net, arch, data, e.supernet.finetune_epochs, lr, &e.supernet, s)?;
            tuned.evaluate(arch, &data.val)?.accuracy
        }
    };
    let rank = 1 + truth.iter().filter(|&&t| t > label).count();
    let scratch = train_from_scratch(
        &space,
        arch,
        data,
        cfg.eval_epochs,
        &e.supernet,
        derive_seed(cfg.seed, "evaluate/scratch"),
    )?;
    let flops = FlopsModel::for_space(&space).flops(arch)?;
    EvalReport::from_scores(&proxy, &truth, rank, scratch.accuracy, arch.clone(), flops)
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// All five stages. Artifacts land in `out`; the report is also appended
/// to `out/results.csv`.
pub fn pipeline(cfg: &PipelineConfig, out: &Path, opts: &RunOptions) -> Result<EvalReport> {
    stage("config", cfg.validate())?;
    let art = Artifacts::new(out)?;
    let hash = cfg.hash()?;
    let report = match cfg.search.backend {
        BackendKind::Tabular => {
            let table = stage("gen-surrogate", benchmark_table(cfg, opts))?;
            stage("gen-surrogate", table.save(&art.table()))?;
            let pairs = stage("collect-gt", collect_tabular(cfg, &table))?;
            stage("collect-gt", save_labeled(&art.gt_pairs(), &pairs))?;
            let predictor = predictor_stage(cfg, &pairs, &art)?;
            let outcome = stage("search", search_tabular(cfg, &table, predictor.as_ref()))?;
            stage("search", outcome.save(&art))?;
            stage("evaluate", evaluate_tabular(cfg, &table, &outcome.arch))?
        }
        BackendKind::ToySupernet => {
            let (net, data, log) = stage("warmup", run_warmup(cfg))?;
            stage(
                "warmup",
                net.save(&art.dir)
                    .and_then(|_| save_warmup_log(&art.warmup_log(), &log)),
            )?;
            let pairs = stage("collect-gt", collect_toy(cfg, &net, &data, opts.jobs))?;
            stage("collect-gt", save_labeled(&art.gt_pairs(), &pairs))?;
            let predictor = predictor_stage(cfg, &pairs, &art)?;
            let (outcome, net, data) = stage("search", search_toy(cfg, net, data, predictor.as_ref()))?;
            stage("search", outcome.save(&art))?;
            stage("evaluate", evaluate_toy(cfg, &net, &data, &pairs, &outcome.arch))?
        }
    };
    stage("evaluate", report.save_json(&art.report()))?;
    stage("evaluate", report.append_csv(&art.results(), cfg.seed, hash))?;
    Ok(report)
}

fn predictor_stage(cfg: &PipelineConfig, pairs: &[LabeledArch], art: &Artifacts) -> Result<Option<FewShotPredictor>> {
    if !cfg.ablation.predictor {
        return Ok(None);
    }
    let trained = stage("train-predictor", train_predictor(cfg, pairs))?;
    stage("train-predictor", trained.model.save(&art.predictor()))?;
    Ok(Some(trained.model))
}

impl Error {
    /// Name of the failing pipeline stage, if this error came from one.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
