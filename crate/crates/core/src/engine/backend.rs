use std::collections::HashMap;

use rand::seq::index::sample;

use crate::error::Result;
use crate::numerics::rng::{derive_indexed, seeded};
use crate::numerics::{Sgd, SgdCosineSchedule};
use crate::oracle::{evaluate, BenchmarkTable, EvalMode};
use crate::predictor::{FewShotPredictor, SupervisedPredictor};
use crate::search_space::{Architecture, SearchSpace};
use crate::supernet::{SuperNet, SuperNetConfig, ToyDataset};

/// Per-step randomness shared by every evaluation in that step, so the
/// sampled and greedy architectures see the same minibatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepContext {
    pub step: usize,
    pub seed: u64,
}

/// Source of the direct-evaluation term of the reward.
pub trait Backend {
    fn space(&self) -> &SearchSpace;

    /// Architecture updates per epoch.
    fn steps_per_epoch(&self) -> usize {
        1
    }

    fn direct_eval(&mut self, arch: &Architecture, ctx: &StepContext) -> Result<f64>;

    /// Weight update on the sampled architecture; a no-op for fixed oracles.
    fn weight_step(&mut self, _arch: &Architecture, _ctx: &StepContext) -> Result<()> {
        Ok(())
    }
}

/// Weight-sharing accuracy from a benchmark table plus minibatch noise.
/// Noise is keyed by (step, architecture): one architecture has one value
/// per step.
pub struct TabularBackend<'a> {
    space: &'a SearchSpace,
    table: &'a BenchmarkTable,
    sigma: f64,
}

impl<'a> TabularBackend<'a> {
    pub fn new(space: &'a SearchSpace, table: &'a BenchmarkTable, sigma: f64) -> Result<Self> {
        if table.space_id != space.id {
            return Err(crate::error::invalid(format!(
                "table is for space {}, search space is {}",
                table.space_id, space.id
            )));
        }
        Ok(Self { space, table, sigma })
    }
}

impl Backend for TabularBackend<'_> {
    fn space(&self) -> &SearchSpace {
        self.space
    }

    fn direct_eval(&mut self, arch: &Architecture, ctx: &StepContext) -> Result<f64> {
        let index = self.space.index_of(arch) as u64;
        let mut rng = seeded(derive_indexed(ctx.seed, "tabular/minibatch", index));
        evaluate(self.table, arch, EvalMode::Ws, self.sigma, &mut rng)
    }
}

/// Trainable toy SuperNet: direct evaluation is the mean log-likelihood on
/// a validation minibatch; every step also trains the sampled path once.
pub struct ToySuperNetBackend {
    pub net: SuperNet,
    data: ToyDataset,
    batch_size: usize,
    opt: Sgd,
    hyper_opt: Option<Sgd>,
}

impl ToySuperNetBackend {
    /// `total_steps` sizes the cosine weight schedule `lr.0 → lr.1`.
    pub fn new(
        net: SuperNet,
        data: ToyDataset,
        cfg: &SuperNetConfig,
        lr: (f64, f64),
        total_steps: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let sched = SgdCosineSchedule::new(lr.0, lr.1.min(lr.0), total_steps.max(1), cfg.momentum)?;
        let opt = Sgd::new(sched, &net.weights.params);
        let hyper_opt = match (&net.hyper, cfg.hyper_update) {
            (Some(h), true) => Some(Sgd::new(sched, &h.params)),
            _ => None,
        };
        Ok(Self {
            net,
            data,
            batch_size: cfg.batch_size,
            opt,
            hyper_opt,
        })
    }

    pub fn data(&self) -> &ToyDataset {
        &self.data
    }

    pub fn into_net(self) -> SuperNet {
        self.net
    }

    fn draw(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut idx = sample(&mut seeded(seed), n, self.batch_size.min(n)).into_vec();
        idx.sort_unstable();
        idx
    }
}

impl Backend for ToySuperNetBackend {
    fn space(&self) -> &SearchSpace {
        &self.net.space
    }

    fn steps_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.batch_size).max(1)
    }

    fn direct_eval(&mut self, arch: &Architecture, ctx: &StepContext) -> Result<f64> {
        let idx = self.draw(self.data.val.len(), derive_indexed(ctx.seed, "toy/val-batch", 0));
        let (x, y) = self.data.val.batch(&idx)?;
        self.net.forward_loss(arch, &x, &y)
    }

    fn weight_step(&mut self, arch: &Architecture, ctx: &StepContext) -> Result<()> {
        let idx = self.draw(self.data.train.len(), derive_indexed(ctx.seed, "toy/train-batch", 0));
        let (x, y) = self.data.train.batch(&idx)?;
        self.net
            .train_step(&mut self.opt, self.hyper_opt.as_mut(), arch, &x, &y)?;
        Ok(())
    }
}

/// Anything that maps architectures to an accuracy-scale score.
pub trait ArchScorer {
    fn score_many(&self, archs: &[Architecture]) -> Result<Vec<f64>>;
}

impl ArchScorer for FewShotPredictor {
    fn score_many(&self, archs: &[Architecture]) -> Result<Vec<f64>> {
        self.predict_many(archs)
    }
}

impl ArchScorer for SupervisedPredictor {
    fn score_many(&self, archs: &[Architecture]) -> Result<Vec<f64>> {
        self.predict_many(archs)
    }
}

/// Memoising wrapper; trained predictors are deterministic.
pub struct CachedScorer<'a> {
    inner: &'a dyn ArchScorer,
    cache: HashMap<Architecture, f64>,
}

impl<'a> CachedScorer<'a> {
    pub fn new(inner: &'a dyn ArchScorer) -> Self {
        Self {
            inner,
            cache: HashMap::new(),
        }
    }

    pub fn score(&mut self, arch: &Architecture) -> Result<f64> {
        if let Some(&s) = self.cache.get(arch) {
            return Ok(s);
        }
        let s = self.inner.score_many(std::slice::from_ref(arch))?[0];
        self.cache.insert(arch.clone(), s);
        Ok(s)
    }
}
