//! Search loop: sample, evaluate, self-critical update, and (for trainable
//! backends) one weight step per architecture update. Also the five-stage
//! pipeline built on top of it.

mod backend;
pub mod pipeline;
mod trace;

use serde::{Deserialize, Serialize};

pub use backend::{ArchScorer, Backend, CachedScorer, StepContext, TabularBackend, ToySuperNetBackend};
pub use trace::{moving_average, SearchTrace, TraceRecord};

use crate::distribution::{ArchDistribution, RewardParts};
use crate::error::{invalid, Error, Result};
use crate::numerics::rng::{child, derive_indexed};
use crate::numerics::SgdCosineSchedule;
use crate::search_space::{Architecture, FlopsModel};
use crate::supernet::uniform_arch;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackendKind {
    #[default]
    Tabular,
    ToySupernet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub backend: BackendKind,
    /// Step budget in TABULAR mode; passes over the training split in TOY mode.
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha_lr_start: f64,
    pub alpha_lr_end: f64,
    /// Off: uniform random search, keeping the best reward seen.
    pub probabilistic_sampling: bool,
    /// Divides raw FLOPs; `None` uses the space's maximum.
    pub flops_normalizer: Option<f64>,
    /// Std of the per-call noise added to tabular WS accuracies.
    pub minibatch_sigma: f64,
    /// Cosine schedule for the weight steps interleaved in TOY mode.
    pub weight_lr_start: f64,
    pub weight_lr_end: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Tabular,
            epochs: 300,
            beta1: 0.0,
            beta2: 0.0,
            alpha_lr_start: 0.01,
            alpha_lr_end: 1e-5,
            probabilistic_sampling: true,
            flops_normalizer: None,
            minibatch_sigma: 0.0,
            weight_lr_start: 0.01,
            weight_lr_end: 0.001,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.beta1, self.beta2, self.minibatch_sigma, self.alpha_lr_end];
        if nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(invalid(
                "search config: beta1, beta2, minibatch_sigma and alpha_lr_end must be finite and >= 0",
            ));
        }
        if !(self.alpha_lr_start > 0.0 && self.alpha_lr_end <= self.alpha_lr_start) {
            return Err(invalid(
                "search config: need alpha_lr_start > 0 and alpha_lr_end <= alpha_lr_start",
            ));
        }
        if !(self.weight_lr_start > 0.0 && self.weight_lr_end >= 0.0) {
            return Err(invalid("search config: weight learning rates must be positive"));
        }
        if let Some(n) = self.flops_normalizer {
            if !(n > 0.0 && n.is_finite()) {
                return Err(invalid(format!("search config: flops_normalizer must be > 0, got {n}")));
            }
        }
        Ok(())
    }

    pub fn alpha_schedule(&self, total_steps: usize) -> Result<SgdCosineSchedule> {
        SgdCosineSchedule::new(self.alpha_lr_start, self.alpha_lr_end, total_steps.max(1), 0.0)
    }
}

/// Reward terms for one architecture. The predictor term is 0 without a
/// predictor; FLOPs are divided by `cfg.flops_normalizer` or the space maximum.
pub fn compute_reward(
    arch: &Architecture,
    backend: &mut dyn Backend,
    predictor: Option<&mut CachedScorer<'_>>,
    flops: &FlopsModel,
    cfg: &SearchConfig,
    ctx: &StepContext,
) -> Result<RewardParts> {
    let direct_eval = backend.direct_eval(arch, ctx)?;
    let predictor_score = match predictor {
        Some(p) => p.score(arch)?,
        None => 0.0,
    };
    let norm = cfg.flops_normalizer.unwrap_or_else(|| flops.max_flops());
    Ok(RewardParts {
        direct_eval,
        predictor_score,
        flops_cost: flops.flops(arch)? / norm,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
    })
}

fn diverged(step: usize, reason: String, trace: SearchTrace) -> Error {
    Error::Diverged {
        step,
        reason,
        trace: Box::new(trace),
    }
}

/// Runs the search and returns the greedy decoding of the final
/// distribution with the full trace. With probabilistic sampling off the
/// result is the best-rewarded uniform sample, and `dist` is untouched.
pub fn search(
    dist: &mut ArchDistribution,
    backend: &mut dyn Backend,
    mut predictor: Option<&mut CachedScorer<'_>>,
    flops: &FlopsModel,
    cfg: &SearchConfig,
) -> Result<(Architecture, SearchTrace)> {
    cfg.validate()?;
    let space = backend.space().clone();
    if dist.space_id != space.id {
        return Err(invalid(format!(
            "distribution is for space {}, backend runs {}",
            dist.space_id, space.id
        )));
    }
    dist.validate()?;
    let steps = cfg.epochs * backend.steps_per_epoch();
    let alpha = cfg.alpha_schedule(steps)?;
    let mut rng = child(cfg.seed, "search/sample");
    let mut trace = SearchTrace::default();
    let mut best: Option<(Architecture, f64)> = None;

    for step in 0..steps {
        let ctx = StepContext {
            step,
            seed: derive_indexed(cfg.seed, "search/step", step as u64),
        };
        let sampled = if cfg.probabilistic_sampling {
            dist.sample(&mut rng)
        } else {
            uniform_arch(&space, &mut rng)
        };
        let r = compute_reward(&sampled, backend, predictor.as_deref_mut(), flops, cfg, &ctx)?;
        let (greedy, baseline, advantage) = if cfg.probabilistic_sampling {
            let greedy = dist.greedy_decode();
            let rg = compute_reward(&greedy, backend, predictor.as_deref_mut(), flops, cfg, &ctx)?;
            let (value, base) = (r.combined(), rg.combined());
            if !value.is_finite() || !base.is_finite() {
                let reason = format!("non-finite reward r={value}, baseline={base}");
                return Err(diverged(step, reason, trace));
            }
            let adv = match dist.self_critical_update((&sampled, &r), (&greedy, &rg), alpha.lr(step)) {
                Ok(a) => a,
                Err(Error::NonFinite(m)) => return Err(diverged(step, m, trace)),
                Err(e) => return Err(e),
            };
            (greedy, base, adv)
        } else {
            let value = r.combined();
            if !value.is_finite() {
                return Err(diverged(step, format!("non-finite reward r={value}"), trace));
            }
            if best.as_ref().is_none_or(|(_, b)| value > *b) {
                best = Some((sampled.clone(), value));
            }
            let (arch, b) = best.clone().expect("best is set above");
            (arch, b, 0.0)
        };
        backend.weight_step(&sampled, &ctx)?;
        trace.push(TraceRecord {
            step,
            sampled,
            greedy,
            reward: r.combined(),
            baseline,
            advantage,
            entropy: dist.entropy(),
        });
    }
    let fin = match best {
        Some((arch, _)) => arch,
        None => dist.greedy_decode(),
    };
    Ok((fin, trace))
}
