//! Factorised categorical distribution over architectures and its
//! self-critical policy-gradient update.
//!
//! Each site `l` carries unconstrained logits; `p(A) = Π_l softmax(logits_l)[A_l]`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{log_sum_exp, Tensor};
use crate::search_space::{Architecture, SearchSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDistribution {
    pub space_id: String,
    pub logits: Vec<Vec<f64>>,
}

/// Terms of the combined reward `direct + β1·predictor − β2·flops`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    pub direct_eval: f64,
    pub predictor_score: f64,
    /// FLOPs already divided by the normaliser.
    pub flops_cost: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl RewardParts {
    pub fn combined(&self) -> f64 {
        self.direct_eval + self.beta1 * self.predictor_score - self.beta2 * self.flops_cost
    }
}

fn site_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl ArchDistribution {
    /// Zero logits: every site uniform.
    pub fn init_uniform(space: &SearchSpace) -> Self {
        Self {
            space_id: space.id.clone(),
            logits: space.sites.iter().map(|s| vec![0.0; s.cardinality()]).collect(),
        }
    }

    pub fn from_logits(space_id: impl Into<String>, logits: Vec<Vec<f64>>) -> Result<Self> {
        let d = Self {
            space_id: space_id.into(),
            logits,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.logits.is_empty() || self.logits.iter().any(|l| l.is_empty()) {
            return Err(invalid("distribution needs at least one choice per site"));
        }
        if self.logits.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("distribution logits".into()));
        }
        Ok(())
    }

    pub fn num_sites(&self) -> usize {
        self.logits.len()
    }

    pub fn site_probs(&self, site: usize) -> Vec<f64> {
        site_softmax(&self.logits[site])
    }

    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| site_softmax(l)).collect()
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        if arch.len() != self.logits.len() || arch.indices().iter().zip(&self.logits).any(|(&i, l)| i >= l.len()) {
            return Err(invalid(format!(
                "architecture {arch} does not belong to space `{}`",
                self.space_id
            )));
        }
        Ok(())
    }

    /// `Σ_l log softmax(logits_l)[A_l]`.
    pub fn log_prob(&self, arch: &Architecture) -> Result<f64> {
        self.check(arch)?;
        Ok(self
            .logits
            .iter()
            .zip(arch.indices())
            .map(|(l, &i)| l[i] - log_sum_exp(l))
            .sum())
    }

    /// Independent per-site categorical draws (inverse CDF on one uniform each).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Architecture {
        Architecture::new(
            self.logits
                .iter()
                .map(|l| {
                    let p = site_softmax(l);
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    for (i, &pi) in p.iter().enumerate() {
                        acc += pi;
                        if u < acc {
                            return i;
                        }
                    }
                    // u landed in the rounding gap above the final partial sum
                    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
                })
                .collect(),
        )
    }

    /// Per-site argmax of the logits, lowest index on ties.
    pub fn greedy_decode(&self) -> Architecture {
        Architecture::new(
            self.logits
                .iter()
                .map(|l| {
                    let mut best = 0;
                    for (i, &x) in l.iter().enumerate() {
                        if x > l[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect(),
        )
    }

    /// `onehot(A_l) − softmax(logits_l)` for every site.
    pub fn grad_log_prob(&self, arch: &Architecture) -> Result<Vec<Vec<f64>>> {
        self.check(arch)?;
        Ok(self
            .logits
            .iter()
            .zip(arch.indices())
            .map(|(l, &a)| {
                let mut g: Vec<f64> = site_softmax(l).into_iter().map(|p| -p).collect();
                g[a] += 1.0;
                g
            })
            .collect())
    }

    /// Entropy in nats of each site.
    pub fn entropy(&self) -> Vec<f64> {
        self.logits
            .iter()
            .map(|l| {
                site_softmax(l)
                    .into_iter()
                    .filter(|&p| p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum()
            })
            .collect()
    }

    /// Adds `scale · g` to the logits, rejecting non-finite results.
    pub fn apply(&mut self, grad: &[Vec<f64>], scale: f64) -> Result<()> {
        if grad.len() != self.logits.len() {
            return Err(invalid("gradient site count does not match distribution"));
        }
        let mut next = self.logits.clone();
        for (l, g) in next.iter_mut().zip(grad) {
            if l.len() != g.len() {
                return Err(invalid("gradient width does not match distribution"));
            }
            for (x, d) in l.iter_mut().zip(g) {
                *x += scale * d;
            }
        }
        if next.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits after update".into()));
        }
        self.logits = next;
        Ok(())
    }

    /// `logits += lr · (r − r̂) · ∇ log p(sampled)`; returns the advantage.
    pub fn self_critical_update(
        &mut self,
        sampled: (&Architecture, &RewardParts),
        greedy: (&Architecture, &RewardParts),
        lr: f64,
    ) -> Result<f64> {
        let r = sampled.1.combined();
        let r_hat = greedy.1.combined();
        if !r.is_finite() || !r_hat.is_finite() {
            return Err(Error::NonFinite(format!("reward r={r}, baseline={r_hat}")));
        }
        self.check(greedy.0)?;
        let advantage = r - r_hat;
        if advantage != 0.0 {
            let g = self.grad_log_prob(sampled.0)?;
            self.apply(&g, lr * advantage)?;
        } else {
            self.check(sampled.0)?;
        }
        Ok(advantage)
    }

    /// Logits flattened in site order, as a tensor.
    pub fn flat_logits(&self) -> Tensor {
        Tensor::vector(self.logits.iter().flatten().copied().collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        d.validate()?;
        Ok(d)
    }
}
