use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Cosine decay from `lr_start` to `lr_end` over `total_steps`, plus the
/// heavy-ball momentum coefficient used by [`Sgd`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdCosineSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: usize,
    pub momentum: f64,
}

impl SgdCosineSchedule {
    pub fn new(lr_start: f64, lr_end: f64, total_steps: usize, momentum: f64) -> Result<Self> {
        let s = Self {
            lr_start,
            lr_end,
            total_steps,
            momentum,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > 0.0 && self.lr_start.is_finite()) {
            return Err(invalid(format!("lr_start must be > 0, got {}", self.lr_start)));
        }
        if !(self.lr_end >= 0.0 && self.lr_end <= self.lr_start) {
            return Err(invalid(format!(
                "lr_end must lie in [0, lr_start], got {}",
                self.lr_end
            )));
        }
        if self.total_steps == 0 {
            return Err(invalid("total_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// `lr_end + ½(lr_start − lr_end)(1 + cos(πt/T))`, held at `lr_end` past `T`.
    pub fn lr(&self, step: usize) -> f64 {
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (PI * t).cos())
    }
}

/// One momentum-SGD update: `v ← μv + g`, `w ← w − lr(step)·v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    schedule: &SgdCosineSchedule,
    step: usize,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(invalid(format!(
            "sgd_step: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let lr = schedule.lr(step);
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                lhs: w.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        apply(w, g, v, lr, schedule.momentum);
    }
    Ok(())
}

fn apply(w: &mut Tensor, g: &Tensor, v: &mut Tensor, lr: f64, momentum: f64) {
    for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        *vi = momentum * *vi + gi;
        *wi -= lr * *vi;
    }
}

/// Stateful optimizer over a [`ParamSet`]. Parameters whose gradient is
/// absent for a step are left untouched, including their momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub schedule: SgdCosineSchedule,
    velocity: Vec<Tensor>,
    step: usize,
}

impl Sgd {
    pub fn new(schedule: SgdCosineSchedule, params: &ParamSet) -> Self {
        Self {
            schedule,
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let lr = self.schedule.lr(self.step);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let w = params.get_mut(i);
            if w.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "sgd",
                    lhs: w.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            apply(w, g, &mut self.velocity[i], lr, self.schedule.momentum);
        }
        self.step += 1;
        Ok(())
    }
}
