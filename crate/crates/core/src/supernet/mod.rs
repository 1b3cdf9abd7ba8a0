//! Toy weight-sharing SuperNet over the toy-conv space, with optional
//! HyperNet offsets (weakly weight sharing).
//!
//! Network: `stem conv3×3 (1→8) → relu → 4 × [conv3×3 | conv5×5 | skip] →
//! global average pool → linear 8→2`. Conv choices are residual,
//! `h + relu(conv(h) + b)`, so skip is the identity and sampled paths of
//! different depth see comparable feature scales. Every conv choice owns a 5×5 base
//! kernel; 3×3 ops read its top-left 3×3 window. With a HyperNet, the
//! kernel used at site `l` is `base ⊙ offset_l` where the 5×5 offset is
//! broadcast over both channel axes and cropped alongside the kernel.

mod dataset;
mod hypernet;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::{BlobTask, Split, ToyDataset, IMAGE_SIDE, NUM_CLASSES};
pub use hypernet::{HyperNet, OFFSET_LEN};

use crate::error::{invalid, Result};
use crate::numerics::rng::{child, derive_indexed, seeded};
use crate::numerics::{Linear, ParamSet, Sgd, SgdCosineSchedule, Tape, Tensor, Var};
use crate::predictor::LabeledArch;
use crate::search_space::{Architecture, SearchSpace, SpaceKind, TOY_OPS};

pub const KERNEL_MAX: usize = 5;
pub const CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyOp {
    Conv3,
    Conv5,
    Skip,
}

impl ToyOp {
    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "conv3x3" => Ok(Self::Conv3),
            "conv5x5" => Ok(Self::Conv5),
            "skip" => Ok(Self::Skip),
            _ => Err(invalid(format!("unknown toy op `{label}`"))),
        }
    }

    pub fn kernel(self) -> Option<usize> {
        match self {
            Self::Conv3 => Some(3),
            Self::Conv5 => Some(5),
            Self::Skip => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSlot {
    pub weight: usize,
    pub bias: usize,
    pub kernel: usize,
}

/// Base weights: stem, one 5×5 kernel plus bias per (site, conv choice), and
/// the classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperNetWeights {
    pub params: ParamSet,
    pub stem: ConvSlot,
    /// `sites[l][c]` is `None` for skip choices.
    pub sites: Vec<Vec<Option<ConvSlot>>>,
    pub head: Linear,
}

impl SuperNetWeights {
    /// He-style init with fan-in from the op's effective kernel size.
    pub fn new<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Result<Self> {
        if space.kind != SpaceKind::ToyConv {
            return Err(invalid(format!(
                "the toy SuperNet needs the toy space, got `{}`",
                space.id
            )));
        }
        let mut params = ParamSet::default();
        let stem = ConvSlot {
            weight: params.push(
                "stem.weight",
                Tensor::randn(&[CHANNELS, 1, 3, 3], (2.0 / 9.0f64).sqrt(), rng),
            ),
            bias: params.push("stem.bias", Tensor::zeros(&[CHANNELS])),
            kernel: 3,
        };
        let mut sites = Vec::with_capacity(space.num_sites());
        for (l, site) in space.sites.iter().enumerate() {
            let mut slots = Vec::with_capacity(site.cardinality());
            for label in &site.choices {
                let op = ToyOp::from_label(label)?;
                slots.push(op.kernel().map(|k| {
                    let std = (2.0 / (CHANNELS * k * k) as f64).sqrt();
                    let shape = [CHANNELS, CHANNELS, KERNEL_MAX, KERNEL_MAX];
                    ConvSlot {
                        weight: params.push(format!("site{l}.{label}.weight"), Tensor::randn(&shape, std, rng)),
                        bias: params.push(format!("site{l}.{label}.bias"), Tensor::zeros(&[CHANNELS])),
                        kernel: k,
                    }
                }));
            }
            sites.push(slots);
        }
        let head = Linear::new(
            &mut params,
            "head",
            CHANNELS,
            NUM_CLASSES,
            (1.0 / CHANNELS as f64).sqrt(),
            rng,
        );
        Ok(Self {
            params,
            stem,
            sites,
            head,
        })
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        if arch.len() != self.sites.len() || arch.indices().iter().zip(&self.sites).any(|(&c, s)| c >= s.len()) {
            return Err(invalid(format!("{arch} is not a toy architecture")));
        }
        Ok(())
    }
}

/// Per-site kernels actually used by one architecture (`None` for skip).
#[derive(Clone, Debug, PartialEq)]
pub struct FinalWeights {
    pub kernels: Vec<Option<Tensor>>,
}

/// Source of per-site offsets when assembling on a tape.
pub enum Offsets<'a> {
    /// Classical weight sharing.
    None,
    /// HyperNet recorded on the tape with these parameter vars.
    Trainable(&'a HyperNet, &'a [Var]),
    /// Precomputed offsets, treated as constants.
    Fixed(Vec<Tensor>),
}

/// Records every site's final kernel on `tape`.
pub fn assemble_on_tape(
    base: &SuperNetWeights,
    vars: &[Var],
    arch: &Architecture,
    offsets: Offsets<'_>,
    tape: &mut Tape,
) -> Result<Vec<Option<Var>>> {
    base.check(arch)?;
    let offs: Option<Vec<Var>> = match offsets {
        Offsets::None => None,
        Offsets::Trainable(h, hv) => Some(h.offsets(tape, hv, arch)?),
        Offsets::Fixed(t) => Some(t.into_iter().map(|o| tape.leaf(o)).collect()),
    };
    arch.indices()
        .iter()
        .enumerate()
        .map(|(l, &c)| {
            let Some(slot) = base.sites[l][c] else {
                return Ok(None);
            };
            let mut w = vars[slot.weight];
            if let Some(o) = &offs {
                w = tape.mul_trailing(w, o[l])?;
            }
            if slot.kernel < KERNEL_MAX {
                w = tape.crop(w, slot.kernel, slot.kernel)?;
            }
            Ok(Some(w))
        })
        .collect()
}

/// Final per-site kernels for `arch`; without a HyperNet these are exact
/// copies of the base slices.
pub fn assemble_weights(base: &SuperNetWeights, arch: &Architecture, hyper: Option<&HyperNet>) -> Result<FinalWeights> {
    let mut tape = Tape::new();
    let vars = base.params.attach(&mut tape);
    let offsets = match hyper {
        Some(h) => Offsets::Fixed(h.offset_values(arch)?),
        None => Offsets::None,
    };
    let ks = assemble_on_tape(base, &vars, arch, offsets, &mut tape)?;
    Ok(FinalWeights {
        kernels: ks.into_iter().map(|k| k.map(|v| tape.value(v).clone())).collect(),
    })
}

/// Logits `[N, 2]` of `arch` using pre-assembled kernels.
pub fn forward_logits(
    base: &SuperNetWeights,
    vars: &[Var],
    kernels: &[Option<Var>],
    arch: &Architecture,
    images: Var,
    tape: &mut Tape,
) -> Result<Var> {
    let mut h = tape.conv2d(images, vars[base.stem.weight], 1)?;
    h = tape.add_channel_bias(h, vars[base.stem.bias])?;
    h = tape.relu(h)?;
    for (l, (&c, k)) in arch.indices().iter().zip(kernels).enumerate() {
        let (Some(slot), Some(k)) = (base.sites[l][c], k) else {
            continue;
        };
        let c = tape.conv2d(h, *k, slot.kernel / 2)?;
        let c = tape.add_channel_bias(c, vars[slot.bias])?;
        let c = tape.relu(c)?;
        h = tape.add(h, c)?;
    }
    let pooled = tape.global_avg_pool(h)?;
    base.head.forward(tape, vars, pooled)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuperNetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    /// Weakly weight sharing on/off.
    pub hyper_enabled: bool,
    /// Train HyperNet parameters jointly with the base weights.
    pub hyper_update: bool,
    pub hyper_hidden: usize,
    pub hyper_out_std: f64,
    pub finetune_epochs: usize,
    pub finetune_lr_start: f64,
    pub finetune_lr_end: f64,
    pub scratch_lr_start: f64,
    pub scratch_lr_end: f64,
}

impl Default for SuperNetConfig {
    fn default() -> Self {
        Self {
            n_train: 1024,
            n_val: 256,
            batch_size: 64,
            warmup_epochs: 200,
            lr_start: 0.1,
            lr_end: 0.01,
            momentum: 0.0,
            hyper_enabled: true,
            hyper_update: true,
            hyper_hidden: 32,
            hyper_out_std: 0.1,
            finetune_epochs: 30,
            finetune_lr_start: 0.02,
            finetune_lr_end: 0.002,
            scratch_lr_start: 0.1,
            scratch_lr_end: 0.01,
        }
    }
}

impl SuperNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 || self.n_val < 2 || self.batch_size == 0 || self.hyper_hidden == 0 {
            return Err(invalid("supernet config: dataset and batch sizes must be positive"));
        }
        Ok(())
    }

    fn steps(&self, epochs: usize) -> usize {
        (epochs * self.n_train.div_ceil(self.batch_size)).max(1)
    }
}

/// Mean log-likelihood and accuracy on a split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub log_likelihood: f64,
    pub accuracy: f64,
}

/// Base weights plus an optional HyperNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperNet {
    pub space: SearchSpace,
    pub weights: SuperNetWeights,
    pub hyper: Option<HyperNet>,
}

/// Per-epoch warmup statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WarmupLog {
    pub epoch_loss: Vec<f64>,
    /// Σ |∂loss/∂θ_hyper| over every step; exactly 0 when the HyperNet is frozen.
    pub hyper_grad_abs_sum: f64,
}

impl SuperNet {
    pub fn new(space: &SearchSpace, cfg: &SuperNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let weights = SuperNetWeights::new(space, &mut child(seed, "supernet/base-init"))?;
        let hyper = cfg.hyper_enabled.then(|| {
            let k = space
                .sites
                .iter()
                .map(|s| s.cardinality())
                .max()
                .unwrap_or(TOY_OPS.len());
            HyperNet::new(
                space.num_sites(),
                k,
                cfg.hyper_hidden,
                cfg.hyper_out_std,
                &mut child(seed, "supernet/hyper-init"),
            )
        });
        Ok(Self {
            space: space.clone(),
            weights,
            hyper,
        })
    }

    pub fn assemble(&self, arch: &Architecture) -> Result<FinalWeights> {
        assemble_weights(&self.weights, arch, self.hyper.as_ref())
    }

    /// Mean cross-entropy of `arch` on a batch, recorded on `tape`.
    /// `hyper_vars` makes the HyperNet trainable; otherwise its offsets are constants.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        base_vars: &[Var],
        hyper_vars: Option<&[Var]>,
        arch: &Architecture,
        images: &Tensor,
        labels: &[usize],
    ) -> Result<Var> {
        let offsets = match (&self.hyper, hyper_vars) {
            (None, _) => Offsets::None,
            (Some(h), Some(hv)) => Offsets::Trainable(h, hv),
            (Some(h), None) => Offsets::Fixed(h.offset_values(arch)?),
        };
        let kernels = assemble_on_tape(&self.weights, base_vars, arch, offsets, tape)?;
        let x = tape.leaf(images.clone());
        let logits = forward_logits(&self.weights, base_vars, &kernels, arch, x, tape)?;
        tape.cross_entropy(logits, labels)
    }

    /// Mean log-likelihood (negative cross-entropy) of a batch.
    pub fn forward_loss(&self, arch: &Architecture, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.weights.params.attach(&mut tape);
        let loss = self.loss_on_tape(&mut tape, &vars, None, arch, images, labels)?;
        Ok(-tape.value(loss).item()?)
    }

    /// Log-likelihood and accuracy over a whole split, in chunks.
    pub fn evaluate(&self, arch: &Architecture, split: &Split) -> Result<EvalResult> {
        let offsets = self.hyper.as_ref().map(|h| h.offset_values(arch)).transpose()?;
        let (mut ll, mut correct) = (0.0, 0usize);
        for idx in split.chunks(128) {
            let (x, y) = split.batch(&idx)?;
            let mut tape = Tape::new();
            let vars = self.weights.params.attach(&mut tape);
            let off = match &offsets {
                Some(o) => Offsets::Fixed(o.clone()),
                None => Offsets::None,
            };
            let kernels = assemble_on_tape(&self.weights, &vars, arch, off, &mut tape)?;
            let xv = tape.leaf(x);
            let logits = forward_logits(&self.weights, &vars, &kernels, arch, xv, &mut tape)?;
            let lv = tape.value(logits);
            for (r, &label) in y.iter().enumerate() {
                let row = &lv.data()[r * NUM_CLASSES..(r + 1) * NUM_CLASSES];
                let lse = crate::numerics::log_sum_exp(row);
                ll += row[label] - lse;
                let pred = if row[1] > row[0] { 1 } else { 0 };
                correct += usize::from(pred == label);
            }
        }
        Ok(EvalResult {
            log_likelihood: ll / split.len() as f64,
            accuracy: correct as f64 / split.len() as f64,
        })
    }

    /// One SGD step on `arch`. Returns the batch loss and Σ|hyper grad|.
    pub fn train_step(
        &mut self,
        opt: &mut Sgd,
        hyper_opt: Option<&mut Sgd>,
        arch: &Architecture,
        images: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let base_vars = self.weights.params.attach(&mut tape);
        let hyper_vars = match (&self.hyper, &hyper_opt) {
            (Some(h), Some(_)) => Some(h.params.attach(&mut tape)),
            _ => None,
        };
        let loss = self.loss_on_tape(&mut tape, &base_vars, hyper_vars.as_deref(), arch, images, labels)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(crate::error::Error::NonFinite(format!("supernet loss for {arch}")));
        }
        let mut g = tape.backward(loss)?;
        let base_grads = self.weights.params.collect_grads(&base_vars, &mut g);
        opt.step(&mut self.weights.params, &base_grads)?;
        let mut hyper_abs = 0.0;
        if let (Some(h), Some(hv), Some(hopt)) = (self.hyper.as_mut(), hyper_vars, hyper_opt) {
            let hg = h.params.collect_grads(&hv, &mut g);
            hyper_abs = hg
                .iter()
                .flatten()
                .map(|t| t.data().iter().map(|x| x.abs()).sum::<f64>())
                .sum();
            hopt.step(&mut h.params, &hg)?;
        }
        Ok((value, hyper_abs))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.weights.params.save(&dir.join("supernet_base.json"))?;
        if let Some(h) = &self.hyper {
            h.params.save(&dir.join("supernet_hyper.json"))?;
        }
        Ok(())
    }

    /// Loads checkpoints written by [`SuperNet::save`] into this layout.
    pub fn load_weights(&mut self, dir: &Path) -> Result<()> {
        self.weights
            .params
            .load_into(ParamSet::load(&dir.join("supernet_base.json"))?)?;
        if let Some(h) = &mut self.hyper {
            h.params.load_into(ParamSet::load(&dir.join("supernet_hyper.json"))?)?;
        }
        Ok(())
    }
}

fn schedule(start: f64, end: f64, steps: usize, momentum: f64) -> Result<SgdCosineSchedule> {
    SgdCosineSchedule::new(start, end.min(start), steps.max(1), momentum)
}

/// Uniform-sampling SuperNet training with frozen architecture parameters.
pub fn warmup(net: &mut SuperNet, data: &ToyDataset, cfg: &SuperNetConfig, seed: u64) -> Result<WarmupLog> {
    let steps = cfg.steps(cfg.warmup_epochs);
    let sched = schedule(cfg.lr_start, cfg.lr_end, steps, cfg.momentum)?;
    let mut opt = Sgd::new(sched, &net.weights.params);
    let mut hopt = match (&net.hyper, cfg.hyper_update) {
        (Some(h), true) => Some(Sgd::new(sched, &h.params)),
        _ => None,
    };
    let mut rng = child(seed, "supernet/warmup");
    let mut log = WarmupLog::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for _ in 0..cfg.warmup_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0;
        for idx in order.chunks(cfg.batch_size) {
            let arch = uniform_arch(&net.space, &mut rng);
            let (x, y) = data.train.batch(idx)?;
            let (loss, habs) = net.train_step(&mut opt, hopt.as_mut(), &arch, &x, &y)?;
            total += loss;
            n += 1;
            log.hyper_grad_abs_sum += habs;
        }
        log.epoch_loss.push(total / n.max(1) as f64);
    }
    Ok(log)
}

pub fn uniform_arch<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Architecture {
    Architecture::new(
        space
            .sites
            .iter()
            .map(|s| rng.random_range(0..s.cardinality()))
            .collect(),
    )
}

/// Trains only `arch` for `epochs` on a copy of the network; the HyperNet,
/// if any, stays frozen.
pub fn finetune(
    net: &SuperNet,
    arch: &Architecture,
    data: &ToyDataset,
    epochs: usize,
    lr: (f64, f64),
    cfg: &SuperNetConfig,
    seed: u64,
) -> Result<SuperNet> {
    let mut copy = net.clone();
    let steps = cfg.steps(epochs);
    let mut opt = Sgd::new(schedule(lr.0, lr.1, steps, cfg.momentum)?, &copy.weights.params);
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = data.train.batch(idx)?;
            copy.train_step(&mut opt, None, arch, &x, &y)?;
        }
    }
    Ok(copy)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))
}

/// Ground-truth labels: `n` distinct uniformly drawn architectures, each
/// fine-tuned from inherited weights on a private copy and labelled with
/// its validation accuracy.
pub fn collect_gt_pairs(
    net: &SuperNet,
    data: &ToyDataset,
    n: usize,
    cfg: &SuperNetConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<LabeledArch>> {
    let size = net.space.enumerable_size(crate::oracle::MAX_ENUMERABLE)?;
    if n == 0 || n > size {
        return Err(invalid(format!(
            "cannot draw {n} distinct architectures from a space of {size}"
        )));
    }
    let mut all: Vec<Architecture> = net.space.enumerate().collect();
    all.shuffle(&mut child(seed, "collect/archs"));
    all.truncate(n);
    let lr = (cfg.finetune_lr_start, cfg.finetune_lr_end);
    thread_pool(jobs)?.install(|| {
        all.par_iter()
            .enumerate()
            .map(|(i, arch)| {
                let s = derive_indexed(seed, "collect/finetune", i as u64);
                let tuned = finetune(net, arch, data, cfg.finetune_epochs, lr, cfg, s)?;
                let acc = tuned.evaluate(arch, &data.val)?.accuracy;
                LabeledArch::new(arch.clone(), acc)
            })
            .collect()
    })
}

/// Validation result of `arch` trained alone from a fresh initialisation.
pub fn train_from_scratch(
    space: &SearchSpace,
    arch: &Architecture,
    data: &ToyDataset,
    epochs: usize,
    cfg: &SuperNetConfig,
    seed: u64,
) -> Result<EvalResult> {
    let plain = SuperNetConfig {
        hyper_enabled: false,
        ..cfg.clone()
    };
    let net = SuperNet::new(
        space,
        &plain,
        derive_indexed(seed, "scratch/init", space.index_of(arch) as u64),
    )?;
    let lr = (cfg.scratch_lr_start, cfg.scratch_lr_end);
    let trained = finetune(
        &net,
        arch,
        data,
        epochs,
        lr,
        &plain,
        derive_indexed(seed, "scratch/order", 0),
    )?;
    trained.evaluate(arch, &data.val)
}

/// Scratch-trained validation accuracies for many architectures.
pub fn scratch_labels(
    space: &SearchSpace,
    archs: &[Architecture],
    data: &ToyDataset,
    epochs: usize,
    cfg: &SuperNetConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<f64>> {
    thread_pool(jobs)?.install(|| {
        archs
            .par_iter()
            .map(|a| train_from_scratch(space, a, data, epochs, cfg, seed).map(|r| r.accuracy))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients_sampled;

    fn small() -> (SuperNet, ToyDataset) {
        let cfg = SuperNetConfig::default();
        (
            SuperNet::new(&SearchSpace::toy(), &cfg, 7).unwrap(),
            ToyDataset::generate(7, 64, 32).unwrap(),
        )
    }

    #[test]
    fn disabled_hyper_is_exact_inheritance() {
        let (net, _) = small();
        let arch = Architecture::new(vec![0, 1, 2, 0]);
        let fw = assemble_weights(&net.weights, &arch, None).unwrap();
        assert!(fw.kernels[2].is_none());
        let base5 = net.weights.params.get(net.weights.sites[1][1].unwrap().weight);
        assert_eq!(fw.kernels[1].as_ref().unwrap(), base5);
        let base3 = net.weights.params.get(net.weights.sites[0][0].unwrap().weight);
        let k = fw.kernels[0].as_ref().unwrap();
        assert_eq!(k.shape(), [8, 8, 3, 3]);
        for o in 0..8 {
            for i in 0..8 {
                for y in 0..3 {
                    for x in 0..3 {
                        let a = k.data()[((o * 8 + i) * 3 + y) * 3 + x];
                        let b = base3.data()[((o * 8 + i) * 5 + y) * 5 + x];
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn constant_offsets_scale_kernels() {
        let (net, _) = small();
        let arch = Architecture::new(vec![1, 0, 1, 1]);
        let mut tape = Tape::new();
        let vars = net.weights.params.attach(&mut tape);
        let offs = vec![Tensor::full(&[5, 5], 2.0); 4];
        let ks = assemble_on_tape(&net.weights, &vars, &arch, Offsets::Fixed(offs), &mut tape).unwrap();
        let plain = assemble_weights(&net.weights, &arch, None).unwrap();
        for (k, p) in ks.iter().zip(&plain.kernels) {
            let k = tape.value(k.unwrap());
            let p = p.as_ref().unwrap();
            assert!(k.data().iter().zip(p.data()).all(|(a, b)| *a == 2.0 * b));
        }
    }

    #[test]
    fn all_skip_reduces_to_head() {
        let (net, data) = small();
        let arch = Architecture::new(vec![2; 4]);
        let (x, y) = data.val.batch(&[0, 1, 2, 3]).unwrap();
        let mut tape = Tape::new();
        let vars = net.weights.params.attach(&mut tape);
        let xv = tape.leaf(x.clone());
        let mut h = tape.conv2d(xv, vars[net.weights.stem.weight], 1).unwrap();
        h = tape.add_channel_bias(h, vars[net.weights.stem.bias]).unwrap();
        h = tape.relu(h).unwrap();
        let p = tape.global_avg_pool(h).unwrap();
        let logits = net.weights.head.forward(&mut tape, &vars, p).unwrap();
        let ce = tape.cross_entropy(logits, &y).unwrap();
        let want = -tape.value(ce).item().unwrap();
        assert_eq!(net.forward_loss(&arch, &x, &y).unwrap(), want);
    }

    #[test]
    fn untrained_is_near_chance() {
        let (net, data) = small();
        let arch = Architecture::new(vec![0, 1, 0, 1]);
        let ll = net.evaluate(&arch, &data.val).unwrap().log_likelihood;
        assert!((ll - 0.5f64.ln()).abs() < 0.3, "{ll}");
    }

    #[test]
    fn full_graph_gradients_match_finite_differences() {
        let (net, data) = small();
        let arch = Architecture::new(vec![0, 1, 2, 0]);
        let (x, y) = data.train.batch(&[0, 1, 2]).unwrap();
        let hyper = net.hyper.as_ref().unwrap();
        let nb = net.weights.params.len();
        let mut inputs: Vec<Tensor> = net.weights.params.iter().map(|(_, t)| t.clone()).collect();
        inputs.extend(hyper.params.iter().map(|(_, t)| t.clone()));
        let report = check_gradients_sampled(&inputs, 1e-5, 10, &mut seeded(2), |tape, v| {
            net.loss_on_tape(tape, &v[..nb], Some(&v[nb..]), &arch, &x, &y)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn zero_epoch_warmup_is_identity() {
        let (mut net, data) = small();
        let before = net.clone();
        let cfg = SuperNetConfig {
            warmup_epochs: 0,
            ..Default::default()
        };
        warmup(&mut net, &data, &cfg, 1).unwrap();
        assert_eq!(net, before);
    }
}
