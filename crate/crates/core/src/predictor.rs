//! Accuracy predictors trained with a pairwise ranking loss.
//!
//! [`FewShotPredictor`] embeds a support set and a query with a shared
//! encoder, decodes each `(support, query)` embedding pair into an accuracy
//! offset, and predicts `mean_i(acc_i + offset_i)`. [`SupervisedPredictor`]
//! maps a single encoding straight to a score.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::rng::{child, Rng64};
use crate::numerics::{Mlp, ParamSet, Sgd, SgdCosineSchedule, Tape, Tensor, Var};
use crate::search_space::{Architecture, SearchSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledArch {
    pub arch: Architecture,
    pub accuracy: f64,
}

impl LabeledArch {
    pub fn new(arch: Architecture, accuracy: f64) -> Result<Self> {
        if !(accuracy.is_finite() && (0.0..=1.0).contains(&accuracy)) {
            return Err(invalid(format!("accuracy {accuracy} of {arch} is outside [0, 1]")));
        }
        Ok(Self { arch, accuracy })
    }
}

/// Rows of `"i0,i1,...",accuracy`.
pub fn write_labeled_csv<W: std::io::Write>(out: W, data: &[LabeledArch]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::NonNumeric)
        .has_headers(false)
        .from_writer(out);
    for d in data {
        w.write_record([d.arch.key(), d.accuracy.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labeled_csv<R: std::io::Read>(input: R, path: &Path) -> Result<Vec<LabeledArch>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let perr = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if rec.len() != 2 {
            return Err(perr(format!("expected 2 fields, got {}", rec.len())));
        }
        let arch = Architecture::parse_key(&rec[0]).map_err(|e| perr(e.to_string()))?;
        let acc: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|e| perr(format!("bad accuracy `{}`: {e}", &rec[1])))?;
        out.push(LabeledArch::new(arch, acc).map_err(|e| perr(e.to_string()))?);
    }
    Ok(out)
}

pub fn save_labeled(path: &Path, data: &[LabeledArch]) -> Result<()> {
    write_labeled_csv(std::fs::File::create(path)?, data)
}

pub fn load_labeled(path: &Path) -> Result<Vec<LabeledArch>> {
    read_labeled_csv(std::fs::File::open(path)?, path)
}

/// `Σ_{truth_i > truth_j} max(0, margin − (pred_i − pred_j)) / #pairs`, or 0
/// when no pair is strictly ordered.
pub fn ranking_loss(pred: &[f64], truth: &[f64], margin: f64) -> Result<f64> {
    let pairs = ordered_pairs(pred.len(), truth)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| (margin - (pred[i] - pred[j])).max(0.0))
        .sum();
    Ok(total / pairs.len() as f64)
}

fn ordered_pairs(n: usize, truth: &[f64]) -> Result<Vec<(usize, usize)>> {
    if n != truth.len() {
        return Err(invalid(format!(
            "ranking_loss: {n} predictions for {} targets",
            truth.len()
        )));
    }
    if n < 2 {
        return Err(invalid("ranking_loss: needs at least two items"));
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if truth[i] > truth[j] {
                pairs.push((i, j));
            }
        }
    }
    Ok(pairs)
}

/// Ranking loss recorded on `tape`; returns `None` when no pair is ordered.
pub fn ranking_loss_tape(tape: &mut Tape, pred: Var, truth: &[f64], margin: f64) -> Result<Option<Var>> {
    let pairs = ordered_pairs(tape.value(pred).len(), truth)?;
    if pairs.is_empty() {
        return Ok(None);
    }
    let hi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let lo: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let a = tape.gather(pred, &hi)?;
    let b = tape.gather(pred, &lo)?;
    let d = tape.sub(b, a)?;
    let h = tape.affine(d, 1.0, margin)?;
    let h = tape.relu(h)?;
    Ok(Some(tape.mean(h)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub support_size: usize,
    pub query_batch: usize,
    pub margin: f64,
    pub hidden: usize,
    pub embed: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.05,
            lr_end: 0.0,
            momentum: 0.9,
            support_size: 30,
            query_batch: 20,
            margin: 0.1,
            hidden: 128,
            embed: 64,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.support_size == 0 || self.query_batch < 2 || self.hidden == 0 || self.embed == 0 {
            return Err(invalid("predictor config: sizes must be positive, query_batch >= 2"));
        }
        if !(self.margin >= 0.0 && self.lr > 0.0) {
            return Err(invalid("predictor config: lr must be > 0 and margin >= 0"));
        }
        Ok(())
    }

    fn schedule(&self, total_steps: usize) -> Result<SgdCosineSchedule> {
        SgdCosineSchedule::new(self.lr, self.lr_end.min(self.lr), total_steps.max(1), self.momentum)
    }
}

/// Per-epoch mean training loss.
pub type LossCurve = Vec<f64>;

fn encode_batch(space: &SearchSpace, archs: &[&Architecture]) -> Result<Tensor> {
    let d = space.onehot_dim();
    let mut data = Vec::with_capacity(archs.len() * d);
    for a in archs {
        space.check(a)?;
        data.extend_from_slice(space.encode_onehot(a).data());
    }
    Tensor::new(vec![archs.len(), d], data)
}

fn check_train(train: &[LabeledArch], min: usize) -> Result<()> {
    if train.len() < min {
        return Err(invalid(format!(
            "training set has {} pairs, needs at least {min}",
            train.len()
        )));
    }
    Ok(())
}

/// Encoder → pairwise decoder relation predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotPredictor {
    pub space: SearchSpace,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub params: ParamSet,
    pub support: Vec<LabeledArch>,
}

impl FewShotPredictor {
    /// Fresh network; the decoder's output layer starts at zero.
    pub fn new<R: Rng + ?Sized>(space: &SearchSpace, cfg: &PredictorConfig, rng: &mut R) -> Self {
        let mut params = ParamSet::default();
        let d = space.onehot_dim();
        let encoder = Mlp::new(&mut params, "encoder", &[d, cfg.hidden, cfg.embed], false, rng);
        let decoder = Mlp::new(&mut params, "decoder", &[2 * cfg.embed, cfg.hidden, 1], true, rng);
        Self {
            space: space.clone(),
            encoder,
            decoder,
            params,
            support: Vec::new(),
        }
    }

    /// Predictions for `queries` against `support`, recorded on `tape`.
    ///
    /// Pairs are laid out query-major so the `[q·s, 1]` offsets reshape to
    /// `[q, s]` and average along rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        support: &[&LabeledArch],
        queries: &[&Architecture],
    ) -> Result<Var> {
        if support.is_empty() {
            return Err(invalid("few-shot prediction needs a non-empty support set"));
        }
        let (s, q) = (support.len(), queries.len());
        let sx = encode_batch(&self.space, &support.iter().map(|l| &l.arch).collect::<Vec<_>>())?;
        let qx = encode_batch(&self.space, queries)?;
        let sx = tape.leaf(sx);
        let qx = tape.leaf(qx);
        let se = self.encoder.forward(tape, vars, sx)?;
        let qe = self.encoder.forward(tape, vars, qx)?;
        let si: Vec<usize> = (0..q).flat_map(|_| 0..s).collect();
        let qi: Vec<usize> = (0..q).flat_map(|j| std::iter::repeat_n(j, s)).collect();
        let sp = tape.gather_rows(se, &si)?;
        let qp = tape.gather_rows(qe, &qi)?;
        let pair = tape.concat(&[sp, qp])?;
        let off = self.decoder.forward(tape, vars, pair)?;
        let off = tape.reshape(off, &[q, s])?;
        let mean_off = tape.row_mean(off)?;
        let mean_acc = support.iter().map(|l| l.accuracy).sum::<f64>() / s as f64;
        tape.affine(mean_off, 1.0, mean_acc)
    }

    pub fn set_support(&mut self, support: Vec<LabeledArch>) -> Result<()> {
        if support.is_empty() {
            return Err(invalid("support set must be non-empty"));
        }
        for l in &support {
            self.space.check(&l.arch)?;
        }
        self.support = support;
        Ok(())
    }

    /// `FSP(query)` against the stored support set.
    pub fn predict(&self, query: &Architecture) -> Result<f64> {
        Ok(self.predict_many(std::slice::from_ref(query))?[0])
    }

    pub fn predict_many(&self, queries: &[Architecture]) -> Result<Vec<f64>> {
        let support: Vec<&LabeledArch> = self.support.iter().collect();
        let mut out = Vec::with_capacity(queries.len());
        // bounded chunks keep the pair matrix small
        for chunk in queries.chunks(64) {
            let mut tape = Tape::new();
            let vars = self.params.attach(&mut tape);
            let refs: Vec<&Architecture> = chunk.iter().collect();
            let p = self.forward(&mut tape, &vars, &support, &refs)?;
            out.extend_from_slice(tape.value(p).data());
        }
        Ok(out)
    }

    /// Episodic training: every step draws a support set and a disjoint
    /// query batch from `train`. The final support set is a fixed-seed draw.
    pub fn train(space: &SearchSpace, train: &[LabeledArch], cfg: &PredictorConfig) -> Result<(Self, LossCurve)> {
        cfg.validate()?;
        check_train(train, cfg.support_size + 2)?;
        let mut rng = child(cfg.seed, "predictor/few-shot/init");
        let mut model = Self::new(space, cfg, &mut rng);
        let mut rng = child(cfg.seed, "predictor/few-shot/episodes");
        let pool = train.len() - cfg.support_size;
        let steps_per_epoch = pool.div_ceil(cfg.query_batch);
        let mut opt = Sgd::new(cfg.schedule(cfg.epochs * steps_per_epoch)?, &model.params);
        let mut curve = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (sup_idx, rest) = order.split_at(cfg.support_size);
            let support: Vec<&LabeledArch> = sup_idx.iter().map(|&i| &train[i]).collect();
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in rest.chunks(cfg.query_batch) {
                if chunk.len() < 2 {
                    continue;
                }
                let queries: Vec<&Architecture> = chunk.iter().map(|&i| &train[i].arch).collect();
                let truth: Vec<f64> = chunk.iter().map(|&i| train[i].accuracy).collect();
                let mut tape = Tape::new();
                let vars = model.params.attach(&mut tape);
                let pred = model.forward(&mut tape, &vars, &support, &queries)?;
                let Some(loss) = ranking_loss_tape(&mut tape, pred, &truth, cfg.margin)? else {
                    continue;
                };
                epoch_loss += tape.value(loss).item()?;
                batches += 1;
                let mut g = tape.backward(loss)?;
                let grads = model.params.collect_grads(&vars, &mut g);
                opt.step(&mut model.params, &grads)?;
            }
            curve.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });
        }
        model.support = frozen_support(train, cfg.support_size, cfg.seed);
        Ok((model, curve))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Support set used at search time, drawn once with a fixed seed.
pub fn frozen_support(train: &[LabeledArch], size: usize, seed: u64) -> Vec<LabeledArch> {
    let mut rng: Rng64 = child(seed, "predictor/frozen-support");
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(size.min(train.len()));
    idx.sort_unstable();
    idx.into_iter().map(|i| train[i].clone()).collect()
}

/// Single-architecture MLP scorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedPredictor {
    pub space: SearchSpace,
    pub mlp: Mlp,
    pub params: ParamSet,
}

impl SupervisedPredictor {
    pub fn new<R: Rng + ?Sized>(space: &SearchSpace, cfg: &PredictorConfig, zero_last: bool, rng: &mut R) -> Self {
        let mut params = ParamSet::default();
        let mlp = Mlp::new(&mut params, "mlp", &[space.onehot_dim(), cfg.hidden, 1], zero_last, rng);
        Self {
            space: space.clone(),
            mlp,
            params,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], archs: &[&Architecture]) -> Result<Var> {
        let x = tape.leaf(encode_batch(&self.space, archs)?);
        let y = self.mlp.forward(tape, vars, x)?;
        tape.reshape(y, &[archs.len()])
    }

    pub fn predict(&self, arch: &Architecture) -> Result<f64> {
        Ok(self.predict_many(std::slice::from_ref(arch))?[0])
    }

    pub fn predict_many(&self, archs: &[Architecture]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape);
        let refs: Vec<&Architecture> = archs.iter().collect();
        let y = self.forward(&mut tape, &vars, &refs)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Same epochs, batch size and loss as the few-shot trainer; every
    /// training pair is a query once per epoch.
    pub fn train(space: &SearchSpace, train: &[LabeledArch], cfg: &PredictorConfig) -> Result<(Self, LossCurve)> {
        cfg.validate()?;
        check_train(train, 2)?;
        let mut rng = child(cfg.seed, "predictor/supervised/init");
        let mut model = Self::new(space, cfg, false, &mut rng);
        let mut rng = child(cfg.seed, "predictor/supervised/batches");
        let steps_per_epoch = train.len().div_ceil(cfg.query_batch);
        let mut opt = Sgd::new(cfg.schedule(cfg.epochs * steps_per_epoch)?, &model.params);
        let mut curve = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (mut total, mut batches) = (0.0, 0);
            for chunk in order.chunks(cfg.query_batch) {
                if chunk.len() < 2 {
                    continue;
                }
                let archs: Vec<&Architecture> = chunk.iter().map(|&i| &train[i].arch).collect();
                let truth: Vec<f64> = chunk.iter().map(|&i| train[i].accuracy).collect();
                let mut tape = Tape::new();
                let vars = model.params.attach(&mut tape);
                let pred = model.forward(&mut tape, &vars, &archs)?;
                let Some(loss) = ranking_loss_tape(&mut tape, pred, &truth, cfg.margin)? else {
                    continue;
                };
                total += tape.value(loss).item()?;
                batches += 1;
                let mut g = tape.backward(loss)?;
                let grads = model.params.collect_grads(&vars, &mut g);
                opt.step(&mut model.params, &grads)?;
            }
            curve.push(if batches > 0 { total / batches as f64 } else { 0.0 });
        }
        Ok((model, curve))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients_sampled;
    use crate::numerics::rng::seeded;

    fn brute_ranking(pred: &[f64], truth: &[f64], m: f64) -> f64 {
        let (mut s, mut c) = (0.0, 0usize);
        for i in 0..pred.len() {
            for j in 0..pred.len() {
                if truth[i] > truth[j] {
                    s += f64::max(0.0, m - (pred[i] - pred[j]));
                    c += 1;
                }
            }
        }
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    }

    #[test]
    fn ranking_loss_examples() {
        assert_eq!(ranking_loss(&[0.3, 0.1], &[2.0, 1.0], 0.1).unwrap(), 0.0);
        assert!((ranking_loss(&[0.5, 0.5], &[1.0, 0.0], 0.1).unwrap() - 0.1).abs() < 1e-15);
        assert!(ranking_loss(&[0.5], &[1.0], 0.1).is_err());
        assert_eq!(ranking_loss(&[0.1, 0.9, 0.4], &[0.5; 3], 0.1).unwrap(), 0.0);
        let mut rng = seeded(4);
        for _ in 0..20 {
            let p: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let t: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let want = brute_ranking(&p, &t, 0.1);
            assert!((ranking_loss(&p, &t, 0.1).unwrap() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_decoder_predicts_support_mean() {
        let space = SearchSpace::toy();
        let cfg = PredictorConfig::default();
        let mut p = FewShotPredictor::new(&space, &cfg, &mut seeded(0));
        let support: Vec<LabeledArch> = (0..5)
            .map(|i| LabeledArch::new(space.arch_at(i * 10), 0.5 + 0.05 * i as f64).unwrap())
            .collect();
        p.set_support(support.clone()).unwrap();
        let mean = support.iter().map(|l| l.accuracy).sum::<f64>() / 5.0;
        let got = p.predict(&support[2].arch).unwrap();
        assert!((got - mean).abs() < 1e-15);
        let empty = FewShotPredictor::new(&space, &cfg, &mut seeded(0));
        assert!(empty.predict(&support[0].arch).is_err());
    }

    #[test]
    fn constant_offset_decoder() {
        let space = SearchSpace::toy();
        let mut p = FewShotPredictor::new(&space, &PredictorConfig::default(), &mut seeded(0));
        let last = *p.decoder.layers.last().unwrap();
        p.params.get_mut(last.bias).data_mut()[0] = -0.1;
        p.set_support(vec![LabeledArch::new(space.arch_at(3), 0.9).unwrap()])
            .unwrap();
        assert!((p.predict(&space.arch_at(40)).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn support_permutation_invariance() {
        let space = SearchSpace::toy();
        let mut rng = seeded(2);
        let mut p = FewShotPredictor::new(&space, &PredictorConfig::default(), &mut rng);
        for i in 0..p.params.len() {
            let shape = p.params.get(i).shape().to_vec();
            *p.params.get_mut(i) = Tensor::randn(&shape, 0.2, &mut rng);
        }
        let support: Vec<LabeledArch> = (0..6)
            .map(|i| LabeledArch::new(space.arch_at(i * 13), 0.1 * i as f64).unwrap())
            .collect();
        p.set_support(support.clone()).unwrap();
        let q = space.arch_at(77);
        let a = p.predict(&q).unwrap();
        let mut rev = support;
        rev.reverse();
        p.set_support(rev).unwrap();
        assert!((p.predict(&q).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn composed_gradients_match_finite_differences() {
        let space = SearchSpace::toy();
        let cfg = PredictorConfig {
            hidden: 6,
            embed: 4,
            ..Default::default()
        };
        let mut rng = seeded(9);
        let mut p = FewShotPredictor::new(&space, &cfg, &mut rng);
        for i in 0..p.params.len() {
            let shape = p.params.get(i).shape().to_vec();
            *p.params.get_mut(i) = Tensor::randn(&shape, 0.5, &mut rng);
        }
        let support: Vec<LabeledArch> = (0..3)
            .map(|i| LabeledArch::new(space.arch_at(i * 20 + 1), 0.3 + 0.2 * i as f64).unwrap())
            .collect();
        let queries: Vec<Architecture> = (0..4).map(|i| space.arch_at(i * 17 + 5)).collect();
        let truth = [0.2, 0.8, 0.5, 0.4];
        let inputs: Vec<Tensor> = p.params.iter().map(|(_, t)| t.clone()).collect();
        let sup: Vec<&LabeledArch> = support.iter().collect();
        let qr: Vec<&Architecture> = queries.iter().collect();
        // large margin keeps every hinge active, away from its kink
        let report = check_gradients_sampled(&inputs, 1e-5, 10, &mut seeded(1), |tape, vars| {
            let pred = p.forward(tape, vars, &sup, &qr)?;
            Ok(ranking_loss_tape(tape, pred, &truth, 10.0)?.unwrap())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn labeled_csv_round_trip() {
        let data = vec![
            LabeledArch::new(Architecture::new(vec![0, 1, 2, 0]), 0.75).unwrap(),
            LabeledArch::new(Architecture::new(vec![2, 2, 2, 2]), 0.5).unwrap(),
        ];
        let mut buf = Vec::new();
        write_labeled_csv(&mut buf, &data).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf), "\"0,1,2,0\",0.75\n\"2,2,2,2\",0.5\n");
        assert_eq!(read_labeled_csv(&buf[..], Path::new("x")).unwrap(), data);
        let err = read_labeled_csv(&b"\"0,1\",1.5\n"[..], Path::new("x")).unwrap_err();
        assert!(err.to_string().starts_with("x:1:"), "{err}");
    }

    #[test]
    fn zero_init_supervised_is_constant() {
        let space = SearchSpace::toy();
        let p = SupervisedPredictor::new(&space, &PredictorConfig::default(), true, &mut seeded(0));
        let all: Vec<Architecture> = space.enumerate().collect();
        assert!(p.predict_many(&all).unwrap().iter().all(|&v| v == 0.0));
    }
}
