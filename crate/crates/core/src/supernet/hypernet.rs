use rand::Rng;
use serde::{Deserialize, Serialize};

use super::KERNEL_MAX;
use crate::error::Result;
use crate::numerics::{Linear, ParamSet, Tape, Tensor, Var};
use crate::search_space::Architecture;

pub const OFFSET_LEN: usize = KERNEL_MAX * KERNEL_MAX;

/// Indices of one GRU direction's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct GruCell {
    /// Input-to-gate maps for update, reset and candidate.
    wz: Linear,
    wr: Linear,
    wn: Linear,
    /// Hidden-to-gate maps (their biases stay at zero).
    uz: Linear,
    ur: Linear,
    un: Linear,
}

impl GruCell {
    fn new<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let wi = (1.0 / input as f64).sqrt();
        let wh = (1.0 / hidden as f64).sqrt();
        Self {
            wz: Linear::new(p, &format!("{name}.wz"), input, hidden, wi, rng),
            wr: Linear::new(p, &format!("{name}.wr"), input, hidden, wi, rng),
            wn: Linear::new(p, &format!("{name}.wn"), input, hidden, wi, rng),
            uz: Linear::new(p, &format!("{name}.uz"), hidden, hidden, wh, rng),
            ur: Linear::new(p, &format!("{name}.ur"), hidden, hidden, wh, rng),
            un: Linear::new(p, &format!("{name}.un"), hidden, hidden, wh, rng),
        }
    }

    /// `h' = (1 − z)·n + z·h` with `n = tanh(W_n x + U_n (r·h))`.
    fn step(&self, tape: &mut Tape, v: &[Var], x: Var, h: Var) -> Result<Var> {
        let a = self.wz.forward(tape, v, x)?;
        let b = self.uz.forward(tape, v, h)?;
        let z = tape.add(a, b)?;
        let z = tape.sigmoid(z)?;
        let a = self.wr.forward(tape, v, x)?;
        let b = self.ur.forward(tape, v, h)?;
        let r = tape.add(a, b)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let a = self.wn.forward(tape, v, x)?;
        let b = self.un.forward(tape, v, rh)?;
        let n = tape.add(a, b)?;
        let n = tape.tanh(n)?;
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        tape.add(n, zd)
    }
}

/// Bidirectional GRU mapping an architecture to one positive 5×5 offset per
/// site: `exp(W [h_fwd; h_bwd] + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperNet {
    pub num_sites: usize,
    pub num_choices: usize,
    pub hidden: usize,
    fwd: GruCell,
    bwd: GruCell,
    out: Linear,
    pub params: ParamSet,
}

impl HyperNet {
    /// `out_std` sets the spread of the initial output projection; its bias
    /// starts at zero so offsets begin near 1.
    pub fn new<R: Rng + ?Sized>(
        num_sites: usize,
        num_choices: usize,
        hidden: usize,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamSet::default();
        let fwd = GruCell::new(&mut params, "hyper.fwd", num_choices, hidden, rng);
        let bwd = GruCell::new(&mut params, "hyper.bwd", num_choices, hidden, rng);
        let out = Linear::new(&mut params, "hyper.out", 2 * hidden, OFFSET_LEN, out_std, rng);
        Self {
            num_sites,
            num_choices,
            hidden,
            fwd,
            bwd,
            out,
            params,
        }
    }

    /// Per-site offsets `[5, 5]` recorded on `tape`.
    pub fn offsets(&self, tape: &mut Tape, v: &[Var], arch: &Architecture) -> Result<Vec<Var>> {
        let l = arch.len();
        let xs: Vec<Var> = arch
            .indices()
            .iter()
            .map(|&c| {
                let mut x = vec![0.0; self.num_choices];
                x[c] = 1.0;
                tape.leaf(Tensor::from_parts(vec![1, self.num_choices], x))
            })
            .collect();
        let h0 = Tensor::zeros(&[1, self.hidden]);
        let mut hf = Vec::with_capacity(l);
        let mut h = tape.leaf(h0.clone());
        for &x in &xs {
            h = self.fwd.step(tape, v, x, h)?;
            hf.push(h);
        }
        let mut hb = vec![h; l];
        let mut h = tape.leaf(h0);
        for t in (0..l).rev() {
            h = self.bwd.step(tape, v, xs[t], h)?;
            hb[t] = h;
        }
        (0..l)
            .map(|t| {
                let cat = tape.concat(&[hf[t], hb[t]])?;
                let o = self.out.forward(tape, v, cat)?;
                let o = tape.exp(o)?;
                tape.reshape(o, &[KERNEL_MAX, KERNEL_MAX])
            })
            .collect()
    }

    /// Offsets as plain tensors.
    pub fn offset_values(&self, arch: &Architecture) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let v = self.params.attach(&mut tape);
        let offs = self.offsets(&mut tape, &v, arch)?;
        Ok(offs.iter().map(|&o| tape.value(o).clone()).collect())
    }
}
