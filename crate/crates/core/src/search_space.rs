//! Discrete architecture spaces, their encodings, and an additive FLOPs model.
//!
//! A [`SearchSpace`] is an ordered list of decision sites; an
//! [`Architecture`] picks one choice index per site. Architectures are
//! ordered lexicographically with site 0 most significant, which is also the
//! mixed-radix order used by [`SearchSpace::arch_at`].

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SpaceKind {
    Tss,
    Sss,
    DartsCell,
    ToyConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChoiceKind {
    Operation,
    ChannelWidth,
    ParentPair,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionSite {
    pub name: String,
    pub choice_kind: ChoiceKind,
    pub choices: Vec<String>,
}

impl DecisionSite {
    pub fn new(name: impl Into<String>, kind: ChoiceKind, choices: &[&str]) -> Self {
        Self {
            name: name.into(),
            choice_kind: kind,
            choices: choices.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn cardinality(&self) -> usize {
        self.choices.len()
    }
}

/// One choice index per decision site.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Architecture(pub Vec<usize>);

impl Architecture {
    pub fn new(indices: Vec<usize>) -> Self {
        Self(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Comma-separated indices, as used in the CSV formats.
    pub fn key(&self) -> String {
        self.0.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }

    pub fn parse_key(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches('<').trim_end_matches('>');
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|e| invalid(format!("bad architecture index `{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Architecture)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.key())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub id: String,
    pub kind: SpaceKind,
    pub sites: Vec<DecisionSite>,
}

pub const TSS_OPS: [&str; 5] = ["none", "skip_connect", "nor_conv_1x1", "nor_conv_3x3", "avg_pool_3x3"];
pub const TSS_EDGES: [&str; 6] = ["1<-0", "2<-0", "2<-1", "3<-0", "3<-1", "3<-2"];
pub const SSS_WIDTHS: [usize; 8] = [8, 16, 24, 32, 40, 48, 56, 64];
pub const TOY_OPS: [&str; 3] = ["conv3x3", "conv5x5", "skip"];
pub const DARTS_OPS: [&str; 8] = [
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "none",
];

fn binomial2(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

impl SearchSpace {
    pub fn new(id: impl Into<String>, kind: SpaceKind, sites: Vec<DecisionSite>) -> Result<Self> {
        let space = Self {
            id: id.into(),
            kind,
            sites,
        };
        space.validate()?;
        Ok(space)
    }

    /// Six cell edges, five operations each.
    pub fn tss() -> Self {
        let sites = TSS_EDGES
            .iter()
            .map(|e| DecisionSite::new(format!("edge_{e}"), ChoiceKind::Operation, &TSS_OPS))
            .collect();
        Self::new("tss", SpaceKind::Tss, sites).expect("static space")
    }

    /// Five layers, eight candidate channel widths each.
    pub fn sss() -> Self {
        let widths: Vec<String> = SSS_WIDTHS.iter().map(usize::to_string).collect();
        let widths: Vec<&str> = widths.iter().map(String::as_str).collect();
        let sites = (0..5)
            .map(|l| DecisionSite::new(format!("layer_{l}"), ChoiceKind::ChannelWidth, &widths))
            .collect();
        Self::new("sss", SpaceKind::Sss, sites).expect("static space")
    }

    /// Four sequential layers choosing among 3×3 conv, 5×5 conv and skip.
    pub fn toy() -> Self {
        let sites = (0..4)
            .map(|l| DecisionSite::new(format!("layer_{l}"), ChoiceKind::Operation, &TOY_OPS))
            .collect();
        Self::new("toy", SpaceKind::ToyConv, sites).expect("static space")
    }

    /// DARTS-style cell with the usual two stem inputs.
    pub fn darts_cell(num_inner_nodes: usize, num_ops: usize) -> Result<Self> {
        Self::darts_cell_with_inputs(2, num_inner_nodes, num_ops)
    }

    /// Cell whose inner node `i` (0-based) picks an unordered parent pair
    /// among its `num_inputs + i` predecessors, then one operation for each
    /// of the two parents (first for the lower-indexed parent).
    pub fn darts_cell_with_inputs(num_inputs: usize, num_inner_nodes: usize, num_ops: usize) -> Result<Self> {
        if num_inner_nodes == 0 {
            return Err(invalid("a DARTS cell needs at least one inner node"));
        }
        if num_ops < 2 {
            return Err(invalid("a DARTS cell needs at least two operations"));
        }
        let ops: Vec<String> = if num_ops == DARTS_OPS.len() {
            DARTS_OPS.iter().map(|s| s.to_string()).collect()
        } else {
            (0..num_ops).map(|k| format!("op{k}")).collect()
        };
        let mut sites = Vec::with_capacity(3 * num_inner_nodes);
        for i in 0..num_inner_nodes {
            let preds = num_inputs + i;
            if preds < 2 {
                return Err(invalid(format!(
                    "inner node {i} has {preds} predecessor(s); a parent pair needs at least 2"
                )));
            }
            let node = num_inputs + i;
            let pairs: Vec<String> = parent_pairs(preds)
                .into_iter()
                .map(|(a, b)| format!("{a}+{b}"))
                .collect();
            sites.push(DecisionSite {
                name: format!("node_{node}.parents"),
                choice_kind: ChoiceKind::ParentPair,
                choices: pairs,
            });
            for side in ["a", "b"] {
                sites.push(DecisionSite {
                    name: format!("node_{node}.op_{side}"),
                    choice_kind: ChoiceKind::Operation,
                    choices: ops.clone(),
                });
            }
        }
        let id = if num_inputs == 2 {
            format!("darts-{num_inner_nodes}x{num_ops}")
        } else {
            format!("darts-{num_inputs}i-{num_inner_nodes}x{num_ops}")
        };
        Self::new(id, SpaceKind::DartsCell, sites)
    }

    /// Resolves the ids produced by the builders above.
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "tss" => Ok(Self::tss()),
            "sss" => Ok(Self::sss()),
            "toy" => Ok(Self::toy()),
            _ => {
                let rest = id
                    .strip_prefix("darts-")
                    .ok_or_else(|| invalid(format!("unknown search space `{id}`")))?;
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| invalid(format!("unknown search space `{id}`")))
                };
                let (inputs, cell) = match rest.split_once("i-") {
                    Some((i, c)) => (parse(i)?, c),
                    None => (2, rest),
                };
                let (n, k) = cell
                    .split_once('x')
                    .ok_or_else(|| invalid(format!("unknown search space `{id}`")))?;
                Self::darts_cell_with_inputs(inputs, parse(n)?, parse(k)?)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(invalid("search space has no decision sites"));
        }
        for site in &self.sites {
            // A node with exactly two predecessors has a single forced pair.
            let min = if site.choice_kind == ChoiceKind::ParentPair {
                1
            } else {
                2
            };
            if site.choices.len() < min {
                return Err(invalid(format!(
                    "site `{}` has {} choice(s), needs at least {min}",
                    site.name,
                    site.choices.len()
                )));
            }
            let unique: HashSet<&String> = site.choices.iter().collect();
            if unique.len() != site.choices.len() {
                return Err(invalid(format!("site `{}` has duplicate choice labels", site.name)));
            }
        }
        Ok(())
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.sites.iter().map(DecisionSite::cardinality).collect()
    }

    /// Number of distinct architectures (product of site cardinalities).
    pub fn size(&self) -> u128 {
        self.sites.iter().map(|s| s.cardinality() as u128).product()
    }

    /// Size as `usize` when the space is small enough to enumerate.
    pub fn enumerable_size(&self, limit: usize) -> Result<usize> {
        let size = self.size();
        if size > limit as u128 {
            return Err(invalid(format!(
                "space `{}` has {size} architectures, more than the enumeration limit {limit}",
                self.id
            )));
        }
        Ok(size as usize)
    }

    pub fn check(&self, arch: &Architecture) -> Result<()> {
        if arch.len() != self.sites.len() {
            return Err(invalid(format!(
                "architecture {arch} has {} indices, space `{}` has {} sites",
                arch.len(),
                self.id,
                self.sites.len()
            )));
        }
        for (site, &i) in self.sites.iter().zip(arch.indices()) {
            if i >= site.cardinality() {
                return Err(invalid(format!(
                    "index {i} out of range for site `{}` ({} choices)",
                    site.name,
                    site.cardinality()
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, arch: &Architecture) -> bool {
        self.check(arch).is_ok()
    }

    /// Lexicographic rank of `arch`.
    pub fn index_of(&self, arch: &Architecture) -> u128 {
        self.sites
            .iter()
            .zip(arch.indices())
            .fold(0u128, |acc, (s, &i)| acc * s.cardinality() as u128 + i as u128)
    }

    /// Inverse of [`SearchSpace::index_of`].
    pub fn arch_at(&self, mut index: u128) -> Architecture {
        let mut out = vec![0; self.sites.len()];
        for (slot, site) in out.iter_mut().zip(&self.sites).rev() {
            let k = site.cardinality() as u128;
            *slot = (index % k) as usize;
            index /= k;
        }
        Architecture(out)
    }

    /// Every architecture in lexicographic order.
    pub fn enumerate(&self) -> impl Iterator<Item = Architecture> + '_ {
        (0..self.size()).map(move |i| self.arch_at(i))
    }

    pub fn onehot_dim(&self) -> usize {
        self.sites.iter().map(DecisionSite::cardinality).sum()
    }

    /// Concatenated per-site one-hot vectors.
    pub fn encode_onehot(&self, arch: &Architecture) -> Tensor {
        let mut v = vec![0.0; self.onehot_dim()];
        let mut offset = 0;
        for (site, &i) in self.sites.iter().zip(arch.indices()) {
            v[offset + i] = 1.0;
            offset += site.cardinality();
        }
        Tensor::vector(v)
    }

    pub fn decode_onehot(&self, t: &Tensor) -> Result<Architecture> {
        if t.len() != self.onehot_dim() {
            return Err(Error::Shape {
                op: "decode_onehot",
                lhs: t.shape().to_vec(),
                rhs: vec![self.onehot_dim()],
            });
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.sites.len());
        for site in &self.sites {
            let block = &t.data()[offset..offset + site.cardinality()];
            let hot: Vec<usize> = (0..block.len()).filter(|&j| block[j] == 1.0).collect();
            if hot.len() != 1 || block.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(invalid(format!("site `{}` is not one-hot", site.name)));
            }
            out.push(hot[0]);
            offset += site.cardinality();
        }
        Ok(Architecture(out))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let space: SearchSpace = serde_json::from_str(s)?;
        space.validate()?;
        Ok(space)
    }
}

/// All unordered pairs `(a, b)` with `a < b < n`, in lexicographic order.
pub fn parent_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(binomial2(n));
    for a in 0..n {
        for b in a + 1..n {
            out.push((a, b));
        }
    }
    out
}

/// Multiply-accumulate count of a stride-1 same-size convolution.
pub fn conv_macs(k: usize, c_in: usize, c_out: usize, h: usize, w: usize) -> f64 {
    (k * k * c_in * c_out * h * w) as f64
}

/// Additive per-(site, choice) cost table in MFLOPs (multiply-accumulates).
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsModel {
    costs: Vec<Vec<Option<f64>>>,
}

impl FlopsModel {
    pub fn from_costs(costs: Vec<Vec<f64>>) -> Result<Self> {
        let model = Self {
            costs: costs
                .into_iter()
                .map(|site| site.into_iter().map(Some).collect())
                .collect(),
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        for (s, site) in self.costs.iter().enumerate() {
            for (c, v) in site.iter().enumerate() {
                if let Some(v) = v {
                    if !(v.is_finite() && *v >= 0.0) {
                        return Err(invalid(format!(
                            "FLOPs cost for site {s} choice {c} must be finite and >= 0, got {v}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// MAC-count table for the built-in spaces.
    ///
    /// TSS: 15 cells (5 per stage); `C·H` is constant across stages so every
    /// cell costs the same as a first-stage cell at C=16, 32×32.
    /// SSS: 3×3 convolutions at resolutions `[32, 32, 16, 16, 8]`; the
    /// input width of layer `l > 0` is taken as the mean candidate width so
    /// the table stays additive. Toy: 8→8 channels on 8×8 maps.
    pub fn for_space(space: &SearchSpace) -> Self {
        let mega = 1e-6;
        let costs: Vec<Vec<f64>> = match space.kind {
            SpaceKind::Tss => {
                let (c, h) = (16, 32);
                let cells = 15.0;
                let pool: f64 = [(16, 32), (32, 16), (64, 8)]
                    .iter()
                    .map(|&(c, h)| (9 * c * h * h) as f64)
                    .sum::<f64>()
                    * 5.0;
                let per_op = [
                    0.0,
                    0.0,
                    conv_macs(1, c, c, h, h) * cells,
                    conv_macs(3, c, c, h, h) * cells,
                    pool,
                ];
                space
                    .sites
                    .iter()
                    .map(|_| per_op.iter().map(|v| v * mega).collect())
                    .collect()
            }
            SpaceKind::Sss => {
                let res = [32, 32, 16, 16, 8];
                let mean_width = SSS_WIDTHS.iter().sum::<usize>() as f64 / SSS_WIDTHS.len() as f64;
                space
                    .sites
                    .iter()
                    .enumerate()
                    .map(|(l, site)| {
                        let h = res[l.min(res.len() - 1)] as f64;
                        let c_in = if l == 0 { 3.0 } else { mean_width };
                        site.choices
                            .iter()
                            .map(|c| {
                                let c: f64 = c.parse().unwrap_or(0.0);
                                9.0 * c_in * c * h * h * mega
                            })
                            .collect()
                    })
                    .collect()
            }
            SpaceKind::ToyConv => {
                let op = |name: &str| match name {
                    "conv3x3" => conv_macs(3, 8, 8, 8, 8) * mega,
                    "conv5x5" => conv_macs(5, 8, 8, 8, 8) * mega,
                    _ => 0.0,
                };
                space
                    .sites
                    .iter()
                    .map(|s| s.choices.iter().map(|c| op(c)).collect())
                    .collect()
            }
            SpaceKind::DartsCell => {
                let (c, h) = (16.0, 32.0);
                let hw = h * h;
                let pw = c * c * hw;
                let op = |name: &str| -> f64 {
                    let v = match name {
                        "sep_conv_3x3" => 2.0 * (9.0 * c * hw + pw),
                        "sep_conv_5x5" => 2.0 * (25.0 * c * hw + pw),
                        "dil_conv_3x3" => 9.0 * c * hw + pw,
                        "dil_conv_5x5" => 25.0 * c * hw + pw,
                        "max_pool_3x3" | "avg_pool_3x3" => 9.0 * c * hw,
                        _ => 0.0,
                    };
                    v * mega
                };
                space
                    .sites
                    .iter()
                    .map(|s| match s.choice_kind {
                        ChoiceKind::ParentPair => vec![0.0; s.cardinality()],
                        _ => s.choices.iter().map(|c| op(c)).collect(),
                    })
                    .collect()
            }
        };
        Self::from_costs(costs).expect("built-in costs are non-negative")
    }

    pub fn num_sites(&self) -> usize {
        self.costs.len()
    }

    pub fn cost(&self, site: usize, choice: usize) -> Result<f64> {
        self.costs
            .get(site)
            .and_then(|s| s.get(choice).copied().flatten())
            .ok_or_else(|| invalid(format!("FLOPs model has no entry for site {site}, choice {choice}")))
    }

    /// Total FLOPs of `arch` (sum of per-site costs).
    pub fn flops(&self, arch: &Architecture) -> Result<f64> {
        arch.indices().iter().enumerate().map(|(s, &c)| self.cost(s, c)).sum()
    }

    /// Largest total over the space: the per-site maximum summed.
    pub fn max_flops(&self) -> f64 {
        self.costs
            .iter()
            .map(|s| s.iter().flatten().copied().fold(0.0, f64::max))
            .sum()
    }

    /// Cheapest choice per site.
    pub fn min_flops_arch(&self) -> Architecture {
        Architecture(
            self.costs
                .iter()
                .map(|s| {
                    let mut best = 0;
                    for (i, v) in s.iter().enumerate() {
                        if v.unwrap_or(f64::INFINITY) < s[best].unwrap_or(f64::INFINITY) {
                            best = i;
                        }
                    }
                    best
                })
                .collect(),
        )
    }

    /// CSV with header `site_index,choice_index,mflops`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["site_index", "choice_index", "mflops"])?;
        for (s, site) in self.costs.iter().enumerate() {
            for (c, v) in site.iter().enumerate() {
                if let Some(v) = v {
                    w.write_record([s.to_string(), c.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut costs: Vec<Vec<Option<f64>>> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| {
                rec.get(i).ok_or_else(|| Error::Parse {
                    path: "<flops>".into(),
                    line: line + 2,
                    message: format!("missing column {i}"),
                })
            };
            let parse_err = |m: String| Error::Parse {
                path: "<flops>".into(),
                line: line + 2,
                message: m,
            };
            let s: usize = field(0)?.trim().parse().map_err(|e| parse_err(format!("{e}")))?;
            let c: usize = field(1)?.trim().parse().map_err(|e| parse_err(format!("{e}")))?;
            let v: f64 = field(2)?.trim().parse().map_err(|e| parse_err(format!("{e}")))?;
            if costs.len() <= s {
                costs.resize(s + 1, Vec::new());
            }
            if costs[s].len() <= c {
                costs[s].resize(c + 1, None);
            }
            costs[s][c] = Some(v);
        }
        let model = Self { costs };
        model.validate()?;
        Ok(model)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}
