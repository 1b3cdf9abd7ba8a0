//! Tabular evaluation backends: benchmark table files, a synthetic surrogate
//! generator, and the noisy weight-sharing evaluator.
//!
//! The surrogate's ground truth is a squashed sum of per-site utilities and
//! pairwise interactions. Weight-sharing accuracies come from a Gaussian
//! copula: the standardised latent score is mixed with independent noise by
//! a correlation `ρ` chosen so that Kendall-τ(gt, ws) hits a target, and the
//! mixed latent is mapped back onto the ground-truth marginal by rank.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::kendall_tau;
use crate::numerics::rng::{child, derive_seed};
use crate::search_space::{Architecture, FlopsModel, SearchSpace};

pub const TABLE_HEADER_PREFIX: &str = "#wpnas-table v1 space=";
pub const TABLE_DIR_ENV: &str = "WPNAS_TABLE_DIR";
/// Largest space `generate_surrogate` will enumerate.
pub const MAX_ENUMERABLE: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub gt: f64,
    pub ws: f64,
    pub flops: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coverage {
    Full,
    Partial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkTable {
    pub space_id: String,
    rows: BTreeMap<Architecture, TableRow>,
    coverage: Coverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvalMode {
    Gt,
    Ws,
}

impl BenchmarkTable {
    /// Builds and validates a table; coverage is full iff every architecture
    /// of `space` has a row.
    pub fn new(space: &SearchSpace, rows: BTreeMap<Architecture, TableRow>) -> Result<Self> {
        for (arch, row) in &rows {
            space.check(arch)?;
            check_row(arch, row)?;
        }
        let coverage = if rows.len() as u128 == space.size() {
            Coverage::Full
        } else {
            Coverage::Partial
        };
        Ok(Self {
            space_id: space.id.clone(),
            rows,
            coverage,
        })
    }

    pub fn coverage(&self) -> Coverage {
        self.coverage
    }

    pub fn is_complete(&self) -> bool {
        self.coverage == Coverage::Full
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row for `arch`, or [`Error::NotCovered`].
    pub fn lookup(&self, arch: &Architecture) -> Result<&TableRow> {
        self.rows
            .get(arch)
            .ok_or_else(|| Error::NotCovered(format!("{arch} in table `{}`", self.space_id)))
    }

    pub fn get(&self, arch: &Architecture) -> Option<&TableRow> {
        self.rows.get(arch)
    }

    /// Rows in lexicographic architecture order.
    pub fn iter(&self) -> impl Iterator<Item = (&Architecture, &TableRow)> {
        self.rows.iter()
    }

    /// Highest ground truth; the lexicographically lowest architecture wins ties.
    pub fn best(&self) -> Option<(&Architecture, &TableRow)> {
        let mut best: Option<(&Architecture, &TableRow)> = None;
        for (a, r) in &self.rows {
            if best.is_none_or(|(_, b)| r.gt > b.gt) {
                best = Some((a, r));
            }
        }
        best
    }

    pub fn gt_values(&self) -> Vec<f64> {
        self.rows.values().map(|r| r.gt).collect()
    }

    pub fn ws_values(&self) -> Vec<f64> {
        self.rows.values().map(|r| r.ws).collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::with_capacity(self.rows.len() * 48);
        let _ = writeln!(s, "{TABLE_HEADER_PREFIX}{}", self.space_id);
        for (a, r) in &self.rows {
            let _ = writeln!(s, "\"{}\",{},{},{}", a.key(), r.gt, r.ws, r.flops);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    /// Parses the v1 CSV text. `path` is used only for error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
        let space_id = header
            .trim()
            .strip_prefix(TABLE_HEADER_PREFIX)
            .ok_or_else(|| {
                perr(
                    1,
                    format!("expected header `{TABLE_HEADER_PREFIX}<id>`, got `{header}`"),
                )
            })?
            .trim()
            .to_string();
        let space = SearchSpace::from_id(&space_id).map_err(|e| perr(1, e.to_string()))?;
        let mut rows = BTreeMap::new();
        for (i, line) in lines {
            let n = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let rest = line
                .strip_prefix('"')
                .ok_or_else(|| perr(n, "architecture key must be quoted".into()))?;
            let (key, rest) = rest
                .split_once('"')
                .ok_or_else(|| perr(n, "unterminated architecture key".into()))?;
            let arch = Architecture::parse_key(key).map_err(|e| perr(n, e.to_string()))?;
            let fields: Vec<&str> = rest
                .strip_prefix(',')
                .ok_or_else(|| perr(n, "missing fields after key".into()))?
                .split(',')
                .collect();
            if fields.len() != 3 {
                return Err(perr(n, format!("expected 3 numeric fields, got {}", fields.len())));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| perr(n, format!("bad number `{s}`: {e}")))
            };
            let row = TableRow {
                gt: num(fields[0])?,
                ws: num(fields[1])?,
                flops: num(fields[2])?,
            };
            space.check(&arch).map_err(|e| perr(n, e.to_string()))?;
            check_row(&arch, &row).map_err(|e| perr(n, e.to_string()))?;
            if rows.insert(arch.clone(), row).is_some() {
                return Err(perr(n, format!("duplicate row for {arch}")));
            }
        }
        BenchmarkTable::new(&space, rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

fn check_row(arch: &Architecture, r: &TableRow) -> Result<()> {
    for (name, v) in [("gt", r.gt), ("ws", r.ws)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid(format!("{name} accuracy {v} of {arch} is outside [0, 1]")));
        }
    }
    if !(r.flops.is_finite() && r.flops >= 0.0) {
        return Err(invalid(format!("flops {} of {arch} must be finite and >= 0", r.flops)));
    }
    Ok(())
}

/// Loads a table from an explicit path.
pub fn load_table(path: &Path) -> Result<BenchmarkTable> {
    BenchmarkTable::load(path)
}

/// Resolves a table argument: an existing path is used as is, otherwise the
/// name is looked up in `dir` (or `$WPNAS_TABLE_DIR` when `dir` is `None`).
pub fn resolve_table_path(name: &Path, dir: Option<&Path>) -> Result<PathBuf> {
    if name.exists() {
        return Ok(name.to_path_buf());
    }
    let base = match dir {
        Some(d) => Some(d.to_path_buf()),
        None => std::env::var_os(TABLE_DIR_ENV).map(PathBuf::from),
    };
    if let Some(base) = base {
        let p = base.join(name);
        if p.exists() {
            return Ok(p);
        }
        return Err(invalid(format!(
            "table `{}` not found in {}",
            name.display(),
            base.display()
        )));
    }
    Err(invalid(format!(
        "table `{}` not found (set {TABLE_DIR_ENV} or pass --table)",
        name.display()
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub seed: u64,
    /// Standard deviation of the per-site choice utilities.
    pub utility_scale: f64,
    /// Standard deviation of each pairwise interaction term.
    pub interaction_strength: f64,
    /// Zero makes ws identical to gt; any positive value enables the copula.
    pub ws_noise_sigma: f64,
    pub ws_rank_corr_target: f64,
    /// Accepted deviation from the target during calibration.
    pub calibration_tol: f64,
    /// Ground truth spans `[acc_min, acc_max]` through a logistic squash.
    pub acc_min: f64,
    pub acc_max: f64,
    pub sharpness: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            utility_scale: 1.0,
            interaction_strength: 0.3,
            ws_noise_sigma: 1.0,
            ws_rank_corr_target: 0.61,
            calibration_tol: 0.01,
            acc_min: 0.1,
            acc_max: 0.95,
            sharpness: 2.0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.utility_scale >= 0.0
            && self.interaction_strength >= 0.0
            && self.ws_noise_sigma >= 0.0
            && self.ws_rank_corr_target > 0.0
            && self.ws_rank_corr_target <= 1.0
            && self.calibration_tol > 0.0
            && 0.0 <= self.acc_min
            && self.acc_min < self.acc_max
            && self.acc_max <= 1.0
            && self.sharpness > 0.0;
        if !ok {
            return Err(invalid(format!("invalid surrogate config: {self:?}")));
        }
        Ok(())
    }
}

/// Latent quality model: per-site utilities plus pairwise interactions.
struct Landscape {
    utilities: Vec<Vec<f64>>,
    /// `pairs[(l, m)]` for `l < m`, row-major over `(choice_l, choice_m)`.
    pairs: Vec<(usize, usize, usize, Vec<f64>)>,
}

impl Landscape {
    fn new(space: &SearchSpace, cfg: &SurrogateConfig) -> Self {
        let mut rng = child(cfg.seed, "surrogate/landscape");
        let k = space.cardinalities();
        let utilities = k
            .iter()
            .map(|&c| (0..c).map(|_| cfg.utility_scale * normal(&mut rng)).collect())
            .collect();
        let mut pairs = Vec::new();
        if cfg.interaction_strength > 0.0 {
            for l in 0..k.len() {
                for m in l + 1..k.len() {
                    let w = (0..k[l] * k[m])
                        .map(|_| cfg.interaction_strength * normal(&mut rng))
                        .collect();
                    pairs.push((l, m, k[m], w));
                }
            }
        }
        Self { utilities, pairs }
    }

    fn score(&self, arch: &Architecture) -> f64 {
        let a = arch.indices();
        let unary: f64 = self.utilities.iter().zip(a).map(|(u, &i)| u[i]).sum();
        let pair: f64 = self.pairs.iter().map(|(l, m, km, w)| w[a[*l] * km + a[*m]]).sum();
        unary + pair
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn standardize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / sd).collect()
}

/// Assigns to each latent the ground-truth value of the same rank.
fn rank_match(latent: &[f64], gt: &[f64]) -> Vec<f64> {
    let mut sorted_gt = gt.to_vec();
    sorted_gt.sort_by(f64::total_cmp);
    let mut order: Vec<usize> = (0..latent.len()).collect();
    order.sort_by(|&i, &j| latent[i].total_cmp(&latent[j]).then(i.cmp(&j)));
    let mut out = vec![0.0; latent.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = sorted_gt[rank];
    }
    out
}

/// Mixes `z` and `eps` until τ(z, mix) is within `tol` of `target`.
/// Returns the mixed latent, `ρ` and the measured τ.
fn calibrate(z: &[f64], eps: &[f64], target: f64, tol: f64) -> Result<(Vec<f64>, f64, f64)> {
    let mix = |rho: f64| -> Vec<f64> {
        let s = (1.0 - rho * rho).max(0.0).sqrt();
        z.iter().zip(eps).map(|(a, e)| rho * a + s * e).collect()
    };
    // bivariate-normal relation τ = (2/π)·asin(ρ) as the first guess
    let mut rho = (std::f64::consts::FRAC_PI_2 * target).sin().clamp(0.0, 1.0);
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = (f64::INFINITY, rho, Vec::new(), 0.0);
    for _ in 0..60 {
        let m = mix(rho);
        let tau = kendall_tau(z, &m)?;
        let err = (tau - target).abs();
        if err < best.0 {
            best = (err, rho, m, tau);
        }
        if err <= tol {
            break;
        }
        if tau < target {
            lo = rho;
        } else {
            hi = rho;
        }
        rho = 0.5 * (lo + hi);
    }
    Ok((best.2, best.1, best.3))
}

/// Summary of a generated table's calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub rho: f64,
    pub measured_tau: f64,
}

/// Full surrogate table over an enumerable space.
pub fn generate_surrogate(space: &SearchSpace, cfg: &SurrogateConfig) -> Result<BenchmarkTable> {
    generate_surrogate_calibrated(space, cfg).map(|(t, _)| t)
}

pub fn generate_surrogate_calibrated(
    space: &SearchSpace,
    cfg: &SurrogateConfig,
) -> Result<(BenchmarkTable, Calibration)> {
    let size = space.size();
    if size > MAX_ENUMERABLE as u128 {
        return Err(invalid(format!(
            "space `{}` has {size} architectures (limit {MAX_ENUMERABLE}); \
             use generate_partial with a sampled architecture list instead",
            space.id
        )));
    }
    let archs: Vec<Architecture> = space.enumerate().collect();
    generate_partial(space, cfg, archs)
}

/// Surrogate rows for an explicit architecture list (partial-table mode).
pub fn generate_partial(
    space: &SearchSpace,
    cfg: &SurrogateConfig,
    archs: Vec<Architecture>,
) -> Result<(BenchmarkTable, Calibration)> {
    cfg.validate()?;
    if archs.len() < 2 {
        return Err(invalid("a surrogate table needs at least two architectures"));
    }
    for a in &archs {
        space.check(a)?;
    }
    let land = Landscape::new(space, cfg);
    let flops_model = FlopsModel::for_space(space);
    let z = standardize(&archs.iter().map(|a| land.score(a)).collect::<Vec<_>>());
    let gt: Vec<f64> = z
        .iter()
        .map(|&v| cfg.acc_min + (cfg.acc_max - cfg.acc_min) / (1.0 + (-cfg.sharpness * v).exp()))
        .collect();
    let (ws, cal) = if cfg.ws_noise_sigma == 0.0 || cfg.ws_rank_corr_target >= 1.0 {
        (
            gt.clone(),
            Calibration {
                rho: 1.0,
                measured_tau: 1.0,
            },
        )
    } else {
        let mut rng = child(derive_seed(cfg.seed, &space.id), "surrogate/ws-noise");
        let eps: Vec<f64> = (0..archs.len())
            .map(|_| cfg.ws_noise_sigma * normal(&mut rng))
            .collect();
        let eps = standardize(&eps);
        let (latent, rho, _) = calibrate(&z, &eps, cfg.ws_rank_corr_target, cfg.calibration_tol)?;
        let ws = rank_match(&latent, &gt);
        let measured_tau = kendall_tau(&gt, &ws)?;
        (ws, Calibration { rho, measured_tau })
    };
    let mut rows = BTreeMap::new();
    for (i, a) in archs.into_iter().enumerate() {
        let flops = flops_model.flops(&a)?;
        rows.insert(
            a,
            TableRow {
                gt: gt[i],
                ws: ws[i],
                flops,
            },
        );
    }
    Ok((BenchmarkTable::new(space, rows)?, cal))
}

/// GT returns the stored ground truth; WS adds `N(0, sigma)` noise to the
/// weight-sharing accuracy and clamps to `[0, 1]`.
pub fn evaluate<R: Rng + ?Sized>(
    table: &BenchmarkTable,
    arch: &Architecture,
    mode: EvalMode,
    sigma: f64,
    rng: &mut R,
) -> Result<f64> {
    let row = table.lookup(arch)?;
    Ok(match mode {
        EvalMode::Gt => row.gt,
        EvalMode::Ws if sigma == 0.0 => row.ws,
        EvalMode::Ws => (row.ws + sigma * normal(rng)).clamp(0.0, 1.0),
    })
}
