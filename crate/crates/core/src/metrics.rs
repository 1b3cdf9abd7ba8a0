//! Rank correlation and error metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::oracle::BenchmarkTable;
use crate::search_space::Architecture;

fn check_pair(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid(format!("{what}: length mismatch ({} vs {})", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(invalid(format!("{what}: needs at least two elements")));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(invalid(format!("{what}: inputs must be finite")));
    }
    Ok(())
}

/// Σ t(t−1)/2 over runs of equal values in a sorted slice.
fn tie_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Stable merge sort by value that counts inversions.
fn sort_count_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        sort_count_swaps(l, bl) + sort_count_swaps(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall τ-b in `O(n log n)` (Knight's algorithm).
///
/// ```
/// let tau = wpnas::metrics::kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
/// assert!((tau - 2.0 / 3.0).abs() < 1e-15);
/// ```
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, "kendall_tau")?;
    let n = a.len() as u64;
    let n0 = n * (n - 1) / 2;
    // adding +0.0 maps -0.0 to 0.0 so total_cmp agrees with ==
    let a: Vec<f64> = a.iter().map(|x| x + 0.0).collect();
    let b: Vec<f64> = b.iter().map(|x| x + 0.0).collect();
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let sa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let n1 = tie_pairs(&sa);
    let n3 = tie_pairs_joint(&sa, &idx.iter().map(|&i| b[i]).collect::<Vec<_>>());
    let mut sb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let mut buf = vec![0.0; sb.len()];
    let swaps = sort_count_swaps(&mut sb, &mut buf);
    let n2 = tie_pairs(&sb);
    let denom_a = n0 - n1;
    let denom_b = n0 - n2;
    if denom_a == 0 || denom_b == 0 {
        return Err(invalid("kendall_tau: undefined for an all-tied input"));
    }
    let num = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    Ok(num as f64 / ((denom_a as f64) * (denom_b as f64)).sqrt())
}

fn tie_pairs_joint(a: &[f64], b: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for i in 1..a.len() {
        if a[i] == a[i - 1] && b[i] == b[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Pearson correlation; errors when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, "pearson")?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(invalid("pearson: zero variance"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, "mse")?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Affine map onto `[0, 1]`; a constant input maps to all zeros.
pub fn min_max_normalize(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        x.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; x.len()]
    }
}

/// MSE between min-max normalised proxy scores and ground truth.
pub fn normalized_mse(proxy: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(proxy, truth, "normalized_mse")?;
    mse(&min_max_normalize(proxy), &min_max_normalize(truth))
}

/// `1 + #{v : v > value}`.
pub fn rank_of(value: f64, all: &[f64]) -> usize {
    1 + all.iter().filter(|&&v| v > value).count()
}

/// Rank of `searched` by ground truth over a complete table, and its accuracy.
pub fn best_rank(searched: &Architecture, table: &BenchmarkTable) -> Result<(usize, f64)> {
    if !table.is_complete() {
        return Err(invalid(format!(
            "best_rank needs a complete table; `{}` is partial",
            table.space_id
        )));
    }
    let acc = table.lookup(searched)?.gt;
    let rank = 1 + table.iter().filter(|(_, r)| r.gt > acc).count();
    Ok((rank, acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kendall_tau: f64,
    pub pearson: f64,
    pub mse: f64,
    pub best_rank: usize,
    pub best_acc: f64,
    pub n: usize,
    pub final_arch: Architecture,
    pub final_flops: f64,
}

impl EvalReport {
    /// Correlation metrics of `proxy` against `truth`, plus the searched result.
    pub fn from_scores(
        proxy: &[f64],
        truth: &[f64],
        best_rank: usize,
        best_acc: f64,
        final_arch: Architecture,
        final_flops: f64,
    ) -> Result<Self> {
        let report = Self {
            kendall_tau: kendall_tau(proxy, truth)?,
            pearson: pearson(proxy, truth)?,
            mse: normalized_mse(proxy, truth)?,
            best_rank,
            best_acc,
            n: proxy.len(),
            final_arch,
            final_flops,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.kendall_tau,
            self.pearson,
            self.mse,
            self.best_acc,
            self.final_flops,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite || self.best_rank == 0 {
            return Err(invalid(format!("malformed report: {self:?}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub const CSV_HEADER: [&'static str; 10] = [
        "seed",
        "config_hash",
        "kendall_tau",
        "pearson",
        "mse",
        "best_rank",
        "best_acc",
        "n",
        "final_arch",
        "final_flops",
    ];

    pub fn csv_row(&self, seed: u64, config_hash: u64) -> Vec<String> {
        vec![
            seed.to_string(),
            format!("{config_hash:016x}"),
            self.kendall_tau.to_string(),
            self.pearson.to_string(),
            self.mse.to_string(),
            self.best_rank.to_string(),
            self.best_acc.to_string(),
            self.n.to_string(),
            self.final_arch.key(),
            self.final_flops.to_string(),
        ]
    }

    /// Appends one row, writing the header first when the file is new or empty.
    pub fn append_csv(&self, path: &Path, seed: u64, config_hash: u64) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record(Self::CSV_HEADER)?;
        }
        w.write_record(self.csv_row(seed, config_hash))?;
        w.flush()?;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W, seed: u64, config_hash: u64) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        w.write_record(self.csv_row(seed, config_hash))?;
        w.flush()?;
        Ok(())
    }
}
