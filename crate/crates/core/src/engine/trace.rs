use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::search_space::Architecture;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub sampled: Architecture,
    pub greedy: Architecture,
    pub reward: f64,
    pub baseline: f64,
    pub advantage: f64,
    /// Entropy (nats) of every site's distribution after the update.
    pub entropy: Vec<f64>,
}

/// Append-only log of a search run, one record per architecture update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    records: Vec<TraceRecord>,
}

impl SearchTrace {
    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn advantages(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.advantage).collect()
    }

    /// Total entropy summed over sites, per step.
    pub fn total_entropy(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.entropy.iter().sum()).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let sites = self.records.first().map_or(0, |r| r.entropy.len());
        let mut header = vec![
            "step".to_string(),
            "sampled".into(),
            "greedy".into(),
            "reward".into(),
            "baseline".into(),
            "advantage".into(),
        ];
        header.extend((0..sites).map(|i| format!("entropy_{i}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.step.to_string(),
                r.sampled.key(),
                r.greedy.key(),
                r.reward.to_string(),
                r.baseline.to_string(),
                r.advantage.to_string(),
            ];
            row.extend(r.entropy.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Plot data: reward, advantage and total entropy per step, raw and as
    /// trailing moving averages over `window` steps.
    pub fn write_curves_csv<W: Write>(&self, out: W, window: usize) -> Result<()> {
        let reward: Vec<f64> = self.records.iter().map(|r| r.reward).collect();
        let cols = [reward, self.advantages(), self.total_entropy()];
        let smooth: Vec<Vec<f64>> = cols.iter().map(|c| moving_average(c, window)).collect();
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step",
            "reward",
            "advantage",
            "entropy",
            "reward_ma",
            "advantage_ma",
            "entropy_ma",
        ])?;
        for (i, r) in self.records.iter().enumerate() {
            let mut row = vec![r.step.to_string()];
            row.extend(cols.iter().chain(&smooth).map(|c| c[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
