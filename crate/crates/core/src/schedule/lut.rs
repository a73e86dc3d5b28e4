//! Parameter-free residual correction: per-σ-bin statistics of residuals
//! recorded from a corrector during sampling.
//!
//! Bins are log-spaced over the recorded σ range. The center of a populated
//! bin is the mean `ln σ` of its records, so querying the exact σ a bin was
//! filled from returns that bin's mean. Queries interpolate bin means
//! linearly in `ln σ` between neighbouring populated centers and clamp to
//! the outermost populated bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LUT_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupTable {
    pub edges: Vec<f64>,
    pub centers: Vec<Option<f64>>,
    pub mean_r: Vec<Option<f64>>,
    pub std_r: Vec<Option<f64>>,
    pub counts: Vec<u64>,
}

pub fn record_and_build_lut(records: &[(f64, f64)], num_bins: usize) -> Result<LookupTable> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if num_bins == 0 {
        return Err(Error::InvalidRange("need at least one bin".into()));
    }
    if let Some(&(s, r)) = records
        .iter()
        .find(|(s, r)| !(s.is_finite() && *s > 0.0 && r.is_finite()))
    {
        return Err(Error::InvalidRange(format!("bad record (sigma={s}, r={r})")));
    }

    let (mut lo, mut hi) = records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (s, _)| {
        (lo.min(s.ln()), hi.max(s.ln()))
    });
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / num_bins as f64;
    let mut edges: Vec<f64> = (0..=num_bins).map(|i| (lo + i as f64 * width).exp()).collect();
    edges[0] = lo.exp();
    edges[num_bins] = hi.exp();

    let mut counts = vec![0u64; num_bins];
    let mut sum_log = vec![0.0; num_bins];
    let mut sum = vec![0.0; num_bins];
    let mut sum_sq = vec![0.0; num_bins];
    for &(s, r) in records {
        let b = (((s.ln() - lo) / width).floor().max(0.0) as usize).min(num_bins - 1);
        counts[b] += 1;
        sum_log[b] += s.ln();
        sum[b] += r;
        sum_sq[b] += r * r;
    }

    let mut centers = vec![None; num_bins];
    let mut mean_r = vec![None; num_bins];
    let mut std_r = vec![None; num_bins];
    for b in 0..num_bins {
        if counts[b] == 0 {
            continue;
        }
        let c = counts[b] as f64;
        let mean = sum[b] / c;
        centers[b] = Some((sum_log[b] / c).exp());
        mean_r[b] = Some(mean);
        std_r[b] = Some((sum_sq[b] / c - mean * mean).max(0.0).sqrt());
    }
    Ok(LookupTable {
        edges,
        centers,
        mean_r,
        std_r,
        counts,
    })
}

impl LookupTable {
    /// `(ln center, mean)` of every populated bin, ascending in σ.
    fn populated(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.centers
            .iter()
            .zip(&self.mean_r)
            .zip(&self.counts)
            .filter_map(|((c, m), &n)| match (c, m) {
                (Some(c), Some(m)) if n > 0 => Some((c.ln(), *m)),
                _ => None,
            })
    }

    pub fn query(&self, sigma: f64) -> f64 {
        let x = sigma.ln();
        let mut prev: Option<(f64, f64)> = None;
        for (c, m) in self.populated() {
            if x == c {
                return m;
            }
            if x < c {
                return match prev {
                    None => m,
                    Some((pc, pm)) => {
                        let w = (x - pc) / (c - pc);
                        (pm + w * (m - pm)).clamp(pm.min(m), pm.max(m))
                    }
                };
            }
            prev = Some((c, m));
        }
        prev.map_or(0.0, |(_, m)| m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        let bins = t.counts.len();
        if bins == 0
            || t.edges.len() != bins + 1
            || t.centers.len() != bins
            || t.mean_r.len() != bins
            || t.std_r.len() != bins
        {
            return Err(Error::ShapeMismatch("lookup table arrays disagree in length".into()));
        }
        if t.edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidRange("lookup table edges must increase".into()));
        }
        Ok(t)
    }
}

/// Free-function form of [`LookupTable::query`].
pub fn lut_query(table: &LookupTable, sigma: f64) -> f64 {
    table.query(sigma)
}
