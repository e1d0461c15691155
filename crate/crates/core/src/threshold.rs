//! Exact mean / median thresholds over count distributions.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

/// How a threshold is derived from a distribution of counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ThresholdMode {
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "mean-median", alias = "mean+median")]
    MeanPlusMedian,
}

impl ThresholdMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdMode::Mean => "mean",
            ThresholdMode::MeanPlusMedian => "mean-median",
        }
    }

    /// Threshold over `counts`, or `None` when there are no counts.
    pub fn apply(self, counts: &[u64]) -> Option<Threshold> {
        let mean = mean(counts)?;
        Some(match self {
            ThresholdMode::Mean => mean,
            ThresholdMode::MeanPlusMedian => Threshold(mean.0 + median(counts)?.0),
        })
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThresholdMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(ThresholdMode::Mean),
            "mean-median" | "mean+median" => Ok(ThresholdMode::MeanPlusMedian),
            other => Err(format!("unknown threshold mode `{other}` (expected mean or mean-median)")),
        }
    }
}

/// A non-negative rational threshold. Comparisons against integer counts are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Threshold(Ratio<u64>);

impl Threshold {
    pub fn new(numer: u64, denom: u64) -> Self {
        Threshold(Ratio::new(numer, denom))
    }

    pub fn from_integer(v: u64) -> Self {
        Threshold(Ratio::from_integer(v))
    }

    pub fn ratio(&self) -> Ratio<u64> {
        self.0
    }

    pub fn to_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    /// `count > self`
    pub fn exceeded_by(&self, count: u64) -> bool {
        Ratio::from_integer(count) > self.0
    }

    /// `count < self`
    pub fn above(&self, count: u64) -> bool {
        Ratio::from_integer(count) < self.0
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl FromStr for Threshold {
    type Err = String;

    /// Accepts `7`, `15/2` or a plain decimal such as `7.25`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || format!("invalid threshold `{s}`");
        if let Some((n, d)) = s.split_once('/') {
            let n: u64 = n.trim().parse().map_err(|_| bad())?;
            let d: u64 = d.trim().parse().map_err(|_| bad())?;
            if d.is_zero() {
                return Err(bad());
            }
            return Ok(Threshold::new(n, d));
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.is_empty() || frac.len() > 18 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
            let scale = 10u64.pow(frac.len() as u32);
            let frac: u64 = frac.parse().map_err(|_| bad())?;
            let numer = int
                .checked_mul(scale)
                .and_then(|v| v.checked_add(frac))
                .ok_or_else(bad)?;
            return Ok(Threshold::new(numer, scale));
        }
        s.parse().map(Threshold::from_integer).map_err(|_| bad())
    }
}

pub fn mean(counts: &[u64]) -> Option<Threshold> {
    if counts.is_empty() {
        return None;
    }
    let sum: u64 = counts.iter().sum();
    Some(Threshold::new(sum, counts.len() as u64))
}

/// Median; the average of the two middle values for even lengths.
pub fn median(counts: &[u64]) -> Option<Threshold> {
    if counts.is_empty() {
        return None;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        Threshold::from_integer(sorted[mid])
    } else {
        Threshold::new(sorted[mid - 1] + sorted[mid], 2)
    })
}
