use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::continuous::same_shape;
use crate::error::Result;

/// The paper's rain-rate thresholds in mm/h.
pub const DEFAULT_THRESHOLDS_MMH: [f32; 3] = [1.0, 10.0, 50.0];

/// 2×2 contingency counts for exceedance of `threshold_mmh` (`value >= threshold`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
    pub threshold_mmh: f32,
}

impl ContingencyTable {
    pub fn new(threshold_mmh: f32) -> Self {
        Self {
            hits: 0,
            misses: 0,
            false_alarms: 0,
            correct_negatives: 0,
            threshold_mmh,
        }
    }

    pub fn from_fields(obs: &Array2<f32>, pred: &Array2<f32>, threshold_mmh: f32) -> Result<Self> {
        same_shape(obs, pred)?;
        let mut t = Self::new(threshold_mmh);
        t.accumulate(obs, pred);
        Ok(t)
    }

    fn accumulate(&mut self, obs: &Array2<f32>, pred: &Array2<f32>) {
        let thr = self.threshold_mmh;
        for (&o, &p) in obs.iter().zip(pred) {
            match (o >= thr, p >= thr) {
                (true, true) => self.hits += 1,
                (true, false) => self.misses += 1,
                (false, true) => self.false_alarms += 1,
                (false, false) => self.correct_negatives += 1,
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    /// `hits / (hits + misses + false_alarms)`, NaN when no event was observed or forecast.
    pub fn csi(&self) -> f64 {
        let d = self.hits + self.misses + self.false_alarms;
        if d == 0 {
            f64::NAN
        } else {
            self.hits as f64 / d as f64
        }
    }

    /// `(hits + false_alarms) / (hits + misses)`, NaN when no event was observed.
    pub fn bias(&self) -> f64 {
        let d = self.hits + self.misses;
        if d == 0 {
            f64::NAN
        } else {
            (self.hits + self.false_alarms) as f64 / d as f64
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.hits += other.hits;
        self.misses += other.misses;
        self.false_alarms += other.false_alarms;
        self.correct_negatives += other.correct_negatives;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoricalScore {
    pub threshold_mmh: f32,
    /// NaN (serialized as null) when undefined; see `no_events`.
    #[serde(deserialize_with = "super::non_finite::f64")]
    pub csi: f64,
    #[serde(deserialize_with = "super::non_finite::f64")]
    pub bias: f64,
    /// Set when a denominator was zero and the score is undefined.
    pub no_events: bool,
    pub table: ContingencyTable,
}

impl From<ContingencyTable> for CategoricalScore {
    fn from(table: ContingencyTable) -> Self {
        let (csi, bias) = (table.csi(), table.bias());
        Self {
            threshold_mmh: table.threshold_mmh,
            csi,
            bias,
            no_events: csi.is_nan() || bias.is_nan(),
            table,
        }
    }
}

/// CSI and frequency bias per threshold, on rain-rate fields.
pub fn categorical_scores(
    obs: &Array2<f32>,
    pred: &Array2<f32>,
    thresholds_mmh: &[f32],
) -> Result<Vec<CategoricalScore>> {
    thresholds_mmh
        .iter()
        .map(|&t| ContingencyTable::from_fields(obs, pred, t).map(CategoricalScore::from))
        .collect()
}
