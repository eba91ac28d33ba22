//! Radar reflectivity data model and unit conversions.
//!
//! Fields are stored as 32-bit `ndarray` grids, row-major, row 0 at the top.
//! Preprocessed reflectivity lives on a 0.1 dBZ lattice clipped to
//! `[clip_min_dbz, clip_max_dbz]`, which for the default spec gives the
//! 601-level dynamic range the tokenizer is sized against.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIMESTEP_MINUTES: u16 = 5;

/// Reflectivity in dBZ on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectivityField {
    pub values: Array2<f32>,
    pub resolution_km: f32,
}

/// Rain rate in mm/h, same shape as the reflectivity it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RainRateField {
    pub values: Array2<f32>,
    pub resolution_km: f32,
}

impl ReflectivityField {
    pub fn new(values: Array2<f32>) -> Self {
        Self {
            values,
            resolution_km: 1.0,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(Array2::zeros((height, width)))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

impl RainRateField {
    pub fn new(values: Array2<f32>) -> Self {
        Self {
            values,
            resolution_km: 1.0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// A time-ordered stack of frames at a fixed step. Index 0 is the oldest frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarSequence {
    frames: Vec<ReflectivityField>,
    pub timestep_minutes: u16,
    pub start_time: Option<String>,
}

impl RadarSequence {
    pub fn new(frames: Vec<ReflectivityField>, timestep_minutes: u16) -> Result<Self> {
        if let Some(first) = frames.first() {
            let shape = first.shape();
            for f in &frames[1..] {
                if f.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        expected: vec![shape.0, shape.1],
                        found: vec![f.height(), f.width()],
                    });
                }
            }
        }
        if timestep_minutes == 0 {
            return Err(Error::config("timestep_minutes must be positive"));
        }
        Ok(Self {
            frames,
            timestep_minutes,
            start_time: None,
        })
    }

    pub fn frames(&self) -> &[ReflectivityField] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<ReflectivityField> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame shape, or `(0, 0)` for an empty sequence.
    pub fn frame_shape(&self) -> (usize, usize) {
        self.frames.first().map(|f| f.shape()).unwrap_or((0, 0))
    }

    /// Contiguous sub-sequence `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![start + len],
                found: vec![self.frames.len()],
            });
        }
        Ok(Self {
            frames: self.frames[start..start + len].to_vec(),
            timestep_minutes: self.timestep_minutes,
            start_time: None,
        })
    }
}

/// Preprocessing constants: clip range, quantization step and the Z-R law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    pub clip_min_dbz: f64,
    pub clip_max_dbz: f64,
    pub quantum_dbz: f64,
    pub zr_a: f64,
    pub zr_b: f64,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            clip_min_dbz: 0.0,
            clip_max_dbz: 60.0,
            quantum_dbz: 0.1,
            zr_a: 200.0,
            zr_b: 1.6,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.clip_min_dbz,
            self.clip_max_dbz,
            self.quantum_dbz,
            self.zr_a,
            self.zr_b,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("preprocess parameters must be finite"));
        }
        if self.clip_min_dbz >= self.clip_max_dbz {
            return Err(Error::config("clip_min_dbz must be below clip_max_dbz"));
        }
        if self.quantum_dbz <= 0.0 {
            return Err(Error::config("quantum_dbz must be positive"));
        }
        if self.zr_a <= 0.0 || self.zr_b <= 0.0 {
            return Err(Error::config("zr_a and zr_b must be positive"));
        }
        Ok(())
    }

    /// Number of representable values after clipping and quantization.
    pub fn dynamic_range_levels(&self) -> usize {
        ((self.clip_max_dbz - self.clip_min_dbz) / self.quantum_dbz).round() as usize + 1
    }

    /// Clip then snap one value to the quantum lattice (round half away from zero).
    pub fn quantize_value(&self, v: f32) -> f32 {
        let clipped = (v as f64).clamp(self.clip_min_dbz, self.clip_max_dbz);
        let snapped = (clipped / self.quantum_dbz).round() * self.quantum_dbz;
        snapped.clamp(self.clip_min_dbz, self.clip_max_dbz) as f32
    }

    pub fn dbz_to_rain(&self, dbz: f64) -> f64 {
        let z = 10f64.powf(dbz / 10.0);
        (z / self.zr_a).powf(1.0 / self.zr_b)
    }

    /// Inverse Z-R; zero rain maps to the clip floor.
    pub fn rain_to_dbz(&self, rain: f64) -> f64 {
        if rain == 0.0 {
            return self.clip_min_dbz;
        }
        10.0 * (self.zr_a * rain.powf(self.zr_b)).log10()
    }
}

fn count_non_finite(values: &Array2<f32>) -> usize {
    values.iter().filter(|v| !v.is_finite()).count()
}

/// Clip to the spec range and round to the nearest quantum. Idempotent and monotone.
pub fn clip_and_quantize(
    field: &ReflectivityField,
    spec: &PreprocessSpec,
) -> Result<ReflectivityField> {
    spec.validate()?;
    let bad = count_non_finite(&field.values);
    if bad > 0 {
        return Err(Error::NonFinite { count: bad });
    }
    Ok(ReflectivityField {
        values: field.values.mapv(|v| spec.quantize_value(v)),
        resolution_km: field.resolution_km,
    })
}

/// Marshall-Palmer style conversion `R = (10^(dBZ/10) / a)^(1/b)`.
pub fn dbz_to_rainrate(field: &ReflectivityField, spec: &PreprocessSpec) -> RainRateField {
    RainRateField {
        values: field.values.mapv(|v| spec.dbz_to_rain(v as f64) as f32),
        resolution_km: field.resolution_km,
    }
}

/// Exact inverse of [`dbz_to_rainrate`], with `R = 0` mapped to the clip floor.
pub fn rainrate_to_dbz(field: &RainRateField, spec: &PreprocessSpec) -> Result<ReflectivityField> {
    let bad = count_non_finite(&field.values);
    if bad > 0 {
        return Err(Error::NonFinite { count: bad });
    }
    let negative = field.values.iter().filter(|&&v| v < 0.0).count();
    if negative > 0 {
        return Err(Error::NegativeRainRate { count: negative });
    }
    Ok(ReflectivityField {
        values: field.values.mapv(|r| spec.rain_to_dbz(r as f64) as f32),
        resolution_km: field.resolution_km,
    })
}

/// Apply [`clip_and_quantize`] to every frame.
pub fn preprocess_sequence(seq: &RadarSequence, spec: &PreprocessSpec) -> Result<RadarSequence> {
    let frames = seq
        .frames()
        .iter()
        .map(|f| clip_and_quantize(f, spec))
        .collect::<Result<Vec<_>>>()?;
    let mut out = RadarSequence::new(frames, seq.timestep_minutes)?;
    out.start_time = seq.start_time.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn field(values: Array2<f32>) -> ReflectivityField {
        ReflectivityField::new(values)
    }

    /// Independent rounding oracle: decimal string formatting rounds half to even, so
    /// go through an integer lattice with an explicit half-away rule instead.
    fn round_half_away_oracle(v: f64, quantum: f64) -> f64 {
        let scaled = v / quantum;
        let floor = scaled.floor();
        let frac = scaled - floor;
        let k = if scaled >= 0.0 {
            if frac >= 0.5 {
                floor + 1.0
            } else {
                floor
            }
        } else if frac > 0.5 {
            floor + 1.0
        } else {
            floor
        };
        k * quantum
    }

    #[test]
    fn clip_boundaries_and_rounding() {
        let spec = PreprocessSpec::default();
        let out = clip_and_quantize(&field(array![[61.37, -3.2, 23.456]]), &spec).unwrap();
        assert_eq!(out.values[[0, 0]], 60.0);
        assert_eq!(out.values[[0, 1]], 0.0);
        assert_eq!(out.values[[0, 2]], 23.5);
        assert!((round_half_away_oracle(23.456, 0.1) - 23.5).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_finite_with_count() {
        let spec = PreprocessSpec::default();
        let err = clip_and_quantize(&field(array![[f32::NAN, 1.0, f32::INFINITY]]), &spec);
        assert!(matches!(err, Err(Error::NonFinite { count: 2 })));
    }

    #[test]
    fn default_range_has_601_levels() {
        assert_eq!(PreprocessSpec::default().dynamic_range_levels(), 601);
    }

    #[test]
    fn zr_reference_values() {
        let spec = PreprocessSpec::default();
        assert!((spec.dbz_to_rain(23.0103) - 1.0).abs() < 1e-3);
        assert!((spec.dbz_to_rain(0.0) - (1.0f64 / 200.0).powf(1.0 / 1.6)).abs() < 1e-12);
        assert!((spec.dbz_to_rain(0.0) - 0.0365).abs() < 1e-3);
        assert!((spec.rain_to_dbz(1.0) - 10.0 * 200f64.log10()).abs() < 1e-12);
        assert!((spec.rain_to_dbz(1.0) - 23.0103).abs() < 1e-3);
        assert_eq!(spec.rain_to_dbz(0.0), 0.0);
        let r60 = spec.dbz_to_rain(60.0);
        assert!((spec.rain_to_dbz(r60) - 60.0).abs() < 0.05);
    }

    #[test]
    fn rainrate_field_round_trip_within_tolerance() {
        let spec = PreprocessSpec::default();
        let values = Array2::from_shape_fn((7, 9), |(r, c)| ((r * 9 + c) as f32 * 0.97) % 60.0);
        let f = clip_and_quantize(&field(values), &spec).unwrap();
        let back = rainrate_to_dbz(&dbz_to_rainrate(&f, &spec), &spec).unwrap();
        for (a, b) in f.values.iter().zip(back.values.iter()) {
            assert!((a - b).abs() <= 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn negative_rain_rejected() {
        let spec = PreprocessSpec::default();
        let r = RainRateField::new(array![[1.0, -0.5], [-1.0, 0.0]]);
        assert!(matches!(
            rainrate_to_dbz(&r, &spec),
            Err(Error::NegativeRainRate { count: 2 })
        ));
    }

    #[test]
    fn sequence_rejects_mixed_shapes() {
        let frames = vec![ReflectivityField::zeros(4, 4), ReflectivityField::zeros(4, 8)];
        assert!(RadarSequence::new(frames, 5).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = PreprocessSpec::default();
        s.quantum_dbz = 0.0;
        assert!(s.validate().is_err());
        let mut s = PreprocessSpec::default();
        s.clip_min_dbz = 70.0;
        assert!(s.validate().is_err());
        let mut s = PreprocessSpec::default();
        s.zr_b = -1.0;
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn quantize_matches_oracle_and_invariants(v in -30.0f32..90.0) {
            let spec = PreprocessSpec::default();
            let q = spec.quantize_value(v);
            let expected = round_half_away_oracle((v as f64).clamp(0.0, 60.0), 0.1);
            prop_assert!((q as f64 - expected).abs() < 1e-5);
            prop_assert!((0.0..=60.0).contains(&q));
            let steps = q as f64 / 0.1;
            prop_assert!((steps - steps.round()).abs() < 1e-4);
            prop_assert_eq!(spec.quantize_value(q), q);
        }

        #[test]
        fn quantize_is_monotone(a in -10.0f32..70.0, b in -10.0f32..70.0) {
            let spec = PreprocessSpec::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(spec.quantize_value(lo) <= spec.quantize_value(hi));
        }

        #[test]
        fn zr_inverse_pair(r in 1e-4f64..500.0) {
            let spec = PreprocessSpec::default();
            let back = spec.dbz_to_rain(spec.rain_to_dbz(r));
            prop_assert!(((back - r) / r).abs() < 1e-6);
        }

        #[test]
        fn dbz_inverse_pair(d in 0.01f64..60.0) {
            let spec = PreprocessSpec::default();
            let back = spec.rain_to_dbz(spec.dbz_to_rain(d));
            prop_assert!(((back - d) / d).abs() < 1e-6);
        }
    }
}
