//! Random crop / 90° rotation / flip, shared by every frame of a sequence.

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{RadarSequence, ReflectivityField};

/// One concrete transform. Applied in the order crop, rotate, flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub offset: (usize, usize),
    /// Number of counter-clockwise quarter turns, `0..4`.
    pub rot_k: u8,
    /// Mirror columns after rotation.
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        offset: (0, 0),
        rot_k: 0,
        flip: false,
    };

    pub fn draw<R: Rng>(rng: &mut R, frame_hw: (usize, usize), crop_hw: (usize, usize)) -> Self {
        let oy = rng.random_range(0..=frame_hw.0 - crop_hw.0);
        let ox = rng.random_range(0..=frame_hw.1 - crop_hw.1);
        let rot_k = rng.random_range(0..4u8);
        let flip = rng.random_bool(0.5);
        Self {
            offset: (oy, ox),
            rot_k,
            flip,
        }
    }
}

pub fn rotate90(a: &Array2<f32>, k: u8) -> Array2<f32> {
    let mut out = a.clone();
    for _ in 0..(k % 4) {
        // counter-clockwise: transpose, then reverse rows
        let mut t = out.t().to_owned();
        t.invert_axis(Axis(0));
        out = t.as_standard_layout().to_owned();
    }
    out
}

/// Apply one transform to a single 2-D grid. The crop must fit.
pub fn transform(a: &Array2<f32>, crop_hw: (usize, usize), p: &AugmentParams) -> Array2<f32> {
    let (oy, ox) = p.offset;
    let cropped = a.slice(s![oy..oy + crop_hw.0, ox..ox + crop_hw.1]).to_owned();
    let mut rotated = rotate90(&cropped, p.rot_k);
    if p.flip {
        rotated.invert_axis(Axis(1));
        rotated = rotated.as_standard_layout().to_owned();
    }
    rotated
}

fn check(frame_hw: (usize, usize), crop_hw: (usize, usize), patch: usize) -> Result<()> {
    if crop_hw.0 == 0 || crop_hw.1 == 0 || crop_hw.0 > frame_hw.0 || crop_hw.1 > frame_hw.1 {
        return Err(Error::CropTooLarge {
            crop: crop_hw,
            frame: frame_hw,
        });
    }
    if patch == 0 || !crop_hw.0.is_multiple_of(patch) || !crop_hw.1.is_multiple_of(patch) {
        return Err(Error::NotDivisible {
            dims: crop_hw,
            patch,
            padded: (crop_hw.0.div_ceil(patch.max(1)) * patch, crop_hw.1.div_ceil(patch.max(1)) * patch),
        });
    }
    Ok(())
}

/// Apply explicit parameters to every frame.
pub fn augment_with(
    seq: &RadarSequence,
    crop_hw: (usize, usize),
    patch: usize,
    params: &AugmentParams,
) -> Result<RadarSequence> {
    let frame_hw = seq.frame_shape();
    check(frame_hw, crop_hw, patch)?;
    if params.offset.0 + crop_hw.0 > frame_hw.0 || params.offset.1 + crop_hw.1 > frame_hw.1 {
        return Err(Error::CropTooLarge {
            crop: crop_hw,
            frame: frame_hw,
        });
    }
    let frames = seq
        .frames()
        .iter()
        .map(|f| ReflectivityField {
            values: transform(&f.values, crop_hw, params),
            resolution_km: f.resolution_km,
        })
        .collect();
    RadarSequence::new(frames, seq.timestep_minutes)
}

/// Draw one transform from `seed` and apply it to every frame. `patch` is the
/// tokenizer patch size (`2^alpha`) that crop dims must be multiples of.
pub fn augment(
    seq: &RadarSequence,
    crop_hw: (usize, usize),
    patch: usize,
    seed: u64,
) -> Result<RadarSequence> {
    check(seq.frame_shape(), crop_hw, patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AugmentParams::draw(&mut rng, seq.frame_shape(), crop_hw);
    augment_with(seq, crop_hw, patch, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marker_seq() -> RadarSequence {
        let f0 = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f32);
        let f1 = f0.mapv(|v| v + 100.0);
        RadarSequence::new(vec![ReflectivityField::new(f0), ReflectivityField::new(f1)], 5).unwrap()
    }

    #[test]
    fn identity_params_return_crop() {
        let s = marker_seq();
        let out = augment_with(&s, (2, 2), 2, &AugmentParams::IDENTITY).unwrap();
        assert_eq!(out.frames()[0].values, ndarray::array![[0.0, 1.0], [4.0, 5.0]]);
        assert_eq!(out.frames()[1].values, ndarray::array![[100.0, 101.0], [104.0, 105.0]]);
    }

    #[test]
    fn half_turn_twice_restores() {
        let s = marker_seq();
        let p = AugmentParams {
            offset: (0, 0),
            rot_k: 2,
            flip: false,
        };
        let once = augment_with(&s, (4, 4), 2, &p).unwrap();
        assert_eq!(once.frames()[0].values[[0, 0]], 15.0);
        let twice = augment_with(&once, (4, 4), 2, &p).unwrap();
        assert_eq!(twice, s);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let a = ndarray::array![[1.0f32, 2.0], [3.0, 4.0]];
        assert_eq!(rotate90(&a, 1), ndarray::array![[2.0, 4.0], [1.0, 3.0]]);
        assert_eq!(rotate90(&rotate90(&a, 1), 3), a);
    }

    #[test]
    fn same_seed_same_output_and_shared_transform() {
        let base = Array2::from_shape_fn((16, 16), |(r, c)| (r * 16 + c) as f32);
        let s = RadarSequence::new(
            vec![ReflectivityField::new(base.clone()), ReflectivityField::new(base + 1000.0)],
            5,
        )
        .unwrap();
        for seed in 0..20 {
            let a = augment(&s, (8, 8), 4, seed).unwrap();
            let b = augment(&s, (8, 8), 4, seed).unwrap();
            assert_eq!(a, b);
            let diff = &a.frames()[1].values - &a.frames()[0].values;
            assert!(diff.iter().all(|&d| d == 1000.0));
        }
    }

    #[test]
    fn crop_errors() {
        let s = marker_seq();
        assert!(matches!(augment(&s, (8, 4), 2, 0), Err(Error::CropTooLarge { .. })));
        assert!(matches!(augment(&s, (3, 3), 2, 0), Err(Error::NotDivisible { .. })));
    }
}
