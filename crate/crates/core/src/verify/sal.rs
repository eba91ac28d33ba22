//! Structure-Amplitude-Location verification for rain-rate fields.
//!
//! Objects are 8-connected regions at or above `factor × p95(wet pixels)`,
//! computed per field. Distances are normalized by the domain diagonal
//! `sqrt(H² + W²)` in pixels.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::continuous::same_shape;
use crate::error::Result;

pub const DEFAULT_OBJECT_FACTOR: f64 = 1.0 / 15.0;
/// Rain rates below this are treated as dry (mm/h).
pub const WET_THRESHOLD_MMH: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalObject {
    pub label: usize,
    /// Center of mass `(row, col)` in pixels.
    pub center: (f64, f64),
    /// Integrated rain rate over the object.
    pub total: f64,
    pub max: f64,
    pub n_pixels: usize,
}

/// Undefined components are `None` (S and L need both fields wet; A needs one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalScore {
    pub s: Option<f64>,
    pub a: Option<f64>,
    pub l: Option<f64>,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub obs_objects: Vec<SalObject>,
    pub pred_objects: Vec<SalObject>,
}

fn dry_to_zero(f: &Array2<f32>) -> Array2<f64> {
    f.mapv(|v| if v >= WET_THRESHOLD_MMH { v as f64 } else { 0.0 })
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of a non-empty sample.
pub(crate) fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

fn center_of_mass(f: &Array2<f64>) -> Option<(f64, f64)> {
    let (mut m, mut r, mut c) = (0.0, 0.0, 0.0);
    for ((i, j), &v) in f.indexed_iter() {
        m += v;
        r += v * i as f64;
        c += v * j as f64;
    }
    (m > 0.0).then(|| (r / m, c / m))
}

/// 8-connected components of `mask`; returns labels (0 = background) and count.
pub fn label_components(mask: &Array2<bool>) -> (Array2<usize>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<usize>::zeros((h, w));
    let mut n = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        let (r0, c0) = (start / w, start % w);
        if !mask[[r0, c0]] || labels[[r0, c0]] != 0 {
            continue;
        }
        n += 1;
        labels[[r0, c0]] = n;
        stack.push((r0, c0));
        while let Some((r, c)) = stack.pop() {
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let (rr, cc) = (rr as usize, cc as usize);
                    if mask[[rr, cc]] && labels[[rr, cc]] == 0 {
                        labels[[rr, cc]] = n;
                        stack.push((rr, cc));
                    }
                }
            }
        }
    }
    (labels, n)
}

fn objects(f: &Array2<f64>, factor: f64) -> Vec<SalObject> {
    let mut wet: Vec<f64> = f.iter().copied().filter(|&v| v > 0.0).collect();
    if wet.is_empty() {
        return Vec::new();
    }
    let threshold = factor * percentile(&mut wet, 95.0);
    let mask = f.mapv(|v| v > 0.0 && v >= threshold);
    let (labels, n) = label_components(&mask);
    let mut objs: Vec<SalObject> = (1..=n)
        .map(|label| SalObject {
            label,
            center: (0.0, 0.0),
            total: 0.0,
            max: 0.0,
            n_pixels: 0,
        })
        .collect();
    for ((i, j), &l) in labels.indexed_iter() {
        if l == 0 {
            continue;
        }
        let v = f[[i, j]];
        let o = &mut objs[l - 1];
        o.total += v;
        o.max = o.max.max(v);
        o.center.0 += v * i as f64;
        o.center.1 += v * j as f64;
        o.n_pixels += 1;
    }
    for o in &mut objs {
        o.center = (o.center.0 / o.total, o.center.1 / o.total);
    }
    objs
}

/// Weighted mean scaled volume `Σ R_n V_n / Σ R_n` with `V_n = R_n / R_n^max`.
fn scaled_volume(objs: &[SalObject]) -> f64 {
    let total: f64 = objs.iter().map(|o| o.total).sum();
    objs.iter().map(|o| o.total * (o.total / o.max)).sum::<f64>() / total
}

/// Weighted mean distance of objects from the field's center of mass.
fn spread(objs: &[SalObject], com: (f64, f64)) -> f64 {
    let total: f64 = objs.iter().map(|o| o.total).sum();
    objs.iter()
        .map(|o| o.total * ((o.center.0 - com.0).powi(2) + (o.center.1 - com.1).powi(2)).sqrt())
        .sum::<f64>()
        / total
}

fn relative_difference(pred: f64, obs: f64) -> f64 {
    (pred - obs) / (0.5 * (pred + obs))
}

pub fn sal(obs: &Array2<f32>, pred: &Array2<f32>, object_threshold_factor: f64) -> Result<SalScore> {
    same_shape(obs, pred)?;
    let (h, w) = obs.dim();
    let o = dry_to_zero(obs);
    let p = dry_to_zero(pred);
    let n = (h * w) as f64;
    let (d_obs, d_pred) = (o.sum() / n, p.sum() / n);
    let a = (d_obs + d_pred > 0.0).then(|| relative_difference(d_pred, d_obs));

    let obs_objects = objects(&o, object_threshold_factor);
    let pred_objects = objects(&p, object_threshold_factor);
    let diag = ((h * h + w * w) as f64).sqrt();
    let (mut s, mut l, mut l1, mut l2) = (None, None, None, None);
    if let (Some(co), Some(cp)) = (center_of_mass(&o), center_of_mass(&p)) {
        if !obs_objects.is_empty() && !pred_objects.is_empty() {
            s = Some(relative_difference(scaled_volume(&pred_objects), scaled_volume(&obs_objects)));
            let d1 = ((co.0 - cp.0).powi(2) + (co.1 - cp.1).powi(2)).sqrt() / diag;
            let d2 = 2.0 * (spread(&pred_objects, cp) - spread(&obs_objects, co)).abs() / diag;
            l1 = Some(d1);
            l2 = Some(d2);
            l = Some(d1 + d2);
        }
    }
    Ok(SalScore {
        s,
        a,
        l,
        l1,
        l2,
        obs_objects,
        pred_objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blob(h: usize, w: usize, at: (usize, usize)) -> Array2<f32> {
        let mut f = Array2::<f32>::zeros((h, w));
        for (dr, dc, v) in [(0, 0, 8.0), (0, 1, 4.0), (1, 0, 4.0), (1, 1, 2.0), (2, 1, 1.0)] {
            f[[at.0 + dr, at.1 + dc]] = v;
        }
        f
    }

    #[test]
    fn perfect_forecast_is_zero() {
        let f = blob(20, 20, (5, 5));
        let s = sal(&f, &f, DEFAULT_OBJECT_FACTOR).unwrap();
        assert_eq!((s.s, s.a, s.l), (Some(0.0), Some(0.0), Some(0.0)));
    }

    #[test]
    fn doubling_gives_two_thirds_amplitude() {
        let f = blob(20, 20, (5, 5));
        let s = sal(&f, &f.mapv(|v| 2.0 * v), DEFAULT_OBJECT_FACTOR).unwrap();
        assert!((s.a.unwrap() - 2.0 / 3.0).abs() < 1e-6);
        assert!(s.l.unwrap().abs() < 1e-12);
        assert!(s.s.unwrap().abs() < 1e-12);
    }

    #[test]
    fn translation_by_tenth_of_diagonal() {
        // 30×40 domain: diagonal 50 px; shift (3, 4) moves the blob by 5 px
        let obs = blob(30, 40, (10, 10));
        let pred = blob(30, 40, (13, 14));
        let s = sal(&obs, &pred, DEFAULT_OBJECT_FACTOR).unwrap();
        assert!(s.s.unwrap().abs() < 1e-12);
        assert!(s.a.unwrap().abs() < 1e-12);
        assert!((s.l1.unwrap() - 0.1).abs() < 1e-3);
    }

    #[test]
    fn dry_fields() {
        let dry = Array2::<f32>::zeros((8, 8));
        let wet = blob(8, 8, (2, 2));
        let s = sal(&wet, &dry, DEFAULT_OBJECT_FACTOR).unwrap();
        assert_eq!(s.a, Some(-2.0));
        assert!(s.s.is_none() && s.l.is_none());
        assert_eq!(sal(&dry, &wet, DEFAULT_OBJECT_FACTOR).unwrap().a, Some(2.0));
        let both = sal(&dry, &dry, DEFAULT_OBJECT_FACTOR).unwrap();
        assert!(both.a.is_none() && both.s.is_none());
    }

    #[test]
    fn components_are_eight_connected() {
        let mut m = Array2::from_elem((4, 4), false);
        m[[0, 0]] = true;
        m[[1, 1]] = true;
        m[[3, 3]] = true;
        let (_, n) = label_components(&m);
        assert_eq!(n, 2);
    }

    proptest! {
        #[test]
        fn bounded_and_self_consistent(
            a in proptest::collection::vec(0.0f32..20.0, 64),
            b in proptest::collection::vec(0.0f32..20.0, 64),
        ) {
            let a = Array2::from_shape_vec((8, 8), a).unwrap();
            let b = Array2::from_shape_vec((8, 8), b).unwrap();
            let s = sal(&a, &b, DEFAULT_OBJECT_FACTOR).unwrap();
            if let Some(v) = s.a { prop_assert!((-2.0..=2.0).contains(&v)); }
            if let Some(v) = s.s { prop_assert!((-2.0..=2.0).contains(&v)); }
            if let (Some(l1), Some(l2)) = (s.l1, s.l2) {
                prop_assert!((0.0..=1.0).contains(&l1) && (0.0..=1.0).contains(&l2));
            }
            let own = sal(&a, &a, DEFAULT_OBJECT_FACTOR).unwrap();
            if own.s.is_some() {
                prop_assert_eq!((own.s, own.a, own.l), (Some(0.0), Some(0.0), Some(0.0)));
            }
        }
    }
}
