//! Seeded generator of radar-like precipitation sequences.
//!
//! Each frame is the pixelwise maximum over anisotropic Gaussian cells (in dBZ)
//! that translate by a per-cell advection vector and whose peaks scale by a
//! per-cell growth factor every step, plus Gaussian background noise, then
//! clipped and quantized like real data.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{clip_and_quantize, PreprocessSpec, RadarSequence, ReflectivityField};
use crate::rprc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub grid_hw: [usize; 2],
    pub n_frames: usize,
    /// Inclusive range of cell counts.
    pub n_cells: [usize; 2],
    pub cell_sigma_px: [f64; 2],
    pub peak_dbz: [f64; 2],
    /// `[[row_min, row_max], [col_min, col_max]]` in pixels per step.
    pub advection_px_per_step: [[f64; 2]; 2],
    pub growth_rate_per_step: [f64; 2],
    pub background_noise_dbz: f64,
    pub seed: u64,
    /// Grid dims must be multiples of this (the tokenizer patch size).
    pub patch_size: usize,
    /// Train / validation / test fractions for [`generate_dataset`].
    pub split_fractions: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            grid_hw: [64, 64],
            n_frames: 12,
            n_cells: [1, 5],
            cell_sigma_px: [3.0, 9.0],
            peak_dbz: [20.0, 58.0],
            advection_px_per_step: [[-2.0, 2.0], [-2.0, 2.0]],
            growth_rate_per_step: [0.93, 1.07],
            background_noise_dbz: 0.5,
            seed: 0,
            patch_size: 8,
            split_fractions: [0.8, 0.1, 0.1],
        }
    }
}

fn range_ok(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.grid_hw;
        if h == 0 || w == 0 || self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::config(format!(
                "grid {h}x{w} must be non-empty multiples of patch size {}",
                self.patch_size
            )));
        }
        if self.n_frames == 0 {
            return Err(Error::config("n_frames must be positive"));
        }
        if self.n_cells[0] > self.n_cells[1] {
            return Err(Error::config("n_cells range is empty"));
        }
        for (name, r) in [
            ("cell_sigma_px", self.cell_sigma_px),
            ("peak_dbz", self.peak_dbz),
            ("advection rows", self.advection_px_per_step[0]),
            ("advection cols", self.advection_px_per_step[1]),
            ("growth_rate_per_step", self.growth_rate_per_step),
        ] {
            if !range_ok(r) {
                return Err(Error::config(format!("{name} range is empty or non-finite")));
            }
        }
        if self.cell_sigma_px[0] <= 0.0 {
            return Err(Error::config("cell_sigma_px must be positive"));
        }
        if self.peak_dbz[0] < 0.0 || self.peak_dbz[1] > 60.0 {
            return Err(Error::config("peak_dbz must lie within [0, 60]"));
        }
        if self.growth_rate_per_step[0] <= 0.0 {
            return Err(Error::config("growth_rate_per_step must be positive"));
        }
        if !(self.background_noise_dbz >= 0.0) {
            return Err(Error::config("background_noise_dbz must be non-negative"));
        }
        let s: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|&f| f < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::config("split_fractions must be non-negative and sum to 1"));
        }
        Ok(())
    }

    /// Largest per-step displacement magnitude any cell can have.
    pub fn max_speed(&self) -> f64 {
        let a = self.advection_px_per_step;
        let r = a[0][0].abs().max(a[0][1].abs());
        let c = a[1][0].abs().max(a[1][1].abs());
        (r * r + c * c).sqrt()
    }
}

/// One precipitation cell; positions in pixels, `(row, col)` order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub center: (f64, f64),
    pub sigma_major: f64,
    pub sigma_minor: f64,
    pub angle: f64,
    pub peak_dbz: f64,
    pub velocity: (f64, f64),
    pub growth: f64,
}

impl Cell {
    fn draw<R: Rng>(rng: &mut R, spec: &SynthSpec) -> Self {
        let [h, w] = spec.grid_hw;
        let uni = |rng: &mut R, r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..r[1])
            }
        };
        let center = (uni(rng, [0.0, h as f64]), uni(rng, [0.0, w as f64]));
        let s1 = uni(rng, spec.cell_sigma_px);
        let s2 = uni(rng, spec.cell_sigma_px);
        Self {
            center,
            sigma_major: s1.max(s2),
            sigma_minor: s1.min(s2),
            angle: uni(rng, [0.0, std::f64::consts::PI]),
            peak_dbz: uni(rng, spec.peak_dbz),
            velocity: (
                uni(rng, spec.advection_px_per_step[0]),
                uni(rng, spec.advection_px_per_step[1]),
            ),
            growth: uni(rng, spec.growth_rate_per_step),
        }
    }

    /// Reflectivity contribution at `(row, col)` after `t` steps.
    pub fn value_at(&self, row: f64, col: f64, t: usize) -> f64 {
        let cy = self.center.0 + self.velocity.0 * t as f64;
        let cx = self.center.1 + self.velocity.1 * t as f64;
        let peak = self.peak_dbz * self.growth.powi(t as i32);
        let (dy, dx) = (row - cy, col - cx);
        let (sin, cos) = self.angle.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        let q = (u / self.sigma_major).powi(2) + (v / self.sigma_minor).powi(2);
        peak * (-0.5 * q).exp()
    }
}

/// Render cells at step `t` (no noise, no quantization).
pub fn render_cells(cells: &[Cell], hw: (usize, usize), t: usize) -> Array2<f32> {
    Array2::from_shape_fn(hw, |(r, c)| {
        cells
            .iter()
            .map(|cell| cell.value_at(r as f64, c as f64, t))
            .fold(0.0f64, f64::max) as f32
    })
}

pub fn generate_sequence(spec: &SynthSpec) -> Result<RadarSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_cells = rng.random_range(spec.n_cells[0]..=spec.n_cells[1]);
    let cells: Vec<Cell> = (0..n_cells).map(|_| Cell::draw(&mut rng, spec)).collect();
    let hw = (spec.grid_hw[0], spec.grid_hw[1]);
    let pre = PreprocessSpec::default();
    let noise = if spec.background_noise_dbz > 0.0 {
        Some(Normal::new(0.0, spec.background_noise_dbz).expect("validated"))
    } else {
        None
    };
    let mut frames = Vec::with_capacity(spec.n_frames);
    for t in 0..spec.n_frames {
        let mut values = render_cells(&cells, hw, t);
        if let Some(n) = &noise {
            values.mapv_inplace(|v| v + n.sample(&mut rng) as f32);
        }
        frames.push(clip_and_quantize(&ReflectivityField::new(values), &pre)?);
    }
    RadarSequence::new(frames, crate::grid::DEFAULT_TIMESTEP_MINUTES)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// Split from a seed-only hash. `seed mod 1000` goes through an affine bijection of
/// `Z/1000`, so any 1000 consecutive seeds hit every bucket exactly once.
pub fn split_for_seed(seed: u64, fractions: [f64; 3]) -> Split {
    let bucket = ((seed % 1000) * 7919 + 271) % 1000;
    let train = (fractions[0] * 1000.0).round() as u64;
    let val = ((fractions[0] + fractions[1]) * 1000.0).round() as u64;
    if bucket < train {
        Split::Train
    } else if bucket < val {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub filename: String,
    pub seed: u64,
    pub split: Split,
}

/// Line-oriented dataset index: `filename<TAB>seed<TAB>split`, `#` comments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# filename\tseed\tsplit\n");
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.filename, e.seed, e.split));
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_NAME);
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| Error::Parse {
                path: path.clone(),
                message: format!("line {}: {m}", lineno + 1),
            };
            if parts.len() != 3 {
                return Err(bad("expected 3 tab-separated fields"));
            }
            entries.push(ManifestEntry {
                filename: parts[0].to_string(),
                seed: parts[1].parse().map_err(|_| bad("bad seed"))?,
                split: parts[2].parse().map_err(|_| bad("bad split"))?,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, dir)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_NAME);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn path_of(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.filename)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<RadarSequence>> {
        self.split(split)
            .map(|e| rprc::read_sequence(self.path_of(e)))
            .collect()
    }
}

/// Write `n_sequences` RPRC files (seeds `spec.seed + i`) and a manifest to `out_dir`.
pub fn generate_dataset(
    spec: &SynthSpec,
    n_sequences: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = (0..n_sequences)
        .into_par_iter()
        .map(|i| {
            let seed = spec.seed.wrapping_add(i as u64);
            let seq = generate_sequence(&SynthSpec {
                seed,
                ..spec.clone()
            })?;
            let filename = format!("seq_{seed:06}.rprc");
            rprc::write_sequence(&seq, out_dir.join(&filename))?;
            Ok(ManifestEntry {
                filename,
                seed,
                split: split_for_seed(seed, spec.split_fractions),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}
