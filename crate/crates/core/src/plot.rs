//! SVG figures: reflectivity frame strips and verification summaries.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::grid::ReflectivityField;
use crate::verify::VerificationReport;

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Piecewise-linear colour ramp from white (dry) through blue, green, yellow to red at 60 dBZ.
pub fn dbz_color(dbz: f32) -> RGBColor {
    const STOPS: [(f32, (u8, u8, u8)); 6] = [
        (0.0, (255, 255, 255)),
        (10.0, (180, 210, 255)),
        (25.0, (40, 110, 230)),
        (35.0, (40, 180, 70)),
        (45.0, (250, 210, 40)),
        (60.0, (200, 20, 20)),
    ];
    let v = dbz.clamp(0.0, 60.0);
    for w in STOPS.windows(2) {
        let ((a, ca), (b, cb)) = (w[0], w[1]);
        if v <= b {
            let t = (v - a) / (b - a);
            let mix = |x: u8, y: u8| (x as f32 + t * (y as f32 - x as f32)).round() as u8;
            return RGBColor(mix(ca.0, cb.0), mix(ca.1, cb.1), mix(ca.2, cb.2));
        }
    }
    RGBColor(200, 20, 20)
}

/// Frames side by side, `scale` SVG pixels per grid cell.
pub fn plot_frames(frames: &[ReflectivityField], titles: &[String], path: &Path, scale: u32) -> Result<()> {
    let first = frames.first().ok_or(Error::Empty("no frames to plot"))?;
    let (h, w) = first.shape();
    let pad = 24u32;
    let cell_w = w as u32 * scale;
    let size = ((cell_w + 8) * frames.len() as u32, h as u32 * scale + pad);
    let root = SVGBackend::new(path, size).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                found: vec![f.height(), f.width()],
            });
        }
        let x0 = i as i32 * (cell_w as i32 + 8);
        if let Some(t) = titles.get(i) {
            root.draw(&Text::new(t.clone(), (x0, 4), ("sans-serif", 14).into_font()))
                .map_err(|e| plot_err(path, e))?;
        }
        for ((r, c), &v) in f.values.indexed_iter() {
            let x = x0 + (c as u32 * scale) as i32;
            let y = pad as i32 + (r as u32 * scale) as i32;
            root.draw(&Rectangle::new(
                [(x, y), (x + scale as i32, y + scale as i32)],
                dbz_color(v).filled(),
            ))
            .map_err(|e| plot_err(path, e))?;
        }
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// CRPS against lead time, the first-lead rank histogram and first-lead spectra.
pub fn plot_report(report: &VerificationReport, path: &Path) -> Result<()> {
    let first = report.leads.first().ok_or(Error::Empty("report has no lead times"))?;
    let root = SVGBackend::new(path, (1200, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let panels = root.split_evenly((1, 3));
    let e = |err| plot_err(path, err);

    let leads: Vec<f64> = report.leads.iter().map(|l| l.lead_minutes as f64).collect();
    let crps: Vec<f64> = report.leads.iter().map(|l| l.crps).collect();
    let pers: Vec<f64> = report.leads.iter().filter_map(|l| l.persistence_crps).collect();
    let ymax = crps.iter().chain(&pers).copied().fold(1e-6, f64::max) * 1.1;
    let xmax = leads.last().copied().unwrap_or(1.0).max(1.0);
    let mut chart = ChartBuilder::on(&panels[0])
        .caption("CRPS (mm/h)", ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..xmax * 1.05, 0.0..ymax)
        .map_err(e)?;
    chart.configure_mesh().x_desc("lead (min)").draw().map_err(e)?;
    chart
        .draw_series(LineSeries::new(leads.iter().copied().zip(crps.iter().copied()), &BLUE))
        .map_err(e)?
        .label("ensemble");
    if pers.len() == leads.len() {
        chart
            .draw_series(LineSeries::new(leads.iter().copied().zip(pers.iter().copied()), &RED))
            .map_err(e)?
            .label("persistence");
    }
    chart.draw_series(leads.iter().zip(&crps).map(|(&x, &y)| Circle::new((x, y), 3, BLUE.filled())))
        .map_err(e)?;

    let counts = &first.rank_histogram.counts;
    let total = first.rank_histogram.n_samples.max(1) as f64;
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let fmax = freq.iter().copied().fold(1.0 / counts.len() as f64, f64::max) * 1.1;
    let mut chart = ChartBuilder::on(&panels[1])
        .caption(
            format!("rank histogram, KL {:.3}", first.rank_histogram.kl_from_uniform),
            ("sans-serif", 16),
        )
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..counts.len() as f64, 0.0..fmax)
        .map_err(e)?;
    chart.configure_mesh().x_desc("rank").draw().map_err(e)?;
    chart
        .draw_series(freq.iter().enumerate().map(|(i, &f)| {
            Rectangle::new([(i as f64 + 0.1, 0.0), (i as f64 + 0.9, f)], BLUE.mix(0.6).filled())
        }))
        .map_err(e)?;
    let u = 1.0 / counts.len() as f64;
    chart
        .draw_series(LineSeries::new([(0.0, u), (counts.len() as f64, u)], &BLACK))
        .map_err(e)?;

    let spec = |s: &crate::verify::SpectrumResult| -> Vec<(f64, f64)> {
        s.wavenumbers
            .iter()
            .zip(&s.power_db)
            .filter(|(_, p)| p.is_finite())
            .map(|(&k, &p)| ((k as f64).log10(), p))
            .collect()
    };
    let obs = spec(&first.obs_spectrum);
    let mem = spec(&first.member_spectrum);
    let all: Vec<f64> = obs.iter().chain(&mem).map(|p| p.1).collect();
    let (lo, hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo - 1.0, hi + 1.0) } else { (0.0, 1.0) };
    let kmax = (first.obs_spectrum.wavenumbers.len().max(2) as f64).log10();
    let mut chart = ChartBuilder::on(&panels[2])
        .caption("power spectrum (dB)", ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..kmax, lo..hi)
        .map_err(e)?;
    chart.configure_mesh().x_desc("log10 wavenumber").draw().map_err(e)?;
    chart.draw_series(LineSeries::new(obs, &BLACK)).map_err(e)?;
    chart.draw_series(LineSeries::new(mem, &BLUE)).map_err(e)?;
    root.present().map_err(|err| plot_err(path, err))
}
