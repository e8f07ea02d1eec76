use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use beamtc::pipeline::{Evaluation, ExperimentConfig};
use beamtc::recommend::Source;
use plotters::prelude::*;

const SIZE: (u32, u32) = (720, 480);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(90, 90, 90),
];

struct Curve {
    label: String,
    points: Vec<(f64, f64)>,
    dashed: bool,
}

fn label(method: Source) -> &'static str {
    match method {
        Source::TensorCompletion => "TC",
        Source::Fingerprint => "fingerprint",
        Source::Exhaustive => "exhaustive",
    }
}

fn draw(path: &Path, title: &str, x_desc: &str, y_desc: &str, curves: &[Curve]) -> Result<()> {
    let all = curves.iter().flat_map(|c| c.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(anyhow!("nothing to plot for {}", path.display()));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| anyhow!("{e}"))?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(|e| anyhow!("{e}"))?;

    for (k, c) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let style = color.stroke_width(2);
        let series = if c.dashed {
            chart.draw_series(DashedLineSeries::new(c.points.iter().copied(), 6, 4, style))
        } else {
            chart.draw_series(LineSeries::new(c.points.iter().copied(), style))
        };
        series
            .map_err(|e| anyhow!("{e}"))?
            .label(c.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(c.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| anyhow!("{e}"))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

fn ppl_curves(cfg: &ExperimentConfig, results: &Evaluation) -> Vec<Curve> {
    let fractions = &cfg.evaluation.n_tr_fractions;
    let (lo, hi) = (fractions.iter().cloned().fold(f64::INFINITY, f64::min), fractions.iter().cloned().fold(0.0, f64::max));
    let mut curves = Vec::new();
    for &k in &cfg.survey.k_op {
        for method in [Source::TensorCompletion, Source::Fingerprint] {
            let points: Vec<(f64, f64)> = results
                .ppl
                .iter()
                .filter(|r| r.k_op == k && r.method == method)
                .map(|r| (100.0 * r.n_tr_fraction, r.p_pl))
                .collect();
            curves.push(Curve { label: format!("{}, K_op {:.0}%", label(method), 100.0 * k), points, dashed: false });
        }
    }
    // Exhaustive search trains every beam; drawn flat across the axis.
    if let Some(r) = results.ppl.iter().find(|r| r.method == Source::Exhaustive) {
        curves.push(Curve {
            label: "exhaustive (all beams)".into(),
            points: vec![(100.0 * lo, r.p_pl), (100.0 * hi, r.p_pl)],
            dashed: true,
        });
    }
    curves
}

fn se_curves(cfg: &ExperimentConfig, results: &Evaluation) -> Vec<Curve> {
    let Some(&k) = cfg.survey.k_op.first() else { return Vec::new() };
    let Some(n) = results.se.iter().filter(|r| r.k_op == k && r.method != Source::Exhaustive).map(|r| r.n_tr).min()
    else {
        return Vec::new();
    };
    let mut curves = Vec::new();
    for method in [Source::TensorCompletion, Source::Fingerprint, Source::Exhaustive] {
        let points: Vec<(f64, f64)> = results
            .se
            .iter()
            .filter(|r| r.k_op == k && r.method == method && (method == Source::Exhaustive || r.n_tr == n))
            .map(|r| (r.p_t_dbm, r.se_bps_hz))
            .collect();
        let name = match method {
            Source::Exhaustive => label(method).to_string(),
            _ => format!("{}, N_tr {n}", label(method)),
        };
        curves.push(Curve { label: name, points, dashed: method == Source::Exhaustive });
    }
    curves
}

/// Writes `ppl.svg` and `se.svg` into `dir`.
pub fn render(cfg: &ExperimentConfig, results: &Evaluation, dir: &Path) -> Result<Vec<PathBuf>> {
    let ppl = dir.join("ppl.svg");
    draw(&ppl, "Power loss probability", "trained beams (%)", "P_pl", &ppl_curves(cfg, results))?;
    let se = dir.join("se.svg");
    let k = cfg.survey.k_op.first().copied().unwrap_or_default();
    draw(
        &se,
        &format!("Spectral efficiency, K_op {:.0}%", 100.0 * k),
        "P_t (dBm)",
        "SE (bps/Hz)",
        &se_curves(cfg, results),
    )?;
    Ok(vec![ppl, se])
}
