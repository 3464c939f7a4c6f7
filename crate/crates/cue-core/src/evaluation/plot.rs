//! SVG renderings of the noise-sweep and attention-convergence curves.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use super::sweep::SweepReport;
use crate::error::{CueError, Result};

fn plot_err(path: &Path, e: impl std::fmt::Display) -> CueError {
    CueError::Other(format!("plotting {}: {e}", path.display()))
}

/// Proxy strength sweep: both curves over sigma plus the two reference
/// lines.
pub fn render_sweep(report: &SweepReport, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (800, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let max_sigma = report
        .points
        .iter()
        .map(|p| p.sigma as f64)
        .fold(0.0, f64::max)
        .max(1e-3);
    let ppl_values: Vec<f64> = report
        .points
        .iter()
        .flat_map(|p| [p.proxy_tested_ppl, p.adapted_ppl])
        .chain([report.reference_no_context, report.reference_joint])
        .collect();
    let lo = ppl_values.iter().cloned().fold(f64::INFINITY, f64::min) * 0.95;
    let hi = ppl_values.iter().cloned().fold(0.0, f64::max) * 1.05;

    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .caption("proxy noise sweep", ("sans-serif", 22))
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..max_sigma * 1.05, lo..hi)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("sigma")
        .y_desc("test PPL")
        .draw()
        .map_err(|e| plot_err(path, e))?;

    let proxy: Vec<(f64, f64)> = report
        .points
        .iter()
        .map(|p| (p.sigma as f64, p.proxy_tested_ppl))
        .collect();
    let adapted: Vec<(f64, f64)> = report
        .points
        .iter()
        .map(|p| (p.sigma as f64, p.adapted_ppl))
        .collect();
    chart
        .draw_series(LineSeries::new(proxy.clone(), &BLUE))
        .map_err(|e| plot_err(path, e))?
        .label("proxy-trained, proxy-tested")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLUE));
    chart
        .draw_series(LineSeries::new(adapted.clone(), &RGBColor(255, 140, 0)))
        .map_err(|e| plot_err(path, e))?
        .label("adapted to real context")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RGBColor(255, 140, 0)));
    chart
        .draw_series(LineSeries::new(
            vec![
                (0.0, report.reference_no_context),
                (max_sigma * 1.05, report.reference_no_context),
            ],
            &GREEN,
        ))
        .map_err(|e| plot_err(path, e))?
        .label("no context")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], GREEN));
    chart
        .draw_series(LineSeries::new(
            vec![
                (0.0, report.reference_joint),
                (max_sigma * 1.05, report.reference_joint),
            ],
            &RED,
        ))
        .map_err(|e| plot_err(path, e))?
        .label("jointly trained")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RED));
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}

/// Attention mass per context type across training epochs.
pub fn render_attention_log(
    log: &[(usize, BTreeMap<String, f64>)],
    path: &Path,
) -> Result<()> {
    if log.is_empty() {
        return Err(CueError::EmptyInput("attention log".into()));
    }
    let root = SVGBackend::new(path, (800, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let max_epoch = log.last().unwrap().0 as f64;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .caption("context attention over training", ("sans-serif", 22))
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..max_epoch.max(1.0), 0.0..1.0f64)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("attention mass")
        .draw()
        .map_err(|e| plot_err(path, e))?;

    let names: Vec<String> = log[0].1.keys().cloned().collect();
    let palette = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
    ];
    for (i, name) in names.iter().enumerate() {
        let color = palette[i % palette.len()];
        let series: Vec<(f64, f64)> = log
            .iter()
            .map(|(epoch, profile)| (*epoch as f64, profile.get(name).copied().unwrap_or(0.0)))
            .collect();
        chart
            .draw_series(LineSeries::new(series, &color))
            .map_err(|e| plot_err(path, e))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}
