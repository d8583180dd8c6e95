//! Standalone SVG rendering of training curves and lifted shapes.

use std::fmt::Write as _;

use super::PredRecord;
use crate::error::{Error, Result};
use crate::train::TrainHistory;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 48.0;

const GT_STROKE: &str = r##"stroke="#d62728" stroke-width="2.5""##;
const PRED_STROKE: &str = r##"stroke="#1f77b4" stroke-width="2" stroke-dasharray="6 3""##;

fn open_svg(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
}

fn frame(out: &mut String, x0: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<rect x="{x0}" y="{MARGIN}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{title}</text>"#,
        x0 + PANEL_W / 2.0,
        MARGIN - 10.0
    );
}

/// One log-scale curve panel.
fn curve_panel(out: &mut String, x0: f64, title: &str, xs: &[f64], ys: &[f64]) {
    frame(out, x0, title);
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(_, &y)| y.is_finite() && y > 0.0)
        .map(|(&x, &y)| (x, y.log10()))
        .collect();
    if pts.is_empty() {
        return;
    }
    let (xmin, xmax) = (pts[0].0, pts[pts.len() - 1].0.max(pts[0].0 + 1.0));
    let ymin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = pts
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(ymin + 1e-9);
    let sx = |x: f64| x0 + (x - xmin) / (xmax - xmin) * PANEL_W;
    let sy = |y: f64| MARGIN + PANEL_H - (y - ymin) / (ymax - ymin) * PANEL_H;
    let poly: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(
        out,
        r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##,
        poly.join(" ")
    );
    let bottom = MARGIN + PANEL_H;
    let _ = writeln!(out, r#"<text x="{x0}" y="{}">{xmin}</text>"#, bottom + 16.0);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{xmax}</text>"#,
        x0 + PANEL_W,
        bottom + 16.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        x0 + PANEL_W / 2.0,
        bottom + 16.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{:.2e}</text>"#,
        x0 - 4.0,
        MARGIN + 10.0,
        10f64.powf(ymax)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{bottom}" text-anchor="end">{:.2e}</text>"#,
        x0 - 4.0,
        10f64.powf(ymin)
    );
}

/// Training loss and validation error per epoch, both on log axes.
pub fn curves_svg(h: &TrainHistory) -> Result<String> {
    if h.epochs.is_empty() {
        return Err(Error::Validation("history has no epochs to plot".into()));
    }
    let xs: Vec<f64> = h.epochs.iter().map(|e| e.epoch as f64).collect();
    let loss: Vec<f64> = h.epochs.iter().map(|e| e.train_loss).collect();
    let val: Vec<f64> = h.epochs.iter().map(|e| e.val_mpjpe).collect();
    let width = 2.0 * PANEL_W + 3.0 * MARGIN + 40.0;
    let height = PANEL_H + 2.0 * MARGIN;
    let mut out = String::new();
    open_svg(&mut out, width, height);
    curve_panel(&mut out, MARGIN + 30.0, "training loss", &xs, &loss);
    curve_panel(&mut out, 2.0 * MARGIN + PANEL_W + 40.0, "validation MPJPE", &xs, &val);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Front (x, y) and side (z, y) projections of a predicted shape, with the
/// centered ground truth when the record has one.
pub fn shape_svg(rec: &PredRecord) -> Result<String> {
    let sample = rec.sample.to_sample()?;
    let mask = &sample.mask;
    let pred: &[[f64; 3]] = rec.s3d_pred.as_deref().unwrap_or(&rec.s3d_canonical);
    let gt = sample
        .s3d_gt
        .as_ref()
        .map(|g| g.centered(mask))
        .transpose()?
        .map(|g| crate::data::rows::<3>(g.coords()));
    let edges: Vec<(usize, usize)> = sample
        .skeleton
        .edges()
        .into_iter()
        .filter(|&(i, j)| mask.is_visible(i) && mask.is_visible(j))
        .collect();

    let extent = pred
        .iter()
        .chain(gt.iter().flatten())
        .enumerate()
        .filter(|(i, _)| mask.is_visible(i % mask.len()))
        .flat_map(|(_, p)| p.iter().map(|v| v.abs()))
        .fold(0.0_f64, f64::max)
        .max(1e-9);

    let width = 2.0 * PANEL_W + 3.0 * MARGIN;
    let height = PANEL_H + 2.0 * MARGIN + 20.0;
    let mut out = String::new();
    open_svg(&mut out, width, height);
    for (view, (title, h_axis)) in [("front (x, y)", 0usize), ("side (z, y)", 2usize)]
        .into_iter()
        .enumerate()
    {
        let x0 = MARGIN + view as f64 * (PANEL_W + MARGIN);
        frame(&mut out, x0, title);
        let half = 0.45 * PANEL_H.min(PANEL_W);
        let cx = x0 + PANEL_W / 2.0;
        let cy = MARGIN + PANEL_H / 2.0;
        let map = |p: &[f64; 3]| (cx + p[h_axis] / extent * half, cy - p[1] / extent * half);
        let mut draw = |shape: &[[f64; 3]], style: &str| {
            for &(i, j) in &edges {
                let (a, b) = (map(&shape[i]), map(&shape[j]));
                let _ = writeln!(
                    out,
                    r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" {style} stroke-linecap="round"/>"#,
                    a.0, a.1, b.0, b.1
                );
            }
        };
        if let Some(g) = &gt {
            draw(g, GT_STROKE);
        }
        draw(pred, PRED_STROKE);
    }
    let legend_y = MARGIN + PANEL_H + 30.0;
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN}" y1="{legend_y}" x2="{}" y2="{legend_y}" {GT_STROKE}/><text x="{}" y="{}">ground truth</text>"#,
        MARGIN + 30.0,
        MARGIN + 36.0,
        legend_y + 4.0
    );
    let _ = writeln!(
        out,
        r#"<line x1="{}" y1="{legend_y}" x2="{}" y2="{legend_y}" {PRED_STROKE}/><text x="{}" y="{}">prediction</text>"#,
        MARGIN + 150.0,
        MARGIN + 180.0,
        MARGIN + 186.0,
        legend_y + 4.0
    );
    out.push_str("</svg>\n");
    Ok(out)
}
