//! Deterministic SVG line charts and CAM overlay images.
//!
//! Figures are derived artifacts: every chart embeds its backing numbers in
//! a leading `<!-- data ... -->` comment (see [`embedded_data`]) so plotted
//! values can be checked against the CSV they came from, and all floats are
//! formatted with fixed precision so identical inputs give identical bytes.

use endoked_core::wsss::{BoxPrompt, CAMap};
use endoked_core::{Error, Result};
use ndarray::Array3;

/// One polyline, optionally with a shaded `(x, lo, hi)` band behind it.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub band: Option<Vec<(f64, f64, f64)>>,
}

impl Series {
    pub fn line(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { name: name.into(), points, band: None }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 62.0;
const MARGIN_RIGHT: f64 = 18.0;
const MARGIN_TOP: f64 = 34.0;
const MARGIN_BOTTOM: f64 = 46.0;
const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
const TICKS: usize = 5;

fn fmt(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Range {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Range { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            let pad = lo.abs().max(1.0) * 0.05;
            return Range { lo: lo - pad, hi: hi + pad };
        }
        let pad = (hi - lo) * 0.05;
        Range { lo: lo - pad, hi: hi + pad }
    }
}

/// Line chart over the given series; returns the SVG document.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xs = Range::of(series.iter().flat_map(|s| {
        s.points.iter().map(|p| p.0).chain(s.band.iter().flatten().map(|b| b.0))
    }));
    let ys = Range::of(series.iter().flat_map(|s| {
        s.points
            .iter()
            .map(|p| p.1)
            .chain(s.band.iter().flatten().flat_map(|b| [b.1, b.2]))
    }));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |x: f64| MARGIN_LEFT + (x - xs.lo) / (xs.hi - xs.lo) * plot_w;
    let py = |y: f64| MARGIN_TOP + plot_h - (y - ys.lo) / (ys.hi - ys.lo) * plot_h;

    let data = serde_json::json!({
        "series": series
            .iter()
            .map(|s| {
                serde_json::json!({
                    "name": s.name,
                    "points": s.points.iter().map(|p| vec![p.0, p.1]).collect::<Vec<_>>(),
                    "band": s.band.as_ref().map(|b| {
                        b.iter().map(|t| vec![t.0, t.1, t.2]).collect::<Vec<_>>()
                    }),
                })
            })
            .collect::<Vec<_>>(),
    });

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!("<!-- data {data} -->\n"));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    // axes, ticks, grid
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = xs.lo + f * (xs.hi - xs.lo);
        let yv = ys.lo + f * (ys.hi - ys.lo);
        let gx = px(xv);
        let gy = py(yv);
        svg.push_str(&format!(
            "<line x1=\"{gx:.2}\" y1=\"{:.2}\" x2=\"{gx:.2}\" y2=\"{:.2}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            MARGIN_TOP,
            MARGIN_TOP + plot_h
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{gy:.2}\" x2=\"{:.2}\" y2=\"{gy:.2}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            MARGIN_LEFT,
            MARGIN_LEFT + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{gx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            MARGIN_TOP + plot_h + 16.0,
            fmt(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
            MARGIN_LEFT - 6.0,
            gy + 4.0,
            fmt(yv)
        ));
    }
    svg.push_str(&format!(
        "<rect x=\"{MARGIN_LEFT:.2}\" y=\"{MARGIN_TOP:.2}\" width=\"{plot_w:.2}\" \
         height=\"{plot_h:.2}\" fill=\"none\" stroke=\"#333333\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\" \
         transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(band) = &s.band {
            if !band.is_empty() {
                let mut d = String::new();
                for (j, (x, _, hi)) in band.iter().enumerate() {
                    d.push_str(if j == 0 { "M" } else { "L" });
                    d.push_str(&format!("{:.2},{:.2} ", px(*x), py(*hi)));
                }
                for (x, lo, _) in band.iter().rev() {
                    d.push_str(&format!("L{:.2},{:.2} ", px(*x), py(*lo)));
                }
                d.push('Z');
                svg.push_str(&format!(
                    "<path d=\"{d}\" fill=\"{color}\" fill-opacity=\"0.18\" stroke=\"none\"/>\n"
                ));
            }
        }
        if !s.points.is_empty() {
            let pts: Vec<String> =
                s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
                pts.join(" ")
            ));
            for (x, y) in &s.points {
                svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.4\" fill=\"{color}\"/>\n",
                    px(*x),
                    py(*y)
                ));
            }
        }
        // legend entry
        let ly = MARGIN_TOP + 14.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT - 150.0;
        svg.push_str(&format!(
            "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\n",
            lx + 22.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>\n",
            lx + 28.0,
            ly + 4.0,
            escape(&s.name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// The numbers a chart was drawn from, recovered from its data comment.
pub fn embedded_data(svg: &str) -> Result<serde_json::Value> {
    let start = svg
        .find("<!-- data ")
        .ok_or_else(|| Error::Data("svg lacks a data comment".into()))?;
    let rest = &svg[start + "<!-- data ".len()..];
    let end = rest
        .find(" -->")
        .ok_or_else(|| Error::Data("svg data comment is unterminated".into()))?;
    serde_json::from_str(&rest[..end]).map_err(|e| Error::Data(format!("svg data comment: {e}")))
}

/// Image with the CAM blended into the red channel (nearest-neighbour
/// upsampling) and box prompts drawn as green outlines.
pub fn cam_overlay(pixels: &Array3<u8>, cam: &CAMap, boxes: &[BoxPrompt]) -> Array3<u8> {
    let (h, w, _) = pixels.dim();
    let (n, _) = cam.values.dim();
    let mut out = pixels.clone();
    for r in 0..h {
        for c in 0..w {
            let cr = (r * n / h).min(n - 1);
            let cc = (c * n / w).min(n - 1);
            let heat = cam.values[[cr, cc]].clamp(0.0, 1.0);
            let base = f64::from(out[[r, c, 0]]);
            out[[r, c, 0]] = (0.55 * base + 0.45 * 255.0 * heat).round().clamp(0.0, 255.0) as u8;
            for ch in 1..3 {
                out[[r, c, ch]] = (0.55 * f64::from(out[[r, c, ch]])).round() as u8;
            }
        }
    }
    for b in boxes {
        let r0 = b.row_min.min(h - 1);
        let r1 = b.row_max.min(h - 1);
        let c0 = b.col_min.min(w - 1);
        let c1 = b.col_max.min(w - 1);
        for c in c0..=c1 {
            set_green(&mut out, r0, c);
            set_green(&mut out, r1, c);
        }
        for r in r0..=r1 {
            set_green(&mut out, r, c0);
            set_green(&mut out, r, c1);
        }
    }
    out
}

fn set_green(img: &mut Array3<u8>, r: usize, c: usize) {
    img[[r, c, 0]] = 40;
    img[[r, c, 1]] = 255;
    img[[r, c, 2]] = 60;
}
