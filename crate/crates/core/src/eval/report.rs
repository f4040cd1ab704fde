//! Plain-text renderings of evaluation results.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ClipRow;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub fn rows_csv(rows: &[ClipRow]) -> String {
    let mut s = String::from("clip,mos,raw,mapped\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.clip, r.mos, r.raw, r.mapped);
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Axes {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        Axes {
            x: range(&mut xs.clone()),
            y: range(&mut ys.clone()),
        }
    }

    fn px(&self, v: f64) -> f64 {
        MARGIN + (v - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn frame(&self, s: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            x1 - x0,
            y1 - y0
        );
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 10.0, escape(xlabel));
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(ylabel)
        );
        for k in 0..=4 {
            let t = k as f64 / 4.0;
            let vx = self.x.0 + t * (self.x.1 - self.x.0);
            let vy = self.y.0 + t * (self.y.1 - self.y.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, self.px(vx), y1 + 14.0, tick(vx));
            let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 4.0, self.py(vy) + 4.0, tick(vy));
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

/// Scatter of mapped score against mos, with the identity line.
pub fn scatter_svg(rows: &[ClipRow], title: &str) -> String {
    let both = rows.iter().flat_map(|r| [r.mos, r.mapped]);
    let axes = Axes::fit(both.clone(), both);
    let mut s = String::new();
    axes.frame(&mut s, title, "predicted (mapped)", "MOS");
    let (lo, hi) = (axes.x.0.max(axes.y.0), axes.x.1.min(axes.y.1));
    let _ = writeln!(
        s,
        r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 3"/>"##,
        axes.px(lo),
        axes.py(lo),
        axes.px(hi),
        axes.py(hi)
    );
    for r in rows {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}" fill-opacity="0.7"><title>{}</title></circle>"#,
            axes.px(r.mapped),
            axes.py(r.mos),
            PALETTE[0],
            escape(&r.clip)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub label: String,
    /// Loss per epoch, starting at epoch 0.
    pub values: Vec<f64>,
}

/// Loss against epoch for one or more runs.
pub fn loss_curves_svg(curves: &[LossCurve], title: &str) -> String {
    let xs = curves.iter().map(|c| c.values.len().saturating_sub(1) as f64).chain([0.0]);
    let ys = curves.iter().flat_map(|c| c.values.iter().copied());
    let axes = Axes::fit(xs, ys);
    let mut s = String::new();
    axes.frame(&mut s, title, "epoch", "loss");
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(e, &v)| format!("{:.1},{:.1}", axes.px(e as f64), axes.py(v)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 110.0,
            MARGIN + 16.0 + 14.0 * i as f64,
            escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_enough() {
        let rows = vec![
            ClipRow {
                clip: "a<b".into(),
                mos: 50.0,
                raw: 0.1,
                mapped: 49.0,
            },
            ClipRow {
                clip: "c".into(),
                mos: 70.0,
                raw: 0.4,
                mapped: 71.0,
            },
        ];
        let s = scatter_svg(&rows, "test");
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        assert_eq!(s.matches("<circle").count(), 2);
        let c = loss_curves_svg(
            &[LossCurve {
                label: "tl".into(),
                values: vec![1.0, 0.5, 0.25],
            }],
            "loss",
        );
        assert_eq!(c.matches("<polyline").count(), 1);
        assert_eq!(rows_csv(&rows).lines().count(), 3);
    }
}
