//! Plain SVG renderings of training curves and ROC curves.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::DatasetReport;
use crate::train::{parse_history, EpochRecord};
use crate::util::write_atomic;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;
const TRAIN_COLOR: &str = "#1f77b4";
const VAL_COLOR: &str = "#d62728";

struct Panel {
    x0: f64,
    y0: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Panel {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let span = |(lo, hi): (f64, f64)| if hi > lo { hi - lo } else { 1.0 };
        let px = self.x0 + (x - self.x_range.0) / span(self.x_range) * PANEL_W;
        let py = self.y0 + PANEL_H - (y - self.y_range.0) / span(self.y_range) * PANEL_H;
        (px, py)
    }

    fn frame(&self, out: &mut String, title: &str, x_label: &str) {
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{PANEL_W:.2}" height="{PANEL_H:.2}" fill="none" stroke="black"/>"#,
            self.x0, self.y0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{title}</text>"#,
            self.x0 + PANEL_W / 2.0,
            self.y0 - 10.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{x_label}</text>"#,
            self.x0 + PANEL_W / 2.0,
            self.y0 + PANEL_H + 32.0
        );
        for (v, anchor_x, anchor_y, anchor) in [
            (self.y_range.0, self.x0 - 4.0, self.y0 + PANEL_H, "end"),
            (self.y_range.1, self.x0 - 4.0, self.y0 + 10.0, "end"),
        ] {
            let _ = writeln!(
                out,
                r#"<text x="{anchor_x:.2}" y="{anchor_y:.2}" text-anchor="{anchor}" font-size="10">{v:.4}</text>"#
            );
        }
        for (v, px) in [(self.x_range.0, self.x0), (self.x_range.1, self.x0 + PANEL_W)] {
            let _ = writeln!(
                out,
                r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle" font-size="10">{v}</text>"#,
                self.y0 + PANEL_H + 14.0
            );
        }
    }

    fn series(&self, out: &mut String, name: &str, color: &str, points: &[(f64, f64)]) {
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| {
                let (px, py) = self.map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline data-series="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
    }
}

fn legend(out: &mut String, x: f64, y: f64, entries: &[(&str, &str)]) {
    for (i, (label, color)) in entries.iter().enumerate() {
        let yy = y + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="{color}" stroke-width="2"/>"#,
            x + 20.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11">{label}</text>"#,
            x + 26.0,
            yy + 4.0
        );
    }
}

fn svg_open(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Accuracy (left) and loss (right) for the training and validation splits.
pub fn history_svg(rows: &[EpochRecord]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "history has no epochs".into(),
        });
    }
    let x_range = bounds(rows.iter().map(|r| r.epoch as f64));
    let mut out = String::new();
    svg_open(&mut out, 2.0 * PANEL_W + 3.0 * MARGIN, PANEL_H + 2.0 * MARGIN + 20.0);
    type Pick = fn(&EpochRecord) -> f64;
    let panels: [(&str, Pick, Pick, f64); 2] = [
        ("Accuracy", |r| r.train_acc, |r| r.val_acc, MARGIN),
        ("Loss", |r| r.train_loss, |r| r.val_loss, 2.0 * MARGIN + PANEL_W),
    ];
    for (title, train, val, x0) in panels {
        let y_range = bounds(rows.iter().flat_map(|r| [train(r), val(r)]));
        let panel = Panel { x0, y0: MARGIN, x_range, y_range };
        panel.frame(&mut out, title, "epoch");
        let pts = |f: Pick| rows.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>();
        panel.series(&mut out, "train", TRAIN_COLOR, &pts(train));
        panel.series(&mut out, "validation", VAL_COLOR, &pts(val));
    }
    legend(&mut out, MARGIN + 10.0, MARGIN + 14.0, &[("train", TRAIN_COLOR), ("validation", VAL_COLOR)]);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Pooled ROC with the chance diagonal.
pub fn roc_svg(report: &DatasetReport) -> String {
    let mut out = String::new();
    svg_open(&mut out, PANEL_W + 2.0 * MARGIN, PANEL_H + 2.0 * MARGIN + 20.0);
    let panel = Panel {
        x0: MARGIN,
        y0: MARGIN,
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
    };
    panel.frame(&mut out, &format!("ROC (AUC {:.4})", report.pooled.auc), "false positive rate");
    let (ax, ay) = panel.map(0.0, 0.0);
    let (bx, by) = panel.map(1.0, 1.0);
    let _ = writeln!(
        out,
        r##"<line x1="{ax:.2}" y1="{ay:.2}" x2="{bx:.2}" y2="{by:.2}" stroke="#999999" stroke-dasharray="4 4"/>"##
    );
    panel.series(&mut out, "roc", TRAIN_COLOR, &report.pooled.roc);
    out.push_str("</svg>\n");
    out
}

pub fn parse_report(text: &str) -> Result<DatasetReport> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

/// Renders `input` (history CSV or report JSON, chosen by extension) into `output`.
pub fn plot_file(input: &Path, output: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let is_json = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let svg = if is_json {
        roc_svg(&parse_report(&text)?)
    } else {
        history_svg(&parse_history(&text)?)?
    };
    write_atomic(output, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Confusion, MetricsReport};

    fn rows(n: usize) -> Vec<EpochRecord> {
        (1..=n)
            .map(|e| EpochRecord {
                epoch: e,
                lr: 0.001,
                train_loss: 1.0 / e as f64,
                train_acc: 0.9,
                val_loss: 1.2 / e as f64,
                val_acc: 0.88,
            })
            .collect()
    }

    fn polylines(svg: &str) -> Vec<usize> {
        svg.lines()
            .filter(|l| l.starts_with("<polyline"))
            .map(|l| l.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>").split(' ').count())
            .collect()
    }

    #[test]
    fn history_has_point_per_epoch() {
        let svg = history_svg(&rows(3)).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(polylines(&svg), vec![3, 3, 3, 3]);
        assert_eq!(svg, history_svg(&rows(3)).unwrap());
        let single = history_svg(&rows(1)).unwrap();
        assert!(!single.contains("NaN"));
    }

    #[test]
    fn roc_runs_corner_to_corner() {
        let m = MetricsReport::new(Confusion::default(), vec![(0.0, 0.0), (0.2, 0.7), (1.0, 1.0)], 0.83, 0.5);
        let rep = DatasetReport { fov_only: true, pooled: m, images: vec![] };
        let svg = roc_svg(&rep);
        let line = svg.lines().find(|l| l.contains("data-series=\"roc\"")).unwrap();
        let pts: Vec<&str> = line.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>").split(' ').collect();
        assert_eq!(pts.first(), Some(&"50.00,310.00"));
        assert_eq!(pts.last(), Some(&"410.00,50.00"));
    }

    #[test]
    fn malformed_inputs_report_lines() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("h.csv");
        std::fs::write(&csv, "epoch,lr,train_loss,train_acc,val_loss,val_acc\n1,0.1,0.2,0.3,0.4,0.5\n2,oops\n").unwrap();
        assert!(matches!(plot_file(&csv, &dir.path().join("o.svg")), Err(Error::Parse { line: 3, .. })));
        let json = dir.path().join("r.json");
        std::fs::write(&json, "{\n  \"fov_only\": true,\n  \"pooled\": 5\n}").unwrap();
        assert!(matches!(plot_file(&json, &dir.path().join("o.svg")), Err(Error::Parse { line: 3, .. })));
    }
}
