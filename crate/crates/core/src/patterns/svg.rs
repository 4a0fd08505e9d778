use std::fmt::Write as _;

use super::{ContingencyTable, Distribution};

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];
const BAR: f64 = 18.0;
const GAP: f64 = 10.0;
const LEFT: f64 = 50.0;
const TOP: f64 = 40.0;
const PLOT_H: f64 = 220.0;
const LABEL_H: f64 = 110.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Chart {
    body: String,
    width: f64,
    max: u64,
}

impl Chart {
    fn new(max: u64) -> Self {
        Chart {
            body: String::new(),
            width: LEFT,
            max: max.max(1),
        }
    }

    fn bar(&mut self, count: u64, color: &str) {
        let h = PLOT_H * count as f64 / self.max as f64;
        let (x, y) = (self.width, TOP + PLOT_H - h);
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{BAR:.1}" height="{h:.1}" fill="{color}"/>"#
        );
        let _ = writeln!(
            self.body,
            r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="middle">{count}</text>"#,
            x + BAR / 2.0,
            y - 3.0
        );
        self.width += BAR;
    }

    fn label(&mut self, start: f64, text: &str) {
        let x = (start + self.width) / 2.0;
        let y = TOP + PLOT_H + 12.0;
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="10" text-anchor="end" transform="rotate(-45 {x:.1} {y:.1})">{}</text>"#,
            escape(text)
        );
        self.width += GAP;
    }

    fn finish(self, title: &str, legend: &[String]) -> String {
        let width = self.width + GAP + if legend.is_empty() { 0.0 } else { 140.0 };
        let height = TOP + PLOT_H + LABEL_H;
        let mut out = format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">
<rect width="100%" height="100%" fill="white"/>
<text x="{LEFT:.1}" y="20" font-size="13" font-family="sans-serif">{}</text>
<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>
"#,
            escape(title),
            LEFT - 4.0,
            TOP + PLOT_H,
            self.width,
            TOP + PLOT_H
        );
        out.push_str(&self.body);
        let lx = self.width + GAP * 2.0;
        for (i, name) in legend.iter().enumerate() {
            let y = TOP + 14.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{lx:.1}" y="{y:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#,
                PALETTE[i % PALETTE.len()],
                lx + 14.0,
                y + 9.0,
                escape(name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

pub(super) fn distribution_chart(title: &str, d: &Distribution) -> String {
    let mut chart = Chart::new(d.counts.iter().copied().max().unwrap_or(0));
    for (label, count) in d.labels.iter().zip(&d.counts) {
        let start = chart.width;
        chart.bar(*count, PALETTE[0]);
        chart.label(start, label);
    }
    chart.finish(title, &[])
}

/// Grouped bars: one group per row category, one bar per column category.
pub(super) fn table_chart(title: &str, t: &ContingencyTable) -> String {
    let max = t.counts.iter().flatten().copied().max().unwrap_or(0);
    let mut chart = Chart::new(max);
    for (label, row) in t.row_labels.iter().zip(&t.counts) {
        let start = chart.width;
        for (j, count) in row.iter().enumerate() {
            chart.bar(*count, PALETTE[j % PALETTE.len()]);
        }
        chart.label(start, label);
    }
    chart.finish(title, &t.col_labels)
}
