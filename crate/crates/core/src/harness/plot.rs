//! Deterministic chart emission: a grouped bar chart (mean ± std of final
//! reward by setup and variant) as an SVG, plus a plain-text summary table.
//! Output bytes depend only on the metric values, so re-runs are identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::eval::MetricsRecord;
use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStat {
    pub setup: String,
    pub variant: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Group records by (setup, variant) in deterministic order.
pub fn summarize(records: &[MetricsRecord]) -> Vec<GroupStat> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.setup.clone(), r.variant.clone()))
            .or_default()
            .push(r.final_reward);
    }
    groups
        .into_iter()
        .map(|((setup, variant), vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            GroupStat { setup, variant, mean, std: var.sqrt(), count: n }
        })
        .collect()
}

pub fn summary_table(stats: &[GroupStat]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<10} {:<18} {:>8} {:>8} {:>6}", "setup", "variant", "mean", "std", "n")
        .expect("string write");
    for s in stats {
        writeln!(
            out,
            "{:<10} {:<18} {:>8.4} {:>8.4} {:>6}",
            s.setup, s.variant, s.mean, s.std, s.count
        )
        .expect("string write");
    }
    out
}

const BAR_COLORS: [&str; 4] = ["#4878d0", "#ee854a", "#6acc64", "#d65f5f"];

/// Render the grouped bar chart. Fixed layout, fixed precision, no
/// timestamps: byte-identical across runs.
pub fn render_svg(stats: &[GroupStat]) -> String {
    let variants: Vec<String> = {
        let mut v: Vec<String> = stats.iter().map(|s| s.variant.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let setups: Vec<String> = {
        let mut v: Vec<String> = stats.iter().map(|s| s.setup.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let (w, h) = (120 + setups.len() * 140, 320);
    let plot_h = 240.0;
    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    )
    .expect("svg write");
    writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>").expect("svg write");
    // y axis and gridlines at 0, 0.5, 1.
    for (frac, label) in [(0.0, "0.0"), (0.5, "0.5"), (1.0, "1.0")] {
        let y = 40.0 + plot_h * (1.0 - frac);
        writeln!(
            svg,
            "<line x1=\"60\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>",
            w - 20
        )
        .expect("svg write");
        writeln!(
            svg,
            "<text x=\"52\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\" fill=\"#333333\">{label}</text>",
            y + 4.0
        )
        .expect("svg write");
    }
    let group_w = 130.0;
    let bar_w = (group_w - 30.0) / variants.len().max(1) as f64;
    for (si, setup) in setups.iter().enumerate() {
        let x0 = 70.0 + si as f64 * 140.0;
        for (vi, variant) in variants.iter().enumerate() {
            if let Some(s) = stats.iter().find(|s| &s.setup == setup && &s.variant == variant) {
                let x = x0 + vi as f64 * bar_w;
                let bh = plot_h * s.mean.clamp(0.0, 1.0);
                let y = 40.0 + plot_h - bh;
                let color = BAR_COLORS[vi % BAR_COLORS.len()];
                writeln!(
                    svg,
                    "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"{color}\"/>",
                    bar_w - 6.0
                )
                .expect("svg write");
                // error bar: mean ± std
                let cx = x + (bar_w - 6.0) / 2.0;
                let y_lo = 40.0 + plot_h - plot_h * (s.mean - s.std).clamp(0.0, 1.0);
                let y_hi = 40.0 + plot_h - plot_h * (s.mean + s.std).clamp(0.0, 1.0);
                writeln!(
                    svg,
                    "<line x1=\"{cx:.1}\" y1=\"{y_lo:.1}\" x2=\"{cx:.1}\" y2=\"{y_hi:.1}\" stroke=\"#222222\" stroke-width=\"1.5\"/>"
                )
                .expect("svg write");
            }
        }
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" fill=\"#111111\">{setup}</text>",
            x0 + group_w / 2.0 - 15.0,
            40.0 + plot_h + 20.0
        )
        .expect("svg write");
    }
    // legend
    for (vi, variant) in variants.iter().enumerate() {
        let y = 14.0 + vi as f64 * 0.0;
        let x = 70.0 + vi as f64 * 150.0;
        let color = BAR_COLORS[vi % BAR_COLORS.len()];
        writeln!(svg, "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>", y)
            .expect("svg write");
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#111111\">{variant}</text>",
            x + 14.0,
            y + 9.0
        )
        .expect("svg write");
    }
    writeln!(svg, "</svg>").expect("svg write");
    svg
}

/// Write `rewards.svg` and `summary.txt` for a set of metrics records.
pub fn plot_metrics(records: &[MetricsRecord], out_dir: &Path) -> Result<(), HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::Config("no metrics records to plot".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let stats = summarize(records);
    std::fs::write(out_dir.join("rewards.svg"), render_svg(&stats))?;
    std::fs::write(out_dir.join("summary.txt"), summary_table(&stats))?;
    Ok(())
}
