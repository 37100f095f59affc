use std::fmt::Write as _;
use std::path::Path;

use super::{EvalReport, HistoryShuffleProbe, MetricSummary, PositionProbe, ShuffleRow};
use crate::error::{Error, Result};

/// Provenance stamped into every emitted file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub seed: u64,
}

impl ArtifactMeta {
    fn csv_line(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }

    fn svg_comment(&self) -> String {
        format!("<!-- config_hash={} seed={} -->\n", self.config_hash, self.seed)
    }
}

/// Writes `contents`, creating parent directories.
pub fn write_artifact(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn metric_rows(out: &mut String, stratum: &str, metrics: &[MetricSummary]) {
    for m in metrics {
        let _ = writeln!(
            out,
            "ndcg,{},{},{},{},{}",
            m.cutoff,
            stratum,
            opt(m.mean),
            opt(m.ci95),
            m.count
        );
    }
}

/// `metric,cutoff,stratum,mean,ci95,count`; stratum is `all` or
/// `<breakdown>:<label>`.
pub fn report_csv(report: &EvalReport, meta: &ArtifactMeta) -> String {
    let mut out = meta.csv_line();
    out.push_str("metric,cutoff,stratum,mean,ci95,count\n");
    metric_rows(&mut out, "all", &report.overall);
    for (name, strata) in &report.breakdowns {
        for s in strata {
            metric_rows(&mut out, &format!("{name}:{}", s.label), &s.metrics);
        }
    }
    out
}

/// `position,rank,count` for every (slot, achieved rank) pair.
pub fn position_csv(probe: &PositionProbe, meta: &ArtifactMeta) -> String {
    let mut out = meta.csv_line();
    out.push_str("position,rank,count\n");
    for (p, h) in probe.positions.iter().zip(&probe.histograms) {
        for (r, c) in h.iter().enumerate() {
            let _ = writeln!(out, "{p},{},{c}", r + 1);
        }
    }
    out
}

/// `instance_id,shuffle,ndcg`; shuffle is `original` or the shuffle index.
pub fn history_shuffle_raw_csv(probe: &HistoryShuffleProbe, meta: &ArtifactMeta) -> String {
    let mut out = meta.csv_line();
    out.push_str("instance_id,shuffle,ndcg\n");
    for ShuffleRow {
        instance_id,
        shuffle,
        ndcg,
    } in &probe.rows
    {
        let s = shuffle.map_or_else(|| "original".to_string(), |j| j.to_string());
        let _ = writeln!(out, "{instance_id},{s},{ndcg}");
    }
    out
}

/// `statistic,value` rows: avg, std, range, original_avg, instances, shuffles.
pub fn history_shuffle_summary_csv(probe: &HistoryShuffleProbe, meta: &ArtifactMeta) -> String {
    let s = &probe.summary;
    let mut out = meta.csv_line();
    out.push_str("statistic,value\n");
    let _ = writeln!(out, "avg,{}", s.avg);
    let _ = writeln!(out, "std,{}", s.std);
    let _ = writeln!(out, "range,{}", s.range);
    let _ = writeln!(out, "original_avg,{}", s.original_avg);
    let _ = writeln!(out, "instances,{}", s.instances);
    let _ = writeln!(out, "shuffles,{}", s.shuffles);
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"];

/// Grouped bar chart: one group per category, one bar per series.
fn bar_chart(meta: &ArtifactMeta, title: &str, series: &[String], groups: &[(String, Vec<f64>)], y_max: f64) -> String {
    let (w, h) = (720.0, 360.0);
    let (left, right, top, bottom) = (56.0, 16.0, 40.0, 64.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    out.push_str(&meta.svg_comment());
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, esc(title));
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = top + plot_h * (1.0 - i as f64 / 4.0);
        let _ = writeln!(
            out,
            r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            left + plot_w,
            left - 6.0,
            y + 4.0,
            trim_num(v)
        );
    }
    let n_groups = groups.len().max(1) as f64;
    let group_w = plot_w / n_groups;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, (label, values)) in groups.iter().enumerate() {
        let gx = left + group_w * g as f64 + group_w * 0.1;
        for (s, &v) in values.iter().enumerate() {
            let bh = plot_h * (v / y_max).clamp(0.0, 1.0);
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{}: {}</title></rect>"#,
                gx + bar_w * s as f64,
                top + plot_h - bh,
                bar_w,
                bh,
                PALETTE[s % PALETTE.len()],
                esc(&series[s]),
                v
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            left + group_w * (g as f64 + 0.5),
            top + plot_h + 16.0,
            esc(label)
        );
    }
    for (s, name) in series.iter().enumerate() {
        let x = left + 120.0 * s as f64;
        let y = h - 18.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{y:.2}">{}</text>"#,
            y - 9.0,
            PALETTE[s % PALETTE.len()],
            x + 14.0,
            esc(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn trim_num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// NDCG by cutoff, overall and per stratum of every breakdown.
pub fn report_svg(report: &EvalReport, meta: &ArtifactMeta) -> String {
    let series: Vec<String> = report.overall.iter().map(|m| format!("NDCG@{}", m.cutoff)).collect();
    let values = |ms: &[MetricSummary]| ms.iter().map(|m| m.mean.unwrap_or(0.0)).collect::<Vec<_>>();
    let mut groups = vec![("all".to_string(), values(&report.overall))];
    for (name, strata) in &report.breakdowns {
        for s in strata {
            groups.push((format!("{name}:{}", s.label), values(&s.metrics)));
        }
    }
    bar_chart(meta, "Mean NDCG", &series, &groups, 1.0)
}

/// Achieved-rank histogram of the positive for each presentation slot.
pub fn position_svg(probe: &PositionProbe, meta: &ArtifactMeta) -> String {
    let series: Vec<String> = probe.positions.iter().map(|p| format!("presented at {p}")).collect();
    let groups: Vec<(String, Vec<f64>)> = (0..probe.k)
        .map(|r| {
            (
                format!("{}", r + 1),
                probe.histograms.iter().map(|h| h[r] as f64).collect(),
            )
        })
        .collect();
    let y_max = probe.histograms.iter().flatten().copied().max().unwrap_or(1) as f64;
    bar_chart(meta, "Achieved rank of the positive", &series, &groups, y_max)
}

/// Shuffle statistics as bars.
pub fn history_shuffle_svg(probe: &HistoryShuffleProbe, meta: &ArtifactMeta) -> String {
    let s = &probe.summary;
    let groups = vec![
        ("Avg".to_string(), vec![s.avg]),
        ("Std".to_string(), vec![s.std]),
        ("Range".to_string(), vec![s.range]),
        ("Original Avg".to_string(), vec![s.original_avg]),
    ];
    bar_chart(meta, "NDCG@10 under history shuffles", &["NDCG@10".to_string()], &groups, 1.0)
}
