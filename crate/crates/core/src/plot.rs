//! Learning-curve plots: SVG charts with empirical, power-law and AFM
//! series, each paired with a CSV of the plotted numbers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analytics::{aggregate_curves, LearningCurve, PowerLawFit};
use crate::artifact::{write_atomic, write_artifact, ArtifactMeta};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    PerKc,
    Aggregated,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_kc" | "per-kc" => Ok(PlotKind::PerKc),
            "aggregated" => Ok(PlotKind::Aggregated),
            other => Err(Error::Config(format!("unknown plot kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotRow {
    pub opportunity: u32,
    pub empirical: Option<f64>,
    pub power_law: Option<f64>,
    pub afm: Option<f64>,
}

/// Predicted AFM error by opportunity, per KC.
pub type AfmCurves = BTreeMap<String, Vec<(u32, f64)>>;

fn merge(rows: &mut BTreeMap<u32, PlotRow>, n: u32) -> &mut PlotRow {
    rows.entry(n).or_insert(PlotRow {
        opportunity: n,
        empirical: None,
        power_law: None,
        afm: None,
    })
}

pub fn per_kc_rows(curve: &LearningCurve, fit: Option<&PowerLawFit>, afm: &[(u32, f64)]) -> Vec<PlotRow> {
    let mut rows = BTreeMap::new();
    for p in &curve.points {
        let row = merge(&mut rows, p.opportunity);
        row.empirical = Some(p.error_rate);
        row.power_law = fit.map(|f| f.predict(f64::from(p.opportunity)));
    }
    for &(n, e) in afm {
        merge(&mut rows, n).afm = Some(e);
    }
    rows.into_values().collect()
}

/// Empirical and fitted series follow `aggregate_curves`; the AFM series is
/// the mean over KCs with a prediction at each opportunity.
pub fn aggregated_rows(
    curves: &[LearningCurve],
    fits: &BTreeMap<String, PowerLawFit>,
    afm: &AfmCurves,
) -> Vec<PlotRow> {
    let mut rows = BTreeMap::new();
    for p in aggregate_curves(curves, fits) {
        let row = merge(&mut rows, p.opportunity);
        row.empirical = Some(p.error_rate);
        row.power_law = p.fitted_error;
    }
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for series in afm.values() {
        for &(n, e) in series {
            let s = sums.entry(n).or_default();
            s.0 += e;
            s.1 += 1;
        }
    }
    for (n, (sum, count)) in sums {
        merge(&mut rows, n).afm = Some(sum / count as f64);
    }
    rows.into_values().collect()
}

pub fn truncate(rows: Vec<PlotRow>, max_opportunity: Option<u32>) -> Vec<PlotRow> {
    match max_opportunity {
        Some(max) => rows.into_iter().filter(|r| r.opportunity <= max).collect(),
        None => rows,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn rows_to_csv(rows: &[PlotRow]) -> String {
    let mut out = String::from("opportunity,empirical,power_law,afm\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.opportunity, cell(r.empirical), cell(r.power_law), cell(r.afm));
    }
    out
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Error rate (0 to 1) against opportunity.
pub fn render_svg(title: &str, rows: &[PlotRow], meta: &ArtifactMeta) -> String {
    let max_n = rows.iter().map(|r| r.opportunity).max().unwrap_or(1).max(2);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |n: u32| LEFT + (f64::from(n) - 1.0) / f64::from(max_n - 1) * plot_w;
    let y = |e: f64| TOP + (1.0 - e.clamp(0.0, 1.0)) * plot_h;

    let mut s = String::new();
    let _ = writeln!(s, "{}", meta.xml_comment());
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" font-size="14" text-anchor="middle">{}</text>"#, LEFT + plot_w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT},{TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    for i in 0..=5 {
        let e = f64::from(i) / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{:.2}" x2="{LEFT}" y2="{:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{e:.1}</text>"##,
            LEFT - 4.0,
            y(e),
            y(e),
            LEFT - 8.0,
            y(e) + 4.0
        );
    }
    let step = (max_n as usize).div_ceil(10).max(1);
    for n in (1..=max_n).step_by(step) {
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{}" x2="{:.2}" y2="{}" stroke="black"/><text x="{:.2}" y="{}" text-anchor="middle">{n}</text>"#,
            x(n),
            TOP + plot_h,
            x(n),
            TOP + plot_h + 4.0,
            x(n),
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Opportunity</text><text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">Error rate</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    // (label, colour, extra stroke attributes, value)
    type Series = (&'static str, &'static str, &'static str, fn(&PlotRow) -> Option<f64>);
    let series: [Series; 3] = [
        ("empirical", "#1f77b4", "", |r| r.empirical),
        ("power law", "#d62728", r#" stroke-dasharray="6 4""#, |r| r.power_law),
        ("AFM", "#2ca02c", r#" stroke-dasharray="2 3""#, |r| r.afm),
    ];
    for (i, (name, color, dash, get)) in series.iter().enumerate() {
        let pts: Vec<String> = rows
            .iter()
            .filter_map(|r| get(r).map(|e| format!("{:.2},{:.2}", x(r.opportunity), y(e))))
            .collect();
        let _ = writeln!(s, r#"<g class="series" data-name="{name}">"#);
        if !pts.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
                pts.join(" ")
            );
        }
        if i == 0 {
            for p in &pts {
                let (cx, cy) = p.split_once(',').expect("formatted pair");
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
        }
        let _ = writeln!(s, "</g>");
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + plot_w + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{name}</text>"#,
            lx + 25.0,
            lx + 32.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn file_stem(kc_id: &str) -> String {
    kc_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `<stem>.svg` and `<stem>.csv` pairs into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn emit_plot(
    curves: &[LearningCurve],
    fits: &BTreeMap<String, PowerLawFit>,
    afm: &AfmCurves,
    kind: PlotKind,
    max_opportunity: Option<u32>,
    out_dir: &Path,
    meta: &ArtifactMeta,
    title: &str,
) -> Result<Vec<PathBuf>> {
    if curves.iter().all(|c| c.points.is_empty()) {
        return Err(Error::Precondition("no learning-curve points to plot".into()));
    }
    let mut jobs: Vec<(String, String, Vec<PlotRow>)> = Vec::new();
    match kind {
        PlotKind::Aggregated => {
            let rows = truncate(aggregated_rows(curves, fits, afm), max_opportunity);
            jobs.push(("aggregated".into(), format!("{title}: all KCs"), rows));
        }
        PlotKind::PerKc => {
            for c in curves.iter().filter(|c| !c.points.is_empty()) {
                let afm_series = afm.get(&c.kc_id).map(Vec::as_slice).unwrap_or(&[]);
                let rows = truncate(per_kc_rows(c, fits.get(&c.kc_id), afm_series), max_opportunity);
                jobs.push((format!("kc_{}", file_stem(&c.kc_id)), format!("{title}: {}", c.kc_id), rows));
            }
        }
    }
    let mut written = Vec::new();
    for (stem, label, rows) in jobs {
        let svg = out_dir.join(format!("{stem}.svg"));
        write_atomic(&svg, render_svg(&label, &rows, meta).as_bytes())?;
        let csv = out_dir.join(format!("{stem}.csv"));
        write_artifact(&csv, meta, &rows_to_csv(&rows))?;
        written.push(svg);
        written.push(csv);
    }
    Ok(written)
}
