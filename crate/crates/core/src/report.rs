//! Result bundles: writing them from a config, and rendering tables and
//! learning-curve plots from them.
//!
//! Bundle layout:
//!
//! ```text
//! config.toml                      echo of the parsed config
//! runs/<method>_seed<k>.json       full run report
//! runs/<method>_seed<k>.csv        S, b_hat and metrics
//! series/<method>_seed<k>.csv      accuracy after each task
//! artifacts/<method>_seed<k>/      optional φ/Z/η and atlas tables
//! aggregate.csv                    mean metrics per method
//! report/                          written by `report`
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::ExperimentConfig;
use crate::data::{make_stream, SourceData, StreamKind};
use crate::error::{Error, Result};
use crate::eval::{aggregate, run_protocol, seen_mean, AggregateRow, Metrics, RunReport};
use crate::methods::Method;

const BUNDLE_ENTRIES: [&str; 6] = ["config.toml", "runs", "series", "artifacts", "aggregate.csv", "report"];

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run_stem(method: Method, seed: u64) -> String {
    format!("{method}_seed{seed}")
}

/// Refuses to write into a directory that already holds bundle files unless
/// `force`, in which case those files (and only those) are removed.
fn prepare_bundle_dir(dir: &Path, force: bool) -> Result<()> {
    let existing: Vec<PathBuf> = BUNDLE_ENTRIES.iter().map(|e| dir.join(e)).filter(|p| p.exists()).collect();
    if !existing.is_empty() {
        if !force {
            return Err(Error::Config(format!(
                "{} already contains a result bundle; pass --force to overwrite it",
                dir.display()
            )));
        }
        for p in existing {
            let removed = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
            removed.map_err(|e| Error::io(&p, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("method,stream,seeds,ACC,FWT,BWT\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.method, r.stream, r.seeds, r.acc, r.fwt, r.bwt);
    }
    out
}

/// Runs every (seed, method) pair of `cfg` and writes the bundle into
/// `cfg.output_dir`. Each seed gets its own task stream, shared by all methods.
pub fn cmd_run(cfg: &ExperimentConfig, force: bool) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    cfg.check_data()?;
    let out = &cfg.output_dir;
    prepare_bundle_dir(out, force)?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    let src = SourceData::load_mnist(&cfg.data_dir())?;
    let settings = cfg.run_settings();
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let stream = make_stream(cfg.stream, &src, settings.task_count, seed, cfg.desk)?;
        for &method in &cfg.methods {
            info!("running {method} on {} with seed {seed}", cfg.stream);
            let outcome = run_protocol(method, &stream, &settings, seed)?;
            let stem = run_stem(method, seed);
            let report = outcome.report;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Serialization(e.to_string()))?;
            write(&out.join("runs").join(format!("{stem}.json")), &json)?;
            write(&out.join("runs").join(format!("{stem}.csv")), &report.matrix_csv())?;
            write(&out.join("series").join(format!("{stem}.csv")), &report.series_csv())?;
            if cfg.dump_modulation {
                for (name, text) in &outcome.artifacts {
                    write(&out.join("artifacts").join(&stem).join(name), text)?;
                }
            }
            println!("{}", report.summary());
            reports.push(report);
        }
    }
    write(&out.join("aggregate.csv"), &aggregate_csv(&aggregate(&reports)?))?;
    Ok(reports)
}

/// Loads every run report of a bundle, ordered by method, stream and seed,
/// and checks that the stored metrics match the stored matrices.
pub fn load_reports(bundle: &Path) -> Result<Vec<RunReport>> {
    let runs = bundle.join("runs");
    let entries = fs::read_dir(&runs).map_err(|e| Error::io(&runs, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(&runs, e))?.path();
        if p.extension().is_some_and(|x| x == "json") {
            paths.push(p);
        }
    }
    paths.sort();
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let r: RunReport =
            serde_json::from_str(&text).map_err(|e| Error::Serialization(format!("{}: {e}", p.display())))?;
        r.matrix.validate()?;
        if Metrics::from_matrix(&r.matrix)? != r.metrics {
            return Err(Error::Consistency(format!(
                "{}: stored metrics differ from its accuracy matrix",
                p.display()
            )));
        }
        reports.push(r);
    }
    reports.sort_by_key(|r| (r.method, r.stream.as_str(), r.seed));
    Ok(reports)
}

/// Side-by-side rows for the modulated method and its ablation, one block
/// per stream.
pub fn ablation_table(rows: &[AggregateRow]) -> Option<String> {
    let streams: BTreeSet<&str> = rows.iter().map(|r| r.stream.as_str()).collect();
    let mut out = String::new();
    for stream in streams {
        let find = |m: Method| rows.iter().find(|r| r.method == m && r.stream.as_str() == stream);
        let (Some(full), Some(ablated)) = (find(Method::Isyana), find(Method::IsyanaNoTt)) else {
            continue;
        };
        let _ = writeln!(out, "{stream}");
        let _ = writeln!(out, "{:<16}{:>12}{:>14}{:>14}", "Model", "Acc. (%)", "FWT", "BWT");
        for (name, r) in [("ISYANA(No TT)", ablated), ("ISYANA", full)] {
            let _ = writeln!(out, "{:<16}{:>12.4}{:>14.6}{:>14.6}", name, 100.0 * r.acc, r.fwt, r.bwt);
        }
        let _ = writeln!(out, "gap (points): {:+.4}\n", 100.0 * (full.acc - ablated.acc));
    }
    (!out.is_empty()).then_some(out)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Mean over seeds of the average accuracy on seen tasks after each task.
pub fn learning_curves(reports: &[RunReport], stream: StreamKind) -> Vec<(Method, Vec<f64>)> {
    let mut curves: Vec<(Method, Vec<f64>, usize)> = Vec::new();
    for r in reports.iter().filter(|r| r.stream == stream) {
        let curve: Vec<f64> = r.matrix.rows().iter().enumerate().map(|(i, row)| seen_mean(row, i)).collect();
        match curves.iter_mut().find(|(m, c, _)| *m == r.method && c.len() == curve.len()) {
            Some((_, sum, n)) => {
                sum.iter_mut().zip(&curve).for_each(|(s, v)| *s += v);
                *n += 1;
            }
            None => curves.push((r.method, curve, 1)),
        }
    }
    curves
        .into_iter()
        .map(|(m, sum, n)| (m, sum.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// Line chart with one polyline per method; y is accuracy in [0, 1].
pub fn render_svg(title: &str, curves: &[(Method, Vec<f64>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let tasks = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(1).max(1);
    let x_of = |i: usize| {
        if tasks == 1 {
            left + pw / 2.0
        } else {
            left + pw * i as f64 / (tasks - 1) as f64
        }
    };
    let y_of = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd"/>"##,
            left + pw
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y + 4.0);
    }
    for i in 0..tasks {
        let x = x_of(i);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            top + ph + 18.0,
            i + 1
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">tasks trained</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">mean accuracy on seen tasks</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, (method, curve)) in curves.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = curve
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i), y_of(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"><title>{method}</title></polyline>"#,
            points.join(" ")
        );
        let ly = top + 10.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{method}</text>"#, lx + 26.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Files written by [`cmd_report`].
#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub rows: Vec<AggregateRow>,
    pub summary_csv: PathBuf,
    pub ablation: Option<(PathBuf, String)>,
    pub plots: Vec<PathBuf>,
}

/// Renders the comparison table, the ablation table (when both modulated
/// variants are present) and one plot per stream into `<bundle>/report`.
pub fn cmd_report(bundle: &Path) -> Result<ReportOutput> {
    let reports = load_reports(bundle)?;
    if reports.is_empty() {
        return Err(Error::Argument(format!("{} holds no run reports", bundle.display())));
    }
    let rows = aggregate(&reports)?;
    let dir = bundle.join("report");
    let summary_csv = dir.join("summary.csv");
    write(&summary_csv, &aggregate_csv(&rows))?;
    let ablation = match ablation_table(&rows) {
        Some(text) => {
            let path = dir.join("ablation.txt");
            write(&path, &text)?;
            Some((path, text))
        }
        None => None,
    };
    let streams: BTreeSet<&str> = reports.iter().map(|r| r.stream.as_str()).collect();
    let mut plots = Vec::new();
    for name in streams {
        let stream: StreamKind = name.parse()?;
        let svg = render_svg(&format!("{name} stream"), &learning_curves(&reports, stream));
        let path = dir.join(format!("accuracy_{name}.svg"));
        write(&path, &svg)?;
        plots.push(path);
    }
    Ok(ReportOutput {
        rows,
        summary_csv,
        ablation,
        plots,
    })
}
