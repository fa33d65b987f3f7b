//! Side-by-side comparison of scored runs.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use macl::corpus::write_atomic;
use macl::metrics::KpHistogram;

use crate::{histogram_rows, RunSummary};

pub fn run(paths: &[std::path::PathBuf], out: Option<&Path>, plot: bool) -> Result<()> {
    let runs = paths
        .iter()
        .map(|p| RunSummary::load(p))
        .collect::<Result<Vec<_>>>()?;
    let table = table_csv(&runs);
    print!("{}", pretty(&runs));
    let Some(dir) = out else { return Ok(()) };
    write_atomic(&dir.join("pod_kud.csv"), table.as_bytes())?;

    let mut hist = String::from("run,side,n,bin_lo,bin_hi,mass\n");
    for r in &runs {
        let Some(report) = &r.report else { continue };
        for (side, m) in [
            ("reference", &report.reference),
            ("generated", &report.generated),
        ] {
            for h in [&m.kp1_histogram, &m.kp2_histogram].into_iter().flatten() {
                for row in histogram_rows(&r.label, side, h) {
                    hist.push_str(&row);
                    hist.push('\n');
                }
            }
        }
    }
    write_atomic(&dir.join("kp_histograms.csv"), hist.as_bytes())?;

    if plot {
        for r in &runs {
            let Some(report) = &r.report else { continue };
            if let (Some(h), Some(g)) = (
                &report.reference.kp1_histogram,
                &report.generated.kp1_histogram,
            ) {
                let svg = histogram_svg(&r.label, h, g);
                write_atomic(&dir.join(format!("{}_kp1.svg", r.label)), svg.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn table_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from("run,pod,kud\n");
    for r in runs {
        let _ = writeln!(out, "{},{},{}", r.label, cell(r.pod), cell(r.kud));
    }
    out
}

fn pretty(runs: &[RunSummary]) -> String {
    let width = runs.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
    let mut out = format!("{:<width$}  {:>8}  {:>8}\n", "run", "PoD", "KUD");
    for r in runs {
        let dash = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}",
            r.label,
            dash(r.pod),
            dash(r.kud)
        );
    }
    out
}

/// Paired bars per bin: references in grey, generations in blue.
fn histogram_svg(label: &str, reference: &KpHistogram, generated: &KpHistogram) -> String {
    let (w, h, pad) = (420.0, 240.0, 30.0);
    let bins = reference.masses.len().max(1);
    let slot = (w - 2.0 * pad) / bins as f64;
    let bar = slot * 0.4;
    let plot_h = h - 2.0 * pad;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <text x=\"{pad}\" y=\"18\" font-size=\"12\">{label}: KP-1 (grey reference, blue generated)</text>\n\
         <line x1=\"{pad}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = h - pad,
        x2 = w - pad
    );
    for i in 0..bins {
        let x = pad + i as f64 * slot;
        for (j, (masses, colour)) in [(&reference.masses, "#999"), (&generated.masses, "#36c")]
            .into_iter()
            .enumerate()
        {
            let m = masses.get(i).copied().unwrap_or(0.0);
            let bh = m * plot_h;
            let _ = writeln!(
                svg,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar:.1}\" height=\"{bh:.1}\" fill=\"{colour}\"/>",
                x + j as f64 * bar,
                h - pad - bh
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\">{:.1}</text>",
            x,
            h - pad + 12.0,
            reference.bin_edges.get(i).copied().unwrap_or(0.0)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
