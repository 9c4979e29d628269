//! Plain-text renderings of evaluation results.

use std::fmt::Write;

use hypsep::model::HierarchySpec;
use hypsep::objectives::{ClassMetrics, MetricReport};
use hypsep::pipeline::{EvaluationReport, ThresholdSweep};

fn row(out: &mut String, label: &str, cells: impl IntoIterator<Item = String>) {
    let _ = write!(out, "{label:<16}");
    for c in cells {
        let _ = write!(out, "{c:>14}");
    }
    out.push('\n');
}

fn triple(m: &ClassMetrics) -> String {
    format!("{:.1}/{:.1}/{:.1}", m.si_sdr, m.si_sir, m.si_sar)
}

/// SI-SDR / SI-SIR / SI-SAR in dB per class, one row per system.
pub fn render_report(h: &HierarchySpec, r: &EvaluationReport) -> String {
    let mut out = String::new();
    let names: Vec<String> = h.class_names();
    row(
        &mut out,
        "system",
        names.iter().cloned().chain(["parents".into(), "leaves".into()]),
    );
    let mut line = |label: &str, m: &MetricReport| {
        let cells = names
            .iter()
            .map(|n| m.classes.get(n).map(triple).unwrap_or_default())
            .chain([triple(&m.averages.parents), triple(&m.averages.leaves)]);
        row(&mut out, label, cells);
    };
    line("no-proc", &r.no_proc);
    line("model", &r.model);
    line("oracle-psf", &r.oracle_psf);
    if let Some(hist) = &r.norm_histograms {
        out.push_str("\nmean normalized norm by active sources\n");
        for b in &hist.buckets {
            let mean = b.mean.map(|m| format!("{m:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:<6}{:>10}  n={}", b.label, mean, b.population);
        }
    }
    out
}

/// Leaf averages and silenced fraction per threshold.
pub fn render_sweep(s: &ThresholdSweep) -> String {
    let mut out = String::new();
    row(
        &mut out,
        "theta",
        ["silenced", "leaf SI-SDR", "leaf SI-SIR", "leaf SI-SAR"].map(String::from),
    );
    for p in &s.points {
        let l = &p.metrics.averages.leaves;
        row(
            &mut out,
            &format!("{:.2}", p.theta),
            [
                format!("{:.3}", p.silenced_fraction),
                format!("{:.2}", l.si_sdr),
                format!("{:.2}", l.si_sir),
                format!("{:.2}", l.si_sar),
            ],
        );
    }
    let _ = writeln!(out, "nested: {}", s.nested);
    out
}
