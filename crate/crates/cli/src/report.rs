//! Plots and a markdown summary from training metrics and evaluation reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use sslprof_core::evaluate::plot::{bar_chart_svg, line_chart_svg};
use sslprof_core::trainer::StepMetrics;
use sslprof_core::EvalReport;

use crate::Failure;

pub const SUMMARY_FILE: &str = "summary.md";

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))
}

fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, Failure> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Failure::Validation(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn read_report(path: &Path) -> Result<EvalReport, Failure> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |a| format!("{:.1}", 100.0 * a))
}

fn summary(runs: &[(String, Vec<StepMetrics>)], evals: &[(String, EvalReport)]) -> String {
    let mut md = String::from("# Profiling summary\n");
    if !evals.is_empty() {
        md.push_str("\n## kNN perturbation accuracy (%)\n\n");
        md.push_str("| Configuration | Within line | Δ | Cross line | Intra-well cosine | Collapse |\n");
        md.push_str("|---|---:|---:|---:|---:|---|\n");
        let mut prev: Option<f64> = None;
        for (name, r) in evals {
            let delta = match (prev, r.within_mean_accuracy) {
                (Some(p), Some(a)) => format!("{:+.1}", 100.0 * (a - p)),
                _ => String::new(),
            };
            let intra = r
                .diagnostics
                .intra_well_consistency
                .map_or_else(|| "n/a".into(), |c| format!("{c:.3}"));
            let collapse = if r.diagnostics.collapse.collapsed { "yes" } else { "no" };
            let _ = writeln!(
                md,
                "| {name} | {} | {delta} | {} | {intra} | {collapse} |",
                pct(r.within_mean_accuracy),
                pct(r.cross_mean_accuracy)
            );
            prev = r.within_mean_accuracy.or(prev);
        }
        let r = &evals[0].1;
        let _ = writeln!(
            md,
            "\n{} wells, {} classes, chance {:.1}%. k = {}, {} folds, {:?} distance.",
            r.n_wells,
            r.n_classes,
            100.0 * r.chance,
            r.config.k,
            r.config.n_folds,
            r.config.metric
        );
    }
    if !runs.is_empty() {
        md.push_str("\n## Training\n\n");
        md.push_str("| Run | Steps | Total | DINO | Local agg. | iBOT | KoLeo |\n");
        md.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
        for (name, m) in runs {
            match m.last() {
                Some(l) => {
                    let _ = writeln!(
                        md,
                        "| {name} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
                        m.len(),
                        l.total,
                        l.dino,
                        l.local_agg,
                        l.ibot,
                        l.koleo
                    );
                }
                None => {
                    let _ = writeln!(md, "| {name} | 0 | | | | | |");
                }
            }
        }
        md.push_str("\nLoss values are from the last logged step.\n");
    }
    md
}

pub fn run(metrics: &[(String, PathBuf)], evals: &[(String, PathBuf)], out: &Path, dry_run: bool) -> Result<(), Failure> {
    if metrics.is_empty() && evals.is_empty() {
        return Err(Failure::Validation("report needs at least one --metrics or --eval input".into()));
    }
    let runs: Vec<(String, Vec<StepMetrics>)> = metrics
        .iter()
        .map(|(n, p)| Ok((n.clone(), read_metrics(p)?)))
        .collect::<Result<_, Failure>>()?;
    let reports: Vec<(String, EvalReport)> = evals
        .iter()
        .map(|(n, p)| Ok((n.clone(), read_report(p)?)))
        .collect::<Result<_, Failure>>()?;
    if dry_run {
        info!("dry run: {} metrics files, {} reports", runs.len(), reports.len());
        return Ok(());
    }

    let mut files: Vec<(PathBuf, String)> = Vec::new();
    if !runs.is_empty() {
        let series: Vec<(String, Vec<(f64, f64)>)> = runs
            .iter()
            .map(|(n, m)| (n.clone(), m.iter().map(|l| (l.step as f64, l.total)).collect()))
            .collect();
        files.push((out.join("loss.svg"), line_chart_svg("Training loss", "step", "total loss", &series)));
        for (name, m) in &runs {
            let term = |f: fn(&StepMetrics) -> f64| m.iter().map(|l| (l.step as f64, f(l))).collect::<Vec<_>>();
            let series = vec![
                ("dino".to_string(), term(|l| l.dino)),
                ("local_agg".to_string(), term(|l| l.local_agg)),
                ("ibot".to_string(), term(|l| l.ibot)),
                ("koleo".to_string(), term(|l| l.koleo)),
            ];
            let title = format!("Loss terms: {name}");
            files.push((
                out.join(format!("loss_terms_{}.svg", file_stem(name))),
                line_chart_svg(&title, "step", "loss", &series),
            ));
        }
    }
    if !reports.is_empty() {
        let bars: Vec<(String, f64)> = reports
            .iter()
            .map(|(n, r)| (n.clone(), 100.0 * r.within_mean_accuracy.or(r.cross_mean_accuracy).unwrap_or(0.0)))
            .collect();
        files.push((out.join("accuracy.svg"), bar_chart_svg("kNN accuracy", "accuracy (%)", &bars)));
    }
    files.push((out.join(SUMMARY_FILE), summary(&runs, &reports)));

    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    for (path, text) in &files {
        std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
        info!("wrote {}", path.display());
    }
    Ok(())
}
