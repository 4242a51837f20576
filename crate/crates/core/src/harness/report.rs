use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use super::{write_atomic, AblationReport, ExperimentConfig, MatrixReport, PretrainSummary, SweepReport, TableRow};
use crate::error::{Error, Result};
use crate::sparsify::StrategyKind;

fn find_files(root: &Path, name: &str, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(root) else { return };
    let mut entries: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_files(&p, name, out);
        } else if p.file_name().is_some_and(|f| f == name) {
            out.push(p);
        }
    }
}

fn read<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

fn pm(mean: f64, std: f64) -> String {
    if mean.is_nan() {
        "failed".into()
    } else {
        format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
    }
}

fn mark(cell: String, rank: Option<usize>) -> String {
    match rank {
        Some(1) => format!("**{cell}**"),
        Some(2) => format!("_{cell}_"),
        _ => cell,
    }
}

fn order_key(r: &TableRow) -> (bool, usize) {
    let pos = StrategyKind::ALL
        .iter()
        .position(|k| k.name() == r.strategy)
        .unwrap_or(usize::MAX);
    (r.all_shot, pos)
}

fn matrix_table(m: &MatrixReport, out: &mut String) {
    let mut shots: Vec<usize> = m.rows.iter().filter(|r| !r.all_shot).map(|r| r.shots).collect();
    shots.sort_unstable();
    shots.dedup();
    let task = m.config.task;
    let _ = writeln!(out, "## Strategy comparison ({task}, {} seeds)\n", m.config.seeds.len());
    let _ = write!(out, "| Method |");
    for k in &shots {
        let _ = write!(out, " {k}-shot DSC | {k}-shot NSD |");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "|---|{}", "---|---|".repeat(shots.len()));
    let mut strategies: Vec<&TableRow> = m.rows.iter().filter(|r| r.shots == shots[0] || r.all_shot).collect();
    strategies.sort_by_key(|r| order_key(r));
    for s in strategies {
        if s.all_shot {
            let _ = write!(out, "| all-shot ({}, {}) |", s.shots, s.strategy);
            let _ = writeln!(
                out,
                " {} | {} |{}",
                pm(s.dsc_mean, s.dsc_std),
                pm(s.nsd_mean, s.nsd_std),
                " | |".repeat(shots.len() - 1)
            );
            continue;
        }
        let _ = write!(out, "| {} |", s.strategy);
        for k in &shots {
            match m
                .rows
                .iter()
                .find(|r| r.strategy == s.strategy && r.shots == *k && !r.all_shot)
            {
                Some(r) => {
                    let _ = write!(
                        out,
                        " {} | {} |",
                        mark(pm(r.dsc_mean, r.dsc_std), r.dsc_rank),
                        mark(pm(r.nsd_mean, r.nsd_std), r.nsd_rank)
                    );
                }
                None => {
                    let _ = write!(out, " | |");
                }
            }
        }
        let _ = writeln!(out);
    }
    if m.failed > 0 {
        let _ = writeln!(out, "\n{} cell(s) failed:", m.failed);
        for c in m.cells.iter().filter(|c| c.error.is_some()) {
            let _ = writeln!(
                out,
                "- {} {}-shot: {}",
                c.label(),
                c.shots,
                c.error.as_deref().unwrap_or("")
            );
        }
    }
    let _ = writeln!(out);
}

fn ablation_table(a: &AblationReport, out: &mut String) {
    let _ = writeln!(
        out,
        "## Sparsification ablation ({}, {}-shot)\n",
        a.config.task, a.config.shots
    );
    let _ = writeln!(out, "| Strategy | DSC | NSD | Iteration duration (s) |");
    let _ = writeln!(out, "|---|---|---|---|");
    for r in &a.rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.4} |",
            r.strategy,
            pm(r.dsc_mean, r.dsc_std),
            pm(r.nsd_mean, r.nsd_std),
            r.iter_duration_mean_s
        );
    }
    let _ = writeln!(
        out,
        "\nDGST / Full iteration duration: {:.3}\n",
        a.dgst_full_duration_ratio
    );
}

fn sweep_table(s: &SweepReport, out: &mut String) {
    let _ = writeln!(
        out,
        "## Gamma sensitivity ({}, {}-shot)\n",
        s.config.task, s.config.shots
    );
    let _ = writeln!(out, "| Series | DSC | NSD |");
    let _ = writeln!(out, "|---|---|---|");
    for p in &s.points {
        let _ = writeln!(
            out,
            "| {} | {} | {} |",
            p.series,
            pm(p.dsc_mean, p.dsc_std),
            pm(p.nsd_mean, p.nsd_std)
        );
    }
    let _ = writeln!(out, "\nLargest gamma approaches Full: {}\n", s.approaches_full);
}

/// Markdown summary of every result file under `root`.
pub fn render_report(root: &Path) -> Result<String> {
    let mut out = String::from("# Results\n\n");
    let mut found = 0;
    let summary = root.join("foundation").join("summary.json");
    if summary.exists() {
        let p: PretrainSummary = read(&summary)?;
        found += 1;
        let _ = writeln!(out, "## Foundation model\n");
        let _ = writeln!(
            out,
            "Source test DSC {}, loss {:.4} -> {:.4} over {} iterations.",
            pm(p.source_test.dsc_mean, p.source_test.dsc_std),
            p.first_loss,
            p.final_loss,
            p.iterations
        );
        for (task, m) in &p.zero_shot {
            let _ = writeln!(out, "Zero-shot {task} DSC {}.", pm(m.dsc_mean, m.dsc_std));
        }
        let _ = writeln!(out);
    }
    let mut files = Vec::new();
    find_files(&root.join("matrix"), "matrix.json", &mut files);
    for f in files.drain(..) {
        matrix_table(&read(&f)?, &mut out);
        found += 1;
    }
    find_files(&root.join("ablation"), "ablation.json", &mut files);
    for f in files.drain(..) {
        ablation_table(&read(&f)?, &mut out);
        found += 1;
    }
    find_files(&root.join("sweep"), "gamma.json", &mut files);
    for f in files.drain(..) {
        sweep_table(&read(&f)?, &mut out);
        found += 1;
    }
    if found == 0 {
        return Err(Error::Config(format!("no results found under {}", root.display())));
    }
    Ok(out)
}

/// Renders the report and writes `report.md` next to the results.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let root = cfg.output_root();
    let text = render_report(&root)?;
    write_atomic(&root.join("report.md"), text.as_bytes())?;
    Ok(text)
}
