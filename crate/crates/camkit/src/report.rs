//! Evaluation report serialization (`report.json`) and the radar-plot SVG.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::MetricsReport;

/// The on-disk report: scores plus the resolved configuration and the code
/// version that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub metrics: MetricsReport,
    pub config: BTreeMap<String, String>,
    pub code_version: String,
}

/// `git describe` of the working tree when available, falling back to the
/// crate version. Stable within a checkout, so deterministic runs agree.
pub fn code_version() -> String {
    let git = Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output();
    match git {
        Ok(out) if out.status.success() => {
            let v = String::from_utf8_lossy(&out.stdout).trim().to_string();
            if v.is_empty() {
                env!("CARGO_PKG_VERSION").to_string()
            } else {
                v
            }
        }
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), report)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Nine-axis radar plot of the per-task F1 scores. Returns an SVG document.
pub fn radar_svg(report: &MetricsReport) -> String {
    const TASKS: [&str; 9] = ["W1", "W2", "H1", "H2", "H3", "C1", "C2", "C3", "C4"];
    let size = 420.0f64;
    let center = size / 2.0;
    let radius = size * 0.36;
    let angle = |i: usize| -> f64 {
        std::f64::consts::TAU * i as f64 / TASKS.len() as f64 - std::f64::consts::FRAC_PI_2
    };
    let point = |i: usize, r: f64| -> (f64, f64) {
        let a = angle(i);
        (center + r * a.cos(), center + r * a.sin())
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n"
    ));
    for ring in [0.25, 0.5, 0.75, 1.0] {
        let pts: Vec<String> = (0..TASKS.len())
            .map(|i| {
                let (x, y) = point(i, radius * ring);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        svg.push_str(&format!(
            "  <polygon points=\"{}\" fill=\"none\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n",
            pts.join(" ")
        ));
    }
    for (i, task) in TASKS.iter().enumerate() {
        let (x, y) = point(i, radius);
        svg.push_str(&format!(
            "  <line x1=\"{center}\" y1=\"{center}\" x2=\"{x:.2}\" y2=\"{y:.2}\" \
             stroke=\"#cccccc\" stroke-width=\"1\"/>\n"
        ));
        let (lx, ly) = point(i, radius + 22.0);
        svg.push_str(&format!(
            "  <text x=\"{lx:.2}\" y=\"{ly:.2}\" font-size=\"13\" font-family=\"sans-serif\" \
             text-anchor=\"middle\" dominant-baseline=\"middle\">{task}</text>\n"
        ));
    }
    let scores: Vec<String> = (0..TASKS.len())
        .map(|i| {
            let f1 = report.per_task_f1.get(TASKS[i]).copied().unwrap_or(0.0);
            let (x, y) = point(i, radius * f1.clamp(0.0, 1.0));
            format!("{x:.2},{y:.2}")
        })
        .collect();
    svg.push_str(&format!(
        "  <polygon points=\"{}\" fill=\"#3b7bbf55\" stroke=\"#3b7bbf\" stroke-width=\"2\"/>\n",
        scores.join(" ")
    ));
    svg.push_str(&format!(
        "  <text x=\"{center}\" y=\"{:.2}\" font-size=\"15\" font-family=\"sans-serif\" \
         text-anchor=\"middle\">CPS {:.3}</text>\n",
        size - 12.0,
        report.cps
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> MetricsReport {
        let per_task_f1: BTreeMap<String, f64> = [
            ("W1", 0.9),
            ("W2", 0.861),
            ("H1", 0.95),
            ("H2", 0.932),
            ("H3", 0.551),
            ("C1", 0.9),
            ("C2", 0.484),
            ("C3", 0.123),
            ("C4", 0.112),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
        let cps = crate::eval::cps(&per_task_f1).unwrap();
        MetricsReport {
            per_task_f1,
            per_class_f1: BTreeMap::new(),
            counts: BTreeMap::new(),
            cps,
            leak_collisions: 0,
        }
    }

    #[test]
    fn report_roundtrips_and_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path1 = dir.path().join("a.json");
        let path2 = dir.path().join("b.json");
        let report = RunReport {
            metrics: sample_report(),
            config: [("train.lr".to_string(), "0.001".to_string())].into(),
            code_version: "test".into(),
        };
        write_report(&path1, &report).unwrap();
        write_report(&path2, &report).unwrap();
        assert_eq!(
            std::fs::read(&path1).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        let back = read_report(&path1).unwrap();
        assert_eq!(back.metrics.cps, report.metrics.cps);
        back.metrics.verify_cps().unwrap();
    }

    #[test]
    fn radar_svg_contains_every_axis_and_cps() {
        let svg = radar_svg(&sample_report());
        for task in ["W1", "W2", "H1", "H2", "H3", "C1", "C2", "C3", "C4"] {
            assert!(svg.contains(task));
        }
        assert!(svg.contains("CPS 0.614"));
        assert!(svg.starts_with("<svg"));
    }
}
