//! Report assembly: attach clustering metrics and the config fingerprint to
//! an evaluation report, render the aligned text tables, and read/write the
//! machine-readable JSON artifact.

use crate::error::{Error, Result};
use crate::eval::fdd::{ClusteringMetrics, FddReport};
use std::fmt::Write as FmtWrite;

/// Finalize a report: attach clustering metrics (when cluster assignments
/// were also scored) and stamp the configuration fingerprint.
pub fn build_report(
    mut report: FddReport,
    clustering: Option<ClusteringMetrics>,
    config_fingerprint: &str,
) -> FddReport {
    report.clustering = clustering;
    report.config_fingerprint = config_fingerprint.to_string();
    report
}

fn fmt_rate(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt_opt_rate(v: Option<f64>) -> String {
    v.map(fmt_rate).unwrap_or_else(|| "n/a".to_string())
}

/// Render the report as aligned text: a per-fault TPR/FPR block, the
/// aggregate block (exactly Detection TPR, Detection FPR, CDR, ADD), and a
/// clustering block when those metrics are present. Rates use two decimals.
pub fn render_report(report: &FddReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "fault detection and diagnosis report (schema {})",
        report.schema_version
    );
    if !report.config_fingerprint.is_empty() {
        let _ = writeln!(out, "config fingerprint: {}", report.config_fingerprint);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "per-fault metrics");
    let _ = writeln!(out, "state   TPR   FPR  support");
    for fm in &report.per_fault {
        let _ = writeln!(
            out,
            "{:>5}  {:>4}  {:>4}  {:>7}",
            fm.state,
            fmt_opt_rate(fm.tpr),
            fmt_rate(fm.fpr),
            fm.support
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "aggregate");
    let _ = writeln!(out, "Detection TPR  {}", fmt_rate(report.detection_tpr));
    let _ = writeln!(out, "Detection FPR  {}", fmt_rate(report.detection_fpr));
    let _ = writeln!(out, "CDR            {}", fmt_opt_rate(report.cdr));
    let add = match (report.add_samples, report.add_minutes) {
        (Some(s), Some(m)) => format!("{s:.2} samples / {m:.2} min"),
        _ => "n/a (no faulty run detected)".to_string(),
    };
    let _ = writeln!(out, "ADD            {add}");
    if let Some(cl) = &report.clustering {
        let _ = writeln!(out);
        let _ = writeln!(out, "clustering");
        let _ = writeln!(out, "ACC  {}", fmt_rate(cl.acc));
        let _ = writeln!(out, "NMI  {}", fmt_rate(cl.nmi));
        let _ = writeln!(out, "ARI  {}", fmt_rate(cl.ari));
    }
    out
}

/// Write the machine-readable report (JSON, lossless floats) and the
/// rendered table next to each other.
pub fn write_report_files(
    report: &FddReport,
    json_path: &std::path::Path,
    text_path: &std::path::Path,
) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(json_path, json.as_bytes()).map_err(|e| Error::io(json_path, e))?;
    std::fs::write(text_path, render_report(report).as_bytes())
        .map_err(|e| Error::io(text_path, e))?;
    Ok(())
}

/// Read a JSON report back, verifying the schema version.
pub fn read_report_json(path: &std::path::Path) -> Result<FddReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: FddReport = serde_json::from_str(&text)?;
    if report.schema_version != crate::eval::fdd::REPORT_SCHEMA_VERSION {
        return Err(Error::IncompatibleArtifact(format!(
            "report {} has schema {}, this build reads schema {}",
            path.display(),
            report.schema_version,
            crate::eval::fdd::REPORT_SCHEMA_VERSION
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::fdd::{FaultMetrics, REPORT_SCHEMA_VERSION};

    fn sample_report() -> FddReport {
        FddReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config_fingerprint: "deadbeef01234567".into(),
            n_states: 3,
            normal_state: 0,
            per_fault: vec![
                FaultMetrics {
                    state: 1,
                    tpr: Some(1.0 / 3.0),
                    fpr: 0.0125,
                    support: 120,
                },
                FaultMetrics {
                    state: 2,
                    tpr: None,
                    fpr: 0.0,
                    support: 0,
                },
            ],
            detection_tpr: 0.9174311926605505,
            detection_fpr: 0.042,
            cdr: Some(0.875),
            add_samples: Some(12.5),
            add_minutes: Some(37.5),
            clustering: Some(ClusteringMetrics {
                acc: 0.8066666666666666,
                nmi: 2.0 / 3.0,
                ari: 0.5900990099009901,
            }),
        }
    }

    #[test]
    fn report_roundtrips_losslessly_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let report = sample_report();
        let json = dir.path().join("report.json");
        let text = dir.path().join("report.txt");
        write_report_files(&report, &json, &text).unwrap();
        let back = read_report_json(&json).unwrap();
        assert_eq!(back, report);

        // A future-schema report is refused rather than misread.
        let mut bumped = report.clone();
        bumped.schema_version = REPORT_SCHEMA_VERSION + 1;
        std::fs::write(&json, serde_json::to_string(&bumped).unwrap()).unwrap();
        assert!(read_report_json(&json).is_err());
    }

    #[test]
    fn rates_render_with_two_decimals() {
        let text = render_report(&sample_report());
        assert!(text.contains("0.92"), "detection TPR rounded: {text}");
        assert!(text.contains("0.04"), "detection FPR rounded: {text}");
        assert!(text.contains("0.33"), "per-fault TPR rounded: {text}");
        assert!(text.contains("12.50 samples / 37.50 min"), "{text}");
        assert!(text.contains("n/a"), "absent TPR renders as n/a: {text}");
    }

    #[test]
    fn aggregate_block_contains_exactly_the_four_aggregate_lines() {
        let text = render_report(&sample_report());
        let mut lines = text.lines().skip_while(|l| *l != "aggregate");
        assert_eq!(lines.next(), Some("aggregate"));
        let block: Vec<&str> = lines.take_while(|l| !l.is_empty()).collect();
        let keys: Vec<&str> = block
            .iter()
            .map(|l| l.split("  ").next().unwrap().trim())
            .collect();
        assert_eq!(keys, vec!["Detection TPR", "Detection FPR", "CDR", "ADD"]);
    }

    #[test]
    fn missing_delay_renders_as_not_available() {
        let mut report = sample_report();
        report.add_samples = None;
        report.add_minutes = None;
        report.cdr = None;
        let text = render_report(&report);
        assert!(text.contains("ADD            n/a (no faulty run detected)"));
        assert!(text.contains("CDR            n/a"));
    }
}
