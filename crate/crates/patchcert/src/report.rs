//! Line-delimited structured-text reports.
//!
//! Every record is one line of space-separated `key=value` fields; a report
//! ends with a `# summary` block of aggregate accuracies, so files stay both
//! grep-able and machine-parseable.

use crate::attack::{AttackRecord, AttackSummary};
use crate::certify::{CertRecord, CertSummary};
use crate::error::Result;
use crate::train::EpochMetrics;
use std::io::Write;

pub fn cert_record_line(r: &CertRecord) -> String {
    let anchor = match r.anchor {
        Some((row, col)) => format!("{row},{col}"),
        None => "-".to_string(),
    };
    format!(
        "image={} label={} pred={} certified={} min_margin={:.6} anchor={} partial={}",
        r.index, r.label, r.predicted, r.certified, r.min_margin, anchor, r.partial
    )
}

pub fn write_cert_report(mut out: impl Write, s: &CertSummary) -> Result<()> {
    for r in &s.records {
        writeln!(out, "{}", cert_record_line(r))?;
    }
    writeln!(out, "# summary")?;
    writeln!(out, "images={}", s.records.len())?;
    writeln!(out, "clean_accuracy={:.4}", s.clean_accuracy)?;
    writeln!(out, "certified_accuracy={:.4}", s.certified_accuracy)?;
    Ok(())
}

pub fn attack_record_line(r: &AttackRecord) -> String {
    format!(
        "image={} anchor={},{} success={} final_loss={:.6} pred={}",
        r.index, r.anchor.0, r.anchor.1, r.success, r.final_loss, r.prediction
    )
}

pub fn write_attack_report(mut out: impl Write, s: &AttackSummary, stride: usize) -> Result<()> {
    for r in &s.records {
        writeln!(out, "{}", attack_record_line(r))?;
    }
    writeln!(out, "# summary")?;
    writeln!(out, "stride={stride}")?;
    writeln!(out, "clean_accuracy={:.4}", s.clean_accuracy)?;
    writeln!(out, "empirical_adversarial_accuracy={:.4}", s.adversarial_accuracy)?;
    Ok(())
}

pub fn metric_line(m: &EpochMetrics) -> String {
    let cert = match m.cert_acc {
        Some(c) => format!("{c:.4}"),
        None => "-".to_string(),
    };
    format!(
        "epoch={} eps={:.4} lr={:.6} loss={:.6} clean_acc={:.4} cert_acc_sample={}",
        m.epoch, m.eps, m.lr, m.loss, m.clean_acc, cert
    )
}

pub fn write_metrics(mut out: impl Write, metrics: &[EpochMetrics]) -> Result<()> {
    for m in metrics {
        writeln!(out, "{}", metric_line(m))?;
    }
    Ok(())
}
