//! CSV, JSONL and plain-text report emission.
//!
//! CSV and JSONL outputs contain no wall-clock values, so identical inputs
//! give byte-identical files.

use anyhow::{Context, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use lwpr2_core::metrics::MseSummary;
use lwpr2_core::sim::CHANNEL_NAMES;
use lwpr2_core::trainer::StepReport;

use crate::active::{ActiveReport, TelemetryRow};
use crate::bench::FlopTables;
use crate::protocols::MethodRow;
use crate::soak::SoakReport;

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ChannelRow<'a> {
    table: &'a str,
    method: &'a str,
    channel: &'a str,
    mse_raw: Option<f64>,
    mse_standardized: f64,
    count: u64,
}

fn channel_rows<'a>(table: &'a str, method: &'a str, s: &MseSummary) -> Vec<ChannelRow<'a>> {
    let mut rows: Vec<ChannelRow> = CHANNEL_NAMES
        .iter()
        .enumerate()
        .map(|(i, c)| ChannelRow { table, method, channel: c, mse_raw: Some(s.raw[i]), mse_standardized: s.standardized[i], count: s.count })
        .collect();
    rows.push(ChannelRow { table, method, channel: "Total MSE", mse_raw: None, mse_standardized: s.total, count: s.count });
    rows
}

/// Per-channel MSE rows for one or more named tables.
pub fn write_mse_tables(path: &Path, tables: &[(&str, &[MethodRow])]) -> Result<()> {
    let rows = tables.iter().flat_map(|(name, rows)| rows.iter().flat_map(move |r| channel_rows(name, &r.method, &r.summary)));
    write_rows(path, rows)
}

#[derive(Serialize)]
struct StepRow {
    step: u64,
    alpha: Option<f64>,
    mse_real: f64,
    mse_synth: Option<f64>,
    inner_product: Option<f64>,
}

pub fn write_steps(path: &Path, steps: &[StepReport]) -> Result<()> {
    write_rows(
        path,
        steps.iter().map(|s| StepRow { step: s.step, alpha: s.alpha, mse_real: s.mse_real, mse_synth: s.mse_synth, inner_product: s.inner_product }),
    )
}

#[derive(Serialize)]
struct LapRow<'a> {
    method: &'a str,
    trial: usize,
    lap: usize,
    time: f64,
    mse: f64,
    pairs: u64,
}

#[derive(Serialize)]
struct TrialRow<'a> {
    method: &'a str,
    trial: usize,
    outcome: &'a str,
    laps_completed: usize,
    mean_lap_time: Option<f64>,
    mse: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    method: &'a str,
    trials: usize,
    full_trials: usize,
    avg_laps_completed: f64,
    avg_trial_mse: f64,
    avg_lap_time: f64,
}

fn outcome_name(o: crate::active::Outcome) -> String {
    serde_json::to_value(o).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// `laps.csv`, `trials.csv` and `summary.csv` under `dir`.
pub fn write_active(dir: &Path, report: &ActiveReport) -> Result<()> {
    write_rows(
        &dir.join("laps.csv"),
        report.trials.iter().flat_map(|t| {
            t.laps.iter().map(move |l| LapRow { method: &t.method, trial: t.trial, lap: l.lap, time: l.time, mse: l.mse, pairs: l.pairs })
        }),
    )?;
    let outcomes: Vec<String> = report.trials.iter().map(|t| outcome_name(t.outcome)).collect();
    write_rows(
        &dir.join("trials.csv"),
        report.trials.iter().zip(&outcomes).map(|(t, o)| TrialRow {
            method: &t.method,
            trial: t.trial,
            outcome: o,
            laps_completed: t.laps_completed(),
            mean_lap_time: t.mean_lap_time(),
            mse: t.mse,
        }),
    )?;
    write_rows(
        &dir.join("summary.csv"),
        report.summary.iter().map(|s| SummaryRow {
            method: &s.method,
            trials: s.trials,
            full_trials: s.full_trials,
            avg_laps_completed: s.avg_laps_completed,
            avg_trial_mse: s.avg_trial_mse,
            avg_lap_time: s.avg_lap_time,
        }),
    )
}

/// One JSON object per controller update, tagged with its trial.
pub fn write_telemetry(path: &Path, report: &ActiveReport) -> Result<()> {
    #[derive(Serialize)]
    struct Tagged<'a> {
        method: &'a str,
        trial: usize,
        #[serde(flatten)]
        row: &'a TelemetryRow,
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in &report.trials {
        for row in &t.telemetry {
            serde_json::to_writer(&mut w, &Tagged { method: &t.method, trial: t.trial, row })?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SoakRow<'a> {
    kind: &'a str,
    label: String,
    value: f64,
    reference: Option<f64>,
}

pub fn write_soak(path: &Path, r: &SoakReport) -> Result<()> {
    let mut rows = Vec::new();
    for c in &r.restores {
        rows.push(SoakRow { kind: "restore", label: c.index.to_string(), value: c.restored_mse, reference: Some(c.control_mse) });
    }
    for s in &r.segments {
        rows.push(SoakRow { kind: "segment", label: format!("{}:{}", s.segment, s.regime), value: s.final_mse, reference: Some(s.pre_switch_mse) });
    }
    for (m, v) in &r.online {
        rows.push(SoakRow { kind: "online", label: m.clone(), value: *v, reference: None });
    }
    for (m, v) in &r.retention {
        rows.push(SoakRow { kind: "retention", label: m.clone(), value: *v, reference: None });
    }
    rows.push(SoakRow { kind: "bit_exact", label: String::new(), value: if r.bit_exact { 1.0 } else { 0.0 }, reference: None });
    write_rows(path, rows)
}

#[derive(Serialize)]
struct FlopRowOut<'a> {
    table: &'a str,
    row: String,
    fields: Option<u64>,
    flops: u64,
}

pub fn write_flops(path: &Path, t: &FlopTables) -> Result<()> {
    let mut rows = Vec::new();
    for l in &t.network {
        rows.push(FlopRowOut { table: "network", row: l.layer.to_string(), fields: None, flops: l.flops });
    }
    rows.push(FlopRowOut { table: "network", row: "Total".into(), fields: None, flops: t.network_total });
    for (name, bound) in [("lwpr", &t.lwpr), ("lwpr_reference", &t.reference)] {
        for r in &bound.rows {
            rows.push(FlopRowOut { table: name, row: r.output.clone(), fields: Some(r.fields), flops: r.flops });
        }
        rows.push(FlopRowOut { table: name, row: "Total".into(), fields: Some(bound.total_fields), flops: bound.total_flops });
    }
    write_rows(path, rows)
}

/// Channels down, methods across; standardized values with raw in parentheses.
pub fn format_mse_table(title: &str, rows: &[MethodRow]) -> String {
    let mut s = format!("{title}\n{:<20}", "");
    for r in rows {
        let _ = write!(s, "{:>22}", r.method);
    }
    s.push('\n');
    for (i, c) in CHANNEL_NAMES.iter().enumerate() {
        let _ = write!(s, "{c:<20}");
        for r in rows {
            let _ = write!(s, "{:>22}", format!("{:.4} ({:.4})", r.summary.standardized[i], r.summary.raw[i]));
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<20}", "Total MSE");
    for r in rows {
        let _ = write!(s, "{:>22}", format!("{:.4}", r.summary.total));
    }
    s.push('\n');
    s
}

pub fn format_active(r: &ActiveReport) -> String {
    let mut s = format!("{:<10}{:>18}{:>16}{:>16}{:>14}\n", "method", "avg laps done", "avg trial MSE", "avg lap time", "full trials");
    for m in &r.summary {
        let _ = writeln!(
            s,
            "{:<10}{:>18.2}{:>16.4}{:>16.2}{:>14}",
            m.method,
            m.avg_laps_completed,
            m.avg_trial_mse,
            m.avg_lap_time,
            format!("{}/{}", m.full_trials, m.trials)
        );
    }
    s
}

pub fn format_flops(t: &FlopTables) -> String {
    let mut s = String::from("network layer        FLOPs\n");
    for l in &t.network {
        let _ = writeln!(s, "{:<20}{:>6}", l.layer, l.flops);
    }
    let _ = writeln!(s, "{:<20}{:>6}\n", "Total", t.network_total);
    for (title, b) in [("LWPR (initialized)", &t.lwpr), ("LWPR (reference counts)", &t.reference)] {
        let _ = writeln!(s, "{title:<22}{:>8}{:>10}", "fields", "FLOPs");
        for r in &b.rows {
            let _ = writeln!(s, "{:<22}{:>8}{:>10}", r.output, r.fields, r.flops);
        }
        let _ = writeln!(s, "{:<22}{:>8}{:>10}\n", "Total", b.total_fields, b.total_flops);
    }
    s
}

pub fn format_soak(r: &SoakReport) -> String {
    let mut s = format!("soak: {} pairs, restores bit-exact: {}\n", r.pairs, r.bit_exact);
    for c in &r.restores {
        let _ = writeln!(s, "  restore at {:>6}: {:.4} vs control {:.4}", c.index, c.restored_mse, c.control_mse);
    }
    for g in &r.segments {
        let _ = writeln!(s, "  segment {} ({}): final {:.4}, before switch {:.4}", g.segment, g.regime, g.final_mse, g.pre_switch_mse);
    }
    for (m, v) in &r.retention {
        let _ = writeln!(s, "  retention {m}: {v:.4}");
    }
    s
}
