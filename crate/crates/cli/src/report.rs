// SPDX-License-Identifier: Apache-2.0

//! Per-layer, per-strategy token success table built from telemetry
//! JSON-lines files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use evf_core::{LayerTelemetry, Strategy};

use crate::error::{CliError, CliResult};

/// Success rates closer than this are reported as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportRow {
    pub strategy: Option<Strategy>,
    pub layer: usize,
    pub records: usize,
    pub tokens: usize,
    pub accepted: usize,
    pub image_total: usize,
    pub image_accepted: usize,
    pub text_total: usize,
    pub text_accepted: usize,
}

impl ReportRow {
    pub fn success_rate(&self) -> f64 {
        self.accepted as f64 / self.tokens as f64
    }

    fn rate(accepted: usize, total: usize) -> String {
        if total == 0 {
            String::new()
        } else {
            format!("{:.6}", accepted as f64 / total as f64)
        }
    }
}

pub fn read_telemetry(paths: &[impl AsRef<Path>]) -> CliResult<Vec<LayerTelemetry>> {
    let mut out = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec = serde_json::from_str(line)
                .map_err(|e| CliError::Validation(format!("{} line {}: {e}", path.display(), i + 1)))?;
            out.push(rec);
        }
    }
    Ok(out)
}

/// Token-weighted totals per `(layer, strategy)`, ordered by layer then strategy.
pub fn aggregate(records: &[LayerTelemetry]) -> CliResult<Vec<ReportRow>> {
    if records.is_empty() {
        return Err(CliError::Validation("telemetry report: no records in the given files".into()));
    }
    let mut rows: BTreeMap<(usize, usize), ReportRow> = BTreeMap::new();
    for r in records {
        let rank = Strategy::ALL.iter().position(|&s| s == r.strategy).expect("known strategy");
        let row = rows.entry((r.layer, rank)).or_insert_with(|| ReportRow {
            strategy: Some(r.strategy),
            layer: r.layer,
            ..Default::default()
        });
        let s = &r.stats;
        row.records += 1;
        row.tokens += s.num_tokens;
        row.accepted += s.loads.language + s.loads.vision;
        row.image_total += s.image.total;
        row.image_accepted += s.image.accepted;
        row.text_total += s.text.total;
        row.text_accepted += s.text.accepted;
    }
    Ok(rows.into_values().collect())
}

/// Strategies of one layer from best to worst success, e.g. `img_gbpr>gbpr=random`.
pub fn ordering(rows: &[&ReportRow]) -> String {
    let mut sorted: Vec<&ReportRow> = rows.to_vec();
    sorted.sort_by(|a, b| b.success_rate().total_cmp(&a.success_rate()));
    let mut out = String::new();
    for (i, r) in sorted.iter().enumerate() {
        if i > 0 {
            let tie = (sorted[i - 1].success_rate() - r.success_rate()).abs() <= TIE_TOLERANCE;
            out.push(if tie { '=' } else { '>' });
        }
        out.push_str(r.strategy.map_or("?", Strategy::name));
    }
    out
}

pub const CSV_HEADER: &str =
    "layer,strategy,records,tokens,success_rate,drop_rate,image_success_rate,text_success_rate,ordering";

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let same_layer: Vec<&ReportRow> = rows.iter().filter(|o| o.layer == r.layer).collect();
        let success = r.success_rate();
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{},{},{}\n",
            r.layer,
            r.strategy.map_or("?", Strategy::name),
            r.records,
            r.tokens,
            success,
            1.0 - success,
            ReportRow::rate(r.image_accepted, r.image_total),
            ReportRow::rate(r.text_accepted, r.text_total),
            ordering(&same_layer),
        ));
    }
    out
}
