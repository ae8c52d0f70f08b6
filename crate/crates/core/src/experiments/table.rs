//! Comparison tables in markdown and CSV, with best and second-best values flagged per column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dsc,
    Iou,
    Hd95,
}

impl Metric {
    pub fn header(self) -> &'static str {
        match self {
            Metric::Dsc => "DSC",
            Metric::Iou => "IoU",
            Metric::Hd95 => "HD95",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Hd95)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Measured,
    PublishedReference,
    NotImplemented,
}

impl RowKind {
    fn source(self) -> &'static str {
        match self {
            RowKind::Measured => "measured",
            RowKind::PublishedReference => super::references::PUBLISHED_REFERENCE,
            RowKind::NotImplemented => "not implemented",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub kind: RowKind,
    /// Position in the declared row order; ties keep input order.
    pub order: usize,
    pub values: Vec<(Metric, f64)>,
}

impl TableRow {
    pub fn measured(label: impl Into<String>, order: usize, values: Vec<(Metric, f64)>) -> Self {
        TableRow {
            label: label.into(),
            kind: RowKind::Measured,
            order,
            values,
        }
    }

    fn get(&self, m: Metric) -> Option<f64> {
        self.values.iter().find(|(k, _)| *k == m).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    Best,
    Second,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmittedTable {
    pub rows: Vec<TableRow>,
    pub metrics: Vec<Metric>,
    /// Per row, per metric.
    pub flags: Vec<Vec<Option<Flag>>>,
    pub markdown: String,
    pub csv: String,
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

/// Lays out `rows` in declared order. Flags are computed among measured rows only and need at
/// least two of them; reference and not-implemented rows are listed but never flagged.
pub fn emit_table(title: &str, rows: &[TableRow]) -> Result<EmittedTable> {
    let first = rows
        .iter()
        .find(|r| r.kind == RowKind::Measured)
        .ok_or_else(|| Error::Report("a table needs at least one measured row".into()))?;
    let metrics: Vec<Metric> = first.values.iter().map(|(m, _)| *m).collect();
    if metrics.is_empty() {
        return Err(Error::Report("measured rows carry no metrics".into()));
    }
    for r in rows.iter().filter(|r| r.kind == RowKind::Measured) {
        let ms: Vec<Metric> = r.values.iter().map(|(m, _)| *m).collect();
        if ms != metrics {
            return Err(Error::Report(format!(
                "row `{}` has metrics {ms:?}, expected {metrics:?}",
                r.label
            )));
        }
        if let Some((m, v)) = r.values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Report(format!("row `{}` has non-finite {}: {v}", r.label, m.header())));
        }
    }
    let mut rows = rows.to_vec();
    rows.sort_by_key(|r| r.order);

    let measured = rows.iter().filter(|r| r.kind == RowKind::Measured).count();
    let mut flags = vec![vec![None; metrics.len()]; rows.len()];
    if measured >= 2 {
        for (mi, &m) in metrics.iter().enumerate() {
            let mut distinct: Vec<f64> = rows
                .iter()
                .filter(|r| r.kind == RowKind::Measured)
                .filter_map(|r| r.get(m))
                .collect();
            distinct.sort_by(|a, b| if m.higher_is_better() { b.total_cmp(a) } else { a.total_cmp(b) });
            distinct.dedup();
            for (ri, r) in rows.iter().enumerate().filter(|(_, r)| r.kind == RowKind::Measured) {
                let v = r.get(m);
                flags[ri][mi] = if v == distinct.first().copied() {
                    Some(Flag::Best)
                } else if distinct.len() > 1 && v == distinct.get(1).copied() {
                    Some(Flag::Second)
                } else {
                    None
                };
            }
        }
    }

    let mut md = format!("### {title}\n\n| Method |");
    for m in &metrics {
        md.push_str(&format!(" {}{} |", m.header(), if m.higher_is_better() { " ↑" } else { " ↓" }));
    }
    md.push_str(" Source |\n|---|");
    md.push_str(&"---:|".repeat(metrics.len()));
    md.push_str("---|\n");
    let mut csv = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "source".to_string()];
    header.extend(metrics.iter().map(|m| m.header().to_lowercase()));
    header.push("flags".into());
    csv.write_record(&header)?;
    for (ri, r) in rows.iter().enumerate() {
        md.push_str(&format!("| {} |", r.label));
        let mut rec = vec![r.label.clone(), r.kind.source().to_string()];
        let mut flag_names = Vec::new();
        for (mi, &m) in metrics.iter().enumerate() {
            let text = if r.kind == RowKind::NotImplemented { "-".to_string() } else { fmt(r.get(m)) };
            let cell = match flags[ri][mi] {
                Some(Flag::Best) => {
                    flag_names.push(format!("best_{}", m.header().to_lowercase()));
                    format!("**{text}**")
                }
                Some(Flag::Second) => {
                    flag_names.push(format!("second_{}", m.header().to_lowercase()));
                    format!("<u>{text}</u>")
                }
                None => text.clone(),
            };
            md.push_str(&format!(" {cell} |"));
            rec.push(if text == "-" { String::new() } else { text });
        }
        md.push_str(&format!(" {} |\n", r.kind.source()));
        rec.push(flag_names.join(";"));
        csv.write_record(&rec)?;
    }
    let csv = String::from_utf8(csv.into_inner().map_err(|e| Error::Report(e.to_string()))?)
        .map_err(|e| Error::Report(e.to_string()))?;
    Ok(EmittedTable {
        rows,
        metrics,
        flags,
        markdown: md,
        csv,
    })
}
