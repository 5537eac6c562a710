//! JSON and CSV rendering shared by the CLI and the API server.
//!
//! JSON maps are key-sorted, so identical inputs give identical bytes.

use serde::Serialize;

use crate::metrics::{ConfusionReport, MetricReport, MetricValue, Support};
use crate::query::FilterResult;

pub const CSV_HEADER: [&str; 6] = ["metric", "params", "group", "value", "support", "flags"];

/// One CSV line: metric, params, group, value, support, flags.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub metric: String,
    pub params: String,
    pub group: String,
    pub value: String,
    pub support: String,
    pub flags: String,
}

pub trait CsvRows {
    fn csv_rows(&self) -> Vec<CsvRow>;
}

fn join_params(params: &std::collections::BTreeMap<String, String>) -> String {
    params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

fn value_cell(v: MetricValue) -> String {
    match v {
        MetricValue::Defined(x) => x.to_string(),
        MetricValue::Undefined => "undefined".into(),
    }
}

fn flags_cell(flags: &[String], support: &Support) -> String {
    let mut out: Vec<String> = flags.to_vec();
    out.extend(support.excluded.iter().map(|(k, n)| format!("excluded:{k}={n}")));
    out.join(";")
}

impl CsvRows for MetricReport {
    fn csv_rows(&self) -> Vec<CsvRow> {
        let params = join_params(&self.params);
        let row = |group: &str, r: &MetricReport| CsvRow {
            metric: r.metric.clone(),
            params: params.clone(),
            group: group.to_string(),
            value: value_cell(r.value),
            support: r.support.evaluable.to_string(),
            flags: flags_cell(&r.flags, &r.support),
        };
        let mut rows = vec![row("", self)];
        rows.extend(self.groups.iter().map(|g| row(&g.group, &g.report)));
        rows
    }
}

impl CsvRows for ConfusionReport {
    fn csv_rows(&self) -> Vec<CsvRow> {
        let params = join_params(&self.params);
        let flags = flags_cell(&self.flags, &self.support);
        self.pairs
            .iter()
            .map(|p| CsvRow {
                metric: self.metric.clone(),
                params: params.clone(),
                group: format!("{}|{}", p.a, p.b),
                value: p.score.to_string(),
                support: p.co_support.to_string(),
                flags: flags.clone(),
            })
            .collect()
    }
}

impl CsvRows for FilterResult {
    fn csv_rows(&self) -> Vec<CsvRow> {
        let params = format!("query={}", self.query);
        let mut rows = vec![CsvRow {
            metric: "query".into(),
            params: params.clone(),
            group: String::new(),
            value: self.fraction.to_string(),
            support: self.total.to_string(),
            flags: format!("matches={}", self.matches.len()),
        }];
        rows.extend(self.matches.iter().map(|id| CsvRow {
            metric: "query".into(),
            params: params.clone(),
            group: id.clone(),
            value: "1".into(),
            support: "1".into(),
            flags: String::new(),
        }));
        rows
    }
}

pub fn to_csv(rows: &[CsvRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([&r.metric, &r.params, &r.group, &r.value, &r.support, &r.flags])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Pretty JSON followed by a newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}
