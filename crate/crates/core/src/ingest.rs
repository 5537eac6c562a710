//! Parsers for hierarchy files, output mappings, instance evidence and
//! ground-truth labels.
//!
//! Instance and truth files are JSON Lines. Diagnostics carry 1-based line
//! numbers. Instance parsing is streaming: [`InstanceReader`] holds one
//! record at a time plus the set of ids seen so far.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dag::{AbstractionDag, HierarchyDoc, NodeIx, NodeSpec};
use crate::error::IngestError;

const NORMALIZED_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HierarchyFormat {
    Json,
    Tsv,
    Icd9,
}

impl HierarchyFormat {
    /// Picks a format from the file extension.
    pub fn detect(path: &Path) -> Result<Self, IngestError> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("json") => Ok(HierarchyFormat::Json),
            Some("tsv") | Some("txt") => Ok(HierarchyFormat::Tsv),
            _ => Err(IngestError::UnknownFormat(path.display().to_string())),
        }
    }
}

impl FromStr for HierarchyFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(HierarchyFormat::Json),
            "tsv" => Ok(HierarchyFormat::Tsv),
            "icd9" => Ok(HierarchyFormat::Icd9),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

/// Node and edge lists ready for [`AbstractionDag::build`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedHierarchy {
    pub nodes: Vec<NodeSpec>,
    /// (child, parent)
    pub edges: Vec<(String, String)>,
}

impl ParsedHierarchy {
    pub fn build(self) -> Result<AbstractionDag, IngestError> {
        Ok(AbstractionDag::build(self.nodes, self.edges)?)
    }
}

pub fn parse_hierarchy(text: &str, format: HierarchyFormat) -> Result<ParsedHierarchy, IngestError> {
    match format {
        HierarchyFormat::Json | HierarchyFormat::Icd9 => parse_hierarchy_json(text, format),
        HierarchyFormat::Tsv => parse_hierarchy_tsv(text),
    }
}

pub fn parse_hierarchy_file(path: &Path, format: Option<HierarchyFormat>) -> Result<ParsedHierarchy, IngestError> {
    let format = match format {
        Some(f) => f,
        None => HierarchyFormat::detect(path)?,
    };
    let text = std::fs::read_to_string(path)?;
    parse_hierarchy(&text, format)
}

fn parse_hierarchy_json(text: &str, format: HierarchyFormat) -> Result<ParsedHierarchy, IngestError> {
    if text.trim().is_empty() {
        return Err(IngestError::EmptyInput);
    }
    let doc: HierarchyDoc = serde_json::from_str(text).map_err(|e| IngestError::MalformedLine {
        line: e.line(),
        message: e.to_string(),
    })?;
    if doc.nodes.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    let mut out = ParsedHierarchy::default();
    for node in doc.nodes {
        for parent in &node.parents {
            out.edges.push((node.id.clone(), parent.clone()));
        }
        out.nodes.push(NodeSpec {
            id: node.id,
            name: node.name,
            codable: if format == HierarchyFormat::Icd9 || node.codable.is_some() {
                node.codable
            } else {
                None
            },
        });
    }
    Ok(out)
}

fn parse_hierarchy_tsv(text: &str) -> Result<ParsedHierarchy, IngestError> {
    let mut out = ParsedHierarchy::default();
    let mut seen = HashSet::new();
    let mut add = |out: &mut ParsedHierarchy, id: &str| {
        if seen.insert(id.to_string()) {
            out.nodes.push(NodeSpec::new(id));
        }
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let malformed = |message: &str| IngestError::MalformedLine {
            line: i + 1,
            message: message.to_string(),
        };
        match fields.as_slice() {
            [node] if !node.is_empty() => add(&mut out, node),
            [child, parent] if !child.is_empty() && !parent.is_empty() => {
                add(&mut out, child);
                add(&mut out, parent);
                out.edges.push((child.to_string(), parent.to_string()));
            }
            [_] | [_, _] => return Err(malformed("empty node id")),
            _ => return Err(malformed("expected `child<TAB>parent`")),
        }
    }
    if out.nodes.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    Ok(out)
}

/// How model outputs map onto DAG nodes.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputMapping {
    /// Output position i feeds the node at entry i; `None` drops that output.
    Positional(Arc<Vec<Option<NodeIx>>>),
    /// Sparse evidence keyed directly by node id.
    ByName,
}

#[derive(Debug, Serialize, Deserialize)]
struct MappingDoc {
    outputs: Vec<Option<String>>,
}

impl OutputMapping {
    /// Parses `{"outputs":["apple", null, ...]}`; `null` marks an output with no node.
    pub fn parse(text: &str, dag: &AbstractionDag) -> Result<Self, IngestError> {
        let doc: MappingDoc = serde_json::from_str(text).map_err(|e| IngestError::MalformedLine {
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_ids(doc.outputs.iter().map(|o| o.as_deref()), dag)
    }

    pub fn from_ids<'a>(ids: impl IntoIterator<Item = Option<&'a str>>, dag: &AbstractionDag) -> Result<Self, IngestError> {
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for id in ids {
            match id {
                None => entries.push(None),
                Some(id) => {
                    let ix = dag.get(id).ok_or_else(|| IngestError::UnknownMappedNode(id.to_string()))?;
                    if !seen.insert(ix) {
                        return Err(IngestError::DuplicateMapping(id.to_string()));
                    }
                    entries.push(Some(ix));
                }
            }
        }
        Ok(OutputMapping::Positional(Arc::new(entries)))
    }

    pub fn to_json(&self, dag: &AbstractionDag) -> Option<String> {
        match self {
            OutputMapping::Positional(entries) => {
                let doc = MappingDoc {
                    outputs: entries.iter().map(|e| e.map(|ix| dag.id(ix).to_string())).collect(),
                };
                Some(serde_json::to_string(&doc).expect("mapping serializes"))
            }
            OutputMapping::ByName => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceKind {
    Dense,
    Sparse,
    Labels,
}

impl EvidenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EvidenceKind::Dense => "dense",
            EvidenceKind::Sparse => "sparse",
            EvidenceKind::Labels => "labels",
        }
    }
}

impl fmt::Display for EvidenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvidenceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(EvidenceKind::Dense),
            "sparse" => Ok(EvidenceKind::Sparse),
            "labels" => Ok(EvidenceKind::Labels),
            other => Err(format!("unknown evidence kind `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Evidence {
    Dense {
        probs: Vec<f64>,
        outputs: Arc<Vec<Option<NodeIx>>>,
    },
    /// Sorted by node.
    Sparse(Vec<(NodeIx, f64)>),
    /// In file order.
    Labels(Vec<NodeIx>),
}

impl Evidence {
    pub fn kind(&self) -> EvidenceKind {
        match self {
            Evidence::Dense { .. } => EvidenceKind::Dense,
            Evidence::Sparse(_) => EvidenceKind::Sparse,
            Evidence::Labels(_) => EvidenceKind::Labels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub evidence: Evidence,
    pub truth: Option<NodeIx>,
}

impl InstanceRecord {
    /// Every node the evidence names, with its value (labels count 1).
    /// Zero entries are kept. Returns the mass of unmapped outputs too.
    pub fn node_values(&self) -> (Vec<(NodeIx, f64)>, f64) {
        match &self.evidence {
            Evidence::Dense { probs, outputs } => {
                let mut dropped = 0.0;
                let mut values = Vec::with_capacity(probs.len());
                for (p, target) in probs.iter().zip(outputs.iter()) {
                    match target {
                        Some(ix) => values.push((*ix, *p)),
                        None => dropped += p,
                    }
                }
                values.sort_unstable_by_key(|&(ix, _)| ix);
                (values, dropped)
            }
            Evidence::Sparse(values) => (values.clone(), 0.0),
            Evidence::Labels(labels) => {
                let mut values: Vec<(NodeIx, f64)> = labels.iter().map(|&ix| (ix, 1.0)).collect();
                values.sort_unstable_by_key(|&(ix, _)| ix);
                (values, 0.0)
            }
        }
    }

    /// Serializes to the instance JSON Lines format (no trailing newline).
    pub fn to_json_line(&self, dag: &AbstractionDag) -> String {
        let value = match &self.evidence {
            Evidence::Dense { probs, .. } => serde_json::json!({
                "instance_id": self.instance_id,
                "probs": probs,
            }),
            Evidence::Sparse(values) => {
                let map: BTreeMap<&str, f64> = values.iter().map(|&(ix, v)| (dag.id(ix).as_str(), v)).collect();
                serde_json::json!({ "instance_id": self.instance_id, "values": map })
            }
            Evidence::Labels(labels) => {
                let ids: Vec<&str> = labels.iter().map(|&ix| dag.id(ix).as_str()).collect();
                serde_json::json!({ "instance_id": self.instance_id, "labels": ids })
            }
        };
        value.to_string()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct InstanceOptions {
    /// Expected evidence kind; any kind is accepted when `None`.
    pub kind: Option<EvidenceKind>,
    /// Require dense vectors to sum to 1 within 1e-6.
    pub normalized: bool,
}

#[derive(Deserialize)]
struct RawInstance {
    instance_id: String,
    #[serde(default)]
    probs: Option<Vec<f64>>,
    #[serde(default)]
    values: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    labels: Option<Vec<String>>,
}

/// Streaming JSON Lines parser for instance evidence.
pub struct InstanceReader<'d, R> {
    reader: R,
    dag: &'d AbstractionDag,
    mapping: OutputMapping,
    options: InstanceOptions,
    seen: HashSet<String>,
    line_no: usize,
    buf: String,
    failed: bool,
}

impl<'d, R: BufRead> InstanceReader<'d, R> {
    pub fn new(reader: R, dag: &'d AbstractionDag, mapping: OutputMapping, options: InstanceOptions) -> Self {
        InstanceReader {
            reader,
            dag,
            mapping,
            options,
            seen: HashSet::new(),
            line_no: 0,
            buf: String::new(),
            failed: false,
        }
    }

    fn parse_line(&mut self, line: usize) -> Result<InstanceRecord, IngestError> {
        let raw: RawInstance = serde_json::from_str(self.buf.trim()).map_err(|e| IngestError::MalformedLine {
            line,
            message: e.to_string(),
        })?;
        let found = match (&raw.probs, &raw.values, &raw.labels) {
            (Some(_), None, None) => EvidenceKind::Dense,
            (None, Some(_), None) => EvidenceKind::Sparse,
            (None, None, Some(_)) => EvidenceKind::Labels,
            _ => {
                return Err(IngestError::MalformedLine {
                    line,
                    message: "expected exactly one of `probs`, `values`, `labels`".into(),
                })
            }
        };
        if let Some(expected) = self.options.kind {
            if expected != found {
                return Err(IngestError::WrongEvidenceKind {
                    line,
                    expected: expected.as_str(),
                    found: found.as_str(),
                });
            }
        }
        let evidence = match found {
            EvidenceKind::Dense => self.dense(line, raw.probs.unwrap())?,
            EvidenceKind::Sparse => self.sparse(line, raw.values.unwrap())?,
            EvidenceKind::Labels => self.labels(line, raw.labels.unwrap())?,
        };
        if !self.seen.insert(raw.instance_id.clone()) {
            return Err(IngestError::DuplicateInstanceId { line, id: raw.instance_id });
        }
        Ok(InstanceRecord {
            instance_id: raw.instance_id,
            evidence,
            truth: None,
        })
    }

    fn dense(&self, line: usize, probs: Vec<f64>) -> Result<Evidence, IngestError> {
        let OutputMapping::Positional(outputs) = &self.mapping else {
            return Err(IngestError::MissingMapping);
        };
        if probs.len() != outputs.len() {
            return Err(IngestError::LengthMismatch {
                line,
                expected: outputs.len(),
                found: probs.len(),
            });
        }
        if let Some((i, &p)) = probs.iter().enumerate().find(|(_, &p)| p < 0.0) {
            return Err(IngestError::NegativeValue {
                line,
                key: format!("output {i}"),
                value: p,
            });
        }
        if self.options.normalized {
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > NORMALIZED_TOLERANCE {
                return Err(IngestError::NotNormalized { line, sum });
            }
        }
        Ok(Evidence::Dense {
            probs,
            outputs: Arc::clone(outputs),
        })
    }

    fn sparse(&self, line: usize, values: BTreeMap<String, f64>) -> Result<Evidence, IngestError> {
        let mut out = Vec::with_capacity(values.len());
        for (key, value) in values {
            let ix = self
                .dag
                .get(&key)
                .ok_or_else(|| IngestError::UnknownNodeKey { line, key: key.clone() })?;
            if value < 0.0 {
                return Err(IngestError::NegativeValue { line, key, value });
            }
            if value > 1.0 {
                return Err(IngestError::ValueOutOfRange { line, key, value });
            }
            out.push((ix, value));
        }
        out.sort_unstable_by_key(|&(ix, _)| ix);
        Ok(Evidence::Sparse(out))
    }

    fn labels(&self, line: usize, labels: Vec<String>) -> Result<Evidence, IngestError> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(labels.len());
        for key in labels {
            let ix = self
                .dag
                .get(&key)
                .ok_or_else(|| IngestError::UnknownNodeKey { line, key: key.clone() })?;
            if !seen.insert(ix) {
                return Err(IngestError::DuplicateLabel { line, key });
            }
            out.push(ix);
        }
        Ok(Evidence::Labels(out))
    }
}

impl<R: BufRead> Iterator for InstanceReader<'_, R> {
    type Item = Result<InstanceRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e.into()));
                }
            }
            self.line_no += 1;
            if self.buf.trim().is_empty() {
                continue;
            }
            let result = self.parse_line(self.line_no);
            self.failed = result.is_err();
            return Some(result);
        }
    }
}

/// Reads every record, failing on the first bad line.
pub fn parse_instances<R: BufRead>(
    reader: R,
    dag: &AbstractionDag,
    mapping: OutputMapping,
    options: InstanceOptions,
) -> Result<Vec<InstanceRecord>, IngestError> {
    InstanceReader::new(reader, dag, mapping, options).collect()
}

/// Ground-truth labels keyed by instance id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Truths {
    pub labels: BTreeMap<String, NodeIx>,
    /// Optional general answer per instance. `None` marks a general answer
    /// that is absent from the DAG.
    pub general: HashMap<String, Option<NodeIx>>,
}

impl Truths {
    pub fn get(&self, instance_id: &str) -> Option<NodeIx> {
        self.labels.get(instance_id).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Deserialize)]
struct RawTruth {
    instance_id: String,
    label: String,
    #[serde(default)]
    general: Option<String>,
}

/// Parses `{"instance_id":..,"label":..}` lines. An optional `general`
/// field names a more general answer; it is kept even when absent from the
/// DAG so the instance can be reported as not evaluable.
pub fn parse_truth<R: BufRead>(reader: R, dag: &AbstractionDag) -> Result<Truths, IngestError> {
    let mut truths = Truths::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTruth = serde_json::from_str(line.trim()).map_err(|e| IngestError::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let ix = dag.get(&raw.label).ok_or_else(|| IngestError::UnknownNodeKey {
            line: line_no,
            key: raw.label.clone(),
        })?;
        if truths.labels.contains_key(&raw.instance_id) {
            return Err(IngestError::DuplicateInstanceId {
                line: line_no,
                id: raw.instance_id,
            });
        }
        if let Some(general) = raw.general {
            truths.general.insert(raw.instance_id.clone(), dag.get(&general));
        }
        truths.labels.insert(raw.instance_id, ix);
    }
    Ok(truths)
}
