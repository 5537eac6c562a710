//! Turns instance evidence into a weighted DAG of values and aggregated values.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dag::{AbstractionDag, NodeIx};
use crate::error::IngestError;
use crate::ingest::InstanceRecord;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PropagationMode {
    /// aggregate(n) = sum of values over n and its descendant closure, each node once.
    #[default]
    DescendantSet,
    /// aggregate(n) = value(n) + sum of child aggregates. Counts a descendant
    /// once per path, so diamonds count twice.
    LiteralChildSum,
}

impl PropagationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PropagationMode::DescendantSet => "descendant-set",
            PropagationMode::LiteralChildSum => "literal",
        }
    }

    /// Warning for literal mode on DAGs whose levels do not order children
    /// before parents. Propagation always runs in topological order.
    pub fn warning(self, dag: &AbstractionDag) -> Option<String> {
        if self == PropagationMode::LiteralChildSum && !dag.levels_are_topological() {
            Some(
                "level order does not place every child before its parents; \
                 literal child-sum ran in topological order instead"
                    .to_string(),
            )
        } else {
            None
        }
    }
}

impl fmt::Display for PropagationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PropagationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "descendant-set" => Ok(PropagationMode::DescendantSet),
            "literal" | "literal-child-sum" => Ok(PropagationMode::LiteralChildSum),
            other => Err(format!("unknown propagation mode `{other}`")),
        }
    }
}

/// Per-instance node values and aggregated values, stored sparsely.
///
/// Both lists are sorted by node and hold only nonzero entries.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedDag {
    pub instance_id: String,
    values: Vec<(NodeIx, f64)>,
    aggregates: Vec<(NodeIx, f64)>,
    pub dropped_mass: f64,
}

impl WeightedDag {
    pub fn values(&self) -> &[(NodeIx, f64)] {
        &self.values
    }

    pub fn aggregates(&self) -> &[(NodeIx, f64)] {
        &self.aggregates
    }

    pub fn value(&self, ix: NodeIx) -> f64 {
        lookup(&self.values, ix)
    }

    pub fn aggregate(&self, ix: NodeIx) -> f64 {
        lookup(&self.aggregates, ix)
    }

    /// Total mass named by the evidence (excluding dropped outputs).
    pub fn total_value(&self) -> f64 {
        self.values.iter().map(|&(_, v)| v).sum()
    }

    /// Multiplies every stored number by `factor` (must be ≥ 0).
    pub fn scaled(&self, factor: f64) -> WeightedDag {
        let scale = |list: &[(NodeIx, f64)]| -> Vec<(NodeIx, f64)> {
            list.iter()
                .map(|&(ix, v)| (ix, v * factor))
                .filter(|&(_, v)| v != 0.0)
                .collect()
        };
        WeightedDag {
            instance_id: self.instance_id.clone(),
            values: scale(&self.values),
            aggregates: scale(&self.aggregates),
            dropped_mass: self.dropped_mass * factor,
        }
    }

    pub fn to_json_line(&self, dag: &AbstractionDag) -> String {
        serde_json::to_string(&self.to_persisted(dag)).expect("weighted dag serializes")
    }

    pub fn to_persisted<'a>(&'a self, dag: &'a AbstractionDag) -> PersistedWeightedDag<'a> {
        let named = |list: &[(NodeIx, f64)]| list.iter().map(|&(ix, v)| (dag.id(ix).as_str(), v)).collect();
        PersistedWeightedDag {
            instance_id: &self.instance_id,
            values: named(&self.values),
            aggregates: named(&self.aggregates),
            dropped_mass: self.dropped_mass,
        }
    }

    /// Reads one persisted line back against the same DAG.
    pub fn from_json_line(line: &str, dag: &AbstractionDag) -> Result<Self, IngestError> {
        #[derive(Deserialize)]
        struct Raw {
            instance_id: String,
            values: BTreeMap<String, f64>,
            aggregates: BTreeMap<String, f64>,
            #[serde(default)]
            dropped_mass: f64,
        }
        let raw: Raw = serde_json::from_str(line).map_err(|e| IngestError::MalformedLine {
            line: e.line(),
            message: e.to_string(),
        })?;
        let resolve = |map: BTreeMap<String, f64>| -> Result<Vec<(NodeIx, f64)>, IngestError> {
            let mut out = Vec::with_capacity(map.len());
            for (key, v) in map {
                let ix = dag.get(&key).ok_or(IngestError::UnknownNodeKey { line: 1, key })?;
                out.push((ix, v));
            }
            out.sort_unstable_by_key(|&(ix, _)| ix);
            Ok(out)
        };
        Ok(WeightedDag {
            instance_id: raw.instance_id,
            values: resolve(raw.values)?,
            aggregates: resolve(raw.aggregates)?,
            dropped_mass: raw.dropped_mass,
        })
    }
}

#[inline]
fn lookup(list: &[(NodeIx, f64)], ix: NodeIx) -> f64 {
    list.binary_search_by_key(&ix, |&(n, _)| n)
        .map(|i| list[i].1)
        .unwrap_or(0.0)
}

/// Wire form: `{"instance_id":..,"values":{..},"aggregates":{..}}` with keys sorted.
#[derive(Serialize)]
pub struct PersistedWeightedDag<'a> {
    pub instance_id: &'a str,
    pub values: BTreeMap<&'a str, f64>,
    pub aggregates: BTreeMap<&'a str, f64>,
    #[serde(skip_serializing_if = "is_zero")]
    pub dropped_mass: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

pub fn propagate(dag: &AbstractionDag, record: &InstanceRecord, mode: PropagationMode) -> WeightedDag {
    let (values, dropped) = record.node_values();
    propagate_values(dag, &record.instance_id, &values, dropped, mode)
}

/// Propagates explicit (node, value) pairs. Values must be ≥ 0 and each node
/// may appear at most once.
pub fn propagate_values(
    dag: &AbstractionDag,
    instance_id: &str,
    values: &[(NodeIx, f64)],
    dropped_mass: f64,
    mode: PropagationMode,
) -> WeightedDag {
    let mut values: Vec<(NodeIx, f64)> = values.iter().copied().filter(|&(_, v)| v != 0.0).collect();
    values.sort_unstable_by_key(|&(ix, _)| ix);

    let mut acc: HashMap<NodeIx, f64> = HashMap::with_capacity(values.len() * 4);
    match mode {
        PropagationMode::DescendantSet => {
            for &(ix, v) in &values {
                *acc.entry(ix).or_insert(0.0) += v;
                for &a in dag.ancestors(ix) {
                    *acc.entry(a).or_insert(0.0) += v;
                }
            }
        }
        PropagationMode::LiteralChildSum => {
            let mut active: Vec<NodeIx> = Vec::new();
            for &(ix, v) in &values {
                acc.insert(ix, v);
                active.push(ix);
                active.extend_from_slice(dag.ancestors(ix));
            }
            active.sort_unstable_by_key(|&ix| dag.topo_rank(ix));
            active.dedup();
            for &node in &active {
                let own = acc.get(&node).copied().unwrap_or(0.0);
                for &p in dag.parents(node) {
                    *acc.entry(p).or_insert(0.0) += own;
                }
            }
        }
    }
    let mut aggregates: Vec<(NodeIx, f64)> = acc.into_iter().filter(|&(_, v)| v != 0.0).collect();
    aggregates.sort_unstable_by_key(|&(ix, _)| ix);
    WeightedDag {
        instance_id: instance_id.to_string(),
        values,
        aggregates,
        dropped_mass,
    }
}

/// Propagates every record in parallel, preserving input order.
pub fn propagate_all(dag: &AbstractionDag, records: &[InstanceRecord], mode: PropagationMode) -> Vec<WeightedDag> {
    records.par_iter().map(|r| propagate(dag, r, mode)).collect()
}
