//! Abstraction-alignment metrics over collections of weighted DAGs.
//!
//! * accuracy alignment: share of level-`from` errors fixed by predicting at level `to`
//! * uncertainty alignment: mean entropy reduction from level `from` to level `to`
//! * subgraph preference: how often one node set's max beats another's
//! * concept confusion: dataset-normalized pairwise entropy of two nodes
//! * Acc@k over raw evidence
//!
//! Every reduction sums per-instance contributions in input order so results
//! do not depend on the thread count.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::{BuildHasherDefault, Hasher};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::dag::{AbstractionDag, NodeIx, SubgraphSelector};
use crate::error::DagError;
use crate::ingest::{Evidence, InstanceRecord, Truths};
use crate::propagate::WeightedDag;
use crate::MetricError;

/// Anchor placeholder resolved to each instance's ground-truth label.
pub const TRUTH_ANCHOR: &str = "@truth";
/// Anchor placeholder resolved to each instance's general answer.
pub const GENERAL_ANCHOR: &str = "@general";

/// Above this many candidate pairs, level-wide confusion refuses to run.
pub const MAX_MATERIALIZED_PAIRS: u128 = 20_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EntropyBase {
    #[default]
    Two,
    E,
}

impl EntropyBase {
    #[inline]
    pub fn log(self, x: f64) -> f64 {
        match self {
            EntropyBase::Two => x.log2(),
            EntropyBase::E => x.ln(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntropyBase::Two => "2",
            EntropyBase::E => "e",
        }
    }
}

impl FromStr for EntropyBase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "2" => Ok(EntropyBase::Two),
            "e" => Ok(EntropyBase::E),
            other => Err(format!("entropy base must be 2 or e, got `{other}`")),
        }
    }
}

impl fmt::Display for EntropyBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `-x log x` with `0 log 0 = 0`.
#[inline]
pub fn entropy_term(x: f64, base: EntropyBase) -> f64 {
    if x > 0.0 {
        -x * base.log(x)
    } else {
        0.0
    }
}

/// Shannon entropy of non-negative weights after normalizing by their sum.
/// Returns 0 when the weights sum to 0.
pub fn shannon_entropy(weights: &[f64], base: EntropyBase) -> f64 {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return 0.0;
    }
    weights.iter().map(|&w| entropy_term(w / sum, base)).sum()
}

/// A metric value or the explicit undefined state. Serializes as a number or `null`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetricValue {
    Defined(f64),
    Undefined,
}

impl MetricValue {
    pub fn defined(self) -> Option<f64> {
        match self {
            MetricValue::Defined(v) => Some(v),
            MetricValue::Undefined => None,
        }
    }
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            MetricValue::Defined(v) => s.serialize_f64(*v),
            MetricValue::Undefined => s.serialize_none(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Support {
    /// Instances handed to the metric.
    pub instances: usize,
    /// Instances that entered the value.
    pub evaluable: usize,
    /// Instances left out, with the reason as key.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub excluded: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub params: BTreeMap<String, String>,
    pub value: MetricValue,
    pub support: Support,
    /// Auxiliary numbers, e.g. per-level counts or the signed entropy change.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupReport>,
}

impl MetricReport {
    fn new(metric: &str, params: BTreeMap<String, String>) -> Self {
        MetricReport {
            metric: metric.to_string(),
            params,
            value: MetricValue::Undefined,
            support: Support::default(),
            details: BTreeMap::new(),
            flags: Vec::new(),
            groups: Vec::new(),
        }
    }

    fn exclude(&mut self, reason: &str) {
        *self.support.excluded.entry(reason.to_string()).or_insert(0) += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub report: MetricReport,
}

fn params<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn check_levels(dag: &AbstractionDag, from: u32, to: u32) -> Result<(), MetricError> {
    for l in [from, to] {
        if !dag.has_level(l) {
            return Err(DagError::UnknownLevel(l).into());
        }
    }
    if from >= to {
        return Err(MetricError::LevelOrder { from, to });
    }
    Ok(())
}

/// Aggregated values at one level, in node-id order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelDistribution {
    pub level: u32,
    pub nodes: Vec<String>,
    pub values: Vec<f64>,
    pub sum: f64,
}

pub fn level_distribution(wd: &WeightedDag, dag: &AbstractionDag, level: u32) -> Result<LevelDistribution, MetricError> {
    let nodes = dag.nodes_at_level(level)?;
    let values: Vec<f64> = nodes.iter().map(|&ix| wd.aggregate(ix)).collect();
    Ok(LevelDistribution {
        level,
        nodes: nodes.iter().map(|&ix| dag.id(ix).to_string()).collect(),
        sum: values.iter().sum(),
        values,
    })
}

/// Entropy of the normalized aggregates at `level`; 0 for an empty level.
pub fn level_entropy(wd: &WeightedDag, dag: &AbstractionDag, level: u32, base: EntropyBase) -> Result<f64, MetricError> {
    if !dag.has_level(level) {
        return Err(DagError::UnknownLevel(level).into());
    }
    Ok(sparse_level_entropy(wd, dag, level, base))
}

fn sparse_level_entropy(wd: &WeightedDag, dag: &AbstractionDag, level: u32, base: EntropyBase) -> f64 {
    let mut at_level = wd.aggregates().iter().filter(|&&(ix, _)| dag.level(ix) == level).map(|&(_, v)| v);
    let sum: f64 = at_level.clone().sum();
    if sum <= 0.0 {
        return 0.0;
    }
    at_level.by_ref().map(|v| entropy_term(v / sum, base)).sum()
}

/// Node with the largest aggregate at `level`; ties and all-zero levels go
/// to the smallest id.
pub fn argmax_at_level(wd: &WeightedDag, dag: &AbstractionDag, level: u32) -> Result<NodeIx, MetricError> {
    let nodes = dag.nodes_at_level(level)?;
    let mut best: Option<(NodeIx, f64)> = None;
    for &(ix, v) in wd.aggregates() {
        if dag.level(ix) != level || v <= 0.0 {
            continue;
        }
        // aggregates are sorted by node, so strict > keeps the smallest id on ties
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((ix, v));
        }
    }
    Ok(best.map(|(ix, _)| ix).unwrap_or(nodes[0]))
}

/// Mean entropy reduction `H(from) - H(to)`. The signed change as written in
/// the original formula, `H(to) - H(from)`, is reported under `signed_delta_h`.
pub fn uncertainty_alignment<W: Borrow<WeightedDag> + Sync>(
    wds: &[W],
    dag: &AbstractionDag,
    from: u32,
    to: u32,
    base: EntropyBase,
) -> Result<MetricReport, MetricError> {
    check_levels(dag, from, to)?;
    if wds.is_empty() {
        return Err(MetricError::EmptyCollection);
    }
    let per_instance: Vec<(f64, f64)> = wds
        .par_iter()
        .map(|w| {
            let wd = w.borrow();
            (
                sparse_level_entropy(wd, dag, from, base),
                sparse_level_entropy(wd, dag, to, base),
            )
        })
        .collect();
    let empty_from = wds
        .iter()
        .filter(|w| !Borrow::<WeightedDag>::borrow(*w).aggregates().iter().any(|&(ix, _)| dag.level(ix) == from))
        .count();
    let n = wds.len() as f64;
    let (sum_from, sum_to) = per_instance.iter().fold((0.0, 0.0), |(a, b), &(f, t)| (a + f, b + t));
    let reduction: f64 = per_instance.iter().map(|&(f, t)| f - t).sum::<f64>() / n;

    let mut report = MetricReport::new(
        "uncertainty",
        params([
            ("from", from.to_string()),
            ("to", to.to_string()),
            ("base", base.to_string()),
        ]),
    );
    report.value = MetricValue::Defined(reduction);
    report.support.instances = wds.len();
    report.support.evaluable = wds.len();
    report.details.insert("mean_entropy_from".into(), sum_from / n);
    report.details.insert("mean_entropy_to".into(), sum_to / n);
    report.details.insert("signed_delta_h".into(), sum_to / n - sum_from / n);
    if empty_from > 0 {
        report.flags.push(format!("empty_level_instances={empty_from}"));
    }
    Ok(report)
}

/// Share of level-`from` errors that are correct at level `to`.
///
/// Instances whose truth sits above a level, or has no ancestor at it, are
/// excluded and counted. Undefined when there are no level-`from` errors; may
/// be negative when aggregation moves an argmax off the truth.
pub fn accuracy_alignment<W: Borrow<WeightedDag> + Sync>(
    wds: &[W],
    dag: &AbstractionDag,
    truths: &Truths,
    from: u32,
    to: u32,
) -> Result<MetricReport, MetricError> {
    check_levels(dag, from, to)?;
    if wds.is_empty() {
        return Err(MetricError::EmptyCollection);
    }
    let mut report = MetricReport::new("accuracy", params([("from", from.to_string()), ("to", to.to_string())]));
    report.support.instances = wds.len();

    let outcomes: Vec<Result<Option<(bool, bool)>, MetricError>> = wds
        .par_iter()
        .map(|w| {
            let wd = w.borrow();
            let truth = truths
                .get(&wd.instance_id)
                .ok_or_else(|| MetricError::MissingTruth(wd.instance_id.clone()))?;
            let expected_from = match dag.ancestor_at_level(truth, from) {
                Ok(set) if !set.is_empty() => set,
                _ => return Ok(None),
            };
            let expected_to = match dag.ancestor_at_level(truth, to) {
                Ok(set) if !set.is_empty() => set,
                _ => return Ok(None),
            };
            let hit_from = expected_from.contains(&argmax_at_level(wd, dag, from)?);
            let hit_to = expected_to.contains(&argmax_at_level(wd, dag, to)?);
            Ok(Some((hit_from, hit_to)))
        })
        .collect();

    let (mut correct_from, mut correct_to, mut n) = (0usize, 0usize, 0usize);
    for outcome in outcomes {
        match outcome? {
            Some((f, t)) => {
                n += 1;
                correct_from += f as usize;
                correct_to += t as usize;
            }
            None => report.exclude("truth_not_at_level"),
        }
    }
    report.support.evaluable = n;
    let errors = n - correct_from;
    report.details.insert("correct_from".into(), correct_from as f64);
    report.details.insert("correct_to".into(), correct_to as f64);
    report.details.insert("errors_from".into(), errors as f64);
    if errors == 0 {
        report.value = MetricValue::Undefined;
        report.flags.push(format!("undefined: no errors at level {from}"));
    } else {
        let v = (correct_to as f64 - correct_from as f64) / errors as f64;
        if v < 0.0 {
            report.flags.push("negative: aggregation moved argmax away from truth".into());
        }
        report.value = MetricValue::Defined(v);
    }
    Ok(report)
}

/// Plain top-1 accuracy at one level (correct / evaluable).
pub fn level_accuracy<W: Borrow<WeightedDag>>(
    wds: &[W],
    dag: &AbstractionDag,
    truths: &Truths,
    level: u32,
) -> Result<(usize, usize), MetricError> {
    let mut correct = 0;
    let mut n = 0;
    for w in wds {
        let wd = w.borrow();
        let truth = truths
            .get(&wd.instance_id)
            .ok_or_else(|| MetricError::MissingTruth(wd.instance_id.clone()))?;
        let Ok(expected) = dag.ancestor_at_level(truth, level) else { continue };
        if expected.is_empty() {
            continue;
        }
        n += 1;
        correct += expected.contains(&argmax_at_level(wd, dag, level)?) as usize;
    }
    Ok((correct, n))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ValueKind {
    Value,
    #[default]
    Aggregate,
}

impl ValueKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueKind::Value => "value",
            ValueKind::Aggregate => "aggregate",
        }
    }
}

impl FromStr for ValueKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "value" => Ok(ValueKind::Value),
            "aggregate" => Ok(ValueKind::Aggregate),
            other => Err(format!("value kind must be value or aggregate, got `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PreferenceOptions {
    pub value_kind: ValueKind,
    /// Remove the left set's nodes from the right set before comparing.
    pub disjoint: bool,
}

enum Anchor {
    Fixed,
    Truth,
    General,
}

fn anchor_of(sel: &SubgraphSelector) -> Anchor {
    match sel.anchor().map(|a| a.as_str()) {
        Some(TRUTH_ANCHOR) => Anchor::Truth,
        Some(GENERAL_ANCHOR) => Anchor::General,
        _ => Anchor::Fixed,
    }
}

/// Max over `set` of the sparse `entries`; absent nodes count as 0.
fn max_over(set: &[NodeIx], entries: &[(NodeIx, f64)]) -> f64 {
    let mut best = 0.0f64;
    if set.len() <= entries.len() {
        for ix in set {
            if let Ok(i) = entries.binary_search_by_key(ix, |&(n, _)| n) {
                best = best.max(entries[i].1);
            }
        }
    } else {
        for &(ix, v) in entries {
            if set.binary_search(&ix).is_ok() {
                best = best.max(v);
            }
        }
    }
    best
}

struct SelectorCache<'a> {
    dag: &'a AbstractionDag,
    resolved: HashMap<SubgraphSelector, Result<Vec<NodeIx>, String>>,
}

impl<'a> SelectorCache<'a> {
    fn resolve(&mut self, sel: &SubgraphSelector) -> Result<&[NodeIx], String> {
        if !self.resolved.contains_key(sel) {
            let r = self.dag.resolve_selector(sel).map_err(|e| e.to_string());
            self.resolved.insert(sel.clone(), r);
        }
        self.resolved[sel].as_deref().map_err(Clone::clone)
    }
}

/// Fraction of evaluable instances where `max(left) > max(right)` strictly.
///
/// Selectors may use the `@truth` / `@general` anchors, resolved per instance
/// from `truths`. Instances with no general answer, or whose per-instance
/// selection is empty, are excluded and counted.
pub fn subgraph_preference<W: Borrow<WeightedDag>>(
    wds: &[W],
    dag: &AbstractionDag,
    left: &SubgraphSelector,
    right: &SubgraphSelector,
    options: PreferenceOptions,
    truths: Option<&Truths>,
) -> Result<MetricReport, MetricError> {
    let mut report = MetricReport::new(
        "preference",
        params([
            ("left", left.to_string()),
            ("right", right.to_string()),
            ("value_kind", options.value_kind.as_str().to_string()),
            ("disjoint", options.disjoint.to_string()),
        ]),
    );
    // fixed selectors must resolve up front
    for sel in [left, right] {
        if matches!(anchor_of(sel), Anchor::Fixed) {
            dag.resolve_selector(sel)?;
        } else if truths.is_none() {
            return Err(MetricError::MissingAnchorTruth(sel.to_string()));
        }
    }
    report.support.instances = wds.len();
    let mut cache = SelectorCache {
        dag,
        resolved: HashMap::new(),
    };
    let mut wins = 0usize;
    let mut evaluable = 0usize;
    for w in wds {
        let wd = w.borrow();
        let mut sides: [Option<Vec<NodeIx>>; 2] = [None, None];
        let mut skip = None;
        for (slot, sel) in [left, right].into_iter().enumerate() {
            let concrete = match anchor_of(sel) {
                Anchor::Fixed => sel.clone(),
                Anchor::Truth => {
                    let t = truths
                        .and_then(|t| t.get(&wd.instance_id))
                        .ok_or_else(|| MetricError::MissingTruth(wd.instance_id.clone()))?;
                    sel.with_anchor(dag.id(t).clone())
                }
                Anchor::General => match truths.and_then(|t| t.general.get(&wd.instance_id).copied().flatten()) {
                    Some(g) => sel.with_anchor(dag.id(g).clone()),
                    None => {
                        skip = Some("no_general_answer");
                        break;
                    }
                },
            };
            match cache.resolve(&concrete) {
                Ok(set) => sides[slot] = Some(set.to_vec()),
                Err(_) => {
                    skip = Some("empty_selection");
                    break;
                }
            }
        }
        if let Some(reason) = skip {
            report.exclude(reason);
            continue;
        }
        let [Some(l), Some(mut r)] = sides else { unreachable!() };
        if options.disjoint {
            r.retain(|ix| l.binary_search(ix).is_err());
        }
        let entries = match options.value_kind {
            ValueKind::Value => wd.values(),
            ValueKind::Aggregate => wd.aggregates(),
        };
        evaluable += 1;
        if max_over(&l, entries) > max_over(&r, entries) {
            wins += 1;
        }
    }
    report.support.evaluable = evaluable;
    report.details.insert("preferred".into(), wins as f64);
    report.value = if evaluable == 0 {
        report.flags.push("undefined: no evaluable instances".into());
        MetricValue::Undefined
    } else {
        MetricValue::Defined(wins as f64 / evaluable as f64)
    };
    Ok(report)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PairMode {
    /// Sum of `-v log v` terms of the two raw values.
    #[default]
    Raw,
    /// Rescale each pair to sum 1 before taking the entropy.
    Normalized,
}

impl PairMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PairMode::Raw => "raw",
            PairMode::Normalized => "normalized",
        }
    }
}

impl FromStr for PairMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(PairMode::Raw),
            "normalized" => Ok(PairMode::Normalized),
            other => Err(format!("pair mode must be raw or normalized, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PairSelection {
    Explicit(Vec<(NodeIx, NodeIx)>),
    AllAtLevel(u32),
    CoSupported,
}

impl PairSelection {
    /// `co-supported`, `level:L` or `explicit:A|B,C|D`.
    pub fn parse(s: &str, dag: &AbstractionDag) -> Result<Self, String> {
        if s == "co-supported" {
            return Ok(PairSelection::CoSupported);
        }
        if let Some(level) = s.strip_prefix("level:") {
            return level
                .parse()
                .map(PairSelection::AllAtLevel)
                .map_err(|_| format!("bad level in `{s}`"));
        }
        if let Some(list) = s.strip_prefix("explicit:") {
            let mut pairs = Vec::new();
            for item in list.split(',').filter(|p| !p.is_empty()) {
                let (a, b) = item.split_once('|').ok_or_else(|| format!("pair `{item}` must be A|B"))?;
                let a = dag.ix(a).map_err(|e| e.to_string())?;
                let b = dag.ix(b).map_err(|e| e.to_string())?;
                pairs.push((a, b));
            }
            if pairs.is_empty() {
                return Err("explicit pair list is empty".into());
            }
            return Ok(PairSelection::Explicit(pairs));
        }
        Err(format!("pairs must be co-supported, level:L or explicit:A|B,..., got `{s}`"))
    }

    fn describe(&self, dag: &AbstractionDag) -> String {
        match self {
            PairSelection::CoSupported => "co-supported".into(),
            PairSelection::AllAtLevel(l) => format!("level:{l}"),
            PairSelection::Explicit(p) => format!(
                "explicit:{}",
                p.iter()
                    .map(|&(a, b)| format!("{}|{}", dag.id(a), dag.id(b)))
                    .collect::<Vec<_>>()
                    .join(",")
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ConfusionOptions {
    pub pair_mode: PairMode,
    pub exclude_related: bool,
    pub base: EntropyBase,
    /// Keep only the best `top` pairs.
    pub top: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairScore {
    pub a: String,
    pub b: String,
    pub score: f64,
    /// Instances where both nodes are nonzero.
    pub co_support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfusionReport {
    pub metric: String,
    pub params: BTreeMap<String, String>,
    pub support: Support,
    pub pairs: Vec<PairScore>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Multiplicative hasher for packed pair keys.
#[derive(Default)]
struct PairHasher(u64);

impl Hasher for PairHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0.rotate_left(8) ^ b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        }
    }

    fn write_u64(&mut self, v: u64) {
        let x = v.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        self.0 = x ^ (x >> 29);
    }
}

type PairMap = HashMap<u64, (f64, u64), BuildHasherDefault<PairHasher>>;

#[inline]
fn pack(a: NodeIx, b: NodeIx) -> u64 {
    ((a.0 as u64) << 32) | b.0 as u64
}

#[inline]
fn unpack(key: u64) -> (NodeIx, NodeIx) {
    (NodeIx((key >> 32) as u32), NodeIx(key as u32))
}

#[inline]
fn normalized_pair_entropy(v: f64, w: f64, base: EntropyBase) -> f64 {
    let s = v + w;
    if s <= 0.0 {
        return 0.0;
    }
    entropy_term(v / s, base) + entropy_term(w / s, base)
}

/// Ranks node pairs by concept confusion.
///
/// Raw mode decomposes per node (`H([v,w]) = h(v) + h(w)`), so pair scores
/// come from per-node sums; pair maps only track which pairs co-occur.
/// Normalized mode accumulates entropies for co-supported pairs, since other
/// pairs contribute zero.
pub fn concept_confusion<W: Borrow<WeightedDag> + Sync>(
    wds: &[W],
    dag: &AbstractionDag,
    selection: &PairSelection,
    options: ConfusionOptions,
) -> Result<ConfusionReport, MetricError> {
    if wds.is_empty() {
        return Err(MetricError::EmptyCollection);
    }
    let base = options.base;
    let n = wds.len();
    let denominator = n as f64 * shannon_entropy(&[0.5, 0.5], base);

    let mut report = ConfusionReport {
        metric: "concept-confusion".into(),
        params: params([
            ("pairs", selection.describe(dag)),
            ("pair_mode", options.pair_mode.as_str().to_string()),
            ("exclude_related", options.exclude_related.to_string()),
            ("base", base.to_string()),
            ("top", options.top.map(|t| t.to_string()).unwrap_or_else(|| "all".into())),
        ]),
        support: Support {
            instances: n,
            evaluable: n,
            excluded: BTreeMap::new(),
        },
        pairs: Vec::new(),
        flags: Vec::new(),
    };
    if options.pair_mode == PairMode::Raw {
        report
            .flags
            .push("raw mode is unclamped; a single instance may score above 1".into());
    }

    // per-node sum of -v log v, only used by raw mode
    let node_terms: Vec<f64> = if options.pair_mode == PairMode::Raw {
        let mut terms = vec![0.0; dag.len()];
        for w in wds {
            for &(ix, v) in w.borrow().aggregates() {
                terms[ix.idx()] += entropy_term(v, base);
            }
        }
        terms
    } else {
        Vec::new()
    };

    let member: Option<Vec<bool>> = match selection {
        PairSelection::AllAtLevel(level) => {
            let nodes = dag.nodes_at_level(*level)?;
            let mut m = vec![false; dag.len()];
            for &ix in nodes {
                m[ix.idx()] = true;
            }
            Some(m)
        }
        _ => None,
    };

    let mut scored: Vec<(NodeIx, NodeIx, f64, u64)> = Vec::new();
    match selection {
        PairSelection::Explicit(pairs) => {
            for &(a, b) in pairs {
                if a == b {
                    return Err(MetricError::SamePairNode(dag.id(a).to_string()));
                }
            }
            for &(a, b) in pairs {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                let mut acc = 0.0;
                let mut co = 0u64;
                for w in wds {
                    let wd = w.borrow();
                    let (v, u) = (wd.aggregate(lo), wd.aggregate(hi));
                    if v > 0.0 && u > 0.0 {
                        co += 1;
                    }
                    if options.pair_mode == PairMode::Normalized {
                        acc += normalized_pair_entropy(v, u, base);
                    }
                }
                scored.push((lo, hi, acc, co));
            }
        }
        PairSelection::AllAtLevel(_) | PairSelection::CoSupported => {
            let co_map = accumulate_co_supported(wds, member.as_deref(), options.pair_mode, base);
            if let PairSelection::AllAtLevel(level) = selection {
                let nodes = dag.nodes_at_level(*level)?;
                let k = nodes.len() as u128;
                let total = k * k.saturating_sub(1) / 2;
                if total > MAX_MATERIALIZED_PAIRS {
                    return Err(MetricError::TooManyPairs {
                        pairs: total,
                        limit: MAX_MATERIALIZED_PAIRS,
                    });
                }
                for (i, &a) in nodes.iter().enumerate() {
                    for &b in &nodes[i + 1..] {
                        let (acc, co) = co_map.get(&pack(a, b)).copied().unwrap_or((0.0, 0));
                        scored.push((a, b, acc, co));
                    }
                }
            } else {
                scored.extend(co_map.into_iter().map(|(key, (acc, co))| {
                    let (a, b) = unpack(key);
                    (a, b, acc, co)
                }));
            }
        }
    }

    if options.exclude_related {
        let before = scored.len();
        scored.retain(|&(a, b, _, _)| !dag.are_related(a, b));
        let dropped = before - scored.len();
        if dropped > 0 {
            report.flags.push(format!("excluded_related_pairs={dropped}"));
        }
    }

    let mut ranked: Vec<(NodeIx, NodeIx, f64, u64)> = scored
        .into_iter()
        .map(|(a, b, acc, co)| {
            let numerator = match options.pair_mode {
                PairMode::Raw => node_terms[a.idx()] + node_terms[b.idx()],
                PairMode::Normalized => acc,
            };
            (a, b, numerator / denominator, co)
        })
        .collect();
    let by_rank = |x: &(NodeIx, NodeIx, f64, u64), y: &(NodeIx, NodeIx, f64, u64)| {
        y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1))
    };
    if let Some(top) = options.top {
        if top < ranked.len() {
            ranked.select_nth_unstable_by(top, by_rank);
            ranked.truncate(top);
        }
    }
    ranked.sort_unstable_by(by_rank);
    report.pairs = ranked
        .into_iter()
        .map(|(a, b, score, co)| PairScore {
            a: dag.id(a).to_string(),
            b: dag.id(b).to_string(),
            score,
            co_support: co,
        })
        .collect();
    Ok(report)
}

/// Accumulates, for every pair co-supported on at least one instance, its
/// normalized entropy sum and co-support count.
///
/// Work is sharded by the smaller node index; each shard scans instances in
/// input order, so every pair's sum has a fixed order.
fn accumulate_co_supported<W: Borrow<WeightedDag> + Sync>(
    wds: &[W],
    member: Option<&[bool]>,
    mode: PairMode,
    base: EntropyBase,
) -> PairMap {
    let shards = (rayon::current_num_threads() * 4).max(1) as u32;
    let partials: Vec<PairMap> = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let mut map = PairMap::default();
            let mut support: Vec<(NodeIx, f64)> = Vec::new();
            for w in wds {
                support.clear();
                support.extend(
                    w.borrow()
                        .aggregates()
                        .iter()
                        .copied()
                        .filter(|&(ix, v)| v > 0.0 && member.is_none_or(|m| m[ix.idx()])),
                );
                for (i, &(a, va)) in support.iter().enumerate() {
                    if a.0 % shards != shard {
                        continue;
                    }
                    for &(b, vb) in &support[i + 1..] {
                        let entry = map.entry(pack(a, b)).or_insert((0.0, 0));
                        if mode == PairMode::Normalized {
                            entry.0 += normalized_pair_entropy(va, vb, base);
                        }
                        entry.1 += 1;
                    }
                }
            }
            map
        })
        .collect();
    let total: usize = partials.iter().map(|m| m.len()).sum();
    let mut merged = PairMap::with_capacity_and_hasher(total, Default::default());
    for part in partials {
        merged.extend(part);
    }
    merged
}

/// Fraction of records whose truth is among the `k` highest evidence values.
///
/// Candidates are the nodes named by the evidence; ties go to the smaller
/// node id. Unmapped dense outputs compete on value and lose ties.
pub fn acc_at_k(records: &[InstanceRecord], truths: &Truths, k: usize) -> Result<MetricReport, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if records.is_empty() {
        return Err(MetricError::EmptyCollection);
    }
    let mut report = MetricReport::new("acc-at-k", params([("k", k.to_string())]));
    report.support.instances = records.len();
    let mut hits = 0usize;
    for record in records {
        let truth = truths
            .get(&record.instance_id)
            .ok_or_else(|| MetricError::MissingTruth(record.instance_id.clone()))?;
        if let Some(rank) = truth_rank(record, truth) {
            if rank <= k {
                hits += 1;
            }
        }
    }
    report.support.evaluable = records.len();
    report.details.insert("hits".into(), hits as f64);
    report.value = MetricValue::Defined(hits as f64 / records.len() as f64);
    Ok(report)
}

/// 1-based rank of `truth` among the evidence candidates, if it is one.
pub fn truth_rank(record: &InstanceRecord, truth: NodeIx) -> Option<usize> {
    let (values, _) = record.node_values();
    let &(_, target) = values.iter().find(|&&(ix, _)| ix == truth)?;
    let mut ahead = values
        .iter()
        .filter(|&&(ix, v)| v > target || (v == target && ix < truth))
        .count();
    if let Evidence::Dense { probs, outputs } = &record.evidence {
        ahead += probs
            .iter()
            .zip(outputs.iter())
            .filter(|(p, o)| o.is_none() && **p > target)
            .count();
    }
    Some(ahead + 1)
}

/// Runs `metric` once per concept at `level`, partitioning instances by the
/// level ancestor(s) of their truth label.
///
/// Instances with several ancestors at the level join each group; instances
/// whose truth sits above the level are left out and counted.
pub fn group_by_concept<'w, F>(
    wds: &'w [WeightedDag],
    dag: &AbstractionDag,
    truths: &Truths,
    level: u32,
    mut metric: F,
) -> Result<(Vec<GroupReport>, usize), MetricError>
where
    F: FnMut(&[&'w WeightedDag]) -> Result<MetricReport, MetricError>,
{
    if !dag.has_level(level) {
        return Err(DagError::UnknownLevel(level).into());
    }
    let mut groups: BTreeMap<NodeIx, Vec<&WeightedDag>> = BTreeMap::new();
    let mut ungrouped = 0;
    for wd in wds {
        let truth = truths
            .get(&wd.instance_id)
            .ok_or_else(|| MetricError::MissingTruth(wd.instance_id.clone()))?;
        match dag.ancestor_at_level(truth, level) {
            Ok(set) if !set.is_empty() => {
                for g in set {
                    groups.entry(g).or_default().push(wd);
                }
            }
            _ => ungrouped += 1,
        }
    }
    let mut out = Vec::with_capacity(groups.len());
    for (g, members) in groups {
        let report = metric(&members)?;
        out.push(GroupReport {
            group: dag.id(g).to_string(),
            report,
        });
    }
    Ok((out, ungrouped))
}

/// Mean level entropy across instances, one entry per level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelSummary {
    pub level: u32,
    pub node_count: usize,
    pub mean_entropy: f64,
    pub mean_mass: f64,
}

pub fn level_summaries(wds: &[WeightedDag], dag: &AbstractionDag, base: EntropyBase) -> Vec<LevelSummary> {
    dag.levels()
        .map(|level| {
            let n = wds.len().max(1) as f64;
            let (h, mass) = wds.iter().fold((0.0, 0.0), |(h, m), wd| {
                let level_mass: f64 = wd
                    .aggregates()
                    .iter()
                    .filter(|&&(ix, _)| dag.level(ix) == level)
                    .map(|&(_, v)| v)
                    .sum();
                (h + sparse_level_entropy(wd, dag, level, base), m + level_mass)
            });
            LevelSummary {
                level,
                node_count: dag.nodes_at_level(level).map(|n| n.len()).unwrap_or(0),
                mean_entropy: h / n,
                mean_mass: mass / n,
            }
        })
        .collect()
}
