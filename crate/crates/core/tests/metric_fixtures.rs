mod common;

use std::collections::{BTreeMap, HashMap};

use absalign_core::ingest::parse_hierarchy_file;
use absalign_core::metrics::{
    acc_at_k, accuracy_alignment, concept_confusion, group_by_concept, level_accuracy, level_entropy,
    subgraph_preference, uncertainty_alignment, ConfusionOptions, PairSelection, PreferenceOptions,
};
use absalign_core::propagate::propagate_values;
use absalign_core::{
    AbstractionDag, EntropyBase, Evidence, InstanceRecord, MetricValue, NodeIx, PairMode, PropagationMode, SubgraphSelector,
    Truths, ValueKind, WeightedDag,
};
use common::{entropy_bits, fixture};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn four_leaf() -> AbstractionDag {
    parse_hierarchy_file(&fixture("four_leaf.json"), None).unwrap().build().unwrap()
}

fn cifar() -> AbstractionDag {
    parse_hierarchy_file(&fixture("cifar100.json"), None).unwrap().build().unwrap()
}

fn wd(dag: &AbstractionDag, id: &str, values: &[(&str, f64)]) -> WeightedDag {
    let v: Vec<(NodeIx, f64)> = values.iter().map(|&(n, x)| (dag.ix(n).unwrap(), x)).collect();
    propagate_values(dag, id, &v, 0.0, PropagationMode::DescendantSet)
}

fn truths(pairs: &[(&str, NodeIx)]) -> Truths {
    Truths {
        labels: pairs.iter().map(|&(i, t)| (i.to_string(), t)).collect(),
        general: HashMap::new(),
    }
}

fn value(v: MetricValue) -> f64 {
    v.defined().expect("defined metric")
}

fn pair(dag: &AbstractionDag, a: &str, b: &str) -> PairSelection {
    PairSelection::Explicit(vec![(dag.ix(a).unwrap(), dag.ix(b).unwrap())])
}

const FOUR: [(&str, f64); 4] = [("a1", 0.4), ("a2", 0.3), ("b1", 0.2), ("b2", 0.1)];

#[test]
fn four_leaf_level_entropies() {
    let dag = four_leaf();
    let w = wd(&dag, "x", &FOUR);
    let h1 = level_entropy(&w, &dag, 1, EntropyBase::Two).unwrap();
    let h2 = level_entropy(&w, &dag, 2, EntropyBase::Two).unwrap();
    assert!((h1 - entropy_bits(&[0.4, 0.3, 0.2, 0.1])).abs() < 1e-12);
    assert!((h2 - entropy_bits(&[0.7, 0.3])).abs() < 1e-12);
    assert!((h1 - 1.846439).abs() < 1e-6, "{h1}");
    assert!((h2 - 0.881291).abs() < 1e-6, "{h2}");
    assert_eq!(level_entropy(&w, &dag, 3, EntropyBase::Two).unwrap(), 0.0);
}

#[test]
fn four_leaf_uncertainty_reduction() {
    let dag = four_leaf();
    let r = uncertainty_alignment(&[wd(&dag, "x", &FOUR)], &dag, 1, 2, EntropyBase::Two).unwrap();
    let want = entropy_bits(&[0.4, 0.3, 0.2, 0.1]) - entropy_bits(&[0.7, 0.3]);
    assert!((value(r.value) - want).abs() < 1e-12);
    assert!((value(r.value) - 0.965148).abs() < 1e-6);
    assert!((r.details["signed_delta_h"] + want).abs() < 1e-12);
    assert_eq!(r.support.evaluable, 1);
}

#[test]
fn uniform_pair_resolves_one_bit() {
    let dag = four_leaf();
    let r = uncertainty_alignment(&[wd(&dag, "u", &[("a1", 0.5), ("a2", 0.5)])], &dag, 1, 2, EntropyBase::Two).unwrap();
    assert!((value(r.value) - 1.0).abs() < 1e-12);
}

#[test]
fn four_leaf_confusion_and_preference() {
    let dag = four_leaf();
    let w = [wd(&dag, "x", &FOUR)];
    let c = concept_confusion(&w, &dag, &pair(&dag, "A", "B"), ConfusionOptions::default()).unwrap();
    let raw = -(0.7f64 * 0.7f64.log2()) - 0.3 * 0.3f64.log2();
    assert!((c.pairs[0].score - raw).abs() < 1e-12);
    assert!((c.pairs[0].score - 0.881291).abs() < 1e-6);

    let opts = PreferenceOptions {
        value_kind: ValueKind::Aggregate,
        disjoint: false,
    };
    let p = subgraph_preference(&w, &dag, &"node:A".parse().unwrap(), &"node:B".parse().unwrap(), opts, None).unwrap();
    assert_eq!(value(p.value), 1.0);
}

#[test]
fn confusion_single_instance_extremes() {
    let dag = four_leaf();
    let half = [wd(&dag, "h", &[("a1", 0.5), ("b1", 0.5)])];
    let c = concept_confusion(&half, &dag, &pair(&dag, "a1", "b1"), ConfusionOptions::default()).unwrap();
    assert!((c.pairs[0].score - 1.0).abs() < 1e-12);
    let one = [wd(&dag, "o", &[("a1", 1.0)])];
    let c = concept_confusion(&one, &dag, &pair(&dag, "a1", "b1"), ConfusionOptions::default()).unwrap();
    assert_eq!(c.pairs[0].score, 0.0);
}

/// Ten instances with truth a1: six argmax a1, three argmax a2, one argmax b1.
fn accuracy_fixture(dag: &AbstractionDag) -> (Vec<WeightedDag>, Truths, Vec<BTreeMap<String, f64>>) {
    let text = std::fs::read_to_string(fixture("accuracy10_instances.jsonl")).unwrap();
    let raw: Vec<(String, BTreeMap<String, f64>)> = text
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let values = serde_json::from_value(v["values"].clone()).unwrap();
            (v["instance_id"].as_str().unwrap().to_string(), values)
        })
        .collect();
    let wds = raw
        .iter()
        .map(|(id, m)| {
            let v: Vec<(&str, f64)> = m.iter().map(|(k, &x)| (k.as_str(), x)).collect();
            wd(dag, id, &v)
        })
        .collect();
    let a1 = dag.ix("a1").unwrap();
    let ids: Vec<&str> = raw.iter().map(|(id, _)| id.as_str()).collect();
    let t = truths(&ids.iter().map(|&i| (i, a1)).collect::<Vec<_>>());
    (wds, t, raw.into_iter().map(|(_, m)| m).collect())
}

#[test]
fn accuracy_fixture_enumerated() {
    let dag = four_leaf();
    let (wds, t, raw) = accuracy_fixture(&dag);
    // enumeration oracle straight from the raw values
    fn argmax(pairs: Vec<(&'static str, f64)>) -> &'static str {
        pairs
            .into_iter()
            .fold(("", f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
            .0
    }
    let mut c1 = 0;
    let mut c2 = 0;
    for m in &raw {
        let g = |k: &str| m.get(k).copied().unwrap_or(0.0);
        if argmax(vec![("a1", g("a1")), ("a2", g("a2")), ("b1", g("b1")), ("b2", g("b2"))]) == "a1" {
            c1 += 1;
        }
        if argmax(vec![("A", g("a1") + g("a2")), ("B", g("b1") + g("b2"))]) == "A" {
            c2 += 1;
        }
    }
    assert_eq!((c1, c2), (6, 9));
    let want = (c2 - c1) as f64 / (10 - c1) as f64;
    let r = accuracy_alignment(&wds, &dag, &t, 1, 2).unwrap();
    assert_eq!(value(r.value), want);
    assert_eq!(value(r.value), 0.75);
    assert_eq!(r.support.evaluable, 10);
    assert_eq!(r.details["errors_from"], 4.0);
}

#[test]
fn accuracy_without_errors_is_undefined() {
    let dag = four_leaf();
    let wds = [wd(&dag, "a", &[("a1", 1.0)])];
    let t = truths(&[("a", dag.ix("a1").unwrap())]);
    let r = accuracy_alignment(&wds, &dag, &t, 1, 2).unwrap();
    assert_eq!(r.value, MetricValue::Undefined);
    assert_eq!(serde_json::to_value(&r).unwrap()["value"], serde_json::Value::Null);
}

#[test]
fn accuracy_can_go_negative() {
    let dag = four_leaf();
    let wds = [
        wd(&dag, "p", &[("a1", 0.4), ("b1", 0.35), ("b2", 0.25)]),
        wd(&dag, "q", &[("a1", 0.3), ("b1", 0.7)]),
    ];
    let a1 = dag.ix("a1").unwrap();
    let t = truths(&[("p", a1), ("q", a1)]);
    let r = accuracy_alignment(&wds, &dag, &t, 1, 2).unwrap();
    assert_eq!(value(r.value), -1.0);
    assert!(r.flags.iter().any(|f| f.starts_with("negative")));
}

#[test]
fn preference_ties_count_for_neither_side() {
    let dag = four_leaf();
    let wds = [wd(&dag, "x", &[("a1", 0.7), ("b1", 0.3)]), wd(&dag, "y", &[("a1", 0.5), ("b1", 0.5)])];
    let opts = PreferenceOptions::default();
    let (l, r): (SubgraphSelector, SubgraphSelector) = ("node:a1".parse().unwrap(), "node:b1".parse().unwrap());
    assert_eq!(value(subgraph_preference(&wds, &dag, &l, &r, opts, None).unwrap().value), 0.5);
    assert_eq!(value(subgraph_preference(&wds, &dag, &r, &l, opts, None).unwrap().value), 0.0);
    assert_eq!(value(subgraph_preference(&wds, &dag, &l, &l, opts, None).unwrap().value), 0.0);
}

#[test]
fn general_anchor_without_answer_is_excluded() {
    let dag = four_leaf();
    let wds = [wd(&dag, "x", &[("a1", 0.7), ("A", 0.1)]), wd(&dag, "y", &[("a1", 0.2), ("A", 0.6)])];
    let a1 = dag.ix("a1").unwrap();
    let mut t = truths(&[("x", a1), ("y", a1)]);
    t.general.insert("x".into(), dag.get("A"));
    t.general.insert("y".into(), None);
    let r = subgraph_preference(
        &wds,
        &dag,
        &"node:@truth".parse().unwrap(),
        &"node:@general".parse().unwrap(),
        PreferenceOptions {
            value_kind: ValueKind::Value,
            disjoint: false,
        },
        Some(&t),
    )
    .unwrap();
    assert_eq!(value(r.value), 1.0);
    assert_eq!(r.support.evaluable, 1);
    assert_eq!(r.support.excluded["no_general_answer"], 1);
}

#[test]
fn acc_at_ten_over_enumerated_ranks() {
    // 15 leaves under one root; truth placed at ranks 1, 2, 11, 3, 12
    let ids: Vec<String> = (0..15).map(|i| format!("c{i:02}")).collect();
    let dag = AbstractionDag::build(
        ids.iter().map(|i| absalign_core::NodeSpec::new(i.clone())).chain([absalign_core::NodeSpec::new("top")]).collect(),
        ids.iter().map(|i| (i.clone(), "top".to_string())).collect(),
    )
    .unwrap();
    let ranks = [1usize, 2, 11, 3, 12];
    let mut records = Vec::new();
    let mut labels = Vec::new();
    for (n, &rank) in ranks.iter().enumerate() {
        // node c{j} gets value 15 - j, so rank of c{j} is j + 1
        let values: Vec<(NodeIx, f64)> = (0..15).map(|j| (dag.ix(&ids[j]).unwrap(), (15 - j) as f64 / 100.0)).collect();
        let id = format!("s{n}");
        labels.push((id.clone(), dag.ix(&ids[rank - 1]).unwrap()));
        records.push(InstanceRecord {
            instance_id: id,
            evidence: Evidence::Sparse(values),
            truth: None,
        });
    }
    let t = Truths {
        labels: labels.into_iter().collect(),
        general: HashMap::new(),
    };
    for (r, &want) in records.iter().zip(&ranks) {
        assert_eq!(absalign_core::metrics::truth_rank(r, t.get(&r.instance_id).unwrap()), Some(want));
    }
    let hits = ranks.iter().filter(|&&r| r <= 10).count() as f64 / ranks.len() as f64;
    let report = acc_at_k(&records, &t, 10).unwrap();
    assert_eq!(value(report.value), hits);
    assert_eq!(value(report.value), 0.6);
}

#[test]
fn grouping_splits_six_four() {
    let dag = four_leaf();
    let mut wds = Vec::new();
    let mut labels = Vec::new();
    for i in 0..10 {
        let leaf = if i < 6 { "a2" } else { "b1" };
        let id = format!("g{i}");
        wds.push(wd(&dag, &id, &[(leaf, 0.6), ("a1", 0.4)]));
        labels.push((id, dag.ix(leaf).unwrap()));
    }
    let t = Truths {
        labels: labels.into_iter().collect(),
        general: HashMap::new(),
    };
    let (groups, ungrouped) = group_by_concept(&wds, &dag, &t, 2, |members| {
        uncertainty_alignment(members, &dag, 1, 2, EntropyBase::Two)
    })
    .unwrap();
    assert_eq!(ungrouped, 0);
    let supports: Vec<(&str, usize)> = groups.iter().map(|g| (g.group.as_str(), g.report.support.evaluable)).collect();
    assert_eq!(supports, [("A", 6), ("B", 4)]);
    // grouping at the truth level gives one group per distinct label
    let (groups, _) = group_by_concept(&wds, &dag, &t, 1, |m| uncertainty_alignment(m, &dag, 1, 2, EntropyBase::Two)).unwrap();
    assert_eq!(groups.len(), 2);
}

type DenseDump = (Vec<WeightedDag>, Truths, Vec<Vec<(NodeIx, f64)>>);

fn random_dense(rng: &mut StdRng, dag: &AbstractionDag, n: usize) -> DenseDump {
    let leaves = dag.nodes_at_level(1).unwrap().to_vec();
    let mut wds = Vec::new();
    let mut labels = BTreeMap::new();
    let mut raw = Vec::new();
    for i in 0..n {
        // quantized values make exact ties common
        let mut v: Vec<(NodeIx, f64)> = leaves.iter().map(|&l| (l, rng.gen_range(0..6) as f64)).collect();
        let total: f64 = v.iter().map(|x| x.1).sum::<f64>().max(1.0);
        v.iter_mut().for_each(|x| x.1 /= total);
        let id = format!("i{i:04}");
        labels.insert(id.clone(), leaves[rng.gen_range(0..leaves.len())]);
        wds.push(propagate_values(dag, &id, &v, 0.0, PropagationMode::DescendantSet));
        raw.push(v);
    }
    (wds, Truths { labels, general: HashMap::new() }, raw)
}

#[test]
fn level_one_accuracy_is_top_one() {
    let dag = cifar();
    let mut rng = StdRng::seed_from_u64(7);
    let (wds, t, raw) = random_dense(&mut rng, &dag, 2000);
    let mut direct = 0;
    for (w, v) in wds.iter().zip(&raw) {
        // first maximum in id order, which is the smallest id among ties
        let mut best = v[0];
        for &x in v {
            if x.1 > best.1 {
                best = x;
            }
        }
        if Some(best.0) == t.get(&w.instance_id) {
            direct += 1;
        }
    }
    let (correct, n) = level_accuracy(&wds, &dag, &t, 1).unwrap();
    assert_eq!((correct, n), (direct, 2000));
}

#[test]
fn one_hot_has_zero_entropy_everywhere() {
    let dag = cifar();
    for leaf in dag.nodes_at_level(1).unwrap() {
        let w = propagate_values(&dag, "o", &[(*leaf, 1.0)], 0.0, PropagationMode::DescendantSet);
        for l in 1..=3 {
            assert_eq!(level_entropy(&w, &dag, l, EntropyBase::Two).unwrap(), 0.0);
        }
    }
}

#[test]
fn disjoint_support_pairs_have_zero_confusion() {
    let dag = cifar();
    let mut rng = StdRng::seed_from_u64(11);
    let (a, b) = (dag.ix("maple").unwrap(), dag.ix("oak").unwrap());
    let wds: Vec<WeightedDag> = (0..200)
        .map(|i| {
            let target = if i % 2 == 0 { a } else { b };
            let x: f64 = rng.gen_range(0.01..1.0);
            propagate_values(&dag, &format!("d{i}"), &[(target, x)], 0.0, PropagationMode::DescendantSet)
        })
        .collect();
    let sel = PairSelection::Explicit(vec![(a, b)]);
    let normalized = ConfusionOptions {
        pair_mode: PairMode::Normalized,
        ..Default::default()
    };
    assert_eq!(concept_confusion(&wds, &dag, &sel, normalized).unwrap().pairs[0].score, 0.0);
    let one_hot: Vec<WeightedDag> = (0..200)
        .map(|i| {
            let target = if i % 2 == 0 { a } else { b };
            propagate_values(&dag, &format!("d{i}"), &[(target, 1.0)], 0.0, PropagationMode::DescendantSet)
        })
        .collect();
    assert_eq!(concept_confusion(&one_hot, &dag, &sel, ConfusionOptions::default()).unwrap().pairs[0].score, 0.0);
}

#[test]
fn confusion_symmetric_and_base_invariant() {
    let dag = cifar();
    let mut rng = StdRng::seed_from_u64(3);
    let (wds, _, _) = random_dense(&mut rng, &dag, 200);
    let n = dag.len() as u32;
    for _ in 0..1000 {
        let a = NodeIx(rng.gen_range(0..n));
        let mut b = NodeIx(rng.gen_range(0..n));
        while b == a {
            b = NodeIx(rng.gen_range(0..n));
        }
        for mode in [PairMode::Raw, PairMode::Normalized] {
            let o2 = ConfusionOptions {
                pair_mode: mode,
                ..Default::default()
            };
            let oe = ConfusionOptions {
                base: EntropyBase::E,
                ..o2
            };
            let ab = concept_confusion(&wds, &dag, &PairSelection::Explicit(vec![(a, b)]), o2).unwrap().pairs[0].score;
            let ba = concept_confusion(&wds, &dag, &PairSelection::Explicit(vec![(b, a)]), o2).unwrap().pairs[0].score;
            let ab_e = concept_confusion(&wds, &dag, &PairSelection::Explicit(vec![(a, b)]), oe).unwrap().pairs[0].score;
            assert_eq!(ab, ba);
            assert!((ab - ab_e).abs() <= 1e-12 * ab.max(1.0), "{ab} vs {ab_e}");
        }
    }
}

#[test]
fn root_level_reduction_equals_mean_entropy() {
    let dag = cifar();
    let mut rng = StdRng::seed_from_u64(5);
    let (wds, _, _) = random_dense(&mut rng, &dag, 300);
    let mean_h1: f64 = wds.iter().map(|w| level_entropy(w, &dag, 1, EntropyBase::Two).unwrap()).sum::<f64>() / 300.0;
    let r = uncertainty_alignment(&wds, &dag, 1, 3, EntropyBase::Two).unwrap();
    assert!((value(r.value) - mean_h1).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_ignore_instance_order(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let dag = cifar();
        let mut rng = StdRng::seed_from_u64(seed);
        let (wds, t, _) = random_dense(&mut rng, &dag, 60);
        let mut shuffled = wds.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut StdRng::seed_from_u64(perm_seed));

        let acc = |w: &[WeightedDag]| accuracy_alignment(w, &dag, &t, 1, 2).unwrap();
        prop_assert_eq!(acc(&wds), acc(&shuffled));

        let unc = |w: &[WeightedDag]| value(uncertainty_alignment(w, &dag, 1, 2, EntropyBase::Two).unwrap().value);
        prop_assert!((unc(&wds) - unc(&shuffled)).abs() < 1e-12);

        let opts = PreferenceOptions::default();
        let (l, r): (SubgraphSelector, SubgraphSelector) = ("down:tree".parse().unwrap(), "down:flower".parse().unwrap());
        let pref = |w: &[WeightedDag]| subgraph_preference(w, &dag, &l, &r, opts, None).unwrap();
        prop_assert_eq!(pref(&wds), pref(&shuffled));

        let conf = |w: &[WeightedDag]| concept_confusion(w, &dag, &PairSelection::CoSupported, ConfusionOptions { top: Some(30), ..Default::default() }).unwrap();
        let (x, y) = (conf(&wds), conf(&shuffled));
        prop_assert_eq!(x.pairs.len(), y.pairs.len());
        for (p, q) in x.pairs.iter().zip(&y.pairs) {
            prop_assert!((p.score - q.score).abs() < 1e-12);
            prop_assert_eq!(p.co_support, q.co_support);
        }
    }

    #[test]
    fn singleton_preference_is_pointwise_comparison(seed in any::<u64>()) {
        let dag = cifar();
        let mut rng = StdRng::seed_from_u64(seed);
        let (wds, _, _) = random_dense(&mut rng, &dag, 100);
        let (a, b) = (dag.ix("maple").unwrap(), dag.ix("oak").unwrap());
        let wins = wds.iter().filter(|w| w.value(a) > w.value(b)).count() as f64 / 100.0;
        let opts = PreferenceOptions { value_kind: ValueKind::Value, disjoint: false };
        let p = subgraph_preference(&wds, &dag, &"node:maple".parse().unwrap(), &"node:oak".parse().unwrap(), opts, None).unwrap();
        prop_assert_eq!(value(p.value), wins);
    }
}
