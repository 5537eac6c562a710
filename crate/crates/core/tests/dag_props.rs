mod common;

use absalign_core::ingest::{parse_hierarchy, parse_hierarchy_file, HierarchyFormat};
use absalign_core::{AbstractionDag, DagError, Direction, SubgraphSelector};
use common::{arb_dag, fixture};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn levels_match_breadth_first_oracle(g in arb_dag(50)) {
        let dag = g.build();
        for (i, id) in g.ids.iter().enumerate() {
            prop_assert_eq!(dag.level_of(id).unwrap(), g.level(i), "node {}", id);
        }
    }

    #[test]
    fn closures_match_depth_first_oracle(g in arb_dag(40)) {
        let dag = g.build();
        for (i, id) in g.ids.iter().enumerate() {
            let ix = dag.ix(id).unwrap();
            let mut want: Vec<&str> = g.descendants(i).iter().map(|&d| g.ids[d].as_str()).collect();
            want.sort();
            let got: Vec<&str> = dag.descendants(ix).iter().map(|&d| dag.id(d).as_str()).collect();
            prop_assert_eq!(got, want);
            let mut want: Vec<&str> = g.ancestors(i).iter().map(|&a| g.ids[a].as_str()).collect();
            want.sort();
            let got: Vec<&str> = dag.ancestors(ix).iter().map(|&a| dag.id(a).as_str()).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn ancestors_and_descendants_agree(g in arb_dag(40)) {
        let dag = g.build();
        for n in dag.node_ixs() {
            for &m in dag.descendants(n) {
                prop_assert!(dag.ancestors(m).contains(&n));
            }
            for &m in dag.ancestors(n) {
                prop_assert!(dag.descendants(m).contains(&n));
            }
        }
    }

    #[test]
    fn selectors_are_subsets(g in arb_dag(30)) {
        let dag = g.build();
        let all = dag.resolve_selector(&SubgraphSelector::AllNodes).unwrap();
        prop_assert_eq!(all.len(), dag.len());
        for n in dag.node_ixs() {
            let id = dag.id(n).clone();
            for sel in [
                SubgraphSelector::Single(id.clone()),
                SubgraphSelector::WithDescendants(id.clone()),
                SubgraphSelector::AncestorsOnly(id.clone()),
                SubgraphSelector::AncestorsDescendantsSelf(id.clone()),
                SubgraphSelector::LevelSlice(dag.level(n)),
            ] {
                match dag.resolve_selector(&sel) {
                    Ok(set) => {
                        prop_assert!(!set.is_empty());
                        prop_assert!(set.iter().all(|ix| ix.idx() < dag.len()));
                        prop_assert!(set.windows(2).all(|w| w[0] < w[1]));
                    }
                    Err(DagError::EmptySelection(_)) => {
                        prop_assert!(matches!(sel, SubgraphSelector::AncestorsOnly(_)));
                        prop_assert!(dag.parents(n).is_empty());
                    }
                    Err(e) => prop_assert!(false, "unexpected {}", e),
                }
            }
        }
    }

    #[test]
    fn hierarchy_round_trip_is_identity(g in arb_dag(30)) {
        let dag = g.build();
        let text = serde_json::to_string(&dag.to_hierarchy()).unwrap();
        let again = parse_hierarchy(&text, HierarchyFormat::Json).unwrap().build().unwrap();
        prop_assert_eq!(again.describe(), dag.describe());
        prop_assert_eq!(again.to_hierarchy(), dag.to_hierarchy());
    }
}

fn cifar() -> AbstractionDag {
    parse_hierarchy_file(&fixture("cifar100.json"), None).unwrap().build().unwrap()
}

#[test]
fn cifar_hierarchy_has_three_levels() {
    let parsed = parse_hierarchy_file(&fixture("cifar100.json"), None).unwrap();
    assert_eq!(parsed.nodes.len(), 121);
    assert_eq!(parsed.edges.len(), 120);
    let dag = parsed.build().unwrap();
    assert_eq!(dag.level_count(), 3);
    let counts: Vec<usize> = (1..=3).map(|l| dag.nodes_at_level(l).unwrap().len()).collect();
    assert_eq!(counts, [100, 20, 1]);
    assert_eq!(dag.level_of("maple").unwrap(), 1);
    assert_eq!(dag.level_of("tree").unwrap(), 2);
    assert_eq!(dag.level_of("root").unwrap(), 3);
}

#[test]
fn cifar_flower_descendants() {
    let dag = cifar();
    let got: Vec<&str> = dag
        .relatives("flower", Direction::Descendants)
        .unwrap()
        .iter()
        .map(|&ix| dag.id(ix).as_str())
        .collect();
    assert_eq!(got, ["orchid", "poppy", "rose", "sunflower", "tulip"]);
    assert!(dag.relatives("root", Direction::Ancestors).unwrap().is_empty());
}

#[test]
fn cifar_level_slice_and_ancestor_at_level() {
    let dag = cifar();
    let slice = dag.resolve_selector(&"level:2".parse().unwrap()).unwrap();
    assert_eq!(slice.len(), 20);
    let maple = dag.ix("maple").unwrap();
    let tree = dag.ancestor_at_level(maple, 2).unwrap();
    assert_eq!(tree, vec![dag.ix("tree").unwrap()]);
    assert!(matches!(
        dag.resolve_selector(&"up:root".parse().unwrap()),
        Err(DagError::EmptySelection(_))
    ));
}

#[test]
fn tsv_and_json_four_leaf_agree() {
    let tsv = parse_hierarchy_file(&fixture("four_leaf.tsv"), None).unwrap().build().unwrap();
    let json = parse_hierarchy_file(&fixture("four_leaf.json"), None).unwrap().build().unwrap();
    assert_eq!(tsv.len(), json.len());
    assert_eq!(tsv.edge_count(), json.edge_count());
    for ix in json.node_ixs() {
        let id = json.id(ix).as_str();
        assert_eq!(tsv.level_of(id).unwrap(), json.level(ix));
    }
}

#[test]
fn three_row_tsv() {
    let parsed = parse_hierarchy("a\tp\nb\tp\np\tr\n", HierarchyFormat::Tsv).unwrap();
    assert_eq!(parsed.nodes.len(), 4);
    assert_eq!(parsed.edges.len(), 3);
}
