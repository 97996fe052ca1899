use proptest::prelude::*;
use tempfile::TempDir;
use zpt_core::tagcore::{
    generate_synthetic_tag, load_tag, neighbor_sets, save_tag, SyntheticTagSpec, TextAttributedGraph,
};
use zpt_core::tensor::Mat;

fn default_spec() -> SyntheticTagSpec {
    SyntheticTagSpec {
        num_classes: 5,
        nodes_per_class: 100,
        intra_edge_prob: 0.05,
        inter_edge_prob: 0.002,
        seed: 7,
        ..SyntheticTagSpec::default()
    }
}

/// Intra- and inter-class edge counts by direct comparison of labels.
fn edge_split(g: &TextAttributedGraph) -> (usize, usize) {
    let labels = g.labels().unwrap();
    g.edge_indices()
        .iter()
        .fold((0, 0), |(intra, inter), &(a, b)| {
            if labels[a] == labels[b] {
                (intra + 1, inter)
            } else {
                (intra, inter + 1)
            }
        })
}

#[test]
fn same_spec_gives_byte_identical_files() {
    let dir = TempDir::new().unwrap();
    let a = generate_synthetic_tag(&default_spec()).unwrap();
    let b = generate_synthetic_tag(&default_spec()).unwrap();
    assert_eq!(a, b);
    save_tag(&a, dir.path().join("a")).unwrap();
    save_tag(&b, dir.path().join("b")).unwrap();
    for f in ["nodes.jsonl", "edges.tsv", "meta.json"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn intra_class_degree_exceeds_inter_class_degree() {
    let g = generate_synthetic_tag(&default_spec()).unwrap();
    let (intra, inter) = edge_split(&g);
    let n = g.num_nodes() as f64;
    // each edge adds one to the degree of both endpoints
    let (intra_deg, inter_deg) = (2.0 * intra as f64 / n, 2.0 * inter as f64 / n);
    assert!(intra_deg > inter_deg, "intra {intra_deg} inter {inter_deg}");
}

#[test]
fn topic_blocks_larger_than_the_vocabulary_are_rejected() {
    let spec = SyntheticTagSpec {
        vocab: (0..10).map(|i| format!("w{i}")).collect(),
        num_classes: 4,
        tokens_per_class: 3,
        ..default_spec()
    };
    assert!(generate_synthetic_tag(&spec).is_err());
}

#[test]
fn neighbor_sets_are_symmetric_without_self_membership() {
    let g = generate_synthetic_tag(&default_spec()).unwrap();
    let sets = neighbor_sets(&g);
    assert_eq!(sets.len(), g.num_nodes());
    for (v, nbrs) in &sets {
        assert!(!nbrs.contains(v));
        for u in nbrs {
            assert!(sets[u].contains(v), "{u} missing {v}");
        }
    }
}

#[test]
fn loading_a_missing_directory_fails() {
    let dir = TempDir::new().unwrap();
    assert!(load_tag(dir.path().join("absent")).is_err());
}

fn arb_graph() -> impl Strategy<Value = TextAttributedGraph> {
    (1usize..12, 1usize..5, any::<bool>()).prop_flat_map(|(n, d, labeled)| {
        let words = prop::collection::vec("[a-z]{1,6}", 0..5).prop_map(|w| w.join(" "));
        (
            prop::collection::vec(words, n),
            prop::collection::vec(-1e6f64..1e6, n * d),
            prop::collection::vec((0..n, 0..n), 0..3 * n),
            prop::collection::vec("[a-z]{1,4}", n),
            prop::collection::btree_set(0u64..1000, n),
        )
            .prop_map(move |(texts, feats, pairs, labels, ids)| {
                let ids: Vec<u64> = ids.into_iter().collect();
                let edges = pairs
                    .into_iter()
                    .filter(|(a, b)| a != b)
                    .map(|(a, b)| (ids[a], ids[b]))
                    .collect();
                let features = Mat::from_shape_vec((n, d), feats).unwrap();
                TextAttributedGraph::new(ids, edges, features, texts, labeled.then_some(labels)).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn load_after_save_is_identity(g in arb_graph()) {
        let dir = TempDir::new().unwrap();
        save_tag(&g, dir.path()).unwrap();
        let back = load_tag(dir.path()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn generation_is_a_pure_function_of_the_spec(seed in 0u64..1000, classes in 2usize..6) {
        let spec = SyntheticTagSpec { num_classes: classes, nodes_per_class: 20, seed, ..SyntheticTagSpec::default() };
        prop_assert_eq!(generate_synthetic_tag(&spec).unwrap(), generate_synthetic_tag(&spec).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn assortative_corpora_are_mostly_intra_class(
        seed in 0u64..1000,
        per_class in 50usize..80,
        inter in 0.001f64..0.004,
        ratio in 10.0f64..20.0,
    ) {
        let spec = SyntheticTagSpec {
            nodes_per_class: per_class,
            inter_edge_prob: inter,
            intra_edge_prob: inter * ratio,
            seed,
            ..SyntheticTagSpec::default()
        };
        let g = generate_synthetic_tag(&spec).unwrap();
        let (intra, inter) = edge_split(&g);
        prop_assert!(intra as f64 / (intra + inter) as f64 > 0.5, "intra {} inter {}", intra, inter);
    }
}
