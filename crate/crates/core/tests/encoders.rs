use proptest::prelude::*;
use zpt_core::encoders::{
    cosine_similarity_matrix, l2_normalize, GraphEncoderConfig, PretrainedModel, TextEncoderConfig, Vocabulary,
    EMBED_DIM,
};
use zpt_core::tagcore::{generate_synthetic_tag, SyntheticTagSpec, TextAttributedGraph};
use zpt_core::tensor::Mat;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_filter("rows must be nonzero", move |v| {
            v.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6)
        })
        .prop_map(move |v| Mat::from_shape_vec((rows, cols), v).unwrap())
}

fn model_for(graph: &TextAttributedGraph, text: TextEncoderConfig, gcn: GraphEncoderConfig) -> PretrainedModel {
    let vocab = Vocabulary::build(graph.texts(), 200);
    PretrainedModel::init(vocab, text, gcn, graph.feature_dim(), 0.0, 3).unwrap()
}

fn small_graph(seed: u64) -> TextAttributedGraph {
    generate_synthetic_tag(&SyntheticTagSpec {
        num_classes: 3,
        nodes_per_class: 5,
        intra_edge_prob: 0.4,
        inter_edge_prob: 0.05,
        feature_dim: 12,
        seed,
        ..SyntheticTagSpec::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cosine_matrix_is_bounded_and_transposes(a in matrix(4, 5), b in matrix(3, 5)) {
        let ab = cosine_similarity_matrix(&a, &b).unwrap();
        let ba = cosine_similarity_matrix(&b, &a).unwrap();
        prop_assert_eq!(ab.dim(), (4, 3));
        for i in 0..4 {
            for j in 0..3 {
                prop_assert!((ab[[i, j]] - ba[[j, i]]).abs() < 1e-9);
                prop_assert!(ab[[i, j]].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn cosine_matrix_ignores_positive_row_scale(a in matrix(4, 5), b in matrix(3, 5), s in prop::collection::vec(0.01f64..100.0, 4)) {
        let mut scaled = a.clone();
        for (mut row, k) in scaled.rows_mut().into_iter().zip(&s) {
            row *= *k;
        }
        let x = cosine_similarity_matrix(&a, &b).unwrap();
        let y = cosine_similarity_matrix(&scaled, &b).unwrap();
        prop_assert!((x - y).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn normalization_gives_unit_rows_and_is_idempotent(a in matrix(6, 7)) {
        let once = l2_normalize(&a).unwrap();
        for row in once.rows() {
            prop_assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
        let twice = l2_normalize(&once).unwrap();
        prop_assert!((&once - &twice).iter().all(|d| d.abs() < 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn encoders_always_emit_the_shared_width(
        layers in 1usize..3,
        heads in 1usize..4,
        head_dim in 1usize..5,
        ffn in 1usize..20,
        gcn_layers in 1usize..4,
        hidden in 1usize..40,
    ) {
        let graph = small_graph(1);
        let model = model_for(
            &graph,
            TextEncoderConfig { layers, width: heads * head_dim, heads, max_seq_len: 12, output_dim: EMBED_DIM, ffn_dim: ffn },
            GraphEncoderConfig { layers: gcn_layers, hidden_dim: hidden, leaky_slope: 0.01 },
        );
        prop_assert_eq!(model.encode_nodes(&graph).unwrap().dim(), (graph.num_nodes(), EMBED_DIM));
        prop_assert_eq!(model.encode_text(&graph.texts()[..3]).unwrap().dim(), (3, EMBED_DIM));
    }

    #[test]
    fn gcn_is_permutation_equivariant(seed in 0u64..100, shift in 1usize..14) {
        let graph = small_graph(seed);
        let n = graph.num_nodes();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let relabel = |id: u64| id + 1000;
        let permuted = TextAttributedGraph::new(
            perm.iter().map(|&i| relabel(graph.node_ids()[i])).collect(),
            graph.edges().iter().map(|&(a, b)| (relabel(a), relabel(b))).collect(),
            graph.features().select(ndarray::Axis(0), &perm),
            perm.iter().map(|&i| graph.texts()[i].clone()).collect(),
            None,
        ).unwrap();
        let model = model_for(&graph, TextEncoderConfig::default(), GraphEncoderConfig::default());
        let a = model.encode_nodes(&graph).unwrap();
        let b = model.encode_nodes(&permuted).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            let d = (&b.row(row) - &a.row(src)).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
            prop_assert!(d < 1e-9, "row {} differs by {}", row, d);
        }
    }
}
