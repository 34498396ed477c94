use kgcorrect::graphenc::{fixed_rel_rows, Gat, GatConfig, GatEdge, GatInput};
use kgcorrect::kgpretrain::EmbeddingTable;
use kgcorrect::kgstore::{Direction, Edge, Subgraph};
use kgcorrect::nn::{ParamStore, Tensor};
use kgcorrect::pipeline::{decide, Analysis, TriggerRule};
use kgcorrect::rerankspan::{decode_span, Ranked, SpanScores};
use kgcorrect::retrieval::{hit_order, EntityIndex, Hit, IndexRow};
use proptest::prelude::*;

fn table(vals: &[f64], nodes: usize, rels: usize, dim: usize) -> EmbeddingTable {
    let take = |n: usize, off: usize| Tensor::from_vec(n, dim, (0..n * dim).map(|i| vals[(off + i) % vals.len()]).collect());
    EmbeddingTable { nodes: take(nodes, 0), rels: take(rels, 7) }
}

fn subgraph() -> impl Strategy<Value = Subgraph> {
    proptest::collection::vec((0usize..3, any::<bool>(), 1usize..8), 0..7).prop_map(|es| Subgraph {
        center: 0,
        edges: es
            .into_iter()
            .map(|(rel, out, neighbor)| Edge { rel, dir: if out { Direction::Outgoing } else { Direction::Incoming }, neighbor })
            .collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_normalises_and_ignores_edge_order(
        sub in subgraph(),
        vals in proptest::collection::vec(-1.0f64..1.0, 8..40),
        seed in 0u64..1000,
        rot in 0usize..16,
    ) {
        let tbl = table(&vals, 8, 3, 4);
        let mut store = ParamStore::new(seed);
        let gat = Gat::new(&mut store, "g", &GatConfig { layers: 2, heads: 2, hidden: 4, ..GatConfig::default() }, &tbl.rels).unwrap();
        let input = GatInput::from_subgraph(&sub, &tbl).unwrap();
        for l in 0..2 {
            let a = gat.attention_coeffs(&store, l, &input).unwrap();
            for node in 0..input.num_nodes() {
                for h in 0..2 {
                    let s: f64 = input.edges.iter().enumerate().filter(|(_, e)| e.dst == node).map(|(i, _)| a.get(i, h)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
        let mut edges: Vec<GatEdge> = input.edges.clone();
        let n = edges.len();
        edges.rotate_left(rot % n.max(1));
        edges.reverse();
        let moved = GatInput { rel_vecs: fixed_rel_rows(&edges, &tbl).unwrap(), edges, node_vecs: input.node_vecs.clone() };
        let x = gat.encode_subgraph(&store, &input).unwrap();
        let y = gat.encode_subgraph(&store, &moved).unwrap();
        for (p, q) in x.iter().zip(&y) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn top_k_matches_full_sort(
        base in proptest::collection::vec(proptest::collection::vec(-3i8..3, 3), 1..40),
        query in proptest::collection::vec(-2.0f64..2.0, 3),
        k in 1usize..50,
    ) {
        // Small integer coordinates make exact ties common.
        let rows: Vec<IndexRow> = base
            .iter()
            .enumerate()
            .map(|(i, v)| IndexRow { surface: format!("e{:03}", (i * 37) % 101), ids: vec![i], vector: v.iter().map(|&x| f32::from(x)).collect() })
            .collect();
        let index = EntityIndex { d_sim: 3, checkpoint_hash: String::new(), built_at: 0, rows };
        let got = index.top_k(&query, k).unwrap();
        let mut all: Vec<(f64, &str)> = index
            .rows
            .iter()
            .map(|r| (r.vector.iter().zip(&query).map(|(a, b)| f64::from(*a) * b).sum::<f64>(), r.surface.as_str()))
            .collect();
        all.sort_by(|a, b| hit_order(*a, *b));
        prop_assert_eq!(got.len(), k.min(all.len()));
        for (h, w) in got.iter().zip(&all) {
            prop_assert_eq!(h.surface.as_str(), w.1);
        }
    }

    #[test]
    fn span_decode_is_exhaustive_argmax(
        n_utt in 0usize..10,
        logits in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 14),
        max_len in 1usize..6,
        t1 in -3.0f64..3.0,
        t2 in -3.0f64..3.0,
    ) {
        let s: Vec<f64> = logits.iter().map(|p| p.0).collect();
        let e: Vec<f64> = logits.iter().map(|p| p.1).collect();
        let got = decode_span(&s, &e, n_utt, max_len);
        let mut want: Option<(usize, usize, f64)> = None;
        for i in 1..=n_utt {
            for j in i..(i + max_len).min(n_utt + 1) {
                if want.is_none_or(|w| s[i] + e[j] > w.2) {
                    want = Some((i, j, s[i] + e[j]));
                }
            }
        }
        prop_assert_eq!(got.best, want);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (a, b) = (got.decode(lo), got.decode(hi));
        prop_assert!(!a.is_null || b.is_null);
        for p in [a, b] {
            prop_assert_eq!(p.is_null, p.start == 0 && p.end == 0);
        }
    }

    #[test]
    fn untriggered_output_is_the_input(
        words in proptest::collection::vec("[a-z]{1,6}", 1..8),
        margin in -4.0f64..4.0,
        theta in -4.0f64..4.0,
    ) {
        let utt = words.join(" ");
        let n = words.len();
        let a = Analysis {
            retrieved: vec![Hit { surface: "bad romance".into(), ids: vec![0], score: 1.0 }],
            reranked: vec![Ranked { surface: "bad romance".into(), score: 1.0 }],
            span: Some(SpanScores { null_score: 0.0, best: Some((1, n, margin)) }),
            diagnostic: None,
        };
        let r = decide(&a, &utt, None, &TriggerRule::threshold(theta));
        prop_assert_eq!(r.triggered, margin > theta);
        if !r.triggered {
            prop_assert_eq!(r.output(&utt), utt.as_str());
        }
        let looser = decide(&a, &utt, None, &TriggerRule::threshold(theta - 1.0));
        prop_assert!(looser.triggered || !r.triggered);
    }
}
