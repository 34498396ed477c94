use kgcorrect::catalog::Catalog;
use kgcorrect::evalharness::{outcomes_at, MetricsReport, SetKind};
use kgcorrect::graphenc::GatConfig;
use kgcorrect::kgpretrain::{pretrain, PretrainConfig};
use kgcorrect::nn::TrainConfig;
use kgcorrect::pipeline::{System, TriggerRule};
use kgcorrect::rerankspan::{train_l2, CrossEncoderConfig, L2Model, LossWeights};
use kgcorrect::retrieval::{build_index, train_l1, BiEncoderConfig, L1Model};
use kgcorrect::synthdata::{default_templates, generate, l1_samples, l2_samples, synth_kg, GenConfig, KgSynthConfig};
use kgcorrect::textenc::{EncoderConfig, Vocab};

fn small_system() -> (System, kgcorrect::synthdata::Dataset) {
    let synth = KgSynthConfig { artists: 12, songs: 40, actors: 8, films: 20, authors: 6, books: 15, cities: 20, ..KgSynthConfig::default() };
    let kg = synth_kg(&synth, 3).unwrap().graph().unwrap();
    let (tbl, _) = pretrain(&kg, &PretrainConfig { dim: 8, epochs: 2, ..PretrainConfig::default() }, 3).unwrap();
    let entries = kg.filter_index_entities();
    let gen = GenConfig { l2_train: 120, l1_train: 60, friction_test: 30, clean_test: 20, ..GenConfig::default() };
    let data = generate(&kg, &entries, &default_templates(), &gen, 3).unwrap();
    let cat = Catalog::build(&kg, Some(&tbl), &entries, 8).unwrap();
    let vocab = Vocab::build(
        data.l2_train
            .iter()
            .flat_map(|s| [s.source.as_str(), s.target.as_str()])
            .chain(cat.entries().iter().map(|e| e.text.as_str())),
        1,
    );
    let encoder = EncoderConfig { layers: 1, heads: 2, hidden: 16, max_len: 32, ffn: 16, trigram_buckets: 128 };
    let gat = GatConfig { layers: 1, heads: 2, hidden: 8, ..GatConfig::default() };
    let train = TrainConfig { lr: 3e-3, batch: 16, epochs: 1 };

    let l1cfg = BiEncoderConfig { encoder: encoder.clone(), gat: gat.clone(), d_sim: 16, ..BiEncoderConfig::default() };
    let mut l1 = L1Model::new(&l1cfg, vocab.clone(), Some(&tbl.rels), 3).unwrap();
    train_l1(&mut l1, &cat, &l1_samples(&data.l1_train, 0), &train, 3).unwrap();
    let l2cfg = CrossEncoderConfig { encoder, gat, rank_hidden: 16, ..CrossEncoderConfig::default() };
    let mut l2 = L2Model::new(&l2cfg, vocab, Some(&tbl.rels), 3).unwrap();
    train_l2(&mut l2, &cat, &l2_samples(&data.l2_train, 0), &train, &LossWeights::default(), 3).unwrap();
    let index = build_index(&l1, &cat, "test").unwrap();
    (System { l1, l2, catalog: cat, index }, data)
}

#[test]
fn small_system_rewrites_and_reports() {
    let (sys, data) = small_system();
    assert_eq!(sys.index.rows.len(), sys.catalog.entries().len());

    let analyses: Vec<_> = data.friction_test.iter().map(|s| sys.analyze(&s.source, 5).unwrap()).collect();
    for a in &analyses {
        assert!(a.retrieved.len() <= 5);
        assert_eq!(a.retrieved.len(), a.reranked.len());
    }
    let always = outcomes_at(&analyses, &data.friction_test, &TriggerRule::always()).unwrap();
    let r = MetricsReport::from_outcomes("always", SetKind::Friction, &always);
    assert_eq!(r.counts.total, data.friction_test.len());
    assert!(r.counts.triggered <= r.counts.total);

    let never = outcomes_at(&analyses, &data.friction_test, &TriggerRule::threshold(f64::INFINITY)).unwrap();
    assert!(never.iter().all(|o| !o.triggered));

    for s in &data.clean_test {
        let out = sys.rewrite(&s.source, Some(&s.hypothesis), 5, &TriggerRule::threshold(f64::INFINITY)).unwrap();
        assert!(!out.triggered);
        assert_eq!(out.output(&s.source), s.source);
    }
}

#[test]
fn empty_utterance_is_never_rewritten() {
    let (sys, _) = small_system();
    let r = sys.rewrite("   ", None, 5, &TriggerRule::always()).unwrap();
    assert!(!r.triggered);
    assert!(r.trace.retrieved.is_empty());
}
