use kern_core::kg::{self, KgEmbedConfig, Norm};
use kern_core::rng;

#[test]
fn typed_graph_reaches_hits_at_10_with_falling_loss() {
    for seed in 0..3 {
        let store = kg::typed_store(50, 5, 200, &mut rng::stream(seed, &[])).unwrap();
        assert_eq!(store.len(), 200);
        assert_eq!(store.entities().len(), 50);
        let cfg = KgEmbedConfig {
            seed,
            ..KgEmbedConfig::default()
        };
        let (emb, log) = kg::train(&store, &cfg).unwrap();
        let report = kg::link_prediction_eval(&store, &emb, store.triples(), Norm::L2);
        assert!(report.hits_at_10 >= 0.9, "{report:?}");
        let windows = kg::window_means(&log.epoch_losses, 10);
        assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
    }
}

#[test]
fn typed_store_respects_classes() {
    let store = kg::typed_store(20, 4, 60, &mut rng::stream(1, &[])).unwrap();
    for t in store.triples() {
        assert_eq!(t.head % 4, t.relation);
        assert_eq!(t.tail % 4, (t.relation + 1) % 4);
    }
    assert!(kg::typed_store(20, 4, 1000, &mut rng::stream(1, &[])).is_err());
}

#[test]
fn triple_file_round_trip() {
    let store = kg::typed_store(12, 3, 20, &mut rng::stream(2, &[])).unwrap();
    let back = kg::TripleStore::parse(&store.to_text()).unwrap();
    assert_eq!(back.to_text(), store.to_text());
    assert_eq!(back.len(), store.len());
}
