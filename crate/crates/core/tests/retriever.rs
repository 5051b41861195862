use proptest::prelude::*;

use clsr::compute::Tensor;
use clsr::corpus::{generate_corpus, CorpusConfig, SpeechFeatures};
use clsr::model::{Model, ModelConfig};
use clsr::retriever::index::dot;
use clsr::retriever::{
    build_index, embed_query, heatmap, load_index, rank_order, save_index, segment, segment_count, Hit, IndexEntry,
    IndexMetadata, Query, RetrievalIndex,
};

fn meta() -> IndexMetadata {
    IndexMetadata {
        model_hash: "m".into(),
        window: 4,
        hop: 4,
    }
}

fn unit_f32(v: &[f64]) -> Option<Vec<f32>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-3).then(|| v.iter().map(|x| (x / n) as f32).collect())
}

fn vectors(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    // coarse values make exact score ties common
    prop::collection::vec(
        prop::collection::vec(-2i8..=2, dim).prop_map(|v| v.into_iter().map(f64::from).collect()),
        1..60,
    )
}

proptest! {
    #[test]
    fn topk_equals_the_sorted_exhaustive_scan(
        rows in vectors(4),
        query in prop::collection::vec(-1.0f64..1.0, 4),
        k in 1usize..80,
    ) {
        let entries: Vec<IndexEntry> = rows
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                unit_f32(v).map(|vector| IndexEntry { doc_id: (i % 5) as u64, segment_index: i as u32, vector })
            })
            .collect();
        prop_assume!(!entries.is_empty());
        let index = RetrievalIndex::new(4, meta(), entries).unwrap();
        let mut scan: Vec<Hit> = index
            .entries()
            .iter()
            .map(|e| Hit { doc_id: e.doc_id, segment_index: e.segment_index, score: dot(&query, &e.vector) })
            .collect();
        scan.sort_by(rank_order);
        scan.truncate(k);
        prop_assert_eq!(index.search_topk(&query, k).unwrap(), scan);
    }

    #[test]
    fn segments_tile_the_document(t in 1usize..400, window in 1usize..60, hop_frac in 0.05f64..1.0) {
        let hop = ((window as f64 * hop_frac).ceil() as usize).clamp(1, window);
        let frames = Tensor::from_vec(t, 1, (0..t).map(|i| i as f64).collect()).unwrap();
        let doc = SpeechFeatures::new(frames).unwrap();
        let segs = segment(9, &doc, window, hop).unwrap();
        prop_assert_eq!(segs.len(), segment_count(t, window, hop));
        prop_assert_eq!(segs[0].start, 0);
        prop_assert_eq!(segs.last().unwrap().end, t);
        for (i, s) in segs.iter().enumerate() {
            prop_assert_eq!((s.doc_id, s.segment_index as usize, s.start), (9, i, i * hop));
            prop_assert!(s.end > s.start && s.end - s.start <= window);
            prop_assert_eq!(s.features.frames().get(0, 0), s.start as f64);
            prop_assert_eq!(s.features.num_frames(), s.end - s.start);
        }
        for w in segs.windows(2) {
            prop_assert!(w[1].start <= w[0].end, "gap between windows");
        }
    }
}

fn tiny() -> (Model, clsr::corpus::SyntheticCorpus) {
    let corpus = generate_corpus(&CorpusConfig {
        pairs: 6,
        vocab_size: 12,
        feature_dim: 6,
        context_len: (3, 5),
        question_len: (2, 3),
        edge_silence: 1,
        ..CorpusConfig::default()
    })
    .unwrap();
    let model = Model::new(
        ModelConfig {
            vocab_size: 12,
            feature_dim: 6,
            d_model: 8,
            heads: 2,
            ff_dim: 16,
            speech_layers: 1,
            text_layers: 1,
            decoder_layers: 1,
            ..ModelConfig::default()
        },
        4,
    )
    .unwrap();
    (model, corpus)
}

#[test]
fn query_and_segment_vectors_are_unit_length() {
    let (model, corpus) = tiny();
    for p in &corpus.pairs {
        let q = embed_query(&model, Query::Text(&p.question)).unwrap().unwrap();
        assert!((q.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        if let Some(s) = embed_query(&model, Query::Speech(&p.context_speech)).unwrap() {
            assert!((s.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn built_index_survives_a_file_round_trip() {
    let (model, corpus) = tiny();
    let parts: Vec<&SpeechFeatures> = corpus.pairs.iter().map(|p| &p.context_speech).collect();
    let doc = SpeechFeatures::concat(&parts).unwrap();
    let segs = segment(3, &doc, 12, 8).unwrap();
    let (index, report) = build_index(&model, &segs, meta()).unwrap();
    assert_eq!(report.segments, segs.len());
    assert_eq!(index.len() + report.sentinels.len(), segs.len());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("segments.idx");
    save_index(&path, &index).unwrap();
    let loaded = load_index(&path).unwrap();
    assert_eq!(loaded.to_bytes(), index.to_bytes());
    let q = embed_query(&model, Query::Text(&corpus.pairs[0].question))
        .unwrap()
        .unwrap();
    assert_eq!(loaded.search_topk(&q, 5).unwrap(), index.search_topk(&q, 5).unwrap());
}

#[test]
fn heatmap_has_one_row_per_frame_and_cosine_range() {
    let (model, corpus) = tiny();
    for p in &corpus.pairs {
        match heatmap(&model, &p.question, &p.context_speech) {
            Ok(h) => {
                assert_eq!((h.rows(), h.cols()), (p.context_speech.num_frames(), p.question.len()));
                assert!(h.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
            Err(e) => assert!(e.to_string().contains("no token fired"), "{e}"),
        }
    }
}
