//! Decoding latency across group sizes and batch sizes on one set of
//! weights; the group size is a decode-time property.
//!
//! Run with: cargo run --example latency

use satic::data::{generate_corpus, CorpusConfig};
use satic::decoding::{bench_csv, measure_latency, BenchRow};
use satic::model::{Model, ModelConfig};

fn main() {
    let corpus = generate_corpus(&CorpusConfig {
        n_items: 40,
        seed: 7,
        ..CorpusConfig::default()
    })
    .unwrap();
    let feats: Vec<_> = corpus
        .test
        .iter()
        .chain(&corpus.val)
        .map(|i| i.region_features().unwrap())
        .collect();

    let config = ModelConfig {
        d_model: 64,
        n_heads: 4,
        d_k: 16,
        d_v: 16,
        d_ff: 128,
        n_layers: 2,
        vocab_size: 66,
        max_len: 16,
        k: 1,
        dropout: 0.1,
        d_feat: 32,
    };

    let mut rows = Vec::new();
    for bs in [1usize, 4] {
        let mut baseline = None;
        for k in [1usize, 2, 4] {
            let mut model = Model::new(config, 7).unwrap();
            model.set_k(k);
            let stats = measure_latency(&model, &feats, 1, bs, 2).unwrap();
            if k == 1 {
                baseline = Some(stats.mean_ms);
            }
            rows.push(BenchRow {
                k,
                bw: 1,
                batch_size: bs,
                mean_ms: stats.mean_ms,
                std_ms: stats.std_ms,
                model_calls: stats.calls_per_sentence,
                speedup: baseline.unwrap() / stats.mean_ms,
            });
        }
    }
    print!("{}", bench_csv(&rows));
}
