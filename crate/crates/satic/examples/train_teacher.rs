//! Trains a small K=1 autoregressive teacher for a few epochs and prints the
//! loss / validation-metric trajectory.
//!
//! Run with: cargo run --example train_teacher

use satic::data::{generate_corpus, CorpusConfig, Vocabulary};
use satic::metrics::NGramStats;
use satic::model::{Model, ModelConfig};
use satic::training::{prepare_items, train_stage, Optimizer, OptimizerConfig, Stage, TrainOptions};

fn main() {
    let corpus = generate_corpus(&CorpusConfig {
        n_items: 120,
        seed: 7,
        ..CorpusConfig::default()
    })
    .unwrap();
    let vocab = Vocabulary::build(
        corpus
            .train
            .iter()
            .flat_map(|i| i.refs.iter().map(String::as_str)),
        1,
    )
    .unwrap();

    let config = ModelConfig {
        d_model: 32,
        n_heads: 2,
        d_k: 16,
        d_v: 16,
        d_ff: 64,
        n_layers: 2,
        vocab_size: vocab.len(),
        max_len: 16,
        k: 1,
        dropout: 0.1,
        d_feat: 32,
    };
    let mut model = Model::new(config, 7).unwrap();

    let refs: Vec<Vec<String>> = corpus.train.iter().map(|i| i.refs.clone()).collect();
    let idf = NGramStats::from_references(&refs).unwrap();
    let train = prepare_items(&corpus.train, &vocab, config.max_len).unwrap();
    let val = prepare_items(&corpus.val, &vocab, config.max_len).unwrap();

    let mut opt = Optimizer::new(OptimizerConfig::warmed_up(1e-3, 100));
    let opts = TrainOptions {
        epochs: 6,
        batch_size: 10,
        seed: 7,
        ..TrainOptions::default()
    };
    train_stage(
        &mut model,
        &mut opt,
        Stage::Xe,
        &train,
        &val,
        &vocab,
        &idf,
        &opts,
        |rec, _, _| {
            println!(
                "epoch {} loss {:.4} val BLEU-1 {:.3} val CIDEr-D {:.3} ({:.1}s)",
                rec.epoch, rec.loss, rec.val_bleu1, rec.val_cider_d, rec.wall_time_s
            );
            Ok(())
        },
    )
    .unwrap();
    println!("optimizer steps taken: {}", opt.step());
}
