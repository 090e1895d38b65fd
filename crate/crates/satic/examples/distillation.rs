//! Sequence knowledge distillation: replaces training references with a
//! teacher's beam captions and measures the entropy drop.
//!
//! Run with: cargo run --example distillation

use satic::data::{generate_corpus, CorpusConfig, Vocabulary};
use satic::metrics::NGramStats;
use satic::model::{Model, ModelConfig};
use satic::training::{
    distill_dataset, prepare_items, train_stage, unigram_conditional_entropy, Optimizer,
    OptimizerConfig, Stage, TrainOptions,
};

fn main() {
    let corpus = generate_corpus(&CorpusConfig {
        n_items: 80,
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
    let mut teacher = Model::new(config, 7).unwrap();

    // A briefly trained teacher is enough to demonstrate the mechanics.
    let refs: Vec<Vec<String>> = corpus.train.iter().map(|i| i.refs.clone()).collect();
    let idf = NGramStats::from_references(&refs).unwrap();
    let train = prepare_items(&corpus.train, &vocab, config.max_len).unwrap();
    let mut opt = Optimizer::new(OptimizerConfig::warmed_up(1e-3, 100));
    let opts = TrainOptions {
        epochs: 40,
        batch_size: 10,
        seed: 7,
        ..TrainOptions::default()
    };
    train_stage(
        &mut teacher,
        &mut opt,
        Stage::Xe,
        &train,
        &train[..10],
        &vocab,
        &idf,
        &opts,
        |rec, _, _| {
            if rec.epoch % 8 == 0 || rec.epoch + 1 == opts.epochs {
                println!("teacher epoch {} loss {:.4}", rec.epoch, rec.loss);
            }
            Ok(())
        },
    )
    .unwrap();

    let distilled = distill_dataset(&teacher, &corpus.train, 5, &vocab).unwrap();
    let item = &distilled[0];
    println!("\nitem {}:", item.id);
    println!("  teacher caption: {:?}", item.refs[0]);
    println!("  original ref:    {:?}", item.orig_refs.as_ref().unwrap()[0]);
    println!("  refs duplicated to {} copies", item.refs.len());

    println!(
        "\nunigram conditional entropy: original {:.3} nats, distilled {:.3} nats",
        unigram_conditional_entropy(&corpus.train),
        unigram_conditional_entropy(&distilled)
    );
}
