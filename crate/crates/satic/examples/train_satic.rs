//! Trains a K=2 semi-autoregressive captioner initialized from a teacher,
//! then fine-tunes it with self-critical training.
//!
//! Run with: cargo run --example train_satic

use satic::data::{generate_corpus, CorpusConfig, Vocabulary};
use satic::metrics::NGramStats;
use satic::model::{Model, ModelConfig};
use satic::training::{
    init_from_teacher, prepare_items, train_stage, Optimizer, OptimizerConfig, Stage,
    TrainOptions,
};

fn main() {
    let corpus = generate_corpus(&CorpusConfig {
        n_items: 100,
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
    let teacher_config = ModelConfig {
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

    let refs: Vec<Vec<String>> = corpus.train.iter().map(|i| i.refs.clone()).collect();
    let idf = NGramStats::from_references(&refs).unwrap();
    let train = prepare_items(&corpus.train, &vocab, teacher_config.max_len).unwrap();
    let val = prepare_items(&corpus.val, &vocab, teacher_config.max_len).unwrap();

    let mut teacher = Model::new(teacher_config, 7).unwrap();
    let mut opt = Optimizer::new(OptimizerConfig::warmed_up(1e-3, 100));
    let opts = TrainOptions {
        epochs: 30,
        batch_size: 10,
        seed: 7,
        ..TrainOptions::default()
    };
    println!("teacher (K=1):");
    train_stage(
        &mut teacher, &mut opt, Stage::Xe, &train, &val, &vocab, &idf, &opts,
        |rec, _, _| {
            if rec.epoch % 6 == 0 || rec.epoch + 1 == opts.epochs {
                println!("  xe epoch {} loss {:.4}", rec.epoch, rec.loss);
            }
            Ok(())
        },
    )
    .unwrap();

    // Student shares every dimension except the group size.
    let mut satic = Model::new(teacher_config.with_k(2), 99).unwrap();
    init_from_teacher(&mut satic, &teacher).unwrap();

    println!("satic (K=2, weight-init):");
    let mut opt = Optimizer::new(OptimizerConfig::warmed_up(1e-3, 100));
    train_stage(
        &mut satic, &mut opt, Stage::Xe, &train, &val, &vocab, &idf, &opts,
        |rec, _, _| {
            if rec.epoch % 6 == 0 || rec.epoch + 1 == opts.epochs {
                println!(
                    "  xe epoch {} loss {:.4} val CIDEr-D {:.3}",
                    rec.epoch, rec.loss, rec.val_cider_d
                );
            }
            Ok(())
        },
    )
    .unwrap();

    let mut opt = Optimizer::new(OptimizerConfig::constant(5e-5));
    let sc_opts = TrainOptions {
        epochs: 2,
        batch_size: 10,
        seed: 8,
        n_samples: 5,
        ..TrainOptions::default()
    };
    train_stage(
        &mut satic, &mut opt, Stage::Scst, &train, &val, &vocab, &idf, &sc_opts,
        |rec, _, _| {
            println!(
                "  scst epoch {} loss {:+.5} val CIDEr-D {:.3}",
                rec.epoch, rec.loss, rec.val_cider_d
            );
            Ok(())
        },
    )
    .unwrap();
}
