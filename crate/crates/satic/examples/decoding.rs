//! Group-parallel decoding: greedy, beam, and sampling from the same model,
//! showing how the model-call count scales with the group size K.
//!
//! Run with: cargo run --example decoding

use satic::data::{decode_caption, generate_corpus, CorpusConfig, Vocabulary};
use satic::decoding::{beam_decode, greedy_decode, greedy_decode_batch, sample_decode};
use satic::model::{Model, ModelConfig};
use satic::SplitMix64;

fn main() {
    let corpus = generate_corpus(&CorpusConfig {
        n_items: 20,
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
    let feats = corpus.train[0].region_features().unwrap();

    for k in [1usize, 2, 4, 8] {
        let config = ModelConfig {
            d_model: 32,
            n_heads: 2,
            d_k: 16,
            d_v: 16,
            d_ff: 64,
            n_layers: 2,
            vocab_size: vocab.len(),
            max_len: 16,
            k,
            dropout: 0.1,
            d_feat: 32,
        };
        let model = Model::new(config, 7).unwrap();
        let out = greedy_decode(&model, &feats, 16).unwrap();
        println!(
            "K={k}: {} tokens in {} model calls (ceil({}/{k}) = {}), log-prob {:.3}",
            out.tokens.len(),
            out.model_calls,
            out.tokens.len(),
            out.tokens.len().div_ceil(k),
            out.log_prob
        );
    }

    // One K=2 model, three decoding modes.
    let config = ModelConfig {
        d_model: 32,
        n_heads: 2,
        d_k: 16,
        d_v: 16,
        d_ff: 64,
        n_layers: 2,
        vocab_size: vocab.len(),
        max_len: 16,
        k: 2,
        dropout: 0.1,
        d_feat: 32,
    };
    let model = Model::new(config, 7).unwrap();

    let greedy = greedy_decode(&model, &feats, 16).unwrap();
    println!("\ngreedy: {:?}", decode_caption(&greedy.tokens, &vocab));

    let beam = beam_decode(&model, &feats, 3, 16).unwrap();
    println!(
        "beam(3): {:?} (log-prob {:.3} vs greedy {:.3})",
        decode_caption(&beam.tokens, &vocab),
        beam.log_prob,
        greedy.log_prob
    );

    let mut rng = SplitMix64::new(42);
    let sample = sample_decode(&model, &feats, 1.0, 16, &mut rng).unwrap();
    println!(
        "sample(T=1.0): {:?} ({} tokens)",
        decode_caption(&sample.tokens, &vocab),
        sample.tokens.len()
    );

    // Batched greedy decodes items in lockstep.
    let batch_feats: Vec<_> = corpus.train[..4]
        .iter()
        .map(|i| i.region_features().unwrap())
        .collect();
    let refs: Vec<_> = batch_feats.iter().collect();
    let (outs, batch_calls) = greedy_decode_batch(&model, &refs, 16).unwrap();
    println!("\nbatch of {}: {} shared model calls", outs.len(), batch_calls);
}
