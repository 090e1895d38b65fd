//! Generates a small synthetic captioning corpus and shows what one item
//! looks like: scene, references, features, and the vocabulary built on top.
//!
//! Run with: cargo run --example corpus

use satic::data::{encode_caption, generate_corpus, CorpusConfig, Vocabulary};

fn main() {
    let cfg = CorpusConfig {
        n_items: 50,
        seed: 7,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    println!(
        "splits: {} train / {} val / {} test",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len()
    );

    let item = &corpus.train[0];
    println!("\nitem {}:", item.id);
    for obj in &item.scene.objects {
        println!(
            "  object: {} {} {} in slot {}",
            obj.size_word(),
            obj.color_word(),
            obj.category_word(),
            obj.slot
        );
    }
    println!("  features: {} regions x {} dims", item.features.len(), item.features[0].len());
    for r in &item.refs {
        println!("  ref: {r}");
    }

    // Same seed, same corpus, byte for byte.
    let again = generate_corpus(&cfg).unwrap();
    println!("\ndeterministic: {}", again.train == corpus.train);

    let vocab = Vocabulary::build(
        corpus
            .train
            .iter()
            .flat_map(|i| i.refs.iter().map(String::as_str)),
        1,
    )
    .unwrap();
    println!("vocabulary: {} tokens (specials included)", vocab.len());

    let ids = encode_caption(&item.refs[0], &vocab, 16);
    println!("encoded first ref: {ids:?}");
}
