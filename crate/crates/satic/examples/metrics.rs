//! Caption metrics on hand-written examples: BLEU, ROUGE-L, and CIDEr-D.
//!
//! Run with: cargo run --example metrics

use satic::metrics::{bleu, cider_d, evaluate, rouge_l, NGramStats};

fn main() {
    let references: Vec<Vec<String>> = vec![
        vec![
            "a red cat sits on a small mat".to_string(),
            "the red cat rests on a mat".to_string(),
        ],
        vec![
            "a blue bird flies over the tree".to_string(),
            "the blue bird passes above a tree".to_string(),
        ],
        vec![
            "two dogs play near the fence".to_string(),
            "a pair of dogs play by the fence".to_string(),
        ],
    ];
    let candidates = vec![
        "a red cat sits on a mat".to_string(),
        "a blue bird flies over a tree".to_string(),
        "two dogs run near the fence".to_string(),
    ];

    let idf = NGramStats::from_references(&references).unwrap();
    println!("BLEU-1  {:.4}", bleu(&candidates, &references, 1).unwrap());
    println!("BLEU-4  {:.4}", bleu(&candidates, &references, 4).unwrap());
    println!("ROUGE-L {:.4}", rouge_l(&candidates, &references).unwrap());
    let (corpus, per_item) = cider_d(&candidates, &references, &idf).unwrap();
    println!("CIDEr-D {corpus:.4} (per item: {per_item:.3?})");

    // Perfect candidates with a single reference max out CIDEr-D at 10.
    let perfect: Vec<String> = references.iter().map(|r| r[0].clone()).collect();
    let single: Vec<Vec<String>> = references.iter().map(|r| vec![r[0].clone()]).collect();
    let idf_single = NGramStats::from_references(&single).unwrap();
    let (ten, _) = cider_d(&perfect, &single, &idf_single).unwrap();
    println!("identical candidates vs single refs: CIDEr-D = {ten:.4}");

    let report = evaluate(&candidates, &references, &idf).unwrap();
    println!("\nfull report: {report:#?}");
}
