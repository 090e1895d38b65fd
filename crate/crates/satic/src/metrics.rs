//! Reference-based caption scoring: corpus BLEU, ROUGE-L, and CIDEr-D.
//!
//! Captions are plain whitespace-tokenized strings (the synthetic corpus is
//! pre-tokenized, so no further normalization happens here). CIDEr-D needs
//! corpus document frequencies; they are computed once from a reference
//! corpus into [`NGramStats`] and passed in frozen, which keeps self-critical
//! rewards on a stable scale across datasets.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;
const CIDER_SIGMA: f64 = 6.0;
const ROUGE_BETA: f64 = 1.2;

type NGram = Vec<String>;

fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<NGram, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Document frequencies over a reference corpus, for CIDEr-D IDF weighting.
/// One document = one item's reference set; an n-gram counts once per item
/// no matter how many of that item's references contain it.
#[derive(Debug, Clone)]
pub struct NGramStats {
    n_docs: usize,
    df: HashMap<NGram, usize>,
}

impl NGramStats {
    pub fn from_references(references: &[Vec<String>]) -> Result<NGramStats> {
        if references.is_empty() {
            return Err(Error::validation("IDF source corpus is empty"));
        }
        let mut df = HashMap::new();
        for refs in references {
            let mut seen: HashSet<NGram> = HashSet::new();
            for r in refs {
                let tokens = tokenize(r);
                for n in 1..=MAX_ORDER {
                    if tokens.len() >= n {
                        for w in tokens.windows(n) {
                            seen.insert(w.to_vec());
                        }
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Ok(NGramStats {
            n_docs: references.len(),
            df,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    /// `ln(n_docs / df)`, with df clamped to at least 1 so unseen n-grams get
    /// the maximal weight instead of an infinity.
    pub fn idf(&self, gram: &[String]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0).max(1);
        (self.n_docs as f64 / df as f64).ln()
    }
}

fn check_inputs(candidates: &[String], references: &[Vec<String>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::validation("no candidates to score"));
    }
    if candidates.len() != references.len() {
        return Err(Error::validation(format!(
            "{} candidates vs {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::validation("every item needs at least one reference"));
    }
    Ok(())
}

/// Corpus-level BLEU with uniform weights over orders `1..=max_n`, clipped
/// n-gram precisions, and the closest-reference-length brevity penalty.
pub fn bleu(candidates: &[String], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    assert!((1..=MAX_ORDER).contains(&max_n), "order must be 1..=4");
    check_inputs(candidates, references)?;

    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        let ct = tokenize(cand);
        let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r)).collect();
        cand_len += ct.len();
        // Closest reference length; ties break toward the shorter one.
        let closest = ref_tokens
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(ct.len()), l))
            .unwrap();
        ref_len += closest;
        for n in 1..=max_n {
            let cc = ngram_counts(&ct, n);
            let mut ref_max: HashMap<NGram, usize> = HashMap::new();
            for r in &ref_tokens {
                for (g, c) in ngram_counts(r, n) {
                    let e = ref_max.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cc {
                matches[n - 1] += (*c).min(ref_max.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += ct.len().saturating_sub(n - 1);
        }
    }

    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if totals[n] == 0 || matches[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln() / max_n as f64;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_sum.exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: per item, the maximum over references of the LCS F-measure with
/// beta = 1.2, averaged over items.
pub fn rouge_l(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    check_inputs(candidates, references)?;
    let beta_sq = ROUGE_BETA * ROUGE_BETA;
    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let ct = tokenize(cand);
        let mut best = 0.0f64;
        for r in refs {
            let rt = tokenize(r);
            if ct.is_empty() || rt.is_empty() {
                continue;
            }
            let lcs = lcs_len(&ct, &rt) as f64;
            let p = lcs / ct.len() as f64;
            let rec = lcs / rt.len() as f64;
            if p + rec > 0.0 {
                best = best.max((1.0 + beta_sq) * rec * p / (rec + beta_sq * p));
            }
        }
        total += best;
    }
    Ok(total / candidates.len() as f64)
}

/// CIDEr-D: per order n in 1..4, TF(raw count) x IDF vectors, min-clipped
/// dot product normalized by vector norms, Gaussian length penalty
/// (sigma = 6), averaged over references and orders, x10. Returns the corpus
/// mean and the per-item scores.
pub fn cider_d(
    candidates: &[String],
    references: &[Vec<String>],
    idf: &NGramStats,
) -> Result<(f64, Vec<f64>)> {
    check_inputs(candidates, references)?;
    let mut per_item = Vec::with_capacity(candidates.len());
    for (cand, refs) in candidates.iter().zip(references) {
        let ct = tokenize(cand);
        let mut order_sums = [0.0f64; MAX_ORDER];
        for r in refs {
            let rt = tokenize(r);
            let delta = ct.len() as f64 - rt.len() as f64;
            let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 1..=MAX_ORDER {
                // Sorted maps pin the accumulation order, keeping scores
                // bit-reproducible across runs.
                let gc: BTreeMap<NGram, f64> = ngram_counts(&ct, n)
                    .into_iter()
                    .map(|(g, c)| {
                        let w = idf.idf(&g);
                        (g, c as f64 * w)
                    })
                    .collect();
                let gr: BTreeMap<NGram, f64> = ngram_counts(&rt, n)
                    .into_iter()
                    .map(|(g, c)| {
                        let w = idf.idf(&g);
                        (g, c as f64 * w)
                    })
                    .collect();
                let norm_c = gc.values().map(|v| v * v).sum::<f64>().sqrt();
                let norm_r = gr.values().map(|v| v * v).sum::<f64>().sqrt();
                if norm_c == 0.0 || norm_r == 0.0 {
                    continue;
                }
                let dot: f64 = gr
                    .iter()
                    .map(|(g, &vr)| gc.get(g).copied().unwrap_or(0.0).min(vr) * vr)
                    .sum();
                order_sums[n - 1] += penalty * dot / (norm_c * norm_r);
            }
        }
        let n_refs = refs.len() as f64;
        let score =
            10.0 * order_sums.iter().map(|s| s / n_refs).sum::<f64>() / MAX_ORDER as f64;
        per_item.push(score);
    }
    let corpus = per_item.iter().sum::<f64>() / per_item.len() as f64;
    Ok((corpus, per_item))
}

/// The eval command's output: corpus scores plus per-item CIDEr-D.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub n_items: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub per_item_cider: Vec<f64>,
}

/// Scores candidates on all metrics at once.
pub fn evaluate(
    candidates: &[String],
    references: &[Vec<String>],
    idf: &NGramStats,
) -> Result<EvalReport> {
    let bleu1 = bleu(candidates, references, 1)?;
    let bleu4 = bleu(candidates, references, 4)?;
    let rouge = rouge_l(candidates, references)?;
    let (cider, per_item) = cider_d(candidates, references, idf)?;
    Ok(EvalReport {
        n_items: candidates.len(),
        bleu1,
        bleu4,
        rouge_l: rouge,
        cider_d: cider,
        per_item_cider: per_item,
    })
}
