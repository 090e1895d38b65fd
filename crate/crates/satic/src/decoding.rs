//! Group-stepped inference: greedy, beam, and sampling decoders that emit K
//! tokens per model call, plus the latency benchmark harness.
//!
//! Decoding runs in plain value land (no autodiff tape). Each decode keeps a
//! [`DecodeState`] with per-layer self-attention key/value caches over the
//! fed input positions; one [`extend_batch`] call feeds the next K-token
//! group and returns the logits for the K new positions. No attention mask
//! is needed incrementally: the cache holds exactly the earlier groups, and
//! the K new positions belong to one group and may all see each other, which
//! reproduces the relaxed mask row for row.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::time::Instant;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, RegionFeatures, Session, LAYER_NORM_EPS};
use crate::rng::SplitMix64;
use crate::tensor::{layer_norm_into, matmul_into, softmax_rows_masked, Tensor};

/// Encoder output projected through every decoder layer's cross-attention
/// key/value weights, computed once per item and shared by all hypotheses.
#[derive(Debug, Clone)]
pub struct EncodedItem {
    n_regions: usize,
    /// Per layer: `[n_regions, n_heads*d_k]`.
    cross_k: Vec<Vec<f64>>,
    /// Per layer: `[n_regions, n_heads*d_v]`.
    cross_v: Vec<Vec<f64>>,
}

impl EncodedItem {
    pub fn n_regions(&self) -> usize {
        self.n_regions
    }
}

fn p<'a>(model: &'a Model, name: &str) -> &'a Tensor {
    model
        .param(name)
        .unwrap_or_else(|| panic!("parameter {name} exists by construction"))
}

fn mm(a: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let k = w.shape()[0];
    let n = w.shape()[1];
    debug_assert_eq!(a.len(), rows * k);
    let mut out = vec![0.0; rows * n];
    matmul_into(&mut out, a, w.values(), rows, k, n);
    out
}

fn add_bias(x: &mut [f64], b: &Tensor) {
    let n = b.numel();
    for row in x.chunks_mut(n) {
        for (v, &bv) in row.iter_mut().zip(b.values()) {
            *v += bv;
        }
    }
}

/// Post-norm residual: `x = LN(x + sub)` with the gain/bias at `prefix.norm`.
fn post_norm(model: &Model, prefix: &str, x: &mut Vec<f64>, sub: &[f64], rows: usize, d: usize) {
    for (v, &s) in x.iter_mut().zip(sub) {
        *v += s;
    }
    let gain = p(model, &format!("{prefix}.norm.gain"));
    let bias = p(model, &format!("{prefix}.norm.bias"));
    let mut out = vec![0.0; rows * d];
    layer_norm_into(&mut out, x, gain.values(), bias.values(), rows, d, LAYER_NORM_EPS);
    *x = out;
}

/// Unmasked multi-head attention of `q` over cached `keys`/`vals`, heads as
/// column slices. Writes the concatenated head outputs.
fn attend_heads(
    out: &mut [f64],
    q: &[f64],
    keys: &[f64],
    vals: &[f64],
    rows_q: usize,
    rows_kv: usize,
    n_heads: usize,
    d_k: usize,
    d_v: usize,
) -> Result<()> {
    let hk = n_heads * d_k;
    let hv = n_heads * d_v;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut scores = vec![0.0; rows_q * rows_kv];
    let mut probs = vec![0.0; rows_q * rows_kv];
    for h in 0..n_heads {
        let qo = h * d_k;
        let vo = h * d_v;
        for i in 0..rows_q {
            for j in 0..rows_kv {
                let mut acc = 0.0;
                for c in 0..d_k {
                    acc += q[i * hk + qo + c] * keys[j * hk + qo + c];
                }
                scores[i * rows_kv + j] = acc * scale;
            }
        }
        softmax_rows_masked(&mut probs, &scores, rows_q, rows_kv, |_| None)?;
        for i in 0..rows_q {
            for c in 0..d_v {
                let mut acc = 0.0;
                for j in 0..rows_kv {
                    acc += probs[i * rows_kv + j] * vals[j * hv + vo + c];
                }
                out[i * hv + vo + c] = acc;
            }
        }
    }
    Ok(())
}

/// Runs the encoder once and projects its output through every decoder
/// layer's cross-attention keys/values.
pub fn encode_item(model: &Model, feats: &RegionFeatures) -> Result<EncodedItem> {
    let mut sess = Session::eval(model);
    let enc_var = sess.encode(feats)?;
    let enc = sess.graph.value(enc_var);
    let n = feats.n_regions();
    let mut cross_k = Vec::with_capacity(model.config.n_layers);
    let mut cross_v = Vec::with_capacity(model.config.n_layers);
    for l in 0..model.config.n_layers {
        cross_k.push(mm(enc.values(), n, p(model, &format!("dec.{l}.cross_attn.w_k"))));
        cross_v.push(mm(enc.values(), n, p(model, &format!("dec.{l}.cross_attn.w_v"))));
    }
    Ok(EncodedItem {
        n_regions: n,
        cross_k,
        cross_v,
    })
}

/// Per-hypothesis incremental decoder state: self-attention caches over the
/// fed input positions plus an instrumented call counter.
#[derive(Debug, Clone)]
pub struct DecodeState {
    fed: usize,
    /// Per layer: `[fed, n_heads*d_k]`.
    self_k: Vec<Vec<f64>>,
    /// Per layer: `[fed, n_heads*d_v]`.
    self_v: Vec<Vec<f64>>,
    calls: usize,
}

impl DecodeState {
    pub fn new(model: &Model) -> DecodeState {
        DecodeState {
            fed: 0,
            self_k: vec![Vec::new(); model.config.n_layers],
            self_v: vec![Vec::new(); model.config.n_layers],
            calls: 0,
        }
    }

    /// Input positions fed so far (a multiple of K).
    pub fn fed(&self) -> usize {
        self.fed
    }

    /// Decoder invocations so far.
    pub fn calls(&self) -> usize {
        self.calls
    }
}

/// Feeds one K-token input group per item and returns each item's `[K, V]`
/// logits for the K new positions. Items step in lockstep (same K, which
/// must equal the model's effective group size); weight multiplications are
/// stacked across items, attention runs per item against its own caches.
pub fn extend_batch(
    model: &Model,
    encs: &[&EncodedItem],
    states: &mut [&mut DecodeState],
    ids: &[&[usize]],
) -> Result<Vec<Tensor>> {
    let cfg = model.config;
    let b = encs.len();
    if b == 0 || states.len() != b || ids.len() != b {
        return Err(Error::validation(
            "extend_batch needs matching nonempty item/state/id slices",
        ));
    }
    let k = cfg.k_eff();
    for (st, row) in states.iter().zip(ids) {
        if row.len() != k {
            return Err(Error::validation(format!(
                "input group has {} ids, model group size is {k}",
                row.len()
            )));
        }
        if st.fed + k > cfg.pe_rows() {
            return Err(Error::validation(format!(
                "decode length {} exceeds position table ({} rows)",
                st.fed + k,
                cfg.pe_rows()
            )));
        }
        for &id in *row {
            if id >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
        }
    }

    let mut out = Vec::with_capacity(b);
    let mut offset = 0;
    for block in states.chunks_mut(extend_block_items(model, encs)) {
        let n = block.len();
        out.extend(extend_block(
            model,
            &encs[offset..offset + n],
            block,
            &ids[offset..offset + n],
        )?);
        offset += n;
    }
    Ok(out)
}

/// Items stacked per weight multiplication in one block. Blocks are sized so
/// the decode-side weights plus every block item's worst-case attention
/// caches fit a typical per-core L2; the split changes locality only, never
/// results.
fn extend_block_items(model: &Model, encs: &[&EncodedItem]) -> usize {
    const CACHE_BUDGET_BYTES: usize = 3 << 19;
    let cfg = model.config;
    let per_row = 8 * cfg.n_layers * cfg.n_heads * (cfg.d_k + cfg.d_v);
    let regions = encs.iter().map(|e| e.n_regions).max().unwrap_or(0);
    let per_item = (per_row * (cfg.max_len + regions)).max(1);
    let weight_bytes = model
        .params()
        .filter(|(name, _)| !name.starts_with("enc."))
        .map(|(_, t)| 8 * t.numel())
        .sum();
    (CACHE_BUDGET_BYTES.saturating_sub(weight_bytes) / per_item).max(1)
}

fn extend_block(
    model: &Model,
    encs: &[&EncodedItem],
    states: &mut [&mut DecodeState],
    ids: &[&[usize]],
) -> Result<Vec<Tensor>> {
    let cfg = model.config;
    let b = encs.len();
    let k = cfg.k_eff();
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let hk = cfg.n_heads * cfg.d_k;
    let hv = cfg.n_heads * cfg.d_v;
    let rows = b * k;
    let embed = p(model, "embed.tok");
    let pe = model.pe();
    let scale = (d as f64).sqrt();

    let mut x = vec![0.0; rows * d];
    for i in 0..b {
        for r in 0..k {
            let row = i * k + r;
            let tok = ids[i][r];
            let pos = states[i].fed + r;
            for c in 0..d {
                x[row * d + c] = embed.values()[tok * d + c] * scale + pe.at(pos, c);
            }
        }
    }

    for l in 0..cfg.n_layers {
        let q = mm(&x, rows, p(model, &format!("dec.{l}.self_attn.w_q")));
        let k_new = mm(&x, rows, p(model, &format!("dec.{l}.self_attn.w_k")));
        let v_new = mm(&x, rows, p(model, &format!("dec.{l}.self_attn.w_v")));
        let mut ctx = vec![0.0; rows * hv];
        for i in 0..b {
            let st = &mut *states[i];
            st.self_k[l].extend_from_slice(&k_new[i * k * hk..(i + 1) * k * hk]);
            st.self_v[l].extend_from_slice(&v_new[i * k * hv..(i + 1) * k * hv]);
            let rows_kv = st.fed + k;
            attend_heads(
                &mut ctx[i * k * hv..(i + 1) * k * hv],
                &q[i * k * hk..(i + 1) * k * hk],
                &st.self_k[l],
                &st.self_v[l],
                k,
                rows_kv,
                cfg.n_heads,
                cfg.d_k,
                cfg.d_v,
            )?;
        }
        let attn = mm(&ctx, rows, p(model, &format!("dec.{l}.self_attn.w_o")));
        post_norm(model, &format!("dec.{l}.self_attn"), &mut x, &attn, rows, d);

        let q2 = mm(&x, rows, p(model, &format!("dec.{l}.cross_attn.w_q")));
        let mut ctx = vec![0.0; rows * hv];
        for i in 0..b {
            attend_heads(
                &mut ctx[i * k * hv..(i + 1) * k * hv],
                &q2[i * k * hk..(i + 1) * k * hk],
                &encs[i].cross_k[l],
                &encs[i].cross_v[l],
                k,
                encs[i].n_regions,
                cfg.n_heads,
                cfg.d_k,
                cfg.d_v,
            )?;
        }
        let cross = mm(&ctx, rows, p(model, &format!("dec.{l}.cross_attn.w_o")));
        post_norm(model, &format!("dec.{l}.cross_attn"), &mut x, &cross, rows, d);

        let mut h1 = mm(&x, rows, p(model, &format!("dec.{l}.ffn.w1")));
        add_bias(&mut h1, p(model, &format!("dec.{l}.ffn.b1")));
        for hv1 in h1.iter_mut() {
            if *hv1 < 0.0 {
                *hv1 = 0.0;
            }
        }
        let mut f = mm(&h1, rows, p(model, &format!("dec.{l}.ffn.w2")));
        add_bias(&mut f, p(model, &format!("dec.{l}.ffn.b2")));
        post_norm(model, &format!("dec.{l}.ffn"), &mut x, &f, rows, d);
    }

    let mut logits = mm(&x, rows, p(model, "out_proj.w"));
    add_bias(&mut logits, p(model, "out_proj.b"));
    for st in states.iter_mut() {
        st.fed += k;
        st.calls += 1;
    }
    Ok((0..b)
        .map(|i| Tensor::matrix(k, v, logits[i * k * v..(i + 1) * k * v].to_vec()))
        .collect())
}

/// Single-item [`extend_batch`].
pub fn extend(
    model: &Model,
    enc: &EncodedItem,
    state: &mut DecodeState,
    ids: &[usize],
) -> Result<Tensor> {
    let mut out = extend_batch(model, &[enc], &mut [state], &[ids])?;
    Ok(out.pop().unwrap())
}

/// A finished decode: generated ids (through the first END, inclusive, when
/// one was emitted), the log-probability of exactly those ids, and the
/// number of decoder invocations.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub model_calls: usize,
}

fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|&v| v - lse).collect()
}

/// Argmax with ties to the lowest id.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_cap(model: &Model, max_len: usize) -> Result<usize> {
    if max_len == 0 || max_len > model.config.max_len {
        return Err(Error::validation(format!(
            "max_len {max_len} outside 1..={}",
            model.config.max_len
        )));
    }
    Ok(max_len)
}

/// Greedy group decoding of a batch in lockstep: every step feeds one input
/// group per item (finished items are fed PAD and masked from scoring) until
/// all items have emitted END or hit `max_len`. Returns per-item outputs
/// plus the number of batched decoder invocations.
pub fn greedy_decode_batch(
    model: &Model,
    feats: &[&RegionFeatures],
    max_len: usize,
) -> Result<(Vec<DecodeOutput>, usize)> {
    let encs: Vec<EncodedItem> = feats
        .iter()
        .map(|f| encode_item(model, f))
        .collect::<Result<_>>()?;
    let enc_refs: Vec<&EncodedItem> = encs.iter().collect();
    greedy_decode_batch_from(model, &enc_refs, max_len)
}

/// [`greedy_decode_batch`] starting from already-encoded items.
pub fn greedy_decode_batch_from(
    model: &Model,
    enc_refs: &[&EncodedItem],
    max_len: usize,
) -> Result<(Vec<DecodeOutput>, usize)> {
    let cap = check_cap(model, max_len)?;
    if enc_refs.is_empty() {
        return Err(Error::validation("greedy_decode_batch needs at least one item"));
    }
    let k = model.config.k_eff();
    let b = enc_refs.len();
    let mut states: Vec<DecodeState> = (0..b).map(|_| DecodeState::new(model)).collect();
    let mut prev: Vec<Vec<usize>> = vec![vec![Vocabulary::START; k]; b];
    let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut log_prob = vec![0.0; b];
    let mut live_calls = vec![0usize; b];
    let mut finished = vec![false; b];
    let mut batch_calls = 0usize;

    while finished.iter().any(|f| !f) {
        batch_calls += 1;
        let id_rows: Vec<&[usize]> = prev.iter().map(Vec::as_slice).collect();
        let mut state_refs: Vec<&mut DecodeState> = states.iter_mut().collect();
        let logits = extend_batch(model, enc_refs, &mut state_refs, &id_rows)?;
        for i in 0..b {
            if finished[i] {
                continue;
            }
            live_calls[i] += 1;
            let mut group = Vec::with_capacity(k);
            for r in 0..k {
                let logps = log_softmax_row(logits[i].row(r));
                let id = argmax(&logps);
                group.push(id);
                if finished[i] {
                    continue;
                }
                tokens[i].push(id);
                log_prob[i] += logps[id];
                if id == Vocabulary::END || tokens[i].len() == cap {
                    finished[i] = true;
                }
            }
            prev[i] = if finished[i] {
                vec![Vocabulary::PAD; k]
            } else {
                group
            };
        }
    }

    let outputs = (0..b)
        .map(|i| DecodeOutput {
            tokens: std::mem::take(&mut tokens[i]),
            log_prob: log_prob[i],
            model_calls: live_calls[i],
        })
        .collect();
    Ok((outputs, batch_calls))
}

/// Greedy group decoding of one item: argmax independently at each of the K
/// new positions, stop after the first group containing END or at `max_len`.
pub fn greedy_decode(model: &Model, feats: &RegionFeatures, max_len: usize) -> Result<DecodeOutput> {
    let (mut out, _) = greedy_decode_batch(model, &[feats], max_len)?;
    Ok(out.pop().unwrap())
}

struct Hyp {
    state: DecodeState,
    prev: Vec<usize>,
    tokens: Vec<usize>,
    /// Selection score: sum of all per-position log-probs of every emitted
    /// group, including positions after END in the final group.
    score: f64,
    /// Log-probability of `tokens` only (through END).
    log_prob: f64,
    finished: bool,
}

struct FrontierNode {
    sum: f64,
    group: Vec<usize>,
    idx: Vec<usize>,
}

impl PartialEq for FrontierNode {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for FrontierNode {}

impl PartialOrd for FrontierNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FrontierNode {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap: higher sum first, ties toward lexicographically
        // smaller groups.
        self.sum
            .total_cmp(&other.sum)
            .then_with(|| other.group.cmp(&self.group))
    }
}

/// Best-first enumeration of the top `bw` K-position combinations out of
/// per-position candidate lists sorted by descending log-prob.
fn top_group_candidates(lists: &[Vec<(f64, usize)>], bw: usize) -> Vec<(f64, Vec<usize>)> {
    let k = lists.len();
    let start_idx = vec![0usize; k];
    let node_of = |idx: &[usize]| {
        let mut sum = 0.0;
        let mut group = Vec::with_capacity(k);
        for (r, &c) in idx.iter().enumerate() {
            let (lp, id) = lists[r][c];
            sum += lp;
            group.push(id);
        }
        FrontierNode {
            sum,
            group,
            idx: idx.to_vec(),
        }
    };
    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    seen.insert(start_idx.clone());
    heap.push(node_of(&start_idx));
    let mut out = Vec::with_capacity(bw);
    while out.len() < bw {
        let Some(node) = heap.pop() else { break };
        for r in 0..k {
            if node.idx[r] + 1 < lists[r].len() {
                let mut next = node.idx.clone();
                next[r] += 1;
                if seen.insert(next.clone()) {
                    heap.push(node_of(&next));
                }
            }
        }
        out.push((node.sum, node.group));
    }
    out
}

/// Group-level beam search: each step extends every live hypothesis by one
/// K-token group, enumerating up to `beam_width` candidate groups per
/// hypothesis (per-position top-`beam_width` tokens, best-first over the
/// sorted lists, group score = sum of the K per-position log-probs) and
/// keeping the global top `beam_width` by cumulative score, ties toward
/// lexicographically smaller token sequences. Finished hypotheses compete
/// with their fixed score; tokens after the first END in the final group are
/// discarded.
pub fn beam_decode(
    model: &Model,
    feats: &RegionFeatures,
    beam_width: usize,
    max_len: usize,
) -> Result<DecodeOutput> {
    let enc = encode_item(model, feats)?;
    beam_decode_from(model, &enc, beam_width, max_len)
}

/// [`beam_decode`] starting from an already-encoded item.
pub fn beam_decode_from(
    model: &Model,
    enc: &EncodedItem,
    beam_width: usize,
    max_len: usize,
) -> Result<DecodeOutput> {
    let cap = check_cap(model, max_len)?;
    if beam_width == 0 {
        return Err(Error::validation("beam width must be at least 1"));
    }
    let k = model.config.k_eff();
    let mut hyps = vec![Hyp {
        state: DecodeState::new(model),
        prev: vec![Vocabulary::START; k],
        tokens: Vec::new(),
        score: 0.0,
        log_prob: 0.0,
        finished: false,
    }];
    let mut steps = 0usize;

    while hyps.iter().any(|h| !h.finished) {
        steps += 1;
        let live: Vec<usize> = (0..hyps.len()).filter(|&i| !hyps[i].finished).collect();
        let prevs: Vec<Vec<usize>> = live.iter().map(|&i| hyps[i].prev.clone()).collect();
        let id_rows: Vec<&[usize]> = prevs.iter().map(Vec::as_slice).collect();
        let enc_refs: Vec<&EncodedItem> = live.iter().map(|_| enc).collect();
        // Split-borrow the live hypotheses' states.
        let mut live_states: Vec<&mut DecodeState> = Vec::with_capacity(live.len());
        {
            let mut rest: &mut [Hyp] = &mut hyps;
            let mut taken = 0usize;
            for &i in &live {
                let (_, tail) = rest.split_at_mut(i - taken);
                let (h, tail) = tail.split_first_mut().unwrap();
                live_states.push(&mut h.state);
                rest = tail;
                taken = i + 1;
            }
        }
        let logits = extend_batch(model, &enc_refs, &mut live_states, &id_rows)?;

        // Candidate pool: carried finished hypotheses plus up to bw group
        // expansions per live hypothesis.
        struct Cand {
            parent: usize,
            group: Option<Vec<usize>>,
            score: f64,
            tokens: Vec<usize>,
        }
        let mut pool: Vec<Cand> = Vec::new();
        for (i, h) in hyps.iter().enumerate() {
            if h.finished {
                pool.push(Cand {
                    parent: i,
                    group: None,
                    score: h.score,
                    tokens: h.tokens.clone(),
                });
            }
        }
        for (li, &i) in live.iter().enumerate() {
            let mut lists = Vec::with_capacity(k);
            for r in 0..k {
                let logps = log_softmax_row(logits[li].row(r));
                let mut cands: Vec<(f64, usize)> =
                    logps.iter().enumerate().map(|(id, &lp)| (lp, id)).collect();
                cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                cands.truncate(beam_width);
                lists.push(cands);
            }
            for (sum, group) in top_group_candidates(&lists, beam_width) {
                let mut tokens = hyps[i].tokens.clone();
                for &id in &group {
                    tokens.push(id);
                    if id == Vocabulary::END || tokens.len() == cap {
                        break;
                    }
                }
                pool.push(Cand {
                    parent: i,
                    group: Some(group),
                    score: hyps[i].score + sum,
                    tokens,
                });
            }
        }
        pool.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        pool.truncate(beam_width);

        let mut next = Vec::with_capacity(pool.len());
        for cand in pool {
            let parent = &hyps[cand.parent];
            match cand.group {
                None => next.push(Hyp {
                    state: parent.state.clone(),
                    prev: parent.prev.clone(),
                    tokens: cand.tokens,
                    score: cand.score,
                    log_prob: parent.log_prob,
                    finished: true,
                }),
                Some(group) => {
                    let mut kept_logp = parent.log_prob;
                    let mut finished = false;
                    let mut len = parent.tokens.len();
                    for (r, &id) in group.iter().enumerate() {
                        let logps = log_softmax_row(
                            logits[live.iter().position(|&x| x == cand.parent).unwrap()].row(r),
                        );
                        kept_logp += logps[id];
                        len += 1;
                        if id == Vocabulary::END || len == cap {
                            finished = true;
                            break;
                        }
                    }
                    next.push(Hyp {
                        state: parent.state.clone(),
                        prev: group,
                        tokens: cand.tokens,
                        score: cand.score,
                        log_prob: kept_logp,
                        finished,
                    });
                }
            }
        }
        hyps = next;
    }

    let best = hyps
        .into_iter()
        .min_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .unwrap();
    Ok(DecodeOutput {
        tokens: best.tokens,
        log_prob: best.log_prob,
        model_calls: steps,
    })
}

/// A sampled decode: tokens, the log-probability of each kept token under
/// the untempered model distribution, and decoder invocations.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub model_calls: usize,
}

/// Multinomial group decoding at the given temperature. One uniform draw is
/// consumed per kept position in emission order; positions after END in the
/// final group consume no draws. The returned per-token log-probs are under
/// the untempered distribution (temperature affects sampling only).
pub fn sample_decode(
    model: &Model,
    feats: &RegionFeatures,
    temperature: f64,
    max_len: usize,
    rng: &mut SplitMix64,
) -> Result<SampleOutput> {
    let cap = check_cap(model, max_len)?;
    if !(temperature > 0.0) {
        return Err(Error::validation("temperature must be positive"));
    }
    let k = model.config.k_eff();
    let enc = encode_item(model, feats)?;
    let mut state = DecodeState::new(model);
    let mut prev = vec![Vocabulary::START; k];
    let mut tokens = Vec::new();
    let mut log_probs = Vec::new();

    'outer: loop {
        let logits = extend(model, &enc, &mut state, &prev)?;
        let mut group = Vec::with_capacity(k);
        for r in 0..k {
            let row = logits.row(r);
            let logps = log_softmax_row(row);
            let scaled: Vec<f64> = row.iter().map(|&v| v / temperature).collect();
            let mut probs = vec![0.0; row.len()];
            softmax_rows_masked(&mut probs, &scaled, 1, row.len(), |_| None)?;
            let u = rng.next_f64();
            let mut cum = 0.0;
            let mut id = probs.len() - 1;
            for (j, &pr) in probs.iter().enumerate() {
                cum += pr;
                if u < cum {
                    id = j;
                    break;
                }
            }
            group.push(id);
            tokens.push(id);
            log_probs.push(logps[id]);
            if id == Vocabulary::END || tokens.len() == cap {
                break 'outer;
            }
        }
        prev = group;
    }

    Ok(SampleOutput {
        tokens,
        log_probs,
        model_calls: state.calls(),
    })
}

/// One latency measurement: mean/std of per-sentence wall-clock and the mean
/// number of decoder invocations each sentence's decode participated in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub calls_per_sentence: f64,
}

/// Times decoding of `items` at the given beam width and batch size, after
/// `warmup` untimed decodes. Feature encoding runs before the clock starts;
/// the timed window covers decoding only. Batched runs require bw=1 (greedy);
/// per-sentence latency is batch wall time divided by batch size. Uses a
/// monotonic clock.
pub fn measure_latency(
    model: &Model,
    items: &[RegionFeatures],
    bw: usize,
    batch_size: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    if items.is_empty() {
        return Err(Error::validation("latency benchmark needs a nonempty dataset"));
    }
    if batch_size == 0 || bw == 0 {
        return Err(Error::validation("batch size and beam width must be at least 1"));
    }
    if bw > 1 && batch_size > 1 {
        return Err(Error::validation(
            "batched benchmarking is defined for greedy decoding only (bw=1)",
        ));
    }
    let cap = model.config.max_len;
    let encs: Vec<EncodedItem> = items
        .iter()
        .map(|f| encode_item(model, f))
        .collect::<Result<_>>()?;
    for _ in 0..warmup {
        if bw == 1 {
            greedy_decode_batch_from(model, &[&encs[0]], cap)?;
        } else {
            beam_decode_from(model, &encs[0], bw, cap)?;
        }
    }

    // (per-sentence ms, sentences, calls) per timed chunk.
    let mut chunks: Vec<(f64, usize, usize)> = Vec::new();
    for chunk in encs.chunks(batch_size) {
        let refs: Vec<&EncodedItem> = chunk.iter().collect();
        let t0 = Instant::now();
        let calls = if bw == 1 {
            let (_, batch_calls) = greedy_decode_batch_from(model, &refs, cap)?;
            batch_calls
        } else {
            beam_decode_from(model, refs[0], bw, cap)?.model_calls
        };
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        chunks.push((ms / chunk.len() as f64, chunk.len(), calls));
    }

    let n: usize = chunks.iter().map(|c| c.1).sum();
    let mean_ms = chunks.iter().map(|c| c.0 * c.1 as f64).sum::<f64>() / n as f64;
    let var = chunks
        .iter()
        .map(|c| c.1 as f64 * (c.0 - mean_ms) * (c.0 - mean_ms))
        .sum::<f64>()
        / n as f64;
    let calls_per_sentence = chunks.iter().map(|c| (c.2 * c.1) as f64).sum::<f64>() / n as f64;
    Ok(LatencyStats {
        mean_ms,
        std_ms: var.sqrt(),
        calls_per_sentence,
    })
}

/// One row of the benchmark table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub bw: usize,
    pub batch_size: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub model_calls: f64,
    pub speedup: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("k,bw,batch_size,mean_ms,std_ms,model_calls,speedup\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.2},{:.2}\n",
            r.k, r.bw, r.batch_size, r.mean_ms, r.std_ms, r.model_calls, r.speedup
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::relaxed_mask;
    use crate::model::ModelConfig;

    fn tiny_config(vocab: usize, k: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_k: 8,
            d_v: 8,
            d_ff: 32,
            n_layers: 2,
            vocab_size: vocab,
            max_len: 10,
            k,
            dropout: 0.1,
            d_feat: 6,
        }
    }

    fn random_feats(rng: &mut SplitMix64, n_regions: usize, d_feat: usize) -> RegionFeatures {
        let values: Vec<f64> = (0..n_regions * d_feat).map(|_| rng.normal()).collect();
        RegionFeatures::new(n_regions, d_feat, values).unwrap()
    }

    /// Full re-forward logits over all fed inputs under the relaxed mask.
    fn full_logits(model: &Model, feats: &RegionFeatures, fed: &[usize]) -> Tensor {
        let mut sess = Session::eval(model);
        let enc = sess.encode(feats).unwrap();
        let mask = relaxed_mask(fed.len(), model.config.k_eff());
        let out = sess.decode(fed, enc, Some(&mask)).unwrap();
        sess.graph.value(out).clone()
    }

    #[test]
    fn incremental_logits_match_full_reforward() {
        for seed in 0..4 {
            let model = Model::new(tiny_config(14, 3), 100 + seed).unwrap();
            let mut rng = SplitMix64::new(900 + seed);
            let feats = random_feats(&mut rng, 1 + (seed as usize % 3), 6);
            let enc = encode_item(&model, &feats).unwrap();
            let mut state = DecodeState::new(&model);
            let mut fed: Vec<usize> = Vec::new();
            let mut group = vec![Vocabulary::START; 3];
            for _ in 0..3 {
                let logits = extend(&model, &enc, &mut state, &group).unwrap();
                fed.extend_from_slice(&group);
                let full = full_logits(&model, &feats, &fed);
                let t = fed.len();
                for r in 0..3 {
                    for c in 0..14 {
                        let a = logits.at(r, c);
                        let b = full.at(t - 3 + r, c);
                        assert!((a - b).abs() < 1e-9, "seed {seed} r{r} c{c}: {a} vs {b}");
                    }
                }
                group = (0..3).map(|_| rng.below(14)).collect();
            }
            assert_eq!(state.fed(), 9);
            assert_eq!(state.calls(), 3);
        }
    }

    #[test]
    fn k1_greedy_matches_ar_reference_loop() {
        for seed in 0..3 {
            let model = Model::new(tiny_config(12, 1), 40 + seed).unwrap();
            let mut rng = SplitMix64::new(70 + seed);
            let feats = random_feats(&mut rng, 2, 6);
            let got = greedy_decode(&model, &feats, 10).unwrap();

            let mut fed = vec![Vocabulary::START];
            let mut tokens = Vec::new();
            let mut log_prob = 0.0;
            loop {
                let full = full_logits(&model, &feats, &fed);
                let logps = log_softmax_row(full.row(fed.len() - 1));
                let id = argmax(&logps);
                tokens.push(id);
                log_prob += logps[id];
                if id == Vocabulary::END || tokens.len() == 10 {
                    break;
                }
                fed.push(id);
            }
            assert_eq!(got.tokens, tokens, "seed {seed}");
            assert!((got.log_prob - log_prob).abs() < 1e-9);
            assert_eq!(got.model_calls, got.tokens.len());
        }
    }

    #[test]
    fn k_at_least_t_decodes_in_one_call() {
        for k in [10, 25] {
            let model = Model::new(tiny_config(12, k), 3).unwrap();
            let mut rng = SplitMix64::new(4);
            let feats = random_feats(&mut rng, 2, 6);
            let out = greedy_decode(&model, &feats, 10).unwrap();
            assert_eq!(out.model_calls, 1);
            assert!(out.tokens.len() <= 10);
        }
    }

    #[test]
    fn model_calls_equal_ceil_of_length_over_k() {
        for k in [1, 2, 3, 4, 6] {
            for seed in 0..4 {
                let model = Model::new(tiny_config(12, k), 50 + seed).unwrap();
                let mut rng = SplitMix64::new(60 + seed);
                let feats = random_feats(&mut rng, 3, 6);
                let out = greedy_decode(&model, &feats, 10).unwrap();
                let k_eff = model.config.k_eff();
                assert_eq!(out.model_calls, out.tokens.len().div_ceil(k_eff), "k={k}");
            }
        }
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        for k in [1, 2, 4] {
            for seed in 0..4 {
                let model = Model::new(tiny_config(14, k), 200 + seed).unwrap();
                let mut rng = SplitMix64::new(300 + seed);
                let feats = random_feats(&mut rng, 2 + seed as usize % 2, 6);
                let greedy = greedy_decode(&model, &feats, 10).unwrap();
                let beam = beam_decode(&model, &feats, 1, 10).unwrap();
                assert_eq!(beam.tokens, greedy.tokens, "k={k} seed={seed}");
                assert!((beam.log_prob - greedy.log_prob).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn k1_beam_matches_token_level_beam_oracle() {
        let bw = 3;
        for seed in 0..3 {
            let model = Model::new(tiny_config(10, 1), 500 + seed).unwrap();
            let mut rng = SplitMix64::new(600 + seed);
            let feats = random_feats(&mut rng, 2, 6);
            let got = beam_decode(&model, &feats, bw, 8).unwrap();

            // Classic token-level beam with full re-forward per hypothesis.
            struct OH {
                tokens: Vec<usize>,
                score: f64,
                finished: bool,
            }
            let mut hyps = vec![OH {
                tokens: vec![],
                score: 0.0,
                finished: false,
            }];
            while hyps.iter().any(|h| !h.finished) {
                let mut pool: Vec<OH> = Vec::new();
                for h in &hyps {
                    if h.finished {
                        pool.push(OH {
                            tokens: h.tokens.clone(),
                            score: h.score,
                            finished: true,
                        });
                        continue;
                    }
                    let mut fed = vec![Vocabulary::START];
                    fed.extend_from_slice(&h.tokens);
                    let full = full_logits(&model, &feats, &fed);
                    let logps = log_softmax_row(full.row(fed.len() - 1));
                    for (id, &lp) in logps.iter().enumerate() {
                        let mut tokens = h.tokens.clone();
                        tokens.push(id);
                        let finished = id == Vocabulary::END || tokens.len() == 8;
                        pool.push(OH {
                            tokens,
                            score: h.score + lp,
                            finished,
                        });
                    }
                }
                pool.sort_by(|a, b| {
                    b.score
                        .total_cmp(&a.score)
                        .then_with(|| a.tokens.cmp(&b.tokens))
                });
                pool.truncate(bw);
                hyps = pool;
            }
            let best = &hyps[0];
            assert_eq!(got.tokens, best.tokens, "seed {seed}");
            assert!((got.log_prob - best.score).abs() < 1e-9);
        }
    }

    #[test]
    fn toy_beam_matches_exhaustive_group_oracle() {
        // V=4, max_len=4, K=2, bw=2: enumerate all 16 candidate groups per
        // live hypothesis with full re-forward logits and prune exactly.
        let bw = 2;
        let cap = 4;
        for seed in 0..5 {
            let cfg = ModelConfig {
                d_model: 8,
                n_heads: 2,
                d_k: 4,
                d_v: 4,
                d_ff: 16,
                n_layers: 1,
                vocab_size: 4,
                max_len: 4,
                k: 2,
                dropout: 0.1,
                d_feat: 5,
            };
            let model = Model::new(cfg, 900 + seed).unwrap();
            let mut rng = SplitMix64::new(1000 + seed);
            let feats = random_feats(&mut rng, 2, 5);
            let got = beam_decode(&model, &feats, bw, cap).unwrap();

            struct OH {
                inputs: Vec<usize>,
                tokens: Vec<usize>,
                score: f64,
                log_prob: f64,
                finished: bool,
            }
            let mut hyps = vec![OH {
                inputs: vec![Vocabulary::START, Vocabulary::START],
                tokens: vec![],
                score: 0.0,
                log_prob: 0.0,
                finished: false,
            }];
            while hyps.iter().any(|h| !h.finished) {
                let mut pool: Vec<OH> = Vec::new();
                for h in &hyps {
                    if h.finished {
                        pool.push(OH {
                            inputs: h.inputs.clone(),
                            tokens: h.tokens.clone(),
                            score: h.score,
                            log_prob: h.log_prob,
                            finished: true,
                        });
                        continue;
                    }
                    let full = full_logits(&model, &feats, &h.inputs);
                    let t = h.inputs.len();
                    let lp0 = log_softmax_row(full.row(t - 2));
                    let lp1 = log_softmax_row(full.row(t - 1));
                    for a in 0..4 {
                        for b in 0..4 {
                            let mut tokens = h.tokens.clone();
                            let mut log_prob = h.log_prob;
                            let mut finished = false;
                            for &(id, lp) in &[(a, lp0[a]), (b, lp1[b])] {
                                tokens.push(id);
                                log_prob += lp;
                                if id == Vocabulary::END || tokens.len() == cap {
                                    finished = true;
                                    break;
                                }
                            }
                            let mut inputs = h.inputs.clone();
                            inputs.extend_from_slice(&[a, b]);
                            pool.push(OH {
                                inputs,
                                tokens,
                                score: h.score + lp0[a] + lp1[b],
                                log_prob,
                                finished,
                            });
                        }
                    }
                }
                pool.sort_by(|x, y| {
                    y.score
                        .total_cmp(&x.score)
                        .then_with(|| x.tokens.cmp(&y.tokens))
                });
                pool.truncate(bw);
                hyps = pool;
            }
            let best = &hyps[0];
            assert_eq!(got.tokens, best.tokens, "seed {seed}");
            assert!((got.log_prob - best.log_prob).abs() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_logps_are_definitional() {
        let model = Model::new(tiny_config(14, 3), 7).unwrap();
        let mut rng = SplitMix64::new(8);
        let feats = random_feats(&mut rng, 3, 6);
        let a = sample_decode(&model, &feats, 1.0, 10, &mut SplitMix64::new(42)).unwrap();
        let b = sample_decode(&model, &feats, 1.0, 10, &mut SplitMix64::new(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), a.log_probs.len());
        assert_eq!(a.model_calls, a.tokens.len().div_ceil(3));
        // Re-evaluate each kept log-prob against the full re-forward.
        let k = model.config.k_eff();
        let mut fed = vec![Vocabulary::START; k];
        let groups = a.tokens.len().div_ceil(k);
        for g in 1..groups {
            let mut grp: Vec<usize> = a.tokens[(g - 1) * k..g * k].to_vec();
            grp.resize(k, Vocabulary::PAD);
            fed.extend_from_slice(&grp);
        }
        let full = full_logits(&model, &feats, &fed);
        for (i, (&tok, &lp)) in a.tokens.iter().zip(&a.log_probs).enumerate() {
            let logps = log_softmax_row(full.row(i));
            assert!((logps[tok] - lp).abs() < 1e-9, "position {i}");
        }
    }

    #[test]
    fn near_zero_temperature_recovers_greedy() {
        for seed in 0..5 {
            let model = Model::new(tiny_config(14, 2), 20 + seed).unwrap();
            let mut rng = SplitMix64::new(30 + seed);
            let feats = random_feats(&mut rng, 2, 6);
            let greedy = greedy_decode(&model, &feats, 10).unwrap();
            let sampled =
                sample_decode(&model, &feats, 1e-9, 10, &mut SplitMix64::new(99)).unwrap();
            assert_eq!(sampled.tokens, greedy.tokens, "seed {seed}");
        }
    }

    #[test]
    fn batched_greedy_matches_single_item_decodes() {
        let model = Model::new(tiny_config(14, 3), 77).unwrap();
        let mut rng = SplitMix64::new(78);
        let feats: Vec<RegionFeatures> =
            (0..5).map(|i| random_feats(&mut rng, 1 + i % 4, 6)).collect();
        let refs: Vec<&RegionFeatures> = feats.iter().collect();
        let (batch, batch_calls) = greedy_decode_batch(&model, &refs, 10).unwrap();
        let mut max_single = 0;
        for (i, f) in feats.iter().enumerate() {
            let single = greedy_decode(&model, f, 10).unwrap();
            assert_eq!(batch[i].tokens, single.tokens, "item {i}");
            assert!((batch[i].log_prob - single.log_prob).abs() < 1e-12);
            assert_eq!(batch[i].model_calls, single.model_calls);
            max_single = max_single.max(single.model_calls);
        }
        assert_eq!(batch_calls, max_single);
    }

    #[test]
    fn latency_measurement_reports_sane_numbers() {
        let model = Model::new(tiny_config(14, 2), 5).unwrap();
        let mut rng = SplitMix64::new(6);
        let items: Vec<RegionFeatures> = (0..4).map(|_| random_feats(&mut rng, 2, 6)).collect();
        let single = measure_latency(&model, &items, 1, 1, 1).unwrap();
        assert!(single.mean_ms > 0.0);
        assert!(single.std_ms >= 0.0);
        assert!(single.calls_per_sentence >= 1.0);
        let batched = measure_latency(&model, &items, 1, 2, 0).unwrap();
        assert!(batched.mean_ms > 0.0);
        let beam = measure_latency(&model, &items[..1], 2, 1, 0).unwrap();
        assert!(beam.mean_ms > 0.0);

        assert!(measure_latency(&model, &[], 1, 1, 0).is_err());
        assert!(measure_latency(&model, &items, 2, 2, 0).is_err());
    }

    #[test]
    fn bench_csv_has_header_and_rows() {
        let rows = [
            BenchRow {
                k: 1,
                bw: 1,
                batch_size: 1,
                mean_ms: 1.5,
                std_ms: 0.1,
                model_calls: 16.0,
                speedup: 1.0,
            },
            BenchRow {
                k: 4,
                bw: 1,
                batch_size: 1,
                mean_ms: 0.5,
                std_ms: 0.05,
                model_calls: 4.0,
                speedup: 3.0,
            },
        ];
        let csv = bench_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "k,bw,batch_size,mean_ms,std_ms,model_calls,speedup");
        assert!(lines[1].starts_with("1,1,1,"));
        assert!(lines[2].ends_with("3.00"));
    }

    #[test]
    fn extend_validates_inputs() {
        let model = Model::new(tiny_config(12, 3), 9).unwrap();
        let mut rng = SplitMix64::new(10);
        let feats = random_feats(&mut rng, 2, 6);
        let enc = encode_item(&model, &feats).unwrap();
        let mut state = DecodeState::new(&model);
        assert!(extend(&model, &enc, &mut state, &[1, 1]).is_err());
        assert!(extend(&model, &enc, &mut state, &[1, 1, 99]).is_err());
        assert_eq!(state.fed(), 0);
        // Exceeding the position table is rejected.
        let mut state = DecodeState::new(&model);
        for _ in 0..6 {
            extend(&model, &enc, &mut state, &[1, 1, 1]).unwrap();
        }
        assert!(extend(&model, &enc, &mut state, &[1, 1, 1]).is_err());
    }
}
