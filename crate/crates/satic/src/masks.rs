//! Relaxed block-causal attention masks.
//!
//! Positions are grouped into consecutive blocks of `K`; position `i` may
//! attend position `j` exactly when `j`'s group is at or before `i`'s group.
//! `K = 1` recovers the standard causal mask, `K >= T` removes masking
//! entirely. Masks are additive: allowed entries are `0.0`, forbidden ones
//! are `-inf`, so they can be summed onto attention logits directly.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Group index of a position for group size `k`.
pub fn group_of(pos: usize, k: usize) -> usize {
    assert!(k >= 1, "group size must be positive");
    pos / k
}

/// How a target sequence of length `t` splits into groups of size `k`.
/// All groups are full except possibly the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub t: usize,
    pub k: usize,
    pub n_groups: usize,
    pub last_group_len: usize,
}

impl GroupLayout {
    pub fn new(t: usize, k: usize) -> GroupLayout {
        assert!(t >= 1, "empty sequence has no layout");
        assert!(k >= 1, "group size must be positive");
        let n_groups = (t - 1) / k + 1;
        GroupLayout {
            t,
            k,
            n_groups,
            last_group_len: t - (n_groups - 1) * k,
        }
    }

    /// Half-open position range `[start, end)` of group `g`.
    pub fn group_range(&self, g: usize) -> (usize, usize) {
        assert!(g < self.n_groups);
        (g * self.k, ((g + 1) * self.k).min(self.t))
    }
}

/// A `T x T` additive attention mask.
#[derive(Debug, PartialEq)]
pub struct AttentionMask {
    t: usize,
    k: usize,
    entries: Vec<f64>,
}

impl AttentionMask {
    /// Side length `T`.
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    /// Group size the mask was built for.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.t..(i + 1) * self.t]
    }

    /// Whether query position `i` may attend key position `j`.
    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.t + j] == 0.0
    }
}

fn mask_cache() -> &'static Mutex<HashMap<(usize, usize), Arc<AttentionMask>>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<AttentionMask>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// The relaxed mask for sequence length `t` and group size `k`, built once
/// per `(t, k)` pair and shared.
pub fn relaxed_mask(t: usize, k: usize) -> Arc<AttentionMask> {
    assert!(k >= 1, "group size must be positive");
    let mut cache = mask_cache().lock().expect("mask cache poisoned");
    cache
        .entry((t, k))
        .or_insert_with(|| {
            let mut entries = vec![0.0; t * t];
            for i in 0..t {
                let gi = group_of(i, k);
                for j in 0..t {
                    if group_of(j, k) > gi {
                        entries[i * t + j] = f64::NEG_INFINITY;
                    }
                }
            }
            Arc::new(AttentionMask { t, k, entries })
        })
        .clone()
}

/// Standard causal mask: the `k = 1` special case of [`relaxed_mask`].
pub fn causal_mask(t: usize) -> Arc<AttentionMask> {
    relaxed_mask(t, 1)
}
