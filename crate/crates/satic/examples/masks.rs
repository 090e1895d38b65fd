//! Prints relaxed block-causal attention patterns for several group sizes.
//!
//! Run with: cargo run --example masks

use satic::{causal_mask, group_of, relaxed_mask};

fn draw(t: usize, k: usize) {
    let mask = relaxed_mask(t, k);
    println!("T={t}, K={k} (row = query, column = key, # = visible)");
    for i in 0..t {
        let row: String = (0..t)
            .map(|j| if mask.is_allowed(i, j) { '#' } else { '.' })
            .collect();
        println!("  {row}  group {}", group_of(i, k));
    }
    println!();
}

fn main() {
    // K=1 is the classic causal triangle.
    draw(8, 1);
    // K=3: each position sees its own group and everything before it.
    draw(8, 3);
    // K >= T: every position sees every other, fully parallel.
    draw(8, 8);

    let causal = causal_mask(8);
    let relaxed = relaxed_mask(8, 1);
    let same = (0..8).all(|i| (0..8).all(|j| causal.is_allowed(i, j) == relaxed.is_allowed(i, j)));
    println!("relaxed_mask(T, 1) == causal_mask(T): {same}");
}
