//! Checks reverse-mode gradients of a small composite graph against central
//! finite differences.
//!
//! Run with: cargo run --example gradcheck

use satic::graph::{gradcheck, Graph};
use satic::{Reduction, SplitMix64, Tensor};

fn main() {
    let mut rng = SplitMix64::new(11);
    let w_values: Vec<f64> = (0..12).map(|_| rng.normal() * 0.5).collect();
    let x_values: Vec<f64> = (0..8).map(|_| rng.normal()).collect();

    // loss(W) = cross_entropy(relu(X W), targets), X fixed, W trainable.
    let loss_at = |w: &[f64]| {
        let mut g = Graph::new();
        let x = g.leaf_matrix(2, 4, x_values.clone());
        let w = g.leaf_matrix(4, 3, w.to_vec());
        let h = g.matmul(x, w).unwrap();
        let h = g.relu(h);
        let loss = g.cross_entropy(h, &[2, 1], 0, Reduction::Mean).unwrap();
        (g, w, loss)
    };

    let (mut g, w, loss) = loss_at(&w_values);
    println!("loss = {:.6}", g.value(loss).item());
    g.backward(loss).unwrap();
    let analytic = g.grad(w).unwrap().to_vec();

    let numeric = gradcheck::finite_diff(
        |w| {
            let (g, _, loss) = loss_at(w);
            g.value(loss).item()
        },
        &w_values,
        1e-5,
    );

    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    println!("gradient entries checked: {}", analytic.len());
    println!("worst relative error vs finite differences: {worst:.2e}");
    assert!(worst < 1e-5);

    // A second backward on the same tape is refused.
    let err = g.backward(loss).unwrap_err();
    println!("second backward: {err}");

    // Dense leaf demo: tensors carry shape + values.
    let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    println!("tensor {:?} row 1 = {:?}", t.shape(), t.row(1));
}
