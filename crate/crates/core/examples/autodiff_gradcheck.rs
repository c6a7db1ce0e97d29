//! Reverse-mode gradients of a tiny two-layer network, checked against
//! central finite differences.

use dtwireless::numerics::{grad_check, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let w1 = Tensor::uniform(&[3, 5], -0.5, 0.5, &mut rng);
    let w2 = Tensor::uniform(&[5, 2], -0.5, 0.5, &mut rng);
    let targets = [0usize, 1, 1, 0];

    let net = |g: &mut Graph, w1v| {
        let xv = g.constant(x.clone());
        let h = g.matmul(xv, w1v)?;
        let h = g.gelu(h)?;
        let w2v = g.constant(w2.clone());
        let logits = g.matmul(h, w2v)?;
        g.cross_entropy(logits, &targets, &[1.0; 4])
    };

    let mut g = Graph::new();
    let w = g.param(w1.clone());
    let loss = net(&mut g, w).unwrap();
    let grads = g.backward(loss).unwrap();
    println!("loss {:.6}", g.value(loss).item());
    println!("dL/dW1 {:?}", grads.get(w).unwrap().data());

    let err = grad_check(net, &w1, 1e-5).unwrap();
    println!("worst relative error vs finite differences: {err:.2e}");
}
