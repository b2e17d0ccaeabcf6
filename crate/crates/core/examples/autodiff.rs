//! Reverse-mode differentiation on the tape: y = Σ silu(x·W) ⊙ r.

use parashift::{Graph, Tensor};

fn main() -> parashift::Result<()> {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5])?.with_requires_grad(true));
    let w = g.leaf(Tensor::new(&[3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6])?.with_requires_grad(true));
    let r = g.constant(Tensor::new(&[2, 2], vec![1.0, -1.0, 0.5, 2.0])?);
    let h = g.matmul(x, w)?;
    let a = g.silu(h);
    let weighted = g.mul(a, r)?;
    let y = g.sum(weighted);
    g.backward(y)?;
    println!("y      = {:.6}", g.value(y).data()[0]);
    println!("dy/dx  = {:.6?}", g.grad(x).unwrap());
    println!("dy/dW  = {:.6?}", g.grad(w).unwrap());
    Ok(())
}
