//! Build a small expression graph, run the reverse pass and compare one
//! gradient with a finite difference.
//!
//!     cargo run --example autodiff

use kdlab::tensor::{Graph, Tensor};

fn loss(w: &[f64]) -> kdlab::Result<(f64, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![2, 3], &[0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?)?;
    let w = g.leaf(Tensor::from_f64(vec![3, 2], w)?)?;
    let h = g.matmul(x, w)?;
    let h = g.gelu(h)?;
    let p = g.log_softmax(h)?;
    let picked = g.select_last(p, &[1, 0])?;
    let nll = g.mean(picked)?;
    let nll = g.scale(nll, -1.0)?;
    g.backward(nll)?;
    Ok((g.value(nll).data()[0], g.grad(w).expect("leaf has a gradient").data().to_vec()))
}

fn main() -> kdlab::Result<()> {
    let w = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
    let (value, grad) = loss(&w)?;
    println!("loss = {value:.6}");
    println!("dloss/dw = {grad:.6?}");

    let h = 1e-5;
    let (mut plus, mut minus) = (w, w);
    plus[0] += h;
    minus[0] -= h;
    let fd = (loss(&plus)?.0 - loss(&minus)?.0) / (2.0 * h);
    println!("w[0]: analytic {:.9}, central difference {fd:.9}", grad[0]);
    Ok(())
}
