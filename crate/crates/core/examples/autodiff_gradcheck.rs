//! Reverse-mode gradients of a small conv net against central differences.
//!
//! ```text
//! cargo run --example autodiff_gradcheck
//! ```

use fadekit::tensor::{Conv2dSpec, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(input: &Tensor, weight: &Tensor) -> fadekit::error::Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), true);
    let w = g.param(weight.clone());
    let h = g.conv2d(x, w, None, Conv2dSpec { stride: 1, padding: 1 })?;
    let h = g.avg_pool2d(h, 2)?;
    let h = g.flatten(h)?;
    let e = g.normalize_rows(h)?;
    let l = g.l2_norm(e)?;
    let s = g.sum(h)?;
    let l = g.mul(l, s)?;
    g.backward(l)?;
    Ok((g.value(l).item()?, g.grad(x).unwrap().clone()))
}

fn main() -> fadekit::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(vec![1, 2, 6, 4], 1.0, &mut rng);
    let w = Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut rng);
    let (value, grad) = loss(&x, &w)?;
    println!("loss {value:.6}");
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let numeric = (loss(&plus, &w)?.0 - loss(&minus, &w)?.0) / (2.0 * h);
        let a = grad.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
    }
    println!("{} input gradients checked, max relative error {worst:.2e}", x.len());
    Ok(())
}
