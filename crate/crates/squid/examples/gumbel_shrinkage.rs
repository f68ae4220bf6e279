//! Top-k shrinkage of similarity scores: sparse in the forward pass, with
//! full-softmax gradients in the backward pass.
//!
//! cargo run --example gumbel_shrinkage

use squid::memory::{gumbel_shrinkage, hard_shrinkage};
use tch::{Kind, Tensor};

fn show(label: &str, t: &Tensor) {
    let v = Vec::<f64>::try_from(t.flatten(0, -1)).unwrap();
    let cells: Vec<String> = v.iter().map(|x| format!("{x:7.4}")).collect();
    println!("{label:<22}{}", cells.join(" "));
}

fn main() -> squid::Result<()> {
    let w = Tensor::from_slice(&[0.9f64, 0.1, 0.7, -0.3, 0.5, 0.2]).set_requires_grad(true);
    let k = 3;
    show("similarities", &w);

    let soft = w.softmax(-1, Kind::Double);
    let gumbel = gumbel_shrinkage(&w, k)?;
    let hard = hard_shrinkage(&w, k)?;
    show("softmax", &soft);
    show("top-3 forward", &gumbel);
    println!("sum of top-3 weights   {:.6}", gumbel.sum(Kind::Double).double_value(&[]));

    // Same upstream gradient through each variant.
    let upstream = Tensor::from_slice(&[1.0f64, -2.0, 0.5, 3.0, 0.0, 1.5]);
    let grad = |y: &Tensor| {
        let g = Tensor::run_backward(&[(y * &upstream).sum(Kind::Double)], &[&w], false, false);
        g[0].shallow_clone()
    };
    show("grad via softmax", &grad(&soft));
    show("grad via gumbel", &grad(&gumbel));
    show("grad via hard top-k", &grad(&hard));
    Ok(())
}
