//! Tour of the tensor tape: record a small computation over named
//! parameters, pull gradients out of the reverse sweep, and cross-check one
//! of them against central finite differences.
//!
//!     cargo run --example autodiff_gradients

use st_llm::graph::Graph;
use st_llm::param::{ParamSet, Parameter};
use st_llm::tensor::Tensor;

fn build_loss(g: &mut Graph, params: &ParamSet, x: &Tensor) -> st_llm::NodeId {
    let w = g.param(params, "w").unwrap();
    let b = g.param(params, "b").unwrap();
    let gamma = g.param(params, "gamma").unwrap();
    let beta = g.param(params, "beta").unwrap();
    let input = g.leaf(x.clone());
    let h = g.matmul(input, w).unwrap();
    let h = g.add(h, b).unwrap();
    let h = g.layer_norm(h, gamma, beta, 1e-5).unwrap();
    let h = g.gelu(h);
    let sq = g.mul(h, h).unwrap();
    g.mean_all(sq).unwrap()
}

fn main() {
    let mut params = ParamSet::new();
    params
        .insert(Parameter::new(
            "w",
            Tensor::new(vec![3, 2], vec![0.4, -0.2, 0.1, 0.7, -0.5, 0.3]).unwrap(),
        ))
        .unwrap();
    params.insert(Parameter::new("b", Tensor::new(vec![2], vec![0.05, -0.1]).unwrap())).unwrap();
    params.insert(Parameter::new("gamma", Tensor::full(&[2], 1.0))).unwrap();
    params.insert(Parameter::new("beta", Tensor::zeros(&[2]))).unwrap();
    let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 / 6.0) - 1.0).collect()).unwrap();

    let mut g = Graph::new();
    let loss = build_loss(&mut g, &params, &x);
    println!("loss = {:.6}", g.value(loss).item().unwrap());

    let grads = g.backward(loss).unwrap();
    for (name, grad) in &grads {
        println!("d loss / d {name}: {:?}", grad.data());
    }

    // frozen parameters drop out of the gradient map entirely
    params.set_frozen("gamma", true);
    let mut g2 = Graph::new();
    let loss2 = build_loss(&mut g2, &params, &x);
    let frozen_grads = g2.backward(loss2).unwrap();
    println!(
        "with gamma frozen the gradient map holds: {:?}",
        frozen_grads.keys().collect::<Vec<_>>()
    );

    // finite-difference spot check on w[0]
    params.set_frozen("gamma", false);
    let h = 1e-5;
    let eval = |delta: f64| {
        let mut p = params.clone();
        p.get_mut("w").unwrap().tensor.data_mut()[0] += delta;
        let mut g = Graph::new();
        let l = build_loss(&mut g, &p, &x);
        g.value(l).item().unwrap()
    };
    let fd = (eval(h) - eval(-h)) / (2.0 * h);
    let analytic = grads["w"].data()[0];
    println!("w[0]: analytic {analytic:.8} vs finite difference {fd:.8}");
    assert!((analytic - fd).abs() < 1e-6);
    println!("they agree.");
}
