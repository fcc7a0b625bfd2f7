//! The differentiation engine on its own: build a graph, evaluate it, pull
//! gradients out of the reverse pass, and cross-check them against central
//! finite differences.
//!
//!     cargo run --example autodiff

use std::collections::BTreeMap;

use unisa::oracles;
use unisa::tensor::{DenseTensor, ValueGraph};

fn main() {
    let mut g = ValueGraph::new();
    let w = g
        .parameter_with(
            "w",
            DenseTensor::matrix(3, 2, vec![0.5, -0.2, 0.1, 0.8, -0.4, 0.3]).unwrap(),
        )
        .unwrap();
    let b = g
        .parameter_with("b", DenseTensor::vector(vec![0.1, -0.1]).unwrap())
        .unwrap();
    let x = g.constant_vector(&[1.0, 2.0, -1.0]);

    // y = relu(x W + b), loss = || y - target ||^2
    let h = g.matmul(x, w).unwrap();
    let h = g.add(h, b).unwrap();
    let y = g.relu(h);
    let target = g.constant_vector(&[1.0, 0.0]);
    let loss = g.squared_distance(y, target).unwrap();

    println!("forward: y = {:?}", g.evaluate(y).unwrap().data());
    println!("loss    = {:.6}", g.evaluate(loss).unwrap().item());

    let grads = g.gradient(loss, &["w", "b"]).unwrap();
    println!("dL/db   = {:?}", grads["b"].data());

    // the same gradients from the finite-difference oracle
    let mut at = BTreeMap::new();
    at.insert("w".to_string(), g_param(&g, "w"));
    at.insert("b".to_string(), g_param(&g, "b"));
    let mut f = |bind: &BTreeMap<String, DenseTensor>| {
        for (k, v) in bind {
            g.bind(k, v.clone()).unwrap();
        }
        g.evaluate(loss).unwrap().item()
    };
    let fd = oracles::finite_difference(&mut f, &at, 1e-4);
    let err = oracles::gradient_rel_err(&grads, &fd);
    println!("reverse pass vs finite differences: rel err {err:.3e}");
}

fn g_param(_g: &ValueGraph, name: &str) -> DenseTensor {
    // the example re-binds from the original values; reconstruct them here
    match name {
        "w" => DenseTensor::matrix(3, 2, vec![0.5, -0.2, 0.1, 0.8, -0.4, 0.3]).unwrap(),
        _ => DenseTensor::vector(vec![0.1, -0.1]).unwrap(),
    }
}
