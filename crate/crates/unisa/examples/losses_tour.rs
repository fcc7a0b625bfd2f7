//! Every loss term on small crafted inputs, plus the two composites.
//!
//!     cargo run --example losses_tour

use unisa::losses::{self, BaseTerms, FewshotTerms, LossWeights};
use unisa::tensor::{DenseTensor, ValueGraph};

fn unit(d: usize, i: usize) -> DenseTensor {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    DenseTensor::vector(v).unwrap()
}

fn main() {
    let weights = LossWeights::default();
    let mut g = ValueGraph::new();

    // prototype scattering: two orthogonal prototypes, aug copies equal
    let c1 = g.parameter_with("c1", unit(4, 0)).unwrap();
    let c2 = g.parameter_with("c2", unit(4, 1)).unwrap();
    let a1 = g.constant(unit(4, 0));
    let a2 = g.constant(unit(4, 1));
    let psl = losses::psl(&mut g, &[c1, c2], &[a1, a2], 1.0).unwrap();
    println!("psl (orthogonal prototypes, tau 1): {:+.4}", g.evaluate(psl).unwrap().item());

    // positive alignment: squared distance between views
    let online = g.constant_vector(&[0.7, 0.1, -0.2, 0.4]);
    let target = g.constant_vector(&[0.5, 0.2, -0.1, 0.4]);
    let psa = losses::psa(&mut g, online, target).unwrap();
    println!("psa: {:.4}", g.evaluate(psa).unwrap().item());

    // uniformity KL on head outputs
    let flat = g.constant_vector(&[0.0; 4]);
    let kl_flat = losses::kl_uniform(&mut g, flat).unwrap();
    let spiky = g.constant_vector(&[6.0, 0.0, 0.0, 0.0]);
    let kl_spiky = losses::kl_uniform(&mut g, spiky).unwrap();
    println!(
        "kl: uniform {:.4}, spiky {:.4} (bound ln 4 = {:.4})",
        g.evaluate(kl_flat).unwrap().item(),
        g.evaluate(kl_spiky).unwrap().item(),
        4.0f64.ln()
    );

    // cluster drift between prototype generations
    let star1 = g.constant(unit(4, 0));
    let star2 = g.constant_vector(&[0.0, 0.8, 0.6, 0.0]);
    let drift = losses::drift(&mut g, &[c1, c2], &[star1, star2]).unwrap();
    println!("drift: {:.4}", g.evaluate(drift).unwrap().item());

    // triplet on a synthetic sample between two centroids
    let z = g.constant_vector(&[0.3, 0.0]);
    let own = g.constant_vector(&[0.0, 0.0]);
    let other = g.constant_vector(&[0.6, 0.0]);
    let ball = losses::ball_triplet(&mut g, &[(z, 0)], &[own, other], 0.5).unwrap();
    println!("ball triplet (open hinge): {:.4}", g.evaluate(ball).unwrap().item());

    // importance penalty against a previous-task snapshot
    let theta = g.parameter_with("theta", DenseTensor::vector(vec![0.5, -0.5, 1.0]).unwrap()).unwrap();
    let prev = g.constant_vector(&[0.4, -0.4, 1.0]);
    let gamma = g.constant_vector(&[2.0, 1.0, 0.5]);
    let mas = losses::mas_penalty(&mut g, &[theta], &[prev], &[gamma], weights.lambda5).unwrap();
    println!("mas penalty: {:.4}", g.evaluate(mas).unwrap().item());

    // the composites wire the weights and report per-term values
    let (_, base_report) = losses::base_loss(
        &mut g,
        &BaseTerms {
            psl: Some(psl),
            psa: Some(psa),
            kl: Some(kl_spiky),
            drift: Some(drift),
        },
        &weights,
    )
    .unwrap();
    println!("base composite: {base_report:?}");

    let (_, fs_report) = losses::fewshot_loss(
        &mut g,
        &FewshotTerms {
            psl: Some(psl),
            psa: Some(psa),
            kl: Some(kl_spiky),
            ball: Some(ball),
            mas: Some(mas),
        },
        &weights,
    )
    .unwrap();
    println!("few-shot composite: {fs_report:?}");
}
