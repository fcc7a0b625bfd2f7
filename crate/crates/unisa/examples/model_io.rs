//! Model state mechanics: momentum target updates, bounded perturbation
//! views, clamping to the anchor band, and bit-exact parameter files.
//!
//!     cargo run --example model_io

use unisa::model::{Blocks, ModelState, NetworkPath, NetworkShape};
use unisa::tensor::DenseTensor;

fn main() {
    let shape = NetworkShape::dense(4, vec![8], 6, 4);
    let mut state = ModelState::init(shape, 0.01, 0.9, 7).unwrap();
    let x = DenseTensor::vector(vec![0.3, -0.2, 0.9, 0.1]).unwrap();

    let before = state.embed(&x, NetworkPath::Target).unwrap();
    // drift the online weights, then let the target chase them
    let w = state.qualified("phi.l0.w").unwrap().clone();
    let moved = DenseTensor::new(w.shape().to_vec(), w.data().iter().map(|v| v + 0.2).collect()).unwrap();
    state.set_qualified("phi.l0.w", moved).unwrap();
    for _ in 0..3 {
        state.momentum_update();
    }
    let after = state.embed(&x, NetworkPath::Target).unwrap();
    println!("target embedding moved: {:.4} -> {:.4} (first coord)", before.data()[0], after.data()[0]);

    // a perturbation is a view; the base weights stay put
    let eps: Blocks = state
        .phi()
        .iter()
        .map(|(k, v)| (k.clone(), DenseTensor::filled(v.shape(), 0.01)))
        .collect();
    let view = state.perturb(&eps).unwrap();
    println!(
        "perturbed view differs: {}, base unchanged: {}",
        view.phi() != state.phi(),
        state.perturb(&eps).unwrap().phi() == view.phi()
    );

    // anchor + clamp keep the extractor inside the flat band
    state.snapshot_anchor();
    let b = state.qualified("phi.l0.b").unwrap().clone();
    let bumped = DenseTensor::new(b.shape().to_vec(), b.data().iter().map(|v| v + 0.5).collect()).unwrap();
    state.set_qualified("phi.l0.b", bumped).unwrap();
    state.clamp_to_flat_region().unwrap();
    println!("max |phi - anchor| after clamp: {:.4}", state.max_anchor_deviation().unwrap());

    // parameters round-trip bit-exactly through the blob + sidecar pair
    let dir = std::env::temp_dir().join("unisa-model-io");
    std::fs::create_dir_all(&dir).unwrap();
    let blob = dir.join("params.bin");
    let sidecar = dir.join("params.json");
    state.save(&blob, &sidecar).unwrap();
    let loaded = ModelState::load(&blob, &sidecar).unwrap();
    println!("reloaded state equals saved state: {}", loaded == state);
    println!("files: {} and {}", blob.display(), sidecar.display());
}
