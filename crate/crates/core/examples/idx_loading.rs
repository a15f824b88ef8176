//! Load the bundled MNIST subset and print a few statistics.

use std::path::PathBuf;

use macgrad::data::load_idx;
use macgrad::nn::Targets;

fn main() -> macgrad::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let ds = load_idx(
        &dir.join("mnist-10k-images-idx3-ubyte.gz"),
        &dir.join("mnist-10k-labels-idx1-ubyte.gz"),
    )?;
    println!(
        "{} examples of shape {:?}, {} classes",
        ds.len(),
        ds.example_shape(),
        ds.classes
    );
    if let Targets::Classes(labels) = &ds.y {
        let mut counts = vec![0usize; ds.classes];
        labels.iter().for_each(|&l| counts[l] += 1);
        println!("label counts {counts:?}");
    }
    let x = ds.design_matrix()?;
    let mean = x.data().iter().sum::<f64>() / x.len() as f64;
    println!("mean pixel {mean:.4}");
    Ok(())
}
