//! Soft histogram features of a token sequence: RBF binning, normalization
//! across bins and adaptive pooling broadcast back to every token.

use hpt::histogram::HistogramLayer;
use hpt::nn::fill_uniform;
use hpt::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hpt::Result<()> {
    let (tokens, dim, bins) = (10, 16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let layer = HistogramLayer::new(&mut store, "hist", dim, bins)?;
    layer.init(&mut store, &mut rng);
    println!(
        "D={dim} B={bins}: {} parameters, {} pooled windows per bin",
        layer.param_count(),
        layer.pool_len()
    );

    let mut x = Tensor::zeros(&[tokens, dim]);
    fill_uniform(&mut x, 1.0, &mut rng);
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let v = layer.project(&mut g, xv)?;
    let y = layer.rbf(&mut g, v)?;
    let r = layer.normalize(&mut g, y)?;
    let out = layer.forward(&mut g, xv)?;

    let r = g.value(r);
    println!("bin memberships of token 0: {:?}", r.row(0));
    println!("sum over bins: {:.6}", r.row(0).iter().sum::<f64>());
    let out = g.value(out);
    println!("output shape {:?}", out.shape());
    let identical = (1..tokens).all(|t| out.row(t) == out.row(0));
    println!("every token receives the same histogram row: {identical}");
    Ok(())
}
