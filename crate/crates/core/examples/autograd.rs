//! Reverse-mode differentiation of a small two-layer network, checked
//! against central differences.

use hpt::{grad_check, Graph, ParamStore, Tensor};

fn main() -> hpt::Result<()> {
    let mut store = ParamStore::new();
    let w1 = store.register("w1", Tensor::from_rows(&[vec![0.3, -0.2, 0.5], vec![0.1, 0.4, -0.6]])?);
    let w2 = store.register("w2", Tensor::from_rows(&[vec![0.7], vec![-0.3], vec![0.2]])?);
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]])?;

    let loss = |g: &mut Graph<'_>| {
        let x = g.constant(x.clone());
        let (a, b) = (g.param(w1), g.param(w2));
        let h = g.matmul(x, a)?;
        let h = g.gelu(h)?;
        let y = g.matmul(h, b)?;
        let y = g.square(y)?;
        g.sum(y)
    };

    let mut g = Graph::new(&store);
    let root = loss(&mut g)?;
    println!("loss = {:.6}", g.value(root).item().unwrap_or(f64::NAN));
    let grads = g.backward(root)?;
    for (id, grad) in grads.iter() {
        println!("d loss / d {} = {:?}", store.get(id).name, grad.data());
    }

    let report = grad_check(&mut store, &[w1, w2], 1e-6, loss)?;
    println!(
        "finite-difference check over {} coordinates: max relative error {:.2e}",
        report.coordinates, report.max_rel_error
    );
    Ok(())
}
