//! Builds a small expression on the tape, backpropagates, and checks the
//! gradient against central differences.

use embed_distill::diffcore::{finite_diff_check, Graph, Tensor};

fn main() -> embed_distill::Result<()> {
    // f(x) = sum(log_softmax(tanh(x W)) ⊙ c)
    let w = Tensor::from_fn(vec![4, 3], |i| (i as f32 * 0.37).sin())?;
    let c = Tensor::from_fn(vec![2, 3], |i| i as f32 - 2.5)?;
    let build = |g: &mut Graph<f64>, x| {
        let wv = g.leaf(&w, false);
        let cv = g.leaf(&c, false);
        let h = g.matmul(x, wv)?;
        let h = g.tanh(h)?;
        let h = g.log_softmax(h)?;
        let h = g.mul(h, cv)?;
        g.sum(h)
    };

    let x = Tensor::from_fn(vec![2, 4], |i| 0.1 * i as f32 - 0.3)?;
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(&x, true);
    let y = build(&mut g, xv)?;
    let grads = g.backward(y)?;
    println!("f(x) = {:.6}", g.scalar(y));
    println!("df/dx = {:?}", grads.get(xv).unwrap().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());

    let report = finite_diff_check(build, &x, 1e-6, 5e-3)?;
    println!("finite differences: passed={} max rel err {:.2e}", report.passed, report.max_rel_error);
    Ok(())
}
