//! Pools predictor latents into N_seek special tokens and compares against a
//! hand-computed group mean.

use embed_distill::diffcore::{Binder, Graph, ParamStore, Tensor};
use embed_distill::resampler::{derive_special_tokens, pool_groups, Affine};

fn main() -> embed_distill::Result<()> {
    let (n, k, d) = (36, 8, 3);
    println!("groups for ({n}, {k}): {:?}", pool_groups(n, k)?);

    // Identity bridge so the output is the pooled latents themselves.
    let mut store = ParamStore::new();
    let eye = Tensor::from_fn(vec![d, d], |i| if i / d == i % d { 1.0 } else { 0.0 })?;
    let proj = Affine { w: store.insert("w", eye)?, b: store.insert_full("b", &[d], 0.0)?, dim_in: d, dim_out: d };
    let latents = Tensor::from_fn(vec![n, d], |i| (i / d) as f32)?;

    let mut g = Graph::<f64>::new();
    let mut b = Binder::frozen(&store);
    let l = g.leaf(&latents, false);
    let tokens = derive_special_tokens(&mut g, &mut b, l, k, &proj)?;
    let out = g.to_tensor(tokens);
    for r in 0..k {
        println!("token {r}: {:?}", out.row(r));
    }
    // Rows 28..36 form the last group: mean of 28..=35 is 31.5.
    assert!((out.row(k - 1)[0] - 31.5).abs() < 1e-6);
    Ok(())
}
