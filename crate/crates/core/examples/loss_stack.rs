//! Evaluates the embedding loss components and the combined stage objective
//! on hand-picked values.

use std::collections::BTreeMap;

use embed_distill::diffcore::Graph;
use embed_distill::encoders::Task;
use embed_distill::losses::{embedding_loss, info_nce, smooth_l1, stage_loss, LayerSets, LossWeights};

fn main() -> embed_distill::Result<()> {
    let mut g = Graph::<f64>::new();
    let p = g.constant(vec![2, 2], vec![0.5, 1.5, -0.5, 2.5])?;
    let t = g.constant(vec![2, 2], vec![0.0, 1.0, 0.0, 2.0])?;
    let l = smooth_l1(&mut g, p, t)?;
    println!("smooth L1, all |d| = 0.5: {}", g.scalar(l));

    let e1 = g.constant(vec![2], vec![1.0, 0.0])?;
    let e2 = g.constant(vec![2], vec![0.0, 1.0])?;
    let tau = g.constant(vec![1], vec![2.0])?;
    let nce = info_nce(&mut g, &[e1, e2], &[e1, e2], tau)?;
    println!("InfoNCE, orthogonal pair at tau 2: {:.4}", g.scalar(nce));

    let weights = LossWeights::default();
    let emb = embedding_loss(&mut g, &[p, e1], &[t, e2], tau, &weights);
    // Items of different sizes cannot be contrasted.
    println!("mismatched items rejected: {}", emb.is_err());

    let emb = embedding_loss(&mut g, &[e1, e2], &[e2, e1], tau, &weights)?;
    println!("embedding loss (swapped targets): {:.4}", g.scalar(emb.total));

    let sets = LayerSets::default();
    let mut per_layer = BTreeMap::new();
    for (task, layer) in sets.pairs() {
        per_layer.insert((task, layer), emb.total);
    }
    let ntp = g.constant(vec![1], vec![3.0])?;
    let total = stage_loss(&mut g, ntp, &per_layer, &sets, &weights, &Task::ALL.into())?;
    println!("stage loss with {} (task, layer) terms: {:.4}", per_layer.len(), g.scalar(total));
    Ok(())
}
