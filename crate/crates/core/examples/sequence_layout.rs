//! Shows how a sequence is laid out and which rows each predictor sees under
//! the three key-view policies.

use embed_distill::diffcore::Tensor;
use embed_distill::encoders::Task;
use embed_distill::sequence::{assemble, KeyView, TokenOrder};

fn block(n: usize, v: f32) -> Tensor {
    Tensor::full(vec![n, 2], v).expect("valid shape")
}

fn main() -> embed_distill::Result<()> {
    let n_seek = 8;
    for order in ["gds", "sdg"] {
        let order: TokenOrder = order.parse()?;
        let specials = [Some(block(n_seek, 3.0)), Some(block(n_seek, 4.0)), Some(block(n_seek, 5.0))];
        let seq = assemble(&block(4, 1.0), &block(64, 2.0), &specials, &block(10, 6.0), order)?;
        println!("order {order:?}: {} rows", seq.layout.len());
        for s in seq.layout.spans() {
            println!("  {:<10} {:>3}..{:<3}", format!("{:?}", s.segment), s.start, s.end);
        }
        for policy in KeyView::ALL {
            let spans = seq.layout.key_spans(Task::Depth, policy)?;
            println!("  depth keys under {policy:?}: {spans:?}");
        }
    }
    Ok(())
}
