//! Probes every layer of a freshly initialized tiny model and prints the
//! cosine table.

use embed_distill::config::RunConfig;
use embed_distill::model::MultimodalModel;
use embed_distill::probing::probe_model;

fn main() -> embed_distill::Result<()> {
    let mut cfg = RunConfig::tiny();
    cfg.probe.epochs = 1;
    let model = MultimodalModel::new(&cfg)?;
    let report = probe_model(&model, &cfg, None, None)?;
    print!("{}", report.csv());
    println!("best layer per task: {:?}", report.argmax());
    Ok(())
}
