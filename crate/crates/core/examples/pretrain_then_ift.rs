//! Runs a short PT then IFT schedule on a tiny model and shows which
//! parameter groups each stage moved.

use embed_distill::config::RunConfig;
use embed_distill::model::ParamGroup;
use embed_distill::trainer::Trainer;

fn main() -> embed_distill::Result<()> {
    let mut cfg = RunConfig::tiny();
    cfg.stages[0].max_steps = Some(20);
    cfg.stages[1].max_steps = Some(10);
    let out = std::env::temp_dir().join("pretrain_then_ift");
    let _ = std::fs::remove_dir_all(&out);

    let mut t = Trainer::new(&cfg)?;
    let snap = |t: &Trainer| ParamGroup::ALL.map(|g| t.model.group_fingerprint(g));
    let before = snap(&t);
    let cks = t.run_all(&out)?;
    let after = snap(&t);
    for (i, g) in ParamGroup::ALL.iter().enumerate() {
        println!("{g:?}: {}", if before[i] == after[i] { "unchanged" } else { "trained" });
    }
    for c in &cks {
        println!("checkpoint {}", c.display());
    }
    let recs = embed_distill::trainer::read_metrics(&out.join("metrics.jsonl"))?;
    for r in recs.iter().step_by(5) {
        println!("{:?} step {:>2}: ntp {:.4} total {:.4}", r.stage, r.step, r.losses.ntp, r.losses.total);
    }
    Ok(())
}
