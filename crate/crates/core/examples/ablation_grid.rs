//! Expands an ablation over N_seek and the key view into cells and runs them
//! without probing.

use embed_distill::cli::{cmd_ablate, expand_grid};
use embed_distill::config::{AblationAxis, AxisName, RunConfig};
use serde_json::json;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::tiny();
    for s in &mut cfg.stages {
        s.max_steps = Some(2);
    }
    cfg.ablation.axes = vec![
        AblationAxis { axis: AxisName::NSeek, values: vec![json!(0), json!(4)] },
        AblationAxis { axis: AxisName::KeyView, values: vec![json!("img_t"), json!("sys_img_t_txt")] },
    ];
    cfg.ablation.skip_probe = true;
    let cells = expand_grid(&cfg)?;
    for c in &cells {
        println!("{} {}", c.name, c.label());
    }
    let out = std::env::temp_dir().join("ablation_grid");
    let _ = std::fs::remove_dir_all(&out);
    cmd_ablate(&cfg, &cells, &out)?;
    let csv = out.join("comparison.csv");
    print!("{}", std::fs::read_to_string(&csv)?);
    Ok(())
}
