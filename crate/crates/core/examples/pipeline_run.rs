//! The whole collect / pretrain / finetune / evaluate / compare workflow on
//! a tiny IRS configuration. Pass an output directory as the first argument.

use std::path::PathBuf;

use dtwireless::pipeline::{cmd_collect, cmd_compare, cmd_evaluate, cmd_finetune, cmd_pretrain, RunConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("dtwireless-tiny"));
    let cfg = RunConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/irs_tiny.toml"))?;
    let seed = cfg.seed;

    let c = cmd_collect(&cfg, seed, &out)?;
    println!("collected {} trajectories", c.dataset.trajectories.len());
    let p = cmd_pretrain(&cfg, seed, &out)?;
    println!("pretrain loss {:.3} -> {:.3}", p.losses[0], p.losses[p.losses.len() - 1]);
    let f = cmd_finetune(&cfg, seed, &out)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("target zero-shot {:.1}, fine-tuned {:.1}", mean(&f.zero_shot), mean(&f.finetuned));
    let e = cmd_evaluate(&cfg, seed, &out)?;
    println!("evaluate {}: {:.1}", e.scenario_id, mean(&e.returns));
    let r = cmd_compare(&cfg, seed, &out)?;
    match r.speedup.ratio() {
        Some(x) => println!("speedup {x:.2}"),
        None => println!("one arm never reached {:.1}", r.speedup.level),
    }
    println!("outputs in {}", out.display());
    Ok(())
}
