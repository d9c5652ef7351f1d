//! Pretrains a flow-only model on large, fast bodies under a static camera
//! and scores it on held-out scenes.
//!
//! cargo run --release --example train_smoke -- [steps] [out_dir]

use motionseg::fusion::Modality;
use motionseg::motionrep::MotionKind;
use motionseg::trainer::{desk, single_trainer};

fn main() -> motionseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse().expect("steps")).unwrap_or(2000);
    let out = args.next();
    let mix = desk::smoke_mix();
    let model = desk::model(motionseg::fusion::Mechanism::Single, Modality::Motion(MotionKind::OpticalFlow));
    let mut t = single_trainer(model, desk::schedule(mix.clone(), 0, steps, 8))?;
    while t.step < t.cfg.total_steps() {
        t.run(250.min(t.cfg.total_steps() - t.step), None)?;
        let n = t.log.len();
        let ma = t.log[n.saturating_sub(50)..].iter().map(|e| e.loss).sum::<f64>() / n.min(50) as f64;
        println!("step {:5}  lr {:.0e}  loss (50-step mean) {ma:.3}", t.step, t.log[n - 1].lr);
    }
    let report = t.evaluate(&desk::test_set(&mix, 60, 99)?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = out {
        t.save(std::path::Path::new(&dir), Some(&report))?;
        println!("checkpoint written to {dir}");
    }
    Ok(())
}
