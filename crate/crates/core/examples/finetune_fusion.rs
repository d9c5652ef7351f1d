//! Pretrains an appearance and a flow model on scenes with a moving camera
//! where movable bodies mostly move, then finetunes decoder fusion with and
//! without negative examples. All four are scored on held-out scenes where
//! half of the movable bodies stand still.
//!
//! cargo run --release --example finetune_fusion -- [pretrain_steps] [finetune_steps]

use motionseg::eval::{evaluate, MetricReport};
use motionseg::fusion::{Mechanism, Modality};
use motionseg::motionrep::MotionKind;
use motionseg::synthscene::SceneSample;
use motionseg::trainer::{desk, predict_frames, TargetKind, Trainer};

fn score(t: &Trainer, test: &[SceneSample]) -> motionseg::Result<MetricReport> {
    evaluate(&predict_frames(&t.model, test, TargetKind::Moving, t.stats.as_ref())?)
}

fn main() -> motionseg::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().expect("step count"));
    let pre = args.next().unwrap_or(1500);
    let ft = args.next().unwrap_or(1000);
    let mix = desk::distractor_mix(0.9);
    let test = desk::test_set(&desk::distractor_mix(0.5), 60, 99)?;

    let rgb = desk::pretrain(Modality::Rgb, &mix, 0, pre)?;
    let flow = desk::pretrain(Modality::Motion(MotionKind::OpticalFlow), &mix, 0, pre)?;
    let mut rows = vec![("rgb".to_string(), score(&rgb, &test)?), ("flow".to_string(), score(&flow, &test)?)];
    for p_neg in [0.0, 0.3] {
        let fused = desk::finetune(&rgb, &flow, Mechanism::Decoder, &mix, p_neg, 0, ft)?;
        rows.push((format!("d p_neg={p_neg}"), score(&fused, &test)?));
    }
    println!("{:>12} {:>6} {:>9} {:>9}", "model", "AP50", "FP/frame", "FN/frame");
    for (name, r) in rows {
        println!("{name:>12} {:>6.3} {:>9.3} {:>9.3}", r.ap50.unwrap_or(0.0), r.fp_per_frame, r.fn_per_frame);
    }
    Ok(())
}
