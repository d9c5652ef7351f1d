//! Optical flow, scene flow and embedding inputs of one scene, their
//! standardization statistics, a negative example and depth alignment.

use motionseg::motionrep::{
    align_depth, apply_negative, channel_variance, motion_data, normalize_motion, MotionField, MotionKind, MotionStats,
};
use motionseg::synthscene::{generate_scene, GeneratorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> motionseg::Result<()> {
    let scenes: Vec<_> = (0..8).map(|s| generate_scene(&GeneratorConfig::default(), s)).collect::<Result<_, _>>()?;
    for kind in [MotionKind::OpticalFlow, MotionKind::SceneFlow, MotionKind::Embedding { channels: 8 }] {
        let fields: Vec<_> = scenes.iter().map(|s| motion_data(s, kind)).collect();
        let stats = MotionStats::from_fields(&fields)?;
        let field = MotionField::new(kind, fields[0].clone(), stats.value_range())?;
        let z = normalize_motion(&field, &stats)?;
        println!("{:>12}: {} channels, mean {:?}", kind.name(), kind.channels(), fmt(&stats.mean));
        println!(
            "{:>12}  scene 0 variance after standardization {:?}",
            "",
            fmt(&channel_variance(&z).iter().map(|&v| v as f32).collect::<Vec<_>>())
        );
    }

    let field = MotionField::with_own_range(MotionKind::OpticalFlow, motion_data(&scenes[0], MotionKind::OpticalFlow))?;
    let targets = scenes[0].moving_masks();
    let (neg, kept, replaced) = apply_negative(field, targets, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    println!(
        "negative example: replaced {replaced}, targets left {}, variance {:?}",
        kept.len(),
        channel_variance(&neg.data)
    );

    let depth = scenes[0].depth[0].mapv(|v| v as f64);
    let relative = depth.mapv(|d| 0.25 * d - 1.0);
    let a = align_depth(&relative, &depth, &depth.mapv(|_| true))?;
    println!("depth alignment: scale {:.3}, shift {:.3}", a.scale, a.shift);
    Ok(())
}

fn fmt(v: &[f32]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.3}")).collect()
}
