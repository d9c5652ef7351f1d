//! One forward pass per fusion mechanism with attention-pair counting.

use candle_core::{DType, Device, Tensor};
use motionseg::fusion::{expected_pairs, AttnStats, FusionModel, Mechanism, Modality, ModelInput};
use motionseg::motionrep::MotionKind;
use motionseg::trainer::desk;

fn main() -> motionseg::Result<()> {
    let (h, w) = (64, 64);
    let rgb = Tensor::randn(0f32, 1.0, (1, 3, h, w), &Device::Cpu)?;
    let flow = Tensor::randn(0f32, 1.0, (1, 2, h, w), &Device::Cpu)?;
    for mech in Mechanism::ALL {
        let modality =
            if mech == Mechanism::Single { Modality::Rgb } else { Modality::Motion(MotionKind::OpticalFlow) };
        let cfg = desk::model(mech, modality);
        let model = FusionModel::new(cfg.clone(), 0, DType::F32)?;
        let input = ModelInput { rgb: Some(rgb.clone()), motion: (mech != Mechanism::Single).then(|| flow.clone()) };
        let stats = AttnStats::default();
        let out = model.forward(&input, Some(&stats))?;
        let last = out.predictions.last().expect("prediction sets");
        let counted = stats.snapshot();
        println!(
            "{mech:>6}: {} params, masks {:?}, attention pairs {} (closed form {})",
            model.params.iter().map(|(_, v)| v.as_tensor().elem_count()).sum::<usize>(),
            last.mask_logits.dims(),
            counted.total(),
            expected_pairs(&cfg, h, w).total()
        );
    }
    Ok(())
}
