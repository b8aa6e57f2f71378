//! Per-pixel segmentation with a hypercolumn head over a colorization
//! trunk, scored by mean intersection over union.

use colorproxy::data::{generate_colored_shapes, ColoredShapesSpec};
use colorproxy::pretrain::{train_colorization, PretrainConfig, TrainingSchedule};
use colorproxy::transfer::{evaluate_segmentation, finetune, AdaptationPlan, FinetuneConfig, HeadKind, Init};

fn main() -> colorproxy::Result<()> {
    let spec = ColoredShapesSpec {
        counts: [("unlabeled", 400), ("train", 80), ("test", 80)].into_iter().map(|(k, v)| (k.into(), v)).collect(),
        ..Default::default()
    };
    let splits = generate_colored_shapes(&spec, 3)?;
    let cfg = PretrainConfig {
        schedule: TrainingSchedule { epochs: 2.0, drops: vec![1.5], ..Default::default() },
        ..Default::default()
    };
    let trunk = train_colorization(&cfg, &splits["unlabeled"], 3)?.checkpoints.pop().unwrap().network()?;

    let ft = FinetuneConfig {
        plan: AdaptationPlan {
            head: HeadKind::Segmentation { fov_blocks: 1, fov_width: 32, hidden: vec![64], pixels_per_image: 32 },
            ..Default::default()
        },
        eval_every: 2.0,
        max_epochs: 40.0,
        base_lr: 0.01,
        ..Default::default()
    };
    let out = finetune(&ft, &Init::Pretrained(trunk), &splits["train"], 3)?;
    let miou = evaluate_segmentation(&out.model, &splits["test"])?;
    println!("stopped at {:.1} epochs; mean IU {:.1}% over {} classes", out.stop_epoch, 100.0 * miou, out.model.num_classes);

    let sample = &splits["test"].samples[0];
    let pred = &out.model.predict_masks(&[sample.image.clone()])?[0];
    let truth: Vec<usize> = sample.mask.as_ref().unwrap().iter().map(|&c| c as usize).collect();
    let glyph = |c: usize| if c == 0 { '.' } else { char::from(b'a' + c as u8 - 1) };
    let row = |m: &[usize], y: usize| m[y * 32..(y + 1) * 32].iter().step_by(2).map(|&c| glyph(c)).collect::<String>();
    println!("{:<16}  predicted", "truth");
    for y in (0..32).step_by(2) {
        println!("{}  {}", row(&truth, y), row(pred, y));
    }
    Ok(())
}
