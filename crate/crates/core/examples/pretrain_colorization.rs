//! Pretrain a gray-input trunk to predict color histograms, then save the
//! final checkpoint.
//!
//! `cargo run --release --example pretrain_colorization -- /tmp/colorization.ckpt`

use std::path::PathBuf;

use colorproxy::checkpoint::save_checkpoint;
use colorproxy::data::{generate_colored_shapes, ColoredShapesSpec};
use colorproxy::model::NetworkSpec;
use colorproxy::pretrain::{train_colorization, PretrainConfig, TrainingSchedule};
use colorproxy::tensor::PaddingMode;

fn main() -> colorproxy::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("colorization.ckpt"));
    let spec = ColoredShapesSpec { counts: [("unlabeled".to_string(), 400)].into(), ..Default::default() };
    let data = &generate_colored_shapes(&spec, 1)?["unlabeled"];

    let cfg = PretrainConfig {
        network: NetworkSpec::mini_alex(1, 32, PaddingMode::BiasOfPrevious),
        head_hidden: vec![64],
        schedule: TrainingSchedule { epochs: 3.0, drops: vec![2.0, 2.5], ..Default::default() },
        ..Default::default()
    };
    let run = train_colorization(&cfg, data, 1)?;
    for row in run.metrics.iter().step_by(15) {
        println!("step {:>4}  epoch {:.2}  lr {:.4}  loss {:.4}", row.step, row.epoch, row.lr, row.loss);
    }
    let tags: Vec<_> = run.checkpoints.iter().map(|c| c.meta.tag.as_str()).collect();
    println!("checkpoints: {}", tags.join(", "));
    save_checkpoint(run.checkpoints.last().unwrap(), &out)?;
    println!("saved {}", out.display());
    Ok(())
}
