//! Compare two trunks layer by layer and find the strongest responses.
//!
//! Writes correlation and loss-curve figures to the directory given as the
//! first argument.

use std::path::PathBuf;

use colorproxy::analysis::{emit_report, feature_correlation, top_activations, LossCurve};
use colorproxy::data::{generate_colored_shapes, ColoredShapesSpec};
use colorproxy::model::NetworkSpec;
use colorproxy::pretrain::{train_colorization, PretrainConfig, TrainingSchedule};
use colorproxy::tensor::{PaddingMode, Tensor};
use colorproxy::transfer::batch_input;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("colorproxy-analysis"));
    std::fs::create_dir_all(&out)?;
    let spec = ColoredShapesSpec {
        counts: [("unlabeled", 300), ("probe", 64)].into_iter().map(|(k, v)| (k.into(), v)).collect(),
        ..Default::default()
    };
    let splits = generate_colored_shapes(&spec, 8)?;
    let cfg = PretrainConfig {
        network: NetworkSpec::mini_alex(1, 32, PaddingMode::BiasOfPrevious),
        head_hidden: vec![64],
        schedule: TrainingSchedule { epochs: 2.0, drops: vec![1.5], ..Default::default() },
        ..Default::default()
    };
    let runs: Vec<_> = (0..2).map(|seed| train_colorization(&cfg, &splits["unlabeled"], seed)).collect::<Result<_, _>>()?;
    let nets: Vec<_> = runs.iter().map(|r| r.checkpoints.last().unwrap().network()).collect::<Result<_, _>>()?;
    let images: Vec<_> = splits["probe"].samples.iter().map(|s| s.image.clone()).collect();
    let probe: Tensor<f32> = batch_input(&images, 1)?;

    let report = feature_correlation(&nets[0], &nets[1], &probe)?;
    for l in &report.layers {
        println!("{:>8}: median correlation {:?}", l.layer, l.median.map(|m| (m * 1000.0).round() / 1000.0));
    }
    let top = top_activations(&nets[0], "conv3_relu", &probe, 3)?;
    for (c, recs) in top.features.iter().enumerate().take(4) {
        let spots: Vec<String> = recs.iter().map(|r| format!("img {} ({}, {}) {:.2}", r.image, r.y, r.x, r.value)).collect();
        println!("conv3_relu unit {c}: {}", spots.join("; "));
    }
    let curves: Vec<LossCurve> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| LossCurve { name: format!("seed {i}"), points: r.metrics.iter().map(|m| (m.epoch, m.loss)).collect() })
        .collect();
    for p in emit_report(&report, &curves, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
