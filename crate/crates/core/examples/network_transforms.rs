//! Function-preserving rewrites applied before transfer: folding batch norm
//! into convolutions, gray-to-color filters and per-layer rebalancing.

use colorproxy::data::{generate_colored_shapes, ColoredShapesSpec};
use colorproxy::model::{Network, NetworkSpec};
use colorproxy::seeding;
use colorproxy::tensor::{PaddingMode, Tensor};
use colorproxy::transfer::{absorb_batchnorm, batch_input, estimate_batchnorm_stats, gray_to_rgb_filters, rebalance_unit_variance};

fn main() -> colorproxy::Result<()> {
    let spec = ColoredShapesSpec { counts: [("probe".to_string(), 64)].into(), ..Default::default() };
    let images: Vec<_> = generate_colored_shapes(&spec, 6)?["probe"].samples.iter().map(|s| s.image.clone()).collect();
    let gray: Tensor<f64> = batch_input(&images, 1)?;
    let color: Tensor<f64> = batch_input(&images, 3)?;

    let mut net = Network::<f64>::build(&NetworkSpec::mini_vgg(1, 32, PaddingMode::Zero), &mut seeding::stream(6, "example", 0, 0))?;
    estimate_batchnorm_stats(&mut net, &gray, &|_| true)?;
    let top = |n: &Network<f64>, x: &Tensor<f64>| n.infer(x).map(|mut a| a.pop().unwrap());

    let folded = absorb_batchnorm(&net)?;
    println!("layers {} -> {}; max output change {:.1e}", net.spec.layers.len(), folded.spec.layers.len(), top(&net, &gray)?.max_abs_diff(&top(&folded, &gray)?));

    let (balanced, scales) = rebalance_unit_variance(&folded, &gray)?;
    for (layer, s) in &scales {
        println!("  rescale {layer:>8} by {s:.3}");
    }
    let ratio: Vec<f64> = top(&balanced, &gray)?.data().iter().zip(top(&folded, &gray)?.data()).filter(|(_, b)| b.abs() > 1e-9).map(|(a, b)| a / b).take(4).collect();
    println!("balanced / folded output ratios {ratio:.4?}");

    let rgb = gray_to_rgb_filters(&folded)?;
    println!("color input on the converted trunk gives output norm {:.4}", top(&rgb, &color)?.data().iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok(())
}
