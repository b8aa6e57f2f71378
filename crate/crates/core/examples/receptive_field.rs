//! Receptive fields of the reference architectures, and the effect of
//! appending field-of-view blocks.

use colorproxy::model::{add_fov_blocks, compute_receptive_field, NetworkSpec};
use colorproxy::tensor::PaddingMode;

fn main() -> colorproxy::Result<()> {
    let vgg = NetworkSpec::vgg16_shaped();
    for layer in ["conv1_2", "pool2", "conv3_3", "conv4_3", "conv5_3"] {
        let (rf, stride) = compute_receptive_field(&vgg, layer)?;
        println!("vgg16 {layer:>8}: rf {rf:>4} px, stride {stride:>2}");
    }
    let top = |s: &NetworkSpec| compute_receptive_field(s, &s.layers.last().unwrap().name);
    for n in 0..=2 {
        let spec = add_fov_blocks(&vgg, n, 64)?;
        println!("vgg16 + {n} fov blocks: top rf {} px", top(&spec)?.0);
    }
    let mini = NetworkSpec::mini_vgg(1, 32, PaddingMode::Zero);
    for (shape, layer) in mini.shapes()?.iter().zip(&mini.layers).filter(|(_, l)| !l.name.contains('_') || l.name.ends_with("_2")) {
        println!("mini_vgg {:>8}: {}x{}x{}", layer.name, shape.channels, shape.height, shape.width);
    }
    Ok(())
}
