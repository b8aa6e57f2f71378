//! Soft hue and chroma histograms over a 7x7 window, the colorization target.

use colorproxy::colorspace::{rgb_to_huechroma, RgbImage};
use colorproxy::targets::{build_histogram_target, chroma_bin, hue_bin, TargetOptions, UndefinedHue};

fn bars(h: &[f64]) -> String {
    h.iter().map(|&p| [' ', '.', ':', '|', '#'][((p * 12.0).ceil() as usize).min(4)]).collect()
}

fn main() -> colorproxy::Result<()> {
    // Left half orange, right half sky blue, with a gray stripe.
    let img = RgbImage::from_fn(16, 16, |_, x| match x {
        0..=6 => [1.0, 0.55, 0.1],
        7 => [0.5, 0.5, 0.5],
        _ => [0.3, 0.6, 1.0],
    });
    let hc = rgb_to_huechroma(&img);
    println!("orange falls in hue bin {}, chroma bin {}", hue_bin(hc.hue(8, 2).unwrap()), chroma_bin(hc.chroma(8, 2)));

    for undefined_hue in [UndefinedHue::Spread, UndefinedHue::Skip] {
        let opts = TargetOptions { undefined_hue, ..Default::default() };
        let t = build_histogram_target(&hc, 8, 7, &opts)?;
        println!("{undefined_hue:?} at the border:");
        println!("  hue    [{}]", bars(&t.hue));
        println!("  chroma [{}]", bars(&t.chroma));
    }
    Ok(())
}
