//! Color conversions: sRGB to CIE Lab and back, and hue/chroma.

use colorproxy::colorspace::{hue_chroma, lab_to_srgb, rgb_to_gray, rgb_to_huechroma, srgb_to_lab, RgbImage};

fn main() {
    let swatches = [
        ("red", [1.0, 0.0, 0.0]),
        ("teal", [0.0, 0.5, 0.5]),
        ("mid gray", [0.5, 0.5, 0.5]),
        ("white", [1.0, 1.0, 1.0]),
    ];
    for (name, rgb) in swatches {
        let lab = srgb_to_lab(rgb);
        let back = lab_to_srgb(lab);
        let (hue, chroma) = hue_chroma(rgb);
        let hue = hue.map_or("undefined".to_string(), |h| format!("{h:.1} deg"));
        println!(
            "{name:>9}: Lab ({:6.2}, {:7.2}, {:7.2})  hue {hue:>10}  chroma {chroma:.3}  round trip {:.1e}",
            lab[0],
            lab[1],
            lab[2],
            (0..3).map(|c| (back[c] - rgb[c]).abs()).fold(0.0, f64::max)
        );
    }

    let img = RgbImage::from_fn(4, 4, |y, x| [x as f32 / 3.0, y as f32 / 3.0, 0.5]);
    let gray = rgb_to_gray(&img);
    let hc = rgb_to_huechroma(&img);
    println!("gray(1, 2) = {:.3}, hue(1, 2) = {:?}, chroma(1, 2) = {:.3}", gray.get(1, 2), hc.hue(1, 2), hc.chroma(1, 2));
}
