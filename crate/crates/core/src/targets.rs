//! Self-supervision labels: windowed hue/chroma histograms, Lab regression
//! targets and the sparse pixel sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{HueChromaImage, LabImage};
use crate::error::{Error, Result};

pub const HUE_BINS: usize = 32;
pub const CHROMA_BINS: usize = 32;
/// Side of the square window a histogram is computed from.
pub const WINDOW: usize = 7;
const RADIUS: usize = WINDOW / 2;

/// How a pixel with undefined hue enters the hue histogram.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedHue {
    /// Mass spread evenly over all hue bins.
    #[default]
    Spread,
    /// Pixel ignored and the remaining hue mass renormalised.
    Skip,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetOptions {
    pub chroma_weighted_hue: bool,
    pub undefined_hue: UndefinedHue,
}

/// Normalised hue and chroma distributions for one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramTarget {
    pub hue: [f64; HUE_BINS],
    pub chroma: [f64; CHROMA_BINS],
}

/// Sampled `(image_index, y, x)` locations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelSampleSet {
    pub locations: Vec<(usize, usize, usize)>,
}

impl PixelSampleSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn push_image(&mut self, image: usize, points: &[(usize, usize)]) {
        self.locations.extend(points.iter().map(|&(y, x)| (image, y, x)));
    }
}

pub fn hue_bin(hue: f64) -> usize {
    let b = (hue.rem_euclid(360.0) * HUE_BINS as f64 / 360.0).floor() as usize;
    b % HUE_BINS
}

pub fn chroma_bin(chroma: f64) -> usize {
    ((chroma.clamp(0.0, 1.0) * CHROMA_BINS as f64).floor() as usize).min(CHROMA_BINS - 1)
}

/// Range of window centers along an axis of length `n`.
fn valid_range(n: usize) -> Option<std::ops::RangeInclusive<usize>> {
    (n >= WINDOW).then(|| RADIUS..=n - 1 - RADIUS)
}

/// All positions whose full window lies inside an `height x width` image.
pub fn valid_positions(height: usize, width: usize) -> Vec<(usize, usize)> {
    match (valid_range(height), valid_range(width)) {
        (Some(ry), Some(rx)) => ry.flat_map(|y| rx.clone().map(move |x| (y, x))).collect(),
        _ => Vec::new(),
    }
}

/// `k` distinct window-valid positions, uniform without replacement, in
/// row-major order.
pub fn sample_pixel_locations<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let valid = valid_positions(height, width);
    if k == 0 || k > valid.len() {
        return Err(Error::invalid(
            "sample_pixel_locations",
            format!("k={k} with {} valid positions in {height}x{width}", valid.len()),
        ));
    }
    let mut idx = rand::seq::index::sample(rng, valid.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| valid[i]).collect())
}

fn uniform<const N: usize>() -> [f64; N] {
    [1.0 / N as f64; N]
}

pub fn build_histogram_target(
    img: &HueChromaImage,
    y: usize,
    x: usize,
    opts: &TargetOptions,
) -> Result<HistogramTarget> {
    let fits = |c: usize, n: usize| valid_range(n).is_some_and(|r| r.contains(&c));
    if !fits(y, img.height()) || !fits(x, img.width()) {
        return Err(Error::invalid(
            "build_histogram_target",
            format!("window at ({y},{x}) leaves {}x{}", img.height(), img.width()),
        ));
    }
    let weight = 1.0 / (WINDOW * WINDOW) as f64;
    let mut hue = [0.0; HUE_BINS];
    let mut chroma = [0.0; CHROMA_BINS];
    let mut hue_mass = 0.0;
    for wy in y - RADIUS..=y + RADIUS {
        for wx in x - RADIUS..=x + RADIUS {
            let c = img.chroma(wy, wx);
            chroma[chroma_bin(c)] += weight;
            let w = if opts.chroma_weighted_hue { weight * c } else { weight };
            match img.hue(wy, wx) {
                Some(h) => {
                    hue[hue_bin(h)] += w;
                    hue_mass += w;
                }
                None if opts.chroma_weighted_hue => {}
                None => match opts.undefined_hue {
                    UndefinedHue::Spread => {
                        hue.iter_mut().for_each(|v| *v += w / HUE_BINS as f64);
                        hue_mass += w;
                    }
                    UndefinedHue::Skip => {}
                },
            }
        }
    }
    if hue_mass <= 0.0 {
        hue = uniform();
    } else if (hue_mass - 1.0).abs() > 1e-12 {
        hue.iter_mut().for_each(|v| *v /= hue_mass);
    }
    Ok(HistogramTarget { hue, chroma })
}

/// The `(a, b)` components at a pixel.
pub fn build_lab_target(img: &LabImage, y: usize, x: usize) -> Result<(f64, f64)> {
    if y >= img.height() || x >= img.width() {
        return Err(Error::invalid("build_lab_target", format!("({y},{x}) outside image")));
    }
    let [_, a, b] = img.pixel(y, x);
    Ok((a as f64, b as f64))
}

impl HistogramTarget {
    pub fn is_normalized(&self, tol: f64) -> bool {
        let ok = |h: &[f64]| h.iter().all(|&v| v >= 0.0) && (h.iter().sum::<f64>() - 1.0).abs() <= tol;
        ok(&self.hue) && ok(&self.chroma)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::colorspace::{rgb_to_huechroma, rgb_to_lab, RgbImage};

    fn flat(px: [f32; 3], n: usize) -> RgbImage {
        RgbImage::from_fn(n, n, |_, _| px)
    }

    #[test]
    fn gray_window_gives_uniform_hue_and_delta_chroma() {
        let t = build_histogram_target(&rgb_to_huechroma(&flat([0.3; 3], 7)), 3, 3, &Default::default())
            .unwrap();
        assert!(t.hue.iter().all(|&v| (v - 1.0 / 32.0).abs() < 1e-15));
        assert!((t.chroma[0] - 1.0).abs() < 1e-12);
        assert!(t.is_normalized(1e-9));
    }

    #[test]
    fn red_window_is_delta_hist() {
        let t = build_histogram_target(&rgb_to_huechroma(&flat([1.0, 0.0, 0.0], 9)), 4, 4, &Default::default())
            .unwrap();
        assert!((t.hue[0] - 1.0).abs() < 1e-12);
        assert!((t.chroma[31] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_must_fit() {
        let img = rgb_to_huechroma(&flat([0.3; 3], 8));
        assert!(build_histogram_target(&img, 2, 3, &Default::default()).is_err());
        assert!(build_histogram_target(&img, 4, 5, &Default::default()).is_err());
        assert!(build_histogram_target(&img, 4, 4, &Default::default()).is_ok());
    }

    #[test]
    fn sampler_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_pixel_locations(7, 7, 1, &mut rng).unwrap(), vec![(3, 3)]);
        assert_eq!(sample_pixel_locations(9, 10, 12, &mut rng).unwrap(), valid_positions(9, 10));
        assert!(sample_pixel_locations(9, 10, 13, &mut rng).is_err());
        assert!(sample_pixel_locations(6, 10, 1, &mut rng).is_err());
    }

    #[test]
    fn skip_policy_renormalises() {
        let img = RgbImage::from_fn(7, 7, |y, _| if y == 0 { [0.5; 3] } else { [0.0, 1.0, 0.0] });
        let opts = TargetOptions { undefined_hue: UndefinedHue::Skip, ..Default::default() };
        let t = build_histogram_target(&rgb_to_huechroma(&img), 3, 3, &opts).unwrap();
        assert!((t.hue[hue_bin(120.0)] - 1.0).abs() < 1e-12);
        assert!((t.chroma[0] - 7.0 / 49.0).abs() < 1e-12);
    }

    #[test]
    fn chroma_weighting_option() {
        let img = RgbImage::from_fn(7, 7, |y, _| if y < 3 { [1.0, 0.0, 0.0] } else { [0.5, 0.5, 0.4] });
        let opts = TargetOptions { chroma_weighted_hue: true, ..Default::default() };
        let t = build_histogram_target(&rgb_to_huechroma(&img), 3, 3, &opts).unwrap();
        assert!(t.is_normalized(1e-9));
        // 21 pixels of chroma 1 vs 28 of chroma 0.1
        let yellow = hue_bin(60.0);
        assert!((t.hue[0] - 21.0 / (21.0 + 2.8)).abs() < 1e-6);
        assert!((t.hue[yellow] - 2.8 / (21.0 + 2.8)).abs() < 1e-6);
    }

    #[test]
    fn lab_target_matches_conversion() {
        let img = flat([1.0, 0.0, 0.0], 2);
        let lab = rgb_to_lab(&img).unwrap();
        let [_, a, b] = lab.pixel(1, 1);
        assert_eq!(build_lab_target(&lab, 1, 1).unwrap(), (a as f64, b as f64));
        let (ga, gb) = build_lab_target(&rgb_to_lab(&flat([0.42; 3], 1)).unwrap(), 0, 0).unwrap();
        assert!(ga.abs() < 1e-3 && gb.abs() < 1e-3);
        assert!(build_lab_target(&lab, 2, 0).is_err());
    }
}
