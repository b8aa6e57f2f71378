//! Color mathematics for manufacturing self-supervision labels.
//!
//! Images are planar. RGB and gray channels live in `[0, 1]` (sRGB encoded),
//! CIELAB uses `L in [0, 100]` and `a, b in [-128, 128]` under a D65 white,
//! and hue/chroma follow the hexagonal definition (`chroma = max - min`).

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Luminance weights used for desaturation.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// linear sRGB -> XYZ (D65).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const LAB_DELTA: f64 = 6.0 / 29.0;

/// Planar RGB image, channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Single-channel intensity image in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Planar CIELAB image (`L`, `a`, `b` planes).
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Per-pixel hue in degrees (`None` where chroma is zero) and chroma in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HueChromaImage {
    height: usize,
    width: usize,
    hue: Vec<Option<f64>>,
    chroma: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::shape(
                "rgb_image",
                format!("{height}x{width} needs {} values, got {}", 3 * height * width, data.len()),
            ));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for (c, v) in px.into_iter().enumerate() {
                    data[c * plane + y * width + x] = v;
                }
            }
        }
        RgbImage { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Planar `[R..., G..., B...]` buffer.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, px: [f32; 3]) {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        for (c, v) in px.into_iter().enumerate() {
            self.data[c * plane + i] = v;
        }
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn mirrored(&self) -> RgbImage {
        RgbImage::from_fn(self.height, self.width, |y, x| self.pixel(y, self.width - 1 - x))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<RgbImage> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(
                "crop",
                format!("{height}x{width} at ({top},{left}) in {}x{}", self.height, self.width),
            ));
        }
        Ok(RgbImage::from_fn(height, width, |y, x| self.pixel(top + y, left + x)))
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resized(&self, height: usize, width: usize) -> RgbImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        RgbImage::from_fn(height, width, |y, x| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
            let (a, b, c, d) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
            let mut out = [0.0f32; 3];
            for ch in 0..3 {
                let v = (1.0 - wy) * ((1.0 - wx) * a[ch] as f64 + wx * b[ch] as f64)
                    + wy * ((1.0 - wx) * c[ch] as f64 + wx * d[ch] as f64);
                out[ch] = v.clamp(0.0, 1.0) as f32;
            }
            out
        })
    }
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape("gray_image", format!("{height}x{width} vs {} values", data.len())));
        }
        Ok(GrayImage { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Replicate into three identical channels.
    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.height, self.width, |y, x| {
            let g = self.get(y, x);
            [g, g, g]
        })
    }
}

impl LabImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }
}

impl HueChromaImage {
    pub fn new(height: usize, width: usize, hue: Vec<Option<f64>>, chroma: Vec<f64>) -> Result<Self> {
        let n = height * width;
        if n == 0 || hue.len() != n || chroma.len() != n {
            return Err(Error::shape("huechroma_image", format!("{height}x{width}")));
        }
        Ok(HueChromaImage { height, width, hue, chroma })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hue(&self, y: usize, x: usize) -> Option<f64> {
        self.hue[y * self.width + x]
    }

    pub fn chroma(&self, y: usize, x: usize) -> f64 {
        self.chroma[y * self.width + x]
    }
}

pub fn luminance(px: [f64; 3]) -> f64 {
    LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2]
}

pub fn rgb_to_gray(img: &RgbImage) -> GrayImage {
    let plane = img.height * img.width;
    let (r, rest) = img.data.split_at(plane);
    let (g, b) = rest.split_at(plane);
    let data = (0..plane)
        .map(|i| luminance([r[i] as f64, g[i] as f64, b[i] as f64]) as f32)
        .collect();
    GrayImage { height: img.height, width: img.width, data }
}

fn srgb_decode(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_encode(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * LAB_DELTA * LAB_DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > LAB_DELTA {
        t * t * t
    } else {
        3.0 * LAB_DELTA * LAB_DELTA * (t - 4.0 / 29.0)
    }
}

/// Reference white: XYZ of sRGB white under the conversion matrix.
fn white_point() -> [f64; 3] {
    [0, 1, 2].map(|r| RGB_TO_XYZ[r].iter().sum())
}

fn xyz_to_rgb_matrix() -> &'static [[f64; 3]; 3] {
    static INV: OnceLock<[[f64; 3]; 3]> = OnceLock::new();
    INV.get_or_init(|| invert3(&RGB_TO_XYZ))
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let cof = |r: usize, c: usize| {
        let (r0, r1) = ((r + 1) % 3, (r + 2) % 3);
        let (c0, c1) = ((c + 1) % 3, (c + 2) % 3);
        m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
    };
    let det: f64 = (0..3).map(|c| m[0][c] * cof(0, c)).sum();
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = cof(c, r) / det;
        }
    }
    inv
}

/// One sRGB pixel in `[0, 1]` to CIELAB.
pub fn srgb_to_lab(px: [f64; 3]) -> [f64; 3] {
    let lin = px.map(srgb_decode);
    let wp = white_point();
    let xyz: [f64; 3] = [0, 1, 2].map(|r| (0..3).map(|c| RGB_TO_XYZ[r][c] * lin[c]).sum::<f64>() / wp[r]);
    let (fx, fy, fz) = (lab_f(xyz[0]), lab_f(xyz[1]), lab_f(xyz[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIELAB to sRGB. Out-of-gamut colors come back outside `[0, 1]`.
pub fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let wp = white_point();
    let xyz = [lab_f_inv(fx) * wp[0], lab_f_inv(fy) * wp[1], lab_f_inv(fz) * wp[2]];
    let m = xyz_to_rgb_matrix();
    [0, 1, 2].map(|r| srgb_encode((0..3).map(|c| m[r][c] * xyz[c]).sum::<f64>()))
}

pub fn rgb_to_lab(img: &RgbImage) -> Result<LabImage> {
    if !img.in_range() {
        return Err(Error::invalid("rgb_to_lab", "channel values outside [0, 1]"));
    }
    let plane = img.height * img.width;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..img.height {
        for x in 0..img.width {
            let lab = srgb_to_lab(img.pixel(y, x).map(f64::from));
            let i = y * img.width + x;
            for (c, v) in lab.into_iter().enumerate() {
                data[c * plane + i] = v as f32;
            }
        }
    }
    Ok(LabImage { height: img.height, width: img.width, data })
}

pub fn lab_to_rgb(img: &LabImage) -> RgbImage {
    RgbImage::from_fn(img.height, img.width, |y, x| {
        lab_to_srgb(img.pixel(y, x).map(f64::from)).map(|v| v as f32)
    })
}

/// Hexagonal hue (degrees, `None` when achromatic) and chroma of one pixel.
pub fn hue_chroma(px: [f64; 3]) -> (Option<f64>, f64) {
    let [r, g, b] = px;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    if chroma <= 0.0 {
        return (None, 0.0);
    }
    let sector = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    let hue = (60.0 * sector).rem_euclid(360.0);
    (Some(hue), chroma)
}

pub fn rgb_to_huechroma(img: &RgbImage) -> HueChromaImage {
    let n = img.height * img.width;
    let mut hue = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    for y in 0..img.height {
        for x in 0..img.width {
            let (h, c) = hue_chroma(img.pixel(y, x).map(f64::from));
            hue.push(h);
            chroma.push(c);
        }
    }
    HueChromaImage { height: img.height, width: img.width, hue, chroma }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn single(px: [f32; 3]) -> RgbImage {
        RgbImage::new(1, 1, px.to_vec()).unwrap()
    }

    #[test]
    fn gray_anchor_values() {
        assert_eq!(rgb_to_gray(&single([1.0, 1.0, 1.0])).data()[0], 1.0);
        assert_eq!(rgb_to_gray(&single([0.0, 0.0, 0.0])).data()[0], 0.0);
        assert!((rgb_to_gray(&single([1.0, 0.0, 0.0])).data()[0] - 0.299).abs() < 1e-7);
    }

    #[test]
    fn lab_white_and_black() {
        let w = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((w[0] - 100.0).abs() < 1e-9);
        assert!(w[1].abs() < 1e-3 && w[2].abs() < 1e-3);
        assert_eq!(srgb_to_lab([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn lab_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let px = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let back = lab_to_srgb(srgb_to_lab(px));
            for c in 0..3 {
                worst = worst.max((back[c] - px[c]).abs());
            }
        }
        assert!(worst < 1e-4, "round trip error {worst}");
    }

    #[test]
    fn lab_rejects_out_of_range() {
        assert!(rgb_to_lab(&single([1.5, 0.0, 0.0])).is_err());
    }

    #[test]
    fn primary_hues() {
        assert_eq!(hue_chroma([1.0, 0.0, 0.0]), (Some(0.0), 1.0));
        assert_eq!(hue_chroma([0.0, 1.0, 0.0]), (Some(120.0), 1.0));
        assert_eq!(hue_chroma([0.0, 0.0, 1.0]), (Some(240.0), 1.0));
        assert_eq!(hue_chroma([0.4, 0.4, 0.4]), (None, 0.0));
        let (h, _) = hue_chroma([1.0, 0.0, 0.5]);
        assert!((h.unwrap() - 330.0).abs() < 1e-12);
    }

    #[test]
    fn hue_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let px = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let max = px.iter().copied().fold(0.0, f64::max);
            let s = rng.random_range(0.05..1.0 / max);
            let (h0, c0) = hue_chroma(px);
            let (h1, _) = hue_chroma(px.map(|v| v * s));
            if c0 > 1e-9 {
                let d = (h0.unwrap() - h1.unwrap()).rem_euclid(360.0);
                assert!(d.min(360.0 - d) < 1e-6);
            }
        }
    }

    #[test]
    fn resize_identity_and_mirror() {
        let img = RgbImage::from_fn(3, 4, |y, x| [y as f32 / 3.0, x as f32 / 4.0, 0.5]);
        assert_eq!(img.resized(3, 4), img);
        assert_eq!(img.mirrored().mirrored(), img);
        assert_eq!(img.mirrored().pixel(0, 0), img.pixel(0, 3));
        let big = img.resized(6, 8);
        assert_eq!((big.height(), big.width()), (6, 8));
        assert!(img.crop(1, 1, 3, 3).is_err());
    }
}
