//! Datasets: the synthetic ColoredShapes generator and image-folder I/O.
//!
//! ColoredShapes draws one shape per image on a low-chroma textured
//! background. Classes are (family, fill style) pairs and every class has its
//! own color palette, so an image's colors are predictable from its
//! grayscale geometry.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{luminance, RgbImage};
use crate::error::{Error, Result};

/// One image with optional image-level and pixel-level labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: RgbImage,
    pub label: Option<usize>,
    /// Row-major per-pixel class ids (0 is background).
    pub mask: Option<Vec<u8>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// Datasets keyed by split name.
pub type Splits = BTreeMap<String, Dataset>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillStyle {
    Solid,
    Outline,
    Striped,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [ShapeFamily::Circle, ShapeFamily::Square, ShapeFamily::Triangle, ShapeFamily::Cross];

    fn name(self) -> &'static str {
        match self {
            ShapeFamily::Circle => "circle",
            ShapeFamily::Square => "square",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Cross => "cross",
        }
    }
}

impl FillStyle {
    pub const ALL: [FillStyle; 3] = [FillStyle::Solid, FillStyle::Outline, FillStyle::Striped];

    fn name(self) -> &'static str {
        match self {
            FillStyle::Solid => "solid",
            FillStyle::Outline => "outline",
            FillStyle::Striped => "striped",
        }
    }
}

/// One palette entry: a hue (degrees) drawn with probability `weight`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteEntry {
    pub hue: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeClass {
    pub family: ShapeFamily,
    pub fill: FillStyle,
    pub palette: Vec<PaletteEntry>,
}

impl ShapeClass {
    pub fn name(&self, index: usize) -> String {
        format!("{index:02}_{}_{}", self.family.name(), self.fill.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundSpec {
    /// Range of the background gray level.
    pub level: (f64, f64),
    /// Largest HSV saturation of the background tint.
    pub max_saturation: f64,
    /// Amplitude of the smooth texture component.
    pub texture: f64,
    /// Amplitude of per-pixel noise.
    pub noise: f64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        BackgroundSpec { level: (0.2, 0.8), max_saturation: 0.12, texture: 0.06, noise: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColoredShapesSpec {
    pub image_size: usize,
    pub classes: Vec<ShapeClass>,
    /// Shape circumradius range in pixels.
    pub radius: (f64, f64),
    /// Hue jitter (degrees, uniform +-) applied to palette hues.
    pub hue_jitter: f64,
    pub background: BackgroundSpec,
    /// Fraction of images rendered without color.
    pub achromatic_fraction: f64,
    /// Minimum luminance gap between shape and background.
    pub min_contrast: f64,
    pub masks: bool,
    pub counts: BTreeMap<String, usize>,
}

impl Default for ColoredShapesSpec {
    fn default() -> Self {
        let counts = [("unlabeled", 3000), ("train", 100), ("test", 600), ("probe", 64)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        ColoredShapesSpec {
            image_size: 32,
            classes: default_classes(),
            radius: (7.0, 12.0),
            hue_jitter: 8.0,
            background: BackgroundSpec::default(),
            achromatic_fraction: 0.1,
            min_contrast: 0.15,
            masks: true,
            counts,
        }
    }
}

/// Twelve classes: four families times three fill styles. Class `c` has main
/// hue `30 c` (weight 0.85) and a secondary hue 150 degrees away (0.15).
pub fn default_classes() -> Vec<ShapeClass> {
    let mut out = Vec::new();
    for family in ShapeFamily::ALL {
        for fill in FillStyle::ALL {
            let main = 30.0 * out.len() as f64;
            out.push(ShapeClass {
                family,
                fill,
                palette: vec![
                    PaletteEntry { hue: main, weight: 0.85 },
                    PaletteEntry { hue: (main + 150.0) % 360.0, weight: 0.15 },
                ],
            });
        }
    }
    out
}

/// The 12 -> 4 -> 2 grouping of the default classes: leaves by family, then
/// families {circle, square} and {triangle, cross}.
pub fn default_hierarchy() -> crate::labelspace::Hierarchy {
    use crate::labelspace::Hierarchy;
    let family = |f: usize| Hierarchy::Group((0..3).map(|k| Hierarchy::Leaf(3 * f + k)).collect());
    Hierarchy::Group(vec![
        Hierarchy::Group(vec![family(0), family(1)]),
        Hierarchy::Group(vec![family(2), family(3)]),
    ])
}

impl ColoredShapesSpec {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().enumerate().map(|(i, c)| c.name(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.classes.len() < 2 {
            return bad(format!("{} classes, need at least 2", self.classes.len()));
        }
        if self.classes.len() > 254 {
            return bad("too many classes for 8-bit masks".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            let total: f64 = c.palette.iter().map(|p| p.weight).sum();
            if c.palette.is_empty() || c.palette.iter().any(|p| p.weight < 0.0) || (total - 1.0).abs() > 1e-9 {
                return bad(format!("palette of class {i} must have non-negative weights summing to 1"));
            }
        }
        let (r0, r1) = self.radius;
        if !(r0 > 2.0 && r0 <= r1) {
            return bad(format!("radius range {r0}..{r1} invalid"));
        }
        if 2.0 * r1 + 2.0 > self.image_size as f64 {
            return bad(format!("shape radius {r1} does not fit a {0}x{0} canvas", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.achromatic_fraction) {
            return bad("achromatic_fraction outside [0, 1]".into());
        }
        Ok(())
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Geometry of one rendered shape.
#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub family: ShapeFamily,
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    pub angle: f64,
}

impl Shape {
    /// Whether point `(y, x)` lies inside the shape scaled by `scale`.
    pub fn contains(&self, y: f64, x: f64, scale: f64) -> bool {
        let r = self.radius * scale;
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self.family {
            ShapeFamily::Circle => dx * dx + dy * dy <= r * r,
            ShapeFamily::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
            ShapeFamily::Triangle => {
                // equilateral, circumradius r, apex along -v
                (0..3).all(|k| {
                    let a = self.angle + std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    let (ns, nc) = a.sin_cos();
                    -(nc * dx + ns * dy) <= 0.5 * r
                })
            }
            ShapeFamily::Cross => {
                let arm = r / 3.0;
                (u.abs() <= r && v.abs() <= arm) || (v.abs() <= r && u.abs() <= arm)
            }
        }
    }
}

const OUTLINE_WIDTH: f64 = 2.5;
const STRIPE_PERIOD: f64 = 4.0;
const STRIPE_DARKEN: f64 = 0.45;

fn sample_rng(seed: u64, split: &str, index: usize) -> ChaCha8Rng {
    crate::seeding::stream(seed, &format!("colored_shapes/{split}"), index as u64, 0)
}

/// Render one sample of class `label`.
pub fn render_sample<R: Rng + ?Sized>(spec: &ColoredShapesSpec, label: usize, rng: &mut R) -> ImageSample {
    let class = &spec.classes[label];
    let bg = &spec.background;

    let level = rng.random_range(bg.level.0..=bg.level.1);
    let tint = hsv_to_rgb(rng.random_range(0.0..360.0), rng.random_range(0.0..=bg.max_saturation), 1.0);
    let tint_mean = luminance(tint);
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let f = rng.random_range(0.1..0.5);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (f * a.cos(), f * a.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();

    let mut roll = rng.random::<f64>();
    let mut hue = class.palette.last().expect("validated palette").hue;
    for p in &class.palette {
        if roll < p.weight {
            hue = p.hue;
            break;
        }
        roll -= p.weight;
    }
    hue += rng.random_range(-spec.hue_jitter..=spec.hue_jitter);
    let sat = rng.random_range(0.55..=1.0);
    let mut val = rng.random_range(0.45..=1.0);
    let mut color = hsv_to_rgb(hue, sat, val);
    for _ in 0..16 {
        if (luminance(color) - level).abs() >= spec.min_contrast {
            break;
        }
        val = rng.random_range(0.45..=1.0);
        color = hsv_to_rgb(hue, sat, val);
    }
    if (luminance(color) - level).abs() < spec.min_contrast {
        // move the background away from the shape
        let l = luminance(color);
        let target = if l > 0.5 { l - spec.min_contrast } else { l + spec.min_contrast };
        return render_with(spec, label, rng, target.clamp(0.0, 1.0), tint, tint_mean, &waves, color);
    }
    render_with(spec, label, rng, level, tint, tint_mean, &waves, color)
}

#[allow(clippy::too_many_arguments)]
fn render_with<R: Rng + ?Sized>(
    spec: &ColoredShapesSpec,
    label: usize,
    rng: &mut R,
    level: f64,
    tint: [f64; 3],
    tint_mean: f64,
    waves: &[(f64, f64, f64)],
    color: [f64; 3],
) -> ImageSample {
    let n = spec.image_size;
    let class = &spec.classes[label];
    let bg = &spec.background;
    let radius = rng.random_range(spec.radius.0..=spec.radius.1);
    let margin = radius + 1.0;
    let shape = Shape {
        family: class.family,
        cy: rng.random_range(margin..=n as f64 - margin),
        cx: rng.random_range(margin..=n as f64 - margin),
        radius,
        angle: rng.random_range(0.0..std::f64::consts::TAU),
    };
    let stripe_angle = rng.random_range(0.0..std::f64::consts::PI);
    let (ss, sc) = stripe_angle.sin_cos();
    let achromatic = rng.random::<f64>() < spec.achromatic_fraction;
    let dark = color.map(|c| c * STRIPE_DARKEN);
    let inner_scale = ((radius - OUTLINE_WIDTH) / radius).max(0.0);

    let mut mask = vec![0u8; n * n];
    let image = RgbImage::from_fn(n, n, |y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let t: f64 = waves.iter().map(|&(fy, fx, ph)| (fy * py + fx * px + ph).sin()).sum::<f64>() / 2.0;
        let noise = rng.random_range(-1.0..=1.0) * bg.noise;
        let g = level + bg.texture * t + noise;
        let mut px_rgb = tint.map(|c| g * c / tint_mean.max(1e-6));
        if shape.contains(py, px, 1.0) {
            let painted = match class.fill {
                FillStyle::Solid => Some(color),
                FillStyle::Outline => (!shape.contains(py, px, inner_scale)).then_some(color),
                FillStyle::Striped => {
                    let d = (sc * (px - shape.cx) + ss * (py - shape.cy)) / (STRIPE_PERIOD / 2.0);
                    Some(if d.floor().rem_euclid(2.0) == 0.0 { color } else { dark })
                }
            };
            if let Some(c) = painted {
                px_rgb = c;
                mask[y * n + x] = label as u8 + 1;
            }
        }
        if achromatic {
            px_rgb = [luminance(px_rgb); 3];
        }
        px_rgb.map(|v| v.clamp(0.0, 1.0) as f32)
    });
    ImageSample { image, label: Some(label), mask: spec.masks.then_some(mask) }
}

/// All configured splits; class labels cycle so every class is balanced to
/// within one sample.
pub fn generate_colored_shapes(spec: &ColoredShapesSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    let names = spec.class_names();
    let k = spec.classes.len();
    let mut out = Splits::new();
    for (split, &count) in &spec.counts {
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = sample_rng(seed, split, i);
            samples.push(render_sample(spec, i % k, &mut rng));
        }
        out.insert(split.clone(), Dataset { class_names: names.clone(), samples });
    }
    Ok(out)
}

fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), detail: e.to_string() })?;
    use image::DynamicImage as D;
    let rgb = match img {
        D::ImageRgb8(i) => i,
        D::ImageLuma8(_) | D::ImageLumaA8(_) | D::ImageRgba8(_) => img.to_rgb8(),
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                detail: format!("unsupported image mode {:?}; need 8-bit gray or RGB", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = raw[3 * i + c] as f32 / 255.0;
        }
    }
    RgbImage::new(h, w, data)
}

fn decode_mask(path: &Path, height: usize, width: usize) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), detail: e.to_string() })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        _ => {
            return Err(Error::Image { path: path.to_path_buf(), detail: "mask must be 8-bit single channel".into() })
        }
    };
    if (gray.height() as usize, gray.width() as usize) != (height, width) {
        return Err(Error::Image { path: path.to_path_buf(), detail: "mask size differs from its image".into() });
    }
    Ok(gray.into_raw())
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() == want_dirs {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

/// Read `<root>/<split>/<class>/<image>` trees of PNG or binary PPM files.
/// Class indices follow the sorted union of class directory names. When
/// `mask_root` is given, `<mask_root>/<split>/<class>/<stem>.png` supplies
/// per-pixel labels.
pub fn load_image_folder(root: &Path, mask_root: Option<&Path>) -> Result<Splits> {
    let split_dirs = sorted_entries(root, true)?;
    let mut class_names = std::collections::BTreeSet::new();
    for split in &split_dirs {
        for class in sorted_entries(split, true)? {
            class_names.insert(file_name(&class));
        }
    }
    let class_names: Vec<String> = class_names.into_iter().collect();
    let mut out = Splits::new();
    for split in &split_dirs {
        let split_name = file_name(split);
        let mut samples = Vec::new();
        for class in sorted_entries(split, true)? {
            let cname = file_name(&class);
            let label = class_names.iter().position(|c| *c == cname).expect("collected above");
            for file in sorted_entries(&class, false)?.into_iter().filter(|p| is_image(p)) {
                let image = decode_rgb(&file)?;
                let mask = match mask_root {
                    Some(m) => {
                        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                        let mp = m.join(&split_name).join(&cname).join(format!("{stem}.png"));
                        Some(decode_mask(&mp, image.height(), image.width())?)
                    }
                    None => None,
                };
                samples.push(ImageSample { image, label: Some(label), mask });
            }
        }
        out.insert(split_name, Dataset { class_names: class_names.clone(), samples });
    }
    if out.values().all(Dataset::is_empty) {
        log::warn!("no images found under {}", root.display());
    }
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn to_rgb8(img: &RgbImage) -> image::RgbImage {
    let (h, w) = (img.height(), img.width());
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = img.pixel(y as usize, x as usize);
        image::Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Write splits as PNG folders (`<root>/<split>/<class>/<index>.png`) and,
/// for samples with masks, `<mask_root>/<split>/<class>/<index>.png`.
pub fn save_image_folder(splits: &Splits, root: &Path, mask_root: Option<&Path>) -> Result<()> {
    for (split, ds) in splits {
        for (i, s) in ds.samples.iter().enumerate() {
            let class = s.label.map(|l| ds.class_names[l].clone()).unwrap_or_else(|| "unlabeled".into());
            let dir = root.join(split).join(&class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{i:05}.png"));
            to_rgb8(&s.image)
                .save(&path)
                .map_err(|e| Error::Image { path: path.clone(), detail: e.to_string() })?;
            if let (Some(mask), Some(mroot)) = (&s.mask, mask_root) {
                let mdir = mroot.join(split).join(&class);
                fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
                let mpath = mdir.join(format!("{i:05}.png"));
                let (h, w) = (s.image.height() as u32, s.image.width() as u32);
                image::GrayImage::from_raw(w, h, mask.clone())
                    .expect("mask matches image")
                    .save(&mpath)
                    .map_err(|e| Error::Image { path: mpath.clone(), detail: e.to_string() })?;
            }
        }
    }
    Ok(())
}
