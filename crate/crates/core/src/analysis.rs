//! Representation analysis: per-feature correlation between two trunks,
//! top activations with receptive-field boxes, and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{compute_receptive_field, LayerKind, Network};
use crate::tensor::{Float, Tensor};

/// Spatial subsampling used when correlating activations: every n-th
/// position of each row-major map.
pub const PIXEL_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCorrelation {
    pub layer: String,
    /// Pearson correlation per channel; `None` when either side is constant.
    pub correlations: Vec<Option<f64>>,
    pub median: Option<f64>,
    /// First and third quartile of the defined correlations.
    pub quartiles: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub probe_images: usize,
    pub pixel_stride: usize,
    pub layers: Vec<LayerCorrelation>,
}

/// Pearson correlation, `None` for a zero-variance input.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.is_empty() || a.len() != b.len() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= f64::MIN_POSITIVE || sbb <= f64::MIN_POSITIVE {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarise(layer: String, correlations: Vec<Option<f64>>) -> LayerCorrelation {
    let mut defined: Vec<f64> = correlations.iter().flatten().copied().collect();
    defined.sort_by(f64::total_cmp);
    let (median, quartiles) = if defined.is_empty() {
        (None, None)
    } else {
        (Some(quantile(&defined, 0.5)), Some((quantile(&defined, 0.25), quantile(&defined, 0.75))))
    };
    LayerCorrelation { layer, correlations, median, quartiles }
}

/// Channel `c` of `[N, C, H, W]`, subsampled.
fn channel_samples<F: Float>(t: &Tensor<F>, c: usize, stride: usize) -> Vec<f64> {
    let s = t.shape();
    let (n, ch, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(n * plane.div_ceil(stride));
    for i in 0..n {
        let base = (i * ch + c) * plane;
        out.extend(t.data()[base..base + plane].iter().step_by(stride).map(|v| v.as_f64()));
    }
    out
}

/// Correlate every post-relu channel of two trunks with identical specs
/// over the probe batch.
pub fn feature_correlation<F: Float>(a: &Network<F>, b: &Network<F>, probe: &Tensor<F>) -> Result<CorrelationReport> {
    if a.spec != b.spec {
        return Err(Error::Spec("correlated networks must share one network spec".into()));
    }
    let acts_a = a.infer(probe)?;
    let acts_b = b.infer(probe)?;
    let mut layers = Vec::new();
    for (i, layer) in a.spec.layers.iter().enumerate() {
        if layer.op != LayerKind::Relu {
            continue;
        }
        let channels = acts_a[i].shape()[1];
        let corr = (0..channels)
            .map(|c| {
                pearson(&channel_samples(&acts_a[i], c, PIXEL_STRIDE), &channel_samples(&acts_b[i], c, PIXEL_STRIDE))
            })
            .collect();
        layers.push(summarise(layer.name.clone(), corr));
    }
    Ok(CorrelationReport { probe_images: probe.shape()[0], pixel_stride: PIXEL_STRIDE, layers })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ActivationRecord {
    pub image: usize,
    pub y: usize,
    pub x: usize,
    pub value: f64,
    /// Input patch `(top, left, bottom, right)`, exclusive ends, clipped.
    pub patch: (usize, usize, usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopActivationSet {
    pub layer: String,
    pub receptive_field: usize,
    pub stride: usize,
    /// Per feature channel, records by descending activation.
    pub features: Vec<Vec<ActivationRecord>>,
}

/// Input patch of side `rf` centred on map position `(y, x)`.
pub fn patch_box(y: usize, x: usize, rf: usize, stride: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
    let span = |c: usize, extent: usize| {
        let centre = (c as f64 + 0.5) * stride as f64;
        let start = (centre - rf as f64 / 2.0).round().max(0.0) as usize;
        let end = ((centre + rf as f64 / 2.0).round() as usize).min(extent);
        (start.min(extent), end)
    };
    let (t, b) = span(y, height);
    let (l, r) = span(x, width);
    (t, l, b, r)
}

/// Exact top-`m` `(image, position)` pairs per channel of `layer`. Ties go
/// to earlier images and positions.
pub fn top_activations<F: Float>(net: &Network<F>, layer: &str, images: &Tensor<F>, m: usize) -> Result<TopActivationSet> {
    if m == 0 {
        return Err(Error::invalid("top_activations", "M must be at least 1"));
    }
    let idx = net.spec.layer_index(layer)?;
    let (rf, stride) = compute_receptive_field(&net.spec, layer)?;
    let acts = net.infer(images)?;
    let t = &acts[idx];
    let s = t.shape();
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let (ih, iw) = (images.shape()[2], images.shape()[3]);
    let mut features = Vec::with_capacity(ch);
    for c in 0..ch {
        let mut all: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(n * h * w);
        for i in 0..n {
            let base = (i * ch + c) * h * w;
            for p in 0..h * w {
                all.push((t.data()[base + p].as_f64(), i, p / w, p % w));
            }
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
        all.truncate(m);
        features.push(
            all.into_iter()
                .map(|(value, image, y, x)| ActivationRecord { image, y, x, value, patch: patch_box(y, x, rf, stride, ih, iw) })
                .collect(),
        );
    }
    Ok(TopActivationSet { layer: layer.to_string(), receptive_field: rf, stride, features })
}

/// A named loss trace `(epoch, loss)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossCurve {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct Header<'a> {
    probe_images: usize,
    pixel_stride: usize,
    activations: &'a str,
    layers: Vec<(&'a str, Option<f64>)>,
}

pub fn correlation_csv(report: &CorrelationReport) -> String {
    let mut s = String::from("layer,feature,corr\n");
    for l in &report.layers {
        for (f, c) in l.correlations.iter().enumerate() {
            match c {
                Some(v) => writeln!(s, "{},{f},{v:.6}", l.layer),
                None => writeln!(s, "{},{f},", l.layer),
            }
            .expect("string write");
        }
    }
    s
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#, W / 2.0)
        .unwrap();
    writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{0}" stroke="black"/>"#,
        H - MARGIN,
        W - MARGIN
    )
    .unwrap();
    s
}

/// Bars of the per-layer median with quartile whiskers on a [-1, 1] axis.
pub fn correlation_svg(report: &CorrelationReport) -> String {
    let mut s = svg_open("feature correlation (median, quartiles)");
    let n = report.layers.len().max(1) as f64;
    let plot_h = H - 2.0 * MARGIN;
    let y_of = |v: f64| MARGIN + (1.0 - v) / 2.0 * plot_h;
    let slot = (W - 2.0 * MARGIN) / n;
    writeln!(s, r##"<line x1="{MARGIN}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="#999" stroke-dasharray="4"/>"##, y_of(0.0), W - MARGIN)
        .unwrap();
    for (i, l) in report.layers.iter().enumerate() {
        let x = MARGIN + slot * (i as f64 + 0.2);
        let bw = slot * 0.6;
        if let (Some(m), Some((q1, q3))) = (l.median, l.quartiles) {
            let (top, bottom) = if m >= 0.0 { (y_of(m), y_of(0.0)) } else { (y_of(0.0), y_of(m)) };
            writeln!(
                s,
                r##"<rect x="{x:.2}" y="{top:.2}" width="{bw:.2}" height="{:.2}" fill="#4a7ab5"/>"##,
                bottom - top
            )
            .unwrap();
            let cx = x + bw / 2.0;
            writeln!(s, r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#, y_of(q3), y_of(q1)).unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="9" text-anchor="middle">{}</text>"#,
            x + bw / 2.0,
            H - MARGIN + 14.0,
            l.layer
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Polylines of every curve on shared axes.
pub fn loss_curve_svg(curves: &[LossCurve]) -> String {
    let mut s = svg_open("training loss");
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let (mut x_max, mut y_max) = (0.0f64, 0.0f64);
    for &(x, y) in pts {
        x_max = x_max.max(x);
        y_max = y_max.max(y);
    }
    let x_max = if x_max > 0.0 { x_max } else { 1.0 };
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let colors = ["#4a7ab5", "#c0504d", "#9bbb59", "#8064a2", "#f79646"];
    for (i, c) in curves.iter().enumerate() {
        let mut path = String::new();
        for &(x, y) in &c.points {
            let px = MARGIN + x / x_max * (W - 2.0 * MARGIN);
            let py = H - MARGIN - y / y_max * (H - 2.0 * MARGIN);
            write!(path, "{px:.2},{py:.2} ").unwrap();
        }
        let color = colors[i % colors.len()];
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#, path.trim_end()).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" fill="{color}">{}</text>"#,
            W - MARGIN - 120.0,
            MARGIN + 14.0 * (i as f64 + 1.0),
            c.name
        )
        .unwrap();
    }
    writeln!(s, r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="9">0</text>"#, H - MARGIN + 12.0).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="9" text-anchor="end">{x_max:.2} epochs</text>"#,
        W - MARGIN,
        H - MARGIN + 12.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

/// Write `correlation.csv`, `correlation.svg`, `loss_curve.svg` and
/// `report.json` into `out_dir`. Nothing is written if the report is empty.
pub fn emit_report(report: &CorrelationReport, curves: &[LossCurve], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if report.layers.is_empty() {
        return Err(Error::invalid("emit_report", "correlation report has no layers"));
    }
    let header = Header {
        probe_images: report.probe_images,
        pixel_stride: report.pixel_stride,
        activations: "post-relu",
        layers: report.layers.iter().map(|l| (l.layer.as_str(), l.median)).collect(),
    };
    let files = [
        ("correlation.csv", correlation_csv(report)),
        ("correlation.svg", correlation_svg(report)),
        ("loss_curve.svg", loss_curve_svg(curves)),
        ("report.json", serde_json::to_string_pretty(&header).expect("header serialises") + "\n"),
    ];
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
