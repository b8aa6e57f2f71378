use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PaddingMode;

fn one() -> usize {
    1
}

/// One operation in a trunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default)]
        padding: PaddingMode,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    /// Parameter-free batch normalization.
    BatchNorm,
    Relu,
    /// Fully connected layer over the flattened input; output is `[M, 1, 1]`.
    Affine {
        out_features: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerKind,
}

/// Declarative trunk: an ordered layer chain plus the layer outputs that feed
/// hypercolumns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
    pub taps: Vec<String>,
}

/// `[C, H, W]` extent of one layer output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, op: LayerKind) -> Self {
        LayerSpec { name: name.into(), op }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.op, LayerKind::Conv { .. } | LayerKind::Affine { .. })
    }
}

fn conv(name: &str, out_channels: usize, kernel: usize, padding: PaddingMode) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Conv { out_channels, kernel, stride: 1, pad: kernel / 2, padding })
}

fn pool(name: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::MaxPool { kernel: 2, stride: 2 })
}

/// conv + batch norm + relu, named `{name}`, `{name}_bn`, `{name}_relu`.
fn block(layers: &mut Vec<LayerSpec>, name: &str, width: usize, kernel: usize, padding: PaddingMode) {
    layers.push(conv(name, width, kernel, padding));
    layers.push(LayerSpec::new(format!("{name}_bn"), LayerKind::BatchNorm));
    layers.push(LayerSpec::new(format!("{name}_relu"), LayerKind::Relu));
}

impl NetworkSpec {
    /// Eight 3x3 conv layers in four stages of widths 16, 32, 64, 64 with
    /// 2x2 pooling between stages. Taps: every pool output and the top.
    pub fn mini_vgg(input_channels: usize, input_size: usize, padding: PaddingMode) -> Self {
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        for (stage, width) in [16, 32, 64, 64].into_iter().enumerate() {
            let s = stage + 1;
            if stage > 0 {
                let name = format!("pool{stage}");
                layers.push(pool(&name));
                taps.push(name);
            }
            block(&mut layers, &format!("conv{s}_1"), width, 3, padding);
            block(&mut layers, &format!("conv{s}_2"), width, 3, padding);
        }
        taps.push("conv4_2_relu".into());
        NetworkSpec { input_channels, input_size, layers, taps }
    }

    /// Three conv layers and two fully connected layers.
    pub fn mini_alex(input_channels: usize, input_size: usize, padding: PaddingMode) -> Self {
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        for (i, (width, kernel)) in [(32, 5), (64, 5), (64, 3)].into_iter().enumerate() {
            block(&mut layers, &format!("conv{}", i + 1), width, kernel, padding);
            let name = format!("pool{}", i + 1);
            layers.push(pool(&name));
            taps.push(name);
        }
        for name in ["fc4", "fc5"] {
            layers.push(LayerSpec::new(name, LayerKind::Affine { out_features: 128 }));
            layers.push(LayerSpec::new(format!("{name}_bn"), LayerKind::BatchNorm));
            layers.push(LayerSpec::new(format!("{name}_relu"), LayerKind::Relu));
        }
        taps.push("fc5_relu".into());
        NetworkSpec { input_channels, input_size, layers, taps }
    }

    /// Full-size VGG-16 convolutional trunk (13 conv layers, five pools,
    /// stride 32 at pool5) at 224x224 input.
    pub fn vgg16_shaped() -> Self {
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        for (stage, (width, reps)) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)].into_iter().enumerate() {
            for r in 0..reps {
                block(&mut layers, &format!("conv{}_{}", stage + 1, r + 1), width, 3, PaddingMode::Zero);
            }
            let name = format!("pool{}", stage + 1);
            layers.push(pool(&name));
            taps.push(name);
        }
        NetworkSpec { input_channels: 1, input_size: 224, layers, taps }
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn tap_indices(&self) -> Result<Vec<usize>> {
        self.taps.iter().map(|t| self.layer_index(t)).collect()
    }

    /// Output extent of the trunk input and every layer, validating the chain.
    pub fn shapes(&self) -> Result<Vec<FeatureShape>> {
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::Spec("input channels and size must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut cur = FeatureShape { channels: self.input_channels, height: self.input_size, width: self.input_size };
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if layer.name.is_empty() || !seen.insert(layer.name.as_str()) {
                return Err(Error::Spec(format!("layer name `{}` empty or repeated", layer.name)));
            }
            let bad = |what: String| Error::Spec(format!("layer `{}`: {what}", layer.name));
            cur = match layer.op {
                LayerKind::Conv { out_channels, kernel, stride, pad, .. } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("zero channels, kernel or stride".into()));
                    }
                    let (ph, pw) = (cur.height + 2 * pad, cur.width + 2 * pad);
                    if kernel > ph || kernel > pw {
                        return Err(bad(format!("kernel {kernel} exceeds padded input {ph}x{pw}")));
                    }
                    FeatureShape {
                        channels: out_channels,
                        height: (ph - kernel) / stride + 1,
                        width: (pw - kernel) / stride + 1,
                    }
                }
                LayerKind::MaxPool { kernel, stride } => {
                    if kernel == 0 || stride == 0 || kernel > cur.height || kernel > cur.width {
                        return Err(bad(format!("pool {kernel}/{stride} on {}x{}", cur.height, cur.width)));
                    }
                    FeatureShape {
                        channels: cur.channels,
                        height: (cur.height - kernel) / stride + 1,
                        width: (cur.width - kernel) / stride + 1,
                    }
                }
                LayerKind::BatchNorm | LayerKind::Relu => cur,
                LayerKind::Affine { out_features } => {
                    if out_features == 0 {
                        return Err(bad("zero output features".into()));
                    }
                    FeatureShape { channels: out_features, height: 1, width: 1 }
                }
            };
            out.push(cur);
        }
        if out.is_empty() {
            return Err(Error::Spec("no layers".into()));
        }
        for tap in &self.taps {
            self.layer_index(tap).map_err(|_| Error::Spec(format!("tap `{tap}` names no layer")))?;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn output_shape(&self) -> Result<FeatureShape> {
        Ok(*self.shapes()?.last().expect("non-empty"))
    }

    /// Channels of every tap, in tap order.
    pub fn tap_channels(&self) -> Result<Vec<usize>> {
        let shapes = self.shapes()?;
        Ok(self.tap_indices()?.into_iter().map(|i| shapes[i].channels).collect())
    }

    /// Input extent each parametric layer sees.
    pub fn layer_inputs(&self) -> Result<Vec<FeatureShape>> {
        let shapes = self.shapes()?;
        let first = FeatureShape { channels: self.input_channels, height: self.input_size, width: self.input_size };
        Ok(std::iter::once(first).chain(shapes[..shapes.len() - 1].iter().copied()).collect())
    }

    /// Parameter tensor names with their shapes, in layer order.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let inputs = self.layer_inputs()?;
        let mut out = Vec::new();
        for (layer, input) in self.layers.iter().zip(inputs) {
            match layer.op {
                LayerKind::Conv { out_channels, kernel, .. } => {
                    out.push((format!("{}.weight", layer.name), vec![out_channels, input.channels, kernel, kernel]));
                    out.push((format!("{}.bias", layer.name), vec![out_channels]));
                }
                LayerKind::Affine { out_features } => {
                    out.push((format!("{}.weight", layer.name), vec![input.numel(), out_features]));
                    out.push((format!("{}.bias", layer.name), vec![out_features]));
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Running-statistic tensor names with their shapes.
    pub fn statistic_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            if layer.op == LayerKind::BatchNorm {
                out.push((format!("{}.running_mean", layer.name), vec![shape.channels]));
                out.push((format!("{}.running_var", layer.name), vec![shape.channels]));
            }
        }
        Ok(out)
    }

    /// Copy with every batch-norm layer removed.
    pub fn without_batchnorm(&self) -> NetworkSpec {
        let mut spec = self.clone();
        let removed: Vec<String> =
            spec.layers.iter().filter(|l| l.op == LayerKind::BatchNorm).map(|l| l.name.clone()).collect();
        spec.layers.retain(|l| l.op != LayerKind::BatchNorm);
        // a tap on a removed layer moves to the layer before it
        for tap in &mut spec.taps {
            if removed.contains(tap) {
                let idx = self.layer_index(tap).expect("tap validated");
                *tap = self.layers[..idx]
                    .iter()
                    .rev()
                    .find(|l| l.op != LayerKind::BatchNorm)
                    .map(|l| l.name.clone())
                    .unwrap_or_default();
            }
        }
        spec
    }

    pub fn with_input_channels(&self, input_channels: usize) -> NetworkSpec {
        NetworkSpec { input_channels, ..self.clone() }
    }

    /// Padding mode of the last conv layer, if any.
    pub fn last_padding(&self) -> PaddingMode {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l.op {
                LayerKind::Conv { padding, .. } => Some(padding),
                _ => None,
            })
            .unwrap_or_default()
    }
}

/// Append `n_blocks` of [2x2/2 max pool, 3x3 conv, batch norm, relu]; each
/// block's relu becomes a tap.
pub fn add_fov_blocks(spec: &NetworkSpec, n_blocks: usize, width: usize) -> Result<NetworkSpec> {
    let mut out = spec.clone();
    let padding = spec.last_padding();
    let base = spec.layers.iter().filter(|l| l.name.starts_with("fov")).count() / 4;
    for i in 0..n_blocks {
        let id = base + i + 1;
        out.layers.push(LayerSpec::new(format!("fov{id}_pool"), LayerKind::MaxPool { kernel: 2, stride: 2 }));
        out.layers.push(LayerSpec::new(
            format!("fov{id}_conv"),
            LayerKind::Conv { out_channels: width, kernel: 3, stride: 1, pad: 1, padding },
        ));
        out.layers.push(LayerSpec::new(format!("fov{id}_bn"), LayerKind::BatchNorm));
        out.layers.push(LayerSpec::new(format!("fov{id}_relu"), LayerKind::Relu));
        out.taps.push(format!("fov{id}_relu"));
    }
    out.shapes().map_err(|e| Error::Spec(format!("field-of-view blocks do not fit: {e}")))?;
    Ok(out)
}

/// `(receptive field side, cumulative stride)` at the output of `layer_name`.
pub fn compute_receptive_field(spec: &NetworkSpec, layer_name: &str) -> Result<(usize, usize)> {
    let idx = spec.layer_index(layer_name)?;
    let inputs = spec.layer_inputs()?;
    let (mut rf, mut jump) = (1usize, 1usize);
    for (layer, input) in spec.layers[..=idx].iter().zip(inputs) {
        let (k, s) = match layer.op {
            LayerKind::Conv { kernel, stride, .. } => (kernel, stride),
            LayerKind::MaxPool { kernel, stride } => (kernel, stride),
            LayerKind::Affine { .. } => (input.height.max(input.width), 1),
            LayerKind::BatchNorm | LayerKind::Relu => (1, 1),
        };
        rf += (k - 1) * jump;
        jump *= s;
    }
    Ok((rf, jump))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: Vec<LayerSpec>) -> NetworkSpec {
        let taps = vec![layers.last().unwrap().name.clone()];
        NetworkSpec { input_channels: 1, input_size: 16, layers, taps }
    }

    #[test]
    fn mini_vgg_shape_chain() {
        let spec = NetworkSpec::mini_vgg(1, 32, PaddingMode::Zero);
        let shapes = spec.shapes().unwrap();
        let by = |n: &str| shapes[spec.layer_index(n).unwrap()];
        assert_eq!(by("conv1_2_relu"), FeatureShape { channels: 16, height: 32, width: 32 });
        assert_eq!(by("pool1"), FeatureShape { channels: 16, height: 16, width: 16 });
        assert_eq!(by("pool2"), FeatureShape { channels: 32, height: 8, width: 8 });
        assert_eq!(by("pool3"), FeatureShape { channels: 64, height: 4, width: 4 });
        assert_eq!(by("conv4_2_relu"), FeatureShape { channels: 64, height: 4, width: 4 });
        assert_eq!(spec.tap_channels().unwrap(), vec![16, 32, 64, 64]);
        assert_eq!(spec.layers.iter().filter(|l| matches!(l.op, LayerKind::Conv { .. })).count(), 8);
    }

    #[test]
    fn mini_alex_counts() {
        let spec = NetworkSpec::mini_alex(1, 32, PaddingMode::Zero);
        let count = |f: fn(&LayerKind) -> bool| spec.layers.iter().filter(|l| f(&l.op)).count();
        assert_eq!(count(|k| matches!(k, LayerKind::Conv { .. })), 3);
        assert_eq!(count(|k| matches!(k, LayerKind::Affine { .. })), 2);
        assert_eq!(spec.output_shape().unwrap(), FeatureShape { channels: 128, height: 1, width: 1 });
    }

    #[test]
    fn bad_tap_and_duplicate_names_rejected() {
        let mut spec = tiny(vec![conv("a", 2, 3, PaddingMode::Zero)]);
        spec.taps = vec!["nope".into()];
        assert!(spec.validate().is_err());
        let spec = tiny(vec![conv("a", 2, 3, PaddingMode::Zero), conv("a", 2, 3, PaddingMode::Zero)]);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn receptive_field_hand_cases() {
        let spec = tiny(vec![conv("c1", 4, 3, PaddingMode::Zero)]);
        assert_eq!(compute_receptive_field(&spec, "c1").unwrap(), (3, 1));
        let spec = tiny(vec![conv("c1", 4, 3, PaddingMode::Zero), pool("p1"), conv("c2", 4, 3, PaddingMode::Zero)]);
        assert_eq!(compute_receptive_field(&spec, "c2").unwrap(), (8, 2));
        assert!(matches!(compute_receptive_field(&spec, "zz"), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn fov_blocks_expand_receptive_field() {
        let vgg = NetworkSpec::vgg16_shaped();
        let (rf0, s0) = compute_receptive_field(&vgg, "pool5").unwrap();
        assert_eq!((rf0, s0), (212, 32));
        let ext = add_fov_blocks(&vgg, 2, 1024).unwrap();
        let (rf1, _) = compute_receptive_field(&ext, "fov1_relu").unwrap();
        let (rf2, _) = compute_receptive_field(&ext, "fov2_relu").unwrap();
        assert_eq!(rf1 - rf0, 160);
        // the second block sits at stride 64, so the same recurrence doubles its gain
        assert_eq!(rf2 - rf1, 320);
        assert_eq!(add_fov_blocks(&vgg, 0, 1024).unwrap(), vgg);
        assert!(add_fov_blocks(&vgg, 3, 1024).is_err());
    }

    #[test]
    fn fov_on_stride_four_trunk() {
        let spec = tiny(vec![conv("c1", 4, 3, PaddingMode::Zero), pool("p1"), pool("p2")]);
        let (rf0, s) = compute_receptive_field(&spec, "p2").unwrap();
        assert_eq!(s, 4);
        let ext = add_fov_blocks(&spec, 1, 8).unwrap();
        let (rf1, _) = compute_receptive_field(&ext, "fov1_relu").unwrap();
        assert_eq!(rf1 - rf0, 20);
    }

    #[test]
    fn removing_batchnorm_keeps_taps_valid() {
        let mut spec = NetworkSpec::mini_vgg(1, 32, PaddingMode::Zero);
        spec.taps.push("conv1_1_bn".into());
        let plain = spec.without_batchnorm();
        assert!(plain.validate().is_ok());
        assert_eq!(plain.taps.last().unwrap(), "conv1_1");
    }

    #[test]
    fn spec_json_round_trip_and_unknown_keys() {
        let spec = NetworkSpec::mini_vgg(1, 32, PaddingMode::BiasOfPrevious);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<NetworkSpec>(&text).unwrap(), spec);
        let bad = r#"{"name":"c","op":{"type":"conv","out_channels":2,"kernel":3,"dilation":2}}"#;
        assert!(serde_json::from_str::<LayerSpec>(bad).is_err());
    }
}
