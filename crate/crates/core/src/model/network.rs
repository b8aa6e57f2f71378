use std::collections::BTreeMap;

use rand::Rng;

use super::spec::{FeatureShape, LayerKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{xavier_init, BatchStats, Conv2dOptions, Float, PaddingMode, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are reported for update.
    Train,
    /// Running statistics.
    Infer,
}

/// Named tensors with grad-enabled copies bound onto a tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<F> {
    pub tensors: BTreeMap<String, Tensor<F>>,
}

/// Parameters of a [`ParamSet`] placed on one tape.
pub struct Bound<'t, F> {
    vars: BTreeMap<String, Var<'t, F>>,
}

impl<'t, F: Float> Bound<'t, F> {
    pub fn get(&self, name: &str) -> Result<Var<'t, F>> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, F>)> {
        self.vars.iter()
    }

    pub fn merge(mut self, other: Bound<'t, F>) -> Self {
        self.vars.extend(other.vars);
        self
    }
}

impl<F: Float> ParamSet<F> {
    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Leaves for names accepted by `trainable`, constants for the rest.
    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: &dyn Fn(&str) -> bool) -> Bound<'t, F> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Running mean and (biased) variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// A trunk: spec, parameters and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<F> {
    pub spec: NetworkSpec,
    pub params: ParamSet<F>,
    pub stats: BTreeMap<String, RunningStats<F>>,
}

/// Output of every layer for one forward pass.
pub struct Activations<'t, F> {
    pub layers: Vec<Var<'t, F>>,
    /// Batch statistics of each train-mode batch-norm layer, by layer name.
    pub batch_stats: Vec<(String, BatchStats<F>)>,
}

impl<'t, F: Float> Activations<'t, F> {
    pub fn top(&self) -> Var<'t, F> {
        *self.layers.last().expect("non-empty network")
    }
}

/// Network input for a gray image: intensities shifted to be centred on zero.
pub const INPUT_SHIFT: f64 = 0.5;

/// Pack `[H, W]` planes of `channels` each into an `[N, channels, H, W]`
/// network input with [`INPUT_SHIFT`] removed.
pub fn input_tensor<F: Float>(planes: &[&[f32]], channels: usize, height: usize, width: usize) -> Result<Tensor<F>> {
    let per = channels * height * width;
    let mut data = Vec::with_capacity(planes.len() * per);
    for p in planes {
        if p.len() != per {
            return Err(Error::shape("input_tensor", format!("sample has {} values, need {per}", p.len())));
        }
        data.extend(p.iter().map(|&v| F::of(v as f64 - INPUT_SHIFT)));
    }
    Tensor::new(vec![planes.len(), channels, height, width], data)
}

impl<F: Float> Network<F> {
    /// Xavier-initialised weights, zero biases, unit running statistics.
    pub fn build<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        let inputs = spec.layer_inputs()?;
        let shapes = spec.shapes()?;
        let mut tensors = BTreeMap::new();
        let mut stats = BTreeMap::new();
        for ((layer, input), shape) in spec.layers.iter().zip(&inputs).zip(&shapes) {
            match layer.op {
                LayerKind::Conv { out_channels, kernel, .. } => {
                    let fan_in = input.channels * kernel * kernel;
                    let w = xavier_init(&[out_channels, input.channels, kernel, kernel], fan_in, rng);
                    tensors.insert(format!("{}.weight", layer.name), w);
                    tensors.insert(format!("{}.bias", layer.name), Tensor::zeros(vec![out_channels]));
                }
                LayerKind::Affine { out_features } => {
                    let w = xavier_init(&[input.numel(), out_features], input.numel(), rng);
                    tensors.insert(format!("{}.weight", layer.name), w);
                    tensors.insert(format!("{}.bias", layer.name), Tensor::zeros(vec![out_features]));
                }
                LayerKind::BatchNorm => {
                    let c = shape.channels;
                    stats.insert(
                        layer.name.clone(),
                        RunningStats { mean: vec![F::zero(); c], var: vec![F::one(); c] },
                    );
                }
                _ => {}
            }
        }
        Ok(Network { spec: spec.clone(), params: ParamSet { tensors }, stats })
    }

    pub fn shapes(&self) -> Result<Vec<FeatureShape>> {
        self.spec.shapes()
    }

    /// Blend observed batch statistics into the running averages.
    pub fn update_running_stats(&mut self, observed: &[(String, BatchStats<F>)]) -> Result<()> {
        let keep = F::of(BN_MOMENTUM);
        let new = F::one() - keep;
        for (name, s) in observed {
            let rs = self.stats.get_mut(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            for (r, &m) in rs.mean.iter_mut().zip(&s.mean) {
                *r = keep * *r + new * m;
            }
            for (r, &v) in rs.var.iter_mut().zip(&s.var) {
                *r = keep * *r + new * v;
            }
        }
        Ok(())
    }

    /// The constant each channel of layer `idx`'s input takes when the
    /// preceding conv sees an all-zero input: its bias pushed through the
    /// intervening batch norms, relus and pools (inference statistics).
    pub fn padding_fill(&self, idx: usize) -> Result<Option<Vec<F>>> {
        let Some(prev) = self.spec.layers[..idx].iter().rposition(|l| l.has_params()) else {
            return Ok(None);
        };
        let mut v = self.params.get(&format!("{}.bias", self.spec.layers[prev].name))?.data().to_vec();
        for layer in &self.spec.layers[prev + 1..idx] {
            match layer.op {
                LayerKind::BatchNorm => {
                    let s = &self.stats[&layer.name];
                    for ((x, &m), &var) in v.iter_mut().zip(&s.mean).zip(&s.var) {
                        *x = (*x - m) / (var + F::of(BN_EPS)).sqrt();
                    }
                }
                LayerKind::Relu => v.iter_mut().for_each(|x| *x = x.max(F::zero())),
                LayerKind::MaxPool { .. } => {}
                LayerKind::Conv { .. } | LayerKind::Affine { .. } => unreachable!("prev is the last parametric layer"),
            }
        }
        Ok(Some(v))
    }

    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: &dyn Fn(&str) -> bool) -> Bound<'t, F> {
        self.params.bind(tape, trainable)
    }

    /// Run the trunk on `[N, C, H, W]` input.
    pub fn forward<'t>(&self, bound: &Bound<'t, F>, input: Var<'t, F>, mode: Mode) -> Result<Activations<'t, F>> {
        self.forward_prefix(bound, input, mode, self.spec.layers.len())
    }

    /// Run only the first `n_layers` layers.
    pub fn forward_prefix<'t>(
        &self,
        bound: &Bound<'t, F>,
        input: Var<'t, F>,
        mode: Mode,
        n_layers: usize,
    ) -> Result<Activations<'t, F>> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.spec.input_channels {
            return Err(Error::shape(
                "network_forward",
                format!("expected [N, {}, H, W], got {shape:?}", self.spec.input_channels),
            ));
        }
        let mut x = input;
        let mut layers = Vec::with_capacity(n_layers);
        let mut batch_stats = Vec::new();
        for (idx, layer) in self.spec.layers[..n_layers].iter().enumerate() {
            x = match &layer.op {
                LayerKind::Conv { stride, pad, padding, .. } => {
                    let w = bound.get(&format!("{}.weight", layer.name))?;
                    let b = bound.get(&format!("{}.bias", layer.name))?;
                    let fill = match padding {
                        PaddingMode::BiasOfPrevious => self.padding_fill(idx)?,
                        PaddingMode::Zero => None,
                    };
                    // the first conv has no previous layer and pads with zeros
                    let padding = if fill.is_some() { *padding } else { PaddingMode::Zero };
                    let opts = Conv2dOptions { stride: *stride, pad: *pad, padding };
                    x.conv2d(w, b, &opts, fill.as_deref())?
                }
                LayerKind::MaxPool { kernel, stride } => x.maxpool2d(*kernel, *stride)?,
                LayerKind::Relu => x.relu()?,
                LayerKind::BatchNorm => match mode {
                    Mode::Train => {
                        let (y, s) = x.batchnorm_train(BN_EPS)?;
                        batch_stats.push((layer.name.clone(), s));
                        y
                    }
                    Mode::Infer => {
                        let s = &self.stats[&layer.name];
                        x.batchnorm_infer(&s.mean, &s.var, BN_EPS)?
                    }
                },
                LayerKind::Affine { out_features } => {
                    let w = bound.get(&format!("{}.weight", layer.name))?;
                    let b = bound.get(&format!("{}.bias", layer.name))?;
                    let n = x.shape()[0];
                    x.flatten()?.affine(w, b)?.reshape(vec![n, *out_features, 1, 1])?
                }
            };
            layers.push(x);
        }
        Ok(Activations { layers, batch_stats })
    }

    /// Inference-mode values of every layer for a batch, off any training tape.
    pub fn infer(&self, input: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, &|_| false);
        let x = tape.constant(input.clone());
        let acts = self.forward(&bound, x, Mode::Infer)?;
        Ok(acts.layers.iter().map(|v| (*v.value()).clone()).collect())
    }

    pub fn cast<G: Float>(&self) -> Network<G> {
        let conv = |v: &[F]| v.iter().map(|x| G::of(x.as_f64())).collect();
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            stats: self
                .stats
                .iter()
                .map(|(k, s)| (k.clone(), RunningStats { mean: conv(&s.mean), var: conv(&s.var) }))
                .collect(),
        }
    }
}
