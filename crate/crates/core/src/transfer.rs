//! Downstream fine-tuning: checkpoint adaptation, layer freezing, the
//! early-stopping schedule and evaluation metrics.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, HEAD_PREFIX};
use crate::colorspace::{rgb_to_gray, RgbImage};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    add_fov_blocks, hypercolumn_extract, input_tensor, Activations, Bound, LayerKind, Mlp, MlpSpec, Mode, Network,
    NetworkSpec,
};
use crate::seeding::stream;
use crate::targets::PixelSampleSet;
use crate::tensor::{Float, SgdMomentum, Tape, Tensor, Var};

/// Smallest probe batch accepted by [`rebalance_unit_variance`].
pub const MIN_PROBE: usize = 64;

/// Fold each batch norm's running statistics into the conv or affine layer
/// in front of it and drop the batch-norm layers.
pub fn absorb_batchnorm<F: Float>(net: &Network<F>) -> Result<Network<F>> {
    let mut params = net.params.clone();
    for (i, layer) in net.spec.layers.iter().enumerate() {
        if layer.op != LayerKind::BatchNorm {
            continue;
        }
        let prev = i.checked_sub(1).map(|p| &net.spec.layers[p]);
        let prev = match prev {
            Some(p) if p.has_params() => p,
            _ => return Err(Error::Spec(format!("batch norm `{}` does not follow a conv or affine layer", layer.name))),
        };
        let stats = net
            .stats
            .get(&layer.name)
            .ok_or_else(|| Error::Spec(format!("missing running statistics for `{}`", layer.name)))?;
        let inv: Vec<F> = stats.var.iter().map(|&v| F::one() / (v + F::of(crate::model::BN_EPS)).sqrt()).collect();
        let w = params.get_mut(&format!("{}.weight", prev.name))?;
        let per_out = matches!(prev.op, LayerKind::Conv { .. });
        let shape = w.shape().to_vec();
        let data = w.data_mut();
        if per_out {
            let chunk = shape[1..].iter().product::<usize>();
            for (f, c) in data.chunks_exact_mut(chunk).enumerate() {
                c.iter_mut().for_each(|x| *x = *x * inv[f]);
            }
        } else {
            for row in data.chunks_exact_mut(shape[1]) {
                row.iter_mut().zip(&inv).for_each(|(x, &s)| *x = *x * s);
            }
        }
        let b = params.get_mut(&format!("{}.bias", prev.name))?;
        for ((x, &m), &s) in b.data_mut().iter_mut().zip(&stats.mean).zip(&inv) {
            *x = (*x - m) * s;
        }
    }
    Ok(Network { spec: net.spec.without_batchnorm(), params, stats: Default::default() })
}

/// Index of the activation measured for parametric layer `l`: its relu if
/// one follows directly, otherwise the layer itself.
fn activation_index(spec: &NetworkSpec, l: usize) -> usize {
    match spec.layers.get(l + 1) {
        Some(next) if next.op == LayerKind::Relu => l + 1,
        _ => l,
    }
}

fn population_std<F: Float>(t: &Tensor<F>) -> f64 {
    let n = t.numel() as f64;
    let mean = t.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    (t.data().iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Scale every conv/affine layer, from the input up, so its activation has
/// unit standard deviation on `probe`. Each bias is first divided by the
/// product of the upstream factors, which keeps the whole trunk an exact
/// positive multiple of the original. Returns the per-layer factors.
pub fn rebalance_unit_variance<F: Float>(net: &Network<F>, probe: &Tensor<F>) -> Result<(Network<F>, Vec<(String, f64)>)> {
    if net.spec.layers.iter().any(|l| l.op == LayerKind::BatchNorm) {
        return Err(Error::Spec("rebalance needs a network without batch norm; absorb it first".into()));
    }
    if probe.shape().first().copied().unwrap_or(0) < MIN_PROBE {
        return Err(Error::invalid("rebalance_unit_variance", format!("probe batch needs {MIN_PROBE} samples")));
    }
    let mut out = net.clone();
    let mut upstream = 1.0;
    let mut factors = Vec::new();
    for l in 0..out.spec.layers.len() {
        if !out.spec.layers[l].has_params() {
            continue;
        }
        let name = out.spec.layers[l].name.clone();
        let bias = out.params.get_mut(&format!("{name}.bias"))?;
        *bias = bias.map(|b| b / F::of(upstream));
        let at = activation_index(&out.spec, l);
        let tape = Tape::new();
        let bound = out.bind(&tape, &|_| false);
        let acts = out.forward_prefix(&bound, tape.constant(probe.clone()), Mode::Infer, at + 1)?;
        let s = population_std(&acts.layers[at].value());
        if !(s > 1e-12) || !s.is_finite() {
            return Err(Error::Spec(format!("layer `{name}` has zero activation variance on the probe batch")));
        }
        for suffix in ["weight", "bias"] {
            let t = out.params.get_mut(&format!("{name}.{suffix}"))?;
            *t = t.map(|v| v / F::of(s));
        }
        upstream *= s;
        factors.push((name, s));
    }
    Ok((out, factors))
}

/// Replicate first-layer filters over three input channels, each divided by three.
pub fn gray_to_rgb_filters<F: Float>(net: &Network<F>) -> Result<Network<F>> {
    if net.spec.input_channels != 1 {
        return Err(Error::Spec(format!("first layer already has {} input channels", net.spec.input_channels)));
    }
    let first = net.spec.layers.first().ok_or_else(|| Error::Spec("empty network".into()))?;
    let key = format!("{}.weight", first.name);
    let mut out = net.clone();
    let w = out.params.get(&key)?;
    let shape = w.shape().to_vec();
    let data = match first.op {
        LayerKind::Conv { .. } => {
            let plane = shape[2] * shape[3];
            let third = F::of(1.0 / 3.0);
            w.data().chunks_exact(plane).flat_map(|p| p.iter().map(|&v| v * third).cycle().take(3 * plane)).collect()
        }
        _ => return Err(Error::Spec(format!("first layer `{}` is not a conv", first.name))),
    };
    *out.params.get_mut(&key)? = Tensor::new(vec![shape[0], 3, shape[2], shape[3]], data)?;
    out.spec = net.spec.with_input_channels(3);
    Ok(out)
}

/// Overwrite running statistics of the selected batch-norm layers with the
/// train-mode statistics observed on `input`.
pub fn estimate_batchnorm_stats<F: Float>(
    net: &mut Network<F>,
    input: &Tensor<F>,
    select: &dyn Fn(&str) -> bool,
) -> Result<()> {
    let tape = Tape::new();
    let bound = net.bind(&tape, &|_| false);
    let acts = net.forward(&bound, tape.constant(input.clone()), Mode::Train)?;
    for (name, s) in acts.batch_stats {
        if select(&name) {
            let rs = net.stats.get_mut(&name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            rs.mean = s.mean;
            rs.var = s.var;
        }
    }
    Ok(())
}

/// First trainable trunk layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeBoundary {
    /// Everything trains.
    #[default]
    None,
    /// Only the head trains.
    All,
    /// Layers before this one are frozen.
    From(String),
}

impl FreezeBoundary {
    /// Per-layer trainability.
    pub fn trainable(&self, spec: &NetworkSpec) -> Result<Vec<bool>> {
        let n = spec.layers.len();
        let first = match self {
            FreezeBoundary::None => 0,
            FreezeBoundary::All => n,
            FreezeBoundary::From(name) => spec.layer_index(name)?,
        };
        Ok((0..n).map(|i| i >= first).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    /// Flattened top activation into a fresh affine classifier.
    Classification,
    /// Per-pixel hypercolumn MLP over the taps, with optional FoV blocks.
    Segmentation {
        #[serde(default)]
        fov_blocks: usize,
        #[serde(default = "default_fov_width")]
        fov_width: usize,
        #[serde(default)]
        hidden: Vec<usize>,
        #[serde(default = "default_seg_pixels")]
        pixels_per_image: usize,
    },
}

fn default_fov_width() -> usize {
    64
}

fn default_seg_pixels() -> usize {
    64
}

impl HeadKind {
    pub fn task(&self) -> &'static str {
        match self {
            HeadKind::Classification => "classification",
            HeadKind::Segmentation { .. } => "segmentation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationPlan {
    pub absorb_batchnorm: bool,
    pub rebalance_unit_variance: bool,
    pub gray_to_rgb_filters: bool,
    pub freeze: FreezeBoundary,
    pub head: HeadKind,
}

impl Default for AdaptationPlan {
    fn default() -> Self {
        AdaptationPlan {
            absorb_batchnorm: true,
            rebalance_unit_variance: true,
            gray_to_rgb_filters: false,
            freeze: FreezeBoundary::None,
            head: HeadKind::Classification,
        }
    }
}

impl AdaptationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.rebalance_unit_variance && !self.absorb_batchnorm {
            return Err(Error::invalid("adaptation", "rebalance_unit_variance requires absorb_batchnorm"));
        }
        Ok(())
    }
}

/// Adapted trunk plus a freshly initialised task head.
#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamModel<F> {
    pub net: Network<F>,
    pub head: Mlp<F>,
    pub kind: HeadKind,
    pub num_classes: usize,
}

/// Network input for a batch of images, gray or RGB by channel count.
pub fn batch_input<F: Float>(images: &[RgbImage], channels: usize) -> Result<Tensor<F>> {
    let first = images.first().ok_or_else(|| Error::invalid("batch_input", "empty batch"))?;
    let (h, w) = (first.height(), first.width());
    match channels {
        1 => {
            let grays: Vec<_> = images.iter().map(rgb_to_gray).collect();
            let planes: Vec<&[f32]> = grays.iter().map(|g| g.data()).collect();
            input_tensor(&planes, 1, h, w)
        }
        3 => {
            let planes: Vec<&[f32]> = images.iter().map(|i| i.data()).collect();
            input_tensor(&planes, 3, h, w)
        }
        c => Err(Error::invalid("batch_input", format!("unsupported channel count {c}"))),
    }
}

impl<F: Float> DownstreamModel<F> {
    pub fn input_channels(&self) -> usize {
        self.net.spec.input_channels
    }

    pub fn bind<'t>(&self, tape: &'t Tape<F>, trunk: &dyn Fn(&str) -> bool) -> (Bound<'t, F>, Bound<'t, F>) {
        (self.net.bind(tape, trunk), self.head.bind(tape, true))
    }

    /// Class scores `[N, classes]`.
    pub fn class_scores<'t>(&self, acts: &Activations<'t, F>, head: &Bound<'t, F>) -> Result<Var<'t, F>> {
        self.head.forward(head, acts.top().flatten()?)
    }

    /// Per-location logits `[K, classes + 1]`; class 0 is background.
    pub fn pixel_logits<'t>(
        &self,
        acts: &Activations<'t, F>,
        head: &Bound<'t, F>,
        size: (usize, usize),
        locations: &PixelSampleSet,
    ) -> Result<Var<'t, F>> {
        let taps: Vec<_> = self.net.spec.tap_indices()?.into_iter().map(|i| acts.layers[i]).collect();
        self.head.forward(head, hypercolumn_extract(&taps, size, locations)?)
    }

    fn mode(&self) -> Mode {
        if self.net.stats.is_empty() {
            Mode::Infer
        } else {
            Mode::Train
        }
    }

    /// Inference-mode class scores, one row per image.
    pub fn predict_scores(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let tape = Tape::new();
            let (trunk, head) = self.bind(&tape, &|_| false);
            let x = tape.constant(batch_input(chunk, self.input_channels())?);
            let acts = self.net.forward(&trunk, x, Mode::Infer)?;
            let s = self.class_scores(&acts, &head)?.value();
            let c = s.shape()[1];
            rows.extend(s.data().chunks_exact(c).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
        }
        Ok(rows)
    }

    /// Dense per-pixel argmax labels, row-major per image.
    pub fn predict_masks(&self, images: &[RgbImage]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(8) {
            let (h, w) = (chunk[0].height(), chunk[0].width());
            let tape = Tape::new();
            let (trunk, head) = self.bind(&tape, &|_| false);
            let x = tape.constant(batch_input(chunk, self.input_channels())?);
            let acts = self.net.forward(&trunk, x, Mode::Infer)?;
            let all: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
            let mut locs = PixelSampleSet::default();
            for b in 0..chunk.len() {
                locs.push_image(b, &all);
            }
            let logits = self.pixel_logits(&acts, &head, (h, w), &locs)?.value();
            let c = logits.shape()[1];
            let labels: Vec<usize> = logits.data().chunks_exact(c).map(argmax).collect();
            out.extend(labels.chunks_exact(h * w).map(<[usize]>::to_vec));
        }
        Ok(out)
    }
}

fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl DownstreamModel<f32> {
    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint::from_parts(meta, &self.net, Some(&self.head), None)
    }

    /// Rebuild from a checkpoint written by [`DownstreamModel::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, kind: HeadKind) -> Result<Self> {
        let head = ck.head()?.ok_or_else(|| Error::Checkpoint("checkpoint has no task head".into()))?;
        let num_classes = match kind {
            HeadKind::Classification => head.spec.output,
            HeadKind::Segmentation { .. } => head.spec.output - 1,
        };
        Ok(DownstreamModel { net: ck.network()?, head, kind, num_classes })
    }
}

/// Where the downstream trunk comes from.
#[derive(Clone, Debug)]
pub enum Init {
    /// Fresh Xavier weights; batch-norm statistics estimated on the
    /// downstream training images.
    Random(NetworkSpec),
    Pretrained(Network<f32>),
}

impl Init {
    pub fn name(&self) -> &'static str {
        match self {
            Init::Random(_) => "random",
            Init::Pretrained(_) => "colorization",
        }
    }
}

/// Apply the plan: append FoV blocks, fill missing statistics, absorb,
/// convert to color, rebalance, attach a fresh head.
pub fn adapt(init: &Init, plan: &AdaptationPlan, probe: &Dataset, num_classes: usize, seed: u64) -> Result<DownstreamModel<f32>> {
    plan.validate()?;
    let mut rng = stream(seed, "transfer/init", 0, 0);
    let (mut net, mut fresh): (Network<f32>, BTreeSet<String>) = match init {
        Init::Random(spec) => {
            let net = Network::build(spec, &mut rng)?;
            let all = net.stats.keys().cloned().collect();
            (net, all)
        }
        Init::Pretrained(net) => (net.clone(), BTreeSet::new()),
    };
    if let HeadKind::Segmentation { fov_blocks, fov_width, .. } = &plan.head {
        if *fov_blocks > 0 {
            let spec = add_fov_blocks(&net.spec, *fov_blocks, *fov_width)?;
            let mut grown = Network::build(&spec, &mut rng)?;
            for (k, v) in &net.params.tensors {
                grown.params.tensors.insert(k.clone(), v.clone());
            }
            for (k, v) in &net.stats {
                grown.stats.insert(k.clone(), v.clone());
            }
            fresh.extend(spec.layers.iter().filter(|l| l.op == LayerKind::BatchNorm && !net.stats.contains_key(&l.name)).map(|l| l.name.clone()));
            net = grown;
        }
    }
    let images: Vec<RgbImage> = probe.samples.iter().map(|s| s.image.clone()).collect();
    if !fresh.is_empty() {
        let x = batch_input(&images, net.spec.input_channels)?;
        estimate_batchnorm_stats(&mut net, &x, &|n| fresh.contains(n))?;
    }
    if plan.absorb_batchnorm {
        net = absorb_batchnorm(&net)?;
    }
    if plan.gray_to_rgb_filters {
        net = gray_to_rgb_filters(&net)?;
    }
    if plan.rebalance_unit_variance {
        let x = batch_input(&images, net.spec.input_channels)?;
        net = rebalance_unit_variance(&net, &x)?.0;
    }
    plan.freeze.trainable(&net.spec)?;
    let spec = match &plan.head {
        HeadKind::Classification => MlpSpec { input: net.spec.output_shape()?.numel(), hidden: vec![], output: num_classes },
        HeadKind::Segmentation { hidden, .. } => MlpSpec {
            input: net.spec.tap_channels()?.iter().sum(),
            hidden: hidden.clone(),
            output: num_classes + 1,
        },
    };
    let head = Mlp::build(&spec, HEAD_PREFIX, &mut rng)?;
    Ok(DownstreamModel { net, head, kind: plan.head.clone(), num_classes })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Lr0,
    Lr1,
    Lr2,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopEvent {
    Continue,
    /// Multiply the learning rate by the drop factor.
    Drop,
    Stop,
}

/// Plateau detector: after `patience` evaluations without improvement the
/// rate drops; the third plateau ends training.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub phase: Phase,
    pub best: Option<f64>,
    pub since_improvement: usize,
    pub patience: usize,
    pub tolerance: f64,
    pub drop_epochs: Vec<f64>,
    pub stop_epoch: Option<f64>,
}

impl EarlyStopState {
    pub fn new(patience: usize, tolerance: f64) -> Self {
        EarlyStopState {
            phase: Phase::Lr0,
            best: None,
            since_improvement: 0,
            patience: patience.max(1),
            tolerance,
            drop_epochs: Vec::new(),
            stop_epoch: None,
        }
    }

    /// Feed one validation score taken at `epoch`. The first call sets the baseline.
    pub fn observe(&mut self, score: f64, epoch: f64) -> StopEvent {
        if self.phase == Phase::Done {
            return StopEvent::Stop;
        }
        match self.best {
            Some(b) if score > b + self.tolerance => {
                self.best = Some(score);
                self.since_improvement = 0;
            }
            Some(_) => self.since_improvement += 1,
            None => self.best = Some(score),
        }
        if self.since_improvement < self.patience {
            return StopEvent::Continue;
        }
        self.since_improvement = 0;
        self.phase = match self.phase {
            Phase::Lr0 => Phase::Lr1,
            Phase::Lr1 => Phase::Lr2,
            _ => Phase::Done,
        };
        if self.phase == Phase::Done {
            self.stop_epoch = Some(epoch);
            StopEvent::Stop
        } else {
            self.drop_epochs.push(epoch);
            StopEvent::Drop
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub plan: AdaptationPlan,
    /// Train on color input; needs `gray_to_rgb_filters` for a gray trunk.
    pub color_input: bool,
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    /// Validation interval in epochs.
    pub eval_every: f64,
    pub patience: usize,
    pub improvement_tolerance: f64,
    pub drop_factor: f64,
    /// Hard cap on the cross-validation phase.
    pub max_epochs: f64,
    /// Retrain on all data with the discovered schedule.
    pub retrain_full: bool,
    pub mirror: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            plan: AdaptationPlan::default(),
            color_input: false,
            base_lr: 0.003,
            momentum: 0.9,
            batch_size: 16,
            val_fraction: 0.1,
            eval_every: 0.25,
            patience: 3,
            improvement_tolerance: 0.0,
            drop_factor: 0.1,
            max_epochs: 60.0,
            retrain_full: true,
            mirror: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.batch_size == 0 || !(self.base_lr > 0.0) || !(self.eval_every > 0.0) || !(self.max_epochs > 0.0) {
            return Err(Error::invalid("finetune", "batch_size, base_lr, eval_every and max_epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return Err(Error::invalid("finetune", "val_fraction must be in (0, 1)"));
        }
        Ok(())
    }
}

pub struct FinetuneOutcome {
    pub model: DownstreamModel<f32>,
    pub drop_epochs: Vec<f64>,
    pub stop_epoch: f64,
    /// `(epoch, validation score)` of the cross-validation phase.
    pub history: Vec<(f64, f64)>,
}

/// Deterministic 90/10 style split: `(train, validation)` indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_val = ((n as f64 * val_fraction).round() as usize).max(1);
    if n_val >= n {
        return Err(Error::Dataset(format!("{n} samples cannot form a train/validation split")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, "transfer/split", 0, 0));
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// Score used for validation and reporting: top-1 accuracy or mean IU.
pub fn validation_score(model: &DownstreamModel<f32>, data: &Dataset) -> Result<f64> {
    match model.kind {
        HeadKind::Classification => evaluate_classification(model, data, 1),
        HeadKind::Segmentation { .. } => evaluate_segmentation(model, data),
    }
}

struct Sgd<'a> {
    model: DownstreamModel<f32>,
    trainable: Vec<bool>,
    opt: SgdMomentum<f32>,
    data: &'a Dataset,
    cfg: &'a FinetuneConfig,
    seed: u64,
    /// Distinguishes the cross-validation and retraining streams.
    run: u64,
    step: u64,
}

impl<'a> Sgd<'a> {
    fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch_size)
    }

    fn is_trainable(&self, param: &str) -> bool {
        let layer = param.rsplit_once('.').map_or(param, |(l, _)| l);
        self.model.net.spec.layer_index(layer).map(|i| self.trainable[i]).unwrap_or(false)
    }

    fn step(&mut self) -> Result<f64> {
        let spe = self.steps_per_epoch() as u64;
        let (epoch, pos) = (self.step / spe, (self.step % spe) as usize);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut stream(self.seed, "transfer/order", self.run, epoch));
        let end = ((pos + 1) * self.cfg.batch_size).min(order.len());
        let batch = &order[pos * self.cfg.batch_size..end];

        let mut images = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &self.data.samples[i];
            let mut rng = stream(self.seed, "transfer/augment", self.run * 1_000_003 + epoch, i as u64);
            let flip = self.cfg.mirror && rng.random::<f64>() < 0.5;
            images.push(if flip { s.image.mirrored() } else { s.image.clone() });
            masks.push((s, flip, rng));
        }
        let (h, w) = (images[0].height(), images[0].width());
        let x = batch_input::<f32>(&images, self.model.input_channels())?;

        let tape = Tape::new();
        let trunk = self.model.net.bind(&tape, &|p| self.is_trainable(p));
        let head = self.model.head.bind(&tape, true);
        let acts = self.model.net.forward(&trunk, tape.constant(x), self.model.mode())?;
        let loss = match &self.model.kind {
            HeadKind::Classification => {
                let labels: Vec<usize> = batch
                    .iter()
                    .map(|&i| self.data.samples[i].label.ok_or_else(|| Error::Dataset(format!("sample {i} has no label"))))
                    .collect::<Result<_>>()?;
                self.model.class_scores(&acts, &head)?.softmax_cross_entropy(&labels)?
            }
            HeadKind::Segmentation { pixels_per_image, .. } => {
                let mut locs = PixelSampleSet::default();
                let mut labels = Vec::new();
                for (b, (s, flip, rng)) in masks.iter_mut().enumerate() {
                    let mask = s.mask.as_ref().ok_or_else(|| Error::Dataset("segmentation needs pixel masks".into()))?;
                    let k = (*pixels_per_image).min(h * w);
                    let mut picks: Vec<usize> = index::sample(rng, h * w, k).into_vec();
                    picks.sort_unstable();
                    let points: Vec<(usize, usize)> = picks.iter().map(|&p| (p / w, p % w)).collect();
                    for &(y, xx) in &points {
                        let src = if *flip { w - 1 - xx } else { xx };
                        labels.push(mask[y * w + src] as usize);
                    }
                    locs.push_image(b, &points);
                }
                self.model.pixel_logits(&acts, &head, (h, w), &locs)?.softmax_cross_entropy(&labels)?
            }
        };
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { batch: self.step as usize });
        }
        let grads = tape.backward(loss)?;
        for (name, var) in trunk.iter().chain(head.iter()) {
            if let Some(g) = grads.get(var) {
                let target = if name.starts_with(HEAD_PREFIX) {
                    self.model.head.params.get_mut(name)?
                } else {
                    self.model.net.params.get_mut(name)?
                };
                self.opt.step(name, target, g)?;
            }
        }
        if self.model.mode() == Mode::Train {
            let observed: Vec<_> = acts.batch_stats.into_iter().collect();
            self.model.net.update_running_stats(&observed)?;
        }
        self.step += 1;
        Ok(value)
    }
}

/// The full protocol on an adapted model: cross-validate the drop schedule
/// on a held-out fraction, then optionally retrain on all data with it.
pub fn early_stopping_trainer(
    cfg: &FinetuneConfig,
    adapted: &DownstreamModel<f32>,
    train: &Dataset,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let (tr, va) = split_indices(train.len(), cfg.val_fraction, seed)?;
    let (fit, val) = (train.select(&tr), train.select(&va));
    let trainable = cfg.plan.freeze.trainable(&adapted.net.spec)?;
    let mut sgd = Sgd {
        model: adapted.clone(),
        trainable,
        opt: SgdMomentum::new(cfg.base_lr, cfg.momentum),
        data: &fit,
        cfg,
        seed,
        run: 0,
        step: 0,
    };
    let spe = sgd.steps_per_epoch();
    let interval = ((cfg.eval_every * spe as f64).round() as u64).max(1);
    let max_steps = (cfg.max_epochs * spe as f64).round() as u64;
    let mut state = EarlyStopState::new(cfg.patience, cfg.improvement_tolerance);
    let mut history = Vec::new();
    loop {
        let epoch = sgd.step as f64 / spe as f64;
        let score = validation_score(&sgd.model, &val)?;
        history.push((epoch, score));
        match state.observe(score, epoch) {
            StopEvent::Stop => break,
            StopEvent::Drop => sgd.opt.set_learning_rate(sgd.opt.learning_rate() * cfg.drop_factor),
            StopEvent::Continue => {}
        }
        if sgd.step >= max_steps {
            state.stop_epoch = Some(epoch);
            break;
        }
        for _ in 0..interval {
            sgd.step()?;
        }
    }
    let stop_epoch = state.stop_epoch.unwrap_or(sgd.step as f64 / spe as f64);
    let drop_epochs = state.drop_epochs.clone();
    let model = if cfg.retrain_full {
        train_fixed_schedule(cfg, adapted, train, &drop_epochs, stop_epoch, seed)?
    } else {
        sgd.model
    };
    Ok(FinetuneOutcome { model, drop_epochs, stop_epoch, history })
}

/// Train on `data` with a fixed schedule: rate drops at `drops` (epochs),
/// stop at `stop_epoch`.
pub fn train_fixed_schedule(
    cfg: &FinetuneConfig,
    adapted: &DownstreamModel<f32>,
    data: &Dataset,
    drops: &[f64],
    stop_epoch: f64,
    seed: u64,
) -> Result<DownstreamModel<f32>> {
    cfg.validate()?;
    let trainable = cfg.plan.freeze.trainable(&adapted.net.spec)?;
    let mut sgd = Sgd {
        model: adapted.clone(),
        trainable,
        opt: SgdMomentum::new(cfg.base_lr, cfg.momentum),
        data,
        cfg,
        seed,
        run: 1,
        step: 0,
    };
    let spe = sgd.steps_per_epoch() as f64;
    let drop_steps: Vec<u64> = drops.iter().map(|d| (d * spe).round() as u64).collect();
    let total = (stop_epoch * spe).round() as u64;
    while sgd.step < total {
        let n = drop_steps.iter().filter(|&&d| sgd.step >= d).count();
        sgd.opt.set_learning_rate(cfg.base_lr * cfg.drop_factor.powi(n as i32));
        sgd.step()?;
    }
    Ok(sgd.model)
}

/// Adapt and fine-tune in one call.
pub fn finetune(cfg: &FinetuneConfig, init: &Init, train: &Dataset, seed: u64) -> Result<FinetuneOutcome> {
    let adapted = adapt(init, &cfg.plan, train, train.num_classes(), seed)?;
    if (adapted.input_channels() == 3) != cfg.color_input {
        return Err(Error::invalid(
            "finetune",
            format!("color_input = {} but the adapted trunk takes {} channels", cfg.color_input, adapted.input_channels()),
        ));
    }
    early_stopping_trainer(cfg, &adapted, train, seed)
}

/// Fraction of rows whose true class is among the `k` highest scores.
/// Ties are broken toward lower class indices.
pub fn top_k_accuracy(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::invalid("top_k_accuracy", "need one score row per label and at least one row"));
    }
    let c = scores[0].len();
    if k == 0 || k > c {
        return Err(Error::invalid("top_k_accuracy", format!("k = {k} with {c} classes")));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let better = row.iter().enumerate().filter(|&(j, &v)| v > row[l] || (v == row[l] && j < l)).count();
            better < k
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate_classification<F: Float>(model: &DownstreamModel<F>, data: &Dataset, k: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let labels: Vec<usize> = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.label.ok_or_else(|| Error::Dataset(format!("sample {i} has no label"))))
        .collect::<Result<_>>()?;
    let images: Vec<RgbImage> = data.samples.iter().map(|s| s.image.clone()).collect();
    top_k_accuracy(&model.predict_scores(&images)?, &labels, k)
}

/// Mean over classes present in `truth` of TP / (TP + FP + FN).
pub fn mean_iu(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    if truth.is_empty() || pred.len() != truth.len() {
        return Err(Error::invalid("mean_iu", "need equal-length non-empty label arrays"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::invalid("mean_iu", format!("label out of range {p}/{t} for {num_classes}")));
        }
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| tp[c] + fn_[c] > 0).collect();
    let sum: f64 = present.iter().map(|&c| tp[c] as f64 / (tp[c] + fp[c] + fn_[c]) as f64).sum();
    Ok(sum / present.len() as f64)
}

pub fn evaluate_segmentation<F: Float>(model: &DownstreamModel<F>, data: &Dataset) -> Result<f64> {
    let mut truth = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        let m = s.mask.as_ref().ok_or_else(|| Error::Dataset(format!("sample {i} has no mask")))?;
        truth.extend(m.iter().map(|&v| v as usize));
    }
    if truth.is_empty() {
        return Err(Error::Dataset("no labeled pixels".into()));
    }
    let images: Vec<RgbImage> = data.samples.iter().map(|s| s.image.clone()).collect();
    let pred: Vec<usize> = model.predict_masks(&images)?.into_iter().flatten().collect();
    mean_iu(&pred, &truth, model.num_classes + 1)
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub init: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub drop_epochs: Vec<f64>,
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "run_id,init,task,metric,value,seed,drop_epochs")?;
    for r in rows {
        let drops: Vec<String> = r.drop_epochs.iter().map(|d| format!("{d:.2}")).collect();
        writeln!(out, "{},{},{},{},{:.6},{},{}", r.run_id, r.init, r.task, r.metric, r.value, r.seed, drops.join(";"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::RunningStats;
    use crate::tensor::PaddingMode;

    fn random_input(n: usize, c: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * c * size * size).map(|_| rng.random::<f64>() - 0.5).collect();
        Tensor::new(vec![n, c, size, size], data).unwrap()
    }

    fn with_random_stats(spec: &NetworkSpec, seed: u64) -> Network<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::<f64>::build(spec, &mut rng).unwrap();
        for t in net.params.tensors.values_mut() {
            if t.rank() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>() * 0.2 - 0.1);
            }
        }
        for s in net.stats.values_mut() {
            *s = RunningStats {
                mean: s.mean.iter().map(|_| rng.random::<f64>() * 0.2 - 0.1).collect(),
                var: s.var.iter().map(|_| 0.5 + rng.random::<f64>()).collect(),
            };
        }
        net
    }

    #[test]
    fn absorb_identity_stats_only_scales_by_eps() {
        let spec = NetworkSpec::mini_vgg(1, 16, PaddingMode::Zero);
        let net = Network::<f64>::build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let abs = absorb_batchnorm(&net).unwrap();
        let f = 1.0 / (1.0 + crate::model::BN_EPS).sqrt();
        let a = net.params.get("conv1_1.weight").unwrap();
        let b = abs.params.get("conv1_1.weight").unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x * f - y).abs() < 1e-15);
        }
        assert!(abs.spec.layers.iter().all(|l| l.op != LayerKind::BatchNorm));
    }

    #[test]
    fn absorb_preserves_inference_both_paddings() {
        for padding in [PaddingMode::Zero, PaddingMode::BiasOfPrevious] {
            let net = with_random_stats(&NetworkSpec::mini_vgg(1, 16, padding), 3);
            let abs = absorb_batchnorm(&net).unwrap();
            let x = random_input(3, 1, 16, 4);
            let a = net.infer(&x).unwrap();
            let b = abs.infer(&x).unwrap();
            let diff = a.last().unwrap().max_abs_diff(b.last().unwrap());
            assert!(diff < 1e-9, "{padding:?}: {diff}");
        }
    }

    #[test]
    fn absorb_requires_stats() {
        let mut net = with_random_stats(&NetworkSpec::mini_vgg(1, 16, PaddingMode::Zero), 0);
        net.stats.remove("conv2_1_bn");
        assert!(absorb_batchnorm(&net).is_err());
    }

    #[test]
    fn gray_to_rgb_is_exact_on_replicated_input() {
        let net = absorb_batchnorm(&with_random_stats(&NetworkSpec::mini_vgg(1, 16, PaddingMode::Zero), 5)).unwrap();
        let rgb = gray_to_rgb_filters(&net).unwrap();
        let g = random_input(2, 1, 16, 6);
        let mut rep = Vec::new();
        for n in 0..2 {
            let plane = &g.data()[n * 256..(n + 1) * 256];
            for _ in 0..3 {
                rep.extend_from_slice(plane);
            }
        }
        let rep = Tensor::new(vec![2, 3, 16, 16], rep).unwrap();
        let d = net.infer(&g).unwrap().last().unwrap().max_abs_diff(rgb.infer(&rep).unwrap().last().unwrap());
        assert!(d < 1e-12, "{d}");
        let w1 = net.params.get("conv1_1.weight").unwrap();
        let w3 = rgb.params.get("conv1_1.weight").unwrap();
        assert_eq!(w3.shape()[1], 3);
        for f in 0..w1.shape()[0] {
            for k in 0..9 {
                let s: f64 = (0..3).map(|c| w3.data()[f * 27 + c * 9 + k]).sum();
                assert!((s - w1.data()[f * 9 + k]).abs() < 1e-15);
            }
        }
        assert!(gray_to_rgb_filters(&rgb).is_err());
    }

    #[test]
    fn rebalance_recovers_unit_variance_after_perturbation() {
        let mut net = absorb_batchnorm(&with_random_stats(&NetworkSpec::mini_vgg(1, 16, PaddingMode::Zero), 7)).unwrap();
        let w = net.params.get_mut("conv2_1.weight").unwrap();
        *w = w.map(|v| v * 10.0);
        let x = random_input(64, 1, 16, 8);
        let (bal, factors) = rebalance_unit_variance(&net, &x).unwrap();
        let acts = bal.infer(&x).unwrap();
        for l in 0..bal.spec.layers.len() {
            if bal.spec.layers[l].has_params() {
                let s = population_std(&acts[activation_index(&bal.spec, l)]);
                assert!((s * s - 1.0).abs() < 0.1, "{}: {s}", bal.spec.layers[l].name);
            }
        }
        let (_, again) = rebalance_unit_variance(&bal, &x).unwrap();
        assert!(again.iter().all(|(_, s)| (s - 1.0).abs() < 0.1), "{again:?}");
        assert_eq!(factors.len(), 8);
    }

    #[test]
    fn rebalance_rejects_small_probe_and_dead_layers() {
        let net = absorb_batchnorm(&with_random_stats(&NetworkSpec::mini_vgg(1, 16, PaddingMode::Zero), 1)).unwrap();
        assert!(rebalance_unit_variance(&net, &random_input(8, 1, 16, 0)).is_err());
        let mut dead = net.clone();
        for t in dead.params.tensors.iter_mut().filter(|(k, _)| k.starts_with("conv1_1")).map(|(_, t)| t) {
            *t = t.map(|_| 0.0);
        }
        assert!(rebalance_unit_variance(&dead, &random_input(64, 1, 16, 0)).is_err());
    }

    #[test]
    fn freeze_boundary() {
        let spec = NetworkSpec::mini_vgg(1, 16, PaddingMode::Zero);
        let n = spec.layers.len();
        assert!(FreezeBoundary::None.trainable(&spec).unwrap().iter().all(|&t| t));
        assert!(FreezeBoundary::All.trainable(&spec).unwrap().iter().all(|&t| !t));
        let t = FreezeBoundary::From("conv3_1".into()).trainable(&spec).unwrap();
        let i = spec.layer_index("conv3_1").unwrap();
        assert!(t[..i].iter().all(|&x| !x) && t[i..].iter().all(|&x| x));
        assert_eq!(t.len(), n);
        assert!(FreezeBoundary::From("nope".into()).trainable(&spec).is_err());
    }

    #[test]
    fn early_stop_flat_curve() {
        let mut s = EarlyStopState::new(3, 0.0);
        let mut events = Vec::new();
        for i in 0..20 {
            let e = s.observe(0.5, i as f64);
            events.push(e);
            if e == StopEvent::Stop {
                break;
            }
        }
        assert_eq!(s.drop_epochs, vec![3.0, 6.0]);
        assert_eq!(s.stop_epoch, Some(9.0));
        assert_eq!(events.len(), 10);
    }

    #[test]
    fn early_stop_improving_then_stalled() {
        let mut s = EarlyStopState::new(2, 0.0);
        let scores = [0.1, 0.2, 0.3, 0.4, 0.4, 0.4, 0.5, 0.5, 0.5, 0.5, 0.5];
        let mut stop = None;
        for (i, &v) in scores.iter().enumerate() {
            if s.observe(v, i as f64) == StopEvent::Stop {
                stop = Some(i);
                break;
            }
        }
        assert_eq!(s.drop_epochs, vec![5.0, 8.0]);
        assert_eq!(stop, Some(10));
        assert_eq!(s.phase, Phase::Done);
    }

    #[test]
    fn top_k_hand_cases() {
        let scores = vec![vec![0.1, 0.7, 0.2], vec![0.5, 0.3, 0.2], vec![0.2, 0.3, 0.5]];
        assert!((top_k_accuracy(&scores, &[1, 1, 0], 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((top_k_accuracy(&scores, &[1, 1, 0], 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(top_k_accuracy(&scores, &[2, 1, 0], 3).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&scores, &[1, 0, 2], 1).unwrap(), 1.0);
        assert!(top_k_accuracy(&scores, &[1, 0, 2], 4).is_err());
    }

    #[test]
    fn miou_hand_cases() {
        let v = mean_iu(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((v - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(mean_iu(&[0, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap(), 1.0);
        assert_eq!(mean_iu(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 0.0);
        // class 2 never occurs in the truth and is excluded
        assert_eq!(mean_iu(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
        assert!(mean_iu(&[], &[], 2).is_err());
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let (a, b) = split_indices(100, 0.1, 3).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split_indices(1, 0.1, 0).is_err());
    }

    #[test]
    fn plan_json() {
        let p = AdaptationPlan {
            freeze: FreezeBoundary::From("conv3_1".into()),
            head: HeadKind::Segmentation { fov_blocks: 1, fov_width: 32, hidden: vec![64], pixels_per_image: 16 },
            ..Default::default()
        };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<AdaptationPlan>(&s).unwrap(), p);
        assert!(serde_json::from_str::<AdaptationPlan>(r#"{"freeze": "all"}"#).is_ok());
        assert!(serde_json::from_str::<AdaptationPlan>(r#"{"freez": "all"}"#).is_err());
    }
}
