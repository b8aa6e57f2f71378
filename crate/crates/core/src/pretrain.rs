//! Colorization pretraining: augmentation, learning-rate schedule, the
//! sparse-hypercolumn training loop and its checkpoints.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, HEAD_PREFIX};
use crate::colorspace::{rgb_to_gray, rgb_to_huechroma, rgb_to_lab, GrayImage, RgbImage};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{calibrate_loss_scale, kl_histogram_loss, lab_regression_loss, LossValue};
use crate::model::{hypercolumn_extract, input_tensor, Mlp, MlpSpec, Mode, Network, NetworkSpec};
use crate::seeding::stream;
use crate::targets::{
    build_histogram_target, build_lab_target, sample_pixel_locations, PixelSampleSet, TargetOptions, CHROMA_BINS,
    HUE_BINS,
};
use crate::tensor::{OptimizerState, PaddingMode, SgdMomentum, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub mirror_prob: f64,
    /// Inclusive range of the resized short side.
    pub scale_range: (usize, usize),
    pub crop: usize,
    /// Feed the network the desaturated crop.
    pub desaturate: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy { mirror_prob: 0.5, scale_range: (32, 56), crop: 32, desaturate: true }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if self.crop == 0 || self.crop > lo || lo > hi || !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::invalid(
                "augmentation",
                format!("need 0 < crop <= min scale <= max scale and mirror_prob in [0,1], got {self:?}"),
            ));
        }
        Ok(())
    }
}

/// Geometry chosen for one augmented sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub mirrored: bool,
    pub short_side: usize,
    pub top: usize,
    pub left: usize,
}

/// Mirror, rescale the short side uniformly within the range, crop
/// uniformly. Returns the desaturated crop and the color crop.
pub fn augment<R: Rng + ?Sized>(
    img: &RgbImage,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(GrayImage, RgbImage, AugmentDraw)> {
    policy.validate()?;
    let mirrored = rng.random::<f64>() < policy.mirror_prob;
    let short_side = rng.random_range(policy.scale_range.0..=policy.scale_range.1);
    let (h, w) = (img.height(), img.width());
    let short = h.min(w);
    let (nh, nw) = if h <= w {
        (short_side, ((w * short_side) as f64 / short as f64).round() as usize)
    } else {
        (((h * short_side) as f64 / short as f64).round() as usize, short_side)
    };
    if nh < policy.crop || nw < policy.crop {
        return Err(Error::invalid("augment", format!("image {h}x{w} too small for crop {}", policy.crop)));
    }
    let top = rng.random_range(0..=nh - policy.crop);
    let left = rng.random_range(0..=nw - policy.crop);
    let base = if mirrored { img.mirrored() } else { img.clone() };
    let color = base.resized(nh, nw).crop(top, left, policy.crop, policy.crop)?;
    Ok((rgb_to_gray(&color), color, AugmentDraw { mirrored, short_side, top, left }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSchedule {
    pub epochs: f64,
    pub base_lr: f64,
    /// Epoch positions where the rate is multiplied by `drop_factor`.
    pub drops: Vec<f64>,
    pub drop_factor: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule { epochs: 3.0, base_lr: 0.1, drops: vec![2.0, 2.5], drop_factor: 0.1 }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok_drops = self.drops.windows(2).all(|w| w[0] < w[1])
            && self.drops.iter().all(|&d| d > 0.0 && d < self.epochs);
        if !(self.epochs >= 0.0) || !(self.base_lr > 0.0) || !(self.drop_factor > 0.0) || !ok_drops {
            return Err(Error::invalid("schedule", format!("invalid schedule {self:?}")));
        }
        Ok(())
    }

    pub fn total_steps(&self, steps_per_epoch: usize) -> u64 {
        (self.epochs * steps_per_epoch as f64).round() as u64
    }

    /// Step at which each drop takes effect.
    pub fn drop_steps(&self, steps_per_epoch: usize) -> Vec<u64> {
        self.drops.iter().map(|d| (d * steps_per_epoch as f64).round() as u64).collect()
    }

    pub fn lr_at_step(&self, step: u64, steps_per_epoch: usize) -> f64 {
        let n = self.drop_steps(steps_per_epoch).iter().filter(|&&d| step >= d).count();
        self.base_lr * self.drop_factor.powi(n as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorLoss {
    Histogram,
    Regression,
}

impl ColorLoss {
    pub fn outputs(self) -> usize {
        match self {
            ColorLoss::Histogram => HUE_BINS + CHROMA_BINS,
            ColorLoss::Regression => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub network: NetworkSpec,
    pub head_hidden: Vec<usize>,
    pub loss: ColorLoss,
    pub targets: TargetOptions,
    pub augmentation: AugmentationPolicy,
    pub schedule: TrainingSchedule,
    pub batch_size: usize,
    pub pixels_per_image: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Extra checkpoint positions, in epochs.
    pub snapshot_epochs: Vec<f64>,
    /// Normalise the initial loss to 1.
    pub calibrate: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            network: NetworkSpec::mini_vgg(1, 32, PaddingMode::Zero),
            head_hidden: vec![128],
            loss: ColorLoss::Histogram,
            targets: TargetOptions::default(),
            augmentation: AugmentationPolicy::default(),
            schedule: TrainingSchedule::default(),
            batch_size: 16,
            pixels_per_image: 32,
            momentum: 0.9,
            weight_decay: 5e-4,
            snapshot_epochs: Vec::new(),
            calibrate: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.augmentation.validate()?;
        self.schedule.validate()?;
        if self.network.input_channels != 1 || !self.augmentation.desaturate {
            return Err(Error::invalid("pretrain", "colorization needs a 1-channel network on desaturated input"));
        }
        if self.batch_size == 0 || self.pixels_per_image == 0 {
            return Err(Error::invalid("pretrain", "batch_size and pixels_per_image must be positive"));
        }
        if self.network.taps.is_empty() {
            return Err(Error::invalid("pretrain", "network has no hypercolumn taps"));
        }
        Ok(())
    }

    pub fn head_spec(&self) -> Result<MlpSpec> {
        Ok(MlpSpec {
            input: self.network.tap_channels()?.iter().sum(),
            hidden: self.head_hidden.clone(),
            output: self.loss.outputs(),
        })
    }
}

/// One row of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: f64,
    pub lr: f64,
    /// Scaled loss of the batch.
    pub loss: f64,
    /// L2 norm of the gradient over all trunk parameters.
    pub trunk_grad_norm: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,epoch,lr,loss")?;
    for r in rows {
        writeln!(out, "{},{:.6},{:e},{:.8}", r.step, r.epoch, r.lr, r.loss)?;
    }
    Ok(())
}

pub struct PretrainOutput {
    pub checkpoints: Vec<Checkpoint>,
    pub metrics: Vec<MetricRow>,
}

/// One augmented, target-annotated sample.
enum Targets {
    Histogram(Vec<crate::targets::HistogramTarget>),
    Lab(Vec<(f64, f64)>),
}

struct Prepared {
    gray: GrayImage,
    points: Vec<(usize, usize)>,
    targets: Targets,
}

fn prepare(cfg: &PretrainConfig, img: &RgbImage, seed: u64, epoch: u64, index: usize) -> Result<Prepared> {
    let mut rng = stream(seed, "pretrain/sample", epoch, index as u64);
    let (gray, color, _) = augment(img, &cfg.augmentation, &mut rng)?;
    let points = sample_pixel_locations(gray.height(), gray.width(), cfg.pixels_per_image, &mut rng)?;
    let targets = match cfg.loss {
        ColorLoss::Histogram => {
            let hc = rgb_to_huechroma(&color);
            Targets::Histogram(
                points.iter().map(|&(y, x)| build_histogram_target(&hc, y, x, &cfg.targets)).collect::<Result<_>>()?,
            )
        }
        ColorLoss::Regression => {
            let lab = rgb_to_lab(&color)?;
            Targets::Lab(points.iter().map(|&(y, x)| build_lab_target(&lab, y, x)).collect::<Result<_>>()?)
        }
    };
    Ok(Prepared { gray, points, targets })
}

pub fn config_hash(cfg: &PretrainConfig) -> String {
    crate::config::hash_json(cfg)
}

/// Trainer state that survives checkpoint round trips.
pub struct Pretrainer<'a> {
    pub config: &'a PretrainConfig,
    pub data: &'a Dataset,
    pub seed: u64,
    pub net: Network<f32>,
    pub head: Mlp<f32>,
    pub opt: SgdMomentum<f32>,
    pub step: u64,
    pub loss_scale: f64,
    steps_per_epoch: usize,
    last_grad_norm: f64,
}

impl<'a> Pretrainer<'a> {
    pub fn new(config: &'a PretrainConfig, data: &'a Dataset, seed: u64) -> Result<Self> {
        config.validate()?;
        let steps_per_epoch = data.len() / config.batch_size;
        if steps_per_epoch == 0 {
            return Err(Error::Dataset(format!(
                "{} images cannot fill one batch of {}",
                data.len(),
                config.batch_size
            )));
        }
        let mut rng = stream(seed, "pretrain/init", 0, 0);
        let net = Network::build(&config.network, &mut rng)?;
        let head = Mlp::build(&config.head_spec()?, HEAD_PREFIX, &mut rng)?;
        let opt = SgdMomentum::new(config.schedule.base_lr, config.momentum).with_weight_decay(config.weight_decay);
        let mut t = Pretrainer { config, data, seed, net, head, opt, step: 0, loss_scale: 1.0, steps_per_epoch, last_grad_norm: 0.0 };
        if config.calibrate {
            let (loss, pixels) = t.batch_loss(0, false)?;
            t.loss_scale = calibrate_loss_scale(loss, pixels)?;
        }
        Ok(t)
    }

    /// Continue from a checkpoint written by a run with the same config.
    pub fn resume(config: &'a PretrainConfig, data: &'a Dataset, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if ck.meta.config_hash != config_hash(config) {
            return Err(Error::Checkpoint("checkpoint was produced by a different pretraining config".into()));
        }
        let steps_per_epoch = data.len() / config.batch_size;
        let net = ck.network()?;
        let head = ck.head()?.ok_or_else(|| Error::Checkpoint("pretraining checkpoint has no head".into()))?;
        let opt = SgdMomentum::with_state(OptimizerState {
            learning_rate: ck.meta.learning_rate,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            velocity: ck.velocity(),
        });
        Ok(Pretrainer {
            config,
            data,
            seed: ck.meta.seed,
            net,
            head,
            opt,
            step: ck.meta.step,
            loss_scale: ck.meta.loss_scale,
            steps_per_epoch,
            last_grad_norm: 0.0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.config.schedule.total_steps(self.steps_per_epoch)
    }

    pub fn epoch(&self) -> f64 {
        self.step as f64 / self.steps_per_epoch as f64
    }

    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch as u64;
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let mut perm: Vec<usize> = (0..self.data.len()).collect();
        perm.shuffle(&mut stream(self.seed, "pretrain/order", epoch, 0));
        perm[pos * self.config.batch_size..(pos + 1) * self.config.batch_size].to_vec()
    }

    /// Forward (and optionally backward + update) on the batch of `step`.
    /// Returns the unscaled loss and the pixel count.
    fn batch_loss(&mut self, step: u64, update: bool) -> Result<(f64, usize)> {
        let epoch = step / self.steps_per_epoch as u64;
        let prepared: Vec<Prepared> = self
            .batch_indices(step)
            .into_iter()
            .map(|i| prepare(self.config, &self.data.samples[i].image, self.seed, epoch, i))
            .collect::<Result<_>>()?;
        let (h, w) = (prepared[0].gray.height(), prepared[0].gray.width());
        let planes: Vec<&[f32]> = prepared.iter().map(|p| p.gray.data()).collect();
        let input = input_tensor::<f32>(&planes, 1, h, w)?;
        let mut locs = PixelSampleSet::default();
        for (b, p) in prepared.iter().enumerate() {
            locs.push_image(b, &p.points);
        }

        let tape = Tape::new();
        let trunk = self.net.bind(&tape, &|_| update);
        let head = self.head.bind(&tape, update);
        let acts = self.net.forward(&trunk, tape.constant(input), Mode::Train)?;
        let taps: Vec<_> = self.net.spec.tap_indices()?.into_iter().map(|i| acts.layers[i]).collect();
        let column = hypercolumn_extract(&taps, (h, w), &locs)?;
        let out = self.head.forward(&head, column)?;
        let loss: LossValue<'_, f32> = match self.config.loss {
            ColorLoss::Histogram => {
                let targets: Vec<_> = prepared
                    .iter()
                    .flat_map(|p| match &p.targets {
                        Targets::Histogram(t) => t.clone(),
                        Targets::Lab(_) => unreachable!(),
                    })
                    .collect();
                kl_histogram_loss(out.narrow_cols(0, HUE_BINS)?, out.narrow_cols(HUE_BINS, CHROMA_BINS)?, &targets)?
            }
            ColorLoss::Regression => {
                let targets: Vec<_> = prepared
                    .iter()
                    .flat_map(|p| match &p.targets {
                        Targets::Lab(t) => t.clone(),
                        Targets::Histogram(_) => unreachable!(),
                    })
                    .collect();
                lab_regression_loss(out, &targets)?
            }
        }
        .with_scale(self.loss_scale);
        let value = loss.value();
        if !value.is_finite() {
            return Err(Error::Diverged { batch: step as usize });
        }
        if update {
            let scaled = loss.scaled()?;
            let grads = tape.backward(scaled)?;
            let lr = self.config.schedule.lr_at_step(step, self.steps_per_epoch);
            self.opt.set_learning_rate(lr);
            let mut sq = 0.0;
            for (name, var) in trunk.iter() {
                let g = grads.get(var).expect("trainable leaf");
                if !g.is_finite() {
                    return Err(Error::Diverged { batch: step as usize });
                }
                sq += g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                self.opt.step(name, self.net.params.get_mut(name)?, g)?;
            }
            for (name, var) in head.iter() {
                let g = grads.get(var).expect("trainable leaf");
                self.opt.step(name, self.head.params.get_mut(name)?, g)?;
            }
            self.last_grad_norm = sq.sqrt();
            self.net.update_running_stats(&acts.batch_stats)?;
        }
        Ok((value, loss.pixels))
    }

    pub fn checkpoint(&self, tag: &str) -> Checkpoint {
        let meta = CheckpointMeta {
            tag: tag.to_string(),
            config_hash: config_hash(self.config),
            step: self.step,
            epoch: self.epoch(),
            learning_rate: self.config.schedule.lr_at_step(self.step, self.steps_per_epoch),
            seed: self.seed,
            loss_scale: self.loss_scale,
            network: self.net.spec.clone(),
            head: Some(self.head.spec.clone()),
        };
        Checkpoint::from_parts(meta, &self.net, Some(&self.head), Some(&self.opt.state.velocity))
    }

    /// Train until `until` steps (or the end of the schedule), emitting
    /// checkpoints at snapshot epochs, drops and the end.
    pub fn run(&mut self, until: Option<u64>) -> Result<PretrainOutput> {
        let total = self.total_steps();
        let end = until.map_or(total, |u| u.min(total));
        let spe = self.steps_per_epoch;
        let mut marks: BTreeMap<u64, &str> = BTreeMap::new();
        for s in self.config.snapshot_epochs.iter().map(|e| (e * spe as f64).round() as u64) {
            marks.insert(s, "snapshot");
        }
        for s in self.config.schedule.drop_steps(spe) {
            marks.insert(s, "drop");
        }
        let mut checkpoints = Vec::new();
        if self.step == 0 {
            checkpoints.push(self.checkpoint("init"));
        }
        let mut metrics = Vec::new();
        while self.step < end {
            let step = self.step;
            let (loss, _) = self.batch_loss(step, true)?;
            metrics.push(MetricRow {
                step,
                epoch: step as f64 / spe as f64,
                lr: self.opt.learning_rate(),
                loss: loss * self.loss_scale,
                trunk_grad_norm: self.last_grad_norm,
            });
            self.step += 1;
            if let Some(tag) = marks.get(&self.step) {
                if self.step < total {
                    checkpoints.push(self.checkpoint(tag));
                }
            }
        }
        if self.step == total && total > 0 {
            checkpoints.push(self.checkpoint("final"));
        } else if self.step > 0 && self.step < total {
            checkpoints.push(self.checkpoint("partial"));
        }
        Ok(PretrainOutput { checkpoints, metrics })
    }
}

/// Full pretraining run from a fresh initialisation.
pub fn train_colorization(config: &PretrainConfig, data: &Dataset, seed: u64) -> Result<PretrainOutput> {
    Pretrainer::new(config, data, seed)?.run(None)
}
