//! Colorization objectives and loss-scale calibration.

use crate::error::{Error, Result};
use crate::targets::{HistogramTarget, CHROMA_BINS, HUE_BINS};
use crate::tensor::{Float, Tensor, Var};

/// Floor applied to predicted probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// `a` and `b` are divided by this before the squared error.
pub const AB_RANGE: f64 = 128.0;
/// Smallest calibration batch, in pixels.
pub const MIN_CALIBRATION_PIXELS: usize = 32;

/// A differentiable objective together with its bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct LossValue<'t, F> {
    /// Unscaled objective.
    pub objective: Var<'t, F>,
    pub pixels: usize,
    pub scale: f64,
}

impl<'t, F: Float> LossValue<'t, F> {
    /// Objective multiplied by the calibration factor; this is what gets
    /// differentiated during training.
    pub fn scaled(&self) -> Result<Var<'t, F>> {
        self.objective.scale(self.scale)
    }

    pub fn value(&self) -> f64 {
        self.objective.value().item().as_f64()
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

fn check_logits<F: Float>(v: &Var<'_, F>, k: usize, bins: usize, op: &'static str) -> Result<()> {
    if v.shape() != [k, bins] {
        return Err(Error::shape(op, format!("expected [{k}, {bins}], got {:?}", v.shape())));
    }
    Ok(())
}

/// Mean over pixels of `KL(target || softmax(hue)) + KL(target || softmax(chroma))`.
pub fn kl_histogram_loss<'t, F: Float>(
    logits_hue: Var<'t, F>,
    logits_chroma: Var<'t, F>,
    targets: &[HistogramTarget],
) -> Result<LossValue<'t, F>> {
    const OP: &str = "kl_histogram_loss";
    let k = targets.len();
    if k == 0 {
        return Err(Error::invalid(OP, "no targets"));
    }
    check_logits(&logits_hue, k, HUE_BINS, OP)?;
    check_logits(&logits_chroma, k, CHROMA_BINS, OP)?;
    if let Some(i) = targets.iter().position(|t| !t.is_normalized(1e-6)) {
        return Err(Error::invalid(OP, format!("target {i} is not a normalised histogram")));
    }

    let mut entropy = 0.0;
    let mut hue_t = Vec::with_capacity(k * HUE_BINS);
    let mut chroma_t = Vec::with_capacity(k * CHROMA_BINS);
    for t in targets {
        for &p in t.hue.iter().chain(&t.chroma) {
            if p > 0.0 {
                entropy += p * p.ln();
            }
        }
        hue_t.extend_from_slice(&t.hue);
        chroma_t.extend_from_slice(&t.chroma);
    }
    let hue_t = Tensor::from_f64(vec![k, HUE_BINS], &hue_t)?;
    let chroma_t = Tensor::from_f64(vec![k, CHROMA_BINS], &chroma_t)?;

    let cross = |logits: Var<'t, F>, t: &Tensor<F>| -> Result<Var<'t, F>> {
        logits.softmax(1)?.ln_clamped(PROB_FLOOR)?.mul_const(t)?.sum()
    };
    let total = cross(logits_hue, &hue_t)?.add(cross(logits_chroma, &chroma_t)?)?;
    let objective = total.scale(-1.0 / k as f64)?.add_scalar(entropy / k as f64)?;
    Ok(LossValue { objective, pixels: k, scale: 1.0 })
}

/// Mean squared error on `(a, b) / 128`, averaged over pixels and both channels.
pub fn lab_regression_loss<'t, F: Float>(pred: Var<'t, F>, targets: &[(f64, f64)]) -> Result<LossValue<'t, F>> {
    const OP: &str = "lab_regression_loss";
    let k = targets.len();
    if k == 0 {
        return Err(Error::invalid(OP, "no targets"));
    }
    check_logits(&pred, k, 2, OP)?;
    let t: Vec<f64> = targets.iter().flat_map(|&(a, b)| [a / AB_RANGE, b / AB_RANGE]).collect();
    let t = Tensor::from_f64(vec![k, 2], &t)?;
    let objective = pred.sub_const(&t)?.square()?.mean()?;
    Ok(LossValue { objective, pixels: k, scale: 1.0 })
}

/// Factor `c` with `c * initial_loss == 1`.
pub fn calibrate_loss_scale(initial_loss: f64, pixels: usize) -> Result<f64> {
    const OP: &str = "calibrate_loss_scale";
    if pixels < MIN_CALIBRATION_PIXELS {
        return Err(Error::invalid(OP, format!("{pixels} pixels, need {MIN_CALIBRATION_PIXELS}")));
    }
    if !initial_loss.is_finite() || initial_loss <= 0.0 {
        return Err(Error::invalid(OP, format!("initial loss {initial_loss} cannot be normalised")));
    }
    Ok(1.0 / initial_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn delta(bin: usize) -> [f64; 32] {
        let mut h = [0.0; 32];
        h[bin] = 1.0;
        h
    }

    #[test]
    fn kl_zero_when_prediction_matches() {
        let tape = Tape::<f64>::new();
        let mut hue = [0.0; 32];
        hue[..4].copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let target = HistogramTarget { hue, chroma: [1.0 / 32.0; 32] };
        let logits: Vec<f64> = hue.iter().map(|&p| if p > 0.0 { p.ln() } else { -60.0 }).collect();
        let lh = tape.leaf(Tensor::from_f64(vec![1, 32], &logits).unwrap());
        let lc = tape.leaf(Tensor::zeros(vec![1, 32]));
        let loss = kl_histogram_loss(lh, lc, &[target]).unwrap();
        assert!(loss.value().abs() < 1e-9, "{}", loss.value());
    }

    #[test]
    fn kl_uniform_prediction_on_delta_is_ln32_per_head() {
        let tape = Tape::<f64>::new();
        let t = HistogramTarget { hue: delta(3), chroma: delta(0) };
        let lh = tape.leaf(Tensor::zeros(vec![2, 32]));
        let lc = tape.leaf(Tensor::zeros(vec![2, 32]));
        let loss = kl_histogram_loss(lh, lc, &[t.clone(), t]).unwrap();
        assert!((loss.value() - 2.0 * 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_unnormalised_target() {
        let tape = Tape::<f64>::new();
        let t = HistogramTarget { hue: [0.0; 32], chroma: delta(0) };
        let l = tape.leaf(Tensor::zeros(vec![1, 32]));
        assert!(kl_histogram_loss(l, l, &[t]).is_err());
    }

    #[test]
    fn regression_closed_form() {
        let tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::zeros(vec![1, 2]));
        let loss = lab_regression_loss(pred, &[(128.0, 0.0)]).unwrap();
        assert!((loss.value() - 0.5).abs() < 1e-15);
        let tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::from_f64(vec![1, 2], &[0.25, -0.5]).unwrap());
        assert_eq!(lab_regression_loss(pred, &[(32.0, -64.0)]).unwrap().value(), 0.0);
    }

    #[test]
    fn calibration() {
        assert_eq!(calibrate_loss_scale(2.0, 64).unwrap(), 0.5);
        assert_eq!(calibrate_loss_scale(1.0, 64).unwrap(), 1.0);
        assert!(calibrate_loss_scale(0.0, 64).is_err());
        assert!(calibrate_loss_scale(1.0, 8).is_err());
    }
}
