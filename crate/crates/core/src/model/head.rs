use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{Bound, ParamSet};
use super::spec::FeatureShape;
use crate::error::{Error, Result};
use crate::targets::PixelSampleSet;
use crate::tensor::{xavier_init, Float, Tape, Tensor, Var};

/// Per-row affine stack `input -> hidden... -> output` with relu between.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F> {
    pub spec: MlpSpec,
    pub prefix: String,
    pub params: ParamSet<F>,
}

impl MlpSpec {
    fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input).chain(self.hidden.iter().copied()).chain([self.output]).collect()
    }

    pub fn parameter_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let w = self.widths();
        w.windows(2)
            .enumerate()
            .flat_map(|(i, p)| {
                [(format!("{prefix}.{i}.weight"), vec![p[0], p[1]]), (format!("{prefix}.{i}.bias"), vec![p[1]])]
            })
            .collect()
    }
}

impl<F: Float> Mlp<F> {
    /// Fresh Xavier weights, zero biases.
    pub fn build<R: Rng + ?Sized>(spec: &MlpSpec, prefix: &str, rng: &mut R) -> Result<Self> {
        if spec.widths().contains(&0) {
            return Err(Error::Spec(format!("head `{prefix}` has a zero width")));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape) in spec.parameter_shapes(prefix) {
            let t = if name.ends_with(".weight") {
                xavier_init(&shape, shape[0], rng)
            } else {
                Tensor::zeros(shape)
            };
            tensors.insert(name, t);
        }
        Ok(Mlp { spec: spec.clone(), prefix: prefix.to_string(), params: ParamSet { tensors } })
    }

    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> Bound<'t, F> {
        self.params.bind(tape, &|_| trainable)
    }

    /// `[K, input] -> [K, output]`.
    pub fn forward<'t>(&self, bound: &Bound<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let n = self.spec.hidden.len() + 1;
        let mut x = x;
        for i in 0..n {
            let w = bound.get(&format!("{}.{i}.weight", self.prefix))?;
            let b = bound.get(&format!("{}.{i}.bias", self.prefix))?;
            x = x.affine(w, b)?;
            if i + 1 < n {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

/// Input pixel coordinate mapped into a map of extent `out` when the input
/// has extent `input`, pixel-centre aligned and clamped.
pub fn map_coordinate(c: f64, input: usize, out: usize) -> f64 {
    let s = input as f64 / out as f64;
    ((c + 0.5) / s - 0.5).clamp(0.0, (out - 1) as f64)
}

/// Concatenated bilinear samples of every tap at each location, `[K, sum C]`.
pub fn hypercolumn_extract<'t, F: Float>(
    taps: &[Var<'t, F>],
    input_size: (usize, usize),
    locations: &PixelSampleSet,
) -> Result<Var<'t, F>> {
    if taps.is_empty() || locations.is_empty() {
        return Err(Error::invalid("hypercolumn_extract", "need at least one tap and one location"));
    }
    let (h_in, w_in) = input_size;
    let mut parts = Vec::with_capacity(taps.len());
    for tap in taps {
        let shape = tap.shape();
        if shape.len() != 4 {
            return Err(Error::shape("hypercolumn_extract", format!("tap shape {shape:?}")));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let mut points = Vec::with_capacity(locations.len());
        for &(b, y, x) in &locations.locations {
            if b >= n || y >= h_in || x >= w_in {
                return Err(Error::invalid(
                    "hypercolumn_extract",
                    format!("location ({b},{y},{x}) outside batch {n} of {h_in}x{w_in}"),
                ));
            }
            points.push((b, map_coordinate(y as f64, h_in, h), map_coordinate(x as f64, w_in, w)));
        }
        parts.push(tap.bilinear_gather(&points)?);
    }
    Var::concat_cols(&parts)
}

/// Column length for a set of tap shapes.
pub fn hypercolumn_width(taps: &[FeatureShape]) -> usize {
    taps.iter().map(|s| s.channels).sum()
}
