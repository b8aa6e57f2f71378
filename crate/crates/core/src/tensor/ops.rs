use std::rc::Rc;

use super::tape::Var;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Per-channel statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

fn finite<F: Float>(t: Tensor<F>, op: &'static str) -> Result<Tensor<F>> {
    t.ensure_finite(op)?;
    Ok(t)
}

fn same_shape<F: Float>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// (outer, extent, inner) split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, F: Float> Var<'t, F> {
    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = finite(Tensor::new(a.shape().to_vec(), data)?, "add")?;
        Ok(self.tape.push_op(
            out,
            &[self, other],
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let out = finite(Tensor::new(a.shape().to_vec(), data)?, "sub")?;
        Ok(self.tape.push_op(
            out,
            &[self, other],
            Box::new(|g| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = finite(Tensor::new(a.shape().to_vec(), data)?, "mul")?;
        Ok(self.tape.push_op(
            out,
            &[self, other],
            Box::new(move |g| {
                let ga = zip_map(g, &b, |g, y| g * y);
                let gb = zip_map(g, &a, |g, x| g * x);
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(self, c: &Tensor<F>) -> Result<Var<'t, F>> {
        let a = self.value();
        same_shape("mul_const", &a, c)?;
        let c = Rc::new(c.clone());
        let out = finite(zip_map(&a, &c, |x, y| x * y), "mul_const")?;
        Ok(self.tape.push_op(out, &[self], Box::new(move |g| vec![Some(zip_map(g, &c, |g, y| g * y))])))
    }

    /// Elementwise difference with a constant tensor.
    pub fn sub_const(self, c: &Tensor<F>) -> Result<Var<'t, F>> {
        let a = self.value();
        same_shape("sub_const", &a, c)?;
        let out = finite(zip_map(&a, c, |x, y| x - y), "sub_const")?;
        Ok(self.tape.push_op(out, &[self], Box::new(|g| vec![Some(g.clone())])))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t, F>> {
        let s = F::of(s);
        let out = finite(self.value().map(|v| v * s), "scale")?;
        Ok(self.tape.push_op(out, &[self], Box::new(move |g| vec![Some(g.map(|v| v * s))])))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t, F>> {
        let s = F::of(s);
        let out = finite(self.value().map(|v| v + s), "add_scalar")?;
        Ok(self.tape.push_op(out, &[self], Box::new(|g| vec![Some(g.clone())])))
    }

    pub fn square(self) -> Result<Var<'t, F>> {
        let a = self.value();
        let out = finite(a.map(|v| v * v), "square")?;
        let two = F::of(2.0);
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |g| vec![Some(zip_map(g, &a, |g, x| g * two * x))]),
        ))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(self, floor: f64) -> Result<Var<'t, F>> {
        let floor = F::of(floor);
        let a = self.value();
        let out = finite(a.map(|v| v.max(floor).ln()), "ln_clamped")?;
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |g| {
                vec![Some(zip_map(g, &a, |g, x| if x >= floor { g / x } else { F::zero() }))]
            }),
        ))
    }

    pub fn relu(self) -> Result<Var<'t, F>> {
        let a = self.value();
        a.ensure_finite("relu")?;
        let out = finite(a.map(|v| v.max(F::zero())), "relu")?;
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |g| {
                vec![Some(zip_map(g, &a, |g, x| if x > F::zero() { g } else { F::zero() }))]
            }),
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Result<Var<'t, F>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let total: F = a.data().iter().copied().sum();
        let out = finite(Tensor::scalar(total), "sum")?;
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |g| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        ))
    }

    pub fn mean(self) -> Result<Var<'t, F>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, F>> {
        let a = self.value();
        let old = a.shape().to_vec();
        let out = (*a).clone().reshape(shape)?;
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |g| vec![Some(g.clone().reshape(old.clone()).expect("same numel"))]),
        ))
    }

    /// Collapse all trailing axes: [N, ...] -> [N, prod(...)].
    pub fn flatten(self) -> Result<Var<'t, F>> {
        let shape = self.shape();
        let rest: usize = shape[1..].iter().product();
        self.reshape(vec![shape[0], rest])
    }

    /// `input · weight + bias` with input [N,D], weight [D,M], bias [M].
    pub fn affine(self, weight: Var<'t, F>, bias: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
            return Err(Error::shape(
                "affine",
                format!("expected [N,D]·[D,M]+[M], got {:?} {:?} {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let m = w.shape()[1];
        if w.shape()[0] != d || b.shape()[0] != m {
            return Err(Error::shape(
                "affine",
                format!("inner dimensions disagree: {:?} {:?} {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        F::gemm(n, d, m, F::one(), x.data(), (d as isize, 1), w.data(), (m as isize, 1), F::one(), &mut out, (m as isize, 1));
        let out = finite(Tensor::new(vec![n, m], out)?, "affine")?;
        let need_x = self.requires_grad();
        Ok(self.tape.push_op(
            out,
            &[self, weight, bias],
            Box::new(move |g| {
                let gd = g.data();
                let gx = need_x.then(|| {
                    let mut gx = vec![F::zero(); n * d];
                    // g [N,M] · w^T [M,D]
                    F::gemm(n, m, d, F::one(), gd, (m as isize, 1), w.data(), (1, m as isize), F::zero(), &mut gx, (d as isize, 1));
                    Tensor::new(vec![n, d], gx).expect("shape")
                });
                let mut gw = vec![F::zero(); d * m];
                // x^T [D,N] · g [N,M]
                F::gemm(d, n, m, F::one(), x.data(), (1, d as isize), gd, (m as isize, 1), F::zero(), &mut gw, (m as isize, 1));
                let mut gb = vec![F::zero(); m];
                for row in gd.chunks_exact(m) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                vec![
                    gx,
                    Some(Tensor::new(vec![d, m], gw).expect("shape")),
                    Some(Tensor::new(vec![m], gb).expect("shape")),
                ]
            }),
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, F>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(Error::invalid("softmax", format!("axis {axis} for rank {}", a.rank())));
        }
        a.ensure_finite("softmax")?;
        let (outer, dim, inner) = axis_split(a.shape(), axis);
        let src = a.data();
        let mut y = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * dim * inner + j * inner + i;
                let max = (0..dim).map(|j| src[at(j)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for j in 0..dim {
                    let e = (src[at(j)] - max).exp();
                    y[at(j)] = e;
                    total = total + e;
                }
                for j in 0..dim {
                    y[at(j)] = y[at(j)] / total;
                }
            }
        }
        let out = Rc::new(Tensor::new(a.shape().to_vec(), y)?);
        let saved = Rc::clone(&out);
        Ok(self.tape.push_op(
            (*out).clone(),
            &[self],
            Box::new(move |g| {
                let (y, gd) = (saved.data(), g.data());
                let mut gx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * dim * inner + j * inner + i;
                        let dot: F = (0..dim).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..dim {
                            gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(saved.shape().to_vec(), gx).expect("shape"))]
            }),
        ))
    }

    /// Mean softmax cross-entropy of logits [P,C] against class indices.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t, F>> {
        let a = self.value();
        if a.rank() != 2 || a.shape()[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} for {} labels", a.shape(), labels.len()),
            ));
        }
        a.ensure_finite("softmax_cross_entropy")?;
        let (p, c) = (a.shape()[0], a.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid("softmax_cross_entropy", format!("label {bad} >= {c} classes")));
        }
        let mut probs = vec![F::zero(); p * c];
        let mut loss = F::zero();
        for (r, row) in a.data().chunks_exact(c).enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let total: F = row.iter().map(|&v| (v - max).exp()).sum();
            let log_total = total.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[r * c + j] = (v - max - log_total).exp();
            }
            loss = loss - (row[labels[r]] - max - log_total);
        }
        let pf = F::of(p as f64);
        let out = finite(Tensor::scalar(loss / pf), "softmax_cross_entropy")?;
        let labels = labels.to_vec();
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |g| {
                let s = g.item() / pf;
                let mut gx: Vec<F> = probs.iter().map(|&v| v * s).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * c + l] = gx[r * c + l] - s;
                }
                vec![Some(Tensor::new(vec![p, c], gx).expect("shape"))]
            }),
        ))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn narrow_cols(self, start: usize, len: usize) -> Result<Var<'t, F>> {
        let a = self.value();
        if a.rank() != 2 || start + len > a.shape()[1] || len == 0 {
            return Err(Error::shape("narrow_cols", format!("{:?} [{start}, +{len})", a.shape())));
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut data = Vec::with_capacity(rows * len);
        for row in a.data().chunks_exact(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![F::zero(); rows * cols];
                for (r, grow) in g.data().chunks_exact(len).enumerate() {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(grow);
                }
                vec![Some(Tensor::new(vec![rows, cols], gx).expect("shape"))]
            }),
        ))
    }

    /// Concatenate rank-2 tensors along columns.
    pub fn concat_cols(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].shape()[0];
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            if v.rank() != 2 || v.shape()[0] != rows {
                return Err(Error::shape("concat_cols", format!("{:?} with {rows} rows", v.shape())));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(first.tape.push_op(
            out,
            parts,
            Box::new(move |g| {
                let mut offset = 0;
                let gd = g.data();
                widths
                    .iter()
                    .map(|&w| {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        Some(Tensor::new(vec![rows, w], part).expect("shape"))
                    })
                    .collect()
            }),
        ))
    }

    /// Parameter-free batch normalization using batch statistics.
    ///
    /// Normalizes each channel of an [N,C,...] input by its biased batch
    /// variance. Returns the observed statistics alongside the output.
    pub fn batchnorm_train(self, eps: f64) -> Result<(Var<'t, F>, BatchStats<F>)> {
        let a = self.value();
        if a.rank() < 2 {
            return Err(Error::shape("batchnorm", format!("need [N,C,...], got {:?}", a.shape())));
        }
        let (n, c) = (a.shape()[0], a.shape()[1]);
        let spatial: usize = a.shape()[2..].iter().product();
        let count = n * spatial;
        if count < 2 {
            return Err(Error::invalid("batchnorm", "train mode needs more than one value per channel"));
        }
        let eps = F::of(eps);
        let countf = F::of(count as f64);
        let src = a.data();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ch in 0..c {
            let mut s = F::zero();
            for b in 0..n {
                s = s + src[(b * c + ch) * spatial..(b * c + ch + 1) * spatial].iter().copied().sum();
            }
            let mu = s / countf;
            let mut v = F::zero();
            for b in 0..n {
                for &x in &src[(b * c + ch) * spatial..(b * c + ch + 1) * spatial] {
                    v = v + (x - mu) * (x - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v / countf;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for i in 0..spatial {
                    xhat[base + i] = (src[base + i] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let out = finite(Tensor::new(a.shape().to_vec(), xhat)?, "batchnorm")?;
        let saved = Rc::new(out.clone());
        let stats = BatchStats { mean, var };
        let var_out = self.tape.push_op(
            out,
            &[self],
            Box::new(move |g| {
                let (gd, xh) = (g.data(), saved.data());
                let mut gx = vec![F::zero(); gd.len()];
                for ch in 0..c {
                    let mut sum_g = F::zero();
                    let mut sum_gx = F::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * spatial;
                        for i in 0..spatial {
                            sum_g = sum_g + gd[base + i];
                            sum_gx = sum_gx + gd[base + i] * xh[base + i];
                        }
                    }
                    let mg = sum_g / countf;
                    let mgx = sum_gx / countf;
                    for b in 0..n {
                        let base = (b * c + ch) * spatial;
                        for i in 0..spatial {
                            gx[base + i] = inv_std[ch] * (gd[base + i] - mg - xh[base + i] * mgx);
                        }
                    }
                }
                vec![Some(Tensor::new(saved.shape().to_vec(), gx).expect("shape"))]
            }),
        );
        Ok((var_out, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_infer(self, mean: &[F], var: &[F], eps: f64) -> Result<Var<'t, F>> {
        let a = self.value();
        if a.rank() < 2 || a.shape()[1] != mean.len() || mean.len() != var.len() {
            return Err(Error::shape(
                "batchnorm",
                format!("input {:?} with {} statistics", a.shape(), mean.len()),
            ));
        }
        let (n, c) = (a.shape()[0], a.shape()[1]);
        let spatial: usize = a.shape()[2..].iter().product();
        let eps = F::of(eps);
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut y = a.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for v in &mut y[base..base + spatial] {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
            }
        }
        let out = finite(Tensor::new(a.shape().to_vec(), y)?, "batchnorm")?;
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |g| {
                let mut gx = g.data().to_vec();
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for v in &mut gx[base..base + spatial] {
                            *v = *v * inv_std[ch];
                        }
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), gx).expect("shape"))]
            }),
        ))
    }

    /// Bilinear samples of an [N,C,H,W] feature map at real-valued points
    /// `(batch index, y, x)`, giving [P,C].
    pub fn bilinear_gather(self, points: &[(usize, f64, f64)]) -> Result<Var<'t, F>> {
        let a = self.value();
        if a.rank() != 4 {
            return Err(Error::shape("bilinear_sample", format!("need [N,C,H,W], got {:?}", a.shape())));
        }
        if points.is_empty() {
            return Err(Error::invalid("bilinear_sample", "no sample points"));
        }
        let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
        let mut corners = Vec::with_capacity(points.len());
        for &(b, y, x) in points {
            let inside = b < n
                && y.is_finite()
                && x.is_finite()
                && (0.0..=(h - 1) as f64).contains(&y)
                && (0.0..=(w - 1) as f64).contains(&x);
            if !inside {
                return Err(Error::invalid(
                    "bilinear_sample",
                    format!("point ({b}, {y}, {x}) outside [{n}, {h}, {w}]"),
                ));
            }
            corners.push(Corners::new(b, y, x, h, w));
        }
        let src = a.data();
        let plane = h * w;
        let mut out = Vec::with_capacity(points.len() * c);
        for k in &corners {
            for ch in 0..c {
                let base = (k.batch * c + ch) * plane;
                let v = k.idx.iter().zip(&k.wt).map(|(&i, &wt)| src[base + i] * F::of(wt)).sum();
                out.push(v);
            }
        }
        let out = Tensor::new(vec![points.len(), c], out)?;
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![F::zero(); n * c * plane];
                for (p, k) in corners.iter().enumerate() {
                    for ch in 0..c {
                        let base = (k.batch * c + ch) * plane;
                        let gv = gd[p * c + ch];
                        for (&i, &wt) in k.idx.iter().zip(&k.wt) {
                            gx[base + i] = gx[base + i] + gv * F::of(wt);
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], gx).expect("shape"))]
            }),
        ))
    }

    /// Bilinear sample of a [C,H,W] feature map at one point, giving [C].
    pub fn bilinear_sample(self, y: f64, x: f64) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::shape("bilinear_sample", format!("need [C,H,W], got {shape:?}")));
        }
        let c = shape[0];
        self.reshape(vec![1, shape[0], shape[1], shape[2]])?
            .bilinear_gather(&[(0, y, x)])?
            .reshape(vec![c])
    }
}

/// Four surrounding integer neighbours of a real coordinate and their weights.
struct Corners {
    batch: usize,
    idx: [usize; 4],
    wt: [f64; 4],
}

impl Corners {
    fn new(batch: usize, y: f64, x: f64, h: usize, w: usize) -> Self {
        let y0 = (y.floor() as usize).min(h - 1);
        let x0 = (x.floor() as usize).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        Corners {
            batch,
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            wt: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
        }
    }
}

fn zip_map<F: Float>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("operands share a shape")
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;

    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let tape = Tape::new();
        let y = tape.constant(t(&[1, 2], &[0.0, 0.0])).softmax(1).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
        let y = tape.constant(t(&[1, 2], &[1000.0, 1000.0])).softmax(1).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
        assert!(tape.constant(t(&[2], &[1.0, 2.0])).softmax(1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let tape = Tape::new();
        let y = tape.constant(t(&[2, 2], &[0.0, 3.0, 0.0, 3.0])).softmax(0).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn affine_identity_and_bias_only() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(x.affine(eye, zero).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let w0 = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(t(&[3], &[1.0, -1.0, 0.5]));
        assert_eq!(x.affine(w0, b).unwrap().value().data(), &[1.0, -1.0, 0.5, 1.0, -1.0, 0.5]);
        assert!(x.affine(tape.constant(Tensor::zeros(vec![3, 3])), b).is_err());
    }

    #[test]
    fn batchnorm_constant_channel_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 1, 2, 2], 3.0));
        let (y, stats) = x.batchnorm_train(1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.mean, vec![3.0]);
        assert_eq!(stats.var, vec![0.0]);
    }

    #[test]
    fn batchnorm_rejects_single_value_per_channel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 3], 1.0));
        assert!(x.batchnorm_train(1e-5).is_err());
    }

    #[test]
    fn batchnorm_infer_direct_formula() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1], &[4.0]));
        let y = x.batchnorm_infer(&[2.0], &[4.0], 1e-5).unwrap();
        let expected = 2.0 / (4.0f64 + 1e-5).sqrt();
        assert!((y.value().data()[0] - expected).abs() < 1e-15);
        assert!((y.value().data()[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn bilinear_integer_and_midpoint() {
        let tape = Tape::new();
        let fm = tape.constant(t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        assert_eq!(fm.bilinear_sample(1.0, 0.0).unwrap().value().data(), &[2.0]);
        assert_eq!(fm.bilinear_sample(0.0, 0.5).unwrap().value().data(), &[0.5]);
        assert_eq!(fm.bilinear_sample(1.0, 1.0).unwrap().value().data(), &[3.0]);
        assert!(fm.bilinear_sample(1.5, 0.0).is_err());
        assert!(fm.bilinear_sample(-0.1, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(vec![3, 4]));
        let l = x.softmax_cross_entropy(&[0, 1, 3]).unwrap();
        assert!((l.value().item() - 4f64.ln()).abs() < 1e-12);
        assert!(x.softmax_cross_entropy(&[0, 1, 4]).is_err());
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 1.0]));
        assert!(matches!(x.relu(), Err(Error::NonFinite { .. })));
    }
}
