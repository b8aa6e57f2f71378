use serde::{Deserialize, Serialize};

use super::tape::Var;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// What out-of-image positions read during convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    #[default]
    Zero,
    /// Per-channel fill taken from the bias of the layer that produced the
    /// input channels.
    BiasOfPrevious,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub pad: usize,
    pub padding: PaddingMode,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions { stride: 1, pad: 0, padding: PaddingMode::Zero }
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn patches(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one sample [C,H,W] into a [C·kh·kw, Ho·Wo] patch matrix.
fn im2col<F: Float>(g: &ConvGeom, x: &[F], fill: &[F], col: &mut [F]) {
    let p = g.patches();
    for ch in 0..g.c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut col[((ch * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(fill[ch]);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { fill[ch] } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Fold patch-matrix gradients back onto one sample; padded positions drop out.
fn col2im<F: Float>(g: &ConvGeom, col: &[F], dx: &mut [F]) {
    let p = g.patches();
    for ch in 0..g.c {
        let plane = &mut dx[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &col[((ch * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

impl<'t, F: Float> Var<'t, F> {
    /// Cross-correlation of [N,C,H,W] input with [F,C,kh,kw] filters plus a
    /// per-filter bias.
    ///
    /// With [`PaddingMode::BiasOfPrevious`] the caller supplies one fill value
    /// per input channel; fill values are treated as constants.
    pub fn conv2d(
        self,
        weight: Var<'t, F>,
        bias: Var<'t, F>,
        opts: &Conv2dOptions,
        fill: Option<&[F]>,
    ) -> Result<Var<'t, F>> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        let (x, wt, b) = (self.value(), weight.value(), bias.value());
        if x.rank() != 4 || wt.rank() != 4 || b.rank() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} weight {:?} bias {:?}", x.shape(), wt.shape(), b.shape()),
            ));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, kc, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        if kc != c || b.shape()[0] != f {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} weight {:?} bias {:?}", x.shape(), wt.shape(), b.shape()),
            ));
        }
        if opts.stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (hp, wp) = (h + 2 * opts.pad, w + 2 * opts.pad);
        if kh > hp || kw > wp {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {hp}x{wp}"),
            ));
        }
        let fill: Vec<F> = match (opts.padding, fill) {
            (PaddingMode::Zero, _) => vec![F::zero(); c],
            (PaddingMode::BiasOfPrevious, Some(v)) if v.len() == c => v.to_vec(),
            (PaddingMode::BiasOfPrevious, Some(v)) => {
                return Err(Error::shape("conv2d", format!("{} fill values for {c} channels", v.len())))
            }
            (PaddingMode::BiasOfPrevious, None) => {
                return Err(Error::invalid("conv2d", "bias_of_previous padding needs fill values"))
            }
        };
        let g = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            ho: (hp - kh) / opts.stride + 1,
            wo: (wp - kw) / opts.stride + 1,
            stride: opts.stride,
            pad: opts.pad,
        };
        let (ckk, p) = (g.ckk(), g.patches());
        let keep_cols = self.tape.any_requires_grad(&[weight]);
        let mut cols: Vec<Vec<F>> = Vec::new();
        let mut col = vec![F::zero(); ckk * p];
        let mut out = vec![F::zero(); n * f * p];
        for s in 0..n {
            im2col(&g, &x.data()[s * c * h * w..(s + 1) * c * h * w], &fill, &mut col);
            let dst = &mut out[s * f * p..(s + 1) * f * p];
            for (fi, row) in dst.chunks_exact_mut(p).enumerate() {
                row.fill(b.data()[fi]);
            }
            F::gemm(f, ckk, p, F::one(), wt.data(), (ckk as isize, 1), &col, (p as isize, 1), F::one(), dst, (p as isize, 1));
            if keep_cols {
                cols.push(col.clone());
            }
        }
        let out = Tensor::new(vec![n, f, g.ho, g.wo], out)?;
        out.ensure_finite("conv2d")?;
        let need_x = self.requires_grad();
        Ok(self.tape.push_op(
            out,
            &[self, weight, bias],
            Box::new(move |grad| {
                let gd = grad.data();
                let mut gw = vec![F::zero(); f * ckk];
                let mut gb = vec![F::zero(); f];
                let mut gx = need_x.then(|| vec![F::zero(); n * c * h * w]);
                let mut gcol = vec![F::zero(); ckk * p];
                for s in 0..n {
                    let gs = &gd[s * f * p..(s + 1) * f * p];
                    for (fi, row) in gs.chunks_exact(p).enumerate() {
                        gb[fi] = gb[fi] + row.iter().copied().sum();
                    }
                    if !cols.is_empty() {
                        // gw += g_s [F,P] · col_s^T [P,CKK]
                        F::gemm(f, p, ckk, F::one(), gs, (p as isize, 1), &cols[s], (1, p as isize), F::one(), &mut gw, (ckk as isize, 1));
                    }
                    if let Some(gx) = gx.as_mut() {
                        // gcol = w^T [CKK,F] · g_s [F,P]
                        F::gemm(ckk, f, p, F::one(), wt.data(), (1, ckk as isize), gs, (p as isize, 1), F::zero(), &mut gcol, (p as isize, 1));
                        col2im(&g, &gcol, &mut gx[s * c * h * w..(s + 1) * c * h * w]);
                    }
                }
                vec![
                    gx.map(|v| Tensor::new(vec![n, c, h, w], v).expect("shape")),
                    (!cols.is_empty()).then(|| Tensor::new(vec![f, kc, kh, kw], gw).expect("shape")),
                    Some(Tensor::new(vec![f], gb).expect("shape")),
                ]
            }),
        ))
    }

    /// Max pooling over `k`×`k` windows. Gradients flow only to the first
    /// maximum in row-major window order.
    pub fn maxpool2d(self, k: usize, stride: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::shape("maxpool2d", format!("need [N,C,H,W], got {:?}", x.shape())));
        }
        if k == 0 || stride == 0 {
            return Err(Error::invalid("maxpool2d", "empty window configuration"));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h < k || w < k {
            return Err(Error::shape("maxpool2d", format!("window {k} larger than {h}x{w}")));
        }
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let src = x.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = base + (oy * stride + i) * w + ox * stride + j;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        out.ensure_finite("maxpool2d")?;
        let numel = x.numel();
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |grad| {
                let mut gx = vec![F::zero(); numel];
                for (&i, &g) in argmax.iter().zip(grad.data()) {
                    gx[i] = gx[i] + g;
                }
                vec![Some(Tensor::new(vec![n, c, h, w], gx).expect("shape"))]
            }),
        ))
    }
}
