//! Convolutions: square `k×k` stride-1 "same" convolutions (k = 1 or 3) and
//! the 2×2 stride-2 transposed convolution.
//!
//! Weights are `[out_channels, in_channels, k, k]`, bias `[out_channels]`.
//! Kernels are im2col + row-axpy products; every reduction runs in a fixed
//! order so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Op;
use crate::rng::{kaiming_init, Rng};
use crate::tensor::{Scalar, Tensor};

/// Trainable weights of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        if !(1..=3).contains(&kernel) {
            return Err(Error::invalid(format!("kernel size {kernel} not in 1..=3")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid("convolution channel counts must be positive"));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// `Cin·Cout·k² + Cout`.
    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel + self.out_channels
    }
}

impl<T: Scalar> ConvParams<T> {
    /// Kaiming-normal weights (fan-in `Cin·k²`), zero bias.
    pub fn init(shape: ConvShape, rng: &mut Rng) -> Self {
        let fan_in = shape.in_channels * shape.kernel * shape.kernel;
        Self {
            weight: kaiming_init(fan_in, shape.weight_shape(), rng),
            bias: Tensor::zeros(vec![shape.out_channels]),
        }
    }

    pub fn shape(&self) -> ConvShape {
        let s = self.weight.shape();
        ConvShape {
            out_channels: s[0],
            in_channels: s[1],
            kernel: s[2],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Dot product with eight fixed lanes, combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    let s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    s + tail
}

fn check_conv_inputs(kind: &str, x: &[usize], w: &[usize], b: &[usize], k: usize) -> Result<()> {
    let [_, cin, _, _] = x[..] else {
        return Err(Error::shape(format!("{kind}: input must be 4-D, got {x:?}")));
    };
    let [cout, wcin, kh, kw] = w[..] else {
        return Err(Error::shape(format!("{kind}: weight must be 4-D, got {w:?}")));
    };
    if kh != k || kw != k {
        return Err(Error::shape(format!("{kind}: expected {k}x{k} kernel, got {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::shape(format!(
            "{kind}: channel mismatch, input has {cin} channels, weight expects {wcin}"
        )));
    }
    if b != [cout] {
        return Err(Error::shape(format!("{kind}: bias shape {b:?}, expected [{cout}]")));
    }
    Ok(())
}

/// Stride-1 convolution with zero padding `k / 2`; `k` is 1 or 3.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub kernel: usize,
}

impl Conv2d {
    pub const K3: Conv2d = Conv2d { kernel: 3 };
    pub const K1: Conv2d = Conv2d { kernel: 1 };

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    /// Valid destination range `[x0, x1)` of a row shifted by `ox`.
    fn span(ox: isize, w: usize) -> (usize, usize) {
        let x0 = (-ox).max(0) as usize;
        let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
        (x0.min(x1), x1)
    }

    /// Column matrix `[cin·k·k, h·w]` for one image.
    fn im2col<T: Scalar>(&self, img: &[T], cin: usize, h: usize, w: usize, col: &mut [T]) {
        let k = self.kernel;
        let pad = self.pad();
        let hw = h * w;
        for c in 0..cin {
            let plane = &img[c * hw..(c + 1) * hw];
            for dy in 0..k {
                for dx in 0..k {
                    let row = &mut col[((c * k + dy) * k + dx) * hw..][..hw];
                    let ox = dx as isize - pad;
                    let (x0, x1) = Self::span(ox, w);
                    for y in 0..h {
                        let sy = y as isize + dy as isize - pad;
                        let dst = &mut row[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        dst[..x0].fill(T::zero());
                        dst[x1..].fill(T::zero());
                        let s0 = (x0 as isize + ox) as usize;
                        dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], cin: usize, h: usize, w: usize, img: &mut [T]) {
        let k = self.kernel;
        let pad = self.pad();
        let hw = h * w;
        for c in 0..cin {
            let plane = &mut img[c * hw..(c + 1) * hw];
            for dy in 0..k {
                for dx in 0..k {
                    let row = &col[((c * k + dy) * k + dx) * hw..][..hw];
                    let ox = dx as isize - pad;
                    let (x0, x1) = Self::span(ox, w);
                    let s0 = (x0 as isize + ox) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &row[y * w + x0..y * w + x1];
                        let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Op<T> for Conv2d {
    fn kind(&self) -> &'static str {
        if self.kernel == 1 {
            "conv1x1"
        } else {
            "conv3x3"
        }
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let [x, w, b] = inputs else {
            return Err(Error::shape("conv takes (input, weight, bias)"));
        };
        check_conv_inputs(Op::<T>::kind(self), x, w, b, self.kernel)?;
        Ok(vec![x[0], w[0], x[2], x[3]])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        let out_shape = Op::<T>::output_shape(self, &shapes)?;
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let [bs, cin, h, wd] = x.dims4()?;
        let cout = out_shape[1];
        let hw = h * wd;
        let rows = cin * self.kernel * self.kernel;
        let mut out = vec![T::zero(); bs * cout * hw];
        let mut col = vec![T::zero(); if self.kernel == 1 { 0 } else { rows * hw }];
        for n in 0..bs {
            let img = &x.data()[n * cin * hw..(n + 1) * cin * hw];
            let col: &[T] = if self.kernel == 1 {
                img
            } else {
                self.im2col(img, cin, h, wd, &mut col);
                &col
            };
            let out_n = &mut out[n * cout * hw..(n + 1) * cout * hw];
            for (o, dst) in out_n.chunks_exact_mut(hw).enumerate() {
                dst.fill(b.data()[o]);
            }
            // Four output channels per sweep over the column matrix; each
            // output element still accumulates rows in ascending order.
            for (blk, dsts) in out_n.chunks_mut(4 * hw).enumerate() {
                let o0 = blk * 4;
                let nb = dsts.len() / hw;
                let mut parts: Vec<&mut [T]> = dsts.chunks_exact_mut(hw).collect();
                for r in 0..rows {
                    let src = &col[r * hw..(r + 1) * hw];
                    for (j, dst) in parts.iter_mut().enumerate().take(nb) {
                        axpy(w.data()[(o0 + j) * rows + r], src, dst);
                    }
                }
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let [bs, cin, h, wd] = x.dims4()?;
        let cout = w.shape()[0];
        let hw = h * wd;
        let rows = cin * self.kernel * self.kernel;
        let g = grad.data();

        let mut dx = needs[0].then(|| vec![T::zero(); x.numel()]);
        let mut dw = needs[1].then(|| vec![T::zero(); w.numel()]);
        let mut db = needs[2].then(|| vec![T::zero(); cout]);
        let mut col = vec![T::zero(); if self.kernel == 1 { 0 } else { rows * hw }];
        let mut dcol = vec![T::zero(); if dx.is_some() && self.kernel != 1 { rows * hw } else { 0 }];

        for n in 0..bs {
            let img = &x.data()[n * cin * hw..(n + 1) * cin * hw];
            let gn = &g[n * cout * hw..(n + 1) * cout * hw];
            if let Some(db) = db.as_mut() {
                for o in 0..cout {
                    db[o] = db[o] + gn[o * hw..(o + 1) * hw].iter().fold(T::zero(), |a, &v| a + v);
                }
            }
            if let Some(dw) = dw.as_mut() {
                let col: &[T] = if self.kernel == 1 {
                    img
                } else {
                    self.im2col(img, cin, h, wd, &mut col);
                    &col
                };
                for o in 0..cout {
                    let go = &gn[o * hw..(o + 1) * hw];
                    for r in 0..rows {
                        let i = o * rows + r;
                        dw[i] = dw[i] + dot(go, &col[r * hw..(r + 1) * hw]);
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dimg = &mut dx[n * cin * hw..(n + 1) * cin * hw];
                if self.kernel == 1 {
                    for o in 0..cout {
                        let go = &gn[o * hw..(o + 1) * hw];
                        for c in 0..cin {
                            axpy(w.data()[o * cin + c], go, &mut dimg[c * hw..(c + 1) * hw]);
                        }
                    }
                } else {
                    for (r, drow) in dcol.chunks_exact_mut(hw).enumerate() {
                        drow.fill(T::zero());
                        for o in 0..cout {
                            axpy(w.data()[o * rows + r], &gn[o * hw..(o + 1) * hw], drow);
                        }
                    }
                    self.col2im(&dcol, cin, h, wd, dimg);
                }
            }
        }
        Ok(vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
            db.map(|d| Tensor::from_parts(vec![cout], d)),
        ])
    }
}

/// Learned ×2 upsampling: 2×2 kernel, stride 2, no padding.
/// `out[b, o, 2y+dy, 2x+dx] = bias[o] + Σ_c w[o, c, dy, dx] · in[b, c, y, x]`.
#[derive(Clone, Copy, Debug)]
pub struct TransposedConv2x2;

impl<T: Scalar> Op<T> for TransposedConv2x2 {
    fn kind(&self) -> &'static str {
        "transposed_conv2x2"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let [x, w, b] = inputs else {
            return Err(Error::shape("transposed conv takes (input, weight, bias)"));
        };
        check_conv_inputs("transposed_conv2x2", x, w, b, 2)?;
        Ok(vec![x[0], w[0], 2 * x[2], 2 * x[3]])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        let out_shape = Op::<T>::output_shape(self, &shapes)?;
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let [bs, cin, h, wd] = x.dims4()?;
        let cout = out_shape[1];
        let (hw, ow) = (h * wd, 2 * wd);
        let mut out = vec![T::zero(); bs * cout * 4 * hw];
        let mut tmp = vec![T::zero(); hw];
        for n in 0..bs {
            let img = &x.data()[n * cin * hw..(n + 1) * cin * hw];
            for o in 0..cout {
                let plane = &mut out[(n * cout + o) * 4 * hw..][..4 * hw];
                for dy in 0..2 {
                    for dx in 0..2 {
                        tmp.fill(b.data()[o]);
                        for c in 0..cin {
                            let wv = w.data()[((o * cin + c) * 2 + dy) * 2 + dx];
                            axpy(wv, &img[c * hw..(c + 1) * hw], &mut tmp);
                        }
                        for y in 0..h {
                            let row = &mut plane[(2 * y + dy) * ow..][..ow];
                            for x in 0..wd {
                                row[2 * x + dx] = tmp[y * wd + x];
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let [bs, cin, h, wd] = x.dims4()?;
        let cout = w.shape()[0];
        let (hw, ow) = (h * wd, 2 * wd);
        let g = grad.data();

        let mut dx = needs[0].then(|| vec![T::zero(); x.numel()]);
        let mut dw = needs[1].then(|| vec![T::zero(); w.numel()]);
        let mut db = needs[2].then(|| vec![T::zero(); cout]);
        let mut gs = vec![T::zero(); hw];
        for n in 0..bs {
            let img = &x.data()[n * cin * hw..(n + 1) * cin * hw];
            for o in 0..cout {
                let plane = &g[(n * cout + o) * 4 * hw..][..4 * hw];
                if let Some(db) = db.as_mut() {
                    db[o] = db[o] + plane.iter().fold(T::zero(), |a, &v| a + v);
                }
                for dy in 0..2 {
                    for dx_ in 0..2 {
                        for y in 0..h {
                            let row = &plane[(2 * y + dy) * ow..][..ow];
                            for xx in 0..wd {
                                gs[y * wd + xx] = row[2 * xx + dx_];
                            }
                        }
                        for c in 0..cin {
                            let wi = ((o * cin + c) * 2 + dy) * 2 + dx_;
                            if let Some(dw) = dw.as_mut() {
                                dw[wi] = dw[wi] + dot(&gs, &img[c * hw..(c + 1) * hw]);
                            }
                            if let Some(dx) = dx.as_mut() {
                                axpy(w.data()[wi], &gs, &mut dx[(n * cin + c) * hw..][..hw]);
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
            db.map(|d| Tensor::from_parts(vec![cout], d)),
        ])
    }
}
