//! Spatial resampling: 2×2 max pooling and parameter-free ×2 bilinear upsampling.

use crate::error::{Error, Result};
use crate::graph::Op;
use crate::tensor::{Scalar, Tensor};

fn one_4d(kind: &str, inputs: &[&[usize]]) -> Result<[usize; 4]> {
    match inputs {
        [[b, c, h, w]] => Ok([*b, *c, *h, *w]),
        _ => Err(Error::shape(format!("{kind} takes a single 4-D input"))),
    }
}

/// 2×2 max pooling, stride 2. Gradient goes to the window's argmax; ties go
/// to the first element in row-major order.
#[derive(Clone, Copy, Debug)]
pub struct MaxPool2;

impl MaxPool2 {
    /// Offset of the winning element within the 2×2 window.
    #[inline]
    fn argmax<T: Scalar>(plane: &[T], w: usize, y: usize, x: usize) -> usize {
        let base = 2 * y * w + 2 * x;
        let candidates = [base, base + 1, base + w, base + w + 1];
        let mut best = candidates[0];
        for &c in &candidates[1..] {
            if plane[c] > plane[best] {
                best = c;
            }
        }
        best
    }
}

impl<T: Scalar> Op<T> for MaxPool2 {
    fn kind(&self) -> &'static str {
        "maxpool2"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let [b, c, h, w] = one_4d("maxpool2", inputs)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2 needs even spatial dims, got H={h}, W={w}"
            )));
        }
        Ok(vec![b, c, h / 2, w / 2])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let out_shape = Op::<T>::output_shape(self, &[inputs[0].shape()])?;
        let x = inputs[0];
        let [b, c, h, w] = x.dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in x.data().chunks_exact(h * w) {
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(plane[Self::argmax(plane, w, y, xx)]);
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
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let [_, _, h, w] = x.dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        let mut dx = vec![T::zero(); x.numel()];
        for ((plane, dplane), gplane) in x
            .data()
            .chunks_exact(h * w)
            .zip(dx.chunks_exact_mut(h * w))
            .zip(grad.data().chunks_exact(oh * ow))
        {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = Self::argmax(plane, w, y, xx);
                    dplane[i] = dplane[i] + gplane[y * ow + xx];
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

/// Interpolation taps along one axis: output `i` reads `(lo, hi, frac)`.
fn taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear ×2 upsampling with half-pixel centres and edge clamping: output
/// `(y, x)` samples source coordinate `((y + 0.5) / 2 − 0.5, (x + 0.5) / 2 − 0.5)`.
#[derive(Clone, Copy, Debug)]
pub struct UpsampleBilinear2;

impl<T: Scalar> Op<T> for UpsampleBilinear2 {
    fn kind(&self) -> &'static str {
        "upsample_bilinear2"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let [b, c, h, w] = one_4d("upsample_bilinear2", inputs)?;
        Ok(vec![b, c, 2 * h, 2 * w])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let out_shape = Op::<T>::output_shape(self, &[inputs[0].shape()])?;
        let x = inputs[0];
        let [_, _, h, w] = x.dims4()?;
        let (ty, tx) = (taps(h), taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); x.numel() * 4];
        let mut rows = vec![T::zero(); h * ow];
        for (plane, oplane) in x.data().chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
            // Horizontal pass into `rows`, then vertical pass.
            for y in 0..h {
                let src = &plane[y * w..(y + 1) * w];
                for (ox, &(lo, hi, f)) in tx.iter().enumerate() {
                    let f = T::from_f64(f);
                    rows[y * ow + ox] = src[lo] * (T::one() - f) + src[hi] * f;
                }
            }
            for (oy, &(lo, hi, f)) in ty.iter().enumerate() {
                let f = T::from_f64(f);
                let dst = &mut oplane[oy * ow..(oy + 1) * ow];
                let (a, b) = (&rows[lo * ow..(lo + 1) * ow], &rows[hi * ow..(hi + 1) * ow]);
                for ((d, &va), &vb) in dst.iter_mut().zip(a).zip(b) {
                    *d = va * (T::one() - f) + vb * f;
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
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let [_, _, h, w] = x.dims4()?;
        let (ty, tx) = (taps(h), taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let mut dx = vec![T::zero(); x.numel()];
        let mut rows = vec![T::zero(); h * ow];
        for (gplane, dplane) in grad.data().chunks_exact(oh * ow).zip(dx.chunks_exact_mut(h * w)) {
            rows.fill(T::zero());
            for (oy, &(lo, hi, f)) in ty.iter().enumerate() {
                let f = T::from_f64(f);
                let g = &gplane[oy * ow..(oy + 1) * ow];
                for (ox, &gv) in g.iter().enumerate() {
                    rows[lo * ow + ox] = rows[lo * ow + ox] + gv * (T::one() - f);
                    rows[hi * ow + ox] = rows[hi * ow + ox] + gv * f;
                }
            }
            for y in 0..h {
                let r = &rows[y * ow..(y + 1) * ow];
                let d = &mut dplane[y * w..(y + 1) * w];
                for (ox, &(lo, hi, f)) in tx.iter().enumerate() {
                    let f = T::from_f64(f);
                    d[lo] = d[lo] + r[ox] * (T::one() - f);
                    d[hi] = d[hi] + r[ox] * f;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}
