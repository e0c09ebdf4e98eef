//! Differentiable operations used by U-Net style models.

mod conv;
mod loss;
mod resample;

pub use conv::{Conv2d, ConvParams, ConvShape, TransposedConv2x2};
pub use loss::{Mse, SoftmaxCrossEntropy, WeightedSum, IGNORE_INDEX};
pub use resample::{MaxPool2, UpsampleBilinear2};

use crate::error::{Error, Result};
use crate::graph::Op;
use crate::tensor::{Scalar, Tensor};

fn same_shape2(kind: &str, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    match inputs {
        [a, b] if a == b => Ok(a.to_vec()),
        [a, b] => Err(Error::shape(format!("{kind}: {a:?} vs {b:?}"))),
        _ => Err(Error::shape(format!("{kind} takes two inputs"))),
    }
}

fn single(kind: &str, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    match inputs {
        [a] => Ok(a.to_vec()),
        _ => Err(Error::shape(format!("{kind} takes one input"))),
    }
}

/// Rectified linear unit. The subgradient at exactly 0 is 0.
#[derive(Clone, Copy, Debug)]
pub struct Relu;

impl<T: Scalar> Op<T> for Relu {
    fn kind(&self) -> &'static str {
        "relu"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        single("relu", inputs)
    }
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(inputs[0].map(|v| if v > T::zero() { v } else { T::zero() }))
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let g = inputs[0].zip_map(grad, |x, g| if x > T::zero() { g } else { T::zero() })?;
        Ok(vec![Some(g)])
    }
}

/// Elementwise sum of two equally shaped tensors.
#[derive(Clone, Copy, Debug)]
pub struct Add;

impl<T: Scalar> Op<T> for Add {
    fn kind(&self) -> &'static str {
        "add"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        same_shape2("add", inputs)
    }
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        inputs[0].zip_map(inputs[1], |a, b| a + b)
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(needs.iter().map(|&n| n.then(|| grad.clone())).collect())
    }
}

/// Elementwise product.
#[derive(Clone, Copy, Debug)]
pub struct Mul;

impl<T: Scalar> Op<T> for Mul {
    fn kind(&self) -> &'static str {
        "mul"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        same_shape2("mul", inputs)
    }
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        inputs[0].zip_map(inputs[1], |a, b| a * b)
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        Ok(vec![
            if needs[0] { Some(grad.zip_map(b, |g, v| g * v)?) } else { None },
            if needs[1] { Some(grad.zip_map(a, |g, v| g * v)?) } else { None },
        ])
    }
}

/// Multiplication by a fixed constant.
#[derive(Clone, Copy, Debug)]
pub struct Scale(pub f64);

impl<T: Scalar> Op<T> for Scale {
    fn kind(&self) -> &'static str {
        "scale"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        single("scale", inputs)
    }
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let s = T::from_f64(self.0);
        Ok(inputs[0].map(|v| v * s))
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let s = T::from_f64(self.0);
        Ok(vec![Some(grad.map(|g| g * s))])
    }
}

/// Sum of all elements, producing a `[1]` tensor.
#[derive(Clone, Copy, Debug)]
pub struct Sum;

impl<T: Scalar> Op<T> for Sum {
    fn kind(&self) -> &'static str {
        "sum"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        single("sum", inputs).map(|_| vec![1])
    }
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(inputs[0].sum()))
    }
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape().to_vec(), grad.item()))])
    }
}

/// Channel concatenation of 4-D tensors, in input order.
#[derive(Clone, Copy, Debug)]
pub struct ConcatChannels;

impl<T: Scalar> Op<T> for ConcatChannels {
    fn kind(&self) -> &'static str {
        "concat_channels"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat_channels needs at least one input"))?;
        if first.len() != 4 {
            return Err(Error::shape(format!("concat_channels: input {first:?} is not 4-D")));
        }
        let mut channels = 0;
        for s in inputs {
            if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::shape(format!(
                    "concat_channels: {s:?} does not match batch/spatial dims of {first:?}"
                )));
            }
            channels += s[1];
        }
        Ok(vec![first[0], channels, first[2], first[3]])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        let out_shape = Op::<T>::output_shape(self, &shapes)?;
        let (b, hw) = (out_shape[0], out_shape[2] * out_shape[3]);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for n in 0..b {
            for t in inputs {
                let block = t.shape()[1] * hw;
                out.extend_from_slice(&t.data()[n * block..(n + 1) * block]);
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let [b, total, h, w] = grad.dims4()?;
        let hw = h * w;
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (t, &need) in inputs.iter().zip(needs) {
            let c = t.shape()[1];
            if need {
                let mut d = Vec::with_capacity(t.numel());
                for n in 0..b {
                    let start = (n * total + offset) * hw;
                    d.extend_from_slice(&grad.data()[start..start + c * hw]);
                }
                out.push(Some(Tensor::from_parts(t.shape().to_vec(), d)));
            } else {
                out.push(None);
            }
            offset += c;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_examples() {
        let a = Tensor::<f32>::from_vec(vec![1.0, 2.0]);
        let z = Tensor::<f32>::zeros(vec![2]);
        assert_eq!(Add.forward(&[&z, &a]).unwrap(), a);
        assert_eq!(Add.forward(&[&a, &a]).unwrap().data(), &[2.0, 4.0]);
        let b = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(Add.forward(&[&a, &b]).is_err());
    }

    #[test]
    fn concat_layout_and_slicing() {
        let a = Tensor::<f32>::new(vec![2, 2, 1, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let b = Tensor::<f32>::new(vec![2, 3, 1, 2], (100..112).map(|v| v as f32).collect()).unwrap();
        let y = ConcatChannels.forward(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[2, 5, 1, 2]);
        assert_eq!(&y.data()[..4], &a.data()[..4]);
        assert_eq!(&y.data()[4..10], &b.data()[..6]);
        assert_eq!(&y.data()[10..14], &a.data()[4..]);

        let single = ConcatChannels.forward(&[&a]).unwrap();
        assert_eq!(single, a);

        let g = Tensor::<f32>::ones(vec![2, 5, 1, 2]);
        let grads = ConcatChannels.backward(&[&a, &b], &y, &g, &[true, true]).unwrap();
        assert_eq!(grads[0].as_ref().unwrap(), &Tensor::ones(vec![2, 2, 1, 2]));
        assert_eq!(grads[1].as_ref().unwrap(), &Tensor::ones(vec![2, 3, 1, 2]));

        let bad = Tensor::<f32>::zeros(vec![2, 1, 2, 2]);
        assert!(ConcatChannels.forward(&[&a, &bad]).is_err());
    }
}
