//! Scalar losses and their weighted combination.

use crate::error::{Error, Result};
use crate::graph::Op;
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from loss and metrics.
pub const IGNORE_INDEX: usize = 255;

/// Mean softmax cross-entropy over non-ignored pixels.
///
/// Inputs are logits `[B, K, H, W]` and a label map `[B, H, W]` holding exact
/// integer class ids (stored in the tensor's float type). With no counted
/// pixels the loss is 0 and so is its gradient.
#[derive(Clone, Copy, Debug)]
pub struct SoftmaxCrossEntropy {
    pub ignore_index: usize,
}

impl Default for SoftmaxCrossEntropy {
    fn default() -> Self {
        Self {
            ignore_index: IGNORE_INDEX,
        }
    }
}

impl SoftmaxCrossEntropy {
    /// Validated class id per pixel; `None` for ignored pixels.
    fn labels<T: Scalar>(&self, labels: &Tensor<T>, classes: usize) -> Result<Vec<Option<usize>>> {
        labels
            .data()
            .iter()
            .map(|&v| {
                let f = v.to_f64();
                if f < 0.0 || f.fract() != 0.0 {
                    return Err(Error::invalid(format!("label {f} is not a class id")));
                }
                let l = f as usize;
                if l == self.ignore_index {
                    Ok(None)
                } else if l >= classes {
                    Err(Error::invalid(format!("label {l} out of range for {classes} classes")))
                } else {
                    Ok(Some(l))
                }
            })
            .collect()
    }

    /// Per-pixel loss and softmax probabilities, plus the counted pixel total.
    fn evaluate<T: Scalar>(&self, logits: &Tensor<T>, labels: &Tensor<T>, want_probs: bool) -> Result<(T, Vec<T>, usize)> {
        let [b, k, h, w] = logits.dims4()?;
        let hw = h * w;
        let labels = self.labels(labels, k)?;
        let mut probs = if want_probs { vec![T::zero(); logits.numel()] } else { Vec::new() };
        let mut total = T::zero();
        let mut count = 0usize;
        let z = logits.data();
        for n in 0..b {
            for p in 0..hw {
                let Some(label) = labels[n * hw + p] else {
                    continue;
                };
                let at = |c: usize| z[(n * k + c) * hw + p];
                let max = (0..k).map(at).fold(T::neg_infinity(), T::max);
                let sum = (0..k).fold(T::zero(), |acc, c| acc + (at(c) - max).exp());
                let log_sum = sum.ln();
                total = total + (log_sum - (at(label) - max));
                count += 1;
                if want_probs {
                    for c in 0..k {
                        probs[(n * k + c) * hw + p] = (at(c) - max - log_sum).exp();
                    }
                }
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_f64(count as f64)
        };
        Ok((loss, probs, count))
    }
}

impl<T: Scalar> Op<T> for SoftmaxCrossEntropy {
    fn kind(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match inputs {
            [[b, _, h, w], l] if l[..] == [*b, *h, *w] => Ok(vec![1]),
            [x, l] => Err(Error::shape(format!(
                "cross entropy: logits {x:?} incompatible with labels {l:?}"
            ))),
            _ => Err(Error::shape("cross entropy takes (logits, labels)")),
        }
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        Op::<T>::output_shape(self, &shapes)?;
        let (loss, _, _) = self.evaluate(inputs[0], inputs[1], false)?;
        Ok(Tensor::scalar(loss))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        if needs[1] {
            return Err(Error::invalid("labels are not differentiable"));
        }
        let (logits, labels) = (inputs[0], inputs[1]);
        let [b, k, h, w] = logits.dims4()?;
        let hw = h * w;
        let (_, mut probs, count) = self.evaluate(logits, labels, true)?;
        if count > 0 {
            let scale = grad.item() / T::from_f64(count as f64);
            let ids = self.labels(labels, k)?;
            for n in 0..b {
                for p in 0..hw {
                    if let Some(l) = ids[n * hw + p] {
                        let i = (n * k + l) * hw + p;
                        probs[i] = probs[i] - T::one();
                    }
                }
            }
            for v in probs.iter_mut() {
                *v = *v * scale;
            }
        }
        Ok(vec![Some(Tensor::from_parts(logits.shape().to_vec(), probs)), None])
    }
}

/// Mean squared error over all elements.
#[derive(Clone, Copy, Debug)]
pub struct Mse;

impl<T: Scalar> Op<T> for Mse {
    fn kind(&self) -> &'static str {
        "mse"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match inputs {
            [a, b] if a == b => Ok(vec![1]),
            [a, b] => Err(Error::shape(format!("mse: {a:?} vs {b:?}"))),
            _ => Err(Error::shape("mse takes (pred, target)")),
        }
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        Op::<T>::output_shape(self, &shapes)?;
        let (p, t) = (inputs[0], inputs[1]);
        let sq = p
            .data()
            .iter()
            .zip(t.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        Ok(Tensor::scalar(sq / T::from_f64(p.numel() as f64)))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (p, t) = (inputs[0], inputs[1]);
        let scale = grad.item() * T::from_f64(2.0 / p.numel() as f64);
        let d = p.zip_map(t, |a, b| (a - b) * scale)?;
        let dt = needs[1].then(|| d.map(|v| -v));
        Ok(vec![needs[0].then_some(d), dt])
    }
}

/// `Σ wᵢ·xᵢ` over scalar inputs.
#[derive(Clone, Debug)]
pub struct WeightedSum {
    pub weights: Vec<f64>,
}

impl<T: Scalar> Op<T> for WeightedSum {
    fn kind(&self) -> &'static str {
        "weighted_sum"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        if inputs.len() != self.weights.len() {
            return Err(Error::shape(format!(
                "weighted_sum: {} inputs for {} weights",
                inputs.len(),
                self.weights.len()
            )));
        }
        if let Some(s) = inputs.iter().find(|s| s.iter().product::<usize>() != 1) {
            return Err(Error::shape(format!("weighted_sum: input {s:?} is not scalar")));
        }
        Ok(vec![1])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        Op::<T>::output_shape(self, &shapes)?;
        let total = inputs
            .iter()
            .zip(&self.weights)
            .fold(T::zero(), |acc, (t, &w)| acc + T::from_f64(w) * t.item());
        Ok(Tensor::scalar(total))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(inputs
            .iter()
            .zip(&self.weights)
            .zip(needs)
            .map(|((t, &w), &n)| n.then(|| Tensor::full(t.shape().to_vec(), grad.item() * T::from_f64(w))))
            .collect())
    }
}
