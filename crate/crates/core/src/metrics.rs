//! PSNR, confusion matrices, IoU and pixel accuracy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `10·log10(max² / MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("psnr of {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::invalid("psnr of empty images"));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = sse / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// `counts[g * k + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix must be square"));
        }
        Ok(Self {
            k,
            counts: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Tally `pred` against `gt`, skipping pixels whose ground truth is `ignore`.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= self.k || p >= self.k {
                return Err(Error::invalid(format!(
                    "label {} out of range for {} classes",
                    g.max(p),
                    self.k
                )));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape(format!("merging {}-class and {}-class matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &[u8], gt: &[u8], k: usize, ignore: u8) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(pred, gt, ignore)?;
    Ok(cm)
}

/// Per-class IoU (`None` when the class is absent from prediction and
/// ground truth) and their mean over present classes.
pub fn miou(cm: &ConfusionMatrix) -> Result<(f64, Vec<Option<f64>>)> {
    let k = cm.k;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..k).map(|g| cm.get(g, c)).sum();
            let denom = row + col - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("mIoU undefined: every class is absent"));
    }
    Ok((present.iter().sum::<f64>() / present.len() as f64, per_class))
}

pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("pixel accuracy undefined: no evaluated pixels"));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// `Σ wᵢ·Lᵢ` over `(loss, weight)` pairs.
pub fn joint_loss(terms: &[(f64, f64)]) -> Result<f64> {
    if let Some(&(_, w)) = terms.iter().find(|(_, w)| !(*w >= 0.0)) {
        return Err(Error::invalid(format!("loss weight must be >= 0, got {w}")));
    }
    Ok(terms.iter().map(|(l, w)| l * w).sum())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr_db: Option<f64>,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
}

pub const CSV_HEADER: &str = "run_id,sigma,connectivity,pathway,psnr_db,miou,pixel_acc,per_class_iou";

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) => format!("{x:.6}"),
        None => String::new(),
    }
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let (m, per_class) = miou(cm)?;
        Ok(Self {
            psnr_db: None,
            miou: Some(m),
            pixel_accuracy: Some(pixel_accuracy(cm)?),
            per_class_iou: per_class,
        })
    }

    pub fn from_psnr(psnr_db: f64) -> Self {
        Self {
            psnr_db: Some(psnr_db),
            ..Self::default()
        }
    }

    /// One CSV row; absent classes are written as `absent`.
    pub fn csv_row(&self, run_id: &str, sigma: f64, connectivity: &str, pathway: &str) -> String {
        let mut per = String::new();
        for (i, v) in self.per_class_iou.iter().enumerate() {
            if i > 0 {
                per.push(';');
            }
            match v {
                Some(x) => write!(per, "{x:.6}").unwrap(),
                None => per.push_str("absent"),
            }
        }
        format!(
            "{run_id},{sigma},{connectivity},{pathway},{},{},{},{per}",
            fmt_opt(self.psnr_db),
            fmt_opt(self.miou),
            fmt_opt(self.pixel_accuracy)
        )
    }
}
