//! Training losses, overlap metrics and Bland-Altman agreement statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;
/// Default BCE weight of the hybrid loss.
pub const DEFAULT_OMEGA: f64 = 0.5;

/// A scalar loss with its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

fn check_pred(pred: &Tensor, target: &BinaryMask) -> Result<()> {
    let shape = pred.shape();
    let (h, w) = target.dims();
    let spatial_ok = shape.len() >= 2 && shape[shape.len() - 2..] == [h, w];
    if !spatial_ok || pred.len() != h * w {
        return Err(Error::shape(format!(
            "prediction {shape:?} does not match mask {h}x{w}"
        )));
    }
    Ok(())
}

fn target_value(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Mean binary cross-entropy over pixels. The gradient is evaluated at the
/// clamped prediction.
pub fn bce_loss(pred: &Tensor, target: &BinaryMask) -> Result<LossValue> {
    check_pred(pred, target)?;
    let n = pred.len() as f64;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.bits()) {
        let p = (p as f64).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let y = target_value(t);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.push(((-y / p + (1.0 - y) / (1.0 - p)) / n) as f32);
    }
    Ok(LossValue {
        value: total / n,
        grad: Tensor::new(pred.shape(), grad)?,
    })
}

/// Soft Dice loss `1 - (2 sum(p*y) + s) / (sum(p) + sum(y) + s)`.
pub fn dsc_loss(pred: &Tensor, target: &BinaryMask) -> Result<LossValue> {
    check_pred(pred, target)?;
    let mut inter = 0.0f64;
    let mut total = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.bits()) {
        let y = target_value(t);
        inter += p as f64 * y;
        total += p as f64 + y;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = total + DICE_SMOOTH;
    let grad = target
        .bits()
        .iter()
        .map(|&t| (-(2.0 * target_value(t) * den - num) / (den * den)) as f32)
        .collect();
    Ok(LossValue {
        value: 1.0 - num / den,
        grad: Tensor::new(pred.shape(), grad)?,
    })
}

/// Combines two component losses as `omega * a + (1 - omega) * b`.
pub fn combine(a: &LossValue, b: &LossValue, omega: f64) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::config(format!("omega {omega} outside [0, 1]")));
    }
    if a.grad.shape() != b.grad.shape() {
        return Err(Error::shape("component gradients differ in shape"));
    }
    let grad = a
        .grad
        .data()
        .iter()
        .zip(b.grad.data())
        .map(|(&ga, &gb)| (omega * ga as f64 + (1.0 - omega) * gb as f64) as f32)
        .collect();
    Ok(LossValue {
        value: omega * a.value + (1.0 - omega) * b.value,
        grad: Tensor::new(a.grad.shape(), grad)?,
    })
}

/// `omega * BCE + (1 - omega) * DSCLoss`.
pub fn hybrid_loss(pred: &Tensor, target: &BinaryMask, omega: f64) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::config(format!("omega {omega} outside [0, 1]")));
    }
    combine(&bce_loss(pred, target)?, &dsc_loss(pred, target)?, omega)
}

/// Hybrid loss averaged over a Nx1xHxW batch; the gradient carries the 1/N.
pub fn batch_hybrid_loss(pred: &Tensor, targets: &[BinaryMask], omega: f64) -> Result<LossValue> {
    let &[n, 1, h, w] = pred.shape() else {
        return Err(Error::shape(format!("expected Nx1xHxW, got {:?}", pred.shape())));
    };
    if targets.len() != n {
        return Err(Error::shape(format!("{n} predictions but {} targets", targets.len())));
    }
    let plane = h * w;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (i, target) in targets.iter().enumerate() {
        let p = Tensor::new(&[h, w], pred.data()[i * plane..(i + 1) * plane].to_vec())?;
        let l = hybrid_loss(&p, target, omega)?;
        value += l.value;
        grad.extend(l.grad.data().iter().map(|&g| (g as f64 / n as f64) as f32));
    }
    Ok(LossValue {
        value: value / n as f64,
        grad: Tensor::new(pred.shape(), grad)?,
    })
}

/// Pixel confusion counts of a prediction against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, truth: &BinaryMask) -> Result<Confusion> {
        pred.check_same(truth)?;
        let mut c = Confusion::default();
        for (&p, &t) in pred.bits().iter().zip(truth.bits()) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `2|A n B| / (|A| + |B|)`, 1.0 when both sets are empty.
    pub fn dsc(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }

    pub fn recall(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fp)
    }
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(a, b)?.dsc())
}

/// `(TP/(TP+FN), TP/(TP+FP))`, each 1.0 when its denominator is zero.
pub fn recall_precision(pred: &BinaryMask, truth: &BinaryMask) -> Result<(f64, f64)> {
    let c = Confusion::of(pred, truth)?;
    Ok((c.recall(), c.precision()))
}

/// Overlap and size indicators for one structure of one frame or case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dsc: f64,
    pub recall: f64,
    pub precision: f64,
    /// Mean cross-sectional area per frame.
    pub area_mm2: f64,
    pub volume_mm3: f64,
    pub burden_index: f64,
}

impl MetricsRecord {
    pub fn from_confusion(c: Confusion) -> Self {
        MetricsRecord {
            dsc: c.dsc(),
            recall: c.recall(),
            precision: c.precision(),
            area_mm2: 0.0,
            volume_mm3: 0.0,
            burden_index: 0.0,
        }
    }
}

/// Limits of agreement between paired measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanResult {
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
    /// `(mean of pair, auto - manual)` per pair.
    pub points: Vec<(f64, f64)>,
    pub fraction_within: f64,
}

pub const LIMIT_Z: f64 = 1.96;

/// Bland-Altman statistics of `auto - manual` with a sample (n-1) SD.
pub fn bland_altman(manual: &[f64], auto: &[f64]) -> Result<BlandAltmanResult> {
    if manual.len() != auto.len() {
        return Err(Error::shape(format!(
            "{} manual vs {} automatic values",
            manual.len(),
            auto.len()
        )));
    }
    let n = manual.len();
    if n < 2 {
        return Err(Error::config(format!("Bland-Altman needs at least 2 pairs, got {n}")));
    }
    let points: Vec<(f64, f64)> = manual
        .iter()
        .zip(auto)
        .map(|(&m, &a)| ((m + a) / 2.0, a - m))
        .collect();
    let mean_diff = points.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let var = points.iter().map(|p| (p.1 - mean_diff).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd_diff = var.sqrt();
    let lower_limit = mean_diff - LIMIT_Z * sd_diff;
    let upper_limit = mean_diff + LIMIT_Z * sd_diff;
    let within = points
        .iter()
        .filter(|p| p.1 >= lower_limit && p.1 <= upper_limit)
        .count();
    Ok(BlandAltmanResult {
        mean_diff,
        sd_diff,
        lower_limit,
        upper_limit,
        points,
        fraction_within: within as f64 / n as f64,
    })
}
