//! Classification, metric and distillation losses with analytic gradients,
//! plus the EMA-maintained class centers used by the center-triplet loss.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{check_finite, euclidean_distance, log_softmax, softmax, sub, Mat};

/// Loss value together with the gradients it exposes.
///
/// `grad_features` holds one entry per feature input of the loss (anchor,
/// positive, negative for the triplet loss; the sample for the CT loss) and
/// is empty for logit losses. `grad_logits` is empty for metric losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValueAndGrads {
    pub value: f64,
    pub grad_features: Vec<Vec<f64>>,
    pub grad_logits: Vec<f64>,
}

impl LossValueAndGrads {
    fn logits(value: f64, grad: Vec<f64>) -> Self {
        LossValueAndGrads { value, grad_features: Vec::new(), grad_logits: grad }
    }
}

/// `-log softmax(logits)[label]`, gradient `softmax - one_hot`.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<LossValueAndGrads> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!("label {label} outside {} logits", logits.len())));
    }
    let logp = log_softmax(logits, 1.0)?;
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    Ok(LossValueAndGrads::logits(-logp[label], grad))
}

/// Mean CE over a batch of logit rows; the returned gradient is already
/// divided by the batch size.
pub fn ce_batch(logits: &Mat, labels: &[usize]) -> Result<(f64, Mat)> {
    check_dim(logits.rows(), labels.len())?;
    let n = labels.len().max(1) as f64;
    let mut grad = Mat::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let l = ce_loss(logits.row(r), y)?;
        total += l.value;
        for (g, v) in grad.row_mut(r).iter_mut().zip(&l.grad_logits) {
            *g = v / n;
        }
    }
    Ok((total / n, grad))
}

fn unit_direction(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let diff = sub(a, b);
    let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if dist == 0.0 {
        (0.0, vec![0.0; diff.len()])
    } else {
        (dist, diff.into_iter().map(|v| v / dist).collect())
    }
}

fn validate_margin(margin: f64) -> Result<()> {
    if margin >= 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("margin must be a finite value >= 0, got {margin}")))
    }
}

/// `max(0, m + ‖a − p‖ − ‖a − n‖)` with gradients for anchor, positive, negative.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<LossValueAndGrads> {
    check_dim(anchor.len(), positive.len())?;
    check_dim(anchor.len(), negative.len())?;
    validate_margin(margin)?;
    let (d_ap, u_ap) = unit_direction(anchor, positive);
    let (d_an, u_an) = unit_direction(anchor, negative);
    let arg = margin + d_ap - d_an;
    let dim = anchor.len();
    if arg <= 0.0 {
        return Ok(LossValueAndGrads {
            value: 0.0,
            grad_features: vec![vec![0.0; dim]; 3],
            grad_logits: Vec::new(),
        });
    }
    let ga: Vec<f64> = u_ap.iter().zip(&u_an).map(|(p, n)| p - n).collect();
    let gp: Vec<f64> = u_ap.iter().map(|v| -v).collect();
    let gn = u_an;
    Ok(LossValueAndGrads { value: arg, grad_features: vec![ga, gp, gn], grad_logits: Vec::new() })
}

/// Per-class centers maintained by an exponential moving average of batch
/// class means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterBank {
    centers: Vec<Vec<f64>>,
    initialized: Vec<bool>,
    rate: f64,
}

impl CenterBank {
    pub fn new(num_classes: usize, dim: usize, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Config(format!("center EMA rate must lie in (0, 1], got {rate}")));
        }
        Ok(CenterBank {
            centers: vec![vec![0.0; dim]; num_classes],
            initialized: vec![false; num_classes],
            rate,
        })
    }

    /// Bank with every center set explicitly.
    pub fn from_centers(centers: Vec<Vec<f64>>, rate: f64) -> Result<Self> {
        let dim = centers.first().map_or(0, Vec::len);
        let mut bank = CenterBank::new(centers.len(), dim, rate)?;
        for (i, c) in centers.into_iter().enumerate() {
            check_dim(dim, c.len())?;
            check_finite(&c)?;
            bank.centers[i] = c;
            bank.initialized[i] = true;
        }
        Ok(bank)
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn center(&self, class: usize) -> Option<&[f64]> {
        self.initialized.get(class).copied().unwrap_or(false).then(|| self.centers[class].as_slice())
    }

    pub fn initialized_count(&self) -> usize {
        self.initialized.iter().filter(|v| **v).count()
    }

    /// First-seen classes take the batch mean; the rest move by
    /// `c ← (1 − γ)c + γ·mean`.
    pub fn update<R: AsRef<[f64]>>(&mut self, features: &[R], labels: &[usize]) -> Result<()> {
        check_dim(features.len(), labels.len())?;
        let dim = self.centers.first().map_or(0, Vec::len);
        let classes = self.centers.len();
        let mut sums = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        for (f, &y) in features.iter().zip(labels) {
            if y >= classes {
                return Err(Error::InvalidInput(format!("label {y} outside {classes} centers")));
            }
            let f = f.as_ref();
            check_dim(dim, f.len())?;
            for (s, v) in sums[y].iter_mut().zip(f) {
                *s += v;
            }
            counts[y] += 1;
        }
        for y in 0..classes {
            if counts[y] == 0 {
                continue;
            }
            let n = counts[y] as f64;
            let mean = sums[y].iter().map(|s| s / n);
            if self.initialized[y] {
                for (c, m) in self.centers[y].iter_mut().zip(mean) {
                    *c = (1.0 - self.rate) * *c + self.rate * m;
                }
            } else {
                self.centers[y] = mean.collect();
                self.initialized[y] = true;
            }
        }
        Ok(())
    }

    /// Nearest other initialized center to `c_y` as `(class, distance)`;
    /// ties go to the lowest class index.
    pub fn nearest_other(&self, y: usize) -> Option<(usize, f64)> {
        let cy = self.center(y)?;
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.centers.len() {
            if j == y || !self.initialized[j] {
                continue;
            }
            let d = euclidean_distance(cy, &self.centers[j]).ok()?;
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        best
    }
}

/// `max(0, m + ‖f − c_y‖ − min_{j≠y} ‖c_y − c_j‖)`; the gradient reaches `f`
/// only, centers being maintained by [`CenterBank::update`].
pub fn ct_loss(feature: &[f64], label: usize, centers: &CenterBank, margin: f64) -> Result<LossValueAndGrads> {
    validate_margin(margin)?;
    if centers.initialized_count() < 2 {
        return Err(Error::Protocol("center-triplet loss needs at least two initialized centers".into()));
    }
    let cy = centers
        .center(label)
        .ok_or_else(|| Error::Protocol(format!("center of class {label} is not initialized")))?;
    check_dim(cy.len(), feature.len())?;
    let (_, gap) = centers
        .nearest_other(label)
        .ok_or_else(|| Error::Protocol("no other initialized center".into()))?;
    let (dist, dir) = unit_direction(feature, cy);
    let arg = margin + dist - gap;
    let (value, grad) = if arg > 0.0 { (arg, dir) } else { (0.0, vec![0.0; feature.len()]) };
    Ok(LossValueAndGrads { value, grad_features: vec![grad], grad_logits: Vec::new() })
}

/// `L_cls + λ·L_ct`.
pub fn total_base_loss(cls_loss: f64, ct_loss_value: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(cls_loss + lambda * ct_loss_value)
}

/// `L_cls + β·L_distill`.
pub fn total_incremental_loss(replay_ce: f64, kd: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
    }
    Ok(replay_ce + beta * kd)
}

/// Argument order of the distillation divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdDirection {
    /// `KL(teacher ‖ student)`, the teacher distribution as target.
    #[default]
    Forward,
    /// `KL(student ‖ teacher)`.
    Reverse,
}

/// KL divergence between temperature-softened teacher and student
/// distributions, gradient w.r.t. the student logits. No T² rescaling.
pub fn kd_loss(student_logits: &[f64], teacher_logits: &[f64], temperature: f64) -> Result<LossValueAndGrads> {
    kd_loss_directed(student_logits, teacher_logits, temperature, KdDirection::Forward)
}

pub fn kd_loss_directed(
    student_logits: &[f64],
    teacher_logits: &[f64],
    temperature: f64,
    direction: KdDirection,
) -> Result<LossValueAndGrads> {
    check_dim(teacher_logits.len(), student_logits.len())?;
    let log_s = log_softmax(student_logits, temperature)?;
    let log_t = log_softmax(teacher_logits, temperature)?;
    let p_s: Vec<f64> = log_s.iter().map(|v| v.exp()).collect();
    let p_t: Vec<f64> = log_t.iter().map(|v| v.exp()).collect();
    let inv_t = 1.0 / temperature;
    match direction {
        KdDirection::Forward => {
            let value: f64 = p_t
                .iter()
                .zip(log_t.iter().zip(&log_s))
                .map(|(p, (lt, ls))| if *p > 0.0 { p * (lt - ls) } else { 0.0 })
                .sum();
            let grad = p_s.iter().zip(&p_t).map(|(s, t)| inv_t * (s - t)).collect();
            Ok(LossValueAndGrads::logits(value.max(0.0), grad))
        }
        KdDirection::Reverse => {
            let a: Vec<f64> = log_s.iter().zip(&log_t).map(|(ls, lt)| ls - lt).collect();
            let value: f64 = p_s.iter().zip(&a).map(|(p, ai)| if *p > 0.0 { p * ai } else { 0.0 }).sum();
            let grad = p_s.iter().zip(&a).map(|(p, ai)| inv_t * p * (ai - value)).collect();
            Ok(LossValueAndGrads::logits(value.max(0.0), grad))
        }
    }
}

/// Shannon entropy of the softmax of `logits` at temperature 1, computed from
/// log-probabilities.
pub fn logit_entropy(logits: &[f64]) -> Result<f64> {
    let lp = log_softmax(logits, 1.0)?;
    Ok(-lp.iter().map(|l| if l.is_finite() { l.exp() * l } else { 0.0 }).sum::<f64>())
}

/// Softmax probabilities at temperature 1.
pub fn probabilities(logits: &[f64]) -> Result<Vec<f64>> {
    softmax(logits, 1.0)
}
