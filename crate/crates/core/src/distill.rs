//! Temperature-scaled KL distillation over logits and LoRA projections.
//!
//! All losses are `KL(teacher ‖ student)` on `softmax(·/T)`, averaged over
//! samples. The student gradient per sample is `(σ(s/T) − σ(t/T)) / T`
//! wherever the probability clamp inside the log is inactive.

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatedLogits;
use crate::error::{Error, Result};
use crate::lora::ProjectionBundle;
use crate::tensor::Tensor2D;

/// Lower clamp on the student probability inside the log.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the projection term.
    pub lambda_h: f64,
    /// Multiply losses and gradients by `T²`.
    pub t_squared_scaling: bool,
    /// Drop dimensions no client sent from both distributions.
    pub mask_uncovered: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { temperature: 2.0, lambda_h: 0.03, t_squared_scaling: false, mask_uncovered: false }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::input("DistillConfig", "temperature must be positive"));
        }
        if !(self.lambda_h >= 0.0 && self.lambda_h.is_finite()) {
            return Err(Error::input("DistillConfig", "lambda_h must be finite and >= 0"));
        }
        Ok(())
    }

    fn loss_scale(&self) -> f64 {
        if self.t_squared_scaling {
            self.temperature * self.temperature
        } else {
            1.0
        }
    }
}

/// `softmax(v / T)` with max subtraction.
pub fn tempered_softmax(v: &[f64], temperature: f64) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

/// `Σ p·ln(p / max(q, ε))`, with `0·ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", format!("{} vs {}", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_EPS)).ln())
        .sum())
}

/// KL and student gradient for one sample over the dimensions in `keep`
/// (all dimensions when `None`). Gradient entries outside `keep` stay 0.
fn sample_term(teacher: &[f64], student: &[f64], keep: Option<&[bool]>, t: f64, grad: &mut [f64]) -> f64 {
    let (tv, sv): (Vec<f64>, Vec<f64>) = match keep {
        None => (teacher.to_vec(), student.to_vec()),
        Some(k) => teacher
            .iter()
            .zip(student)
            .zip(k)
            .filter(|(_, &keep)| keep)
            .map(|((&a, &b), _)| (a, b))
            .unzip(),
    };
    if tv.is_empty() {
        return 0.0;
    }
    let p = tempered_softmax(&tv, t);
    let q = tempered_softmax(&sv, t);
    let kl = kl_divergence(&p, &q).expect("equal lengths");
    // Entries whose student probability sits under the clamp contribute a
    // constant, so the exact gradient is `(q·P_U − p·1_U) / T` over the
    // unclamped set U. With nothing clamped this is `(q − p) / T`.
    let clamped = |j: usize| p[j] > 0.0 && q[j] < KL_EPS;
    let any_clamped = (0..p.len()).any(clamped);
    let p_unclamped: f64 = (0..p.len()).filter(|&j| !clamped(j)).map(|j| p[j]).sum();
    let mut j = 0;
    for (c, g) in grad.iter_mut().enumerate() {
        if keep.is_none_or(|k| k[c]) {
            *g = if !any_clamped {
                (q[j] - p[j]) / t
            } else if clamped(j) {
                q[j] * p_unclamped / t
            } else {
                (q[j] * p_unclamped - p[j]) / t
            };
            j += 1;
        }
    }
    kl
}

/// Mean-over-samples KL between tempered teacher and student logits, and
/// its gradient w.r.t. the student logits.
pub fn logits_distill_loss(
    teacher: &AggregatedLogits,
    student: &Tensor2D,
    cfg: &DistillConfig,
) -> Result<(f64, Tensor2D)> {
    if teacher.values.shape() != student.shape() {
        return Err(Error::shape(
            "logits_distill_loss",
            format!("teacher {:?} vs student {:?}", teacher.values.shape(), student.shape()),
        ));
    }
    let n = student.rows();
    let mut grad = Tensor2D::zeros(n, student.cols());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut mask = vec![true; student.cols()];
    let mut loss = 0.0;
    for x in 0..n {
        let keep = if cfg.mask_uncovered {
            for (m, &c) in mask.iter_mut().zip(teacher.coverage_row(x)) {
                *m = c > 0;
            }
            Some(mask.as_slice())
        } else {
            None
        };
        loss += sample_term(teacher.values.row(x), student.row(x), keep, cfg.temperature, grad.row_mut(x));
    }
    let scale = cfg.loss_scale();
    let grad = grad.scaled(scale / n as f64);
    Ok((scale * loss / n as f64, grad))
}

/// The same tempered KL applied to projections, summed over layers and
/// averaged over samples.
pub fn projection_distill_loss(
    teacher: &ProjectionBundle,
    student: &ProjectionBundle,
    cfg: &DistillConfig,
) -> Result<(f64, Vec<Tensor2D>)> {
    const OP: &str = "projection_distill_loss";
    if teacher.rank() != student.rank() {
        return Err(Error::input(OP, format!("rank {} vs {}", teacher.rank(), student.rank())));
    }
    if teacher.num_samples() != student.num_samples() || teacher.num_layers() != student.num_layers() {
        return Err(Error::shape(OP, "sample or layer counts differ"));
    }
    let n = student.num_samples();
    let scale = cfg.loss_scale();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(student.num_layers());
    for (tl, sl) in teacher.layers().iter().zip(student.layers()) {
        let mut g = Tensor2D::zeros(n, student.rank());
        for x in 0..n {
            loss += sample_term(tl.row(x), sl.row(x), None, cfg.temperature, g.row_mut(x));
        }
        grads.push(if n == 0 { g } else { g.scaled(scale / n as f64) });
    }
    let loss = if n == 0 { 0.0 } else { scale * loss / n as f64 };
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct DistillLoss {
    /// `logits + λ·projection`
    pub total: f64,
    pub logits: f64,
    pub projection: f64,
    pub d_logits: Tensor2D,
    /// Already multiplied by `λ`; one per student projection layer.
    pub d_projections: Vec<Tensor2D>,
}

/// `L_logits + λ·L_h`. A teacher bundle with no layers contributes nothing
/// (zero loss and gradients).
pub fn total_distill_loss(
    teacher_logits: &AggregatedLogits,
    teacher_h: &ProjectionBundle,
    student_logits: &Tensor2D,
    student_h: &ProjectionBundle,
    cfg: &DistillConfig,
) -> Result<DistillLoss> {
    let (logits, d_logits) = logits_distill_loss(teacher_logits, student_logits, cfg)?;
    let (projection, d_projections) = if teacher_h.is_empty() {
        let zeros = student_h
            .layers()
            .iter()
            .map(|l| Tensor2D::zeros(l.rows(), l.cols()))
            .collect();
        (0.0, zeros)
    } else {
        let (l, g) = projection_distill_loss(teacher_h, student_h, cfg)?;
        (l, g.into_iter().map(|t| t.scaled(cfg.lambda_h)).collect())
    };
    Ok(DistillLoss {
        total: logits + cfg.lambda_h * projection,
        logits,
        projection,
        d_logits,
        d_projections,
    })
}
