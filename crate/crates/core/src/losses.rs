//! Supervised, distillation and annealed losses, recorded on a [`Graph`].
//!
//! Each loss returns a scalar node so gradients reach whatever produced its
//! inputs. Teacher logits always pass through a stop-gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{LossKind, TaskId};
use crate::encoder::{tempered_log_softmax, tempered_softmax};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};

/// Probabilities are clipped to `[PROB_FLOOR, 1 − PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha: f64,
    #[serde(default)]
    pub per_task_temperature: BTreeMap<TaskId, f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            alpha: 0.6,
            per_task_temperature: BTreeMap::new(),
        }
    }
}

impl DistillConfig {
    /// Global `T = 2` with `T = 7` for emotion.
    pub fn annealing_preset() -> Self {
        Self {
            temperature: 2.0,
            alpha: 0.6,
            per_task_temperature: BTreeMap::from([(TaskId::Emotion, 7.0)]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        for t in std::iter::once(&self.temperature).chain(self.per_task_temperature.values()) {
            if !(*t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("temperature must be positive, got {t}")));
            }
        }
        Ok(())
    }

    pub fn temperature_for(&self, task: TaskId) -> f64 {
        self.per_task_temperature
            .get(&task)
            .copied()
            .unwrap_or(self.temperature)
    }
}

/// Linear ramp `λ(step) = min(step / total_steps, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    total_steps: u64,
}

impl AnnealSchedule {
    pub fn new(total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::invalid("anneal total_steps must be positive"));
        }
        Ok(Self { total_steps })
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn lambda(&self, step: u64) -> f64 {
        (step as f64 / self.total_steps as f64).min(1.0)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must be in [0, 1], got {alpha}")))
    }
}

fn same_shape(op: &'static str, g: &Graph, a: Var, b: &Tensor) -> Result<()> {
    if g.shape(a) != b.shape() || g.shape(a).len() != 2 {
        return Err(Error::Shape {
            op,
            left: g.shape(a).to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `−(1/N) Σᵢ Σₖ yᵢₖ log pᵢₖ` for a dense target matrix.
///
/// With one-hot rows this is the usual categorical cross-entropy; soft rows
/// (mixed labels) give the target-weighted sum of per-class terms.
pub fn ce_loss(g: &mut Graph, probs: Var, targets: &Tensor) -> Result<Var> {
    same_shape("ce_loss", g, probs, targets)?;
    let n = targets.rows() as f64;
    let clipped = g.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let logp = g.log(clipped)?;
    let y = g.constant(targets.clone());
    let weighted = g.mul(logp, y)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0 / n)
}

/// `−(1/(N·K)) Σᵢ Σₖ [y log p + (1 − y) log(1 − p)]`.
pub fn bce_loss(g: &mut Graph, probs: Var, targets: &Tensor) -> Result<Var> {
    same_shape("bce_loss", g, probs, targets)?;
    let scale = -1.0 / targets.numel() as f64;
    let clipped = g.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let logp = g.log(clipped)?;
    let ones = g.constant(Tensor::full(targets.shape(), 1.0));
    let complement = g.sub(ones, clipped)?;
    let log_complement = g.log(complement)?;
    let y = g.constant(targets.clone());
    let not_y = g.constant(targets.map(|v| 1.0 - v));
    let a = g.mul(logp, y)?;
    let b = g.mul(log_complement, not_y)?;
    let both = g.add(a, b)?;
    let total = g.sum(both)?;
    g.scale(total, scale)
}

/// The supervised loss of a task head: softmax then CE, or softmax then BCE
/// for element-wise tasks.
pub fn supervised_loss(g: &mut Graph, logits: Var, targets: &Tensor, kind: LossKind) -> Result<Var> {
    let probs = g.softmax(logits)?;
    match kind {
        LossKind::CategoricalCe => ce_loss(g, probs, targets),
        LossKind::ElementwiseBce => bce_loss(g, probs, targets),
    }
}

/// `(T²/N) Σᵢ KL(pᵗᵢ ‖ pˢᵢ)` over tempered distributions.
pub fn kl_kd_loss(g: &mut Graph, teacher_logits: Var, student_logits: Var, temperature: f64) -> Result<Var> {
    if g.shape(teacher_logits) != g.shape(student_logits) || g.shape(student_logits).len() != 2 {
        return Err(Error::Shape {
            op: "kl_kd_loss",
            left: g.shape(teacher_logits).to_vec(),
            right: g.shape(student_logits).to_vec(),
        });
    }
    let n = g.shape(student_logits)[0] as f64;
    let frozen = g.stop_gradient(teacher_logits)?;
    let log_t = tempered_log_softmax(g, frozen, temperature)?;
    let p_t = tempered_softmax(g, frozen, temperature)?;
    let log_s = tempered_log_softmax(g, student_logits, temperature)?;
    let diff = g.sub(log_t, log_s)?;
    let terms = g.mul(p_t, diff)?;
    let total = g.sum(terms)?;
    g.scale(total, temperature * temperature / n)
}

/// `α·a + (1 − α)·b`.
fn interpolate(g: &mut Graph, a: Var, b: Var, alpha: f64) -> Result<Var> {
    let wa = g.scale(a, alpha)?;
    let wb = g.scale(b, 1.0 - alpha)?;
    g.add(wa, wb)
}

/// `α·ce + (1 − α)·kl`.
pub fn kd_loss(g: &mut Graph, ce: Var, kl: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    interpolate(g, ce, kl, alpha)
}

fn sum_scalars(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let (&first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::invalid("nothing to sum"))?;
    rest.iter().try_fold(first, |acc, &v| g.add(acc, v))
}

/// Plain sum of per-task losses; every task in `attached` must be present,
/// and nothing else.
pub fn mtl_loss(g: &mut Graph, per_task: &BTreeMap<TaskId, Var>, attached: &[TaskId]) -> Result<Var> {
    for t in attached {
        if !per_task.contains_key(t) {
            return Err(Error::invalid(format!("no loss for attached task {t}")));
        }
    }
    if let Some(extra) = per_task.keys().find(|t| !attached.contains(t)) {
        return Err(Error::invalid(format!("loss given for unattached task {extra}")));
    }
    let parts: Vec<Var> = per_task.values().copied().collect();
    sum_scalars(g, &parts)
}

/// `Σ_τ (T_τ²/N^τ) Σᵢ KL(teacher ‖ student)` with per-task temperatures.
///
/// Batch sizes come from the row counts of each task's logits.
pub fn mtkd_kl_loss(
    g: &mut Graph,
    teacher: &BTreeMap<TaskId, Var>,
    student: &BTreeMap<TaskId, Var>,
    config: &DistillConfig,
) -> Result<Var> {
    config.validate()?;
    if !teacher.keys().eq(student.keys()) {
        return Err(Error::invalid(format!(
            "teacher tasks {:?} differ from student tasks {:?}",
            teacher.keys().collect::<Vec<_>>(),
            student.keys().collect::<Vec<_>>()
        )));
    }
    let mut parts = Vec::with_capacity(teacher.len());
    for (task, &t) in teacher {
        parts.push(kl_kd_loss(g, t, student[task], config.temperature_for(*task))?);
    }
    sum_scalars(g, &parts)
}

/// `α·ce_sum + (1 − α)·mtkd_kl`.
pub fn mtkd_loss(g: &mut Graph, ce_sum: Var, mtkd_kl: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    interpolate(g, ce_sum, mtkd_kl, alpha)
}

/// `λ(step)·ce_sum + (1 − λ(step))·mtkd_kl`.
pub fn mtkd_ta_loss(
    g: &mut Graph,
    ce_sum: Var,
    mtkd_kl: Var,
    schedule: &AnnealSchedule,
    step: u64,
) -> Result<Var> {
    interpolate(g, ce_sum, mtkd_kl, schedule.lambda(step))
}

/// Value-level forms of the losses, for evaluation and quick checks.
pub mod value {
    use super::*;
    use crate::tokenizer::one_hot;

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    pub fn ce_loss(probs: &Tensor, classes: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let y = one_hot_checked(classes, probs)?;
        let l = super::ce_loss(&mut g, p, &y)?;
        Ok(scalar(&g, l))
    }

    pub fn bce_loss(probs: &Tensor, targets: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let l = super::bce_loss(&mut g, p, targets)?;
        Ok(scalar(&g, l))
    }

    pub fn kl_kd_loss(teacher_logits: &Tensor, student_logits: &Tensor, temperature: f64) -> Result<f64> {
        let mut g = Graph::new();
        let t = g.constant(teacher_logits.clone());
        let s = g.constant(student_logits.clone());
        let l = super::kl_kd_loss(&mut g, t, s, temperature)?;
        Ok(scalar(&g, l))
    }

    pub fn mtkd_kl_loss(
        teacher: &BTreeMap<TaskId, Tensor>,
        student: &BTreeMap<TaskId, Tensor>,
        config: &DistillConfig,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let t = teacher.iter().map(|(k, v)| (*k, g.constant(v.clone()))).collect();
        let s = student.iter().map(|(k, v)| (*k, g.constant(v.clone()))).collect();
        let l = super::mtkd_kl_loss(&mut g, &t, &s, config)?;
        Ok(scalar(&g, l))
    }

    pub fn kd_loss(ce: f64, kl: f64, alpha: f64) -> Result<f64> {
        check_alpha(alpha)?;
        Ok(alpha * ce + (1.0 - alpha) * kl)
    }

    pub fn mtkd_loss(ce_sum: f64, mtkd_kl: f64, alpha: f64) -> Result<f64> {
        kd_loss(ce_sum, mtkd_kl, alpha)
    }

    pub fn mtkd_ta_loss(ce_sum: f64, mtkd_kl: f64, schedule: &AnnealSchedule, step: u64) -> f64 {
        let lambda = schedule.lambda(step);
        lambda * ce_sum + (1.0 - lambda) * mtkd_kl
    }

    pub fn mtl_loss(per_task: &BTreeMap<TaskId, f64>, attached: &[TaskId]) -> Result<f64> {
        for t in attached {
            if !per_task.contains_key(t) {
                return Err(Error::invalid(format!("no loss for attached task {t}")));
            }
        }
        if let Some(extra) = per_task.keys().find(|t| !attached.contains(t)) {
            return Err(Error::invalid(format!("loss given for unattached task {extra}")));
        }
        Ok(per_task.values().sum())
    }

    fn one_hot_checked(classes: &[usize], probs: &Tensor) -> Result<Tensor> {
        if probs.rank() != 2 || classes.len() != probs.rows() {
            return Err(Error::Shape {
                op: "ce_loss",
                left: probs.shape().to_vec(),
                right: vec![classes.len()],
            });
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= probs.cols()) {
            return Err(Error::invalid(format!("target class {c} out of range")));
        }
        Ok(one_hot(classes, probs.cols()))
    }
}
