//! Cosine pull/push attack objectives.
//!
//! Each loss exists twice: a host-side `f64` version on [`Embedding`]s used
//! for reporting, and a batched tensor version used for backpropagation.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::AttackMode;
use crate::embedders::Embedding;
use crate::error::{Error, Result};

/// How the targeted push term is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PushForm {
    /// `max(0, cos(z_adv, z_s) - τ)`: zero once source similarity drops below τ.
    #[default]
    ProseHinge,
    /// `max(0, 1 - cos(z_adv, z_t)) + τ - (1 - cos(z_adv, z_s))`, kept for comparison.
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_pull: f64,
    pub lambda_push: f64,
    pub tau: f64,
    pub mode: AttackMode,
    pub push_form: PushForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pull: 1.0,
            lambda_push: 0.5,
            tau: 0.3,
            mode: AttackMode::Untargeted,
            push_form: PushForm::ProseHinge,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_pull < 0.0 || self.lambda_pull.is_nan() {
            return Err(Error::config("loss.lambda_pull", "must be >= 0"));
        }
        if self.lambda_push < 0.0 || self.lambda_push.is_nan() {
            return Err(Error::config("loss.lambda_push", "must be >= 0"));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::config("loss.tau", "must lie in [-1, 1]"));
        }
        Ok(())
    }
}

fn check_dims(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Cosine similarity computed in `f64`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    check_dims(a, b)?;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

pub fn pull_loss(z_adv: &Embedding, z_t: &Embedding) -> Result<f64> {
    Ok(1.0 - cosine(&z_adv.vector, &z_t.vector)?)
}

pub fn push_loss_targeted(z_adv: &Embedding, z_s: &Embedding, tau: f64) -> Result<f64> {
    Ok((cosine(&z_adv.vector, &z_s.vector)? - tau).max(0.0))
}

/// The literal printed push expression; involves the target embedding.
pub fn push_loss_printed(z_adv: &Embedding, z_s: &Embedding, z_t: &Embedding, tau: f64) -> Result<f64> {
    let to_target = (1.0 - cosine(&z_adv.vector, &z_t.vector)?).max(0.0);
    Ok(to_target + tau - (1.0 - cosine(&z_adv.vector, &z_s.vector)?))
}

pub fn push_loss_untargeted(z_adv: &Embedding, z_s: &Embedding) -> Result<f64> {
    cosine(&z_adv.vector, &z_s.vector)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub pull: f64,
    pub push: f64,
}

pub fn total_loss(
    weights: &LossWeights,
    z_adv: &Embedding,
    z_s: &Embedding,
    z_t: Option<&Embedding>,
) -> Result<LossBreakdown> {
    match weights.mode {
        AttackMode::Untargeted => {
            let push = push_loss_untargeted(z_adv, z_s)?;
            Ok(LossBreakdown { total: push, pull: 0.0, push })
        }
        AttackMode::Targeted => {
            let z_t = z_t.ok_or(Error::MissingTarget)?;
            let pull = pull_loss(z_adv, z_t)?;
            let push = match weights.push_form {
                PushForm::ProseHinge => push_loss_targeted(z_adv, z_s, weights.tau)?,
                PushForm::Printed => push_loss_printed(z_adv, z_s, z_t, weights.tau)?,
            };
            Ok(LossBreakdown {
                total: weights.lambda_pull * pull + weights.lambda_push * push,
                pull,
                push,
            })
        }
    }
}

/// Row-wise cosine similarity of two `(B, d)` tensors.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?;
    let nb = b.sqr()?.sum(D::Minus1)?;
    Ok(dot.div(&(na * nb)?.sqrt()?.clamp(1e-12, f64::INFINITY)?)?)
}

/// Batched tensor losses; each term is averaged over the batch.
#[derive(Debug, Clone)]
pub struct TensorLoss {
    pub total: Tensor,
    pub pull: Tensor,
    pub push: Tensor,
}

pub fn total_loss_tensor(
    weights: &LossWeights,
    z_adv: &Tensor,
    z_s: &Tensor,
    z_t: Option<&Tensor>,
) -> Result<TensorLoss> {
    let cos_s = cosine_rows(z_adv, z_s)?;
    match weights.mode {
        AttackMode::Untargeted => {
            let push = cos_s.mean_all()?;
            let pull = push.zeros_like()?;
            Ok(TensorLoss { total: push.clone(), pull, push })
        }
        AttackMode::Targeted => {
            let z_t = z_t.ok_or(Error::MissingTarget)?;
            let cos_t = cosine_rows(z_adv, z_t)?;
            let pull_rows = cos_t.affine(-1.0, 1.0)?;
            let push_rows = match weights.push_form {
                PushForm::ProseHinge => cos_s.affine(1.0, -weights.tau)?.relu()?,
                PushForm::Printed => {
                    // max(0, 1 - cos_t) + τ - (1 - cos_s)
                    (pull_rows.relu()? + cos_s.affine(1.0, weights.tau - 1.0)?)?
                }
            };
            let pull = pull_rows.mean_all()?;
            let push = push_rows.mean_all()?;
            let total = (pull.affine(weights.lambda_pull, 0.0)? + push.affine(weights.lambda_push, 0.0)?)?;
            Ok(TensorLoss { total, pull, push })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec(), "test")
    }

    #[test]
    fn pull_endpoints() {
        let a = e(&[1.0, 0.0]);
        assert!((pull_loss(&a, &e(&[1.0, 0.0])).unwrap() - 0.0).abs() < 1e-12);
        assert!((pull_loss(&a, &e(&[0.0, 1.0])).unwrap() - 1.0).abs() < 1e-12);
        assert!((pull_loss(&a, &e(&[-1.0, 0.0])).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(pull_loss(&a, &e(&[1.0, 0.0, 0.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn targeted_push_hinge() {
        let s = e(&[1.0, 0.0]);
        assert!((push_loss_targeted(&s, &s, 0.3).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(push_loss_targeted(&e(&[0.0, 1.0]), &s, 0.3).unwrap(), 0.0);
        let at_tau = e(&[0.3, (1.0f32 - 0.09).sqrt()]);
        assert!(push_loss_targeted(&at_tau, &s, 0.3).unwrap().abs() < 1e-7);
    }

    #[test]
    fn untargeted_push() {
        let s = e(&[0.0, 1.0]);
        assert!((push_loss_untargeted(&s, &s).unwrap() - 1.0).abs() < 1e-12);
        assert!(push_loss_untargeted(&e(&[1.0, 0.0]), &s).unwrap().abs() < 1e-12);
        assert!((push_loss_untargeted(&e(&[0.0, -1.0]), &s).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        // z_adv = z_t, cos(z_adv, z_s) = 0.8, τ = 0.3 → 0.5 · 0.5
        let w = LossWeights { mode: AttackMode::Targeted, ..LossWeights::default() };
        let adv = e(&[1.0, 0.0]);
        let src = e(&[0.8, 0.6]);
        let l = total_loss(&w, &adv, &src, Some(&adv)).unwrap();
        assert!((l.total - 0.25).abs() < 1e-6, "{l:?}");
        assert!(matches!(total_loss(&w, &adv, &src, None), Err(Error::MissingTarget)));

        let zero = LossWeights { lambda_pull: 0.0, lambda_push: 0.0, ..w };
        assert_eq!(total_loss(&zero, &adv, &src, Some(&e(&[-1.0, 0.0]))).unwrap().total, 0.0);

        let u = LossWeights::default();
        assert!(total_loss(&u, &adv, &e(&[0.0, 1.0]), None).unwrap().total.abs() < 1e-12);
    }

    #[test]
    fn printed_form_can_go_negative() {
        let w = LossWeights { mode: AttackMode::Targeted, push_form: PushForm::Printed, ..LossWeights::default() };
        let adv = e(&[1.0, 0.0]);
        let l = total_loss(&w, &adv, &e(&[-1.0, 0.0]), Some(&adv)).unwrap();
        assert!((l.push - (0.3 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(LossWeights { tau: 1.5, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights { lambda_pull: -1.0, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
