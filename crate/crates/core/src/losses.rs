//! Adversarial and perceptual objectives.
//!
//! Every loss is a pure function of plain slices. The `*_objective` variants
//! additionally return the analytic gradient with respect to the raw critic
//! values, which the trainer splices into the autograd graph as a single
//! scalar node.

use serde::{Deserialize, Serialize};

use crate::error::{FurnError, Result};
use crate::tensor::Tensor;

const LOG_FLOOR: f64 = 1e-12;

/// Trade-off between content (perceptual) and adversarial terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_con: 1.0,
            lambda_adv: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_con < 0.0 || self.lambda_adv < 0.0 || !self.lambda_con.is_finite() || !self.lambda_adv.is_finite() {
            return Err(FurnError::InvalidConfig(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Adversarial loss family used by a training variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversarialLoss {
    /// Relativistic average least squares.
    Rals,
    /// Sigmoid cross-entropy (standard GAN, non-saturating generator form).
    Bce,
    /// Plain least squares with 1/0 targets.
    Lsgan,
}

/// Loss value with its gradient w.r.t. the real and fake critic values.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueGrad {
    pub value: f64,
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
}

fn check_batch(c_real: &[f64], c_fake: &[f64]) -> Result<()> {
    if c_real.is_empty() || c_fake.is_empty() {
        return Err(FurnError::EmptyBatch);
    }
    if c_real.len() != c_fake.len() {
        return Err(FurnError::ShapeMismatch(format!(
            "critic batches differ in length: {} vs {}",
            c_real.len(),
            c_fake.len()
        )));
    }
    Ok(())
}

/// Mean taken relative to the first element, so a constant batch yields
/// its value exactly.
fn mean(v: &[f64]) -> f64 {
    let base = v[0];
    base + v.iter().map(|x| x - base).sum::<f64>() / v.len() as f64
}

fn mean_sq_dev(v: &[f64], target: f64) -> f64 {
    v.iter().map(|x| (x - target) * (x - target)).sum::<f64>() / v.len() as f64
}

/// `ct_real = c_real − mean(c_fake)`, `ct_fake = c_fake − mean(c_real)`.
pub fn relativistic_transform(c_real: &[f64], c_fake: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_batch(c_real, c_fake)?;
    let (mr, mf) = (mean(c_real), mean(c_fake));
    Ok((
        c_real.iter().map(|c| c - mf).collect(),
        c_fake.iter().map(|c| c - mr).collect(),
    ))
}

/// Discriminator loss on transformed critic values:
/// `mean[(ct_real − 1)²] + mean[(ct_fake + 1)²]`.
pub fn rals_d_loss(ct_real: &[f64], ct_fake: &[f64]) -> Result<f64> {
    check_batch(ct_real, ct_fake)?;
    Ok(mean_sq_dev(ct_real, 1.0) + mean_sq_dev(ct_fake, -1.0))
}

/// Generator loss on transformed critic values:
/// `mean[(ct_fake − 1)²] + mean[(ct_real + 1)²]`.
pub fn rals_g_loss(ct_real: &[f64], ct_fake: &[f64]) -> Result<f64> {
    check_batch(ct_real, ct_fake)?;
    Ok(mean_sq_dev(ct_fake, 1.0) + mean_sq_dev(ct_real, -1.0))
}

/// `mean[(c_real − 1)²] + mean[c_fake²]`.
pub fn lsgan_d_loss(c_real: &[f64], c_fake: &[f64]) -> Result<f64> {
    check_batch(c_real, c_fake)?;
    Ok(mean_sq_dev(c_real, 1.0) + mean_sq_dev(c_fake, 0.0))
}

/// `mean[(c_fake − 1)²]`.
pub fn lsgan_g_loss(c_fake: &[f64]) -> Result<f64> {
    if c_fake.is_empty() {
        return Err(FurnError::EmptyBatch);
    }
    Ok(mean_sq_dev(c_fake, 1.0))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(L_D, L_G)` of the sigmoid cross-entropy game with the non-saturating
/// generator objective; log arguments are floored at 1e-12.
pub fn bce_gan_losses(c_real: &[f64], c_fake: &[f64]) -> Result<(f64, f64)> {
    check_batch(c_real, c_fake)?;
    let neg_log = |p: f64| -p.max(LOG_FLOOR).ln();
    let ld = mean(&c_real.iter().map(|&c| neg_log(sigmoid(c))).collect::<Vec<_>>())
        + mean(&c_fake.iter().map(|&c| neg_log(sigmoid(-c))).collect::<Vec<_>>());
    let lg = mean(&c_fake.iter().map(|&c| neg_log(sigmoid(c))).collect::<Vec<_>>());
    Ok((ld, lg))
}

/// Squared feature distance averaged over every element (batch, channels and
/// positions).
pub fn perceptual_loss(feat_hr: &Tensor, feat_sr: &Tensor) -> Result<f64> {
    Ok(perceptual_objective(feat_hr, feat_sr)?.0)
}

/// Perceptual loss and its gradient with respect to `feat_sr`.
pub fn perceptual_objective(feat_hr: &Tensor, feat_sr: &Tensor) -> Result<(f64, Tensor)> {
    if feat_hr.shape() != feat_sr.shape() {
        return Err(FurnError::ShapeMismatch(format!(
            "feature maps {:?} vs {:?}",
            feat_hr.shape(),
            feat_sr.shape()
        )));
    }
    if feat_hr.is_empty() {
        return Err(FurnError::EmptyBatch);
    }
    let n = feat_hr.len() as f64;
    let mut sum = 0.0;
    let grad: Vec<f64> = feat_hr
        .data()
        .iter()
        .zip(feat_sr.data())
        .map(|(h, s)| {
            let d = s - h;
            sum += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((sum / n, Tensor::new_unchecked(feat_sr.shape().to_vec(), grad)))
}

/// `λ_con · L_perceptual + λ_adv · L_adv`
pub fn total_g_loss(l_perceptual: f64, l_adv: f64, weights: &LossWeights) -> f64 {
    weights.lambda_con * l_perceptual + weights.lambda_adv * l_adv
}

/// `mean[(ct_real − a)²] + mean[(ct_fake − b)²]` through the relativistic
/// transform, differentiated w.r.t. the raw critic values.
fn rals_objective(c_real: &[f64], c_fake: &[f64], a: f64, b: f64) -> Result<ValueGrad> {
    let (ctr, ctf) = relativistic_transform(c_real, c_fake)?;
    let n = c_real.len() as f64;
    let er: Vec<f64> = ctr.iter().map(|v| v - a).collect();
    let ef: Vec<f64> = ctf.iter().map(|v| v - b).collect();
    let value = er.iter().map(|e| e * e).sum::<f64>() / n + ef.iter().map(|e| e * e).sum::<f64>() / n;
    let sum_er: f64 = er.iter().sum();
    let sum_ef: f64 = ef.iter().sum();
    let d_real = er.iter().map(|e| 2.0 * e / n - 2.0 * sum_ef / (n * n)).collect();
    let d_fake = ef.iter().map(|e| 2.0 * e / n - 2.0 * sum_er / (n * n)).collect();
    Ok(ValueGrad { value, d_real, d_fake })
}

/// d/dc of `−ln max(σ(s·c), floor)` for sign `s`, matching the floored value.
fn neg_log_sigmoid_grad(c: f64, s: f64) -> f64 {
    let p = sigmoid(s * c);
    if p < LOG_FLOOR {
        0.0
    } else {
        -s * (1.0 - p)
    }
}

impl AdversarialLoss {
    pub fn d_objective(self, c_real: &[f64], c_fake: &[f64]) -> Result<ValueGrad> {
        check_batch(c_real, c_fake)?;
        let n = c_real.len() as f64;
        match self {
            AdversarialLoss::Rals => rals_objective(c_real, c_fake, 1.0, -1.0),
            AdversarialLoss::Lsgan => Ok(ValueGrad {
                value: lsgan_d_loss(c_real, c_fake)?,
                d_real: c_real.iter().map(|c| 2.0 * (c - 1.0) / n).collect(),
                d_fake: c_fake.iter().map(|c| 2.0 * c / n).collect(),
            }),
            AdversarialLoss::Bce => Ok(ValueGrad {
                value: bce_gan_losses(c_real, c_fake)?.0,
                d_real: c_real.iter().map(|&c| neg_log_sigmoid_grad(c, 1.0) / n).collect(),
                d_fake: c_fake.iter().map(|&c| neg_log_sigmoid_grad(c, -1.0) / n).collect(),
            }),
        }
    }

    pub fn g_objective(self, c_real: &[f64], c_fake: &[f64]) -> Result<ValueGrad> {
        check_batch(c_real, c_fake)?;
        let n = c_real.len() as f64;
        match self {
            AdversarialLoss::Rals => rals_objective(c_real, c_fake, -1.0, 1.0),
            AdversarialLoss::Lsgan => Ok(ValueGrad {
                value: lsgan_g_loss(c_fake)?,
                d_real: vec![0.0; c_real.len()],
                d_fake: c_fake.iter().map(|c| 2.0 * (c - 1.0) / n).collect(),
            }),
            AdversarialLoss::Bce => Ok(ValueGrad {
                value: bce_gan_losses(c_real, c_fake)?.1,
                d_real: vec![0.0; c_real.len()],
                d_fake: c_fake.iter().map(|&c| neg_log_sigmoid_grad(c, 1.0) / n).collect(),
            }),
        }
    }

    /// Whether the generator objective reads the real critic values.
    pub fn g_uses_real(self) -> bool {
        matches!(self, AdversarialLoss::Rals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn transform_hand_example() {
        let (r, f) = relativistic_transform(&[2.0, 0.0], &[1.0, -1.0]).unwrap();
        assert_eq!(r, vec![2.0, 0.0]);
        assert_eq!(f, vec![0.0, -2.0]);
    }

    #[test]
    fn transform_symmetric_batch_is_zero() {
        let (r, f) = relativistic_transform(&[0.7; 3], &[0.7; 3]).unwrap();
        assert!(r.iter().chain(&f).all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batches_are_rejected() {
        assert!(matches!(relativistic_transform(&[], &[]), Err(FurnError::EmptyBatch)));
        assert!(matches!(rals_d_loss(&[], &[]), Err(FurnError::EmptyBatch)));
        assert!(matches!(rals_g_loss(&[], &[]), Err(FurnError::EmptyBatch)));
        assert!(matches!(lsgan_d_loss(&[], &[]), Err(FurnError::EmptyBatch)));
        assert!(matches!(bce_gan_losses(&[], &[]), Err(FurnError::EmptyBatch)));
    }

    #[test]
    fn rals_hand_examples() {
        assert_eq!(rals_d_loss(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(rals_d_loss(&[2.0, 0.0], &[0.0, -2.0]).unwrap(), 2.0);
        assert_eq!(rals_d_loss(&[1.0, 1.0], &[-1.0, -1.0]).unwrap(), 0.0);
        assert_eq!(rals_g_loss(&[0.0], &[0.0]).unwrap(), 2.0);
        assert_eq!(rals_g_loss(&[2.0, 0.0], &[0.0, -2.0]).unwrap(), 10.0);
        assert_eq!(rals_g_loss(&[-1.0], &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn lsgan_and_bce_hand_examples() {
        assert_eq!(lsgan_d_loss(&[1.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(lsgan_d_loss(&[0.0], &[1.0]).unwrap(), 2.0);
        assert_eq!(lsgan_d_loss(&[0.5], &[0.5]).unwrap(), 0.5);
        let (ld, lg) = bce_gan_losses(&[0.0], &[0.0]).unwrap();
        assert!((ld - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((lg - 2f64.ln()).abs() < 1e-12);
        let (ld, _) = bce_gan_losses(&[20.0], &[-20.0]).unwrap();
        assert!(ld < 1e-8);
    }

    #[test]
    fn perceptual_examples() {
        let ones = Tensor::full(&[1, 2, 2], 1.0);
        let zeros = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(perceptual_loss(&ones, &zeros).unwrap(), 1.0);
        assert_eq!(perceptual_loss(&ones, &ones).unwrap(), 0.0);
        assert!(matches!(
            perceptual_loss(&ones, &Tensor::zeros(&[1, 4])),
            Err(FurnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_g_loss(0.5, 2.0, &w) - 0.502).abs() < 1e-15);
        let no_adv = LossWeights { lambda_adv: 0.0, ..w };
        assert_eq!(total_g_loss(0.37, 5.0, &no_adv), 0.37);
        assert_eq!(total_g_loss(0.0, 0.0, &w), 0.0);
    }

    fn batch() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..8).prop_flat_map(|n| {
            (
                proptest::collection::vec(-5.0f64..5.0, n),
                proptest::collection::vec(-5.0f64..5.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn transformed_means_are_antisymmetric((r, f) in batch()) {
            let (tr, tf) = relativistic_transform(&r, &f).unwrap();
            prop_assert!((mean(&tr) + mean(&tf)).abs() < 1e-12);
        }

        #[test]
        fn generator_loss_swaps_roles((r, f) in batch()) {
            let (tr, tf) = relativistic_transform(&r, &f).unwrap();
            prop_assert_eq!(rals_g_loss(&tr, &tf).unwrap(), rals_d_loss(&tf, &tr).unwrap());
        }

        #[test]
        fn losses_are_non_negative((r, f) in batch()) {
            let (tr, tf) = relativistic_transform(&r, &f).unwrap();
            prop_assert!(rals_d_loss(&tr, &tf).unwrap() >= 0.0);
            prop_assert!(rals_g_loss(&tr, &tf).unwrap() >= 0.0);
            prop_assert!(lsgan_d_loss(&r, &f).unwrap() >= 0.0);
            let (ld, lg) = bce_gan_losses(&r, &f).unwrap();
            prop_assert!(ld >= 0.0 && lg >= 0.0);
        }

        #[test]
        fn perceptual_is_homogeneous_of_degree_two(
            v in proptest::collection::vec(-3.0f64..3.0, 8),
            s in -4.0f64..4.0,
        ) {
            let a = Tensor::from_vec(&[2, 2, 2], v.clone()).unwrap();
            let b = Tensor::from_vec(&[2, 2, 2], v.iter().map(|x| x * 0.5 - 0.1).collect()).unwrap();
            let base = perceptual_loss(&a, &b).unwrap();
            let scaled = perceptual_loss(&a.map(|x| x * s), &b.map(|x| x * s)).unwrap();
            prop_assert!((scaled - s * s * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
        }
    }
}
