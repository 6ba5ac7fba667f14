//! Adversarial objectives. Every function returns a value to minimize; the
//! discriminator objectives are the negated maximization targets.
//!
//! Per-sample inputs are rank-1 tensors of length n and the returned loss is
//! the batch mean. Probabilities are clamped to [EPS, 1 - EPS] before logs.

use crate::data::AttrLayout;
use crate::error::{Error, Result};
use candle_core::{Tensor, D};

pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Attribute-loss factor.
    pub alpha: f64,
    /// Pixel-loss factor.
    pub lambda: f64,
    pub lambda_d: f64,
    pub lambda_g: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            lambda: 10.0,
            lambda_d: 0.01,
            lambda_g: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("lambda_d", self.lambda_d),
            ("lambda_g", self.lambda_g),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which form of the attribute term the DFGAN objectives use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum LossVariant {
    /// Confidence-weighted attribute terms.
    Our,
    /// Attribute terms without the confidence factor.
    Past,
    /// No attribute terms at all.
    Origin,
}

impl LossVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossVariant::Our => "our",
            LossVariant::Past => "past",
            LossVariant::Origin => "origin",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "our" => Ok(LossVariant::Our),
            "past" => Ok(LossVariant::Past),
            "origin" => Ok(LossVariant::Origin),
            other => Err(Error::Config(format!("unknown loss variant `{other}` (expected our, past or origin)"))),
        }
    }
}

/// A loss split into the parts that are logged separately.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub adversarial: Tensor,
    pub attribute: Tensor,
    pub pixel: Tensor,
}

impl LossParts {
    pub fn values(&self) -> Result<[f64; 4]> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
        Ok([s(&self.total)?, s(&self.adversarial)?, s(&self.attribute)?, s(&self.pixel)?])
    }
}

fn same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

fn check_probabilities(p: &Tensor, what: &str) -> Result<()> {
    let v = p.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::InvalidInput(format!("{what} must be a probability, got {bad}")));
    }
    Ok(())
}

fn clamped_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(EPS, 1.0 - EPS)?.log()?)
}

fn zero_like_scalar(t: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), t.dtype(), t.device())?)
}

/// Binary cross-entropy on probabilities, averaged over the last dimension.
/// Rank-1 inputs give a scalar; (n, d) inputs give n per-sample values.
pub fn bce_rows(targets: &Tensor, probs: &Tensor) -> Result<Tensor> {
    same_dims(targets, probs, "bce")?;
    let p = probs.clamp(EPS, 1.0 - EPS)?;
    let one_minus_t = targets.affine(-1.0, 1.0)?;
    let ll = (targets.mul(&p.log()?)? + one_minus_t.mul(&p.affine(-1.0, 1.0)?.log()?)?)?;
    Ok(ll.mean(D::Minus1)?.neg()?)
}

/// Mean binary cross-entropy over all entries.
pub fn bce(targets: &Tensor, probs: &Tensor) -> Result<Tensor> {
    same_dims(targets, probs, "bce")?;
    Ok(bce_rows(&targets.flatten_all()?, &probs.flatten_all()?)?)
}

/// Binary cross-entropy with the sigmoid folded in, averaged over the last
/// dimension: max(x, 0) - x·t + ln(1 + e^{-|x|}).
pub fn bce_with_logits_rows(targets: &Tensor, logits: &Tensor) -> Result<Tensor> {
    same_dims(targets, logits, "bce_with_logits")?;
    let relu = logits.relu()?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per = ((relu - targets.mul(logits)?)? + soft)?;
    Ok(per.mean(D::Minus1)?)
}

/// Per-group binary cross-entropy with logits over the (expression, identity,
/// gender) blocks; returns three rank-1 tensors of per-sample values.
pub fn grouped_bce_with_logits(targets: &Tensor, logits: &Tensor, layout: AttrLayout) -> Result<[Tensor; 3]> {
    same_dims(targets, logits, "grouped bce")?;
    let [a, b, c] = layout.groups();
    let part = |r: std::ops::Range<usize>| -> Result<Tensor> {
        bce_with_logits_rows(&targets.narrow(D::Minus1, r.start, r.len())?, &logits.narrow(D::Minus1, r.start, r.len())?)
    };
    Ok([part(a)?, part(b)?, part(c)?])
}

pub fn mae_pixel(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_dims(a, b, "mae")?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Discriminator loss of the double-flow GAN.
///
/// `bce_real` and `bce_fake` are per-sample attribute losses. `d_fake`
/// enters the fake-attribute term as a constant weight under
/// [`LossVariant::Our`], as 1 under [`LossVariant::Past`], and the term is
/// dropped under [`LossVariant::Origin`].
pub fn d_loss_dfgan(
    d_real: &Tensor,
    d_fake: &Tensor,
    bce_real: &Tensor,
    bce_fake: &Tensor,
    alpha: f64,
    variant: LossVariant,
) -> Result<LossParts> {
    same_dims(d_real, d_fake, "d_loss")?;
    same_dims(bce_real, bce_fake, "d_loss attribute terms")?;
    same_dims(d_real, bce_real, "d_loss")?;
    check_probabilities(d_real, "d_real")?;
    check_probabilities(d_fake, "d_fake")?;
    let adversarial = (clamped_log(d_real)? + clamped_log(&d_fake.affine(-1.0, 1.0)?)?)?.mean_all()?.neg()?;
    let attribute = match variant {
        LossVariant::Our => (bce_real + d_fake.detach().mul(bce_fake)?)?.mean_all()?.affine(alpha, 0.0)?,
        LossVariant::Past => (bce_real + bce_fake)?.mean_all()?.affine(alpha, 0.0)?,
        LossVariant::Origin => zero_like_scalar(d_real)?,
    };
    Ok(LossParts {
        total: (&adversarial + &attribute)?,
        adversarial,
        attribute,
        pixel: zero_like_scalar(d_real)?,
    })
}

/// Generator loss of the double-flow GAN. The adversarial term keeps its
/// gradient through `d_fake`; the confidence weight does not.
pub fn g_loss_dfgan(
    d_fake: &Tensor,
    gen_image: &Tensor,
    real_image: &Tensor,
    bce_fake: &Tensor,
    lambda: f64,
    alpha: f64,
    variant: LossVariant,
) -> Result<LossParts> {
    same_dims(d_fake, bce_fake, "g_loss")?;
    check_probabilities(d_fake, "d_fake")?;
    let adversarial = clamped_log(&d_fake.affine(-1.0, 1.0)?)?.mean_all()?;
    let pixel = mae_pixel(gen_image, real_image)?.affine(lambda, 0.0)?;
    let attribute = match variant {
        LossVariant::Our => d_fake.detach().mul(bce_fake)?.mean_all()?.affine(alpha, 0.0)?,
        LossVariant::Past => bce_fake.mean_all()?.affine(alpha, 0.0)?,
        LossVariant::Origin => zero_like_scalar(d_fake)?,
    };
    Ok(LossParts {
        total: ((&adversarial + &pixel)? + &attribute)?,
        adversarial,
        attribute,
        pixel,
    })
}

/// Discriminator loss of the multi-attribute baseline: one binary
/// cross-entropy per attribute group, no confidence factor.
pub fn d_loss_mcgan(
    d_real: &Tensor,
    d_fake: &Tensor,
    bce_real: &[Tensor; 3],
    bce_fake: &[Tensor; 3],
    lambda_d: f64,
) -> Result<LossParts> {
    same_dims(d_real, d_fake, "d_loss")?;
    check_probabilities(d_real, "d_real")?;
    check_probabilities(d_fake, "d_fake")?;
    let adversarial = (clamped_log(d_real)? + clamped_log(&d_fake.affine(-1.0, 1.0)?)?)?.mean_all()?.neg()?;
    let mut sum = zero_like_scalar(d_real)?;
    for t in bce_real.iter().chain(bce_fake) {
        same_dims(d_real, t, "d_loss attribute terms")?;
        sum = (sum + t.mean_all()?)?;
    }
    let attribute = sum.affine(lambda_d, 0.0)?;
    Ok(LossParts {
        total: (&adversarial + &attribute)?,
        adversarial,
        attribute,
        pixel: zero_like_scalar(d_real)?,
    })
}

pub fn g_loss_mcgan(d_fake: &Tensor, gen_image: &Tensor, real_image: &Tensor, lambda_g: f64) -> Result<LossParts> {
    check_probabilities(d_fake, "d_fake")?;
    let adversarial = clamped_log(&d_fake.affine(-1.0, 1.0)?)?.mean_all()?;
    let pixel = mae_pixel(gen_image, real_image)?.affine(lambda_g, 0.0)?;
    Ok(LossParts {
        total: (&adversarial + &pixel)?,
        adversarial,
        attribute: zero_like_scalar(d_fake)?,
        pixel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn bce_hand_values() {
        assert!((s(&bce(&t(&[1.0]), &t(&[0.5])).unwrap()) - 0.693147).abs() < 1e-5);
        assert!((s(&bce(&t(&[1.0, 0.0]), &t(&[0.9, 0.2])).unwrap()) - 0.164252).abs() < 1e-5);
        let perfect = s(&bce(&t(&[1.0, 0.0]), &t(&[1.0, 0.0])).unwrap());
        assert!(perfect >= 0.0 && perfect <= -(1.0 - EPS).ln() + 1e-12);
        assert!(bce(&t(&[1.0]), &t(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn logits_form_matches_probability_form() {
        let logits = t(&[-3.0, -0.2, 0.0, 1.5, 4.0]);
        let targets = t(&[0.0, 1.0, 1.0, 0.0, 1.0]);
        let probs = crate::discriminator::sigmoid(&logits).unwrap();
        let a = s(&bce(&targets, &probs).unwrap());
        let b = s(&bce_with_logits_rows(&targets, &logits).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dfgan_hand_values() {
        let zero = t(&[0.0]);
        let d = d_loss_dfgan(&t(&[0.8]), &t(&[0.3]), &zero, &zero, 0.01, LossVariant::Our).unwrap();
        assert!((s(&d.total) - 0.579818).abs() < 1e-4);
        let img_a = Tensor::zeros((1, 1, 2, 2), candle_core::DType::F64, &Device::Cpu).unwrap();
        let img_b = (img_a.clone() + 0.1).unwrap();
        let g = g_loss_dfgan(&t(&[0.3]), &img_b, &img_a, &t(&[0.7]), 10.0, 0.01, LossVariant::Our).unwrap();
        assert!((s(&g.total) - 0.64543).abs() < 1e-4);
        let g = g_loss_dfgan(&t(&[0.5]), &img_b, &img_a, &t(&[0.7]), 0.0, 0.0, LossVariant::Our).unwrap();
        assert!((s(&g.total) + 0.693147).abs() < 1e-5);
        let g = g_loss_dfgan(&t(&[0.3]), &img_a, &img_a, &zero, 10.0, 0.01, LossVariant::Our).unwrap();
        assert_eq!(s(&g.total), (0.7f64).ln());
    }

    #[test]
    fn confidence_factor_annihilates_fake_attribute_term() {
        let d = d_loss_dfgan(&t(&[0.9]), &t(&[1e-12]), &t(&[0.0]), &t(&[100.0]), 0.01, LossVariant::Our).unwrap();
        assert!(s(&d.attribute) < 1e-9);
        let past = d_loss_dfgan(&t(&[0.9]), &t(&[1e-12]), &t(&[0.0]), &t(&[100.0]), 0.01, LossVariant::Past).unwrap();
        assert!((s(&past.attribute) - 1.0).abs() < 1e-12);
        let origin = d_loss_dfgan(&t(&[0.9]), &t(&[0.1]), &t(&[3.0]), &t(&[4.0]), 0.01, LossVariant::Origin).unwrap();
        assert_eq!(s(&origin.attribute), 0.0);
    }

    #[test]
    fn alpha_zero_is_vanilla() {
        let d = d_loss_dfgan(&t(&[0.6]), &t(&[0.4]), &t(&[2.0]), &t(&[3.0]), 0.0, LossVariant::Our).unwrap();
        assert!((s(&d.total) + (0.6f64.ln() + 0.6f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn mcgan_hand_values() {
        let z = [t(&[0.0]), t(&[0.0]), t(&[0.0])];
        let d = d_loss_mcgan(&t(&[0.5]), &t(&[0.5]), &z, &z, 0.01).unwrap();
        assert!((s(&d.total) - 1.386294).abs() < 1e-4);
        let a = Tensor::zeros((1, 4), candle_core::DType::F64, &Device::Cpu).unwrap();
        let b = (a.clone() + 0.2).unwrap();
        let g = g_loss_mcgan(&t(&[0.3]), &b, &a, 10.0).unwrap();
        assert!((s(&g.total) - 1.643325).abs() < 1e-4);
        let g = g_loss_mcgan(&t(&[0.5]), &b, &a, 0.0).unwrap();
        assert!((s(&g.total) + 0.693147).abs() < 1e-5);
    }

    #[test]
    fn out_of_range_probability_is_rejected() {
        let z = t(&[0.0]);
        assert!(d_loss_dfgan(&t(&[1.5]), &t(&[0.3]), &z, &z, 0.01, LossVariant::Our).is_err());
        assert!(g_loss_mcgan(&t(&[-0.1]), &z, &z, 1.0).is_err());
    }
}
