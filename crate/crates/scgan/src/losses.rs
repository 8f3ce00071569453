//! Objective terms: adversarial, cycle, attentive cycle, total variation,
//! perceptual, and their weighted combination.
//!
//! Every term exists in two forms: a tape builder (generic over the scalar
//! type, used by the training graph and by gradient checks) and a plain
//! scalar wrapper over domain types. The wrappers evaluate the same graph,
//! so tested values and trained values cannot drift apart.

use serde::{Deserialize, Serialize};

use scgan_autodiff::{Scalar, Tape, Var};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::networks::PatchScoreMap;
use crate::regions::{bbox_to_pixels, AttentionWeights, RegionSet};
use crate::vgg::{Extractor, FeatureExtractorHandle};

/// Trade-off weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 10.0,
            beta: 2.0,
            gamma: 0.5,
        }
    }
}

/// Per-step scalar values of every objective component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub gan_ab: f32,
    pub gan_ba: f32,
    pub att_cyc_ab: f32,
    pub cyc_ba: f32,
    pub tv: f32,
    pub perceptual: f32,
    pub total: f32,
}

/// Unweighted component values feeding the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub gan_ab: f32,
    pub gan_ba: f32,
    pub att_cyc_ab: f32,
    pub cyc_ba: f32,
    pub tv: f32,
    pub perceptual: f32,
}

impl LossReport {
    pub fn from_components(step: u64, c: &LossComponents, w: &LossWeights) -> Result<Self> {
        let total = full_objective(c, w)?;
        Ok(LossReport {
            step,
            gan_ab: c.gan_ab,
            gan_ba: c.gan_ba,
            att_cyc_ab: c.att_cyc_ab,
            cyc_ba: c.cyc_ba,
            tv: c.tv,
            perceptual: c.perceptual,
            total,
        })
    }

    pub fn components(&self) -> LossComponents {
        LossComponents {
            gan_ab: self.gan_ab,
            gan_ba: self.gan_ba,
            att_cyc_ab: self.att_cyc_ab,
            cyc_ba: self.cyc_ba,
            tv: self.tv,
            perceptual: self.perceptual,
        }
    }
}

fn check_same_shape<F: Scalar>(tape: &Tape<F>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::Shape(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    Ok(())
}

/// Discriminator objective value on raw score maps:
/// mean over patches of log sigmoid(real) + log(1 - sigmoid(fake)).
/// The discriminator ascends this; minimize its negation.
pub fn adversarial_d_value_var<F: Scalar>(
    tape: &mut Tape<F>,
    real: Var,
    fake: Var,
) -> Result<Var> {
    check_same_shape(tape, real, fake, "adversarial maps")?;
    let ls_real = tape.log_sigmoid(real);
    let neg_fake = tape.neg(fake);
    let ls_fake = tape.log_sigmoid(neg_fake);
    let sum = tape.add(ls_real, ls_fake);
    Ok(tape.mean_all(sum))
}

/// Non-saturating generator objective on raw fake scores:
/// mean of -log sigmoid(fake).
pub fn adversarial_g_var<F: Scalar>(tape: &mut Tape<F>, fake: Var) -> Var {
    let ls = tape.log_sigmoid(fake);
    let mean = tape.mean_all(ls);
    tape.neg(mean)
}

/// Least-squares discriminator loss (to minimize), the lineage alternative.
pub fn lsgan_d_loss_var<F: Scalar>(tape: &mut Tape<F>, real: Var, fake: Var) -> Result<Var> {
    check_same_shape(tape, real, fake, "adversarial maps")?;
    let one = F::one();
    let rm = tape.offset(real, -one);
    let rm = tape.square(rm);
    let rm = tape.mean_all(rm);
    let fm = tape.square(fake);
    let fm = tape.mean_all(fm);
    let sum = tape.add(rm, fm);
    Ok(tape.scale(sum, F::lit(0.5)))
}

/// Least-squares generator loss (to minimize).
pub fn lsgan_g_loss_var<F: Scalar>(tape: &mut Tape<F>, fake: Var) -> Var {
    let fm = tape.offset(fake, -F::one());
    let fm = tape.square(fm);
    tape.mean_all(fm)
}

/// Mean absolute difference over all elements.
pub fn cycle_var<F: Scalar>(tape: &mut Tape<F>, original: Var, reconstruction: Var) -> Result<Var> {
    check_same_shape(tape, original, reconstruction, "cycle images")?;
    let diff = tape.sub(reconstruction, original);
    let diff = tape.abs(diff);
    Ok(tape.mean_all(diff))
}

/// Region-weighted cycle loss: sum over regions j of
/// lambda_j * meanL1(crop_j(reconstruction), crop_j(original)).
pub fn attentive_cycle_var<F: Scalar>(
    tape: &mut Tape<F>,
    original: Var,
    reconstruction: Var,
    regions: &RegionSet,
    weights: &AttentionWeights,
) -> Result<Var> {
    check_same_shape(tape, original, reconstruction, "cycle images")?;
    if weights.lambda.len() != regions.k() {
        return Err(Error::Argument(format!(
            "{} weights for {} regions",
            weights.lambda.len(),
            regions.k()
        )));
    }
    let shape = tape.value(original).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut total: Option<Var> = None;
    for (region, &lambda) in regions.entries().iter().zip(&weights.lambda) {
        let (i0, i1, j0, j1) = bbox_to_pixels(region.bbox, h, w);
        let crop_orig = tape.slice3(original, 0, c, i0, i1, j0, j1);
        let crop_rec = tape.slice3(reconstruction, 0, c, i0, i1, j0, j1);
        let diff = tape.sub(crop_rec, crop_orig);
        let diff = tape.abs(diff);
        let term = tape.mean_all(diff);
        let term = tape.scale(term, F::lit(lambda as f64));
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    Ok(total.expect("region sets are never empty"))
}

/// Anisotropic L1 total variation: forward differences along both spatial
/// axes, summed and normalized by the element count.
pub fn tv_var<F: Scalar>(tape: &mut Tape<F>, image: Var) -> Result<Var> {
    let shape = tape.value(image).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h < 2 || w < 2 {
        return Err(Error::Argument(format!(
            "total variation needs at least 2x2 spatial extent, got {h}x{w}"
        )));
    }
    let right = tape.slice3(image, 0, c, 0, h, 1, w);
    let left = tape.slice3(image, 0, c, 0, h, 0, w - 1);
    let dh = tape.sub(right, left);
    let dh = tape.abs(dh);
    let dh = tape.sum_all(dh);
    let down = tape.slice3(image, 0, c, 1, h, 0, w);
    let up = tape.slice3(image, 0, c, 0, h - 1, 0, w);
    let dv = tape.sub(down, up);
    let dv = tape.abs(dv);
    let dv = tape.sum_all(dv);
    let sum = tape.add(dh, dv);
    Ok(tape.scale(sum, F::lit(1.0 / (c * h * w) as f64)))
}

/// Mean absolute difference between extractor features of two images.
pub fn perceptual_var<F: Scalar>(
    tape: &mut Tape<F>,
    extractor: &Extractor,
    input: Var,
    output: Var,
    range: crate::data::ValueRange,
) -> Result<Var> {
    check_same_shape(tape, input, output, "perceptual images")?;
    let f_in = extractor.features(tape, input, range)?;
    let f_out = extractor.features(tape, output, range)?;
    let diff = tape.sub(f_out, f_in);
    let diff = tape.abs(diff);
    Ok(tape.mean_all(diff))
}

fn eval_scalar<B>(build: B) -> Result<f32>
where
    B: FnOnce(&mut Tape<f32>) -> Result<Var>,
{
    let mut tape = Tape::<f32>::new();
    let root = build(&mut tape)?;
    Ok(tape.scalar(root))
}

/// Scalar form of [`adversarial_d_value_var`] over score maps.
pub fn adversarial_loss_discriminator(real: &PatchScoreMap, fake: &PatchScoreMap) -> Result<f32> {
    eval_scalar(|tape| {
        let r = tape.constant(real.scores().clone().into_dyn());
        let f = tape.constant(fake.scores().clone().into_dyn());
        adversarial_d_value_var(tape, r, f)
    })
}

/// Scalar form of [`adversarial_g_var`] over a score map.
pub fn adversarial_loss_generator(fake: &PatchScoreMap) -> Result<f32> {
    eval_scalar(|tape| {
        let f = tape.constant(fake.scores().clone().into_dyn());
        Ok(adversarial_g_var(tape, f))
    })
}

/// Scalar form of [`cycle_var`] over images.
pub fn cycle_loss(original: &ImageTensor, reconstruction: &ImageTensor) -> Result<f32> {
    eval_scalar(|tape| {
        let o = tape.constant(original.data().clone().into_dyn());
        let r = tape.constant(reconstruction.data().clone().into_dyn());
        cycle_var(tape, o, r)
    })
}

/// Scalar form of [`attentive_cycle_var`] over images.
pub fn attentive_cycle_loss(
    original: &ImageTensor,
    reconstruction: &ImageTensor,
    regions: &RegionSet,
    weights: &AttentionWeights,
) -> Result<f32> {
    eval_scalar(|tape| {
        let o = tape.constant(original.data().clone().into_dyn());
        let r = tape.constant(reconstruction.data().clone().into_dyn());
        attentive_cycle_var(tape, o, r, regions, weights)
    })
}

/// Scalar form of [`tv_var`] over an image.
pub fn tv_loss(image: &ImageTensor) -> Result<f32> {
    eval_scalar(|tape| {
        let x = tape.constant(image.data().clone().into_dyn());
        tv_var(tape, x)
    })
}

/// Scalar form of [`perceptual_var`]; loads the handle's extractor.
pub fn perceptual_loss(
    input: &ImageTensor,
    output: &ImageTensor,
    extractor: &FeatureExtractorHandle,
) -> Result<f32> {
    let loaded = extractor.load()?;
    perceptual_loss_with(input, output, &loaded)
}

/// Scalar perceptual loss with an already-loaded extractor.
pub fn perceptual_loss_with(
    input: &ImageTensor,
    output: &ImageTensor,
    extractor: &Extractor,
) -> Result<f32> {
    if input.channels() != 3 || output.channels() != 3 {
        return Err(Error::Shape(
            "perceptual loss needs 3-channel images".into(),
        ));
    }
    eval_scalar(|tape| {
        let i = tape.constant(input.data().clone().into_dyn());
        let o = tape.constant(output.data().clone().into_dyn());
        perceptual_var(tape, extractor, i, o, input.range())
    })
}

/// The combined objective:
/// gan_ab + gan_ba + alpha * (att_cyc_ab + cyc_ba) + beta * tv + gamma * perceptual.
pub fn full_objective(c: &LossComponents, w: &LossWeights) -> Result<f32> {
    for (name, value) in [
        ("gan_ab", c.gan_ab),
        ("gan_ba", c.gan_ba),
        ("att_cyc_ab", c.att_cyc_ab),
        ("cyc_ba", c.cyc_ba),
        ("tv", c.tv),
        ("perceptual", c.perceptual),
    ] {
        if !value.is_finite() {
            return Err(Error::Numeric {
                component: name.into(),
                value: value as f64,
            });
        }
    }
    Ok(c.gan_ab + c.gan_ba + w.alpha * (c.att_cyc_ab + c.cyc_ba) + w.beta * c.tv + w.gamma * c.perceptual)
}
