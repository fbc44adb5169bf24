//! Training objectives: weighted reconstruction, perceptual distance,
//! attention KL, per-critic WGAN-GP and the generator adversarial term.

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsa::{AttentionMaps, OracleMaps};
use crate::error::{invalid, shape_err, Error, Result};
use crate::mask::{recon_weight_map, Mask, Rect};
use crate::nn::{Critic, FixedFeatureNet};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tape, Tensor, Var};

/// Lower clamp applied to attention probabilities before taking logs.
pub const KL_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_kl: f64,
    pub lambda_p: f64,
    pub lambda_g: f64,
    /// Gradient-penalty weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 10.0,
            lambda_kl: 2.0,
            lambda_p: 1.0,
            lambda_g: 1.0,
            gamma: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_r", self.lambda_r),
            ("lambda_kl", self.lambda_kl),
            ("lambda_p", self.lambda_p),
            ("lambda_g", self.lambda_g),
            ("gamma", self.gamma),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!(
                    "loss weight {name} = {v} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

/// Hole mask `M₁` and component masks `M₂…M₅` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBundle {
    pub hole: Mask,
    pub components: Vec<Mask>,
}

impl MaskBundle {
    pub fn new(hole: Mask, components: Vec<Mask>) -> Self {
        Self { hole, components }
    }

    /// Per-pixel weight `1 + Σᵢ (1 − Mᵢ)`.
    pub fn weight_map(&self) -> Result<Vec<u8>> {
        let mut all = vec![&self.hole];
        all.extend(self.components.iter());
        recon_weight_map(&all)
    }
}

fn plane_broadcast<T: Scalar>(shape: &[usize], per_sample: &[Vec<T>]) -> Result<Tensor<T>> {
    let &[b, c, h, w] = shape else {
        return Err(shape_err(
            "broadcast",
            format!("expected [B, C, H, W], got {shape:?}"),
        ));
    };
    if per_sample.len() != b || per_sample.iter().any(|p| p.len() != h * w) {
        return Err(shape_err(
            "broadcast",
            format!("{} planes for {shape:?}", per_sample.len()),
        ));
    }
    let mut data = Vec::with_capacity(b * c * h * w);
    for plane in per_sample {
        for _ in 0..c {
            data.extend_from_slice(plane);
        }
    }
    Tensor::new(shape, data)
}

/// Weighted mean absolute error, `mean(w · |I_out − I_gt|)`.
pub fn recon_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: Var,
    gt: Var,
    bundles: &[MaskBundle],
) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let planes = bundles
        .iter()
        .map(|b| {
            Ok(b.weight_map()?
                .into_iter()
                .map(|v| lit::<T>(v as f64))
                .collect())
        })
        .collect::<Result<Vec<Vec<T>>>>()?;
    let w = plane_broadcast(&shape, &planes)?;
    let d = tape.sub(out, gt)?;
    let a = tape.abs(d);
    let weighted = tape.mul_const(a, w)?;
    Ok(tape.mean(weighted))
}

fn feature_distance<T: Scalar>(tape: &mut Tape<T>, a: &[Var], b: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        count += tape.value(x).len();
        let d = tape.sub(x, y)?;
        let d = tape.abs(d);
        let s = tape.sum(d);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| invalid("feature stack is empty"))?;
    Ok(tape.scalar_mul(total, lit(1.0 / count as f64)))
}

/// `I_out ⊙ (1 − M) + I_gt ⊙ M` on the tape.
pub fn composite_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    out: Var,
    gt: Var,
    holes: &[&Mask],
) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let keep: Vec<Vec<T>> = holes
        .iter()
        .map(|m| m.bits().iter().map(|&v| lit::<T>(v as f64)).collect())
        .collect();
    let fill: Vec<Vec<T>> = holes
        .iter()
        .map(|m| m.bits().iter().map(|&v| lit::<T>(1.0 - v as f64)).collect())
        .collect();
    let a = tape.mul_const(out, plane_broadcast(&shape, &fill)?)?;
    let b = tape.mul_const(gt, plane_broadcast(&shape, &keep)?)?;
    tape.add(a, b)
}

/// `mean|Ψ(I_out) − Ψ(I_gt)| + mean|Ψ(I_gen) − Ψ(I_gt)|`, with `I_gen` the
/// valid-pixel composite.
pub fn perceptual_loss<T: Scalar>(
    tape: &mut Tape<T>,
    net: &FixedFeatureNet<T>,
    out: Var,
    gt: Var,
    holes: &[&Mask],
) -> Result<Var> {
    let w = net.bind(tape);
    let gen = composite_on_tape(tape, out, gt, holes)?;
    let f_out = net.forward(tape, &w, out)?;
    let f_gt = net.forward(tape, &w, gt)?;
    let f_gen = net.forward(tape, &w, gen)?;
    let a = feature_distance(tape, &f_out, &f_gt)?;
    let b = feature_distance(tape, &f_gen, &f_gt)?;
    tape.add(a, b)
}

/// `(1/(rows·cols)) Σ p (ln p − ln q)` with `q` on the tape, both clamped.
fn kl_term<T: Scalar>(tape: &mut Tape<T>, target: &Tensor<T>, q: Var) -> Result<Var> {
    if target.shape() != tape.shape(q) {
        return Err(shape_err(
            "attention_kl",
            format!(
                "oracle map {:?} vs masked-pass map {:?}",
                target.shape(),
                tape.shape(q)
            ),
        ));
    }
    let eps = lit::<T>(KL_CLAMP);
    let ln_p = target.map(|v| v.max(eps).ln());
    let qc = tape.clamp_min(q, eps);
    let ln_q = tape.ln(qc);
    let ln_p = tape.constant(ln_p);
    let diff = tape.sub(ln_p, ln_q)?;
    let w = tape.mul_const(diff, target.clone())?;
    let s = tape.sum(w);
    Ok(tape.scalar_mul(s, lit(1.0 / target.len() as f64)))
}

/// Attention supervision at one level, averaged over the batch.
///
/// Branch pairs missing on either side contribute nothing; a level mismatch
/// drops the sample with a logged notice.
pub fn attention_kl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    oracle: &[OracleMaps<T>],
    maps: &[AttentionMaps],
) -> Result<Var> {
    if oracle.len() != maps.len() {
        return Err(shape_err(
            "attention_kl",
            format!("{} oracle samples vs {}", oracle.len(), maps.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (o, m) in oracle.iter().zip(maps) {
        if o.level != m.level {
            info!(
                "attention KL: oracle level {} vs masked level {}, term skipped",
                o.level, m.level
            );
            continue;
        }
        let pairs = [(&o.cross, m.cross), (&o.self_attn, m.self_attn)];
        for (target, q) in pairs {
            match (target, q) {
                (Some(t), Some(q)) => {
                    let term = kl_term(tape, t, q)?;
                    total = Some(match total {
                        Some(acc) => tape.add(acc, term)?,
                        None => term,
                    });
                }
                (None, None) => {}
                _ => info!("attention KL: branch present in only one pass, term skipped"),
            }
        }
    }
    Ok(match total {
        Some(t) => tape.scalar_mul(t, lit(1.0 / maps.len().max(1) as f64)),
        None => tape.constant(Tensor::scalar(T::zero())),
    })
}

/// Anything mapping an image crop to a patch score map.
pub trait PatchCritic<T: Scalar> {
    fn score(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var>;
}

impl<T: Scalar> PatchCritic<T> for Critic<T> {
    fn score(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        self.forward(tape, vars, x)
    }
}

/// Crop rectangles judged by one critic, per sample. The local subdivision
/// critic gets four rectangles per sample; every other critic gets one.
pub type CropPlan = Vec<Vec<Rect>>;

/// Critic loss with gradient penalty, averaged over the batch and summed
/// over each sample's crops.
///
/// `fake` is the detached generator output. Interpolates are formed at full
/// resolution with one `t ~ U(0, 1)` per sample and then cropped; the
/// penalty differentiates the critic with respect to the cropped
/// interpolate.
#[allow(clippy::too_many_arguments)]
pub fn critic_loss_with_gp<T: Scalar, C: PatchCritic<T> + ?Sized, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    critic: &C,
    vars: &[Var],
    crops: &CropPlan,
    fake: &Tensor<T>,
    real: &Tensor<T>,
    gamma: f64,
    rng: &mut R,
) -> Result<Var> {
    if fake.shape() != real.shape() {
        return Err(shape_err(
            "critic_loss",
            format!("{:?} vs {:?}", fake.shape(), real.shape()),
        ));
    }
    let b = fake.shape()[0];
    if crops.len() != b {
        return Err(shape_err(
            "critic_loss",
            format!("{} crop lists for batch {b}", crops.len()),
        ));
    }
    let fake_v = tape.constant(fake.clone());
    let real_v = tape.constant(real.clone());
    let mut total: Option<Var> = None;
    for (n, rects) in crops.iter().enumerate() {
        let t: f64 = rng.random();
        let (tt, one_minus) = (lit::<T>(t), lit::<T>(1.0 - t));
        let hat = real
            .sample(n)
            .zip_map(&fake.sample(n), |r, f| tt * r + one_minus * f)?;
        let hat_v = tape.constant(hat);
        for &rect in rects {
            let fc = tape.crop(fake_v, n, rect)?;
            let rc = tape.crop(real_v, n, rect)?;
            let hc = tape.crop(hat_v, 0, rect)?;
            let hc_value = tape.value(hc).clone();
            let hc = tape.param(hc_value);
            let sf = critic.score(tape, vars, fc)?;
            let sf = tape.mean(sf);
            let sr = critic.score(tape, vars, rc)?;
            let sr = tape.mean(sr);
            let sh = critic.score(tape, vars, hc)?;
            let sh = tape.mean(sh);
            let g = tape.grad(sh, &[hc], true)?[0]
                .ok_or_else(|| invalid("critic ignores its input"))?;
            let sq = tape.square(g);
            let n2 = tape.sum(sq);
            let norm = tape.sqrt(n2);
            let d = tape.add_scalar(norm, -T::one());
            let pen = tape.square(d);
            let pen = tape.scalar_mul(pen, lit(gamma));
            let w = tape.sub(sf, sr)?;
            let term = tape.add(w, pen)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    let total = total.ok_or_else(|| invalid("critic has no crops"))?;
    Ok(tape.scalar_mul(total, lit(1.0 / b as f64)))
}

/// `−Σᵢ mean Dᵢ(Cᵢ(I_out))`, batch-averaged; crops of one critic are summed.
pub fn generator_adv_loss<T: Scalar>(
    tape: &mut Tape<T>,
    critics: &[(&dyn PatchCritic<T>, &[Var], &CropPlan)],
    out: Var,
) -> Result<Var> {
    let b = tape.shape(out)[0];
    let mut total: Option<Var> = None;
    for &(critic, vars, crops) in critics {
        if crops.len() != b {
            return Err(shape_err(
                "generator_adv",
                format!("{} crop lists for batch {b}", crops.len()),
            ));
        }
        for (n, rects) in crops.iter().enumerate() {
            for &rect in rects {
                let c = tape.crop(out, n, rect)?;
                let s = critic.score(tape, vars, c)?;
                let s = tape.mean(s);
                total = Some(match total {
                    Some(acc) => tape.add(acc, s)?,
                    None => s,
                });
            }
        }
    }
    Ok(match total {
        Some(t) => tape.scalar_mul(t, lit(-1.0 / b as f64)),
        None => tape.constant(Tensor::scalar(T::zero())),
    })
}

/// Components of the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub recon: Var,
    pub kl: Var,
    pub perceptual: Var,
    pub adversarial: Var,
}

/// `λ_r·L_r + λ_KL·L_KL + λ_p·L_p + λ_G·L_G`. Terms with zero weight are
/// left out of the graph entirely.
pub fn total_generator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    parts: &LossParts,
    w: &LossWeights,
) -> Result<Var> {
    let terms = [
        ("recon", parts.recon, w.lambda_r),
        ("kl", parts.kl, w.lambda_kl),
        ("perceptual", parts.perceptual, w.lambda_p),
        ("adversarial", parts.adversarial, w.lambda_g),
    ];
    let mut total: Option<Var> = None;
    for (name, v, lambda) in terms {
        if !tape.value(v).item().is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
        if lambda == 0.0 {
            continue;
        }
        let s = tape.scalar_mul(v, lit(lambda));
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}
