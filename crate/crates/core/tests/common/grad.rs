//! Central-difference gradient checks on the tape ops, the DSA block and the
//! losses, with the small models they run on.

#![allow(dead_code)]

use std::sync::Arc;

use oracle_attn::dsa::{dsa_forward, oracle_maps};
use oracle_attn::losses::{
    attention_kl_loss, critic_loss_with_gp, generator_adv_loss, perceptual_loss, recon_loss,
    total_generator_loss, CropPlan, LossParts, LossWeights, MaskBundle, PatchCritic,
};
use oracle_attn::mask::{build_pyramid, Mask, Rect};
use oracle_attn::nn::{Critic, CriticConfig, CriticDepth, FixedFeatureNet, FEATURE_SEED};
use oracle_attn::tensor::gradcheck::grad_check;
use oracle_attn::tensor::ConvSpec;
use oracle_attn::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dsa_ref::instance;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with kinks or poles at 0.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let m = rng.random_range(0.2..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
    .unwrap()
}

pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, 0.3, 2.0)
}

pub fn rect_mask(side: usize, r: Rect) -> Mask {
    Mask::with_hole(side, side, r).unwrap()
}

/// Reduces an op output to a scalar with random weights so every output
/// element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> oracle_attn::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Checks one op's first-order gradient against central differences.
///
/// Returns `max |analytic - numeric| / (1e-3 + |numeric|)`; the absolute
/// floor keeps components that happen to land near zero from dominating.
pub fn check_op<F>(inputs: Vec<Tensor<f64>>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> oracle_attn::Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone())).collect();
        let y = f(&mut tape, &vars).unwrap();
        let root = weighted_sum(&mut tape, y, seed).unwrap();
        (tape, vars, root)
    };
    let (mut tape, vars, root) = eval(&inputs);
    let grads = tape.backward(root).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, v);
        for i in 0..inputs[k].len() {
            let mut probe = inputs.clone();
            probe[k].data_mut()[i] += h;
            let (t1, _, r1) = eval(&probe);
            probe[k].data_mut()[i] -= 2.0 * h;
            let (t2, _, r2) = eval(&probe);
            let numeric = (t1.value(r1).item() - t2.value(r2).item()) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / (1e-3 + numeric.abs()));
        }
    }
    worst
}

/// One gradient check per tape op at sizes drawn from `seed`.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (m, k, n) = (
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(1..4),
    );

    let a = random(&mut rng, &[m, k]);
    let b = random(&mut rng, &[k, n]);
    out.push((
        "matmul",
        check_op(vec![a, b], seed, |t, p| t.matmul(p[0], p[1])),
    ));
    for (name, ta, tb) in [
        ("matmul_t(a^T)", true, false),
        ("matmul_t(b^T)", false, true),
        ("matmul_t(a^T b^T)", true, true),
    ] {
        let a = random(&mut rng, &if ta { [k, m] } else { [m, k] });
        let b = random(&mut rng, &if tb { [n, k] } else { [k, n] });
        out.push((
            name,
            check_op(vec![a, b], seed, |t, p| t.matmul_t(p[0], p[1], ta, tb)),
        ));
    }

    for (name, kk, stride, pad) in [
        ("conv2d", 3, 1, 1),
        ("conv2d(stride 2)", 3, 2, 1),
        ("conv2d(4x4)", 4, 2, 1),
        ("conv2d(1x1)", 1, 1, 0),
    ] {
        let x = random(&mut rng, &[2, 2, 6, 6]);
        let w = random(&mut rng, &[3, 2, kk, kk]);
        out.push((
            name,
            check_op(vec![x, w], seed, |t, p| {
                t.conv2d(p[0], p[1], ConvSpec::new(stride, pad))
            }),
        ));
    }

    let x = random(&mut rng, &[2, 3, 2, 2]);
    let bias = random(&mut rng, &[3]);
    out.push((
        "add_channel_bias",
        check_op(vec![x.clone(), bias], seed, |t, p| {
            t.add_channel_bias(p[0], p[1])
        }),
    ));
    out.push((
        "channel_sum",
        check_op(vec![x.clone()], seed, |t, p| t.channel_sum(p[0])),
    ));
    out.push((
        "sum_per_sample",
        check_op(vec![x.clone()], seed, |t, p| t.sum_per_sample(p[0])),
    ));

    let len = rng.random_range(2..6);
    let a = random(&mut rng, &[len]);
    let b = positive(&mut rng, &[len]);
    let binary: [(
        &str,
        fn(&mut Tape<f64>, Var, Var) -> oracle_attn::Result<Var>,
    ); 5] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
        ("scale_by", |t, a, b| {
            let s = t.sum(b);
            t.scale_by(s, a)
        }),
    ];
    for (name, f) in binary {
        out.push((
            name,
            check_op(vec![a.clone(), b.clone()], seed, |t, p| f(t, p[0], p[1])),
        ));
    }

    let x = random_away_from_zero(&mut rng, &[len]);
    let pos = positive(&mut rng, &[len]);
    let half = Tensor::full(&[len], 0.5);
    let unary: [(
        &str,
        bool,
        Box<dyn Fn(&mut Tape<f64>, Var) -> oracle_attn::Result<Var>>,
    ); 13] = [
        (
            "scalar_mul",
            false,
            Box::new(|t, v| Ok(t.scalar_mul(v, 1.7))),
        ),
        (
            "add_scalar",
            false,
            Box::new(|t, v| {
                let s = t.square(v);
                Ok(t.add_scalar(s, -0.3))
            }),
        ),
        (
            "mul_const",
            false,
            Box::new(move |t, v| t.mul_const(v, half.clone())),
        ),
        (
            "sum",
            false,
            Box::new(|t, v| {
                let s = t.sum(v);
                t.scale_by(s, v)
            }),
        ),
        (
            "mean",
            false,
            Box::new(|t, v| {
                let s = t.mean(v);
                t.scale_by(s, v)
            }),
        ),
        ("square", false, Box::new(|t, v| Ok(t.square(v)))),
        ("sqrt", true, Box::new(|t, v| Ok(t.sqrt(v)))),
        ("abs", false, Box::new(|t, v| Ok(t.abs(v)))),
        ("ln", true, Box::new(|t, v| Ok(t.ln(v)))),
        ("relu", false, Box::new(|t, v| Ok(t.relu(v)))),
        (
            "leaky_relu",
            false,
            Box::new(|t, v| Ok(t.leaky_relu(v, 0.2))),
        ),
        ("sigmoid", false, Box::new(|t, v| Ok(t.sigmoid(v)))),
        ("clamp_min", false, Box::new(|t, v| Ok(t.clamp_min(v, 0.1)))),
    ];
    for (name, needs_positive, f) in unary {
        let input = if needs_positive {
            pos.clone()
        } else {
            x.clone()
        };
        out.push((name, check_op(vec![input], seed, |t, p| f(t, p[0]))));
    }

    let (r, c) = (rng.random_range(1..4), rng.random_range(2..5));
    let logits = random(&mut rng, &[r, c]);
    out.push((
        "softmax_rows",
        check_op(vec![logits], seed, |t, p| t.softmax_rows(p[0])),
    ));

    let x = random(&mut rng, &[3, 2, 2, 3]);
    let g = positive(&mut rng, &[2]);
    let be = random(&mut rng, &[2]);
    let rm = random(&mut rng, &[2]);
    let rv = positive(&mut rng, &[2]);
    for (name, running) in [
        ("batch_norm(batch)", None),
        ("batch_norm(running)", Some((rm.data(), rv.data()))),
    ] {
        let e = check_op(vec![x.clone(), g.clone(), be.clone()], seed, |t, p| {
            Ok(t.batch_norm(p[0], p[1], p[2], running, 1e-5)?.0)
        });
        out.push((name, e));
    }

    let small = random(&mut rng, &[2, 2, 2, 2]);
    let big = random(&mut rng, &[2, 3, 4, 4]);
    out.push((
        "upsample2x",
        check_op(vec![small.clone()], seed, |t, p| t.upsample2x(p[0])),
    ));
    let other = random(&mut rng, &[2, 3, 2, 2]);
    out.push((
        "concat_channels",
        check_op(vec![small.clone(), other], seed, |t, p| {
            t.concat_channels(&[p[0], p[1]])
        }),
    ));
    out.push((
        "slice_channels",
        check_op(vec![big.clone()], seed, |t, p| t.slice_channels(p[0], 1, 2)),
    ));
    out.push((
        "crop",
        check_op(vec![big.clone()], seed, |t, p| {
            t.crop(p[0], 1, Rect::new(1, 0, 2, 3))
        }),
    ));
    out.push((
        "sample_to_rows",
        check_op(vec![big.clone()], seed, |t, p| t.sample_to_rows(p[0], 1)),
    ));
    let rows = random(&mut rng, &[16, 3]);
    out.push((
        "gather_rows",
        check_op(vec![rows.clone()], seed, |t, p| {
            t.gather_rows(p[0], Arc::new(vec![3, 0, 7, 3]))
        }),
    ));
    let three = random(&mut rng, &[3, 3]);
    out.push((
        "scatter_rows",
        check_op(vec![three], seed, |t, p| {
            t.scatter_rows(p[0], Arc::new(vec![1, 2, 5]), 8)
        }),
    ));
    out.push((
        "rows_to_sample",
        check_op(vec![big.clone(), rows], seed, |t, p| {
            t.rows_to_sample(p[1], 1, [2, 3, 4, 4])
        }),
    ));
    out.push((
        "reshape",
        check_op(vec![big.clone()], seed, |t, p| {
            let r = t.reshape(p[0], &[6, 16])?;
            t.softmax_rows(r)
        }),
    ));
    out
}

pub const GRAD_TOL: f64 = 1e-3;

/// DSA parameters under a random linear readout of the block output.
pub fn dsa_param_grad_err(seed: u64) -> f64 {
    let inst = instance::<f64>(30 + seed, 4, 4, 2);
    let lv: Vec<_> = inst.pyramids.iter().map(|p| &p.levels[0]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wts = random(&mut rng, inst.x.shape());
    grad_check(
        |tape, vars| {
            let x = tape.constant(inst.x.clone());
            let (z, _) = dsa_forward(tape, &inst.params, vars, x, &lv)?;
            let w = tape.constant(wts.clone());
            let p = tape.mul(z, w)?;
            Ok(tape.sum(p))
        },
        &inst.store,
        1e-5,
    )
    .unwrap()
}

// A single 3×3 convolution with a sigmoid stands in for the generator.

pub struct Toy {
    pub store: ParamStore<f64>,
    pub input: Tensor<f64>,
    pub gt: Tensor<f64>,
    pub holes: Vec<Mask>,
}

pub fn toy(seed: u64, side: usize) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store
        .add("w", uniform(&mut rng, &[3, 3, 3, 3], -0.4, 0.4))
        .unwrap();
    store.add("b", uniform(&mut rng, &[3], -0.2, 0.2)).unwrap();
    Toy {
        store,
        input: uniform(&mut rng, &[2, 3, side, side], 0.0, 1.0),
        gt: uniform(&mut rng, &[2, 3, side, side], 0.0, 1.0),
        holes: vec![
            rect_mask(side, Rect::new(2, 3, side / 2, side / 2)),
            rect_mask(side, Rect::new(side / 3, 1, side / 2, side / 2 + 2)),
        ],
    }
}

pub fn toy_output(
    tape: &mut Tape<f64>,
    vars: &[Var],
    input: &Tensor<f64>,
) -> oracle_attn::Result<Var> {
    let x = tape.constant(input.clone());
    let y = tape.conv2d(x, vars[0], ConvSpec::new(1, 1))?;
    let y = tape.add_channel_bias(y, vars[1])?;
    Ok(tape.sigmoid(y))
}

pub fn toy_critics(seed: u64) -> Vec<Critic<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..7)
        .map(|i| {
            Critic::build(
                CriticConfig::new(2, CriticDepth::Toy),
                &format!("c{i}"),
                &mut rng,
            )
            .unwrap()
        })
        .collect()
}

/// Crops of a 24×24 batch of two for the seven critics.
pub fn toy_plans() -> Vec<CropPlan> {
    let full = vec![Rect::new(0, 0, 24, 24)];
    let local = vec![Rect::new(2, 3, 20, 18)];
    let quads = Rect::new(0, 0, 24, 24).quadrants().unwrap().to_vec();
    let comp = vec![Rect::new(5, 6, 12, 12)];
    let one = |r: Vec<Rect>| vec![r.clone(), r];
    vec![
        one(full),
        one(local),
        one(quads),
        one(comp.clone()),
        one(comp.clone()),
        one(comp.clone()),
        one(comp),
    ]
}

fn adv_term(
    tape: &mut Tape<f64>,
    critics: &[Critic<f64>],
    plans: &[CropPlan],
    out: Var,
) -> oracle_attn::Result<Var> {
    let cvars: Vec<Vec<Var>> = critics.iter().map(|c| c.params.bind_const(tape)).collect();
    let list: Vec<(&dyn PatchCritic<f64>, &[Var], &CropPlan)> = critics
        .iter()
        .zip(&cvars)
        .zip(plans)
        .map(|((c, v), p)| (c as &dyn PatchCritic<f64>, v.as_slice(), p))
        .collect();
    generator_adv_loss(tape, &list, out)
}

pub fn recon_grad_err(seed: u64) -> f64 {
    let m = toy(seed, 8);
    let bundles: Vec<MaskBundle> = m
        .holes
        .iter()
        .map(|h| MaskBundle::new(h.clone(), vec![rect_mask(8, Rect::new(1, 1, 3, 3)); 4]))
        .collect();
    grad_check(
        |tape, vars| {
            let out = toy_output(tape, vars, &m.input)?;
            let gt = tape.constant(m.gt.clone());
            recon_loss(tape, out, gt, &bundles)
        },
        &m.store,
        1e-6,
    )
    .unwrap()
}

pub fn perceptual_grad_err(seed: u64) -> f64 {
    let m = toy(seed, 16);
    let net = FixedFeatureNet::<f64>::new(FEATURE_SEED);
    let holes: Vec<&Mask> = m.holes.iter().collect();
    grad_check(
        |tape, vars| {
            let out = toy_output(tape, vars, &m.input)?;
            let gt = tape.constant(m.gt.clone());
            perceptual_loss(tape, &net, out, gt, &holes)
        },
        &m.store,
        1e-6,
    )
    .unwrap()
}

/// KL between oracle and predicted maps, differentiated through the DSA
/// projections that produce the predicted maps.
pub fn attention_kl_grad_err(seed: u64) -> f64 {
    let inst = instance::<f64>(seed, 4, 4, 2);
    let mask_a = rect_mask(4, Rect::new(0, 1, 2, 2));
    let mask_b = rect_mask(4, Rect::new(1, 0, 3, 2));
    let pyr = [
        build_pyramid(&mask_a, &[4]).unwrap(),
        build_pyramid(&mask_b, &[4]).unwrap(),
    ];
    let lv = [&pyr[0].levels[0], &pyr[1].levels[0]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let gt = uniform(&mut rng, inst.x.shape(), -1.0, 1.0);
    let oracle = oracle_maps(&inst.params, &inst.store, &gt, &lv).unwrap();
    grad_check(
        |tape, vars| {
            let x = tape.constant(inst.x.clone());
            let maps = inst.params.maps_only(tape, vars, x, &lv)?;
            attention_kl_loss(tape, &oracle, &maps)
        },
        &inst.store,
        1e-6,
    )
    .unwrap()
}

pub fn adversarial_grad_err(seed: u64) -> f64 {
    let m = toy(seed, 24);
    let critics = toy_critics(seed + 1);
    let plans = toy_plans();
    grad_check(
        |tape, vars| {
            let out = toy_output(tape, vars, &m.input)?;
            adv_term(tape, &critics, &plans, out)
        },
        &m.store,
        1e-6,
    )
    .unwrap()
}

/// Critic objective with the gradient penalty, differentiated with respect
/// to the critic weights; the penalty's input gradient is itself on the tape.
pub fn gradient_penalty_grad_err(seed: u64) -> f64 {
    let critic = &toy_critics(seed)[2];
    let plan = &toy_plans()[2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let fake = uniform(&mut rng, &[2, 3, 24, 24], 0.0, 1.0);
    let real = uniform(&mut rng, &[2, 3, 24, 24], 0.0, 1.0);
    grad_check(
        |tape, vars| {
            let mut t_rng = ChaCha8Rng::seed_from_u64(seed + 2);
            critic_loss_with_gp(tape, critic, vars, plan, &fake, &real, 10.0, &mut t_rng)
        },
        &critic.params,
        1e-6,
    )
    .unwrap()
}

pub fn total_objective_grad_err(seed: u64) -> f64 {
    let m = toy(seed, 24);
    let net = FixedFeatureNet::<f64>::new(FEATURE_SEED);
    let critics = toy_critics(seed + 1);
    let plans = toy_plans();
    let holes: Vec<&Mask> = m.holes.iter().collect();
    let bundles: Vec<MaskBundle> = m
        .holes
        .iter()
        .map(|h| MaskBundle::new(h.clone(), vec![]))
        .collect();
    grad_check(
        |tape, vars| {
            let out = toy_output(tape, vars, &m.input)?;
            let gt = tape.constant(m.gt.clone());
            let recon = recon_loss(tape, out, gt, &bundles)?;
            let perceptual = perceptual_loss(tape, &net, out, gt, &holes)?;
            let adversarial = adv_term(tape, &critics, &plans, out)?;
            let kl = tape.constant(Tensor::scalar(0.0));
            let parts = LossParts {
                recon,
                kl,
                perceptual,
                adversarial,
            };
            total_generator_loss(tape, &parts, &LossWeights::default())
        },
        &m.store,
        1e-6,
    )
    .unwrap()
}

/// `D(x) = Σ w ⊙ x` with `w` the critic's only parameter.
pub struct LinearCritic;

impl PatchCritic<f64> for LinearCritic {
    fn score(&self, tape: &mut Tape<f64>, vars: &[Var], x: Var) -> oracle_attn::Result<Var> {
        let p = tape.mul(x, vars[0])?;
        let s = tape.sum(p);
        tape.reshape(s, &[1, 1, 1, 1])
    }
}

/// Critic loss of [`LinearCritic`] over whole-image crops.
pub fn linear_gp(w: &Tensor<f64>, fake: &Tensor<f64>, real: &Tensor<f64>) -> f64 {
    let b = fake.shape()[0];
    let side = fake.shape()[2];
    let crops: CropPlan = vec![vec![Rect::new(0, 0, side, side)]; b];
    let mut tape = Tape::<f64>::new();
    let wv = tape.param(w.clone());
    let l = critic_loss_with_gp(
        &mut tape,
        &LinearCritic,
        &[wv],
        &crops,
        fake,
        real,
        10.0,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    tape.value(l).item()
}
