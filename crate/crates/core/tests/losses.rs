mod common;

use common::grad::{
    adversarial_grad_err, attention_kl_grad_err, gradient_penalty_grad_err, linear_gp,
    perceptual_grad_err, recon_grad_err, rect_mask, total_objective_grad_err, toy_critics,
    toy_plans, uniform, GRAD_TOL,
};
use oracle_attn::dsa::{AttentionMaps, OracleMaps};
use oracle_attn::error::Error;
use oracle_attn::losses::{
    attention_kl_loss, generator_adv_loss, perceptual_loss, recon_loss, total_generator_loss,
    CropPlan, LossParts, LossWeights, MaskBundle, PatchCritic, KL_CLAMP,
};
use oracle_attn::mask::{composite_valid, Mask, Rect};
use oracle_attn::nn::{FixedFeatureNet, FEATURE_SEED};
use oracle_attn::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn default_weights() {
    let w = LossWeights::default();
    assert_eq!(
        (w.lambda_r, w.lambda_kl, w.lambda_p, w.lambda_g, w.gamma),
        (10.0, 2.0, 1.0, 1.0, 10.0)
    );
    assert!(LossWeights {
        lambda_p: -1.0,
        ..w
    }
    .validate()
    .is_err());
    assert!(LossWeights {
        gamma: f64::NAN,
        ..w
    }
    .validate()
    .is_err());
}

/// Hole rows 0–1, cols 0–2; one component over rows 1–2, cols 2–3.
fn weight_bundle() -> MaskBundle {
    let hole = rect_mask(4, Rect::new(0, 0, 2, 3));
    let comp = rect_mask(4, Rect::new(1, 2, 2, 2));
    let empty = Mask::all_valid(4, 4);
    MaskBundle::new(hole, vec![comp, empty.clone(), empty.clone(), empty])
}

#[test]
fn weight_map_values() {
    let w = weight_bundle().weight_map().unwrap();
    #[rustfmt::skip]
    let expect = [
        2, 2, 2, 1,
        2, 2, 3, 2,
        1, 1, 2, 2,
        1, 1, 1, 1,
    ];
    assert_eq!(w, expect);
    assert_eq!(w[0], 2); // hole only
    assert_eq!(w[6], 3); // hole and component
    assert_eq!(w[7], 2); // valid pixel inside a component
    assert_eq!(w[15], 1);
}

#[test]
fn recon_loss_matches_hand_computation() {
    let bundle = weight_bundle();
    let w = bundle.weight_map().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = uniform(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
    let out = uniform(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
    let mut expect = 0.0;
    for ch in 0..3 {
        for p in 0..16 {
            let i = ch * 16 + p;
            expect += f64::from(w[p]) * (out.data()[i] - gt.data()[i]).abs();
        }
    }
    expect /= 48.0;
    let mut tape = Tape::<f64>::new();
    let o = tape.constant(out);
    let g = tape.constant(gt);
    let l = recon_loss(&mut tape, o, g, &[bundle]).unwrap();
    assert!((tape.value(l).item() - expect).abs() <= 1e-12);
}

#[test]
fn recon_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = uniform(&mut rng, &[2, 3, 4, 4], 0.2, 0.8);
    let bundles = vec![weight_bundle(), weight_bundle()];
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(gt.clone());
    let l = recon_loss(&mut tape, g, g, &bundles).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let valid = MaskBundle::new(Mask::all_valid(4, 4), vec![Mask::all_valid(4, 4); 4]);
    let shifted = tape.constant(gt.map(|v| v + 0.1));
    let l = recon_loss(&mut tape, shifted, g, &[valid.clone(), valid]).unwrap();
    assert!((tape.value(l).item() - 0.1).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_is_one_plus_covering_count(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<Mask> = (0..5)
            .map(|_| Mask::from_bits(6, 6, (0..36).map(|_| u8::from(rng.random_bool(0.6))).collect()).unwrap())
            .collect();
        let bundle = MaskBundle::new(masks[0].clone(), masks[1..].to_vec());
        let w = bundle.weight_map().unwrap();
        for p in 0..36 {
            let covered = masks.iter().filter(|m| m.bits()[p] == 0).count() as u8;
            prop_assert_eq!(w[p], 1 + covered);
            prop_assert!((1..=6).contains(&w[p]));
        }
    }
}

fn perceptual(out: &Tensor<f64>, gt: &Tensor<f64>, holes: &[&Mask]) -> f64 {
    let net = FixedFeatureNet::<f64>::new(FEATURE_SEED);
    let mut tape = Tape::<f64>::new();
    let o = tape.constant(out.clone());
    let g = tape.constant(gt.clone());
    let l = perceptual_loss(&mut tape, &net, o, g, holes).unwrap();
    tape.value(l).item()
}

/// Mean absolute feature distance computed directly from the stage
/// activations.
fn feature_l1(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let net = FixedFeatureNet::<f64>::new(FEATURE_SEED);
    let mut tape = Tape::<f64>::no_grad();
    let w = net.bind(&mut tape);
    let xa = tape.constant(a.clone());
    let xb = tape.constant(b.clone());
    let fa = net.forward(&mut tape, &w, xa).unwrap();
    let fb = net.forward(&mut tape, &w, xb).unwrap();
    let (mut s, mut n) = (0.0, 0usize);
    for (p, q) in fa.iter().zip(&fb) {
        for (x, y) in tape.value(*p).data().iter().zip(tape.value(*q).data()) {
            s += (x - y).abs();
            n += 1;
        }
    }
    s / n as f64
}

#[test]
fn perceptual_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let out = uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let hole = rect_mask(16, Rect::new(4, 4, 8, 6));
    assert_eq!(perceptual(&gt, &gt, &[&hole]), 0.0);

    let valid = Mask::all_valid(16, 16);
    let only_first = perceptual(&out, &gt, &[&valid]);
    assert!((only_first - feature_l1(&out, &gt)).abs() < 1e-12);

    let gen = composite_valid(&out, &gt, &hole).unwrap();
    let expect = feature_l1(&out, &gt) + feature_l1(&gen, &gt);
    assert!((perceptual(&out, &gt, &[&hole]) - expect).abs() < 1e-12);
    assert!(expect > 0.0);
}

/// Explicit double loop over both maps, including the clamp.
fn kl_reference(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let (rows, cols) = (p.len(), p[0].len());
    let mut s = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let a = p[i][j];
            let b = q[i][j];
            s += a * (a.max(KL_CLAMP).ln() - b.max(KL_CLAMP).ln());
        }
    }
    s / (rows * cols) as f64
}

fn random_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize, zeros: bool) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let mut r: Vec<f64> = (0..cols)
                .map(|_| {
                    if zeros && rng.random_bool(0.2) {
                        0.0
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
                .collect();
            if r.iter().all(|&v| v == 0.0) {
                r[0] = 1.0;
            }
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn flat(m: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(&[m.len(), m[0].len()], m.concat()).unwrap()
}

fn kl_on_tape(
    pairs: &[(
        Option<Vec<Vec<f64>>>,
        Option<Vec<Vec<f64>>>,
        Option<Vec<Vec<f64>>>,
        Option<Vec<Vec<f64>>>,
    )],
) -> f64 {
    let mut tape = Tape::<f64>::new();
    let mut oracle = Vec::new();
    let mut maps = Vec::new();
    for (pc, qc, ps, qs) in pairs {
        oracle.push(OracleMaps {
            level: 4,
            cross: pc.as_deref().map(flat),
            self_attn: ps.as_deref().map(flat),
        });
        let cross = qc.as_deref().map(|m| tape.param(flat(m)));
        let self_attn = qs.as_deref().map(|m| tape.param(flat(m)));
        maps.push(AttentionMaps {
            level: 4,
            cross,
            self_attn,
        });
    }
    let l = attention_kl_loss(&mut tape, &oracle, &maps).unwrap();
    tape.value(l).item()
}

#[test]
fn kl_single_row_example() {
    let p = vec![vec![1.0, 0.0]];
    let q = vec![vec![0.5, 0.5]];
    let v = kl_on_tape(&[(Some(p), Some(q), None, None)]);
    assert!((v - 2f64.ln() / 2.0).abs() < 1e-15, "{v}");
}

#[test]
fn kl_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (n, m) = (rng.random_range(1..6), rng.random_range(1..6));
        let pc = random_stochastic(&mut rng, n, m, true);
        let qc = random_stochastic(&mut rng, n, m, true);
        let ps = random_stochastic(&mut rng, n, n, true);
        let qs = random_stochastic(&mut rng, n, n, false);
        let pc2 = random_stochastic(&mut rng, 2, 3, false);
        let qc2 = random_stochastic(&mut rng, 2, 3, false);
        let expect =
            (kl_reference(&pc, &qc) + kl_reference(&ps, &qs) + kl_reference(&pc2, &qc2)) / 2.0;
        let got = kl_on_tape(&[
            (Some(pc), Some(qc), Some(ps), Some(qs)),
            (Some(pc2), Some(qc2), None, None),
        ]);
        assert!(
            (got - expect).abs() <= 1e-10 * expect.abs().max(1.0),
            "{got} vs {expect}"
        );
        assert!(got >= -1e-9);
    }
}

#[test]
fn kl_missing_branch_contributes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_stochastic(&mut rng, 3, 4, false);
    let q = random_stochastic(&mut rng, 3, 4, false);
    let s = random_stochastic(&mut rng, 3, 3, false);
    let with_one_sided = kl_on_tape(&[(Some(p.clone()), Some(q.clone()), Some(s), None)]);
    assert_eq!(with_one_sided, kl_reference(&p, &q));
}

#[test]
fn kl_level_mismatch_is_skipped() {
    let mut tape = Tape::<f64>::new();
    let m = tape.param(flat(&[vec![0.5, 0.5]]));
    let oracle = [OracleMaps {
        level: 8,
        cross: Some(flat(&[vec![1.0, 0.0]])),
        self_attn: None,
    }];
    let maps = [AttentionMaps {
        level: 4,
        cross: Some(m),
        self_attn: None,
    }];
    let l = attention_kl_loss(&mut tape, &oracle, &maps).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_stochastic(&mut rng, n, m, true);
        let q = random_stochastic(&mut rng, n, m, true);
        let s = random_stochastic(&mut rng, n, n, true);
        prop_assert_eq!(kl_on_tape(&[(Some(p.clone()), Some(p.clone()), Some(s.clone()), Some(s))]), 0.0);
        prop_assert!(kl_on_tape(&[(Some(p), Some(q), None, None)]) >= -1e-9);
    }
}

#[test]
fn linear_critic_gradient_penalty() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let raw = uniform(&mut rng, &[1, 3, 2, 2], -1.0, 1.0);
    let norm = raw.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let w = raw.map(|v| 2.0 * v / norm);
    let img = uniform(&mut rng, &[2, 3, 2, 2], 0.0, 1.0);
    let gp = linear_gp(&w, &img, &img);
    assert!((gp - 10.0).abs() <= 1e-6, "{gp}");

    let unit = raw.map(|v| v / norm);
    assert!(linear_gp(&unit, &img, &img).abs() <= 1e-12);
}

#[test]
fn critic_loss_drops_when_real_scores_rise() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = uniform(&mut rng, &[1, 3, 2, 2], 0.1, 1.0);
    let fake = uniform(&mut rng, &[1, 3, 2, 2], 0.0, 0.5);
    let real = uniform(&mut rng, &[1, 3, 2, 2], 0.0, 0.5);
    let brighter = real.map(|v| v + 0.3);
    assert!(linear_gp(&w, &fake, &brighter) < linear_gp(&w, &fake, &real));
}

/// Constant score map; ignores its input.
struct ConstCritic(f64);

impl PatchCritic<f64> for ConstCritic {
    fn score(&self, tape: &mut Tape<f64>, _: &[Var], _: Var) -> oracle_attn::Result<Var> {
        Ok(tape.constant(Tensor::full(&[1, 1, 2, 2], self.0)))
    }
}

#[test]
fn adversarial_loss_examples() {
    let mut tape = Tape::<f64>::new();
    let out = tape.constant(Tensor::full(&[2, 3, 8, 8], 0.5));
    let crops: CropPlan = vec![vec![Rect::new(0, 0, 8, 8)]; 2];
    let zero = ConstCritic(0.0);
    let c = ConstCritic(1.75);
    let zeros: Vec<(&dyn PatchCritic<f64>, &[Var], &CropPlan)> =
        (0..7).map(|_| (&zero as _, &[][..], &crops)).collect();
    let l = generator_adv_loss(&mut tape, &zeros, out).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let mut one = zeros.clone();
    one[3] = (&c, &[], &crops);
    let l = generator_adv_loss(&mut tape, &one, out).unwrap();
    assert_eq!(tape.value(l).item(), -1.75);
}

#[test]
fn adversarial_loss_matches_per_critic_sums() {
    let critics = toy_critics(8);
    let plans = toy_plans();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = uniform(&mut rng, &[2, 3, 24, 24], 0.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let out = tape.constant(img.clone());
    let vars: Vec<Vec<Var>> = critics
        .iter()
        .map(|c| c.params.bind_const(&mut tape))
        .collect();
    let list: Vec<(&dyn PatchCritic<f64>, &[Var], &CropPlan)> = critics
        .iter()
        .zip(&vars)
        .zip(&plans)
        .map(|((c, v), p)| (c as &dyn PatchCritic<f64>, v.as_slice(), p))
        .collect();
    let l = generator_adv_loss(&mut tape, &list, out).unwrap();

    let mut expect = 0.0;
    for (c, plan) in critics.iter().zip(&plans) {
        for (n, rects) in plan.iter().enumerate() {
            for r in rects {
                let mut crop = Vec::new();
                for ch in 0..3 {
                    for i in r.top..r.bottom() {
                        for j in r.left..r.right() {
                            crop.push(img.data()[((n * 3 + ch) * 24 + i) * 24 + j]);
                        }
                    }
                }
                let mut t2 = Tape::<f64>::no_grad();
                let v = c.params.bind_const(&mut t2);
                let x = t2.constant(Tensor::new(&[1, 3, r.height, r.width], crop).unwrap());
                let s = c.forward(&mut t2, &v, x).unwrap();
                let s = t2.value(s);
                expect += s.data().iter().sum::<f64>() / s.len() as f64;
            }
        }
    }
    expect = -expect / 2.0;
    assert!((tape.value(l).item() - expect).abs() <= 1e-6);
}

fn parts_from(tape: &mut Tape<f64>, v: [f64; 4]) -> LossParts {
    LossParts {
        recon: tape.param(Tensor::scalar(v[0])),
        kl: tape.param(Tensor::scalar(v[1])),
        perceptual: tape.param(Tensor::scalar(v[2])),
        adversarial: tape.param(Tensor::scalar(v[3])),
    }
}

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    let mut tape = Tape::<f64>::new();
    let parts = parts_from(&mut tape, [1.0; 4]);
    let t = total_generator_loss(&mut tape, &parts, &w).unwrap();
    assert_eq!(tape.value(t).item(), 14.0);
    let parts = parts_from(&mut tape, [0.0; 4]);
    let t = total_generator_loss(&mut tape, &parts, &w).unwrap();
    assert_eq!(tape.value(t).item(), 0.0);

    let parts = parts_from(&mut tape, [1.0, 1.0, f64::NAN, 1.0]);
    match total_generator_loss(&mut tape, &parts, &w) {
        Err(Error::NonFinite(name)) => assert_eq!(name, "perceptual"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn zero_kl_weight_drops_the_term_from_the_graph() {
    let w = LossWeights {
        lambda_kl: 0.0,
        ..LossWeights::default()
    };
    let mut tape = Tape::<f64>::new();
    let parts = parts_from(&mut tape, [0.5, 3.0, 0.25, -1.0]);
    let t = total_generator_loss(&mut tape, &parts, &w).unwrap();
    assert_eq!(tape.value(t).item(), 10.0 * 0.5 + 0.25 - 1.0);
    let g = tape.backward(t).unwrap();
    assert!(g.get(parts.kl).is_none());
    assert_eq!(g.get(parts.recon).unwrap().item(), 10.0);
}

#[test]
fn reconstruction_gradient() {
    let e = recon_grad_err(10);
    assert!(e <= GRAD_TOL, "{e:e}");
}

#[test]
fn perceptual_gradient() {
    let e = perceptual_grad_err(11);
    assert!(e <= GRAD_TOL, "{e:e}");
}

#[test]
fn attention_kl_gradient() {
    let e = attention_kl_grad_err(12);
    assert!(e <= GRAD_TOL, "{e:e}");
}

#[test]
fn adversarial_gradient() {
    let e = adversarial_grad_err(14);
    assert!(e <= GRAD_TOL, "{e:e}");
}

#[test]
fn gradient_penalty_gradient_through_double_backward() {
    let e = gradient_penalty_grad_err(16);
    assert!(e <= GRAD_TOL, "{e:e}");
}

#[test]
fn total_objective_gradient() {
    let e = total_objective_grad_err(19);
    assert!(e <= GRAD_TOL, "{e:e}");
}
