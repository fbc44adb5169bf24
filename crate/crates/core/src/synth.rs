//! Procedural face-like images with known component centres, for tests,
//! demos and desk-scale training runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mask::ComponentCenters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Sample;

fn ellipse(r: f64, c: f64, cr: f64, cc: f64, ar: f64, ac: f64) -> f64 {
    ((r - cr) / ar).powi(2) + ((c - cc) / ac).powi(2)
}

/// Coverage of an ellipse at level value `e` (1 on the boundary), with a
/// linear ramp of `width` outside it.
fn soft(e: f64, width: f64) -> f64 {
    ((1.0 + width - e) / width).clamp(0.0, 1.0)
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], a: f64) {
    for k in 0..3 {
        dst[k] = dst[k] * (1.0 - a) + src[k] * a;
    }
}

/// One synthetic face of side `side`, fully determined by `seed`.
pub fn face<T: Scalar>(seed: u64, side: usize) -> Sample<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f64;
    let mut jit = |amount: f64| rng.random_range(-amount..=amount);
    let cr = s * (0.5 + jit(0.03));
    let cc = s * (0.5 + jit(0.03));
    let face_r = s * (0.36 + jit(0.03));
    let face_c = s * (0.29 + jit(0.03));
    let eye_dr = s * (0.09 + jit(0.015));
    let eye_dc = s * (0.12 + jit(0.015));
    let eye_r = s * 0.035;
    let eye_c = s * (0.06 + jit(0.01));
    let mouth_dr = s * (0.19 + jit(0.02));
    let mouth_c = s * (0.1 + jit(0.015));
    let tone = 0.75 + jit(0.15);
    let bg = [0.4 + jit(0.2), 0.4 + jit(0.2), 0.5 + jit(0.3)];
    let hair = [0.25 + jit(0.1), 0.17 + jit(0.08), 0.15 + jit(0.08)];
    let iris = [0.3 + jit(0.15), 0.35 + jit(0.2), 0.4 + jit(0.2)];
    let skin = [tone, tone * 0.78, tone * 0.66];

    let left_eye = [cr - eye_dr, cc - eye_dc];
    let right_eye = [cr - eye_dr, cc + eye_dc];
    let nose = [cr + s * 0.04, cc];
    let mouth = [cr + mouth_dr, cc];

    let plane = side * side;
    let mut data = vec![T::zero(); 3 * plane];
    let w = 8.0 / s;
    for i in 0..side {
        for j in 0..side {
            let (r, c) = (i as f64 + 0.5, j as f64 + 0.5);
            let grad = 0.85 + 0.15 * r / s;
            let mut px = [bg[0] * grad, bg[1] * grad, bg[2] * grad];
            blend(
                &mut px,
                hair,
                soft(
                    ellipse(r, c, cr - s * 0.06, cc, face_r * 1.08, face_c * 1.12),
                    w,
                ),
            );
            blend(
                &mut px,
                skin,
                soft(ellipse(r, c, cr + s * 0.03, cc, face_r * 0.95, face_c), w),
            );
            for e in [left_eye, right_eye] {
                blend(
                    &mut px,
                    [0.95, 0.95, 0.95],
                    soft(ellipse(r, c, e[0], e[1], eye_r, eye_c), w),
                );
                blend(
                    &mut px,
                    iris,
                    soft(ellipse(r, c, e[0], e[1], eye_r * 0.9, eye_r * 0.9), w),
                );
            }
            let shade = [skin[0] * 0.8, skin[1] * 0.75, skin[2] * 0.72];
            blend(
                &mut px,
                shade,
                0.8 * soft(ellipse(r, c, nose[0], nose[1], s * 0.06, s * 0.025), w),
            );
            blend(
                &mut px,
                [0.7, 0.25, 0.3],
                soft(ellipse(r, c, mouth[0], mouth[1], s * 0.025, mouth_c), w),
            );
            for k in 0..3 {
                data[k * plane + i * side + j] = T::from_f64c(px[k].clamp(0.0, 1.0));
            }
        }
    }
    Sample {
        name: format!("synth_{seed:04}"),
        image: Tensor::new(&[1, 3, side, side], data).expect("sized"),
        centers: ComponentCenters {
            left_eye,
            right_eye,
            nose,
            mouth,
        },
    }
}

/// `count` faces with seeds `seed, seed + 1, …`.
pub fn dataset<T: Scalar>(seed: u64, count: usize, side: usize) -> Vec<Sample<T>> {
    (0..count as u64).map(|k| face(seed + k, side)).collect()
}
