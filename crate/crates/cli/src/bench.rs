//! Forward timing of the attention layer against a patch-matching baseline.
//!
//! The baseline is a bare 3×3-patch cross-correlation: every hole patch is
//! scored against every L2-normalized valid patch, the scores are softmaxed,
//! and the hole is rebuilt by pasting the weighted valid patches back with
//! overlap averaging. It stands in for contextual attention only as a timing
//! reference and leaves out that module's other stages.

use std::time::Instant;

use oracle_attn::dsa::{cross_attention, DsaParams, Projections};
use oracle_attn::mask::{build_pyramid, Mask, PyramidLevel, Rect};
use oracle_attn::nn::{GeneratorConfig, Preset};
use oracle_attn::{ParamStore, Scalar, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::fail::{Fail, Outcome};

/// Softmax sharpness of the baseline scores.
pub const PATCH_SCALE: f64 = 10.0;
const GATE_TOL: f64 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BenchReport {
    pub preset: String,
    pub precision: String,
    pub side: usize,
    /// Hole rows `N`.
    pub n: usize,
    /// Valid rows `N′`.
    pub n_prime: usize,
    pub channels: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub dsa: Timing,
    pub patch_reference: Timing,
    pub gate_passed: bool,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        format!(
            "bench-dsa  preset={} precision={} side={} N={} N'={} C={} iterations={} (warmup {})\n\
             dsa              {:>10.3} ms  ± {:.3}\n\
             patch reference  {:>10.3} ms  ± {:.3}   (3x3 patch cross-correlation, not full contextual attention)\n\
             correctness gate {}\n",
            self.preset,
            self.precision,
            self.side,
            self.n,
            self.n_prime,
            self.channels,
            self.iterations,
            self.warmup,
            self.dsa.mean_ms,
            self.dsa.std_ms,
            self.patch_reference.mean_ms,
            self.patch_reference.std_ms,
            if self.gate_passed { "passed" } else { "FAILED" },
        )
    }
}

/// Channel count of the finest attention layer of `preset`.
pub fn finest_dsa_channels(preset: Preset) -> Outcome<usize> {
    GeneratorConfig::new(preset)?
        .plan()
        .iter()
        .filter(|l| l.dsa)
        .max_by_key(|l| l.out_side)
        .map(|l| l.out_channels)
        .ok_or_else(|| Fail::Usage(format!("preset {preset} has no attention layer")))
}

/// Output of the baseline on one `[C, H, W]` map.
pub struct PatchResult<T> {
    /// `N × N′` row-stochastic weights.
    pub weights: Vec<T>,
    /// `[C, H, W]`; hole positions rebuilt, the rest copied.
    pub output: Vec<T>,
    /// `N′ × 9C` valid patches.
    pub bg_patches: Vec<T>,
}

fn patches<T: Scalar>(x: &[T], c: usize, side: usize, at: &[usize]) -> Vec<T> {
    let k = 9 * c;
    let mut out = vec![T::zero(); at.len() * k];
    for (r, &pos) in at.iter().enumerate() {
        let (y, x0) = ((pos / side) as isize, (pos % side) as isize);
        for ch in 0..c {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (yy, xx) = (y + dy, x0 + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < side && (xx as usize) < side {
                        let slot = ch * 9 + ((dy + 1) * 3 + dx + 1) as usize;
                        out[r * k + slot] = x[ch * side * side + yy as usize * side + xx as usize];
                    }
                }
            }
        }
    }
    out
}

/// The patch-matching baseline on one sample.
pub fn patch_attention<T: Scalar>(x: &[T], c: usize, level: &PyramidLevel) -> PatchResult<T> {
    let side = level.side;
    let (fg, bg) = (&level.foreground, &level.background);
    let (n, nb, k) = (fg.len(), bg.len(), 9 * c);
    let fgp = patches(x, c, side, fg);
    let bgp = patches(x, c, side, bg);
    let mut bgn = bgp.clone();
    for row in bgn.chunks_mut(k) {
        let norm = row
            .iter()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
            .max(T::from_f64c(1e-4));
        for v in row {
            *v /= norm;
        }
    }
    let mut s = vec![T::zero(); n * nb];
    T::gemm(
        n,
        k,
        nb,
        &fgp,
        k as isize,
        1,
        &bgn,
        1,
        k as isize,
        T::zero(),
        &mut s,
        nb as isize,
    );
    let scale = T::from_f64c(PATCH_SCALE);
    for row in s.chunks_mut(nb) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - m) * scale).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    let mut rec = vec![T::zero(); n * k];
    T::gemm(
        n,
        nb,
        k,
        &s,
        nb as isize,
        1,
        &bgp,
        k as isize,
        1,
        T::zero(),
        &mut rec,
        k as isize,
    );

    let plane = side * side;
    let mut output = x.to_vec();
    let mut acc = vec![T::zero(); c * plane];
    let mut count = vec![0u32; plane];
    let hole = &level.mask;
    for (r, &pos) in fg.iter().enumerate() {
        let (y, x0) = ((pos / side) as isize, (pos % side) as isize);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (yy, xx) = (y - dy, x0 - dx);
                if yy < 0 || xx < 0 || yy as usize >= side || xx as usize >= side {
                    continue;
                }
                let p = yy as usize * side + xx as usize;
                if hole.bits()[p] == 1 {
                    continue;
                }
                // the patch centred at `pos` covers `p` at offset (-dy, -dx)
                let slot = ((1 - dy) * 3 + 1 - dx) as usize;
                for ch in 0..c {
                    acc[ch * plane + p] += rec[r * k + ch * 9 + slot];
                }
                count[p] += 1;
            }
        }
    }
    for &p in fg.iter() {
        let cnt = T::from_f64c(count[p].max(1) as f64);
        for ch in 0..c {
            output[ch * plane + p] = acc[ch * plane + p] / cnt;
        }
    }
    PatchResult {
        weights: s,
        output,
        bg_patches: bgp,
    }
}

fn rows_stochastic<T: Scalar>(w: &[T], cols: usize) -> bool {
    w.chunks(cols).all(|row| {
        let s: f64 = row.iter().map(|v| v.to_f64c()).sum();
        row.iter().all(|v| v.to_f64c() >= 0.0) && (s - 1.0).abs() <= GATE_TOL
    })
}

/// Every hole value lies within the per-channel range of `sources`
/// (`rows × width` with channel `ch` occupying `width / c` columns).
fn within_source_range<T: Scalar>(
    values: impl Iterator<Item = (usize, f64)>,
    sources: &[T],
    width: usize,
    c: usize,
) -> bool {
    let per = width / c;
    let mut lo = vec![f64::INFINITY; c];
    let mut hi = vec![f64::NEG_INFINITY; c];
    for row in sources.chunks(width) {
        for (j, v) in row.iter().enumerate() {
            let ch = j / per;
            lo[ch] = lo[ch].min(v.to_f64c());
            hi[ch] = hi[ch].max(v.to_f64c());
        }
    }
    let mut ok = true;
    for (ch, v) in values {
        let tol = GATE_TOL * (1.0 + hi[ch].abs().max(lo[ch].abs()));
        ok &= v >= lo[ch] - tol && v <= hi[ch] + tol;
    }
    ok
}

/// Hole rebuilds of both kernels must be convex combinations of valid
/// features: row-stochastic weights, values inside the source range.
pub fn correctness_gate<T: Scalar>(
    params: &DsaParams,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    level: &PyramidLevel,
) -> Outcome<bool> {
    let c = params.channels;
    let side = level.side;
    let plane = side * side;
    let (fg, bg) = (&level.foreground, &level.background);

    let mut tape = Tape::no_grad();
    let vars = store.bind_const(&mut tape);
    let xv = tape.constant(x.clone());
    let proj = Projections {
        w_q: vars[params.w_q],
        w_k: vars[params.w_k],
        w_v: vars[params.w_v],
    };
    let branch = cross_attention(&mut tape, xv, &[level], proj)?
        .ok_or_else(|| Fail::Numeric("cross branch inactive on the benchmark mask".into()))?;
    let e = branch.maps[0].ok_or_else(|| Fail::Numeric("no cross attention map".into()))?;
    let dsa_rows = rows_stochastic(tape.value(e).data(), bg.len());
    // projected valid rows V_b = X_b · W_v
    let xd = x.data();
    let xb: Vec<T> = bg
        .iter()
        .flat_map(|&p| (0..c).map(move |ch| xd[ch * plane + p]))
        .collect();
    let mut vb = vec![T::zero(); bg.len() * c];
    let wv = store.get(params.w_v).value.data();
    T::gemm(
        bg.len(),
        c,
        c,
        &xb,
        c as isize,
        1,
        wv,
        c as isize,
        1,
        T::zero(),
        &mut vb,
        c as isize,
    );
    let padded = tape.value(branch.padded).data();
    let dsa_range = within_source_range(
        fg.iter()
            .flat_map(|&p| (0..c).map(move |ch| (ch, padded[ch * plane + p].to_f64c()))),
        &vb,
        c,
        c,
    );

    let pr = patch_attention(xd, c, level);
    let patch_rows = rows_stochastic(&pr.weights, bg.len());
    let out = &pr.output;
    let patch_range = within_source_range(
        fg.iter()
            .flat_map(|&p| (0..c).map(move |ch| (ch, out[ch * plane + p].to_f64c()))),
        &pr.bg_patches,
        9 * c,
        c,
    );
    Ok(dsa_rows && dsa_range && patch_rows && patch_range)
}

fn stats(samples: &[f64]) -> Timing {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Timing {
        mean_ms: mean,
        std_ms: var.sqrt(),
    }
}

fn time_ms(
    warmup: usize,
    iterations: usize,
    mut f: impl FnMut() -> Outcome<()>,
) -> Outcome<Timing> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(stats(&samples))
}

/// Time both kernels at a `side × side` feature map with a central hole.
pub fn run<T: Scalar>(
    preset: Preset,
    side: usize,
    iterations: usize,
    warmup: usize,
    seed: u64,
) -> Outcome<BenchReport> {
    if iterations < 100 {
        return Err(Fail::Usage(format!(
            "bench.iterations must be at least 100, got {iterations}"
        )));
    }
    if side < 4 {
        return Err(Fail::Usage(format!("bench.side {side} is too small")));
    }
    let c = finest_dsa_channels(preset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<T>::new();
    let params = DsaParams::build(&mut store, "bench", c, &mut rng)?;
    // nonzero gates so both branches contribute
    store.get_mut(params.alpha).value = Tensor::full(&[1], T::from_f64c(0.5));
    store.get_mut(params.beta).value = Tensor::full(&[1], T::from_f64c(0.5));
    let x = Tensor::new(
        &[1, c, side, side],
        (0..c * side * side)
            .map(|_| T::from_f64c(StandardNormal.sample(&mut rng)))
            .collect(),
    )?;
    let mask = Mask::with_hole(side, side, Rect::central(side))?;
    let pyramid = build_pyramid(&mask, &[side])?;
    let level = &pyramid.levels[0];

    let gate_passed = correctness_gate(&params, &store, &x, level)?;
    if !gate_passed {
        return Err(Fail::Numeric("benchmark correctness gate failed".into()));
    }

    let dsa = time_ms(warmup, iterations, || {
        let mut tape = Tape::no_grad();
        let vars = store.bind_const(&mut tape);
        let xv = tape.constant(x.clone());
        let (z, _) = params.forward(&mut tape, &vars, xv, &[level])?;
        std::hint::black_box(tape.value(z).data()[0]);
        Ok(())
    })?;
    let patch_reference = time_ms(warmup, iterations, || {
        let r = patch_attention(x.data(), c, level);
        std::hint::black_box(r.output[0]);
        Ok(())
    })?;
    Ok(BenchReport {
        preset: preset.to_string(),
        precision: T::NAME.into(),
        side,
        n: level.n_foreground(),
        n_prime: level.n_background(),
        channels: c,
        iterations,
        warmup,
        dsa,
        patch_reference,
        gate_passed,
    })
}
