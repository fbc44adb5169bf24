//! Index-by-index reference for the dual attention layer, on plain `f64`
//! arrays. Shared by the core tests and the acceptance suite.

#![allow(dead_code)]

/// Plain copies of one layer's parameters.
#[derive(Clone, Debug)]
pub struct RefParams {
    pub c: usize,
    pub ck: usize,
    /// `[C, Ck]` row-major, and so on for the other projections.
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_q_self: Vec<f64>,
    pub w_k_self: Vec<f64>,
    pub w_v_self: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    /// `[C, C, 3, 3]`.
    pub fuse_w: Vec<f64>,
    pub fuse_b: Vec<f64>,
}

/// Attention of hole positions `rows` over positions `keys` of one sample.
/// Returns the `|rows| × |keys|` map and the rebuilt `|rows| × C` features.
fn attention(
    x: &[f64],
    hw: usize,
    c: usize,
    ck: usize,
    rows: &[usize],
    keys: &[usize],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let feat = |pos: usize, ch: usize| x[ch * hw + pos];
    let mut maps = Vec::new();
    let mut rebuilt = Vec::new();
    for &i in rows {
        let mut logits = Vec::new();
        for &j in keys {
            let mut dot = 0.0;
            for k in 0..ck {
                let mut q = 0.0;
                let mut kk = 0.0;
                for ch in 0..c {
                    q += feat(i, ch) * wq[ch * ck + k];
                    kk += feat(j, ch) * wk[ch * ck + k];
                }
                dot += q * kk;
            }
            logits.push(dot);
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let row: Vec<f64> = e.iter().map(|v| v / s).collect();
        let mut out = vec![0.0; c];
        for (jj, &j) in keys.iter().enumerate() {
            for (co, o) in out.iter_mut().enumerate() {
                let mut v = 0.0;
                for ch in 0..c {
                    v += feat(j, ch) * wv[ch * c + co];
                }
                *o += row[jj] * v;
            }
        }
        maps.push(row);
        rebuilt.push(out);
    }
    (maps, rebuilt)
}

/// Result of the reference layer on one sample.
pub struct RefOutput {
    /// `[C, H, W]` pre-fusion sum.
    pub sum: Vec<f64>,
    /// `[C, H, W]` fused output.
    pub z: Vec<f64>,
    pub cross: Option<Vec<Vec<f64>>>,
    pub self_attn: Option<Vec<Vec<f64>>>,
}

/// One sample `x: [C, side, side]`, `bits`: 1 valid, 0 hole.
pub fn reference(p: &RefParams, x: &[f64], side: usize, bits: &[u8]) -> RefOutput {
    let (c, ck, hw) = (p.c, p.ck, side * side);
    let fg: Vec<usize> = (0..hw).filter(|&i| bits[i] == 0).collect();
    let bg: Vec<usize> = (0..hw).filter(|&i| bits[i] != 0).collect();
    let mut y = x.to_vec();
    let mut cross = None;
    if !fg.is_empty() && !bg.is_empty() {
        let (e, r) = attention(x, hw, c, ck, &fg, &bg, &p.w_q, &p.w_k, &p.w_v);
        for (ii, &i) in fg.iter().enumerate() {
            for ch in 0..c {
                y[ch * hw + i] += p.alpha * r[ii][ch];
            }
        }
        cross = Some(e);
    }
    let mut y2 = x.to_vec();
    let mut self_attn = None;
    if !fg.is_empty() {
        let (e, r) = attention(
            x,
            hw,
            c,
            ck,
            &fg,
            &fg,
            &p.w_q_self,
            &p.w_k_self,
            &p.w_v_self,
        );
        for (ii, &i) in fg.iter().enumerate() {
            for ch in 0..c {
                y2[ch * hw + i] += p.beta * r[ii][ch];
            }
        }
        self_attn = Some(e);
    }
    let sum: Vec<f64> = y.iter().zip(&y2).map(|(a, b)| a + b).collect();
    let mut z = vec![0.0; c * hw];
    for co in 0..c {
        for r in 0..side {
            for q in 0..side {
                let mut acc = p.fuse_b[co];
                for ci in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (rr, qq) =
                                (r as isize + ky as isize - 1, q as isize + kx as isize - 1);
                            if rr < 0 || qq < 0 || rr >= side as isize || qq >= side as isize {
                                continue;
                            }
                            acc += p.fuse_w[((co * c + ci) * 3 + ky) * 3 + kx]
                                * sum[ci * hw + rr as usize * side + qq as usize];
                        }
                    }
                }
                z[co * hw + r * side + q] = acc;
            }
        }
    }
    RefOutput {
        sum,
        z,
        cross,
        self_attn,
    }
}

/// `max |a − r| / max(max |r|, 1e-300)`.
pub fn rel_err(a: &[f64], r: &[f64]) -> f64 {
    assert_eq!(a.len(), r.len());
    let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter()
        .zip(r)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

use oracle_attn::dsa::{dsa_forward, DsaParams};
use oracle_attn::mask::{build_pyramid, Mask, MaskPyramid, PyramidLevel};
use oracle_attn::scalar::Scalar;
use oracle_attn::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random layer, batch of features and hole masks.
pub struct Instance<T> {
    pub store: ParamStore<T>,
    pub params: DsaParams,
    pub side: usize,
    /// `[B, C, side, side]`.
    pub x: Tensor<T>,
    pub masks: Vec<Mask>,
    pub pyramids: Vec<MaskPyramid>,
}

/// Random instance with nonzero gates and fusion bias. Hole densities vary
/// per sample, so empty and full holes occur.
pub fn instance<T: Scalar>(seed: u64, c: usize, side: usize, batch: usize) -> Instance<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = DsaParams::build::<T, _>(&mut store, "dsa", c, &mut rng).unwrap();
    let alpha: f64 = rng.random_range(-1.5..1.5);
    let beta: f64 = rng.random_range(-1.5..1.5);
    store
        .set("dsa.alpha", Tensor::from_f64(&[1], &[alpha]).unwrap())
        .unwrap();
    store
        .set("dsa.beta", Tensor::from_f64(&[1], &[beta]).unwrap())
        .unwrap();
    let fb: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    store
        .set("dsa.fuse_b", Tensor::from_f64(&[c], &fb).unwrap())
        .unwrap();
    let n = batch * c * side * side;
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_f64(&[batch, c, side, side], &xs).unwrap();
    let masks: Vec<Mask> = (0..batch)
        .map(|_| {
            let p: f64 = *[0.0, 0.3, 0.5, 0.8, 1.0]
                .get(rng.random_range(0..5))
                .unwrap();
            let bits = (0..side * side)
                .map(|_| u8::from(!rng.random_bool(p)))
                .collect();
            Mask::from_bits(side, side, bits).unwrap()
        })
        .collect();
    let pyramids = masks
        .iter()
        .map(|m| build_pyramid(m, &[side]).unwrap())
        .collect();
    Instance {
        store,
        params,
        side,
        x,
        masks,
        pyramids,
    }
}

pub fn to_ref<T: Scalar>(store: &ParamStore<T>, p: &DsaParams) -> RefParams {
    let get = |slot: usize| -> Vec<f64> {
        store
            .get(slot)
            .value
            .data()
            .iter()
            .map(|v| v.to_f64c())
            .collect()
    };
    RefParams {
        c: p.channels,
        ck: p.key_channels,
        w_q: get(p.w_q),
        w_k: get(p.w_k),
        w_v: get(p.w_v),
        w_q_self: get(p.w_q_self),
        w_k_self: get(p.w_k_self),
        w_v_self: get(p.w_v_self),
        alpha: get(p.alpha)[0],
        beta: get(p.beta)[0],
        fuse_w: get(p.fuse_w),
        fuse_b: get(p.fuse_b),
    }
}

/// Feature block of sample `b` as `f64`.
pub fn sample_f64<T: Scalar>(x: &Tensor<T>, b: usize) -> Vec<f64> {
    x.sample(b).data().iter().map(|v| v.to_f64c()).collect()
}

/// Largest relative error of `dsa_forward` (output and both maps) against
/// [`reference`] over a random batch of two.
pub fn forward_vs_reference<T: Scalar>(seed: u64, c: usize, side: usize) -> f64 {
    let inst = instance::<T>(seed, c, side, 2);
    let mut tape = Tape::<T>::new();
    let vars = inst.store.bind(&mut tape);
    let x = tape.constant(inst.x.clone());
    let lv: Vec<&PyramidLevel> = inst.pyramids.iter().map(|p| &p.levels[0]).collect();
    let (z, maps) = dsa_forward(&mut tape, &inst.params, &vars, x, &lv).unwrap();
    let zt = tape.value(z).clone();
    let rp = to_ref(&inst.store, &inst.params);
    let mut worst = 0.0f64;
    for b in 0..2 {
        let r = reference(&rp, &sample_f64(&inst.x, b), side, inst.masks[b].bits());
        worst = worst.max(rel_err(&sample_f64(&zt, b), &r.z));
        match (&r.cross, maps[b].cross) {
            (Some(e), Some(v)) => {
                let flat: Vec<f64> = e.concat();
                worst = worst.max(rel_err(
                    &sample_f64(&tape.value(v).reshape(&[1, flat.len()]).unwrap(), 0),
                    &flat,
                ));
            }
            (None, None) => {}
            _ => panic!("cross branch activity differs from the reference"),
        }
        match (&r.self_attn, maps[b].self_attn) {
            (Some(e), Some(v)) => {
                let flat: Vec<f64> = e.concat();
                worst = worst.max(rel_err(
                    &sample_f64(&tape.value(v).reshape(&[1, flat.len()]).unwrap(), 0),
                    &flat,
                ));
            }
            (None, None) => {}
            _ => panic!("self branch activity differs from the reference"),
        }
    }
    worst
}
