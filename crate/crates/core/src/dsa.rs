//! Dual spatial attention: foreground-background cross attention and
//! foreground self attention over a hole partition of the feature map.
//!
//! Features `X: [B, C, H, W]` are split per sample into hole rows `X_p`
//! (`N × C`) and valid rows `X_b` (`N′ × C`). The cross branch attends from
//! hole rows to valid rows, the self branch from hole rows to hole rows.
//! Rebuilt rows are zero-padded back to `H × W`, gated by `α` / `β`, added to
//! `X`, and the two results are summed and passed through a 3×3 convolution.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::mask::PyramidLevel;
use crate::nn::init::he_normal;
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, ParamStore, Tape, Tensor, Var};

/// Width of the query/key projections for `c` feature channels.
pub fn key_channels(c: usize) -> usize {
    (c / 8).max(1)
}

/// Parameter slots of one attention layer inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DsaParams {
    pub channels: usize,
    pub key_channels: usize,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_q_self: usize,
    pub w_k_self: usize,
    pub w_v_self: usize,
    pub alpha: usize,
    pub beta: usize,
    pub fuse_w: usize,
    pub fuse_b: usize,
}

impl DsaParams {
    /// Register a fresh layer under `prefix`. Projections are stored as
    /// `[C_in, C_out]` matrices acting on feature rows.
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("attention layer needs at least one channel"));
        }
        let ck = key_channels(channels);
        let c = channels;
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}.{name}"), t);
        Ok(Self {
            channels: c,
            key_channels: ck,
            w_q: add("w_q", he_normal(rng, &[c, ck], c))?,
            w_k: add("w_k", he_normal(rng, &[c, ck], c))?,
            w_v: add("w_v", he_normal(rng, &[c, c], c))?,
            w_q_self: add("w_q_self", he_normal(rng, &[c, ck], c))?,
            w_k_self: add("w_k_self", he_normal(rng, &[c, ck], c))?,
            w_v_self: add("w_v_self", he_normal(rng, &[c, c], c))?,
            alpha: add("alpha", Tensor::zeros(&[1]))?,
            beta: add("beta", Tensor::zeros(&[1]))?,
            fuse_w: add("fuse_w", he_normal(rng, &[c, c, 3, 3], 9 * c))?,
            fuse_b: add("fuse_b", Tensor::zeros(&[c]))?,
        })
    }
}

/// Attention matrices of one sample at one level. `None` marks an inactive
/// branch (no hole rows, or no valid rows for the cross branch).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionMaps {
    pub level: usize,
    /// `E`, `N × N′`.
    pub cross: Option<Var>,
    /// `E′`, `N × N`.
    pub self_attn: Option<Var>,
}

/// Detached attention matrices, used as supervision targets.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleMaps<T> {
    pub level: usize,
    pub cross: Option<Tensor<T>>,
    pub self_attn: Option<Tensor<T>>,
}

impl<T: Scalar> OracleMaps<T> {
    pub fn from_tape(tape: &Tape<T>, maps: &AttentionMaps) -> Self {
        Self {
            level: maps.level,
            cross: maps.cross.map(|v| tape.value(v).clone()),
            self_attn: maps.self_attn.map(|v| tape.value(v).clone()),
        }
    }
}

/// Output of one attention branch over a batch.
#[derive(Clone, Debug)]
pub struct Branch {
    /// Zero-padded rebuilt features, `[B, C, H, W]`.
    pub padded: Var,
    /// Per-sample attention matrix, `None` where the sample was inactive.
    pub maps: Vec<Option<Var>>,
}

/// Projections of one branch: queries, keys, values.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

fn check_levels<T: Scalar>(tape: &Tape<T>, x: Var, levels: &[&PyramidLevel]) -> Result<[usize; 4]> {
    let &[b, c, h, w] = tape.shape(x) else {
        return Err(shape_err(
            "dsa",
            format!("expected [B, C, H, W], got {:?}", tape.shape(x)),
        ));
    };
    if levels.len() != b {
        return Err(shape_err(
            "dsa",
            format!("{} partitions for batch {b}", levels.len()),
        ));
    }
    for l in levels {
        if l.side != h || l.side != w {
            return Err(shape_err(
                "dsa",
                format!("partition side {} vs features {h}x{w}", l.side),
            ));
        }
    }
    Ok([b, c, h, w])
}

/// Attention of `query_rows` over `key_rows`; returns `(E, E·V)`.
fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    query_rows: Var,
    key_rows: Var,
    p: Projections,
) -> Result<(Var, Var)> {
    let q = tape.matmul(query_rows, p.w_q)?;
    let k = tape.matmul(key_rows, p.w_k)?;
    let logits = tape.matmul_t(q, k, false, true)?;
    let e = tape.softmax_rows(logits)?;
    let v = tape.matmul(key_rows, p.w_v)?;
    let rebuilt = tape.matmul(e, v)?;
    Ok((e, rebuilt))
}

fn branch<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    levels: &[&PyramidLevel],
    p: Projections,
    cross: bool,
    with_output: bool,
) -> Result<Option<Branch>> {
    let full = check_levels(tape, x, levels)?;
    let hw = full[2] * full[3];
    let mut padded: Option<Var> = None;
    let mut maps = Vec::with_capacity(levels.len());
    for (b, level) in levels.iter().enumerate() {
        let keys_empty = if cross {
            level.background.is_empty()
        } else {
            false
        };
        if level.foreground.is_empty() || keys_empty {
            maps.push(None);
            continue;
        }
        let rows = tape.sample_to_rows(x, b)?;
        let xp = tape.gather_rows(rows, level.foreground.clone())?;
        let keys = if cross {
            tape.gather_rows(rows, level.background.clone())?
        } else {
            xp
        };
        if !with_output {
            let q = tape.matmul(xp, p.w_q)?;
            let k = tape.matmul(keys, p.w_k)?;
            let logits = tape.matmul_t(q, k, false, true)?;
            maps.push(Some(tape.softmax_rows(logits)?));
            continue;
        }
        let (e, rebuilt) = attend(tape, xp, keys, p)?;
        maps.push(Some(e));
        let scattered = tape.scatter_rows(rebuilt, level.foreground.clone(), hw)?;
        let sample = tape.rows_to_sample(scattered, b, full)?;
        padded = Some(match padded {
            Some(acc) => tape.add(acc, sample)?,
            None => sample,
        });
    }
    if maps.iter().all(Option::is_none) {
        return Ok(None);
    }
    let padded = match padded {
        Some(p) => p,
        // Maps-only mode: the padded output is never read.
        None => tape.constant(Tensor::zeros(&full)),
    };
    Ok(Some(Branch { padded, maps }))
}

/// Cross attention from hole rows to valid rows. `None` when every sample
/// lacks hole rows or valid rows.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    levels: &[&PyramidLevel],
    p: Projections,
) -> Result<Option<Branch>> {
    branch(tape, x, levels, p, true, true)
}

/// Self attention among hole rows, diagonal included. `None` when no sample
/// has hole rows.
pub fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    levels: &[&PyramidLevel],
    p: Projections,
) -> Result<Option<Branch>> {
    branch(tape, x, levels, p, false, true)
}

impl DsaParams {
    fn projections(&self, vars: &[Var]) -> (Projections, Projections) {
        (
            Projections {
                w_q: vars[self.w_q],
                w_k: vars[self.w_k],
                w_v: vars[self.w_v],
            },
            Projections {
                w_q: vars[self.w_q_self],
                w_k: vars[self.w_k_self],
                w_v: vars[self.w_v_self],
            },
        )
    }

    /// Pre-fusion sum `Y + Y′`, plus per-sample maps.
    pub fn gated_sum<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        levels: &[&PyramidLevel],
    ) -> Result<(Var, Vec<AttentionMaps>)> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(shape_err(
                "dsa",
                format!("layer has {} channels, input {c}", self.channels),
            ));
        }
        let (pc, ps) = self.projections(vars);
        let cross = cross_attention(tape, x, levels, pc)?;
        let selfb = self_attention(tape, x, levels, ps)?;
        let y = match &cross {
            Some(br) => {
                let g = tape.scale_by(vars[self.alpha], br.padded)?;
                tape.add(g, x)?
            }
            None => x,
        };
        let y2 = match &selfb {
            Some(br) => {
                let g = tape.scale_by(vars[self.beta], br.padded)?;
                tape.add(g, x)?
            }
            None => x,
        };
        let sum = tape.add(y, y2)?;
        let side = levels.first().map_or(0, |l| l.side);
        let maps = (0..levels.len())
            .map(|b| AttentionMaps {
                level: side,
                cross: cross.as_ref().and_then(|br| br.maps[b]),
                self_attn: selfb.as_ref().and_then(|br| br.maps[b]),
            })
            .collect();
        Ok((sum, maps))
    }

    /// `Z = fuse(Y + Y′)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        levels: &[&PyramidLevel],
    ) -> Result<(Var, Vec<AttentionMaps>)> {
        let (sum, maps) = self.gated_sum(tape, vars, x, levels)?;
        let z = tape.conv2d(sum, vars[self.fuse_w], ConvSpec::new(1, 1))?;
        let z = tape.add_channel_bias(z, vars[self.fuse_b])?;
        Ok((z, maps))
    }

    /// Attention matrices only, skipping value projections and fusion.
    pub fn maps_only<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        levels: &[&PyramidLevel],
    ) -> Result<Vec<AttentionMaps>> {
        let (pc, ps) = self.projections(vars);
        let cross = branch(tape, x, levels, pc, true, false)?;
        let selfb = branch(tape, x, levels, ps, false, false)?;
        let side = levels.first().map_or(0, |l| l.side);
        Ok((0..levels.len())
            .map(|b| AttentionMaps {
                level: side,
                cross: cross.as_ref().and_then(|br| br.maps[b]),
                self_attn: selfb.as_ref().and_then(|br| br.maps[b]),
            })
            .collect())
    }
}

/// Full layer forward over bound parameters.
pub fn dsa_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &DsaParams,
    vars: &[Var],
    x: Var,
    levels: &[&PyramidLevel],
) -> Result<(Var, Vec<AttentionMaps>)> {
    params.forward(tape, vars, x, levels)
}

/// Attention maps of ground-truth features under the same parameters,
/// evaluated on a private gradient-free tape so nothing can flow back.
pub fn oracle_maps<T: Scalar>(
    params: &DsaParams,
    store: &ParamStore<T>,
    x_gt: &Tensor<T>,
    levels: &[&PyramidLevel],
) -> Result<Vec<OracleMaps<T>>> {
    let mut tape = Tape::no_grad();
    let vars = store.bind_const(&mut tape);
    let x = tape.constant(x_gt.clone());
    let maps = params.maps_only(&mut tape, &vars, x, levels)?;
    Ok(maps
        .iter()
        .map(|m| OracleMaps::from_tape(&tape, m))
        .collect())
}
