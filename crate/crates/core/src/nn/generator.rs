use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dsa::{AttentionMaps, DsaParams, OracleMaps};
use crate::error::{invalid, shape_err, Result};
use crate::mask::{Mask, MaskPyramid, PyramidLevel};
use crate::scalar::{lit, Scalar};
use crate::tensor::{conv_out_side, BnBatchStats, ConvSpec, ParamStore, Tape, Tensor, Var};

use super::init::he_normal;

const ENCODER_CHANNELS: [usize; 4] = [64, 128, 256, 512];
const BN_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

/// Architecture preset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Preset {
    Res256,
    Res1024,
    /// Reduced network for desk-scale runs: depth `log2(side)`, channel
    /// widths multiplied by `scale`.
    Toy {
        side: usize,
        scale: f64,
    },
}

impl Preset {
    pub fn side(&self) -> usize {
        match *self {
            Preset::Res256 => 256,
            Preset::Res1024 => 1024,
            Preset::Toy { side, .. } => side,
        }
    }

    /// Number of stride-2 encoder layers.
    pub fn encoder_depth(&self) -> usize {
        match *self {
            Preset::Res256 => 8,
            Preset::Res1024 => 10,
            Preset::Toy { side, .. } => side.trailing_zeros() as usize,
        }
    }

    pub fn width_scale(&self) -> f64 {
        match *self {
            Preset::Toy { scale, .. } => scale,
            _ => 1.0,
        }
    }

    /// Feature sides of the three attention layers, coarsest first.
    pub fn dsa_sides(&self) -> [usize; 3] {
        match *self {
            Preset::Res256 | Preset::Res1024 => [16, 32, 64],
            Preset::Toy { side, .. } => [side / 16, side / 8, side / 4],
        }
    }

    pub fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.width_scale()).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if let Preset::Toy { side, scale } = *self {
            if !side.is_power_of_two() || side < 32 {
                return Err(invalid(format!("toy side {side} must be a power of two and at least 32 (attention sits at side/16 and up)")));
            }
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(invalid(format!("toy width scale {scale} must be positive")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::Res256 => write!(f, "res256"),
            Preset::Res1024 => write!(f, "res1024"),
            Preset::Toy { side, scale } => write!(f, "toy:{side}:{scale}"),
        }
    }
}

impl FromStr for Preset {
    type Err = crate::Error;

    /// `res256`, `res1024`, `toy` (64 px, quarter width) or `toy:<side>:<scale>`.
    fn from_str(s: &str) -> Result<Self> {
        let p = match s {
            "res256" => Preset::Res256,
            "res1024" => Preset::Res1024,
            "toy" => Preset::Toy {
                side: 64,
                scale: 0.25,
            },
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                match parts.as_slice() {
                    ["toy", side, scale] => Preset::Toy {
                        side: side
                            .parse()
                            .map_err(|_| invalid(format!("bad toy side in `{s}`")))?,
                        scale: scale
                            .parse()
                            .map_err(|_| invalid(format!("bad toy scale in `{s}`")))?,
                    },
                    _ => return Err(invalid(format!("unknown preset `{s}`"))),
                }
            }
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Encoder,
    Decoder,
    Output,
}

/// Static description of one generator layer (1-based `index`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub index: usize,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub out_side: usize,
    /// Layer whose output is concatenated after upsampling; 0 is the input.
    pub skip: Option<usize>,
    pub batch_norm: bool,
    pub dsa: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub preset: Preset,
    /// Masked RGB plus the mask channel.
    pub in_channels: usize,
    pub dsa_sides: Vec<usize>,
}

impl GeneratorConfig {
    pub fn new(preset: Preset) -> Result<Self> {
        preset.validate()?;
        Ok(Self {
            preset,
            in_channels: 4,
            dsa_sides: preset.dsa_sides().to_vec(),
        })
    }

    pub fn side(&self) -> usize {
        self.preset.side()
    }

    /// Side of the level that receives attention supervision.
    pub fn kl_side(&self) -> usize {
        self.dsa_sides.iter().copied().min().unwrap_or(0)
    }

    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.preset.encoder_depth())
            .map(|i| self.preset.scaled(ENCODER_CHANNELS[i.min(3)]))
            .collect()
    }

    pub fn plan(&self) -> Vec<LayerPlan> {
        let d = self.preset.encoder_depth();
        let enc = self.encoder_channels();
        let mut side = self.side();
        let mut plans = Vec::with_capacity(2 * d);
        let mut cin = self.in_channels;
        for (i, &c) in enc.iter().enumerate() {
            let kernel = match i {
                0 => 7,
                1 => 5,
                _ => 3,
            };
            side = conv_out_side(side, kernel, ConvSpec::new(2, (kernel - 1) / 2)).unwrap_or(0);
            plans.push(LayerPlan {
                index: i + 1,
                kind: LayerKind::Encoder,
                kernel,
                stride: 2,
                in_channels: cin,
                out_channels: c,
                out_side: side,
                skip: None,
                batch_norm: i > 0,
                dsa: false,
            });
            cin = c;
        }
        for k in 1..d {
            let skip = d - k;
            side *= 2;
            let out = enc[skip - 1];
            plans.push(LayerPlan {
                index: d + k,
                kind: LayerKind::Decoder,
                kernel: 3,
                stride: 1,
                in_channels: cin + enc[skip - 1],
                out_channels: out,
                out_side: side,
                skip: Some(skip),
                batch_norm: true,
                dsa: self.dsa_sides.contains(&side),
            });
            cin = out;
        }
        plans.push(LayerPlan {
            index: 2 * d,
            kind: LayerKind::Output,
            kernel: 3,
            stride: 1,
            in_channels: cin + self.in_channels,
            out_channels: 3,
            out_side: side * 2,
            skip: Some(0),
            batch_norm: false,
            dsa: false,
        });
        plans
    }
}

#[derive(Clone, Debug)]
struct BnSlots {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Clone, Debug)]
struct Layer {
    plan: LayerPlan,
    w: usize,
    b: Option<usize>,
    bn: Option<BnSlots>,
    dsa: Option<DsaParams>,
}

/// How batch normalization picks its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them.
    Batch,
    /// Normalize with the stored running averages.
    Running,
}

/// Batch statistics of one normalization layer.
#[derive(Clone, Debug)]
pub struct LayerStats<T> {
    pub layer: usize,
    pub stats: BnBatchStats<T>,
}

/// Result of a generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorOutput<T> {
    /// `[B, 3, H, W]` in `[0, 1]`; `None` for a pass stopped early.
    pub output: Option<Var>,
    /// Per attention layer (coarsest first), per sample.
    pub maps: Vec<Vec<AttentionMaps>>,
    pub bn_stats: Vec<LayerStats<T>>,
    /// Output shape of every executed layer, in order.
    pub trace: Vec<Vec<usize>>,
}

impl<T: Scalar> GeneratorOutput<T> {
    /// Maps at the attention layer of feature side `side`.
    pub fn maps_at(&self, side: usize) -> Option<&[AttentionMaps]> {
        self.maps
            .iter()
            .find(|m| m.first().is_some_and(|a| a.level == side))
            .map(Vec::as_slice)
    }
}

/// U-Net generator with attention in three decoder layers.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    /// Normalization running averages, not trained.
    pub buffers: ParamStore<T>,
    layers: Vec<Layer>,
}

impl<T: Scalar> Generator<T> {
    pub fn build<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut layers = Vec::new();
        for plan in config.plan() {
            let p = format!("gen.l{}", plan.index);
            let (k, cin, cout) = (plan.kernel, plan.in_channels, plan.out_channels);
            let w = params.add(
                format!("{p}.w"),
                he_normal(rng, &[cout, cin, k, k], cin * k * k),
            )?;
            let b = if plan.batch_norm {
                None
            } else {
                Some(params.add(format!("{p}.b"), Tensor::zeros(&[cout]))?)
            };
            let bn = if plan.batch_norm {
                Some(BnSlots {
                    gamma: params.add(format!("{p}.bn.gamma"), Tensor::ones(&[cout]))?,
                    beta: params.add(format!("{p}.bn.beta"), Tensor::zeros(&[cout]))?,
                    running_mean: buffers
                        .add(format!("{p}.bn.running_mean"), Tensor::zeros(&[cout]))?,
                    running_var: buffers
                        .add(format!("{p}.bn.running_var"), Tensor::ones(&[cout]))?,
                })
            } else {
                None
            };
            let dsa = if plan.dsa {
                Some(DsaParams::build(
                    &mut params,
                    &format!("{p}.dsa"),
                    cout,
                    rng,
                )?)
            } else {
                None
            };
            layers.push(Layer {
                plan,
                w,
                b,
                bn,
                dsa,
            });
        }
        Ok(Self {
            config,
            params,
            buffers,
            layers,
        })
    }

    pub fn plan(&self) -> Vec<LayerPlan> {
        self.layers.iter().map(|l| l.plan.clone()).collect()
    }

    /// Attention parameters of the layer at feature side `side`.
    pub fn dsa_at(&self, side: usize) -> Option<&DsaParams> {
        self.layers
            .iter()
            .find(|l| l.plan.out_side == side && l.dsa.is_some())
            .and_then(|l| l.dsa.as_ref())
    }

    fn check_input(&self, tape: &Tape<T>, input: Var, pyramids: &[&MaskPyramid]) -> Result<usize> {
        let side = self.config.side();
        let s = tape.shape(input);
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != side || s[3] != side {
            return Err(shape_err(
                "generator",
                format!(
                    "expected [B, {}, {side}, {side}], got {s:?}",
                    self.config.in_channels
                ),
            ));
        }
        if pyramids.len() != s[0] {
            return Err(shape_err(
                "generator",
                format!("{} pyramids for batch {}", pyramids.len(), s[0]),
            ));
        }
        for p in pyramids {
            for &d in &self.config.dsa_sides {
                if p.level(d).is_none() {
                    return Err(invalid(format!("mask pyramid lacks the {d}x{d} level")));
                }
            }
        }
        Ok(s[0])
    }

    /// Run the network on `input` (`[B, 4, H, W]`).
    ///
    /// With `stop_at_kl`, the pass ends after computing attention maps at
    /// the supervised level and returns no output image.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        input: Var,
        pyramids: &[&MaskPyramid],
        mode: BnMode,
        stop_at_kl: bool,
    ) -> Result<GeneratorOutput<T>> {
        self.check_input(tape, input, pyramids)?;
        let mut outs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut result = GeneratorOutput {
            output: None,
            maps: Vec::new(),
            bn_stats: Vec::new(),
            trace: Vec::new(),
        };
        let mut h = input;
        for layer in &self.layers {
            let plan = &layer.plan;
            let x = match plan.skip {
                Some(s) => {
                    let up = tape.upsample2x(h)?;
                    let other = if s == 0 { input } else { outs[s - 1] };
                    tape.concat_channels(&[up, other])?
                }
                None => h,
            };
            let spec = ConvSpec::new(plan.stride, (plan.kernel - 1) / 2);
            let mut y = tape.conv2d(x, vars[layer.w], spec)?;
            if let Some(b) = layer.b {
                y = tape.add_channel_bias(y, vars[b])?;
            }
            if let Some(bn) = &layer.bn {
                let running = match mode {
                    BnMode::Batch => None,
                    BnMode::Running => Some((
                        self.buffers.get(bn.running_mean).value.data().to_vec(),
                        self.buffers.get(bn.running_var).value.data().to_vec(),
                    )),
                };
                let r = running.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()));
                let (z, stats) =
                    tape.batch_norm(y, vars[bn.gamma], vars[bn.beta], r, lit(BN_EPS))?;
                y = z;
                if let Some(stats) = stats {
                    result.bn_stats.push(LayerStats {
                        layer: plan.index,
                        stats,
                    });
                }
            }
            y = match plan.kind {
                LayerKind::Encoder => tape.relu(y),
                LayerKind::Decoder => tape.leaky_relu(y, lit(LEAKY_SLOPE)),
                LayerKind::Output => tape.sigmoid(y),
            };
            if let Some(dsa) = &layer.dsa {
                let levels: Vec<&PyramidLevel> = pyramids
                    .iter()
                    .map(|p| p.level(plan.out_side).expect("checked above"))
                    .collect();
                if stop_at_kl && plan.out_side == self.config.kl_side() {
                    result.maps.push(dsa.maps_only(tape, vars, y, &levels)?);
                    result.trace.push(tape.shape(y).to_vec());
                    return Ok(result);
                }
                let (z, maps) = dsa.forward(tape, vars, y, &levels)?;
                y = z;
                result.maps.push(maps);
            }
            result.trace.push(tape.shape(y).to_vec());
            outs.push(y);
            h = y;
        }
        result.output = Some(h);
        Ok(result)
    }

    /// Ground-truth pass: attention maps at the supervised level, detached.
    pub fn oracle_maps(
        &self,
        gt: &Tensor<T>,
        pyramids: &[&MaskPyramid],
        mode: BnMode,
    ) -> Result<Vec<OracleMaps<T>>> {
        let mut tape = Tape::no_grad();
        let vars = self.params.bind_const(&mut tape);
        let input = tape.constant(oracle_input(gt)?);
        let out = self.forward(&mut tape, &vars, input, pyramids, mode, true)?;
        let maps = out
            .maps
            .last()
            .ok_or_else(|| invalid("generator has no attention layer"))?;
        Ok(maps
            .iter()
            .map(|m| OracleMaps::from_tape(&tape, m))
            .collect())
    }

    /// Blend batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[LayerStats<T>], momentum: f64) -> Result<()> {
        let m = lit::<T>(momentum);
        for s in stats {
            let layer = self
                .layers
                .iter()
                .find(|l| l.plan.index == s.layer)
                .ok_or_else(|| invalid(format!("no layer {}", s.layer)))?;
            let bn = layer
                .bn
                .as_ref()
                .ok_or_else(|| invalid("layer has no normalization"))?;
            for (slot, batch) in [
                (bn.running_mean, &s.stats.mean),
                (bn.running_var, &s.stats.var),
            ] {
                let p = self.buffers.get_mut(slot);
                for (r, &b) in p.value.data_mut().iter_mut().zip(batch.iter()) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
        Ok(())
    }

    /// Gradient-free completion of `images` under `masks`, using running
    /// normalization statistics.
    pub fn infer(&self, images: &Tensor<T>, masks: &[&Mask]) -> Result<Tensor<T>> {
        let pyramids: Vec<MaskPyramid> = masks
            .iter()
            .map(|m| crate::mask::build_pyramid(m, &self.config.dsa_sides))
            .collect::<Result<_>>()?;
        let refs: Vec<&MaskPyramid> = pyramids.iter().collect();
        let mut tape = Tape::no_grad();
        let vars = self.params.bind_const(&mut tape);
        let input = tape.constant(masked_input(images, masks)?);
        let out = self.forward(&mut tape, &vars, input, &refs, BnMode::Running, false)?;
        Ok(tape.value(out.output.expect("full pass")).clone())
    }
}

/// `[B, 3, H, W]` images with holes zeroed, plus the mask as channel 4.
pub fn masked_input<T: Scalar>(images: &Tensor<T>, masks: &[&Mask]) -> Result<Tensor<T>> {
    let &[b, c, h, w] = images.shape() else {
        return Err(shape_err(
            "masked_input",
            format!("expected [B, 3, H, W], got {:?}", images.shape()),
        ));
    };
    if c != 3 || masks.len() != b {
        return Err(shape_err(
            "masked_input",
            format!("{c} channels, {} masks for batch {b}", masks.len()),
        ));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(b * 4 * plane);
    for (n, m) in masks.iter().enumerate() {
        if m.height() != h || m.width() != w {
            return Err(shape_err(
                "masked_input",
                format!("mask {}x{} vs image {h}x{w}", m.height(), m.width()),
            ));
        }
        let img = &images.data()[n * 3 * plane..(n + 1) * 3 * plane];
        for ch in 0..3 {
            for i in 0..plane {
                data.push(if m.bits()[i] == 1 {
                    img[ch * plane + i]
                } else {
                    T::zero()
                });
            }
        }
        data.extend(
            m.bits()
                .iter()
                .map(|&v| if v == 1 { T::one() } else { T::zero() }),
        );
    }
    Tensor::new(&[b, 4, h, w], data)
}

/// Ground-truth images with an all-valid mask channel.
pub fn oracle_input<T: Scalar>(gt: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, _, h, w] = gt.shape() else {
        return Err(shape_err(
            "oracle_input",
            format!("expected [B, 3, H, W], got {:?}", gt.shape()),
        ));
    };
    let full = Mask::all_valid(h, w);
    masked_input(gt, &vec![&full; b])
}
