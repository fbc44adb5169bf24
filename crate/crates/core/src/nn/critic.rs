use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{conv_out_side, ConvSpec, ParamStore, Tape, Tensor, Var};

use super::init::he_normal;

const KERNEL: usize = 4;
const PAD: usize = 1;
const LEAKY_SLOPE: f64 = 0.2;

/// Layer stack of a patch critic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticDepth {
    /// Three stride-2 layers, one stride-1 layer, stride-1 score layer.
    Res256,
    /// Five stride-2 layers, one stride-1 layer, stride-1 score layer.
    Res1024,
    /// Two stride-2 layers, one stride-1 layer, stride-1 score layer; for
    /// the small crops of reduced presets.
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CriticConfig {
    /// Channel count `C` of the first layer.
    pub base: usize,
    pub depth: CriticDepth,
}

impl CriticConfig {
    pub fn new(base: usize, depth: CriticDepth) -> Self {
        Self { base, depth }
    }

    /// `(out_channels, stride)` per layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let c = self.base;
        match self.depth {
            CriticDepth::Res256 => vec![(c, 2), (2 * c, 2), (4 * c, 2), (8 * c, 1), (1, 1)],
            CriticDepth::Res1024 => vec![
                (c, 2),
                (2 * c, 2),
                (4 * c, 2),
                (8 * c, 2),
                (8 * c, 2),
                (8 * c, 1),
                (1, 1),
            ],
            CriticDepth::Toy => vec![(c, 2), (2 * c, 2), (4 * c, 1), (1, 1)],
        }
    }

    /// Score-map side for an input side of `n`, `None` if it vanishes.
    pub fn out_side(&self, n: usize) -> Option<usize> {
        self.layers().iter().try_fold(n, |s, &(_, stride)| {
            conv_out_side(s, KERNEL, ConvSpec::new(stride, PAD))
        })
    }

    /// Per-layer output sides for an input side of `n`.
    pub fn trace(&self, n: usize) -> Vec<Option<usize>> {
        let mut s = Some(n);
        self.layers()
            .iter()
            .map(|&(_, stride)| {
                s = s.and_then(|v| conv_out_side(v, KERNEL, ConvSpec::new(stride, PAD)));
                s
            })
            .collect()
    }

    /// Smallest input side producing a non-empty score map.
    pub fn min_crop(&self) -> usize {
        (1..)
            .find(|&n| self.out_side(n).is_some())
            .expect("some side works")
    }
}

/// Fully convolutional patch critic without normalization.
#[derive(Clone, Debug)]
pub struct Critic<T> {
    pub config: CriticConfig,
    pub params: ParamStore<T>,
    slots: Vec<(usize, usize, usize)>,
}

impl<T: Scalar> Critic<T> {
    pub fn build<R: Rng + ?Sized>(config: CriticConfig, prefix: &str, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut slots = Vec::new();
        let mut cin = 3;
        for (i, (cout, stride)) in config.layers().into_iter().enumerate() {
            let fan_in = cin * KERNEL * KERNEL;
            let w = params.add(
                format!("{prefix}.l{}.w", i + 1),
                he_normal(rng, &[cout, cin, KERNEL, KERNEL], fan_in),
            )?;
            let b = params.add(format!("{prefix}.l{}.b", i + 1), Tensor::zeros(&[cout]))?;
            slots.push((w, b, stride));
            cin = cout;
        }
        Ok(Self {
            config,
            params,
            slots,
        })
    }

    /// Score map `[B, 1, h, w]` for crops `[B, 3, H, W]`.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err(
                "critic",
                format!("expected [B, 3, H, W], got {s:?}"),
            ));
        }
        let min = self.config.min_crop();
        if s[2] < min
            || s[3] < min
            || self.config.out_side(s[2]).is_none()
            || self.config.out_side(s[3]).is_none()
        {
            return Err(Error::CropTooSmall {
                height: s[2],
                width: s[3],
                min,
            });
        }
        let mut h = x;
        let last = self.slots.len() - 1;
        for (i, &(w, b, stride)) in self.slots.iter().enumerate() {
            h = tape.conv2d(h, vars[w], ConvSpec::new(stride, PAD))?;
            h = tape.add_channel_bias(h, vars[b])?;
            if i != last {
                h = tape.leaky_relu(h, lit(LEAKY_SLOPE));
            }
        }
        Ok(h)
    }
}
