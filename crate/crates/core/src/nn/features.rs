use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{ConvSpec, ParamStore, Tape, Var};

use super::init::normal;

/// Default seed of the fixed perceptual network.
pub const FEATURE_SEED: u64 = 0x5eed_f00d;
const STAGES: [usize; 3] = [32, 64, 128];
const LEAKY_SLOPE: f64 = 0.2;

/// Three stride-2 bias-free convolution stages with frozen random weights,
/// standing in for a pretrained backbone in the perceptual loss.
#[derive(Clone, Debug)]
pub struct FixedFeatureNet<T> {
    pub weights: ParamStore<T>,
}

impl<T: Scalar> FixedFeatureNet<T> {
    /// Weights drawn from `N(0, 1/fan_in)` with a seeded generator; the
    /// draw happens in 64-bit so both precisions share values.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in STAGES.iter().enumerate() {
            let fan_in = cin * 9;
            let w = normal::<f64, _>(&mut rng, &[c, cin, 3, 3], (1.0 / fan_in as f64).sqrt());
            weights
                .add(format!("psi.l{}", i + 1), w.cast())
                .expect("unique names");
            cin = c;
        }
        Self { weights }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.weights.bind_const(tape)
    }

    fn run(&self, tape: &mut Tape<T>, w: &[Var], x: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err(
                "features",
                format!("expected [B, 3, H, W], got {s:?}"),
            ));
        }
        let (mut pre, mut act) = (Vec::with_capacity(w.len()), Vec::with_capacity(w.len()));
        let mut h = x;
        for &wi in w {
            let p = tape.conv2d(h, wi, ConvSpec::new(2, 1))?;
            h = tape.leaky_relu(p, lit(LEAKY_SLOPE));
            pre.push(p);
            act.push(h);
        }
        Ok((pre, act))
    }

    /// Convolution outputs of each stage before the activation.
    pub fn pre_activations(&self, tape: &mut Tape<T>, w: &[Var], x: Var) -> Result<Vec<Var>> {
        Ok(self.run(tape, w, x)?.0)
    }

    /// Activations of all three stages.
    pub fn forward(&self, tape: &mut Tape<T>, w: &[Var], x: Var) -> Result<Vec<Var>> {
        Ok(self.run(tape, w, x)?.1)
    }
}
