//! Completion models: a generator restored from a checkpoint, or one of the
//! fixed mocks used to check the evaluation path.

use std::path::Path;

use oracle_attn::mask::Mask;
use oracle_attn::nn::{Generator, GeneratorConfig, Preset};
use oracle_attn::train::Checkpoint;
use oracle_attn::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fail::{Fail, Outcome};

pub const MOCK_IDENTITY: &str = "mock:identity";
pub const MOCK_GRAY: &str = "mock:gray";

pub enum Model<T> {
    /// Returns the ground truth.
    Identity,
    /// Returns 0.5 everywhere.
    Gray,
    Net(Box<Generator<T>>),
}

impl<T: Scalar> Model<T> {
    /// Open `spec` (a checkpoint path or a mock name) for images of `preset`.
    pub fn open(spec: &str, preset: Preset) -> Outcome<Self> {
        match spec {
            MOCK_IDENTITY => Ok(Model::Identity),
            MOCK_GRAY => Ok(Model::Gray),
            s if s.starts_with("mock:") => Err(Fail::Usage(format!(
                "unknown mock `{s}` ({MOCK_IDENTITY}, {MOCK_GRAY})"
            ))),
            path => Ok(Model::Net(Box::new(load_generator(
                Path::new(path),
                preset,
            )?))),
        }
    }

    /// Complete `images` (`[B, 3, H, W]`, ground truth) under `masks`. Only
    /// the mocks look at the hole pixels.
    pub fn complete(&self, images: &Tensor<T>, masks: &[&Mask]) -> Outcome<Tensor<T>> {
        match self {
            Model::Identity => Ok(images.clone()),
            Model::Gray => Ok(Tensor::full(images.shape(), T::from_f64c(0.5))),
            Model::Net(g) => Ok(g.infer(images, masks)?),
        }
    }
}

/// Generator weights and normalization buffers from a training checkpoint.
pub fn load_generator<T: Scalar>(path: &Path, preset: Preset) -> Outcome<Generator<T>> {
    let ck = Checkpoint::load(path).map_err(|e| Fail::Data(format!("{}: {e}", path.display())))?;
    let stored: Preset = ck
        .preset
        .parse()
        .map_err(|e| Fail::Data(format!("{}: bad preset tag: {e}", path.display())))?;
    if stored != preset {
        return Err(Fail::Usage(format!(
            "checkpoint {} is for preset {stored}, configured preset is {preset}",
            path.display()
        )));
    }
    // every value is overwritten below; the seed only fixes the layout
    let mut g = Generator::<T>::build(
        GeneratorConfig::new(preset)?,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    for store in [&mut g.params, &mut g.buffers] {
        for slot in 0..store.len() {
            let p = store.get_mut(slot);
            let r = ck
                .records
                .iter()
                .find(|r| r.name == p.name)
                .ok_or_else(|| {
                    Fail::Data(format!("{}: missing record `{}`", path.display(), p.name))
                })?;
            if r.shape != p.value.shape() {
                return Err(Fail::Data(format!(
                    "{}: record `{}` has shape {:?}, expected {:?}",
                    path.display(),
                    r.name,
                    r.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(
                &r.shape,
                r.values.iter().map(|&v| T::from_f32c(v)).collect(),
            )?;
        }
    }
    Ok(g)
}
