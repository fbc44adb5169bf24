//! Adversarial training: critic updates, the generator update with the
//! oracle attention pass, and checkpointing.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, Record, RngState, MAGIC, VERSION};
pub use optim::{RmsProp, RMSPROP_DECAY, RMSPROP_EPS};

use std::collections::HashMap;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::{
    attention_kl_loss, critic_loss_with_gp, generator_adv_loss, perceptual_loss, recon_loss,
    total_generator_loss, CropPlan, LossParts, LossWeights, MaskBundle, PatchCritic,
};
use crate::mask::{
    build_pyramid, component_geometry, gen_hole_mask, hole_side_range, local_region,
    ComponentCenters, ComponentGeometry, ComponentSizes, Mask, MaskMode, MaskPyramid, Rect,
};
use crate::nn::{
    masked_input, BnMode, Critic, CriticConfig, CriticDepth, FixedFeatureNet, Generator,
    GeneratorConfig, Preset, FEATURE_SEED,
};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Critic order: global, local, local subdivision (shared over the four
/// quadrants), then the four components.
pub const CRITIC_NAMES: [&str; 7] = [
    "global",
    "local",
    "subdiv",
    "left_eye",
    "right_eye",
    "nose",
    "mouth",
];

/// Consecutive aborted steps after which training stops.
pub const MAX_CONSECUTIVE_ABORTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub lr: f64,
    pub batch_size: usize,
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub mask_mode: MaskMode,
    /// Weight of the newest batch in the normalization running averages.
    pub bn_momentum: f64,
}

impl TrainConfig {
    pub fn new(preset: Preset) -> Self {
        Self {
            preset,
            lr: 1e-4,
            batch_size: if matches!(preset, Preset::Toy { .. }) {
                4
            } else {
                16
            },
            n_critic: 1,
            seed: 0,
            weights: LossWeights::default(),
            max_steps: 1000,
            checkpoint_every: 100,
            mask_mode: MaskMode::RandomRect,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preset.validate()?;
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.batch_size < 2 {
            return Err(invalid(
                "batch size must be at least 2 with batch normalization",
            ));
        }
        if self.n_critic == 0 {
            return Err(invalid("n_critic must be at least 1"));
        }
        let side = self.preset.side();
        let min = critic_configs(self.preset)[2].min_crop();
        let smallest = hole_side_range(side)?.0.min(side / 2);
        if smallest / 2 < min {
            return Err(invalid(format!(
                "{side}px preset: quadrants of a {smallest}px hole fall below the {min}px critic minimum"
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(invalid("bn_momentum must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Critic layout for each of [`CRITIC_NAMES`] under `preset`.
pub fn critic_configs(preset: Preset) -> [CriticConfig; 7] {
    let depth = match preset {
        Preset::Res256 => CriticDepth::Res256,
        Preset::Res1024 => CriticDepth::Res1024,
        Preset::Toy { .. } => CriticDepth::Toy,
    };
    let base = [64, 48, 32, 32, 32, 32, 32];
    base.map(|c| CriticConfig::new(preset.scaled(c), depth))
}

/// Component crop sizes under `preset`, never below the critic minimum.
pub fn component_sizes(preset: Preset) -> ComponentSizes {
    let min = critic_configs(preset)[3].min_crop();
    ComponentSizes::for_side(preset.side(), min)
}

/// One training image with its landmark-derived component centres.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub name: String,
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub image: Tensor<T>,
    pub centers: ComponentCenters,
}

/// A batch ready for a training step.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub masks: Vec<Mask>,
    pub geometry: Vec<ComponentGeometry>,
}

/// Everything derived from the masks and landmarks of a batch.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub pyramids: Vec<MaskPyramid>,
    /// Indexed like [`CRITIC_NAMES`].
    pub crops: Vec<CropPlan>,
    pub bundles: Vec<MaskBundle>,
}

/// Loss values of one step. `total` recombines the four generator parts
/// with the configured weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub recon: f64,
    pub kl: f64,
    pub perceptual: f64,
    pub adv_g: f64,
    pub total: f64,
    /// Sum of the seven critic losses.
    pub critic: f64,
    pub critic_terms: Vec<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,recon,kl,perceptual,adv_g,total,critic";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.recon, self.kl, self.perceptual, self.adv_g, self.total, self.critic
        )
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dataset indices for `step`: consecutive slices of a per-epoch shuffle.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let k = step * batch as u64 + j;
            let epoch = k / n as u64;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(
                    seed ^ splitmix64(epoch),
                )));
                cache = Some((epoch, perm));
            }
            cache.as_ref().expect("filled").1[(k % n as u64) as usize]
        })
        .collect()
}

/// Seed of the hole mask for slot `j` of `step`.
pub fn mask_seed(seed: u64, step: u64, j: usize) -> u64 {
    splitmix64(splitmix64(seed ^ 0x6d61_736b) ^ splitmix64(step) ^ (j as u64).rotate_left(32))
}

/// Generator, seven critics and their optimizers.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub generator: Generator<T>,
    pub critics: Vec<Critic<T>>,
    pub gen_opt: RmsProp<T>,
    pub critic_opts: Vec<RmsProp<T>>,
    pub features: FixedFeatureNet<T>,
    pub step: u64,
    /// Draws the interpolation weights of the gradient penalty.
    pub rng: ChaCha8Rng,
    aborts: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::build(GeneratorConfig::new(config.preset)?, &mut init)?;
        let critics = critic_configs(config.preset)
            .iter()
            .zip(CRITIC_NAMES)
            .map(|(cfg, name)| Critic::build(*cfg, &format!("critic.{name}"), &mut init))
            .collect::<Result<Vec<_>>>()?;
        let gen_opt = RmsProp::new(&generator.params, config.lr)?;
        let critic_opts = critics
            .iter()
            .map(|c| RmsProp::new(&c.params, config.lr))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            generator,
            critics,
            gen_opt,
            critic_opts,
            features: FixedFeatureNet::new(FEATURE_SEED),
            step: 0,
            rng,
            aborts: 0,
        })
    }

    pub fn side(&self) -> usize {
        self.config.preset.side()
    }

    /// Assemble the batch for the current step from `data`.
    pub fn make_batch(&self, data: &[Sample<T>]) -> Result<Batch<T>> {
        if data.is_empty() {
            return Err(invalid("training set is empty"));
        }
        let side = self.side();
        let idx = batch_indices(
            self.config.seed,
            self.step,
            self.config.batch_size,
            data.len(),
        );
        let images = Tensor::stack(
            &idx.iter()
                .map(|&i| data[i].image.clone())
                .collect::<Vec<_>>(),
        )?;
        let masks = (0..idx.len())
            .map(|j| {
                gen_hole_mask(
                    mask_seed(self.config.seed, self.step, j),
                    side,
                    &self.config.mask_mode,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let sizes = component_sizes(self.config.preset);
        let geometry = idx
            .iter()
            .map(|&i| component_geometry(&data[i].centers, side, &sizes))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            images,
            masks,
            geometry,
        })
    }

    /// Pyramids, crop rectangles and reconstruction masks for `batch`.
    pub fn prepare(&self, batch: &Batch<T>) -> Result<Prepared> {
        let side = self.side();
        let s = batch.images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != side || s[3] != side {
            return Err(invalid(format!(
                "batch images {s:?} do not match the {side}x{side} preset"
            )));
        }
        if batch.masks.len() != s[0] || batch.geometry.len() != s[0] {
            return Err(invalid(
                "batch masks or landmarks do not match the image count",
            ));
        }
        let irregular = self.config.mask_mode.is_irregular();
        let dsa = &self.generator.config.dsa_sides;
        let pyramids = batch
            .masks
            .iter()
            .map(|m| build_pyramid(m, dsa))
            .collect::<Result<Vec<_>>>()?;
        let mut crops: Vec<CropPlan> = vec![Vec::new(); 7];
        for (m, g) in batch.masks.iter().zip(&batch.geometry) {
            let local = local_region(m, irregular)?;
            crops[0].push(vec![Rect::new(0, 0, side, side)]);
            crops[1].push(vec![local]);
            crops[2].push(local.quadrants()?.to_vec());
            for c in 0..4 {
                crops[3 + c].push(vec![g.rects[c]]);
            }
        }
        let bundles = batch
            .masks
            .iter()
            .zip(&batch.geometry)
            .map(|(m, g)| MaskBundle::new(m.clone(), g.masks.to_vec()))
            .collect();
        Ok(Prepared {
            pyramids,
            crops,
            bundles,
        })
    }

    /// One step on the batch selected for the current step counter.
    pub fn train_on(&mut self, data: &[Sample<T>]) -> Result<LossReport> {
        let batch = self.make_batch(data)?;
        self.train_step(&batch)
    }

    /// Critic updates followed by one generator update.
    ///
    /// A non-finite loss or gradient rolls every network back to its state
    /// before the step and returns the error; after
    /// [`MAX_CONSECUTIVE_ABORTS`] such steps in a row, [`Error::Halted`] is
    /// returned instead.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        let prepared = self.prepare(batch)?;
        let snapshot = (
            self.generator.clone(),
            self.critics.clone(),
            self.gen_opt.clone(),
            self.critic_opts.clone(),
        );
        let result = self.step_inner(batch, &prepared);
        self.step += 1;
        match result {
            Ok(r) => {
                self.aborts = 0;
                Ok(r)
            }
            Err(e @ Error::NonFinite(_)) => {
                (self.generator, self.critics, self.gen_opt, self.critic_opts) = snapshot;
                self.aborts += 1;
                warn!("step {} aborted: {e}", self.step - 1);
                if self.aborts >= MAX_CONSECUTIVE_ABORTS {
                    return Err(Error::Halted {
                        aborts: self.aborts,
                        last: e.to_string(),
                    });
                }
                Err(e)
            }
            Err(e) => {
                (self.generator, self.critics, self.gen_opt, self.critic_opts) = snapshot;
                Err(e)
            }
        }
    }

    fn critic_step(
        &mut self,
        i: usize,
        crops: &CropPlan,
        fake: &Tensor<T>,
        real: &Tensor<T>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.critics[i].params.bind(&mut tape);
        let loss = critic_loss_with_gp(
            &mut tape,
            &self.critics[i],
            &vars,
            crops,
            fake,
            real,
            self.config.weights.gamma,
            &mut self.rng,
        )?;
        let v = tape.value(loss).item().to_f64c();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("critic.{} loss", CRITIC_NAMES[i])));
        }
        let grads = tape.backward(loss)?;
        let critic = &mut self.critics[i];
        critic.params.accumulate_grads(&tape, &grads, &vars)?;
        self.critic_opts[i].step(&mut critic.params)?;
        Ok(v)
    }

    /// `n_critic` updates of every critic against the detached `fake`
    /// output; returns the last loss of each critic.
    pub fn critic_phase(
        &mut self,
        batch: &Batch<T>,
        prep: &Prepared,
        fake: &Tensor<T>,
    ) -> Result<Vec<f64>> {
        let mut terms = vec![0.0; CRITIC_NAMES.len()];
        for (i, term) in terms.iter_mut().enumerate() {
            for _ in 0..self.config.n_critic {
                *term = self.critic_step(i, &prep.crops[i], fake, &batch.images)?;
            }
        }
        Ok(terms)
    }

    /// Generator output for `batch` as seen by the critics in a training
    /// step, without recording gradients.
    pub fn fake_output(&self, batch: &Batch<T>, prep: &Prepared) -> Result<Tensor<T>> {
        let pyr: Vec<&MaskPyramid> = prep.pyramids.iter().collect();
        let holes: Vec<&Mask> = batch.masks.iter().collect();
        let mut tape = Tape::no_grad();
        let vars = self.generator.params.bind_const(&mut tape);
        let input = tape.constant(masked_input(&batch.images, &holes)?);
        let fwd = self
            .generator
            .forward(&mut tape, &vars, input, &pyr, BnMode::Batch, false)?;
        Ok(tape.value(fwd.output.expect("full pass")).clone())
    }

    fn step_inner(&mut self, batch: &Batch<T>, prep: &Prepared) -> Result<LossReport> {
        let pyr: Vec<&MaskPyramid> = prep.pyramids.iter().collect();
        let holes: Vec<&Mask> = batch.masks.iter().collect();

        let mut tape = Tape::new();
        let gvars = self.generator.params.bind(&mut tape);
        let input = tape.constant(masked_input(&batch.images, &holes)?);
        let fwd = self
            .generator
            .forward(&mut tape, &gvars, input, &pyr, BnMode::Batch, false)?;
        let out = fwd.output.expect("full pass");
        let fake = tape.value(out).clone();
        if !fake.all_finite() {
            return Err(Error::NonFinite("generator output".into()));
        }

        let critic_terms = self.critic_phase(batch, prep, &fake)?;

        let gt = tape.constant(batch.images.clone());
        let recon = recon_loss(&mut tape, out, gt, &prep.bundles)?;
        let perceptual = perceptual_loss(&mut tape, &self.features, out, gt, &holes)?;
        let oracle = self
            .generator
            .oracle_maps(&batch.images, &pyr, BnMode::Batch)?;
        let kl_side = self.generator.config.kl_side();
        let maps = fwd
            .maps_at(kl_side)
            .ok_or_else(|| invalid("no attention maps at the supervised level"))?;
        let kl = attention_kl_loss(&mut tape, &oracle, maps)?;
        let cvars: Vec<Vec<Var>> = self
            .critics
            .iter()
            .map(|c| c.params.bind_const(&mut tape))
            .collect();
        let list: Vec<(&dyn PatchCritic<T>, &[Var], &CropPlan)> = self
            .critics
            .iter()
            .zip(&cvars)
            .zip(&prep.crops)
            .map(|((c, v), p)| (c as &dyn PatchCritic<T>, v.as_slice(), p))
            .collect();
        let adversarial = generator_adv_loss(&mut tape, &list, out)?;
        let parts = LossParts {
            recon,
            kl,
            perceptual,
            adversarial,
        };
        let total = total_generator_loss(&mut tape, &parts, &self.config.weights)?;
        let total_v = tape.value(total).item().to_f64c();
        if !total_v.is_finite() {
            return Err(Error::NonFinite("generator total loss".into()));
        }
        let grads = tape.backward(total)?;
        self.generator
            .params
            .accumulate_grads(&tape, &grads, &gvars)?;
        self.gen_opt.step(&mut self.generator.params)?;
        self.generator
            .update_running_stats(&fwd.bn_stats, self.config.bn_momentum)?;

        let val = |v: Var| tape.value(v).item().to_f64c();
        let report = LossReport {
            step: self.step,
            recon: val(recon),
            kl: val(kl),
            perceptual: val(perceptual),
            adv_g: val(adversarial),
            total: total_v,
            critic: critic_terms.iter().sum(),
            critic_terms,
        };
        debug!("step {}: {}", report.step, report.csv_row());
        Ok(report)
    }

    /// Mean absolute error over hole pixels, with batch-statistics
    /// normalization and no parameter changes.
    pub fn hole_l1(&self, images: &Tensor<T>, masks: &[Mask]) -> Result<f64> {
        let (out, _) = self.probe(images, masks)?;
        let plane = self.side() * self.side();
        let (o, g) = (out.data(), images.data());
        let (mut sum, mut count) = (0.0, 0usize);
        for (n, m) in masks.iter().enumerate() {
            for ch in 0..3 {
                let base = (n * 3 + ch) * plane;
                for (i, &bit) in m.bits().iter().enumerate() {
                    if bit == 0 {
                        sum += (o[base + i].to_f64c() - g[base + i].to_f64c()).abs();
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            return Err(invalid("masks have no hole pixels"));
        }
        Ok(sum / count as f64)
    }

    /// Attention KL at the supervised level between the ground-truth pass
    /// and the masked pass, measured without training.
    pub fn measure_kl(&self, images: &Tensor<T>, masks: &[Mask]) -> Result<f64> {
        Ok(self.probe(images, masks)?.1)
    }

    fn probe(&self, images: &Tensor<T>, masks: &[Mask]) -> Result<(Tensor<T>, f64)> {
        let dsa = &self.generator.config.dsa_sides;
        let pyramids = masks
            .iter()
            .map(|m| build_pyramid(m, dsa))
            .collect::<Result<Vec<_>>>()?;
        let pyr: Vec<&MaskPyramid> = pyramids.iter().collect();
        let holes: Vec<&Mask> = masks.iter().collect();
        let mut tape = Tape::no_grad();
        let vars = self.generator.params.bind_const(&mut tape);
        let input = tape.constant(masked_input(images, &holes)?);
        let fwd = self
            .generator
            .forward(&mut tape, &vars, input, &pyr, BnMode::Batch, false)?;
        let oracle = self.generator.oracle_maps(images, &pyr, BnMode::Batch)?;
        let maps = fwd
            .maps_at(self.generator.config.kl_side())
            .ok_or_else(|| invalid("no attention maps at the supervised level"))?;
        let kl = attention_kl_loss(&mut tape, &oracle, maps)?;
        let kl = tape.value(kl).item().to_f64c();
        Ok((tape.value(fwd.output.expect("full pass")).clone(), kl))
    }

    fn named_stores(&self) -> Vec<(&ParamStore<T>, &'static str)> {
        let mut v = vec![(&self.generator.params, ""), (&self.generator.buffers, "")];
        v.extend(self.critics.iter().map(|c| (&c.params, "")));
        v.push((&self.gen_opt.acc, "opt."));
        v.extend(self.critic_opts.iter().map(|o| (&o.acc, "opt.")));
        v
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut records = Vec::new();
        for (store, prefix) in self.named_stores() {
            for p in store.iter() {
                records.push(Record {
                    name: format!("{prefix}{}", p.name),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().iter().map(|v| v.to_f32c()).collect(),
                });
            }
        }
        Checkpoint {
            preset: self.config.preset.to_string(),
            step: self.step,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            records,
        }
    }

    /// Replace all state from `ck`. Every record must match a known
    /// parameter by name and shape, and every parameter must be present;
    /// nothing is modified unless all checks pass.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let preset = self.config.preset.to_string();
        if ck.preset != preset {
            return Err(Error::Checkpoint(format!(
                "checkpoint preset `{}` vs configured `{preset}`",
                ck.preset
            )));
        }
        let mut by_name: HashMap<&str, &Record> = HashMap::with_capacity(ck.records.len());
        for r in &ck.records {
            if by_name.insert(r.name.as_str(), r).is_some() {
                return Err(Error::Checkpoint(format!("duplicate record `{}`", r.name)));
            }
        }
        let mut updates: Vec<Vec<Tensor<T>>> = Vec::new();
        let mut used = 0;
        for (store, prefix) in self.named_stores() {
            let mut vals = Vec::with_capacity(store.len());
            for p in store.iter() {
                let name = format!("{prefix}{}", p.name);
                let r = by_name
                    .get(name.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))?;
                if r.shape != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "record `{name}` has shape {:?}, expected {:?}",
                        r.shape,
                        p.value.shape()
                    )));
                }
                vals.push(Tensor::new(
                    &r.shape,
                    r.values.iter().map(|&v| T::from_f32c(v)).collect(),
                )?);
                used += 1;
            }
            updates.push(vals);
        }
        if used != ck.records.len() {
            let known: std::collections::HashSet<String> = self
                .named_stores()
                .iter()
                .flat_map(|(s, pre)| s.iter().map(move |p| format!("{pre}{}", p.name)))
                .collect();
            let unknown = ck
                .records
                .iter()
                .find(|r| !known.contains(&r.name))
                .map_or_else(String::new, |r| r.name.clone());
            return Err(Error::Checkpoint(format!(
                "unknown parameter name `{unknown}`"
            )));
        }
        let mut it = updates.into_iter();
        let mut assign = |store: &mut ParamStore<T>| {
            for (slot, v) in it
                .next()
                .expect("one entry per store")
                .into_iter()
                .enumerate()
            {
                let p = store.get_mut(slot);
                p.value = v;
                p.grad = None;
            }
        };
        assign(&mut self.generator.params);
        assign(&mut self.generator.buffers);
        for c in &mut self.critics {
            assign(&mut c.params);
        }
        assign(&mut self.gen_opt.acc);
        for o in &mut self.critic_opts {
            assign(&mut o.acc);
        }
        self.step = ck.step;
        let mut rng = ChaCha8Rng::from_seed(ck.rng.seed);
        rng.set_stream(ck.rng.stream);
        rng.set_word_pos(ck.rng.word_pos);
        self.rng = rng;
        self.aborts = 0;
        Ok(())
    }
}
