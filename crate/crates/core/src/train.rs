//! Teacher-forced training with Ranger.
//!
//! Batches are a pure function of `(seed, step)`: step `s` takes positions
//! `s * batch .. (s + 1) * batch` of an endless stream made of one seeded
//! permutation per epoch. Resuming therefore needs only the step counter.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::augment::{self, AugmentPolicy};
use crate::image::ImageTensor;
use crate::model::{LossOutput, Model, NormMode, TeacherForced};
use crate::optim::{self, OptimConfig, OptimState};
use crate::rng::{derive_indexed, rng_from};
use crate::{Error, Result};

/// A preprocessed image with its teacher-forcing target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: ImageTensor,
    pub target: TeacherForced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    /// Stop once the loss over the whole training set falls below this.
    pub target_loss: Option<f64>,
    /// Steps between whole-set loss checks.
    pub check_every: u64,
    pub seed: u64,
    /// Applied to each drawn image, keyed by its position in the stream.
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 8, max_steps: 1000, target_loss: None, check_every: 100, seed: 0, augment: None }
    }
}

/// Dataset indices used at `step`.
pub fn batch_indices(seed: u64, step: u64, n_items: usize, batch_size: usize) -> Vec<usize> {
    let n = n_items as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|k| {
            let pos = step * batch_size as u64 + k;
            let (epoch, offset) = (pos / n, (pos % n) as usize);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n_items).collect();
                perm.shuffle(&mut rng_from(derive_indexed(seed, "epoch", epoch)));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("just set").1[offset]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub positions: usize,
}

/// Model plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optim: OptimState<f32>,
    pub optim_config: OptimConfig,
}

impl Trainer {
    pub fn new(model: Model<f32>, optim_config: OptimConfig) -> Result<Self> {
        optim_config.validate()?;
        let optim = OptimState::new(&model.params);
        Ok(Self { model, optim, optim_config })
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.optim.t
    }

    /// One optimizer step on an explicit batch.
    pub fn step_on(&mut self, images: &[&ImageTensor], targets: &[TeacherForced]) -> Result<StepReport> {
        let LossOutput { loss, grads, batch_stats, positions } = self.model.loss(images, targets, NormMode::Batch)?;
        optim::step(&mut self.optim, &mut self.model.params, &grads, &self.optim_config)?;
        self.model.update_running_stats(&batch_stats);
        Ok(StepReport { step: self.optim.t, loss: f64::from(loss), lr: self.optim_config.lr_at(self.optim.t), positions })
    }

    /// The next scheduled step over `data`.
    pub fn step(&mut self, data: &[Example], cfg: &TrainConfig) -> Result<StepReport> {
        if data.is_empty() || cfg.batch_size == 0 {
            return Err(Error::Config("training needs data and a positive batch size".into()));
        }
        let step = self.optim.t;
        let idx = batch_indices(cfg.seed, step, data.len(), cfg.batch_size);
        let augmented: Vec<ImageTensor> = match &cfg.augment {
            Some(policy) => idx
                .iter()
                .enumerate()
                .map(|(k, &i)| augment::apply(policy, &data[i].image, step * cfg.batch_size as u64 + k as u64).image)
                .collect(),
            None => Vec::new(),
        };
        let images: Vec<&ImageTensor> =
            if augmented.is_empty() { idx.iter().map(|&i| &data[i].image).collect() } else { augmented.iter().collect() };
        let targets: Vec<TeacherForced> = idx.iter().map(|&i| data[i].target.clone()).collect();
        self.step_on(&images, &targets)
    }

    /// Position-weighted mean loss over all of `data` with running statistics.
    pub fn dataset_loss(&self, data: &[Example], chunk: usize) -> Result<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for part in data.chunks(chunk.max(1)) {
            let images: Vec<&ImageTensor> = part.iter().map(|e| &e.image).collect();
            let targets: Vec<TeacherForced> = part.iter().map(|e| e.target.clone()).collect();
            let (loss, n) = self.model.eval_loss(&images, &targets, NormMode::Running)?;
            total += loss * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(Error::EmptyEvaluation);
        }
        Ok(total / count as f64)
    }

    /// Runs until `max_steps` total steps or until the whole-set loss, checked
    /// every `check_every` steps, is below the target. `on_step` sees every
    /// report and may stop early by returning `false`.
    pub fn run(
        &mut self,
        data: &[Example],
        cfg: &TrainConfig,
        mut on_step: impl FnMut(&Trainer, &StepReport) -> bool,
    ) -> Result<Option<StepReport>> {
        let mut last = None;
        while self.optim.t < cfg.max_steps {
            let r = self.step(data, cfg)?;
            last = Some(r);
            if !on_step(self, &r) {
                break;
            }
            if let Some(target) = cfg.target_loss {
                if cfg.check_every > 0 && r.step % cfg.check_every == 0 && self.dataset_loss(data, cfg.batch_size)? < target {
                    break;
                }
            }
        }
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::{EOS, SOS};

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen = vec![0; n];
        for step in 0..5 {
            for i in batch_indices(3, step, n, 4) {
                seen[i] += 1;
            }
        }
        // 20 draws over 10 items: exactly two epochs.
        assert!(seen.iter().all(|&c| c == 2));
        assert_eq!(batch_indices(3, 7, n, 4), batch_indices(3, 7, n, 4));
    }

    fn tiny_data() -> (ModelConfig, Vec<Example>) {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_decoder_layers: 2,
            ffn_dim: 32,
            vocab_size: 8,
            max_decode_len: 6,
            input_h: 16,
            input_w: 16,
            in_channels: 1,
            downsample_factor: 4,
            feac_enabled: true,
        };
        let mut img = ImageTensor::filled(1, 16, 16, 1.0);
        for x in 0..16 {
            img.set(0, 8, x, 0.0);
        }
        let ex = Example { image: img, target: TeacherForced::from_sequence(&[SOS, 4, 5, 6, EOS]).unwrap() };
        (cfg, vec![ex])
    }

    #[test]
    fn loss_drops_on_a_memorized_sample() {
        let (mc, data) = tiny_data();
        let mut t = Trainer::new(Model::new(mc, 1).unwrap(), OptimConfig { lr: 1e-3, ..OptimConfig::default() }).unwrap();
        let tc = TrainConfig { batch_size: 1, max_steps: 21, ..TrainConfig::default() };
        let mut losses = Vec::new();
        t.run(&data, &tc, |_, r| {
            losses.push(r.loss);
            true
        })
        .unwrap();
        assert_eq!(losses.len(), 21);
        assert!(losses[20] < losses[0], "{losses:?}");
    }

    #[test]
    fn split_runs_match_a_single_run() {
        let (mc, data) = tiny_data();
        let mk = || Trainer::new(Model::new(mc.clone(), 2).unwrap(), OptimConfig::default()).unwrap();
        let tc = TrainConfig { batch_size: 2, max_steps: 8, seed: 4, ..TrainConfig::default() };
        let mut whole = mk();
        whole.run(&data, &tc, |_, _| true).unwrap();
        let mut parts = mk();
        parts.run(&data, &TrainConfig { max_steps: 5, ..tc.clone() }, |_, _| true).unwrap();
        let mut resumed = parts.clone();
        resumed.run(&data, &tc, |_, _| true).unwrap();
        assert_eq!(whole, resumed);
    }
}
