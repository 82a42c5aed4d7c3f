//! Joint-loss training with Adam over shuffled minibatches.

pub mod adam;
pub mod augment;
pub mod checkpoint;
pub mod loss;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig};
use crate::params::{Ctx, Mode, ModelParams};
use crate::tensor::Tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment, SaliencySample};
pub use loss::{
    balance_weight, balanced_bce, balanced_bce_value, joint_loss, BetaConvention, JointLoss,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub augment: bool,
    pub beta_convention: BetaConvention,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 2,
            steps: 2000,
            seed: 0,
            augment: true,
            beta_convention: BetaConvention::Ratio,
        }
    }
}

/// Batch-mean losses for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub joint: f64,
    pub global: f64,
    pub local: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<StepRecord>,
}

/// Forward + backward for one sample; returns `(joint, global, local)` and
/// leaves gradients and BN statistics to the caller.
pub struct SampleGrads {
    pub losses: (f64, f64, f64),
    pub grads: BTreeMap<String, Tensor>,
    pub bn_updates: Vec<(String, crate::ops::BatchStats)>,
}

pub fn sample_gradients(
    params: &ModelParams,
    model: &ModelConfig,
    sample: &SaliencySample,
    convention: BetaConvention,
) -> Result<SampleGrads> {
    let mut ctx = Ctx::new(params, Mode::Train);
    let out = forward(&mut ctx, model, &sample.image)?;
    let loss = joint_loss(
        &mut ctx.tape,
        out.s_global,
        out.s_local,
        &sample.mask,
        convention,
    )?;
    let value = |v| ctx.tape.value(v).data()[0];
    let losses = (value(loss.total), value(loss.global), value(loss.local));
    let mut g = ctx.tape.backward(loss.total)?;
    let grads = ctx.param_grads(&mut g);
    Ok(SampleGrads {
        losses,
        grads,
        bn_updates: ctx.take_bn_updates(),
    })
}

fn check_config(config: &TrainConfig, dataset: &[SaliencySample]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(config.adam.lr > 0.0) {
        return Err(Error::Config(format!(
            "lr must be positive, got {}",
            config.adam.lr
        )));
    }
    Ok(())
}

/// Trains `params` in place for `config.steps` steps.
///
/// Samples are visited in a fresh random order every epoch; `on_epoch_end`
/// is called with the epoch index each time the order is exhausted. Batch
/// gradients are the mean of per-sample gradients; batch-norm running
/// statistics are updated after each sample.
pub fn train(
    model: &ModelConfig,
    mut params: ModelParams,
    dataset: &[SaliencySample],
    config: &TrainConfig,
    mut on_epoch_end: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    check_config(config, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut state = AdamState::new();
    let mut trace = Vec::with_capacity(config.steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;

    for step in 0..config.steps {
        let mut batch_grads: Option<BTreeMap<String, Tensor>> = None;
        let mut sums = (0.0, 0.0, 0.0);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                if !order.is_empty() {
                    on_epoch_end(epoch, &params)?;
                    epoch += 1;
                }
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let raw = &dataset[order[cursor]];
            cursor += 1;
            let augmented;
            let sample = if config.augment {
                augmented = augment(raw, &mut rng);
                &augmented
            } else {
                raw
            };

            let sg = sample_gradients(&params, model, sample, config.beta_convention)?;
            let (j, g, l) = sg.losses;
            if !(j.is_finite() && g.is_finite() && l.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "step {step}: joint loss {j} (global {g}, local {l})"
                )));
            }
            sums = (sums.0 + j, sums.1 + g, sums.2 + l);
            params.apply_bn_updates(&sg.bn_updates)?;
            match &mut batch_grads {
                None => batch_grads = Some(sg.grads),
                Some(acc) => {
                    for (name, g) in &sg.grads {
                        acc.get_mut(name)
                            .expect("same parameter set")
                            .add_assign(g)?;
                    }
                }
            }
        }

        let mut grads = batch_grads.expect("batch_size >= 1");
        let inv = 1.0 / config.batch_size as f64;
        for g in grads.values_mut() {
            g.scale_in_place(inv);
        }
        adam_step(&mut params.params, &grads, &mut state, &config.adam);
        trace.push(StepRecord {
            step,
            joint: sums.0 * inv,
            global: sums.1 * inv,
            local: sums.2 * inv,
        });
    }
    if config.steps > 0 {
        on_epoch_end(epoch, &params)?;
    }
    Ok(TrainOutcome { params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                stem_channels: 4,
                block_channels: [4, 4, 4, 4],
            },
            ..ModelConfig::default()
        }
    }

    fn toy_sample() -> SaliencySample {
        let image = Tensor::from_fn(&[3, 32, 32], |i| ((i * 31) % 97) as f64 / 97.0);
        let mask = Tensor::from_fn(&[1, 32, 32], |i| {
            let (y, x) = (i / 32, i % 32);
            if (8..20).contains(&y) && (10..24).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        SaliencySample::new(image, mask).unwrap()
    }

    #[test]
    fn zero_steps_leave_params_untouched() {
        let model = tiny_model();
        let init = model.init_params(3);
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let mut calls = 0;
        let out = train(&model, init.clone(), &[toy_sample()], &cfg, |_, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(out.params, init);
        assert!(out.trace.is_empty());
        assert_eq!(calls, 0);
    }

    #[test]
    fn same_seed_same_trace() {
        let model = tiny_model();
        let data = vec![toy_sample(), toy_sample()];
        let cfg = TrainConfig {
            steps: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || train(&model, model.init_params(1), &data, &cfg, |_, _| Ok(())).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace.len(), 3);
    }

    #[test]
    fn rejects_empty_dataset_and_zero_batch() {
        let model = tiny_model();
        let cfg = TrainConfig::default();
        assert!(train(&model, model.init_params(0), &[], &cfg, |_, _| Ok(())).is_err());
        let cfg = TrainConfig {
            batch_size: 0,
            ..cfg
        };
        assert!(train(
            &model,
            model.init_params(0),
            &[toy_sample()],
            &cfg,
            |_, _| Ok(())
        )
        .is_err());
    }

    #[test]
    fn epoch_callback_counts() {
        let model = tiny_model();
        let data = vec![toy_sample(), toy_sample()];
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 1,
            augment: false,
            ..TrainConfig::default()
        };
        let mut epochs = Vec::new();
        train(&model, model.init_params(0), &data, &cfg, |e, _| {
            epochs.push(e);
            Ok(())
        })
        .unwrap();
        // 3 samples over a 2-sample set: one full epoch, then the partial one at the end
        assert_eq!(epochs, vec![0, 1]);
    }
}
