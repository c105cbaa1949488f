//! Training: per-batch loss assembly, the Adam step, and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{scale_augment, Scene};
use crate::error::{Error, Result};
use crate::model::heads::{
    classification_loss, classify_modes, closest_mode, decode_and_regress, soft_labels,
};
use crate::model::mae::mae_forward;
use crate::model::params::ModelParams;
use crate::modes::{flatten_future, MotionModeBank};
use crate::numerics::{AdamState, Tape, Tensor};

/// Mean losses over one batch or epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reg: f64,
    pub cls: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub reg: f64,
    pub cls: f64,
}

/// Owns the parameters, optimizer state, and bank for one training run.
pub struct Trainer {
    pub params: ModelParams,
    pub adam: AdamState,
    pub config: RunConfig,
    pub bank: MotionModeBank,
    steps_taken: u64,
}

impl Trainer {
    pub fn new(config: RunConfig, bank: MotionModeBank, seed: u64) -> Result<Self> {
        config.validate()?;
        if bank.k != config.model.k_modes {
            return Err(Error::Config(format!(
                "bank holds K = {} modes, config expects {}",
                bank.k, config.model.k_modes
            )));
        }
        if bank.t_pre != config.horizons.t_pre {
            return Err(Error::Config(format!(
                "bank horizon {} does not match configured t_pre {}",
                bank.t_pre, config.horizons.t_pre
            )));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut init_rng);
        let adam = AdamState::new(&params.shapes(), config.training.learning_rate);
        Ok(Trainer {
            params,
            adam,
            config,
            bank,
            steps_taken: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// One optimizer update on the mean batch loss. Scenes must carry
    /// futures. Rejects NaN in the loss or any gradient.
    pub fn train_step(&mut self, batch: &[Scene]) -> Result<LossBreakdown> {
        let (loss, breakdown, mut tape, bound) =
            batch_loss(batch, &self.params, &self.bank, &self.config)?;
        if !loss.item()?.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}",
                self.steps_taken + 1
            )));
        }
        let grads = tape.backward(&loss)?;
        let mut grad_tensors = Vec::new();
        for (name, t) in bound.named() {
            let g = grads.get_or_zeros(t);
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for '{name}' at step {}",
                    self.steps_taken + 1
                )));
            }
            grad_tensors.push(g);
        }
        let mut named = self.params.named_mut();
        let mut refs: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        self.adam.step(&mut refs, &grad_tensors)?;
        self.steps_taken += 1;
        Ok(breakdown)
    }
}

/// Assemble the mean batch loss on a fresh tape. Returns the scalar loss,
/// the reported breakdown, the tape, and the bound parameter copy.
pub fn batch_loss(
    batch: &[Scene],
    params: &ModelParams,
    bank: &MotionModeBank,
    config: &RunConfig,
) -> Result<(Tensor, LossBreakdown, Tape, ModelParams)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (loss, breakdown) = assemble_loss(&mut tape, batch, &bound, bank, config)?;
    Ok((loss, breakdown, tape, bound))
}

/// Mean batch loss over parameters used exactly as given (bound or not).
pub fn assemble_loss(
    tape: &mut Tape,
    batch: &[Scene],
    params: &ModelParams,
    bank: &MotionModeBank,
    config: &RunConfig,
) -> Result<(Tensor, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Contract("train step on an empty batch".into()));
    }
    let bound = params;
    let mut total: Option<Tensor> = None;
    let mut reg_sum = 0.0;
    let mut cls_sum = 0.0;
    for scene in batch {
        let future = scene
            .target_future
            .as_ref()
            .ok_or_else(|| Error::Contract("training scene without a future".into()))?;
        let mae = mae_forward(
            tape,
            scene,
            bank,
            &bound.mae,
            config.horizons.t_obs,
            config.horizons.t_pre,
            config.head_dim(),
        )?;
        let scores = classify_modes(tape, &mae.features, &bound.heads.cls)?;
        let labels = soft_labels(future, bank, config.model.soft_label_squared);
        let l_cls = classification_loss(tape, &scores, &labels)?;

        let k_star = closest_mode(future, bank);
        let (pred, _) =
            decode_and_regress(tape, &mae.features, &[k_star], scene, bank, bound, config)?;
        let target = Tensor::new(vec![1, 2 * config.horizons.t_pre], flatten_future(future))?;
        let l_reg = tape.smooth_l1(&pred, &target)?;

        let weighted_reg = tape.scale(&l_reg, config.model.loss_weight_reg)?;
        let weighted_cls = tape.scale(&l_cls, config.model.loss_weight_cls)?;
        let scene_loss = tape.add(&weighted_reg, &weighted_cls)?;
        total = Some(match total {
            None => scene_loss,
            Some(acc) => tape.add(&acc, &scene_loss)?,
        });
        reg_sum += l_reg.item()?;
        cls_sum += l_cls.item()?;
    }
    let n = batch.len() as f64;
    let loss = tape.scale(&total.unwrap(), 1.0 / n)?;
    let breakdown = LossBreakdown {
        total: loss.item()?,
        reg: reg_sum / n,
        cls: cls_sum / n,
    };
    Ok((loss, breakdown))
}

/// Epoch loop: seeded shuffling, optional scale augmentation, per-epoch
/// mean losses. The loop seed stream is independent of the trainer's
/// initialization stream.
pub fn train_epochs(
    trainer: &mut Trainer,
    scenes: &[Scene],
    epochs: usize,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    if scenes.is_empty() {
        return Err(Error::Data("no training scenes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let batch_size = trainer.config.training.batch_size;
    let augment = trainer.config.training.augment;
    let jitter = trainer.config.training.scale_jitter;
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown {
            total: 0.0,
            reg: 0.0,
            cls: 0.0,
        };
        let mut steps = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Scene> = chunk
                .iter()
                .map(|&i| {
                    if augment {
                        scale_augment(&scenes[i], jitter, &mut rng)
                    } else {
                        scenes[i].clone()
                    }
                })
                .collect();
            let b = trainer.train_step(&batch)?;
            sums.total += b.total;
            sums.reg += b.reg;
            sums.cls += b.cls;
            steps += 1;
        }
        log.push(EpochLog {
            epoch,
            total: sums.total / steps as f64,
            reg: sums.reg / steps as f64,
            cls: sums.cls / steps as f64,
        });
    }
    Ok(log)
}

/// Deterministic helper used by tests: a tiny synthetic training setup.
#[cfg(test)]
fn seeded_scenes_for_tests(n: usize, seed: u64) -> Vec<Scene> {
    use crate::data::NormTransform;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let speed = rng.gen_range(8.0..12.0);
            let curve = rng.gen_range(-0.02..0.02);
            let mut target_obs: Vec<[f64; 2]> = (0..8)
                .map(|k| {
                    let d = (7 - k) as f64 * 0.4 * speed;
                    [d, curve * d * d * 0.5]
                })
                .collect();
            target_obs[7] = [0.0, 0.0];
            let target_future: Vec<[f64; 2]> = (1..=12)
                .map(|k| {
                    let d = -(k as f64) * 0.4 * speed;
                    [d, curve * d * d * 0.5]
                })
                .collect();
            Scene {
                start_time: 0.0,
                target_obs,
                target_future: Some(target_future),
                neighbors_obs: vec![(0..8)
                    .map(|k| [(7 - k) as f64 * 0.4 * speed + 2.0, 3.5])
                    .collect()],
                neighbor_valid: vec![true],
                norm: NormTransform::identity(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modes::modes_from_training;
    use crate::numerics::grad_check_named;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.d_model = 16;
        c.model.heads = 2;
        c.model.k_modes = 4;
        c.model.k_top = 2;
        c.training.batch_size = 4;
        c.training.augment = false;
        c
    }

    fn setup(n_scenes: usize) -> (RunConfig, Vec<Scene>, MotionModeBank) {
        let config = small_config();
        let scenes = seeded_scenes_for_tests(n_scenes, 3);
        let bank = modes_from_training(&scenes, 4, 12, 1).unwrap();
        (config, scenes, bank)
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let (config, _, bank) = setup(8);
        let mut trainer = Trainer::new(config, bank, 0).unwrap();
        assert!(matches!(trainer.train_step(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn bank_config_mismatch_is_a_config_error() {
        let (mut config, scenes, _) = setup(8);
        config.model.k_modes = 4;
        let bank = modes_from_training(&scenes, 3, 12, 1).unwrap();
        assert!(matches!(
            Trainer::new(config, bank, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_classification_weight_kills_classifier_gradients() {
        let (mut config, scenes, bank) = setup(4);
        config.model.loss_weight_cls = 0.0;
        config.model.loss_weight_reg = 1.0;
        let trainer = Trainer::new(config.clone(), bank.clone(), 0).unwrap();
        let (loss, _, mut tape, bound) =
            batch_loss(&scenes[..4], &trainer.params, &bank, &config).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g_w = grads.get_or_zeros(&bound.heads.cls.w);
        let g_b = grads.get_or_zeros(&bound.heads.cls.b);
        assert!(g_w.data().iter().all(|&v| v == 0.0));
        assert!(g_b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_decreases_over_fifty_steps_on_a_fixed_batch() {
        let (config, scenes, bank) = setup(8);
        let mut trainer = Trainer::new(config, bank, 0).unwrap();
        let batch = &scenes[..8];
        let first = trainer.train_step(batch).unwrap();
        assert!(first.total.is_finite());
        let mut last = first;
        for _ in 0..49 {
            last = trainer.train_step(batch).unwrap();
            assert!(last.total.is_finite());
        }
        assert!(
            last.total < first.total,
            "loss did not decrease: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn full_step_gradients_match_finite_differences() {
        // K = 4, d_model = 16, 2-scene batch, a sample of parameters
        let (config, scenes, bank) = setup(8);
        let trainer = Trainer::new(config.clone(), bank.clone(), 0).unwrap();
        let params = trainer.params.clone();
        let batch: Vec<Scene> = scenes[..2].to_vec();

        let names = [
            "mae.embed.w",
            "mae.l0.h0.q_global.w",
            "mae.l1.h1.v.b",
            "hid.embed.w",
            "hid.l0.lambda_raw",
            "hid.l0.gate.w",
            "hid.l0.h0.k_neighbor.w",
            "head.cls.w",
            "head.reg.b",
        ];
        let lookup = |p: &ModelParams, name: &str| -> Tensor {
            p.named()
                .into_iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .unwrap()
        };
        let inputs: Vec<(&str, Tensor)> = names.iter().map(|&n| (n, lookup(&params, n))).collect();

        let report = grad_check_named(
            move |tape, vals| {
                // splice the checked values into a fresh parameter copy
                let mut p = params.clone();
                for (i, (name, _)) in names.iter().map(|n| (*n, ())).enumerate() {
                    for (n, t) in p.named_mut() {
                        if n == name {
                            *t = vals[i].clone();
                        }
                    }
                }
                let mut total: Option<Tensor> = None;
                for scene in &batch {
                    let future = scene.target_future.as_ref().unwrap();
                    let mae = mae_forward(tape, scene, &bank, &p.mae, 8, 12, 8).unwrap();
                    let scores = classify_modes(tape, &mae.features, &p.heads.cls).unwrap();
                    let labels = soft_labels(future, &bank, false);
                    let l_cls = classification_loss(tape, &scores, &labels).unwrap();
                    let k_star = closest_mode(future, &bank);
                    let (pred, _) = decode_and_regress(
                        tape,
                        &mae.features,
                        &[k_star],
                        scene,
                        &bank,
                        &p,
                        &config,
                    )
                    .unwrap();
                    let target = Tensor::new(vec![1, 24], flatten_future(future)).unwrap();
                    let l_reg = tape.smooth_l1(&pred, &target).unwrap();
                    let l = tape.add(&l_reg, &l_cls).unwrap();
                    total = Some(match total {
                        None => l,
                        Some(acc) => tape.add(&acc, &l).unwrap(),
                    });
                }
                tape.scale(&total.unwrap(), 0.5).unwrap()
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed,
            "max rel err {:.3e} at {:?}",
            report.max_rel_err, report.worst
        );
    }

    #[test]
    fn epoch_loop_is_deterministic() {
        let (mut config, scenes, bank) = setup(8);
        config.training.augment = true;
        config.training.epochs = 2;
        let run = || {
            let mut t = Trainer::new(config.clone(), bank.clone(), 11).unwrap();
            let log = train_epochs(&mut t, &scenes, 2, 11).unwrap();
            (t.params, log)
        };
        let (pa, la) = run();
        let (pb, lb) = run();
        assert_eq!(pa, pb);
        assert_eq!(la.len(), lb.len());
        for (a, b) in la.iter().zip(&lb) {
            assert_eq!(a.total, b.total);
        }
    }

    #[test]
    fn nan_parameters_abort_with_a_numeric_error() {
        let (config, scenes, bank) = setup(4);
        let mut trainer = Trainer::new(config, bank, 0).unwrap();
        trainer.params.heads.reg.w.data_mut()[0] = f64::NAN;
        let err = trainer.train_step(&scenes[..4]).unwrap_err();
        assert!(
            matches!(err, Error::Numeric(_) | Error::Contract(_)),
            "got {err:?}"
        );
    }
}
