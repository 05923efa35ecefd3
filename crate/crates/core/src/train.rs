//! Mini-batch training with Adam.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::features::Dataset;
use crate::model::{loss_and_grads, ModelConfig, ModelParams, VideoStep};
use crate::params::group_rng;
use crate::tensor::Tensor;

/// Stream offset that keeps shuffling draws apart from initialization draws.
const SHUFFLE_STREAM: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    #[default]
    Single,
    /// One tape per batch element on the rayon pool; gradients are still
    /// summed in batch order.
    DataParallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    /// Save a checkpoint every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub parallelism: Parallelism,
    /// Stop once training accuracy after an epoch reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            epochs: 200,
            batch_size: 32,
            learning_rate: 5e-4,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: None,
            parallelism: Parallelism::Single,
            target_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "epochs ({}) and batch size ({}) must be positive",
                self.epochs, self.batch_size
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {:?}", self.adam)));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint cadence must be positive".into()));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("target accuracy {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
pub struct Adam {
    config: AdamConfig,
    lr: f64,
    step: i32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, config: AdamConfig) -> Self {
        let zeros = params.map(|_, t| Tensor::zeros(t.shape()));
        Adam {
            config,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let lr = self.lr;
        let grads = grads.to_vec();
        let ms = self.m.to_vec_mut();
        let vs = self.v.to_vec_mut();
        let ps = params.to_vec_mut();
        for (((p, g), m), v) in ps.into_iter().zip(grads).zip(ms).zip(vs) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p[i] = (p[i] as f64 - update) as f32;
            }
        }
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: MetricsReport,
}

/// Epoch permutation, reproducible from `(seed, epoch)` alone.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut group_rng(seed, SHUFFLE_STREAM + epoch as u64));
    order
}

fn group_of(name: &str) -> String {
    name.split('.').next().unwrap_or(name).to_string()
}

fn first_non_finite(params: &ModelParams) -> Option<String> {
    let mut found = None;
    params.for_each(|name, t| {
        if found.is_none() && !t.all_finite() {
            found = Some(group_of(name));
        }
    });
    found
}

/// Trains on `dataset`; with `checkpoint_dir` set, periodic checkpoints go to
/// `epoch-NNNN/` subdirectories.
pub fn train(config: &TrainConfig, dataset: &Dataset, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.dims() != config.model.features {
        return Err(Error::Consistency(format!(
            "dataset dims {:?} do not match configured dims {:?}",
            dataset.dims(),
            config.model.features
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let started = Instant::now();
    let model = config.model;
    let mut params = ModelParams::init(&model, config.seed)?;
    let mut adam = Adam::new(&params, config.learning_rate, config.adam);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut accuracy_curve = Vec::new();
    let mut step = 0;
    let mut epochs_run = 0;

    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, dataset.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let run = |&i: &usize| -> Result<VideoStep<f32>> {
                loss_and_grads(&dataset.bundles[i], dataset.labels(i), &params, &model)
            };
            let steps: Vec<VideoStep<f32>> = match config.parallelism {
                Parallelism::Single => batch.iter().map(run).collect::<Result<_>>()?,
                Parallelism::DataParallel => batch.par_iter().map(run).collect::<Result<_>>()?,
            };
            let mut grads = params.map(|_, t| Tensor::<f32>::zeros(t.shape()));
            for s in &steps {
                if let Some(module) = s.non_finite {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        module: module.to_string(),
                    });
                }
                epoch_loss += s.loss;
                let mut it = s.grads.to_vec().into_iter();
                grads.for_each_mut(|_, acc| {
                    let g = it.next().expect("same layout");
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                });
            }
            let inv = 1.0 / batch.len() as f32;
            grads.for_each_mut(|_, g| g.data_mut().iter_mut().for_each(|x| *x *= inv));
            if let Some(module) = first_non_finite(&grads) {
                return Err(Error::Divergence { epoch, step, module });
            }
            adam.step(&mut params, &grads);
            if let Some(module) = first_non_finite(&params) {
                return Err(Error::Divergence { epoch, step, module });
            }
            step += 1;
        }
        loss_curve.push(epoch_loss / dataset.len() as f64);
        epochs_run = epoch + 1;

        if let (Some(every), Some(dir)) = (config.checkpoint_every, checkpoint_dir) {
            if epochs_run % every == 0 {
                checkpoint::save(&dir.join(format!("epoch-{epochs_run:04}")), &params, &model, Some(epochs_run))?;
            }
        }
        if let Some(target) = config.target_accuracy {
            let acc = evaluate(&params, &model, dataset)?.accuracy();
            accuracy_curve.push(acc);
            if acc >= target {
                break;
            }
        }
    }

    let eval = evaluate(&params, &model, dataset)?;
    let mut report = MetricsReport::from_evaluation(&eval, model, 0.0);
    report.seed = Some(config.seed);
    report.loss_curve = loss_curve;
    report.accuracy_curve = accuracy_curve;
    report.epochs_run = epochs_run;
    report.train = Some(*config);
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { params, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::synth::{generate, SynthConfig};
    use crate::features::FeatureDims;
    use crate::model::{HiddenDims, Supervision};

    fn small() -> (TrainConfig, Dataset) {
        let dims = FeatureDims {
            t: 4,
            d_a: 6,
            d_v: 5,
            h: 2,
            w: 2,
            classes: 3,
        };
        let data = generate(&SynthConfig {
            seed: 5,
            videos: 4,
            dims,
            ..SynthConfig::default()
        })
        .unwrap()
        .dataset;
        let mut model = ModelConfig::new(dims);
        model.hidden = HiddenDims { d_h: 4, d_m: 4 };
        let mut config = TrainConfig::new(model);
        config.epochs = 1;
        config.batch_size = 2;
        (config, data)
    }

    #[test]
    fn one_epoch_smoke() {
        let (config, data) = small();
        let out = train(&config, &data, None).unwrap();
        assert_eq!(out.report.loss_curve.len(), 1);
        assert!(out.report.loss_curve[0].is_finite());
        assert!((0.0..=1.0).contains(&out.report.accuracy));
    }

    #[test]
    fn same_seed_same_curve() {
        let (mut config, data) = small();
        config.epochs = 3;
        let a = train(&config, &data, None).unwrap();
        let b = train(&config, &data, None).unwrap();
        let bits = |r: &MetricsReport| r.loss_curve.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.report), bits(&b.report));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn data_parallel_matches_single() {
        let (mut config, data) = small();
        config.epochs = 2;
        let a = train(&config, &data, None).unwrap();
        config.parallelism = Parallelism::DataParallel;
        let b = train(&config, &data, None).unwrap();
        assert_eq!(a.report.loss_curve, b.report.loss_curve);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn weak_mode_trains() {
        let (mut config, data) = small();
        config.model.mode = Supervision::Weak;
        let out = train(&config, &data, None).unwrap();
        assert!(out.report.loss_curve[0].is_finite());
    }

    #[test]
    fn shuffle_depends_on_seed_and_epoch() {
        assert_eq!(epoch_order(1, 2, 20), epoch_order(1, 2, 20));
        assert_ne!(epoch_order(1, 2, 20), epoch_order(1, 3, 20));
        assert_ne!(epoch_order(1, 2, 20), epoch_order(2, 2, 20));
        let mut o = epoch_order(4, 0, 20);
        o.sort();
        assert_eq!(o, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn huge_learning_rate_reports_divergence_module() {
        let (mut config, data) = small();
        config.learning_rate = 1e38;
        config.epochs = 5;
        match train(&config, &data, None) {
            Err(Error::Divergence { module, .. }) => assert!(!module.is_empty()),
            Ok(_) => panic!("expected divergence"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn checkpoints_at_cadence() {
        let (mut config, data) = small();
        config.epochs = 4;
        config.checkpoint_every = Some(2);
        let dir = tempfile::tempdir().unwrap();
        train(&config, &data, Some(dir.path())).unwrap();
        assert!(dir.path().join("epoch-0002/index.json").exists());
        assert!(dir.path().join("epoch-0004/index.json").exists());
        assert!(!dir.path().join("epoch-0003").exists());
    }

    #[test]
    fn invalid_config_rejected() {
        let (mut config, data) = small();
        config.batch_size = 0;
        assert!(matches!(train(&config, &data, None), Err(Error::Config(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (config, _) = small();
        let mut p = ModelParams::init(&config.model, 0).unwrap();
        let before = p.clone();
        let grads = p.map(|_, t| Tensor::full(t.shape(), 3.0));
        let mut adam = Adam::new(&p, 0.01, AdamConfig::default());
        adam.step(&mut p, &grads);
        for (a, b) in before.to_vec().iter().zip(p.to_vec()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(((x - y) - 0.01).abs() < 1e-6);
            }
        }
    }
}
