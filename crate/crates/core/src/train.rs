//! Minibatch Adam training and test-set evaluation.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{apply_noise, render_grid, Dataset, NoiseSpec};
use crate::error::{contract, Error, Result};
use crate::metrics::{default_thresholds, metric_report, MetricReport, SampleOutcome};
use crate::distributions::DEFAULT_VARIANCE_FLOOR;
use crate::model::{
    AlphaInput, LossBreakdown, Mechanism, ModalityConfig, Model, ModelParams, RngNoise,
};
use crate::numerics::NumArray;
use crate::rng::{derive, stream};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

// Labels that split one user seed into independent purposes.
const SEED_INIT: u64 = 1;
const SEED_TRAIN_NOISE: u64 = 2;
const SEED_SHUFFLE: u64 = 3;
const SEED_REPARAM: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mechanism: Mechanism,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Corruption applied to the training set before the first epoch.
    pub train_noise: NoiseSpec,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub alpha_hidden: Vec<usize>,
    pub alpha_input: AlphaInput,
    /// Floor on fused variances; `None` disables it.
    pub variance_floor: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Gpoe,
            beta: 1e-2,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            train_noise: NoiseSpec::CLEAN,
            latent_dim: 8,
            hidden: alloc::vec![64],
            alpha_hidden: alloc::vec![32],
            alpha_input: AlphaInput::Features,
            variance_floor: Some(DEFAULT_VARIANCE_FLOOR),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(contract!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(contract!("beta must be finite and >= 0, got {}", self.beta));
        }
        if self.batch_size == 0 {
            return Err(contract!("batch size must be >= 1"));
        }
        if self.latent_dim == 0 {
            return Err(contract!("latent dimension must be >= 1"));
        }
        if self
            .hidden
            .iter()
            .chain(&self.alpha_hidden)
            .any(|&w| w == 0)
        {
            return Err(contract!("hidden widths must be >= 1"));
        }
        if let Some(f) = self.variance_floor {
            if !(f > 0.0) || !f.is_finite() {
                return Err(contract!("variance floor must be positive, got {f}"));
            }
        }
        self.train_noise.validate()
    }

    /// Model layout for `dataset` under this configuration.
    pub fn modality_config(&self, dataset: &Dataset) -> ModalityConfig {
        let mut c = ModalityConfig::new(
            dataset.input_spec(),
            dataset.target_spec(),
            dataset.aux_specs(),
        );
        c.latent_dim = self.latent_dim;
        c.hidden = self.hidden.clone();
        c.alpha_hidden = self.alpha_hidden.clone();
        c.alpha_input = self.alpha_input;
        c.variance_floor = self.variance_floor;
        c
    }
}

/// Adam moment estimates, one pair per parameter entry.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<NumArray>,
    pub v: Vec<NumArray>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<NumArray> = params
            .iter()
            .map(|(_, a)| NumArray::zeros(a.shape()).expect("parameter shapes are valid"))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads` follows the parameter registry
/// order. Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[NumArray],
    state: &mut OptState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(contract!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("gradient of {name} is non-finite")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
    for (((p, g), m), v) in params
        .arrays_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// Sample-weighted mean loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<Trained> {
    train_with(dataset, config, |_| {})
}

/// Trains and calls `on_epoch` after every epoch.
pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Trained> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(contract!("training set is empty"));
    }
    dataset.validate()?;
    let model = Model::new(config.modality_config(dataset))?;
    let mut params = model.init_params(&mut stream(derive(config.seed, SEED_INIT), 0))?;
    let data = apply_noise(
        dataset,
        &config.train_noise,
        derive(config.seed, SEED_TRAIN_NOISE),
    )?;
    let mut state = OptState::new(&params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut stream(derive(config.seed, SEED_SHUFFLE), epoch as u64));
        let mut noise = RngNoise(stream(derive(config.seed, SEED_REPARAM), epoch as u64));
        let mut acc = [0.0; 4];
        for (step, rows) in order.chunks(config.batch_size).enumerate() {
            let batch = data.batch(rows)?;
            let at = |e: Error| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("diverged at epoch {epoch}, step {step}: {msg}"))
                }
                other => other,
            };
            let (loss, grads) = model
                .objective_with_grad(&params, &batch, config.beta, config.mechanism, &mut noise)
                .map_err(at)?;
            adam_step(&mut params, &grads, &mut state, config.learning_rate).map_err(at)?;
            params.check_finite().map_err(at)?;
            let w = rows.len() as f64;
            for (a, v) in
                acc.iter_mut()
                    .zip([loss.target_recon, loss.aux_recon, loss.kl, loss.total])
            {
                *a += w * v;
            }
        }
        let n = data.len() as f64;
        let entry = EpochLog {
            epoch,
            loss: LossBreakdown {
                target_recon: acc[0] / n,
                aux_recon: acc[1] / n,
                kl: acc[2] / n,
                total: acc[3] / n,
                beta: config.beta,
            },
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(Trained { model, params, log })
}

/// Unimodal keypoint predictions for every scene, one row per scene.
pub fn predict(model: &Model, params: &ModelParams, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(dataset.len());
    let all: Vec<usize> = (0..dataset.len()).collect();
    for rows in all.chunks(EVAL_CHUNK) {
        let grids: Vec<&[f64]> = rows
            .iter()
            .map(|&r| dataset.scenes[r].grid.as_slice())
            .collect();
        let y = model.infer_unimodal(params, &NumArray::from_rows(&grids)?)?;
        out.extend((0..rows.len()).map(|r| y.row_slice(r).to_vec()));
    }
    Ok(out)
}

/// Corrupts `test` with `spec`, predicts keypoints from the grid alone and
/// scores them. Scenes count as corrupted only if `spec` can change them.
/// Masks compare the rendering of the clamped prediction with the rendering
/// of the true keypoints.
pub fn evaluate(
    model: &Model,
    params: &ModelParams,
    test: &Dataset,
    spec: &NoiseSpec,
    seed: u64,
) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(contract!("test set is empty"));
    }
    // A spec that changes no value leaves every scene in the clean stratum.
    let noisy = if spec.is_clean() {
        spec.validate()?;
        test.clone()
    } else {
        apply_noise(test, spec, seed)?
    };
    let preds = predict(model, params, &noisy)?;
    let g = test.grid_size;
    let mut masks = Vec::with_capacity(preds.len());
    for (p, s) in preds.iter().zip(&noisy.scenes) {
        let clamped: Vec<f64> = p.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        masks.push((render_grid(&clamped, g)?, render_grid(&s.keypoints, g)?));
    }
    let samples: Vec<SampleOutcome<'_>> = preds
        .iter()
        .zip(&noisy.scenes)
        .zip(&masks)
        .map(|((p, s), (pm, gm))| SampleOutcome {
            pred_keypoints: p,
            gt_keypoints: &s.keypoints,
            pred_mask: pm,
            gt_mask: gm,
            corrupted: s.corrupted,
        })
        .collect();
    metric_report(&samples, 2, &default_thresholds())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use alloc::vec;

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            latent_dim: 4,
            hidden: vec![16],
            alpha_hidden: vec![8],
            ..TrainConfig::default()
        }
    }

    fn one_param(value: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("w", NumArray::row(&[value, -value]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one_param(0.7);
        let before = p.clone();
        let mut s = OptState::new(&p);
        let g = [NumArray::zeros(&[1, 2]).unwrap()];
        adam_step(&mut p, &g, &mut s, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = one_param(1.0);
        let mut s = OptState::new(&p);
        let g = [NumArray::row(&[0.5, -2.0]).unwrap()];
        let lr = 1e-2;
        adam_step(&mut p, &g, &mut s, lr).unwrap();
        let got = p.get("w").unwrap().data();
        for (i, (&gi, &start)) in [0.5f64, -2.0].iter().zip(&[1.0, -1.0]).enumerate() {
            let expect = start - lr * gi / (gi.abs() + ADAM_EPSILON);
            assert!((got[i] - expect).abs() < 1e-12, "{} vs {}", got[i], expect);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one_param(1.0);
        let before = p.clone();
        let mut s = OptState::new(&p);
        let g = [NumArray::row(&[f64::NAN, 0.0]).unwrap()];
        match adam_step(&mut p, &g, &mut s, 1e-3) {
            Err(Error::Numeric(msg)) => assert!(msg.contains('w'), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let d = generate_dataset(20, 3, 8, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let t = train(&d, &cfg).unwrap();
        assert!(t.log.is_empty());
        let fresh = t
            .model
            .init_params(&mut stream(derive(cfg.seed, SEED_INIT), 0))
            .unwrap();
        assert_eq!(t.params, fresh);
    }

    #[test]
    fn training_is_reproducible_and_additive() {
        let d = generate_dataset(40, 3, 8, 2).unwrap();
        let cfg = TrainConfig {
            train_noise: NoiseSpec::new(0.3, 0.05, 0.5).unwrap(),
            ..small_config()
        };
        for mechanism in Mechanism::ALL {
            let cfg = TrainConfig {
                mechanism,
                ..cfg.clone()
            };
            let a = train(&d, &cfg).unwrap();
            let b = train(&d, &cfg).unwrap();
            assert_eq!(a.params, b.params, "{mechanism}");
            assert_eq!(a.log, b.log);
            assert_eq!(a.log.len(), 2);
            for e in &a.log {
                assert!(e.loss.additivity_gap() <= 1e-9);
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_stratified() {
        let d = generate_dataset(30, 3, 8, 3).unwrap();
        let t = train(&d, &small_config()).unwrap();
        let test = generate_dataset(20, 3, 8, 4).unwrap();
        let clean = evaluate(&t.model, &t.params, &test, &NoiseSpec::CLEAN, 0).unwrap();
        assert_eq!(clean.clean, Some(clean.all));
        assert!(clean.corrupted.is_none());
        let spec = NoiseSpec::new(0.5, 0.0, 0.5).unwrap();
        let a = evaluate(&t.model, &t.params, &test, &spec, 9).unwrap();
        assert_eq!(a, evaluate(&t.model, &t.params, &test, &spec, 9).unwrap());
        assert_eq!(a.corrupted.unwrap().samples, 10);
        for m in [a.all.auc, a.all.iou, a.all.f1] {
            assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let d = generate_dataset(5, 2, 4, 1).unwrap();
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..small_config()
            },
            TrainConfig {
                batch_size: 0,
                ..small_config()
            },
            TrainConfig {
                beta: -1.0,
                ..small_config()
            },
            TrainConfig {
                latent_dim: 0,
                ..small_config()
            },
            TrainConfig {
                hidden: vec![0],
                ..small_config()
            },
        ] {
            assert!(matches!(train(&d, &bad), Err(Error::Contract(_))));
        }
    }
}
