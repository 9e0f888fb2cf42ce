use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::metrics::rmse;
use crate::data::{batch_indices, FeatureStore};
use crate::error::{Error, Result};
use crate::model::{BinauralInput, ModelConfig, PredictorModel};
use crate::nn::{Ctx, Dropout};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// On the 0–100 score scale.
    pub huber_delta: f64,
    pub seed: u64,
    pub n_folds: usize,
    /// Global gradient-norm cap; off unless set.
    pub clip_grad_norm: Option<f64>,
    /// Epoch budget per layer in [`layer_sweep`](super::layer_sweep).
    pub sweep_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: 4e-5,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            huber_delta: 10.0,
            seed: 0,
            n_folds: crate::data::N_FOLDS,
            clip_grad_norm: None,
            sweep_epochs: 5,
        }
    }
}

impl TrainConfig {
    /// Budget that fits the synthetic benchmark in a few CPU minutes.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 15,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be a nonnegative finite number, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bad.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            bad.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.huber_delta > 0.0) {
            bad.push(format!("huber_delta must be positive, got {}", self.huber_delta));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.n_folds == 0 || self.sweep_epochs == 0 {
            bad.push("epochs, batch_size, n_folds and sweep_epochs must be positive".into());
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                bad.push(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("; ")))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Training and validation items of one fold, as store positions.
#[derive(Clone, Copy, Debug)]
pub struct FoldData<'a> {
    pub store: &'a FeatureStore,
    pub train: &'a [usize],
    pub validation: &'a [usize],
    pub enhancer: usize,
    pub layer_pos: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub model: PredictorModel<f32>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub curve: Vec<EpochRecord>,
}

const EVAL_CHUNK: usize = 64;

/// Inference scores of store items.
pub fn predict_items(
    model: &PredictorModel<f32>,
    store: &FeatureStore,
    items: &[usize],
    enhancer: usize,
    layer_pos: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_CHUNK) {
        let inputs = chunk
            .iter()
            .map(|&i| store.input(i, enhancer, layer_pos))
            .collect::<Result<Vec<_>>>()?;
        out.extend(model.predict_batch(&inputs)?);
    }
    Ok(out)
}

/// Validation RMSE of `model` on store items.
pub fn validation_rmse(model: &PredictorModel<f32>, data: &FoldData<'_>) -> Result<f64> {
    let preds = predict_items(model, data.store, data.validation, data.enhancer, data.layer_pos)?;
    let targets: Vec<f64> = data.validation.iter().map(|&i| data.store.clip(i).score).collect();
    rmse(&preds, &targets)
}

/// Loss and per-parameter gradients of one padded batch.
pub fn batch_gradients(
    model: &PredictorModel<f32>,
    inputs: &[BinauralInput<f32>],
    targets: &[f64],
    huber_delta: f64,
    dropout: &mut Dropout,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g, true);
    let mut ctx = Ctx::new(&mut g, &vars).with_dropout(dropout);
    let scores = inputs
        .iter()
        .map(|x| model.forward(&mut ctx, x))
        .collect::<Result<Vec<_>>>()?;
    let pred = g.concat(&scores, 0)?;
    let t: Vec<f32> = targets.iter().map(|&v| v as f32).collect();
    let loss = g.huber(pred, &t, huber_delta as f32)?;
    let value = g.data(loss)[0] as f64;
    let mut grads = g.backward(loss)?;
    let out = vars
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    Ok((value, out))
}

fn param_norms(model: &PredictorModel<f32>) -> String {
    let mut norms: Vec<(f64, &str)> = model
        .params
        .iter()
        .map(|(n, t)| (t.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt(), n))
        .collect();
    norms.sort_by(|a, b| b.0.total_cmp(&a.0));
    norms
        .iter()
        .take(5)
        .map(|(v, n)| format!("{n}={v:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn clip_norm(grads: &mut [Vec<f32>], cap: f64) {
    let norm = grads.iter().flatten().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    if norm > cap {
        let k = (cap / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
}

/// Train one model from `seed` and keep the epoch with the lowest
/// validation RMSE (earliest on ties).
pub fn train_fold(model_cfg: &ModelConfig, data: FoldData<'_>, cfg: &TrainConfig, seed: u64) -> Result<FoldOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::contract(format!(
            "fold needs train and validation items, got {} and {}",
            data.train.len(),
            data.validation.len()
        )));
    }
    let mut model = PredictorModel::<f32>::new(model_cfg.clone(), seed)?;
    let mut state = AdamState::new(model.params.tensors());
    let mut dropout = Dropout::new(model_cfg.dropout, seed ^ 0xd20f_u64);
    let adam = cfg.adam();
    let mut best: Option<(usize, f64, PredictorModel<f32>)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let batches = batch_indices(data.train, cfg.batch_size, seed, epoch as u64);
        for (b, idxs) in batches.iter().enumerate() {
            let batch = data.store.batch(idxs, data.enhancer, data.layer_pos)?;
            let (loss, mut grads) = batch_gradients(&model, &batch.inputs, &batch.targets, cfg.huber_delta, &mut dropout)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {b}; largest parameter norms: {}",
                    param_norms(&model)
                )));
            }
            if let Some(cap) = cfg.clip_grad_norm {
                clip_norm(&mut grads, cap);
            }
            adam_step(model.params.tensors_mut(), &grads, &mut state, &adam)?;
            loss_sum += loss * idxs.len() as f64;
        }
        let train_loss = loss_sum / data.train.len() as f64;
        let val = validation_rmse(&model, &data)?;
        if !val.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite validation RMSE after epoch {epoch}; largest parameter norms: {}",
                param_norms(&model)
            )));
        }
        debug!("epoch {epoch}: train loss {train_loss:.4}, validation rmse {val:.4}");
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_rmse: val,
        });
        if best.as_ref().is_none_or(|(_, r, _)| val < *r) {
            best = Some((epoch, val, model.clone()));
        }
    }
    let (best_epoch, best_val_rmse, model) = best.expect("at least one epoch");
    info!("fold seed {seed}: best epoch {best_epoch}, validation rmse {best_val_rmse:.4}");
    Ok(FoldOutcome {
        model,
        best_epoch,
        best_val_rmse,
        curve,
    })
}
