use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ensemble::member_seed;
use super::trainer::{train_fold, FoldData, TrainConfig};
use crate::data::{make_folds, FeatureStore, Manifest};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::signal::{read_feature_header, EnhancerSpec, ToySfm, ToySfmConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub val_rmse: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub best_layer: usize,
}

/// Layer count shared by every feature file in `m`, or `None` when no clip
/// is feature-backed. 2-D files and disagreeing counts are contract errors.
pub fn feature_layer_count(m: &Manifest) -> Result<Option<usize>> {
    let mut seen: Option<(usize, String)> = None;
    for c in m.clips() {
        let files = c.noisy_features.iter().chain(c.enhanced_features.values().flatten());
        for p in files {
            let h = read_feature_header(p)?;
            let l = h.layers().ok_or_else(|| {
                Error::contract(format!(
                    "{} is 2-D; a layer sweep needs [layers × frames × dim] files",
                    p.display()
                ))
            })?;
            match &seen {
                None => seen = Some((l, p.display().to_string())),
                Some((n, first)) if *n != l => {
                    return Err(Error::contract(format!(
                        "inconsistent layer counts: {first} has {n}, {} has {l}",
                        p.display()
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(seen.map(|(n, _)| n))
}

/// Train one reduced-budget model per layer on the first fold and report
/// validation RMSE per layer. Ties go to the lower layer.
pub fn layer_sweep(
    m: &Manifest,
    model_cfg: &ModelConfig,
    frontend: &ToySfmConfig,
    enhancer: &EnhancerSpec,
    cfg: &TrainConfig,
) -> Result<SweepTable> {
    cfg.validate()?;
    let feature_backed = m.clips().iter().filter(|c| c.is_feature_backed()).count();
    let n_layers = match feature_layer_count(m)? {
        Some(n) if feature_backed == m.len() || n == frontend.n_layers => n,
        Some(n) => {
            return Err(Error::contract(format!(
                "feature files have {n} layers but the toy extractor has {}",
                frontend.n_layers
            )))
        }
        None => frontend.n_layers,
    };
    let layers: Vec<usize> = (0..n_layers).collect();
    let store = FeatureStore::build(m, std::slice::from_ref(enhancer), &ToySfm::new(frontend.clone())?, &layers)?;
    let plan = make_folds(m, cfg.n_folds, cfg.seed)?;
    let fold = &plan.folds[0];
    let (train, validation) = (store.positions(&fold.train)?, store.positions(&fold.validation)?);
    let sweep_cfg = TrainConfig {
        epochs: cfg.sweep_epochs,
        ..cfg.clone()
    };
    let seed = member_seed(cfg.seed, 0, 0);
    let rows = layers
        .par_iter()
        .map(|&layer| {
            let mcfg = ModelConfig {
                sfm_layer_index: layer,
                ..model_cfg.clone()
            };
            let data = FoldData {
                store: &store,
                train: &train,
                validation: &validation,
                enhancer: 0,
                layer_pos: layer,
            };
            let out = train_fold(&mcfg, data, &sweep_cfg, seed)?;
            Ok(SweepRow {
                layer,
                val_rmse: out.best_val_rmse,
                best_epoch: out.best_epoch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best_layer = rows
        .iter()
        .fold(None::<&SweepRow>, |b, r| match b {
            Some(b) if b.val_rmse <= r.val_rmse => Some(b),
            _ => Some(r),
        })
        .map(|r| r.layer)
        .expect("at least one layer");
    Ok(SweepTable { rows, best_layer })
}
