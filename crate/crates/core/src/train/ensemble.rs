//! Fold × enhancer ensembles: training, persistence and averaged inference.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::trainer::{train_fold, EpochRecord, FoldData, TrainConfig};
use crate::data::{make_folds, FeatureStore, FoldPlan, Manifest};
use crate::error::{Error, Result};
use crate::model::{checkpoint, ModelConfig, PredictorModel};
use crate::signal::{EnhancerSpec, ToySfm, ToySfmConfig};

pub const ENSEMBLE_FILE: &str = "ensemble.json";

/// Seed of member `(enhancer, fold)`, mixed from the master seed.
pub fn member_seed(master: u64, enhancer: usize, fold: usize) -> u64 {
    // splitmix64 finaliser over a packed key
    let mut z = master
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(1 + ((enhancer as u64) << 16 | fold as u64)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub enhancer: String,
    pub fold: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_rmse: f64,
    /// Checkpoint file, relative to the ensemble directory.
    pub checkpoint: String,
}

#[derive(Clone, Debug)]
pub struct Member {
    pub record: MemberRecord,
    pub model: PredictorModel<f32>,
    pub curve: Vec<EpochRecord>,
}

/// Everything needed to rebuild features and reproduce predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub dataset: String,
    pub model: ModelConfig,
    pub frontend: ToySfmConfig,
    pub enhancers: Vec<EnhancerSpec>,
    pub train: TrainConfig,
    pub fold_plan: FoldPlan,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EnsembleFile {
    #[serde(flatten)]
    spec: EnsembleSpec,
    members: Vec<MemberRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainedEnsemble {
    pub spec: EnsembleSpec,
    /// Enhancer-major: all folds of the first enhancer, then the next.
    pub members: Vec<Member>,
}

fn member_file(enhancer: &str, fold: usize, ext: &str) -> String {
    let safe: String = enhancer
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}-fold{fold}.{ext}")
}

/// Features the ensemble's members consume, for every clip of `m`.
pub fn ensemble_store(m: &Manifest, spec_model: &ModelConfig, frontend: &ToySfmConfig, enhancers: &[EnhancerSpec]) -> Result<FeatureStore> {
    FeatureStore::build(m, enhancers, &ToySfm::new(frontend.clone())?, &[spec_model.sfm_layer_index])
}

/// Train `n_folds` members per enhancer on a prebuilt store.
///
/// The store must hold `enhancers` in order and the single layer
/// `model_cfg.sfm_layer_index`. Members train in parallel on the current
/// rayon pool; each one is deterministic on its own.
pub fn train_ensemble_on(
    store: &FeatureStore,
    dataset: &str,
    model_cfg: &ModelConfig,
    frontend: &ToySfmConfig,
    enhancers: &[EnhancerSpec],
    plan: &FoldPlan,
    cfg: &TrainConfig,
) -> Result<TrainedEnsemble> {
    cfg.validate()?;
    model_cfg.validate()?;
    if enhancers.is_empty() {
        return Err(Error::config("at least one enhancer is required"));
    }
    if plan.folds.len() != cfg.n_folds {
        return Err(Error::contract(format!(
            "fold plan has {} folds but n_folds is {}",
            plan.folds.len(),
            cfg.n_folds
        )));
    }
    let names: Vec<&str> = enhancers.iter().map(|e| e.name.as_str()).collect();
    if store.enhancers() != names.as_slice() {
        return Err(Error::contract(format!(
            "feature store holds enhancers {:?}, expected {names:?}",
            store.enhancers()
        )));
    }
    let folds = plan
        .folds
        .iter()
        .map(|f| Ok((store.positions(&f.train)?, store.positions(&f.validation)?)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..enhancers.len())
        .flat_map(|e| (0..plan.folds.len()).map(move |k| (e, k)))
        .collect();
    let members = jobs
        .par_iter()
        .map(|&(e, k)| {
            let seed = member_seed(cfg.seed, e, k);
            let data = FoldData {
                store,
                train: &folds[k].0,
                validation: &folds[k].1,
                enhancer: e,
                layer_pos: 0,
            };
            let name = &enhancers[e].name;
            let out = train_fold(model_cfg, data, cfg, seed).map_err(|source| Error::Member {
                enhancer: name.clone(),
                fold: k,
                source: Box::new(source),
            })?;
            Ok(Member {
                record: MemberRecord {
                    enhancer: name.clone(),
                    fold: k,
                    seed,
                    best_epoch: out.best_epoch,
                    val_rmse: out.best_val_rmse,
                    checkpoint: format!("members/{}", member_file(name, k, "ckpt")),
                },
                model: out.model,
                curve: out.curve,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedEnsemble {
        spec: EnsembleSpec {
            dataset: dataset.to_string(),
            model: model_cfg.clone(),
            frontend: frontend.clone(),
            enhancers: enhancers.to_vec(),
            train: cfg.clone(),
            fold_plan: plan.clone(),
        },
        members,
    })
}

/// Build features, plan folds from `cfg.seed` and train every member.
pub fn train_ensemble(
    m: &Manifest,
    model_cfg: &ModelConfig,
    frontend: &ToySfmConfig,
    enhancers: &[EnhancerSpec],
    cfg: &TrainConfig,
) -> Result<TrainedEnsemble> {
    cfg.validate()?;
    let plan = make_folds(m, cfg.n_folds, cfg.seed)?;
    let store = ensemble_store(m, model_cfg, frontend, enhancers)?;
    train_ensemble_on(&store, &m.info.name, model_cfg, frontend, enhancers, &plan, cfg)
}

impl TrainedEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member_ids(&self) -> Vec<String> {
        self.members
            .iter()
            .map(|m| format!("{}/fold{}", m.record.enhancer, m.record.fold))
            .collect()
    }

    /// Each member's score for store item `i`, in member order.
    pub fn member_scores(&self, store: &FeatureStore, i: usize) -> Result<Vec<f64>> {
        let layer_pos = store
            .layers()
            .iter()
            .position(|&l| l == self.spec.model.sfm_layer_index)
            .or((store.n_layers() == 1).then_some(0))
            .ok_or_else(|| {
                Error::contract(format!(
                    "feature store lacks layer {}",
                    self.spec.model.sfm_layer_index
                ))
            })?;
        self.members
            .iter()
            .map(|m| {
                let wrap = |source: Error| Error::Member {
                    enhancer: m.record.enhancer.clone(),
                    fold: m.record.fold,
                    source: Box::new(source),
                };
                let e = store.enhancer_index(&m.record.enhancer).ok_or_else(|| {
                    wrap(Error::contract(format!(
                        "no {} features for clip {}",
                        m.record.enhancer,
                        store.clip(i).clip_id
                    )))
                })?;
                let x = store.input(i, e, layer_pos).map_err(wrap)?;
                m.model.predict(&x).map_err(wrap)
            })
            .collect()
    }

    /// Mean of all member scores for store item `i`.
    pub fn predict(&self, store: &FeatureStore, i: usize) -> Result<f64> {
        if self.members.is_empty() {
            return Err(Error::contract("ensemble has no members"));
        }
        let s = self.member_scores(store, i)?;
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    }

    /// Keep only members of the named enhancers.
    pub fn select(&self, enhancers: &[&str]) -> Result<TrainedEnsemble> {
        for e in enhancers {
            if !self.spec.enhancers.iter().any(|s| s.name == *e) {
                return Err(Error::contract(format!("ensemble has no enhancer {e}")));
            }
        }
        let mut out = self.clone();
        out.spec.enhancers.retain(|s| enhancers.contains(&s.name.as_str()));
        out.members.retain(|m| enhancers.contains(&m.record.enhancer.as_str()));
        Ok(out)
    }

    /// Write `ensemble.json`, `members/*.ckpt` and `curves/*.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["members", "curves"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for m in &self.members {
            checkpoint::save(&m.model, &dir.join(&m.record.checkpoint))?;
            let path = dir.join("curves").join(member_file(&m.record.enhancer, m.record.fold, "csv"));
            write_csv(&path, &m.curve)?;
        }
        let file = EnsembleFile {
            spec: self.spec.clone(),
            members: self.members.iter().map(|m| m.record.clone()).collect(),
        };
        let path = dir.join(ENSEMBLE_FILE);
        let mut json = serde_json::to_string_pretty(&file)?;
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Load an ensemble directory written by [`save`](Self::save).
    /// Training curves are not reloaded.
    pub fn load(dir: &Path) -> Result<TrainedEnsemble> {
        let path = dir.join(ENSEMBLE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: EnsembleFile = serde_json::from_str(&text)?;
        let members = file
            .members
            .into_iter()
            .map(|record| {
                let model = checkpoint::load(&dir.join(&record.checkpoint))?;
                if model.config() != &file.spec.model {
                    return Err(Error::contract(format!(
                        "checkpoint {} was trained with a different model config",
                        record.checkpoint
                    )));
                }
                Ok(Member {
                    record,
                    model,
                    curve: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainedEnsemble {
            spec: file.spec,
            members,
        })
    }
}

/// Write `rows` as a headed CSV file.
pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let fail = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
