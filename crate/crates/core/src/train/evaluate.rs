use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ensemble::{write_csv, TrainedEnsemble};
use super::metrics::{ncc, rmse};
use crate::data::{FeatureStore, Manifest};
use crate::error::{Error, Result};
use crate::signal::ToySfm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub clip_id: String,
    pub target: f64,
    pub prediction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub clip_id: String,
    pub class: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub dataset: String,
    pub trained_on: String,
    pub members: Vec<String>,
    pub enhancers: Vec<String>,
    pub sfm_layer_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: EvalMetadata,
    pub n: usize,
    pub rmse: f64,
    /// Absent when predictions or targets are constant.
    pub ncc: Option<f64>,
    pub rows: Vec<EvalRow>,
    pub failures: Vec<EvalFailure>,
}

fn failure(clip_id: String, e: &Error) -> EvalFailure {
    EvalFailure {
        clip_id,
        class: e.class().to_string(),
        message: e.to_string(),
    }
}

impl EvalReport {
    /// Build from rows, computing RMSE and NCC.
    pub fn from_rows(metadata: EvalMetadata, rows: Vec<EvalRow>, failures: Vec<EvalFailure>) -> Result<Self> {
        if rows.is_empty() && failures.is_empty() {
            return Err(Error::contract("no clips to evaluate"));
        }
        if rows.is_empty() {
            let detail = failures.iter().map(|f| format!("{}: {}", f.clip_id, f.message)).collect();
            return Err(Error::Validation(detail));
        }
        let (p, t): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r.prediction, r.target)).unzip();
        let rmse = rmse(&p, &t)?;
        let ncc = match ncc(&p, &t) {
            Ok(v) => Some(v),
            Err(Error::UndefinedCorrelation(why)) => {
                log::warn!("ncc undefined: {why}");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(EvalReport {
            metadata,
            n: rows.len(),
            rmse,
            ncc,
            rows,
            failures,
        })
    }

    pub fn predictions(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.prediction).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.target).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Per-clip rows as `clip_id,target,prediction`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }
}

/// Score every clip of `store` with the ensemble. Clips that fail to
/// predict join `failures`.
pub fn evaluate_store(
    e: &TrainedEnsemble,
    store: &FeatureStore,
    dataset: &str,
    mut failures: Vec<EvalFailure>,
) -> Result<EvalReport> {
    let results: Vec<Result<f64>> = (0..store.len()).into_par_iter().map(|i| e.predict(store, i)).collect();
    let mut rows = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        let c = store.clip(i);
        match r {
            Ok(p) => rows.push(EvalRow {
                clip_id: c.clip_id.clone(),
                target: c.score,
                prediction: p,
            }),
            Err(err) => failures.push(failure(c.clip_id.clone(), &err)),
        }
    }
    let metadata = EvalMetadata {
        dataset: dataset.to_string(),
        trained_on: e.spec.dataset.clone(),
        members: e.member_ids(),
        enhancers: e.spec.enhancers.iter().map(|s| s.name.clone()).collect(),
        sfm_layer_index: e.spec.model.sfm_layer_index,
    };
    EvalReport::from_rows(metadata, rows, failures)
}

/// Extract features for `m` the way the ensemble was trained and score it.
pub fn evaluate(e: &TrainedEnsemble, m: &Manifest) -> Result<EvalReport> {
    if m.is_empty() {
        return Err(Error::contract("cannot evaluate an empty manifest"));
    }
    let sfm = ToySfm::new(e.spec.frontend.clone())?;
    let (store, failed) = FeatureStore::build_partial(m, &e.spec.enhancers, &sfm, &[e.spec.model.sfm_layer_index])?;
    let failures = failed.into_iter().map(|(id, err)| failure(id, &err)).collect();
    evaluate_store(e, &store, &m.info.name, failures)
}
