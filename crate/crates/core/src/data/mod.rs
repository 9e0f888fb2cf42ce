//! Corpus manifests, evaluation protocol, augmentation, the synthetic
//! benchmark and feature/batch assembly.

mod features;
mod manifest;
mod protocol;
mod synth;

pub use features::{
    batch_indices, clip_audio, clip_clean, clip_enhanced, pad_inputs, unpad, Batch, ClipFeatures, FeatureStore,
};
pub use manifest::{load_manifest, Clip, ConcatSources, DatasetInfo, ListenerGroup, Manifest, AUDIOGRAM_HZ};
pub use protocol::{make_folds, merge_nh, split_by_listener, two_clips_augment, Fold, FoldPlan, N_FOLDS, VALIDATION_SHARE};
pub use synth::{
    listener_id, psychometric_score, synth_audiogram, synth_clip, synth_generate, SynthClip, SynthConfig,
    AUDIOGRAM_WEIGHT, PSYCHOMETRIC_MIDPOINT_DB, PSYCHOMETRIC_SLOPE,
};

#[cfg(test)]
pub(crate) mod testutil {
    use std::collections::BTreeMap;
    use std::path::PathBuf;

    use super::*;

    pub fn clip(id: &str, listener: &str, score: f64) -> Clip {
        Clip {
            clip_id: id.into(),
            listener_id: listener.into(),
            signal: Some(PathBuf::from(format!("{id}.wav"))),
            clean: None,
            enhanced: BTreeMap::new(),
            noisy_features: vec![],
            enhanced_features: BTreeMap::new(),
            audiogram: vec![10.0, 10.0, 20.0, 30.0, 40.0, 50.0],
            score,
            listener_group: ListenerGroup::HI,
            sources: None,
            meta: BTreeMap::new(),
        }
    }

    /// `listeners × per_listener` waveform-backed clips (paths not on disk).
    pub fn corpus(listeners: usize, per_listener: usize) -> Manifest {
        let clips = (0..listeners)
            .flat_map(|l| {
                (0..per_listener).map(move |c| clip(&format!("{}_{c}", listener_id(l)), &listener_id(l), (c * 7 % 100) as f64))
            })
            .collect();
        Manifest::from_clips(
            DatasetInfo {
                name: "fixture".into(),
                sample_rate: crate::signal::SAMPLE_RATE,
            },
            clips,
        )
        .unwrap()
    }
}
