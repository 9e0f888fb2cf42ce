use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Clip, ConcatSources, Manifest};
use crate::error::{Error, Result};

pub const N_FOLDS: usize = 3;
/// Share of original clips held out for validation in each fold.
pub const VALIDATION_SHARE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// `n_folds` independent seeded 80/20 partitions of the original clips.
///
/// Validation holds `floor(0.2·n)` clips. A 2-clips item joins a fold's
/// training side only when both of its sources are on that side, and never
/// enters validation.
pub fn make_folds(m: &Manifest, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    let originals: Vec<&Clip> = m.clips().iter().filter(|c| !c.is_augmented()).collect();
    if originals.len() < 5 {
        return Err(Error::contract(format!(
            "fold plan needs at least 5 clips, got {}",
            originals.len()
        )));
    }
    if n_folds == 0 {
        return Err(Error::config("n_folds must be positive"));
    }
    let n_val = (originals.len() as f64 * VALIDATION_SHARE).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let folds = (0..n_folds)
        .map(|_| {
            let mut order: Vec<usize> = (0..originals.len()).collect();
            order.shuffle(&mut rng);
            let mut held = vec![false; originals.len()];
            for &i in &order[..n_val] {
                held[i] = true;
            }
            let validation: Vec<String> = originals
                .iter()
                .zip(&held)
                .filter(|(_, &h)| h)
                .map(|(c, _)| c.clip_id.clone())
                .collect();
            let val_set: HashSet<&str> = validation.iter().map(String::as_str).collect();
            let train = m
                .clips()
                .iter()
                .filter(|c| match &c.sources {
                    None => !val_set.contains(c.clip_id.as_str()),
                    Some(s) => s.clips.iter().all(|id| !val_set.contains(id.as_str())),
                })
                .map(|c| c.clip_id.clone())
                .collect();
            Fold { train, validation }
        })
        .collect();
    Ok(FoldPlan { seed, folds })
}

/// Move every clip of the held-out listeners to the test side.
pub fn split_by_listener(m: &Manifest, holdout: &[String]) -> Result<(Manifest, Manifest)> {
    let known: BTreeSet<String> = m.listeners().into_iter().collect();
    let unknown: Vec<&String> = holdout.iter().filter(|l| !known.contains(*l)).collect();
    if !unknown.is_empty() {
        return Err(Error::contract(format!("unknown listener ids {unknown:?}")));
    }
    let held: HashSet<&str> = holdout.iter().map(String::as_str).collect();
    let (test, train): (Vec<Clip>, Vec<Clip>) = m
        .clips()
        .iter()
        .cloned()
        .partition(|c| held.contains(c.listener_id.as_str()));
    let mut info = m.info.clone();
    let base = info.name.clone();
    info.name = format!("{base}-train");
    let train = Manifest::from_clips(info.clone(), train)?;
    info.name = format!("{base}-test");
    Ok((train, Manifest::from_clips(info, test)?))
}

/// Add up to `per_listener` 2-clips items per listener: two distinct
/// same-listener originals joined by `silence_s` of silence, scored with the
/// mean of both scores. Audio is assembled lazily from the sources.
pub fn two_clips_augment(m: &Manifest, per_listener: usize, silence_s: f64, seed: u64) -> Result<Manifest> {
    if !(silence_s >= 0.0) {
        return Err(Error::config("silence_s must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Clip> = m.clips().to_vec();
    for listener in m.listeners() {
        let own: Vec<&Clip> = m
            .clips()
            .iter()
            .filter(|c| c.listener_id == listener && !c.is_augmented())
            .collect();
        if own.len() < 2 {
            log::warn!("listener {listener} has {} clip(s); skipped by 2-clips augmentation", own.len());
            continue;
        }
        let pairs = own.len() * (own.len() - 1);
        let want = if per_listener > pairs {
            log::warn!("listener {listener}: only {pairs} distinct ordered pairs, {per_listener} requested");
            pairs
        } else {
            per_listener
        };
        let mut used = HashSet::new();
        while used.len() < want {
            let i = rng.random_range(0..own.len());
            let j = rng.random_range(0..own.len() - 1);
            let j = if j >= i { j + 1 } else { j };
            if !used.insert((i, j)) {
                continue;
            }
            let (a, b) = (own[i], own[j]);
            for c in [a, b] {
                if c.is_feature_backed() {
                    return Err(Error::contract(format!(
                        "2-clips augmentation needs waveforms; clip {} has features only",
                        c.clip_id
                    )));
                }
            }
            let id = format!("{}+{}", a.clip_id, b.clip_id);
            if m.contains(&id) {
                continue;
            }
            out.push(Clip {
                clip_id: id,
                listener_id: listener.clone(),
                signal: None,
                clean: None,
                enhanced: Default::default(),
                noisy_features: vec![],
                enhanced_features: Default::default(),
                audiogram: a.audiogram.clone(),
                score: (a.score + b.score) / 2.0,
                listener_group: a.listener_group,
                sources: Some(ConcatSources {
                    clips: [a.clip_id.clone(), b.clip_id.clone()],
                    silence_s,
                }),
                meta: Default::default(),
            });
        }
    }
    Manifest::from_clips(m.info.clone(), out)
}

/// Concatenate a hearing-impaired manifest with normal-hearing material.
pub fn merge_nh(train: &Manifest, nh: &Manifest) -> Result<Manifest> {
    let clash: Vec<&str> = nh
        .clips()
        .iter()
        .filter(|c| train.contains(&c.clip_id))
        .map(|c| c.clip_id.as_str())
        .take(5)
        .collect();
    if !clash.is_empty() {
        return Err(Error::contract(format!("clip id collision on merge: {clash:?}")));
    }
    let clips = train.clips().iter().chain(nh.clips()).cloned().collect();
    Manifest::from_clips(train.info.clone(), clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{DatasetInfo, ListenerGroup};
    use crate::data::testutil::{clip, corpus};

    #[test]
    fn hundred_clips_split_80_20() {
        let m = corpus(1, 100);
        let plan = make_folds(&m, N_FOLDS, 7).unwrap();
        assert_eq!(plan.folds.len(), 3);
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.validation.len()), (80, 20));
        }
        assert_eq!(plan, make_folds(&m, N_FOLDS, 7).unwrap());
        assert_ne!(plan.folds[0], plan.folds[1]);
    }

    #[test]
    fn hundred_and_one_floors_validation() {
        let plan = make_folds(&corpus(1, 101), N_FOLDS, 1).unwrap();
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.validation.len()), (81, 20));
        }
        assert!(matches!(make_folds(&corpus(1, 4), N_FOLDS, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn augmented_items_stay_on_the_training_side() {
        let m = two_clips_augment(&corpus(2, 20), 30, 0.5, 3).unwrap();
        let plan = make_folds(&m, N_FOLDS, 9).unwrap();
        for f in &plan.folds {
            assert_eq!(f.validation.len(), 8);
            let val: HashSet<&str> = f.validation.iter().map(String::as_str).collect();
            for id in &f.train {
                let c = m.get(id).unwrap();
                if let Some(s) = &c.sources {
                    assert!(s.clips.iter().all(|x| !val.contains(x.as_str())));
                }
            }
            assert!(f.validation.iter().all(|id| !m.get(id).unwrap().is_augmented()));
        }
    }

    #[test]
    fn listener_split() {
        let m = corpus(15, 4);
        let hold: Vec<String> = ["L03", "L07", "L11"].map(String::from).to_vec();
        let (train, test) = split_by_listener(&m, &hold).unwrap();
        assert_eq!(test.len(), 12);
        assert_eq!(test.listeners(), hold);
        assert_eq!(train.len(), 48);
        let (all, none) = split_by_listener(&m, &[]).unwrap();
        assert_eq!((all.len(), none.len()), (60, 0));
        assert!(split_by_listener(&m, &["nobody".to_string()]).is_err());
    }

    #[test]
    fn two_clips_scores_and_counts() {
        let mut clips = vec![clip("a", "L1", 40.0), clip("b", "L1", 60.0)];
        clips.push(clip("solo", "L2", 10.0));
        let m = Manifest::from_clips(DatasetInfo { name: "t".into(), sample_rate: 16_000 }, clips).unwrap();
        let aug = two_clips_augment(&m, 1, 0.5, 0).unwrap();
        assert_eq!(aug.len(), 4);
        let new = &aug.clips()[3];
        assert_eq!(new.score, 50.0);
        assert!(new.clip_id == "a+b" || new.clip_id == "b+a");

        let big = two_clips_augment(&corpus(12, 40), 540, 0.5, 1).unwrap();
        assert_eq!(big.len(), 12 * 40 + 12 * 540);
    }

    #[test]
    fn feature_backed_sources_are_rejected() {
        let mut c = clip("f1", "L1", 5.0);
        c.signal = None;
        c.noisy_features = vec!["f1.sifb".into()];
        let mut d = c.clone();
        d.clip_id = "f2".into();
        let m = Manifest::from_clips(DatasetInfo { name: "t".into(), sample_rate: 16_000 }, vec![c, d]).unwrap();
        assert!(matches!(two_clips_augment(&m, 1, 0.5, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn merge_counts_and_collisions() {
        let hi = corpus(2, 3);
        let mut nh_clips = corpus(3, 2).into_clips();
        for c in &mut nh_clips {
            c.clip_id = format!("nh-{}", c.clip_id);
            c.listener_group = ListenerGroup::NH;
        }
        let nh = Manifest::from_clips(hi.info.clone(), nh_clips).unwrap();
        let merged = merge_nh(&hi, &nh).unwrap();
        assert_eq!(merged.len(), 12);
        let n_nh = merged.clips().iter().filter(|c| c.listener_group == ListenerGroup::NH).count();
        assert_eq!(n_nh, 6);
        assert_eq!(merge_nh(&hi, &Manifest::default()).unwrap(), hi);
        assert!(matches!(merge_nh(&hi, &hi), Err(Error::Contract(_))));
    }
}
