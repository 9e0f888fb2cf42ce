use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use egip_core::data::*;
use egip_core::signal::SAMPLE_RATE;
use proptest::prelude::*;

fn clip(id: String, listener: String, score: f64, group: ListenerGroup) -> Clip {
    Clip {
        signal: Some(PathBuf::from(format!("{id}.wav"))),
        clip_id: id,
        listener_id: listener,
        clean: None,
        enhanced: BTreeMap::new(),
        noisy_features: vec![],
        enhanced_features: BTreeMap::new(),
        audiogram: vec![5.0, 10.0, 15.0, 20.0, 30.0, 40.0],
        score,
        listener_group: group,
        sources: None,
        meta: BTreeMap::new(),
    }
}

fn corpus(prefix: &str, listeners: usize, per: usize, group: ListenerGroup) -> Manifest {
    let clips = (0..listeners)
        .flat_map(|l| {
            (0..per).map(move |c| {
                let lid = format!("{prefix}{l}");
                clip(format!("{lid}_{c}"), lid, ((c * 37 + l * 11) % 101) as f64, group)
            })
        })
        .collect();
    Manifest::from_clips(
        DatasetInfo {
            name: prefix.into(),
            sample_rate: SAMPLE_RATE,
        },
        clips,
    )
    .unwrap()
}

#[test]
fn five_hundred_forty_pairs_per_listener() {
    let m = corpus("L", 3, 40, ListenerGroup::HI);
    let aug = two_clips_augment(&m, 540, 0.5, 1).unwrap();
    assert_eq!(aug.len(), 120 + 3 * 540);
    for l in m.listeners() {
        let n = aug.clips().iter().filter(|c| c.is_augmented() && c.listener_id == l).count();
        assert_eq!(n, 540);
    }
    for c in aug.clips().iter().filter(|c| c.is_augmented()) {
        let s = c.sources.as_ref().unwrap();
        let (a, b) = (aug.get(&s.clips[0]).unwrap(), aug.get(&s.clips[1]).unwrap());
        assert_eq!(c.score, (a.score + b.score) / 2.0);
        assert_eq!(a.listener_id, c.listener_id);
        assert_eq!(b.listener_id, c.listener_id);
        assert_eq!(c.clip_id, format!("{}+{}", a.clip_id, b.clip_id));
    }
}

#[test]
fn merge_preserves_group_counts() {
    let hi = corpus("H", 2, 10, ListenerGroup::HI);
    let nh = corpus("N", 3, 5, ListenerGroup::NH);
    let m = merge_nh(&hi, &nh).unwrap();
    let count = |g| m.clips().iter().filter(|c| c.listener_group == g).count();
    assert_eq!((count(ListenerGroup::HI), count(ListenerGroup::NH)), (20, 15));
    assert_eq!(merge_nh(&hi, &Manifest::empty("x")).unwrap().clips(), hi.clips());
    assert_eq!(merge_nh(&hi, &hi).unwrap_err().class(), "contract");
}

#[test]
fn manifest_round_trip_with_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let audio = dir.path().join("a.wav");
    std::fs::write(&audio, b"").unwrap();
    let mut c = clip("x".into(), "L1".into(), 42.0, ListenerGroup::HI);
    c.signal = Some(audio.clone());
    let m = Manifest::from_clips(
        DatasetInfo {
            name: "rt".into(),
            sample_rate: SAMPLE_RATE,
        },
        vec![c],
    )
    .unwrap();
    let path = dir.path().join("m.jsonl");
    m.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"a.wav\""), "{text}");
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.clips()[0].signal.as_deref(), Some(audio.as_path()));
    assert_eq!(back.info.name, "rt");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fold_plans_are_exact_partitions(n in 5usize..400, folds in 1usize..5, seed in any::<u64>()) {
        let m = corpus("L", 1, n, ListenerGroup::HI);
        let plan = make_folds(&m, folds, seed).unwrap();
        prop_assert_eq!(plan.folds.len(), folds);
        let all: HashSet<&str> = m.clips().iter().map(|c| c.clip_id.as_str()).collect();
        for f in &plan.folds {
            let tr: HashSet<&str> = f.train.iter().map(String::as_str).collect();
            let va: HashSet<&str> = f.validation.iter().map(String::as_str).collect();
            prop_assert!(tr.is_disjoint(&va));
            prop_assert_eq!(tr.union(&va).copied().collect::<HashSet<_>>(), all.clone());
            prop_assert_eq!(va.len(), n / 5);
        }
    }

    #[test]
    fn augmented_clips_never_straddle_a_fold(per in 1usize..30, seed in any::<u64>()) {
        let m = corpus("L", 2, 12, ListenerGroup::HI);
        let aug = two_clips_augment(&m, per, 0.5, seed).unwrap();
        let plan = make_folds(&aug, 3, seed).unwrap();
        for f in &plan.folds {
            prop_assert_eq!(f.validation.len(), 24 / 5);
            let va: HashSet<&str> = f.validation.iter().map(String::as_str).collect();
            for id in &f.validation {
                prop_assert!(!aug.get(id).unwrap().is_augmented());
            }
            for id in &f.train {
                if let Some(s) = &aug.get(id).unwrap().sources {
                    prop_assert!(s.clips.iter().all(|c| !va.contains(c.as_str())));
                }
            }
        }
    }

    #[test]
    fn listener_split_is_disjoint(k in 0usize..6, seed in 0usize..100) {
        let m = corpus("L", 6, 4, ListenerGroup::HI);
        let ids = m.listeners();
        let hold: Vec<String> = (0..k).map(|i| ids[(i + seed) % 6].clone()).collect::<HashSet<_>>().into_iter().collect();
        let (train, test) = split_by_listener(&m, &hold).unwrap();
        let a: HashSet<String> = train.listeners().into_iter().collect();
        let b: HashSet<String> = test.listeners().into_iter().collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(train.len() + test.len(), m.len());
        prop_assert_eq!(b.len(), hold.len());
    }

    #[test]
    fn psychometric_scores_rise_with_snr(a in -40.0f64..40.0, d in 0.0f64..20.0, loss in 0.0f64..80.0) {
        let audiogram = [loss; 6];
        prop_assert!(psychometric_score(a + d, &audiogram) >= psychometric_score(a, &audiogram));
    }

    #[test]
    fn batch_order_is_seeded(n in 1usize..200, bs in 1usize..40, seed in any::<u64>(), epoch in 0u64..100) {
        let items: Vec<usize> = (0..n).collect();
        let a = batch_indices(&items, bs, seed, epoch);
        prop_assert_eq!(&a, &batch_indices(&items, bs, seed, epoch));
        let mut flat: Vec<usize> = a.concat();
        flat.sort_unstable();
        prop_assert_eq!(flat, items);
        prop_assert!(a.iter().all(|b| b.len() <= bs));
    }
}
