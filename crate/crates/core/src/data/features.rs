use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::manifest::{Clip, Manifest};
use crate::error::{Error, Result};
use crate::model::{BinauralInput, EarFeatures};
use crate::signal::{enhance, load_wav_16k, read_feature_file, EnhanceInput, EnhancerKind, EnhancerSpec, ToySfm, Waveform, SAMPLE_RATE};
use crate::tensor::Tensor;

fn gap_samples(silence_s: f64) -> usize {
    (silence_s * SAMPLE_RATE as f64).round() as usize
}

fn source<'m>(m: &'m Manifest, id: &str) -> Result<&'m Clip> {
    m.get(id)
        .ok_or_else(|| Error::contract(format!("source clip {id} is not in the manifest")))
}

/// Noisy audio of a clip, assembling 2-clips items from their sources.
pub fn clip_audio(m: &Manifest, clip: &Clip) -> Result<Waveform> {
    if let Some(s) = &clip.sources {
        let parts = s
            .clips
            .iter()
            .map(|id| clip_audio(m, source(m, id)?))
            .collect::<Result<Vec<_>>>()?;
        return Waveform::concat(&parts, gap_samples(s.silence_s));
    }
    let path = clip
        .signal
        .as_ref()
        .ok_or_else(|| Error::contract(format!("clip {} has no waveform", clip.clip_id)))?;
    load_wav_16k(path)
}

/// Clean reference, if the clip (or every source of it) has one.
pub fn clip_clean(m: &Manifest, clip: &Clip) -> Result<Option<Waveform>> {
    if let Some(s) = &clip.sources {
        let mut parts = Vec::with_capacity(2);
        for id in &s.clips {
            match clip_clean(m, source(m, id)?)? {
                Some(w) => parts.push(w),
                None => return Ok(None),
            }
        }
        return Waveform::concat(&parts, gap_samples(s.silence_s)).map(Some);
    }
    clip.clean.as_deref().map(load_wav_16k).transpose()
}

/// Enhanced audio of a clip. File-backed enhancers assemble 2-clips items
/// from the sources' files; signal-domain enhancers process the assembled
/// noisy audio.
pub fn clip_enhanced(m: &Manifest, clip: &Clip, spec: &EnhancerSpec, noisy: &Waveform) -> Result<Waveform> {
    if let (EnhancerKind::FileBacked { .. }, Some(s)) = (&spec.kind, &clip.sources) {
        let parts = s
            .clips
            .iter()
            .map(|id| {
                let src = source(m, id)?;
                clip_enhanced(m, src, spec, &clip_audio(m, src)?)
            })
            .collect::<Result<Vec<_>>>()?;
        return Waveform::concat(&parts, gap_samples(s.silence_s));
    }
    let clean = match spec.kind {
        EnhancerKind::OracleClean => clip_clean(m, clip)?,
        _ => None,
    };
    enhance(
        spec,
        noisy,
        &EnhanceInput {
            clip_id: &clip.clip_id,
            clean: clean.as_ref(),
            enhanced_path: clip.enhanced.get(&spec.name).map(|p| p.as_path()),
        },
    )
}

/// Per-ear tensors `[n_layers × frames × dim]`.
type EarPair = Arc<[Tensor<f32>; 2]>;

#[derive(Clone, Debug)]
pub struct ClipFeatures {
    pub clip_id: String,
    pub audiogram: Vec<f32>,
    pub score: f64,
    noisy: EarPair,
    enhanced: Vec<EarPair>,
}

/// Features of a manifest for a list of enhancers, computed once.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    layers: Vec<usize>,
    enhancers: Vec<String>,
    clips: Vec<ClipFeatures>,
    index: HashMap<String, usize>,
}

fn select_layers(t: Tensor<f32>, layers: &[usize], what: &str) -> Result<Tensor<f32>> {
    let shape = t.shape().to_vec();
    if shape.len() == 2 {
        // A 2-D file already is the chosen layer.
        return t.reshape([1, shape[0], shape[1]]);
    }
    let (n, slab) = (shape[0], shape[1] * shape[2]);
    if let Some(&bad) = layers.iter().find(|&&l| l >= n) {
        return Err(Error::contract(format!(
            "{what}: layer index {bad} out of range for {n} layers"
        )));
    }
    if layers.len() == n && layers.iter().enumerate().all(|(i, &l)| i == l) {
        return Ok(t);
    }
    let data = t.data();
    let mut out = Vec::with_capacity(layers.len() * slab);
    for &l in layers {
        out.extend_from_slice(&data[l * slab..(l + 1) * slab]);
    }
    Tensor::new([layers.len(), shape[1], shape[2]], out)
}

fn read_pair(paths: &[std::path::PathBuf], layers: &[usize]) -> Result<EarPair> {
    let load = |p: &std::path::PathBuf| select_layers(read_feature_file(p, None)?, layers, &p.display().to_string());
    let left = load(&paths[0])?;
    let right = match paths.get(1) {
        Some(p) => load(p)?,
        None => left.clone(),
    };
    if left.shape() != right.shape() {
        return Err(Error::Dimension {
            op: "per-ear features",
            lhs: left.shape().to_vec(),
            rhs: right.shape().to_vec(),
        });
    }
    Ok(Arc::new([left, right]))
}

fn wave_pair(sfm: &ToySfm, w: &Waveform, layers: &[usize]) -> Result<EarPair> {
    let l = select_layers(sfm.extract_channel(w.ear(0))?, layers, "toy extractor")?;
    let r = if w.n_channels() == 1 {
        l.clone()
    } else {
        select_layers(sfm.extract_channel(w.ear(1))?, layers, "toy extractor")?
    };
    Ok(Arc::new([l, r]))
}

fn clip_features(
    m: &Manifest,
    clip: &Clip,
    enhancers: &[EnhancerSpec],
    sfm: &ToySfm,
    layers: &[usize],
) -> Result<ClipFeatures> {
    let (noisy, enhanced) = if clip.is_feature_backed() {
        let noisy = read_pair(&clip.noisy_features, layers)?;
        let enhanced = enhancers
            .iter()
            .map(|e| match (clip.enhanced_features.get(&e.name), &e.kind) {
                (Some(paths), _) => read_pair(paths, layers),
                (None, EnhancerKind::Identity) => Ok(noisy.clone()),
                (None, _) => Err(Error::contract(format!(
                    "clip {} has no {} features",
                    clip.clip_id, e.name
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        (noisy, enhanced)
    } else {
        let wave = clip_audio(m, clip)?;
        let noisy = wave_pair(sfm, &wave, layers)?;
        let enhanced = enhancers
            .iter()
            .map(|e| match (clip.enhanced_features.get(&e.name), &e.kind) {
                (Some(paths), _) => read_pair(paths, layers),
                (None, EnhancerKind::Identity) => Ok(noisy.clone()),
                (None, _) => wave_pair(sfm, &clip_enhanced(m, clip, e, &wave)?, layers),
            })
            .collect::<Result<Vec<_>>>()?;
        (noisy, enhanced)
    };
    for e in &enhanced {
        if e[0].shape() != noisy[0].shape() {
            return Err(Error::Dimension {
                op: "noisy vs enhanced features",
                lhs: noisy[0].shape().to_vec(),
                rhs: e[0].shape().to_vec(),
            });
        }
    }
    Ok(ClipFeatures {
        clip_id: clip.clip_id.clone(),
        audiogram: clip.audiogram.iter().map(|&v| v as f32).collect(),
        score: clip.score,
        noisy,
        enhanced,
    })
}

impl FeatureStore {
    /// Extract (or read) features for every clip. Failures are collected
    /// per clip and reported together.
    pub fn build(m: &Manifest, enhancers: &[EnhancerSpec], sfm: &ToySfm, layers: &[usize]) -> Result<Self> {
        let (store, failures) = Self::build_partial(m, enhancers, sfm, layers)?;
        if !failures.is_empty() {
            return Err(Error::Validation(
                failures.into_iter().map(|(id, e)| format!("clip {id}: {e}")).collect(),
            ));
        }
        Ok(store)
    }

    /// Like [`build`](Self::build), but clips that fail are left out and
    /// returned as `(clip_id, error)` pairs.
    pub fn build_partial(
        m: &Manifest,
        enhancers: &[EnhancerSpec],
        sfm: &ToySfm,
        layers: &[usize],
    ) -> Result<(Self, Vec<(String, Error)>)> {
        if layers.is_empty() {
            return Err(Error::config("no feature layers selected"));
        }
        for e in enhancers {
            e.validate()?;
        }
        let results: Vec<Result<ClipFeatures>> = m
            .clips()
            .par_iter()
            .map(|c| clip_features(m, c, enhancers, sfm, layers))
            .collect();
        let mut clips = Vec::with_capacity(results.len());
        let mut failures = Vec::new();
        for (c, r) in m.clips().iter().zip(results) {
            match r {
                Ok(f) => clips.push(f),
                Err(e) => failures.push((c.clip_id.clone(), e)),
            }
        }
        let dims: Vec<&[usize]> = clips.iter().map(|c| &c.noisy[0].shape()[..]).collect();
        if let Some(bad) = dims.iter().find(|d| d[0] != dims[0][0] || d[2] != dims[0][2]) {
            return Err(Error::contract(format!(
                "inconsistent feature layouts {:?} vs {:?} (layers × frames × dim)",
                dims[0], bad
            )));
        }
        let index = clips
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clip_id.clone(), i))
            .collect();
        let store = FeatureStore {
            layers: layers.to_vec(),
            enhancers: enhancers.iter().map(|e| e.name.clone()).collect(),
            clips,
            index,
        };
        Ok((store, failures))
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn enhancers(&self) -> &[String] {
        &self.enhancers
    }

    pub fn enhancer_index(&self, name: &str) -> Option<usize> {
        self.enhancers.iter().position(|e| e == name)
    }

    /// Layers held, as source layer indices. `layer_pos` arguments index
    /// this list.
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Number of layers in the stored tensors (1 for 2-D feature files).
    pub fn n_layers(&self) -> usize {
        self.clips.first().map_or(self.layers.len(), |c| c.noisy[0].shape()[0])
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.clips.first().map(|c| c.noisy[0].shape()[2])
    }

    pub fn clip(&self, i: usize) -> &ClipFeatures {
        &self.clips[i]
    }

    pub fn position(&self, clip_id: &str) -> Option<usize> {
        self.index.get(clip_id).copied()
    }

    /// Store positions of `ids`, failing on unknown ids.
    pub fn positions(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.position(id)
                    .ok_or_else(|| Error::contract(format!("clip {id} has no features")))
            })
            .collect()
    }

    /// Unpadded model input of one clip.
    pub fn input(&self, i: usize, enhancer: usize, layer_pos: usize) -> Result<BinauralInput<f32>> {
        let c = &self.clips[i];
        let e = c.enhanced.get(enhancer).ok_or_else(|| {
            Error::contract(format!("enhancer #{enhancer} not in this store"))
        })?;
        let slice = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
            let s = t.shape();
            let lp = if s[0] == 1 { 0 } else { layer_pos };
            if lp >= s[0] {
                return Err(Error::contract(format!("layer position {layer_pos} out of range for {} layers", s[0])));
            }
            let slab = s[1] * s[2];
            Tensor::new([s[1], s[2]], t.data()[lp * slab..(lp + 1) * slab].to_vec())
        };
        let ear = |k: usize| -> Result<EarFeatures<f32>> {
            Ok(EarFeatures::unmasked(slice(&c.noisy[k])?, slice(&e[k])?))
        };
        Ok(BinauralInput {
            ears: [ear(0)?, ear(1)?],
            audiogram: c.audiogram.clone(),
        })
    }

    /// Inputs for `idxs`, zero-padded with masks to the longest clip.
    pub fn batch(&self, idxs: &[usize], enhancer: usize, layer_pos: usize) -> Result<Batch> {
        let inputs = idxs
            .iter()
            .map(|&i| self.input(i, enhancer, layer_pos))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            clip_ids: idxs.iter().map(|&i| self.clips[i].clip_id.clone()).collect(),
            targets: idxs.iter().map(|&i| self.clips[i].score).collect(),
            inputs: pad_inputs(inputs),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub clip_ids: Vec<String>,
    pub inputs: Vec<BinauralInput<f32>>,
    pub targets: Vec<f64>,
}

fn pad_tensor(t: &Tensor<f32>, frames: usize) -> Tensor<f32> {
    let mut data = t.data().to_vec();
    data.resize(frames * t.cols(), 0.0);
    Tensor::new([frames, t.cols()], data).expect("padded shape")
}

/// Zero-pad every ear of every input to the longest frame count.
pub fn pad_inputs(inputs: Vec<BinauralInput<f32>>) -> Vec<BinauralInput<f32>> {
    let longest = inputs
        .iter()
        .flat_map(|x| x.ears.iter().map(|e| e.noisy.rows()))
        .max()
        .unwrap_or(0);
    inputs
        .into_iter()
        .map(|x| BinauralInput {
            ears: x.ears.map(|e| {
                let mut mask = e.mask.clone();
                mask.resize(longest, false);
                EarFeatures {
                    noisy: pad_tensor(&e.noisy, longest),
                    enhanced: pad_tensor(&e.enhanced, longest),
                    mask,
                }
            }),
            audiogram: x.audiogram,
        })
        .collect()
}

/// Drop padded frames again (frames after the last unmasked one).
pub fn unpad(x: &BinauralInput<f32>) -> BinauralInput<f32> {
    BinauralInput {
        ears: x.ears.clone().map(|e| {
            let n = e.mask.iter().rposition(|&m| m).map_or(0, |i| i + 1);
            let cut = |t: &Tensor<f32>| Tensor::new([n, t.cols()], t.data()[..n * t.cols()].to_vec()).expect("prefix");
            EarFeatures {
                noisy: cut(&e.noisy),
                enhanced: cut(&e.enhanced),
                mask: e.mask[..n].to_vec(),
            }
        }),
        audiogram: x.audiogram.clone(),
    }
}

/// Seeded per-epoch shuffle split into batches; the last batch may be short.
pub fn batch_indices(items: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order = items.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
