//! JSON-lines corpus manifests.
//!
//! Each non-blank line is one clip object. An optional first line of the form
//! `{"dataset": {"name": ..., "sample_rate": 16000}}` carries dataset metadata.
//! Relative paths are resolved against the manifest's directory on load.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SAMPLE_RATE;

/// Audiogram frequencies in Hz.
pub const AUDIOGRAM_HZ: [u32; 6] = [250, 500, 1000, 2000, 4000, 6000];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ListenerGroup {
    #[default]
    HI,
    NH,
}

/// Provenance of a 2-clips item: its audio is `clips[0]`, `silence_s` of
/// zeros, then `clips[1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcatSources {
    pub clips: [String; 2],
    pub silence_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clip {
    pub clip_id: String,
    pub listener_id: String,
    /// Noisy mono or stereo WAV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<PathBuf>,
    /// Clean reference WAV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<PathBuf>,
    /// Pre-enhanced WAV per enhancer name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub enhanced: BTreeMap<String, PathBuf>,
    /// Noisy SIFB features, one file (both ears) or one per ear.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noisy_features: Vec<PathBuf>,
    /// Enhanced SIFB features per enhancer name, laid out like `noisy_features`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub enhanced_features: BTreeMap<String, Vec<PathBuf>>,
    /// dB HL at [`AUDIOGRAM_HZ`].
    pub audiogram: Vec<f64>,
    /// Intelligibility in percent correct.
    pub score: f64,
    #[serde(default)]
    pub listener_group: ListenerGroup,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<ConcatSources>,
    /// Free-form annotations (e.g. the generating SNR of synthetic clips).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Clip {
    pub fn is_augmented(&self) -> bool {
        self.sources.is_some()
    }

    pub fn is_feature_backed(&self) -> bool {
        self.signal.is_none() && self.sources.is_none()
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        self.signal
            .iter_mut()
            .chain(self.clean.iter_mut())
            .chain(self.enhanced.values_mut())
            .chain(self.noisy_features.iter_mut())
            .chain(self.enhanced_features.values_mut().flatten())
    }

    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        self.signal
            .iter()
            .chain(self.clean.iter())
            .chain(self.enhanced.values())
            .chain(self.noisy_features.iter())
            .chain(self.enhanced_features.values().flatten())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
}

fn default_rate() -> u32 {
    SAMPLE_RATE
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    dataset: DatasetInfo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub info: DatasetInfo,
    clips: Vec<Clip>,
    index: HashMap<String, usize>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest::empty("")
    }
}

impl Manifest {
    pub fn empty(name: &str) -> Self {
        Manifest {
            info: DatasetInfo {
                name: name.to_string(),
                sample_rate: SAMPLE_RATE,
            },
            clips: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Build from clips, checking the in-memory invariants (not file
    /// existence).
    pub fn from_clips(info: DatasetInfo, clips: Vec<Clip>) -> Result<Self> {
        let problems = check_clips(&clips, |i| format!("clip #{i}"));
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let index = clips
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clip_id.clone(), i))
            .collect();
        Ok(Manifest { info, clips, index })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clips(&self) -> &[Clip] {
        &self.clips
    }

    pub fn into_clips(self) -> Vec<Clip> {
        self.clips
    }

    pub fn get(&self, clip_id: &str) -> Option<&Clip> {
        self.index.get(clip_id).map(|&i| &self.clips[i])
    }

    pub fn contains(&self, clip_id: &str) -> bool {
        self.index.contains_key(clip_id)
    }

    /// Listener ids in first-appearance order.
    pub fn listeners(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.clips
            .iter()
            .filter(|c| seen.insert(c.listener_id.as_str()))
            .map(|c| c.listener_id.clone())
            .collect()
    }

    /// Enhancer names with pre-enhanced audio or features for some clip.
    pub fn enhancers_present(&self) -> BTreeSet<String> {
        self.clips
            .iter()
            .flat_map(|c| c.enhanced.keys().chain(c.enhanced_features.keys()))
            .cloned()
            .collect()
    }

    /// Clips with ids in `ids`, keeping manifest order.
    pub fn subset(&self, ids: &[String]) -> Result<Manifest> {
        let keep: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        if let Some(missing) = keep.iter().find(|id| !self.contains(id)) {
            return Err(Error::contract(format!("unknown clip id {missing}")));
        }
        let clips = self
            .clips
            .iter()
            .filter(|c| keep.contains(c.clip_id.as_str()))
            .cloned()
            .collect();
        Manifest::from_clips(self.info.clone(), clips)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.clips.iter().map(|c| c.score).collect()
    }

    /// Write as JSON lines; paths under `path`'s directory are stored
    /// relative to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new(""));
        let mut out = Vec::new();
        let header = serde_json::json!({ "dataset": self.info });
        writeln!(out, "{header}").expect("writing to a Vec");
        for clip in &self.clips {
            let mut c = clip.clone();
            for p in c.paths_mut() {
                if let Ok(rel) = p.strip_prefix(dir) {
                    if !dir.as_os_str().is_empty() {
                        *p = rel.to_path_buf();
                    }
                }
            }
            serde_json::to_writer(&mut out, &c)?;
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn check_clips(clips: &[Clip], at: impl Fn(usize) -> String) -> Vec<String> {
    let mut problems = Vec::new();
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    for (i, c) in clips.iter().enumerate() {
        let loc = at(i);
        if c.clip_id.is_empty() || c.listener_id.is_empty() {
            problems.push(format!("{loc}: empty clip_id or listener_id"));
        }
        if let Some(&j) = first_seen.get(c.clip_id.as_str()) {
            problems.push(format!("{loc}: duplicate clip_id {} (first at {})", c.clip_id, at(j)));
        } else {
            first_seen.insert(&c.clip_id, i);
        }
        if c.audiogram.len() != AUDIOGRAM_HZ.len() {
            problems.push(format!(
                "{loc}: audiogram has {} values, expected {}",
                c.audiogram.len(),
                AUDIOGRAM_HZ.len()
            ));
        } else if c.audiogram.iter().any(|v| !v.is_finite()) {
            problems.push(format!("{loc}: audiogram has non-finite values"));
        }
        if !(0.0..=100.0).contains(&c.score) {
            problems.push(format!("{loc}: score {} outside [0, 100]", c.score));
        }
        if c.signal.is_none() && c.sources.is_none() && c.noisy_features.is_empty() {
            problems.push(format!("{loc}: clip {} has no signal, sources or features", c.clip_id));
        }
        if !(1..=2).contains(&c.noisy_features.len()) && !c.noisy_features.is_empty() {
            problems.push(format!("{loc}: noisy_features lists one file or one per ear"));
        }
        if let Some(s) = &c.sources {
            if !(s.silence_s >= 0.0) {
                problems.push(format!("{loc}: negative silence_s"));
            }
        }
    }
    // Concat sources must exist and belong to the same listener.
    let by_id: HashMap<&str, &Clip> = clips.iter().map(|c| (c.clip_id.as_str(), c)).collect();
    for (i, c) in clips.iter().enumerate() {
        if let Some(s) = &c.sources {
            for src in &s.clips {
                match by_id.get(src.as_str()) {
                    None => problems.push(format!("{}: source clip {src} not in manifest", at(i))),
                    Some(o) if o.listener_id != c.listener_id => problems.push(format!(
                        "{}: source clip {src} belongs to listener {}",
                        at(i),
                        o.listener_id
                    )),
                    Some(o) if o.is_augmented() => {
                        problems.push(format!("{}: source clip {src} is itself augmented", at(i)))
                    }
                    _ => {}
                }
            }
        }
    }
    problems
}

/// Parse and validate a JSON-lines manifest; every problem found is
/// reported together, each naming its line.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let default_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut info = DatasetInfo {
        name: default_name,
        sample_rate: SAMPLE_RATE,
    };
    let mut clips = Vec::new();
    let mut lines = Vec::new();
    let mut problems = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        if clips.is_empty() && line.contains("\"dataset\"") {
            match serde_json::from_str::<HeaderLine>(line) {
                Ok(h) => {
                    if h.dataset.sample_rate != SAMPLE_RATE {
                        problems.push(format!(
                            "line {lineno}: sample_rate {} (only {SAMPLE_RATE} Hz is supported; resample offline)",
                            h.dataset.sample_rate
                        ));
                    }
                    info = h.dataset;
                    if info.name.is_empty() {
                        info.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    }
                    continue;
                }
                Err(e) => {
                    problems.push(format!("line {lineno}: bad dataset header: {e}"));
                    continue;
                }
            }
        }
        match serde_json::from_str::<Clip>(line) {
            Ok(mut c) => {
                for p in c.paths_mut() {
                    if p.is_relative() {
                        *p = dir.join(&*p);
                    }
                }
                clips.push(c);
                lines.push(lineno);
            }
            Err(e) => problems.push(format!("line {lineno}: {e}")),
        }
    }
    problems.extend(check_clips(&clips, |i| format!("line {}", lines[i])));
    for (i, c) in clips.iter().enumerate() {
        for p in c.paths() {
            if !p.exists() {
                problems.push(format!("line {}: missing file {}", lines[i], p.display()));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    if clips.is_empty() {
        log::warn!("manifest {} has no clips", path.display());
    }
    Manifest::from_clips(info, clips)
}
