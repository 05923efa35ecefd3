//! Feature bundles, labels, dataset manifests and the synthetic generator.

pub mod format;
pub mod synth;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: &str = "avf-manifest/1";

/// Extents shared by every video in a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    /// Segments per video.
    #[serde(rename = "T")]
    pub t: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub h: usize,
    pub w: usize,
    /// Event classes, not counting background.
    #[serde(rename = "C")]
    pub classes: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        FeatureDims {
            t: 10,
            d_a: 32,
            d_v: 64,
            h: 3,
            w: 3,
            classes: 4,
        }
    }
}

impl FeatureDims {
    /// Extents of VGG-style features on the 28-class benchmark.
    pub fn real_scale() -> Self {
        FeatureDims {
            t: 10,
            d_a: 128,
            d_v: 512,
            h: 7,
            w: 7,
            classes: 28,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 2 {
            return Err(Error::Config(format!(
                "need at least 2 segments per video, got T={}",
                self.t
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got C={}",
                self.classes
            )));
        }
        if [self.d_a, self.d_v, self.h, self.w].contains(&0) {
            return Err(Error::Config(format!("feature extents must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn audio_shape(&self) -> [usize; 2] {
        [self.t, self.d_a]
    }

    pub fn visual_shape(&self) -> [usize; 4] {
        [self.t, self.h, self.w, self.d_v]
    }
}

/// One video's features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub video_id: String,
    /// `T×d_a`
    pub audio: Tensor<f32>,
    /// `T×h×w×d_v`
    pub visual: Tensor<f32>,
}

impl FeatureBundle {
    pub fn segments(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn dims(&self, classes: usize) -> FeatureDims {
        let v = self.visual.shape();
        FeatureDims {
            t: self.audio.shape()[0],
            d_a: self.audio.shape()[1],
            d_v: v[3],
            h: v[1],
            w: v[2],
            classes,
        }
    }

    /// Checks shapes, `T >= 2` and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (a, v) = (self.audio.shape(), self.visual.shape());
        if a.len() != 2 || v.len() != 4 || a[0] != v[0] {
            return Err(Error::Dimension(format!(
                "bundle {}: audio {a:?} and visual {v:?} must be T×d_a and T×h×w×d_v",
                self.video_id
            )));
        }
        if a[0] < 2 {
            return Err(Error::Contract(format!(
                "bundle {}: need at least 2 segments, got {}",
                self.video_id, a[0]
            )));
        }
        if !self.audio.all_finite() || !self.visual.all_finite() {
            return Err(Error::Data(format!(
                "bundle {} contains non-finite values",
                self.video_id
            )));
        }
        Ok(())
    }

    pub fn check_dims(&self, dims: &FeatureDims) -> Result<()> {
        if self.audio.shape() != dims.audio_shape() || self.visual.shape() != dims.visual_shape()
        {
            return Err(Error::Consistency(format!(
                "bundle {} has audio {:?} / visual {:?}, manifest expects {:?} / {:?}",
                self.video_id,
                self.audio.shape(),
                self.visual.shape(),
                dims.audio_shape(),
                dims.visual_shape()
            )));
        }
        Ok(())
    }
}

/// Ground truth for one video. Segment class `C` is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub video_class: usize,
    pub segment_relevance: Vec<u8>,
    pub segment_class: Vec<usize>,
}

impl LabelRecord {
    /// Labels for a video whose event covers exactly the `relevant` segments.
    pub fn from_relevance(video_class: usize, relevant: &[bool], classes: usize) -> Self {
        LabelRecord {
            video_class,
            segment_relevance: relevant.iter().map(|&r| r as u8).collect(),
            segment_class: relevant
                .iter()
                .map(|&r| if r { video_class } else { classes })
                .collect(),
        }
    }

    pub fn segments(&self) -> usize {
        self.segment_relevance.len()
    }

    pub fn validate(&self, dims: &FeatureDims, allow_negative: bool) -> Result<()> {
        let c = dims.classes;
        if self.video_class >= c {
            return Err(Error::Label(format!(
                "video class {} out of range for C={c}",
                self.video_class
            )));
        }
        if self.segment_relevance.len() != dims.t || self.segment_class.len() != dims.t {
            return Err(Error::Label(format!(
                "expected {} segment labels, got {} relevance / {} class",
                dims.t,
                self.segment_relevance.len(),
                self.segment_class.len()
            )));
        }
        for (t, (&rel, &cls)) in self
            .segment_relevance
            .iter()
            .zip(&self.segment_class)
            .enumerate()
        {
            let ok = match rel {
                1 => cls == self.video_class,
                0 => cls == c,
                _ => false,
            };
            if !ok {
                return Err(Error::Label(format!(
                    "segment {t}: relevance {rel} with class {cls} (video class {}, background {c})",
                    self.video_class
                )));
            }
        }
        if !allow_negative && !self.segment_relevance.contains(&1) {
            return Err(Error::Label("event video has no relevant segment".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub labels: LabelRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    #[serde(flatten)]
    pub dims: FeatureDims,
    /// Whether background-only videos are allowed.
    #[serde(default)]
    pub negative_mode: bool,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Consistency(format!(
                "unsupported manifest version {:?}",
                self.version
            )));
        }
        self.dims.validate()?;
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.video_id.as_str()) {
                return Err(Error::Consistency(format!(
                    "duplicate video id {:?}",
                    e.video_id
                )));
            }
            e.labels
                .validate(&self.dims, self.negative_mode)
                .map_err(|err| Error::Consistency(format!("video {}: {err}", e.video_id)))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.into(),
                source,
            })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Keeps the entries selected by `keep(index)`.
    pub fn subset(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        DatasetManifest {
            entries: self
                .entries
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, e)| e.clone())
                .collect(),
            ..self.clone()
        }
    }
}

/// Loads one feature file and checks it against the manifest header.
pub fn load_bundle(path: &Path, video_id: &str, manifest: &DatasetManifest) -> Result<FeatureBundle> {
    let mut blocks = format::read_file(path)?;
    if blocks.len() != 2 {
        return Err(Error::format(
            path,
            format!("feature file needs 2 blocks (audio, visual), found {}", blocks.len()),
        ));
    }
    let visual = blocks.pop().unwrap();
    let audio = blocks.pop().unwrap();
    let bundle = FeatureBundle {
        video_id: video_id.to_string(),
        audio,
        visual,
    };
    bundle.check_dims(&manifest.dims)?;
    if !bundle.audio.all_finite() || !bundle.visual.all_finite() {
        return Err(Error::Data(format!(
            "{} contains non-finite values",
            path.display()
        )));
    }
    Ok(bundle)
}

pub fn save_bundle(bundle: &FeatureBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    format::write_file(path, &[&bundle.audio, &bundle.visual])
}

/// A manifest with its feature files loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub bundles: Vec<FeatureBundle>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let bundles = manifest
            .entries
            .iter()
            .map(|e| load_bundle(&root.join(&e.path), &e.video_id, &manifest))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, bundles })
    }

    pub fn dims(&self) -> FeatureDims {
        self.manifest.dims
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    pub fn labels(&self, i: usize) -> &LabelRecord {
        &self.manifest.entries[i].labels
    }

    pub fn subset(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let picked: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Dataset {
            manifest: self.manifest.subset(|i| picked.binary_search(&i).is_ok()),
            bundles: picked.iter().map(|&i| self.bundles[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> FeatureDims {
        FeatureDims {
            t: 3,
            d_a: 2,
            d_v: 2,
            h: 1,
            w: 2,
            classes: 3,
        }
    }

    fn bundle(t: usize) -> FeatureBundle {
        FeatureBundle {
            video_id: "v".into(),
            audio: Tensor::from_fn(&[t, 2], |i| i as f32 * 0.5),
            visual: Tensor::from_fn(&[t, 1, 2, 2], |i| -(i as f32)),
        }
    }

    #[test]
    fn label_invariant_enforced() {
        let ok = LabelRecord::from_relevance(1, &[false, true, true], 3);
        assert_eq!(ok.segment_class, vec![3, 1, 1]);
        ok.validate(&dims(), false).unwrap();

        let mut bad = ok.clone();
        bad.segment_class[0] = 1;
        assert!(matches!(bad.validate(&dims(), false), Err(Error::Label(_))));

        let negative = LabelRecord::from_relevance(0, &[false; 3], 3);
        assert!(negative.validate(&dims(), false).is_err());
        negative.validate(&dims(), true).unwrap();

        let out_of_range = LabelRecord::from_relevance(3, &[true; 3], 3);
        assert!(out_of_range.validate(&dims(), false).is_err());
    }

    #[test]
    fn manifest_json_uses_header_names() {
        let m = DatasetManifest {
            version: MANIFEST_VERSION.into(),
            dims: dims(),
            negative_mode: false,
            entries: vec![],
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        for key in ["version", "C", "T", "d_a", "d_v", "h", "w", "entries"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let entry = ManifestEntry {
            video_id: "a".into(),
            path: "a.avf".into(),
            labels: LabelRecord::from_relevance(0, &[true, false, false], 3),
        };
        let m = DatasetManifest {
            version: MANIFEST_VERSION.into(),
            dims: dims(),
            negative_mode: false,
            entries: vec![entry.clone(), entry],
        };
        assert!(matches!(m.validate(), Err(Error::Consistency(_))));
    }

    #[test]
    fn short_or_non_finite_bundles_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.avf");
        assert!(matches!(
            save_bundle(&bundle(1), &path),
            Err(Error::Contract(_))
        ));
        let mut b = bundle(3);
        b.audio = Tensor::from_fn(&[3, 2], |i| if i == 4 { f32::NAN } else { 0.0 });
        assert!(matches!(save_bundle(&b, &path), Err(Error::Data(_))));
    }

    #[test]
    fn load_checks_manifest_dims_and_finiteness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.avf");
        let m = DatasetManifest {
            version: MANIFEST_VERSION.into(),
            dims: dims(),
            negative_mode: false,
            entries: vec![],
        };
        save_bundle(&bundle(3), &path).unwrap();
        let loaded = load_bundle(&path, "v", &m).unwrap();
        assert_eq!(loaded, bundle(3));

        let mut other = m.clone();
        other.dims.d_a = 5;
        assert!(matches!(
            load_bundle(&path, "v", &other),
            Err(Error::Consistency(_))
        ));

        let nan = Tensor::from_fn(&[3, 2], |i| if i == 0 { f32::INFINITY } else { 0.0 });
        format::write_file(&path, &[&nan, &bundle(3).visual]).unwrap();
        assert!(matches!(load_bundle(&path, "v", &m), Err(Error::Data(_))));
    }
}
