//! Synthetic planted-event datasets.
//!
//! Each class owns an audio prototype (a random unit vector) and a visual
//! pattern on the `h×w×d_v` grid. A video draws one class and one event span.
//! Inside the span the audio carries the class prototype and the visual
//! pattern drifts by one grid cell per segment. Outside the span segments are
//! noise, or (with probability `distractor_prob`) a distractor: the class
//! prototype leaks into the audio while the visuals show a static,
//! per-video background pattern. Distractors are labeled background.
//!
//! Signals have unit per-element RMS; the noise standard deviation is
//! `1 / snr`, so `snr = ∞` produces noise-free data.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    save_bundle, Dataset, DatasetManifest, FeatureBundle, FeatureDims, LabelRecord,
    ManifestEntry, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub videos: usize,
    pub dims: FeatureDims,
    pub snr: f64,
    /// Chance that a non-event segment becomes an audio-only distractor.
    pub distractor_prob: f64,
    /// Fraction of background-only videos. Non-zero enables negative mode.
    pub negative_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            videos: 64,
            dims: FeatureDims::default(),
            snr: 3.0,
            distractor_prob: 0.5,
            negative_fraction: 0.0,
        }
    }
}

/// Generator output kept in memory, including what the generator planted.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub dataset: Dataset,
    /// Per video, per segment: whether the segment is a distractor.
    pub distractors: Vec<Vec<bool>>,
    /// Per class unit audio prototypes, `d_a` long.
    pub audio_prototypes: Vec<Vec<f64>>,
    /// Per class visual patterns, `h·w·d_v` long, location-major.
    pub visual_patterns: Vec<Vec<f64>>,
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    let dims = config.dims;
    dims.validate()?;
    if config.videos == 0 {
        return Err(Error::Config("need at least one video".into()));
    }
    if !(config.snr > 0.0) {
        return Err(Error::Config(format!("snr must be positive, got {}", config.snr)));
    }
    for (name, p) in [
        ("distractor_prob", config.distractor_prob),
        ("negative_fraction", config.negative_fraction),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = 1.0 / config.snr;
    let n = dims.h * dims.w;
    let cell = n * dims.d_v;

    let audio_prototypes: Vec<Vec<f64>> = (0..dims.classes)
        .map(|_| unit_vector(&mut rng, dims.d_a))
        .collect();
    let visual_patterns: Vec<Vec<f64>> = (0..dims.classes)
        .map(|_| unit_rms_field(&mut rng, cell))
        .collect();
    let audio_gain = (dims.d_a as f64).sqrt();

    let negative_mode = config.negative_fraction > 0.0;
    let mut entries = Vec::with_capacity(config.videos);
    let mut bundles = Vec::with_capacity(config.videos);
    let mut distractors = Vec::with_capacity(config.videos);

    for vid in 0..config.videos {
        let class = rng.random_range(0..dims.classes);
        let negative = negative_mode && rng.random::<f64>() < config.negative_fraction;
        let len = rng.random_range(1..=dims.t);
        let start = rng.random_range(0..=dims.t - len);
        let background = unit_rms_field(&mut rng, cell);

        let mut audio = Vec::with_capacity(dims.t * dims.d_a);
        let mut visual = Vec::with_capacity(dims.t * cell);
        let mut relevant = vec![false; dims.t];
        let mut distractor = vec![false; dims.t];
        for t in 0..dims.t {
            let in_span = !negative && (start..start + len).contains(&t);
            relevant[t] = in_span;
            distractor[t] = !in_span && rng.random::<f64>() < config.distractor_prob;
            let prototype = &audio_prototypes[class];
            for a in prototype {
                let signal = if in_span || distractor[t] { audio_gain * a } else { 0.0 };
                audio.push((signal + noise * gauss(&mut rng)) as f32);
            }
            let pattern = &visual_patterns[class];
            let drift = t.wrapping_sub(start) % n;
            for loc in 0..n {
                let src = (loc + n - drift) % n;
                for ch in 0..dims.d_v {
                    let signal = if in_span {
                        pattern[src * dims.d_v + ch]
                    } else if distractor[t] {
                        background[loc * dims.d_v + ch]
                    } else {
                        0.0
                    };
                    visual.push((signal + noise * gauss(&mut rng)) as f32);
                }
            }
        }

        let video_id = format!("synth-{}-{vid:05}", config.seed);
        let labels = LabelRecord::from_relevance(class, &relevant, dims.classes);
        labels.validate(&dims, negative_mode)?;
        debug_assert!(distractor
            .iter()
            .zip(&labels.segment_relevance)
            .all(|(&d, &r)| !d || r == 0));
        bundles.push(FeatureBundle {
            video_id: video_id.clone(),
            audio: Tensor::new(&dims.audio_shape(), audio)?,
            visual: Tensor::new(&dims.visual_shape(), visual)?,
        });
        entries.push(ManifestEntry {
            path: PathBuf::from("features").join(format!("{video_id}.avf")),
            video_id,
            labels,
        });
        distractors.push(distractor);
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        dims,
        negative_mode,
        entries,
    };
    manifest.validate()?;
    Ok(SynthDataset {
        config: config.clone(),
        dataset: Dataset { manifest, bundles },
        distractors,
        audio_prototypes,
        visual_patterns,
    })
}

impl SynthDataset {
    /// Writes `manifest.json` and `features/*.avf` under `dir`; returns the
    /// manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let features = dir.join("features");
        std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
        for (entry, bundle) in self.dataset.manifest.entries.iter().zip(&self.dataset.bundles) {
            save_bundle(bundle, &dir.join(&entry.path))?;
        }
        let manifest_path = dir.join("manifest.json");
        self.dataset.manifest.write(&manifest_path)?;
        Ok(manifest_path)
    }
}

/// Generates a dataset and writes it to `dir`.
pub fn synth_dataset(config: &SynthConfig, dir: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let synth = generate(config)?;
    let path = synth.write(dir)?;
    Ok((synth.dataset.manifest, path))
}

fn gauss(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| gauss(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn unit_rms_field(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let scale = (n as f64).sqrt();
    unit_vector(rng, n).into_iter().map(|x| x * scale).collect()
}
