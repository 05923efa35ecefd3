//! Segment accuracy and run reports.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Dataset;
use crate::head::Prediction;
use crate::model::{predict, ModelConfig, ModelParams};
use crate::tensor::{Scalar, Tensor};
use crate::train::TrainConfig;

/// Accuracy restricted to segments whose ground truth is one label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    /// Class index; `C` is background.
    pub label: usize,
    pub segments: usize,
    pub correct: usize,
    /// `None` when no segment carries this label.
    pub accuracy: Option<f64>,
}

/// Correct/total segment counts for a set of decoded videos.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
    /// `(correct, total)` per ground-truth label, background last.
    pub per_label: Vec<(usize, usize)>,
}

impl Tally {
    pub fn new(classes: usize) -> Self {
        Tally {
            correct: 0,
            total: 0,
            per_label: vec![(0, 0); classes + 1],
        }
    }

    pub fn add(&mut self, decoded: &[usize], truth: &[usize]) -> Result<()> {
        if decoded.len() != truth.len() {
            return Err(Error::Consistency(format!(
                "{} decoded segments for {} labels",
                decoded.len(),
                truth.len()
            )));
        }
        for (&d, &g) in decoded.iter().zip(truth) {
            let slot = self
                .per_label
                .get_mut(g)
                .ok_or_else(|| Error::Label(format!("segment label {g} out of range")))?;
            slot.1 += 1;
            self.total += 1;
            if d == g {
                slot.0 += 1;
                self.correct += 1;
            }
        }
        Ok(())
    }

    /// Fraction of correct segments; 0 for an empty tally.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn per_class(&self) -> Vec<ClassAccuracy> {
        self.per_label
            .iter()
            .enumerate()
            .map(|(label, &(correct, segments))| ClassAccuracy {
                label,
                segments,
                correct,
                accuracy: (segments > 0).then(|| correct as f64 / segments as f64),
            })
            .collect()
    }
}

/// One line of the exported predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    #[serde(flatten)]
    pub prediction: Prediction,
    pub truth: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub tally: Tally,
    pub predictions: Vec<VideoPrediction>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.tally.accuracy()
    }
}

/// Runs the model over every video and counts matching segment labels.
pub fn evaluate<S: Scalar>(
    params: &ModelParams<Tensor<S>>,
    config: &ModelConfig,
    dataset: &Dataset,
) -> Result<Evaluation> {
    if dataset.dims() != config.features {
        return Err(Error::Consistency(format!(
            "dataset dims {:?} do not match model dims {:?}",
            dataset.dims(),
            config.features
        )));
    }
    let mut tally = Tally::new(config.features.classes);
    let mut predictions = Vec::with_capacity(dataset.len());
    for (bundle, entry) in dataset.bundles.iter().zip(&dataset.manifest.entries) {
        let prediction = predict(bundle, params, config)?;
        let truth = entry.labels.segment_class.clone();
        tally.add(&prediction.decoded, &truth)?;
        predictions.push(VideoPrediction {
            video_id: bundle.video_id.clone(),
            prediction,
            truth,
        });
    }
    Ok(Evaluation { tally, predictions })
}

pub fn write_predictions(path: &Path, predictions: &[VideoPrediction]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in predictions {
        let line = serde_json::to_string(p).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<VideoPrediction>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?);
    }
    Ok(out)
}

/// Everything recorded about one training or evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Mean per-video loss for each epoch.
    #[serde(default)]
    pub loss_curve: Vec<f64>,
    /// Training-set accuracy after each epoch, when tracked.
    #[serde(default)]
    pub accuracy_curve: Vec<f64>,
    #[serde(default)]
    pub epochs_run: usize,
    pub accuracy: f64,
    pub segments: usize,
    pub correct: usize,
    pub per_class: Vec<ClassAccuracy>,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub wall_time_secs: f64,
}

impl MetricsReport {
    pub fn from_evaluation(eval: &Evaluation, model: ModelConfig, wall_time_secs: f64) -> Self {
        MetricsReport {
            variant: None,
            seed: None,
            loss_curve: Vec::new(),
            accuracy_curve: Vec::new(),
            epochs_run: 0,
            accuracy: eval.tally.accuracy(),
            segments: eval.tally.total,
            correct: eval.tally.correct,
            per_class: eval.tally.per_class(),
            model,
            train: None,
            wall_time_secs,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct_is_one() {
        let mut t = Tally::new(2);
        t.add(&[0, 0, 2], &[0, 0, 2]).unwrap();
        t.add(&[1, 2], &[1, 2]).unwrap();
        assert_eq!(t.accuracy(), 1.0);
    }

    #[test]
    fn background_everywhere_matches_background_truth() {
        let mut t = Tally::new(3);
        t.add(&[3; 10], &[3; 10]).unwrap();
        assert_eq!(t.accuracy(), 1.0);
        let pc = t.per_class();
        assert_eq!(pc[3].accuracy, Some(1.0));
        assert_eq!(pc[0].accuracy, None);
    }

    #[test]
    fn mixed_counts() {
        let mut t = Tally::new(2);
        t.add(&[0, 2, 2, 1], &[0, 0, 2, 2]).unwrap();
        assert_eq!((t.correct, t.total), (2, 4));
        assert_eq!(t.per_label, vec![(1, 2), (0, 0), (1, 2)]);
    }

    #[test]
    fn length_mismatch_is_error() {
        let mut t = Tally::new(2);
        assert!(matches!(t.add(&[0], &[0, 1]), Err(Error::Consistency(_))));
        assert!(matches!(t.add(&[0], &[7]), Err(Error::Label(_))));
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let preds = vec![VideoPrediction {
            video_id: "v".into(),
            prediction: Prediction::from_scores(vec![0.1, 0.9], vec![0.3, 0.7]),
            truth: vec![2, 1],
        }];
        write_predictions(&path, &preds).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), preds);
    }
}
