//! Motion ablation: the same training recipe under four guidance variants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::features::Dataset;
use crate::model::{ModelConfig, Motion};
use crate::train::{train, TrainConfig};

pub const JSON_FILE: &str = "ablation.json";
pub const CSV_FILE: &str = "ablation.csv";
pub const CSV_HEADER: &str = "variant,seed,accuracy";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "no-motion")]
    NoMotion,
    #[serde(rename = "future-only")]
    FutureOnly,
    #[serde(rename = "pfme-no-ta")]
    PfmeNoTemporalAttention,
    #[serde(rename = "pfme-ta")]
    PfmeTemporalAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::NoMotion,
        Variant::FutureOnly,
        Variant::PfmeNoTemporalAttention,
        Variant::PfmeTemporalAttention,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::NoMotion => "no-motion",
            Variant::FutureOnly => "future-only",
            Variant::PfmeNoTemporalAttention => "pfme-no-ta",
            Variant::PfmeTemporalAttention => "pfme-ta",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = *base;
        let (motion, ta) = match self {
            Variant::NoMotion => (Motion::Off, true),
            Variant::FutureOnly => (Motion::FutureOnly, true),
            Variant::PfmeNoTemporalAttention => (Motion::Pfme, false),
            Variant::PfmeTemporalAttention => (Motion::Pfme, true),
        };
        c.motion = motion;
        c.temporal_attention = ta;
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

/// Which videos are held out for scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldOut {
    /// Video `i` is held out when `i % every == every - 1`.
    pub every: usize,
}

impl Default for HoldOut {
    fn default() -> Self {
        HoldOut { every: 4 }
    }
}

impl HoldOut {
    pub fn is_held_out(self, i: usize) -> bool {
        i % self.every == self.every - 1
    }

    pub fn split(self, dataset: &Dataset) -> (Dataset, Dataset) {
        (
            dataset.subset(|i| !self.is_held_out(i)),
            dataset.subset(|i| self.is_held_out(i)),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub sd: f64,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<VariantSummary>,
    /// Held-out metrics, one per variant and seed.
    pub runs: Vec<MetricsReport>,
}

/// One CSV record.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRecord {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every variant for every seed and scores it on the held-out split.
pub fn ablate(base: &TrainConfig, dataset: &Dataset, seeds: &[u64], hold_out: HoldOut) -> Result<AblationTable> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("ablation needs at least 2 seeds, got {}", seeds.len())));
    }
    if hold_out.every < 2 {
        return Err(Error::Config("hold-out period must be at least 2".into()));
    }
    let (train_set, test_set) = hold_out.split(dataset);
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Data(format!(
            "{} videos are too few for a hold-out split every {}",
            dataset.len(),
            hold_out.every
        )));
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for variant in Variant::ALL {
        let mut accs = Vec::new();
        for &seed in seeds {
            let mut config = *base;
            config.model = variant.apply(&base.model);
            config.seed = seed;
            let outcome = train(&config, &train_set, None)?;
            let eval = evaluate(&outcome.params, &config.model, &test_set)?;
            let mut report = MetricsReport::from_evaluation(&eval, config.model, outcome.report.wall_time_secs);
            report.variant = Some(variant.label().into());
            report.seed = Some(seed);
            report.loss_curve = outcome.report.loss_curve;
            report.accuracy_curve = outcome.report.accuracy_curve;
            report.epochs_run = outcome.report.epochs_run;
            report.train = Some(config);
            accs.push(report.accuracy);
            runs.push(report);
        }
        let (mean, sd) = mean_sd(&accs);
        rows.push(VariantSummary {
            variant,
            mean,
            sd,
            seeds: seeds.to_vec(),
        });
    }
    Ok(AblationTable { rows, runs })
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&VariantSummary> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn records(&self) -> Result<Vec<AblationRecord>> {
        self.runs
            .iter()
            .map(|r| {
                let variant = r
                    .variant
                    .as_deref()
                    .ok_or_else(|| Error::Data("ablation run without variant".into()))?
                    .parse()?;
                let seed = r.seed.ok_or_else(|| Error::Data("ablation run without seed".into()))?;
                Ok(AblationRecord {
                    variant,
                    seed,
                    accuracy: r.accuracy,
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.records()? {
            // `Display` for f64 prints the shortest string that parses back exactly.
            out.push_str(&format!("{},{},{}\n", r.variant, r.seed, r.accuracy));
        }
        Ok(out)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json_path = dir.join(JSON_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: json_path.clone(),
            source,
        })?;
        std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
        let csv_path = dir.join(CSV_FILE);
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(JSON_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
    }
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Vec<AblationRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::format(path, format!("expected header {CSV_HEADER:?}")));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::format(path, format!("line {}: {what}: {line:?}", i + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(bad("expected 3 fields"));
            }
            Ok(AblationRecord {
                variant: fields[0].parse().map_err(|_| bad("unknown variant"))?,
                seed: fields[1].parse().map_err(|_| bad("bad seed"))?,
                accuracy: fields[2].parse().map_err(|_| bad("bad accuracy"))?,
            })
        })
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<AblationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}
