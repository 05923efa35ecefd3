//! Classification heads, decoding and losses.
//!
//! Supervised: `S_c = softmax(maxpool_T(O_f)·W_c + b_c)` is the video class
//! distribution and `S_e[t] = sigmoid(O_f[t]·W_e + b_e)` the per-segment event
//! relevance. A segment decodes to `argmax S_c` when `S_e[t] > 0.5` and to
//! background (index `C`) otherwise.
//!
//! Weak: per-segment scores over `C+1` classes (the `C` event columns from
//! `W_c` plus a background column) are summed over time and trained with
//! cross-entropy against the video class alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::LabelRecord;
use crate::params::{fan_in_uniform, param_group};
use crate::tensor::{Reduce, Scalar, Tape, Tensor, Var};

/// Floor applied inside every logarithm of the losses.
pub const LOG_FLOOR: f64 = 1e-12;

/// Relevance strictly above this marks an event segment.
pub const EVENT_THRESHOLD: f64 = 0.5;

param_group!(
    HeadParams {
        /// `2d_m×C`
        w_c,
        /// `1×C`
        b_c,
        /// `2d_m×1`
        w_e,
        /// `1×1`
        b_e,
        /// `2d_m×1`, background column of the weak head.
        w_bg,
        /// `1×1`
        b_bg,
    }
);

impl HeadParams {
    pub fn init(rng: &mut impl Rng, d_in: usize, classes: usize) -> Self {
        HeadParams {
            w_c: fan_in_uniform(rng, &[d_in, classes], d_in),
            b_c: Tensor::zeros(&[1, classes]),
            w_e: fan_in_uniform(rng, &[d_in, 1], d_in),
            b_e: Tensor::zeros(&[1, 1]),
            w_bg: fan_in_uniform(rng, &[d_in, 1], d_in),
            b_bg: Tensor::zeros(&[1, 1]),
        }
    }
}

/// Head outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadScores {
    /// `1×C`
    pub class_probs: Var,
    /// `T×1`
    pub relevance: Var,
}

/// Supervised head.
pub fn classify<S: Scalar>(tape: &mut Tape<S>, o_f: Var, p: &HeadParams<Var>) -> Result<HeadScores> {
    check_feature(tape, o_f, p)?;
    let pooled = tape.reduce(Reduce::MaxTime, o_f)?;
    let class_logits = tape.matmul(pooled, p.w_c)?;
    let class_logits = tape.add(class_logits, p.b_c)?;
    let class_probs = tape.softmax(class_logits, 1)?;
    let event_logits = tape.matmul(o_f, p.w_e)?;
    let event_logits = tape.add(event_logits, p.b_e)?;
    let relevance = tape.sigmoid(event_logits)?;
    Ok(HeadScores {
        class_probs,
        relevance,
    })
}

fn check_feature<S: Scalar>(tape: &Tape<S>, o_f: Var, p: &HeadParams<Var>) -> Result<()> {
    let (s, w) = (tape.shape(o_f), tape.shape(p.w_c));
    if s.len() != 2 || s[1] != w[0] {
        return Err(Error::Dimension(format!(
            "classifier expects T×{}, got {s:?}",
            w[0]
        )));
    }
    Ok(())
}

/// Per-segment weak-mode scores, `T×(C+1)` with background last.
pub fn weak_logits<S: Scalar>(tape: &mut Tape<S>, o_f: Var, p: &HeadParams<Var>) -> Result<Var> {
    check_feature(tape, o_f, p)?;
    let events = tape.matmul(o_f, p.w_c)?;
    let events = tape.add(events, p.b_c)?;
    let background = tape.matmul(o_f, p.w_bg)?;
    let background = tape.add(background, p.b_bg)?;
    tape.concat(events, background, 1)
}

/// Video-level score: per-segment scores summed over time, `1×(C+1)`.
fn aggregate<S: Scalar>(tape: &mut Tape<S>, logits: Var) -> Result<Var> {
    tape.reduce(Reduce::SumTime, logits)
}

/// Cross-entropy of the time-summed scores against the video class.
pub fn weak_aggregate_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    video_class: usize,
) -> Result<Var> {
    let width = tape.shape(logits)[1];
    if video_class + 1 >= width {
        return Err(Error::Label(format!(
            "video class {video_class} out of range for {} event classes",
            width - 1
        )));
    }
    let summed = aggregate(tape, logits)?;
    let probs = tape.softmax(summed, 1)?;
    let target = tape.leaf(one_hot(width, video_class));
    cross_entropy(tape, probs, target)
}

/// Prediction scores in weak mode. The class distribution renormalizes the
/// event columns of the aggregated scores; relevance is one minus the
/// per-segment background probability.
pub fn weak_scores<S: Scalar>(tape: &mut Tape<S>, logits: Var) -> Result<HeadScores> {
    let width = tape.shape(logits)[1];
    let classes = width - 1;
    let summed = aggregate(tape, logits)?;
    let event_sum = tape.narrow(summed, 1, 0, classes)?;
    let class_probs = tape.softmax(event_sum, 1)?;
    let per_segment = tape.softmax(logits, 1)?;
    let background = tape.narrow(per_segment, 1, classes, 1)?;
    let relevance = tape.affine(background, -S::one(), S::one())?;
    Ok(HeadScores {
        class_probs,
        relevance,
    })
}

fn one_hot<S: Scalar>(width: usize, index: usize) -> Tensor<S> {
    Tensor::from_fn(&[1, width], |i| if i == index { S::one() } else { S::zero() })
}

/// `−Σ target ⊙ ln(max(probs, floor))`
fn cross_entropy<S: Scalar>(tape: &mut Tape<S>, probs: Var, target: Var) -> Result<Var> {
    let logp = tape.log_clamped(probs, S::from_f64_lossy(LOG_FLOOR))?;
    let picked = tape.mul(target, logp)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -S::one())
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub class: Var,
    pub event: Var,
}

/// `L = L_c + L_e`: categorical cross-entropy on the video class plus binary
/// cross-entropy on segment relevance, averaged over segments.
pub fn supervised_loss<S: Scalar>(
    tape: &mut Tape<S>,
    scores: &HeadScores,
    labels: &LabelRecord,
) -> Result<LossTerms> {
    let classes = tape.shape(scores.class_probs)[1];
    let t = tape.shape(scores.relevance)[0];
    if labels.video_class >= classes {
        return Err(Error::Label(format!(
            "video class {} out of range for C={classes}",
            labels.video_class
        )));
    }
    if labels.segment_relevance.len() != t {
        return Err(Error::Dimension(format!(
            "{} relevance labels for {t} segments",
            labels.segment_relevance.len()
        )));
    }
    let target = tape.leaf(one_hot(classes, labels.video_class));
    let class = cross_entropy(tape, scores.class_probs, target)?;

    let floor = S::from_f64_lossy(LOG_FLOOR);
    let y: Vec<S> = labels
        .segment_relevance
        .iter()
        .map(|&r| if r == 1 { S::one() } else { S::zero() })
        .collect();
    let y_pos = tape.leaf(Tensor::new(&[t, 1], y.clone())?);
    let y_neg = tape.leaf(Tensor::new(&[t, 1], y.iter().map(|&v| S::one() - v).collect())?);
    let log_s = tape.log_clamped(scores.relevance, floor)?;
    let complement = tape.affine(scores.relevance, -S::one(), S::one())?;
    let log_1ms = tape.log_clamped(complement, floor)?;
    let pos = tape.mul(y_pos, log_s)?;
    let neg = tape.mul(y_neg, log_1ms)?;
    let both = tape.add(pos, neg)?;
    let sum = tape.sum_all(both)?;
    let event = tape.scale(sum, S::from_f64_lossy(-1.0 / t as f64))?;

    let total = tape.add(class, event)?;
    Ok(LossTerms { total, class, event })
}

/// Scores and decoded labels for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "S_e")]
    pub s_e: Vec<f64>,
    #[serde(rename = "S_c")]
    pub s_c: Vec<f64>,
    /// Event class or `C` for background, per segment.
    pub decoded: Vec<usize>,
}

impl Prediction {
    pub fn from_scores(s_e: Vec<f64>, s_c: Vec<f64>) -> Self {
        let decoded = decode(&s_e, &s_c);
        Prediction { s_e, s_c, decoded }
    }

    pub fn read<S: Scalar>(tape: &Tape<S>, scores: &HeadScores) -> Self {
        Self::from_scores(
            tape.value(scores.relevance).to_f64_vec(),
            tape.value(scores.class_probs).to_f64_vec(),
        )
    }

    pub fn video_class(&self) -> usize {
        argmax(&self.s_c)
    }
}

/// Threshold-and-argmax decoding. Ties in `S_c` go to the lowest class.
pub fn decode(s_e: &[f64], s_c: &[f64]) -> Vec<usize> {
    let class = argmax(s_c);
    let background = s_c.len();
    s_e.iter()
        .map(|&s| if s > EVENT_THRESHOLD { class } else { background })
        .collect()
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::group_rng;

    fn field(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = group_rng(seed, 5);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn head(tape: &mut Tape<f64>, seed: u64, d: usize, c: usize) -> HeadParams<Var> {
        HeadParams::init(&mut group_rng(seed, 0), d, c).map(|_, t| tape.leaf(t.cast()))
    }

    #[test]
    fn saturated_negative_bias_decodes_all_background() {
        let mut tape = Tape::<f64>::new();
        let mut p = head(&mut tape, 0, 6, 3);
        p.b_e = tape.leaf(Tensor::full(&[1, 1], -20.0));
        let o_f = tape.leaf(field(1, &[5, 6]).map(|x| 0.1 * x));
        let scores = classify(&mut tape, o_f, &p).unwrap();
        let pred = Prediction::read(&tape, &scores);
        assert!(pred.s_e.iter().all(|&s| s < 0.5));
        assert_eq!(pred.decoded, vec![3; 5]);
    }

    #[test]
    fn zero_class_map_gives_uniform_distribution() {
        let mut tape = Tape::<f64>::new();
        let mut p = head(&mut tape, 0, 6, 4);
        p.w_c = tape.leaf(Tensor::zeros(&[6, 4]));
        let o_f = tape.leaf(field(2, &[3, 6]));
        let scores = classify(&mut tape, o_f, &p).unwrap();
        let pred = Prediction::read(&tape, &scores);
        assert!(pred.s_c.iter().all(|&s| (s - 0.25).abs() < 1e-15));
    }

    #[test]
    fn decoding_matches_threshold_oracle() {
        for seed in 0..20 {
            let mut tape = Tape::<f64>::new();
            let p = head(&mut tape, seed, 8, 5);
            let o_f = tape.leaf(field(seed + 50, &[10, 8]).map(|x| 3.0 * x));
            let scores = classify(&mut tape, o_f, &p).unwrap();
            let pred = Prediction::read(&tape, &scores);
            assert!((pred.s_c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut best = 0;
            for c in 1..5 {
                if pred.s_c[c] > pred.s_c[best] {
                    best = c;
                }
            }
            for (t, &s) in pred.s_e.iter().enumerate() {
                let want = if s > 0.5 { best } else { 5 };
                assert_eq!(pred.decoded[t], want);
            }
        }
    }

    #[test]
    fn boundary_relevance_decodes_background() {
        assert_eq!(decode(&[0.5, 0.5000001, 0.4999], &[0.1, 0.9]), vec![2, 1, 2]);
    }

    fn loss_of(s_c: &[f64], s_e: &[f64], labels: &LabelRecord) -> (f64, f64, f64) {
        let mut tape = Tape::<f64>::new();
        let scores = HeadScores {
            class_probs: tape.leaf(Tensor::new(&[1, s_c.len()], s_c.to_vec()).unwrap()),
            relevance: tape.leaf(Tensor::new(&[s_e.len(), 1], s_e.to_vec()).unwrap()),
        };
        let l = supervised_loss(&mut tape, &scores, labels).unwrap();
        let get = |v: Var| tape.value(v).data()[0];
        (get(l.total), get(l.class), get(l.event))
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let labels = LabelRecord::from_relevance(1, &[false, true, true, false], 3);
        let (l, _, _) = loss_of(&[0.0, 1.0, 0.0], &[0.0, 1.0, 1.0, 0.0], &labels);
        assert!(l < 1e-6);
    }

    #[test]
    fn uniform_class_distribution_costs_ln_c() {
        let labels = LabelRecord::from_relevance(7, &[true, false], 28);
        let (_, lc, _) = loss_of(&[1.0 / 28.0; 28], &[0.9, 0.1], &labels);
        assert!((lc - 28f64.ln()).abs() < 1e-12);
        assert!((lc - 3.3322).abs() < 1e-4);
    }

    #[test]
    fn half_relevance_costs_ln_2() {
        for rel in [[true, true, false], [false, false, true]] {
            let labels = LabelRecord::from_relevance(0, &rel, 2);
            let (l, lc, le) = loss_of(&[0.3, 0.7], &[0.5; 3], &labels);
            assert!((le - 2f64.ln()).abs() < 1e-12);
            assert_eq!(l, lc + le);
        }
    }

    #[test]
    fn out_of_range_class_is_label_error() {
        let labels = LabelRecord::from_relevance(3, &[true, false], 3);
        let mut tape = Tape::<f64>::new();
        let scores = HeadScores {
            class_probs: tape.leaf(Tensor::full(&[1, 3], 1.0 / 3.0)),
            relevance: tape.leaf(Tensor::full(&[2, 1], 0.5)),
        };
        assert!(matches!(
            supervised_loss(&mut tape, &scores, &labels),
            Err(Error::Label(_))
        ));
        let logits = tape.leaf(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            weak_aggregate_loss(&mut tape, logits, 3),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn weak_single_segment_is_plain_cross_entropy() {
        let logits = field(3, &[1, 5]);
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(logits.clone());
        let loss = weak_aggregate_loss(&mut tape, l, 2).unwrap();
        let z: f64 = logits.data().iter().map(|x| x.exp()).sum();
        let want = -(logits.data()[2].exp() / z).ln();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn weak_uniform_scores_cost_ln_c_plus_one() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::full(&[10, 5], 0.3));
        let loss = weak_aggregate_loss(&mut tape, l, 1).unwrap();
        assert!((tape.value(loss).data()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weak_duplication_keeps_video_class() {
        for seed in 0..10 {
            let logits = field(seed, &[4, 4]);
            let doubled: Vec<f64> = logits.data().iter().chain(logits.data()).copied().collect();
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf(logits);
            let b = tape.leaf(Tensor::new(&[8, 4], doubled).unwrap());
            let sa = weak_scores(&mut tape, a).unwrap();
            let sb = weak_scores(&mut tape, b).unwrap();
            let (pa, pb) = (Prediction::read(&tape, &sa), Prediction::read(&tape, &sb));
            assert_eq!(pa.video_class(), pb.video_class());
        }
    }

    #[test]
    fn weak_scores_satisfy_prediction_invariants() {
        let mut tape = Tape::<f64>::new();
        let p = head(&mut tape, 9, 6, 3);
        let o_f = tape.leaf(field(10, &[5, 6]));
        let logits = weak_logits(&mut tape, o_f, &p).unwrap();
        assert_eq!(tape.shape(logits), &[5, 4]);
        let scores = weak_scores(&mut tape, logits).unwrap();
        let pred = Prediction::read(&tape, &scores);
        assert_eq!(pred.s_c.len(), 3);
        assert!((pred.s_c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (s, d) in pred.s_e.iter().zip(&pred.decoded) {
            assert!((0.0..=1.0).contains(s));
            assert_eq!(*d == 3, *s <= 0.5);
        }
    }

    #[test]
    fn permuting_class_columns_permutes_distribution() {
        let (d, c) = (6, 4);
        let w = field(11, &[d, c]);
        let perm = [2, 0, 3, 1];
        let wp = Tensor::from_fn(&[d, c], |i| w.at(&[i / c, perm[i % c]]));
        let o = field(12, &[3, d]);
        let run = |wc: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let mut p = head(&mut tape, 0, d, c);
            p.w_c = tape.leaf(wc.clone());
            let of = tape.leaf(o.clone());
            let s = classify(&mut tape, of, &p).unwrap();
            Prediction::read(&tape, &s).s_c
        };
        let (base, permuted) = (run(&w), run(&wp));
        for k in 0..c {
            assert!((permuted[k] - base[perm[k]]).abs() < 1e-15);
        }
    }
}
