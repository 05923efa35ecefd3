//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Every case draws its inputs at a number of random points, reduces the
//! output to a scalar with a random projection, and compares each input
//! coordinate's backward gradient against `(f(x+ε) − f(x−ε)) / 2ε` in `f64`.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{agva_channel, agva_spatial, mgaa, AgvaParams, MgaaParams};
use crate::cmra::{cmra_attend, interaction, relation_aware, CmraParams, ProjectionParams, ScaleMode};
use crate::error::{Error, Result};
use crate::features::{FeatureDims, LabelRecord};
use crate::head::{classify, supervised_loss, weak_aggregate_loss, weak_logits, weak_scores, HeadParams, HeadScores};
use crate::model::{forward, loss, HiddenDims, ModelConfig, ModelParams, Motion, Supervision};
use crate::params::group_rng;
use crate::pfme::{motion_feature, MotionSource, PastMotionForm, PfMeParams};
use crate::tensor::{Reduce, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Bound on `|a − n| / max(|a|, |n|, floor)`.
    pub rel_tol: f64,
    pub floor: f64,
    pub points: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            rel_tol: 1e-4,
            floor: 1e-6,
            points: 10,
            seed: 0,
        }
    }
}

type Inputs = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;
type Function = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// A differentiable function of its inputs and a way to draw them.
#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    pub inputs: Inputs,
    pub f: Function,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub points: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Where the largest error occurred.
    pub worst: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub cases: Vec<CaseResult>,
    pub wall_time_secs: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a keeps per-case streams stable across runs and platforms.
    name.bytes()
        .fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Scalar objective: the case output itself if scalar, else its dot product with `r`.
fn objective(case: &Case, tape: &mut Tape<f64>, inputs: &[Var], r: &Tensor<f64>) -> Result<Var> {
    let out = (case.f)(tape, inputs)?;
    if tape.shape(out).iter().product::<usize>() == 1 {
        return tape.sum_all(out);
    }
    if tape.shape(out) != r.shape() {
        return Err(Error::Contract(format!(
            "case {} produced {:?}, projection is {:?}",
            case.name,
            tape.shape(out),
            r.shape()
        )));
    }
    let rv = tape.leaf(r.clone());
    let prod = tape.mul(out, rv)?;
    tape.sum_all(prod)
}

fn eval_at(case: &Case, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = objective(case, &mut tape, &vars, r)?;
    Ok(tape.value(out).data()[0])
}

fn output_shape(case: &Case, inputs: &[Tensor<f64>]) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.f)(&mut tape, &vars)?;
    Ok(tape.shape(out).to_vec())
}

pub fn check_case(case: &Case, config: &GradCheckConfig) -> Result<CaseResult> {
    let mut max_rel: f64 = 0.0;
    let mut worst = String::new();
    let mut coordinates = 0;
    for point in 0..config.points {
        let mut rng = group_rng(config.seed ^ name_hash(case.name), point as u64);
        let inputs = (case.inputs)(&mut rng);
        let shape = output_shape(case, &inputs)?;
        let r = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = objective(case, &mut tape, &vars, &r)?;
        let analytic = tape.backward(out, &vars)?;

        for (k, (x, g)) in inputs.iter().zip(&analytic).enumerate() {
            for j in 0..x.numel() {
                let mut plus = x.clone();
                plus.data_mut()[j] += config.eps;
                let mut minus = x.clone();
                minus.data_mut()[j] -= config.eps;
                let mut shifted = inputs.clone();
                shifted[k] = plus;
                let fp = eval_at(case, &shifted, &r)?;
                shifted[k] = minus;
                let fm = eval_at(case, &shifted, &r)?;
                let numeric = (fp - fm) / (2.0 * config.eps);
                let a = g.data()[j];
                let denom = a.abs().max(numeric.abs()).max(config.floor);
                let rel = (a - numeric).abs() / denom;
                coordinates += 1;
                if !(rel <= max_rel) {
                    max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                    worst = format!("point {point}, input {k}, index {j}: analytic {a:e}, numeric {numeric:e}");
                }
            }
        }
    }
    Ok(CaseResult {
        name: case.name.into(),
        points: config.points,
        coordinates,
        max_rel_error: max_rel,
        worst,
        passed: max_rel < config.rel_tol,
    })
}

pub fn run_suite(suite: &str, config: &GradCheckConfig) -> Result<SuiteResult> {
    let cases = suite_cases(suite)
        .ok_or_else(|| Error::Config(format!("unknown gradient suite {suite:?}; known: {}", SUITES.join(", "))))?;
    let started = Instant::now();
    let results = cases
        .iter()
        .map(|c| check_case(c, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteResult {
        suite: suite.into(),
        cases: results,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

pub fn run_all(config: &GradCheckConfig) -> Result<Vec<SuiteResult>> {
    SUITES.iter().map(|s| run_suite(s, config)).collect()
}

pub const SUITES: &[&str] = &[
    "tensor", "pfme", "mgaa", "agva", "cmra", "interaction", "losses", "model",
];

pub fn suite_cases(suite: &str) -> Option<Vec<Case>> {
    Some(match suite {
        "tensor" => tensor_cases(),
        "pfme" => pfme_cases(),
        "mgaa" => mgaa_cases(),
        "agva" => agva_cases(),
        "cmra" => cmra_cases(),
        "interaction" => interaction_cases(),
        "losses" => loss_cases(),
        "model" => model_cases(),
        _ => return None,
    })
}

// Small widths keep the coordinate sweep cheap.
const T: usize = 3;
const D_A: usize = 4;
const D_V: usize = 5;
const H: usize = 2;
const W: usize = 2;
const D_H: usize = 3;
const D_M: usize = 4;
const C: usize = 3;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Standard normal values pushed at least `gap` away from zero, for kinked ops.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let x: f64 = StandardNormal.sample(rng);
        x.signum() * (x.abs() + gap)
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.1..2.0))
}

/// Redraws every slot of a group template as uniform `[-1, 1)` values.
fn redraw(rng: &mut ChaCha8Rng, slots: Vec<&Tensor<f32>>) -> Vec<Tensor<f64>> {
    slots
        .into_iter()
        .map(|t| Tensor::from_fn(t.shape(), |_| rng.random_range(-1.0..1.0)))
        .collect()
}

fn pfme_params(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    redraw(rng, PfMeParams::init(&mut group_rng(0, 0), D_V, D_A).slots())
}

fn agva_params(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    redraw(rng, AgvaParams::init(&mut group_rng(0, 0), D_A, D_V, D_H).slots())
}

fn cmra_params(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Vec<Tensor<f64>> {
    redraw(rng, CmraParams::init(&mut group_rng(0, 0), d_in, D_M, d_out).slots())
}

fn proj_params(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    redraw(rng, ProjectionParams::init(&mut group_rng(0, 0), D_A, D_V, D_M).slots())
}

fn head_params(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    redraw(rng, HeadParams::init(&mut group_rng(0, 0), 2 * D_M, C).slots())
}

fn filled<G>(group: Option<G>) -> G {
    group.expect("case supplies every slot")
}

macro_rules! case {
    ($name:expr, $inputs:expr, $f:expr) => {
        Case {
            name: $name,
            inputs: $inputs,
            f: $f,
        }
    };
}

fn tensor_cases() -> Vec<Case> {
    vec![
        case!("matmul", |r| vec![normal(r, &[3, 4]), normal(r, &[4, 2])], |t, x| t.matmul(x[0], x[1])),
        case!("transpose", |r| vec![normal(r, &[3, 4])], |t, x| t.transpose(x[0])),
        case!(
            "conv2d_3x3",
            |r| vec![normal(r, &[2, 3, 3, 2]), normal(r, &[3, 3, 2, 3])],
            |t, x| t.conv2d(x[0], x[1])
        ),
        case!(
            "conv2d_1x1",
            |r| vec![normal(r, &[2, 2, 3, 3]), normal(r, &[1, 1, 3, 2])],
            |t, x| t.conv2d(x[0], x[1])
        ),
        case!("relu", |r| vec![off_zero(r, &[4, 3], 0.01)], |t, x| t.relu(x[0])),
        case!("sigmoid", |r| vec![normal(r, &[4, 3])], |t, x| t.sigmoid(x[0])),
        case!("tanh", |r| vec![normal(r, &[4, 3])], |t, x| t.tanh(x[0])),
        case!("softmax_rows", |r| vec![normal(r, &[3, 4])], |t, x| t.softmax(x[0], 1)),
        case!("softmax_cols", |r| vec![normal(r, &[3, 4])], |t, x| t.softmax(x[0], 0)),
        case!(
            "avg_spatial",
            |r| vec![normal(r, &[2, 2, 3, 4])],
            |t, x| t.reduce(Reduce::AvgSpatial, x[0])
        ),
        case!(
            "sum_spatial",
            |r| vec![normal(r, &[2, 2, 3, 4])],
            |t, x| t.reduce(Reduce::SumSpatial, x[0])
        ),
        case!("max_time", |r| vec![normal(r, &[4, 3])], |t, x| t.reduce(Reduce::MaxTime, x[0])),
        case!("sum_time", |r| vec![normal(r, &[4, 3])], |t, x| t.reduce(Reduce::SumTime, x[0])),
        case!("add", |r| vec![normal(r, &[3, 4]), normal(r, &[3, 4])], |t, x| t.add(x[0], x[1])),
        case!(
            "add_broadcast",
            |r| vec![normal(r, &[3, 4]), normal(r, &[1, 4])],
            |t, x| t.add(x[0], x[1])
        ),
        case!(
            "sub_broadcast",
            |r| vec![normal(r, &[3, 1]), normal(r, &[3, 4])],
            |t, x| t.sub(x[0], x[1])
        ),
        case!(
            "mul_broadcast",
            |r| vec![normal(r, &[2, 1, 1, 3]), normal(r, &[2, 2, 2, 3])],
            |t, x| t.mul(x[0], x[1])
        ),
        case!(
            "concat_time",
            |r| vec![normal(r, &[2, 3]), normal(r, &[4, 3])],
            |t, x| t.concat(x[0], x[1], 0)
        ),
        case!(
            "concat_channels",
            |r| vec![normal(r, &[3, 2]), normal(r, &[3, 4])],
            |t, x| t.concat(x[0], x[1], 1)
        ),
        case!("reshape", |r| vec![normal(r, &[3, 4])], |t, x| t.reshape(x[0], &[2, 1, 6])),
        case!("affine", |r| vec![normal(r, &[3, 4])], |t, x| t.affine(x[0], -1.5, 0.25)),
        case!("scale", |r| vec![normal(r, &[3, 4])], |t, x| t.scale(x[0], 0.7)),
        case!("log_clamped", |r| vec![positive(r, &[3, 4])], |t, x| t.log_clamped(x[0], 1e-12)),
        case!("sum_all", |r| vec![normal(r, &[3, 4])], |t, x| t.sum_all(x[0])),
        case!("shift_back", |r| vec![normal(r, &[4, 2, 2, 3])], |t, x| t.shift_time(x[0], -1)),
        case!("shift_forward", |r| vec![normal(r, &[4, 3])], |t, x| t.shift_time(x[0], 1)),
        case!("narrow", |r| vec![normal(r, &[3, 5])], |t, x| t.narrow(x[0], 1, 1, 3)),
        case!(
            "linear",
            |r| vec![normal(r, &[2, 2, 2, 3]), normal(r, &[3, 4])],
            |t, x| t.linear(x[0], x[1])
        ),
    ]
}

fn visual(r: &mut ChaCha8Rng) -> Tensor<f64> {
    normal(r, &[T, H, W, D_V])
}

fn audio(r: &mut ChaCha8Rng) -> Tensor<f64> {
    normal(r, &[T, D_A])
}

fn with<F: FnOnce(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>(
    first: Vec<Tensor<f64>>,
    r: &mut ChaCha8Rng,
    rest: F,
) -> Vec<Tensor<f64>> {
    let mut v = first;
    v.extend(rest(r));
    v
}

fn pfme_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let v = visual(r);
    with(vec![v], r, pfme_params)
}

fn pfme_with(t: &mut Tape<f64>, x: &[Var], form: PastMotionForm, source: MotionSource) -> Result<Var> {
    let mut it = x[1..].iter().copied();
    let p = filled(PfMeParams::from_slots(&mut it));
    motion_feature(t, x[0], &p, form, source)
}

fn pfme_cases() -> Vec<Case> {
    vec![
        case!("pfme", pfme_inputs, |t, x| pfme_with(
            t,
            x,
            PastMotionForm::ConvolveCurrent,
            MotionSource::PastAndFuture
        )),
        case!("pfme_neighbor_past", pfme_inputs, |t, x| pfme_with(
            t,
            x,
            PastMotionForm::ConvolveNeighbor,
            MotionSource::PastAndFuture
        )),
        case!("pfme_future_only", pfme_inputs, |t, x| pfme_with(
            t,
            x,
            PastMotionForm::ConvolveCurrent,
            MotionSource::FutureOnly
        )),
    ]
}

fn mgaa_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (a, m) = (audio(r), normal(r, &[T, D_A]));
    let w = redraw(r, MgaaParams::init(&mut group_rng(0, 0), D_A).slots());
    with(vec![a, m], r, |_| w)
}

fn mgaa_cases() -> Vec<Case> {
    vec![
        case!("mgaa", mgaa_inputs, |t, x| {
            let p = MgaaParams { w_ta: x[2] };
            Ok(mgaa(t, x[0], x[1], &p, true)?.output)
        }),
        case!("mgaa_no_temporal", mgaa_inputs, |t, x| {
            let p = MgaaParams { w_ta: x[2] };
            Ok(mgaa(t, x[0], x[1], &p, false)?.output)
        }),
    ]
}

fn agva_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (a, v) = (audio(r), visual(r));
    with(vec![a, v], r, agva_params)
}

fn agva_cases() -> Vec<Case> {
    vec![
        case!("agva_channel", agva_inputs, |t, x| {
            let p = filled(AgvaParams::from_slots(&mut x[2..].iter().copied()));
            agva_channel(t, x[0], x[1], &p)
        }),
        case!("agva_spatial", agva_inputs, |t, x| {
            let p = filled(AgvaParams::from_slots(&mut x[2..].iter().copied()));
            agva_spatial(t, x[0], x[1], &p)
        }),
        case!("agva", agva_inputs, |t, x| {
            let p = filled(AgvaParams::from_slots(&mut x[2..].iter().copied()));
            let vc = agva_channel(t, x[0], x[1], &p)?;
            agva_spatial(t, x[0], vc, &p)
        }),
    ]
}

fn cmra_cases() -> Vec<Case> {
    vec![
        case!(
            "cmra_attend",
            |r| {
                let (x, y) = (normal(r, &[T, D_M]), normal(r, &[T, D_M]));
                with(vec![x, y], r, |r| cmra_params(r, D_M, D_M))
            },
            |t, x| {
                let p = filled(CmraParams::from_slots(&mut x[2..].iter().copied()));
                Ok(cmra_attend(t, x[0], x[1], &p, ScaleMode::InvSqrtDm)?.output)
            }
        ),
        case!(
            "cmra_attend_linear_scale",
            |r| {
                let (x, y) = (normal(r, &[T, D_M]), normal(r, &[T, D_M]));
                with(vec![x, y], r, |r| cmra_params(r, D_M, D_M))
            },
            |t, x| {
                let p = filled(CmraParams::from_slots(&mut x[2..].iter().copied()));
                Ok(cmra_attend(t, x[0], x[1], &p, ScaleMode::InvDm)?.output)
            }
        ),
        case!(
            "relation_aware",
            |r| {
                let (a, v) = (audio(r), normal(r, &[T, D_V]));
                let mut out = vec![a, v];
                out.extend(proj_params(r));
                out.extend(cmra_params(r, D_M, D_M));
                out.extend(cmra_params(r, D_M, D_M));
                out
            },
            |t, x| {
                let mut it = x[2..].iter().copied();
                let proj = filled(ProjectionParams::from_slots(&mut it));
                let pv = filled(CmraParams::from_slots(&mut it));
                let pa = filled(CmraParams::from_slots(&mut it));
                let (a_r, v_r) = relation_aware(t, x[0], x[1], &proj, &pv, &pa, ScaleMode::InvSqrtDm)?;
                t.concat(a_r, v_r, 1)
            }
        ),
    ]
}

fn interaction_cases() -> Vec<Case> {
    vec![case!(
        "interaction",
        |r| {
            let (a, v) = (normal(r, &[T, D_M]), normal(r, &[T, D_M]));
            let mut out = vec![a, v];
            out.extend(proj_params(r));
            out.extend(cmra_params(r, D_M, 2 * D_M));
            out
        },
        |t, x| {
            let mut it = x[2..].iter().copied();
            let proj = filled(ProjectionParams::from_slots(&mut it));
            let p = filled(CmraParams::from_slots(&mut it));
            interaction(t, x[0], x[1], &proj, &p, ScaleMode::InvSqrtDm)
        }
    )]
}

fn labels() -> LabelRecord {
    LabelRecord::from_relevance(1, &[true, false, true], C)
}

fn head_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let o = normal(r, &[T, 2 * D_M]);
    with(vec![o], r, head_params)
}

fn loss_cases() -> Vec<Case> {
    vec![
        case!("classify", head_inputs, |t, x| {
            let p = filled(HeadParams::from_slots(&mut x[1..].iter().copied()));
            let s = classify(t, x[0], &p)?;
            let flat_r = t.reshape(s.relevance, &[1, T])?;
            t.concat(flat_r, s.class_probs, 1)
        }),
        case!(
            "supervised_loss",
            |r| vec![normal(r, &[1, C]), normal(r, &[T, 1])],
            |t, x| {
                let scores = HeadScores {
                    class_probs: t.softmax(x[0], 1)?,
                    relevance: t.sigmoid(x[1])?,
                };
                Ok(supervised_loss(t, &scores, &labels())?.total)
            }
        ),
        case!("weak_aggregate_loss", |r| vec![normal(r, &[T, C + 1])], |t, x| {
            weak_aggregate_loss(t, x[0], 1)
        }),
        case!("weak_scores", |r| vec![normal(r, &[T, C + 1])], |t, x| {
            let s = weak_scores(t, x[0])?;
            let flat_r = t.reshape(s.relevance, &[1, T])?;
            t.concat(flat_r, s.class_probs, 1)
        }),
        case!("weak_logits", head_inputs, |t, x| {
            let p = filled(HeadParams::from_slots(&mut x[1..].iter().copied()));
            weak_logits(t, x[0], &p)
        }),
    ]
}

fn model_config(mode: Supervision) -> ModelConfig {
    let mut c = ModelConfig::new(FeatureDims {
        t: T,
        d_a: D_A,
        d_v: D_V,
        h: H,
        w: W,
        classes: C,
    });
    c.hidden = HiddenDims { d_h: D_H, d_m: D_M };
    c.mode = mode;
    c.motion = Motion::Pfme;
    c
}

fn model_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (a, v) = (audio(r), visual(r));
    let template = ModelParams::init(&model_config(Supervision::Supervised), 0).expect("valid dims");
    let mut out = vec![a, v];
    out.extend(
        template
            .to_vec()
            .into_iter()
            .map(|t| Tensor::from_fn(t.shape(), |_| r.random_range(-0.7..0.7))),
    );
    out
}

fn model_loss(t: &mut Tape<f64>, x: &[Var], mode: Supervision) -> Result<Var> {
    let config = model_config(mode);
    let template = ModelParams::init(&config, 0)?;
    let p = template.from_vec(&x[2..]);
    let trace = forward(t, x[0], x[1], &p, &config)?;
    loss(t, &trace, &labels(), &config)
}

fn model_cases() -> Vec<Case> {
    vec![
        case!("model_supervised", model_inputs, |t, x| model_loss(t, x, Supervision::Supervised)),
        case!("model_weak", model_inputs, |t, x| model_loss(t, x, Supervision::Weak)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // At a tie max_time routes the whole gradient to one row, while the
        // central difference sees half of it.
        let case = case!("tie", |_| vec![Tensor::full(&[2, 1], 1.0)], |t, x| t.reduce(Reduce::MaxTime, x[0]));
        let res = check_case(&case, &GradCheckConfig { points: 1, ..Default::default() }).unwrap();
        assert!(!res.passed, "{res:?}");
    }

    #[test]
    fn unknown_suite_is_config_error() {
        assert!(matches!(run_suite("nope", &GradCheckConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn tensor_suite_passes() {
        let res = run_suite("tensor", &GradCheckConfig { points: 2, ..Default::default() }).unwrap();
        for c in &res.cases {
            assert!(c.passed, "{c:?}");
        }
    }
}
