//! End-to-end network: motion extraction, audio refinement, visual attention,
//! relation-aware fusion and the heads.

use serde::{Deserialize, Serialize};

use crate::attention::{agva_channel, agva_spatial, mgaa, AgvaParams, MgaaParams};
use crate::cmra::{interaction, relation_aware, CmraParams, ProjectionParams, ScaleMode};
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, FeatureDims, LabelRecord};
use crate::head::{
    classify, supervised_loss, weak_aggregate_loss, weak_logits, weak_scores, HeadParams,
    HeadScores, Prediction,
};
use crate::params::group_rng;
use crate::pfme::{motion_feature, MotionSource, PastMotionForm, PfMeParams};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Widths of the learned hidden spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenDims {
    /// Audio-guided attention width.
    pub d_h: usize,
    /// Relation-aware attention width.
    pub d_m: usize,
}

impl Default for HiddenDims {
    fn default() -> Self {
        HiddenDims { d_h: 64, d_m: 64 }
    }
}

impl HiddenDims {
    pub fn real_scale() -> Self {
        HiddenDims { d_h: 512, d_m: 256 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Segment labels available.
    #[default]
    Supervised,
    /// Video class only.
    Weak,
}

/// Where the audio guidance signal comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    #[default]
    Pfme,
    FutureOnly,
    /// Guidance fixed to zero.
    Off,
}

/// Everything that shapes the computation graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub features: FeatureDims,
    pub hidden: HiddenDims,
    pub mode: Supervision,
    pub motion: Motion,
    pub temporal_attention: bool,
    pub scale_mode: ScaleMode,
    #[serde(default)]
    pub past_motion: PastMotionForm,
}

impl ModelConfig {
    pub fn new(features: FeatureDims) -> Self {
        ModelConfig {
            features,
            hidden: HiddenDims::default(),
            mode: Supervision::Supervised,
            motion: Motion::Pfme,
            temporal_attention: true,
            scale_mode: ScaleMode::InvSqrtDm,
            past_motion: PastMotionForm::ConvolveCurrent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        if self.hidden.d_h == 0 || self.hidden.d_m == 0 {
            return Err(Error::Config(format!("hidden widths must be positive: {:?}", self.hidden)));
        }
        Ok(())
    }
}

/// All learned weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor<f32>> {
    pub pfme: PfMeParams<P>,
    pub mgaa: MgaaParams<P>,
    pub agva: AgvaParams<P>,
    pub proj: ProjectionParams<P>,
    pub cmra_v: CmraParams<P>,
    pub cmra_a: CmraParams<P>,
    pub cmra_i: CmraParams<P>,
    pub head: HeadParams<P>,
    pub seed: u64,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        ModelParams {
            pfme: self.pfme.map(|n, p| f(&format!("pfme.{n}"), p)),
            mgaa: self.mgaa.map(|n, p| f(&format!("mgaa.{n}"), p)),
            agva: self.agva.map(|n, p| f(&format!("agva.{n}"), p)),
            proj: self.proj.map(|n, p| f(&format!("proj.{n}"), p)),
            cmra_v: self.cmra_v.map(|n, p| f(&format!("cmra_v.{n}"), p)),
            cmra_a: self.cmra_a.map(|n, p| f(&format!("cmra_a.{n}"), p)),
            cmra_i: self.cmra_i.map(|n, p| f(&format!("cmra_i.{n}"), p)),
            head: self.head.map(|n, p| f(&format!("head.{n}"), p)),
            seed: self.seed,
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &P)) {
        self.pfme.for_each(|n, p| f(&format!("pfme.{n}"), p));
        self.mgaa.for_each(|n, p| f(&format!("mgaa.{n}"), p));
        self.agva.for_each(|n, p| f(&format!("agva.{n}"), p));
        self.proj.for_each(|n, p| f(&format!("proj.{n}"), p));
        self.cmra_v.for_each(|n, p| f(&format!("cmra_v.{n}"), p));
        self.cmra_a.for_each(|n, p| f(&format!("cmra_a.{n}"), p));
        self.cmra_i.for_each(|n, p| f(&format!("cmra_i.{n}"), p));
        self.head.for_each(|n, p| f(&format!("head.{n}"), p));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        self.pfme.for_each_mut(|n, p| f(&format!("pfme.{n}"), p));
        self.mgaa.for_each_mut(|n, p| f(&format!("mgaa.{n}"), p));
        self.agva.for_each_mut(|n, p| f(&format!("agva.{n}"), p));
        self.proj.for_each_mut(|n, p| f(&format!("proj.{n}"), p));
        self.cmra_v.for_each_mut(|n, p| f(&format!("cmra_v.{n}"), p));
        self.cmra_a.for_each_mut(|n, p| f(&format!("cmra_a.{n}"), p));
        self.cmra_i.for_each_mut(|n, p| f(&format!("cmra_i.{n}"), p));
        self.head.for_each_mut(|n, p| f(&format!("head.{n}"), p));
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(|n, _| names.push(n.to_string()));
        names
    }

    /// Slots in canonical order.
    pub fn to_vec(&self) -> Vec<&P> {
        let mut out = self.pfme.slots();
        out.extend(self.mgaa.slots());
        out.extend(self.agva.slots());
        out.extend(self.proj.slots());
        out.extend(self.cmra_v.slots());
        out.extend(self.cmra_a.slots());
        out.extend(self.cmra_i.slots());
        out.extend(self.head.slots());
        out
    }

    pub fn to_vec_mut(&mut self) -> Vec<&mut P> {
        let mut out = self.pfme.slots_mut();
        out.extend(self.mgaa.slots_mut());
        out.extend(self.agva.slots_mut());
        out.extend(self.proj.slots_mut());
        out.extend(self.cmra_v.slots_mut());
        out.extend(self.cmra_a.slots_mut());
        out.extend(self.cmra_i.slots_mut());
        out.extend(self.head.slots_mut());
        out
    }

    /// Rebuilds from slots in canonical order.
    pub fn from_vec<Q: Clone>(&self, values: &[Q]) -> ModelParams<Q> {
        let mut it = values.iter();
        let out = self.map(|_, _| it.next().expect("too few values").clone());
        assert!(it.next().is_none(), "too many values");
        out
    }
}

// Stream ids for per-group initialization.
const STREAM_PFME: u64 = 1;
const STREAM_MGAA: u64 = 2;
const STREAM_AGVA: u64 = 3;
const STREAM_PROJ: u64 = 4;
const STREAM_CMRA_V: u64 = 5;
const STREAM_CMRA_A: u64 = 6;
const STREAM_CMRA_I: u64 = 7;
const STREAM_HEAD: u64 = 8;

impl ModelParams {
    /// Seeded initialization; the same `(seed, config)` always gives the same bits.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = config.features;
        let HiddenDims { d_h, d_m } = config.hidden;
        Ok(ModelParams {
            pfme: PfMeParams::init(&mut group_rng(seed, STREAM_PFME), f.d_v, f.d_a),
            mgaa: MgaaParams::init(&mut group_rng(seed, STREAM_MGAA), f.d_a),
            agva: AgvaParams::init(&mut group_rng(seed, STREAM_AGVA), f.d_a, f.d_v, d_h),
            proj: ProjectionParams::init(&mut group_rng(seed, STREAM_PROJ), f.d_a, f.d_v, d_m),
            cmra_v: CmraParams::init(&mut group_rng(seed, STREAM_CMRA_V), d_m, d_m, d_m),
            cmra_a: CmraParams::init(&mut group_rng(seed, STREAM_CMRA_A), d_m, d_m, d_m),
            cmra_i: CmraParams::init(&mut group_rng(seed, STREAM_CMRA_I), d_m, d_m, 2 * d_m),
            head: HeadParams::init(&mut group_rng(seed, STREAM_HEAD), 2 * d_m, f.classes),
            seed,
        })
    }

    /// Checks every tensor against a freshly initialized reference layout.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelParams::init(config, 0)?;
        let shapes: Vec<Vec<usize>> = reference.to_vec().iter().map(|t| t.shape().to_vec()).collect();
        let names = reference.names();
        for ((name, want), have) in names.iter().zip(&shapes).zip(self.to_vec()) {
            if have.shape() != want.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name} has shape {:?}, config expects {want:?}",
                    have.shape()
                )));
            }
            if !have.all_finite() {
                return Err(Error::Data(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }

    pub fn cast<S: Scalar>(&self) -> ModelParams<Tensor<S>> {
        self.map(|_, t| t.cast())
    }

    pub fn num_scalars(&self) -> usize {
        self.to_vec().iter().map(|t| t.numel()).sum()
    }
}

impl<S: Scalar> ModelParams<Tensor<S>> {
    pub fn bind(&self, tape: &mut Tape<S>) -> ModelParams<Var> {
        self.map(|_, t| tape.leaf(t.clone()))
    }
}

/// Module outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    pub motion: Var,
    pub audio_refined: Var,
    pub visual_channel: Var,
    pub visual_spatial: Var,
    pub audio_relation: Var,
    pub visual_relation: Var,
    pub fused: Var,
    /// `T×(C+1)` in weak mode.
    pub weak_logits: Option<Var>,
    pub scores: HeadScores,
}

impl ForwardTrace {
    /// Module outputs in evaluation order, for divergence diagnostics.
    pub fn stages(&self) -> Vec<(&'static str, Var)> {
        let mut stages = vec![
            ("pfme", self.motion),
            ("mgaa", self.audio_refined),
            ("agva_channel", self.visual_channel),
            ("agva_spatial", self.visual_spatial),
            ("relation_aware", self.audio_relation),
            ("relation_aware", self.visual_relation),
            ("interaction", self.fused),
        ];
        if let Some(l) = self.weak_logits {
            stages.push(("head", l));
        }
        stages.push(("head", self.scores.class_probs));
        stages.push(("head", self.scores.relevance));
        stages
    }

    /// First module whose output is not finite.
    pub fn first_non_finite<S: Scalar>(&self, tape: &Tape<S>) -> Option<&'static str> {
        self.stages()
            .into_iter()
            .find(|(_, v)| !tape.value(*v).all_finite())
            .map(|(name, _)| name)
    }
}

pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    audio: Var,
    visual: Var,
    p: &ModelParams<Var>,
    config: &ModelConfig,
) -> Result<ForwardTrace> {
    let t = tape.shape(audio)[0];
    let d_a = tape.shape(audio)[1];
    let motion = match config.motion {
        Motion::Off => tape.leaf(Tensor::zeros(&[t, d_a])),
        Motion::Pfme | Motion::FutureOnly => {
            let source = match config.motion {
                Motion::FutureOnly => MotionSource::FutureOnly,
                _ => MotionSource::PastAndFuture,
            };
            motion_feature(tape, visual, &p.pfme, config.past_motion, source)?
        }
    };
    let audio_refined = mgaa(tape, audio, motion, &p.mgaa, config.temporal_attention)?.output;
    let visual_channel = agva_channel(tape, audio_refined, visual, &p.agva)?;
    let visual_spatial = agva_spatial(tape, audio_refined, visual_channel, &p.agva)?;
    let (audio_relation, visual_relation) = relation_aware(
        tape,
        audio_refined,
        visual_spatial,
        &p.proj,
        &p.cmra_v,
        &p.cmra_a,
        config.scale_mode,
    )?;
    let fused = interaction(
        tape,
        audio_relation,
        visual_relation,
        &p.proj,
        &p.cmra_i,
        config.scale_mode,
    )?;
    let (weak, scores) = match config.mode {
        Supervision::Supervised => (None, classify(tape, fused, &p.head)?),
        Supervision::Weak => {
            let logits = weak_logits(tape, fused, &p.head)?;
            (Some(logits), weak_scores(tape, logits)?)
        }
    };
    Ok(ForwardTrace {
        motion,
        audio_refined,
        visual_channel,
        visual_spatial,
        audio_relation,
        visual_relation,
        fused,
        weak_logits: weak,
        scores,
    })
}

/// Training loss for the configured supervision mode.
pub fn loss<S: Scalar>(
    tape: &mut Tape<S>,
    trace: &ForwardTrace,
    labels: &LabelRecord,
    config: &ModelConfig,
) -> Result<Var> {
    match (config.mode, trace.weak_logits) {
        (Supervision::Weak, Some(logits)) => weak_aggregate_loss(tape, logits, labels.video_class),
        _ => Ok(supervised_loss(tape, &trace.scores, labels)?.total),
    }
}

fn check_bundle(bundle: &FeatureBundle, config: &ModelConfig) -> Result<()> {
    bundle.check_dims(&config.features)
}

/// Forward pass on a fresh tape.
pub fn predict<S: Scalar>(
    bundle: &FeatureBundle,
    params: &ModelParams<Tensor<S>>,
    config: &ModelConfig,
) -> Result<Prediction> {
    check_bundle(bundle, config)?;
    let mut tape = Tape::<S>::new();
    let p = params.bind(&mut tape);
    let audio = tape.leaf(bundle.audio.cast());
    let visual = tape.leaf(bundle.visual.cast());
    let trace = forward(&mut tape, audio, visual, &p, config)?;
    Ok(Prediction::read(&tape, &trace.scores))
}

/// Result of one forward/backward pass over a single video.
pub struct VideoStep<S: Scalar> {
    pub loss: f64,
    pub grads: ModelParams<Tensor<S>>,
    pub prediction: Prediction,
    /// First module with non-finite output, if any.
    pub non_finite: Option<&'static str>,
}

pub fn loss_and_grads<S: Scalar>(
    bundle: &FeatureBundle,
    labels: &LabelRecord,
    params: &ModelParams<Tensor<S>>,
    config: &ModelConfig,
) -> Result<VideoStep<S>> {
    check_bundle(bundle, config)?;
    let mut tape = Tape::<S>::new();
    let p = params.bind(&mut tape);
    let audio = tape.leaf(bundle.audio.cast());
    let visual = tape.leaf(bundle.visual.cast());
    let trace = forward(&mut tape, audio, visual, &p, config)?;
    let l = loss(&mut tape, &trace, labels, config)?;
    let prediction = Prediction::read(&tape, &trace.scores);
    let loss = tape.value(l).data()[0].as_f64();
    let non_finite = if loss.is_finite() {
        None
    } else {
        Some(trace.first_non_finite(&tape).unwrap_or("loss"))
    };
    let leaves: Vec<Var> = p.to_vec().into_iter().copied().collect();
    let grads = tape.backward(l, &leaves)?;
    Ok(VideoStep {
        loss,
        grads: params.from_vec(&grads),
        prediction,
        non_finite,
    })
}
