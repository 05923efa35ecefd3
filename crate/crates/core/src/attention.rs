//! Motion-guided audio attention and audio-guided visual attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, param_group};
use crate::tensor::{Reduce, Scalar, Tape, Var};

param_group!(
    MgaaParams {
        /// `d_a×1`
        w_ta,
    }
);

param_group!(
    AgvaParams {
        /// `d_a×d_h`
        w_c1,
        /// `d_v×d_h`
        w_c2,
        /// `d_v×d_v`
        w_c3,
        /// `d_h×d_v`, lifts the pooled channel gate to the visual width.
        w_align,
        /// `d_a×d_h`
        w_s1,
        /// `d_v×d_h`
        w_s2,
        /// `d_h×1`
        w_s3,
    }
);

impl MgaaParams {
    pub fn init(rng: &mut impl Rng, d_a: usize) -> Self {
        MgaaParams {
            w_ta: fan_in_uniform(rng, &[d_a, 1], d_a),
        }
    }
}

impl AgvaParams {
    pub fn init(rng: &mut impl Rng, d_a: usize, d_v: usize, d_h: usize) -> Self {
        AgvaParams {
            w_c1: fan_in_uniform(rng, &[d_a, d_h], d_a),
            w_c2: fan_in_uniform(rng, &[d_v, d_h], d_v),
            w_c3: fan_in_uniform(rng, &[d_v, d_v], d_v),
            w_align: fan_in_uniform(rng, &[d_h, d_v], d_h),
            w_s1: fan_in_uniform(rng, &[d_a, d_h], d_a),
            w_s2: fan_in_uniform(rng, &[d_v, d_h], d_v),
            w_s3: fan_in_uniform(rng, &[d_h, 1], d_h),
        }
    }
}

/// Intermediate values of [`mgaa`], kept for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct MgaaTrace {
    /// `T×1`, `None` when temporal attention is off.
    pub temporal_weights: Option<Var>,
    pub after_temporal: Var,
    pub channel_gate: Var,
    pub output: Var,
}

/// Refines audio `a` (`T×d_a`) with motion `m` (`T×d_a`):
/// `a₁ = a + softmax_T(m·w_ta) ⊙ a`, then `a' = a₁ + sigmoid(m) ⊙ a₁`.
pub fn mgaa<S: Scalar>(
    tape: &mut Tape<S>,
    a: Var,
    m: Var,
    p: &MgaaParams<Var>,
    temporal_attention: bool,
) -> Result<MgaaTrace> {
    let (sa, sm) = (tape.shape(a).to_vec(), tape.shape(m).to_vec());
    if sa.len() != 2 || sa != sm {
        return Err(Error::Dimension(format!(
            "audio {sa:?} and motion {sm:?} must both be T×d_a"
        )));
    }
    let (temporal_weights, a1) = if temporal_attention {
        let logits = tape.matmul(m, p.w_ta)?;
        let weights = tape.softmax(logits, 0)?;
        let gated = tape.mul(weights, a)?;
        (Some(weights), tape.add(a, gated)?)
    } else {
        (None, a)
    };
    let gate = tape.sigmoid(m)?;
    let gated = tape.mul(gate, a1)?;
    let output = tape.add(a1, gated)?;
    Ok(MgaaTrace {
        temporal_weights,
        after_temporal: a1,
        channel_gate: gate,
        output,
    })
}

fn check_pair<S: Scalar>(tape: &Tape<S>, audio: Var, visual: Var) -> Result<(usize, usize)> {
    let (sa, sv) = (tape.shape(audio), tape.shape(visual));
    if sa.len() != 2 || sv.len() != 4 || sa[0] != sv[0] {
        return Err(Error::Dimension(format!(
            "audio {sa:?} and visual {sv:?} must be T×d_a and T×h×w×d_v"
        )));
    }
    Ok((sa[0], sa[1]))
}

/// `T×d` to `T×1×1×d` so it broadcasts over the spatial grid.
fn per_segment<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    tape.reshape(x, &[s[0], 1, 1, s[1]])
}

/// Audio-guided channel attention. Returns `v'_c` shaped like `v`.
pub fn agva_channel<S: Scalar>(
    tape: &mut Tape<S>,
    audio: Var,
    v: Var,
    p: &AgvaParams<Var>,
) -> Result<Var> {
    check_pair(tape, audio, v)?;
    let audio_h = tape.matmul(audio, p.w_c1)?;
    let audio_h = tape.relu(audio_h)?;
    let audio_h = per_segment(tape, audio_h)?;
    let visual_h = tape.linear(v, p.w_c2)?;
    let visual_h = tape.relu(visual_h)?;
    let joint = tape.mul(audio_h, visual_h)?;
    let pooled = tape.reduce(Reduce::AvgSpatial, joint)?;
    let gate = tape.matmul(pooled, p.w_align)?;
    let gate = per_segment(tape, gate)?;
    let projected = tape.linear(v, p.w_c3)?;
    tape.mul(gate, projected)
}

/// Audio-guided spatial attention. Returns `v'_cs` (`T×d_v`): the sum over
/// grid locations of `tanh(v_cs·w_s3) · v'_c`.
pub fn agva_spatial<S: Scalar>(
    tape: &mut Tape<S>,
    audio: Var,
    vc: Var,
    p: &AgvaParams<Var>,
) -> Result<Var> {
    check_pair(tape, audio, vc)?;
    let audio_h = tape.matmul(audio, p.w_s1)?;
    let audio_h = tape.relu(audio_h)?;
    let audio_h = per_segment(tape, audio_h)?;
    let visual_h = tape.linear(vc, p.w_s2)?;
    let visual_h = tape.relu(visual_h)?;
    let joint = tape.mul(audio_h, visual_h)?;
    let scores = tape.linear(joint, p.w_s3)?;
    let weights = tape.tanh(scores)?;
    let weighted = tape.mul(weights, vc)?;
    tape.reduce(Reduce::SumSpatial, weighted)
}
