//! Cross-modality relation-aware attention, the two relation-aware branches
//! and the audio-visual interaction block.
//!
//! `cmra_attend(x, y)` queries with `x` and attends over the time-wise
//! concatenation `g = [x; y]`, so every output row mixes `2T` value rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, param_group};
use crate::tensor::{Scalar, Tape, Var};

param_group!(
    CmraParams {
        /// `d_x×d_m`
        w_q,
        /// `d_g×d_m`
        w_k,
        /// `d_g×d_out`
        w_x,
    }
);

param_group!(
    ProjectionParams {
        /// `d_a×d_m`
        p_a,
        /// `d_v×d_m`
        p_v,
        /// `2d_m×d_m`
        p_o,
    }
);

impl CmraParams {
    pub fn init(rng: &mut impl Rng, d_in: usize, d_m: usize, d_out: usize) -> Self {
        CmraParams {
            w_q: fan_in_uniform(rng, &[d_in, d_m], d_in),
            w_k: fan_in_uniform(rng, &[d_in, d_m], d_in),
            w_x: fan_in_uniform(rng, &[d_in, d_out], d_in),
        }
    }
}

impl ProjectionParams {
    pub fn init(rng: &mut impl Rng, d_a: usize, d_v: usize, d_m: usize) -> Self {
        ProjectionParams {
            p_a: fan_in_uniform(rng, &[d_a, d_m], d_a),
            p_v: fan_in_uniform(rng, &[d_v, d_m], d_v),
            p_o: fan_in_uniform(rng, &[2 * d_m, d_m], 2 * d_m),
        }
    }
}

/// Score scaling before the attention softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `1/√d_m`
    #[default]
    InvSqrtDm,
    /// `1/d_m`
    InvDm,
}

impl ScaleMode {
    pub fn factor(self, d_m: usize) -> f64 {
        match self {
            ScaleMode::InvSqrtDm => 1.0 / (d_m as f64).sqrt(),
            ScaleMode::InvDm => 1.0 / d_m as f64,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `T×2T`, rows sum to one.
    pub weights: Var,
    /// `T×d_out`
    pub output: Var,
}

pub fn cmra_attend<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    y: Var,
    p: &CmraParams<Var>,
    scale: ScaleMode,
) -> Result<Attended> {
    let (sx, sy) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
    if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
        return Err(Error::Dimension(format!(
            "cmra inputs must share their channel width, got {sx:?} and {sy:?}"
        )));
    }
    let g = tape.concat(x, y, 0)?;
    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(g, p.w_k)?;
    let values = tape.matmul(g, p.w_x)?;
    let d_m = tape.shape(q)[1];
    if tape.shape(k)[1] != d_m {
        return Err(Error::Dimension(format!(
            "query width {d_m} differs from key width {}",
            tape.shape(k)[1]
        )));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, S::from_f64_lossy(scale.factor(d_m)))?;
    let weights = tape.softmax(scores, 1)?;
    let output = tape.matmul(weights, values)?;
    Ok(Attended { weights, output })
}

/// Returns `(A_R, V_R)`, both `T×d_m`.
pub fn relation_aware<S: Scalar>(
    tape: &mut Tape<S>,
    audio: Var,
    visual: Var,
    proj: &ProjectionParams<Var>,
    params_v: &CmraParams<Var>,
    params_a: &CmraParams<Var>,
    scale: ScaleMode,
) -> Result<(Var, Var)> {
    let a = tape.matmul(audio, proj.p_a)?;
    let v = tape.matmul(visual, proj.p_v)?;
    let v_r = cmra_attend(tape, v, a, params_v, scale)?.output;
    let a_r = cmra_attend(tape, a, v, params_a, scale)?.output;
    Ok((a_r, v_r))
}

/// Fuses the branches into the classification feature `O_f` (`T×2d_m`).
pub fn interaction<S: Scalar>(
    tape: &mut Tape<S>,
    a_r: Var,
    v_r: Var,
    proj: &ProjectionParams<Var>,
    params: &CmraParams<Var>,
    scale: ScaleMode,
) -> Result<Var> {
    if tape.shape(a_r) != tape.shape(v_r) {
        return Err(Error::Dimension(format!(
            "relation features differ: {:?} vs {:?}",
            tape.shape(a_r),
            tape.shape(v_r)
        )));
    }
    let fused = tape.mul(a_r, v_r)?;
    let spliced = tape.concat(a_r, v_r, 1)?;
    let context = tape.matmul(spliced, proj.p_o)?;
    let attended = cmra_attend(tape, fused, context, params, scale)?.output;
    tape.add(attended, spliced)
}
