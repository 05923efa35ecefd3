//! Past-and-future motion excitation.
//!
//! Visual features are aligned to the audio channel width with a 1×1
//! convolution. Past motion at segment `i` is `conv_p(v'_i) − v'_{i−1}` and
//! future motion is `conv_f(v'_{i+1}) − v'_i`; the first past and last future
//! entries are zero. Their sum is averaged over the spatial grid and passed
//! through a channel map to give the motion feature `M ∈ R^{T×d_a}`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, identity_plus_noise, param_group};
use crate::tensor::{Reduce, Scalar, Tape, Tensor, Var};

pub const MOTION_KERNEL: usize = 3;
pub const MOTION_INIT_SIGMA: f64 = 0.01;

param_group!(
    PfMeParams {
        /// `1×1×d_v×d_a`
        conv1,
        /// `3×3×d_a×d_a`
        conv_p,
        /// `3×3×d_a×d_a`
        conv_f,
        /// `d_a×d_a`
        conv2,
    }
);

impl PfMeParams {
    pub fn init(rng: &mut impl Rng, d_v: usize, d_a: usize) -> Self {
        PfMeParams {
            conv1: fan_in_uniform(rng, &[1, 1, d_v, d_a], d_v),
            conv_p: identity_plus_noise(rng, MOTION_KERNEL, d_a, MOTION_INIT_SIGMA),
            conv_f: identity_plus_noise(rng, MOTION_KERNEL, d_a, MOTION_INIT_SIGMA),
            conv2: fan_in_uniform(rng, &[d_a, d_a], d_a),
        }
    }
}

impl<S: Scalar> PfMeParams<Tensor<S>> {
    pub fn validate(&self, d_v: usize, d_a: usize) -> Result<()> {
        let k = MOTION_KERNEL;
        let expected: [(&str, &Tensor<S>, Vec<usize>); 4] = [
            ("conv1", &self.conv1, vec![1, 1, d_v, d_a]),
            ("conv_p", &self.conv_p, vec![k, k, d_a, d_a]),
            ("conv_f", &self.conv_f, vec![k, k, d_a, d_a]),
            ("conv2", &self.conv2, vec![d_a, d_a]),
        ];
        for (name, t, shape) in expected {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "pfme.{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// How the past-motion term pairs the convolution with the neighbor frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastMotionForm {
    /// `conv_p(v'_i) − v'_{i−1}`
    #[default]
    ConvolveCurrent,
    /// `conv_p(v'_{i−1}) − v'_i`, mirroring the future term's pattern.
    ConvolveNeighbor,
}

/// Which motion terms feed the guidance signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionSource {
    #[default]
    PastAndFuture,
    /// Past motion forced to zero.
    FutureOnly,
}

/// `v' = conv1 * v`
pub fn channel_align<S: Scalar>(tape: &mut Tape<S>, v: Var, p: &PfMeParams<Var>) -> Result<Var> {
    tape.conv2d(v, p.conv1)
}

/// Returns `(M_p, M_f)`, both shaped like `v'`.
pub fn past_future_motion<S: Scalar>(
    tape: &mut Tape<S>,
    aligned: Var,
    p: &PfMeParams<Var>,
    form: PastMotionForm,
) -> Result<(Var, Var)> {
    let t = tape.shape(aligned)[0];
    if t < 2 {
        return Err(Error::Contract(format!(
            "motion needs at least 2 segments, got {t}"
        )));
    }
    // Differences are built one step off and shifted into place so that the
    // boundary rows come from the shift's zero fill and are exactly +0.
    let conv_p = tape.conv2d(aligned, p.conv_p)?;
    let past = match form {
        PastMotionForm::ConvolveCurrent => {
            // e[j] = conv_p(v'_{j+1}) − v'_j
            let ahead = tape.shift_time(conv_p, 1)?;
            let e = tape.sub(ahead, aligned)?;
            tape.shift_time(e, -1)?
        }
        PastMotionForm::ConvolveNeighbor => {
            // e[j] = conv_p(v'_j) − v'_{j+1}
            let ahead = tape.shift_time(aligned, 1)?;
            let e = tape.sub(conv_p, ahead)?;
            tape.shift_time(e, -1)?
        }
    };
    // g[j] = conv_f(v'_j) − v'_{j−1}
    let conv_f = tape.conv2d(aligned, p.conv_f)?;
    let behind = tape.shift_time(aligned, -1)?;
    let g = tape.sub(conv_f, behind)?;
    let future = tape.shift_time(g, 1)?;
    Ok((past, future))
}

/// `M = conv2 · avgpool(M_f + M_p)`
pub fn fuse_and_pool<S: Scalar>(
    tape: &mut Tape<S>,
    past: Var,
    future: Var,
    p: &PfMeParams<Var>,
) -> Result<Var> {
    if tape.shape(past) != tape.shape(future) {
        return Err(Error::Dimension(format!(
            "past motion {:?} and future motion {:?} differ",
            tape.shape(past),
            tape.shape(future)
        )));
    }
    let fused = tape.add(future, past)?;
    let pooled = tape.reduce(Reduce::AvgSpatial, fused)?;
    tape.matmul(pooled, p.conv2)
}

/// Full module: visual features `T×h×w×d_v` to motion feature `T×d_a`.
pub fn motion_feature<S: Scalar>(
    tape: &mut Tape<S>,
    v: Var,
    p: &PfMeParams<Var>,
    form: PastMotionForm,
    source: MotionSource,
) -> Result<Var> {
    let aligned = channel_align(tape, v, p)?;
    let (past, future) = past_future_motion(tape, aligned, p, form)?;
    let past = match source {
        MotionSource::PastAndFuture => past,
        MotionSource::FutureOnly => tape.scale(past, S::zero())?,
    };
    fuse_and_pool(tape, past, future, p)
}
