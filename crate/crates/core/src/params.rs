//! Parameter groups and seeded initialization.
//!
//! Every learned group is a struct generic over its slot type: `Tensor<f32>`
//! for stored weights, [`Var`](crate::tensor::Var) once bound to a tape, or a
//! gradient tensor after backward. `map` and `for_each` visit slots in
//! declaration order, which fixes the parameter order used by the optimizer
//! and the checkpoint index.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P = $crate::tensor::Tensor<f32>> {
            $($(#[$fmeta])* pub $field: P,)+
        }

        impl<P> $name<P> {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn map<Q>(&self, mut f: impl FnMut(&'static str, &P) -> Q) -> $name<Q> {
                $name { $($field: f(stringify!($field), &self.$field),)+ }
            }

            pub fn try_map<Q, E>(
                &self,
                mut f: impl FnMut(&'static str, &P) -> Result<Q, E>,
            ) -> Result<$name<Q>, E> {
                Ok($name { $($field: f(stringify!($field), &self.$field)?,)+ })
            }

            pub fn for_each(&self, mut f: impl FnMut(&'static str, &P)) {
                $(f(stringify!($field), &self.$field);)+
            }

            pub fn for_each_mut(&mut self, mut f: impl FnMut(&'static str, &mut P)) {
                $(f(stringify!($field), &mut self.$field);)+
            }

            pub fn slots(&self) -> Vec<&P> {
                vec![$(&self.$field),+]
            }

            pub fn slots_mut(&mut self) -> Vec<&mut P> {
                vec![$(&mut self.$field),+]
            }

            /// Fills slots in declaration order; `None` if the iterator runs dry.
            pub fn from_slots(it: &mut impl Iterator<Item = P>) -> Option<Self> {
                Some($name { $($field: it.next()?,)+ })
            }
        }
    };
}

pub(crate) use param_group;

/// Independent random stream for one parameter group.
pub fn group_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as f32)
}

/// A `k×k×c×c` kernel that is the identity channel map at the center tap and
/// small Gaussian noise at every other entry.
pub fn identity_plus_noise(rng: &mut impl Rng, k: usize, c: usize, sigma: f64) -> Tensor<f32> {
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    let center = k / 2;
    Tensor::from_fn(&[k, k, c, c], |i| {
        let (tap, ci, co) = (i / (c * c), (i / c) % c, i % c);
        let (dy, dx) = (tap / k, tap % k);
        if dy == center && dx == center {
            if ci == co {
                1.0
            } else {
                0.0
            }
        } else {
            noise.sample(rng) as f32
        }
    })
}

/// A `k×k×c×c` kernel that maps each channel to itself at the center tap.
pub fn identity_kernel<S: crate::tensor::Scalar>(k: usize, c: usize) -> Tensor<S> {
    let center = k / 2;
    Tensor::from_fn(&[k, k, c, c], |i| {
        let (tap, ci, co) = (i / (c * c), (i / c) % c, i % c);
        if tap == center * k + center && ci == co {
            S::one()
        } else {
            S::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u32> = (0..4).map(|_| group_rng(7, 1).random()).collect();
        let b: Vec<u32> = (0..4).map(|_| group_rng(7, 1).random()).collect();
        assert_eq!(a, b);
        let mut r1 = group_rng(7, 1);
        let mut r2 = group_rng(7, 2);
        assert_ne!(r1.random::<u64>(), r2.random::<u64>());
    }

    #[test]
    fn identity_plus_noise_has_exact_center_identity() {
        let k = identity_plus_noise(&mut group_rng(0, 0), 3, 4, 0.01);
        for ci in 0..4 {
            for co in 0..4 {
                let expected = if ci == co { 1.0 } else { 0.0 };
                assert_eq!(k.at(&[1, 1, ci, co]), expected);
            }
        }
        assert!(k.at(&[0, 0, 0, 0]).abs() < 0.1);
    }

    #[test]
    fn fan_in_bound_respected() {
        let t = fan_in_uniform(&mut group_rng(3, 0), &[16, 8], 16);
        assert!(t.data().iter().all(|x| x.abs() <= 0.25));
    }
}
