//! Scalar abstraction for the numeric kernels.
//!
//! Everything numerical in this crate is generic over [`Real`], which bundles
//! the `nalgebra` field operations with primitive conversions and the string
//! round-trip used by the CSV layer. `f64` is the production scalar; `f32`
//! satisfies the same bound and is exercised by smoke tests.

use num_traits::{FromPrimitive, ToPrimitive};

/// Scalar type usable by the model kernels.
pub trait Real:
    nalgebra::RealField
    + Copy
    + FromPrimitive
    + ToPrimitive
    + std::fmt::Display
    + std::fmt::LowerExp
    + std::str::FromStr
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: nalgebra::RealField
        + Copy
        + FromPrimitive
        + ToPrimitive
        + std::fmt::Display
        + std::fmt::LowerExp
        + std::str::FromStr
        + Send
        + Sync
        + 'static
{
}

/// Converts an `f64` constant into the working scalar.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant not representable")
}

/// Converts the working scalar to `f64` (used for distribution tails and IO).
#[inline]
pub fn as_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("scalar not representable as f64")
}

/// Deterministic pairwise (tree) reduction.
///
/// Summation order depends only on the slice order, never on thread count, so
/// per-class reductions are bit-stable.
pub fn pairwise_sum<T: Real>(xs: &[T]) -> T {
    match xs.len() {
        0 => T::zero(),
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let seq: f64 = xs.iter().sum();
        let pair = pairwise_sum(&xs);
        assert!((seq - pair).abs() < 1e-9);
    }

    #[test]
    fn pairwise_handles_edges() {
        assert_eq!(pairwise_sum::<f64>(&[]), 0.0);
        assert_eq!(pairwise_sum(&[3.0f64]), 3.0);
    }

    #[test]
    fn real_roundtrip_f32() {
        let x: f32 = real(2.5);
        assert_eq!(x, 2.5f32);
        assert_eq!(as_f64(x), 2.5);
    }
}
