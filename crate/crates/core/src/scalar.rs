//! Numeric abstraction for schedule time.
//!
//! Schedule evaluation only needs addition, comparison and a conversion to
//! `f64` for reporting, so it runs unchanged over `f64`, `f32`, integers and
//! exact rationals (`num_rational::Rational64`).

use std::fmt::Debug;

use num_traits::{Num, ToPrimitive};

/// A time or latency value usable by the schedule evaluators.
pub trait Scalar: Num + Copy + PartialOrd + Debug + ToPrimitive + Send + Sync + 'static {
    #[inline]
    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    #[inline]
    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    /// Lossy conversion used by the annealer's acceptance rule and reports.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where T: Num + Copy + PartialOrd + Debug + ToPrimitive + Send + Sync + 'static {}

/// Sum of an iterator of scalars.
pub fn sum<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    values.into_iter().fold(T::zero(), |acc, v| acc + v)
}
