//! Scalar abstraction: the whole numeric core is generic over [`Real`],
//! implemented for `f32` and `f64`.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the engine computes in.
///
/// Everything numeric (networks, advantage estimation, environments, the
/// tabular solver) is written against this trait; `f64` is the precision the
/// binary and the checkpoint format use, `f32` exists to keep the code honest
/// about not depending on a particular width.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + Display
    + LowerExp
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from an `f64` constant.
    ///
    /// Constants in this codebase are written as `f64` literals; converting
    /// through this helper keeps generic code readable.
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant converts to any Real")
    }

    /// Widening conversion back to `f64` (exact for both supported types).
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for `R::from_f64c` at call sites heavy with constants.
pub fn real<R: Real>(v: f64) -> R {
    R::from_f64c(v)
}
