//! Small dense-network toolkit with hand-written backward passes.
//!
//! Everything is batched over rows: an input of shape `N x d` produces an
//! output of shape `N x k`. Networks are generic over [`Scalar`] so that
//! gradient checks can run in `f64` while production weights stay `f32`.

mod adam;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use mlp::{ForwardCache, Mlp, MlpGradients, MlpSpec, OutputRange, PositionalEncoding};

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type usable for network weights.
pub trait Scalar:
    LinalgScalar
    + ScalarOperand
    + Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to scalar")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Little-endian byte encoding used by checkpoints and parameter hashes.
    fn to_le_f32_bytes(self) -> [u8; 4] {
        (self.f64() as f32).to_le_bytes()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

