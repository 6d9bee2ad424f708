//! Dense arrays with tape-based reverse-mode differentiation.
//!
//! Layout is NCHW throughout, with a mandatory batch axis even when N = 1.

mod array;
pub mod io;
mod ops;
mod tape;

pub use array::{broadcast_shape, pairwise_sum, Precision, Tensor};
pub use tape::{Tape, Var};

pub(crate) use ops::{bilinear_taps, rodrigues};

use crate::error::{Error, Result};

/// Absolute forward differences (|∂x|, |∂y|), zero on the trailing column/row.
pub fn spatial_gradient<'t>(x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("spatial_gradient expects NCHW, got {shape:?}")));
    }
    Ok((x.diff_x()?.abs(), x.diff_y()?.abs()))
}

/// ‖∇x‖ as |∂x| + |∂y|, averaged over channels: `[N,1,H,W]`.
pub fn gradient_magnitude(x: Var<'_>) -> Result<Var<'_>> {
    let (gx, gy) = spatial_gradient(x)?;
    gx.add(gy)?.mean_axis(1)
}
