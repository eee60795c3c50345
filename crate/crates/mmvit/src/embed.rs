//! Multiview patchification: one overlapping strided conv per view plus
//! a separable positional encoding (height table + width table + a
//! length-1 temporal table, added broadcast-style), flattened to token
//! rows. The CLS token (view 1 only) is handled by the model, not here.

use crate::config::ViewSpec;
use crate::params::ViewEmbedParams;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tape, Var};

/// Patchify one view of `x` (C, H, W) and add its positional encoding.
/// Returns tokens (h·w, E) with h = H/stride_h, w = W/stride_w.
pub fn embed_view<F: Scalar>(
    tape: &Tape<F>,
    x: Var,
    p: &ViewEmbedParams<Var>,
    view: &ViewSpec,
) -> Result<(Var, (usize, usize))> {
    let grid = tape.conv2d(x, p.patch.weight, p.patch.bias, view.stride, view.padding())?;
    let s = tape.shape_of(grid);
    let (e, h, w) = (s[0], s[1], s[2]);
    let pos_h = tape.reshape(p.pos_h, vec![e, h, 1])?;
    let pos_w = tape.reshape(p.pos_w, vec![e, 1, w])?;
    let pos_t = tape.reshape(p.pos_t, vec![e, 1, 1])?;
    let grid = tape.add(grid, pos_h)?;
    let grid = tape.add(grid, pos_w)?;
    let grid = tape.add(grid, pos_t)?;
    let flat = tape.reshape(grid, vec![e, h * w])?;
    let tokens = tape.transpose(flat, 0, 1)?;
    Ok((tokens, (h, w)))
}
