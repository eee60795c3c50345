//! The attention core: multi-head pooling attention and its cross-view
//! variant.
//!
//! Tokens arrive as (L, E) rows, spatial-major with an optional CLS row
//! at index 0. Pooling happens after the Q/K/V projections, on the
//! token grid, channelwise (depthwise conv); CLS is detached first and
//! re-attached untouched. The softmax argument is QKᵀ divided by √d.

use crate::params::{AttnParams, PoolParams};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tape, TensorError, Var};

/// Geometry of one pooling conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl PoolGeom {
    /// The scaled-block Q-pool: kernel 3, stride 2, padding 1 — halves
    /// each grid axis.
    pub fn halving() -> PoolGeom {
        PoolGeom { kernel: (3, 3), stride: (2, 2), pad: (1, 1) }
    }

    pub fn out_grid(&self, grid: (usize, usize)) -> (usize, usize) {
        (
            (grid.0 + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1,
            (grid.1 + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }
}

/// One view's token sequence entering an attention op (already
/// layer-normed by the block).
#[derive(Debug, Clone, Copy)]
pub struct TokenView {
    pub tokens: Var,
    pub grid: (usize, usize),
    pub has_cls: bool,
}

impl TokenView {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1 + usize::from(self.has_cls)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// (L_spatial, E) rows → (E, h, w) grid.
fn tokens_to_grid<F: Scalar>(
    tape: &Tape<F>,
    t: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let e = tape.shape_of(t)[1];
    let tr = tape.transpose(t, 0, 1)?;
    tape.reshape(tr, vec![e, grid.0, grid.1])
}

/// (E, h, w) grid → (h·w, E) rows.
fn grid_to_tokens<F: Scalar>(tape: &Tape<F>, g: Var) -> Result<Var> {
    let s = tape.shape_of(g);
    let flat = tape.reshape(g, vec![s[0], s[1] * s[2]])?;
    tape.transpose(flat, 0, 1)
}

/// Depthwise-conv pooling of projected tokens. CLS (row 0) bypasses the
/// conv entirely and is re-attached in front.
pub fn pool_tokens<F: Scalar>(
    tape: &Tape<F>,
    t: Var,
    grid: (usize, usize),
    has_cls: bool,
    pool: &PoolParams<Var>,
    geom: &PoolGeom,
) -> Result<(Var, (usize, usize))> {
    let l = tape.shape_of(t)[0];
    let spatial_len = grid.0 * grid.1;
    let expect = spatial_len + usize::from(has_cls);
    if l != expect {
        return Err(TensorError::Invalid {
            op: "pool_tokens",
            msg: format!("{l} tokens inconsistent with grid {grid:?} (cls: {has_cls})"),
        });
    }
    let (cls, spatial) = if has_cls {
        (Some(tape.narrow(t, 0, 0, 1)?), tape.narrow(t, 0, 1, spatial_len)?)
    } else {
        (None, t)
    };
    let g = tokens_to_grid(tape, spatial, grid)?;
    let pooled = tape.depthwise_conv2d(g, pool.weight, pool.bias, geom.stride, geom.pad)?;
    let out_grid = geom.out_grid(grid);
    let t2 = grid_to_tokens(tape, pooled)?;
    let out = match cls {
        Some(c) => tape.concat(&[c, t2], 0)?,
        None => t2,
    };
    Ok((out, out_grid))
}

/// Parameter-free average pooling of tokens with the same geometry and
/// CLS handling as `pool_tokens`. Used as the residual path of scaled
/// blocks, where the main path shrinks via the learnable Q-pool.
pub fn avg_pool_tokens<F: Scalar>(
    tape: &Tape<F>,
    t: Var,
    grid: (usize, usize),
    has_cls: bool,
    geom: &PoolGeom,
) -> Result<(Var, (usize, usize))> {
    let l = tape.shape_of(t)[0];
    let spatial_len = grid.0 * grid.1;
    if l != spatial_len + usize::from(has_cls) {
        return Err(TensorError::Invalid {
            op: "avg_pool_tokens",
            msg: format!("{l} tokens inconsistent with grid {grid:?} (cls: {has_cls})"),
        });
    }
    let (cls, spatial) = if has_cls {
        (Some(tape.narrow(t, 0, 0, 1)?), tape.narrow(t, 0, 1, spatial_len)?)
    } else {
        (None, t)
    };
    let g = tokens_to_grid(tape, spatial, grid)?;
    let pooled = tape.avg_pool2d(g, geom.kernel, geom.stride, geom.pad)?;
    let t2 = grid_to_tokens(tape, pooled)?;
    let out = match cls {
        Some(c) => tape.concat(&[c, t2], 0)?,
        None => t2,
    };
    Ok((out, geom.out_grid(grid)))
}

/// (L, E) → (heads, L, d).
fn split_heads<F: Scalar>(tape: &Tape<F>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape_of(x);
    let (l, e) = (s[0], s[1]);
    if e % heads != 0 {
        return Err(TensorError::Invalid {
            op: "split_heads",
            msg: format!("width {e} not divisible by {heads} heads"),
        });
    }
    let r = tape.reshape(x, vec![l, heads, e / heads])?;
    tape.transpose(r, 0, 1)
}

/// (heads, L, d) → (L, E).
fn merge_heads<F: Scalar>(tape: &Tape<F>, x: Var) -> Result<Var> {
    let s = tape.shape_of(x);
    let t = tape.transpose(x, 0, 1)?;
    tape.reshape(t, vec![s[1], s[0] * s[2]])
}

/// softmax(QKᵀ/√d)V over `heads` heads. Q (Lq,E), K/V (Lk,E) → (Lq,E).
fn heads_attention<F: Scalar>(
    tape: &Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let e = tape.shape_of(q)[1];
    let d = e / heads;
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let kt = tape.transpose(kh, 1, 2)?;
    let scores = tape.matmul(qh, kt)?;
    let scaled = tape.scale(scores, F::from_f64(1.0 / (d as f64).sqrt()))?;
    let probs = tape.softmax(scaled, 2)?;
    let ctx = tape.matmul(probs, vh)?;
    merge_heads(tape, ctx)
}

/// Project to Q/K/V and pool each with its own spec. Only Q-pooling is
/// ever non-identity in this architecture; K/V pooling hooks exist for
/// configurability but default to identity.
fn project_qkv<F: Scalar>(
    tape: &Tape<F>,
    x: &TokenView,
    p: &AttnParams<Var>,
    q_geom: Option<&PoolGeom>,
) -> Result<(Var, Var, Var, (usize, usize))> {
    let q = tape.linear(x.tokens, p.wq, p.bq)?;
    let k = tape.linear(x.tokens, p.wk, p.bk)?;
    let v = tape.linear(x.tokens, p.wv, p.bv)?;
    let (q, out_grid) = match (q_geom, &p.q_pool) {
        (Some(g), Some(pool)) => pool_tokens(tape, q, x.grid, x.has_cls, pool, g)?,
        (None, None) => (q, x.grid),
        (Some(_), None) => {
            return Err(TensorError::Invalid {
                op: "pooling_attention",
                msg: "Q-pool geometry given but block has no pooling parameters".into(),
            })
        }
        (None, Some(_)) => {
            return Err(TensorError::Invalid {
                op: "pooling_attention",
                msg: "block has pooling parameters but no geometry was requested".into(),
            })
        }
    };
    Ok((q, k, v, out_grid))
}

/// Multi-head pooling attention over one view. Returns the attended
/// tokens and the (possibly pooled) output grid.
pub fn pooling_attention<F: Scalar>(
    tape: &Tape<F>,
    x: &TokenView,
    p: &AttnParams<Var>,
    heads: usize,
    q_geom: Option<&PoolGeom>,
) -> Result<(Var, (usize, usize))> {
    let (q, k, v, out_grid) = project_qkv(tape, x, p, q_geom)?;
    let ctx = heads_attention(tape, q, k, v, heads)?;
    let out = tape.linear(ctx, p.wo, p.bo)?;
    Ok((out, out_grid))
}

/// Cross pooling attention: per-view Q/K/V are concatenated along the
/// token axis, one joint attention runs over the whole set, and the
/// output splits back into per-view segments, each with its own output
/// projection. Pooling is identity here — fusion never changes shapes.
pub fn cross_pooling_attention<F: Scalar>(
    tape: &Tape<F>,
    xs: &[TokenView],
    ps: &[&AttnParams<Var>],
    heads: usize,
) -> Result<Vec<Var>> {
    if xs.is_empty() || xs.len() != ps.len() {
        return Err(TensorError::Invalid {
            op: "cross_pooling_attention",
            msg: format!("{} views with {} parameter sets", xs.len(), ps.len()),
        });
    }
    let mut qs = Vec::with_capacity(xs.len());
    let mut ks = Vec::with_capacity(xs.len());
    let mut vs = Vec::with_capacity(xs.len());
    for (x, p) in xs.iter().zip(ps) {
        let (q, k, v, _) = project_qkv(tape, x, p, None)?;
        qs.push(q);
        ks.push(k);
        vs.push(v);
    }
    let q_cat = tape.concat(&qs, 0)?;
    let k_cat = tape.concat(&ks, 0)?;
    let v_cat = tape.concat(&vs, 0)?;
    let ctx = heads_attention(tape, q_cat, k_cat, v_cat, heads)?;
    let mut outs = Vec::with_capacity(xs.len());
    let mut start = 0usize;
    for (x, p) in xs.iter().zip(ps) {
        let seg = tape.narrow(ctx, 0, start, x.len())?;
        outs.push(tape.linear(seg, p.wo, p.bo)?);
        start += x.len();
    }
    Ok(outs)
}
