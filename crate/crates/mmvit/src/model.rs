//! The network: stage schedule, parameter initialization, forward pass,
//! and shape/parameter/FLOP introspection.
//!
//! A stage `s` runs `self_counts[s]` self-attention blocks at width
//! E·2^s, then (in every stage but the last) one cross-attention block
//! and one scaled self-attention block. The scaled block halves each
//! grid axis and doubles the channel width, so four stages with
//! n=[0,0,9,1] give the 16-layer schedule with cross at 1/3/14 and
//! scaled at 2/4/15.

use crate::attention::{
    avg_pool_tokens, cross_pooling_attention, pooling_attention, PoolGeom, TokenView,
};
use crate::config::{Config, ConfigError};
use crate::embed::embed_view;
use crate::params::{
    AttnParams, BlockParams, LinearParams, MlpParams, ModelParams, PoolParams, ViewBlockParams,
    ViewEmbedParams,
};
use crate::scalar::Scalar;
use crate::tensor::{Result as TensorResult, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Layer-norm epsilon used everywhere in the network.
pub const LN_EPS: f64 = 1e-6;
/// Std of the truncated-normal initializer (resampled beyond ±2σ).
pub const INIT_STD: f64 = 0.02;

// ── schedule ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    SelfAttention,
    CrossAttention,
    ScaledSelfAttention,
}

impl BlockKind {
    pub fn label(self) -> &'static str {
        match self {
            BlockKind::SelfAttention => "self",
            BlockKind::CrossAttention => "cross",
            BlockKind::ScaledSelfAttention => "scaled",
        }
    }

    pub fn is_scaled(self) -> bool {
        matches!(self, BlockKind::ScaledSelfAttention)
    }
}

/// One layer of the schedule. `index` is 1-based, matching the
/// cross@{1,3,14} / scaled@{2,4,15} numbering.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub index: usize,
    pub kind: BlockKind,
    pub stage: usize,
    pub channels_in: usize,
    pub channels_out: usize,
    pub heads: usize,
    pub grids_in: Vec<(usize, usize)>,
    pub grids_out: Vec<(usize, usize)>,
}

impl LayerPlan {
    /// Tokens entering this layer for view `v`, CLS included.
    pub fn tokens_in(&self, v: usize) -> usize {
        self.grids_in[v].0 * self.grids_in[v].1 + usize::from(v == 0)
    }

    pub fn tokens_out(&self, v: usize) -> usize {
        self.grids_out[v].0 * self.grids_out[v].1 + usize::from(v == 0)
    }
}

#[derive(Debug, Clone)]
pub struct Schedule {
    pub layers: Vec<LayerPlan>,
    /// Per-view grids right after patchification.
    pub embed_grids: Vec<(usize, usize)>,
    /// Blocks per stage (self count plus the trailing cross/scaled pair).
    pub stage_sizes: Vec<usize>,
    /// Channel width entering the classification head.
    pub final_width: usize,
}

pub fn build_schedule(cfg: &Config) -> Result<Schedule, ConfigError> {
    cfg.validate()?;
    let m = &cfg.model;
    let stages = cfg.num_stages();
    let embed_grids: Vec<(usize, usize)> = m
        .views
        .iter()
        .map(|v| (m.input.1 / v.stride.0, m.input.2 / v.stride.1))
        .collect();
    let mut grids = embed_grids.clone();
    let mut width = m.embed_dim;
    let mut layers = Vec::new();
    let mut stage_sizes = Vec::with_capacity(stages);
    let mut index = 1;
    let halving = PoolGeom::halving();
    for s in 0..stages {
        let heads = m.heads[s];
        let mut count = 0;
        for _ in 0..m.self_counts[s] {
            layers.push(LayerPlan {
                index,
                kind: BlockKind::SelfAttention,
                stage: s,
                channels_in: width,
                channels_out: width,
                heads,
                grids_in: grids.clone(),
                grids_out: grids.clone(),
            });
            index += 1;
            count += 1;
        }
        if s + 1 < stages {
            layers.push(LayerPlan {
                index,
                kind: BlockKind::CrossAttention,
                stage: s,
                channels_in: width,
                channels_out: width,
                heads,
                grids_in: grids.clone(),
                grids_out: grids.clone(),
            });
            index += 1;
            let next: Vec<(usize, usize)> = grids.iter().map(|g| halving.out_grid(*g)).collect();
            layers.push(LayerPlan {
                index,
                kind: BlockKind::ScaledSelfAttention,
                stage: s,
                channels_in: width,
                channels_out: width * 2,
                heads,
                grids_in: grids.clone(),
                grids_out: next.clone(),
            });
            index += 1;
            grids = next;
            width *= 2;
            count += 2;
        }
        stage_sizes.push(count);
    }
    Ok(Schedule { layers, embed_grids, stage_sizes, final_width: width })
}

// ── parameters ───────────────────────────────────────────────────────

/// Builds the full parameter tree in one canonical order, with the leaf
/// constructor chosen per role. `param_shapes` and `init_params` share
/// this so names, shapes, and ordering can never drift apart.
///
/// `normal` covers the fixed-scale leaves (patchifiers, positional
/// tables, head); `scaled` covers the projections inside blocks, whose
/// init must track fan-in/fan-out or narrow presets train poorly.
fn build_tree<L>(
    cfg: &Config,
    sched: &Schedule,
    normal: &mut dyn FnMut(Vec<usize>) -> L,
    scaled: &mut dyn FnMut(Vec<usize>) -> L,
    zeros: &mut dyn FnMut(Vec<usize>) -> L,
    ones: &mut dyn FnMut(Vec<usize>) -> L,
) -> ModelParams<L> {
    let m = &cfg.model;
    let e = m.embed_dim;
    let embed = m
        .views
        .iter()
        .zip(&sched.embed_grids)
        .map(|(v, g)| ViewEmbedParams {
            patch: LinearParams {
                weight: normal(vec![e, m.input.0, v.kernel.0, v.kernel.1]),
                bias: zeros(vec![e]),
            },
            pos_h: normal(vec![e, g.0]),
            pos_w: normal(vec![e, g.1]),
            pos_t: normal(vec![e, 1]),
        })
        .collect();
    let cls = zeros(vec![1, e]);
    let cls_pos = normal(vec![1, e]);
    let blocks = sched
        .layers
        .iter()
        .map(|lp| {
            let (ei, eo) = (lp.channels_in, lp.channels_out);
            let pools = lp.kind.is_scaled();
            BlockParams {
                views: (0..m.views.len())
                    .map(|_| ViewBlockParams {
                        ln1_gain: ones(vec![ei]),
                        ln1_bias: zeros(vec![ei]),
                        attn: AttnParams {
                            wq: scaled(vec![ei, ei]),
                            bq: zeros(vec![ei]),
                            wk: scaled(vec![ei, ei]),
                            bk: zeros(vec![ei]),
                            wv: scaled(vec![ei, ei]),
                            bv: zeros(vec![ei]),
                            wo: scaled(vec![ei, ei]),
                            bo: zeros(vec![ei]),
                            q_pool: pools.then(|| PoolParams {
                                weight: scaled(vec![ei, 3, 3]),
                                bias: zeros(vec![ei]),
                            }),
                        },
                        ln2_gain: ones(vec![ei]),
                        ln2_bias: zeros(vec![ei]),
                        mlp: MlpParams {
                            fc1: LinearParams {
                                weight: scaled(vec![ei, 4 * ei]),
                                bias: zeros(vec![4 * ei]),
                            },
                            fc2: LinearParams {
                                weight: scaled(vec![4 * ei, eo]),
                                bias: zeros(vec![eo]),
                            },
                        },
                        shortcut: pools.then(|| LinearParams {
                            weight: scaled(vec![ei, eo]),
                            bias: zeros(vec![eo]),
                        }),
                    })
                    .collect(),
            }
        })
        .collect();
    let fw = sched.final_width;
    ModelParams {
        embed,
        cls,
        cls_pos,
        blocks,
        final_ln_gain: ones(vec![fw]),
        final_ln_bias: zeros(vec![fw]),
        head: LinearParams {
            weight: normal(vec![fw, m.num_classes]),
            bias: zeros(vec![m.num_classes]),
        },
    }
}

/// Every parameter's shape, without allocating any data.
pub fn param_shapes(cfg: &Config, sched: &Schedule) -> ModelParams<Vec<usize>> {
    build_tree(cfg, sched, &mut |s| s, &mut |s| s, &mut |s| s, &mut |s| s)
}

/// Xavier std for a projection: rank-2 weights are (fan_in, fan_out);
/// rank-3 pooling kernels are depthwise, so both fans equal the kernel
/// area.
pub fn xavier_std(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match *shape {
        [fi, fo] => (fi, fo),
        [_, kh, kw] => (kh * kw, kh * kw),
        _ => unreachable!("projection weights are rank 2 or 3"),
    };
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fresh parameters: truncated normal for weights (std 0.02 for
/// patchifiers, positional tables, and the head; Xavier-scaled for the
/// projections inside blocks), zeros for CLS and biases, ones for LN
/// gains. Everything is truncated at 2 std.
pub fn init_params<F: Scalar>(cfg: &Config, sched: &Schedule, seed: u64) -> ModelParams<Tensor<F>> {
    let rng = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(seed));
    let draw = |std: f64, shape: Vec<usize>| {
        let mut rng = rng.borrow_mut();
        let dist = Normal::new(0.0f64, std).expect("valid normal");
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut z = dist.sample(&mut *rng);
            while z.abs() > 2.0 * std {
                z = dist.sample(&mut *rng);
            }
            data.push(F::from_f64(z));
        }
        Tensor::from_vec(shape, data).expect("shape matches data").requires_grad(true)
    };
    let mut normal = |shape: Vec<usize>| draw(INIT_STD, shape);
    let mut scaled = |shape: Vec<usize>| draw(xavier_std(&shape), shape);
    let mut zeros = |shape: Vec<usize>| Tensor::zeros(shape).requires_grad(true);
    let mut ones = |shape: Vec<usize>| Tensor::full(shape, F::one()).requires_grad(true);
    build_tree(cfg, sched, &mut normal, &mut scaled, &mut zeros, &mut ones)
}

// ── introspection ────────────────────────────────────────────────────

pub fn count_params(cfg: &Config) -> Result<u64, ConfigError> {
    let sched = build_schedule(cfg)?;
    let shapes = param_shapes(cfg, &sched);
    Ok(shapes.leaves().iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum())
}

/// FLOPs of one forward pass, counted as 2·madds over the conv, linear,
/// and attention ops at the scheduled shapes.
pub fn estimate_flops(cfg: &Config) -> Result<u64, ConfigError> {
    let sched = build_schedule(cfg)?;
    let m = &cfg.model;
    let mut madds: u128 = 0;
    for (v, g) in m.views.iter().zip(&sched.embed_grids) {
        madds += (g.0 * g.1 * m.embed_dim * m.input.0 * v.kernel.0 * v.kernel.1) as u128;
    }
    for lp in &sched.layers {
        let e = lp.channels_in as u128;
        let eo = lp.channels_out as u128;
        let lk_joint: u128 = (0..m.views.len()).map(|v| lp.tokens_in(v) as u128).sum();
        for v in 0..m.views.len() {
            let li = lp.tokens_in(v) as u128;
            let lq = lp.tokens_out(v) as u128;
            madds += 3 * li * e * e; // Q/K/V projections
            if lp.kind.is_scaled() {
                let spatial_out = (lp.grids_out[v].0 * lp.grids_out[v].1) as u128;
                madds += spatial_out * e * 9; // depthwise Q-pool, kernel 3×3
            }
            let lk = if lp.kind == BlockKind::CrossAttention { lk_joint } else { li };
            madds += 2 * lq * lk * e; // scores + context
            madds += lq * e * e; // output projection
            madds += lq * e * 4 * e; // MLP fc1
            madds += lq * 4 * e * eo; // MLP fc2
            if lp.kind.is_scaled() {
                madds += lq * e * eo; // width-doubling shortcut
            }
        }
    }
    madds += (sched.final_width * m.num_classes) as u128;
    Ok(u64::try_from(2 * madds).unwrap_or(u64::MAX))
}

// ── forward ──────────────────────────────────────────────────────────

/// Eval runs the deterministic path; Train adds dropout (when the
/// configured rate is nonzero) driven by the supplied RNG.
pub enum Mode<'a> {
    Eval,
    Train { dropout_rng: &'a mut ChaCha8Rng },
}

struct DropCtx<'a> {
    p: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl DropCtx<'_> {
    fn apply<F: Scalar>(&mut self, tape: &Tape<F>, x: Var) -> TensorResult<Var> {
        let p = self.p;
        let Some(rng) = self.rng.as_deref_mut() else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = tape.shape_of(x);
        let keep = 1.0 - p;
        let scale = F::from_f64(1.0 / keep);
        let n: usize = shape.iter().product();
        let mask: Vec<F> =
            (0..n).map(|_| if rng.gen::<f64>() < keep { scale } else { F::zero() }).collect();
        let mask = Tensor::from_vec(shape, mask)?;
        tape.mul_const(x, &mask)
    }
}

struct ViewState {
    tokens: Var,
    grid: (usize, usize),
    has_cls: bool,
}

/// z = shortcut(y) + MLP(LN2(y)); the shortcut is identity unless the
/// block doubles its width.
fn mlp_residual<F: Scalar>(
    tape: &Tape<F>,
    y: Var,
    vp: &ViewBlockParams<Var>,
    shortcut: Option<&LinearParams<Var>>,
    drop: &mut DropCtx,
) -> TensorResult<Var> {
    let ln2 = tape.layernorm(y, vp.ln2_gain, vp.ln2_bias, LN_EPS)?;
    let h = tape.linear(ln2, vp.mlp.fc1.weight, vp.mlp.fc1.bias)?;
    let h = tape.gelu(h)?;
    let h = drop.apply(tape, h)?;
    let out = tape.linear(h, vp.mlp.fc2.weight, vp.mlp.fc2.bias)?;
    let out = drop.apply(tape, out)?;
    let base = match shortcut {
        Some(sc) => tape.linear(y, sc.weight, sc.bias)?,
        None => y,
    };
    tape.add(base, out)
}

#[derive(Debug)]
pub struct Model<F: Scalar> {
    pub cfg: Config,
    pub schedule: Schedule,
    pub params: ModelParams<Tensor<F>>,
}

impl<F: Scalar> Model<F> {
    pub fn init(cfg: &Config, seed: u64) -> Result<Self, ConfigError> {
        let schedule = build_schedule(cfg)?;
        let params = init_params(cfg, &schedule, seed);
        Ok(Model { cfg: cfg.clone(), schedule, params })
    }

    /// Wrap existing parameters, verifying every leaf against the
    /// schedule's expected shape.
    pub fn from_params(cfg: &Config, params: ModelParams<Tensor<F>>) -> Result<Self, ConfigError> {
        let schedule = build_schedule(cfg)?;
        let want = param_shapes(cfg, &schedule);
        let got = params.leaves();
        let expect = want.leaves();
        if got.len() != expect.len() {
            return Err(ConfigError::Invalid {
                msg: format!("{} parameters, schedule expects {}", got.len(), expect.len()),
            });
        }
        for ((name, t), (_, shape)) in got.iter().zip(&expect) {
            if t.shape() != shape.as_slice() {
                return Err(ConfigError::Invalid {
                    msg: format!(
                        "parameter `{name}`: shape {:?}, schedule expects {:?}",
                        t.shape(),
                        shape
                    ),
                });
            }
        }
        Ok(Model { cfg: cfg.clone(), schedule, params })
    }

    /// Put every parameter on the tape, preserving tree structure.
    pub fn register(&self, tape: &Tape<F>) -> ModelParams<Var> {
        self.params.map(&mut |t| tape.leaf(t))
    }

    /// One sample (C, H, W) → logits (1, num_classes) on the tape.
    pub fn forward(
        &self,
        tape: &Tape<F>,
        pv: &ModelParams<Var>,
        x: &Tensor<F>,
        mode: &mut Mode,
    ) -> TensorResult<Var> {
        let m = &self.cfg.model;
        if x.shape() != [m.input.0, m.input.1, m.input.2] {
            return Err(TensorError::Invalid {
                op: "forward",
                msg: format!("input shape {:?}, config wants {:?}", x.shape(), m.input),
            });
        }
        let mut drop = DropCtx {
            p: f64::from(m.dropout),
            rng: match mode {
                Mode::Train { dropout_rng } => Some(&mut **dropout_rng),
                Mode::Eval => None,
            },
        };
        let xv = tape.leaf(x);
        let mut views = Vec::with_capacity(m.views.len());
        for (vi, (spec, ep)) in m.views.iter().zip(&pv.embed).enumerate() {
            let (mut tokens, grid) = embed_view(tape, xv, ep, spec)?;
            let has_cls = vi == 0;
            if has_cls {
                let cls = tape.add(pv.cls, pv.cls_pos)?;
                tokens = tape.concat(&[cls, tokens], 0)?;
            }
            let tokens = drop.apply(tape, tokens)?;
            views.push(ViewState { tokens, grid, has_cls });
        }
        for (lp, bp) in self.schedule.layers.iter().zip(&pv.blocks) {
            apply_block(tape, lp, bp, &mut views, &mut drop).map_err(|e| {
                TensorError::Invalid {
                    op: "forward",
                    msg: format!("layer {} ({}): {e}", lp.index, lp.kind.label()),
                }
            })?;
        }
        let cls_row = tape.narrow(views[0].tokens, 0, 0, 1)?;
        let ln = tape.layernorm(cls_row, pv.final_ln_gain, pv.final_ln_bias, LN_EPS)?;
        tape.linear(ln, pv.head.weight, pv.head.bias)
    }

    /// Stack per-sample logits into (B, num_classes).
    pub fn forward_batch(
        &self,
        tape: &Tape<F>,
        pv: &ModelParams<Var>,
        xs: &[Tensor<F>],
        mode: &mut Mode,
    ) -> TensorResult<Var> {
        if xs.is_empty() {
            return Err(TensorError::Invalid { op: "forward_batch", msg: "empty batch".into() });
        }
        let rows: Vec<Var> = xs
            .iter()
            .map(|x| self.forward(tape, pv, x, mode))
            .collect::<TensorResult<Vec<_>>>()?;
        tape.concat(&rows, 0)
    }

    /// Eval-mode logits for one sample, on a throwaway tape.
    pub fn logits(&self, x: &Tensor<F>) -> TensorResult<Tensor<F>> {
        let tape = Tape::new();
        let pv = self.register(&tape);
        let out = self.forward(&tape, &pv, x, &mut Mode::Eval)?;
        let v = tape.value(out);
        Tensor::from_vec(vec![self.cfg.model.num_classes], v.data().to_vec())
    }

    pub fn count_params(&self) -> u64 {
        self.params.leaves().iter().map(|(_, t)| t.numel() as u64).sum()
    }
}

fn apply_block<F: Scalar>(
    tape: &Tape<F>,
    lp: &LayerPlan,
    bp: &BlockParams<Var>,
    views: &mut [ViewState],
    drop: &mut DropCtx,
) -> TensorResult<()> {
    match lp.kind {
        BlockKind::SelfAttention => {
            for (st, vp) in views.iter_mut().zip(&bp.views) {
                let ln1 = tape.layernorm(st.tokens, vp.ln1_gain, vp.ln1_bias, LN_EPS)?;
                let tv = TokenView { tokens: ln1, grid: st.grid, has_cls: st.has_cls };
                let (a, _) = pooling_attention(tape, &tv, &vp.attn, lp.heads, None)?;
                let a = drop.apply(tape, a)?;
                let y = tape.add(st.tokens, a)?;
                st.tokens = mlp_residual(tape, y, vp, None, drop)?;
            }
        }
        BlockKind::CrossAttention => {
            let mut tvs = Vec::with_capacity(views.len());
            for (st, vp) in views.iter().zip(&bp.views) {
                let ln1 = tape.layernorm(st.tokens, vp.ln1_gain, vp.ln1_bias, LN_EPS)?;
                tvs.push(TokenView { tokens: ln1, grid: st.grid, has_cls: st.has_cls });
            }
            let ps: Vec<&AttnParams<Var>> = bp.views.iter().map(|v| &v.attn).collect();
            let outs = cross_pooling_attention(tape, &tvs, &ps, lp.heads)?;
            for ((st, vp), a) in views.iter_mut().zip(&bp.views).zip(outs) {
                let a = drop.apply(tape, a)?;
                let y = tape.add(st.tokens, a)?;
                st.tokens = mlp_residual(tape, y, vp, None, drop)?;
            }
        }
        BlockKind::ScaledSelfAttention => {
            let geom = PoolGeom::halving();
            for (st, vp) in views.iter_mut().zip(&bp.views) {
                let ln1 = tape.layernorm(st.tokens, vp.ln1_gain, vp.ln1_bias, LN_EPS)?;
                let tv = TokenView { tokens: ln1, grid: st.grid, has_cls: st.has_cls };
                let (a, new_grid) =
                    pooling_attention(tape, &tv, &vp.attn, lp.heads, Some(&geom))?;
                let a = drop.apply(tape, a)?;
                let (pooled, res_grid) =
                    avg_pool_tokens(tape, st.tokens, st.grid, st.has_cls, &geom)?;
                debug_assert_eq!(new_grid, res_grid);
                let y = tape.add(pooled, a)?;
                let shortcut = vp.shortcut.as_ref().ok_or_else(|| TensorError::Invalid {
                    op: "scaled_block",
                    msg: "missing width-doubling shortcut parameters".into(),
                })?;
                st.tokens = mlp_residual(tape, y, vp, Some(shortcut), drop)?;
                st.grid = new_grid;
            }
        }
    }
    Ok(())
}
