//! Model parameter containers, generic over the leaf type.
//!
//! The same tree shape is instantiated with `Tensor<F>` for storage,
//! `Var` for a tape-bound forward pass, and moment tensors inside the
//! optimizer. `map` converts between leaf types preserving structure;
//! `leaves`/`leaves_mut` flatten to (name, leaf) pairs in one canonical
//! order shared by checkpoints, the optimizer, and gradient checks.

#[derive(Debug, Clone)]
pub struct LinearParams<L> {
    pub weight: L,
    pub bias: L,
}

#[derive(Debug, Clone)]
pub struct PoolParams<L> {
    /// Depthwise conv kernel (C, kh, kw).
    pub weight: L,
    pub bias: L,
}

#[derive(Debug, Clone)]
pub struct AttnParams<L> {
    pub wq: L,
    pub bq: L,
    pub wk: L,
    pub bk: L,
    pub wv: L,
    pub bv: L,
    pub wo: L,
    pub bo: L,
    /// Present only in scaled blocks (learnable Q-pooling).
    pub q_pool: Option<PoolParams<L>>,
}

#[derive(Debug, Clone)]
pub struct MlpParams<L> {
    pub fc1: LinearParams<L>,
    pub fc2: LinearParams<L>,
}

#[derive(Debug, Clone)]
pub struct ViewBlockParams<L> {
    pub ln1_gain: L,
    pub ln1_bias: L,
    pub attn: AttnParams<L>,
    pub ln2_gain: L,
    pub ln2_bias: L,
    pub mlp: MlpParams<L>,
    /// Width-doubling residual projection; scaled blocks only.
    pub shortcut: Option<LinearParams<L>>,
}

#[derive(Debug, Clone)]
pub struct BlockParams<L> {
    pub views: Vec<ViewBlockParams<L>>,
}

#[derive(Debug, Clone)]
pub struct ViewEmbedParams<L> {
    /// Patchifier conv (E, C, kh, kw) and (E).
    pub patch: LinearParams<L>,
    /// Separable positional tables: (E, h), (E, w), (E, t).
    pub pos_h: L,
    pub pos_w: L,
    pub pos_t: L,
}

#[derive(Debug, Clone)]
pub struct ModelParams<L> {
    pub embed: Vec<ViewEmbedParams<L>>,
    pub cls: L,
    pub cls_pos: L,
    pub blocks: Vec<BlockParams<L>>,
    pub final_ln_gain: L,
    pub final_ln_bias: L,
    pub head: LinearParams<L>,
}

impl<L> LinearParams<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> LinearParams<M> {
        LinearParams { weight: f(&self.weight), bias: f(&self.bias) }
    }
}

impl<L> PoolParams<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> PoolParams<M> {
        PoolParams { weight: f(&self.weight), bias: f(&self.bias) }
    }
}

impl<L> AttnParams<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> AttnParams<M> {
        AttnParams {
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            q_pool: self.q_pool.as_ref().map(|p| p.map(f)),
        }
    }
}

impl<L> MlpParams<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> MlpParams<M> {
        MlpParams { fc1: self.fc1.map(f), fc2: self.fc2.map(f) }
    }
}

impl<L> ViewBlockParams<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> ViewBlockParams<M> {
        ViewBlockParams {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            attn: self.attn.map(f),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            mlp: self.mlp.map(f),
            shortcut: self.shortcut.as_ref().map(|s| s.map(f)),
        }
    }
}

impl<L> BlockParams<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> BlockParams<M> {
        BlockParams { views: self.views.iter().map(|v| v.map(f)).collect() }
    }
}

impl<L> ViewEmbedParams<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> ViewEmbedParams<M> {
        ViewEmbedParams {
            patch: self.patch.map(f),
            pos_h: f(&self.pos_h),
            pos_w: f(&self.pos_w),
            pos_t: f(&self.pos_t),
        }
    }
}

impl<L> ModelParams<L> {
    /// Structure-preserving leaf transformation. Visits leaves in the
    /// same order as [`ModelParams::leaves`].
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> ModelParams<M> {
        ModelParams {
            embed: self.embed.iter().map(|v| v.map(f)).collect(),
            cls: f(&self.cls),
            cls_pos: f(&self.cls_pos),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_ln_gain: f(&self.final_ln_gain),
            final_ln_bias: f(&self.final_ln_bias),
            head: self.head.map(f),
        }
    }

    /// Canonical (name, leaf) flattening. The order is the contract for
    /// checkpoints and optimizer state.
    pub fn leaves(&self) -> Vec<(String, &L)> {
        let mut out = Vec::new();
        for (vi, v) in self.embed.iter().enumerate() {
            let p = format!("embed.view{vi}");
            out.push((format!("{p}.patch.weight"), &v.patch.weight));
            out.push((format!("{p}.patch.bias"), &v.patch.bias));
            out.push((format!("{p}.pos_h"), &v.pos_h));
            out.push((format!("{p}.pos_w"), &v.pos_w));
            out.push((format!("{p}.pos_t"), &v.pos_t));
        }
        out.push(("embed.cls".into(), &self.cls));
        out.push(("embed.cls_pos".into(), &self.cls_pos));
        for (bi, b) in self.blocks.iter().enumerate() {
            for (vi, v) in b.views.iter().enumerate() {
                let p = format!("blocks.{:02}.view{vi}", bi + 1);
                out.push((format!("{p}.ln1.gain"), &v.ln1_gain));
                out.push((format!("{p}.ln1.bias"), &v.ln1_bias));
                out.push((format!("{p}.attn.wq"), &v.attn.wq));
                out.push((format!("{p}.attn.bq"), &v.attn.bq));
                out.push((format!("{p}.attn.wk"), &v.attn.wk));
                out.push((format!("{p}.attn.bk"), &v.attn.bk));
                out.push((format!("{p}.attn.wv"), &v.attn.wv));
                out.push((format!("{p}.attn.bv"), &v.attn.bv));
                out.push((format!("{p}.attn.wo"), &v.attn.wo));
                out.push((format!("{p}.attn.bo"), &v.attn.bo));
                if let Some(q) = &v.attn.q_pool {
                    out.push((format!("{p}.attn.q_pool.weight"), &q.weight));
                    out.push((format!("{p}.attn.q_pool.bias"), &q.bias));
                }
                out.push((format!("{p}.ln2.gain"), &v.ln2_gain));
                out.push((format!("{p}.ln2.bias"), &v.ln2_bias));
                out.push((format!("{p}.mlp.fc1.weight"), &v.mlp.fc1.weight));
                out.push((format!("{p}.mlp.fc1.bias"), &v.mlp.fc1.bias));
                out.push((format!("{p}.mlp.fc2.weight"), &v.mlp.fc2.weight));
                out.push((format!("{p}.mlp.fc2.bias"), &v.mlp.fc2.bias));
                if let Some(s) = &v.shortcut {
                    out.push((format!("{p}.shortcut.weight"), &s.weight));
                    out.push((format!("{p}.shortcut.bias"), &s.bias));
                }
            }
        }
        out.push(("final_ln.gain".into(), &self.final_ln_gain));
        out.push(("final_ln.bias".into(), &self.final_ln_bias));
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<(String, &mut L)> {
        let mut out = Vec::new();
        for (vi, v) in self.embed.iter_mut().enumerate() {
            let p = format!("embed.view{vi}");
            out.push((format!("{p}.patch.weight"), &mut v.patch.weight));
            out.push((format!("{p}.patch.bias"), &mut v.patch.bias));
            out.push((format!("{p}.pos_h"), &mut v.pos_h));
            out.push((format!("{p}.pos_w"), &mut v.pos_w));
            out.push((format!("{p}.pos_t"), &mut v.pos_t));
        }
        out.push(("embed.cls".into(), &mut self.cls));
        out.push(("embed.cls_pos".into(), &mut self.cls_pos));
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            for (vi, v) in b.views.iter_mut().enumerate() {
                let p = format!("blocks.{:02}.view{vi}", bi + 1);
                out.push((format!("{p}.ln1.gain"), &mut v.ln1_gain));
                out.push((format!("{p}.ln1.bias"), &mut v.ln1_bias));
                out.push((format!("{p}.attn.wq"), &mut v.attn.wq));
                out.push((format!("{p}.attn.bq"), &mut v.attn.bq));
                out.push((format!("{p}.attn.wk"), &mut v.attn.wk));
                out.push((format!("{p}.attn.bk"), &mut v.attn.bk));
                out.push((format!("{p}.attn.wv"), &mut v.attn.wv));
                out.push((format!("{p}.attn.bv"), &mut v.attn.bv));
                out.push((format!("{p}.attn.wo"), &mut v.attn.wo));
                out.push((format!("{p}.attn.bo"), &mut v.attn.bo));
                if let Some(q) = &mut v.attn.q_pool {
                    out.push((format!("{p}.attn.q_pool.weight"), &mut q.weight));
                    out.push((format!("{p}.attn.q_pool.bias"), &mut q.bias));
                }
                out.push((format!("{p}.ln2.gain"), &mut v.ln2_gain));
                out.push((format!("{p}.ln2.bias"), &mut v.ln2_bias));
                out.push((format!("{p}.mlp.fc1.weight"), &mut v.mlp.fc1.weight));
                out.push((format!("{p}.mlp.fc1.bias"), &mut v.mlp.fc1.bias));
                out.push((format!("{p}.mlp.fc2.weight"), &mut v.mlp.fc2.weight));
                out.push((format!("{p}.mlp.fc2.bias"), &mut v.mlp.fc2.bias));
                if let Some(s) = &mut v.shortcut {
                    out.push((format!("{p}.shortcut.weight"), &mut s.weight));
                    out.push((format!("{p}.shortcut.bias"), &mut s.bias));
                }
            }
        }
        out.push(("final_ln.gain".into(), &mut self.final_ln_gain));
        out.push(("final_ln.bias".into(), &mut self.final_ln_bias));
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }
}
