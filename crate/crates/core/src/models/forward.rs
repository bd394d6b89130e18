//! Forward passes of the head, body, projection network and tail.
//!
//! Each network binds its parameters onto a [`Graph`] first; the resulting
//! `*Vars` struct is what the forward function consumes and what gradients
//! are read back from.

use super::params::{bind_all, collect_grads, BLOCK_TENSORS};
use super::{BlockParams, BodyParams, HeadParams, ModelConfig, ModelError, ProjectionParams, SkipReducer, TailParams};
use crate::autodiff::{Graph, Real, Tensor, Var};

pub struct HeadVars {
    vars: Vec<Var>,
}

impl HeadVars {
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        collect_grads(g, &self.vars)
    }
}

impl HeadParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> HeadVars {
        HeadVars { vars: bind_all(self, g, trainable) }
    }
}

pub struct BlockVars {
    vars: Vec<Var>,
}

impl BlockParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BlockVars {
        BlockVars { vars: bind_all(self, g, trainable) }
    }
}

impl BlockVars {
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        collect_grads(g, &self.vars)
    }
}

/// Body tensors placed on a graph. Only the first `blocks.len()` blocks are
/// bound, so deeper blocks are never read.
pub struct BodyVars {
    cls: Option<Var>,
    pos: Var,
    blocks: Vec<BlockVars>,
    total_tensors: usize,
}

impl BodyVars {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Gradients in the canonical order of [`BodyParams`]; unbound tensors
    /// (class token off the class-token path, blocks past the bound depth)
    /// are `None`.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        let mut out = Vec::with_capacity(self.total_tensors);
        out.push(self.cls.and_then(|v| g.grad(v).cloned()));
        out.push(g.grad(self.pos).cloned());
        for b in &self.blocks {
            out.extend(b.grads(g));
        }
        out.resize(self.total_tensors, None);
        out
    }
}

/// What to bind of a body.
#[derive(Clone, Copy, Debug)]
pub struct BodyBinding {
    /// Number of leading blocks to bind.
    pub depth: usize,
    /// Bind the class token.
    pub with_cls: bool,
    /// Blocks and class token receive gradients.
    pub trainable: bool,
    /// Positional embeddings receive gradients.
    pub train_pos: bool,
}

impl BodyParams {
    pub fn bind(&self, g: &mut Graph, how: BodyBinding) -> Result<BodyVars, ModelError> {
        if how.depth > self.blocks.len() {
            return Err(ModelError::Validation(format!(
                "cannot bind {} blocks of a {}-block body",
                how.depth,
                self.blocks.len()
            )));
        }
        let cls = how.with_cls.then(|| {
            if how.trainable {
                g.param(self.cls.clone())
            } else {
                g.constant(self.cls.clone())
            }
        });
        let pos = if how.trainable && how.train_pos {
            g.param(self.pos.clone())
        } else {
            g.constant(self.pos.clone())
        };
        let blocks = self.blocks[..how.depth].iter().map(|b| b.bind(g, how.trainable)).collect();
        Ok(BodyVars { cls, pos, blocks, total_tensors: 2 + self.blocks.len() * BLOCK_TENSORS })
    }
}

pub struct ProjectionVars {
    vars: Vec<Var>,
}

impl ProjectionParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ProjectionVars {
        ProjectionVars { vars: bind_all(self, g, trainable) }
    }
}

impl ProjectionVars {
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        collect_grads(g, &self.vars)
    }
}

pub struct TailVars {
    vars: Vec<Var>,
}

impl TailParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> TailVars {
        TailVars { vars: bind_all(self, g, trainable) }
    }
}

impl TailVars {
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        collect_grads(g, &self.vars)
    }
}

/// Checks `h` is `[B, D, M]` and returns `B`.
fn check_smashed(g: &Graph, cfg: &ModelConfig, h: Var) -> Result<usize, ModelError> {
    let s = g.shape(h);
    if s.len() != 3 || s[1] != cfg.dim || s[2] != cfg.tokens() {
        return Err(ModelError::Shape(format!(
            "smashed representation: expected [B, {}, {}], got {s:?}",
            cfg.dim,
            cfg.tokens()
        )));
    }
    Ok(s[0])
}

/// Client head: `[B, C, H, W] -> [B, D, M]` smashed representation.
pub fn head_forward(g: &mut Graph, cfg: &ModelConfig, head: &HeadVars, x: Var) -> Result<Var, ModelError> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1..] != cfg.image {
        return Err(ModelError::Shape(format!("head input: expected [B, {:?}], got {s:?}", cfg.image)));
    }
    let [conv1_w, conv1_b, proj_w, proj_b] = head.vars[..] else { unreachable!() };
    let y = g.conv2d(x, conv1_w, 1, 1)?;
    let y = g.add_channel(y, conv1_b)?;
    let y = g.gelu(y);
    let y = g.conv2d(y, proj_w, cfg.patch, 0)?;
    let y = g.add_channel(y, proj_b)?;
    Ok(g.reshape(y, &[s[0], cfg.dim, cfg.tokens()])?)
}

/// Pre-norm transformer block on tokens `[B, T, D]`.
pub fn block_forward(g: &mut Graph, cfg: &ModelConfig, block: &BlockVars, tokens: Var) -> Result<Var, ModelError> {
    let s = g.shape(tokens).to_vec();
    let m = cfg.tokens();
    if s.len() != 3 || s[2] != cfg.dim || (s[1] != m && s[1] != m + 1) {
        return Err(ModelError::Shape(format!(
            "block input: expected [B, {m} or {}, {}], got {s:?}",
            m + 1,
            cfg.dim
        )));
    }
    let [ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b] = block.vars[..] else {
        unreachable!()
    };
    let (b, t, d) = (s[0], s[1], s[2]);
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let eps = cfg.ln_eps as Real;

    let n1 = g.layer_norm(tokens, ln1_g, ln1_b, eps)?;
    let qkv = g.linear(n1, qkv_w, qkv_b)?;
    let qkv = g.reshape(qkv, &[b, t, 3, heads, hd])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut split = [tokens; 3];
    for (i, slot) in split.iter_mut().enumerate() {
        let part = g.narrow(qkv, 0, i, 1)?;
        *slot = g.reshape(part, &[b * heads, t, hd])?;
    }
    let [q, k, v] = split;
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (hd as Real).sqrt());
    let attn = g.softmax(scores, 2)?;
    let ctx = g.bmm(attn, v)?;
    let ctx = g.reshape(ctx, &[b, heads, t, hd])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, d])?;
    let attn_out = g.linear(ctx, out_w, out_b)?;
    let x = g.add(tokens, attn_out)?;

    let n2 = g.layer_norm(x, ln2_g, ln2_b, eps)?;
    let hidden = g.linear(n2, fc1_w, fc1_b)?;
    let hidden = g.gelu(hidden);
    let mlp = g.linear(hidden, fc2_w, fc2_b)?;
    Ok(g.add(x, mlp)?)
}

/// Patch tokens with positional embeddings (slots `1..=M`) added: `[B, M, D]`.
fn embed_patches(g: &mut Graph, cfg: &ModelConfig, body: &BodyVars, h: Var) -> Result<Var, ModelError> {
    check_smashed(g, cfg, h)?;
    let tokens = g.permute(h, &[0, 2, 1])?;
    let pos = g.narrow(body.pos, 0, 1, cfg.tokens())?;
    Ok(g.add_broadcast(tokens, pos)?)
}

/// Intermediate features of block `depth` (1-based): `[B, D, M] -> [B, D, M]`.
pub fn body_prefix_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    body: &BodyVars,
    h: Var,
    depth: usize,
) -> Result<Var, ModelError> {
    if depth == 0 || depth > body.depth() {
        return Err(ModelError::Validation(format!(
            "block index {depth} outside 1..={}",
            body.depth()
        )));
    }
    let mut x = embed_patches(g, cfg, body, h)?;
    for block in &body.blocks[..depth] {
        x = block_forward(g, cfg, block, x)?;
    }
    Ok(g.permute(x, &[0, 2, 1])?)
}

/// Final class-token embedding after every bound block: `[B, D, M] -> [B, D]`.
pub fn body_full_cls_forward(g: &mut Graph, cfg: &ModelConfig, body: &BodyVars, h: Var) -> Result<Var, ModelError> {
    let cls = body
        .cls
        .ok_or_else(|| ModelError::Validation("class token was not bound".into()))?;
    if body.depth() == 0 {
        return Err(ModelError::Validation("class-token path needs at least one block".into()));
    }
    let batch = check_smashed(g, cfg, h)?;
    let tokens = g.permute(h, &[0, 2, 1])?;
    let zeros = g.constant(Tensor::zeros([batch, 1, cfg.dim]));
    let cls_rows = g.add_broadcast(zeros, cls)?;
    let x = g.concat(&[cls_rows, tokens], 1)?;
    let mut x = g.add_broadcast(x, body.pos)?;
    for block in &body.blocks {
        x = block_forward(g, cfg, block, x)?;
    }
    let first = g.narrow(x, 1, 0, 1)?;
    Ok(g.reshape(first, &[batch, cfg.dim])?)
}

/// Pseudo class token from intermediate features: `[B, D, M] -> [B, D]`.
pub fn projection_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    proj: &ProjectionVars,
    z: Var,
) -> Result<Var, ModelError> {
    let batch = check_smashed(g, cfg, z)?;
    let (d, m) = (cfg.dim, cfg.tokens());
    let (rows, cols) = cfg.grid();
    let [a_w, a_b, b_w, b_b] = proj.vars[..] else { unreachable!() };
    let grid = g.reshape(z, &[batch, d, rows, cols])?;
    let y = g.conv2d(grid, a_w, 1, cfg.projection_kernel / 2)?;
    let y = g.add_channel(y, a_b)?;
    let y = g.gelu(y);
    let y = g.conv2d(y, b_w, 1, 0)?;
    let y = g.add_channel(y, b_b)?;
    let main = g.reshape(y, &[batch, d])?;
    let skip = g.mean_axis(z, 2)?;
    let skip = match cfg.skip_reducer {
        SkipReducer::Mean => skip,
        SkipReducer::Sum => g.scale(skip, m as Real),
    };
    Ok(g.add(main, skip)?)
}

/// Client tail: `[B, D] -> [B, K]` logits.
pub fn tail_forward(g: &mut Graph, cfg: &ModelConfig, tail: &TailVars, b: Var) -> Result<Var, ModelError> {
    let s = g.shape(b).to_vec();
    if s.len() != 2 || s[1] != cfg.dim {
        return Err(ModelError::Shape(format!("tail input: expected [B, {}], got {s:?}", cfg.dim)));
    }
    let [w, bias] = tail.vars[..] else { unreachable!() };
    Ok(g.linear(b, w, bias)?)
}

/// Number of canonical tensors in a body with `blocks` blocks.
pub fn body_tensor_count(blocks: usize) -> usize {
    2 + blocks * BLOCK_TENSORS
}
