use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::autodiff::{Graph, Real, Tensor, Var};

/// A named, ordered collection of parameter tensors.
///
/// The order of [`ParamGroup::tensors`] is the canonical order used for
/// gradients, optimizer slots, averaging and checkpoints.
pub trait ParamGroup: Clone {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
    fn names(&self) -> Vec<String>;

    fn len(&self) -> usize {
        self.tensors().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// SHA-256 over shapes and the little-endian bytes of every value.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Structural equality of shapes with `other`.
    fn same_layout(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }
}

/// Places every tensor of `group` on `graph`, in canonical order.
pub fn bind_all<P: ParamGroup>(group: &P, graph: &mut Graph, trainable: bool) -> Vec<Var> {
    group
        .tensors()
        .into_iter()
        .map(|t| if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) })
        .collect()
}

/// Gradients of bound variables, `None` where backward never reached.
pub fn collect_grads(graph: &Graph, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| graph.grad(v).cloned()).collect()
}

/// Weighted average of parameter groups; `weights` need not be normalized.
pub fn weighted_mean<P: ParamGroup>(groups: &[&P], weights: &[f64]) -> P {
    assert!(!groups.is_empty() && groups.len() == weights.len());
    let total: f64 = weights.iter().sum();
    let mut out = groups[0].clone();
    for (i, dst) in out.tensors_mut().into_iter().enumerate() {
        let len = dst.numel();
        let mut acc = vec![0.0 as Real; len];
        for (g, &w) in groups.iter().zip(weights) {
            let src = g.tensors()[i].data();
            let w = (w / total) as Real;
            for (a, s) in acc.iter_mut().zip(src) {
                *a += w * s;
            }
        }
        dst.data_mut().copy_from_slice(&acc);
    }
    out
}

/// Unweighted arithmetic mean: element-wise sum divided by the count.
pub fn mean<P: ParamGroup>(groups: &[&P]) -> P {
    assert!(!groups.is_empty());
    let n = groups.len() as Real;
    let mut out = groups[0].clone();
    for (i, dst) in out.tensors_mut().into_iter().enumerate() {
        for (j, d) in dst.data_mut().iter_mut().enumerate() {
            let sum: Real = groups.iter().map(|g| g.tensors()[i].data()[j]).sum();
            *d = sum / n;
        }
    }
    out
}

// ---- parameter groups -------------------------------------------------------

/// Client head θ: two convolutions producing `D x M` smashed tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

/// One pre-norm transformer block Φ_l.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub attn_out_w: Tensor,
    pub attn_out_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

/// Transformer body Φ = [Φ_1..Φ_L] plus the class token and positional
/// embeddings (slot 0 belongs to the class token).
#[derive(Clone, Debug, PartialEq)]
pub struct BodyParams {
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
}

/// Projection network π: two convolutions with a skip path.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub conv_a_w: Tensor,
    pub conv_a_b: Tensor,
    pub conv_b_w: Tensor,
    pub conv_b_b: Tensor,
}

/// Client tail ψ: linear classifier `D -> K`.
#[derive(Clone, Debug, PartialEq)]
pub struct TailParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// All four parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub head: HeadParams,
    pub body: BodyParams,
    pub projection: ProjectionParams,
    pub tail: TailParams,
}

macro_rules! flat_group {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl ParamGroup for $ty {
            fn tensors(&self) -> Vec<&Tensor> {
                vec![$(&self.$field),+]
            }
            fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                vec![$(&mut self.$field),+]
            }
            fn names(&self) -> Vec<String> {
                vec![$(stringify!($field).to_string()),+]
            }
        }
    };
}

flat_group!(HeadParams { conv1_w, conv1_b, proj_w, proj_b });
flat_group!(BlockParams {
    ln1_g, ln1_b, qkv_w, qkv_b, attn_out_w, attn_out_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b
});
flat_group!(ProjectionParams { conv_a_w, conv_a_b, conv_b_w, conv_b_b });
flat_group!(TailParams { w, b });

/// Tensors per transformer block.
pub const BLOCK_TENSORS: usize = 12;

impl BodyParams {
    /// Index in canonical order of the first tensor of block `j` (0-based).
    pub fn block_offset(j: usize) -> usize {
        2 + j * BLOCK_TENSORS
    }

    /// Block index (0-based) owning canonical tensor `i`, `None` for cls/pos.
    pub fn block_of(i: usize) -> Option<usize> {
        i.checked_sub(2).map(|k| k / BLOCK_TENSORS)
    }
}

impl ParamGroup for BodyParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.cls, &self.pos];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = vec!["cls".to_string(), "pos".to_string()];
        for (j, b) in self.blocks.iter().enumerate() {
            v.extend(b.names().into_iter().map(|n| format!("block{}.{n}", j + 1)));
        }
        v
    }
}

impl ParamGroup for ModelParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.head.tensors();
        v.extend(self.body.tensors());
        v.extend(self.projection.tensors());
        v.extend(self.tail.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.head.tensors_mut();
        v.extend(self.body.tensors_mut());
        v.extend(self.projection.tensors_mut());
        v.extend(self.tail.tensors_mut());
        v
    }

    fn names(&self) -> Vec<String> {
        let groups = [
            ("head", self.head.names()),
            ("body", self.body.names()),
            ("projection", self.projection.names()),
            ("tail", self.tail.names()),
        ];
        groups
            .into_iter()
            .flat_map(|(p, names)| names.into_iter().map(move |n| format!("{p}.{n}")))
            .collect()
    }
}

// ---- initialization ----------------------------------------------------------

const TRANSFORMER_STD: f64 = 0.02;

fn trunc_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v as Real;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for a `[F, C, kh, kw]` kernel.
fn fan_in_uniform<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as Real).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl HeadParams {
    /// All-zero head with the layout implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            conv1_w: Tensor::zeros([cfg.head_channels, cfg.image[0], 3, 3]),
            conv1_b: Tensor::zeros([cfg.head_channels]),
            proj_w: Tensor::zeros([cfg.dim, cfg.head_channels, cfg.patch, cfg.patch]),
            proj_b: Tensor::zeros([cfg.dim]),
        }
    }
}

impl TailParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self { w: Tensor::zeros([cfg.dim, cfg.classes]), b: Tensor::zeros([cfg.classes]) }
    }
}

pub fn init_head<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> HeadParams {
    let [c, _, _] = cfg.image;
    HeadParams {
        conv1_w: fan_in_uniform(&[cfg.head_channels, c, 3, 3], rng),
        conv1_b: Tensor::zeros([cfg.head_channels]),
        proj_w: fan_in_uniform(&[cfg.dim, cfg.head_channels, cfg.patch, cfg.patch], rng),
        proj_b: Tensor::zeros([cfg.dim]),
    }
}

pub fn init_block<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> BlockParams {
    let (d, hidden) = (cfg.dim, cfg.mlp_hidden());
    BlockParams {
        ln1_g: Tensor::ones([d]),
        ln1_b: Tensor::zeros([d]),
        qkv_w: trunc_normal(&[d, 3 * d], TRANSFORMER_STD, rng),
        qkv_b: Tensor::zeros([3 * d]),
        attn_out_w: trunc_normal(&[d, d], TRANSFORMER_STD, rng),
        attn_out_b: Tensor::zeros([d]),
        ln2_g: Tensor::ones([d]),
        ln2_b: Tensor::zeros([d]),
        fc1_w: trunc_normal(&[d, hidden], TRANSFORMER_STD, rng),
        fc1_b: Tensor::zeros([hidden]),
        fc2_w: trunc_normal(&[hidden, d], TRANSFORMER_STD, rng),
        fc2_b: Tensor::zeros([d]),
    }
}

pub fn init_body<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> BodyParams {
    let d = cfg.dim;
    let cls = trunc_normal(&[1, d], TRANSFORMER_STD, rng);
    let pos = trunc_normal(&[cfg.tokens() + 1, d], TRANSFORMER_STD, rng);
    let blocks = (0..cfg.materialized_blocks()).map(|_| init_block(cfg, rng)).collect();
    BodyParams { cls, pos, blocks }
}

pub fn init_projection<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ProjectionParams {
    let (d, k) = (cfg.dim, cfg.projection_kernel);
    let (rows, cols) = cfg.grid();
    ProjectionParams {
        conv_a_w: fan_in_uniform(&[d, d, k, k], rng),
        conv_a_b: Tensor::zeros([d]),
        conv_b_w: fan_in_uniform(&[d, d, rows, cols], rng),
        conv_b_b: Tensor::zeros([d]),
    }
}

pub fn init_tail<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> TailParams {
    TailParams {
        w: trunc_normal(&[cfg.dim, cfg.classes], TRANSFORMER_STD, rng),
        b: Tensor::zeros([cfg.classes]),
    }
}

/// Deterministic initialization of (θ, Φ, π, ψ) from one seed.
///
/// Transformer weights (blocks, class token, positional embeddings, tail)
/// are drawn from a normal with std 0.02 truncated at two standard
/// deviations; convolution kernels from a fan-in scaled uniform; every bias
/// is zero and every layer-norm gain is one.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = init_head(cfg, &mut rng);
    let body = init_body(cfg, &mut rng);
    let projection = init_projection(cfg, &mut rng);
    let tail = init_tail(cfg, &mut rng);
    ModelParams { head, body, projection, tail }
}
