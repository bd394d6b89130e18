use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Graph, Real, Tensor};

fn desk() -> ModelConfig {
    ModelConfig::desk()
}

fn full_binding(depth: usize, with_cls: bool) -> BodyBinding {
    BodyBinding { depth, with_cls, trainable: true, train_pos: true }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn head_desk_shape_and_empty_batch() {
    let cfg = desk();
    let p = init_params(&cfg, 0);
    let mut g = Graph::new();
    let hv = p.head.bind(&mut g, true);
    let x = g.constant(random(&[3, 1, 16, 16], 1));
    let h = head_forward(&mut g, &cfg, &hv, x).unwrap();
    assert_eq!(g.shape(h), &[3, 32, 16]);

    let empty = g.constant(Tensor::zeros([0, 1, 16, 16]));
    let h = head_forward(&mut g, &cfg, &hv, empty).unwrap();
    assert_eq!(g.shape(h), &[0, 32, 16]);

    let wrong = g.constant(Tensor::zeros([1, 3, 16, 16]));
    assert!(matches!(head_forward(&mut g, &cfg, &hv, wrong), Err(ModelError::Shape(_))));
}

#[test]
fn vit_b16_scale_shapes() {
    // Narrow hidden widths keep this cheap; the token geometry is what is checked.
    let cfg = ModelConfig { head_channels: 2, projection_kernel: 1, ..ModelConfig::vit_b16(7) };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let head = init_head(&cfg, &mut rng);
    let proj = init_projection(&cfg, &mut rng);
    let mut g = Graph::new();
    let hv = head.bind(&mut g, false);
    let x = g.constant(Tensor::zeros([1, 3, 224, 224]));
    let h = head_forward(&mut g, &cfg, &hv, x).unwrap();
    assert_eq!(g.shape(h), &[1, 768, 196]);
    let pv = proj.bind(&mut g, false);
    let b = projection_forward(&mut g, &cfg, &pv, h).unwrap();
    assert_eq!(g.shape(b), &[1, 768]);
}

#[test]
fn block_preserves_shape_for_patch_and_cls_lengths() {
    let cfg = desk();
    let p = init_params(&cfg, 0);
    let mut g = Graph::new();
    let bv = p.body.blocks[0].bind(&mut g, true);
    for t in [16, 17] {
        let x = g.constant(random(&[2, t, 32], t as u64));
        let y = block_forward(&mut g, &cfg, &bv, x).unwrap();
        assert_eq!(g.shape(y), &[2, t, 32]);
    }
    let bad = g.constant(Tensor::zeros([2, 15, 32]));
    assert!(block_forward(&mut g, &cfg, &bv, bad).is_err());
}

#[test]
fn block_with_zero_output_projections_is_identity() {
    let cfg = desk();
    let mut block = init_params(&cfg, 0).body.blocks[0].clone();
    block.attn_out_w = Tensor::zeros(block.attn_out_w.shape().to_vec());
    block.fc2_w = Tensor::zeros(block.fc2_w.shape().to_vec());
    let mut g = Graph::new();
    let bv = block.bind(&mut g, false);
    let x = g.constant(random(&[2, 16, 32], 9));
    let y = block_forward(&mut g, &cfg, &bv, x).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn prefix_of_one_is_first_block_on_embedded_tokens() {
    let cfg = desk();
    let p = init_params(&cfg, 4);
    let h = random(&[2, 32, 16], 5);

    let mut g = Graph::new();
    let body = p.body.bind(&mut g, full_binding(1, false)).unwrap();
    let hv = g.constant(h.clone());
    let z = body_prefix_forward(&mut g, &cfg, &body, hv, 1).unwrap();

    // Manual embedding: transpose then add positional slots 1..=M.
    let mut g2 = Graph::new();
    let block = p.body.blocks[0].bind(&mut g2, false);
    let hv2 = g2.constant(h);
    let tokens = g2.permute(hv2, &[0, 2, 1]).unwrap();
    let pos = g2.constant(p.body.pos.narrow(0, 1, 16).unwrap());
    let x = g2.add_broadcast(tokens, pos).unwrap();
    let y = block_forward(&mut g2, &cfg, &block, x).unwrap();
    let y = g2.permute(y, &[0, 2, 1]).unwrap();
    assert_eq!(g.value(z), g2.value(y));
}

#[test]
fn prefix_composition_matches_full_depth() {
    let cfg = desk();
    let p = init_params(&cfg, 6);
    let h = random(&[2, 32, 16], 7);
    let mut g = Graph::new();
    let body = p.body.bind(&mut g, full_binding(4, false)).unwrap();
    let hv = g.constant(h);
    let full = body_prefix_forward(&mut g, &cfg, &body, hv, 4).unwrap();
    for l in 1..4 {
        let z = body_prefix_forward(&mut g, &cfg, &body, hv, l).unwrap();
        let mut x = g.permute(z, &[0, 2, 1]).unwrap();
        for j in l..4 {
            let bv = p.body.blocks[j].bind(&mut g, false);
            x = block_forward(&mut g, &cfg, &bv, x).unwrap();
        }
        let x = g.permute(x, &[0, 2, 1]).unwrap();
        assert!(g.value(x).max_abs_diff(g.value(full)) <= 1e-12);
    }
}

#[test]
fn prefix_rejects_out_of_range_depth() {
    let cfg = desk();
    let p = init_params(&cfg, 0);
    let mut g = Graph::new();
    let body = p.body.bind(&mut g, full_binding(4, false)).unwrap();
    let h = g.constant(Tensor::zeros([1, 32, 16]));
    assert!(matches!(body_prefix_forward(&mut g, &cfg, &body, h, 0), Err(ModelError::Validation(_))));
    assert!(matches!(body_prefix_forward(&mut g, &cfg, &body, h, 5), Err(ModelError::Validation(_))));
}

#[test]
fn prefix_never_reads_deeper_blocks() {
    let cfg = desk();
    let mut p = init_params(&cfg, 0);
    for block in &mut p.body.blocks[2..] {
        for t in block.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = Real::NAN);
        }
    }
    let mut g = Graph::new();
    let body = p.body.bind(&mut g, full_binding(2, false)).unwrap();
    let h = g.constant(random(&[2, 32, 16], 1));
    let z = body_prefix_forward(&mut g, &cfg, &body, h, 2).unwrap();
    assert!(g.value(z).is_finite());
}

#[test]
fn full_cls_path_shape_grad_and_position_sensitivity() {
    let cfg = desk();
    let p = init_params(&cfg, 2);
    let h = random(&[2, 32, 16], 3);
    let mut g = Graph::new();
    let body = p.body.bind(&mut g, full_binding(4, true)).unwrap();
    let tail = p.tail.bind(&mut g, true);
    let hv = g.constant(h.clone());
    let b = body_full_cls_forward(&mut g, &cfg, &body, hv).unwrap();
    assert_eq!(g.shape(b), &[2, 32]);
    let logits = tail_forward(&mut g, &cfg, &tail, b).unwrap();
    let loss = g.cross_entropy(logits, &[0, 3]).unwrap();
    g.backward(loss).unwrap();
    let grads = body.grads(&g);
    let cls_grad = grads[0].as_ref().expect("class token gradient");
    assert!(cls_grad.data().iter().any(|&v| v != 0.0));

    // Reverse patch order within each sample.
    let mut flipped = h.clone();
    for b in 0..2 {
        for d in 0..32 {
            for m in 0..16 {
                flipped.data_mut()[(b * 32 + d) * 16 + m] = h.data()[(b * 32 + d) * 16 + (15 - m)];
            }
        }
    }
    let hf = g.constant(flipped);
    let bf = body_full_cls_forward(&mut g, &cfg, &body, hf).unwrap();
    assert!(g.value(bf).max_abs_diff(g.value(b)) > 1e-9);
}

#[test]
fn projection_with_zero_convs_is_skip_reduction() {
    let cfg = desk();
    let mut proj = init_params(&cfg, 0).projection;
    proj.conv_a_w = Tensor::zeros(proj.conv_a_w.shape().to_vec());
    proj.conv_b_w = Tensor::zeros(proj.conv_b_w.shape().to_vec());
    let z = random(&[2, 32, 16], 8);
    let mut g = Graph::new();
    let pv = proj.bind(&mut g, false);
    let zv = g.constant(z.clone());
    let b = projection_forward(&mut g, &cfg, &pv, zv).unwrap();
    let v = g.value(b).data();
    for s in 0..2 {
        for d in 0..32 {
            let row = &z.data()[(s * 32 + d) * 16..(s * 32 + d + 1) * 16];
            let mean: Real = row.iter().sum::<Real>() / 16.0;
            assert!((v[s * 32 + d] - mean).abs() < 1e-14);
        }
    }
}

#[test]
fn projection_is_per_sample() {
    let cfg = desk();
    let proj = init_params(&cfg, 1).projection;
    let z = random(&[3, 32, 16], 2);
    let perm = [2, 0, 1];
    let mut g = Graph::new();
    let pv = proj.bind(&mut g, false);
    let zv = g.constant(z.clone());
    let b = projection_forward(&mut g, &cfg, &pv, zv).unwrap();
    let zp = g.constant(z.select_rows(&perm));
    let bp = projection_forward(&mut g, &cfg, &pv, zp).unwrap();
    assert_eq!(g.value(bp), &g.value(b).select_rows(&perm));
}

#[test]
fn tail_examples() {
    let cfg = desk();
    let mut g = Graph::new();
    let zero = TailParams { w: Tensor::zeros([32, 4]), b: Tensor::zeros([4]) };
    let tv = zero.bind(&mut g, false);
    let b = g.constant(random(&[5, 32], 1));
    let logits = tail_forward(&mut g, &cfg, &tv, b).unwrap();
    assert_eq!(g.shape(logits), &[5, 4]);
    assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
    let probs = g.softmax(logits, 1).unwrap();
    assert!(g.value(probs).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let square = ModelConfig { dim: 4, heads: 1, ..desk() };
    let mut eye = Tensor::zeros([4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let ident = TailParams { w: eye, b: Tensor::zeros([4]) };
    let tv = ident.bind(&mut g, false);
    let b = g.constant(random(&[2, 4], 2));
    let logits = tail_forward(&mut g, &square, &tv, b).unwrap();
    assert_eq!(g.value(logits), g.value(b));

    let bad = g.constant(Tensor::zeros([2, 5]));
    assert!(tail_forward(&mut g, &square, &tv, bad).is_err());
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = desk();
    let a = init_params(&cfg, 0);
    let b = init_params(&cfg, 0);
    let c = init_params(&cfg, 1);
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
}

#[test]
fn init_biases_are_zero() {
    let p = init_params(&desk(), 11);
    for (name, t) in p.names().iter().zip(p.tensors()) {
        if name.ends_with("_b") && !name.contains("ln") || name.ends_with(".b") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert_eq!(p.names().len(), p.tensors().len());
}

#[test]
fn trimmed_body_holds_only_sampled_blocks() {
    let cfg = ModelConfig { trim_unsampled_blocks: true, ..desk() };
    let p = init_params(&cfg, 0);
    assert_eq!(p.body.blocks.len(), cfg.sample_limit);
    assert_eq!(p.body.len(), body_tensor_count(cfg.sample_limit));
}

#[test]
fn mean_of_groups() {
    let a = TailParams { w: Tensor::full([2, 2], 1.0), b: Tensor::full([2], -1.0) };
    let b = TailParams { w: Tensor::full([2, 2], 3.0), b: Tensor::full([2], 1.0) };
    let m = mean(&[&a, &b]);
    assert_eq!(m.w, Tensor::full([2, 2], 2.0));
    assert_eq!(m.b, Tensor::zeros([2]));
    let w = weighted_mean(&[&a, &b], &[3.0, 1.0]);
    assert_eq!(w.w, Tensor::full([2, 2], 1.5));
}
