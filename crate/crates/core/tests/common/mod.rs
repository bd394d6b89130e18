//! Shared oracles for the integration and acceptance targets.
#![allow(dead_code)]

use fesvibs::autodiff::{Graph, Real, Tensor, Var};
use fesvibs::models::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a small floor so entries near zero compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.worst <= FD_TOL
    }
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::randn(shape.to_vec(), rng).map(|v| v * scale as Real)
}

/// Central differences on `probes` random coordinates of `leaves`.
///
/// `f` evaluates the scalar loss and, when asked, the analytic gradients.
pub fn check(
    name: &str,
    leaves: Vec<Tensor>,
    probes: usize,
    seed: u64,
    f: impl Fn(&[Tensor], bool) -> (f64, Vec<Option<Tensor>>),
) -> Check {
    let (_, grads) = f(&leaves, true);
    assert_eq!(grads.len(), leaves.len(), "{name}: gradient count");
    let total: usize = leaves.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFD);
    let mut worst = 0.0f64;
    let mut work = leaves.clone();
    for _ in 0..probes {
        let mut k = rng.random_range(0..total);
        let mut leaf = 0;
        while k >= leaves[leaf].numel() {
            k -= leaves[leaf].numel();
            leaf += 1;
        }
        let orig = leaves[leaf].data()[k];
        work[leaf].data_mut()[k] = orig + FD_STEP as Real;
        let up = f(&work, false).0;
        work[leaf].data_mut()[k] = orig - FD_STEP as Real;
        let down = f(&work, false).0;
        work[leaf].data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads[leaf].as_ref().map_or(0.0, |g| g.data()[k] as f64);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Check { name: name.to_string(), trials: probes, worst }
}

/// Reduces `out` to a scalar with fixed random weights of unit total scale.
pub fn readout(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let n = shape.iter().product::<usize>().max(1) as f64;
    let w = randn(&shape, &mut ChaCha8Rng::seed_from_u64(seed), 1.0 / n.sqrt());
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

/// Gradient check of a graph expression over fresh parameter leaves.
pub fn check_op(
    name: &str,
    leaves: Vec<Tensor>,
    probes: usize,
    seed: u64,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> Check {
    check(name, leaves, probes, seed, |ts, want| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = if g.value(out).numel() == 1 && g.shape(out).is_empty() { out } else { readout(&mut g, out, seed) };
        let value = g.value(loss).item() as f64;
        if !want {
            return (value, Vec::new());
        }
        g.backward(loss).unwrap();
        (value, vars.iter().map(|&v| g.grad(v).cloned()).collect())
    })
}

/// Every differentiable graph operation, each over several random instances.
pub fn op_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let mut out = Vec::new();
    let instances = 4;
    let probes = 30;
    let mut run = |name: &str, make: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<Tensor>, build: &dyn Fn(&mut Graph, &[Var]) -> Var| {
        let mut worst = 0.0f64;
        let mut trials = 0;
        for i in 0..instances {
            let leaves = make(&mut rng);
            let c = check_op(name, leaves, probes, 31 * i as u64 + name.len() as u64, build);
            worst = worst.max(c.worst);
            trials += c.trials;
        }
        out.push(Check { name: name.into(), trials, worst });
    };
    run("matmul", &mut |r| vec![randn(&[3, 4], r, 1.0), randn(&[4, 5], r, 1.0)], &|g, v| g.matmul(v[0], v[1]).unwrap());
    run("bmm", &mut |r| vec![randn(&[2, 3, 4], r, 1.0), randn(&[2, 4, 2], r, 1.0)], &|g, v| g.bmm(v[0], v[1]).unwrap());
    run("add", &mut |r| vec![randn(&[3, 4], r, 1.0), randn(&[3, 4], r, 1.0)], &|g, v| g.add(v[0], v[1]).unwrap());
    run("add_broadcast", &mut |r| vec![randn(&[2, 3, 4], r, 1.0), randn(&[3, 4], r, 1.0)], &|g, v| {
        g.add_broadcast(v[0], v[1]).unwrap()
    });
    run("add_channel", &mut |r| vec![randn(&[2, 3, 2, 2], r, 1.0), randn(&[3], r, 1.0)], &|g, v| {
        g.add_channel(v[0], v[1]).unwrap()
    });
    run("mul", &mut |r| vec![randn(&[5], r, 1.0), randn(&[5], r, 1.0)], &|g, v| g.mul(v[0], v[1]).unwrap());
    run("scale", &mut |r| vec![randn(&[4], r, 1.0)], &|g, v| g.scale(v[0], -2.5));
    run("reshape", &mut |r| vec![randn(&[2, 6], r, 1.0)], &|g, v| {
        let y = g.reshape(v[0], &[3, 4]).unwrap();
        let w = g.constant(Tensor::full([3, 4], 0.5));
        let y = g.mul(y, w).unwrap();
        g.reshape(y, &[12]).unwrap()
    });
    run("permute", &mut |r| vec![randn(&[2, 3, 4], r, 1.0)], &|g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
    run("narrow", &mut |r| vec![randn(&[3, 5], r, 1.0)], &|g, v| g.narrow(v[0], 1, 1, 3).unwrap());
    run("concat", &mut |r| vec![randn(&[2, 3], r, 1.0), randn(&[2, 2], r, 1.0)], &|g, v| g.concat(&[v[0], v[1]], 1).unwrap());
    run("sum", &mut |r| vec![randn(&[3, 3], r, 1.0)], &|g, v| {
        let sq = g.mul(v[0], v[0]).unwrap();
        g.sum(sq)
    });
    run("mean_axis", &mut |r| vec![randn(&[2, 3, 4], r, 1.0)], &|g, v| g.mean_axis(v[0], 1).unwrap());
    for axis in 0..3 {
        run(&format!("softmax(axis {axis})"), &mut |r| vec![randn(&[2, 3, 4], r, 2.0)], &|g, v| {
            g.softmax(v[0], axis).unwrap()
        });
    }
    run("layer_norm", &mut |r| vec![randn(&[3, 6], r, 2.0), randn(&[6], r, 1.0), randn(&[6], r, 1.0)], &|g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    run("gelu", &mut |r| vec![randn(&[20], r, 2.0)], &|g, v| g.gelu(v[0]));
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        run(&format!("conv2d(stride {stride}, pad {pad})"), &mut |r| vec![randn(&[2, 2, 5, 5], r, 1.0), randn(&[3, 2, 3, 3], r, 0.5)], &|g, v| {
            g.conv2d(v[0], v[1], stride, pad).unwrap()
        });
    }
    run("cross_entropy", &mut |r| vec![randn(&[4, 3], r, 2.0)], &|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap());
    // Row norms are drawn well away from the clip threshold (the kink).
    run("clip_rows", &mut |r| {
        let mut t = randn(&[4, 6], r, 1.0);
        for (row, s) in [3.0, 0.2, 2.5, 0.1].into_iter().enumerate() {
            let norm = t.data()[row * 6..(row + 1) * 6].iter().map(|v| v * v).sum::<Real>().sqrt();
            t.data_mut()[row * 6..(row + 1) * 6].iter_mut().for_each(|v| *v *= (s * 6f64.sqrt()) as Real / norm);
        }
        vec![t]
    }, &|g, v| g.clip_rows(v[0], 6f64.sqrt() as Real).unwrap());
    run("linear", &mut |r| vec![randn(&[2, 3, 4], r, 1.0), randn(&[4, 5], r, 1.0), randn(&[5], r, 1.0)], &|g, v| {
        g.linear(v[0], v[1], v[2]).unwrap()
    });
    out
}

/// Desk-scale parameters with every tensor perturbed off its initial value,
/// so zero-initialized biases and projections are exercised too.
pub fn jittered_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = init_params(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for group in [p.head.tensors_mut(), p.body.tensors_mut(), p.projection.tensors_mut(), p.tail.tensors_mut()] {
        for t in group {
            let noise = randn(t.shape(), &mut rng, 0.05);
            t.add_assign(&noise);
        }
    }
    p
}

fn split_leaves<P: ParamGroup>(group: &P, leaves: &[Tensor]) -> P {
    let mut out = group.clone();
    for (t, l) in out.tensors_mut().into_iter().zip(leaves) {
        *t = l.clone();
    }
    out
}

/// Gradient checks of the four networks and the two body paths, with respect
/// to both their parameters and their inputs.
pub fn network_checks(probes: usize) -> Vec<Check> {
    let cfg = ModelConfig::desk();
    let p = jittered_params(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let b = 2;
    let x = randn(&[b, cfg.image[0], cfg.image[1], cfg.image[2]], &mut rng, 1.0);
    let h = randn(&[b, cfg.dim, cfg.tokens()], &mut rng, 1.0);
    let tokens = randn(&[b, cfg.tokens() + 1, cfg.dim], &mut rng, 1.0);
    let feat = randn(&[b, cfg.dim], &mut rng, 1.0);
    let labels = [1usize, 3];
    let mut out = Vec::new();

    let mut leaves = p.head.tensors().into_iter().cloned().collect::<Vec<_>>();
    leaves.push(x.clone());
    out.push(check("head", leaves, probes, 1, |ts, want| {
        let head = split_leaves(&p.head, ts);
        let mut g = Graph::new();
        let hv = head.bind(&mut g, true);
        let xv = g.param(ts[ts.len() - 1].clone());
        let y = head_forward(&mut g, &cfg, &hv, xv).unwrap();
        finish(g, y, 11, want, |g| {
            let mut v = hv.grads(g);
            v.push(g.grad(xv).cloned());
            v
        })
    }));

    let block = &p.body.blocks[1];
    let mut leaves = block.tensors().into_iter().cloned().collect::<Vec<_>>();
    leaves.push(tokens.clone());
    out.push(check("block", leaves, probes, 2, |ts, want| {
        let blk = split_leaves(block, ts);
        let mut g = Graph::new();
        let bv = blk.bind(&mut g, true);
        let tv = g.param(ts[ts.len() - 1].clone());
        let y = block_forward(&mut g, &cfg, &bv, tv).unwrap();
        finish(g, y, 12, want, |g| {
            let mut v = bv.grads(g);
            v.push(g.grad(tv).cloned());
            v
        })
    }));

    for (name, depth, cls) in [("body prefix (l=2)", 2, false), ("body full depth with class token", cfg.blocks, true)] {
        let mut leaves = p.body.tensors().into_iter().cloned().collect::<Vec<_>>();
        leaves.push(h.clone());
        out.push(check(name, leaves, probes, 3, |ts, want| {
            let body = split_leaves(&p.body, ts);
            let mut g = Graph::new();
            let bv = body.bind(&mut g, BodyBinding { depth, with_cls: cls, trainable: true, train_pos: true }).unwrap();
            let hv = g.param(ts[ts.len() - 1].clone());
            let y = if cls {
                body_full_cls_forward(&mut g, &cfg, &bv, hv).unwrap()
            } else {
                body_prefix_forward(&mut g, &cfg, &bv, hv, depth).unwrap()
            };
            finish(g, y, 13, want, |g| {
                let mut v = bv.grads(g);
                v.push(g.grad(hv).cloned());
                v
            })
        }));
    }

    let mut leaves = p.projection.tensors().into_iter().cloned().collect::<Vec<_>>();
    leaves.push(h.clone());
    out.push(check("projection", leaves, probes, 4, |ts, want| {
        let proj = split_leaves(&p.projection, ts);
        let mut g = Graph::new();
        let pv = proj.bind(&mut g, true);
        let zv = g.param(ts[ts.len() - 1].clone());
        let y = projection_forward(&mut g, &cfg, &pv, zv).unwrap();
        finish(g, y, 14, want, |g| {
            let mut v = pv.grads(g);
            v.push(g.grad(zv).cloned());
            v
        })
    }));

    let mut leaves = p.tail.tensors().into_iter().cloned().collect::<Vec<_>>();
    leaves.push(feat.clone());
    out.push(check("tail with cross-entropy", leaves, probes, 5, |ts, want| {
        let tail = split_leaves(&p.tail, ts);
        let mut g = Graph::new();
        let tv = tail.bind(&mut g, true);
        let bv = g.param(ts[ts.len() - 1].clone());
        let logits = tail_forward(&mut g, &cfg, &tv, bv).unwrap();
        let loss = g.cross_entropy(logits, &labels).unwrap();
        finish(g, loss, 15, want, |g| {
            let mut v = tv.grads(g);
            v.push(g.grad(bv).cloned());
            v
        })
    }));
    out
}

fn finish(
    mut g: Graph,
    y: Var,
    seed: u64,
    want: bool,
    grads: impl FnOnce(&Graph) -> Vec<Option<Tensor>>,
) -> (f64, Vec<Option<Tensor>>) {
    let loss = if g.shape(y).is_empty() { y } else { readout(&mut g, y, seed) };
    let value = g.value(loss).item() as f64;
    if !want {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    (value, grads(&g))
}
