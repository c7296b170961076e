//! Analytic gradients against central differences, for every graph op and
//! the Gaussian fusion ops, at random points.

use gpoe_core::distributions::{
    gpoe_fuse_nodes, kl_std_normal_nodes, poe_fuse_nodes, sample_reparam_nodes, GaussianNodes,
};
use gpoe_core::numerics::{finite_difference_check, Graph, NodeId, NumArray};
use gpoe_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Balances truncation error against roundoff for values of magnitude ~10.
const STEP: f64 = 3e-5;
const OP_TOLERANCE: f64 = 1e-4;
const PAIR: &[usize] = &[2, 3];

type Builder = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// Evaluates `build` on leaves holding `point` (split by `shapes`), contracts
/// the output with fixed random weights and returns the value and gradient.
fn evaluate(
    build: &Builder,
    shapes: &[Vec<usize>],
    weights_seed: u64,
    point: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let mut offset = 0;
    let mut leaves = Vec::new();
    for s in shapes {
        let n: usize = s.iter().product();
        leaves.push(g.leaf(NumArray::new(s.clone(), point[offset..offset + n].to_vec())?));
        offset += n;
    }
    let out = build(&mut g, &leaves)?;
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = g.leaf(NumArray::new(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())?);
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;
    let mut flat = Vec::with_capacity(point.len());
    for l in leaves {
        flat.extend_from_slice(grads.get(l).unwrap().data());
    }
    Ok((g.scalar(loss), flat))
}

fn worst_error(build: &Builder, shapes: &[Vec<usize>], point: &[f64], seed: u64) -> f64 {
    finite_difference_check(|p| evaluate(build, shapes, seed, p), point, STEP).unwrap()
}

fn random_point(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero so kinks and poles stay outside the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Box<Builder>,
    positive: bool,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    positive: bool,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
        positive,
    }
}

fn op_cases() -> Vec<Case> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], false, |g, x| g.matmul(x[0], x[1])),
        case("add", &[&[2, 3], &[2, 3]], false, |g, x| g.add(x[0], x[1])),
        case("sub", &[&[2, 3], &[2, 3]], false, |g, x| g.sub(x[0], x[1])),
        case("mul", &[&[2, 3], &[2, 3]], false, |g, x| g.mul(x[0], x[1])),
        case("div", &[&[2, 3], &[2, 3]], false, |g, x| g.div(x[0], x[1])),
        case("add_row", &[&[3, 4], &[1, 4]], false, |g, x| g.add_row(x[0], x[1])),
        case("scale", &[&[2, 3]], false, |g, x| Ok(g.scale(x[0], -1.7))),
        case("add_scalar", &[&[2, 3]], false, |g, x| Ok(g.add_scalar(x[0], 0.3))),
        case("neg", &[&[2, 3]], false, |g, x| Ok(g.neg(x[0]))),
        case("exp", &[&[2, 3]], false, |g, x| Ok(g.exp(x[0]))),
        case("ln", &[&[2, 3]], true, |g, x| Ok(g.ln(x[0]))),
        case("square", &[&[2, 3]], false, |g, x| Ok(g.square(x[0]))),
        case("sqrt", &[&[2, 3]], true, |g, x| Ok(g.sqrt(x[0]))),
        case("recip", &[&[2, 3]], false, |g, x| Ok(g.recip(x[0]))),
        case("relu", &[&[2, 3]], false, |g, x| Ok(g.relu(x[0]))),
        case("sigmoid", &[&[2, 3]], false, |g, x| Ok(g.sigmoid(x[0]))),
        case("softplus", &[&[2, 3]], false, |g, x| Ok(g.softplus(x[0]))),
        case("clamp_min", &[&[2, 3]], false, |g, x| Ok(g.clamp_min(x[0], 0.05))),
        case("softmax0", &[&[3, 4]], false, |g, x| g.softmax(x[0], 0)),
        case("softmax1", &[&[3, 4]], false, |g, x| g.softmax(x[0], 1)),
        case("softmax_mid", &[&[2, 3, 2]], false, |g, x| g.softmax(x[0], 1)),
        case("sum", &[&[2, 3]], false, |g, x| Ok(g.sum(x[0]))),
        case("mean", &[&[2, 3]], false, |g, x| Ok(g.mean(x[0]))),
        case("sum_axis0", &[&[3, 4]], false, |g, x| g.sum_axis(x[0], 0)),
        case("sum_axis1", &[&[3, 4]], false, |g, x| g.sum_axis(x[0], 1)),
        case("concat0", &[&[2, 3], &[1, 3]], false, |g, x| g.concat(&[x[0], x[1]], 0)),
        case("concat1", &[&[2, 3], &[2, 2]], false, |g, x| g.concat(&[x[0], x[1]], 1)),
        case("slice", &[&[3, 5]], false, |g, x| g.slice(x[0], 1, 1, 3)),
        case("reshape", &[&[2, 6]], false, |g, x| g.reshape(x[0], &[3, 4])),
        case("composite", &[&[2, 3], &[3, 3]], false, |g, x| {
            let h = g.matmul(x[0], x[1])?;
            let s = g.sigmoid(h);
            let e = g.exp(x[0]);
            let r = g.reshape(e, &[2, 3])?;
            g.mul(s, r)
        }),
    ]
}

fn gaussian(g: &mut Graph, mean: NodeId, log_var: NodeId) -> Result<GaussianNodes> {
    GaussianNodes::from_log_var(g, mean, log_var)
}

fn distribution_cases() -> Vec<Case> {
    vec![
        case("poe", &[PAIR; 6], false, |g, x| {
            let e: Vec<_> = (0..3)
                .map(|i| gaussian(g, x[2 * i], x[2 * i + 1]))
                .collect::<Result<_>>()?;
            let f = poe_fuse_nodes(g, &e, None)?;
            g.concat(&[f.mean, f.var], 1)
        }),
        case("gpoe", &[PAIR; 6], false, |g, x| {
            let e: Vec<_> = (0..2)
                .map(|i| gaussian(g, x[2 * i], x[2 * i + 1]))
                .collect::<Result<_>>()?;
            // α from a softmax over two logit blocks
            let cube = g.concat(&[x[4], x[5]], 1)?;
            let cube = g.reshape(cube, &[2, 2, 3])?;
            let w = g.softmax(cube, 1)?;
            let a0 = g.slice(w, 1, 0, 1)?;
            let a0 = g.reshape(a0, &[2, 3])?;
            let a1 = g.slice(w, 1, 1, 1)?;
            let a1 = g.reshape(a1, &[2, 3])?;
            let f = gpoe_fuse_nodes(g, &e, &[a0, a1], None)?;
            g.concat(&[f.mean, f.var], 1)
        }),
        case("kl", &[&[2, 3], &[2, 3]], false, |g, x| {
            let e = gaussian(g, x[0], x[1])?;
            kl_std_normal_nodes(g, &e)
        }),
        case("reparam", &[&[2, 3], &[2, 3], &[2, 3]], false, |g, x| {
            let e = gaussian(g, x[0], x[1])?;
            sample_reparam_nodes(g, &e, x[2])
        }),
        case("from_var", &[&[2, 3], &[2, 3]], true, |g, x| {
            let e = GaussianNodes::from_var(g, x[0], x[1])?;
            kl_std_normal_nodes(g, &e)
        }),
    ]
}

fn point_for(c: &Case, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = c.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if c.positive {
        random_point(rng, n, 0.2, 2.0)
    } else {
        away_from_zero(rng, n)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_matches_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in op_cases() {
            let point = point_for(&c, &mut rng);
            let err = worst_error(&*c.build, &c.shapes, &point, seed);
            prop_assert!(err <= OP_TOLERANCE, "{}: {err}", c.name);
        }
    }

    #[test]
    fn distribution_ops_match_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in distribution_cases() {
            let point = point_for(&c, &mut rng);
            let err = worst_error(&*c.build, &c.shapes, &point, seed);
            prop_assert!(err <= OP_TOLERANCE, "{}: {err}", c.name);
        }
    }

    #[test]
    fn softmax_columns_sum_to_one_and_shift_invariant(
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_point(&mut rng, 12, -20.0, 20.0);
        let mut g = Graph::new();
        let a = g.leaf(NumArray::new(vec![3, 4], data.clone()).unwrap());
        let b = g.leaf(NumArray::new(vec![3, 4], data.iter().map(|v| v + shift).collect()).unwrap());
        let sa = g.softmax(a, 0).unwrap();
        let sb = g.softmax(b, 0).unwrap();
        let (va, vb) = (g.value(sa).data(), g.value(sb).data());
        for col in 0..4 {
            let s: f64 = (0..3).map(|r| va[r * 4 + col]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        for (x, y) in va.iter().zip(vb) {
            prop_assert!((x - y).abs() <= 1e-12);
            prop_assert!(*x > 0.0 && *x <= 1.0);
        }
    }
}

/// A two-layer perceptron regression loss, checked over every one of its 26
/// flattened parameters.
#[test]
fn two_layer_perceptron_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = NumArray::new(vec![5, 3], random_point(&mut rng, 15, -1.0, 1.0)).unwrap();
    let y = NumArray::new(vec![5, 2], random_point(&mut rng, 10, -1.0, 1.0)).unwrap();
    let sizes = [3 * 4, 4, 4 * 2, 2];
    let total: usize = sizes.iter().sum();
    let point = random_point(&mut rng, total, -0.8, 0.8);
    let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let w1 = g.leaf(NumArray::new(vec![3, 4], p[0..12].to_vec())?);
        let b1 = g.leaf(NumArray::new(vec![1, 4], p[12..16].to_vec())?);
        let w2 = g.leaf(NumArray::new(vec![4, 2], p[16..24].to_vec())?);
        let b2 = g.leaf(NumArray::new(vec![1, 2], p[24..26].to_vec())?);
        let xi = g.leaf(x.clone());
        let yi = g.leaf(y.clone());
        let h = g.matmul(xi, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.sigmoid(h);
        let o = g.matmul(h, w2)?;
        let o = g.add_row(o, b2)?;
        let d = g.sub(o, yi)?;
        let sq = g.square(d);
        let loss = g.mean(sq);
        let grads = g.backward(loss)?;
        let mut flat = Vec::new();
        for id in [w1, b1, w2, b2] {
            flat.extend_from_slice(grads.get(id).unwrap().data());
        }
        Ok((g.scalar(loss), flat))
    };
    let err = finite_difference_check(f, &point, STEP).unwrap();
    assert!(err <= OP_TOLERANCE, "{err}");
}
