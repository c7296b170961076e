//! The training objectives re-evaluated step by step with plain loops, and
//! their gradients checked by central differences under frozen noise.

use gpoe_core::model::{
    FrozenNoise, Mechanism, ModalityBatch, ModalityConfig, ModalityKind, ModalitySpec, Model,
    ModelParams, RecordingNoise, RngNoise,
};
use gpoe_core::numerics::{finite_difference_check_coords, NumArray};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Matrix = Vec<Vec<f64>>;

fn config(aux_kind: ModalityKind) -> ModalityConfig {
    let mut c = ModalityConfig::new(
        ModalitySpec::new("x", 3, ModalityKind::Continuous),
        ModalitySpec::new("y", 2, ModalityKind::Continuous),
        vec![ModalitySpec::new("m1", 2, aux_kind)],
    );
    c.latent_dim = 2;
    c.hidden = vec![4];
    c.alpha_hidden = vec![3];
    c
}

fn two_aux_config() -> ModalityConfig {
    let mut c = config(ModalityKind::Continuous);
    c.aux.push(ModalitySpec::new("m2", 3, ModalityKind::Binary));
    c.hidden = vec![5, 3];
    c
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> NumArray {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    NumArray::new(vec![rows, cols], data).unwrap()
}

fn random_batch(c: &ModalityConfig, rows: usize, rng: &mut ChaCha8Rng) -> ModalityBatch {
    let values = |spec: &ModalitySpec, rng: &mut ChaCha8Rng| match spec.kind {
        ModalityKind::Continuous => random_matrix(rng, rows, spec.dim, -1.0, 1.0),
        ModalityKind::Binary => random_matrix(rng, rows, spec.dim, 0.0, 1.0),
    };
    let x = values(&c.input, rng);
    let y = values(&c.target, rng);
    let aux = c.aux.iter().map(|s| values(s, rng)).collect();
    ModalityBatch::complete(x, y, aux).unwrap()
}

fn to_rows(a: &NumArray) -> Matrix {
    let (r, _) = a.dims2().unwrap();
    (0..r).map(|i| a.row_slice(i).to_vec()).collect()
}

/// `x · W + b` for `W` stored `[in, out]`.
fn affine(p: &ModelParams, prefix: &str, x: &Matrix) -> Matrix {
    let w = p.get(&format!("{prefix}.w")).unwrap();
    let b = p.get(&format!("{prefix}.b")).unwrap().data();
    let (fan_in, fan_out) = w.dims2().unwrap();
    x.iter()
        .map(|row| {
            (0..fan_out)
                .map(|o| b[o] + (0..fan_in).map(|i| row[i] * w.data()[i * fan_out + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn softplus_layers(p: &ModelParams, prefix: &str, layers: usize, mut h: Matrix) -> Matrix {
    for i in 0..layers {
        h = affine(p, &format!("{prefix}.h{i}"), &h);
        for v in h.iter_mut().flatten() {
            *v = if *v > 0.0 { *v + (-*v).exp().ln_1p() } else { v.exp().ln_1p() };
        }
    }
    h
}

struct Posterior {
    mean: Matrix,
    var: Matrix,
    features: Matrix,
}

fn encode(p: &ModelParams, c: &ModalityConfig, name: &str, x: &Matrix) -> Posterior {
    let features = softplus_layers(p, &format!("enc.{name}"), c.hidden.len(), x.clone());
    let mean = affine(p, &format!("enc.{name}.mu"), &features);
    let log_var = affine(p, &format!("enc.{name}.logvar"), &features);
    let var = log_var.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
    Posterior { mean, var, features }
}

/// Per-element mean loss of decoding `spec` from `z` against `truth`.
fn recon(p: &ModelParams, c: &ModalityConfig, spec: &ModalitySpec, z: &Matrix, truth: &Matrix) -> f64 {
    let h = softplus_layers(p, &format!("dec.{}", spec.name), c.hidden.len(), z.clone());
    let logits = affine(p, &format!("dec.{}.out", spec.name), &h);
    let mut total = 0.0;
    for (lr, tr) in logits.iter().zip(truth) {
        for (&l, &t) in lr.iter().zip(tr) {
            total += match spec.kind {
                ModalityKind::Continuous => (l - t) * (l - t),
                ModalityKind::Binary => {
                    let s = 1.0 / (1.0 + (-l).exp());
                    -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
                }
            };
        }
    }
    total / (truth.len() * spec.dim) as f64
}

fn kl_rows(e: &Posterior) -> f64 {
    let mut total = 0.0;
    for (mr, vr) in e.mean.iter().zip(&e.var) {
        for (&m, &v) in mr.iter().zip(vr) {
            total += 0.5 * (m * m + v - 1.0 - v.ln());
        }
    }
    total
}

fn sample(mean: &Matrix, var: &Matrix, eps: &NumArray) -> Matrix {
    let eps = to_rows(eps);
    mean.iter()
        .zip(var)
        .zip(&eps)
        .map(|((m, v), e)| m.iter().zip(v).zip(e).map(|((m, v), e)| m + v.sqrt() * e).collect())
        .collect()
}

fn alpha(p: &ModelParams, c: &ModalityConfig, posts: &[Posterior]) -> Vec<Matrix> {
    let rows = posts[0].features.len();
    let joined: Matrix = (0..rows)
        .map(|r| posts.iter().flat_map(|e| e.features[r].iter().copied()).collect())
        .collect();
    let h = softplus_layers(p, "alpha", c.alpha_hidden.len(), joined);
    let logits = affine(p, "alpha.out", &h);
    let (m, l) = (posts.len(), c.latent_dim);
    let mut out = vec![vec![vec![0.0; l]; rows]; m];
    for r in 0..rows {
        for d in 0..l {
            let top = (0..m).map(|i| logits[r][i * l + d]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..m).map(|i| (logits[r][i * l + d] - top).exp()).sum();
            for i in 0..m {
                out[i][r][d] = (logits[r][i * l + d] - top).exp() / z;
            }
        }
    }
    out
}

struct Terms {
    target: f64,
    aux: f64,
    kl: f64,
}

fn fused_objective(
    p: &ModelParams,
    c: &ModalityConfig,
    batch: &ModalityBatch,
    mechanism: Mechanism,
    draws: &[NumArray],
) -> Terms {
    let x = to_rows(batch.input.as_ref().unwrap());
    let y = to_rows(batch.target.as_ref().unwrap());
    let aux: Vec<Matrix> = batch.aux.iter().map(|a| to_rows(a.as_ref().unwrap())).collect();
    let mut posts = vec![encode(p, c, &c.input.name, &x)];
    for (spec, a) in c.aux.iter().zip(&aux) {
        posts.push(encode(p, c, &spec.name, a));
    }
    let weights: Option<Vec<Matrix>> = match mechanism {
        Mechanism::Gpoe => Some(alpha(p, c, &posts)),
        _ => None,
    };
    let rows = x.len();
    let l = c.latent_dim;
    let floor = c.variance_floor.unwrap_or(0.0);
    let mut joint_mean = vec![vec![0.0; l]; rows];
    let mut joint_var = vec![vec![0.0; l]; rows];
    for r in 0..rows {
        for d in 0..l {
            let (mut prec, mut num) = (0.0, 0.0);
            for (i, e) in posts.iter().enumerate() {
                let a = weights.as_ref().map_or(1.0, |w| w[i][r][d]);
                let t = a / e.var[r][d];
                prec += t;
                num += e.mean[r][d] * t;
            }
            joint_var[r][d] = (1.0 / prec).max(floor);
            joint_mean[r][d] = num * joint_var[r][d];
        }
    }
    let mut latents = vec![sample(&joint_mean, &joint_var, &draws[0])];
    for (e, eps) in posts.iter().zip(&draws[1..]) {
        latents.push(sample(&e.mean, &e.var, eps));
    }
    let target = latents.iter().map(|z| recon(p, c, &c.target, z, &y)).sum();
    let aux_total = c
        .aux
        .iter()
        .zip(&aux)
        .map(|(s, t)| latents.iter().map(|z| recon(p, c, s, z, t)).sum::<f64>())
        .sum();
    let kl = posts.iter().map(kl_rows).sum::<f64>() / rows as f64;
    Terms { target, aux: aux_total, kl }
}

fn mixture_objective(
    p: &ModelParams,
    c: &ModalityConfig,
    batch: &ModalityBatch,
    draws: &[NumArray],
) -> Terms {
    let x = to_rows(batch.input.as_ref().unwrap());
    let y = to_rows(batch.target.as_ref().unwrap());
    let aux: Vec<Matrix> = batch.aux.iter().map(|a| to_rows(a.as_ref().unwrap())).collect();
    let mut posts = vec![encode(p, c, &c.input.name, &x)];
    for (spec, a) in c.aux.iter().zip(&aux) {
        posts.push(encode(p, c, &spec.name, a));
    }
    let m = posts.len() as f64;
    let mut t = Terms { target: 0.0, aux: 0.0, kl: 0.0 };
    for (e, eps) in posts.iter().zip(draws) {
        let z = sample(&e.mean, &e.var, eps);
        t.target += recon(p, c, &c.target, &z, &y) / m;
        for (s, truth) in c.aux.iter().zip(&aux) {
            t.aux += recon(p, c, s, &z, truth) / m;
        }
        t.kl += kl_rows(e) / (m * x.len() as f64);
    }
    t
}

fn setup(c: ModalityConfig, seed: u64) -> (Model, ModelParams, ModalityBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(c.clone()).unwrap();
    let mut params = model.init_params(&mut rng).unwrap();
    // Move every entry off its initial value so zero-initialized heads and
    // biases take part in the comparison.
    let flat: Vec<f64> = params.flatten().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    params.unflatten(&flat).unwrap();
    let batch = random_batch(&c, 4, &mut rng);
    (model, params, batch)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

#[test]
fn fused_objectives_match_direct_evaluation() {
    for (ci, c) in [config(ModalityKind::Continuous), config(ModalityKind::Binary), two_aux_config()]
        .into_iter()
        .enumerate()
    {
        for seed in 0..5 {
            let (model, params, batch) = setup(c.clone(), seed);
            for mech in [Mechanism::Poe, Mechanism::Gpoe] {
                let mut rec = RecordingNoise::new(RngNoise(ChaCha8Rng::seed_from_u64(seed + 100)));
                let beta = 0.37;
                let l = model.loss_total(&params, &batch, beta, mech, &mut rec).unwrap();
                let draws = rec.into_frozen().draws().to_vec();
                assert_eq!(draws.len(), 2 + c.aux.len());
                let t = fused_objective(&params, &c, &batch, mech, &draws);
                let total = t.target + t.aux + beta * t.kl;
                assert!(close(l.target_recon, t.target), "config {ci} {mech}: {} vs {}", l.target_recon, t.target);
                assert!(close(l.aux_recon, t.aux), "config {ci} {mech}");
                assert!(close(l.kl, t.kl), "config {ci} {mech}");
                assert!(close(l.total, total), "config {ci} {mech}");
            }
        }
    }
}

#[test]
fn mixture_objective_matches_direct_evaluation() {
    for c in [config(ModalityKind::Continuous), config(ModalityKind::Binary), two_aux_config()] {
        for seed in 0..5 {
            let (model, params, batch) = setup(c.clone(), seed);
            let mut rec = RecordingNoise::new(RngNoise(ChaCha8Rng::seed_from_u64(seed + 200)));
            let l = model.moe_elbo(&params, &batch, 1.0, &mut rec).unwrap();
            let draws = rec.into_frozen().draws().to_vec();
            assert_eq!(draws.len(), 1 + c.aux.len());
            let t = mixture_objective(&params, &c, &batch, &draws);
            assert!(close(l.target_recon, t.target));
            assert!(close(l.aux_recon, t.aux));
            assert!(close(l.kl, t.kl));
            assert!(close(l.total, t.target + t.aux + t.kl));
        }
    }
}

#[test]
fn mixture_of_one_modality_is_the_plain_elbo() {
    let mut c = config(ModalityKind::Continuous);
    c.aux.clear();
    let (model, params, batch) = setup(c.clone(), 3);
    let mut rec = RecordingNoise::new(RngNoise(ChaCha8Rng::seed_from_u64(1)));
    let l = model.moe_elbo(&params, &batch, 1.0, &mut rec).unwrap();
    let frozen = rec.into_frozen();
    let eps = &frozen.draws()[0];
    let x = to_rows(batch.input.as_ref().unwrap());
    let y = to_rows(batch.target.as_ref().unwrap());
    let e = encode(&params, &c, "x", &x);
    let z = sample(&e.mean, &e.var, eps);
    let elbo = recon(&params, &c, &c.target, &z, &y) + kl_rows(&e) / x.len() as f64;
    assert!(close(l.total, elbo));
    assert_eq!(l.aux_recon, 0.0);
}

/// Replaces the α-network output with zeros so every weight is 1/M.
fn force_uniform_alpha(p: &mut ModelParams) {
    p.get_mut("alpha.out.w").unwrap().data_mut().fill(0.0);
    p.get_mut("alpha.out.b").unwrap().data_mut().fill(0.0);
}

#[test]
fn uniform_alpha_gpoe_equals_poe_with_rescaled_joint_noise() {
    for seed in 0..5 {
        let (model, mut params, batch) = setup(two_aux_config(), seed);
        force_uniform_alpha(&mut params);
        let m = model.config().fused_count() as f64;
        let mut rec = RecordingNoise::new(RngNoise(ChaCha8Rng::seed_from_u64(seed)));
        let poe = model.loss_total(&params, &batch, 0.5, Mechanism::Poe, &mut rec).unwrap();
        let mut frozen = rec.into_frozen();
        for v in frozen.draws_mut()[0].data_mut() {
            *v /= m.sqrt();
        }
        let gpoe = model.loss_total(&params, &batch, 0.5, Mechanism::Gpoe, &mut frozen).unwrap();
        assert!(close(poe.total, gpoe.total), "{} vs {}", poe.total, gpoe.total);
        assert!(close(poe.target_recon, gpoe.target_recon));
        assert_eq!(poe.kl, gpoe.kl);
    }
}

#[test]
fn objective_gradients_match_central_differences() {
    let configs = [config(ModalityKind::Continuous), config(ModalityKind::Binary), two_aux_config()];
    let mut cases = 0;
    for (ci, c) in configs.iter().enumerate() {
        for seed in 0..3 {
            for mech in Mechanism::ALL {
                let (model, params, batch) = setup(c.clone(), 50 + seed);
                let mut rec = RecordingNoise::new(RngNoise(ChaCha8Rng::seed_from_u64(seed)));
                model.objective_with_grad(&params, &batch, 0.7, mech, &mut rec).unwrap();
                let mut frozen: FrozenNoise = rec.into_frozen();
                let point = params.flatten();
                let mut probe = params.clone();
                let f = |x: &[f64]| {
                    probe.unflatten(x)?;
                    frozen.rewind();
                    let (l, grads) = model.objective_with_grad(&probe, &batch, 0.7, mech, &mut frozen)?;
                    let flat = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
                    Ok((l.total, flat))
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
                let coords = index::sample(&mut rng, point.len(), 25).into_vec();
                let err = finite_difference_check_coords(f, &point, 3e-5, &coords).unwrap();
                assert!(err <= 1e-3, "config {ci} seed {seed} {mech}: {err}");
                cases += 1;
            }
        }
    }
    assert!(cases >= 20);
}
