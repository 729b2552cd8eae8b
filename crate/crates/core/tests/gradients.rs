//! Finite-difference checks for every differentiable op, at 64-bit with
//! random small tensors. The numerical oracle re-evaluates the forward pass
//! and never touches the reverse-mode code.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use r2gen_mamba::gradcheck::{check_gradients, DEFAULT_STEP};
use r2gen_mamba::tensor::Tensor;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Uniform values kept away from zero, for kinked ops like relu.
fn uniform_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_range(0.0..1.0) < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Fixed probe so the scalar output weights every element differently.
fn probe(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape)
}

#[test]
fn grad_matmul() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[3, 4]);
        let w = uniform(&mut r, &[4, 2]);
        let p = probe(&mut r, &[3, 2]);
        check_gradients(
            &[x, w],
            &|v| v[0].matmul(&v[1])?.mul(&p)?.sum_all(),
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
    }
}

#[test]
fn grad_transpose_add_mul() {
    let mut r = rng(7);
    let a = uniform(&mut r, &[3, 5]);
    let b = uniform(&mut r, &[5, 3]);
    let p = probe(&mut r, &[5, 3]);
    check_gradients(
        &[a, b],
        &|v| v[0].transpose()?.add(&v[1])?.mul(&v[1])?.mul(&p)?.sum_all(),
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
}

#[test]
fn grad_add_bias() {
    let mut r = rng(11);
    let x = uniform(&mut r, &[4, 3]);
    let b = uniform(&mut r, &[3]);
    let p = probe(&mut r, &[4, 3]);
    check_gradients(
        &[x, b],
        &|v| v[0].add_bias(&v[1])?.silu()?.mul(&p)?.sum_all(),
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
}

#[test]
fn grad_elementwise_unary() {
    let mut r = rng(13);
    let x = uniform_off_zero(&mut r, &[2, 5]);
    let p = probe(&mut r, &[2, 5]);
    for f in [0usize, 1, 2, 3, 4] {
        let p = p.clone();
        check_gradients(
            &[x.clone()],
            &move |v| {
                let y = match f {
                    0 => v[0].exp()?,
                    1 => v[0].relu()?,
                    2 => v[0].silu()?,
                    3 => v[0].softplus()?,
                    _ => v[0].mul_scalar(-1.75)?,
                };
                y.mul(&p)?.sum_all()
            },
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
    }
}

#[test]
fn grad_softmax_both_axes() {
    let mut r = rng(17);
    let x = uniform(&mut r, &[3, 4]);
    let p = probe(&mut r, &[3, 4]);
    for axis in [0usize, 1] {
        let p = p.clone();
        check_gradients(
            &[x.clone()],
            &move |v| v[0].softmax(axis)?.mul(&p)?.sum_all(),
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
    }
}

#[test]
fn grad_masked_softmax() {
    let mut r = rng(19);
    let x = uniform(&mut r, &[3, 3]);
    let p = probe(&mut r, &[3, 3]);
    // causal pattern
    let mask: Vec<bool> = (0..9).map(|i| i % 3 <= i / 3).collect();
    check_gradients(
        &[x],
        &move |v| v[0].masked_softmax(&mask)?.mul(&p)?.sum_all(),
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
}

#[test]
fn grad_layer_norm() {
    let mut r = rng(23);
    let x = uniform(&mut r, &[3, 5]);
    let g = uniform(&mut r, &[5]);
    let b = uniform(&mut r, &[5]);
    let p = probe(&mut r, &[3, 5]);
    check_gradients(
        &[x, g, b],
        &|v| v[0].layer_norm(&v[1], &v[2], 1e-5)?.mul(&p)?.sum_all(),
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
}

#[test]
fn grad_slice_and_concat() {
    let mut r = rng(29);
    let x = uniform(&mut r, &[3, 5]);
    let y = uniform(&mut r, &[3, 2]);
    let p = probe(&mut r, &[3, 5]);
    check_gradients(
        &[x, y],
        &|v| {
            let left = v[0].slice_cols(1, 3)?;
            let joined = Tensor::concat_cols(&[left, v[1].clone()])?;
            joined.mul(&p)?.sum_all()
        },
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
}

#[test]
fn grad_reshape_and_concat_rows() {
    let mut r = rng(59);
    let a = uniform(&mut r, &[2, 3]);
    let b = uniform(&mut r, &[1, 3]);
    let p = probe(&mut r, &[3, 3]);
    check_gradients(
        &[a, b],
        &|v| {
            let flat = v[0].reshape(&[3, 2])?.reshape(&[2, 3])?;
            Tensor::concat_rows(&[flat, v[1].clone()])?.mul(&p)?.sum_all()
        },
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
}

#[test]
fn grad_embed_rows() {
    let mut r = rng(31);
    let table = uniform(&mut r, &[5, 3]);
    let p = probe(&mut r, &[4, 3]);
    // repeated id exercises scatter accumulation
    let ids = vec![0usize, 2, 2, 4];
    check_gradients(
        &[table],
        &move |v| v[0].embed_rows(&ids)?.mul(&p)?.sum_all(),
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
}

#[test]
fn grad_causal_conv1d() {
    let mut r = rng(37);
    let x = uniform(&mut r, &[5, 3]);
    let k = uniform(&mut r, &[4, 3]);
    let b = uniform(&mut r, &[3]);
    let p = probe(&mut r, &[5, 3]);
    check_gradients(
        &[x, k, b],
        &|v| v[0].causal_conv1d(&v[1], &v[2])?.mul(&p)?.sum_all(),
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
}

#[test]
fn grad_zoh_ops() {
    let mut r = rng(41);
    let a = uniform(&mut r, &[3, 2]);
    let b = uniform(&mut r, &[4, 2]);
    // deltas positive, as softplus guarantees downstream
    let delta_data: Vec<f64> = (0..12).map(|_| r.random_range(0.05..1.0)).collect();
    let delta = Tensor::from_vec(delta_data, &[4, 3]).unwrap();
    let p = probe(&mut r, &[4, 3, 2]);
    check_gradients(
        &[a, b, delta],
        &|v| {
            let decay = Tensor::zoh_decay(&v[0], &v[2])?;
            let drive = Tensor::zoh_drive(&v[0], &v[1], &v[2])?;
            decay.mul(&drive)?.mul(&p)?.sum_all()
        },
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
}

#[test]
fn grad_zoh_drive_near_limit_branch() {
    // a pinned at zero puts every element inside the |delta*a| < 1e-8 branch
    let a = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
    let b = Tensor::from_vec(vec![0.4, -0.7], &[1, 2]).unwrap();
    let delta = Tensor::from_vec(vec![0.3], &[1, 1]).unwrap();
    let mut r = rng(43);
    let p = probe(&mut r, &[1, 1, 2]);
    check_gradients(
        &[a, b, delta],
        &|v| Tensor::zoh_drive(&v[0], &v[1], &v[2])?.mul(&p)?.sum_all(),
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
}

#[test]
fn grad_selective_scan() {
    let mut r = rng(47);
    let (s, di, ds) = (4, 3, 2);
    let decay_data: Vec<f64> = (0..s * di * ds).map(|_| r.random_range(0.1..0.95)).collect();
    let decay = Tensor::from_vec(decay_data, &[s, di, ds]).unwrap();
    let drive = uniform(&mut r, &[s, di, ds]);
    let mix = uniform(&mut r, &[s, ds]);
    let u = uniform(&mut r, &[s, di]);
    let skip = uniform(&mut r, &[di]);
    let p = probe(&mut r, &[s, di]);
    check_gradients(
        &[decay, drive, mix, u, skip],
        &|v| {
            Tensor::selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4])?.mul(&p)?.sum_all()
        },
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
}

#[test]
fn grad_reductions_and_nll() {
    let mut r = rng(53);
    let x = uniform(&mut r, &[3, 4]);
    check_gradients(&[x.clone()], &|v| v[0].mean_all(), DEFAULT_STEP, TOL).unwrap();
    check_gradients(&[x.clone()], &|v| v[0].sum_all(), DEFAULT_STEP, TOL).unwrap();
    let targets = vec![1usize, 3, 0];
    let mask = vec![true, false, true];
    check_gradients(
        &[x],
        &move |v| v[0].nll_loss(&targets, &mask),
        DEFAULT_STEP,
        TOL,
    )
    .unwrap();
}
