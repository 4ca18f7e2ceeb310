//! Central finite-difference checks of every differentiable primitive.

use fpm_core::rng::seeded;
use fpm_core::tensor::{Graph, Tensor, Var};
use rand::Rng;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

/// Checks the analytic gradient of `sum(w * f(inputs))`, with a fixed random
/// projection `w`, against central differences in every input element.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let project = |g: &mut Graph, out: Var| {
        let shape = g.shape(out).to_vec();
        let w = g.constant(random(&shape, 4242));
        let prod = g.mul(out, w).unwrap();
        g.sum(prod)
    };
    let eval = |values: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        let loss = project(&mut g, out);
        g.data(loss)[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    let loss = project(&mut g, out);
    let grads = g.backward(loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&g, vars[k]);
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let err = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
            assert!(
                err < TOL || (analytic[i] - fd).abs() < 1e-10,
                "input {k} element {i}: analytic {} vs fd {fd} (rel {err:e})",
                analytic[i]
            );
        }
    }
}

#[test]
fn add_sub_mul_scale() {
    let a = random(&[4, 4], 1);
    let b = random(&[4, 4], 2);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    check(vec![a.clone(), b], |g, v| g.mul(v[0], v[1]).unwrap());
    check(vec![a], |g, v| g.scale(v[0], -2.5));
}

#[test]
fn square_sum_mean_softplus() {
    let a = random(&[4, 4], 3);
    check(vec![a.clone()], |g, v| g.square(v[0]));
    check(vec![a.clone()], |g, v| g.sum(v[0]));
    check(vec![a.clone()], |g, v| g.mean(v[0]));
    let wide = Tensor::new(&[4, 4], a.data().iter().map(|x| 8.0 * x).collect()).unwrap();
    check(vec![wide], |g, v| g.softplus(v[0]));
}

#[test]
fn matmul() {
    check(vec![random(&[3, 4], 5), random(&[4, 2], 6)], |g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn conv2d_with_bias() {
    check(
        vec![random(&[2, 3, 4, 4], 7), random(&[5, 3, 3, 3], 8), random(&[5], 9)],
        |g, v| g.conv2d(v[0], v[1], Some(v[2])).unwrap(),
    );
}

#[test]
fn add_channel_bias() {
    check(vec![random(&[2, 3, 4, 4], 10), random(&[3], 11)], |g, v| {
        g.add_channel_bias(v[0], v[1]).unwrap()
    });
}

#[test]
fn channel_max() {
    // Keep every pair at least 0.1 apart so the step never crosses a kink.
    let mut rng = seeded(12);
    let mut data = Vec::new();
    for _ in 0..2 * 2 {
        let base: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let other: Vec<f64> = base
            .iter()
            .map(|b| b + if rng.random::<bool>() { 1.0 } else { -1.0 } * rng.random_range(0.1..1.0))
            .collect();
        data.extend(base);
        data.extend(other);
    }
    let x = Tensor::new(&[2, 4, 4, 4], data).unwrap();
    check(vec![x], |g, v| g.channel_max(v[0]).unwrap());
}

#[test]
fn batch_norm_training_and_inference() {
    let x = random(&[2, 3, 4, 4], 13);
    let gamma = positive(&[3], 14);
    let beta = random(&[3], 15);
    check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
        g.batch_norm(v[0], v[1], v[2], 1e-5).unwrap().0
    });
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 2.0];
    check(vec![x, gamma, beta], |g, v| {
        g.batch_norm_inference(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap()
    });
}

#[test]
fn dropout_with_fixed_mask() {
    check(vec![random(&[2, 2, 4, 4], 16)], |g, v| {
        let mut rng = seeded(99);
        g.dropout(v[0], 0.2, &mut rng).unwrap()
    });
}

#[test]
fn modulus_squared_block_mean() {
    check(vec![random(&[2, 2, 4, 4], 17)], |g, v| g.modulus_squared(v[0]).unwrap());
    check(vec![random(&[2, 1, 4, 4], 18)], |g, v| g.block_mean(v[0], 2).unwrap());
}

#[test]
fn fft2_and_ifft2() {
    check(vec![random(&[2, 2, 4, 4], 19)], |g, v| g.fft2(v[0]).unwrap());
    check(vec![random(&[1, 2, 4, 4], 20)], |g, v| g.ifft2(v[0]).unwrap());
}

#[test]
fn roll_and_diff() {
    let x = random(&[1, 2, 4, 4], 21);
    check(vec![x.clone()], |g, v| g.roll(v[0], 1, -1).unwrap());
    check(vec![x.clone()], |g, v| g.diff(v[0], true).unwrap());
    check(vec![x], |g, v| g.diff(v[0], false).unwrap());
}

#[test]
fn upsample_pad_add_concat_pool() {
    check(vec![random(&[2, 1, 2, 2], 22)], |g, v| g.upsample(v[0], 2).unwrap());
    check(vec![random(&[2, 2, 4, 4], 23), random(&[2, 3, 4, 4], 24)], |g, v| {
        g.pad_add(v[0], v[1]).unwrap()
    });
    check(vec![random(&[2, 1, 4, 4], 25), random(&[2, 2, 4, 4], 26)], |g, v| {
        g.concat_channels(v[0], v[1]).unwrap()
    });
    check(vec![random(&[2, 3, 4, 4], 27)], |g, v| g.global_mean_pool(v[0]).unwrap());
}

#[test]
fn channel_combine() {
    check(vec![positive(&[2, 5, 4, 4], 28), positive(&[5], 29)], |g, v| {
        g.channel_combine(v[0], v[1]).unwrap()
    });
}

#[test]
fn shot_noise_with_fixed_draws() {
    let mut rng = seeded(30);
    let draws: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    check(vec![positive(&[1, 1, 4, 4], 31)], move |g, v| g.shot_noise(v[0], &draws, 4.0).unwrap());
}

#[test]
fn reshape_is_transparent() {
    check(vec![random(&[2, 8], 32)], |g, v| g.reshape(v[0], &[4, 4]).unwrap());
}

#[test]
fn optics_chain_is_differentiable() {
    // fft -> roll -> mask -> ifft -> |.|^2 -> block mean
    let mask = Tensor::new(
        &[1, 2, 4, 4],
        (0..32).map(|i| if (i % 16) < 6 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    check(vec![random(&[1, 2, 4, 4], 33)], move |g, v| {
        let m = g.constant(mask.clone());
        let spec = g.fft2(v[0]).unwrap();
        let shifted = g.roll(spec, 1, 0).unwrap();
        let filtered = g.mul(shifted, m).unwrap();
        let field = g.ifft2(filtered).unwrap();
        let intensity = g.modulus_squared(field).unwrap();
        g.block_mean(intensity, 2).unwrap()
    });
}
