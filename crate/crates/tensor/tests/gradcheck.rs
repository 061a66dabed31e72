//! Central finite-difference checks for every differentiable op.

use std::sync::Arc;

use posexfer_tensor::{BatchNormMode, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>;

/// Max relative error between analytic and numeric gradients over all inputs.
fn check(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.param(Arc::new(x.clone()))).collect();
        build(&tape, &vars).value().item()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(Arc::new(x.clone()))).collect();
    let out = build(&tape, &vars);
    let grads = tape.backward(out);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut num = Tensor::zeros(input.shape());
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            num.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff = analytic.zip_map(&num, |a, b| a - b).sum_sq().sqrt();
        let scale = num.sum_sq().sqrt().max(analytic.sum_sq().sqrt()).max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn probe(shape: &[usize]) -> Arc<Tensor<f64>> {
    Arc::new(Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(99)))
}

#[test]
fn conv2d_stride_and_padding() {
    let mut r = rng();
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, k, k], 0.5, &mut r);
        let ho = (6 + 2 * pad - k) / stride + 1;
        let c = probe(&[2, 4, ho, ho]);
        let err = check(&[x, w], &move |_, v| v[0].conv2d(&v[1], stride, pad).weighted_sum(c.clone()));
        assert!(err < 1e-6, "stride {stride} pad {pad} k {k}: {err}");
    }
}

#[test]
fn batch_norm_train_and_eval() {
    let mut r = rng();
    let x = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let g = Tensor::randn(&[2], 1.0, &mut r);
    let b = Tensor::randn(&[2], 1.0, &mut r);
    let c = probe(&[3, 2, 3, 3]);
    let c2 = c.clone();
    let err = check(&[x.clone(), g.clone(), b.clone()], &move |_, v| {
        v[0].batch_norm(&v[1], &v[2], BatchNormMode::Train { eps: 1e-5 })
            .y
            .weighted_sum(c.clone())
    });
    assert!(err < 1e-6, "train bn {err}");
    let err = check(&[x, g, b], &move |_, v| {
        v[0].batch_norm(
            &v[1],
            &v[2],
            BatchNormMode::Eval {
                mean: &[0.3, -0.2],
                var: &[1.5, 0.7],
                eps: 1e-5,
            },
        )
        .y
        .weighted_sum(c2.clone())
    });
    assert!(err < 1e-6, "eval bn {err}");
}

#[test]
fn pointwise_activations_and_bias() {
    let mut r = rng();
    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
    let b = Tensor::randn(&[3], 1.0, &mut r);
    let c = probe(&[2, 3, 4, 4]);
    let err = check(&[x, b], &move |_, v| {
        let y = v[0].add_bias(&v[1]);
        let y = Var::sum(&[y.leaky_relu(0.2), y.tanh(), y.sigmoid().scale(3.0)]);
        y.channel_affine(&[0.5, 2.0, -1.0], &[0.1, 0.2, 0.3])
            .weighted_sum(c.clone())
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn pooling_upsampling_crops_and_cat() {
    let mut r = rng();
    let a = Tensor::randn(&[2, 2, 8, 8], 1.0, &mut r);
    let b = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r);
    let c = probe(&[3, 5, 4, 4]);
    let err = check(&[a, b], &move |_, v| {
        let joined = Var::cat(&[v[0], v[1]], 1);
        let round = Var::sum(&[joined.avg_pool2(), joined.max_pool2()]).upsample_nearest(2);
        round
            .crops(&[(0, 0, 0), (1, 4, 2), (0, 2, 3)], 4, 4)
            .weighted_sum(c.clone())
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn reductions_and_criteria() {
    let mut r = rng();
    let a = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
    let b = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
    let err = check(&[a, b], &|_, v| {
        let m = v[0].sub(&v[1]).add(&v[0]).mean_all();
        let s = v[0].mean_sq_diff(&v[1]);
        let l = v[0].mean_abs_diff(&v[1]);
        let p = v[0].sigmoid().mean_per_sample().bce(&[1.0, 0.0]);
        Var::sum(&[m, s, l, p])
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn spectral_normalization_through_sigma() {
    let mut r = rng();
    let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let c = probe(&[3, 2, 3, 3]);
    // sigma and the singular vectors are recomputed from W inside the closure
    // so the numeric derivative sees the full dependence on W.
    let err = check(&[w], &move |_, v| {
        let wv = v[0].value();
        let (u, vv, sigma) = top_singular(wv.data(), 3, 18);
        v[0].spectral_normalize(&u, &vv, sigma).weighted_sum(c.clone())
    });
    assert!(err < 1e-5, "{err}");
}

fn top_singular(w: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let mut u = vec![1.0; rows];
    let mut v = vec![0.0; cols];
    for _ in 0..500 {
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..rows).map(|i| w[i * cols + j] * u[i]).sum();
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = (0..cols).map(|j| w[i * cols + j] * v[j]).sum();
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= n);
    }
    let sigma = (0..rows)
        .map(|i| u[i] * (0..cols).map(|j| w[i * cols + j] * v[j]).sum::<f64>())
        .sum();
    (u, v, sigma)
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::<f32>::new();
    let x = tape.param(Arc::new(Tensor::ones(&[1, 1, 2, 2])));
    let k = tape.constant_tensor(Tensor::ones(&[1, 1, 1, 1]));
    let y = x.conv2d(&k, 1, 0).mean_all();
    let g = tape.backward(y);
    assert!(g.get(k).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
}
