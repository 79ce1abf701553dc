use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Builds `sum(op(inputs) * probe)` so every output element carries a
/// distinct weight.
fn probed<F>(g: &mut Graph<f64>, vars: &[Var], op: &F, seed: u64) -> Var
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let y = op(g, vars);
    if g.value(y).numel() == 1 {
        return y;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let c = g.constant(probe);
    let m = g.mul(y, c).unwrap();
    g.sum(m)
}

/// Compares analytic gradients of every input with central differences
/// (h = 1e-5), returning the worst relative error.
fn grad_check<F>(inputs: &[Tensor<f64>], op: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut store = ParamStore::new();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = probed(&mut g, &vars, &op, 99);
    g.backward(loss, &mut store).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone(), false)).collect();
        let l = probed(&mut g, &vars, &op, 99);
        g.data(l)[0]
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        for (j, &a) in analytic[k].iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            // the floor absorbs difference-quotient rounding on near-zero entries
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn dense_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let w = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.data(y), &[4.0, 6.0]);

    let zero = g.constant(Tensor::zeros(&[2]));
    let y = g.dense(x, w, zero).unwrap();
    assert_eq!(g.data(y), &[1.0, 2.0]);

    let bad = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(
        g.dense(x, bad, b),
        Err(AutodiffError::ShapeMismatch { .. })
    ));
}

#[test]
fn dense_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ins = [
        rand_tensor(&mut rng, &[3, 4], -1.0, 1.0),
        rand_tensor(&mut rng, &[4, 5], -1.0, 1.0),
        rand_tensor(&mut rng, &[5], -1.0, 1.0),
    ];
    let err = grad_check(&ins, |g, v| g.dense(v[0], v[1], v[2]).unwrap());
    assert!(err < 1e-6, "dense rel err {err}");
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = g.constant(rand_tensor(&mut rng, &[1, 1, 5, 5], -1.0, 1.0));
    let mut ident = vec![0.0; 9];
    ident[4] = 1.0;
    let k = g.constant(Tensor::from_f64(&[1, 1, 3, 3], &ident).unwrap());
    let y = g.conv2d(x, k, 1).unwrap();
    assert_eq!(g.data(y), g.data(x));

    let ones = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let kones = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(ones, kones, 1).unwrap();
    assert_eq!(g.data(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);

    let big = g.constant(Tensor::full(&[2, 3, 8, 6], 1.0));
    let k = g.constant(Tensor::full(&[4, 3, 3, 3], 1.0));
    let y = g.conv2d(big, k, 2).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 4, 3]);
    assert!(g.conv2d(big, kones, 1).is_err());
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for stride in [1, 2] {
        let ins = [
            rand_tensor(&mut rng, &[2, 2, 5, 6], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
        ];
        let err = grad_check(&ins, |g, v| g.conv2d(v[0], v[1], stride).unwrap());
        assert!(err < 1e-6, "conv2d stride {stride} rel err {err}");
    }
}

#[test]
fn conv3d_gradients_and_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for stride in [1, 2] {
        let ins = [
            rand_tensor(&mut rng, &[1, 2, 4, 4, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 2, 3, 3, 3], -1.0, 1.0),
        ];
        let err = grad_check(&ins, |g, v| g.conv3d(v[0], v[1], stride).unwrap());
        assert!(err < 1e-6, "conv3d stride {stride} rel err {err}");
    }
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 8, 8, 8]));
    let k = g.constant(Tensor::zeros(&[3, 1, 3, 3, 3]));
    let y = g.conv3d(x, k, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 4, 4, 4]);
}

/// Independent scatter-add transposed convolution.
fn tconv_oracle(x: &Tensor<f64>, k: &Tensor<f64>) -> Vec<f64> {
    let xs = x.shape();
    let (c_in, d) = (xs[1], xs[2]);
    let f_out = k.shape()[1];
    let o = 2 * d;
    let mut y = vec![0.0; f_out * o * o * o];
    for c in 0..c_in {
        for iz in 0..d {
            for iy in 0..d {
                for ix in 0..d {
                    let xv = x.data()[((c * d + iz) * d + iy) * d + ix];
                    for f in 0..f_out {
                        for kz in 0..4 {
                            for ky in 0..4 {
                                for kx in 0..4 {
                                    let oz = (2 * iz + kz) as isize - 1;
                                    let oy = (2 * iy + ky) as isize - 1;
                                    let ox = (2 * ix + kx) as isize - 1;
                                    let range = 0..o as isize;
                                    if !(range.contains(&oz)
                                        && range.contains(&oy)
                                        && range.contains(&ox))
                                    {
                                        continue;
                                    }
                                    let w =
                                        k.data()[(((c * f_out + f) * 4 + kz) * 4 + ky) * 4 + kx];
                                    let idx =
                                        ((f * o + oz as usize) * o + oy as usize) * o + ox as usize;
                                    y[idx] += w * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[test]
fn tconv3d_matches_scatter_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[1, 1, 2, 2, 2], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[1, 1, 4, 4, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.tconv3d(xv, kv).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4, 4]);
    let oracle = tconv_oracle(&x, &k);
    for (a, b) in g.data(y).iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }

    let x2 = rand_tensor(&mut rng, &[1, 3, 3, 3, 3], -1.0, 1.0);
    let k2 = rand_tensor(&mut rng, &[3, 2, 4, 4, 4], -1.0, 1.0);
    let (xv, kv) = (g.constant(x2.clone()), g.constant(k2.clone()));
    let y = g.tconv3d(xv, kv).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 6, 6, 6]);
    for (a, b) in g.data(y).iter().zip(&tconv_oracle(&x2, &k2)) {
        assert!((a - b).abs() < 1e-12);
    }

    let z = g.constant(Tensor::zeros(&[1, 3, 3, 3, 3]));
    let y = g.tconv3d(z, kv).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn tconv3d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ins = [
        rand_tensor(&mut rng, &[2, 2, 2, 2, 2], -1.0, 1.0),
        rand_tensor(&mut rng, &[2, 3, 4, 4, 4], -1.0, 1.0),
    ];
    let err = grad_check(&ins, |g, v| g.tconv3d(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "tconv3d rel err {err}");
}

#[test]
fn activation_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2], &[2.0, -1.0]).unwrap());
    let y = g.elu(x);
    assert_eq!(g.data(y)[0], 2.0);
    assert!((g.data(y)[1] - (-1.0f64).exp_m1()).abs() < 1e-15);
    assert!((g.data(y)[1] + 0.63212).abs() < 1e-5);

    let l = g.constant(Tensor::from_f64(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap());
    let s = g.softmax(l);
    for (a, b) in g.data(s).iter().zip([1.0 / 6.0, 1.0 / 3.0, 0.5]) {
        assert!((a - b).abs() < 1e-15);
    }

    let big = g.constant(Tensor::from_f64(&[3], &[-800.0, 0.0, 800.0]).unwrap());
    let sg = g.sigmoid(big);
    assert!(g.data(sg).iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[3, 7], -3.0, 3.0);
    let shifted = Tensor::new(vec![3, 7], x.data().iter().map(|v| v + 123.25).collect()).unwrap();
    let mut g = Graph::new();
    let (a, b) = (g.constant(x), g.constant(shifted));
    let (sa, sb) = (g.softmax(a), g.softmax(b));
    for (p, q) in g.data(sa).iter().zip(g.data(sb)) {
        assert!((p - q).abs() < 1e-12);
    }
    for row in g.data(sa).chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // keep away from the ELU kink at 0
    let mut x = rand_tensor(&mut rng, &[2, 3, 4], 0.05, 1.5);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    let err = grad_check(std::slice::from_ref(&x), |g, v| g.elu(v[0]));
    assert!(err < 1e-4, "elu {err}");
    let err = grad_check(std::slice::from_ref(&x), |g, v| g.sigmoid(v[0]));
    assert!(err < 1e-4, "sigmoid {err}");
    let err = grad_check(std::slice::from_ref(&x), |g, v| g.softmax(v[0]));
    assert!(err < 1e-4, "softmax {err}");
    let err = grad_check(std::slice::from_ref(&x), |g, v| {
        g.softmax_axis(v[0], 0).unwrap()
    });
    assert!(err < 1e-4, "softmax axis 0 {err}");
    let err = grad_check(std::slice::from_ref(&x), |g, v| {
        g.softmax_axis(v[0], 1).unwrap()
    });
    assert!(err < 1e-4, "softmax axis 1 {err}");

    let p = rand_tensor(&mut rng, &[10], 0.05, 0.95);
    let err = grad_check(std::slice::from_ref(&p), |g, v| g.logit(v[0], 1e-7));
    assert!(err < 1e-4, "logit {err}");
    let target: Vec<f64> = (0..10).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let err = grad_check(std::slice::from_ref(&p), |g, v| {
        g.bce(v[0], &target, 1e-7).unwrap()
    });
    assert!(err < 1e-4, "bce {err}");
}

#[test]
fn structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[2], 0.0, 1.0);
    let err = grad_check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    assert!(err < 1e-6);
    let err = grad_check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    assert!(err < 1e-6);
    let err = grad_check(&[a.clone(), bias], |g, v| {
        g.bias_channels(v[0], v[1]).unwrap()
    });
    assert!(err < 1e-6);
    let err = grad_check(&[a.clone(), b.clone()], |g, v| {
        let s = g.stack(&[v[0], v[1]]).unwrap();
        let t = g.select(s, 1).unwrap();
        let r = g.reshape(t, &[24]).unwrap();
        g.scale(r, 0.5)
    });
    assert!(err < 1e-6);
    let err = grad_check(&[w, a, b], |g, v| {
        let s = g.stack(&[v[1], v[2]]).unwrap();
        g.mix(v[0], s).unwrap()
    });
    assert!(err < 1e-6);
}

#[test]
fn backward_basics() {
    let mut store = ParamStore::new();
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap(), true);
    let s = g.sum(x);
    g.backward(s, &mut store).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    // accumulates without zeroing
    g.backward(s, &mut store).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);

    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    g.backward(l, &mut store).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);

    assert!(matches!(
        g.backward(sq, &mut store),
        Err(AutodiffError::NonScalarLoss(_))
    ));
}

#[test]
fn params_accumulate_into_store() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
    for _ in 0..2 {
        let mut g = Graph::<f64>::new();
        let w = g.param(&store, id);
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq);
        g.backward(l, &mut store).unwrap();
    }
    assert_eq!(store.grad(id).data(), &[12.0, 16.0]);
    store.zero_grad();
    assert!(!store.grads_ready());

    let mut g = Graph::<f64>::inference();
    let w = g.param(&store, id);
    let l = g.sum(w);
    g.backward(l, &mut store).unwrap();
    assert!(!store.grads_ready());
}

#[test]
fn sgd_and_adam_steps() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::scalar(1.0f64));
    let mut sgd = Optimizer::sgd(0.1);
    assert!(matches!(
        sgd.step(&mut store),
        Err(AutodiffError::MissingGrads)
    ));
    store.accumulate_grad(id, &[2.0]);
    sgd.step(&mut store).unwrap();
    assert!((store.value(id).data()[0] - 0.8).abs() < 1e-15);
    assert_eq!(store.grad(id).data(), &[0.0]);

    // first Adam step moves by lr regardless of gradient scale
    for gval in [0.003, 5.0, -40.0] {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0f64));
        let mut adam = Optimizer::adam(1e-3, &store);
        store.accumulate_grad(id, &[gval]);
        adam.step(&mut store).unwrap();
        let moved = 1.0 - store.value(id).data()[0];
        let expected = 1e-3 * gval / (gval.abs() + 1e-8);
        assert!((moved - expected).abs() < 1e-12, "{moved} vs {expected}");
        assert_eq!(adam.step, 1);
    }

    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::scalar(1.0f64));
    let mut adam = Optimizer::adam(1e-3, &store);
    store.accumulate_grad(id, &[0.0]);
    adam.step(&mut store).unwrap();
    assert_eq!(store.value(id).data()[0], 1.0);
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap());
        let mut adam = Optimizer::adam(1e-2, &store);
        for k in 0..5 {
            store.accumulate_grad(id, &[k as f64, -1.0, 0.5]);
            adam.step(&mut store).unwrap();
        }
        store.value(id).clone()
    };
    assert_eq!(run(), run());
}
