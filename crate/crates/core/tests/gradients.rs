//! Analytic gradients against central finite differences and hand-written
//! reference implementations.

use dnseg::divnorm::{dn_backward, dn_forward, DnParams};
use dnseg::tensor::{
    concat_channels, conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward, reflect_index,
    relu_backward, relu_forward, split_channels, upsample2_backward, upsample2_forward, ConvSpec, PaddingMode,
    Shape, Tensor,
};
use dnseg::train::mae_loss;
use dnseg::unet::{build_model, model_backward, model_forward, DnVariant, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: Shape, r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| r.gen_range(lo..hi))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central difference of `f` along every coordinate of `x`.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + STEP;
            let up = f(&x);
            x[i] = orig - STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert!(rel_err(*a, *n) < tol, "{what}[{i}]: analytic {a} vs numeric {n}");
    }
}

/// Direct-loop cross-correlation.
fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], padding: PaddingMode) -> Tensor<f64> {
    let s = x.shape();
    let ws = w.shape();
    let (rh, rw) = ((ws.h / 2) as isize, (ws.w / 2) as isize);
    Tensor::from_fn(Shape::new(s.n, ws.n, s.h, s.w), |n, o, y, xx| {
        let mut acc = b[o];
        for c in 0..s.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = y as isize + ky as isize - rh;
                    let ix = xx as isize + kx as isize - rw;
                    let v = match padding {
                        PaddingMode::Zero => {
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                0.0
                            } else {
                                x.get(n, c, iy as usize, ix as usize)
                            }
                        }
                        PaddingMode::Reflect => x.get(n, c, reflect_index(iy, s.h), reflect_index(ix, s.w)),
                    };
                    acc += w.get(o, c, ky, kx) * v;
                }
            }
        }
        acc
    })
}

/// Direct-loop normalization.
fn reference_dn(z: &Tensor<f64>, beta: &[f64], gamma: &Tensor<f64>) -> Tensor<f64> {
    let s = z.shape();
    let k = gamma.shape().h;
    let r = (k / 2) as isize;
    Tensor::from_fn(s, |n, i, y, x| {
        let mut d = beta[i];
        for j in 0..s.c {
            for dy in 0..k {
                for dx in 0..k {
                    let py = reflect_index(y as isize + dy as isize - r, s.h);
                    let px = reflect_index(x as isize + dx as isize - r, s.w);
                    d += gamma.get(i, j, dy, dx) * z.get(n, j, py, px).abs();
                }
            }
        }
        z.get(n, i, y, x) / d
    })
}

#[test]
fn conv_matches_direct_loops() {
    let mut r = rng(1);
    for padding in [PaddingMode::Zero, PaddingMode::Reflect] {
        for k in [1, 3, 5] {
            let spec = ConvSpec::same(3, 4, k, padding).unwrap();
            let x = random(Shape::new(2, 3, 7, 6), &mut r, -1.0, 1.0);
            let w = random(spec.weight_shape(), &mut r, -1.0, 1.0);
            let b: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            let got = conv2d_forward(&x, &w, &b, &spec).unwrap();
            let want = reference_conv(&x, &w, &b, padding);
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} {padding:?}");
        }
    }
}

#[test]
fn conv_hand_summation_centre() {
    let x = Tensor::new(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
    let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
    let spec = ConvSpec::same(1, 1, 3, PaddingMode::Zero).unwrap();
    let y = conv2d_forward(&x, &w, &[0.0], &spec).unwrap();
    assert_eq!(y.get(0, 0, 1, 1), 45.0);
    assert_eq!(y.get(0, 0, 0, 0), 1.0 + 2.0 + 4.0 + 5.0);
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut r = rng(2);
    for padding in [PaddingMode::Zero, PaddingMode::Reflect] {
        let spec = ConvSpec::same(2, 3, 3, padding).unwrap();
        let x = random(Shape::new(1, 2, 5, 5), &mut r, -1.0, 1.0);
        let w = random(spec.weight_shape(), &mut r, -1.0, 1.0);
        let b: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let out_shape = Shape::new(1, 3, 5, 5);
        let probe = random(out_shape, &mut r, -1.0, 1.0);
        let g = conv2d_backward(&x, &w, &probe, &spec).unwrap();

        let nx = numeric_grad(x.data(), |d| {
            let xt = Tensor::new(x.shape(), d.to_vec()).unwrap();
            dot(reference_conv(&xt, &w, &b, padding).data(), probe.data())
        });
        assert_close(g.input.data(), &nx, 1e-5, "conv input");
        let nw = numeric_grad(w.data(), |d| {
            let wt = Tensor::new(w.shape(), d.to_vec()).unwrap();
            dot(reference_conv(&x, &wt, &b, padding).data(), probe.data())
        });
        assert_close(g.weights.data(), &nw, 1e-5, "conv weights");
        let nb = numeric_grad(&b, |d| dot(reference_conv(&x, &w, d, padding).data(), probe.data()));
        assert_close(&g.bias, &nb, 1e-5, "conv bias");
    }
}

#[test]
fn maxpool_backward_matches_finite_differences() {
    let mut r = rng(3);
    // Distinct values keep every window away from a tie.
    let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.gen_range(0..=i));
    }
    let x = Tensor::new(Shape::new(1, 2, 4, 4), vals).unwrap();
    let probe = random(Shape::new(1, 2, 2, 2), &mut r, -1.0, 1.0);
    let (_, idx) = maxpool2_forward(&x).unwrap();
    let g = maxpool2_backward(&probe, &idx).unwrap();
    let n = numeric_grad(x.data(), |d| {
        let xt = Tensor::new(x.shape(), d.to_vec()).unwrap();
        dot(maxpool2_forward(&xt).unwrap().0.data(), probe.data())
    });
    assert_close(g.data(), &n, 1e-6, "maxpool");

    let neg = Tensor::new(Shape::new(1, 1, 2, 2), vec![-1.0, -2.0, -3.0, -4.0]).unwrap();
    assert_eq!(maxpool2_forward(&neg).unwrap().0.data(), &[-1.0]);
}

#[test]
fn upsample_backward_is_block_sum() {
    let mut r = rng(4);
    let x = random(Shape::new(2, 2, 3, 3), &mut r, -1.0, 1.0);
    let back = upsample2_backward(&upsample2_forward(&x)).unwrap();
    assert!(back.max_abs_diff(&x.scale(4.0)) < 1e-15);

    let probe = random(Shape::new(2, 2, 6, 6), &mut r, -1.0, 1.0);
    let g = upsample2_backward(&probe).unwrap();
    let n = numeric_grad(x.data(), |d| {
        let xt = Tensor::new(x.shape(), d.to_vec()).unwrap();
        dot(upsample2_forward(&xt).data(), probe.data())
    });
    assert_close(g.data(), &n, 1e-6, "upsample");
}

#[test]
fn relu_and_concat_gradients() {
    let mut r = rng(5);
    let x = Tensor::from_fn(Shape::new(1, 2, 4, 4), |_, _, _, _| {
        let v: f64 = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let probe = random(x.shape(), &mut r, -1.0, 1.0);
    let g = relu_backward(&x, &probe).unwrap();
    let n = numeric_grad(x.data(), |d| {
        let xt = Tensor::new(x.shape(), d.to_vec()).unwrap();
        dot(relu_forward(&xt).data(), probe.data())
    });
    assert_close(g.data(), &n, 1e-6, "relu");

    let a = random(Shape::new(2, 2, 3, 3), &mut r, -1.0, 1.0);
    let b = random(Shape::new(2, 3, 3, 3), &mut r, -1.0, 1.0);
    let ab = concat_channels(&a, &b).unwrap();
    assert_eq!(ab.shape(), Shape::new(2, 5, 3, 3));
    let (a2, b2) = split_channels(&ab, 2).unwrap();
    assert_eq!((a2, b2), (a, b));
}

#[test]
fn mae_gradient_matches_finite_differences() {
    let mut r = rng(6);
    let logits = random(Shape::new(2, 3, 4, 4), &mut r, -0.5, 1.5);
    let labels: Vec<u16> = (0..32).map(|_| r.gen_range(0..3)).collect();
    let (_, g) = mae_loss(&logits, &labels).unwrap();
    let n = numeric_grad(logits.data(), |d| {
        let t = Tensor::new(logits.shape(), d.to_vec()).unwrap();
        mae_loss(&t, &labels).unwrap().0
    });
    assert_close(g.data(), &n, 1e-6, "mae");

    let single = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1));
    assert_eq!(mae_loss(&single, &[0]).unwrap().0, 0.5);
}

fn random_dn(channels: usize, window: usize, r: &mut ChaCha8Rng) -> DnParams<f64> {
    let beta = (0..channels).map(|_| r.gen_range(0.2..1.5)).collect();
    let gamma = random(Shape::new(channels, channels, window, window), r, 0.0, 0.3);
    DnParams::new(beta, gamma).unwrap()
}

#[test]
fn dn_forward_matches_direct_loops() {
    let mut r = rng(7);
    for window in [1, 3, 5] {
        let p = random_dn(3, window, &mut r);
        let z = random(Shape::new(2, 3, 6, 7), &mut r, -2.0, 2.0);
        let (y, _) = dn_forward(&z, &p).unwrap();
        assert!(y.max_abs_diff(&reference_dn(&z, &p.beta, &p.gamma)) < 1e-13);
    }
}

#[test]
fn dn_scalar_derivatives() {
    let p = DnParams::<f64>::new(vec![1.0], Tensor::full(Shape::new(1, 1, 1, 1), 1.0)).unwrap();
    let z = Tensor::full(Shape::new(1, 1, 1, 1), 2.0);
    let (y, d) = dn_forward(&z, &p).unwrap();
    assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
    let g = dn_backward(&z, &p, &d, &Tensor::full(z.shape(), 1.0)).unwrap();
    assert!((g.input.data()[0] - 1.0 / 9.0).abs() < 1e-15);
    assert!((g.beta[0] + 2.0 / 9.0).abs() < 1e-15);
    assert!((g.gamma.data()[0] + 4.0 / 9.0).abs() < 1e-15);
}

#[test]
fn dn_backward_matches_finite_differences() {
    let mut r = rng(8);
    let p = random_dn(3, 5, &mut r);
    // Magnitudes stay away from the kink at zero.
    let z = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, _, _, _| {
        let v: f64 = r.gen_range(0.05..2.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let probe = random(z.shape(), &mut r, -1.0, 1.0);
    let (_, d) = dn_forward(&z, &p).unwrap();
    let g = dn_backward(&z, &p, &d, &probe).unwrap();

    let nz = numeric_grad(z.data(), |v| {
        let zt = Tensor::new(z.shape(), v.to_vec()).unwrap();
        dot(reference_dn(&zt, &p.beta, &p.gamma).data(), probe.data())
    });
    assert_close(g.input.data(), &nz, 1e-4, "dn input");
    let nb = numeric_grad(&p.beta, |b| dot(reference_dn(&z, b, &p.gamma).data(), probe.data()));
    assert_close(&g.beta, &nb, 1e-4, "dn beta");
    let ng = numeric_grad(p.gamma.data(), |v| {
        let gt = Tensor::new(p.gamma.shape(), v.to_vec()).unwrap();
        dot(reference_dn(&z, &p.beta, &gt).data(), probe.data())
    });
    assert_close(g.gamma.data(), &ng, 1e-4, "dn gamma");

    let zero = dn_backward(&z, &p, &d, &Tensor::zeros(z.shape())).unwrap();
    assert!(zero.input.data().iter().chain(&zero.beta).chain(zero.gamma.data()).all(|&v| v == 0.0));
}

#[test]
fn tiny_unet_gradients_match_finite_differences() {
    let mut r = rng(9);
    let config = UNetConfig::new(3, DnVariant::Dn4, 11).with_encoder_channels(&[2, 3, 4]);
    let mut model = build_model::<f64>(&config).unwrap();
    model.randomize_head(&mut dnseg::rng::substream(11, "head"));
    for site in model.dn_sites() {
        let p = model.dn_site_mut(site).unwrap();
        for v in p.gamma.data_mut() {
            *v = r.gen_range(0.01..0.2);
        }
    }
    let x = random(Shape::new(1, 3, 8, 8), &mut r, 0.0, 1.0);
    let probe = random(Shape::new(1, 3, 8, 8), &mut r, -1.0, 1.0);
    let (_, cache) = model_forward(&model, &x).unwrap();
    let pattern = cache.activation_pattern();
    let grads = model_backward(&model, &cache, &probe).unwrap();
    let analytic: Vec<Vec<f64>> = grads.params().iter().map(|p| p.data.to_vec()).collect();

    let objective = |m: &dnseg::UNet<f64>| {
        let (y, c) = model_forward(m, &x).unwrap();
        (dot(y.data(), probe.data()), c.activation_pattern())
    };
    let mut checked = 0;
    let buffers = model.params().len();
    for b in 0..buffers {
        let len = model.params()[b].data.len();
        // Every coordinate of small buffers, a stride through large ones.
        let stride = (len / 12).max(1);
        for i in (0..len).step_by(stride) {
            let orig = model.params()[b].data[i];
            model.params_mut()[b].1[i] = orig + STEP;
            let (up, pu) = objective(&model);
            model.params_mut()[b].1[i] = orig - STEP;
            let (down, pd) = objective(&model);
            model.params_mut()[b].1[i] = orig;
            if pu != pattern || pd != pattern {
                continue;
            }
            let n = (up - down) / (2.0 * STEP);
            let a = analytic[b][i];
            assert!(rel_err(a, n) < 1e-3, "{} [{i}]: {a} vs {n}", model.params()[b].name);
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} coordinates checked");
}
