use advtrain::gradcheck::{finite_difference_grad, max_relative_error};
use advtrain::{autodiff, GradientContext, Reduction, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Direct convolution; out-of-image taps are skipped. Also returns, per
/// output, the sum of absolute products as a scale for 32-bit comparisons.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    (b, c, h, wd): (usize, usize, usize, usize),
    (f, k): (usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    let mut scale = Vec::new();
    for n in 0..b {
        for fi in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let (mut acc, mut abs) = (0.0, 0.0);
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let r = (i * stride + ki) as isize - pad as isize;
                                let q = (j * stride + kj) as isize - pad as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                    continue;
                                }
                                let t = w[((fi * c + ci) * k + ki) * k + kj]
                                    * x[((n * c + ci) * h + r as usize) * wd + q as usize];
                                acc += t;
                                abs += t.abs();
                            }
                        }
                    }
                    out.push(acc);
                    scale.push(abs);
                }
            }
        }
    }
    (out, scale, oh, ow)
}

fn close32(got: &[f32], want: &[f64], scale: &[f64]) -> bool {
    got.iter()
        .zip(want)
        .zip(scale)
        .all(|((&g, &w), &s)| (g as f64 - w).abs() <= 1e-5 * s.max(1e-30))
}

prop_compose! {
    fn matmul_case()(m in 1usize..6, k in 1usize..9, n in 1usize..6)
        (a in values(m * k), b in values(k * n), m in Just(m), k in Just(k), n in Just(n))
        -> (Vec<f64>, Vec<f64>, usize, usize, usize) { (a, b, m, k, n) }
}

prop_compose! {
    fn conv_case()(b in 1usize..3, c in 1usize..3, h in 3usize..8, wd in 3usize..8,
                   f in 1usize..3, k in 1usize..4, stride in 1usize..3, pad in 0usize..3)
        (x in values(b * c * h * wd), w in values(f * c * k * k),
         dims in Just((b, c, h, wd)), fk in Just((f, k)), stride in Just(stride), pad in Just(pad))
        -> (Vec<f64>, Vec<f64>, (usize, usize, usize, usize), (usize, usize), usize, usize)
    { (x, w, dims, fk, stride, pad) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matmul_matches_the_naive_loop((a, b, m, k, n) in matmul_case()) {
        let ta = Tensor::new(vec![m, k], a.clone()).unwrap();
        let tb = Tensor::new(vec![k, n], b.clone()).unwrap();
        let want = naive_matmul(&a, &b, m, k, n);
        let got = ta.matmul(&tb).unwrap();
        prop_assert_eq!(got.data(), &want[..]);

        let abs_a: Vec<f64> = a.iter().map(|v| v.abs()).collect();
        let abs_b: Vec<f64> = b.iter().map(|v| v.abs()).collect();
        let scale = naive_matmul(&abs_a, &abs_b, m, k, n);
        let got = ta.cast::<f32>().matmul(&tb.cast::<f32>()).unwrap();
        prop_assert!(close32(got.data(), &want, &scale));
    }

    #[test]
    fn conv2d_matches_the_naive_loop((x, w, dims, fk, stride, pad) in conv_case()) {
        let (b, c, h, wd) = dims;
        let (f, k) = fk;
        prop_assume!(h + 2 * pad >= k && wd + 2 * pad >= k);
        let tx = Tensor::new(vec![b, c, h, wd], x.clone()).unwrap();
        let tw = Tensor::new(vec![f, c, k, k], w.clone()).unwrap();
        let (want, scale, oh, ow) = naive_conv(&x, &w, dims, fk, stride, pad);
        let got = tx.conv2d(&tw, stride, pad).unwrap();
        prop_assert_eq!(got.shape(), &[b, f, oh, ow][..]);
        prop_assert_eq!(got.data(), &want[..]);
        let got = tx.cast::<f32>().conv2d(&tw.cast::<f32>(), stride, pad).unwrap();
        prop_assert!(close32(got.data(), &want, &scale));
    }

    #[test]
    fn maxpool_matches_the_naive_loop(b in 1usize..3, c in 1usize..3, h in 2usize..9, wd in 2usize..9, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..b * c * h * wd).map(|_| r.gen_range(-1.0..1.0)).collect();
        let got = Tensor::new(vec![b, c, h, wd], x.clone()).unwrap().maxpool2x2().unwrap();
        let mut want = Vec::new();
        for p in 0..b * c {
            for i in 0..h / 2 {
                for j in 0..wd / 2 {
                    let at = |di: usize, dj: usize| x[(p * h + 2 * i + di) * wd + 2 * j + dj];
                    want.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                }
            }
        }
        prop_assert_eq!(got.shape(), &[b, c, h / 2, wd / 2][..]);
        prop_assert_eq!(got.data(), &want[..]);
    }

    #[test]
    fn cross_entropy_is_non_negative(n in 1usize..5, classes in 2usize..7, seed in any::<u64>(), spread in 0.0f64..60.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..n * classes).map(|_| r.gen_range(-spread..=spread)).collect();
        let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let loss = autodiff::softmax_cross_entropy(&Tensor::new(vec![n, classes], z).unwrap(), &y).unwrap();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c(n in 1usize..5, classes in 2usize..12, level in -50.0f64..50.0) {
        let ln_c = (classes as f64).ln();
        for y in 0..classes {
            let z = Tensor::full(vec![1, classes], level);
            prop_assert_eq!(autodiff::softmax_cross_entropy(&z, &[y]).unwrap(), ln_c);
        }
        // Averaging a batch adds ordinary rounding.
        let z = Tensor::full(vec![n, classes], level);
        let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mean = autodiff::softmax_cross_entropy(&z, &y).unwrap();
        prop_assert!((mean - ln_c).abs() <= 4.0 * f64::EPSILON * ln_c);
    }

    #[test]
    fn sign_and_clamp_are_idempotent(x in values(16), lo in -1.0f64..0.0, hi in 0.0f64..1.0) {
        let t = Tensor::new(vec![16], x).unwrap();
        prop_assert_eq!(t.sign().sign(), t.sign());
        let c = t.clamp(lo, hi);
        prop_assert_eq!(c.clamp(lo, hi), c);
    }

    #[test]
    fn ops_are_deterministic((x, w, dims, fk, stride, pad) in conv_case()) {
        let (b, c, h, wd) = dims;
        let (f, k) = fk;
        prop_assume!(h + 2 * pad >= k && wd + 2 * pad >= k);
        let tx = Tensor::new(vec![b, c, h, wd], x).unwrap();
        let tw = Tensor::new(vec![f, c, k, k], w).unwrap();
        let once = tx.conv2d(&tw, stride, pad).unwrap();
        prop_assert_eq!(&once, &tx.conv2d(&tw, stride, pad).unwrap());
        if once.shape()[2] >= 2 && once.shape()[3] >= 2 {
            prop_assert_eq!(once.maxpool2x2().unwrap(), once.maxpool2x2().unwrap());
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient of every differentiable op against central differences.

const H: f64 = 1e-5;

fn random(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    // Entries near zero would put a ReLU kink inside the difference stencil.
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.gen_range(0.05..1.0);
            if r.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

type Build = dyn for<'a> Fn(&mut GradientContext<'a, f64>, Var, &'a Tensor<f64>) -> Var;

/// `½‖op(x) − target‖²` as a function of `x`: analytic gradient and the
/// largest relative error against central differences.
fn check(x: &Tensor<f64>, other: &Tensor<f64>, target_seed: u64, op: &Build) -> f64 {
    let loss_of = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
        let mut ctx = GradientContext::new();
        let xv = ctx.input(x);
        let y = op(&mut ctx, xv, other);
        let shape = ctx.value(y).shape().to_vec();
        let mut r = ChaCha8Rng::seed_from_u64(target_seed);
        let target = random(&mut r, shape);
        let t = ctx.constant_owned(target);
        let d = ctx.sub(y, t).unwrap();
        let loss = ctx.half_squared_norm(d).unwrap();
        let value = ctx.value(loss).item();
        let mut g = ctx.backward(loss).unwrap();
        (value, g.take(xv))
    };
    let analytic = loss_of(x).1.expect("input receives a gradient");
    let numeric = finite_difference_grad(|p| Ok(loss_of(p).0), x, H).unwrap();
    max_relative_error(analytic.data(), numeric.data())
}

#[test]
fn every_op_matches_finite_differences_over_100_seeds() {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let ops: Vec<(&str, Box<Build>)> = vec![
        ("matmul", Box::new(|c, x, w| {
            let wv = c.constant(w);
            c.matmul(x, wv).unwrap()
        })),
        ("matmul (rhs)", Box::new(|c, x, a| {
            let av = c.constant(a);
            c.matmul(av, x).unwrap()
        })),
        ("conv2d", Box::new(|c, x, k| {
            let kv = c.constant(k);
            c.conv2d(x, kv, 1, 1).unwrap()
        })),
        ("relu", Box::new(|c, x, _| c.relu(x))),
        ("maxpool2x2", Box::new(|c, x, _| c.maxpool2x2(x).unwrap())),
        ("reshape", Box::new(|c, x, _| {
            let n = c.value(x).len();
            c.reshape(x, vec![n]).unwrap()
        })),
        ("add", Box::new(|c, x, o| {
            let ov = c.constant(o);
            c.add(x, ov).unwrap()
        })),
        ("scale", Box::new(|c, x, _| c.scale(x, -1.7).unwrap())),
        ("sum", Box::new(|c, x, _| c.sum(x).unwrap())),
        ("softmax_cross_entropy", Box::new(|c, x, _| {
            let n = c.value(x).shape()[0];
            let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
            c.softmax_cross_entropy(x, &y, Reduction::Mean).unwrap()
        })),
    ];
    for (name, op) in &ops {
        let mut max_err = 0.0f64;
        for seed in 0..100u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (x, other) = match *name {
                "matmul" => (random(&mut r, vec![3, 4]), random(&mut r, vec![4, 2])),
                "matmul (rhs)" => (random(&mut r, vec![4, 2]), random(&mut r, vec![3, 4])),
                "conv2d" => (random(&mut r, vec![2, 2, 4, 4]), random(&mut r, vec![3, 2, 3, 3])),
                "maxpool2x2" => (random(&mut r, vec![2, 2, 4, 5]), Tensor::zeros(vec![1])),
                "add" => (random(&mut r, vec![3, 4]), random(&mut r, vec![3, 4])),
                "softmax_cross_entropy" => (random(&mut r, vec![4, 3]), Tensor::zeros(vec![1])),
                _ => (random(&mut r, vec![2, 3, 2]), Tensor::zeros(vec![1])),
            };
            max_err = max_err.max(check(&x, &other, seed + 1000, op.as_ref()));
        }
        worst.push((name, max_err));
    }
    // Bias additions take the bias as the differentiated argument.
    for (name, channel) in [("add_bias", false), ("add_channel_bias", true)] {
        let mut max_err = 0.0f64;
        for seed in 0..100u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let base = if channel {
                random(&mut r, vec![2, 3, 2, 2])
            } else {
                random(&mut r, vec![4, 3])
            };
            let bias = random(&mut r, vec![3]);
            let op = move |c: &mut GradientContext<'_, f64>, b: Var, x: &Tensor<f64>| {
                let xv = c.constant_owned(x.clone());
                if channel {
                    c.add_channel_bias(xv, b).unwrap()
                } else {
                    c.add_bias(xv, b).unwrap()
                }
            };
            max_err = max_err.max(check(&bias, &base, seed + 1000, &op));
        }
        worst.push((name, max_err));
    }
    let bad: Vec<_> = worst.iter().filter(|(_, e)| *e >= 1e-6).collect();
    assert!(bad.is_empty(), "ops over tolerance: {bad:?} (all: {worst:?})");
}
