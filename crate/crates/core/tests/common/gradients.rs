//! Finite-difference checks of every backward pass in 64-bit arithmetic,
//! on random inputs with every dimension at most 6.

use std::sync::Arc;

use pyrapool::netgraph::{shared, Layer, LayerKind, ParameterStore};
use pyrapool::ops::conv::{conv_backward, conv_forward, ConvSpec};
use pyrapool::ops::dense::{dropout, dropout_backward, fc_backward, fc_forward, relu_backward, relu_forward, softmax_cross_entropy};
use pyrapool::ops::pool::{maxpool_backward, maxpool_forward, PoolSpec};
use pyrapool::spp::{spp_backward, spp_forward, PyramidSpec};
use pyrapool::{Mode, NetworkInstance, NetworkSpec, Shape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 50;
const TOL: f64 = 1e-4;
const H: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never crossed by the step.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Distinct values at least 0.05 apart, so a step of `H` never changes which
/// cell wins a max.
fn rand_separated(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let n = shape.numel();
    let mut data: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05).collect();
    data.shuffle(rng);
    Tensor::from_vec(shape, data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative error; pairs where both values sit below the central-difference
/// noise floor count as agreeing.
fn rel_err(a: f64, n: f64) -> f64 {
    let d = (a - n).abs();
    if a.abs().max(n.abs()) < 1e-8 {
        0.0
    } else {
        d / a.abs().max(n.abs())
    }
}

/// Central difference of `f` at `x[i]`.
fn numeric(x: &mut [f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Compares `analytic` with central differences at up to `samples` random coordinates.
fn check(name: &str, x: &mut [f64], analytic: &[f64], samples: usize, rng: &mut ChaCha8Rng, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    check_with_step(name, x, analytic, samples, H, rng, f)
}

fn check_with_step(
    name: &str,
    x: &mut [f64],
    analytic: &[f64],
    samples: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "{name}: gradient length");
    let mut worst: f64 = 0.0;
    for _ in 0..samples.min(x.len()) {
        let i = rng.random_range(0..x.len());
        let n = numeric(x, i, h, f);
        let e = rel_err(analytic[i], n);
        assert!(e <= TOL, "{name}: index {i} analytic {} numeric {n} rel err {e}", analytic[i]);
        worst = worst.max(e);
    }
    worst
}

pub fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..TRIALS {
        let k = rng.random_range(1..=4);
        let spec = ConvSpec::new(rng.random_range(1..=3), k, rng.random_range(1..=2), rng.random_range(0..=k / 2));
        let ic = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(k..=6), rng.random_range(k..=6));
        let shape = Shape::new(rng.random_range(1..=2), ic, h, w);
        let x = rand_tensor(&mut rng, shape);
        let wt = rand_tensor(&mut rng, Shape::new(spec.out_channels, ic, k, k));
        let b: Vec<f64> = (0..spec.out_channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = conv_forward(&x, &wt, &b, &spec).unwrap();
        let g = rand_tensor(&mut rng, out.shape());
        let grads = conv_backward(&g, Some(&x), &wt, &spec).unwrap();

        let mut xd = x.data().to_vec();
        check("conv input", &mut xd, grads.input.data(), 6, &mut rng, &mut |v| {
            let xi = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            dot(conv_forward(&xi, &wt, &b, &spec).unwrap().data(), g.data())
        });
        let mut wd = wt.data().to_vec();
        check("conv weights", &mut wd, grads.weights.data(), 6, &mut rng, &mut |v| {
            let wi = Tensor::from_vec(wt.shape(), v.to_vec()).unwrap();
            dot(conv_forward(&x, &wi, &b, &spec).unwrap().data(), g.data())
        });
        let mut bd = b.clone();
        check("conv bias", &mut bd, &grads.bias, 3, &mut rng, &mut |v| {
            dot(conv_forward(&x, &wt, v, &spec).unwrap().data(), g.data())
        });
    }
}

pub fn maxpool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..TRIALS {
        let k = rng.random_range(2..=3);
        let spec = if rng.random::<bool>() {
            PoolSpec::same(k, 2)
        } else {
            PoolSpec::new((k, k), (rng.random_range(1..=2), rng.random_range(1..=2)))
        };
        let shape = Shape::new(1, rng.random_range(1..=3), rng.random_range(k..=6), rng.random_range(k..=6));
        let x = rand_separated(&mut rng, shape);
        let (out, arg) = maxpool_forward(&x, &spec).unwrap();
        let g = rand_tensor(&mut rng, out.shape());
        let gx = maxpool_backward(&g, &arg, x.shape()).unwrap();
        let mut xd = x.data().to_vec();
        check("maxpool input", &mut xd, gx.data(), 10, &mut rng, &mut |v| {
            let xi = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            dot(maxpool_forward(&xi, &spec).unwrap().0.data(), g.data())
        });
    }
}

pub fn spp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..TRIALS {
        let levels: Vec<usize> = match rng.random_range(0..3) {
            0 => vec![4, 2, 1],
            1 => vec![6, 3, 2, 1],
            _ => vec![3, 1],
        };
        let pyr = PyramidSpec::new(levels).unwrap();
        let shape = Shape::new(rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=6));
        let x = rand_separated(&mut rng, shape);
        let (out, arg) = spp_forward(&x, &pyr).unwrap();
        let g = rand_tensor(&mut rng, out.shape());
        let gx = spp_backward(&g, &arg, x.shape()).unwrap();
        let mut xd = x.data().to_vec();
        check("spp input", &mut xd, gx.data(), 12, &mut rng, &mut |v| {
            let xi = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            dot(spp_forward(&xi, &pyr).unwrap().0.data(), g.data())
        });
    }
}

pub fn fc_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..TRIALS {
        let (n, din, dout) = (rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=6));
        let x = rand_tensor(&mut rng, Shape::new(n, din, 1, 1));
        let wt = rand_tensor(&mut rng, Shape::new(dout, din, 1, 1));
        let b: Vec<f64> = (0..dout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = fc_forward(&x, &wt, &b).unwrap();
        let g = rand_tensor(&mut rng, out.shape());
        let grads = fc_backward(&g, Some(&x), &wt).unwrap();
        let mut xd = x.data().to_vec();
        check("fc input", &mut xd, grads.input.data(), 5, &mut rng, &mut |v| {
            let xi = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            dot(fc_forward(&xi, &wt, &b).unwrap().data(), g.data())
        });
        let mut wd = wt.data().to_vec();
        check("fc weights", &mut wd, grads.weights.data(), 5, &mut rng, &mut |v| {
            let wi = Tensor::from_vec(wt.shape(), v.to_vec()).unwrap();
            dot(fc_forward(&x, &wi, &b).unwrap().data(), g.data())
        });
        let mut bd = b.clone();
        check("fc bias", &mut bd, &grads.bias, 3, &mut rng, &mut |v| dot(fc_forward(&x, &wt, v).unwrap().data(), g.data()));
    }
}

pub fn relu_and_dropout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..TRIALS {
        let shape = Shape::new(2, 3, rng.random_range(1..=6), rng.random_range(1..=6));
        let x = rand_away_from_zero(&mut rng, shape);
        let g = rand_tensor(&mut rng, x.shape());
        let gx = relu_backward(&g, &x).unwrap();
        let mut xd = x.data().to_vec();
        check("relu input", &mut xd, gx.data(), 8, &mut rng, &mut |v| {
            dot(relu_forward(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap()).data(), g.data())
        });

        let rate = 0.5;
        let (_, mask) = dropout(&x, rate, true, &mut ChaCha8Rng::seed_from_u64(trial as u64)).unwrap();
        let gx = dropout_backward(&g, &mask).unwrap();
        let mut xd = x.data().to_vec();
        check("dropout input", &mut xd, gx.data(), 8, &mut rng, &mut |v| {
            let xi = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            let (y, _) = dropout(&xi, rate, true, &mut ChaCha8Rng::seed_from_u64(trial as u64)).unwrap();
            dot(y.data(), g.data())
        });
    }
}

pub fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..TRIALS {
        let (n, c) = (rng.random_range(1..=4), rng.random_range(2..=7));
        let logits = rand_tensor(&mut rng, Shape::new(n, c, 1, 1));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let mut ld = logits.data().to_vec();
        check("softmax loss", &mut ld, grad.data(), 6, &mut rng, &mut |v| {
            softmax_cross_entropy(&Tensor::from_vec(logits.shape(), v.to_vec()).unwrap(), &labels).unwrap().0
        });
    }
}

fn small_net(classes: usize) -> NetworkSpec {
    let layers = vec![
        Layer::new("conv1", LayerKind::Conv(ConvSpec::same(3, 3, 1))),
        Layer::new("relu1", LayerKind::Relu),
        Layer::new("pool1", LayerKind::MaxPool(PoolSpec::same(3, 2))),
        Layer::new("conv2", LayerKind::Conv(ConvSpec::same(4, 3, 1))),
        Layer::new("relu2", LayerKind::Relu),
        Layer::new("spp", LayerKind::Spp(PyramidSpec::new(vec![3, 2, 1]).unwrap())),
        Layer::new("fc6", LayerKind::Fc { out: 6 }),
        Layer::new("relu6", LayerKind::Relu),
        Layer::new("drop6", LayerKind::Dropout { rate: 0.3 }),
        Layer::new("fc7", LayerKind::Fc { out: classes }),
        Layer::new("prob", LayerKind::Softmax),
    ];
    NetworkSpec::new("grad", 1, layers).unwrap()
}

/// Step for the end-to-end check; ReLU and max kinks inside the network are
/// not controlled, so the step must stay well below activation gaps.
const NET_H: f64 = 1e-6;

/// Parameter gradients of the whole network, dropout included, for a random
/// linear function of the logits at a random input size.
pub fn network_parameter_gradients() {
    let spec = Arc::new(small_net(3));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let params = shared(ParameterStore::<f64>::init(&spec, 0.5, trial as u64));
        {
            let mut store = params.write().unwrap();
            for slot in store.slots_mut() {
                if slot.name.ends_with(".bias") {
                    for b in slot.value.data_mut() {
                        *b = rng.random_range(-0.2..0.2);
                    }
                }
            }
        }
        let size = (rng.random_range(3..=6), rng.random_range(3..=6));
        let inst = NetworkInstance::new(spec.clone(), size, params.clone()).unwrap();
        let x = rand_tensor(&mut rng, Shape::new(2, 1, size.0, size.1));
        let mode = Mode::Train { seed: trial as u64 };
        let (logits, trace) = inst.forward(&x, mode).unwrap();
        let g = rand_tensor(&mut rng, logits.shape());
        params.write().unwrap().zero_grads();
        inst.backward(&trace, &g).unwrap();

        let names: Vec<String> = params.read().unwrap().slots().iter().map(|s| s.name.clone()).collect();
        for name in names {
            let (mut values, analytic) = {
                let store = params.read().unwrap();
                let slot = store.get(&name).unwrap();
                (slot.value.data().to_vec(), slot.value.grad().unwrap().to_vec())
            };
            let e = check_with_step(&name, &mut values, &analytic, 2, NET_H, &mut rng, &mut |v| {
                params.write().unwrap().get_mut(&name).unwrap().value.data_mut().copy_from_slice(v);
                dot(inst.forward(&x, mode).unwrap().0.data(), g.data())
            });
            params.write().unwrap().get_mut(&name).unwrap().value.data_mut().copy_from_slice(&values);
            worst = worst.max(e);
        }
    }
    assert!(worst <= TOL);
}
