//! Central finite-difference checks of every differentiable layer.
//!
//! Each layer runs in isolation under a random linear probe loss
//! `L = sum_i r_i * y_i` accumulated in f64. The analytic gradients come
//! from the layer's own backward pass. For convolution, fully connected and
//! batch norm the differences are taken through a float64 evaluation of the
//! same function written out here, since f32 rounding of the forward pass
//! would otherwise swamp small gradients; ReLU, max pooling and the losses
//! are differenced through their own forward code, which is exact or
//! already float64. Differences divide by the perturbation actually
//! realized in f32. Points within reach of a kink (ReLU at zero, hinge
//! margins at zero, max-pool near-ties) are skipped and counted.

use serde::Serialize;

use super::layers::{self, conv_backward, conv_forward, dense_backward};
use super::loss::{hinge_loss, softmax_cross_entropy};
use super::{Mode, Network, NnError};
use crate::tensor::{DenseTensor, Rng, Shape};

pub const FD_EPS: f32 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-2;
/// Minimum number of checked scalars per parameter tensor and input.
pub const FD_SAMPLES: usize = 20;
/// Smallest gradient magnitude used as the relative-error denominator in
/// whole-network checks. A network loss evaluated in f32 carries about
/// 1e-7 absolute noise, i.e. 5e-5 after dividing by `2 * FD_EPS`.
pub const NETWORK_GRAD_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub layer: String,
    pub checked: usize,
    pub skipped: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    /// Denominator floor for the relative error; zero for isolated layers.
    pub floor: f64,
}

impl GradCheck {
    fn new(layer: &str) -> Self {
        Self {
            layer: layer.into(),
            checked: 0,
            skipped: 0,
            failures: 0,
            max_rel_err: 0.0,
            floor: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked >= FD_SAMPLES
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(self.floor);
        let err = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale };
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(err);
        if err > FD_REL_TOL {
            self.failures += 1;
        }
    }
}

fn probe(y: &[f32], r: &[f64]) -> f64 {
    y.iter().zip(r).map(|(&a, &b)| f64::from(a) * b).sum()
}

fn probe64(y: &[f64], r: &[f64]) -> f64 {
    y.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn dense_f64(x: &[f32], batch: usize, w: &[f32], out: usize, b: &[f32]) -> Vec<f64> {
    let inp = x.len() / batch;
    let mut y = Vec::with_capacity(batch * out);
    for n in 0..batch {
        for o in 0..out {
            let dot: f64 = (0..inp).map(|i| f64::from(x[n * inp + i]) * f64::from(w[o * inp + i])).sum();
            y.push(dot + f64::from(b[o]));
        }
    }
    y
}

fn conv_f64(xd: [usize; 4], x: &[f32], wd: [usize; 4], w: &[f32], b: &[f32], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wi] = xd;
    let [co, _, kh, kw] = wd;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wi + 2 * pad - kw) / stride + 1;
    let mut y = Vec::with_capacity(n * co * oh * ow);
    for img in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = f64::from(b[o]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let (iy, ix) = ((oy * stride + ky) as isize - pad as isize, (ox * stride + kx) as isize - pad as isize);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                    continue;
                                }
                                let xv = x[((img * c + ci) * h + iy as usize) * wi + ix as usize];
                                let wv = w[((o * c + ci) * kh + ky) * kw + kx];
                                acc += f64::from(xv) * f64::from(wv);
                            }
                        }
                    }
                    y.push(acc);
                }
            }
        }
    }
    y
}

fn batch_norm_f64(xd: [usize; 4], x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Vec<f64> {
    let [n, c, h, w] = xd;
    let inner = h * w;
    let m = (n * inner) as f64;
    let at = |b: usize, ch: usize, i: usize| f64::from(x[(b * c + ch) * inner + i]);
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let values = || (0..n).flat_map(move |b| (0..inner).map(move |i| (b, i)));
        let mean = values().map(|(b, i)| at(b, ch, i)).sum::<f64>() / m;
        let var = values().map(|(b, i)| (at(b, ch, i) - mean).powi(2)).sum::<f64>() / m;
        let inv_std = 1.0 / (var + f64::from(eps)).sqrt();
        for (b, i) in values() {
            y[(b * c + ch) * inner + i] = f64::from(gamma[ch]) * (at(b, ch, i) - mean) * inv_std + f64::from(beta[ch]);
        }
    }
    y
}

fn random_vec(rng: &mut Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| (rng.next_f32() * 2.0 - 1.0) * scale).collect()
}

fn tensor(dims: &[usize], v: Vec<f32>) -> DenseTensor {
    DenseTensor::from_vec(Shape::new(dims.to_vec()).unwrap(), v).unwrap()
}

/// Checks `analytic` against central differences of `f` at up to
/// `FD_SAMPLES` random coordinates of `values`, drawing replacements for
/// points that `skip` vetoes as near a kink.
fn check_coords(
    report: &mut GradCheck,
    rng: &mut Rng,
    values: &[f32],
    analytic: &[f32],
    f: &mut dyn FnMut(&[f32]) -> f64,
    skip: &mut dyn FnMut(&[f32], usize) -> bool,
) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    rng.shuffle(&mut order);
    let mut checked = 0;
    for i in order {
        if checked == FD_SAMPLES {
            break;
        }
        let mut plus = values.to_vec();
        let mut minus = values.to_vec();
        plus[i] += FD_EPS;
        minus[i] -= FD_EPS;
        if skip(&plus, i) || skip(&minus, i) {
            report.skipped += 1;
            continue;
        }
        let h = f64::from(plus[i]) - f64::from(minus[i]);
        let numeric = (f(&plus) - f(&minus)) / h;
        report.record(f64::from(analytic[i]), numeric);
        checked += 1;
    }
}

fn no_skip(_: &[f32], _: usize) -> bool {
    false
}

pub fn check_dense(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (batch, inp, out) = (4, 12, 7);
    let x = random_vec(&mut rng, batch * inp, 1.0);
    let w = random_vec(&mut rng, out * inp, 0.5);
    let b = random_vec(&mut rng, out, 0.5);
    let r: Vec<f64> = (0..batch * out).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
    let dy: Vec<f32> = r.iter().map(|&v| v as f32).collect();
    let g = dense_backward(&dy, &x, batch, &w, out, true);
    let mut rep = GradCheck::new("fc");
    check_coords(&mut rep, &mut rng, &w, &g.weight, &mut |w| probe64(&dense_f64(&x, batch, w, out, &b), &r), &mut no_skip);
    check_coords(&mut rep, &mut rng, &b, &g.bias, &mut |b| probe64(&dense_f64(&x, batch, &w, out, b), &r), &mut no_skip);
    let gx = g.input.unwrap();
    check_coords(&mut rep, &mut rng, &x, &gx, &mut |x| probe64(&dense_f64(x, batch, &w, out, &b), &r), &mut no_skip);
    rep
}

pub fn check_conv(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let xd = [2, 3, 6, 5];
    let wd = [4, 3, 3, 3];
    let (stride, pad) = (1, 1);
    let x = random_vec(&mut rng, xd.iter().product(), 1.0);
    let w = random_vec(&mut rng, wd.iter().product(), 0.5);
    let b = random_vec(&mut rng, 4, 0.5);
    let wshape = Shape::new(wd).unwrap();
    let (y, cache) = conv_forward(&tensor(&xd, x.clone()), &w, &wshape, &b, stride, pad, true).unwrap();
    let run = |x: &[f32], w: &[f32], b: &[f32]| conv_f64(xd, x, wd, w, b, stride, pad);
    let r: Vec<f64> = (0..y.len()).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
    let dy = tensor(y.shape().dims(), r.iter().map(|&v| v as f32).collect());
    let g = conv_backward(&dy, &w, cache.as_ref().unwrap(), true);
    let mut rep = GradCheck::new("conv");
    check_coords(&mut rep, &mut rng, &w, &g.weight, &mut |w| probe64(&run(&x, w, &b), &r), &mut no_skip);
    check_coords(&mut rep, &mut rng, &b, &g.bias, &mut |b| probe64(&run(&x, &w, b), &r), &mut no_skip);
    let gx = g.input.unwrap();
    check_coords(&mut rep, &mut rng, &x, &gx, &mut |x| probe64(&run(x, &w, &b), &r), &mut no_skip);
    rep
}

pub fn check_batch_norm(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let xd = [5, 3, 2, 2];
    let x: Vec<f32> = random_vec(&mut rng, xd.iter().product(), 2.0);
    let gamma = random_vec(&mut rng, 3, 1.0);
    let beta = random_vec(&mut rng, 3, 1.0);
    let eps = super::BN_EPS;
    let (y, cache) = layers::batch_norm_train(&tensor(&xd, x.clone()), &gamma, &beta, eps).unwrap();
    let run = |x: &[f32], gm: &[f32], bt: &[f32]| batch_norm_f64(xd, x, gm, bt, eps);
    let r: Vec<f64> = (0..y.len()).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
    let dy = tensor(&xd, r.iter().map(|&v| v as f32).collect());
    let g = layers::batch_norm_backward(&dy, &gamma, &cache).unwrap();
    let mut rep = GradCheck::new("bn");
    check_coords(&mut rep, &mut rng, &gamma, &g.gamma, &mut |gm| probe64(&run(&x, gm, &beta), &r), &mut no_skip);
    check_coords(&mut rep, &mut rng, &beta, &g.beta, &mut |bt| probe64(&run(&x, &gamma, bt), &r), &mut no_skip);
    check_coords(&mut rep, &mut rng, &x, &g.input, &mut |x| probe64(&run(x, &gamma, &beta), &r), &mut no_skip);
    rep
}

pub fn check_relu(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let x = random_vec(&mut rng, 60, 1.0);
    let r: Vec<f64> = (0..60).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
    let dy: Vec<f32> = r.iter().map(|&v| v as f32).collect();
    let g = layers::relu_backward(&dy, &x);
    let mut rep = GradCheck::new("relu");
    let x0 = x.clone();
    check_coords(
        &mut rep,
        &mut rng,
        &x,
        &g,
        &mut |x| probe(layers::relu_forward(&tensor(&[60], x.to_vec())).data(), &r),
        &mut |p, i| (p[i] > 0.0) != (x0[i] > 0.0),
    );
    rep
}

pub fn check_max_pool(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let xd = [2, 2, 4, 6];
    let x = random_vec(&mut rng, xd.iter().product(), 1.0);
    let run = |x: &[f32]| layers::max_pool_forward(&tensor(&xd, x.to_vec()), 2, 2).unwrap();
    let (y, cache) = run(&x);
    let r: Vec<f64> = (0..y.len()).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
    let dy: Vec<f32> = r.iter().map(|&v| v as f32).collect();
    let g = layers::max_pool_backward(&dy, &cache);
    let mut rep = GradCheck::new("maxpool");
    let base = cache.argmax.clone();
    check_coords(
        &mut rep,
        &mut rng,
        &x,
        &g,
        &mut |x| probe(run(x).0.data(), &r),
        &mut |p, _| run(p).1.argmax != base,
    );
    rep
}

pub fn check_hinge(seed: u64, squared: bool) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (batch, classes) = (6, 5);
    let s = random_vec(&mut rng, batch * classes, 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(classes as u64) as usize).collect();
    let loss = |s: &[f32]| hinge_loss(&tensor(&[batch, classes], s.to_vec()), &labels, squared).unwrap();
    let (_, g) = loss(&s);
    let active = |s: &[f32]| -> Vec<bool> {
        (0..batch * classes)
            .map(|k| {
                let b = k / classes;
                1.0 + s[k] - s[b * classes + labels[b]] > 0.0
            })
            .collect()
    };
    let base = active(&s);
    let mut rep = GradCheck::new(if squared { "hinge_squared" } else { "hinge" });
    check_coords(&mut rep, &mut rng, &s, &g, &mut |s| loss(s).0, &mut |p, _| active(p) != base);
    rep
}

pub fn check_softmax(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (batch, classes) = (5, 4);
    let s = random_vec(&mut rng, batch * classes, 2.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(classes as u64) as usize).collect();
    let loss = |s: &[f32]| softmax_cross_entropy(&tensor(&[batch, classes], s.to_vec()), &labels).unwrap();
    let (_, g) = loss(&s);
    let mut rep = GradCheck::new("softmax");
    check_coords(&mut rep, &mut rng, &s, &g, &mut |s| loss(s).0, &mut no_skip);
    rep
}

/// Whole-network check of every parameter tensor and the input gradient
/// through `net`'s training forward pass.
pub fn check_network(net: &Network, x: &DenseTensor, labels: &[usize], seed: u64, params: bool) -> Result<GradCheck, NnError> {
    let mut rng = Rng::new(seed);
    let mut net = net.clone();
    let pass = net.forward(x, Some(labels), Mode::Train)?;
    let grads = net.backward(&pass, true)?;
    let modes: Vec<String> = net.weight_modes().iter().map(|m| m.to_string()).collect();
    let mut rep = GradCheck::new(&format!("network[{}]", modes.join(",")));
    rep.floor = NETWORK_GRAD_FLOOR;
    let eval = |net: &mut Network, x: &DenseTensor| -> Result<(f64, Vec<f32>), NnError> {
        let p = net.forward_train(x, labels)?;
        Ok((p.loss.unwrap_or(0.0), p.scores.data().to_vec()))
    };
    if params {
        let grad_params: Vec<Vec<f32>> = grads.params().iter().map(|(_, g)| g.to_vec()).collect();
        let values: Vec<Vec<f32>> = net.params().iter().map(|(_, p)| p.to_vec()).collect();
        for (k, (vals, g)) in values.iter().zip(&grad_params).enumerate() {
            let mut f = |v: &[f32]| {
                let mut n = net.clone();
                n.params_mut()[k].1.copy_from_slice(v);
                eval(&mut n, x).map(|r| r.0).unwrap_or(f64::NAN)
            };
            check_coords(&mut rep, &mut rng, vals, g, &mut f, &mut no_skip);
        }
    }
    let gx = grads.input.expect("requested");
    let xs = x.data().to_vec();
    let mut f = |v: &[f32]| {
        let mut n = net.clone();
        eval(&mut n, &DenseTensor::from_vec(x.shape().clone(), v.to_vec()).unwrap()).map(|r| r.0).unwrap_or(f64::NAN)
    };
    check_coords(&mut rep, &mut rng, &xs, gx.data(), &mut f, &mut no_skip);
    Ok(rep)
}

/// Isolated checks of every differentiable layer kind.
pub fn check_all_layers(seed: u64) -> Vec<GradCheck> {
    vec![
        check_conv(seed),
        check_dense(seed),
        check_batch_norm(seed),
        check_relu(seed),
        check_max_pool(seed),
        check_hinge(seed, true),
        check_hinge(seed, false),
        check_softmax(seed),
    ]
}
