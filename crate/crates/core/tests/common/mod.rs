//! Reference implementations and gradient-check drivers shared by the
//! integration tests. Nothing here calls the optimized kernels.

#![allow(dead_code)]

use firenet::nn::{init_weights, Activation, LayerKind, LayerSpec, Mode, Model, ModelSpec, Padding};
use firenet::tensor::{ConvGeometry, PoolGeometry, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_vec(rng, n)).unwrap()
}

/// Direct cross-correlation of one `[c,h,w]` image with `[o,c,k,k]` kernels.
pub fn conv_reference(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    kernels: &[f64],
    bias: &[f64],
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let o = bias.len();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(ic * h + iy as usize) * w + ix as usize];
                            acc += xv * kernels[((oc * c + ic) * k + ky) * k + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Windowed max over one `[c,h,w]` image; padded cells never win.
pub fn maxpool_reference(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    window: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - window) / stride + 1;
    let ow = (w + 2 * pad - window) / stride + 1;
    let mut out = vec![f64::NEG_INFINITY; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let cell = &mut out[(ch * oh + oy) * ow + ox];
                for dy in 0..window {
                    for dx in 0..window {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            *cell = cell.max(x[(ch * h + iy as usize) * w + ix as usize]);
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Outcome of one central-difference comparison.
pub enum Probe {
    Checked(f64),
    /// One-sided slopes disagree: the step crossed a kink or a tie.
    Kink,
}

pub const STEP: f64 = 1e-5;

/// Relative error between an analytic derivative and the central difference
/// of `f` at `x[i]`.
pub fn probe(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, analytic: f64) -> Probe {
    let mut xp = x.to_vec();
    let base = f(&xp);
    xp[i] = x[i] + STEP;
    let up = f(&xp);
    xp[i] = x[i] - STEP;
    let down = f(&xp);
    let forward = (up - base) / STEP;
    let backward = (base - down) / STEP;
    let scale = forward.abs().max(backward.abs()).max(1e-6);
    if (forward - backward).abs() > 1e-3 * scale {
        return Probe::Kink;
    }
    let numeric = (up - down) / (2.0 * STEP);
    Probe::Checked(rel_err(analytic, numeric))
}

/// Derivatives below this are compared absolutely: their central
/// differences are dominated by roundoff in the O(1) function value.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Aggregate of a gradient-check case.
#[derive(Debug, Default)]
pub struct GradReport {
    pub trials: usize,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn record(&mut self, p: Probe) {
        match p {
            Probe::Checked(e) => {
                self.checked += 1;
                self.max_rel_err = self.max_rel_err.max(e);
            }
            Probe::Kink => self.kinks += 1,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol && self.kinks * 4 < self.checked
    }
}

pub const GRAD_TOL: f64 = 1e-4;
pub const TRIALS: usize = 20;
const COORDS_PER_PARAM: usize = 4;

/// `sum(r * outputs)` for fixed input and upstream weights `r`.
fn weighted_output(model: &mut Model<f64>, x: &Tensor<f64>, r: &[f64]) -> f64 {
    let out = model.forward_outputs(x, Mode::Train).unwrap();
    out.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Checks every trainable parameter gradient of `spec` against central
/// differences of `sum(r * outputs)`.
pub fn check_model(spec: &ModelSpec, batch: usize, seed: u64, report: &mut GradReport) {
    let mut rng = rng(seed);
    let mut model: Model<f64> = init_weights(spec, seed).unwrap();
    let [c, h, w] = spec.input_shape;
    let x = random_tensor(&mut rng, &[batch, c, h, w]);
    let outputs = spec.output_dim().unwrap();
    let r = random_tensor(&mut rng, &[batch, outputs]);
    model.forward_outputs(&x, Mode::Train).unwrap();
    let grads = model.backward(&r).unwrap();
    assert!(!grads.is_empty(), "no trainable parameters in {}", spec.name);
    for (name, g) in grads.iter() {
        let base = model.param(name).unwrap().value.clone();
        for _ in 0..COORDS_PER_PARAM.min(base.len()) {
            let i = rng.gen_range(0..base.len());
            let mut f = |v: &[f64]| {
                let mut m = model.clone();
                m.set_param(name, Tensor::new(base.shape().to_vec(), v.to_vec()).unwrap())
                    .unwrap();
                weighted_output(&mut m, &x, r.data())
            };
            report.record(probe(&mut f, base.data(), i, g.data()[i]));
        }
    }
    report.trials += 1;
}

pub fn conv_layer(filters: usize, kernel: usize, stride: usize, pad: usize, activation: Activation) -> LayerSpec {
    LayerSpec::new(LayerKind::Conv {
        filters,
        kernel,
        stride,
        padding: Padding::Explicit(pad),
        activation,
        repeat: 1,
    })
}

fn linear_head(outputs: usize) -> [LayerSpec; 2] {
    [LayerSpec::flatten(), LayerSpec::dense(outputs, Activation::Linear)]
}

/// Convolutions with random kernel, stride and padding.
pub fn case_conv(seed: u64) -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(seed);
    for t in 0..TRIALS {
        let k = [1, 3, 5][r.gen_range(0..3)];
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=k / 2 + 1).min(k - 1);
        let h = r.gen_range(k..k + 4);
        let w = r.gen_range(k..k + 4);
        let c = r.gen_range(1..=3);
        let act = if t % 2 == 0 { Activation::Relu } else { Activation::Linear };
        let mut layers = vec![conv_layer(r.gen_range(1..=3), k, stride, pad, act)];
        layers.extend(linear_head(2));
        check_model(&ModelSpec::new("conv", [c, h, w], layers), 2, seed + t as u64, &mut report);
    }
    report
}

/// Max pooling with random window, stride and padding behind a convolution.
pub fn case_maxpool(seed: u64) -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(seed);
    for t in 0..TRIALS {
        let window = r.gen_range(2..=3);
        let stride = r.gen_range(1..=window);
        let pad = r.gen_range(0..window);
        let pool = PoolGeometry { window, stride, pad };
        let mut layers = vec![
            conv_layer(2, 3, 1, 1, Activation::Linear),
            LayerSpec::new(LayerKind::MaxPool(pool)),
        ];
        layers.extend(linear_head(2));
        let spec = ModelSpec::new("maxpool", [2, r.gen_range(4..8), r.gen_range(4..8)], layers);
        check_model(&spec, 2, seed + t as u64, &mut report);
    }
    report
}

pub fn case_global_max_pool(seed: u64) -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(seed);
    for t in 0..TRIALS {
        let layers = vec![
            conv_layer(r.gen_range(1..=4), 3, 1, 1, Activation::Linear),
            LayerSpec::global_max_pool(),
            LayerSpec::dense(2, Activation::Linear),
        ];
        let spec = ModelSpec::new("gmp", [2, r.gen_range(3..7), r.gen_range(3..7)], layers);
        check_model(&spec, 2, seed + t as u64, &mut report);
    }
    report
}

/// Flatten followed by dense layers of random widths.
pub fn case_dense(seed: u64) -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(seed);
    for t in 0..TRIALS {
        let layers = vec![
            LayerSpec::flatten(),
            LayerSpec::dense(r.gen_range(1..=6), Activation::Relu),
            LayerSpec::dense(r.gen_range(1..=6), Activation::Relu),
            LayerSpec::dense(r.gen_range(1..=3), Activation::Linear),
        ];
        let spec = ModelSpec::new("dense", [r.gen_range(1..=3), r.gen_range(1..4), r.gen_range(1..4)], layers);
        check_model(&spec, 3, seed + t as u64, &mut report);
    }
    report
}

/// Batch normalization in training mode, with and without ReLU.
pub fn case_batchnorm(seed: u64) -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(seed);
    for t in 0..TRIALS {
        let act = if t % 2 == 0 { Activation::Relu } else { Activation::Linear };
        let mut layers = vec![conv_layer(r.gen_range(1..=3), 3, 1, 1, Activation::Linear), LayerSpec::batchnorm(act)];
        layers.extend(linear_head(2));
        let spec = ModelSpec::new("bn", [2, r.gen_range(2..5), r.gen_range(2..5)], layers);
        check_model(&spec, 3, seed + t as u64, &mut report);
    }
    report
}

/// Residual bottlenecks with identity and projection shortcuts.
pub fn case_bottleneck(seed: u64) -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(seed);
    for t in 0..TRIALS {
        let c = r.gen_range(2..=4);
        let stride = r.gen_range(1..=2);
        let out = if t % 2 == 0 && stride == 1 { c } else { r.gen_range(2..=4) };
        let mut layers = vec![LayerSpec::bottleneck(r.gen_range(1..=3), out, stride)];
        layers.extend(linear_head(2));
        let spec = ModelSpec::new("bottleneck", [c, r.gen_range(3..6), r.gen_range(3..6)], layers);
        check_model(&spec, 2, seed + t as u64, &mut report);
    }
    report
}

/// Input gradient of a single convolution.
pub fn case_conv_input(seed: u64) -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(seed);
    for _ in 0..TRIALS {
        let k = [1, 3, 5][r.gen_range(0..3)];
        let geom = ConvGeometry {
            kernel: k,
            stride: r.gen_range(1..=2),
            pad: r.gen_range(0..k),
        };
        let (c, o) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (h, w) = (r.gen_range(k..k + 4), r.gen_range(k..k + 4));
        let x = random_tensor(&mut r, &[c, h, w]);
        let kernels = random_tensor(&mut r, &[o, c, k, k]);
        let bias = random_tensor(&mut r, &[o]);
        let y = firenet::tensor::conv2d_forward_with(&x, &kernels, &bias, geom).unwrap();
        let g = random_tensor(&mut r, y.shape());
        let grads = firenet::tensor::conv2d_backward_with(&g, &x, &kernels, geom).unwrap();
        let mut f = |v: &[f64]| {
            let xt = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
            let y = firenet::tensor::conv2d_forward_with(&xt, &kernels, &bias, geom).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        for _ in 0..4 {
            let i = r.gen_range(0..x.len());
            report.record(probe(&mut f, x.data(), i, grads.input.data()[i]));
        }
        report.trials += 1;
    }
    report
}

/// Sigmoid cross-entropy with respect to the logits.
pub fn case_bce(seed: u64) -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(seed);
    for _ in 0..TRIALS {
        let n = r.gen_range(1..=8);
        let z: Vec<f64> = (0..n).map(|_| r.gen_range(-6.0..6.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
        let logits = Tensor::new(vec![n], z.clone()).unwrap();
        let (_, grad) = firenet::optim::bce_with_logits(&logits, &labels).unwrap();
        let mut f = |v: &[f64]| {
            let t = Tensor::new(vec![n], v.to_vec()).unwrap();
            firenet::optim::bce_with_logits(&t, &labels).unwrap().0.scalar
        };
        for i in 0..n {
            report.record(probe(&mut f, &z, i, grad.data()[i]));
        }
        report.trials += 1;
    }
    report
}

/// Hinge loss with L2 penalty, with respect to logits and head weights.
pub fn case_hinge(seed: u64) -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(seed);
    for _ in 0..TRIALS {
        let n = r.gen_range(1..=8);
        let z: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
        let labels: Vec<i8> = (0..n).map(|_| if r.gen_bool(0.5) { 1 } else { -1 }).collect();
        let wv = random_vec(&mut r, 5);
        let lambda = r.gen_range(0.0..0.01);
        let logits = Tensor::new(vec![n], z.clone()).unwrap();
        let weights = Tensor::new(vec![5], wv.clone()).unwrap();
        let (_, grads) = firenet::optim::hinge_l2(&logits, &labels, &weights, lambda).unwrap();
        let mut fz = |v: &[f64]| {
            let t = Tensor::new(vec![n], v.to_vec()).unwrap();
            firenet::optim::hinge_l2(&t, &labels, &weights, lambda).unwrap().0.scalar
        };
        for i in 0..n {
            report.record(probe(&mut fz, &z, i, grads.logits.data()[i]));
        }
        let mut fw = |v: &[f64]| {
            let t = Tensor::new(vec![5], v.to_vec()).unwrap();
            firenet::optim::hinge_l2(&logits, &labels, &t, lambda).unwrap().0.scalar
        };
        for i in 0..5 {
            report.record(probe(&mut fw, &wv, i, grads.head_weights.data()[i]));
        }
        report.trials += 1;
    }
    report
}

/// Softmax cross-entropy over random class counts.
pub fn case_softmax(seed: u64) -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(seed);
    for _ in 0..TRIALS {
        let (n, k) = (r.gen_range(1..=4), r.gen_range(2..=5));
        let z: Vec<f64> = (0..n * k).map(|_| r.gen_range(-4.0..4.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let logits = Tensor::new(vec![n, k], z.clone()).unwrap();
        let (_, grad) = firenet::optim::softmax_cross_entropy(&logits, &labels).unwrap();
        let mut f = |v: &[f64]| {
            let t = Tensor::new(vec![n, k], v.to_vec()).unwrap();
            firenet::optim::softmax_cross_entropy(&t, &labels).unwrap().0.scalar
        };
        for i in 0..n * k {
            report.record(probe(&mut f, &z, i, grad.data()[i]));
        }
        report.trials += 1;
    }
    report
}

pub type Case = (&'static str, fn(u64) -> GradReport);

pub const GRADIENT_CASES: [Case; 10] = [
    ("conv", case_conv),
    ("conv_input", case_conv_input),
    ("maxpool", case_maxpool),
    ("global_max_pool", case_global_max_pool),
    ("dense_flatten", case_dense),
    ("batchnorm", case_batchnorm),
    ("residual_bottleneck", case_bottleneck),
    ("bce", case_bce),
    ("hinge_l2", case_hinge),
    ("softmax_cross_entropy", case_softmax),
];

/// Parameter count of a layer table enumerated by hand: convolutions as
/// `(c_in, c_out, k)` and dense layers as `(in, out)`.
pub fn enumerate_params(convs: &[(u64, u64, u64)], dense: &[(u64, u64)]) -> u64 {
    let c: u64 = convs.iter().map(|&(i, o, k)| i * o * k * k + o).sum();
    let d: u64 = dense.iter().map(|&(i, o)| i * o + o).sum();
    c + d
}
