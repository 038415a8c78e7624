//! Finite-difference verification of the analytic gradients, in 64-bit mode.
//!
//! Layer checks use the scalar objective `L = sum_i r_i * out_i` with fixed
//! random weights `r`, so `dL/dout = r`. The model check uses the binary
//! cross-entropy of the full network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv2d, conv2d_backward, dense, dense_backward, lstm_step_backward, lstm_step_cached, maxpool2,
    maxpool2_backward, Activation, LstmGrads, LstmParams,
};
use super::model::{clip_tensors, Model, ModelConfig};
use super::optim::bce_loss;
use super::tensor::{dot, Tensor};
use crate::error::Result;
use crate::pose_features::RasterClip;

pub const DEFAULT_EPSILON: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Deliberate corruption of the analytic gradient, to confirm the harness
/// notices wrong gradients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GradFault {
    #[default]
    None,
    /// Multiply every conv kernel gradient by this factor.
    ScaleConvKernels(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Parameters whose step had to shrink to stay on one smooth piece.
    pub kink_retries: usize,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn weighted(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    dot(out.data(), r.data())
}

/// Central difference of `f` with respect to every element of `x`, compared
/// against `analytic`. Returns the worst relative error and its index.
fn compare(x: &mut Tensor<f64>, analytic: &Tensor<f64>, eps: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let up = f(x);
        x.data_mut()[i] = orig - eps;
        let down = f(x);
        x.data_mut()[i] = orig;
        let err = relative_error(analytic.data()[i], (up - down) / (2.0 * eps));
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    worst
}

/// Worst relative error over the input, kernel and bias gradients of a
/// random 3x3 convolution.
pub fn check_conv2d(seed: u64, epsilon: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = random_tensor(&mut rng, &[6, 5, 3], 1.0);
    let mut k = random_tensor(&mut rng, &[3, 3, 3, 4], 0.5);
    let mut b = random_tensor(&mut rng, &[4], 0.5);
    let r = random_tensor(&mut rng, &[6, 5, 4], 1.0);
    let g = conv2d_backward(&x, &k, &b, &r, true).unwrap();
    let (k0, b0, x0) = (k.clone(), b.clone(), x.clone());
    let ex = compare(&mut x, g.input.as_ref().unwrap(), epsilon, |x| weighted(&conv2d(x, &k0, &b0).unwrap(), &r)).0;
    let ek = compare(&mut k, &g.kernels, epsilon, |k| weighted(&conv2d(&x0, k, &b0).unwrap(), &r)).0;
    let eb = compare(&mut b, &g.bias, epsilon, |b| weighted(&conv2d(&x0, &k0, b).unwrap(), &r)).0;
    ex.max(ek).max(eb)
}

pub fn check_maxpool2(seed: u64, epsilon: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Values on a coarse lattice plus jitter keep every pool window's maximum
    // at least 4*epsilon clear of the runner-up.
    let n = 6 * 8 * 2;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let mut x = Tensor::from_vec(&[6, 8, 2], vals).unwrap();
    let r = random_tensor(&mut rng, &[3, 4, 2], 1.0);
    let (_, arg) = maxpool2(&x).unwrap();
    let g = maxpool2_backward(x.shape(), &arg, &r);
    compare(&mut x, &g, epsilon, |x| weighted(&maxpool2(x).unwrap().0, &r)).0
}

pub fn check_dense(seed: u64, activation: Activation, epsilon: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = random_tensor(&mut rng, &[7], 1.0);
    let mut w = random_tensor(&mut rng, &[7, 5], 0.7);
    let mut b = random_tensor(&mut rng, &[5], 0.5);
    let r = random_tensor(&mut rng, &[5], 1.0);
    let (out, pre) = dense(&x, &w, &b, activation).unwrap();
    let g = dense_backward(&x, &w, &pre, &out, activation, &r);
    let (x0, w0, b0) = (x.clone(), w.clone(), b.clone());
    let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| weighted(&dense(x, w, b, activation).unwrap().0, &r);
    let ex = compare(&mut x, &g.input, epsilon, |x| f(x, &w0, &b0)).0;
    let ew = compare(&mut w, &g.weights, epsilon, |w| f(&x0, w, &b0)).0;
    let eb = compare(&mut b, &g.bias, epsilon, |b| f(&x0, &w0, b)).0;
    ex.max(ew).max(eb)
}

/// Backpropagation through time over `steps` LSTM steps, objective a
/// weighted sum of the final hidden state.
pub fn check_lstm(seed: u64, steps: usize, epsilon: f64) -> f64 {
    let (d, m) = (3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = random_tensor(&mut rng, &[steps, d], 1.0);
    let mut wx = random_tensor(&mut rng, &[d, 4 * m], 0.6);
    let mut wh = random_tensor(&mut rng, &[m, 4 * m], 0.6);
    let mut bias = random_tensor(&mut rng, &[4 * m], 0.5);
    let r = random_tensor(&mut rng, &[m], 1.0);

    let run = |xs: &Tensor<f64>, wx: &Tensor<f64>, wh: &Tensor<f64>, b: &Tensor<f64>| {
        let p = LstmParams { w_x: wx, w_h: wh, bias: b };
        let (mut h, mut c) = (vec![0.0; m], vec![0.0; m]);
        let mut caches = Vec::new();
        for t in 0..steps {
            let cache = lstm_step_cached(&xs.data()[t * d..(t + 1) * d], &h, &c, p).unwrap();
            h.clone_from(&cache.h);
            c.clone_from(&cache.c);
            caches.push(cache);
        }
        (dot(&h, r.data()), caches)
    };

    let (_, caches) = run(&xs, &wx, &wh, &bias);
    let mut gwx = Tensor::zeros(wx.shape());
    let mut gwh = Tensor::zeros(wh.shape());
    let mut gb = Tensor::zeros(bias.shape());
    let mut gxs = Tensor::zeros(xs.shape());
    let mut dh = r.data().to_vec();
    let mut dc = vec![0.0; m];
    for (t, cache) in caches.iter().enumerate().rev() {
        let p = LstmParams { w_x: &wx, w_h: &wh, bias: &bias };
        let (dx, dhp, dcp) = lstm_step_backward(
            cache,
            p,
            &dh,
            &dc,
            LstmGrads {
                w_x: &mut gwx,
                w_h: &mut gwh,
                bias: &mut gb,
            },
        );
        gxs.data_mut()[t * d..(t + 1) * d].copy_from_slice(&dx);
        dh = dhp;
        dc = dcp;
    }
    let (xs0, wx0, wh0, b0) = (xs.clone(), wx.clone(), wh.clone(), bias.clone());
    let e1 = compare(&mut xs, &gxs, epsilon, |v| run(v, &wx0, &wh0, &b0).0).0;
    let e2 = compare(&mut wx, &gwx, epsilon, |v| run(&xs0, v, &wh0, &b0).0).0;
    let e3 = compare(&mut wh, &gwh, epsilon, |v| run(&xs0, &wx0, v, &b0).0).0;
    let e4 = compare(&mut bias, &gb, epsilon, |v| run(&xs0, &wx0, &wh0, v).0).0;
    e1.max(e2).max(e3).max(e4)
}

fn model_eval(model: &Model<f64>, frames: &[Tensor<f64>], y: f64) -> (f64, Vec<u32>) {
    let cache = model.forward_cached(frames).expect("shapes checked");
    // Unclamped sigmoid so the numeric derivative sees the same function the
    // analytic p - y describes.
    let p = 1.0 / (1.0 + (-cache.logit).exp());
    (bce_loss(p, y).0, cache.piecewise_pattern())
}

/// Smallest step tried when a difference straddles a ReLU or max-pool kink.
const MIN_EPSILON: f64 = 1e-6;

/// Checks every parameter of `model` against central differences of the
/// cross-entropy loss on one sample.
///
/// ReLU and max pooling make the loss piecewise smooth. When either probe
/// point lands on a different piece than the base point (some ReLU changes
/// sign or some pool window changes its winner), the difference does not
/// estimate the local derivative, so the step is divided by 10 and retried,
/// down to 1e-6.
pub fn grad_check_model(
    model: &Model<f64>,
    frames: &[Tensor<f64>],
    y: f64,
    epsilon: f64,
    fault: GradFault,
) -> Result<GradCheckReport> {
    let cache = model.forward_cached(frames)?;
    let base_pattern = cache.piecewise_pattern();
    let p = 1.0 / (1.0 + (-cache.logit).exp());
    let mut grads = model.backward(&cache, p - y);
    if let GradFault::ScaleConvKernels(s) = fault {
        for (name, g) in model.parameter_names().iter().zip(grads.iter_mut()) {
            if name.starts_with("conv") && name.ends_with(".kernel") {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    let names = model.parameter_names();
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        checked: 0,
        kink_retries: 0,
    };
    for (pi, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.parameters()[pi].data()[i];
            let mut eps = epsilon;
            let numeric = loop {
                probe.parameters_mut()[pi].data_mut()[i] = orig + eps;
                let (up, pu) = model_eval(&probe, frames, y);
                probe.parameters_mut()[pi].data_mut()[i] = orig - eps;
                let (down, pd) = model_eval(&probe, frames, y);
                let same_piece = pu == base_pattern && pd == base_pattern;
                if same_piece || eps / 10.0 < MIN_EPSILON {
                    break (up - down) / (2.0 * eps);
                }
                report.kink_retries += 1;
                eps /= 10.0;
            };
            probe.parameters_mut()[pi].data_mut()[i] = orig;
            let err = relative_error(g.data()[i], numeric);
            report.checked += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = err;
                report.worst_parameter = names[pi].clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Gradient check of a model built from `config` at a random parameter point
/// (initial weights plus random biases, so no ReLU sits exactly on its kink).
pub fn grad_check(config: &ModelConfig, sample: &RasterClip, epsilon: f64) -> Result<GradCheckReport> {
    grad_check_with_fault(config, sample, epsilon, GradFault::None)
}

pub fn grad_check_with_fault(
    config: &ModelConfig,
    sample: &RasterClip,
    epsilon: f64,
    fault: GradFault,
) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    for p in model.parameters_mut() {
        if p.shape().len() == 1 {
            p.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
    }
    let frames = clip_tensors(sample)?;
    grad_check_model(&model, &frames, sample.label.as_f64(), epsilon, fault)
}


#[cfg(test)]
mod model_tests {
    use super::*;
    use crate::image::GrayImage;
    use crate::neural::model::{ConvBlock, InputShape};
    use crate::pose_features::Label;

    fn micro() -> ModelConfig {
        ModelConfig {
            input: InputShape {
                frames: 2,
                height: 8,
                width: 8,
                channels: 1,
            },
            conv_blocks: vec![ConvBlock::new(4)],
            frame_embedding: 8,
            lstm_hidden: 4,
            seed: 21,
        }
    }

    fn sample() -> RasterClip {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        RasterClip {
            frames: (0..2)
                .map(|_| GrayImage::from_fn(8, 8, |_, _| rng.gen_range(0.0..1.0)))
                .collect(),
            label: Label::Positive,
            subject_id: "s".into(),
        }
    }

    #[test]
    fn micro_model_passes() {
        let r = grad_check(&micro(), &sample(), DEFAULT_EPSILON).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
        assert_eq!(r.checked, micro().parameter_count());
    }

    #[test]
    fn corrupted_conv_gradient_detected() {
        let r = grad_check_with_fault(&micro(), &sample(), DEFAULT_EPSILON, GradFault::ScaleConvKernels(2.0)).unwrap();
        assert!(r.max_relative_error > 0.3, "{r:?}");
        assert!(r.worst_parameter.starts_with("conv"));
    }

    #[test]
    fn zero_parameters_finite() {
        let mut model = Model::<f64>::init(&micro()).unwrap();
        model.parameters_mut().iter_mut().for_each(|p| p.fill(0.0));
        let frames = clip_tensors(&sample()).unwrap();
        let r = grad_check_model(&model, &frames, 1.0, DEFAULT_EPSILON, GradFault::None).unwrap();
        assert!(r.max_relative_error.is_finite());
    }
}
