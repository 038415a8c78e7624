//! Fixed-topology building blocks with hand-written backward passes.
//!
//! Feature maps are `[H, W, C]`, conv kernels `[k, k, Cin, Cout]`, dense
//! weights `[n, m]` (input-major), LSTM weights `[d, 4m]` with gate blocks
//! ordered input, forget, candidate, output.

use serde::{Deserialize, Serialize};

use super::tensor::{axpy, dot, Scalar, Tensor};
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(F::zero()),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    #[inline]
    pub fn derivative<F: Scalar>(self, pre: F, out: F) -> F {
        match self {
            Activation::None => F::one(),
            Activation::Relu => {
                if pre > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Sigmoid => out * (F::one() - out),
        }
    }
}

fn dims3<F: Scalar>(t: &Tensor<F>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape(format!("{what}: expected [H, W, C], found {s:?}"))),
    }
}

fn conv_dims<F: Scalar>(input: &Tensor<F>, kernels: &Tensor<F>, bias: &Tensor<F>) -> Result<(usize, usize, usize, usize, usize)> {
    let (h, w, cin) = dims3(input, "conv2d input")?;
    let (k, cout) = match *kernels.shape() {
        [k1, k2, ci, co] if k1 == k2 && ci == cin => (k1, co),
        [_, _, ci, _] if ci != cin => {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels, kernels expect {ci}"
            )))
        }
        ref s => return Err(Error::Shape(format!("conv2d: bad kernel shape {s:?}"))),
    };
    if k % 2 == 0 {
        return Err(Error::Shape(format!("conv2d: kernel size {k} must be odd")));
    }
    bias.expect_shape("conv2d bias", &[cout])?;
    Ok((h, w, cin, k, cout))
}

/// Same-padded (zeros) cross-correlation.
pub fn conv2d<F: Scalar>(input: &Tensor<F>, kernels: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w, cin, k, cout) = conv_dims(input, kernels, bias)?;
    let pad = (k / 2) as isize;
    let x = input.data();
    let kw = kernels.data();
    let mut out = Tensor::zeros(&[h, w, cout]);
    let o = out.data_mut();
    for y in 0..h {
        for xo in 0..w {
            let dst = &mut o[(y * w + xo) * cout..][..cout];
            dst.copy_from_slice(bias.data());
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = xo as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &x[(iy as usize * w + ix as usize) * cin..][..cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, &a) in src.iter().enumerate() {
                        if a != F::zero() {
                            axpy(dst, a, &kw[wbase + ci * cout..][..cout]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct Conv2dGrads<F> {
    pub input: Option<Tensor<F>>,
    pub kernels: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Gradients of a same-padded convolution given `d_out = dL/d(output)`.
/// The input gradient is skipped when `need_input` is false.
pub fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    bias: &Tensor<F>,
    d_out: &Tensor<F>,
    need_input: bool,
) -> Result<Conv2dGrads<F>> {
    let mut dk = Tensor::zeros(kernels.shape());
    let mut db = Tensor::zeros(bias.shape());
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    conv2d_backward_into(input, kernels, bias, d_out, dx.as_mut(), &mut dk, &mut db)?;
    Ok(Conv2dGrads {
        input: dx,
        kernels: dk,
        bias: db,
    })
}

/// Accumulates convolution gradients into existing buffers.
pub(crate) fn conv2d_backward_into<F: Scalar>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    bias: &Tensor<F>,
    d_out: &Tensor<F>,
    mut d_input: Option<&mut Tensor<F>>,
    d_kernels: &mut Tensor<F>,
    d_bias: &mut Tensor<F>,
) -> Result<()> {
    let (h, w, cin, k, cout) = conv_dims(input, kernels, bias)?;
    d_out.expect_shape("conv2d d_out", &[h, w, cout])?;
    let pad = (k / 2) as isize;
    let x = input.data();
    let kw = kernels.data();
    let g = d_out.data();
    let dk = d_kernels.data_mut();
    let db = d_bias.data_mut();
    for y in 0..h {
        for xo in 0..w {
            let go = &g[(y * w + xo) * cout..][..cout];
            for (b, &v) in db.iter_mut().zip(go) {
                *b += v;
            }
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = xo as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_off = (iy as usize * w + ix as usize) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = x[in_off + ci];
                        if a != F::zero() {
                            axpy(&mut dk[wbase + ci * cout..][..cout], a, go);
                        }
                    }
                    if let Some(dx) = d_input.as_deref_mut() {
                        let dxd = dx.data_mut();
                        for ci in 0..cin {
                            dxd[in_off + ci] += dot(&kw[wbase + ci * cout..][..cout], go);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// 2x2 non-overlapping max pooling. Returns the pooled map and, per output
/// element, the flat input index it came from (first maximum on ties).
pub fn maxpool2<F: Scalar>(input: &Tensor<F>) -> Result<(Tensor<F>, Vec<u32>)> {
    let (h, w, c) = dims3(input, "maxpool2 input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool2: dimensions {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let mut arg = vec![0u32; oh * ow * c];
    let o = out.data_mut();
    for y in 0..oh {
        for xo in 0..ow {
            for ch in 0..c {
                let mut best_i = ((2 * y) * w + 2 * xo) * c + ch;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * w + 2 * xo + dx) * c + ch;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                let oi = (y * ow + xo) * c + ch;
                o[oi] = best;
                arg[oi] = best_i as u32;
            }
        }
    }
    Ok((out, arg))
}

/// Routes each output gradient to the input position that won the max.
pub fn maxpool2_backward<F: Scalar>(input_shape: &[usize], argmax: &[u32], d_out: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(d_out.data()) {
        d[i as usize] += g;
    }
    dx
}

/// Affine map `b + x W` followed by `activation`. Returns `(output, pre_activation)`.
pub fn dense<F: Scalar>(
    input: &Tensor<F>,
    weights: &Tensor<F>,
    bias: &Tensor<F>,
    activation: Activation,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let n = input.len();
    let m = match *weights.shape() {
        [wn, wm] if wn == n => wm,
        ref s => {
            return Err(Error::Shape(format!(
                "dense: input of length {n} incompatible with weights {s:?}"
            )))
        }
    };
    bias.expect_shape("dense bias", &[m])?;
    let mut pre = Tensor::from_vec(&[m], bias.data().to_vec())?;
    let w = weights.data();
    for (i, &a) in input.data().iter().enumerate() {
        if a != F::zero() {
            axpy(pre.data_mut(), a, &w[i * m..][..m]);
        }
    }
    let out = Tensor::from_vec(&[m], pre.data().iter().map(|&z| activation.apply(z)).collect())?;
    Ok((out, pre))
}

pub struct DenseGrads<F> {
    pub input: Tensor<F>,
    pub weights: Tensor<F>,
    pub bias: Tensor<F>,
}

pub fn dense_backward<F: Scalar>(
    input: &Tensor<F>,
    weights: &Tensor<F>,
    pre: &Tensor<F>,
    out: &Tensor<F>,
    activation: Activation,
    d_out: &Tensor<F>,
) -> DenseGrads<F> {
    let mut dw = Tensor::zeros(weights.shape());
    let mut db = Tensor::zeros(pre.shape());
    let dx = dense_backward_into(input, weights, pre, out, activation, d_out, &mut dw, &mut db);
    DenseGrads {
        input: dx,
        weights: dw,
        bias: db,
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward_into<F: Scalar>(
    input: &Tensor<F>,
    weights: &Tensor<F>,
    pre: &Tensor<F>,
    out: &Tensor<F>,
    activation: Activation,
    d_out: &Tensor<F>,
    d_weights: &mut Tensor<F>,
    d_bias: &mut Tensor<F>,
) -> Tensor<F> {
    let m = pre.len();
    let dz: Vec<F> = d_out
        .data()
        .iter()
        .zip(pre.data().iter().zip(out.data()))
        .map(|(&g, (&z, &a))| g * activation.derivative(z, a))
        .collect();
    for (b, &g) in d_bias.data_mut().iter_mut().zip(&dz) {
        *b += g;
    }
    let w = weights.data();
    let dw = d_weights.data_mut();
    let mut dx = Tensor::zeros(input.shape());
    for (i, (&a, d)) in input.data().iter().zip(dx.data_mut()).enumerate() {
        if a != F::zero() {
            axpy(&mut dw[i * m..][..m], a, &dz);
        }
        *d = dot(&w[i * m..][..m], &dz);
    }
    dx
}

/// LSTM weights: `w_x [d, 4m]`, `w_h [m, 4m]`, `bias [4m]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams<'a, F> {
    pub w_x: &'a Tensor<F>,
    pub w_h: &'a Tensor<F>,
    pub bias: &'a Tensor<F>,
}

impl<F: Scalar> LstmParams<'_, F> {
    fn dims(&self) -> Result<(usize, usize)> {
        let m4 = self.bias.len();
        if m4 % 4 != 0 || m4 == 0 {
            return Err(Error::Shape(format!("lstm bias length {m4} not a positive multiple of 4")));
        }
        let m = m4 / 4;
        let d = match *self.w_x.shape() {
            [d, c] if c == m4 => d,
            ref s => return Err(Error::Shape(format!("lstm w_x shape {s:?} incompatible with hidden {m}"))),
        };
        self.w_h.expect_shape("lstm w_h", &[m, m4])?;
        Ok((d, m))
    }
}

/// Everything one step's backward pass needs.
#[derive(Debug, Clone)]
pub struct LstmCache<F> {
    pub x: Vec<F>,
    pub h_prev: Vec<F>,
    pub c_prev: Vec<F>,
    /// Activated gates, `[i | f | g | o]`.
    pub gates: Vec<F>,
    pub c: Vec<F>,
    pub tanh_c: Vec<F>,
    pub h: Vec<F>,
}

pub fn lstm_step_cached<F: Scalar>(
    x: &[F],
    h_prev: &[F],
    c_prev: &[F],
    params: LstmParams<'_, F>,
) -> Result<LstmCache<F>> {
    let (d, m) = params.dims()?;
    if x.len() != d || h_prev.len() != m || c_prev.len() != m {
        return Err(Error::Shape(format!(
            "lstm_step: x {} / h {} / c {} vs expected {d} / {m} / {m}",
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let m4 = 4 * m;
    let mut z = params.bias.data().to_vec();
    let wx = params.w_x.data();
    for (i, &a) in x.iter().enumerate() {
        if a != F::zero() {
            axpy(&mut z, a, &wx[i * m4..][..m4]);
        }
    }
    let wh = params.w_h.data();
    for (i, &a) in h_prev.iter().enumerate() {
        if a != F::zero() {
            axpy(&mut z, a, &wh[i * m4..][..m4]);
        }
    }
    let mut gates = z;
    for (j, v) in gates.iter_mut().enumerate() {
        *v = if j / m == 2 { v.tanh() } else { sigmoid(*v) };
    }
    let mut c = vec![F::zero(); m];
    let mut tanh_c = vec![F::zero(); m];
    let mut h = vec![F::zero(); m];
    for j in 0..m {
        let (i_g, f_g, g_g, o_g) = (gates[j], gates[m + j], gates[2 * m + j], gates[3 * m + j]);
        c[j] = f_g * c_prev[j] + i_g * g_g;
        tanh_c[j] = c[j].tanh();
        h[j] = o_g * tanh_c[j];
    }
    Ok(LstmCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        c,
        tanh_c,
        h,
    })
}

/// One LSTM step: returns `(h, c)`.
pub fn lstm_step<F: Scalar>(
    x: &Tensor<F>,
    h_prev: &Tensor<F>,
    c_prev: &Tensor<F>,
    params: LstmParams<'_, F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let cache = lstm_step_cached(x.data(), h_prev.data(), c_prev.data(), params)?;
    let m = cache.h.len();
    Ok((Tensor::from_vec(&[m], cache.h)?, Tensor::from_vec(&[m], cache.c)?))
}

/// Parameter-gradient accumulators for the LSTM.
pub struct LstmGrads<'a, F> {
    pub w_x: &'a mut Tensor<F>,
    pub w_h: &'a mut Tensor<F>,
    pub bias: &'a mut Tensor<F>,
}

/// Backward through one step. Takes `dL/dh` and `dL/dc` flowing into this
/// step's outputs, accumulates parameter gradients and returns
/// `(dL/dx, dL/dh_prev, dL/dc_prev)`.
pub fn lstm_step_backward<F: Scalar>(
    cache: &LstmCache<F>,
    params: LstmParams<'_, F>,
    d_h: &[F],
    d_c: &[F],
    grads: LstmGrads<'_, F>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let m = cache.h.len();
    let m4 = 4 * m;
    let one = F::one();
    let mut dz = vec![F::zero(); m4];
    let mut dc_prev = vec![F::zero(); m];
    for j in 0..m {
        let (i_g, f_g, g_g, o_g) = (
            cache.gates[j],
            cache.gates[m + j],
            cache.gates[2 * m + j],
            cache.gates[3 * m + j],
        );
        let tc = cache.tanh_c[j];
        let d_o = d_h[j] * tc;
        let dc = d_c[j] + d_h[j] * o_g * (one - tc * tc);
        let d_i = dc * g_g;
        let d_g = dc * i_g;
        let d_f = dc * cache.c_prev[j];
        dc_prev[j] = dc * f_g;
        dz[j] = d_i * i_g * (one - i_g);
        dz[m + j] = d_f * f_g * (one - f_g);
        dz[2 * m + j] = d_g * (one - g_g * g_g);
        dz[3 * m + j] = d_o * o_g * (one - o_g);
    }
    for (b, &g) in grads.bias.data_mut().iter_mut().zip(&dz) {
        *b += g;
    }
    let wx = params.w_x.data();
    let dwx = grads.w_x.data_mut();
    let mut dx = vec![F::zero(); cache.x.len()];
    for (i, &a) in cache.x.iter().enumerate() {
        if a != F::zero() {
            axpy(&mut dwx[i * m4..][..m4], a, &dz);
        }
        dx[i] = dot(&wx[i * m4..][..m4], &dz);
    }
    let wh = params.w_h.data();
    let dwh = grads.w_h.data_mut();
    let mut dh_prev = vec![F::zero(); m];
    for (i, &a) in cache.h_prev.iter().enumerate() {
        if a != F::zero() {
            axpy(&mut dwh[i * m4..][..m4], a, &dz);
        }
        dh_prev[i] = dot(&wh[i * m4..][..m4], &dz);
    }
    (dx, dh_prev, dc_prev)
}
