use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d, conv2d_backward_into, dense, dense_backward_into, lstm_step_backward, lstm_step_cached,
    maxpool2, maxpool2_backward, sigmoid, Activation, LstmCache, LstmGrads, LstmParams,
};
use super::tensor::{dot, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::pose_features::RasterClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for InputShape {
    fn default() -> Self {
        InputShape {
            frames: 7,
            height: 64,
            width: 64,
            channels: 1,
        }
    }
}

fn default_kernel() -> usize {
    3
}

fn default_pool() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub filters: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// 2 for a 2x2 max pool after the activation, 1 for none.
    #[serde(default = "default_pool")]
    pub pool: usize,
}

impl ConvBlock {
    pub fn new(filters: usize) -> Self {
        ConvBlock {
            filters,
            kernel: 3,
            pool: 2,
        }
    }
}

/// Frame CNN (conv → ReLU → pool blocks, flatten, dense ReLU embedding)
/// shared across time, an LSTM over the embeddings, and a sigmoid unit on
/// the final hidden state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input: InputShape,
    pub conv_blocks: Vec<ConvBlock>,
    pub frame_embedding: usize,
    pub lstm_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input: InputShape::default(),
            conv_blocks: vec![ConvBlock::new(16), ConvBlock::new(32)],
            frame_embedding: 64,
            lstm_hidden: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Checks the config; `path` prefixes field names in errors.
    pub fn validate(&self, path: &str) -> Result<()> {
        let p = |f: &str| if path.is_empty() { f.to_string() } else { format!("{path}.{f}") };
        let i = &self.input;
        if i.frames < 2 {
            return Err(Error::config(p("input.frames"), format!("must be at least 2, got {}", i.frames)));
        }
        for (name, v) in [("input.height", i.height), ("input.width", i.width), ("input.channels", i.channels)] {
            if v == 0 {
                return Err(Error::config(p(name), "must be at least 1"));
            }
        }
        let mut divisor = 1;
        for (b, block) in self.conv_blocks.iter().enumerate() {
            if block.filters == 0 {
                return Err(Error::config(p(&format!("conv_blocks[{b}].filters")), "must be at least 1"));
            }
            if block.kernel % 2 == 0 {
                return Err(Error::config(
                    p(&format!("conv_blocks[{b}].kernel")),
                    format!("must be odd, got {}", block.kernel),
                ));
            }
            if block.pool != 1 && block.pool != 2 {
                return Err(Error::config(
                    p(&format!("conv_blocks[{b}].pool")),
                    format!("must be 1 or 2, got {}", block.pool),
                ));
            }
            divisor *= block.pool;
        }
        if i.height % divisor != 0 || i.width % divisor != 0 {
            return Err(Error::config(
                p("input"),
                format!("{}x{} not divisible by the pooling factor {divisor}", i.height, i.width),
            ));
        }
        if self.frame_embedding == 0 {
            return Err(Error::config(p("frame_embedding"), "must be at least 1"));
        }
        if self.lstm_hidden == 0 {
            return Err(Error::config(p("lstm_hidden"), "must be at least 1"));
        }
        Ok(())
    }

    /// Shape `[h, w, c]` entering each conv block, followed by the shape
    /// after the last block.
    fn feature_shapes(&self) -> Vec<[usize; 3]> {
        let mut s = [self.input.height, self.input.width, self.input.channels];
        let mut out = vec![s];
        for b in &self.conv_blocks {
            s = [s[0] / b.pool, s[1] / b.pool, b.filters];
            out.push(s);
        }
        out
    }

    pub fn flat_features(&self) -> usize {
        self.feature_shapes().last().unwrap().iter().product()
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.input.channels;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            out.push((format!("conv{i}.kernel"), vec![b.kernel, b.kernel, cin, b.filters]));
            out.push((format!("conv{i}.bias"), vec![b.filters]));
            cin = b.filters;
        }
        let (e, m) = (self.frame_embedding, self.lstm_hidden);
        out.push(("embed.weight".into(), vec![self.flat_features(), e]));
        out.push(("embed.bias".into(), vec![e]));
        out.push(("lstm.w_x".into(), vec![e, 4 * m]));
        out.push(("lstm.w_h".into(), vec![m, 4 * m]));
        out.push(("lstm.bias".into(), vec![4 * m]));
        out.push(("out.weight".into(), vec![m, 1]));
        out.push(("out.bias".into(), vec![1]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

fn glorot_limit(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match *shape {
        [k1, k2, cin, cout] => (k1 * k2 * cin, k1 * k2 * cout),
        [n, m] => (n, m),
        _ => unreachable!("glorot on non-weight tensor"),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    config: ModelConfig,
    params: Vec<Tensor<F>>,
}

/// Per-frame intermediates of the CNN.
struct FrameCache<F> {
    /// Input to each conv block.
    block_inputs: Vec<Tensor<F>>,
    /// ReLU output of each conv block, before pooling.
    activations: Vec<Tensor<F>>,
    argmax: Vec<Option<Vec<u32>>>,
    flat: Tensor<F>,
    embed_pre: Tensor<F>,
    embed: Tensor<F>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<F> {
    frames: Vec<FrameCache<F>>,
    steps: Vec<LstmCache<F>>,
    pub logit: F,
    pub probability: f64,
}

/// Logits are clamped here before the sigmoid so the probability stays
/// strictly inside (0, 1) in 64-bit arithmetic.
const LOGIT_CLAMP: f64 = 36.0;

fn probability_of(logit: f64) -> f64 {
    sigmoid(logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
}

impl<F: Scalar> Model<F> {
    /// Glorot-uniform weights drawn in storage order from the config seed,
    /// zero biases, LSTM forget-gate bias 1.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate("model")?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let m = config.lstm_hidden;
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::zeros(&shape);
                if shape.len() >= 2 {
                    let limit = glorot_limit(&shape);
                    for v in t.data_mut() {
                        *v = F::of(rng.gen_range(-limit..limit));
                    }
                } else if name == "lstm.bias" {
                    t.data_mut()[m..2 * m].iter_mut().for_each(|v| *v = F::one());
                }
                t
            })
            .collect();
        Ok(Model {
            config: config.clone(),
            params,
        })
    }

    pub fn from_parameters(config: &ModelConfig, params: Vec<Tensor<F>>) -> Result<Self> {
        config.validate("model")?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            t.expect_shape(name, shape)?;
        }
        Ok(Model {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn into_parameters(self) -> Vec<Tensor<F>> {
        self.params
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.config.parameter_layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Tensor<F>> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn tail_index(&self) -> usize {
        2 * self.config.conv_blocks.len()
    }

    fn lstm_params(&self) -> LstmParams<'_, F> {
        let t = self.tail_index();
        LstmParams {
            w_x: &self.params[t + 2],
            w_h: &self.params[t + 3],
            bias: &self.params[t + 4],
        }
    }

    fn check_frames(&self, frames: &[Tensor<F>]) -> Result<()> {
        let i = &self.config.input;
        if frames.len() != i.frames {
            return Err(Error::Shape(format!(
                "clip has {} frames, model expects {}",
                frames.len(),
                i.frames
            )));
        }
        for f in frames {
            f.expect_shape("frame", &[i.height, i.width, i.channels])?;
        }
        Ok(())
    }

    fn frame_forward(&self, frame: &Tensor<F>) -> Result<FrameCache<F>> {
        let nb = self.config.conv_blocks.len();
        let mut block_inputs = Vec::with_capacity(nb);
        let mut activations = Vec::with_capacity(nb);
        let mut argmax = Vec::with_capacity(nb);
        let mut x = frame.clone();
        for (b, block) in self.config.conv_blocks.iter().enumerate() {
            let mut a = conv2d(&x, &self.params[2 * b], &self.params[2 * b + 1])?;
            a.data_mut().iter_mut().for_each(|v| *v = v.max(F::zero()));
            let (next, arg) = if block.pool == 2 {
                let (p, arg) = maxpool2(&a)?;
                (p, Some(arg))
            } else {
                (a.clone(), None)
            };
            block_inputs.push(std::mem::replace(&mut x, next));
            activations.push(a);
            argmax.push(arg);
        }
        let flat = Tensor::from_vec(&[x.len()], x.into_data())?;
        let t = self.tail_index();
        let (embed, embed_pre) = dense(&flat, &self.params[t], &self.params[t + 1], Activation::Relu)?;
        Ok(FrameCache {
            block_inputs,
            activations,
            argmax,
            flat,
            embed_pre,
            embed,
        })
    }

    /// Forward pass keeping the intermediates needed for `backward`.
    pub fn forward_cached(&self, frames: &[Tensor<F>]) -> Result<ForwardCache<F>> {
        self.check_frames(frames)?;
        let frame_caches = frames
            .iter()
            .map(|f| self.frame_forward(f))
            .collect::<Result<Vec<_>>>()?;
        let m = self.config.lstm_hidden;
        let mut h = vec![F::zero(); m];
        let mut c = vec![F::zero(); m];
        let mut steps = Vec::with_capacity(frames.len());
        for fc in &frame_caches {
            let cache = lstm_step_cached(fc.embed.data(), &h, &c, self.lstm_params())?;
            h.clone_from(&cache.h);
            c.clone_from(&cache.c);
            steps.push(cache);
        }
        let t = self.tail_index();
        let logit = self.params[t + 6].data()[0] + dot(self.params[t + 5].data(), &h);
        Ok(ForwardCache {
            frames: frame_caches,
            steps,
            logit,
            probability: probability_of(logit.as_f64()),
        })
    }

    /// Probability of the positive class, strictly inside (0, 1).
    pub fn forward(&self, frames: &[Tensor<F>]) -> Result<f64> {
        Ok(self.forward_cached(frames)?.probability)
    }

    /// Backpropagates `d_logit = dL/dlogit`, returning one gradient tensor per
    /// parameter in storage order.
    pub fn backward(&self, cache: &ForwardCache<F>, d_logit: F) -> Vec<Tensor<F>> {
        let mut grads = self.zero_grads();
        self.backward_into(cache, d_logit, &mut grads);
        grads
    }

    fn backward_into(&self, cache: &ForwardCache<F>, d_logit: F, grads: &mut [Tensor<F>]) {
        let t = self.tail_index();
        let m = self.config.lstm_hidden;
        let last_h = &cache.steps.last().expect("at least two steps").h;
        grads[t + 6].data_mut()[0] += d_logit;
        for (g, &hv) in grads[t + 5].data_mut().iter_mut().zip(last_h) {
            *g += hv * d_logit;
        }
        let mut dh: Vec<F> = self.params[t + 5].data().iter().map(|&w| w * d_logit).collect();
        let mut dc = vec![F::zero(); m];

        let (conv_grads, tail_grads) = grads.split_at_mut(t);
        let (embed_grads, rest) = tail_grads.split_at_mut(2);
        let (lstm_grads, _) = rest.split_at_mut(3);
        let (gw, gb) = embed_grads.split_at_mut(1);
        let (gx, rest) = lstm_grads.split_at_mut(1);
        let (gh, gbias) = rest.split_at_mut(1);

        let shapes = self.config.feature_shapes();
        for (step, fc) in cache.steps.iter().zip(&cache.frames).rev() {
            let (dx, dh_prev, dc_prev) = lstm_step_backward(
                step,
                self.lstm_params(),
                &dh,
                &dc,
                LstmGrads {
                    w_x: &mut gx[0],
                    w_h: &mut gh[0],
                    bias: &mut gbias[0],
                },
            );
            dh = dh_prev;
            dc = dc_prev;

            let d_embed = Tensor::from_vec(&[dx.len()], dx).expect("embedding length");
            let d_flat = dense_backward_into(
                &fc.flat,
                &self.params[t],
                &fc.embed_pre,
                &fc.embed,
                Activation::Relu,
                &d_embed,
                &mut gw[0],
                &mut gb[0],
            );
            let mut d = Tensor::from_vec(shapes.last().unwrap(), d_flat.into_data()).expect("flat shape");
            for b in (0..self.config.conv_blocks.len()).rev() {
                let act = &fc.activations[b];
                let mut d_act = match &fc.argmax[b] {
                    Some(arg) => maxpool2_backward(act.shape(), arg, &d),
                    None => d,
                };
                for (g, &a) in d_act.data_mut().iter_mut().zip(act.data()) {
                    if a <= F::zero() {
                        *g = F::zero();
                    }
                }
                let need_input = b > 0;
                let mut d_in = need_input.then(|| Tensor::zeros(fc.block_inputs[b].shape()));
                let (gk, gbb) = conv_grads[2 * b..2 * b + 2].split_at_mut(1);
                conv2d_backward_into(
                    &fc.block_inputs[b],
                    &self.params[2 * b],
                    &self.params[2 * b + 1],
                    &d_act,
                    d_in.as_mut(),
                    &mut gk[0],
                    &mut gbb[0],
                )
                .expect("shapes fixed by forward pass");
                match d_in {
                    Some(di) => d = di,
                    None => break,
                }
            }
        }
    }
}

impl<F: Scalar> ForwardCache<F> {
    /// Which linear piece of the network this pass used: the sign of every
    /// ReLU and the winner of every pool window.
    pub fn piecewise_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for fc in &self.frames {
            for (act, arg) in fc.activations.iter().zip(&fc.argmax) {
                out.extend(act.data().iter().map(|&v| (v > F::zero()) as u32));
                if let Some(arg) = arg {
                    out.extend_from_slice(arg);
                }
            }
            out.extend(fc.embed_pre.data().iter().map(|&v| (v > F::zero()) as u32));
        }
        out
    }
}

/// Converts a rasterized clip into per-frame `[H, W, 1]` tensors.
pub fn clip_tensors<F: Scalar>(clip: &RasterClip) -> Result<Vec<Tensor<F>>> {
    clip.frames
        .iter()
        .map(|f| Tensor::from_vec(&[f.height, f.width, 1], f.data.iter().map(|&v| F::of(v as f64)).collect()))
        .collect()
}

impl Model<f32> {
    pub fn predict_clip(&self, clip: &RasterClip) -> Result<f64> {
        self.forward(&clip_tensors(clip)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GrayImage;
    use crate::pose_features::Label;

    fn micro(frames: usize) -> ModelConfig {
        ModelConfig {
            input: InputShape {
                frames,
                height: 8,
                width: 8,
                channels: 1,
            },
            conv_blocks: vec![ConvBlock::new(4)],
            frame_embedding: 6,
            lstm_hidden: 4,
            seed: 3,
        }
    }

    fn clip(frames: usize, size: usize, f: impl Fn(usize, usize, usize) -> f32) -> RasterClip {
        RasterClip {
            frames: (0..frames)
                .map(|t| GrayImage::from_fn(size, size, |x, y| f(t, x, y)))
                .collect(),
            label: Label::Positive,
            subject_id: "s".into(),
        }
    }

    #[test]
    fn default_layout_names() {
        let names: Vec<String> = ModelConfig::default().parameter_layout().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "conv0.kernel", "conv0.bias", "conv1.kernel", "conv1.bias", "embed.weight", "embed.bias",
                "lstm.w_x", "lstm.w_h", "lstm.bias", "out.weight", "out.bias"
            ]
        );
        assert_eq!(ModelConfig::default().flat_features(), 16 * 16 * 32);
    }

    #[test]
    fn parameter_count_independent_of_frames() {
        let a = Model::<f32>::init(&micro(2)).unwrap();
        let b = Model::<f32>::init(&micro(9)).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert_eq!(a.parameters(), b.parameters());
    }

    #[test]
    fn zero_output_weights_give_half() {
        let cfg = micro(3);
        let mut model = Model::<f32>::init(&cfg).unwrap();
        let n = model.parameters().len();
        model.parameters_mut()[n - 2].fill(0.0);
        let p = model.predict_clip(&clip(3, 8, |t, x, y| ((t + x * y) % 3) as f32)).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn constant_clip_reversal_invariant() {
        let model = Model::<f32>::init(&micro(4)).unwrap();
        let c = clip(4, 8, |_, x, y| ((x + 2 * y) % 5) as f32 / 4.0);
        let mut r = c.clone();
        r.frames.reverse();
        assert_eq!(model.predict_clip(&c).unwrap(), model.predict_clip(&r).unwrap());
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let model = Model::<f64>::init(&micro(2)).unwrap();
        let b = &model.parameters()[2 + 4];
        assert_eq!(&b.data()[4..8], &[1.0; 4]);
        assert!(b.data()[..4].iter().chain(&b.data()[8..]).all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_dims_rejected() {
        let model = Model::<f32>::init(&micro(3)).unwrap();
        assert!(matches!(model.predict_clip(&clip(2, 8, |_, _, _| 0.0)), Err(Error::Shape(_))));
        assert!(matches!(model.predict_clip(&clip(3, 6, |_, _, _| 0.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = micro(1);
        assert!(matches!(cfg.validate("model"), Err(Error::Config { path, .. }) if path == "model.input.frames"));
        cfg.input.frames = 2;
        cfg.input.height = 9;
        assert!(matches!(cfg.validate("model"), Err(Error::Config { path, .. }) if path == "model.input"));
        cfg.input.height = 8;
        cfg.conv_blocks[0].kernel = 2;
        assert!(matches!(cfg.validate("m"), Err(Error::Config { path, .. }) if path == "m.conv_blocks[0].kernel"));
    }
}
