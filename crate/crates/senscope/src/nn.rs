//! A small differentiable CNN classifier with exact reverse-mode gradients
//! down to the input pixels.
//!
//! The architecture is a stack of (3x3 conv, zero padding, stride 1) + ReLU +
//! (2x2 max pool) stages followed by one fully-connected layer producing
//! pre-softmax class scores. Stage widths, input shape and class count are
//! data-driven; kernel size and pooling are fixed.
//!
//! Raw pixel inputs on `[0, 255]` are normalized internally as
//! `(x - input_offset) / input_scale`; gradients returned by
//! [`input_gradient`] are chained through that normalization, so they are
//! derivatives with respect to the *raw* pixel values.
//!
//! All arithmetic is f64. Model files store weights as f32 little-endian.

use std::fs;
use std::path::Path;

use crate::dataset::DatasetSplit;
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{GradientMap, ImageTensor};

const KERNEL: usize = 3;
const PAD: usize = 1;
const POOL: usize = 2;
const MODEL_MAGIC: &[u8; 4] = b"SNSM";
const MODEL_VERSION: u32 = 1;

/// Shape description of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub input_h: usize,
    pub input_w: usize,
    pub input_ch: usize,
    /// Output channels of each conv+relu+pool stage. May be empty, which
    /// yields a purely linear (fully-connected) model on the raw input.
    pub conv_channels: Vec<usize>,
    pub num_classes: usize,
    /// Input normalization: the network consumes `(x - offset) / scale`.
    pub input_offset: f64,
    pub input_scale: f64,
}

impl Arch {
    /// Default two-stage network for `size` x `size` RGB inputs.
    pub fn default_for(size: usize, num_classes: usize) -> Self {
        Self {
            input_h: size,
            input_w: size,
            input_ch: 3,
            conv_channels: vec![8, 16],
            num_classes,
            input_offset: 128.0,
            input_scale: 64.0,
        }
    }

    /// Identity-normalized architecture without conv stages: a linear model.
    pub fn linear(input_h: usize, input_w: usize, input_ch: usize, num_classes: usize) -> Self {
        Self {
            input_h,
            input_w,
            input_ch,
            conv_channels: Vec::new(),
            num_classes,
            input_offset: 0.0,
            input_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0 || self.input_w == 0 {
            return Err(Error::InvalidArgument("input dimensions must be positive".into()));
        }
        if self.input_ch != 1 && self.input_ch != 3 {
            return Err(Error::InvalidArgument("input channels must be 1 or 3".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("need at least one class".into()));
        }
        if self.input_scale == 0.0
            || !self.input_scale.is_finite()
            || !self.input_offset.is_finite()
        {
            return Err(Error::InvalidArgument("bad input normalization constants".into()));
        }
        let (mut h, mut w) = (self.input_h, self.input_w);
        for (i, &ch) in self.conv_channels.iter().enumerate() {
            if ch == 0 {
                return Err(Error::InvalidArgument(format!("stage {i} has zero channels")));
            }
            if h % POOL != 0 || w % POOL != 0 {
                return Err(Error::InvalidArgument(format!(
                    "stage {i} input {h}x{w} is not divisible by the pool size"
                )));
            }
            h /= POOL;
            w /= POOL;
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_h * self.input_w * self.input_ch
    }

    /// (height, width, channels) entering each stage; the last entry is the
    /// shape feeding the fully-connected layer.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = vec![(self.input_h, self.input_w, self.input_ch)];
        let (mut h, mut w) = (self.input_h, self.input_w);
        for &ch in &self.conv_channels {
            h /= POOL;
            w /= POOL;
            shapes.push((h, w, ch));
        }
        shapes
    }

    pub fn fc_input_len(&self) -> usize {
        let (h, w, c) = *self.stage_shapes().last().unwrap();
        h * w * c
    }

    pub fn param_count(&self) -> usize {
        let shapes = self.stage_shapes();
        let mut count = 0;
        for (i, &oc) in self.conv_channels.iter().enumerate() {
            let ic = shapes[i].2;
            count += oc * KERNEL * KERNEL * ic + oc;
        }
        count + self.num_classes * self.fc_input_len() + self.num_classes
    }
}

/// Weights of one conv stage. Kernels are flattened in
/// `(out_channel, ky, kx, in_channel)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Full parameter set of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub stages: Vec<ConvStage>,
    /// Flattened `(class, feature)`.
    pub fc_weights: Vec<f64>,
    pub fc_bias: Vec<f64>,
}

impl ModelParams {
    /// He-style random initialization, deterministic in `seed`.
    pub fn init_random(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = CounterRng::new(seed);
        let shapes = arch.stage_shapes();
        let mut stages = Vec::with_capacity(arch.conv_channels.len());
        for (i, &oc) in arch.conv_channels.iter().enumerate() {
            let ic = shapes[i].2;
            let std = (2.0 / (KERNEL * KERNEL * ic) as f64).sqrt();
            let weights =
                (0..oc * KERNEL * KERNEL * ic).map(|_| std * rng.next_gaussian()).collect();
            stages.push(ConvStage { weights, bias: vec![0.0; oc] });
        }
        let fc_in = arch.fc_input_len();
        let std = (1.0 / fc_in as f64).sqrt();
        let fc_weights =
            (0..arch.num_classes * fc_in).map(|_| std * rng.next_gaussian()).collect();
        let fc_bias = vec![0.0; arch.num_classes];
        Ok(Self { arch, stages, fc_weights, fc_bias })
    }

    /// Builds a linear model `f_k(x) = w_k . x + b_k` from explicit rows.
    pub fn linear_from_rows(
        input_h: usize,
        input_w: usize,
        input_ch: usize,
        rows: Vec<Vec<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let arch = Arch::linear(input_h, input_w, input_ch, rows.len());
        arch.validate()?;
        let n = arch.input_len();
        if rows.iter().any(|r| r.len() != n) || bias.len() != rows.len() {
            return Err(Error::ShapeMismatch("linear rows do not match input length".into()));
        }
        let fc_weights = rows.into_iter().flatten().collect();
        Ok(Self { arch, stages: Vec::new(), fc_weights, fc_bias: bias })
    }

    /// Serializes to the binary model format (magic "SNSM").
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MODEL_MAGIC);
        bytes.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for v in [
            self.arch.input_h,
            self.arch.input_w,
            self.arch.input_ch,
            self.arch.conv_channels.len(),
        ] {
            bytes.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &ch in &self.arch.conv_channels {
            bytes.extend_from_slice(&(ch as u32).to_le_bytes());
        }
        bytes.extend_from_slice(&(self.arch.num_classes as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.arch.input_offset as f32).to_le_bytes());
        bytes.extend_from_slice(&(self.arch.input_scale as f32).to_le_bytes());
        let weights = self
            .stages
            .iter()
            .flat_map(|s| s.weights.iter().chain(s.bias.iter()))
            .chain(self.fc_weights.iter())
            .chain(self.fc_bias.iter());
        for &w in weights {
            bytes.extend_from_slice(&(w as f32).to_le_bytes());
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("model file truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MODEL_MAGIC {
            return Err(Error::Format("model magic is not SNSM".into()));
        }
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let version = read_u32(&mut pos)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let input_h = read_u32(&mut pos)? as usize;
        let input_w = read_u32(&mut pos)? as usize;
        let input_ch = read_u32(&mut pos)? as usize;
        let num_stages = read_u32(&mut pos)? as usize;
        let mut conv_channels = Vec::with_capacity(num_stages);
        for _ in 0..num_stages {
            conv_channels.push(read_u32(&mut pos)? as usize);
        }
        let num_classes = read_u32(&mut pos)? as usize;
        let input_offset = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64;
        let input_scale = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64;
        let arch = Arch {
            input_h,
            input_w,
            input_ch,
            conv_channels,
            num_classes,
            input_offset,
            input_scale,
        };
        arch.validate().map_err(|e| Error::Format(format!("model header invalid: {e}")))?;

        let remaining = &bytes[pos..];
        if remaining.len() != arch.param_count() * 4 {
            return Err(Error::Format(format!(
                "model weight payload has {} bytes, expected {}",
                remaining.len(),
                arch.param_count() * 4
            )));
        }
        let mut values = remaining
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        if !values.clone().all(|v| v.is_finite()) {
            return Err(Error::Format("model weights contain non-finite values".into()));
        }
        let shapes = arch.stage_shapes();
        let mut stages = Vec::with_capacity(arch.conv_channels.len());
        for (i, &oc) in arch.conv_channels.iter().enumerate() {
            let ic = shapes[i].2;
            let weights = values.by_ref().take(oc * KERNEL * KERNEL * ic).collect();
            let bias = values.by_ref().take(oc).collect();
            stages.push(ConvStage { weights, bias });
        }
        let fc_in = arch.fc_input_len();
        let fc_weights = values.by_ref().take(arch.num_classes * fc_in).collect();
        let fc_bias = values.by_ref().take(arch.num_classes).collect();
        Ok(Self { arch, stages, fc_weights, fc_bias })
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        if img.height() != self.arch.input_h
            || img.width() != self.arch.input_w
            || img.channels() != self.arch.input_ch
        {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{}x{} does not match input layer {}x{}x{}",
                img.height(),
                img.width(),
                img.channels(),
                self.arch.input_h,
                self.arch.input_w,
                self.arch.input_ch
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

struct ForwardCache {
    /// Normalized input, then pooled output of each stage.
    stage_inputs: Vec<Vec<f64>>,
    pre_relu: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<usize>>,
    scores: Vec<f64>,
}

fn conv_forward(
    input: &[f64],
    h: usize,
    w: usize,
    ic: usize,
    stage: &ConvStage,
    oc: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; h * w * oc];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * oc;
            for o in 0..oc {
                out[base + o] = stage.bias[o];
            }
            for ky in 0..KERNEL {
                let yy = y as isize + ky as isize - PAD as isize;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let xx = x as isize + kx as isize - PAD as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let in_base = (yy as usize * w + xx as usize) * ic;
                    for o in 0..oc {
                        let w_base = ((o * KERNEL + ky) * KERNEL + kx) * ic;
                        let mut acc = 0.0;
                        for i in 0..ic {
                            acc += input[in_base + i] * stage.weights[w_base + i];
                        }
                        out[base + o] += acc;
                    }
                }
            }
        }
    }
    out
}

/// dL/d_input of the conv, plus weight/bias gradient accumulation if requested.
fn conv_backward(
    d_out: &[f64],
    input: &[f64],
    h: usize,
    w: usize,
    ic: usize,
    stage: &ConvStage,
    oc: usize,
    mut grads: Option<(&mut [f64], &mut [f64])>,
    want_input_grad: bool,
) -> Vec<f64> {
    let mut d_in = vec![0.0; if want_input_grad { h * w * ic } else { 0 }];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * oc;
            if let Some((_, d_bias)) = grads.as_mut() {
                for o in 0..oc {
                    d_bias[o] += d_out[base + o];
                }
            }
            for ky in 0..KERNEL {
                let yy = y as isize + ky as isize - PAD as isize;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let xx = x as isize + kx as isize - PAD as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let in_base = (yy as usize * w + xx as usize) * ic;
                    for o in 0..oc {
                        let g = d_out[base + o];
                        if g == 0.0 {
                            continue;
                        }
                        let w_base = ((o * KERNEL + ky) * KERNEL + kx) * ic;
                        if want_input_grad {
                            for i in 0..ic {
                                d_in[in_base + i] += g * stage.weights[w_base + i];
                            }
                        }
                        if let Some((d_weights, _)) = grads.as_mut() {
                            for i in 0..ic {
                                d_weights[w_base + i] += g * input[in_base + i];
                            }
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// 2x2 max pooling; ties route to the first maximum in scan order.
fn pool_forward(input: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let (ph, pw) = (h / POOL, w / POOL);
    let mut out = vec![0.0; ph * pw * c];
    let mut argmax = vec![0usize; ph * pw * c];
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..POOL {
                    for dx in 0..POOL {
                        let idx = ((py * POOL + dy) * w + (px * POOL + dx)) * c + ch;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (py * pw + px) * c + ch;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

fn forward_cached(params: &ModelParams, raw: &[f64]) -> Result<ForwardCache> {
    let arch = &params.arch;
    if raw.len() != arch.input_len() {
        return Err(Error::ShapeMismatch(format!(
            "input length {} != expected {}",
            raw.len(),
            arch.input_len()
        )));
    }
    let normalized: Vec<f64> =
        raw.iter().map(|&v| (v - arch.input_offset) / arch.input_scale).collect();
    let shapes = arch.stage_shapes();
    let mut stage_inputs = vec![normalized];
    let mut pre_relu = Vec::new();
    let mut pool_argmax = Vec::new();
    for (s, &oc) in arch.conv_channels.iter().enumerate() {
        let (h, w, ic) = shapes[s];
        let z = conv_forward(stage_inputs.last().unwrap(), h, w, ic, &params.stages[s], oc);
        let a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
        let (pooled, argmax) = pool_forward(&a, h, w, oc);
        pre_relu.push(z);
        pool_argmax.push(argmax);
        stage_inputs.push(pooled);
    }
    let features = stage_inputs.last().unwrap();
    let fc_in = arch.fc_input_len();
    debug_assert_eq!(features.len(), fc_in);
    let mut scores = params.fc_bias.clone();
    for (k, score) in scores.iter_mut().enumerate() {
        let row = &params.fc_weights[k * fc_in..(k + 1) * fc_in];
        *score += row.iter().zip(features).map(|(w, f)| w * f).sum::<f64>();
    }
    Ok(ForwardCache { stage_inputs, pre_relu, pool_argmax, scores })
}

/// Gradient buffers matching [`ModelParams`] layout.
struct ParamGrads {
    stages: Vec<(Vec<f64>, Vec<f64>)>,
    fc_weights: Vec<f64>,
    fc_bias: Vec<f64>,
}

impl ParamGrads {
    fn zeros(params: &ModelParams) -> Self {
        Self {
            stages: params
                .stages
                .iter()
                .map(|s| (vec![0.0; s.weights.len()], vec![0.0; s.bias.len()]))
                .collect(),
            fc_weights: vec![0.0; params.fc_weights.len()],
            fc_bias: vec![0.0; params.fc_bias.len()],
        }
    }

    fn reset(&mut self) {
        for (w, b) in &mut self.stages {
            w.fill(0.0);
            b.fill(0.0);
        }
        self.fc_weights.fill(0.0);
        self.fc_bias.fill(0.0);
    }
}

/// Backpropagates `d_scores`; returns the raw-input gradient when requested.
fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    d_scores: &[f64],
    mut grads: Option<&mut ParamGrads>,
    want_input_grad: bool,
) -> Vec<f64> {
    let arch = &params.arch;
    let fc_in = arch.fc_input_len();
    let features = cache.stage_inputs.last().unwrap();

    let mut d_features = vec![0.0; fc_in];
    for (k, &g) in d_scores.iter().enumerate() {
        if let Some(gr) = grads.as_mut() {
            gr.fc_bias[k] += g;
        }
        if g == 0.0 {
            continue;
        }
        let row = &params.fc_weights[k * fc_in..(k + 1) * fc_in];
        for j in 0..fc_in {
            d_features[j] += g * row[j];
        }
        if let Some(gr) = grads.as_mut() {
            let g_row = &mut gr.fc_weights[k * fc_in..(k + 1) * fc_in];
            for j in 0..fc_in {
                g_row[j] += g * features[j];
            }
        }
    }

    let shapes = arch.stage_shapes();
    let mut d_pooled = d_features;
    for s in (0..arch.conv_channels.len()).rev() {
        let (h, w, ic) = shapes[s];
        let oc = arch.conv_channels[s];
        // unpool: scatter into pre-relu shape through the recorded argmax
        let mut d_act = vec![0.0; h * w * oc];
        for (o, &src) in cache.pool_argmax[s].iter().enumerate() {
            d_act[src] += d_pooled[o];
        }
        // relu mask on the pre-activation
        let z = &cache.pre_relu[s];
        for (d, &zv) in d_act.iter_mut().zip(z) {
            if zv <= 0.0 {
                *d = 0.0;
            }
        }
        let need_input = want_input_grad || s > 0;
        let stage_grads = grads
            .as_mut()
            .map(|gr| {
                let (w_, b_) = &mut gr.stages[s];
                (w_.as_mut_slice(), b_.as_mut_slice())
            });
        d_pooled = conv_backward(
            &d_act,
            &cache.stage_inputs[s],
            h,
            w,
            ic,
            &params.stages[s],
            oc,
            stage_grads,
            need_input,
        );
    }
    if want_input_grad {
        // chain through input normalization to raw pixel scale
        d_pooled.iter_mut().for_each(|v| *v /= arch.input_scale);
    }
    d_pooled
}

// ---------------------------------------------------------------------------
// public inference API
// ---------------------------------------------------------------------------

/// Pre-softmax class scores for a raw input vector on the `[0, 255]` scale.
pub fn forward_f64(params: &ModelParams, raw: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_cached(params, raw)?.scores)
}

/// Pre-softmax class scores for an image.
pub fn forward(params: &ModelParams, img: &ImageTensor) -> Result<Vec<f64>> {
    params.check_image(img)?;
    forward_f64(params, &img.to_f64())
}

/// Index of the maximal score; ties break to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicted class label for an image.
pub fn predict(params: &ModelParams, img: &ImageTensor) -> Result<usize> {
    Ok(argmax(&forward(params, img)?))
}

/// Exact reverse-mode derivative of `scores[output_index]` with respect to
/// every raw input element.
pub fn input_gradient(
    params: &ModelParams,
    img: &ImageTensor,
    output_index: usize,
) -> Result<GradientMap> {
    params.check_image(img)?;
    let data = input_gradient_f64(params, &img.to_f64(), output_index)?;
    GradientMap::from_data(img.height(), img.width(), img.channels(), data)
}

/// Flat-vector variant of [`input_gradient`] for f64 inputs.
pub fn input_gradient_f64(
    params: &ModelParams,
    raw: &[f64],
    output_index: usize,
) -> Result<Vec<f64>> {
    if output_index >= params.arch.num_classes {
        return Err(Error::InvalidArgument(format!(
            "output index {output_index} out of range for {} classes",
            params.arch.num_classes
        )));
    }
    let cache = forward_cached(params, raw)?;
    let mut d_scores = vec![0.0; params.arch.num_classes];
    d_scores[output_index] = 1.0;
    Ok(backward(params, &cache, &d_scores, None, true))
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// Hyperparameters for SGD training.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// During training only, each input element is zeroed independently with
    /// this probability (no rescaling of survivors). 0 disables dropout.
    pub input_dropout_p: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.input_dropout_p) {
            return Err(Error::InvalidArgument("input dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    /// NaN when no evaluation split was supplied.
    pub test_acc: f64,
}

/// Minibatch SGD on softmax cross-entropy. See [`train_logged`].
pub fn train(
    params_init: ModelParams,
    train_split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    Ok(train_logged(params_init, train_split, None, cfg)?.0)
}

/// Minibatch SGD on softmax cross-entropy with a per-epoch log.
///
/// Deterministic for a fixed config: shuffling and dropout masks come from
/// the counter stream keyed by `cfg.seed`. A non-finite loss aborts with a
/// diagnostic instead of silently producing a broken model.
pub fn train_logged(
    params_init: ModelParams,
    train_split: &DatasetSplit,
    eval_split: Option<&DatasetSplit>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    cfg.validate()?;
    params_init.arch.validate()?;
    if train_split.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let num_classes = params_init.arch.num_classes;
    if train_split.labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::InvalidArgument("label out of range for the class count".into()));
    }
    for img in &train_split.images {
        params_init.check_image(img)?;
    }

    let inputs: Vec<Vec<f64>> = train_split.images.iter().map(|i| i.to_f64()).collect();
    let n = inputs.len();
    let mut params = params_init;
    let mut rng = CounterRng::new(cfg.seed);
    let mut grads = ParamGrads::zeros(&params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut dropped = vec![0.0f64; params.arch.input_len()];

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.reset();
            for &i in batch {
                let input: &[f64] = if cfg.input_dropout_p > 0.0 {
                    dropped.copy_from_slice(&inputs[i]);
                    for v in dropped.iter_mut() {
                        if rng.next_f64() < cfg.input_dropout_p {
                            *v = 0.0;
                        }
                    }
                    &dropped
                } else {
                    &inputs[i]
                };
                let cache = forward_cached(&params, input)?;
                let (loss, mut d_scores) = softmax_cross_entropy(&cache.scores, train_split.labels[i]);
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged(format!(
                        "non-finite loss at epoch {epoch}, sample {i}"
                    )));
                }
                epoch_loss += loss;
                let scale = 1.0 / batch.len() as f64;
                d_scores.iter_mut().for_each(|v| *v *= scale);
                backward(&params, &cache, &d_scores, Some(&mut grads), false);
            }
            apply_sgd_step(&mut params, &grads, cfg.learning_rate);
        }
        let train_acc = evaluate_accuracy(&params, train_split)?;
        let test_acc = match eval_split {
            Some(split) => evaluate_accuracy(&params, split)?,
            None => f64::NAN,
        };
        log.push(EpochLog { epoch, loss: epoch_loss / n as f64, train_acc, test_acc });
    }
    Ok((params, log))
}

fn softmax_cross_entropy(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut d: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    // underflow of the label probability (or NaN scores) yields a non-finite
    // loss here, which the training loop reports as divergence
    let loss = -d[label].ln();
    d[label] -= 1.0;
    (loss, d)
}

fn apply_sgd_step(params: &mut ModelParams, grads: &ParamGrads, lr: f64) {
    for (stage, (gw, gb)) in params.stages.iter_mut().zip(&grads.stages) {
        for (w, g) in stage.weights.iter_mut().zip(gw) {
            *w -= lr * g;
        }
        for (b, g) in stage.bias.iter_mut().zip(gb) {
            *b -= lr * g;
        }
    }
    for (w, g) in params.fc_weights.iter_mut().zip(&grads.fc_weights) {
        *w -= lr * g;
    }
    for (b, g) in params.fc_bias.iter_mut().zip(&grads.fc_bias) {
        *b -= lr * g;
    }
}

/// Fraction of correct predictions on a split.
pub fn evaluate_accuracy(params: &ModelParams, split: &DatasetSplit) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for (img, &label) in split.images.iter().zip(&split.labels) {
        if predict(params, img)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, DatasetSplit};
    use crate::rng::CounterRng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = CounterRng::new(seed);
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.next_range(20.0, 235.0)).unwrap()
    }

    fn small_params(seed: u64) -> ModelParams {
        let arch = Arch {
            input_h: 8,
            input_w: 8,
            input_ch: 3,
            conv_channels: vec![4, 6],
            num_classes: 3,
            input_offset: 128.0,
            input_scale: 64.0,
        };
        ModelParams::init_random(arch, seed).unwrap()
    }

    #[test]
    fn zero_weight_network_outputs_bias() {
        let mut params = small_params(1);
        for s in &mut params.stages {
            s.weights.fill(0.0);
            s.bias.fill(0.0);
        }
        params.fc_weights.fill(0.0);
        params.fc_bias = vec![0.5, -1.25, 3.0];
        let img = random_image(8, 8, 3, 2);
        let scores = forward(&params, &img).unwrap();
        assert_eq!(scores, vec![0.5, -1.25, 3.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let params = small_params(3);
        let img = random_image(8, 8, 3, 4);
        assert_eq!(forward(&params, &img).unwrap(), forward(&params, &img).unwrap());
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let params = small_params(5);
        let img = random_image(4, 8, 3, 6);
        assert!(forward(&params, &img).is_err());
    }

    #[test]
    fn tiny_conv_network_matches_hand_computation() {
        // 2x2 single-channel image, one stage with an all-ones kernel.
        // Every conv output equals the sum of all four pixels (zero padding
        // keeps only in-bounds taps), so pooling keeps that same value.
        let arch = Arch {
            input_h: 2,
            input_w: 2,
            input_ch: 1,
            conv_channels: vec![1],
            num_classes: 2,
            input_offset: 0.0,
            input_scale: 1.0,
        };
        let mut params = ModelParams::init_random(arch, 0).unwrap();
        params.stages[0].weights.fill(1.0);
        params.stages[0].bias[0] = 0.5;
        params.fc_weights = vec![2.0, -1.0];
        params.fc_bias = vec![0.25, 0.0];
        let img = ImageTensor::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let scores = forward(&params, &img).unwrap();
        // conv out everywhere: 1+2+3+4 + 0.5 = 10.5; pooled feature: 10.5
        assert!((scores[0] - (2.0 * 10.5 + 0.25)).abs() < 1e-12);
        assert!((scores[1] - (-10.5)).abs() < 1e-12);
    }

    #[test]
    fn predict_breaks_ties_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[-5.0]), 0);
    }

    #[test]
    fn predict_invariant_under_score_shift() {
        let params = small_params(7);
        let img = random_image(8, 8, 3, 8);
        let scores = forward(&params, &img).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.456).collect();
        assert_eq!(argmax(&scores), argmax(&shifted));
    }

    #[test]
    fn linear_model_gradient_is_weight_row() {
        let rows = vec![vec![1.0, -2.0, 3.0, 0.5], vec![0.0, 1.0, 0.0, -1.0]];
        let params = ModelParams::linear_from_rows(2, 2, 1, rows.clone(), vec![0.0, 0.0]).unwrap();
        let img = ImageTensor::new(2, 2, 1, vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        for k in 0..2 {
            let grad = input_gradient(&params, &img, k).unwrap();
            for (g, w) in grad.data.iter().zip(&rows[k]) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_network_has_zero_gradient() {
        let mut params = small_params(11);
        params.fc_weights.fill(0.0);
        let img = random_image(8, 8, 3, 12);
        let grad = input_gradient(&params, &img, 0).unwrap();
        assert!(grad.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let params = small_params(13);
        let img = random_image(8, 8, 3, 14);
        let raw = img.to_f64();
        let k = argmax(&forward_f64(&params, &raw).unwrap());
        let grad = input_gradient_f64(&params, &raw, k).unwrap();
        let h = 1e-3;
        let mut worst = 0.0f64;
        for i in (0..raw.len()).step_by(7) {
            let mut plus = raw.clone();
            let mut minus = raw.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (forward_f64(&params, &plus).unwrap()[k]
                - forward_f64(&params, &minus).unwrap()[k])
                / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max((grad[i] - fd).abs() / denom);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gradient_rejects_bad_output_index() {
        let params = small_params(15);
        let img = random_image(8, 8, 3, 16);
        assert!(input_gradient(&params, &img, 3).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.snsm");
        let params = small_params(17);
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(loaded.arch, params.arch);
        // weights survive the f32 narrowing applied on save
        for (a, b) in params.fc_weights.iter().zip(&loaded.fc_weights) {
            assert!((a - b).abs() <= (*a as f32).abs() as f64 * 1e-6 + 1e-9);
        }
        // and a second save is byte-identical
        let path2 = dir.path().join("model2.snsm");
        loaded.save(&path2).unwrap();
        params.save(&path).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1.len(), b2.len());
    }

    #[test]
    fn model_load_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.snsm");
        let params = small_params(19);
        params.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(ModelParams::load(&path).is_err());

        params.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(ModelParams::load(&path).is_err());
    }

    #[test]
    fn overfits_a_tiny_dataset() {
        let data = generate_synthetic_dataset(2, 5, 16, 99).unwrap();
        let arch = Arch::default_for(16, 2);
        let init = ModelParams::init_random(arch, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 40,
            batch_size: 4,
            input_dropout_p: 0.0,
            seed: 7,
        };
        let (params, log) = train_logged(init, &data.train, None, &cfg).unwrap();
        let acc = evaluate_accuracy(&params, &data.train).unwrap();
        assert!(acc == 1.0, "train accuracy {acc}");
        assert!(log.last().unwrap().loss < log.first().unwrap().loss);
    }

    #[test]
    fn zero_dropout_reproduces_baseline_bit_for_bit() {
        let data = generate_synthetic_dataset(2, 4, 16, 5).unwrap();
        let arch = Arch::default_for(16, 2);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 2,
            batch_size: 4,
            input_dropout_p: 0.0,
            seed: 3,
        };
        let a = train(ModelParams::init_random(arch.clone(), 1).unwrap(), &data.train, &cfg)
            .unwrap();
        let b = train(ModelParams::init_random(arch, 1).unwrap(), &data.train, &cfg).unwrap();
        assert_eq!(a.fc_weights, b.fc_weights);
        assert_eq!(a.stages[0].weights, b.stages[0].weights);
    }

    #[test]
    fn accuracy_edge_cases() {
        // constant predictor on balanced two-class data scores 1/2
        let arch = Arch::linear(2, 2, 1, 2);
        let mut params = ModelParams::init_random(arch, 0).unwrap();
        params.fc_weights.fill(0.0);
        params.fc_bias = vec![1.0, 0.0]; // always predicts class 0
        let images: Vec<ImageTensor> =
            (0..4).map(|i| ImageTensor::filled(2, 2, 1, 10.0 + i as f32).unwrap()).collect();
        let split = DatasetSplit {
            images,
            labels: vec![0, 1, 0, 1],
            masks: vec![vec![true; 4]; 4],
            tag: "test".into(),
        };
        let acc = evaluate_accuracy(&params, &split).unwrap();
        assert_eq!(acc, 0.5);

        let empty = DatasetSplit {
            images: vec![],
            labels: vec![],
            masks: vec![],
            tag: "test".into(),
        };
        assert!(evaluate_accuracy(&params, &empty).is_err());
    }

    #[test]
    fn hand_counted_confusion_tally() {
        // one-pixel threshold model: class 1 iff x > 128
        let params = ModelParams::linear_from_rows(
            1,
            1,
            1,
            vec![vec![0.0], vec![1.0]],
            vec![128.0, 0.0],
        )
        .unwrap();
        let values = [100.0, 200.0, 50.0, 129.0, 128.0, 10.0, 255.0, 130.0, 90.0, 128.5];
        let labels = [0, 1, 0, 1, 0, 0, 1, 0, 1, 1];
        // by hand: predictions are 0,1,0,1,0,0,1,1,0,1 -> 8 of 10 correct
        let images: Vec<ImageTensor> =
            values.iter().map(|&v| ImageTensor::filled(1, 1, 1, v).unwrap()).collect();
        let split = DatasetSplit {
            images,
            labels: labels.to_vec(),
            masks: vec![vec![true]; 10],
            tag: "test".into(),
        };
        assert_eq!(evaluate_accuracy(&params, &split).unwrap(), 0.8);
    }

    #[test]
    fn divergent_training_aborts() {
        let data = generate_synthetic_dataset(2, 4, 16, 6).unwrap();
        let arch = Arch::default_for(16, 2);
        let init = ModelParams::init_random(arch, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e12,
            epochs: 5,
            batch_size: 4,
            input_dropout_p: 0.0,
            seed: 3,
        };
        match train(init, &data.train, &cfg) {
            Err(Error::TrainingDiverged(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
