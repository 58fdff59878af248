//! Network representation with forward evaluation and reverse-mode gradients
//! with respect to both inputs and parameters.
//!
//! Layout is channels-first, row-major. Reductions (dot products, pooling,
//! softmax sums) accumulate in 64-bit; stored activations and parameters are
//! 32-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer of the network.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    GlobalAvgPool,
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    fn validate(&self, idx: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(format!("layer {idx} ({}): {msg}", self.kind())));
        match *self {
            LayerSpec::Dense { input, output } => {
                if input == 0 || output == 0 {
                    return bad(format!("widths must be positive, got in={input} out={output}"));
                }
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, .. } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 {
                    return bad("channels and kernel must be positive".into());
                }
                if stride == 0 {
                    return bad("stride must be >= 1".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Output shape for a given input shape, or an error naming the layer.
    pub fn output_shape(&self, input: &[usize], idx: usize) -> Result<Vec<usize>> {
        let mismatch = |detail: String| {
            Err(Error::ShapeMismatch { context: format!("layer {idx} ({})", self.kind()), detail })
        };
        match *self {
            LayerSpec::Dense { input: w_in, output } => {
                if input != [w_in] {
                    return mismatch(format!("expects a rank-1 input of width {w_in}, got {input:?}"));
                }
                Ok(vec![output])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let [c, h, w] = match input {
                    [c, h, w] => [*c, *h, *w],
                    _ => return mismatch(format!("expects a CxHxW input, got {input:?}")),
                };
                if c != in_channels {
                    return mismatch(format!("expects {in_channels} channels, got {c}"));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return mismatch(format!("kernel {kernel} exceeds padded input {h}x{w}+{padding}"));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![out_channels, oh, ow])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::GlobalAvgPool => match input {
                [c, _, _] => Ok(vec![*c]),
                _ => mismatch(format!("expects a CxHxW input, got {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Expected (weights, bias) shapes, if the layer is parameterized.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { input, output } => Some((vec![output, input], vec![output])),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels]))
            }
            _ => None,
        }
    }
}

/// Full architecture description, including the g/h feature split.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub input_shape: [usize; 3],
    pub class_count: usize,
    /// Index into `layers` marking the g/h boundary: the feature vector is
    /// the output of `layers[feature_index - 1]`.
    pub feature_index: usize,
}

impl NetworkSpec {
    /// Shapes at every layer boundary: element 0 is the input shape, element
    /// `i + 1` the output shape of layer `i`.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(i)?;
            let out = layer.output_shape(shapes.last().unwrap(), i)?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::InvalidSpec("class_count must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("network needs at least one layer".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!("input shape {:?} has a zero dimension", self.input_shape)));
        }
        let shapes = self.layer_shapes()?;
        let last = shapes.last().unwrap();
        if last != &[self.class_count] {
            return Err(Error::InvalidSpec(format!(
                "final layer must output a length-{} logit vector, got {last:?}",
                self.class_count
            )));
        }
        if self.feature_index == 0 || self.feature_index > self.layers.len() {
            return Err(Error::InvalidSpec(format!(
                "feature_index {} out of range 1..={}",
                self.feature_index,
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Width D of the (flattened) feature vector at the g/h boundary.
    pub fn feature_dim(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        Ok(shapes[self.feature_index].iter().product())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Empty,
    Affine { weights: Tensor, bias: Tensor },
}

/// A network architecture plus its parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    spec: NetworkSpec,
    params: Vec<LayerParams>,
}

impl ModelState {
    pub fn new(spec: NetworkSpec, params: Vec<LayerParams>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.layers.len() {
            return Err(Error::InvalidSpec(format!(
                "expected {} parameter entries, got {}",
                spec.layers.len(),
                params.len()
            )));
        }
        for (i, (layer, p)) in spec.layers.iter().zip(&params).enumerate() {
            match (layer.param_shapes(), p) {
                (None, LayerParams::Empty) => {}
                (Some((ws, bs)), LayerParams::Affine { weights, bias }) => {
                    if weights.shape() != ws.as_slice() {
                        return Err(Error::ShapeMismatch {
                            context: format!("layer {i} ({}) weights", layer.kind()),
                            detail: format!("expected {ws:?}, got {:?}", weights.shape()),
                        });
                    }
                    if bias.shape() != bs.as_slice() {
                        return Err(Error::ShapeMismatch {
                            context: format!("layer {i} ({}) bias", layer.kind()),
                            detail: format!("expected {bs:?}, got {:?}", bias.shape()),
                        });
                    }
                }
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "layer {i} ({}) parameter presence mismatch",
                        layer.kind()
                    )))
                }
            }
        }
        Ok(Self { spec, params })
    }

    /// He-uniform initialization, deterministic for a given seed.
    pub fn random_init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .layers
            .iter()
            .map(|layer| match layer.param_shapes() {
                None => LayerParams::Empty,
                Some((ws, bs)) => {
                    let fan_in: usize = ws[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    let n: usize = ws.iter().product();
                    let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    LayerParams::Affine {
                        weights: Tensor::new(ws, w).unwrap(),
                        bias: Tensor::zeros(bs),
                    }
                }
            })
            .collect();
        Self::new(spec, params)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    /// Parameter tensors in declaration order (weights then bias per layer).
    pub fn parameter_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for p in &self.params {
            if let LayerParams::Affine { weights, bias } = p {
                out.push(weights);
                out.push(bias);
            }
        }
        out
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    /// In-place SGD step: `w <- w - lr * g`, per parameterized layer.
    pub fn apply_sgd_step(&mut self, grads: &[LayerGrads], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::InvalidArgument("gradient/layer count mismatch".into()));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let (LayerParams::Affine { weights, bias }, Some((gw, gb))) = (p, g.as_ref()) {
                for (w, g) in weights.data_mut().iter_mut().zip(gw.data()) {
                    *w = (*w as f64 - lr * *g as f64) as f32;
                }
                for (b, g) in bias.data_mut().iter_mut().zip(gb.data()) {
                    *b = (*b as f64 - lr * *g as f64) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Per-layer parameter gradients: `Some((d_weights, d_bias))` for
/// parameterized layers, `None` otherwise.
pub type LayerGrads = Option<(Tensor, Tensor)>;

/// Activation tape from one forward evaluation. Call-local; the model is
/// never mutated.
pub struct ForwardPass {
    /// `activations[0]` is the input; `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Tensor>,
    pub probs: Tensor,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().unwrap()
    }
}

/// Argmax with lowest-index tie-breaking.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable log-softmax in 64-bit.
pub fn log_softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let log_sum = logits.iter().map(|&s| (s as f64 - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&s| s as f64 - max - log_sum).collect()
}

pub(crate) fn softmax(logits: &[f32]) -> Vec<f32> {
    log_softmax_f64(logits).iter().map(|&l| l.exp() as f32).collect()
}

pub(crate) fn layer_forward(layer: &LayerSpec, params: &LayerParams, input: &Tensor, idx: usize) -> Result<Tensor> {
    let out_shape = layer.output_shape(input.shape(), idx)?;
    match (layer, params) {
        (LayerSpec::Dense { input: w_in, output }, LayerParams::Affine { weights, bias }) => {
            let x = input.data();
            let w = weights.data();
            let mut out = vec![0.0f32; *output];
            for o in 0..*output {
                let row = &w[o * w_in..(o + 1) * w_in];
                let mut acc = bias.data()[o] as f64;
                for (wi, xi) in row.iter().zip(x) {
                    acc += *wi as f64 * *xi as f64;
                }
                out[o] = acc as f32;
            }
            Tensor::new(out_shape, out)
        }
        (
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding },
            LayerParams::Affine { weights, bias },
        ) => {
            let (c, h, w) = (*in_channels, input.shape()[1], input.shape()[2]);
            let (oc, oh, ow) = (*out_channels, out_shape[1], out_shape[2]);
            let (k, s, p) = (*kernel, *stride, *padding);
            let x = input.data();
            let wt = weights.data();
            let mut out = vec![0.0f32; oc * oh * ow];
            for o in 0..oc {
                let w_base = o * c * k * k;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[o] as f64;
                        for ci in 0..c {
                            for ky in 0..k {
                                let iy = oy * s + ky;
                                if iy < p || iy - p >= h {
                                    continue;
                                }
                                let iy = iy - p;
                                for kx in 0..k {
                                    let ix = ox * s + kx;
                                    if ix < p || ix - p >= w {
                                        continue;
                                    }
                                    let ix = ix - p;
                                    acc += wt[w_base + ci * k * k + ky * k + kx] as f64
                                        * x[ci * h * w + iy * w + ix] as f64;
                                }
                            }
                        }
                        out[o * oh * ow + oy * ow + ox] = acc as f32;
                    }
                }
            }
            Tensor::new(out_shape, out)
        }
        (LayerSpec::Relu, _) => {
            let out: Vec<f32> = input.data().iter().map(|&v| v.max(0.0)).collect();
            Tensor::new(out_shape, out)
        }
        (LayerSpec::GlobalAvgPool, _) => {
            let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let x = input.data();
            let area = (h * w) as f64;
            let out: Vec<f32> = (0..c)
                .map(|ci| {
                    let sum: f64 = x[ci * h * w..(ci + 1) * h * w].iter().map(|&v| v as f64).sum();
                    (sum / area) as f32
                })
                .collect();
            Tensor::new(out_shape, out)
        }
        (LayerSpec::Flatten, _) => input.reshaped(out_shape),
        _ => Err(Error::InvalidSpec(format!("layer {idx} parameter mismatch"))),
    }
}

/// Run the full layer stack, keeping every activation for backward passes.
pub fn forward_full(model: &ModelState, x: &Tensor) -> Result<ForwardPass> {
    let spec = model.spec();
    if x.shape() != spec.input_shape {
        return Err(Error::ShapeMismatch {
            context: "input".into(),
            detail: format!("expected {:?}, got {:?}", spec.input_shape, x.shape()),
        });
    }
    let mut activations = Vec::with_capacity(spec.layers.len() + 1);
    activations.push(x.clone());
    for (i, (layer, params)) in spec.layers.iter().zip(model.params()).enumerate() {
        let out = layer_forward(layer, params, activations.last().unwrap(), i)?;
        activations.push(out);
    }
    activations.last().unwrap().check_finite("forward logits")?;
    let probs = Tensor::from_vec(softmax(activations.last().unwrap().data()));
    probs.check_finite("forward probabilities")?;
    Ok(ForwardPass { activations, probs })
}

/// Evaluate the classifier: the feature vector at the g/h boundary (flattened)
/// and the softmax class probabilities.
pub fn forward(model: &ModelState, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let pass = forward_full(model, x)?;
    let features = pass.activations[model.spec().feature_index].flattened();
    Ok((features, pass.probs))
}

fn layer_backward(
    layer: &LayerSpec,
    params: &LayerParams,
    input: &Tensor,
    dy: &[f64],
    param_grads: Option<&mut (Vec<f64>, Vec<f64>)>,
) -> Vec<f64> {
    match (layer, params) {
        (LayerSpec::Dense { input: w_in, output }, LayerParams::Affine { weights, .. }) => {
            let x = input.data();
            let w = weights.data();
            let mut dx = vec![0.0f64; *w_in];
            if let Some((dw, db)) = param_grads {
                for o in 0..*output {
                    let g = dy[o];
                    db[o] += g;
                    let row = &mut dw[o * w_in..(o + 1) * w_in];
                    for (i, slot) in row.iter_mut().enumerate() {
                        *slot += g * x[i] as f64;
                    }
                }
            }
            for o in 0..*output {
                let g = dy[o];
                let row = &w[o * w_in..(o + 1) * w_in];
                for (i, wi) in row.iter().enumerate() {
                    dx[i] += g * *wi as f64;
                }
            }
            dx
        }
        (
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding },
            LayerParams::Affine { weights, .. },
        ) => {
            let (c, h, w) = (*in_channels, input.shape()[1], input.shape()[2]);
            let out_shape = layer.output_shape(input.shape(), 0).unwrap();
            let (oc, oh, ow) = (*out_channels, out_shape[1], out_shape[2]);
            let (k, s, p) = (*kernel, *stride, *padding);
            let x = input.data();
            let wt = weights.data();
            let mut dx = vec![0.0f64; c * h * w];
            let mut dw_local;
            let mut db_local;
            let (dw, db): (&mut [f64], &mut [f64]) = match param_grads {
                Some((dw, db)) => (dw, db),
                None => {
                    dw_local = Vec::new();
                    db_local = Vec::new();
                    (&mut dw_local, &mut db_local)
                }
            };
            let track_params = !dw.is_empty();
            for o in 0..oc {
                let w_base = o * c * k * k;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy[o * oh * ow + oy * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        if track_params {
                            db[o] += g;
                        }
                        for ci in 0..c {
                            for ky in 0..k {
                                let iy = oy * s + ky;
                                if iy < p || iy - p >= h {
                                    continue;
                                }
                                let iy = iy - p;
                                for kx in 0..k {
                                    let ix = ox * s + kx;
                                    if ix < p || ix - p >= w {
                                        continue;
                                    }
                                    let ix = ix - p;
                                    let wi = w_base + ci * k * k + ky * k + kx;
                                    let xi = ci * h * w + iy * w + ix;
                                    dx[xi] += g * wt[wi] as f64;
                                    if track_params {
                                        dw[wi] += g * x[xi] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dx
        }
        (LayerSpec::Relu, _) => input
            .data()
            .iter()
            .zip(dy)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
        (LayerSpec::GlobalAvgPool, _) => {
            let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let area = (h * w) as f64;
            let mut dx = vec![0.0f64; c * h * w];
            for ci in 0..c {
                let g = dy[ci] / area;
                for slot in &mut dx[ci * h * w..(ci + 1) * h * w] {
                    *slot = g;
                }
            }
            dx
        }
        (LayerSpec::Flatten, _) => dy.to_vec(),
        _ => unreachable!("parameter presence validated at construction"),
    }
}

/// Reverse pass from a logit-space cotangent. Returns the input gradient and,
/// when requested, per-layer parameter gradients, all in 64-bit.
pub(crate) fn backward_from_logits(
    model: &ModelState,
    pass: &ForwardPass,
    dlogits: &[f64],
    want_param_grads: bool,
) -> (Vec<f64>, Vec<Option<(Vec<f64>, Vec<f64>)>>) {
    let spec = model.spec();
    let mut param_grads: Vec<Option<(Vec<f64>, Vec<f64>)>> = spec
        .layers
        .iter()
        .map(|l| {
            if want_param_grads {
                l.param_shapes()
                    .map(|(ws, bs)| (vec![0.0; ws.iter().product()], vec![0.0; bs.iter().product()]))
            } else {
                None
            }
        })
        .collect();
    let mut grad = dlogits.to_vec();
    for i in (0..spec.layers.len()).rev() {
        grad = layer_backward(
            &spec.layers[i],
            &model.params()[i],
            &pass.activations[i],
            &grad,
            param_grads[i].as_mut(),
        );
    }
    (grad, param_grads)
}

fn validate_target(y_target: &Tensor, class_count: usize) -> Result<()> {
    if y_target.len() != class_count {
        return Err(Error::InvalidArgument(format!(
            "target length {} != class count {class_count}",
            y_target.len()
        )));
    }
    if y_target.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("target has negative components".into()));
    }
    let sum: f64 = y_target.data().iter().map(|&v| v as f64).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("target sums to {sum}, expected 1")));
    }
    Ok(())
}

/// Cross-entropy gradient of a logit-space softmax head: `probs - y_target`.
fn logit_cotangent(probs: &[f32], y_target: &[f32]) -> Vec<f64> {
    probs
        .iter()
        .zip(y_target)
        .map(|(&p, &y)| p as f64 - y as f64)
        .collect()
}

/// Gradient of the cross-entropy loss with respect to the input.
pub fn input_gradient(model: &ModelState, x: &Tensor, y_target: &Tensor) -> Result<Tensor> {
    validate_target(y_target, model.class_count())?;
    let pass = forward_full(model, x)?;
    let dlogits = logit_cotangent(pass.probs.data(), y_target.data());
    let (grad, _) = backward_from_logits(model, &pass, &dlogits, false);
    let out = Tensor::new(x.shape().to_vec(), grad.iter().map(|&g| g as f32).collect())?;
    out.check_finite("input gradient")?;
    Ok(out)
}

/// Mean-over-batch gradients, plus the mean cross-entropy loss of the batch.
pub struct BatchGradients {
    pub grads: Vec<LayerGrads>,
    pub mean_loss: f64,
    pub correct: usize,
}

/// Mean cross-entropy gradient over a labeled batch for every parameter tensor.
pub fn parameter_gradients(model: &ModelState, batch: &[(Tensor, usize)]) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let class_count = model.class_count();
    for (_, label) in batch {
        if *label >= class_count {
            return Err(Error::InvalidArgument(format!("label {label} out of range 0..{class_count}")));
        }
    }
    // Per-example backward passes run in parallel; the reduction below is
    // sequential in batch order so results are schedule-independent.
    let per_example: Vec<Result<(Vec<Option<(Vec<f64>, Vec<f64>)>>, f64, bool)>> = batch
        .par_iter()
        .map(|(x, label)| {
            let pass = forward_full(model, x)?;
            let mut dlogits: Vec<f64> = pass.probs.data().iter().map(|&p| p as f64).collect();
            dlogits[*label] -= 1.0;
            let loss = -log_softmax_f64(pass.logits().data())[*label];
            let correct = argmax(pass.probs.data()) == *label;
            let (_, grads) = backward_from_logits(model, &pass, &dlogits, true);
            Ok((grads, loss, correct))
        })
        .collect();

    let n = batch.len() as f64;
    let mut acc: Option<Vec<Option<(Vec<f64>, Vec<f64>)>>> = None;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for item in per_example {
        let (grads, loss, ok) = item?;
        loss_sum += loss;
        correct += ok as usize;
        match &mut acc {
            None => acc = Some(grads),
            Some(total) => {
                for (t, g) in total.iter_mut().zip(grads) {
                    if let (Some((tw, tb)), Some((gw, gb))) = (t.as_mut(), g) {
                        for (a, b) in tw.iter_mut().zip(gw) {
                            *a += b;
                        }
                        for (a, b) in tb.iter_mut().zip(gb) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
    let acc = acc.unwrap();
    let grads: Vec<LayerGrads> = model
        .spec()
        .layers
        .iter()
        .zip(acc)
        .map(|(layer, g)| {
            g.map(|(gw, gb)| {
                let (ws, bs) = layer.param_shapes().unwrap();
                (
                    Tensor::new(ws, gw.iter().map(|&v| (v / n) as f32).collect()).unwrap(),
                    Tensor::new(bs, gb.iter().map(|&v| (v / n) as f32).collect()).unwrap(),
                )
            })
        })
        .collect();
    let mean_loss = loss_sum / n;
    if !mean_loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok(BatchGradients { grads, mean_loss, correct })
}

// ---------------------------------------------------------------------------
// 64-bit shadow evaluation for finite-difference checking. Deliberately a
// separate code path from the f32 engine above.
// ---------------------------------------------------------------------------

type ShadowParams = Vec<Option<(Vec<f64>, Vec<f64>)>>;

fn shadow_params(model: &ModelState) -> ShadowParams {
    model
        .params()
        .iter()
        .map(|p| match p {
            LayerParams::Empty => None,
            LayerParams::Affine { weights, bias } => Some((
                weights.data().iter().map(|&v| v as f64).collect(),
                bias.data().iter().map(|&v| v as f64).collect(),
            )),
        })
        .collect()
}

fn shadow_loss(spec: &NetworkSpec, params: &ShadowParams, x: &[f64], y_target: &[f64]) -> f64 {
    let shapes = spec.layer_shapes().expect("validated spec");
    let mut cur: Vec<f64> = x.to_vec();
    for (i, layer) in spec.layers.iter().enumerate() {
        let in_shape = &shapes[i];
        cur = match (layer, &params[i]) {
            (LayerSpec::Dense { input, output }, Some((w, b))) => (0..*output)
                .map(|o| {
                    b[o] + (0..*input).map(|j| w[o * input + j] * cur[j]).sum::<f64>()
                })
                .collect(),
            (LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding }, Some((w, b))) => {
                let (c, h, wd) = (*in_channels, in_shape[1], in_shape[2]);
                let (k, s, p) = (*kernel, *stride, *padding);
                let oh = (h + 2 * p - k) / s + 1;
                let ow = (wd + 2 * p - k) / s + 1;
                let mut out = vec![0.0f64; out_channels * oh * ow];
                for o in 0..*out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b[o];
                            for ci in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = oy * s + ky;
                                        let ix = ox * s + kx;
                                        if iy >= p && iy - p < h && ix >= p && ix - p < wd {
                                            acc += w[o * c * k * k + ci * k * k + ky * k + kx]
                                                * cur[ci * h * wd + (iy - p) * wd + (ix - p)];
                                        }
                                    }
                                }
                            }
                            out[o * oh * ow + oy * ow + ox] = acc;
                        }
                    }
                }
                out
            }
            (LayerSpec::Relu, _) => cur.iter().map(|&v| v.max(0.0)).collect(),
            (LayerSpec::GlobalAvgPool, _) => {
                let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
                (0..c)
                    .map(|ci| cur[ci * h * wd..(ci + 1) * h * wd].iter().sum::<f64>() / (h * wd) as f64)
                    .collect()
            }
            (LayerSpec::Flatten, _) => cur,
            _ => unreachable!(),
        };
    }
    let max = cur.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = cur.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    -(0..cur.len()).map(|k| y_target[k] * (cur[k] - max - log_sum)).sum::<f64>()
}

fn vector_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale_a = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale_n = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    // Central differences carry O(step^2) truncation noise; when both sides
    // sit below that floor (e.g. a dead-ReLU stationary point where the true
    // gradient is exactly zero) a ratio would compare pure noise.
    if scale_a < 1e-5 && scale_n < 1e-5 {
        return 0.0;
    }
    diff / scale_n.max(1e-12)
}

/// Compare analytic gradients against central finite differences of a 64-bit
/// shadow evaluation: exhaustively over input elements, sampled over
/// parameters (up to 50 coordinates). Returns the worst relative error.
pub fn finite_difference_check(model: &ModelState, x: &Tensor, step: f64) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let spec = model.spec();
    let k = spec.class_count;
    let y = Tensor::from_vec(vec![1.0 / k as f32; k]);
    let y64: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();

    let pass = forward_full(model, x)?;
    let dlogits = logit_cotangent(pass.probs.data(), y.data());
    let (analytic_input, analytic_params) = backward_from_logits(model, &pass, &dlogits, true);

    let params = shadow_params(model);
    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();

    let numeric_input: Vec<f64> = (0..x64.len())
        .map(|i| {
            let mut plus = x64.clone();
            let mut minus = x64.clone();
            plus[i] += step;
            minus[i] -= step;
            (shadow_loss(spec, &params, &plus, &y64) - shadow_loss(spec, &params, &minus, &y64))
                / (2.0 * step)
        })
        .collect();
    let mut worst = vector_relative_error(&analytic_input, &numeric_input);

    // Sample parameter coordinates: (layer, weights-or-bias, element).
    let mut coords = Vec::new();
    for (li, p) in params.iter().enumerate() {
        if let Some((w, b)) = p {
            for i in 0..w.len() {
                coords.push((li, 0usize, i));
            }
            for i in 0..b.len() {
                coords.push((li, 1usize, i));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let sample: Vec<_> = if coords.len() <= 50 {
        coords
    } else {
        (0..50).map(|_| coords[rng.gen_range(0..coords.len())]).collect()
    };
    let mut analytic_s = Vec::with_capacity(sample.len());
    let mut numeric_s = Vec::with_capacity(sample.len());
    for &(li, which, i) in &sample {
        let (gw, gb) = analytic_params[li].as_ref().unwrap();
        analytic_s.push(if which == 0 { gw[i] } else { gb[i] });
        let mut plus = params.clone();
        let mut minus = params.clone();
        {
            let slot = plus[li].as_mut().unwrap();
            *(if which == 0 { &mut slot.0[i] } else { &mut slot.1[i] }) += step;
        }
        {
            let slot = minus[li].as_mut().unwrap();
            *(if which == 0 { &mut slot.0[i] } else { &mut slot.1[i] }) -= step;
        }
        numeric_s.push(
            (shadow_loss(spec, &plus, &x64, &y64) - shadow_loss(spec, &minus, &x64, &y64))
                / (2.0 * step),
        );
    }
    worst = worst.max(vector_relative_error(&analytic_s, &numeric_s));
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_model(weights: Vec<f32>, bias: Vec<f32>, input: usize, output: usize) -> ModelState {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::Dense { input, output }],
            input_shape: [input, 1, 1],
            class_count: output,
            feature_index: 1,
        };
        // Input shape is CxHxW; a dense layer wants rank-1, so flatten first.
        let spec = NetworkSpec {
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { input, output }],
            feature_index: 2,
            ..spec
        };
        ModelState::new(
            spec,
            vec![
                LayerParams::Empty,
                LayerParams::Affine {
                    weights: Tensor::new(vec![output, input], weights).unwrap(),
                    bias: Tensor::new(vec![output], bias).unwrap(),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn symmetric_logits_give_uniform_probs() {
        let model = dense_model(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let x = Tensor::new(vec![2, 1, 1], vec![0.0, 0.0]).unwrap();
        let (_, probs) = forward(&model, &x).unwrap();
        assert!((probs.data()[0] - 0.5).abs() < 1e-6);
        assert!((probs.data()[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::from_vec(vec![-1.0, 2.0, 0.0]);
        let out = layer_forward(&LayerSpec::Relu, &LayerParams::Empty, &t, 0).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_takes_mean() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let out = layer_forward(&LayerSpec::GlobalAvgPool, &LayerParams::Empty, &t, 0).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let probs = softmax(&[3.0, -1.0, 0.5, 100.0]);
        let sum: f64 = probs.iter().map(|&p| p as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn logit_cotangent_is_probs_minus_target() {
        // Softmax + cross-entropy head gradient at the logits equals p - y.
        let model = dense_model(vec![1.0, 0.0, 0.0, 1.0], vec![0.5, -0.25], 2, 2);
        let x = Tensor::new(vec![2, 1, 1], vec![0.3, 0.7]).unwrap();
        let pass = forward_full(&model, &x).unwrap();
        let y = [1.0f32, 0.0];
        let cot = logit_cotangent(pass.probs.data(), &y);
        assert!((cot[0] - (pass.probs.data()[0] as f64 - 1.0)).abs() < 1e-12);
        assert!((cot[1] - pass.probs.data()[1] as f64).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_input_gradient() {
        let model = dense_model(vec![0.0; 4], vec![0.0; 2], 2, 2);
        let x = Tensor::new(vec![2, 1, 1], vec![0.4, -1.2]).unwrap();
        let y = Tensor::from_vec(vec![1.0, 0.0]);
        let grad = input_gradient(&model, &x, &y).unwrap();
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn input_gradient_rejects_bad_target() {
        let model = dense_model(vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2], 2, 2);
        let x = Tensor::new(vec![2, 1, 1], vec![0.0, 0.0]).unwrap();
        assert!(input_gradient(&model, &x, &Tensor::from_vec(vec![0.5, 0.6])).is_err());
        assert!(input_gradient(&model, &x, &Tensor::from_vec(vec![-0.5, 1.5])).is_err());
    }

    #[test]
    fn forward_rejects_shape_mismatch_naming_layer() {
        let model = dense_model(vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2], 2, 2);
        let x = Tensor::new(vec![3, 1, 1], vec![0.0; 3]).unwrap();
        let err = forward(&model, &x).unwrap_err();
        assert!(err.to_string().contains("input"));
    }

    #[test]
    fn duplicated_example_keeps_mean_gradient() {
        let model = dense_model(vec![0.2, -0.4, 0.6, 0.1], vec![0.05, -0.02], 2, 2);
        let x = Tensor::new(vec![2, 1, 1], vec![0.3, 0.9]).unwrap();
        let single = parameter_gradients(&model, &[(x.clone(), 1)]).unwrap();
        let double = parameter_gradients(&model, &[(x.clone(), 1), (x, 1)]).unwrap();
        for (a, b) in single.grads.iter().zip(&double.grads) {
            match (a, b) {
                (Some((aw, ab)), Some((bw, bb))) => {
                    assert_eq!(aw.data(), bw.data());
                    assert_eq!(ab.data(), bb.data());
                }
                (None, None) => {}
                _ => panic!("gradient structure mismatch"),
            }
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let model = dense_model(vec![0.0; 4], vec![0.0; 2], 2, 2);
        assert!(matches!(parameter_gradients(&model, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn finite_difference_rejects_zero_step() {
        let model = dense_model(vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2], 2, 2);
        let x = Tensor::new(vec![2, 1, 1], vec![0.1, 0.2]).unwrap();
        assert!(finite_difference_check(&model, &x, 0.0).is_err());
    }

    #[test]
    fn finite_difference_tight_on_affine_model() {
        let model = dense_model(vec![0.7, -0.3, 0.2, 0.9], vec![0.1, -0.2], 2, 2);
        let x = Tensor::new(vec![2, 1, 1], vec![0.4, -0.6]).unwrap();
        let err = finite_difference_check(&model, &x, 1e-3).unwrap();
        assert!(err < 1e-6, "affine finite-difference error {err}");
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
    }
}
