//! Layered classifiers: a single chain of conv / dense / relu / flatten
//! layers ending in `K` logits.
//!
//! Activations are addressed by layer name; the pseudo-layer [`INPUT_LAYER`]
//! names the (flattened) input itself. For a layer `l`, `f_l` maps an input
//! to the flattened output of `l` and `h_l` maps that vector to the logits
//! by running the remaining layers, so `logits(x) == h_l(f_l(x))`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Name of the pseudo-layer holding the raw input.
pub const INPUT_LAYER: &str = "input";

/// Samples per forward chunk when evaluating many inputs.
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv {
        kernel_h: usize,
        kernel_w: usize,
        filters: usize,
        stride: usize,
        padding: Padding,
    },
    Dense {
        units: usize,
    },
    Relu,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn conv(
        name: &str,
        kernel: usize,
        filters: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv {
                kernel_h: kernel,
                kernel_w: kernel,
                filters,
                stride,
                padding,
            },
        }
    }

    pub fn dense(name: &str, units: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Dense { units },
        }
    }

    pub fn relu(name: &str) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Relu,
        }
    }

    pub fn flatten(name: &str) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Flatten,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }
}

/// Weight and bias of a conv (HWIO kernel) or dense (`[in, out]`) layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            weight_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if let Some(wd) = self.weight_decay {
            if !(wd >= 0.0) {
                return Err(Error::InvalidConfig(
                    "weight_decay must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Result of [`LayeredModel::train`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: LayeredModel,
    /// Mean minibatch loss per epoch.
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayeredModel {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<Params>>,
    /// Per-sample output shape of every layer.
    shapes: Vec<Vec<usize>>,
    num_classes: usize,
}

/// Rounds to the nearest `f32`; stored weights are kept `f32`-representable
/// so checkpoints reproduce predictions bit for bit.
fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

fn infer_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: input_shape.to_vec(),
            reason: "model input shape must have positive extents".into(),
        });
    }
    let mut seen: Vec<&str> = vec![INPUT_LAYER];
    let mut current = input_shape.to_vec();
    let mut shapes = Vec::with_capacity(layers.len());
    for layer in layers {
        if seen.contains(&layer.name.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "duplicate layer name `{}`",
                layer.name
            )));
        }
        seen.push(&layer.name);
        current = match &layer.kind {
            LayerKind::Conv {
                kernel_h,
                kernel_w,
                filters,
                stride,
                padding,
            } => {
                if current.len() != 3 || *filters == 0 || *kernel_h == 0 || *kernel_w == 0 {
                    return Err(Error::InvalidShape {
                        shape: current,
                        reason: format!("conv layer `{}` needs an [h, w, c] input", layer.name),
                    });
                }
                let x = [1, current[0], current[1], current[2]];
                let w = [*kernel_h, *kernel_w, current[2], *filters];
                let g = ops::ConvGeometry::resolve(&x, &w, *stride, *padding)?;
                vec![g.out_h, g.out_w, g.out_c]
            }
            LayerKind::Dense { units } => {
                if current.len() != 1 || *units == 0 {
                    return Err(Error::InvalidShape {
                        shape: current,
                        reason: format!("dense layer `{}` needs a flat input", layer.name),
                    });
                }
                vec![*units]
            }
            LayerKind::Relu => current,
            LayerKind::Flatten => vec![current.iter().product()],
        };
        shapes.push(current.clone());
    }
    match shapes.last() {
        Some(last) if last.len() == 1 => Ok(shapes),
        _ => Err(Error::InvalidConfig(
            "the last layer must output a flat logit vector".into(),
        )),
    }
}

fn param_shapes(layer: &LayerSpec, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
    match &layer.kind {
        LayerKind::Conv {
            kernel_h,
            kernel_w,
            filters,
            ..
        } => Some((
            vec![*kernel_h, *kernel_w, input[2], *filters],
            vec![*filters],
        )),
        LayerKind::Dense { units } => Some((vec![input[0], *units], vec![*units])),
        _ => None,
    }
}

impl LayeredModel {
    /// Builds a model with freshly initialized weights: uniform in
    /// `±sqrt(6 / fan_in)`, zero biases.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        let mut r = rng::seeded(seed);
        let mut params = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let input = if i == 0 { &input_shape } else { &shapes[i - 1] };
            params.push(param_shapes(layer, input).map(|(ws, bs)| {
                let fan_in: usize = ws[..ws.len() - 1].iter().product();
                let bound = crate::math::sqrt(6.0 / fan_in as f64);
                let n: usize = ws.iter().product();
                let data = (0..n)
                    .map(|_| to_f32_grid(r.gen_range(-bound..bound)))
                    .collect();
                Params {
                    weight: Tensor::from_parts(ws, data),
                    bias: Tensor::zeros(&bs),
                }
            }));
        }
        let num_classes = shapes.last().map(|s| s[0]).unwrap_or(0);
        Ok(LayeredModel {
            input_shape,
            layers,
            params,
            shapes,
            num_classes,
        })
    }

    /// Reassembles a model from stored weights, checking every shape.
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Option<Params>>,
    ) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        if params.len() != layers.len() {
            return Err(Error::DimensionMismatch {
                expected: layers.len(),
                got: params.len(),
            });
        }
        for (i, (layer, p)) in layers.iter().zip(&params).enumerate() {
            let input = if i == 0 { &input_shape } else { &shapes[i - 1] };
            match (param_shapes(layer, input), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) if p.weight.shape() == ws && p.bias.shape() == bs => {}
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "parameters of layer `{}` do not match its spec",
                        layer.name
                    )))
                }
            }
        }
        let num_classes = shapes.last().map(|s| s[0]).unwrap_or(0);
        Ok(LayeredModel {
            input_shape,
            layers,
            params,
            shapes,
            num_classes,
        })
    }

    /// conv(3x3, 8) -> relu -> conv(3x3, 16) -> relu -> flatten -> dense(64)
    /// -> relu -> dense(K), with stride-2 same-padded convolutions.
    pub fn reference_toy(input_shape: Vec<usize>, num_classes: usize, seed: u64) -> Result<Self> {
        let layers = vec![
            LayerSpec::conv("conv1", 3, 8, 2, Padding::Same),
            LayerSpec::relu("relu1"),
            LayerSpec::conv("conv2", 3, 16, 2, Padding::Same),
            LayerSpec::relu("relu2"),
            LayerSpec::flatten("flatten"),
            LayerSpec::dense("fc1", 64),
            LayerSpec::relu("relu3"),
            LayerSpec::dense("logits", num_classes),
        ];
        Self::new(input_shape, layers, seed)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<Params>] {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Layers whose activations are worth probing: everything except
    /// flatten layers (a copy of their input) and the final logits.
    pub fn probe_layers(&self) -> Vec<&str> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .filter(|l| !matches!(l.kind, LayerKind::Flatten))
            .map(|l| l.name.as_str())
            .collect()
    }

    /// Position in the activation chain: 0 is the input, `i + 1` the output
    /// of layer `i`.
    fn position(&self, layer: &str) -> Result<usize> {
        if layer == INPUT_LAYER {
            return Ok(0);
        }
        self.layers
            .iter()
            .position(|l| l.name == layer)
            .map(|i| i + 1)
            .ok_or_else(|| {
                let mut valid = String::from(INPUT_LAYER);
                for l in &self.layers {
                    valid.push_str(", ");
                    valid.push_str(&l.name);
                }
                Error::UnknownLayer {
                    name: layer.to_string(),
                    valid,
                }
            })
    }

    fn shape_at(&self, position: usize) -> &[usize] {
        if position == 0 {
            &self.input_shape
        } else {
            &self.shapes[position - 1]
        }
    }

    /// Flattened width `m_l` of a layer's activations.
    pub fn width(&self, layer: &str) -> Result<usize> {
        Ok(self.shape_at(self.position(layer)?).iter().product())
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::ClassOutOfRange {
                class,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: self.input_shape.clone(),
                rhs: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn batched_shape(&self, position: usize, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend_from_slice(self.shape_at(position));
        s
    }

    /// Applies layer `i` to a batch.
    fn apply(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let layer = &self.layers[i];
        match (&layer.kind, &self.params[i]) {
            (
                LayerKind::Conv {
                    stride, padding, ..
                },
                Some(p),
            ) => ops::add(&ops::conv2d(x, &p.weight, *stride, *padding)?, &p.bias),
            (LayerKind::Dense { .. }, Some(p)) => ops::add(&ops::matmul(x, &p.weight)?, &p.bias),
            (LayerKind::Relu, _) => Ok(ops::relu(x)),
            (LayerKind::Flatten, _) => ops::flatten(x),
            _ => unreachable!("parametric layer without parameters"),
        }
    }

    fn apply_on_tape(
        &self,
        tape: &mut Tape,
        i: usize,
        x: Var,
        params: Option<(Var, Var)>,
    ) -> Result<Var> {
        match (&self.layers[i].kind, params) {
            (
                LayerKind::Conv {
                    stride, padding, ..
                },
                Some((w, b)),
            ) => {
                let y = tape.conv2d(x, w, *stride, *padding)?;
                tape.add(y, b)
            }
            (LayerKind::Dense { .. }, Some((w, b))) => {
                let y = tape.matmul(x, w)?;
                tape.add(y, b)
            }
            (LayerKind::Relu, _) => tape.relu(x),
            (LayerKind::Flatten, _) => tape.flatten(x),
            _ => unreachable!("parametric layer without parameters"),
        }
    }

    /// Runs positions `from..to` on a batch shaped for position `from`.
    fn run(&self, from: usize, to: usize, batch: Tensor) -> Result<Tensor> {
        let mut x = batch;
        for i in from..to {
            x = self.apply(i, &x)?;
        }
        Ok(x)
    }

    /// Runs `from..to` on the tape with the weights recorded as constants.
    fn run_on_tape(&self, tape: &mut Tape, from: usize, to: usize, x: Var) -> Result<Var> {
        let mut x = x;
        for i in from..to {
            let params = self.params[i].as_ref().map(|p| {
                (
                    tape.constant(p.weight.clone()),
                    tape.constant(p.bias.clone()),
                )
            });
            x = self.apply_on_tape(tape, i, x, params)?;
        }
        Ok(x)
    }

    /// Logits `[K]` for one input.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let batch = x.reshape(&self.batched_shape(0, 1))?;
        let logits = self.run(0, self.layers.len(), batch)?;
        logits.into_reshaped(&[self.num_classes])
    }

    /// Logits `[n, K]` for many inputs.
    pub fn predict_batch(&self, xs: &[&Tensor]) -> Result<Tensor> {
        self.activations_batch_at(self.layers.len(), xs)
    }

    pub fn classify(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(self.predict(x)?.data()))
    }

    pub fn classify_batch(&self, xs: &[&Tensor]) -> Result<Vec<usize>> {
        let logits = self.predict_batch(xs)?;
        Ok((0..xs.len()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Fraction of `xs` classified as their label.
    pub fn accuracy(&self, xs: &[&Tensor], labels: &[usize]) -> Result<f64> {
        if xs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let predicted = self.classify_batch(xs)?;
        let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / xs.len() as f64)
    }

    /// `f_l(x)` flattened to length `m_l`.
    pub fn activation_at(&self, layer: &str, x: &Tensor) -> Result<Tensor> {
        let pos = self.position(layer)?;
        let acts = self.activations_batch_at(pos, &[x])?;
        acts.into_reshaped(&[self.width(layer)?])
    }

    /// `f_l` for many inputs, as rows of an `[n, m_l]` tensor.
    pub fn activations(&self, layer: &str, xs: &[&Tensor]) -> Result<Tensor> {
        self.activations_batch_at(self.position(layer)?, xs)
    }

    fn activations_batch_at(&self, pos: usize, xs: &[&Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let width: usize = self.shape_at(pos).iter().product();
        let mut out = Vec::with_capacity(xs.len() * width);
        for chunk in xs.chunks(CHUNK) {
            for x in chunk {
                self.check_input(x)?;
            }
            let batch = Tensor::stack(chunk)?;
            out.extend(self.run(0, pos, batch)?.into_data());
        }
        Tensor::new(vec![xs.len(), width], out)
    }

    fn check_activation_rows(&self, pos: usize, acts: &Tensor) -> Result<usize> {
        let width: usize = self.shape_at(pos).iter().product();
        match acts.shape() {
            [_, m] if *m == width => Ok(width),
            [m] if *m == width => Ok(width),
            s => Err(Error::DimensionMismatch {
                expected: width,
                got: s.last().copied().unwrap_or(0),
            }),
        }
    }

    /// `h_l`: logits `[n, K]` from layer-`l` activation rows `[n, m_l]`
    /// (a single `[m_l]` vector is also accepted).
    pub fn logits_from(&self, layer: &str, acts: &Tensor) -> Result<Tensor> {
        let pos = self.position(layer)?;
        let width = self.check_activation_rows(pos, acts)?;
        let n = acts.len() / width;
        let batch = acts.reshape(&self.batched_shape(pos, n))?;
        self.run(pos, self.layers.len(), batch)
    }

    /// `∇h_{l,k}(a)` for one activation vector `a` of width `m_l`.
    pub fn logit_grad_at(&self, layer: &str, class: usize, activation: &Tensor) -> Result<Tensor> {
        let width = self.width(layer)?;
        let grads = self.logit_grads(layer, class, activation)?;
        grads.into_reshaped(&[width])
    }

    /// `∇h_{l,k}` for every row of `[n, m_l]` activations.
    pub fn logit_grads(&self, layer: &str, class: usize, acts: &Tensor) -> Result<Tensor> {
        self.check_class(class)?;
        let pos = self.position(layer)?;
        let width = self.check_activation_rows(pos, acts)?;
        let n = acts.len() / width;
        let mut selector = vec![0.0; self.num_classes];
        selector[class] = 1.0;
        let selector = Tensor::vector(selector);
        let mut out = Vec::with_capacity(acts.len());
        for chunk in acts.data().chunks(CHUNK * width) {
            let rows = chunk.len() / width;
            let batch = Tensor::new(self.batched_shape(pos, rows), chunk.to_vec())?;
            let (_, g) = self.gradient_between(pos, self.layers.len(), batch, |tape, logits| {
                let sel = tape.constant(selector.clone());
                let picked = tape.mul(logits, sel)?;
                tape.reduce_sum(picked)
            })?;
            out.extend(g.into_data());
        }
        Tensor::new(vec![n, width], out)
    }

    /// Differentiates a scalar objective of the position-`to` activations
    /// with respect to the position-`from` batch. Returns the objective value
    /// and the gradient, shaped like `batch`.
    pub(crate) fn gradient_between(
        &self,
        from: usize,
        to: usize,
        batch: Tensor,
        objective: impl FnOnce(&mut Tape, Var) -> Result<Var>,
    ) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.var(batch);
        let y = self.run_on_tape(&mut tape, from, to, x)?;
        let obj = objective(&mut tape, y)?;
        let value = tape.value(obj)?.item().unwrap_or(f64::NAN);
        let mut g = tape.gradient(obj, &[x])?;
        Ok((value, g.remove(0)))
    }

    /// Gradient of a scalar objective of layer-`layer` activations with
    /// respect to one input `x`. The objective receives the activations with
    /// their batched layer shape `[1, ...]`.
    pub fn input_gradient(
        &self,
        layer: &str,
        x: &Tensor,
        objective: impl FnOnce(&mut Tape, Var) -> Result<Var>,
    ) -> Result<(f64, Tensor)> {
        self.check_input(x)?;
        let pos = self.position(layer)?;
        let batch = x.reshape(&self.batched_shape(0, 1))?;
        let (value, g) = self.gradient_between(0, pos, batch, objective)?;
        Ok((value, g.into_reshaped(&self.input_shape)?))
    }

    /// `∂h_k(x)/∂x`, shaped like the input.
    pub fn logit_input_gradient(&self, class: usize, x: &Tensor) -> Result<Tensor> {
        self.check_class(class)?;
        let mut selector = vec![0.0; self.num_classes];
        selector[class] = 1.0;
        let last = self.layers[self.layers.len() - 1].name.clone();
        let (_, g) = self.input_gradient(&last, x, |tape, logits| {
            let sel = tape.constant(Tensor::vector(selector));
            let picked = tape.mul(logits, sel)?;
            tape.reduce_sum(picked)
        })?;
        Ok(g)
    }

    /// Gradient of the cross-entropy loss for label `class` w.r.t. `x`.
    pub fn loss_input_gradient(&self, class: usize, x: &Tensor) -> Result<(f64, Tensor)> {
        self.check_class(class)?;
        let last = self.layers[self.layers.len() - 1].name.clone();
        self.input_gradient(&last, x, |tape, logits| {
            tape.softmax_cross_entropy(logits, &[class])
        })
    }

    /// Minibatch SGD with momentum on the mean cross-entropy loss.
    ///
    /// Batch order is drawn from `cfg.seed`; two runs with equal inputs and
    /// seeds produce identical weights. Trained weights are rounded to the
    /// `f32` grid.
    pub fn train(&self, xs: &[&Tensor], labels: &[usize], cfg: &TrainConfig) -> Result<Trained> {
        cfg.validate()?;
        if xs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if xs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.len(),
                got: labels.len(),
            });
        }
        for x in xs {
            self.check_input(x)?;
        }
        for &l in labels {
            self.check_class(l)?;
        }

        let mut model = self.clone();
        let mut velocity: Vec<Option<(Vec<f64>, Vec<f64>)>> = model
            .params
            .iter()
            .map(|p| {
                p.as_ref()
                    .map(|p| (vec![0.0; p.weight.len()], vec![0.0; p.bias.len()]))
            })
            .collect();
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut r = rng::seeded(cfg.seed);
        let mut loss_curve = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut r);
            let mut total = 0.0;
            let mut batches = 0usize;
            for idx in order.chunks(cfg.batch_size) {
                let batch_x: Vec<&Tensor> = idx.iter().map(|&i| xs[i]).collect();
                let batch_y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let loss = model.sgd_step(&batch_x, &batch_y, cfg, &mut velocity)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                total += loss;
                batches += 1;
            }
            loss_curve.push(total / batches as f64);
        }

        for p in model.params.iter_mut().flatten() {
            p.weight = p.weight.map(to_f32_grid);
            p.bias = p.bias.map(to_f32_grid);
        }
        Ok(Trained { model, loss_curve })
    }

    fn sgd_step(
        &mut self,
        xs: &[&Tensor],
        labels: &[usize],
        cfg: &TrainConfig,
        velocity: &mut [Option<(Vec<f64>, Vec<f64>)>],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::stack(xs)?);
        let mut param_vars = Vec::new();
        let mut h = x;
        for i in 0..self.layers.len() {
            let pv = self.params[i]
                .as_ref()
                .map(|p| (tape.var(p.weight.clone()), tape.var(p.bias.clone())));
            if let Some(pair) = pv {
                param_vars.push((i, pair));
            }
            h = self.apply_on_tape(&mut tape, i, h, pv)?;
        }
        let loss = tape.softmax_cross_entropy(h, labels)?;
        let loss_value = tape.value(loss)?.item().unwrap_or(f64::NAN);
        let wrt: Vec<Var> = param_vars.iter().flat_map(|(_, (w, b))| [*w, *b]).collect();
        let grads = tape.gradient(loss, &wrt)?;

        let decay = cfg.weight_decay.unwrap_or(0.0);
        for ((i, _), g) in param_vars.iter().zip(grads.chunks(2)) {
            let p = self.params[*i].as_mut().expect("parametric layer");
            let (vw, vb) = velocity[*i]
                .as_mut()
                .expect("velocity for parametric layer");
            momentum_update(&mut p.weight, vw, g[0].data(), cfg, decay);
            momentum_update(&mut p.bias, vb, g[1].data(), cfg, 0.0);
        }
        Ok(loss_value)
    }

    /// Order-sensitive hash of every weight bit pattern.
    pub fn weights_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().flatten() {
            for v in p.weight.data().iter().chain(p.bias.data()) {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn momentum_update(
    param: &mut Tensor,
    velocity: &mut [f64],
    grad: &[f64],
    cfg: &TrainConfig,
    decay: f64,
) {
    let values = param.data().to_vec();
    let updated: Vec<f64> = values
        .iter()
        .zip(velocity.iter_mut())
        .zip(grad)
        .map(|((&w, v), &g)| {
            *v = cfg.momentum * *v - cfg.learning_rate * (g + decay * w);
            w + *v
        })
        .collect();
    *param = Tensor::from_parts(param.shape().to_vec(), updated);
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
