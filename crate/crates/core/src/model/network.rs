//! Forward and backward passes over an [`Architecture`].

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::model::arch::{Architecture, LayerKind, LayerSpec};
use crate::model::layers::{self, BnCache, ConvGeom, BN_MOMENTUM};
use crate::model::params::ParameterSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batchnorm uses batch statistics and produces running-stat updates.
    Train,
    /// Batchnorm uses stored running statistics.
    Eval,
}

/// Options for a pass. `frozen` names tensors that receive no gradient;
/// batchnorm layers whose scale is frozen always normalize with their
/// running statistics.
#[derive(Clone, Copy, Debug)]
pub struct PassOptions<'a> {
    pub mode: Mode,
    pub frozen: Option<&'a HashSet<String>>,
    pub keep_activations: bool,
}

impl<'a> PassOptions<'a> {
    pub fn new(mode: Mode) -> Self {
        PassOptions {
            mode,
            frozen: None,
            keep_activations: false,
        }
    }

    pub fn frozen(mut self, frozen: &'a HashSet<String>) -> Self {
        self.frozen = Some(frozen);
        self
    }

    pub fn keep_activations(mut self) -> Self {
        self.keep_activations = true;
        self
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.is_some_and(|f| f.contains(name))
    }
}

enum Cache<T> {
    Dense { input: Tensor<T> },
    Conv { input: Tensor<T>, geom: ConvGeom },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    AvgPool { in_shape: Vec<usize> },
    Relu { active: Vec<bool> },
    BatchNorm(BnCache<T>),
    Residual { main: Vec<Cache<T>>, shortcut: Vec<Cache<T>> },
    Flatten { in_shape: Vec<usize> },
}

struct RunningUpdate<T> {
    prefix: String,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Result of [`forward`]; feed it to [`backward`] for gradients.
pub struct Forward<'a, T> {
    pub logits: Tensor<T>,
    /// Mean softmax cross-entropy, present when labels were supplied.
    pub loss: Option<T>,
    /// Top-level layer outputs (body then head) when requested.
    pub activations: Vec<(String, Tensor<T>)>,
    dlogits: Option<Tensor<T>>,
    tape: Vec<Cache<T>>,
    updates: Vec<RunningUpdate<T>>,
    opts: PassOptions<'a>,
}

impl<T: Scalar> Forward<'_, T> {
    /// Folds this pass's batch statistics into the running statistics.
    pub fn commit_running_stats(&self, params: &mut ParameterSet<T>) -> Result<()> {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::ONE - m;
        for u in &self.updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let t = params.tensor_mut(&format!("{}.{suffix}", u.prefix))?;
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
        Ok(())
    }

    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }
}

/// Replaces every batchnorm layer's running statistics with the average of
/// its batch statistics over `batches` (weighted by batch size). Used to
/// re-estimate statistics after pruning has shifted activation scales.
pub fn recalibrate_batchnorm<T: Scalar>(
    arch: &Architecture,
    params: &mut ParameterSet<T>,
    batches: impl IntoIterator<Item = Tensor<T>>,
) -> Result<()> {
    let mut sums: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut seen = 0usize;
    for x in batches {
        let n = x.shape()[0];
        let fwd = forward(arch, params, &x, None, PassOptions::new(Mode::Train))?;
        if sums.is_empty() {
            sums = fwd
                .updates
                .iter()
                .map(|u| (u.prefix.clone(), vec![0.0; u.mean.len()], vec![0.0; u.var.len()]))
                .collect();
        }
        for (u, (_, m, v)) in fwd.updates.iter().zip(sums.iter_mut()) {
            for (acc, b) in m.iter_mut().zip(&u.mean) {
                *acc += b.to_f64() * n as f64;
            }
            for (acc, b) in v.iter_mut().zip(&u.var) {
                *acc += b.to_f64() * n as f64;
            }
        }
        seen += n;
    }
    if seen == 0 {
        return Err(Error::contract("batchnorm recalibration needs at least one sample"));
    }
    for (prefix, m, v) in sums {
        for (suffix, acc) in [("running_mean", m), ("running_var", v)] {
            let t = params.tensor_mut(&format!("{prefix}.{suffix}"))?;
            for (r, a) in t.data_mut().iter_mut().zip(acc) {
                *r = T::from_f64(a / seen as f64);
            }
        }
    }
    Ok(())
}

pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

struct Ctx<'p, T: Scalar> {
    params: &'p ParameterSet<T>,
    opts: PassOptions<'p>,
    updates: Vec<RunningUpdate<T>>,
}

/// Runs the network on `batch` (shape `[N, C, H, W]`).
pub fn forward<'a, T: Scalar>(
    arch: &Architecture,
    params: &ParameterSet<T>,
    batch: &Tensor<T>,
    labels: Option<&[usize]>,
    opts: PassOptions<'a>,
) -> Result<Forward<'a, T>> {
    let [c, h, w] = arch.input_shape;
    if batch.shape().len() != 4 || batch.shape()[1..] != [c, h, w] {
        return Err(Error::Shape {
            expected: vec![batch.shape().first().copied().unwrap_or(0), c, h, w],
            actual: batch.shape().to_vec(),
        });
    }
    if let Some(labels) = labels {
        if labels.len() != batch.shape()[0] {
            return Err(Error::contract("one label per batch row"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= arch.num_classes) {
            return Err(Error::contract(format!("label {bad} out of range")));
        }
    }
    let mut ctx = Ctx {
        params,
        opts,
        updates: Vec::new(),
    };
    let mut tape = Vec::new();
    let mut activations = Vec::new();
    let mut x = batch.clone();
    for (section, layers) in [("body", &arch.body), ("head", &arch.head)] {
        for (i, layer) in layers.iter().enumerate() {
            let name = format!("{section}.{i}");
            let (y, cache) = forward_layer(&mut ctx, layer, &name, x)?;
            if !y.all_finite() {
                return Err(Error::NonFinite { layer: name });
            }
            if opts.keep_activations {
                activations.push((name, y.clone()));
            }
            tape.push(cache);
            x = y;
        }
    }
    let (loss, dlogits) = match labels {
        Some(labels) => {
            let (loss, d) = layers::softmax_cross_entropy(&x, labels);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    layer: "softmax-xent".into(),
                });
            }
            (Some(loss), Some(d))
        }
        None => (None, None),
    };
    Ok(Forward {
        logits: x,
        loss,
        activations,
        dlogits,
        tape,
        updates: ctx.updates,
        opts,
    })
}

fn forward_list<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    layers: &[LayerSpec],
    prefix: &str,
    mut x: Tensor<T>,
    tape: &mut Vec<Cache<T>>,
) -> Result<Tensor<T>> {
    for (i, layer) in layers.iter().enumerate() {
        let (y, cache) = forward_layer(ctx, layer, &format!("{prefix}.{i}"), x)?;
        tape.push(cache);
        x = y;
    }
    Ok(x)
}

fn forward_layer<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    layer: &LayerSpec,
    name: &str,
    x: Tensor<T>,
) -> Result<(Tensor<T>, Cache<T>)> {
    let p = ctx.params;
    Ok(match &layer.kind {
        LayerKind::Dense { .. } => {
            let w = p.tensor(&format!("{name}.weight"))?;
            let b = p.tensor(&format!("{name}.bias"))?;
            let y = layers::dense_forward(&x, w, b);
            (y, Cache::Dense { input: x })
        }
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            pad,
            bias,
            ..
        } => {
            let w = p.tensor(&format!("{name}.weight"))?;
            let b = if *bias {
                Some(p.tensor(&format!("{name}.bias"))?)
            } else {
                None
            };
            let geom = ConvGeom::new(x.shape(), *out_channels, *kernel, *stride, *pad);
            let y = layers::conv_forward(&x, w, b, &geom);
            (y, Cache::Conv { input: x, geom })
        }
        LayerKind::MaxPool { size } => {
            let (y, argmax) = layers::maxpool_forward(&x, *size);
            (
                y,
                Cache::MaxPool {
                    argmax,
                    in_shape: x.shape().to_vec(),
                },
            )
        }
        LayerKind::AvgPool => (
            layers::avgpool_forward(&x),
            Cache::AvgPool {
                in_shape: x.shape().to_vec(),
            },
        ),
        LayerKind::Relu => {
            let (y, active) = layers::relu_forward(x);
            (y, Cache::Relu { active })
        }
        LayerKind::BatchNorm { .. } => {
            let gamma_name = format!("{name}.gamma");
            let gamma = p.tensor(&gamma_name)?.data();
            let beta = p.tensor(&format!("{name}.beta"))?.data();
            let use_batch = ctx.opts.mode == Mode::Train && !ctx.opts.is_frozen(&gamma_name);
            if use_batch {
                let (y, cache, stats) = layers::batchnorm_train(&x, gamma, beta);
                ctx.updates.push(RunningUpdate {
                    prefix: name.to_string(),
                    mean: stats.mean,
                    var: stats.var_unbiased,
                });
                (y, Cache::BatchNorm(cache))
            } else {
                let rm = p.tensor(&format!("{name}.running_mean"))?.data();
                let rv = p.tensor(&format!("{name}.running_var"))?.data();
                let (y, cache) = layers::batchnorm_eval(&x, gamma, beta, rm, rv);
                (y, Cache::BatchNorm(cache))
            }
        }
        LayerKind::Residual { main, shortcut } => {
            let mut main_tape = Vec::new();
            let mut short_tape = Vec::new();
            let a = forward_list(ctx, main, &format!("{name}.main"), x.clone(), &mut main_tape)?;
            let b = forward_list(ctx, shortcut, &format!("{name}.skip"), x, &mut short_tape)?;
            let mut y = a;
            for (u, &v) in y.data_mut().iter_mut().zip(b.data()) {
                *u += v;
            }
            (
                y,
                Cache::Residual {
                    main: main_tape,
                    shortcut: short_tape,
                },
            )
        }
        LayerKind::Flatten => {
            let in_shape = x.shape().to_vec();
            let n = in_shape[0];
            let f = x.len() / n;
            (x.reshape(&[n, f])?, Cache::Flatten { in_shape })
        }
    })
}

/// Gradients of the mean loss for every tensor in `params`.
///
/// Non-trainable and frozen tensors get exact zeros. Backpropagation stops
/// at the first layer below which nothing needs a gradient.
pub fn backward<T: Scalar>(
    arch: &Architecture,
    params: &ParameterSet<T>,
    fwd: &Forward<'_, T>,
) -> Result<ParameterSet<T>> {
    let dlogits = fwd
        .dlogits
        .clone()
        .ok_or_else(|| Error::contract("backward needs a forward pass with labels"))?;
    let mut grads = params.zeros_like();
    let g = Grad {
        params,
        opts: fwd.opts,
    };
    let nb = arch.body.len();
    let (body_tape, head_tape) = fwd.tape.split_at(nb);
    let body_needs = g.list_needs(&arch.body, "body");
    let dy = g.backward_list(&arch.head, "head", head_tape, dlogits, body_needs, &mut grads)?;
    if let Some(dy) = dy {
        g.backward_list(&arch.body, "body", body_tape, dy, false, &mut grads)?;
    }
    Ok(grads)
}

struct Grad<'a, T: Scalar> {
    params: &'a ParameterSet<T>,
    opts: PassOptions<'a>,
}

impl<T: Scalar> Grad<'_, T> {
    fn wants(&self, name: &str) -> bool {
        self.params
            .get(name)
            .is_some_and(|p| p.is_trainable() && !self.opts.is_frozen(name))
    }

    fn layer_needs(&self, layer: &LayerSpec, name: &str) -> bool {
        match &layer.kind {
            LayerKind::Dense { .. } => self.wants(&format!("{name}.weight")) || self.wants(&format!("{name}.bias")),
            LayerKind::Conv2d { .. } => self.wants(&format!("{name}.weight")) || self.wants(&format!("{name}.bias")),
            LayerKind::BatchNorm { .. } => self.wants(&format!("{name}.gamma")) || self.wants(&format!("{name}.beta")),
            LayerKind::Residual { main, shortcut } => {
                self.list_needs(main, &format!("{name}.main")) || self.list_needs(shortcut, &format!("{name}.skip"))
            }
            _ => false,
        }
    }

    fn list_needs(&self, layers: &[LayerSpec], prefix: &str) -> bool {
        layers
            .iter()
            .enumerate()
            .any(|(i, l)| self.layer_needs(l, &format!("{prefix}.{i}")))
    }

    /// Returns the gradient w.r.t. the list input if `upstream` (something
    /// before this list trains) demands it.
    fn backward_list(
        &self,
        layers: &[LayerSpec],
        prefix: &str,
        tape: &[Cache<T>],
        mut dy: Tensor<T>,
        upstream: bool,
        grads: &mut ParameterSet<T>,
    ) -> Result<Option<Tensor<T>>> {
        let names: Vec<String> = (0..layers.len()).map(|i| format!("{prefix}.{i}")).collect();
        let own: Vec<bool> = layers.iter().zip(&names).map(|(l, n)| self.layer_needs(l, n)).collect();
        // before[i]: some layer strictly before i (or upstream) trains
        let mut before = Vec::with_capacity(layers.len());
        let mut acc = upstream;
        for &o in &own {
            before.push(acc);
            acc |= o;
        }
        for i in (0..layers.len()).rev() {
            if !own[i] && !before[i] {
                return Ok(None);
            }
            match self.backward_layer(&layers[i], &names[i], &tape[i], dy, before[i], grads)? {
                Some(dx) => dy = dx,
                None => return Ok(None),
            }
        }
        Ok(upstream.then_some(dy))
    }

    fn backward_layer(
        &self,
        layer: &LayerSpec,
        name: &str,
        cache: &Cache<T>,
        dy: Tensor<T>,
        want_input: bool,
        grads: &mut ParameterSet<T>,
    ) -> Result<Option<Tensor<T>>> {
        let p = self.params;
        Ok(match (&layer.kind, cache) {
            (LayerKind::Dense { .. }, Cache::Dense { input }) => {
                let wn = format!("{name}.weight");
                let bn = format!("{name}.bias");
                let want_params = self.wants(&wn) || self.wants(&bn);
                let g = layers::dense_backward(input, p.tensor(&wn)?, &dy, want_params, want_input);
                if self.wants(&wn) {
                    store(grads, &wn, g.weight.expect("weight grad"))?;
                }
                if self.wants(&bn) {
                    store(grads, &bn, g.bias.expect("bias grad"))?;
                }
                g.input
            }
            (LayerKind::Conv2d { .. }, Cache::Conv { input, geom }) => {
                let wn = format!("{name}.weight");
                let bn = format!("{name}.bias");
                let (ww, wb) = (self.wants(&wn), self.wants(&bn));
                let g = layers::conv_backward(input, p.tensor(&wn)?, &dy, geom, ww, wb, want_input);
                if let Some(dw) = g.weight {
                    store(grads, &wn, dw)?;
                }
                if let Some(db) = g.bias {
                    store(grads, &bn, db)?;
                }
                g.input
            }
            (LayerKind::MaxPool { .. }, Cache::MaxPool { argmax, in_shape }) => {
                want_input.then(|| layers::maxpool_backward(&dy, argmax, in_shape))
            }
            (LayerKind::AvgPool, Cache::AvgPool { in_shape }) => {
                want_input.then(|| layers::avgpool_backward(&dy, in_shape))
            }
            (LayerKind::Relu, Cache::Relu { active }) => want_input.then(|| layers::relu_backward(dy, active)),
            (LayerKind::BatchNorm { .. }, Cache::BatchNorm(bn)) => {
                let gn = format!("{name}.gamma");
                let betan = format!("{name}.beta");
                let gamma = p.tensor(&gn)?.data();
                let g = layers::batchnorm_backward(&dy, bn, gamma, want_input);
                if self.wants(&gn) {
                    store(grads, &gn, g.gamma)?;
                }
                if self.wants(&betan) {
                    store(grads, &betan, g.beta)?;
                }
                g.input
            }
            (LayerKind::Residual { main, shortcut }, Cache::Residual { main: mt, shortcut: st }) => {
                let a = self.backward_list(main, &format!("{name}.main"), mt, dy.clone(), want_input, grads)?;
                let b = if shortcut.is_empty() {
                    want_input.then_some(dy)
                } else {
                    self.backward_list(shortcut, &format!("{name}.skip"), st, dy, want_input, grads)?
                };
                match (a, b) {
                    (Some(mut a), Some(b)) => {
                        for (u, &v) in a.data_mut().iter_mut().zip(b.data()) {
                            *u += v;
                        }
                        Some(a)
                    }
                    _ => None,
                }
            }
            (LayerKind::Flatten, Cache::Flatten { in_shape }) => {
                if want_input {
                    Some(dy.reshape(in_shape)?)
                } else {
                    None
                }
            }
            _ => return Err(Error::contract(format!("tape does not match layer `{name}`"))),
        })
    }
}

fn store<T: Scalar>(grads: &mut ParameterSet<T>, name: &str, values: Vec<T>) -> Result<()> {
    let t = grads.tensor_mut(name)?;
    if t.len() != values.len() {
        return Err(Error::contract(format!("gradient size mismatch for `{name}`")));
    }
    t.data_mut().copy_from_slice(&values);
    Ok(())
}
