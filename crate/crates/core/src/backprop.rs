//! Gradients of the softmax cross-entropy loss of a classification network
//! with respect to every weight and bias, plus a finite-difference checker.
//!
//! Training always pools at offset `(0, 0)`; the gradient of a pooling tile
//! goes to its first maximal tap in row-major order.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{DcfError, Result};
use crate::layers::{fc_forward, softmax, Layer, LcnParams, Network};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_direct, KernelBank, Padding, Tensor};

/// Gradient of one parametrised layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad<T> {
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

/// Gradients aligned with [`Network::layers`]; `None` for layers without
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<ParamGrad<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Conv { bank, .. } => Some(ParamGrad {
                    weights: vec![T::zero(); bank.weights().len()],
                    biases: vec![T::zero(); bank.count()],
                }),
                Layer::Fc(fc) => Some(ParamGrad {
                    weights: vec![T::zero(); fc.weights().len()],
                    biases: vec![T::zero(); fc.out_count()],
                }),
                _ => None,
            })
            .collect();
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flatten().map(|g| g.weights.len() + g.biases.len()).sum()
    }

    pub fn max_abs(&self) -> T {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| g.weights.iter().chain(&g.biases))
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    fn at_mut(&mut self, layer: usize) -> &mut ParamGrad<T> {
        self.layers[layer].as_mut().expect("parametrised layer")
    }
}

/// Mutable weights and biases of every parametrised layer, in layer order,
/// with the layer index.
pub fn params_mut<T: Scalar>(net: &mut Network<T>) -> Vec<(usize, &mut [T], &mut [T])> {
    net.layers_mut()
        .iter_mut()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::Conv { bank, .. } => {
                let (w, b) = bank.params_mut();
                Some((i, w, b))
            }
            Layer::Fc(fc) => {
                let (w, b) = fc.params_mut();
                Some((i, w, b))
            }
            _ => None,
        })
        .collect()
}

enum Cache<T> {
    Conv { input: Tensor<T>, output: Tensor<T> },
    Pool { in_shape: (usize, usize, usize), argmax: Vec<usize> },
    Lcn { input: Tensor<T>, denom: Vec<T> },
    Fc { input: Tensor<T> },
    Softmax,
}

/// Activations kept by a training forward pass.
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
    pub probs: Vec<T>,
}

fn pool_with_argmax<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w, c) = x.shape();
    let (oh, ow) = (h / s, w / s);
    if oh == 0 || ow == 0 {
        return Err(DcfError::TooSmall { height: h, width: w, required: s });
    }
    let data = x.as_slice();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for m in 0..oh {
        for n in 0..ow {
            for ch in 0..c {
                let mut best = x.index(m * s, n * s, ch);
                for a in 0..s {
                    for b in 0..s {
                        let idx = x.index(m * s + a, n * s + b, ch);
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_raw(oh, ow, c, out), argmax))
}

fn lcn_with_denominators<T: Scalar>(x: &Tensor<T>, p: &LcnParams<T>) -> (Tensor<T>, Vec<T>) {
    let (h, w, n) = x.shape();
    let mut out = Vec::with_capacity(x.len());
    let mut denom = Vec::with_capacity(x.len());
    for r in 0..h {
        for c in 0..w {
            let px = x.pixel(r, c);
            for j in 0..n {
                let (lo, hi) = p.window(j, n);
                let sum: T = px[lo..=hi].iter().map(|&v| v * v).sum();
                let d = p.kappa + p.alpha * sum;
                denom.push(d);
                out.push(px[j] / d.powf(p.beta));
            }
        }
    }
    (Tensor::from_fn(h, w, n, |r, c, j| out[(r * w + c) * n + j]), denom)
}

/// Forward pass over one window, keeping what the backward pass needs.
pub fn forward_trace<T: Scalar>(net: &Network<T>, input: &Tensor<T>) -> Result<Trace<T>> {
    let mut x = input.clone();
    let mut caches = Vec::with_capacity(net.layers().len());
    let mut logits = None;
    for layer in net.layers() {
        match layer {
            Layer::Conv { bank, padding } => {
                let y = conv2d_direct(&x, bank, *padding)?.map(|v| v.max(T::zero()));
                caches.push(Cache::Conv { input: std::mem::replace(&mut x, y.clone()), output: y });
            }
            Layer::Pool { size } => {
                let (y, argmax) = pool_with_argmax(&x, *size)?;
                caches.push(Cache::Pool { in_shape: x.shape(), argmax });
                x = y;
            }
            Layer::Lcn(p) => {
                let (y, denom) = lcn_with_denominators(&x, p);
                caches.push(Cache::Lcn { input: std::mem::replace(&mut x, y), denom });
            }
            Layer::Fc(fc) => {
                logits = Some(fc_forward(&x, fc)?);
                caches.push(Cache::Fc { input: x.clone() });
            }
            Layer::Softmax => caches.push(Cache::Softmax),
        }
    }
    let probs = softmax(&logits.expect("network has a classifier"));
    Ok(Trace { caches, probs })
}

impl<T: Scalar> Trace<T> {
    /// Hash of every ReLU on/off state and pooling argmax; equal hashes mean
    /// the loss is smooth between the two parameter settings.
    pub fn activation_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for cache in &self.caches {
            match cache {
                Cache::Conv { output, .. } => {
                    for v in output.as_slice() {
                        (*v > T::zero()).hash(&mut hasher);
                    }
                }
                Cache::Pool { argmax, .. } => argmax.hash(&mut hasher),
                _ => {}
            }
        }
        hasher.finish()
    }
}

/// Cross-entropy of one prediction.
pub fn cross_entropy<T: Scalar>(probs: &[T], label: usize) -> T {
    -probs[label].max(T::of(1e-300)).ln()
}

fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    bank: &KernelBank<T>,
    padding: Padding,
    grad_out: &Tensor<T>,
    grad: &mut ParamGrad<T>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let (h, w, cin) = input.shape();
    let (oh, ow, _) = grad_out.shape();
    let k = bank.size();
    let pad = padding.amount(k);
    let weights = bank.weights();
    let mut dx = need_input_grad.then(|| vec![T::zero(); input.len()]);
    for y in 0..oh {
        for x in 0..ow {
            let g = grad_out.pixel(y, x);
            if g.iter().all(|v| v.is_zero()) {
                continue;
            }
            for (b, &go) in grad.biases.iter_mut().zip(g) {
                *b += go;
            }
            for i in 0..k {
                let Some(sy) = (y + i).checked_sub(pad).filter(|&r| r < h) else { continue };
                for j in 0..k {
                    let Some(sx) = (x + j).checked_sub(pad).filter(|&c| c < w) else { continue };
                    let px = input.pixel(sy, sx);
                    for (o, &go) in g.iter().enumerate() {
                        if go.is_zero() {
                            continue;
                        }
                        let base = ((o * k + i) * k + j) * cin;
                        for (dw, &v) in grad.weights[base..base + cin].iter_mut().zip(px) {
                            *dw += go * v;
                        }
                        if let Some(dx) = dx.as_mut() {
                            let at = (sy * w + sx) * cin;
                            for (d, &wv) in dx[at..at + cin].iter_mut().zip(&weights[base..base + cin]) {
                                *d += go * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx.map(|d| Tensor::from_fn(h, w, cin, |r, c, ch| d[(r * w + c) * cin + ch]))
}

fn lcn_backward<T: Scalar>(input: &Tensor<T>, denom: &[T], p: &LcnParams<T>, g: &Tensor<T>) -> Tensor<T> {
    let (h, w, n) = input.shape();
    let two = T::of(2.0);
    let mut out = Vec::with_capacity(input.len());
    for r in 0..h {
        for c in 0..w {
            let x = input.pixel(r, c);
            let gp = g.pixel(r, c);
            let d = &denom[(r * w + c) * n..][..n];
            // g_j x_j D_j^(-beta-1), shared by every m in j's window
            let t: Vec<T> = (0..n).map(|j| gp[j] * x[j] * d[j].powf(-p.beta - T::one())).collect();
            for m in 0..n {
                let (lo, hi) = p.window(m, n);
                let cross: T = t[lo..=hi].iter().copied().sum();
                out.push(gp[m] * d[m].powf(-p.beta) - two * p.alpha * p.beta * x[m] * cross);
            }
        }
    }
    Tensor::from_fn(h, w, n, |r, c, j| out[(r * w + c) * n + j])
}

/// Adds the gradient of the cross-entropy of `label` to `grads` and returns
/// the loss.
pub fn accumulate_gradients<T: Scalar>(
    net: &Network<T>,
    input: &Tensor<T>,
    label: usize,
    grads: &mut Gradients<T>,
) -> Result<T> {
    let trace = forward_trace(net, input)?;
    if label >= trace.probs.len() {
        return Err(DcfError::InvalidArgument(format!("label {label} out of range for {} classes", trace.probs.len())));
    }
    let loss = cross_entropy(&trace.probs, label);
    let first_param = net.layers().iter().position(|l| matches!(l, Layer::Conv { .. } | Layer::Fc(_)));

    let mut g_logits: Vec<T> = trace.probs.clone();
    g_logits[label] -= T::one();
    let mut g: Option<Tensor<T>> = None;
    for (idx, (layer, cache)) in net.layers().iter().zip(&trace.caches).enumerate().rev() {
        let need_input = first_param.is_some_and(|f| idx > f);
        match (layer, cache) {
            (Layer::Softmax, Cache::Softmax) => {}
            (Layer::Fc(fc), Cache::Fc { input }) => {
                let x = input.as_slice();
                let fan = fc.fan_in();
                let pg = grads.at_mut(idx);
                let mut dx = vec![T::zero(); fan];
                for (o, &go) in g_logits.iter().enumerate() {
                    pg.biases[o] += go;
                    let row = &fc.weights()[o * fan..][..fan];
                    for ((dw, &v), (d, &wv)) in pg.weights[o * fan..][..fan].iter_mut().zip(x).zip(dx.iter_mut().zip(row)) {
                        *dw += go * v;
                        *d += go * wv;
                    }
                }
                let (fh, fw, fc_c) = fc.in_shape();
                g = Some(Tensor::from_raw(fh, fw, fc_c, dx));
            }
            (Layer::Lcn(p), Cache::Lcn { input, denom }) => {
                let go = g.take().expect("gradient flows from the classifier");
                g = Some(lcn_backward(input, denom, p, &go));
            }
            (Layer::Pool { .. }, Cache::Pool { in_shape, argmax }) => {
                let go = g.take().expect("gradient flows from the classifier");
                let mut dx = vec![T::zero(); in_shape.0 * in_shape.1 * in_shape.2];
                for (&src, &v) in argmax.iter().zip(go.as_slice()) {
                    dx[src] += v;
                }
                g = Some(Tensor::from_raw(in_shape.0, in_shape.1, in_shape.2, dx));
            }
            (Layer::Conv { bank, padding }, Cache::Conv { input, output }) => {
                let go = g.take().expect("gradient flows from the classifier");
                let masked = Tensor::from_fn(go.height(), go.width(), go.channels(), |r, c, ch| {
                    if output.at(r, c, ch) > T::zero() {
                        go.at(r, c, ch)
                    } else {
                        T::zero()
                    }
                });
                g = conv_backward(input, bank, *padding, &masked, grads.at_mut(idx), need_input);
            }
            _ => unreachable!("trace follows the layer list"),
        }
        // Nothing flows below the first parametrised layer.
        if g.is_none() && !matches!(layer, Layer::Softmax) {
            break;
        }
    }
    Ok(loss)
}

/// Summed loss and summed gradients over a batch.
pub fn batch_gradients<T: Scalar>(net: &Network<T>, batch: &[(&Tensor<T>, usize)]) -> Result<(T, Gradients<T>)> {
    let mut grads = Gradients::zeros_like(net);
    let mut loss = T::zero();
    for &(x, label) in batch {
        loss += accumulate_gradients(net, x, label, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Summed cross-entropy over a batch, forward only.
pub fn batch_loss<T: Scalar>(net: &Network<T>, batch: &[(&Tensor<T>, usize)]) -> Result<T> {
    let mut loss = T::zero();
    for &(x, label) in batch {
        loss += cross_entropy(&net.forward(x)?, label);
    }
    Ok(loss)
}

fn batch_pattern(net: &Network<f64>, batch: &[(&Tensor<f64>, usize)]) -> Result<Vec<u64>> {
    batch.iter().map(|&(x, _)| forward_trace(net, x).map(|t| t.activation_pattern())).collect()
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Draws rejected because a ReLU or pooling switch lay within the
    /// difference interval.
    pub kinks_skipped: usize,
    /// `|analytic - numeric| / max(1, |analytic|)`, worst case.
    pub max_rel_error: f64,
    /// Worst relative error per parametrised layer index.
    pub per_layer: Vec<(usize, f64)>,
}

/// Checks `samples_per_layer` randomly chosen weights and biases of every
/// parametrised layer against central differences with step `h`. A draw
/// whose difference interval crosses a non-differentiable point is replaced
/// by another parameter of the same layer.
pub fn gradient_check(
    net: &Network<f64>,
    batch: &[(&Tensor<f64>, usize)],
    samples_per_layer: usize,
    h: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let (_, analytic) = batch_gradients(net, batch)?;
    let mut probe = net.clone();
    let base_pattern = batch_pattern(net, batch)?;
    let mut report = GradCheckReport { checked: 0, kinks_skipped: 0, max_rel_error: 0.0, per_layer: Vec::new() };
    let layer_ids: Vec<usize> = analytic
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.as_ref().map(|_| i))
        .collect();
    for layer in layer_ids {
        let pg = analytic.layers[layer].as_ref().expect("parametrised");
        let (nw, nb) = (pg.weights.len(), pg.biases.len());
        let mut order: Vec<usize> = (0..nw + nb).collect();
        order.shuffle(rng);
        let mut worst = 0.0f64;
        let mut done = 0;
        for k in order {
            if done == samples_per_layer {
                break;
            }
            let expect = if k < nw { pg.weights[k] } else { pg.biases[k - nw] };
            let nudge = |probe: &mut Network<f64>, delta: f64| {
                let mut params = params_mut(probe);
                let (_, w, b) = params.iter_mut().find(|(i, _, _)| *i == layer).expect("layer present");
                if k < nw {
                    w[k] += delta;
                } else {
                    b[k - nw] += delta;
                }
            };
            nudge(&mut probe, h);
            let up = batch_loss(&probe, batch)?;
            let smooth_up = batch_pattern(&probe, batch)? == base_pattern;
            nudge(&mut probe, -2.0 * h);
            let down = batch_loss(&probe, batch)?;
            let smooth_down = batch_pattern(&probe, batch)? == base_pattern;
            nudge(&mut probe, h);
            if !(smooth_up && smooth_down) {
                report.kinks_skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let err = (expect - numeric).abs() / expect.abs().max(1.0);
            worst = worst.max(err);
            report.checked += 1;
            done += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_layer.push((layer, worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{FcWeights, LayerSpec, NetworkSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Vec<Tensor<f64>> {
        (0..n).map(|_| Tensor::from_fn(side, side, 1, |_, _, _| rng.random_range(0.0..1.0))).collect()
    }

    fn check(spec: &NetworkSpec, seed: u64, per_layer: usize) -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::<f64>::random(spec, &mut rng).unwrap();
        // Non-zero biases so every path is exercised.
        for (_, _, b) in params_mut(&mut net) {
            for v in b.iter_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let xs = images(&mut rng, 3, spec.window_side);
        let batch: Vec<_> = xs.iter().enumerate().map(|(i, x)| (x, i % 2)).collect();
        gradient_check(&net, &batch, per_layer, 1e-4, &mut rng).unwrap()
    }

    #[test]
    fn table1_gradients_match_finite_differences() {
        for padding in [Padding::Same, Padding::Valid] {
            let r = check(&NetworkSpec::table1(padding), 11, 70);
            assert!(r.checked >= 200, "{r:?}");
            assert!(r.max_rel_error <= 1e-3, "{r:?}");
        }
    }

    fn unit(layers: Vec<LayerSpec>, window: usize) -> NetworkSpec {
        NetworkSpec { input_channels: 1, window_side: window, layers }
    }

    #[test]
    fn each_layer_type_on_its_own() {
        let conv = LayerSpec::Conv { filters: 6, size: 3, padding: Padding::Valid };
        let fc = LayerSpec::Fc { outputs: 2 };
        let cases = [
            unit(vec![fc.clone(), LayerSpec::Softmax], 6),
            unit(vec![conv.clone(), fc.clone()], 8),
            unit(vec![conv.clone(), LayerSpec::Pool { size: 2 }, fc.clone()], 8),
            unit(vec![conv.clone(), LayerSpec::Lcn(LcnParams::new(1.0, 0.5, 0.75, 3).unwrap()), fc.clone()], 8),
        ];
        for (i, spec) in cases.iter().enumerate() {
            let r = check(spec, 20 + i as u64, 40);
            assert!(r.max_rel_error <= 1e-3, "case {i}: {r:?}");
        }
    }

    #[test]
    fn lcn_without_alpha_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = LayerSpec::Conv { filters: 4, size: 3, padding: Padding::Same };
        let with = unit(
            vec![conv.clone(), LayerSpec::Lcn(LcnParams::new(1.0, 0.0, 0.75, 5).unwrap()), LayerSpec::Fc { outputs: 2 }],
            6,
        );
        let net = Network::<f64>::random(&with, &mut rng).unwrap();
        let plain_layers: Vec<_> = net.layers().iter().filter(|l| !matches!(l, Layer::Lcn(_))).cloned().collect();
        let plain = Network::new(plain_layers).unwrap();
        let x = images(&mut rng, 1, 6).remove(0);
        let (_, a) = batch_gradients(&net, &[(&x, 1)]).unwrap();
        let (_, b) = batch_gradients(&plain, &[(&x, 1)]).unwrap();
        let flat = |g: &Gradients<f64>| -> Vec<f64> {
            g.layers.iter().flatten().flat_map(|p| p.weights.iter().chain(&p.biases).copied()).collect()
        };
        for (u, v) in flat(&a).iter().zip(&flat(&b)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_batch_has_tiny_gradients() {
        let spec = unit(vec![LayerSpec::Fc { outputs: 2 }, LayerSpec::Softmax], 2);
        // Logit gap of 60 in favour of the label.
        let fc = FcWeights::new(2, 2, 2, 1, vec![0.0; 8], vec![-30.0, 30.0]).unwrap();
        let net = Network::new(vec![Layer::Fc(fc), Layer::Softmax]).unwrap();
        assert_eq!(net.spec(), spec);
        let x = Tensor::filled(2, 2, 1, 0.5);
        let (loss, g) = batch_gradients(&net, &[(&x, 1), (&x, 1)]).unwrap();
        assert!(loss < 1e-20);
        assert!(g.max_abs() < 1e-20);
    }

    #[test]
    fn pool_ties_go_to_first_tap() {
        let x = Tensor::<f64>::filled(2, 2, 1, 1.0);
        let (y, arg) = pool_with_argmax(&x, 2).unwrap();
        assert_eq!(y.as_slice(), &[1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn trace_matches_network_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::<f64>::random(&NetworkSpec::table1(Padding::Same), &mut rng).unwrap();
        let x = images(&mut rng, 1, 32).remove(0);
        let t = forward_trace(&net, &x).unwrap();
        let p = net.forward(&x).unwrap();
        for (a, b) in t.probs.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
