//! Minibatch SGD with momentum and weight decay for the classifier, and
//! full-batch training of the box regressor.
//!
//! Gradients are summed over a minibatch, so the learning rates act per
//! sample. Everything is single-threaded and a pure function of the seed,
//! the configuration and the data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backprop::{accumulate_gradients, params_mut, Gradients};
use crate::detector::{target_deltas, window_features, Detection, DetectConfig, RegressorWeights, model_responses};
use crate::error::{DcfError, Result};
use crate::layers::{FcWeights, Layer, Network, NetworkSpec};
use crate::scalar::Scalar;
use crate::synth::{Dataset, Scene, POSITIVE};
use crate::tensor::Tensor;

/// Update rule of one parametrised layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerRates {
    pub eps_w: f64,
    pub eps_b: f64,
    pub mom_w: f64,
    pub mom_b: f64,
    /// Weight decay, applied to weights only.
    pub wc: f64,
}

impl LayerRates {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eps_w > 0.0
            && self.eps_b > 0.0
            && (0.0..1.0).contains(&self.mom_w)
            && (0.0..1.0).contains(&self.mom_b)
            && self.wc >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(DcfError::InvalidArgument(format!("invalid layer rates {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// One entry per parametrised layer, in order.
    pub rates: Vec<LayerRates>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once validation accuracy and precision both reach this value.
    pub target: Option<f64>,
    /// Starting bias of every conv channel.
    pub conv_bias_init: f64,
}

impl TrainConfig {
    /// The reference rates for conv 1, conv 2 and the classifier; batch 64,
    /// at most 30 epochs, conv biases starting at 0.1.
    pub fn reference() -> Self {
        let r = |eps_w, eps_b, wc| LayerRates { eps_w, eps_b, mom_w: 0.9, mom_b: 0.9, wc };
        Self {
            rates: vec![r(0.003, 0.004, 0.0), r(0.0001, 0.0002, 0.0), r(0.0002, 0.0003, 0.01)],
            batch_size: 64,
            epochs: 30,
            seed: 42,
            target: None,
            conv_bias_init: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.conv_bias_init.is_finite() {
            return Err(DcfError::InvalidArgument("conv bias init must be finite".into()));
        }
        if self.batch_size == 0 {
            return Err(DcfError::InvalidArgument("batch size must be positive".into()));
        }
        self.rates.iter().try_for_each(LayerRates::validate)
    }
}

/// Centres every conv filter on zero and sets its bias. Zero-sum filters
/// answer flat input with the bias alone, so a positive bias keeps a channel
/// from starting out dead on the non-negative maps that feed deeper convs.
pub fn init_conv_layers<T: Scalar>(net: &mut Network<T>, bias: f64) {
    for layer in net.layers_mut() {
        if let Layer::Conv { bank, .. } = layer {
            let n = bank.size() * bank.size() * bank.in_channels();
            for filter in bank.weights_mut().chunks_mut(n) {
                let mean = filter.iter().fold(T::zero(), |a, &v| a + v) / T::of(n as f64);
                filter.iter_mut().for_each(|v| *v -= mean);
            }
            bank.biases_mut().fill(T::of(bias));
        }
    }
}

/// `velocity <- mom * velocity - eps * (grad + wc * param)`, then
/// `param <- param + velocity`.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], velocity: &mut [T], eps: f64, mom: f64, wc: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(DcfError::Shape(format!(
            "sgd step over {} parameters got {} gradients and {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let (eps, mom, wc) = (T::of(eps), T::of(mom), T::of(wc));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mom * *v - eps * (g + wc * *p);
        *p += *v;
    }
    Ok(())
}

/// Applies one update to every parametrised layer of `net`.
pub fn apply_update<T: Scalar>(net: &mut Network<T>, grads: &Gradients<T>, velocity: &mut Gradients<T>, rates: &[LayerRates]) -> Result<()> {
    let params = params_mut(net);
    if params.len() != rates.len() {
        return Err(DcfError::InvalidArgument(format!(
            "{} parametrised layers but {} rate entries",
            params.len(),
            rates.len()
        )));
    }
    for ((layer, w, b), r) in params.into_iter().zip(rates) {
        let (Some(g), Some(v)) = (grads.layers[layer].as_ref(), velocity.layers[layer].as_mut()) else {
            return Err(DcfError::Shape("gradients do not match the network".into()));
        };
        sgd_step(w, &g.weights, &mut v.weights, r.eps_w, r.mom_w, r.wc)?;
        sgd_step(b, &g.biases, &mut v.biases, r.eps_b, r.mom_b, 0.0)?;
    }
    Ok(())
}

/// Binary classification quality on a labelled set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// True positives over predicted positives.
    pub precision: f64,
    pub recall: f64,
    pub mean_loss: f64,
}

pub fn evaluate<T: Scalar>(net: &Network<T>, samples: &[(Tensor<T>, usize)]) -> Result<Metrics> {
    let (mut tp, mut fp, mut fn_, mut correct, mut loss) = (0usize, 0usize, 0usize, 0usize, 0.0);
    for (x, label) in samples {
        let p = net.forward(x)?;
        let predicted = if p[POSITIVE] > p[1 - POSITIVE] { POSITIVE } else { 1 - POSITIVE };
        loss += -p[*label].as_f64().max(1e-300).ln();
        correct += usize::from(predicted == *label);
        match (predicted == POSITIVE, *label == POSITIVE) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let n = samples.len().max(1) as f64;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Metrics {
        accuracy: correct as f64 / n,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        mean_loss: loss / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Metrics,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub net: Network<T>,
    pub history: Vec<EpochStats>,
}

impl<T> TrainOutcome<T> {
    pub fn validation(&self) -> Metrics {
        self.history.last().map(|e| e.validation).unwrap_or_default()
    }
}

fn to_pairs<T: Scalar>(d: &Dataset) -> Vec<(Tensor<T>, usize)> {
    d.samples.iter().map(|s| (s.image.cast(), s.label)).collect()
}

/// Trains a freshly initialised `spec` network. `progress` sees every
/// finished epoch.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train_set: &Dataset,
    validation: &Dataset,
    spec: &NetworkSpec,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::<T>::random(spec, &mut rng)?;
    init_conv_layers(&mut net, cfg.conv_bias_init);
    let train_pairs = to_pairs::<T>(train_set);
    let val_pairs = to_pairs::<T>(validation);
    let mut velocity = Gradients::zeros_like(&net);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut history = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Gradients::zeros_like(&net);
            let mut loss = T::zero();
            for &i in chunk {
                let (x, label) = &train_pairs[i];
                loss += accumulate_gradients(&net, x, *label, &mut grads)?;
            }
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(DcfError::Divergence(format!("loss became {loss} in epoch {epoch}, batch {b}")));
            }
            epoch_loss += loss;
            apply_update(&mut net, &grads, &mut velocity, &cfg.rates)?;
            if params_mut(&mut net).iter().any(|(_, w, b)| w.iter().chain(b.iter()).any(|v| !v.is_finite())) {
                return Err(DcfError::Divergence(format!("parameters overflowed in epoch {epoch}, batch {b}")));
            }
        }
        let stats = EpochStats {
            epoch,
            train_loss: epoch_loss / train_pairs.len().max(1) as f64,
            validation: evaluate(&net, &val_pairs)?,
        };
        if !stats.validation.mean_loss.is_finite() {
            return Err(DcfError::Divergence(format!("validation loss became {} in epoch {epoch}", stats.validation.mean_loss)));
        }
        progress(&stats);
        history.push(stats);
        if cfg.target.is_some_and(|t| stats.validation.accuracy >= t && stats.validation.precision >= t) {
            break;
        }
    }
    Ok(TrainOutcome { net, history })
}

/// One regressor training example.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorSample<T> {
    pub features: Tensor<T>,
    pub proposal: Detection,
    pub target: Detection,
}

/// Classifier-window features of every response cell that scores above
/// `config.tau` and overlaps a planted box by at least `min_iou`, with the
/// best-overlapping box as target. At most `per_scene` cells per scene,
/// spread evenly over the qualifying ones.
pub fn regressor_samples<T: Scalar>(
    net: &Network<T>,
    scenes: &[Scene],
    config: &DetectConfig,
    min_iou: f64,
    per_scene: usize,
) -> Result<Vec<RegressorSample<T>>> {
    let mut out = Vec::new();
    for scene in scenes {
        let image = scene.image.cast::<T>();
        let dims = (image.height(), image.width());
        let mr = model_responses(&image, net, config)?;
        let mut found = Vec::new();
        for (i, map) in mr.responses.maps.iter().enumerate() {
            let Some(scores) = &map.scores else { continue };
            for r in 0..scores.height() {
                for c in 0..scores.width() {
                    if scores.at(r, c, 0).as_f64() <= config.tau {
                        continue;
                    }
                    let proposal = crate::detector::backproject((r, c), &map.geometry, map.scale, dims);
                    let best = scene
                        .boxes
                        .iter()
                        .map(|b| (b, proposal.iou(b)))
                        .max_by(|a, b| a.1.total_cmp(&b.1));
                    if let Some((b, o)) = best {
                        if o >= min_iou {
                            found.push((i, r, c, proposal, *b));
                        }
                    }
                }
            }
        }
        let step = found.len().div_ceil(per_scene.max(1)).max(1);
        for &(i, r, c, proposal, target) in found.iter().step_by(step) {
            out.push(RegressorSample { features: window_features(&mr, i, r, c)?, proposal, target });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorConfig {
    pub epochs: usize,
    /// Initial full-batch step size, adapted per epoch.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self { epochs: 300, learning_rate: 0.05, seed: 7 }
    }
}

#[derive(Clone, Debug)]
pub struct RegressorOutcome<T> {
    pub weights: RegressorWeights<T>,
    /// Training mean squared error on the delta targets, before training and
    /// after every epoch.
    pub mse: Vec<f64>,
}

struct RegressorProblem {
    inputs: Vec<Vec<f64>>,
    targets: Vec<[f64; 4]>,
}

struct Mlp {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    fan_in: usize,
}

impl Mlp {
    fn hidden_count(&self) -> usize {
        self.b1.len()
    }

    /// Mean squared error and, if requested, its gradient.
    fn evaluate(&self, p: &RegressorProblem, want_grad: bool) -> (f64, Option<Mlp>) {
        let (n_h, fan) = (self.hidden_count(), self.fan_in);
        let mut grad = want_grad.then(|| Mlp {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; n_h],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; 4],
            fan_in: fan,
        });
        let mut sse = 0.0;
        let n = p.inputs.len() as f64;
        let mut hidden = vec![0.0; n_h];
        for (x, t) in p.inputs.iter().zip(&p.targets) {
            for (h, hv) in hidden.iter_mut().enumerate() {
                let row = &self.w1[h * fan..][..fan];
                *hv = (self.b1[h] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).max(0.0);
            }
            let mut err = [0.0; 4];
            for o in 0..4 {
                let y = self.b2[o] + self.w2[o * n_h..][..n_h].iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
                err[o] = y - t[o];
                sse += err[o] * err[o];
            }
            if let Some(g) = grad.as_mut() {
                // d(mean of squared errors over samples and outputs)
                let scale = 2.0 / (n * 4.0);
                let mut dh = vec![0.0; n_h];
                for o in 0..4 {
                    let e = err[o] * scale;
                    g.b2[o] += e;
                    for h in 0..n_h {
                        g.w2[o * n_h + h] += e * hidden[h];
                        dh[h] += e * self.w2[o * n_h + h];
                    }
                }
                for h in 0..n_h {
                    if hidden[h] <= 0.0 || dh[h] == 0.0 {
                        continue;
                    }
                    g.b1[h] += dh[h];
                    for (gw, &xv) in g.w1[h * fan..][..fan].iter_mut().zip(x) {
                        *gw += dh[h] * xv;
                    }
                }
            }
        }
        (sse / (n * 4.0), grad)
    }

    fn stepped(&self, g: &Mlp, lr: f64) -> Mlp {
        let f = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - lr * y).collect();
        Mlp { w1: f(&self.w1, &g.w1), b1: f(&self.b1, &g.b1), w2: f(&self.w2, &g.w2), b2: f(&self.b2, &g.b2), fan_in: self.fan_in }
    }
}

/// Trains the two-stage regressor on delta targets by full-batch gradient
/// descent. The step grows after every improving epoch and is halved (and
/// the epoch retried) whenever the error would rise, so the training error
/// never increases. Targets are standardised internally.
pub fn train_regressor<T: Scalar>(
    samples: &[RegressorSample<T>],
    window_side: usize,
    cfg: &RegressorConfig,
) -> Result<RegressorOutcome<T>> {
    let first = samples
        .first()
        .ok_or_else(|| DcfError::InvalidArgument("regressor training needs at least one sample".into()))?;
    let shape = first.features.shape();
    if samples.iter().any(|s| s.features.shape() != shape) {
        return Err(DcfError::Geometry("regressor samples have different feature shapes".into()));
    }
    let raw: Vec<[f64; 4]> = samples.iter().map(|s| target_deltas(&s.proposal, &s.target, window_side)).collect();
    let n = raw.len() as f64;
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for o in 0..4 {
        mean[o] = raw.iter().map(|t| t[o]).sum::<f64>() / n;
        let var = raw.iter().map(|t| (t[o] - mean[o]).powi(2)).sum::<f64>() / n;
        std[o] = if var > 1e-24 { var.sqrt() } else { 1.0 };
    }
    let problem = RegressorProblem {
        inputs: samples.iter().map(|s| s.features.as_slice().iter().map(|v| v.as_f64()).collect()).collect(),
        targets: raw.iter().map(|t| std::array::from_fn(|o| (t[o] - mean[o]) / std[o])).collect(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = RegressorWeights::<f64>::random(shape, window_side, &mut rng);
    let mut mlp = Mlp {
        w1: init.hidden().weights().to_vec(),
        b1: init.hidden().biases().to_vec(),
        // Zero output stage: training starts from unrefined proposals.
        w2: vec![0.0; init.output().weights().len()],
        b2: vec![0.0; 4],
        fan_in: shape.0 * shape.1 * shape.2,
    };
    // Scale the per-output error back to delta units for reporting.
    let report = |m: f64| m * std.iter().map(|s| s * s).sum::<f64>() / 4.0;
    let (mut loss, mut grad) = mlp.evaluate(&problem, true);
    if !loss.is_finite() {
        return Err(DcfError::Divergence("regressor loss is not finite at initialisation".into()));
    }
    let mut history = vec![report(loss)];
    let mut lr = cfg.learning_rate;
    for _ in 0..cfg.epochs {
        let g = grad.take().expect("gradient requested");
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = mlp.stepped(&g, lr);
            let (l, cg) = candidate.evaluate(&problem, true);
            if l.is_finite() && l <= loss {
                (mlp, loss, grad) = (candidate, l, cg);
                lr *= 1.2;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            // No descent step exists at this resolution: converged.
            grad = Some(g);
        }
        history.push(report(loss));
    }

    // Fold the target standardisation into the output layer.
    let n_h = mlp.hidden_count();
    for o in 0..4 {
        for h in 0..n_h {
            mlp.w2[o * n_h + h] *= std[o];
        }
        mlp.b2[o] = mlp.b2[o] * std[o] + mean[o];
    }
    let cast = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
    let hidden = FcWeights::new(n_h, shape.0, shape.1, shape.2, cast(&mlp.w1), cast(&mlp.b1))?;
    let output = FcWeights::new(4, 1, 1, n_h, cast(&mlp.w2), cast(&mlp.b2))?;
    Ok(RegressorOutcome { weights: RegressorWeights::new(hidden, output, window_side)?, mse: history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;
    use crate::tensor::Padding;
    use rand::Rng;

    #[test]
    fn zero_gradient_and_velocity_leave_params() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn plain_descent_without_momentum() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 + 0.1]);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut p = vec![3.0f64];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.0002, 0.9, 0.01).unwrap();
        assert!((p[0] - 3.0 * (1.0 - 0.000002)).abs() < 1e-15);
        let mut prev = p[0].abs();
        for _ in 0..100 {
            sgd_step(&mut p, &[0.0], &mut v, 0.0002, 0.9, 0.01).unwrap();
            assert!(p[0].abs() <= prev);
            prev = p[0].abs();
        }
        assert!(sgd_step(&mut p, &[0.0, 1.0], &mut v, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::reference();
        assert!(c.validate().is_ok());
        c.rates[0].mom_w = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::reference();
        c.rates[2].eps_b = 0.0;
        assert!(c.validate().is_err());
    }

    fn small_run(seed: u64) -> TrainOutcome<f32> {
        let (tr, va) = generate_dataset(seed, 400).unwrap().split(300);
        let cfg = TrainConfig { epochs: 2, seed, ..TrainConfig::reference() };
        train(&cfg, &tr, &va, &NetworkSpec::table1(Padding::Same), |_| {}).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let a = small_run(3);
        let b = small_run(3);
        assert_eq!(a.net, b.net);
        assert_eq!(a.history.len(), 2);
        assert_ne!(a.net, small_run(4).net);
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, va) = generate_dataset(1, 200).unwrap().split(150);
        let mut cfg = TrainConfig { epochs: 3, ..TrainConfig::reference() };
        for r in &mut cfg.rates {
            r.eps_w = 1e300;
            r.eps_b = 1e300;
        }
        let err = train::<f64>(&cfg, &tr, &va, &NetworkSpec::table1(Padding::Same), |_| {}).unwrap_err();
        assert!(matches!(err, DcfError::Divergence(_)), "{err}");
    }

    fn box_at(x: f64, y: f64, w: f64) -> Detection {
        Detection { x, y, w, h: w, score: 1.0, scale: 1.0 }
    }

    fn synthetic_samples(n: usize, targets: impl Fn(&[f64]) -> [f64; 4]) -> Vec<RegressorSample<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|_| {
                let f = Tensor::from_fn(2, 2, 3, |_, _, _| rng.random_range(0.0..1.0));
                let proposal = box_at(10.0, 20.0, 32.0);
                let d = targets(f.as_slice());
                let target = crate::detector::apply_deltas(&proposal, d, 32);
                RegressorSample { features: f, proposal, target }
            })
            .collect()
    }

    #[test]
    fn zero_targets_give_zero_deltas() {
        let s = synthetic_samples(50, |_| [0.0; 4]);
        let out = train_regressor(&s, 32, &RegressorConfig { epochs: 20, ..Default::default() }).unwrap();
        for x in &s {
            let d = out.weights.deltas(&x.features).unwrap();
            assert!(d.iter().all(|v| v.abs() < 1e-2), "{d:?}");
        }
    }

    #[test]
    fn linear_targets_are_learned_monotonically() {
        let s = synthetic_samples(200, |f| [0.1 * f[0] - 0.05, 0.2 * f[3] - 0.1 * f[5], 4.0 * f[1], -3.0 * f[7] + 1.0]);
        let out = train_regressor(&s, 32, &RegressorConfig { epochs: 300, ..Default::default() }).unwrap();
        assert!(out.mse.windows(2).all(|w| w[1] <= w[0]));
        let (first, last) = (out.mse[0], *out.mse.last().unwrap());
        assert!(last < 0.1 * first, "{first} -> {last}");
    }
}
