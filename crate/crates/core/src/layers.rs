//! Layer kernels and the network description they are assembled into.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DcfError, Result};
use crate::fft::conv2d_fft;
use crate::scalar::Scalar;
use crate::tensor::{conv2d_direct, relu, KernelBank, Padding, Tensor};

/// Which convolution kernel evaluates conv layers and FC-as-conv scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvBackend {
    #[default]
    Direct,
    Fft,
}

impl ConvBackend {
    pub fn conv<T: Scalar>(self, input: &Tensor<T>, bank: &KernelBank<T>, padding: Padding) -> Result<Tensor<T>> {
        match self {
            ConvBackend::Direct => conv2d_direct(input, bank, padding),
            ConvBackend::Fft => conv2d_fft(input, bank, padding),
        }
    }
}

/// Cross-channel normalisation parameters:
/// `x / (kappa + alpha * sum of squares over r adjacent maps)^beta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LcnParams<T> {
    pub kappa: T,
    pub alpha: T,
    pub beta: T,
    pub r: usize,
}

impl<T: Scalar> LcnParams<T> {
    pub fn new(kappa: T, alpha: T, beta: T, r: usize) -> Result<Self> {
        if !(kappa > T::zero()) || !(beta > T::zero()) || alpha < T::zero() || r == 0 {
            return Err(DcfError::InvalidArgument(format!(
                "LCN needs kappa > 0, alpha >= 0, beta > 0, r >= 1 (got {kappa}, {alpha}, {beta}, {r})"
            )));
        }
        Ok(Self { kappa, alpha, beta, r })
    }

    /// kappa = 1, alpha = 0.001 (scale), beta = 0.75 (pow), five maps.
    pub fn reference() -> Self {
        Self { kappa: T::one(), alpha: T::of(0.001), beta: T::of(0.75), r: 5 }
    }

    /// Inclusive channel window around `j` among `n` maps.
    #[inline]
    pub fn window(&self, j: usize, n: usize) -> (usize, usize) {
        let half = self.r / 2;
        (j.saturating_sub(half), (j + half).min(n - 1))
    }

    pub fn cast<U: Scalar>(&self) -> LcnParams<U> {
        LcnParams {
            kappa: U::of(self.kappa.as_f64()),
            alpha: U::of(self.alpha.as_f64()),
            beta: U::of(self.beta.as_f64()),
            r: self.r,
        }
    }
}

/// Fully-connected weights over an `in_height x in_width x in_channels`
/// input, laid out `(out, row, column, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcWeights<T> {
    out_count: usize,
    in_height: usize,
    in_width: usize,
    in_channels: usize,
    weights: Vec<T>,
    biases: Vec<T>,
}

impl<T: Scalar> FcWeights<T> {
    pub fn new(
        out_count: usize,
        in_height: usize,
        in_width: usize,
        in_channels: usize,
        weights: Vec<T>,
        biases: Vec<T>,
    ) -> Result<Self> {
        let fan_in = in_height * in_width * in_channels;
        if out_count == 0 || fan_in == 0 {
            return Err(DcfError::Shape("fully-connected dimensions must be positive".into()));
        }
        if weights.len() != out_count * fan_in || biases.len() != out_count {
            return Err(DcfError::Shape(format!(
                "fully-connected {out_count}x({in_height}x{in_width}x{in_channels}) needs {} weights and {out_count} biases, got {} and {}",
                out_count * fan_in,
                weights.len(),
                biases.len()
            )));
        }
        Ok(Self { out_count, in_height, in_width, in_channels, weights, biases })
    }

    pub fn zeros(out_count: usize, in_height: usize, in_width: usize, in_channels: usize) -> Self {
        let n = out_count * in_height * in_width * in_channels;
        Self::new(out_count, in_height, in_width, in_channels, vec![T::zero(); n], vec![T::zero(); out_count])
            .expect("positive dimensions")
    }

    pub fn out_count(&self) -> usize {
        self.out_count
    }

    pub fn in_shape(&self) -> (usize, usize, usize) {
        (self.in_height, self.in_width, self.in_channels)
    }

    pub fn fan_in(&self) -> usize {
        self.in_height * self.in_width * self.in_channels
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[T] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [T] {
        &mut self.biases
    }

    pub fn params_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.weights, &mut self.biases)
    }

    pub fn cast<U: Scalar>(&self) -> FcWeights<U> {
        FcWeights {
            out_count: self.out_count,
            in_height: self.in_height,
            in_width: self.in_width,
            in_channels: self.in_channels,
            weights: self.weights.iter().map(|&v| U::of(v.as_f64())).collect(),
            biases: self.biases.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

/// relu(conv(input)).
pub fn conv_layer_forward<T: Scalar>(
    input: &Tensor<T>,
    bank: &KernelBank<T>,
    padding: Padding,
    backend: ConvBackend,
) -> Result<Tensor<T>> {
    backend.conv(input, bank, padding).map(|t| relu(&t))
}

/// All `s * s` tile offsets of an `s x s` pooling kernel in row-major order.
pub fn enumerate_offsets(s: usize) -> Vec<(usize, usize)> {
    (0..s).flat_map(|i| (0..s).map(move |j| (i, j))).collect()
}

/// Output extent of offset pooling along one axis (complete tiles only).
#[inline]
pub fn pooled_len(input: usize, s: usize, offset: usize) -> usize {
    input.saturating_sub(offset) / s
}

/// Non-overlapping `s x s` max pooling with tiling starting at `offset`.
/// Incomplete tiles at the far edges are dropped.
pub fn maxpool_fragment<T: Scalar>(input: &Tensor<T>, s: usize, offset: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w, c) = input.shape();
    let (or, oc) = offset;
    if s == 0 || or >= s || oc >= s {
        return Err(DcfError::InvalidArgument(format!("pool offset {offset:?} out of range for size {s}")));
    }
    let (oh, ow) = (pooled_len(h, s, or), pooled_len(w, s, oc));
    if oh == 0 || ow == 0 {
        return Err(DcfError::TooSmall { height: h, width: w, required: s + or.max(oc) });
    }
    let mut out = vec![T::neg_infinity(); oh * ow * c];
    for m in 0..oh {
        for n in 0..ow {
            let dst = &mut out[(m * ow + n) * c..][..c];
            for a in 0..s {
                for b in 0..s {
                    let px = input.pixel(or + s * m + a, oc + s * n + b);
                    for (d, &v) in dst.iter_mut().zip(px) {
                        if v > *d {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(oh, ow, c, out))
}

/// Cross-channel local contrast normalisation at every spatial position.
pub fn lcn_forward<T: Scalar>(input: &Tensor<T>, params: &LcnParams<T>) -> Tensor<T> {
    let (h, w, n) = input.shape();
    let mut out = Vec::with_capacity(input.len());
    let mut sq = vec![T::zero(); n];
    for r in 0..h {
        for c in 0..w {
            let px = input.pixel(r, c);
            for (s, &v) in sq.iter_mut().zip(px) {
                *s = v * v;
            }
            for (j, &v) in px.iter().enumerate() {
                let (lo, hi) = params.window(j, n);
                let sum: T = sq[lo..=hi].iter().copied().sum();
                out.push(v / (params.kappa + params.alpha * sum).powf(params.beta));
            }
        }
    }
    Tensor::from_raw(h, w, n, out)
}

/// Class scores `bias + W . flatten(input)`.
pub fn fc_forward<T: Scalar>(input: &Tensor<T>, fc: &FcWeights<T>) -> Result<Vec<T>> {
    if input.shape() != fc.in_shape() {
        return Err(DcfError::Geometry(format!(
            "fully-connected layer expects {:?} input, got {:?}",
            fc.in_shape(),
            input.shape()
        )));
    }
    let x = input.as_slice();
    Ok(fc
        .weights
        .chunks_exact(fc.fan_in())
        .zip(&fc.biases)
        .map(|(row, &b)| b + row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>())
        .collect())
}

/// Reinterprets fully-connected weights as a bank of `out_count` kernels
/// whose valid correlation at `(m, n)` scores the window at `(m, n)`.
pub fn fc_as_conv<T: Scalar>(fc: &FcWeights<T>) -> Result<KernelBank<T>> {
    if fc.in_height != fc.in_width {
        return Err(DcfError::Geometry(format!(
            "fully-connected input {}x{} is not square",
            fc.in_height, fc.in_width
        )));
    }
    // (out, row, col, in) is already the kernel bank layout.
    KernelBank::new(fc.out_count, fc.in_height, fc.in_channels, fc.weights.clone(), fc.biases.clone())
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Geometry-only description of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv { filters: usize, size: usize, padding: Padding },
    Pool { size: usize },
    Lcn(LcnParams<f64>),
    Fc { outputs: usize },
    Softmax,
}

/// Layer architecture of a classification network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub window_side: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// conv 5x5x16, pool 2, lcn, conv 5x5x16, lcn, pool 2, fc 2, softmax
    /// over a 32x32 grey window.
    pub fn table1(padding: Padding) -> Self {
        let lcn = LcnParams::reference();
        Self {
            input_channels: 1,
            window_side: 32,
            layers: vec![
                LayerSpec::Conv { filters: 16, size: 5, padding },
                LayerSpec::Pool { size: 2 },
                LayerSpec::Lcn(lcn),
                LayerSpec::Conv { filters: 16, size: 5, padding },
                LayerSpec::Lcn(lcn),
                LayerSpec::Pool { size: 2 },
                LayerSpec::Fc { outputs: 2 },
                LayerSpec::Softmax,
            ],
        }
    }

    pub fn pool_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Pool { size } => Some(*size),
                _ => None,
            })
            .collect()
    }
}

/// One layer with its learned parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv { bank: KernelBank<T>, padding: Padding },
    Pool { size: usize },
    Lcn(LcnParams<T>),
    Fc(FcWeights<T>),
    Softmax,
}

impl<T: Scalar> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv { bank, padding } => LayerSpec::Conv { filters: bank.count(), size: bank.size(), padding: *padding },
            Layer::Pool { size } => LayerSpec::Pool { size: *size },
            Layer::Lcn(p) => LayerSpec::Lcn(p.cast()),
            Layer::Fc(fc) => LayerSpec::Fc { outputs: fc.out_count() },
            Layer::Softmax => LayerSpec::Softmax,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv { bank, padding } => Layer::Conv { bank: bank.cast(), padding: *padding },
            Layer::Pool { size } => Layer::Pool { size: *size },
            Layer::Lcn(p) => Layer::Lcn(p.cast()),
            Layer::Fc(fc) => Layer::Fc(fc.cast()),
            Layer::Softmax => Layer::Softmax,
        }
    }
}

/// A trained (or randomly initialised) classification network: feature
/// layers, one fully-connected classifier, optional softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    input_channels: usize,
    window_side: usize,
    fc_index: usize,
}

impl<T: Scalar> Network<T> {
    /// Validates the layer chain and derives the model window side from the
    /// classifier geometry.
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        let fc_index = layers
            .iter()
            .position(|l| matches!(l, Layer::Fc(_)))
            .ok_or_else(|| DcfError::Geometry("network has no fully-connected layer".into()))?;
        match &layers[fc_index + 1..] {
            [] | [Layer::Softmax] => {}
            _ => return Err(DcfError::Geometry("only a softmax may follow the fully-connected layer".into())),
        }
        let Layer::Fc(fc) = &layers[fc_index] else { unreachable!() };
        let (fh, fw, fc_channels) = fc.in_shape();

        let mut input_channels = fc_channels;
        let (mut sh, mut sw) = (fh, fw);
        for layer in layers[..fc_index].iter().rev() {
            match layer {
                Layer::Conv { bank, padding } => {
                    if *padding == Padding::Same && bank.size() % 2 == 0 {
                        return Err(DcfError::EvenKernelSame(bank.size()));
                    }
                    if *padding == Padding::Valid {
                        sh += bank.size() - 1;
                        sw += bank.size() - 1;
                    }
                    input_channels = bank.in_channels();
                }
                Layer::Pool { size } => {
                    if *size == 0 {
                        return Err(DcfError::Geometry("pool size must be positive".into()));
                    }
                    sh *= size;
                    sw *= size;
                }
                Layer::Lcn(_) => {}
                Layer::Fc(_) | Layer::Softmax => {
                    return Err(DcfError::Geometry("classifier layers must come last".into()));
                }
            }
        }
        if sh != sw {
            return Err(DcfError::Geometry(format!("derived model window {sh}x{sw} is not square")));
        }
        let net = Self { layers, input_channels, window_side: sh, fc_index };
        let (h, w, c) = net.feature_shape(sh, sh, input_channels)?;
        if (h, w, c) != (fh, fw, fc_channels) {
            return Err(DcfError::Geometry(format!(
                "feature layers produce {h}x{w}x{c} on a {sh}x{sh} window but the classifier expects {fh}x{fw}x{fc_channels}"
            )));
        }
        Ok(net)
    }

    /// Random initialisation: He-normal conv kernels, zero biases.
    pub fn random(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.layers.len());
        let (mut h, mut w, mut c) = (spec.window_side, spec.window_side, spec.input_channels);
        for ls in &spec.layers {
            match ls {
                LayerSpec::Conv { filters, size, padding } => {
                    let fan_in = size * size * c;
                    let weights = normal_vec(rng, filters * fan_in, (2.0 / fan_in as f64).sqrt());
                    let bank = KernelBank::new(*filters, *size, c, weights, vec![T::zero(); *filters])?;
                    h = padding.output_len(h, *size).ok_or_else(|| too_small(spec))?;
                    w = padding.output_len(w, *size).ok_or_else(|| too_small(spec))?;
                    c = *filters;
                    layers.push(Layer::Conv { bank, padding: *padding });
                }
                LayerSpec::Pool { size } => {
                    h /= size;
                    w /= size;
                    if h == 0 || w == 0 {
                        return Err(too_small(spec));
                    }
                    layers.push(Layer::Pool { size: *size });
                }
                LayerSpec::Lcn(p) => layers.push(Layer::Lcn(p.cast())),
                LayerSpec::Fc { outputs } => {
                    let fan_in = h * w * c;
                    let weights = normal_vec(rng, outputs * fan_in, (1.0 / fan_in as f64).sqrt());
                    layers.push(Layer::Fc(FcWeights::new(*outputs, h, w, c, weights, vec![T::zero(); *outputs])?));
                }
                LayerSpec::Softmax => layers.push(Layer::Softmax),
            }
        }
        let net = Self::new(layers)?;
        if net.window_side != spec.window_side || net.input_channels != spec.input_channels {
            return Err(DcfError::Geometry(format!(
                "spec window {} does not match the derived window {}",
                spec.window_side, net.window_side
            )));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer<T>> {
        self.layers
    }

    /// Layers applied before the classifier.
    pub fn feature_layers(&self) -> &[Layer<T>] {
        &self.layers[..self.fc_index]
    }

    pub fn fc_index(&self) -> usize {
        self.fc_index
    }

    pub fn fc(&self) -> &FcWeights<T> {
        match &self.layers[self.fc_index] {
            Layer::Fc(fc) => fc,
            _ => unreachable!("fc_index points at the classifier"),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    /// Side of the square model input window.
    pub fn window_side(&self) -> usize {
        self.window_side
    }

    pub fn pool_sizes(&self) -> Vec<usize> {
        self.feature_layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Pool { size } => Some(*size),
                _ => None,
            })
            .collect()
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_channels: self.input_channels,
            window_side: self.window_side,
            layers: self.layers.iter().map(Layer::spec).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self.layers.iter().map(Layer::cast).collect(),
            input_channels: self.input_channels,
            window_side: self.window_side,
            fc_index: self.fc_index,
        }
    }

    /// Same weights with every conv layer switched to `padding`. The
    /// classifier is kept, so the result is only valid when the window
    /// arithmetic still matches.
    pub fn with_padding(&self, padding: Padding) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { bank, .. } => Layer::Conv { bank: bank.clone(), padding },
                other => other.clone(),
            })
            .collect();
        Self::new(layers)
    }

    /// Shape after the feature layers for an `h x w x c` input under
    /// offset-(0,0) pooling.
    pub fn feature_shape(&self, h: usize, w: usize, c: usize) -> Result<(usize, usize, usize)> {
        let (mut h, mut w, mut c) = (h, w, c);
        for layer in self.feature_layers() {
            match layer {
                Layer::Conv { bank, padding } => {
                    if bank.in_channels() != c {
                        return Err(DcfError::ChannelMismatch { input: c, expected: bank.in_channels() });
                    }
                    match (padding.output_len(h, bank.size()), padding.output_len(w, bank.size())) {
                        (Some(a), Some(b)) => (h, w) = (a, b),
                        _ => return Err(DcfError::TooSmall { height: h, width: w, required: bank.size() }),
                    }
                    c = bank.count();
                }
                Layer::Pool { size } => {
                    (h, w) = (h / size, w / size);
                    if h == 0 || w == 0 {
                        return Err(DcfError::TooSmall { height: h, width: w, required: *size });
                    }
                }
                _ => {}
            }
        }
        Ok((h, w, c))
    }

    /// Feature layers over one window with conventional offset-(0,0) pooling.
    pub fn features(&self, input: &Tensor<T>, backend: ConvBackend) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for layer in self.feature_layers() {
            x = match layer {
                Layer::Conv { bank, padding } => conv_layer_forward(&x, bank, *padding, backend)?,
                Layer::Pool { size } => maxpool_fragment(&x, *size, (0, 0))?,
                Layer::Lcn(p) => lcn_forward(&x, p),
                Layer::Fc(_) | Layer::Softmax => unreachable!(),
            };
        }
        Ok(x)
    }

    /// Classifier outputs before softmax.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Vec<T>> {
        fc_forward(&self.features(input, ConvBackend::Direct)?, self.fc())
    }

    /// Class probabilities of one window.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Vec<T>> {
        self.logits(input).map(|z| softmax(&z))
    }
}

fn too_small(spec: &NetworkSpec) -> DcfError {
    DcfError::Geometry(format!("window side {} is too small for the layer stack", spec.window_side))
}

fn normal_vec<T: Scalar>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}
