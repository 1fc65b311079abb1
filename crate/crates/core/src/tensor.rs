//! Dense feature maps, kernel banks and the direct convolution kernel.

use crate::error::{DcfError, Result};
use crate::scalar::Scalar;

/// A height x width x channels feature map stored row-major as
/// `(row, column, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(DcfError::Shape(format!(
                "tensor dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(DcfError::Shape(format!(
                "{height}x{width}x{channels} tensor needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DcfError::InvalidArgument("tensor values must be finite".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "tensor dimensions must be positive");
        Self { height, width, channels, data: vec![T::zero(); height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        let mut t = Self::zeros(height, width, channels);
        t.data.fill(value);
        t
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut t = Self::zeros(height, width, channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    t.data[(r * width + c) * channels + ch] = f(r, c, ch);
                }
            }
        }
        t
    }

    /// Wraps a buffer produced by a kernel of this crate. Shape is trusted.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: T) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// All channel values at one spatial position.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(DcfError::Shape(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{} tensor",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for r in top..top + height {
            let start = (r * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Self::from_raw(height, width, self.channels, data))
    }

    /// Single-channel view of channel `ch`.
    pub fn channel(&self, ch: usize) -> Self {
        assert!(ch < self.channels);
        let data = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        Self::from_raw(self.height, self.width, 1, data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.height, self.width, self.channels, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_raw(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        )
    }

    /// Largest absolute elementwise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Zero padding applied around the input of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    /// `(k - 1) / 2` zeros on every side; odd kernels only.
    Same,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }

    /// Output extent of a convolution along one axis.
    pub fn output_len(self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.amount(kernel);
        (padded >= kernel).then(|| padded - kernel + 1)
    }
}

/// `count` square kernels of side `size` over `in_channels` input maps,
/// weights laid out as `(out, row, column, in)`, one bias per output.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<T> {
    count: usize,
    size: usize,
    in_channels: usize,
    weights: Vec<T>,
    biases: Vec<T>,
}

impl<T: Scalar> KernelBank<T> {
    pub fn new(
        count: usize,
        size: usize,
        in_channels: usize,
        weights: Vec<T>,
        biases: Vec<T>,
    ) -> Result<Self> {
        if count == 0 || size == 0 || in_channels == 0 {
            return Err(DcfError::Shape(format!(
                "kernel bank dimensions must be positive, got {count}x{size}x{size}x{in_channels}"
            )));
        }
        if weights.len() != count * size * size * in_channels {
            return Err(DcfError::Shape(format!(
                "kernel bank {count}x{size}x{size}x{in_channels} needs {} weights, got {}",
                count * size * size * in_channels,
                weights.len()
            )));
        }
        if biases.len() != count {
            return Err(DcfError::Shape(format!(
                "kernel bank with {count} kernels needs {count} biases, got {}",
                biases.len()
            )));
        }
        Ok(Self { count, size, in_channels, weights, biases })
    }

    pub fn zeros(count: usize, size: usize, in_channels: usize) -> Self {
        Self::new(
            count,
            size,
            in_channels,
            vec![T::zero(); count * size * size * in_channels],
            vec![T::zero(); count],
        )
        .expect("positive dimensions")
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    #[inline]
    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    #[inline]
    pub fn biases(&self) -> &[T] {
        &self.biases
    }

    #[inline]
    pub fn biases_mut(&mut self) -> &mut [T] {
        &mut self.biases
    }

    /// Weights and biases borrowed together.
    pub fn params_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.weights, &mut self.biases)
    }

    #[inline]
    pub fn weight(&self, out: usize, row: usize, col: usize, ch: usize) -> T {
        self.weights[((out * self.size + row) * self.size + col) * self.in_channels + ch]
    }

    pub fn cast<U: Scalar>(&self) -> KernelBank<U> {
        KernelBank {
            count: self.count,
            size: self.size,
            in_channels: self.in_channels,
            weights: self.weights.iter().map(|&v| U::of(v.as_f64())).collect(),
            biases: self.biases.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// Weights reordered to `(row, column, in, out)` so the innermost loop of
    /// the direct kernel runs over output channels.
    fn out_minor(&self) -> Vec<T> {
        let (k, cin, cout) = (self.size, self.in_channels, self.count);
        let mut t = vec![T::zero(); self.weights.len()];
        for o in 0..cout {
            for i in 0..k {
                for j in 0..k {
                    for c in 0..cin {
                        t[((i * k + j) * cin + c) * cout + o] = self.weight(o, i, j, c);
                    }
                }
            }
        }
        t
    }
}

/// Validates a convolution call and returns `(pad, out_height, out_width)`.
pub(crate) fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    bank: &KernelBank<T>,
    padding: Padding,
) -> Result<(usize, usize, usize)> {
    if input.channels() != bank.in_channels() {
        return Err(DcfError::ChannelMismatch {
            input: input.channels(),
            expected: bank.in_channels(),
        });
    }
    let k = bank.size();
    if padding == Padding::Same && k.is_multiple_of(2) {
        return Err(DcfError::EvenKernelSame(k));
    }
    match (padding.output_len(input.height(), k), padding.output_len(input.width(), k)) {
        (Some(oh), Some(ow)) => Ok((padding.amount(k), oh, ow)),
        _ => Err(DcfError::TooSmall {
            height: input.height(),
            width: input.width(),
            required: k,
        }),
    }
}

/// Cross-correlation of `input` with every kernel of `bank`, plus bias.
/// No activation.
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    bank: &KernelBank<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (pad, oh, ow) = conv_geometry(input, bank, padding)?;
    let (h, w, cin) = input.shape();
    let (k, cout) = (bank.size(), bank.count());
    let wt = bank.out_minor();
    let mut out = vec![T::zero(); oh * ow * cout];

    for y in 0..oh {
        for x in 0..ow {
            let acc = &mut out[(y * ow + x) * cout..][..cout];
            acc.copy_from_slice(bank.biases());
            for i in 0..k {
                let Some(sy) = (y + i).checked_sub(pad).filter(|&r| r < h) else {
                    continue;
                };
                for j in 0..k {
                    let Some(sx) = (x + j).checked_sub(pad).filter(|&c| c < w) else {
                        continue;
                    };
                    let px = input.pixel(sy, sx);
                    let taps = &wt[(i * k + j) * cin * cout..][..cin * cout];
                    for (&v, row) in px.iter().zip(taps.chunks_exact(cout)) {
                        for (a, &wv) in acc.iter_mut().zip(row) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(oh, ow, cout, out))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Nearest source index for output cell `i` when resampling `src` cells onto
/// `dst` cells (centre-aligned).
#[inline]
pub(crate) fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

/// Nearest-neighbour resize of the spatial dimensions. Never invents values:
/// every output cell is a copy of one input cell.
pub fn nn_resize<T: Scalar>(input: &Tensor<T>, out_height: usize, out_width: usize) -> Result<Tensor<T>> {
    if out_height == 0 || out_width == 0 {
        return Err(DcfError::InvalidArgument(format!(
            "resize target must be positive, got {out_height}x{out_width}"
        )));
    }
    let (h, w, c) = input.shape();
    let cols: Vec<usize> = (0..out_width).map(|n| nearest_source(n, w, out_width)).collect();
    let mut data = Vec::with_capacity(out_height * out_width * c);
    for m in 0..out_height {
        let sr = nearest_source(m, h, out_height);
        for &sc in &cols {
            data.extend_from_slice(input.pixel(sr, sc));
        }
    }
    Ok(Tensor::from_raw(out_height, out_width, c, data))
}

/// Fraction of exactly-zero values.
pub fn sparsity<T: Scalar>(input: &Tensor<T>) -> f64 {
    let zeros = input.as_slice().iter().filter(|v| v.is_zero()).count();
    zeros as f64 / input.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_bank(rng: &mut impl Rng, n: usize, k: usize, c: usize) -> KernelBank<f64> {
        KernelBank::new(
            n,
            k,
            c,
            (0..n * k * k * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    // Straight four-loop cross-correlation with explicit zero padding.
    fn naive_conv(input: &Tensor<f64>, bank: &KernelBank<f64>, pad: usize) -> Tensor<f64> {
        let k = bank.size();
        let oh = input.height() + 2 * pad - k + 1;
        let ow = input.width() + 2 * pad - k + 1;
        Tensor::from_fn(oh, ow, bank.count(), |y, x, o| {
            let mut s = bank.biases()[o];
            for i in 0..k {
                for j in 0..k {
                    let (r, c) = (y as isize + i as isize - pad as isize, x as isize + j as isize - pad as isize);
                    if r < 0 || c < 0 || r >= input.height() as isize || c >= input.width() as isize {
                        continue;
                    }
                    for ch in 0..input.channels() {
                        s += input.at(r as usize, c as usize, ch) * bank.weight(o, i, j, ch);
                    }
                }
            }
            s
        })
    }

    #[test]
    fn ones_kernel_over_ones() {
        let input = Tensor::<f64>::filled(3, 3, 1, 1.0);
        let bank = KernelBank::new(1, 2, 1, vec![1.0; 4], vec![0.0]).unwrap();
        let out = conv2d_direct(&input, &bank, Padding::Valid).unwrap();
        assert_eq!(out.shape(), (2, 2, 1));
        assert!(out.as_slice().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn negative_bias_cancels() {
        let input = Tensor::<f64>::filled(4, 4, 1, 1.0);
        let bank = KernelBank::new(1, 2, 1, vec![1.0; 4], vec![-4.0]).unwrap();
        let out = conv2d_direct(&input, &bank, Padding::Valid).unwrap();
        assert_eq!(out.shape(), (3, 3, 1));
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_selects_channel_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, 5, 7, 3);
        let bank = KernelBank::new(1, 1, 3, vec![1.0, 0.0, 0.0], vec![0.0]).unwrap();
        let out = conv2d_direct(&input, &bank, Padding::Valid).unwrap();
        assert_eq!(out, input.channel(0));
    }

    #[test]
    fn orientation_is_cross_correlation() {
        // 1x3 row [1,2,3] with kernel taps [0,0,1] picks the right neighbour.
        let input = Tensor::new(3, 3, 1, (1..=9).map(f64::from).collect()).unwrap();
        let mut w = vec![0.0; 9];
        w[2] = 1.0; // row 0, col 2
        let bank = KernelBank::new(1, 3, 1, w, vec![0.0]).unwrap();
        let out = conv2d_direct(&input, &bank, Padding::Valid).unwrap();
        assert_eq!(out.as_slice(), &[3.0]);
    }

    #[test]
    fn same_padding_keeps_size_and_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor(&mut rng, 9, 6, 2);
        let bank = random_bank(&mut rng, 3, 5, 2);
        let out = conv2d_direct(&input, &bank, Padding::Same).unwrap();
        assert_eq!(out.shape(), (9, 6, 3));
        assert!(out.max_abs_diff(&naive_conv(&input, &bank, 2)) < 1e-12);
    }

    #[test]
    fn rejects_channel_mismatch_and_even_same() {
        let input = Tensor::<f64>::zeros(4, 4, 2);
        let bank = KernelBank::<f64>::zeros(1, 3, 1);
        assert!(matches!(
            conv2d_direct(&input, &bank, Padding::Valid),
            Err(DcfError::ChannelMismatch { input: 2, expected: 1 })
        ));
        let bank = KernelBank::<f64>::zeros(1, 2, 2);
        assert!(matches!(conv2d_direct(&input, &bank, Padding::Same), Err(DcfError::EvenKernelSame(2))));
        let bank = KernelBank::<f64>::zeros(1, 5, 2);
        assert!(matches!(conv2d_direct(&input, &bank, Padding::Valid), Err(DcfError::TooSmall { .. })));
    }

    #[test]
    fn relu_values() {
        let t = Tensor::new(1, 2, 1, vec![-1.0, 2.5]).unwrap();
        assert_eq!(relu(&t).as_slice(), &[0.0, 2.5]);
    }

    #[test]
    fn relu_of_symmetric_noise_is_half_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&mut rng, 64, 64, 4);
        let s = sparsity(&relu(&t));
        assert!((s - 0.5).abs() < 0.02, "sparsity {s}");
    }

    #[test]
    fn resize_upscale_replicates_blocks() {
        let t = Tensor::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = nn_resize(&t, 4, 4).unwrap();
        let expect = [
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.as_slice(), &expect);
        assert_eq!(nn_resize(&t, 2, 2).unwrap(), t);
    }

    #[test]
    fn resize_downscale_only_picks_source_values() {
        let t = Tensor::new(4, 4, 1, (0..16).map(f64::from).collect()).unwrap();
        let down = nn_resize(&t, 2, 2).unwrap();
        assert_eq!(down.shape(), (2, 2, 1));
        for v in down.as_slice() {
            assert!(t.as_slice().contains(v));
        }
        assert!(nn_resize(&t, 0, 2).is_err());
    }

    #[test]
    fn sparsity_ratios() {
        assert_eq!(sparsity(&Tensor::<f64>::zeros(2, 2, 1)), 1.0);
        assert_eq!(sparsity(&Tensor::<f64>::filled(2, 2, 1, 1.0)), 0.0);
        assert_eq!(sparsity(&Tensor::new(1, 4, 1, vec![0.0, 1.0, 0.0, 2.0]).unwrap()), 0.5);
    }

    #[test]
    fn tensor_rejects_bad_buffers() {
        assert!(Tensor::<f64>::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(KernelBank::<f64>::new(1, 2, 1, vec![0.0; 4], vec![]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn direct_conv_matches_naive(seed in any::<u64>(), h in 3usize..10, w in 3usize..10,
                                     c in 1usize..4, n in 1usize..4, same in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_tensor(&mut rng, h, w, c);
            let bank = random_bank(&mut rng, n, 3, c);
            let (padding, pad) = if same { (Padding::Same, 1) } else { (Padding::Valid, 0) };
            let out = conv2d_direct(&input, &bank, padding).unwrap();
            prop_assert!(out.max_abs_diff(&naive_conv(&input, &bank, pad)) < 1e-12);
        }

        #[test]
        fn conv_is_affine(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, 7, 8, 2);
            let y = random_tensor(&mut rng, 7, 8, 2);
            let bank = random_bank(&mut rng, 3, 3, 2);
            let combo = Tensor::from_fn(7, 8, 2, |r, c, ch| a * x.at(r, c, ch) + b * y.at(r, c, ch));
            let lhs = conv2d_direct(&combo, &bank, Padding::Valid).unwrap();
            let cx = conv2d_direct(&x, &bank, Padding::Valid).unwrap();
            let cy = conv2d_direct(&y, &bank, Padding::Valid).unwrap();
            let rhs = Tensor::from_fn(lhs.height(), lhs.width(), 3, |r, c, o| {
                a * cx.at(r, c, o) + b * cy.at(r, c, o) - (a + b - 1.0) * bank.biases()[o]
            });
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
        }

        #[test]
        fn integer_upscale_round_trips(seed in any::<u64>(), h in 1usize..8, w in 1usize..8, f in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tensor(&mut rng, h, w, 2);
            let up = nn_resize(&t, h * f, w * f).unwrap();
            prop_assert_eq!(nn_resize(&up, h, w).unwrap(), t);
        }

        #[test]
        fn resize_preserves_zeros(seed in any::<u64>(), oh in 1usize..20, ow in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = relu(&random_tensor(&mut rng, 9, 11, 3));
            let r = nn_resize(&t, oh, ow).unwrap();
            for v in r.as_slice() {
                prop_assert!(t.as_slice().contains(v));
            }
        }

        #[test]
        fn relu_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tensor(&mut rng, 5, 5, 2);
            prop_assert_eq!(relu(&relu(&t)), relu(&t));
        }
    }
}
