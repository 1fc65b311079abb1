//! Frequency-domain convolution with zero-tile skipping.
//!
//! The padded input is cut into square tiles. Each tile channel is
//! transformed on its own; channels whose tile is entirely zero are never
//! transformed, and tiles with no live channel cost no inverse transform
//! either. Tile results are overlap-added into the full correlation, so the
//! output matches [`conv2d_direct`](crate::tensor::conv2d_direct) up to
//! floating point rounding.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{conv_geometry, KernelBank, Padding, Tensor};

/// Work counters of one FFT convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FftStats {
    /// Forward 2-D transforms of input tile channels.
    pub forward_transforms: usize,
    /// Tile channels skipped because every value was zero.
    pub skipped_transforms: usize,
    /// Inverse 2-D transforms (one per live tile and output channel).
    pub inverse_transforms: usize,
    /// Side of the square transform.
    pub transform_side: usize,
}

impl FftStats {
    pub fn total_transforms(&self) -> usize {
        self.forward_transforms + self.inverse_transforms
    }

    pub fn accumulate(&mut self, other: &FftStats) {
        self.forward_transforms += other.forward_transforms;
        self.skipped_transforms += other.skipped_transforms;
        self.inverse_transforms += other.inverse_transforms;
        self.transform_side = self.transform_side.max(other.transform_side);
    }
}

/// In-place square 2-D transform built from row passes and transposes.
struct Fft2d<T: Scalar> {
    n: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    scratch: Vec<Complex<T>>,
}

impl<T: Scalar> Fft2d<T> {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            scratch: vec![Complex::default(); n * n],
        }
    }

    fn transpose(&mut self, buf: &mut [Complex<T>]) {
        let n = self.n;
        for r in 0..n {
            for c in 0..n {
                self.scratch[c * n + r] = buf[r * n + c];
            }
        }
        buf.copy_from_slice(&self.scratch);
    }

    fn run(&mut self, buf: &mut [Complex<T>], inverse: bool) {
        let plan = if inverse { Arc::clone(&self.inverse) } else { Arc::clone(&self.forward) };
        plan.process(buf);
        self.transpose(buf);
        plan.process(buf);
        self.transpose(buf);
    }
}

fn transform_side(extent: usize, kernel: usize) -> usize {
    let cap = 64usize.max((2 * kernel).next_power_of_two());
    (extent + kernel - 1).next_power_of_two().min(cap)
}

/// Same contract as [`conv2d_direct`](crate::tensor::conv2d_direct).
pub fn conv2d_fft<T: Scalar>(
    input: &Tensor<T>,
    bank: &KernelBank<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    conv2d_fft_with_stats(input, bank, padding).map(|(t, _)| t)
}

pub fn conv2d_fft_with_stats<T: Scalar>(
    input: &Tensor<T>,
    bank: &KernelBank<T>,
    padding: Padding,
) -> Result<(Tensor<T>, FftStats)> {
    let (pad, oh, ow) = conv_geometry(input, bank, padding)?;
    let (h, w, cin) = input.shape();
    let (k, cout) = (bank.size(), bank.count());
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);

    let n = transform_side(hp.max(wp), k);
    let tile = n + 1 - k;
    let area = n * n;
    let mut fft = Fft2d::<T>::new(n);
    let mut stats = FftStats { transform_side: n, ..Default::default() };

    // Spectra of the flipped kernels turn correlation into convolution.
    let mut kernel_spectra = vec![Complex::default(); cout * cin * area];
    for o in 0..cout {
        for c in 0..cin {
            let spec = &mut kernel_spectra[(o * cin + c) * area..][..area];
            for i in 0..k {
                for j in 0..k {
                    spec[i * n + j] = Complex::new(bank.weight(o, k - 1 - i, k - 1 - j, c), T::zero());
                }
            }
            fft.run(spec, false);
        }
    }

    // Full convolution of the padded input, rows/cols offset by k - 1 from
    // the valid correlation output.
    let (fh, fw) = (hp + k - 1, wp + k - 1);
    let mut full = vec![T::zero(); cout * fh * fw];
    let mut tile_spectra = vec![Complex::default(); cin * area];
    let mut live = vec![false; cin];
    let mut acc: Vec<Complex<T>> = vec![Complex::default(); area];
    let norm = T::one() / T::of(area as f64);

    for ty in (0..hp).step_by(tile) {
        let th = tile.min(hp - ty);
        for tx in (0..wp).step_by(tile) {
            let tw = tile.min(wp - tx);
            for c in 0..cin {
                let spec = &mut tile_spectra[c * area..][..area];
                spec.fill(Complex::default());
                let mut any = false;
                for a in 0..th {
                    let Some(sy) = (ty + a).checked_sub(pad).filter(|&r| r < h) else {
                        continue;
                    };
                    for b in 0..tw {
                        let Some(sx) = (tx + b).checked_sub(pad).filter(|&q| q < w) else {
                            continue;
                        };
                        let v = input.at(sy, sx, c);
                        if v != T::zero() {
                            any = true;
                            spec[a * n + b] = Complex::new(v, T::zero());
                        }
                    }
                }
                live[c] = any;
                if any {
                    fft.run(spec, false);
                    stats.forward_transforms += 1;
                } else {
                    stats.skipped_transforms += 1;
                }
            }
            if !live.iter().any(|&l| l) {
                continue;
            }

            let rows = (th + k - 1).min(n);
            let cols = (tw + k - 1).min(n);
            for o in 0..cout {
                acc.fill(Complex::default());
                for c in (0..cin).filter(|&c| live[c]) {
                    let xs = &tile_spectra[c * area..][..area];
                    let ks = &kernel_spectra[(o * cin + c) * area..][..area];
                    for ((a, &x), &kv) in acc.iter_mut().zip(xs).zip(ks) {
                        *a = *a + x * kv;
                    }
                }
                fft.run(&mut acc, true);
                stats.inverse_transforms += 1;
                let plane = &mut full[o * fh * fw..][..fh * fw];
                for a in 0..rows {
                    let row = &mut plane[(ty + a) * fw + tx..][..cols];
                    for (dst, src) in row.iter_mut().zip(&acc[a * n..a * n + cols]) {
                        *dst += src.re * norm;
                    }
                }
            }
        }
    }

    let mut out = vec![T::zero(); oh * ow * cout];
    for y in 0..oh {
        for x in 0..ow {
            for o in 0..cout {
                out[(y * ow + x) * cout + o] =
                    full[o * fh * fw + (y + k - 1) * fw + (x + k - 1)] + bank.biases()[o];
            }
        }
    }
    Ok((Tensor::from_raw(oh, ow, cout, out), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d_direct;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(seed: u64, h: usize, w: usize, c: usize, n: usize, k: usize) -> (Tensor<f64>, KernelBank<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0));
        let bank = KernelBank::new(
            n,
            k,
            c,
            (0..n * k * k * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        (input, bank)
    }

    #[test]
    fn matches_direct_on_16x16x4() {
        let (input, bank) = random_case(7, 16, 16, 4, 3, 5);
        for padding in [Padding::Valid, Padding::Same] {
            let a = conv2d_direct(&input, &bank, padding).unwrap();
            let b = conv2d_fft(&input, &bank, padding).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-6);
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let (input, _) = random_case(8, 12, 9, 1, 1, 3);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let bank = KernelBank::new(1, 3, 1, w, vec![0.0]).unwrap();
        let out = conv2d_fft(&input, &bank, Padding::Same).unwrap();
        assert!(out.max_abs_diff(&input) <= 1e-6);
    }

    #[test]
    fn zero_input_yields_bias_and_no_transforms() {
        let (_, bank) = random_case(9, 1, 1, 2, 3, 5);
        let input = Tensor::<f64>::zeros(20, 20, 2);
        let (out, stats) = conv2d_fft_with_stats(&input, &bank, Padding::Valid).unwrap();
        for y in 0..out.height() {
            for x in 0..out.width() {
                assert_eq!(out.pixel(y, x), bank.biases());
            }
        }
        assert_eq!(stats.total_transforms(), 0);
        assert!(stats.skipped_transforms > 0);
    }

    #[test]
    fn tiles_across_large_inputs() {
        // Larger than one tile in both directions.
        let (input, bank) = random_case(10, 150, 133, 2, 2, 8);
        let a = conv2d_direct(&input, &bank, Padding::Valid).unwrap();
        let (b, stats) = conv2d_fft_with_stats(&input, &bank, Padding::Valid).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
        assert!(stats.forward_transforms > 2);
    }

    #[test]
    fn zero_blocks_are_skipped() {
        let (mut input, bank) = random_case(11, 128, 128, 1, 2, 5);
        let (_, dense) = conv2d_fft_with_stats(&input, &bank, Padding::Valid).unwrap();
        for y in 0..128 {
            for x in 64..128 {
                input.set(y, x, 0, 0.0);
            }
        }
        let (sparse_out, sparse) = conv2d_fft_with_stats(&input, &bank, Padding::Valid).unwrap();
        assert!(sparse.total_transforms() < dense.total_transforms());
        let direct = conv2d_direct(&input, &bank, Padding::Valid).unwrap();
        assert!(direct.max_abs_diff(&sparse_out) <= 1e-6);
    }

    #[test]
    fn propagates_errors() {
        let (input, _) = random_case(12, 6, 6, 2, 1, 3);
        let bank = KernelBank::<f64>::zeros(1, 3, 3);
        assert!(conv2d_fft(&input, &bank, Padding::Valid).is_err());
        let bank = KernelBank::<f64>::zeros(1, 4, 2);
        assert!(conv2d_fft(&input, &bank, Padding::Same).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn fft_agrees_with_direct(seed in any::<u64>(), h in 5usize..40, w in 5usize..40,
                                  c in 1usize..5, n in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]),
                                  same in any::<bool>()) {
            let (input, bank) = random_case(seed, h, w, c, n, k);
            let padding = if same { Padding::Same } else { Padding::Valid };
            let a = conv2d_direct(&input, &bank, padding).unwrap();
            let b = conv2d_fft(&input, &bank, padding).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-6);
        }
    }
}
