//! Brute-force reference evaluation and the fragment equivalence harness.
//!
//! The reference path crops every window and runs the network on it from
//! scratch with conventional pooling. Apart from the tensor primitives
//! (`conv2d_direct`, `relu`) it shares no code with the fragment pipeline.

use rayon::prelude::*;

use crate::dcf::{extract_dcfs, OffsetPath};
use crate::detector::score_fragment;
use crate::error::{DcfError, Result};
use crate::layers::{fc_as_conv, ConvBackend, Layer, Network};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_direct, relu, Padding, Tensor};

fn pool_plain<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.shape();
    if h < s || w < s {
        return Err(DcfError::TooSmall { height: h, width: w, required: s });
    }
    Ok(Tensor::from_fn(h / s, w / s, c, |m, n, ch| {
        let mut best = x.at(m * s, n * s, ch);
        for a in 0..s {
            for b in 0..s {
                best = best.max(x.at(m * s + a, n * s + b, ch));
            }
        }
        best
    }))
}

fn normalise<T: Scalar>(x: &Tensor<T>, kappa: T, alpha: T, beta: T, r: usize) -> Tensor<T> {
    let (h, w, n) = x.shape();
    Tensor::from_fn(h, w, n, |row, col, j| {
        let lo = j.saturating_sub(r / 2);
        let hi = (j + r / 2).min(n - 1);
        let mut sum = T::zero();
        for i in lo..=hi {
            let v = x.at(row, col, i);
            sum += v * v;
        }
        x.at(row, col, j) / (kappa + alpha * sum).powf(beta)
    })
}

/// Class probabilities of one window, evaluated layer by layer.
pub fn reference_forward<T: Scalar>(patch: &Tensor<T>, net: &Network<T>) -> Result<Vec<T>> {
    let mut x = patch.clone();
    let mut logits = None;
    for layer in net.layers() {
        match layer {
            Layer::Conv { bank, padding } => x = relu(&conv2d_direct(&x, bank, *padding)?),
            Layer::Pool { size } => x = pool_plain(&x, *size)?,
            Layer::Lcn(p) => x = normalise(&x, p.kappa, p.alpha, p.beta, p.r),
            Layer::Fc(fc) => {
                let (fh, fw, fcn) = fc.in_shape();
                if x.shape() != (fh, fw, fcn) {
                    return Err(DcfError::Geometry(format!("window features {:?} do not fit the classifier", x.shape())));
                }
                let mut z = Vec::with_capacity(fc.out_count());
                for o in 0..fc.out_count() {
                    let mut s = fc.biases()[o];
                    for (idx, &v) in x.as_slice().iter().enumerate() {
                        s += fc.weights()[o * fc.fan_in() + idx] * v;
                    }
                    z.push(s);
                }
                logits = Some(z);
            }
            Layer::Softmax => {}
        }
    }
    let z = logits.expect("network has a classifier");
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// Probability of `class_index` for every window at the given stride.
pub fn patch_scores<T: Scalar>(image: &Tensor<T>, net: &Network<T>, stride: usize, class_index: usize) -> Result<Tensor<T>> {
    let side = net.window_side();
    if image.height() < side || image.width() < side {
        return Err(DcfError::TooSmall { height: image.height(), width: image.width(), required: side });
    }
    if stride == 0 {
        return Err(DcfError::InvalidArgument("stride must be positive".into()));
    }
    let rows = (image.height() - side) / stride + 1;
    let cols = (image.width() - side) / stride + 1;
    let data = (0..rows)
        .into_par_iter()
        .map(|r| {
            (0..cols)
                .map(|c| {
                    let patch = image.crop(r * stride, c * stride, side, side)?;
                    Ok(reference_forward(&patch, net)?[class_index])
                })
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    Tensor::new(rows, cols, 1, data)
}

/// Outcome of comparing fragment scores against the patch oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    pub positions_compared: usize,
    /// Fragment path and cell of the largest disagreement.
    pub worst_position: Option<(OffsetPath, usize, usize)>,
    /// Window positions no fragment cell mapped to.
    pub uncovered: usize,
    /// Window positions reached more than once.
    pub duplicated: usize,
}

impl EquivalenceReport {
    pub fn is_bijective(&self) -> bool {
        self.uncovered == 0 && self.duplicated == 0
    }
}

/// Deliberate corruption for checking that the harness can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Shift the column offset of the first fragment by one pixel.
    ShiftFirstFragment,
}

/// Compares stride-1 patch scores with the fragment response maps mapped
/// through their geometry. Valid padding only.
pub fn equivalence_report<T: Scalar>(image: &Tensor<T>, net: &Network<T>) -> Result<EquivalenceReport> {
    equivalence_report_with(image, net, None)
}

pub fn equivalence_report_with<T: Scalar>(image: &Tensor<T>, net: &Network<T>, fault: Option<Fault>) -> Result<EquivalenceReport> {
    if net
        .feature_layers()
        .iter()
        .any(|l| matches!(l, Layer::Conv { padding: Padding::Same, .. }))
    {
        return Err(DcfError::InvalidArgument("equivalence is exact only under valid padding".into()));
    }
    let class = net.fc().out_count() - 1;
    let oracle = patch_scores(image, net, 1, class)?;
    let (rows, cols, _) = oracle.shape();

    let dcfs = extract_dcfs(image, net, ConvBackend::Direct)?;
    let bank = fc_as_conv(net.fc())?;
    let mut hits = vec![0u32; rows * cols];
    let mut report = EquivalenceReport {
        max_abs_diff: 0.0,
        positions_compared: 0,
        worst_position: None,
        uncovered: 0,
        duplicated: 0,
    };
    for (i, frag) in dcfs.fragments().iter().enumerate() {
        let mut geometry = frag.geometry.clone();
        if i == 0 && fault == Some(Fault::ShiftFirstFragment) {
            geometry.offset.1 += 1;
        }
        let Some(scores) = score_fragment(frag, &bank, class, ConvBackend::Direct)?.scores else {
            continue;
        };
        for m in 0..scores.height() {
            for n in 0..scores.width() {
                let (r, c) = geometry.image_position(m, n);
                if r >= rows || c >= cols {
                    report.max_abs_diff = f64::INFINITY;
                    report.worst_position = Some((geometry.offset_path.clone(), m, n));
                    continue;
                }
                hits[r * cols + c] += 1;
                report.positions_compared += 1;
                let diff = (scores.at(m, n, 0) - oracle.at(r, c, 0)).abs().as_f64();
                if diff > report.max_abs_diff || report.worst_position.is_none() {
                    report.max_abs_diff = report.max_abs_diff.max(diff);
                    report.worst_position = Some((geometry.offset_path.clone(), m, n));
                }
            }
        }
    }
    report.uncovered = hits.iter().filter(|&&h| h == 0).count();
    report.duplicated = hits.iter().filter(|&&h| h > 1).count();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::NetworkSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net(padding: Padding, seed: u64) -> Network<f64> {
        Network::random(&NetworkSpec::table1(padding), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(h, w, 1, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn reference_matches_network_forward() {
        for padding in [Padding::Same, Padding::Valid] {
            let n = net(padding, 1);
            let img = image(32, 32, 1);
            let a = reference_forward(&img, &n).unwrap();
            let b = n.forward(&img).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_sized_image_is_one_score() {
        let n = net(Padding::Same, 2);
        let img = image(32, 32, 2);
        let map = patch_scores(&img, &n, 5, 1).unwrap();
        assert_eq!(map.shape(), (1, 1, 1));
        assert!((map.as_slice()[0] - n.forward(&img).unwrap()[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_image_zero_bias_is_uniform() {
        let map = patch_scores(&Tensor::zeros(40, 36, 1), &net(Padding::Same, 3), 2, 1).unwrap();
        assert_eq!(map.shape(), (5, 3, 1));
        assert!(map.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn equivalence_on_random_images() {
        let n = net(Padding::Valid, 4);
        let report = equivalence_report(&image(41, 46, 4), &n).unwrap();
        assert!(report.max_abs_diff <= 1e-6, "{report:?}");
        assert_eq!(report.positions_compared, 10 * 15);
        assert!(report.is_bijective());
    }

    #[test]
    fn zero_image_has_no_difference() {
        let report = equivalence_report(&Tensor::zeros(40, 40, 1), &net(Padding::Valid, 5)).unwrap();
        assert_eq!(report.max_abs_diff, 0.0);
        assert_eq!(report.positions_compared, 81);
    }

    #[test]
    fn fault_injection_is_detected() {
        let n = net(Padding::Valid, 6);
        let report = equivalence_report_with(&image(44, 44, 6), &n, Some(Fault::ShiftFirstFragment)).unwrap();
        assert!(report.max_abs_diff > 0.01, "{report:?}");
        assert!(!report.is_bijective());
    }

    #[test]
    fn same_padding_is_rejected() {
        assert!(equivalence_report(&image(40, 40, 7), &net(Padding::Same, 7)).is_err());
    }

    #[test]
    fn translation_consistent() {
        let n = net(Padding::Valid, 8);
        let img = image(44, 44, 8);
        let shifted = Tensor::from_fn(44, 44, 1, |r, c, _| img.at((r + 4).min(43), (c + 4).min(43), 0));
        let a = patch_scores(&img, &n, 1, 1).unwrap();
        let b = patch_scores(&shifted, &n, 1, 1).unwrap();
        for r in 0..a.height() - 4 {
            for c in 0..a.width() - 4 {
                assert!((a.at(r + 4, c + 4, 0) - b.at(r, c, 0)).abs() < 1e-12);
            }
        }
    }
}
