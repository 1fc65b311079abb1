//! Wall-clock comparison of the three evaluation strategies on one image.

use std::fmt::Write as _;
use std::time::Instant;

use crate::dcf::extract_dcfs;
use crate::detector::multiscale_responses;
use crate::error::{DcfError, Result};
use crate::layers::{fc_as_conv, ConvBackend, Network};
use crate::oracles::patch_scores;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Window stride of the patch-based baseline.
pub const PATCH_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Every window cropped and run through the whole network.
    Patch,
    /// Fragment extraction and scoring with spatial convolution.
    Image,
    /// Fragment extraction and scoring with the FFT backend.
    Dcf,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Patch, Strategy::Image, Strategy::Dcf];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Patch => "patch",
            Strategy::Image => "image",
            Strategy::Dcf => "dcf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub median_seconds: f64,
    pub seconds: Vec<f64>,
    /// Windows scored in one run.
    pub windows: usize,
    /// Highest class probability seen in one run.
    pub max_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Fraction of zero fragment features on this image.
    pub sparsity: f64,
}

impl BenchReport {
    pub fn row(&self, s: Strategy) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }

    /// `strategy,median_seconds`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,median_seconds\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6}", r.strategy.name(), r.median_seconds);
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn run_once<T: Scalar>(image: &Tensor<T>, net: &Network<T>, strategy: Strategy, class: usize) -> Result<(usize, f64)> {
    let summarise = |it: &mut dyn Iterator<Item = f64>| it.fold((0, f64::NEG_INFINITY), |(n, m), v| (n + 1, m.max(v)));
    match strategy {
        Strategy::Patch => {
            let scores = patch_scores(image, net, PATCH_STRIDE, class)?;
            Ok(summarise(&mut scores.as_slice().iter().map(|v| v.as_f64())))
        }
        Strategy::Image | Strategy::Dcf => {
            let backend = if strategy == Strategy::Dcf { ConvBackend::Fft } else { ConvBackend::Direct };
            let dcfs = extract_dcfs(image, net, backend)?;
            let bank = fc_as_conv(net.fc())?;
            let responses = multiscale_responses(&dcfs, &[1.0], &bank, class, backend)?;
            Ok(summarise(
                &mut responses
                    .maps
                    .iter()
                    .filter_map(|m| m.scores.as_ref())
                    .flat_map(|s| s.as_slice().iter().map(|v| v.as_f64())),
            ))
        }
    }
}

/// Times each strategy `runs` times, strategies run one after another.
pub fn bench<T: Scalar>(image: &Tensor<T>, net: &Network<T>, strategies: &[Strategy], runs: usize) -> Result<BenchReport> {
    if runs == 0 {
        return Err(DcfError::InvalidArgument("at least one run is required".into()));
    }
    let class = net.fc().out_count() - 1;
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let mut seconds = Vec::with_capacity(runs);
        let mut last = (0, f64::NAN);
        for _ in 0..runs {
            let start = Instant::now();
            last = run_once(image, net, strategy, class)?;
            seconds.push(start.elapsed().as_secs_f64());
        }
        rows.push(BenchRow { strategy, median_seconds: median(&seconds), seconds, windows: last.0, max_score: last.1 });
    }
    let sparsity = extract_dcfs(image, net, ConvBackend::Fft)?.sparsity();
    Ok(BenchReport { rows, sparsity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::NetworkSpec;
    use crate::tensor::Padding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn window_sized_image_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::<f64>::random(&NetworkSpec::table1(Padding::Same), &mut rng).unwrap();
        let img = Tensor::from_fn(32, 32, 1, |_, _, _| rng.random_range(0.0..1.0));
        let report = bench(&img, &net, &Strategy::ALL, 1).unwrap();
        assert_eq!(report.rows.len(), 3);
        let patch = report.row(Strategy::Patch).unwrap();
        for r in &report.rows {
            assert_eq!(r.windows, 1);
            assert!((r.max_score - patch.max_score).abs() < 1e-9);
        }
        assert!(report.to_csv().starts_with("strategy,median_seconds\npatch,"));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.name()), Some(s));
        }
        assert_eq!(Strategy::parse("gpu"), None);
    }
}
