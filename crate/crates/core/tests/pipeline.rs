use dcf_core::detector::{detect, DetectConfig};
use dcf_core::layers::{ConvBackend, Layer, Network, NetworkSpec};
use dcf_core::tensor::{Padding, Tensor};
use dcf_core::train::init_conv_layers;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn initialised(seed: u64) -> Network<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::random(&NetworkSpec::table1(Padding::Same), &mut rng).unwrap();
    init_conv_layers(&mut net, 0.1);
    net
}

#[test]
fn conv_filters_start_centred_with_the_given_bias() {
    let net = initialised(1);
    let mut convs = 0;
    for layer in net.layers() {
        if let Layer::Conv { bank, .. } = layer {
            convs += 1;
            let n = bank.size() * bank.size() * bank.in_channels();
            for f in bank.weights().chunks(n) {
                assert!(f.iter().sum::<f64>().abs() < 1e-12);
                assert!(f.iter().any(|&v| v != 0.0));
            }
            assert!(bank.biases().iter().all(|&b| b == 0.1));
        }
    }
    assert_eq!(convs, 2);
}

#[test]
fn blank_image_with_a_negative_margin_detects_nothing() {
    let mut net = initialised(2);
    for layer in net.layers_mut() {
        if let Layer::Fc(fc) = layer {
            fc.biases_mut().copy_from_slice(&[20.0, -20.0]);
        }
    }
    let img = Tensor::zeros(96, 96, 1);
    let cfg = DetectConfig { scales: vec![1.0, 0.5], ..DetectConfig::default() };
    assert!(detect(&img, &[net], None, &cfg).unwrap().is_empty());
}

#[test]
fn fft_and_direct_backends_detect_the_same_boxes() {
    let net = initialised(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Tensor::from_fn(80, 72, 1, |_, _, _| rng.random::<f64>());
    let base = DetectConfig { scales: vec![1.0, 0.75], tau: 0.3, ..DetectConfig::default() };
    let direct = detect(&img, std::slice::from_ref(&net), None, &DetectConfig { backend: ConvBackend::Direct, ..base.clone() }).unwrap();
    let fft = detect(&img, &[net], None, &DetectConfig { backend: ConvBackend::Fft, ..base }).unwrap();
    assert_eq!(direct.len(), fft.len());
    for (a, b) in direct.iter().zip(&fft) {
        assert_eq!((a.x, a.y, a.w, a.h), (b.x, b.y, b.w, b.h));
        assert!((a.score - b.score).abs() < 1e-9);
    }
}
