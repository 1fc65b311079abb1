use dcf_core::cost::{
    flops_conv_dcf, flops_conv_image, flops_conv_patch, flops_fc_image, flops_fc_patch, published_report, reference_inputs,
    LogArgument, Method,
};
use num_rational::Ratio;
use proptest::prelude::*;

type Q = Ratio<i64>;

fn q(v: i64) -> Q {
    Q::from_integer(v)
}

#[test]
fn rational_costs_match_hand_products() {
    let layers = reference_inputs(q(800), q(600), Q::new(1, 2), q);
    let (l1, l4, l7) = (&layers[0].input, &layers[1].input, &layers[2].input);
    // 2 * 480000 px * 1 * 16 maps * 30^2 * 25 taps
    assert_eq!(flops_conv_patch(l1), q(2 * 480_000 * 16 * 900 * 25));
    // 2 * 480000 * 16 * 16 * 16^2 * 25
    assert_eq!(flops_conv_patch(l4), q(2 * 480_000 * 16 * 16 * 256 * 25));
    // 2 * 120000 * 16 * 16 * 4 fragments * 25
    assert_eq!(flops_conv_image(l4), q(2 * 120_000 * 16 * 16 * 4 * 25));
    assert_eq!(l4.nonzero_pixels(), q(60_000));
    // 2 * 480000 * 16 * 16 maps * 1024 inputs
    assert_eq!(flops_fc_patch(l7), q(2 * 480_000 * 16 * 16 * 1024));
    // 2 * 480000 * 16 fragments * 1024
    assert_eq!(flops_fc_image(l7), q(2 * 480_000 * 16 * 1024));
}

#[test]
fn published_totals_are_exact_in_rationals() {
    let report = published_report(q(5), |v| Q::new(v, 1));
    let totals = [Method::Patch, Method::Image, Method::Dcf].map(|m| report.total(m));
    assert_eq!(totals, [q(964_147_200), q(7_997_200), q(141_968)]);
}

#[test]
fn dcf_layer_four_near_published_value() {
    let layers = reference_inputs(800.0, 600.0, 0.5, |v| v as f64);
    let v = flops_conv_dcf(&layers[1].input, LogArgument::NonzeroPixels);
    // 2 * 60000 * ln(60000) * 256 * 4
    let expected = 2.0 * 60_000.0 * 60_000f64.ln() * 256.0 * 4.0;
    assert!((v - expected).abs() < 1e-3 * expected);
    assert!((v / 1e10 - 0.135168).abs() / 0.135168 < 1e-3);
}

proptest! {
    #[test]
    fn patch_and_image_costs_scale_with_area(w in 32i64..2000, h in 32i64..2000, k in 2i64..5) {
        let base = reference_inputs(q(w), q(h), Q::new(1, 2), q);
        let big = reference_inputs(q(w * k), q(h), Q::new(1, 2), q);
        for (a, b) in base.iter().zip(&big) {
            prop_assert_eq!(flops_conv_patch(&b.input), flops_conv_patch(&a.input) * q(k));
            prop_assert_eq!(flops_conv_image(&b.input), flops_conv_image(&a.input) * q(k));
        }
    }

    #[test]
    fn dcf_cost_grows_with_density(lo in 0.05f64..0.5, step in 0.01f64..0.5) {
        let a = reference_inputs(640.0, 480.0, lo, |v| v as f64);
        let b = reference_inputs(640.0, 480.0, lo + step, |v| v as f64);
        let c = |l: &[dcf_core::cost::CostLayer<f64>]| flops_conv_dcf(&l[1].input, LogArgument::NonzeroPixels);
        prop_assert!(c(&b) > c(&a));
    }
}
