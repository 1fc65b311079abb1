//! Analytical FLOPS of patch-based, image-based and fragment-based
//! evaluation of conv and fully-connected layers.
//!
//! The polynomial formulas are generic over any [`Num`] type so they can be
//! evaluated exactly in integers or rationals; the fragment formulas contain
//! a logarithm and need [`Float`].
//!
//! Conventions: `extent` is the kernel area for conv layers and the input
//! length for the classifier. Conv costs are `2 A P P' w^2 s` (patch) and
//! `2 A_l P P' F s` (image); the literal `s^2` forms are reported alongside.

use std::fmt::Write as _;

use num_traits::{Float, Num, ToPrimitive};

/// Inputs of one costed layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerCostInput<T> {
    /// Source image pixels `A`.
    pub image_pixels: T,
    /// Feature-map pixels `A_l` at this layer.
    pub map_pixels: T,
    /// Share of non-zero feature pixels; `A* = sparsity * A_l`.
    pub sparsity: T,
    pub in_maps: T,
    pub out_maps: T,
    /// Feature-map side `w_l` of the patch model.
    pub patch_side: T,
    /// Kernel area (conv) or input length (fully-connected).
    pub extent: T,
    pub fragments: T,
}

impl<T: Num + Copy> LayerCostInput<T> {
    pub fn nonzero_pixels(&self) -> T {
        self.sparsity * self.map_pixels
    }
}

#[inline]
fn two<T: Num>() -> T {
    T::one() + T::one()
}

/// Patch-based conv cost `2 A P P' w^2 s`.
pub fn flops_conv_patch<T: Num + Copy>(i: &LayerCostInput<T>) -> T {
    two::<T>() * i.image_pixels * i.in_maps * i.out_maps * i.patch_side * i.patch_side * i.extent
}

/// Patch-based conv cost with the extent squared, `2 A P P' w^2 s^2`.
pub fn flops_conv_patch_literal<T: Num + Copy>(i: &LayerCostInput<T>) -> T {
    flops_conv_patch(i) * i.extent
}

/// Image-based conv cost `2 A_l P P' F s`.
pub fn flops_conv_image<T: Num + Copy>(i: &LayerCostInput<T>) -> T {
    two::<T>() * i.map_pixels * i.in_maps * i.out_maps * i.fragments * i.extent
}

pub fn flops_conv_image_literal<T: Num + Copy>(i: &LayerCostInput<T>) -> T {
    flops_conv_image(i) * i.extent
}

/// Argument of the logarithm in the fragment-based formulas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogArgument {
    /// `ln(A_l)`, as written.
    MapPixels,
    /// `ln(A*)`, which agrees with the published layer-4 figure.
    NonzeroPixels,
}

fn sparse_log_term<T: Float>(i: &LayerCostInput<T>, log: LogArgument) -> T {
    let a_star = i.nonzero_pixels();
    if a_star <= T::zero() {
        return T::zero();
    }
    let arg = match log {
        LogArgument::MapPixels => i.map_pixels,
        LogArgument::NonzeroPixels => a_star,
    };
    two::<T>() * a_star * arg.ln()
}

/// Fragment-based conv cost `2 A* ln(.) P P' F`.
pub fn flops_conv_dcf<T: Float>(i: &LayerCostInput<T>, log: LogArgument) -> T {
    sparse_log_term(i, log) * i.in_maps * i.out_maps * i.fragments
}

/// Patch-based classifier cost `2 A P P' s`.
pub fn flops_fc_patch<T: Num + Copy>(i: &LayerCostInput<T>) -> T {
    two::<T>() * i.image_pixels * i.in_maps * i.out_maps * i.extent
}

/// Image-based classifier cost `2 A F s`.
pub fn flops_fc_image<T: Num + Copy>(i: &LayerCostInput<T>) -> T {
    two::<T>() * i.image_pixels * i.fragments * i.extent
}

/// Fragment-based classifier cost `2 A* ln(.) 2 F`.
pub fn flops_fc_dcf<T: Float>(i: &LayerCostInput<T>, log: LogArgument) -> T {
    sparse_log_term(i, log) * two::<T>() * i.fragments
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Patch,
    Image,
    Dcf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Patch => "patch",
            Method::Image => "image",
            Method::Dcf => "dcf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Fc,
}

/// How an entry's value was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Counted in the totals.
    Primary,
    /// The formula exactly as written, where it differs from the primary.
    Literal,
    /// A published figure that the formulas do not reproduce.
    Published,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsEntry<T> {
    pub method: Method,
    pub layer: usize,
    pub variant: Variant,
    pub flops: T,
    /// Whether the cost is paid once per detection scale.
    pub per_scale: bool,
}

impl<T> FlopsEntry<T> {
    pub fn label(&self) -> String {
        match self.variant {
            Variant::Primary => self.method.name().to_string(),
            Variant::Literal => format!("{}-literal", self.method.name()),
            Variant::Published => format!("{}-published", self.method.name()),
        }
    }
}

/// Conv and classifier costs are paid per scale, except fragment-based conv
/// layers: the fragments are computed once and only resized per scale.
pub fn is_per_scale(method: Method, kind: LayerKind) -> bool {
    method != Method::Dcf || kind == LayerKind::Fc
}

/// Per-layer costs and per-method totals.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport<T> {
    pub entries: Vec<FlopsEntry<T>>,
    pub scale_count: T,
}

impl<T: Num + Copy> FlopsReport<T> {
    pub fn new(entries: Vec<FlopsEntry<T>>, scale_count: T) -> Self {
        Self { entries, scale_count }
    }

    pub fn scaled(&self, e: &FlopsEntry<T>) -> T {
        if e.per_scale {
            e.flops * self.scale_count
        } else {
            e.flops
        }
    }

    /// Sum of the primary entries of `method`, scaled where applicable.
    pub fn total(&self, method: Method) -> T {
        self.entries
            .iter()
            .filter(|e| e.method == method && e.variant == Variant::Primary)
            .fold(T::zero(), |acc, e| acc + self.scaled(e))
    }

    pub fn get(&self, method: Method, layer: usize, variant: Variant) -> Option<&FlopsEntry<T>> {
        self.entries.iter().find(|e| e.method == method && e.layer == layer && e.variant == variant)
    }
}

impl<T: Num + Copy + ToPrimitive> FlopsReport<T> {
    /// `method,layer,flops,scaled_flops` in units of 1e10 FLOPS, followed by
    /// one total row per method.
    pub fn to_csv(&self) -> String {
        let unit = |v: T| v.to_f64().unwrap_or(f64::NAN) / 1e10;
        let mut out = String::from("method,layer,flops,scaled_flops\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{}", e.label(), e.layer, unit(e.flops), unit(self.scaled(e)));
        }
        for m in [Method::Patch, Method::Image, Method::Dcf] {
            let unscaled = self
                .entries
                .iter()
                .filter(|e| e.method == m && e.variant == Variant::Primary)
                .fold(T::zero(), |acc, e| acc + e.flops);
            let _ = writeln!(out, "{},total,{},{}", m.name(), unit(unscaled), unit(self.total(m)));
        }
        out
    }
}

/// One layer to be costed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostLayer<T> {
    pub layer: usize,
    pub kind: LayerKind,
    pub input: LayerCostInput<T>,
}

/// Evaluates every formula for every layer. The fragment-based primary uses
/// `log`; the other logarithm is reported as the literal variant.
pub fn full_report<T: Float>(layers: &[CostLayer<T>], scale_count: T, log: LogArgument) -> FlopsReport<T> {
    let other = match log {
        LogArgument::MapPixels => LogArgument::NonzeroPixels,
        LogArgument::NonzeroPixels => LogArgument::MapPixels,
    };
    let mut entries = Vec::new();
    for l in layers {
        let i = &l.input;
        let mut push = |method, variant, flops| {
            entries.push(FlopsEntry { method, layer: l.layer, variant, flops, per_scale: is_per_scale(method, l.kind) })
        };
        match l.kind {
            LayerKind::Conv => {
                push(Method::Patch, Variant::Primary, flops_conv_patch(i));
                push(Method::Patch, Variant::Literal, flops_conv_patch_literal(i));
                push(Method::Image, Variant::Primary, flops_conv_image(i));
                push(Method::Image, Variant::Literal, flops_conv_image_literal(i));
                push(Method::Dcf, Variant::Primary, flops_conv_dcf(i, log));
                push(Method::Dcf, Variant::Literal, flops_conv_dcf(i, other));
            }
            LayerKind::Fc => {
                push(Method::Patch, Variant::Primary, flops_fc_patch(i));
                push(Method::Image, Variant::Primary, flops_fc_image(i));
                push(Method::Dcf, Variant::Primary, flops_fc_dcf(i, log));
                push(Method::Dcf, Variant::Literal, flops_fc_dcf(i, other));
            }
        }
    }
    FlopsReport::new(entries, scale_count)
}

/// Printed per-layer figures of the reference cost table in units of 1e4
/// FLOPS (1e-6 of the 1e10 unit), as `(method, layer, value)`.
pub const PUBLISHED_TABLE: [(Method, usize, i64); 9] = [
    (Method::Patch, 1, 34_560_000),
    (Method::Patch, 4, 157_286_400),
    (Method::Patch, 7, 983_040),
    (Method::Image, 1, 2_000),
    (Method::Image, 4, 614_400),
    (Method::Image, 7, 983_040),
    (Method::Dcf, 1, 2_000),
    (Method::Dcf, 4, 135_168),
    (Method::Dcf, 7, 960),
];

/// Published cells the formulas do not reproduce from the table's inputs.
pub const INCONSISTENT_CELLS: [(Method, usize); 3] = [(Method::Image, 1), (Method::Patch, 7), (Method::Image, 7)];

fn reference_kind(layer: usize) -> LayerKind {
    if layer == 7 {
        LayerKind::Fc
    } else {
        LayerKind::Conv
    }
}

/// The published figures as a report (`convert` maps the 1e4-FLOPS integer
/// units into `T`).
pub fn published_report<T: Num + Copy>(scale_count: T, convert: impl Fn(i64) -> T) -> FlopsReport<T> {
    let entries = PUBLISHED_TABLE
        .iter()
        .map(|&(method, layer, v)| FlopsEntry {
            method,
            layer,
            variant: Variant::Primary,
            flops: convert(v),
            per_scale: is_per_scale(method, reference_kind(layer)),
        })
        .collect();
    FlopsReport::new(entries, scale_count)
}

/// Cost inputs of the reference 32x32 network (layers 1, 4 and 7) on a
/// `width x height` image: feature maps halve per 2x2 pool, the patch model
/// sides are 30 and 16, kernels are 5x5 and the classifier reads 1024 values.
pub fn reference_inputs<T: Num + Copy>(width: T, height: T, sparsity: T, convert: impl Fn(i64) -> T) -> Vec<CostLayer<T>> {
    let a = width * height;
    let c = |v| convert(v);
    let layer = |layer, kind, map_pixels, in_maps, patch_side, extent, fragments| CostLayer {
        layer,
        kind,
        input: LayerCostInput {
            image_pixels: a,
            map_pixels,
            sparsity,
            in_maps,
            out_maps: c(16),
            patch_side,
            extent,
            fragments,
        },
    };
    vec![
        layer(1, LayerKind::Conv, a, c(1), c(30), c(25), c(1)),
        layer(4, LayerKind::Conv, a / c(4), c(16), c(16), c(25), c(4)),
        layer(7, LayerKind::Fc, a / c(16), c(16), c(1), c(1024), c(16)),
    ]
}

/// Formula report for the reference network plus the published value of
/// every cell the formulas cannot reproduce.
pub fn reference_report(width: usize, height: usize, scale_count: usize, sparsity: f64) -> FlopsReport<f64> {
    let inputs = reference_inputs(width as f64, height as f64, sparsity, |v| v as f64);
    let mut report = full_report(&inputs, scale_count as f64, LogArgument::NonzeroPixels);
    for &(method, layer) in &INCONSISTENT_CELLS {
        let value = PUBLISHED_TABLE.iter().find(|&&(m, l, _)| m == method && l == layer).map(|&(_, _, v)| v);
        if let Some(v) = value {
            report.entries.push(FlopsEntry {
                method,
                layer,
                variant: Variant::Published,
                flops: v as f64 * 1e4,
                per_scale: is_per_scale(method, reference_kind(layer)),
            });
        }
    }
    report
}

/// Cost inputs derived from a network description: every conv layer and the
/// classifier, with feature-map pixels following the pooling layers.
pub fn network_inputs(net: &crate::layers::NetworkSpec, width: usize, height: usize, sparsity: f64) -> Vec<CostLayer<f64>> {
    use crate::layers::LayerSpec;
    let a = (width * height) as f64;
    let mut map_pixels = a;
    let mut fragments = 1.0;
    let mut side = net.window_side;
    let mut channels = net.input_channels as f64;
    let mut out = Vec::new();
    for (idx, layer) in net.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv { filters, size, padding } => {
                side = padding.output_len(side, *size).unwrap_or(0);
                out.push(CostLayer {
                    layer: idx + 1,
                    kind: LayerKind::Conv,
                    input: LayerCostInput {
                        image_pixels: a,
                        map_pixels,
                        sparsity,
                        in_maps: channels,
                        out_maps: *filters as f64,
                        patch_side: side as f64,
                        extent: (size * size) as f64,
                        fragments,
                    },
                });
                channels = *filters as f64;
            }
            LayerSpec::Pool { size } => {
                map_pixels /= (size * size) as f64;
                fragments *= (size * size) as f64;
                side /= size;
            }
            LayerSpec::Fc { outputs } => out.push(CostLayer {
                layer: idx + 1,
                kind: LayerKind::Fc,
                input: LayerCostInput {
                    image_pixels: a,
                    map_pixels,
                    sparsity,
                    in_maps: channels,
                    out_maps: *outputs as f64,
                    patch_side: 1.0,
                    extent: (side * side) as f64 * channels,
                    fragments,
                },
            }),
            LayerSpec::Lcn(_) | LayerSpec::Softmax => {}
        }
    }
    out
}
