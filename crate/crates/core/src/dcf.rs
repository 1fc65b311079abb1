//! Whole-image feature extraction that keeps every pooling offset.
//!
//! Each pooling layer splits every live fragment into `s * s` offspring, one
//! per tile offset, so that every model-window position of the source image
//! is represented at some fragment cell. The fragment's geometry records how
//! a cell maps back to image pixels.

use rayon::prelude::*;

use crate::error::{DcfError, Result};
use crate::layers::{conv_layer_forward, enumerate_offsets, lcn_forward, maxpool_fragment, ConvBackend, Layer, Network};
use crate::scalar::Scalar;
use crate::tensor::{sparsity, Tensor};

/// Pooling offsets, one `(row, col)` pair per pooling layer.
pub type OffsetPath = Vec<(usize, usize)>;

/// Image-space placement of a fragment's cells.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FragmentGeometry {
    pub offset_path: OffsetPath,
    /// Image pixels per fragment cell.
    pub stride: usize,
    /// Image `(row, col)` of cell `(0, 0)`.
    pub offset: (usize, usize),
    /// Side of the model window in image pixels.
    pub window_side: usize,
}

impl FragmentGeometry {
    /// Image `(row, col)` of the window read at fragment cell `(m, n)`.
    pub fn image_position(&self, m: usize, n: usize) -> (usize, usize) {
        (self.stride * m + self.offset.0, self.stride * n + self.offset.1)
    }
}

/// Resolves an offset path through pooling layers of the given sizes.
pub fn fragment_geometry(offset_path: &[(usize, usize)], pool_sizes: &[usize], window_side: usize) -> Result<FragmentGeometry> {
    if offset_path.len() != pool_sizes.len() {
        return Err(DcfError::InvalidArgument(format!(
            "offset path has {} entries for {} pooling layers",
            offset_path.len(),
            pool_sizes.len()
        )));
    }
    let mut stride = 1;
    let mut offset = (0, 0);
    for (&(r, c), &s) in offset_path.iter().zip(pool_sizes) {
        if r >= s || c >= s {
            return Err(DcfError::InvalidArgument(format!("offset ({r},{c}) out of range for pool size {s}")));
        }
        offset.0 += r * stride;
        offset.1 += c * stride;
        stride *= s;
    }
    Ok(FragmentGeometry { offset_path: offset_path.to_vec(), stride, offset, window_side })
}

/// One leaf fragment of the extraction tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragment<T> {
    pub features: Tensor<T>,
    pub geometry: FragmentGeometry,
}

/// Every leaf fragment of one image, ordered by offset path.
#[derive(Clone, Debug, PartialEq)]
pub struct FragmentSet<T> {
    fragments: Vec<Fragment<T>>,
    source_dims: (usize, usize),
}

impl<T: Scalar> FragmentSet<T> {
    pub fn fragments(&self) -> &[Fragment<T>] {
        &self.fragments
    }

    pub fn fragments_mut(&mut self) -> &mut [Fragment<T>] {
        &mut self.fragments
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    /// Source image `(height, width)`.
    pub fn source_dims(&self) -> (usize, usize) {
        self.source_dims
    }

    pub fn get(&self, path: &[(usize, usize)]) -> Option<&Fragment<T>> {
        self.fragments.iter().find(|f| f.geometry.offset_path == path)
    }

    /// Fraction of exactly-zero feature values over all fragments.
    pub fn sparsity(&self) -> f64 {
        let total: usize = self.fragments.iter().map(|f| f.features.len()).sum();
        let zeros: f64 = self.fragments.iter().map(|f| sparsity(&f.features) * f.features.len() as f64).sum();
        zeros / total as f64
    }
}

/// Runs the feature layers of `net` over a whole image, splitting at every
/// pooling layer. Conv layers use the padding stored in `net`.
pub fn extract_dcfs<T: Scalar>(image: &Tensor<T>, net: &Network<T>, backend: ConvBackend) -> Result<FragmentSet<T>> {
    let side = net.window_side();
    if image.height() < side || image.width() < side {
        return Err(DcfError::TooSmall { height: image.height(), width: image.width(), required: side });
    }
    if image.channels() != net.input_channels() {
        return Err(DcfError::ChannelMismatch { input: image.channels(), expected: net.input_channels() });
    }

    let mut live: Vec<(OffsetPath, Tensor<T>)> = vec![(Vec::new(), image.clone())];
    for layer in net.feature_layers() {
        live = match layer {
            Layer::Conv { bank, padding } => live
                .into_par_iter()
                .map(|(path, x)| conv_layer_forward(&x, bank, *padding, backend).map(|y| (path, y)))
                .collect::<Result<_>>()?,
            Layer::Lcn(p) => live.into_par_iter().map(|(path, x)| (path, lcn_forward(&x, p))).collect(),
            Layer::Pool { size } => {
                let offsets = enumerate_offsets(*size);
                live.into_par_iter()
                    .flat_map_iter(|(path, x)| {
                        offsets.iter().map(move |&o| {
                            let mut child = path.clone();
                            child.push(o);
                            maxpool_fragment(&x, *size, o).map(|y| (child, y))
                        })
                    })
                    .collect::<Result<_>>()
                    .map_err(|_| DcfError::TooSmall { height: image.height(), width: image.width(), required: side })?
            }
            Layer::Fc(_) | Layer::Softmax => unreachable!("feature layers end before the classifier"),
        };
    }

    let pools = net.pool_sizes();
    let fragments = live
        .into_iter()
        .map(|(path, features)| {
            fragment_geometry(&path, &pools, side).map(|geometry| Fragment { features, geometry })
        })
        .collect::<Result<_>>()?;
    Ok(FragmentSet { fragments, source_dims: (image.height(), image.width()) })
}
