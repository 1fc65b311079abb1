//! Sliding-window detection performed directly on the fragment set.
//!
//! The classifier is reshaped into a kernel bank and correlated with each
//! (optionally resized) fragment, giving one probability map per fragment and
//! scale. Connected super-threshold regions become candidates, which are
//! mapped back to image boxes, confirmed by the remaining ensemble members,
//! refined by the box regressor and finally merged with NMS.

use std::cmp::Ordering;
use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dcf::{extract_dcfs, Fragment, FragmentGeometry, FragmentSet};
use crate::error::{DcfError, Result};
use crate::layers::{fc_as_conv, fc_forward, softmax, ConvBackend, FcWeights, Network};
use crate::scalar::Scalar;
use crate::tensor::{nn_resize, KernelBank, Padding, Tensor};

/// Class-probability map of one fragment at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap<T> {
    /// `None` when the (resized) fragment is smaller than the classifier
    /// window.
    pub scores: Option<Tensor<T>>,
    pub scale: f64,
    pub geometry: FragmentGeometry,
}

impl<T: Scalar> ResponseMap<T> {
    pub fn is_empty(&self) -> bool {
        self.scores.is_none()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.scores.as_ref().map_or((0, 0), |s| (s.height(), s.width()))
    }
}

/// Probability of `class_index` at every classifier-window position of
/// `features`.
fn probability_map<T: Scalar>(
    features: &Tensor<T>,
    bank: &KernelBank<T>,
    class_index: usize,
    backend: ConvBackend,
) -> Result<Option<Tensor<T>>> {
    if class_index >= bank.count() {
        return Err(DcfError::InvalidArgument(format!(
            "class index {class_index} out of range for {} classes",
            bank.count()
        )));
    }
    if features.height() < bank.size() || features.width() < bank.size() {
        return Ok(None);
    }
    let logits = backend.conv(features, bank, Padding::Valid)?;
    let (h, w, _) = logits.shape();
    let mut probs = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            probs.push(softmax(logits.pixel(r, c))[class_index]);
        }
    }
    Ok(Some(Tensor::from_raw(h, w, 1, probs)))
}

/// Scores every classifier-window position of one fragment.
pub fn score_fragment<T: Scalar>(
    fragment: &Fragment<T>,
    fc_bank: &KernelBank<T>,
    class_index: usize,
    backend: ConvBackend,
) -> Result<ResponseMap<T>> {
    Ok(ResponseMap {
        scores: probability_map(&fragment.features, fc_bank, class_index, backend)?,
        scale: 1.0,
        geometry: fragment.geometry.clone(),
    })
}

/// Spatial size of a fragment resized by `scale`.
pub fn scaled_dims(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let f = |x: usize| ((x as f64 * scale).round() as usize).max(1);
    (f(h), f(w))
}

/// A fragment resized by `scale` (borrowed unchanged at scale 1).
pub fn resized_fragment<T: Scalar>(features: &Tensor<T>, scale: f64) -> Result<std::borrow::Cow<'_, Tensor<T>>> {
    let (rh, rw) = scaled_dims(features.height(), features.width(), scale);
    if (rh, rw) == (features.height(), features.width()) {
        Ok(std::borrow::Cow::Borrowed(features))
    } else {
        nn_resize(features, rh, rw).map(std::borrow::Cow::Owned)
    }
}

/// Response maps over all fragments and scales, fragment-major within each
/// scale. Maps whose resized fragment is smaller than the classifier window
/// are kept as empty maps and listed in `skipped`.
#[derive(Clone, Debug)]
pub struct Responses<T> {
    pub maps: Vec<ResponseMap<T>>,
    pub skipped: Vec<usize>,
}

pub fn multiscale_responses<T: Scalar>(
    dcfs: &FragmentSet<T>,
    scales: &[f64],
    fc_bank: &KernelBank<T>,
    class_index: usize,
    backend: ConvBackend,
) -> Result<Responses<T>> {
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(DcfError::InvalidArgument("scales must be a non-empty list of positive numbers".into()));
    }
    let jobs: Vec<(f64, &Fragment<T>)> =
        scales.iter().flat_map(|&s| dcfs.fragments().iter().map(move |f| (s, f))).collect();
    let maps = jobs
        .into_par_iter()
        .map(|(scale, frag)| {
            let resized = resized_fragment(&frag.features, scale)?;
            Ok(ResponseMap {
                scores: probability_map(&resized, fc_bank, class_index, backend)?,
                scale,
                geometry: frag.geometry.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped = maps.iter().enumerate().filter(|(_, m)| m.is_empty()).map(|(i, _)| i).collect();
    Ok(Responses { maps, skipped })
}

/// One connected super-threshold region of a response map.
#[derive(Clone, Debug, PartialEq)]
pub struct Peak {
    /// Centroid cell, rounded to the nearest cell.
    pub row: usize,
    pub col: usize,
    /// Largest score in the region.
    pub score: f64,
    pub cells: Vec<(usize, usize)>,
}

/// 8-connected regions of cells scoring above `tau`, in row-major order of
/// their first cell.
pub fn peaks<T: Scalar>(map: &ResponseMap<T>, tau: f64) -> Vec<Peak> {
    let Some(scores) = &map.scores else { return Vec::new() };
    let (h, w, _) = scores.shape();
    let above = |r: usize, c: usize| scores.at(r, c, 0).as_f64() > tau;
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if seen[r0 * w + c0] || !above(r0, c0) {
                continue;
            }
            seen[r0 * w + c0] = true;
            queue.push_back((r0, c0));
            let mut cells = Vec::new();
            while let Some((r, c)) = queue.pop_front() {
                cells.push((r, c));
                for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                    for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                        if !seen[nr * w + nc] && above(nr, nc) {
                            seen[nr * w + nc] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            let n = cells.len() as f64;
            let mean_r = cells.iter().map(|&(r, _)| r as f64).sum::<f64>() / n;
            let mean_c = cells.iter().map(|&(_, c)| c as f64).sum::<f64>() / n;
            let score = cells.iter().map(|&(r, c)| scores.at(r, c, 0).as_f64()).fold(f64::NEG_INFINITY, f64::max);
            out.push(Peak { row: mean_r.round() as usize, col: mean_c.round() as usize, score, cells });
        }
    }
    out
}

/// An axis-aligned box in source-image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub scale: f64,
}

impl Detection {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &Detection) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }

    /// Clips to `[0, width] x [0, height]`, keeping at least one pixel.
    pub fn clipped(mut self, height: usize, width: usize) -> Self {
        let (hh, ww) = (height as f64, width as f64);
        let x0 = self.x.clamp(0.0, ww - 1.0);
        let y0 = self.y.clamp(0.0, hh - 1.0);
        let x1 = (self.x + self.w).clamp(x0 + 1.0, ww);
        let y1 = (self.y + self.h).clamp(y0 + 1.0, hh);
        self.x = x0;
        self.y = y0;
        self.w = x1 - x0;
        self.h = y1 - y0;
        self
    }
}

/// Maps a response-map cell `(row, col)` at `scale` back to an image box.
pub fn backproject(position: (usize, usize), geometry: &FragmentGeometry, scale: f64, image_dims: (usize, usize)) -> Detection {
    let (row, col) = position;
    let stride = geometry.stride as f64;
    Detection {
        x: stride * col as f64 / scale + geometry.offset.1 as f64,
        y: stride * row as f64 / scale + geometry.offset.0 as f64,
        w: geometry.window_side as f64 / scale,
        h: geometry.window_side as f64 / scale,
        score: 0.0,
        scale,
    }
    .clipped(image_dims.0, image_dims.1)
}

fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
        .then(a.scale.total_cmp(&b.scale))
}

/// Greedy non-maximum suppression; survivors come out best-first.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank);
    let mut keep: Vec<Detection> = Vec::new();
    for d in sorted {
        if keep.iter().all(|k| k.iou(&d) <= iou_threshold) {
            keep.push(d);
        }
    }
    keep
}

/// Number of independent models needed to push an error bound `r` down to
/// `h`: `ceil(ln h / ln r)`.
pub fn ensemble_size(r: f64, h: f64) -> Result<usize> {
    if !(r > 0.0 && r < 1.0) || !(h > 0.0 && h < 1.0) || h > r {
        return Err(DcfError::InvalidArgument(format!(
            "ensemble sizing needs 0 < H <= R < 1, got R = {r}, H = {h}"
        )));
    }
    let ratio = h.ln() / r.ln();
    // Absorb the last-ulp error of the two logarithms so exact powers of R
    // do not round up.
    Ok((ratio - 1e-9 * ratio).ceil().max(1.0) as usize)
}

/// Conjunction rule: a candidate survives only if every model scores it
/// above `threshold`; the combined score is the minimum.
pub fn ensemble_combine(per_model: &[Vec<f64>], threshold: f64) -> Result<Vec<Option<f64>>> {
    let Some(first) = per_model.first() else {
        return Err(DcfError::InvalidArgument("ensemble needs at least one model".into()));
    };
    if per_model.iter().any(|s| s.len() != first.len()) {
        return Err(DcfError::InvalidArgument("models scored different candidate sets".into()));
    }
    Ok((0..first.len())
        .map(|i| {
            let min = per_model.iter().map(|s| s[i]).fold(f64::INFINITY, f64::min);
            (min > threshold).then_some(min)
        })
        .collect())
}

/// Two-stage box regressor: hidden fully-connected layer with ReLU, then
/// four linear outputs `(dx, dy, dw, dh)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorWeights<T> {
    hidden: FcWeights<T>,
    output: FcWeights<T>,
    window_side: usize,
}

impl<T: Scalar> RegressorWeights<T> {
    pub const HIDDEN: usize = 100;

    pub fn new(hidden: FcWeights<T>, output: FcWeights<T>, window_side: usize) -> Result<Self> {
        if output.out_count() != 4 || output.in_shape() != (1, 1, hidden.out_count()) {
            return Err(DcfError::Geometry(format!(
                "regressor output stage must map 1x1x{} to 4 values, got {:?} -> {}",
                hidden.out_count(),
                output.in_shape(),
                output.out_count()
            )));
        }
        Ok(Self { hidden, output, window_side })
    }

    pub fn zeros(feature_shape: (usize, usize, usize), window_side: usize) -> Self {
        let (h, w, c) = feature_shape;
        Self::new(FcWeights::zeros(Self::HIDDEN, h, w, c), FcWeights::zeros(4, 1, 1, Self::HIDDEN), window_side)
            .expect("consistent shapes")
    }

    pub fn random(feature_shape: (usize, usize, usize), window_side: usize, rng: &mut impl Rng) -> Self {
        let (h, w, c) = feature_shape;
        let fan_in = h * w * c;
        let mut sample = |n: usize, std: f64| -> Vec<T> {
            let d = Normal::new(0.0, std).expect("finite");
            (0..n).map(|_| T::of(d.sample(rng))).collect()
        };
        let hidden = FcWeights::new(
            Self::HIDDEN,
            h,
            w,
            c,
            sample(Self::HIDDEN * fan_in, (2.0 / fan_in as f64).sqrt()),
            vec![T::zero(); Self::HIDDEN],
        )
        .expect("consistent shapes");
        let output = FcWeights::new(4, 1, 1, Self::HIDDEN, sample(4 * Self::HIDDEN, 0.01), vec![T::zero(); 4])
            .expect("consistent shapes");
        Self { hidden, output, window_side }
    }

    pub fn hidden(&self) -> &FcWeights<T> {
        &self.hidden
    }

    pub fn output(&self) -> &FcWeights<T> {
        &self.output
    }

    pub fn window_side(&self) -> usize {
        self.window_side
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.hidden.in_shape()
    }

    /// Hidden activations and the four deltas.
    pub fn forward(&self, features: &Tensor<T>) -> Result<(Vec<T>, [T; 4])> {
        let hidden: Vec<T> = fc_forward(features, &self.hidden)?.into_iter().map(|v| v.max(T::zero())).collect();
        let h = Tensor::from_raw(1, 1, hidden.len(), hidden);
        let out = fc_forward(&h, &self.output)?;
        Ok((h.into_vec(), [out[0], out[1], out[2], out[3]]))
    }

    pub fn deltas(&self, features: &Tensor<T>) -> Result<[T; 4]> {
        self.forward(features).map(|(_, d)| d)
    }
}

/// Applies `(dx, dy, dw, dh)`: shifts in units of box size, size changes in
/// model-window pixels rescaled to the proposal's size.
pub fn apply_deltas(proposal: &Detection, deltas: [f64; 4], window_side: usize) -> Detection {
    let [dx, dy, dw, dh] = deltas;
    let side = window_side as f64;
    Detection {
        x: proposal.x + dx * proposal.w,
        y: proposal.y + dy * proposal.h,
        w: (proposal.w + dw * proposal.w / side).max(1.0),
        h: (proposal.h + dh * proposal.h / side).max(1.0),
        ..*proposal
    }
}

/// Inverse of [`apply_deltas`]: the deltas that turn `proposal` into `target`.
pub fn target_deltas(proposal: &Detection, target: &Detection, window_side: usize) -> [f64; 4] {
    let side = window_side as f64;
    [
        (target.x - proposal.x) / proposal.w,
        (target.y - proposal.y) / proposal.h,
        (target.w - proposal.w) * side / proposal.w,
        (target.h - proposal.h) * side / proposal.h,
    ]
}

/// Refines one proposal from the classifier-window features it was scored on.
pub fn regress_box<T: Scalar>(
    window_features: &Tensor<T>,
    reg: &RegressorWeights<T>,
    proposal: &Detection,
    image_dims: (usize, usize),
) -> Result<Detection> {
    if window_features.shape() != reg.feature_shape() {
        return Err(DcfError::Geometry(format!(
            "regressor expects {:?} features, got {:?}",
            reg.feature_shape(),
            window_features.shape()
        )));
    }
    let d = reg.deltas(window_features)?;
    Ok(apply_deltas(proposal, d.map(Scalar::as_f64), reg.window_side).clipped(image_dims.0, image_dims.1))
}

/// Detection parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    /// Fragment resize factors; a factor `s` finds objects of side
    /// `window / s`.
    pub scales: Vec<f64>,
    /// Probability threshold of the object class.
    pub tau: f64,
    pub iou_threshold: f64,
    pub class_index: usize,
    pub backend: ConvBackend,
}

impl DetectConfig {
    /// 1.25^1 down to 1.25^-3.
    pub fn default_scales() -> Vec<f64> {
        (-1..=3).map(|e| 1.25f64.powi(-e)).collect()
    }
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            scales: Self::default_scales(),
            tau: 0.5,
            iou_threshold: 0.3,
            class_index: 1,
            backend: ConvBackend::Fft,
        }
    }
}

/// Checks that every model shares the first model's detection geometry.
pub fn check_ensemble<T: Scalar>(models: &[Network<T>]) -> Result<()> {
    let first = models.first().ok_or_else(|| DcfError::InvalidArgument("at least one model is required".into()))?;
    for m in &models[1..] {
        if m.window_side() != first.window_side()
            || m.pool_sizes() != first.pool_sizes()
            || m.fc().in_shape() != first.fc().in_shape()
            || m.fc().out_count() != first.fc().out_count()
            || m.input_channels() != first.input_channels()
        {
            return Err(DcfError::Geometry("ensemble members have different architectures".into()));
        }
    }
    Ok(())
}

/// Everything `detect` computes for one model.
pub struct ModelResponses<T> {
    pub dcfs: FragmentSet<T>,
    pub responses: Responses<T>,
    pub bank: KernelBank<T>,
}

pub fn model_responses<T: Scalar>(image: &Tensor<T>, net: &Network<T>, config: &DetectConfig) -> Result<ModelResponses<T>> {
    let dcfs = extract_dcfs(image, net, config.backend)?;
    let bank = fc_as_conv(net.fc())?;
    let responses = multiscale_responses(&dcfs, &config.scales, &bank, config.class_index, config.backend)?;
    Ok(ModelResponses { dcfs, responses, bank })
}

/// Classifier-window features at a response cell of map `map_index`.
pub fn window_features<T: Scalar>(mr: &ModelResponses<T>, map_index: usize, row: usize, col: usize) -> Result<Tensor<T>> {
    let map = &mr.responses.maps[map_index];
    let frag = mr
        .dcfs
        .get(&map.geometry.offset_path)
        .ok_or_else(|| DcfError::Geometry("response map refers to an unknown fragment".into()))?;
    let resized = resized_fragment(&frag.features, map.scale)?;
    let k = mr.bank.size();
    resized.crop(row, col, k, k)
}

/// A candidate before NMS, with the response cell it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub map_index: usize,
    pub row: usize,
    pub col: usize,
    pub detection: Detection,
}

/// Candidates of the first model confirmed by every other model, before
/// regression and NMS.
pub fn ensemble_candidates<T: Scalar>(per_model: &[ModelResponses<T>], image_dims: (usize, usize), tau: f64) -> Result<Vec<Candidate>> {
    let lead = per_model
        .first()
        .ok_or_else(|| DcfError::InvalidArgument("at least one model is required".into()))?;
    let mut found = Vec::new();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); per_model.len()];
    for (i, map) in lead.responses.maps.iter().enumerate() {
        for peak in peaks(map, tau) {
            for (m, mr) in per_model.iter().enumerate() {
                let s = if m == 0 {
                    peak.score
                } else {
                    let other = mr.responses.maps[i]
                        .scores
                        .as_ref()
                        .ok_or_else(|| DcfError::Geometry("ensemble response maps disagree".into()))?;
                    peak.cells.iter().map(|&(r, c)| other.at(r, c, 0).as_f64()).fold(f64::NEG_INFINITY, f64::max)
                };
                scores[m].push(s);
            }
            found.push((i, peak));
        }
    }
    let combined = ensemble_combine(&scores, tau)?;
    Ok(found
        .into_iter()
        .zip(combined)
        .filter_map(|((i, peak), score)| {
            let score = score?;
            let map = &lead.responses.maps[i];
            let mut det = backproject((peak.row, peak.col), &map.geometry, map.scale, image_dims);
            det.score = score;
            Some(Candidate { map_index: i, row: peak.row, col: peak.col, detection: det })
        })
        .collect())
}

/// Full pipeline: fragments, multi-scale responses, peaks, backprojection,
/// ensemble confirmation, box regression, NMS. Output is best-first.
pub fn detect<T: Scalar>(
    image: &Tensor<T>,
    models: &[Network<T>],
    regressor: Option<&RegressorWeights<T>>,
    config: &DetectConfig,
) -> Result<Vec<Detection>> {
    check_ensemble(models)?;
    let per_model = models
        .iter()
        .map(|m| model_responses(image, m, config))
        .collect::<Result<Vec<_>>>()?;
    let dims = (image.height(), image.width());
    let mut dets = Vec::new();
    for cand in ensemble_candidates(&per_model, dims, config.tau)? {
        let det = match regressor {
            Some(reg) => {
                let feats = window_features(&per_model[0], cand.map_index, cand.row, cand.col)?;
                regress_box(&feats, reg, &cand.detection, dims)?
            }
            None => cand.detection,
        };
        dets.push(det);
    }
    Ok(nms(&dets, config.iou_threshold))
}

/// Max-merged probability heat map in image coordinates: every response
/// cell writes its score at the centre of its backprojected box.
pub fn response_heatmap<T: Scalar>(responses: &Responses<T>, image_dims: (usize, usize)) -> Tensor<f64> {
    let (h, w) = image_dims;
    let mut heat = Tensor::<f64>::zeros(h, w, 1);
    for map in &responses.maps {
        let Some(scores) = &map.scores else { continue };
        for r in 0..scores.height() {
            for c in 0..scores.width() {
                let b = backproject((r, c), &map.geometry, map.scale, image_dims);
                let cy = ((b.y + b.h / 2.0) as usize).min(h - 1);
                let cx = ((b.x + b.w / 2.0) as usize).min(w - 1);
                let v = scores.at(r, c, 0).as_f64();
                if v > heat.at(cy, cx, 0) {
                    heat.set(cy, cx, 0, v);
                }
            }
        }
    }
    heat
}
