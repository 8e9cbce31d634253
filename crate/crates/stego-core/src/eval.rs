//! The evaluation suite: reconstruction metrics, hallucination rates,
//! distribution distances, mask quality, and the steganography probe.
//!
//! Every metric has a deliberately simple definition so that a brute-force
//! scalar loop can serve as an oracle in the tests. Aggregations over a
//! test set average per-image values.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::autograd::Tape;
use crate::cycle::{backward_cycle, consistency_mask, draw_noise, CycleMode};
use crate::domain::{ImageTensor, UnmatchabilityMask};
use crate::networks::{lift, NetworkSet};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least {need} images, got {have}")]
    TooFewImages { need: usize, have: usize },
    #[error("threshold must be positive, got {0}")]
    BadSigma(f64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("detector: {0}")]
    Detector(String),
}

fn check_paired(preds: &[Array3<u8>], targets: &[Array3<u8>]) -> Result<(), EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty("prediction set"));
    }
    if preds.len() != targets.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    for (k, (p, t)) in preds.iter().zip(targets).enumerate() {
        if p.dim() != t.dim() {
            return Err(EvalError::ShapeMismatch(format!(
                "pair {k}: {:?} vs {:?}",
                p.dim(),
                t.dim()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reconstruction metrics on 8-bit images.
// ---------------------------------------------------------------------------

/// Root mean square error of one image pair, in 0 to 255 units.
pub fn rmse_pair(pred: &ArrayView3<u8>, target: &ArrayView3<u8>) -> Result<f64, EvalError> {
    if pred.dim() != target.dim() {
        return Err(EvalError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let sum_sq: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok((sum_sq / pred.len() as f64).sqrt())
}

/// Per-image RMSE averaged over the set.
pub fn rmse(preds: &[Array3<u8>], targets: &[Array3<u8>]) -> Result<f64, EvalError> {
    check_paired(preds, targets)?;
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| rmse_pair(&p.view(), &t.view()))
        .sum::<Result<f64, _>>()?;
    Ok(total / preds.len() as f64)
}

/// Percentage of pixels whose every channel deviates by strictly less than
/// `sigma`, averaged per image over the set.
pub fn accuracy_at(
    preds: &[Array3<u8>],
    targets: &[Array3<u8>],
    sigma: f64,
) -> Result<f64, EvalError> {
    if sigma <= 0.0 {
        return Err(EvalError::BadSigma(sigma));
    }
    check_paired(preds, targets)?;
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        let (c, h, w) = p.dim();
        let mut correct = 0usize;
        for i in 0..h {
            for j in 0..w {
                let ok = (0..c)
                    .all(|ch| (p[[ch, i, j]] as f64 - t[[ch, i, j]] as f64).abs() < sigma);
                if ok {
                    correct += 1;
                }
            }
        }
        total += correct as f64 / (h * w) as f64;
    }
    Ok(100.0 * total / preds.len() as f64)
}

// ---------------------------------------------------------------------------
// Hallucination rates.
// ---------------------------------------------------------------------------

/// Default minimum component area for an instance-level false positive.
pub const DEFAULT_MIN_INSTANCE_PX: usize = 5;

/// False positive rates of a generated set under a pixel detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FprReport {
    /// Mean flagged-pixel fraction per image, times ten thousand.
    pub p_fpr: f64,
    /// Percentage of images with a flagged component of at least
    /// `min_instance_px` pixels (8-connectivity).
    pub i_fpr: f64,
}

/// Area of the largest 8-connected true component.
pub fn largest_component_area(mask: &ArrayView2<bool>) -> usize {
    let (h, w) = mask.dim();
    let mut visited = Array2::from_elem((h, w), false);
    let mut best = 0;
    let mut stack = Vec::new();
    for si in 0..h {
        for sj in 0..w {
            if !mask[[si, sj]] || visited[[si, sj]] {
                continue;
            }
            let mut area = 0;
            visited[[si, sj]] = true;
            stack.push((si, sj));
            while let Some((i, j)) = stack.pop() {
                area += 1;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        if mask[[ni, nj]] && !visited[[ni, nj]] {
                            visited[[ni, nj]] = true;
                            stack.push((ni, nj));
                        }
                    }
                }
            }
            best = best.max(area);
        }
    }
    best
}

/// Run `detector` over every image and aggregate pixel- and instance-level
/// false positive rates.
pub fn false_positive_rates<D>(
    images: &[Array3<u8>],
    detector: D,
    min_instance_px: usize,
) -> Result<FprReport, EvalError>
where
    D: Fn(&ArrayView3<u8>) -> Result<Array2<bool>, String>,
{
    if images.is_empty() {
        return Err(EvalError::Empty("image set"));
    }
    let mut fraction_sum = 0.0;
    let mut instance_hits = 0usize;
    for img in images {
        let mask = detector(&img.view()).map_err(EvalError::Detector)?;
        let flagged = mask.iter().filter(|&&b| b).count();
        fraction_sum += flagged as f64 / mask.len() as f64;
        if flagged > 0 && largest_component_area(&mask.view()) >= min_instance_px {
            instance_hits += 1;
        }
    }
    let n = images.len() as f64;
    Ok(FprReport {
        p_fpr: 1e4 * fraction_sum / n,
        i_fpr: 100.0 * instance_hits as f64 / n,
    })
}

// ---------------------------------------------------------------------------
// Distribution distances.
// ---------------------------------------------------------------------------

/// Maps an image to a fixed-length feature vector.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn features(&self, img: &ArrayView3<u8>) -> Vec<f64>;
}

/// Small frozen random-convolution embedder. Two stride-2 valid
/// convolutions with leaky rectification, globally averaged per channel,
/// prefixed by the raw per-channel image means. The weights depend only on
/// the seed, so distances are comparable across runs and models.
pub struct DeskEmbedder {
    in_channels: usize,
    w1: Vec<f64>, // [C1, in, 3, 3]
    w2: Vec<f64>, // [C2, C1, 3, 3]
}

const EMB_C1: usize = 12;
const EMB_C2: usize = 24;

impl DeskEmbedder {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| {
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid stddev");
            (0..n).map(|_| dist.sample(&mut rng)).collect::<Vec<f64>>()
        };
        let w1 = draw(EMB_C1 * in_channels * 9, in_channels * 9);
        let w2 = draw(EMB_C2 * EMB_C1 * 9, EMB_C1 * 9);
        DeskEmbedder { in_channels, w1, w2 }
    }
}

fn conv3x3_s2_lrelu(input: &[Array2<f64>], weights: &[f64], out_channels: usize) -> Vec<Array2<f64>> {
    let in_channels = input.len();
    let (h, w) = input[0].dim();
    let (oh, ow) = ((h - 3) / 2 + 1, (w - 3) / 2 + 1);
    let mut out = Vec::with_capacity(out_channels);
    for oc in 0..out_channels {
        let mut plane = Array2::zeros((oh, ow));
        for ic in 0..in_channels {
            let base = (oc * in_channels + ic) * 9;
            let k = &weights[base..base + 9];
            for i in 0..oh {
                for j in 0..ow {
                    let (i0, j0) = (2 * i, 2 * j);
                    let mut acc = 0.0;
                    for (t, kv) in k.iter().enumerate() {
                        acc += kv * input[ic][[i0 + t / 3, j0 + t % 3]];
                    }
                    plane[[i, j]] += acc;
                }
            }
        }
        plane.mapv_inplace(|v| if v > 0.0 { v } else { 0.2 * v });
        out.push(plane);
    }
    out
}

impl FeatureExtractor for DeskEmbedder {
    fn dim(&self) -> usize {
        self.in_channels + EMB_C2
    }

    fn features(&self, img: &ArrayView3<u8>) -> Vec<f64> {
        let (c, h, w) = img.dim();
        assert_eq!(c, self.in_channels, "embedder built for {} channels", self.in_channels);
        assert!(h >= 7 && w >= 7, "image too small to embed");
        let planes: Vec<Array2<f64>> = (0..c)
            .map(|ch| {
                Array2::from_shape_fn((h, w), |(i, j)| img[[ch, i, j]] as f64 / 127.5 - 1.0)
            })
            .collect();
        let mut feats: Vec<f64> = planes.iter().map(|p| p.mean().unwrap_or(0.0)).collect();
        let l1 = conv3x3_s2_lrelu(&planes, &self.w1, EMB_C1);
        let l2 = conv3x3_s2_lrelu(&l1, &self.w2, EMB_C2);
        feats.extend(l2.iter().map(|p| p.mean().unwrap_or(0.0)));
        feats
    }
}

/// Diagonal jitter added to covariance matrices before the matrix square
/// root, guarding degenerate fits.
pub const COV_JITTER: f64 = 1e-12;

fn gaussian_fit(features: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let d = features[0].len();
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

/// Symmetric PSD square root via eigendecomposition (negative eigenvalues
/// from round-off are clamped to zero).
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| if v > 0.0 { v.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, EvalError> {
    for set in [a, b] {
        if set.len() < 2 {
            return Err(EvalError::TooFewImages { need: 2, have: set.len() });
        }
    }
    let d = a[0].len();
    if b[0].len() != d || a.iter().chain(b).any(|f| f.len() != d) {
        return Err(EvalError::ShapeMismatch("feature dimensions differ".into()));
    }
    let (mu1, mut s1) = gaussian_fit(a);
    let (mu2, mut s2) = gaussian_fit(b);
    for i in 0..d {
        s1[(i, i)] += COV_JITTER;
        s2[(i, i)] += COV_JITTER;
    }
    let diff = &mu1 - &mu2;
    let s1h = sqrt_psd(&s1);
    let inner = &s1h * &s2 * &s1h;
    let tr_sqrt = sqrt_psd(&inner).trace();
    Ok(diff.norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt)
}

/// Polynomial kernel of the kernel distance: `(x·y / d + 1)^3`.
fn poly3(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared maximum mean discrepancy of two equal-size samples.
fn mmd2_unbiased(xs: &[&Vec<f64>], ys: &[&Vec<f64>]) -> f64 {
    let m = xs.len() as f64;
    let n = ys.len() as f64;
    let mut kxx = 0.0;
    for i in 0..xs.len() {
        for j in 0..xs.len() {
            if i != j {
                kxx += poly3(xs[i], xs[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..ys.len() {
        for j in 0..ys.len() {
            if i != j {
                kyy += poly3(ys[i], ys[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for x in xs {
        for y in ys {
            kxy += poly3(x, y);
        }
    }
    kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n)
}

/// Number of random subsets the kernel distance averages over.
pub const KID_SUBSETS: usize = 10;
/// Subset size cap.
pub const KID_SUBSET_SIZE: usize = 100;

/// Kernel distance (unbiased, degree-3 polynomial kernel) scaled by 1000,
/// averaged over seeded random subsets.
pub fn kid_from_features(a: &[Vec<f64>], b: &[Vec<f64>], seed: u64) -> Result<f64, EvalError> {
    for set in [a, b] {
        if set.len() < 2 {
            return Err(EvalError::TooFewImages { need: 2, have: set.len() });
        }
    }
    let m = KID_SUBSET_SIZE.min(a.len()).min(b.len());
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..KID_SUBSETS {
        let mut ia: Vec<usize> = (0..a.len()).collect();
        let mut ib: Vec<usize> = (0..b.len()).collect();
        ia.shuffle(&mut rng);
        ib.shuffle(&mut rng);
        let xs: Vec<&Vec<f64>> = ia[..m].iter().map(|&i| &a[i]).collect();
        let ys: Vec<&Vec<f64>> = ib[..m].iter().map(|&i| &b[i]).collect();
        total += mmd2_unbiased(&xs, &ys);
    }
    Ok(1000.0 * total / KID_SUBSETS as f64)
}

/// Both distribution distances of two image sets under one extractor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidKid {
    pub fid: f64,
    pub kid_x1000: f64,
}

pub fn fid_kid(
    real: &[Array3<u8>],
    fake: &[Array3<u8>],
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<FidKid, EvalError> {
    for set in [real, fake] {
        if set.len() < 2 {
            return Err(EvalError::TooFewImages { need: 2, have: set.len() });
        }
    }
    let fa: Vec<Vec<f64>> = real.iter().map(|i| extractor.features(&i.view())).collect();
    let fb: Vec<Vec<f64>> = fake.iter().map(|i| extractor.features(&i.view())).collect();
    Ok(FidKid {
        fid: fid_from_features(&fa, &fb)?,
        kid_x1000: kid_from_features(&fa, &fb, seed)?,
    })
}

// ---------------------------------------------------------------------------
// Mask quality.
// ---------------------------------------------------------------------------

/// IoU, precision, and recall of a predicted unmatchable footprint, in
/// percent. A component is `None` when its denominator is empty (an empty
/// prediction has no precision; an empty ground truth no recall).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskQuality {
    pub iou: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Compare a soft predicted footprint (binarized strictly above 0.5)
/// against a boolean ground truth.
pub fn mask_quality(pred: &ArrayView2<f64>, gt: &ArrayView2<bool>) -> Result<MaskQuality, EvalError> {
    if pred.dim() != gt.dim() {
        return Err(EvalError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (p, &g) in pred.iter().zip(gt.iter()) {
        let pb = *p > 0.5;
        match (pb, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    let union = tp + fp + fne;
    Ok(MaskQuality {
        iou: if union == 0 { 100.0 } else { 100.0 * tp as f64 / union as f64 },
        precision: if tp + fp == 0 {
            if union == 0 { Some(100.0) } else { None }
        } else {
            Some(100.0 * tp as f64 / (tp + fp) as f64)
        },
        recall: if tp + fne == 0 {
            if union == 0 { Some(100.0) } else { None }
        } else {
            Some(100.0 * tp as f64 / (tp + fne) as f64)
        },
    })
}

/// Average the defined components of per-image mask qualities: mean IoU
/// over everything, precision/recall over the images where they exist.
pub fn aggregate_mask_quality(per_image: &[MaskQuality]) -> Result<MaskQuality, EvalError> {
    if per_image.is_empty() {
        return Err(EvalError::Empty("mask quality set"));
    }
    let mean_opt = |vals: Vec<f64>| {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(MaskQuality {
        iou: per_image.iter().map(|q| q.iou).sum::<f64>() / per_image.len() as f64,
        precision: mean_opt(per_image.iter().filter_map(|q| q.precision).collect()),
        recall: mean_opt(per_image.iter().filter_map(|q| q.recall).collect()),
    })
}

/// Per-pixel unmatchable footprint of a predicted mask at image resolution:
/// channel maximum, nearest-neighbor upsampled.
pub fn unmatchable_footprint<S: Scalar>(
    mask: &UnmatchabilityMask<S>,
    target_hw: (usize, usize),
) -> Result<Array2<f64>, EvalError> {
    let consistency = consistency_mask(mask, target_hw)
        .map_err(|e| EvalError::ShapeMismatch(e.to_string()))?;
    let plane = consistency.data.index_axis(Axis(0), 0);
    Ok(plane.mapv(|v| 1.0 - Scalar::to_f64(v)))
}

// ---------------------------------------------------------------------------
// Steganography probe.
// ---------------------------------------------------------------------------

/// Reconstruction sensitivity at one perturbation amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub amplitude: f64,
    /// Mean absolute reconstruction error over ground-truth unmatchable
    /// pixels (normalized units).
    pub unmatchable_error: f64,
    /// Same over all remaining pixels.
    pub matchable_error: f64,
}

/// Perturb the intermediate translation with noise of each amplitude and
/// measure where the reconstruction of `y` degrades. Ground-truth masks
/// mark the unmatchable regions.
pub fn steganography_probe<S: Scalar>(
    nets: &NetworkSet<S>,
    mode: CycleMode,
    ys: &[ImageTensor<S>],
    gt_masks: &[Array2<bool>],
    amplitudes: &[f64],
    seed: u64,
) -> Result<Vec<ProbeRow>, EvalError> {
    if ys.is_empty() {
        return Err(EvalError::Empty("probe image set"));
    }
    if ys.len() != gt_masks.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} images vs {} masks",
            ys.len(),
            gt_masks.len()
        )));
    }
    for (k, (y, m)) in ys.iter().zip(gt_masks).enumerate() {
        let (_, h, w) = y.data.dim();
        if (h, w) != m.dim() {
            return Err(EvalError::ShapeMismatch(format!(
                "pair {k}: image {h}x{w} vs mask {:?}",
                m.dim()
            )));
        }
    }
    if !gt_masks.iter().any(|m| m.iter().any(|&b| b)) {
        return Err(EvalError::Empty("unmatchable region (no mask pixels)"));
    }

    let mut rows = Vec::with_capacity(amplitudes.len());
    for (ai, &amplitude) in amplitudes.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (ai as u64).wrapping_mul(0x9e37_79b9));
        let (mut um_sum, mut um_n) = (0.0, 0usize);
        let (mut ma_sum, mut ma_n) = (0.0, 0usize);
        for (y, mask) in ys.iter().zip(gt_masks) {
            let (c, h, w) = y.data.dim();
            let mut tape = Tape::<S>::new();
            let lifted = lift(&nets.store, &mut tape, None);
            let yv = tape.constant(y.data.clone().insert_axis(Axis(0)).into_dyn());
            let noise =
                draw_noise::<S>(&[1, nets.config.x_channels, h, w], amplitude, &mut rng);
            let bv = backward_cycle(&mut tape, &lifted, nets, yv, mode, noise.as_ref());
            let y_rec = tape.value(bv.y_rec);
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let err = Scalar::to_f64(y_rec[[0, ch, i, j]] - y.data[[ch, i, j]])
                            .abs();
                        if mask[[i, j]] {
                            um_sum += err;
                            um_n += 1;
                        } else {
                            ma_sum += err;
                            ma_n += 1;
                        }
                    }
                }
            }
        }
        rows.push(ProbeRow {
            amplitude,
            unmatchable_error: um_sum / um_n as f64,
            matchable_error: ma_sum / ma_n.max(1) as f64,
        });
    }
    Ok(rows)
}
