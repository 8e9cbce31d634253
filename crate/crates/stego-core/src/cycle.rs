//! The two training cycles that route unmatchable latent features around
//! the translation path.
//!
//! Each iteration runs the backward cycle first: the target image is
//! encoded, the mask predictor splits its features into matchable and
//! unmatchable parts, only the matchable part is decoded into the source
//! domain, and the unmatchable part is re-injected (after a small noise
//! perturbation of the decoded image) to reconstruct the target. The
//! forward cycle then reuses that same unmatchable residue when translating
//! the source image, so the generator never has to hide it inside the
//! pixels.

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::domain::{
    ConsistencyMask, Domain, FeatureMap, ImageTensor, TranslationBundle, UnmatchabilityMask,
};
use crate::networks::{lift, Lifted, NetworkSet};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum CycleError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("latent feature spaces disagree: {0}")]
    LatentMismatch(String),
    #[error("consistency mask target {th}x{tw} smaller than mask {h}x{w}")]
    TargetTooSmall { th: usize, tw: usize, h: usize, w: usize },
}

/// Whether the mask/injection machinery is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleMode {
    /// Full model: mask predictor, feature split, noise, re-injection.
    Stego,
    /// Plain cycle-consistency baseline: no masks, no injection, no noise.
    Baseline,
}

/// Split latent features into unmatchable (`m ⊙ z`) and matchable
/// (`(1−m) ⊙ z`) parts.
pub fn disentangle<S: Scalar>(
    z: &FeatureMap<S>,
    m: &UnmatchabilityMask<S>,
) -> Result<(FeatureMap<S>, FeatureMap<S>), CycleError> {
    if z.data.dim() != m.data.dim() {
        return Err(CycleError::ShapeMismatch(format!(
            "feature map {:?} vs mask {:?}",
            z.data.dim(),
            m.data.dim()
        )));
    }
    let unmatch = &z.data * &m.data;
    let matchable = &z.data - &unmatch;
    Ok((FeatureMap { data: unmatch }, FeatureMap { data: matchable }))
}

/// Tape version of [`disentangle`]; `z_match` is computed as `z − z_unmatch`
/// so the two parts sum back to `z` exactly.
pub fn disentangle_on_tape<S: Scalar>(t: &mut Tape<S>, z: Var, m: Var) -> (Var, Var) {
    let unmatch = t.mul(m, z);
    let matchable = t.sub(z, unmatch);
    (unmatch, matchable)
}

/// Add i.i.d. Gaussian noise of the given standard deviation to every
/// element. Amplitude zero returns the input untouched and consumes no
/// randomness. Values are intentionally not clamped back to `[-1, 1]`.
pub fn perturb<S: Scalar>(
    img: &ImageTensor<S>,
    amplitude: f64,
    rng: &mut ChaCha20Rng,
) -> ImageTensor<S> {
    if amplitude == 0.0 {
        return img.clone();
    }
    let dist = Normal::new(0.0, amplitude).expect("valid stddev");
    let data = img.data.mapv(|v| v + S::from_f64(dist.sample(rng)));
    ImageTensor::from_raw(data, img.domain)
}

/// Draw a noise tensor for the tape-level cycles. `None` when amplitude is
/// zero (the perturbation step is skipped entirely).
pub fn draw_noise<S: Scalar>(
    shape: &[usize],
    amplitude: f64,
    rng: &mut ChaCha20Rng,
) -> Option<ArrayD<S>> {
    if amplitude == 0.0 {
        return None;
    }
    let dist = Normal::new(0.0, amplitude).expect("valid stddev");
    Some(ArrayD::from_shape_fn(IxDyn(shape), |_| {
        S::from_f64(dist.sample(rng))
    }))
}

/// Flip and upsample an unmatchability mask into an image-resolution
/// weighting of matchable regions: `1 − channel-max(m)`, nearest-neighbor
/// upsampled to `target_hw`.
pub fn consistency_mask_on_tape<S: Scalar>(
    t: &mut Tape<S>,
    m: Var,
    target_hw: (usize, usize),
) -> Result<Var, CycleError> {
    let shape = t.value(m).shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let (th, tw) = target_hw;
    if th < h || tw < w {
        return Err(CycleError::TargetTooSmall { th, tw, h, w });
    }
    let mmax = t.max_channels(m);
    let flipped = t.affine(mmax, -S::one(), S::one());
    Ok(t.upsample_nearest(flipped, (th, tw)))
}

/// Value-level [`consistency_mask_on_tape`] for single masks.
pub fn consistency_mask<S: Scalar>(
    m: &UnmatchabilityMask<S>,
    target_hw: (usize, usize),
) -> Result<ConsistencyMask<S>, CycleError> {
    let mut t = Tape::new();
    let mv = t.constant(m.data.clone().insert_axis(Axis(0)).into_dyn());
    let i = consistency_mask_on_tape(&mut t, mv, target_hw)?;
    let data = t
        .value(i)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank-4 mask")
        .index_axis_move(Axis(0), 0);
    Ok(ConsistencyMask { data })
}

/// Tape handles produced by the backward cycle.
pub struct BackwardCycleVars {
    pub y: Var,
    pub z_gen: Var,
    pub m_gen: Option<Var>,
    pub z_gen_unmatch: Var,
    pub z_gen_match: Var,
    pub x_gen: Var,
    pub y_rec: Var,
    pub y_rec_clean: Var,
}

/// Tape handles produced by the forward cycle.
pub struct ForwardCycleVars {
    pub x: Var,
    pub y_gen: Var,
    pub y_gen_clean: Var,
    pub z_rec: Var,
    pub m_rec: Option<Var>,
    pub x_rec: Var,
}

/// Both cycles of one iteration.
pub struct CycleVars {
    pub backward: BackwardCycleVars,
    pub forward: ForwardCycleVars,
}

/// Backward cycle: reconstruct `y` through the source domain, routing
/// unmatchable features around the image.
///
/// `noise` is the pre-drawn perturbation added to `x_gen` before re-encoding
/// (`None` skips the addition). In baseline mode the mask machinery is
/// absent: plain decode, plain reconstruction, and `y_rec_clean == y_rec`.
pub fn backward_cycle<S: Scalar>(
    t: &mut Tape<S>,
    l: &Lifted,
    nets: &NetworkSet<S>,
    y: Var,
    mode: CycleMode,
    noise: Option<&ArrayD<S>>,
) -> BackwardCycleVars {
    let z_gen = nets.g_yx.encode(t, l, y);
    match mode {
        CycleMode::Stego => {
            let m_gen = nets.mask_net.forward(t, l, z_gen);
            let (z_gen_unmatch, z_gen_match) = disentangle_on_tape(t, z_gen, m_gen);
            let x_gen = nets.g_yx.decode(t, l, z_gen_match);
            let y_rec_clean = nets.g_xy.forward(t, l, x_gen);
            let x_for_rec = match noise {
                Some(n) => {
                    let nv = t.constant(n.clone());
                    t.add(x_gen, nv)
                }
                None => x_gen,
            };
            let z_back = nets.g_xy.encode(t, l, x_for_rec);
            let z_injected = t.add(z_back, z_gen_unmatch);
            let y_rec = nets.g_xy.decode(t, l, z_injected);
            BackwardCycleVars {
                y,
                z_gen,
                m_gen: Some(m_gen),
                z_gen_unmatch,
                z_gen_match,
                x_gen,
                y_rec,
                y_rec_clean,
            }
        }
        CycleMode::Baseline => {
            let zeros = t.constant(ArrayD::zeros(t.value(z_gen).raw_dim()));
            let x_gen = nets.g_yx.decode(t, l, z_gen);
            let x_for_rec = match noise {
                Some(n) => {
                    let nv = t.constant(n.clone());
                    t.add(x_gen, nv)
                }
                None => x_gen,
            };
            let y_rec = nets.g_xy.forward(t, l, x_for_rec);
            BackwardCycleVars {
                y,
                z_gen,
                m_gen: None,
                z_gen_unmatch: zeros,
                z_gen_match: z_gen,
                x_gen,
                y_rec,
                y_rec_clean: y_rec,
            }
        }
    }
}

/// Forward cycle: translate `x` with the backward cycle's unmatchable
/// features injected, then reconstruct `x` from the masked re-encoding.
pub fn forward_cycle<S: Scalar>(
    t: &mut Tape<S>,
    l: &Lifted,
    nets: &NetworkSet<S>,
    x: Var,
    z_gen_unmatch: Var,
    mode: CycleMode,
) -> Result<ForwardCycleVars, CycleError> {
    let z_x = nets.g_xy.encode(t, l, x);
    if t.value(z_x).shape() != t.value(z_gen_unmatch).shape() {
        return Err(CycleError::LatentMismatch(format!(
            "encoder output {:?} vs injected features {:?}",
            t.value(z_x).shape(),
            t.value(z_gen_unmatch).shape()
        )));
    }
    match mode {
        CycleMode::Stego => {
            let z_mixed = t.add(z_x, z_gen_unmatch);
            let y_gen = nets.g_xy.decode(t, l, z_mixed);
            let y_gen_clean = nets.g_xy.forward(t, l, x);
            let z_rec = nets.g_yx.encode(t, l, y_gen);
            let m_rec = nets.mask_net.forward(t, l, z_rec);
            let (_, z_rec_match) = disentangle_on_tape(t, z_rec, m_rec);
            let x_rec = nets.g_yx.decode(t, l, z_rec_match);
            Ok(ForwardCycleVars {
                x,
                y_gen,
                y_gen_clean,
                z_rec,
                m_rec: Some(m_rec),
                x_rec,
            })
        }
        CycleMode::Baseline => {
            let y_gen = nets.g_xy.decode(t, l, z_x);
            let z_rec = nets.g_yx.encode(t, l, y_gen);
            let x_rec = nets.g_yx.decode(t, l, z_rec);
            Ok(ForwardCycleVars {
                x,
                y_gen,
                y_gen_clean: y_gen,
                z_rec,
                m_rec: None,
                x_rec,
            })
        }
    }
}

/// Run the backward cycle, then the forward cycle on its unmatchable
/// features: the full per-iteration graph.
pub fn run_cycles<S: Scalar>(
    t: &mut Tape<S>,
    l: &Lifted,
    nets: &NetworkSet<S>,
    x: Var,
    y: Var,
    mode: CycleMode,
    noise: Option<&ArrayD<S>>,
) -> Result<CycleVars, CycleError> {
    let backward = backward_cycle(t, l, nets, y, mode, noise);
    let forward = forward_cycle(t, l, nets, x, backward.z_gen_unmatch, mode)?;
    Ok(CycleVars { backward, forward })
}

/// Plain translation used at inference time: `G` applied to `x`, no masks,
/// no injected features.
pub fn translate<S: Scalar>(nets: &NetworkSet<S>, x: &ImageTensor<S>) -> ImageTensor<S> {
    let mut t = Tape::new();
    let l = lift(&nets.store, &mut t, None);
    let xv = t.constant(x.data.clone().insert_axis(Axis(0)).into_dyn());
    let y = nets.g_xy.forward(&mut t, &l, xv);
    let data = take_image(&t, y, 0);
    ImageTensor::from_raw(data, Domain::Y)
}

/// Translation in the other direction: `G` from target to source.
pub fn translate_reverse<S: Scalar>(nets: &NetworkSet<S>, y: &ImageTensor<S>) -> ImageTensor<S> {
    let mut t = Tape::new();
    let l = lift(&nets.store, &mut t, None);
    let yv = t.constant(y.data.clone().insert_axis(Axis(0)).into_dyn());
    let x = nets.g_yx.forward(&mut t, &l, yv);
    let data = take_image(&t, x, 0);
    ImageTensor::from_raw(data, Domain::X)
}

/// Predict the unmatchability mask of one target image: encode it with the
/// reverse generator and apply the mask predictor, no gradients.
pub fn predict_mask<S: Scalar>(nets: &NetworkSet<S>, y: &ImageTensor<S>) -> UnmatchabilityMask<S> {
    let mut t = Tape::new();
    let l = lift(&nets.store, &mut t, None);
    let yv = t.constant(y.data.clone().insert_axis(Axis(0)).into_dyn());
    let z = nets.g_yx.encode(&mut t, &l, yv);
    let m = nets.mask_net.forward(&mut t, &l, z);
    UnmatchabilityMask { data: take_image(&t, m, 0) }
}

fn take_image<S: Scalar>(t: &Tape<S>, v: Var, batch: usize) -> Array3<S> {
    t.value(v)
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank-4 image batch")
        .index_axis(Axis(0), batch)
        .to_owned()
}

/// Run both cycles without gradients and extract one batch element as a
/// value-level record. Used by probes, mask export, and tests.
pub fn run_cycles_inference<S: Scalar>(
    nets: &NetworkSet<S>,
    x: &ImageTensor<S>,
    y: &ImageTensor<S>,
    mode: CycleMode,
    noise_amplitude: f64,
    rng: &mut ChaCha20Rng,
) -> Result<TranslationBundle<S>, CycleError> {
    let mut t = Tape::new();
    let l = lift(&nets.store, &mut t, None);
    let xv = t.constant(x.data.clone().insert_axis(Axis(0)).into_dyn());
    let yv = t.constant(y.data.clone().insert_axis(Axis(0)).into_dyn());
    let noise = match mode {
        CycleMode::Stego => {
            draw_noise::<S>(t.value(xv).shape(), noise_amplitude, rng)
        }
        CycleMode::Baseline => None,
    };
    let vars = run_cycles(&mut t, &l, nets, xv, yv, mode, noise.as_ref())?;
    let feature = |v: Var| FeatureMap { data: take_image(&t, v, 0) };
    let mask = |v: Option<Var>, like: Var| match v {
        Some(v) => UnmatchabilityMask { data: take_image(&t, v, 0) },
        None => UnmatchabilityMask {
            data: Array3::zeros(take_image(&t, like, 0).dim()),
        },
    };
    let image = |v: Var, d: Domain| ImageTensor::from_raw(take_image(&t, v, 0), d);
    let b = &vars.backward;
    let f = &vars.forward;
    Ok(TranslationBundle {
        x: image(f.x, Domain::X),
        y: image(b.y, Domain::Y),
        x_gen: image(b.x_gen, Domain::X),
        y_gen: image(f.y_gen, Domain::Y),
        y_gen_clean: image(f.y_gen_clean, Domain::Y),
        x_rec: image(f.x_rec, Domain::X),
        y_rec: image(b.y_rec, Domain::Y),
        y_rec_clean: image(b.y_rec_clean, Domain::Y),
        z_gen: feature(b.z_gen),
        z_rec: feature(f.z_rec),
        m_gen: mask(b.m_gen, b.z_gen),
        m_rec: mask(f.m_rec, f.z_rec),
        z_gen_unmatch: feature(b.z_gen_unmatch),
        z_gen_match: feature(b.z_gen_match),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{build_networks, NetworkConfig};
    use ndarray::Array3;
    use rand::{Rng, RngCore, SeedableRng};

    fn nets(width: usize) -> NetworkSet<f32> {
        let cfg = NetworkConfig {
            x_channels: 3,
            y_channels: 3,
            base_width: width,
            split_depth: 3,
        };
        build_networks(&cfg, &mut ChaCha20Rng::seed_from_u64(11)).unwrap()
    }

    fn rand_img(rng: &mut ChaCha20Rng, c: usize, hw: usize) -> ImageTensor<f32> {
        let data = Array3::from_shape_fn((c, hw, hw), |_| rng.gen_range(-1.0..1.0));
        ImageTensor::from_raw(data, Domain::X)
    }

    #[test]
    fn disentangle_extremes_and_additivity() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let z = FeatureMap {
            data: Array3::from_shape_fn((4, 6, 6), |_| rng.gen_range(-2.0f64..2.0)),
        };
        let zeros = UnmatchabilityMask { data: Array3::zeros((4, 6, 6)) };
        let (un, ma) = disentangle(&z, &zeros).unwrap();
        assert_eq!(ma.data, z.data);
        assert!(un.data.iter().all(|&v| v == 0.0));

        let ones = UnmatchabilityMask { data: Array3::ones((4, 6, 6)) };
        let (un, ma) = disentangle(&z, &ones).unwrap();
        assert_eq!(un.data, z.data);
        assert!(ma.data.iter().all(|&v| v == 0.0));

        let m = UnmatchabilityMask {
            data: Array3::from_shape_fn((4, 6, 6), |_| rng.gen_range(0.0f64..1.0)),
        };
        let (un, ma) = disentangle(&z, &m).unwrap();
        for ((&a, &b), &zv) in un.data.iter().zip(ma.data.iter()).zip(z.data.iter()) {
            assert_eq!(a + b, zv, "split parts must sum back exactly");
        }

        let bad = UnmatchabilityMask { data: Array3::zeros((4, 6, 5)) };
        assert!(disentangle(&z, &bad).is_err());
    }

    #[test]
    fn perturb_at_zero_amplitude_is_free_and_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let img = rand_img(&mut rng, 3, 8);
        let mut a = ChaCha20Rng::seed_from_u64(3);
        let mut b = ChaCha20Rng::seed_from_u64(3);
        let out = perturb(&img, 0.0, &mut a);
        assert_eq!(out.data, img.data);
        // No randomness consumed.
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn perturb_statistics_match_declared_amplitude() {
        let img = ImageTensor::from_raw(Array3::<f64>::zeros((1, 1000, 1000)), Domain::X);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let out = perturb(&img, 0.01, &mut rng);
        let n = out.data.len() as f64;
        let mean: f64 = out.data.iter().sum::<f64>() / n;
        let std = (out.data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 3.0 * 0.01 / n.sqrt(), "noise mean {mean}");
        assert!((std - 0.01).abs() < 0.0005, "noise std {std}");
    }

    #[test]
    fn consistency_mask_examples() {
        // All-zero mask: all-ones weighting.
        let zeros = UnmatchabilityMask { data: Array3::<f64>::zeros((4, 4, 4)) };
        let i = consistency_mask(&zeros, (8, 8)).unwrap();
        assert_eq!(i.data.dim(), (1, 8, 8));
        assert!(i.data.iter().all(|&v| v == 1.0));

        // Single hot pixel in one channel: zero on its upsampled footprint.
        let mut m = Array3::<f64>::zeros((4, 4, 4));
        m[[2, 1, 2]] = 1.0;
        let i = consistency_mask(&UnmatchabilityMask { data: m }, (8, 8)).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let inside = (2..4).contains(&r) && (4..6).contains(&c);
                assert_eq!(i.data[[0, r, c]], if inside { 0.0 } else { 1.0 }, "({r},{c})");
            }
        }

        // Uniform 0.3: uniform 0.7.
        let m = UnmatchabilityMask { data: Array3::from_elem((4, 4, 4), 0.3f64) };
        let i = consistency_mask(&m, (4, 4)).unwrap();
        assert!(i.data.iter().all(|&v| (v - 0.7).abs() < 1e-12));

        // Target below mask size is rejected.
        let m = UnmatchabilityMask { data: Array3::from_elem((4, 4, 4), 0.3f64) };
        assert!(consistency_mask(&m, (2, 8)).is_err());
    }

    #[test]
    fn zero_injection_keeps_translation_clean() {
        let nets = nets(4);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = rand_img(&mut rng, 3, 32);
        let mut t = Tape::new();
        let l = lift(&nets.store, &mut t, None);
        let xv = t.constant(x.data.clone().insert_axis(Axis(0)).into_dyn());
        let latent_hw = 8;
        let zeros = t.constant(ArrayD::zeros(IxDyn(&[1, 16, latent_hw, latent_hw])));
        let f = forward_cycle(&mut t, &l, &nets, xv, zeros, CycleMode::Stego).unwrap();
        assert_eq!(t.value(f.y_gen), t.value(f.y_gen_clean));
    }

    #[test]
    fn backward_cycle_with_zero_mask_and_no_noise_reconstructs_identically() {
        // Rebuild the backward cycle with the mask replaced by zeros: the
        // clean and injected reconstruction paths become the same graph.
        let nets = nets(4);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let y = rand_img(&mut rng, 3, 32);
        let mut t = Tape::new();
        let l = lift(&nets.store, &mut t, None);
        let yv = t.constant(y.data.clone().insert_axis(Axis(0)).into_dyn());
        let z_gen = nets.g_yx.encode(&mut t, &l, yv);
        let m0 = t.constant(ArrayD::zeros(t.value(z_gen).raw_dim()));
        let (z_un, z_ma) = disentangle_on_tape(&mut t, z_gen, m0);
        let x_gen = nets.g_yx.decode(&mut t, &l, z_ma);
        let y_rec_clean = nets.g_xy.forward(&mut t, &l, x_gen);
        let z_back = nets.g_xy.encode(&mut t, &l, x_gen);
        let z_inj = t.add(z_back, z_un);
        let y_rec = nets.g_xy.decode(&mut t, &l, z_inj);
        assert_eq!(t.value(y_rec), t.value(y_rec_clean));
    }

    #[test]
    fn cycle_shapes_close_in_both_modes() {
        let nets = nets(4);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x = rand_img(&mut rng, 3, 32);
        let y = rand_img(&mut rng, 3, 32);
        for mode in [CycleMode::Stego, CycleMode::Baseline] {
            let bundle =
                run_cycles_inference(&nets, &x, &y, mode, 0.01, &mut rng).unwrap();
            assert_eq!(bundle.x_gen.data.dim(), (3, 32, 32));
            assert_eq!(bundle.y_gen.data.dim(), (3, 32, 32));
            assert_eq!(bundle.y_gen_clean.data.dim(), (3, 32, 32));
            assert_eq!(bundle.x_rec.data.dim(), (3, 32, 32));
            assert_eq!(bundle.y_rec.data.dim(), (3, 32, 32));
            assert_eq!(bundle.y_rec_clean.data.dim(), (3, 32, 32));
            assert_eq!(bundle.z_gen.data.dim(), (16, 8, 8));
            assert_eq!(bundle.m_gen.data.dim(), (16, 8, 8));
            assert!(bundle.split_exactness_error() < 1e-6);
            if mode == CycleMode::Baseline {
                assert_eq!(bundle.y_gen.data, bundle.y_gen_clean.data);
                assert_eq!(bundle.y_rec.data, bundle.y_rec_clean.data);
                assert!(bundle.m_gen.data.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn translate_is_deterministic_in_range_and_matches_clean_path() {
        let nets = nets(4);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x = rand_img(&mut rng, 3, 32);
        let y = rand_img(&mut rng, 3, 32);
        let a = translate(&nets, &x);
        let b = translate(&nets, &x);
        assert_eq!(a.data, b.data);
        assert_eq!(a.domain, Domain::Y);
        assert!(a.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let bundle =
            run_cycles_inference(&nets, &x, &y, CycleMode::Stego, 0.0, &mut rng).unwrap();
        assert_eq!(bundle.y_gen_clean.data, a.data);
    }

    #[test]
    fn mismatched_latent_shapes_are_reported() {
        let nets = nets(4);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = rand_img(&mut rng, 3, 32);
        let mut t = Tape::new();
        let l = lift(&nets.store, &mut t, None);
        let xv = t.constant(x.data.insert_axis(Axis(0)).into_dyn());
        let wrong = t.constant(ArrayD::zeros(IxDyn(&[1, 16, 4, 4])));
        assert!(matches!(
            forward_cycle(&mut t, &l, &nets, xv, wrong, CycleMode::Stego),
            Err(CycleError::LatentMismatch(_))
        ));
    }

    #[test]
    fn predicted_mask_matches_cycle_mask() {
        let nets = nets(4);
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let x = rand_img(&mut rng, 3, 32);
        let y = rand_img(&mut rng, 3, 32);
        let m = predict_mask(&nets, &y);
        assert_eq!(m.data.dim(), (nets.g_yx.latent_channels(), 8, 8));
        assert!(m.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let bundle =
            run_cycles_inference(&nets, &x, &y, CycleMode::Stego, 0.0, &mut rng).unwrap();
        assert_eq!(m.data, bundle.m_gen.data);
    }
}
