//! The four trainable networks: two generators split into encoder/decoder
//! halves, the mask predictor, and two patch discriminators.
//!
//! Parameters live in a flat [`ParamStore`]; layer descriptions hold store
//! indices. Each training iteration lifts the store onto a fresh
//! [`Tape`](crate::autograd::Tape), marking one parameter group trainable,
//! and the layer structs replay their operations on the tape.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::scalar::Scalar;

const INSTANCE_NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;
const WEIGHT_STD: f64 = 0.02;
const RES_BLOCKS: usize = 9;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("split depth {0} outside [-1, 8]")]
    DepthOutOfRange(i32),
    #[error("input {h}x{w} too small for the discriminator's receptive field")]
    InputTooSmall { h: usize, w: usize },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
}

/// Which optimizer phase updates a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Generators and the mask predictor.
    Generator,
    /// Both discriminators.
    Discriminator,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: ArrayD<S>,
    pub group: ParamGroup,
}

/// Flat, ordered collection of every trainable array.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>, group: ParamGroup) -> usize {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value, group });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param<S> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<S> {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Order-sensitive content hash used by the isolation checks.
    pub fn content_hash(&self, group: Option<ParamGroup>) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            if group.is_some_and(|g| g != p.group) {
                continue;
            }
            p.name.hash(&mut h);
            for &v in p.value.iter() {
                v.to_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Tape handles for every parameter, aligned with store indices.
pub struct Lifted {
    vars: Vec<Var>,
}

impl Lifted {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

/// Copy every parameter onto `tape`; parameters in `trainable` (if any)
/// become differentiable leaves, the rest enter frozen.
pub fn lift<S: Scalar>(
    store: &ParamStore<S>,
    tape: &mut Tape<S>,
    trainable: Option<ParamGroup>,
) -> Lifted {
    let vars = store
        .iter()
        .map(|p| tape.leaf(p.value.clone(), trainable == Some(p.group)))
        .collect();
    Lifted { vars }
}

/// Read gradients for one group back out of the tape, aligned with store
/// indices (`None` for parameters outside the group or unreached ones).
pub fn collect_gradients<S: Scalar>(
    store: &ParamStore<S>,
    tape: &Tape<S>,
    lifted: &Lifted,
    group: ParamGroup,
) -> Vec<Option<ArrayD<S>>> {
    (0..store.len())
        .map(|i| {
            if store.get(i).group == group {
                tape.grad(lifted.var(i)).cloned()
            } else {
                None
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
enum PadKind {
    Reflect(usize),
    Zero(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Act {
    Relu,
    Leaky,
    Tanh,
    Sigmoid,
    None,
}

/// One convolutional stage: pad, convolve, optionally normalize, activate.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stage {
    w: usize,
    b: usize,
    kind: StageKind,
    pad: Option<PadKind>,
    norm: bool,
    act: Act,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
enum StageKind {
    Conv { stride: usize },
    ConvT { stride: usize, pad: usize, out_pad: usize },
}

impl Stage {
    fn apply<S: Scalar>(&self, t: &mut Tape<S>, l: &Lifted, x: Var) -> Var {
        let mut v = x;
        if let Some(pad) = self.pad {
            v = match pad {
                PadKind::Reflect(p) => t.pad_reflect(v, p),
                PadKind::Zero(p) => t.pad_zero(v, p),
            };
        }
        v = match self.kind {
            StageKind::Conv { stride } => t.conv2d(v, l.var(self.w), Some(l.var(self.b)), stride),
            StageKind::ConvT { stride, pad, out_pad } => {
                t.conv_transpose2d(v, l.var(self.w), Some(l.var(self.b)), stride, pad, out_pad)
            }
        };
        if self.norm {
            v = t.instance_norm(v, S::from_f64(INSTANCE_NORM_EPS));
        }
        match self.act {
            Act::Relu => t.relu(v),
            Act::Leaky => t.leaky_relu(v, S::from_f64(LEAKY_SLOPE)),
            Act::Tanh => t.tanh(v),
            Act::Sigmoid => t.sigmoid(v),
            Act::None => v,
        }
    }
}

/// Residual block: two 3×3 convolutions with reflection padding and a skip.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResBlock {
    conv1: Stage,
    conv2: Stage,
}

impl ResBlock {
    fn apply<S: Scalar>(&self, t: &mut Tape<S>, l: &Lifted, x: Var) -> Var {
        let h = self.conv1.apply(t, l, x);
        let h = self.conv2.apply(t, l, h);
        t.add(x, h)
    }
}

/// Residual generator split into an encoder and a decoder at a configurable
/// residual-block boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitGenerator {
    stem: Vec<Stage>,
    blocks: Vec<ResBlock>,
    head: Vec<Stage>,
    split_depth: i32,
    latent_channels: usize,
}

impl SplitGenerator {
    /// Number of residual blocks inside the encoder.
    fn encoder_blocks(&self) -> usize {
        (self.split_depth + 1) as usize
    }

    pub fn split_depth(&self) -> i32 {
        self.split_depth
    }

    /// Channel count of the latent feature map.
    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    /// Stem plus the first `split_depth + 1` residual blocks.
    pub fn encode<S: Scalar>(&self, t: &mut Tape<S>, l: &Lifted, x: Var) -> Var {
        let mut v = x;
        for s in &self.stem {
            v = s.apply(t, l, v);
        }
        for b in &self.blocks[..self.encoder_blocks()] {
            v = b.apply(t, l, v);
        }
        v
    }

    /// Remaining residual blocks plus the upsampling head.
    pub fn decode<S: Scalar>(&self, t: &mut Tape<S>, l: &Lifted, z: Var) -> Var {
        let mut v = z;
        for b in &self.blocks[self.encoder_blocks()..] {
            v = b.apply(t, l, v);
        }
        for s in &self.head {
            v = s.apply(t, l, v);
        }
        v
    }

    /// Full translation: encode then decode.
    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, l: &Lifted, x: Var) -> Var {
        let z = self.encode(t, l, x);
        self.decode(t, l, z)
    }

    /// Reference path that ignores the split boundary entirely; used to
    /// verify that encode∘decode reproduces the unsplit network.
    pub fn forward_monolithic<S: Scalar>(&self, t: &mut Tape<S>, l: &Lifted, x: Var) -> Var {
        let mut v = x;
        for s in &self.stem {
            v = s.apply(t, l, v);
        }
        for b in &self.blocks {
            v = b.apply(t, l, v);
        }
        for s in &self.head {
            v = s.apply(t, l, v);
        }
        v
    }

    /// Residual blocks on the decoder side.
    pub fn decoder_blocks(&self) -> usize {
        self.blocks.len() - self.encoder_blocks()
    }
}

/// Three-layer convolutional scorer mapping latent features to `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskPredictor {
    stages: Vec<Stage>,
}

/// Mask scores are squashed into `[FLOOR, 1 - FLOOR]` rather than raw
/// sigmoid range. Single-precision sigmoid saturates to exactly 0.0 for
/// pre-activations below about -89, and a mask entry of exactly zero makes
/// the L0.5 penalty's derivative infinite, poisoning the whole gradient
/// pass. The floor is 2^-20 so that a zero pre-activation still maps to
/// exactly 0.5 in both f32 and f64.
const MASK_FLOOR: f64 = 1.0 / (1 << 20) as f64;

impl MaskPredictor {
    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, l: &Lifted, z: Var) -> Var {
        let mut v = z;
        for s in &self.stages {
            v = s.apply(t, l, v);
        }
        let floor = S::from_f64(MASK_FLOOR);
        let scale = S::from_f64(1.0 - 2.0 * MASK_FLOOR);
        t.affine(v, scale, floor)
    }
}

/// Patch discriminator: five 4×4 convolution stages, score map output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Discriminator {
    stages: Vec<Stage>,
}

impl Discriminator {
    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, l: &Lifted, x: Var) -> Var {
        let mut v = x;
        for s in &self.stages {
            v = s.apply(t, l, v);
        }
        v
    }

    /// Score-map spatial size for an input, or an error when the input is
    /// smaller than the receptive field.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize), NetworkError> {
        let (orig_h, orig_w) = (h, w);
        let (mut h, mut w) = (h, w);
        for s in &self.stages {
            let p = match s.pad {
                Some(PadKind::Zero(p)) => p,
                Some(PadKind::Reflect(p)) => p,
                None => 0,
            };
            let stride = match s.kind {
                StageKind::Conv { stride } => stride,
                StageKind::ConvT { .. } => unreachable!("discriminators only downsample"),
            };
            let k = 4usize;
            let (ph, pw) = (h + 2 * p, w + 2 * p);
            if ph < k || pw < k {
                return Err(NetworkError::InputTooSmall { h: orig_h, w: orig_w });
            }
            h = (ph - k) / stride + 1;
            w = (pw - k) / stride + 1;
        }
        Ok((h, w))
    }
}

/// Channel counts and topology knobs for [`build_networks`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub x_channels: usize,
    pub y_channels: usize,
    pub base_width: usize,
    pub split_depth: i32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            x_channels: 3,
            y_channels: 3,
            base_width: 64,
            split_depth: 8,
        }
    }
}

/// All networks plus their shared parameter store.
pub struct NetworkSet<S: Scalar> {
    pub store: ParamStore<S>,
    pub g_xy: SplitGenerator,
    pub g_yx: SplitGenerator,
    pub mask_net: MaskPredictor,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
    pub config: NetworkConfig,
}

fn init_conv<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha20Rng,
    name: &str,
    shape: (usize, usize, usize, usize),
    group: ParamGroup,
) -> usize {
    let dist = Normal::new(0.0, WEIGHT_STD).expect("valid stddev");
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let data: Vec<S> = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
    let w = ArrayD::from_shape_vec(IxDyn(&[shape.0, shape.1, shape.2, shape.3]), data)
        .expect("shape matches element count");
    store.add(format!("{name}.w"), w, group)
}

fn add_conv<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha20Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: Option<PadKind>,
    norm: bool,
    act: Act,
    group: ParamGroup,
) -> Stage {
    let w = init_conv(store, rng, name, (out_ch, in_ch, k, k), group);
    let b = store.add(
        format!("{name}.b"),
        ArrayD::zeros(IxDyn(&[out_ch])),
        group,
    );
    Stage {
        w,
        b,
        kind: StageKind::Conv { stride },
        pad,
        norm,
        act,
    }
}

#[allow(clippy::too_many_arguments)]
fn add_conv_t<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha20Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
    norm: bool,
    act: Act,
    group: ParamGroup,
) -> Stage {
    let w = init_conv(store, rng, name, (in_ch, out_ch, k, k), group);
    let b = store.add(
        format!("{name}.b"),
        ArrayD::zeros(IxDyn(&[out_ch])),
        group,
    );
    Stage {
        w,
        b,
        kind: StageKind::ConvT { stride, pad, out_pad },
        pad: None,
        norm,
        act,
    }
}

fn build_generator<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    width: usize,
    split_depth: i32,
) -> SplitGenerator {
    let g = ParamGroup::Generator;
    let w4 = width * 4;
    let stem = vec![
        add_conv(store, rng, &format!("{prefix}.stem0"), in_ch, width, 7, 1,
            Some(PadKind::Reflect(3)), true, Act::Relu, g),
        add_conv(store, rng, &format!("{prefix}.stem1"), width, width * 2, 3, 2,
            Some(PadKind::Zero(1)), true, Act::Relu, g),
        add_conv(store, rng, &format!("{prefix}.stem2"), width * 2, w4, 3, 2,
            Some(PadKind::Zero(1)), true, Act::Relu, g),
    ];
    let blocks = (0..RES_BLOCKS)
        .map(|i| ResBlock {
            conv1: add_conv(store, rng, &format!("{prefix}.block{i}.conv1"), w4, w4, 3, 1,
                Some(PadKind::Reflect(1)), true, Act::Relu, g),
            conv2: add_conv(store, rng, &format!("{prefix}.block{i}.conv2"), w4, w4, 3, 1,
                Some(PadKind::Reflect(1)), true, Act::None, g),
        })
        .collect();
    let head = vec![
        add_conv_t(store, rng, &format!("{prefix}.up0"), w4, width * 2, 3, 2, 1, 1,
            true, Act::Relu, g),
        add_conv_t(store, rng, &format!("{prefix}.up1"), width * 2, width, 3, 2, 1, 1,
            true, Act::Relu, g),
        add_conv(store, rng, &format!("{prefix}.out"), width, out_ch, 7, 1,
            Some(PadKind::Reflect(3)), false, Act::Tanh, g),
    ];
    SplitGenerator {
        stem,
        blocks,
        head,
        split_depth,
        latent_channels: w4,
    }
}

fn build_mask_predictor<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    channels: usize,
) -> MaskPredictor {
    let g = ParamGroup::Generator;
    let stages = vec![
        add_conv(store, rng, &format!("{prefix}.conv0"), channels, channels, 3, 1,
            Some(PadKind::Zero(1)), false, Act::Relu, g),
        add_conv(store, rng, &format!("{prefix}.conv1"), channels, channels, 3, 1,
            Some(PadKind::Zero(1)), false, Act::Relu, g),
        add_conv(store, rng, &format!("{prefix}.conv2"), channels, channels, 3, 1,
            Some(PadKind::Zero(1)), false, Act::Sigmoid, g),
    ];
    MaskPredictor { stages }
}

fn build_discriminator<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    in_ch: usize,
    width: usize,
) -> Discriminator {
    let d = ParamGroup::Discriminator;
    let stages = vec![
        add_conv(store, rng, &format!("{prefix}.conv0"), in_ch, width, 4, 2,
            Some(PadKind::Zero(1)), false, Act::Leaky, d),
        add_conv(store, rng, &format!("{prefix}.conv1"), width, width * 2, 4, 2,
            Some(PadKind::Zero(1)), true, Act::Leaky, d),
        add_conv(store, rng, &format!("{prefix}.conv2"), width * 2, width * 4, 4, 2,
            Some(PadKind::Zero(1)), true, Act::Leaky, d),
        add_conv(store, rng, &format!("{prefix}.conv3"), width * 4, width * 8, 4, 1,
            Some(PadKind::Zero(1)), true, Act::Leaky, d),
        add_conv(store, rng, &format!("{prefix}.conv4"), width * 8, 1, 4, 1,
            Some(PadKind::Zero(1)), false, Act::None, d),
    ];
    Discriminator { stages }
}

/// Build all five networks with Gaussian(0, 0.02²) weights and zero biases,
/// deterministically from `seed`.
pub fn build_networks<S: Scalar>(
    cfg: &NetworkConfig,
    rng: &mut ChaCha20Rng,
) -> Result<NetworkSet<S>, NetworkError> {
    if !(-1..=8).contains(&cfg.split_depth) {
        return Err(NetworkError::DepthOutOfRange(cfg.split_depth));
    }
    let mut store = ParamStore::new();
    let g_xy = build_generator(
        &mut store, rng, "g_xy", cfg.x_channels, cfg.y_channels, cfg.base_width, cfg.split_depth,
    );
    let g_yx = build_generator(
        &mut store, rng, "g_yx", cfg.y_channels, cfg.x_channels, cfg.base_width, cfg.split_depth,
    );
    let mask_net = build_mask_predictor(&mut store, rng, "mask", g_yx.latent_channels());
    let d_x = build_discriminator(&mut store, rng, "d_x", cfg.x_channels, cfg.base_width);
    let d_y = build_discriminator(&mut store, rng, "d_y", cfg.y_channels, cfg.base_width);
    Ok(NetworkSet {
        store,
        g_xy,
        g_yx,
        mask_net,
        d_x,
        d_y,
        config: cfg.clone(),
    })
}

/// Rebuild the layer descriptions for an existing store (checkpoint load).
/// The store must have been produced by [`build_networks`] with the same
/// configuration; names are cross-checked.
pub fn rebuild_networks<S: Scalar>(
    cfg: &NetworkConfig,
    store: ParamStore<S>,
) -> Result<NetworkSet<S>, NetworkError> {
    let mut throwaway = ChaCha20Rng::seed_from_u64(0);
    let fresh: NetworkSet<S> = build_networks(cfg, &mut throwaway)?;
    if fresh.store.len() != store.len() {
        return Err(NetworkError::ConfigMismatch(format!(
            "checkpoint has {} parameters, configuration expects {}",
            store.len(),
            fresh.store.len()
        )));
    }
    for i in 0..store.len() {
        let (a, b) = (fresh.store.get(i), store.get(i));
        if a.name != b.name || a.value.shape() != b.value.shape() || a.group != b.group {
            return Err(NetworkError::ConfigMismatch(format!(
                "parameter {i} mismatch: expected {} {:?}, found {} {:?}",
                a.name,
                a.value.shape(),
                b.name,
                b.value.shape()
            )));
        }
    }
    Ok(NetworkSet { store, ..fresh })
}

impl<S: Scalar> NetworkSet<S> {
    /// Zero every parameter of the mask predictor (test hook: a zeroed
    /// sigmoid head emits the constant 0.5).
    pub fn zero_mask_net(&mut self) {
        for i in 0..self.store.len() {
            if self.store.get(i).name.starts_with("mask.") {
                let p = self.store.get_mut(i);
                p.value.fill(S::zero());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn rand_image<S: Scalar>(rng: &mut ChaCha20Rng, c: usize, h: usize, w: usize) -> ArrayD<S> {
        ArrayD::from_shape_fn(IxDyn(&[1, c, h, w]), |_| {
            S::from_f64(rng.gen_range(-1.0..1.0))
        })
    }

    fn small_set(split_depth: i32) -> NetworkSet<f32> {
        let cfg = NetworkConfig {
            x_channels: 3,
            y_channels: 3,
            base_width: 4,
            split_depth,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        build_networks(&cfg, &mut rng).unwrap()
    }

    #[test]
    fn latent_shape_at_split_depth_one_matches_backbone_trace() {
        let cfg = NetworkConfig {
            x_channels: 3,
            y_channels: 3,
            base_width: 64,
            split_depth: 1,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let nets: NetworkSet<f32> = build_networks(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let lifted = lift(&nets.store, &mut tape, None);
        let x = tape.constant(rand_image::<f32>(&mut rng, 3, 256, 256));
        let z = nets.g_yx.encode(&mut tape, &lifted, x);
        assert_eq!(tape.value(z).shape(), &[1, 256, 64, 64]);
    }

    #[test]
    fn depth_eight_leaves_no_residual_blocks_in_decoder() {
        let nets = small_set(8);
        assert_eq!(nets.g_xy.decoder_blocks(), 0);
        let nets = small_set(-1);
        assert_eq!(nets.g_xy.decoder_blocks(), 9);
        assert_eq!(nets.g_xy.encoder_blocks(), 0);
    }

    #[test]
    fn encode_decode_closes_shapes_at_every_depth() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for depth in -1..=8 {
            let nets = small_set(depth);
            let mut tape = Tape::new();
            let lifted = lift(&nets.store, &mut tape, None);
            let x = tape.constant(rand_image::<f32>(&mut rng, 3, 64, 64));
            let z = nets.g_xy.encode(&mut tape, &lifted, x);
            assert_eq!(
                tape.value(z).shape(),
                &[1, 16, 16, 16],
                "latent shape at depth {depth}"
            );
            let y = nets.g_xy.decode(&mut tape, &lifted, z);
            assert_eq!(tape.value(y).shape(), &[1, 3, 64, 64]);
        }
    }

    #[test]
    fn split_forward_equals_monolithic_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let img = rand_image::<f32>(&mut rng, 3, 64, 64);
        for depth in [-1, 1, 3, 5, 8] {
            let nets = small_set(depth);
            let mut tape = Tape::new();
            let lifted = lift(&nets.store, &mut tape, None);
            let x = tape.constant(img.clone());
            let split = nets.g_xy.forward(&mut tape, &lifted, x);
            let mono = nets.g_xy.forward_monolithic(&mut tape, &lifted, x);
            let diff = tape
                .value(split)
                .iter()
                .zip(tape.value(mono).iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(diff < 1e-6, "depth {depth}: max divergence {diff}");
        }
    }

    #[test]
    fn out_of_range_split_depth_is_rejected() {
        let cfg = NetworkConfig { split_depth: 9, ..NetworkConfig::default() };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        assert!(matches!(
            build_networks::<f32>(&cfg, &mut rng),
            Err(NetworkError::DepthOutOfRange(9))
        ));
    }

    #[test]
    fn discriminator_score_map_sizes() {
        let cfg = NetworkConfig {
            base_width: 64,
            ..NetworkConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let nets: NetworkSet<f32> = build_networks(&cfg, &mut rng).unwrap();
        assert_eq!(nets.d_x.output_hw(256, 256).unwrap(), (30, 30));
        assert_eq!(nets.d_x.output_hw(64, 64).unwrap(), (6, 6));
        assert!(nets.d_x.output_hw(4, 4).is_err());

        // Forward pass agrees with the computed size, and batching maps
        // N inputs to N score maps.
        let nets = small_set(8);
        let mut tape = Tape::new();
        let lifted = lift(&nets.store, &mut tape, None);
        let x = tape.constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 64, 64]), |_| {
            rng.gen_range(-1.0f32..1.0)
        }));
        let s = nets.d_y.forward(&mut tape, &lifted, x);
        assert_eq!(tape.value(s).shape(), &[2, 1, 6, 6]);
    }

    #[test]
    fn discriminator_is_deterministic_in_eval() {
        let nets = small_set(8);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let img = rand_image::<f32>(&mut rng, 3, 64, 64);
        let score = || {
            let mut tape = Tape::new();
            let lifted = lift(&nets.store, &mut tape, None);
            let x = tape.constant(img.clone());
            let s = nets.d_x.forward(&mut tape, &lifted, x);
            tape.value(s).clone()
        };
        assert_eq!(score(), score());
    }

    #[test]
    fn mask_predictor_preserves_shape_and_stays_in_unit_interval() {
        let nets = small_set(8);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let lifted = lift(&nets.store, &mut tape, None);
        let z = tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 16, 16, 16]), |_| {
            rng.gen_range(-3.0f32..3.0)
        }));
        let m = nets.mask_net.forward(&mut tape, &lifted, z);
        assert_eq!(tape.value(m).shape(), &[1, 16, 16, 16]);
        assert!(tape.value(m).iter().all(|&v| v > 0.0 && v < 1.0));

        // Saturating inputs: raw f32 sigmoid collapses to exactly 0.0/1.0
        // for pre-activations past ±89, which would blow up the L0.5
        // penalty's gradient; the squashed head must stay strictly interior.
        let huge = tape.constant(ArrayD::from_shape_fn(
            IxDyn(&[1, 16, 8, 8]),
            |d| if (d[2] + d[3]) % 2 == 0 { 1e4f32 } else { -1e4 },
        ));
        let m = nets.mask_net.forward(&mut tape, &lifted, huge);
        assert!(tape.value(m).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zeroed_mask_predictor_emits_exactly_half() {
        let mut nets = small_set(8);
        nets.zero_mask_net();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let lifted = lift(&nets.store, &mut tape, None);
        let z = tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 16, 8, 8]), |_| {
            rng.gen_range(-1.0f32..1.0)
        }));
        let m = nets.mask_net.forward(&mut tape, &lifted, z);
        assert!(tape.value(m).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn initialization_statistics_match_convention() {
        let cfg = NetworkConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let nets: NetworkSet<f64> = build_networks(&cfg, &mut rng).unwrap();
        let idx = nets.store.find("g_xy.block0.conv1.w").unwrap();
        let w = &nets.store.get(idx).value;
        let n = w.len() as f64;
        let mean: f64 = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.001, "weight mean {mean}");
        assert!((std - 0.02).abs() < 0.002, "weight std {std}");
        let bidx = nets.store.find("g_xy.block0.conv1.b").unwrap();
        assert!(nets.store.get(bidx).value.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_groups_split_generators_from_discriminators() {
        let nets = small_set(8);
        for p in nets.store.iter() {
            let expect = if p.name.starts_with("d_") {
                ParamGroup::Discriminator
            } else {
                ParamGroup::Generator
            };
            assert_eq!(p.group, expect, "{}", p.name);
        }
    }

    #[test]
    fn same_seed_builds_identical_networks() {
        let cfg = NetworkConfig { base_width: 4, ..NetworkConfig::default() };
        let a: NetworkSet<f32> =
            build_networks(&cfg, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let b: NetworkSet<f32> =
            build_networks(&cfg, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        assert_eq!(
            a.store.content_hash(None),
            b.store.content_hash(None)
        );
    }

    #[test]
    fn rebuild_accepts_matching_store_and_rejects_mismatch() {
        let nets = small_set(8);
        let cfg = nets.config.clone();
        let rebuilt = rebuild_networks(&cfg, nets.store.clone()).unwrap();
        assert_eq!(rebuilt.store.content_hash(None), nets.store.content_hash(None));

        let other_cfg = NetworkConfig { base_width: 8, ..cfg };
        assert!(rebuild_networks(&other_cfg, nets.store).is_err());
    }
}
