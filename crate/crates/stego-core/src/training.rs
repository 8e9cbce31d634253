//! The training loop: alternating generator and discriminator updates with
//! Adam, replay pools, seeded determinism, and resumable checkpoints.
//!
//! One trainer owns all mutable state and runs single-threaded; determinism
//! comes from three independent seeded random streams (batch sampling,
//! perturbation noise, replay pools) whose positions are checkpointed, so a
//! resumed run replays the exact tail of a straight run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tape;
use crate::cycle::{draw_noise, run_cycles, CycleError, CycleMode};
use crate::data::{load_training_sets, DataError};
use crate::domain::{DatasetManifest, DomainError, Hyperparameters, Split};
use crate::networks::{
    build_networks, collect_gradients, lift, rebuild_networks, NetworkConfig, NetworkError,
    NetworkSet, ParamGroup, ParamStore,
};
use crate::objectives::{
    discriminator_loss_on_tape, generator_losses_on_tape, GanMode, LossReport, ObjectiveError,
    LOG_HEADER,
};
use crate::scalar::Scalar;

/// Schema version stamped into every checkpoint.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam moment decay rates and denominator guard.
pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Salts that derive the three independent random streams from the run seed.
const SAMPLER_SALT: u64 = 0x5341_4d50;
const NOISE_SALT: u64 = 0x4e4f_4953;
const POOL_SALT: u64 = 0x504f_4f4c;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Cycle(#[from] CycleError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint schema version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("resume configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("non-finite loss at iteration {iteration}: {source}")]
    NanAbort {
        iteration: u64,
        #[source]
        source: ObjectiveError,
    },
    #[error("parameter isolation violated: {0}")]
    IsolationViolated(&'static str),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Hold the configured rate for the whole run.
    #[default]
    Constant,
    /// Hold for the first half of the epochs, then decay linearly.
    LinearDecay,
}

impl LrSchedule {
    /// Multiplier applied to the base learning rate in `epoch` (0-based).
    pub fn factor(self, epoch: usize, total_epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::LinearDecay => {
                let half = total_epochs / 2;
                if epoch < half || total_epochs == half {
                    1.0
                } else {
                    (total_epochs - epoch) as f64 / (total_epochs - half) as f64
                }
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear_decay" => Ok(LrSchedule::LinearDecay),
            other => Err(format!(
                "unknown schedule {other:?} (expected constant|linear_decay)"
            )),
        }
    }
}

/// Which model variant to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Full model with mask prediction and feature routing.
    #[default]
    Stego,
    /// Plain cycle-consistent baseline; the mask predictor stays untouched.
    Baseline,
}

impl ModelKind {
    pub fn cycle_mode(self) -> CycleMode {
        match self {
            ModelKind::Stego => CycleMode::Stego,
            ModelKind::Baseline => CycleMode::Baseline,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stego" => Ok(ModelKind::Stego),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(format!("unknown model {other:?} (expected stego|baseline)")),
        }
    }
}

/// Complete training configuration. Deserializes from TOML with every field
/// optional; field names match exactly, hyperparameters under `[hp]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hp: Hyperparameters,
    pub gan_mode: GanMode,
    pub seed: u64,
    /// Checkpoint every this many iterations; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
    pub lr_schedule: LrSchedule,
    /// Replay pool capacity per discriminator; 0 disables pooling.
    pub pool_size: usize,
    /// Feed the clean translation to the target discriminator too (both
    /// fakes pooled). When false only the injected translation is judged.
    pub adv_on_clean: bool,
    pub model: ModelKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hp: Hyperparameters::default(),
            gan_mode: GanMode::default(),
            seed: 42,
            checkpoint_every: 0,
            lr_schedule: LrSchedule::default(),
            pool_size: 50,
            adv_on_clean: true,
            model: ModelKind::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.hp.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

/// Adam state for one parameter group. Moment buffers are kept for every
/// store slot so indices stay aligned; only the group's slots ever move.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamState<S: Scalar> {
    group: ParamGroup,
    step: u64,
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>, group: ParamGroup) -> Self {
        let zeros: Vec<ArrayD<S>> =
            store.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        AdamState { group, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One update over the gradients aligned with the store (entries outside
    /// this group, or unreached in the graph, are `None` and are skipped).
    pub fn apply(&mut self, lr: f64, store: &mut ParamStore<S>, grads: &[Option<ArrayD<S>>]) {
        self.step += 1;
        let b1 = S::from_f64(ADAM_BETA1);
        let b2 = S::from_f64(ADAM_BETA2);
        let one_m_b1 = S::from_f64(1.0 - ADAM_BETA1);
        let one_m_b2 = S::from_f64(1.0 - ADAM_BETA2);
        let bc1 = S::from_f64(1.0 - ADAM_BETA1.powi(self.step as i32));
        let bc2 = S::from_f64(1.0 - ADAM_BETA2.powi(self.step as i32));
        let lr = S::from_f64(lr);
        let eps = S::from_f64(ADAM_EPS);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            debug_assert_eq!(store.get(i).group, self.group, "gradient outside group");
            self.m[i].zip_mut_with(g, |mi, &gi| *mi = b1 * *mi + one_m_b1 * gi);
            self.v[i].zip_mut_with(g, |vi, &gi| *vi = b2 * *vi + one_m_b2 * gi * gi);
            ndarray::Zip::from(&mut store.get_mut(i).value)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &mi, &vi| {
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// Replay pool.
// ---------------------------------------------------------------------------

/// History buffer of generated images shown to a discriminator. While
/// filling it stores a copy and returns the incoming image; once full it
/// returns, with probability one half each, either the incoming image or a
/// uniformly chosen stored one (which the incoming image then replaces).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ImagePool<S: Scalar> {
    capacity: usize,
    items: Vec<ArrayD<S>>,
}

impl<S: Scalar> ImagePool<S> {
    pub fn new(capacity: usize) -> Self {
        ImagePool { capacity, items: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Exchange one `[C, H, W]` image with the pool.
    pub fn query(&mut self, incoming: ArrayD<S>, rng: &mut ChaCha20Rng) -> ArrayD<S> {
        if self.capacity == 0 {
            return incoming;
        }
        if self.items.len() < self.capacity {
            self.items.push(incoming.clone());
            return incoming;
        }
        if rng.gen_bool(0.5) {
            let k = rng.gen_range(0..self.items.len());
            std::mem::replace(&mut self.items[k], incoming)
        } else {
            incoming
        }
    }

    /// Exchange each element of a `[N, C, H, W]` batch independently.
    pub fn query_batch(&mut self, batch: &ArrayD<S>, rng: &mut ChaCha20Rng) -> ArrayD<S> {
        let mut out = batch.clone();
        for k in 0..batch.shape()[0] {
            let img = batch.index_axis(Axis(0), k).to_owned();
            let swapped = self.query(img, rng);
            out.index_axis_mut(Axis(0), k).assign(&swapped);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

/// Complete, self-describing training state.
#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Checkpoint<S: Scalar> {
    pub version: u32,
    pub config: TrainConfig,
    pub net_config: NetworkConfig,
    pub store: ParamStore<S>,
    pub adam_g: AdamState<S>,
    pub adam_d: AdamState<S>,
    pub pool_x: ImagePool<S>,
    pub pool_y: ImagePool<S>,
    pub sampler_pos: u128,
    pub noise_pos: u128,
    pub pool_pos: u128,
    pub iteration: u64,
    pub epoch: usize,
}

/// Serialize atomically: write to a sibling temp file, then rename.
pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: &Path) -> Result<(), TrainError> {
    let bytes = bincode::serialize(ckpt).map_err(|e| TrainError::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>, TrainError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let ckpt: Checkpoint<S> =
        bincode::deserialize(&bytes).map_err(|e| TrainError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            found: ckpt.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// The loop.
// ---------------------------------------------------------------------------

/// What a finished (or no-op) run hands back.
#[derive(Debug)]
pub struct TrainOutcome<S: Scalar> {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub iterations_run: u64,
    pub final_report: Option<LossReport<S>>,
}

struct LoopState<S: Scalar> {
    nets: NetworkSet<S>,
    adam_g: AdamState<S>,
    adam_d: AdamState<S>,
    pool_x: ImagePool<S>,
    pool_y: ImagePool<S>,
    sampler: ChaCha20Rng,
    noise_rng: ChaCha20Rng,
    pool_rng: ChaCha20Rng,
    iteration: u64,
}

fn stream(seed: u64, salt: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ salt)
}

/// Train from scratch. Writes `checkpoint.bin` and `loss_log.txt` under
/// `out_dir` and returns their paths.
pub fn train<S: Scalar>(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    if manifest.split != Split::Train {
        return Err(TrainError::BadConfig("training requires a train-split manifest".into()));
    }
    let (xs, ys) = load_training_sets::<S>(manifest, manifest_dir)?;
    let net_config = network_config_for(&cfg.hp, &xs, &ys)?;
    let mut weight_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let nets = build_networks::<S>(&net_config, &mut weight_rng)?;
    let adam_g = AdamState::new(&nets.store, ParamGroup::Generator);
    let adam_d = AdamState::new(&nets.store, ParamGroup::Discriminator);
    let state = LoopState {
        adam_g,
        adam_d,
        pool_x: ImagePool::new(cfg.pool_size),
        pool_y: ImagePool::new(cfg.pool_size),
        sampler: stream(cfg.seed, SAMPLER_SALT),
        noise_rng: stream(cfg.seed, NOISE_SALT),
        pool_rng: stream(cfg.seed, POOL_SALT),
        iteration: 0,
        nets,
    };
    run_loop(state, &xs, &ys, cfg, &net_config, out_dir)
}

/// Continue a checkpointed run under `cfg`, which may extend `hp.epochs`
/// and change `checkpoint_every` but must otherwise match the stored
/// configuration. A checkpoint already at or past the requested epochs is
/// re-emitted unchanged (no-op success).
pub fn resume<S: Scalar>(
    checkpoint_path: &Path,
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    if manifest.split != Split::Train {
        return Err(TrainError::BadConfig("training requires a train-split manifest".into()));
    }
    let ckpt = load_checkpoint::<S>(checkpoint_path)?;
    let mut stored = ckpt.config.clone();
    stored.hp.epochs = cfg.hp.epochs;
    stored.checkpoint_every = cfg.checkpoint_every;
    if &stored != cfg {
        return Err(TrainError::ConfigMismatch(format!(
            "only epochs and checkpoint_every may change on resume; checkpoint was trained \
             with {:?}",
            ckpt.config
        )));
    }
    let (xs, ys) = load_training_sets::<S>(manifest, manifest_dir)?;
    let net_config = network_config_for(&cfg.hp, &xs, &ys)?;
    if net_config.x_channels != ckpt.net_config.x_channels
        || net_config.y_channels != ckpt.net_config.y_channels
    {
        return Err(TrainError::ConfigMismatch(format!(
            "checkpoint expects {}/{} image channels, dataset has {}/{}",
            ckpt.net_config.x_channels,
            ckpt.net_config.y_channels,
            net_config.x_channels,
            net_config.y_channels
        )));
    }
    let nets = rebuild_networks(&ckpt.net_config, ckpt.store)?;
    let mut sampler = stream(cfg.seed, SAMPLER_SALT);
    let mut noise_rng = stream(cfg.seed, NOISE_SALT);
    let mut pool_rng = stream(cfg.seed, POOL_SALT);
    sampler.set_word_pos(ckpt.sampler_pos);
    noise_rng.set_word_pos(ckpt.noise_pos);
    pool_rng.set_word_pos(ckpt.pool_pos);
    let state = LoopState {
        nets,
        adam_g: ckpt.adam_g,
        adam_d: ckpt.adam_d,
        pool_x: ckpt.pool_x,
        pool_y: ckpt.pool_y,
        sampler,
        noise_rng,
        pool_rng,
        iteration: ckpt.iteration,
    };
    run_loop(state, &xs, &ys, cfg, &ckpt.net_config, out_dir)
}

fn network_config_for<S: Scalar>(
    hp: &Hyperparameters,
    xs: &[Array3<S>],
    ys: &[Array3<S>],
) -> Result<NetworkConfig, TrainError> {
    let x0 = xs.first().ok_or_else(|| TrainError::BadConfig("no source images".into()))?;
    let y0 = ys.first().ok_or_else(|| TrainError::BadConfig("no target images".into()))?;
    if (x0.dim().1, x0.dim().2) != (y0.dim().1, y0.dim().2) {
        return Err(TrainError::BadConfig(format!(
            "the two domains must share an image size, got {:?} and {:?}",
            x0.dim(),
            y0.dim()
        )));
    }
    Ok(NetworkConfig {
        x_channels: x0.dim().0,
        y_channels: y0.dim().0,
        base_width: hp.base_width,
        split_depth: hp.encoder_depth,
    })
}

fn run_loop<S: Scalar>(
    mut st: LoopState<S>,
    xs: &[Array3<S>],
    ys: &[Array3<S>],
    cfg: &TrainConfig,
    net_config: &NetworkConfig,
    out_dir: &Path,
) -> Result<TrainOutcome<S>, TrainError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let log_path = out_dir.join("loss_log.txt");
    let ckpt_path = out_dir.join("checkpoint.bin");
    let mut log: Box<dyn Write> = if st.iteration > 0 && log_path.exists() {
        Box::new(fs::OpenOptions::new().append(true).open(&log_path).map_err(io_err(&log_path))?)
    } else {
        let mut f = fs::File::create(&log_path).map_err(io_err(&log_path))?;
        writeln!(f, "{LOG_HEADER}").map_err(io_err(&log_path))?;
        Box::new(f)
    };

    let iters_per_epoch = xs.len().max(ys.len()).div_ceil(cfg.hp.batch_size) as u64;
    let total_iters = cfg.hp.epochs as u64 * iters_per_epoch;
    let mut iterations_run = 0;
    let mut final_report = None;

    while st.iteration < total_iters {
        let epoch = (st.iteration / iters_per_epoch) as usize;
        let lr = cfg.hp.learning_rate * cfg.lr_schedule.factor(epoch, cfg.hp.epochs);
        let report = train_iteration(&mut st, xs, ys, cfg, lr)?;
        st.iteration += 1;
        iterations_run += 1;
        writeln!(log, "{}", report.log_line(st.iteration as usize)).map_err(io_err(&log_path))?;
        if let Err(source) = report.check_finite() {
            log.flush().map_err(io_err(&log_path))?;
            return Err(TrainError::NanAbort { iteration: st.iteration, source });
        }
        final_report = Some(report);
        if cfg.checkpoint_every > 0 && st.iteration % cfg.checkpoint_every as u64 == 0 {
            log.flush().map_err(io_err(&log_path))?;
            save_checkpoint(&snapshot(&st, cfg, net_config, iters_per_epoch), &ckpt_path)?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    save_checkpoint(&snapshot(&st, cfg, net_config, iters_per_epoch), &ckpt_path)?;
    Ok(TrainOutcome {
        checkpoint_path: ckpt_path,
        log_path,
        iterations_run,
        final_report,
    })
}

fn snapshot<S: Scalar>(
    st: &LoopState<S>,
    cfg: &TrainConfig,
    net_config: &NetworkConfig,
    iters_per_epoch: u64,
) -> Checkpoint<S> {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        net_config: net_config.clone(),
        store: st.nets.store.clone(),
        adam_g: st.adam_g.clone(),
        adam_d: st.adam_d.clone(),
        pool_x: st.pool_x.clone(),
        pool_y: st.pool_y.clone(),
        sampler_pos: st.sampler.get_word_pos(),
        noise_pos: st.noise_rng.get_word_pos(),
        pool_pos: st.pool_rng.get_word_pos(),
        iteration: st.iteration,
        epoch: (st.iteration / iters_per_epoch.max(1)) as usize,
    }
}

/// Stack `n` uniformly drawn images (with replacement) into a batch.
fn sample_batch<S: Scalar>(
    set: &[Array3<S>],
    n: usize,
    rng: &mut ChaCha20Rng,
) -> ArrayD<S> {
    let (c, h, w) = set[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
    for k in 0..n {
        let idx = rng.gen_range(0..set.len());
        out.index_axis_mut(Axis(0), k).assign(&set[idx]);
    }
    out
}

/// With `STEGO_DEBUG_GRADS=1`, report any non-finite gradient (and the
/// largest finite one) to stderr before the optimizer consumes it. Purely
/// diagnostic; the training loop itself aborts on non-finite losses.
fn debug_scan_gradients<S: Scalar>(
    store: &ParamStore<S>,
    grads: &[Option<ArrayD<S>>],
    phase: &str,
) {
    if std::env::var_os("STEGO_DEBUG_GRADS").is_none() {
        return;
    }
    let (mut worst_name, mut worst_abs) = ("", 0.0f64);
    for (i, grad) in grads.iter().enumerate() {
        let Some(g) = grad else { continue };
        let mut bad = 0usize;
        let mut peak = 0.0f64;
        for &v in g.iter() {
            let v = v.to_f64();
            if !v.is_finite() {
                bad += 1;
            } else if v.abs() > peak {
                peak = v.abs();
            }
        }
        if bad > 0 {
            eprintln!(
                "debug: {phase} gradient for {} has {bad} non-finite of {} entries",
                store.get(i).name,
                g.len()
            );
        }
        if peak > worst_abs {
            worst_abs = peak;
            worst_name = &store.get(i).name;
        }
    }
    if worst_abs > 1e3 {
        eprintln!("debug: {phase} peak |grad| {worst_abs:.3e} at {worst_name}");
    }
}

fn train_iteration<S: Scalar>(
    st: &mut LoopState<S>,
    xs: &[Array3<S>],
    ys: &[Array3<S>],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossReport<S>, TrainError> {
    let b = cfg.hp.batch_size;
    let x = sample_batch(xs, b, &mut st.sampler);
    let y = sample_batch(ys, b, &mut st.sampler);
    let mode = cfg.model.cycle_mode();

    // Generator phase: both cycles on one tape, one backward pass, one Adam
    // step over generator and mask parameters.
    let d_hash = st.nets.store.content_hash(Some(ParamGroup::Discriminator));
    let mut tape = Tape::new();
    let lifted = lift(&st.nets.store, &mut tape, Some(ParamGroup::Generator));
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let noise = if mode == CycleMode::Stego {
        let shape = [b, st.nets.config.x_channels, y.shape()[2], y.shape()[3]];
        draw_noise::<S>(&shape, cfg.hp.epsilon_amplitude, &mut st.noise_rng)
    } else {
        None
    };
    let cv = run_cycles(&mut tape, &lifted, &st.nets, xv, yv, mode, noise.as_ref())?;
    let losses = generator_losses_on_tape(
        &mut tape,
        &lifted,
        &st.nets,
        &cv,
        &cfg.hp,
        cfg.gan_mode,
        cfg.adv_on_clean,
    )?;
    tape.backward(losses.total);
    let grads = collect_gradients(&st.nets.store, &tape, &lifted, ParamGroup::Generator);
    debug_scan_gradients(&st.nets.store, &grads, "generator");
    if std::env::var_os("STEGO_DEBUG_GRADS").is_some()
        && grads
            .iter()
            .flatten()
            .any(|g| g.iter().any(|&v| !v.to_f64().is_finite()))
    {
        for line in tape.debug_nonfinite_report() {
            eprintln!("debug: {line}");
        }
    }
    st.adam_g.apply(lr, &mut st.nets.store, &grads);
    if st.nets.store.content_hash(Some(ParamGroup::Discriminator)) != d_hash {
        return Err(TrainError::IsolationViolated(
            "generator update modified discriminator parameters",
        ));
    }
    let mut report = losses.report(&tape);

    // Detach the fakes the discriminators will study.
    let x_gen = tape.value(cv.backward.x_gen).clone();
    let y_gen = tape.value(cv.forward.y_gen).clone();
    let y_gen_clean = tape.value(cv.forward.y_gen_clean).clone();
    drop(tape);

    // Discriminator phase: judged against replay-pooled fakes; the target
    // discriminator sees both translations when `adv_on_clean` is set.
    let g_hash = st.nets.store.content_hash(Some(ParamGroup::Generator));
    let pooled_x = st.pool_x.query_batch(&x_gen, &mut st.pool_rng);
    let pooled_y = st.pool_y.query_batch(&y_gen, &mut st.pool_rng);
    let pooled_y_clean = if cfg.adv_on_clean {
        Some(st.pool_y.query_batch(&y_gen_clean, &mut st.pool_rng))
    } else {
        None
    };
    let mut tape = Tape::new();
    let lifted = lift(&st.nets.store, &mut tape, Some(ParamGroup::Discriminator));
    let real_x = tape.constant(x);
    let fake_x = tape.constant(pooled_x);
    let loss_dx =
        discriminator_loss_on_tape(&mut tape, &lifted, &st.nets.d_x, real_x, fake_x, cfg.gan_mode);
    let real_y = tape.constant(y);
    let fake_y = tape.constant(pooled_y);
    let loss_dy = match pooled_y_clean {
        Some(clean) => {
            let fake_clean = tape.constant(clean);
            let on_gen = discriminator_loss_on_tape(
                &mut tape, &lifted, &st.nets.d_y, real_y, fake_y, cfg.gan_mode,
            );
            let on_clean = discriminator_loss_on_tape(
                &mut tape, &lifted, &st.nets.d_y, real_y, fake_clean, cfg.gan_mode,
            );
            let half = S::from_f64(0.5);
            tape.weighted_sum(&[(on_gen, half), (on_clean, half)])
        }
        None => discriminator_loss_on_tape(
            &mut tape, &lifted, &st.nets.d_y, real_y, fake_y, cfg.gan_mode,
        ),
    };
    let total_disc = tape.weighted_sum(&[(loss_dx, S::one()), (loss_dy, S::one())]);
    tape.backward(total_disc);
    let grads = collect_gradients(&st.nets.store, &tape, &lifted, ParamGroup::Discriminator);
    debug_scan_gradients(&st.nets.store, &grads, "discriminator");
    st.adam_d.apply(lr, &mut st.nets.store, &grads);
    if st.nets.store.content_hash(Some(ParamGroup::Generator)) != g_hash {
        return Err(TrainError::IsolationViolated(
            "discriminator update modified generator parameters",
        ));
    }
    report.total_disc = tape.scalar_value(total_disc);
    Ok(report)
}
