//! Loss terms and their composition into the generator and discriminator
//! objectives.
//!
//! Every loss exists in two forms: a pure array-level function used for
//! reporting, oracle checks, and tests, and a tape-level builder used by the
//! training loop to get gradients. The array-level forms are the reference;
//! the tape-level forms are tested against them.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::cycle::{consistency_mask, consistency_mask_on_tape, CycleVars};
use crate::domain::{Hyperparameters, TranslationBundle};
use crate::networks::{Discriminator, Lifted, NetworkSet, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("shape mismatch in {loss}: {details}")]
    ShapeMismatch { loss: &'static str, details: String },
    #[error("mask regularization received a negative mask value {value}")]
    NegativeMask { value: f64 },
    #[error("non-finite value in loss component {component}")]
    NonFinite { component: &'static str },
    #[error("consistency mask: {0}")]
    Consistency(String),
}

/// Which adversarial objective the score maps feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversarialRole {
    Generator,
    Discriminator,
}

/// Adversarial loss family. `Lsgan` is the default least-squares form;
/// `Vanilla` is the log form, computed on raw scores as logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanMode {
    #[default]
    Lsgan,
    Vanilla,
}

impl std::str::FromStr for GanMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lsgan" => Ok(GanMode::Lsgan),
            "vanilla" => Ok(GanMode::Vanilla),
            other => Err(format!("unknown gan mode {other:?} (expected lsgan or vanilla)")),
        }
    }
}

impl std::fmt::Display for GanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GanMode::Lsgan => "lsgan",
            GanMode::Vanilla => "vanilla",
        })
    }
}

/// Per-iteration loss breakdown.
///
/// `total_gen` always equals
/// `gan + λ_cyc·cyc + λ_id·λ_cyc·id + λ_reg·reg + λ_match·match`
/// for the hyperparameters it was built with.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LossReport<S: Scalar> {
    pub gan: S,
    pub cyc: S,
    pub id: S,
    pub reg: S,
    pub r#match: S,
    pub total_gen: S,
    pub total_disc: S,
}

/// Column header for the line-delimited loss log.
pub const LOG_HEADER: &str = "iter gan cyc id reg match total_gen total_disc";

impl<S: Scalar> LossReport<S> {
    /// One space-separated log line in [`LOG_HEADER`] order.
    pub fn log_line(&self, iter: usize) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            iter, self.gan, self.cyc, self.id, self.reg, self.r#match, self.total_gen,
            self.total_disc
        )
    }

    /// Error in the weighted-sum decomposition of `total_gen`.
    pub fn decomposition_error(&self, hp: &Hyperparameters) -> f64 {
        let w = component_weights::<S>(hp);
        let mut acc = S::zero();
        for (v, a) in [self.gan, self.cyc, self.id, self.reg, self.r#match]
            .into_iter()
            .zip(w)
        {
            acc += a * v;
        }
        (acc - self.total_gen).to_f64().abs()
    }

    /// NaN/infinity abort signal: names the first bad component.
    pub fn check_finite(&self) -> Result<(), ObjectiveError> {
        let fields: [(&'static str, S); 7] = [
            ("gan", self.gan),
            ("cyc", self.cyc),
            ("id", self.id),
            ("reg", self.reg),
            ("match", self.r#match),
            ("total_gen", self.total_gen),
            ("total_disc", self.total_disc),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(ObjectiveError::NonFinite { component: name });
            }
        }
        Ok(())
    }
}

/// Weights applied to (gan, cyc, id, reg, match) when composing `total_gen`.
/// The identity term uses the conventional relative weight `λ_id·λ_cyc`.
fn component_weights<S: Scalar>(hp: &Hyperparameters) -> [S; 5] {
    let cyc = S::from_f64(hp.lambda_cyc);
    [
        S::one(),
        cyc,
        S::from_f64(hp.lambda_id) * cyc,
        S::from_f64(hp.lambda_reg),
        S::from_f64(hp.lambda_match),
    ]
}

fn mean<S: Scalar>(a: &ArrayD<S>) -> S {
    a.sum() / S::from_usize(a.len())
}

fn mean_abs_diff<S: Scalar>(a: &ArrayD<S>, b: &ArrayD<S>) -> S {
    let mut acc = S::zero();
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| acc += (x - y).abs());
    acc / S::from_usize(a.len())
}

fn softplus<S: Scalar>(v: S) -> S {
    v.max(S::zero()) + (S::one() + (-v.abs()).exp()).ln()
}

/// Adversarial loss on raw discriminator score maps.
///
/// Least-squares form: the discriminator pays `½·mean((d_real−1)²) +
/// ½·mean(d_fake²)`; the generator pays `mean((d_fake−1)²)`. The log form
/// treats scores as logits and uses the non-saturating generator objective.
/// `d_real` enters only the discriminator role.
pub fn adversarial_loss<S: Scalar>(
    d_real: &ArrayD<S>,
    d_fake: &ArrayD<S>,
    role: AdversarialRole,
    mode: GanMode,
) -> S {
    let one = S::one();
    let half = S::from_f64(0.5);
    match (mode, role) {
        (GanMode::Lsgan, AdversarialRole::Discriminator) => {
            let real = mean(&d_real.mapv(|v| (v - one) * (v - one)));
            let fake = mean(&d_fake.mapv(|v| v * v));
            half * real + half * fake
        }
        (GanMode::Lsgan, AdversarialRole::Generator) => {
            mean(&d_fake.mapv(|v| (v - one) * (v - one)))
        }
        (GanMode::Vanilla, AdversarialRole::Discriminator) => {
            let real = mean(&d_real.mapv(|v| softplus(-v)));
            let fake = mean(&d_fake.mapv(softplus));
            half * real + half * fake
        }
        (GanMode::Vanilla, AdversarialRole::Generator) => {
            mean(&d_fake.mapv(|v| softplus(-v)))
        }
    }
}

/// Mean-L1 reconstruction penalty over both cycles.
pub fn cycle_loss<S: Scalar>(
    x: &ArrayD<S>,
    x_rec: &ArrayD<S>,
    y: &ArrayD<S>,
    y_rec: &ArrayD<S>,
) -> Result<S, ObjectiveError> {
    if x.shape() != x_rec.shape() || y.shape() != y_rec.shape() {
        return Err(ObjectiveError::ShapeMismatch {
            loss: "cycle",
            details: format!(
                "x {:?} vs x_rec {:?}, y {:?} vs y_rec {:?}",
                x.shape(),
                x_rec.shape(),
                y.shape(),
                y_rec.shape()
            ),
        });
    }
    Ok(mean_abs_diff(x_rec, x) + mean_abs_diff(y_rec, y))
}

/// Mean-L1 penalty for the generators applied to their own output domain.
pub fn identity_loss<S: Scalar>(
    x: &ArrayD<S>,
    g_yx_of_x: &ArrayD<S>,
    y: &ArrayD<S>,
    g_xy_of_y: &ArrayD<S>,
) -> Result<S, ObjectiveError> {
    if x.shape() != g_yx_of_x.shape() || y.shape() != g_xy_of_y.shape() {
        return Err(ObjectiveError::ShapeMismatch {
            loss: "identity",
            details: format!(
                "x {:?} vs {:?}, y {:?} vs {:?}",
                x.shape(),
                g_yx_of_x.shape(),
                y.shape(),
                g_xy_of_y.shape()
            ),
        });
    }
    Ok(mean_abs_diff(g_yx_of_x, x) + mean_abs_diff(g_xy_of_y, y))
}

/// Square-root sparsity penalty on the two unmatchability masks: the mean of
/// `√m` over each mask's elements, summed over the two masks.
pub fn mask_regularization<S: Scalar>(
    m_gen: &ArrayD<S>,
    m_rec: &ArrayD<S>,
) -> Result<S, ObjectiveError> {
    for m in [m_gen, m_rec] {
        if let Some(v) = m.iter().find(|v| **v < S::zero()) {
            return Err(ObjectiveError::NegativeMask { value: Scalar::to_f64(*v) });
        }
    }
    Ok(mean(&m_gen.mapv(|v| v.sqrt())) + mean(&m_rec.mapv(|v| v.sqrt())))
}

fn masked_mean_abs_diff<S: Scalar>(
    weight_hw: &ndarray::Array3<S>,
    a: &ndarray::Array3<S>,
    b: &ndarray::Array3<S>,
) -> S {
    let (c, h, w) = a.dim();
    let mut acc = S::zero();
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                acc += weight_hw[[0, i, j]] * (a[[ci, i, j]] - b[[ci, i, j]]).abs();
            }
        }
    }
    acc / S::from_usize(c * h * w)
}

/// Penalty on injected-versus-clean output disagreement, restricted to
/// matchable regions: each term is the mean of `I(m) ⊙ |full − clean|` with
/// the consistency mask broadcast across color channels.
pub fn matchable_consistency_loss<S: Scalar>(
    bundle: &TranslationBundle<S>,
) -> Result<S, ObjectiveError> {
    let y_hw = {
        let d = bundle.y_gen.data.dim();
        (d.1, d.2)
    };
    if bundle.y_gen.data.dim() != bundle.y_gen_clean.data.dim()
        || bundle.y_rec.data.dim() != bundle.y_rec_clean.data.dim()
    {
        return Err(ObjectiveError::ShapeMismatch {
            loss: "matchable consistency",
            details: "full and clean outputs disagree in shape".into(),
        });
    }
    let i_gen = consistency_mask(&bundle.m_gen, y_hw)
        .map_err(|e| ObjectiveError::Consistency(e.to_string()))?;
    let i_rec = consistency_mask(&bundle.m_rec, {
        let d = bundle.y_rec.data.dim();
        (d.1, d.2)
    })
    .map_err(|e| ObjectiveError::Consistency(e.to_string()))?;
    let term1 = masked_mean_abs_diff(&i_gen.data, &bundle.y_gen.data, &bundle.y_gen_clean.data);
    let term2 = masked_mean_abs_diff(&i_rec.data, &bundle.y_rec.data, &bundle.y_rec_clean.data);
    Ok(term1 + term2)
}

/// Discriminator outputs and identity translations needed to score the
/// generator update. The identity translations live here rather than in the
/// bundle because the cycles never compute them; `None` skips the identity
/// term (weight zero).
pub struct GeneratorScores<S: Scalar> {
    /// Scores of the source-domain discriminator on `x_gen`.
    pub d_x_on_x_gen: ArrayD<S>,
    /// Scores of the target-domain discriminator on `y_gen`.
    pub d_y_on_y_gen: ArrayD<S>,
    /// Scores on `y_gen_clean` when the clean path is adversarially trained.
    pub d_y_on_y_gen_clean: Option<ArrayD<S>>,
    /// `G` from target to source applied to `x`.
    pub id_x: Option<ArrayD<S>>,
    /// `G` from source to target applied to `y`.
    pub id_y: Option<ArrayD<S>>,
}

/// Compose the full generator-side objective into a [`LossReport`]
/// (`total_disc` is left at zero; the training loop fills it after the
/// discriminator phase).
pub fn total_generator_loss<S: Scalar>(
    bundle: &TranslationBundle<S>,
    scores: &GeneratorScores<S>,
    hp: &Hyperparameters,
    mode: GanMode,
) -> Result<LossReport<S>, ObjectiveError> {
    let mut gan = adversarial_loss(
        &scores.d_y_on_y_gen,
        &scores.d_y_on_y_gen,
        AdversarialRole::Generator,
        mode,
    ) + adversarial_loss(
        &scores.d_x_on_x_gen,
        &scores.d_x_on_x_gen,
        AdversarialRole::Generator,
        mode,
    );
    if let Some(clean) = &scores.d_y_on_y_gen_clean {
        gan += adversarial_loss(clean, clean, AdversarialRole::Generator, mode);
    }
    let cyc = cycle_loss(
        &bundle.x.data.clone().into_dyn(),
        &bundle.x_rec.data.clone().into_dyn(),
        &bundle.y.data.clone().into_dyn(),
        &bundle.y_rec.data.clone().into_dyn(),
    )?;
    let id = match (&scores.id_x, &scores.id_y) {
        (Some(ix), Some(iy)) => identity_loss(
            &bundle.x.data.clone().into_dyn(),
            ix,
            &bundle.y.data.clone().into_dyn(),
            iy,
        )?,
        _ => S::zero(),
    };
    let reg = mask_regularization(
        &bundle.m_gen.data.clone().into_dyn(),
        &bundle.m_rec.data.clone().into_dyn(),
    )?;
    let mtch = matchable_consistency_loss(bundle)?;
    let w = component_weights::<S>(hp);
    let mut total = S::zero();
    for (v, a) in [gan, cyc, id, reg, mtch].into_iter().zip(w) {
        total += a * v;
    }
    let report = LossReport {
        gan,
        cyc,
        id,
        reg,
        r#match: mtch,
        total_gen: total,
        total_disc: S::zero(),
    };
    report.check_finite()?;
    Ok(report)
}

/// Tape handles for the generator objective's components (all 0-dim).
pub struct GeneratorLossVars {
    pub gan: Var,
    pub cyc: Var,
    pub id: Var,
    pub reg: Var,
    pub r#match: Var,
    pub total: Var,
}

impl GeneratorLossVars {
    /// Read the component values into a report (`total_disc` zero).
    pub fn report<S: Scalar>(&self, t: &Tape<S>) -> LossReport<S> {
        LossReport {
            gan: t.scalar_value(self.gan),
            cyc: t.scalar_value(self.cyc),
            id: t.scalar_value(self.id),
            reg: t.scalar_value(self.reg),
            r#match: t.scalar_value(self.r#match),
            total_gen: t.scalar_value(self.total),
            total_disc: S::zero(),
        }
    }
}

fn mean_l1_on_tape<S: Scalar>(t: &mut Tape<S>, a: Var, b: Var) -> Var {
    let d = t.sub(a, b);
    let d = t.abs(d);
    t.mean_all(d)
}

fn generator_adversarial_on_tape<S: Scalar>(t: &mut Tape<S>, d_fake: Var, mode: GanMode) -> Var {
    match mode {
        GanMode::Lsgan => {
            let shifted = t.affine(d_fake, S::one(), -S::one());
            let sq = t.square(shifted);
            t.mean_all(sq)
        }
        GanMode::Vanilla => {
            let neg = t.affine(d_fake, -S::one(), S::zero());
            let sp = t.softplus(neg);
            t.mean_all(sp)
        }
    }
}

/// Build the full generator objective on the tape. Discriminators are lifted
/// frozen (their parameters take no gradient when `l` was lifted with the
/// generator group trainable), so adversarial gradients flow only into the
/// generators and mask predictor.
///
/// `adv_on_clean` adds the clean translation `y_gen_clean` as a third
/// adversarial term. `with_identity` runs the two identity passes; disable
/// to skip them when the identity weight is zero.
pub fn generator_losses_on_tape<S: Scalar>(
    t: &mut Tape<S>,
    l: &Lifted,
    nets: &NetworkSet<S>,
    cv: &CycleVars,
    hp: &Hyperparameters,
    mode: GanMode,
    adv_on_clean: bool,
) -> Result<GeneratorLossVars, ObjectiveError> {
    let b = &cv.backward;
    let f = &cv.forward;

    let d_y_fake = nets.d_y.forward(t, l, f.y_gen);
    let adv_y = generator_adversarial_on_tape(t, d_y_fake, mode);
    let d_x_fake = nets.d_x.forward(t, l, b.x_gen);
    let adv_x = generator_adversarial_on_tape(t, d_x_fake, mode);
    let mut gan_terms = vec![(adv_y, S::one()), (adv_x, S::one())];
    if adv_on_clean {
        let d_y_clean = nets.d_y.forward(t, l, f.y_gen_clean);
        let adv_clean = generator_adversarial_on_tape(t, d_y_clean, mode);
        gan_terms.push((adv_clean, S::one()));
    }
    let gan = t.weighted_sum(&gan_terms);

    let cyc_x = mean_l1_on_tape(t, f.x_rec, f.x);
    let cyc_y = mean_l1_on_tape(t, b.y_rec, b.y);
    let cyc = t.weighted_sum(&[(cyc_x, S::one()), (cyc_y, S::one())]);

    let id = if hp.lambda_id != 0.0 {
        let id_x = nets.g_yx.forward(t, l, f.x);
        let id_y = nets.g_xy.forward(t, l, b.y);
        let id_x_l1 = mean_l1_on_tape(t, id_x, f.x);
        let id_y_l1 = mean_l1_on_tape(t, id_y, b.y);
        t.weighted_sum(&[(id_x_l1, S::one()), (id_y_l1, S::one())])
    } else {
        t.scalar(S::zero())
    };

    let (reg, mtch) = match (b.m_gen, f.m_rec) {
        (Some(m_gen), Some(m_rec)) => {
            let s_gen = t.sqrt(m_gen);
            let s_rec = t.sqrt(m_rec);
            let r_gen = t.mean_all(s_gen);
            let r_rec = t.mean_all(s_rec);
            let reg = t.weighted_sum(&[(r_gen, S::one()), (r_rec, S::one())]);

            let y_hw = {
                let s = t.value(f.y_gen).shape();
                (s[2], s[3])
            };
            let i_gen = consistency_mask_on_tape(t, m_gen, y_hw)
                .map_err(|e| ObjectiveError::Consistency(e.to_string()))?;
            let diff_gen = t.sub(f.y_gen, f.y_gen_clean);
            let abs_gen = t.abs(diff_gen);
            let w_gen = t.mul_mask(i_gen, abs_gen);
            let t1 = t.mean_all(w_gen);
            let i_rec = consistency_mask_on_tape(t, m_rec, y_hw)
                .map_err(|e| ObjectiveError::Consistency(e.to_string()))?;
            let diff_rec = t.sub(b.y_rec, b.y_rec_clean);
            let abs_rec = t.abs(diff_rec);
            let w_rec = t.mul_mask(i_rec, abs_rec);
            let t2 = t.mean_all(w_rec);
            let mtch = t.weighted_sum(&[(t1, S::one()), (t2, S::one())]);
            (reg, mtch)
        }
        _ => (t.scalar(S::zero()), t.scalar(S::zero())),
    };

    let w = component_weights::<S>(hp);
    let total = t.weighted_sum(&[
        (gan, w[0]),
        (cyc, w[1]),
        (id, w[2]),
        (reg, w[3]),
        (mtch, w[4]),
    ]);
    let vars = GeneratorLossVars { gan, cyc, id, reg, r#match: mtch, total };
    vars.report(t).check_finite()?;
    Ok(vars)
}

/// Build one discriminator's objective on the tape: real batch scored
/// against the target label, fake batch (already detached; typically from
/// the replay buffer) against the generated label.
pub fn discriminator_loss_on_tape<S: Scalar>(
    t: &mut Tape<S>,
    l: &Lifted,
    d: &Discriminator,
    real: Var,
    fake: Var,
    mode: GanMode,
) -> Var {
    let half = S::from_f64(0.5);
    let d_real = d.forward(t, l, real);
    let d_fake = d.forward(t, l, fake);
    match mode {
        GanMode::Lsgan => {
            let real_shift = t.affine(d_real, S::one(), -S::one());
            let real_sq = t.square(real_shift);
            let real_term = t.mean_all(real_sq);
            let fake_sq = t.square(d_fake);
            let fake_term = t.mean_all(fake_sq);
            t.weighted_sum(&[(real_term, half), (fake_term, half)])
        }
        GanMode::Vanilla => {
            let neg_real = t.affine(d_real, -S::one(), S::zero());
            let sp_real = t.softplus(neg_real);
            let real_term = t.mean_all(sp_real);
            let sp_fake = t.softplus(d_fake);
            let fake_term = t.mean_all(sp_fake);
            t.weighted_sum(&[(real_term, half), (fake_term, half)])
        }
    }
}

/// Array-level discriminator objective: run the network on both batches
/// without gradients and apply the adversarial formula.
pub fn discriminator_loss<S: Scalar>(
    store: &ParamStore<S>,
    d: &Discriminator,
    real_batch: &ArrayD<S>,
    fake_batch: &ArrayD<S>,
    mode: GanMode,
) -> S {
    let mut t = Tape::new();
    let l = crate::networks::lift(store, &mut t, None);
    let real = t.constant(real_batch.clone());
    let fake = t.constant(fake_batch.clone());
    let d_real = d.forward(&mut t, &l, real);
    let d_fake = d.forward(&mut t, &l, fake);
    adversarial_loss(
        t.value(d_real),
        t.value(d_fake),
        AdversarialRole::Discriminator,
        mode,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cycle::{run_cycles, run_cycles_inference, CycleMode};
    use crate::domain::{Domain, ImageTensor};
    use crate::networks::{build_networks, lift, NetworkConfig, ParamGroup};
    use ndarray::{Array3, ArrayD, Axis, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn filled(shape: &[usize], v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(shape), v)
    }

    fn random(shape: &[usize], rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn adversarial_examples() {
        let ones = filled(&[1, 1, 4, 4], 1.0);
        let zeros = filled(&[1, 1, 4, 4], 0.0);
        let halves = filled(&[1, 1, 4, 4], 0.5);
        // Perfect discriminator.
        assert_eq!(
            adversarial_loss(&ones, &zeros, AdversarialRole::Discriminator, GanMode::Lsgan),
            0.0
        );
        // Perfectly fooled generator.
        assert_eq!(
            adversarial_loss(&zeros, &ones, AdversarialRole::Generator, GanMode::Lsgan),
            0.0
        );
        // Undecided discriminator.
        assert!(
            (adversarial_loss(&halves, &halves, AdversarialRole::Discriminator, GanMode::Lsgan)
                - 0.25)
                .abs()
                < 1e-15
        );
        // Log form at zero logits: softplus(0) = ln 2 on both sides.
        let ln2 = std::f64::consts::LN_2;
        assert!(
            (adversarial_loss(&zeros, &zeros, AdversarialRole::Discriminator, GanMode::Vanilla)
                - ln2)
                .abs()
                < 1e-12
        );
        assert!(
            (adversarial_loss(&zeros, &zeros, AdversarialRole::Generator, GanMode::Vanilla) - ln2)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn cycle_and_identity_examples_and_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = random(&[3, 5, 5], &mut rng, -1.0, 1.0);
        let y = random(&[3, 5, 5], &mut rng, -1.0, 1.0);
        assert_eq!(cycle_loss(&x, &x, &y, &y).unwrap(), 0.0);
        let x_off = &x + 0.1;
        assert!((cycle_loss(&x, &x_off, &y, &y).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(identity_loss(&x, &x, &y, &y).unwrap(), 0.0);
        let x_off2 = &x + 0.2;
        assert!((identity_loss(&x, &x_off2, &y, &y).unwrap() - 0.2).abs() < 1e-12);

        // Brute-force oracle on random inputs.
        let a = random(&[2, 4, 3], &mut rng, -2.0, 2.0);
        let b = random(&[2, 4, 3], &mut rng, -2.0, 2.0);
        let c = random(&[1, 6, 2], &mut rng, -2.0, 2.0);
        let d = random(&[1, 6, 2], &mut rng, -2.0, 2.0);
        let mut acc1 = 0.0;
        for (u, v) in a.iter().zip(b.iter()) {
            acc1 += (v - u).abs();
        }
        let mut acc2 = 0.0;
        for (u, v) in c.iter().zip(d.iter()) {
            acc2 += (v - u).abs();
        }
        let oracle = acc1 / a.len() as f64 + acc2 / c.len() as f64;
        assert!((cycle_loss(&a, &b, &c, &d).unwrap() - oracle).abs() < 1e-12);
        assert!((identity_loss(&a, &b, &c, &d).unwrap() - oracle).abs() < 1e-12);

        assert!(cycle_loss(&a, &c, &b, &d).is_err());
    }

    #[test]
    fn mask_regularization_examples_and_monotonicity() {
        let zeros = filled(&[4, 3, 3], 0.0);
        let ones = filled(&[4, 3, 3], 1.0);
        let quarter = filled(&[4, 3, 3], 0.25);
        assert_eq!(mask_regularization(&zeros, &zeros).unwrap(), 0.0);
        assert!((mask_regularization(&ones, &zeros).unwrap() - 1.0).abs() < 1e-15);
        assert!((mask_regularization(&quarter, &zeros).unwrap() - 0.5).abs() < 1e-15);
        let negative = filled(&[4, 3, 3], -0.1);
        assert!(matches!(
            mask_regularization(&negative, &zeros),
            Err(ObjectiveError::NegativeMask { .. })
        ));

        // Elementwise increase never decreases the penalty.
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = random(&[2, 4, 4], &mut rng, 0.0, 1.0);
            let bumped = m.mapv(|v| (v + rng.gen_range(0.0..0.3)).min(1.0));
            assert!(
                mask_regularization(&bumped, &zeros).unwrap()
                    >= mask_regularization(&m, &zeros).unwrap()
            );
        }
    }

    fn dummy_bundle(
        m_gen: Array3<f64>,
        m_rec: Array3<f64>,
        y_gen: Array3<f64>,
        y_gen_clean: Array3<f64>,
        y_rec: Array3<f64>,
        y_rec_clean: Array3<f64>,
    ) -> TranslationBundle<f64> {
        let img = |d: Array3<f64>, dom| ImageTensor::from_raw(d, dom);
        let zeros_img = Array3::<f64>::zeros(y_gen.dim());
        let zeros_feat = Array3::<f64>::zeros(m_gen.dim());
        TranslationBundle {
            x: img(zeros_img.clone(), Domain::X),
            y: img(zeros_img.clone(), Domain::Y),
            x_gen: img(zeros_img.clone(), Domain::X),
            y_gen: img(y_gen, Domain::Y),
            y_gen_clean: img(y_gen_clean, Domain::Y),
            x_rec: img(zeros_img.clone(), Domain::X),
            y_rec: img(y_rec, Domain::Y),
            y_rec_clean: img(y_rec_clean, Domain::Y),
            z_gen: crate::domain::FeatureMap { data: zeros_feat.clone() },
            z_rec: crate::domain::FeatureMap { data: zeros_feat.clone() },
            m_gen: crate::domain::UnmatchabilityMask { data: m_gen },
            m_rec: crate::domain::UnmatchabilityMask { data: m_rec },
            z_gen_unmatch: crate::domain::FeatureMap { data: zeros_feat.clone() },
            z_gen_match: crate::domain::FeatureMap { data: zeros_feat },
        }
    }

    #[test]
    fn matchable_consistency_examples_and_oracle() {
        let hw = (3usize, 8usize, 8usize);
        let mhw = (4usize, 4usize, 4usize);
        let same = Array3::<f64>::from_elem(hw, 0.3);
        // Equal outputs: zero regardless of masks.
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let m_any = Array3::from_shape_fn(mhw, |_| rng.gen_range(0.0..1.0));
        let b = dummy_bundle(
            m_any.clone(),
            m_any.clone(),
            same.clone(),
            same.clone(),
            same.clone(),
            same.clone(),
        );
        assert_eq!(matchable_consistency_loss(&b).unwrap(), 0.0);

        // Fully unmatchable masks silence any difference.
        let ones_mask = Array3::<f64>::ones(mhw);
        let diff = Array3::<f64>::from_elem(hw, 0.9);
        let b = dummy_bundle(
            ones_mask.clone(),
            ones_mask.clone(),
            diff.clone(),
            same.clone(),
            diff.clone(),
            same.clone(),
        );
        assert_eq!(matchable_consistency_loss(&b).unwrap(), 0.0);

        // Fully matchable, constant 0.3 difference in the first term only.
        let zeros_mask = Array3::<f64>::zeros(mhw);
        let shifted = &same + 0.3;
        let b = dummy_bundle(
            zeros_mask.clone(),
            zeros_mask.clone(),
            shifted,
            same.clone(),
            same.clone(),
            same.clone(),
        );
        assert!((matchable_consistency_loss(&b).unwrap() - 0.3).abs() < 1e-12);

        // Random case against a from-scratch oracle.
        let m_gen = Array3::<f64>::from_shape_fn(mhw, |_| rng.gen_range(0.0..1.0));
        let m_rec = Array3::<f64>::from_shape_fn(mhw, |_| rng.gen_range(0.0..1.0));
        let y_gen = Array3::<f64>::from_shape_fn(hw, |_| rng.gen_range(-1.0..1.0));
        let y_gen_clean = Array3::<f64>::from_shape_fn(hw, |_| rng.gen_range(-1.0..1.0));
        let y_rec = Array3::<f64>::from_shape_fn(hw, |_| rng.gen_range(-1.0..1.0));
        let y_rec_clean = Array3::<f64>::from_shape_fn(hw, |_| rng.gen_range(-1.0..1.0));
        let mut oracle = 0.0;
        for (m, a, bb) in [
            (&m_gen, &y_gen, &y_gen_clean),
            (&m_rec, &y_rec, &y_rec_clean),
        ] {
            let mut acc = 0.0;
            for c in 0..hw.0 {
                for i in 0..hw.1 {
                    for j in 0..hw.2 {
                        // Channel-max of the mask at the source cell of the
                        // 2x nearest-neighbor upsampling, flipped.
                        let (si, sj) = (i * mhw.1 / hw.1, j * mhw.2 / hw.2);
                        let mut mx = f64::MIN;
                        for mc in 0..mhw.0 {
                            mx = mx.max(m[[mc, si, sj]]);
                        }
                        acc += (1.0 - mx) * (a[[c, i, j]] - bb[[c, i, j]]).abs();
                    }
                }
            }
            oracle += acc / (hw.0 * hw.1 * hw.2) as f64;
        }
        let b = dummy_bundle(m_gen, m_rec, y_gen, y_gen_clean, y_rec, y_rec_clean);
        assert!((matchable_consistency_loss(&b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn total_composes_unit_components_to_17_3() {
        let hp = Hyperparameters::default();
        assert_eq!(hp.lambda_cyc, 10.0);
        assert_eq!(hp.lambda_id, 0.5);
        assert_eq!(hp.lambda_reg, 0.3);
        assert_eq!(hp.lambda_match, 1.0);

        let hw = (3usize, 8usize, 8usize);
        let mhw = (4usize, 4usize, 4usize);
        let base = Array3::<f64>::from_elem(hw, 0.1);
        // reg: m_gen all ones, m_rec all zeros -> 1. The all-ones m_gen also
        // silences the first match term; the second term carries the 1.
        let m_gen = Array3::<f64>::ones(mhw);
        let m_rec = Array3::<f64>::zeros(mhw);
        // y_rec equals y (zeros) so the cycle picks up nothing from the y
        // side; its clean counterpart sits 1 below so the second match term
        // carries exactly 1.
        let y_rec = Array3::<f64>::zeros(hw);
        let y_rec_clean = &y_rec - 1.0;
        let mut bundle = dummy_bundle(
            m_gen,
            m_rec,
            base.clone(),
            base.clone(),
            y_rec,
            y_rec_clean,
        );
        // cyc: x_rec offset by 1 -> 1.
        bundle.x_rec = ImageTensor::from_raw(&bundle.x.data + 1.0, Domain::X);
        // gan: d_y scores 0 (-> 1), d_x scores 1 (-> 0).
        let scores = GeneratorScores {
            d_x_on_x_gen: filled(&[1, 1, 2, 2], 1.0),
            d_y_on_y_gen: filled(&[1, 1, 2, 2], 0.0),
            d_y_on_y_gen_clean: None,
            // id: both passes off by 0.5 -> 1.
            id_x: Some(bundle.x.data.clone().into_dyn() + 0.5),
            id_y: Some(bundle.y.data.clone().into_dyn() + 0.5),
        };
        let report = total_generator_loss(&bundle, &scores, &hp, GanMode::Lsgan).unwrap();
        assert!((report.gan - 1.0).abs() < 1e-12, "gan {}", report.gan);
        assert!((report.cyc - 1.0).abs() < 1e-12, "cyc {}", report.cyc);
        assert!((report.id - 1.0).abs() < 1e-12, "id {}", report.id);
        assert!((report.reg - 1.0).abs() < 1e-12, "reg {}", report.reg);
        assert!((report.r#match - 1.0).abs() < 1e-12, "match {}", report.r#match);
        assert!(
            (report.total_gen - 17.3).abs() < 1e-12,
            "total {}",
            report.total_gen
        );
        assert!(report.decomposition_error(&hp) < 1e-10);

        // All-zero components give zero total.
        let zeros_hw = Array3::<f64>::zeros(hw);
        let zero_bundle = dummy_bundle(
            Array3::zeros(mhw),
            Array3::zeros(mhw),
            zeros_hw.clone(),
            zeros_hw.clone(),
            zeros_hw.clone(),
            zeros_hw,
        );
        let zero_scores = GeneratorScores {
            d_x_on_x_gen: filled(&[1, 1, 2, 2], 1.0),
            d_y_on_y_gen: filled(&[1, 1, 2, 2], 1.0),
            d_y_on_y_gen_clean: None,
            id_x: Some(zero_bundle.x.data.clone().into_dyn()),
            id_y: Some(zero_bundle.y.data.clone().into_dyn()),
        };
        let report =
            total_generator_loss(&zero_bundle, &zero_scores, &hp, GanMode::Lsgan).unwrap();
        assert_eq!(report.total_gen, 0.0);
    }

    #[test]
    fn nan_components_are_reported() {
        let report = LossReport {
            gan: 1.0f64,
            cyc: f64::NAN,
            id: 0.0,
            reg: 0.0,
            r#match: 0.0,
            total_gen: f64::NAN,
            total_disc: 0.0,
        };
        match report.check_finite() {
            Err(ObjectiveError::NonFinite { component }) => assert_eq!(component, "cyc"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn log_line_matches_header_shape() {
        let report = LossReport {
            gan: 1.0f32,
            cyc: 2.0,
            id: 3.0,
            reg: 4.0,
            r#match: 5.0,
            total_gen: 6.0,
            total_disc: 7.0,
        };
        let line = report.log_line(42);
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields.len(), LOG_HEADER.split(' ').count());
        assert_eq!(fields[0], "42");
        assert_eq!(fields[1], "1.000000");
        assert_eq!(fields[7], "7.000000");
    }

    fn small_nets(seed: u64) -> crate::networks::NetworkSet<f64> {
        let cfg = NetworkConfig {
            x_channels: 3,
            y_channels: 3,
            base_width: 4,
            split_depth: 3,
        };
        build_networks(&cfg, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn tape_losses_agree_with_array_level_forms() {
        let nets = small_nets(21);
        let hp = Hyperparameters::default();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = ImageTensor::from_raw(
            Array3::from_shape_fn((3, 32, 32), |_| rng.gen_range(-1.0..1.0)),
            Domain::X,
        );
        let y = ImageTensor::from_raw(
            Array3::from_shape_fn((3, 32, 32), |_| rng.gen_range(-1.0..1.0)),
            Domain::Y,
        );

        let mut t = Tape::new();
        let l = lift(&nets.store, &mut t, Some(ParamGroup::Generator));
        let xv = t.constant(x.data.clone().insert_axis(Axis(0)).into_dyn());
        let yv = t.constant(y.data.clone().insert_axis(Axis(0)).into_dyn());
        let cv = run_cycles(&mut t, &l, &nets, xv, yv, CycleMode::Stego, None).unwrap();
        let glv =
            generator_losses_on_tape(&mut t, &l, &nets, &cv, &hp, GanMode::Lsgan, false).unwrap();
        let tape_report = glv.report(&t);

        // Rebuild the same quantities at array level from an inference pass.
        let mut rng2 = ChaCha20Rng::seed_from_u64(99);
        let bundle =
            run_cycles_inference(&nets, &x, &y, CycleMode::Stego, 0.0, &mut rng2).unwrap();
        let batch = |a: &Array3<f64>| a.clone().insert_axis(Axis(0)).into_dyn();
        let score = |d: &Discriminator, img: &Array3<f64>| {
            let mut tt = Tape::new();
            let ll = lift(&nets.store, &mut tt, None);
            let v = tt.constant(batch(img));
            let s = d.forward(&mut tt, &ll, v);
            tt.value(s).clone()
        };
        let id_pass = |g: &crate::networks::SplitGenerator, img: &Array3<f64>| {
            let mut tt = Tape::new();
            let ll = lift(&nets.store, &mut tt, None);
            let v = tt.constant(batch(img));
            let o = g.forward(&mut tt, &ll, v);
            tt.value(o).clone().index_axis_move(Axis(0), 0)
        };
        let scores = GeneratorScores {
            d_x_on_x_gen: score(&nets.d_x, &bundle.x_gen.data),
            d_y_on_y_gen: score(&nets.d_y, &bundle.y_gen.data),
            d_y_on_y_gen_clean: None,
            id_x: Some(id_pass(&nets.g_yx, &x.data)),
            id_y: Some(id_pass(&nets.g_xy, &y.data)),
        };
        let array_report = total_generator_loss(&bundle, &scores, &hp, GanMode::Lsgan).unwrap();

        for (name, a, b) in [
            ("gan", tape_report.gan, array_report.gan),
            ("cyc", tape_report.cyc, array_report.cyc),
            ("id", tape_report.id, array_report.id),
            ("reg", tape_report.reg, array_report.reg),
            ("match", tape_report.r#match, array_report.r#match),
            ("total", tape_report.total_gen, array_report.total_gen),
        ] {
            assert!(
                (a - b).abs() <= 1e-9 * b.abs().max(1.0),
                "{name}: tape {a} vs array {b}"
            );
        }
        assert!(tape_report.decomposition_error(&hp) < 1e-10);
    }

    #[test]
    fn generator_total_gradients_match_finite_differences() {
        use crate::autograd::gradcheck::check_gradients;
        use crate::networks::collect_gradients;

        let nets = small_nets(22);
        let hp = Hyperparameters::default();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x_data = Array3::from_shape_fn((3, 24, 24), |_| rng.gen_range(-0.9..0.9));
        let y_data = Array3::from_shape_fn((3, 24, 24), |_| rng.gen_range(-0.9..0.9));
        let noise = crate::cycle::draw_noise::<f64>(&[1, 3, 24, 24], 0.01, &mut rng);

        // Analytic gradients for every generator-group parameter.
        let mut t = Tape::new();
        let l = lift(&nets.store, &mut t, Some(ParamGroup::Generator));
        let xv = t.constant(x_data.clone().insert_axis(Axis(0)).into_dyn());
        let yv = t.constant(y_data.clone().insert_axis(Axis(0)).into_dyn());
        let cv =
            run_cycles(&mut t, &l, &nets, xv, yv, CycleMode::Stego, noise.as_ref()).unwrap();
        let glv =
            generator_losses_on_tape(&mut t, &l, &nets, &cv, &hp, GanMode::Lsgan, true).unwrap();
        t.backward(glv.total);
        let grads = collect_gradients(&nets.store, &t, &l, ParamGroup::Generator);

        // Probe three parameter tensors spread across the networks.
        let probe_names = ["g_xy.stem0.w", "g_yx.block1.conv2.w", "mask.conv1.b"];
        for name in probe_names {
            let (idx, param) = nets
                .store
                .iter()
                .enumerate()
                .find(|(_, p)| p.name == name)
                .unwrap();
            let analytic = grads[idx].clone().expect("generator param has grad");
            let value = param.value.clone();
            let nets_ref = &nets;
            let hp_ref = &hp;
            let x_ref = &x_data;
            let y_ref = &y_data;
            let noise_ref = noise.as_ref();
            let f = move |inputs: &[ArrayD<f64>]| -> f64 {
                let mut store = nets_ref.store.clone();
                let pi = store.find(name).unwrap();
                store.get_mut(pi).value = inputs[0].clone();
                let mut t = Tape::new();
                let l = lift(&store, &mut t, None);
                let xv = t.constant(x_ref.clone().insert_axis(Axis(0)).into_dyn());
                let yv = t.constant(y_ref.clone().insert_axis(Axis(0)).into_dyn());
                let cv =
                    run_cycles(&mut t, &l, nets_ref, xv, yv, CycleMode::Stego, noise_ref)
                        .unwrap();
                let glv = generator_losses_on_tape(
                    &mut t, &l, nets_ref, &cv, hp_ref, GanMode::Lsgan, true,
                )
                .unwrap();
                t.scalar_value(glv.total)
            };
            // Step 1e-7: this check runs through full networks, where a
            // wider step makes finite differences cross ReLU/argmax kinks
            // and report spurious mismatches.
            let report = check_gradients(&[value], &[analytic], f, 1e-7, 1e-4, 6)
                .unwrap_or_else(|e| panic!("gradient check failed for {name}: {e}"));
            assert!(report.checked >= 1);
        }
    }

    #[test]
    fn discriminator_loss_trains_only_its_own_group() {
        let nets = small_nets(23);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let real = random(&[1, 3, 24, 24], &mut rng, -1.0, 1.0);
        let fake = random(&[1, 3, 24, 24], &mut rng, -1.0, 1.0);

        let mut t = Tape::new();
        let l = lift(&nets.store, &mut t, Some(ParamGroup::Discriminator));
        let rv = t.constant(real.clone());
        let fv = t.constant(fake.clone());
        let loss = discriminator_loss_on_tape(&mut t, &l, &nets.d_x, rv, fv, GanMode::Lsgan);
        let loss_val = t.scalar_value(loss);
        t.backward(loss);

        // Value agrees with the array-level form.
        let direct = discriminator_loss(&nets.store, &nets.d_x, &real, &fake, GanMode::Lsgan);
        assert!((loss_val - direct).abs() < 1e-12);

        // Generator parameters stay out of the gradient graph.
        use crate::networks::collect_gradients;
        let dgrads = collect_gradients(&nets.store, &t, &l, ParamGroup::Discriminator);
        let ggrads = collect_gradients(&nets.store, &t, &l, ParamGroup::Generator);
        let d_x_touched = nets
            .store
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with("d_x."))
            .all(|(i, _)| dgrads[i].is_some());
        assert!(d_x_touched, "every d_x parameter receives a gradient");
        assert!(ggrads.iter().all(|g| g.is_none()));
    }

    #[test]
    fn gan_mode_parses_and_serializes() {
        assert_eq!("lsgan".parse::<GanMode>().unwrap(), GanMode::Lsgan);
        assert_eq!("vanilla".parse::<GanMode>().unwrap(), GanMode::Vanilla);
        assert!("wgan".parse::<GanMode>().is_err());
        assert_eq!(serde_json::to_string(&GanMode::Lsgan).unwrap(), "\"lsgan\"");
        assert_eq!(GanMode::Vanilla.to_string(), "vanilla");
    }
}
