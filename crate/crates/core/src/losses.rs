//! Training objectives for the three model families.
//!
//! Adversarial terms are binary cross-entropy on pre-sigmoid PatchGAN score
//! maps, averaged over every position. Each objective can be built for one
//! optimization phase only, skipping the terms the other phase needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::nets::{BoundParams, Ctx, Discriminator, Generator, Mode, MultiscaleDiscriminator};
use crate::tensor::Tensor;

pub const KEY_ADV: &str = "loss_g_adv";
pub const KEY_L1: &str = "loss_g_l1";
pub const KEY_CYC: &str = "loss_g_cyc";
pub const KEY_FM: &str = "loss_g_fm";
pub const KEY_MSE: &str = "loss_g_mse";
pub const KEY_D: &str = "loss_d";

/// Weights of the RGB-stage generator terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdWeights {
    pub mse: f64,
    pub bce: f64,
    pub feat_match: f64,
}

impl Default for HdWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            bce: 1.0,
            feat_match: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_cyc: f64,
    pub hd: HdWeights,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 100.0,
            lambda_cyc: 10.0,
            hd: HdWeights::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_l1,
            self.lambda_cyc,
            self.hd.mse,
            self.hd.bce,
            self.hd.feat_match,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Which losses an objective should build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Discriminator losses only; generator outputs are detached.
    Discriminator,
    /// Generator losses only.
    Generator,
    /// Both, from a single forward pass.
    Both,
}

impl Phase {
    fn wants_d(self) -> bool {
        self != Phase::Generator
    }

    fn wants_g(self) -> bool {
        self != Phase::Discriminator
    }
}

/// Loss nodes produced by an objective.
#[derive(Debug, Default)]
pub struct Terms {
    pub loss_g: Option<Var>,
    /// Total discriminator loss (for CycleGAN, `D_X + D_Y`).
    pub loss_d: Option<Var>,
    /// Named scalar components, keyed by the metric log names.
    pub components: Vec<(String, Var)>,
}

impl Terms {
    pub fn component(&self, key: &str) -> Option<Var> {
        self.components
            .iter()
            .find(|(k, _)| k == key)
            .map(|&(_, v)| v)
    }

    pub fn require_g(&self) -> Result<Var> {
        self.loss_g
            .ok_or_else(|| Error::invalid("generator loss was not built for this phase"))
    }

    pub fn require_d(&self) -> Result<Var> {
        self.loss_d
            .ok_or_else(|| Error::invalid("discriminator loss was not built for this phase"))
    }
}

fn check_same(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    Ok(())
}

/// Discriminator half of the conditional GAN loss:
/// `½[BCE(σ(real), 1) + BCE(σ(fake), 0)]`.
pub fn cgan_d(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    check_same(tape, d_real, d_fake, "score maps")?;
    let r = tape.bce_with_logits(d_real, 1.0);
    let f = tape.bce_with_logits(d_fake, 0.0);
    let s = tape.add(r, f)?;
    Ok(tape.scale(s, 0.5))
}

/// Generator half: `BCE(σ(fake), 1)`.
pub fn cgan_g(tape: &mut Tape, d_fake: Var) -> Var {
    tape.bce_with_logits(d_fake, 1.0)
}

/// `(loss_d, loss_g)` for one pair of score maps.
pub fn cgan_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    let loss_d = cgan_d(tape, d_real, d_fake)?;
    Ok((loss_d, cgan_g(tape, d_fake)))
}

/// [`cgan_loss`] on plain tensors.
pub fn cgan_loss_values(d_real: &Tensor, d_fake: &Tensor) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let r = tape.constant(d_real.clone());
    let f = tape.constant(d_fake.clone());
    let (d, g) = cgan_loss(&mut tape, r, f)?;
    Ok((tape.scalar(d), tape.scalar(g)))
}

/// Mean absolute difference.
pub fn l1_loss(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(y.clone());
    let b = tape.constant(y_hat.clone());
    let l = tape.l1(a, b)?;
    Ok(tape.scalar(l))
}

fn sum(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter().copied();
    let first = it
        .next()
        .ok_or_else(|| Error::invalid("sum of no terms"))?;
    it.try_fold(first, |acc, v| tape.add(acc, v))
}

fn weighted(tape: &mut Tape, v: Var, w: f64) -> Var {
    if w == 1.0 {
        v
    } else {
        tape.scale(v, w)
    }
}

/// A generator with its tape binding.
pub struct BoundGenerator<'a> {
    pub net: &'a Generator,
    pub params: &'a BoundParams,
}

impl BoundGenerator<'_> {
    pub fn forward<R: Rng>(&self, tape: &mut Tape, x: Var, rng: &mut R) -> Result<Var> {
        let mut ctx = Ctx {
            tape,
            params: self.params,
            mode: Mode::Train,
            rng: Some(rng),
        };
        self.net.forward(&mut ctx, x)
    }
}

pub struct BoundDiscriminator<'a> {
    pub net: &'a Discriminator,
    pub params: &'a BoundParams,
}

impl BoundDiscriminator<'_> {
    pub fn scores(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut ctx: Ctx<'_, rand_chacha::ChaCha8Rng> = Ctx {
            tape,
            params: self.params,
            mode: Mode::Train,
            rng: None,
        };
        Ok(self.net.forward(&mut ctx, x)?.scores)
    }
}

/// Conditional objective: `cGAN(G, D) + λ·L1(y, G(x))`, where D judges the
/// channel concatenation of the coarse input and a fine mask.
///
/// Returns the generated output alongside the loss terms.
#[allow(clippy::too_many_arguments)]
pub fn pix2pix_objective<R: Rng>(
    tape: &mut Tape,
    g: &BoundGenerator<'_>,
    d: &BoundDiscriminator<'_>,
    coarse: Var,
    fine: Var,
    weights: &LossWeights,
    phase: Phase,
    rng: &mut R,
) -> Result<(Terms, Var)> {
    check_same(tape, coarse, fine, "pair")?;
    let fake = g.forward(tape, coarse, rng)?;
    let mut terms = Terms::default();
    let fake_for_d = if phase == Phase::Discriminator {
        tape.detach(fake)
    } else {
        fake
    };
    let fake_in = tape.concat(coarse, fake_for_d)?;
    let fake_scores = d.scores(tape, fake_in)?;
    if phase.wants_d() {
        let real_in = tape.concat(coarse, fine)?;
        let real_scores = d.scores(tape, real_in)?;
        let loss_d = cgan_d(tape, real_scores, fake_scores)?;
        terms.loss_d = Some(loss_d);
        terms.components.push((KEY_D.into(), loss_d));
    }
    if phase.wants_g() {
        let adv = cgan_g(tape, fake_scores);
        let l1 = tape.l1(fake, fine)?;
        let scaled = weighted(tape, l1, weights.lambda_l1);
        terms.loss_g = Some(tape.add(adv, scaled)?);
        terms.components.push((KEY_ADV.into(), adv));
        terms.components.push((KEY_L1.into(), l1));
    }
    Ok((terms, fake))
}

/// Losses of the unpaired objective.
#[derive(Debug, Default)]
pub struct CycleTerms {
    pub terms: Terms,
    pub loss_dx: Option<Var>,
    pub loss_dy: Option<Var>,
}

/// Unpaired objective: two adversarial games (`G: X→Y` judged by `D_Y`,
/// `F: Y→X` judged by `D_X`) plus `λ·(‖F(G(x))−x‖₁ + ‖G(F(y))−y‖₁)`.
#[allow(clippy::too_many_arguments)]
pub fn cyclegan_objective<R: Rng>(
    tape: &mut Tape,
    g: &BoundGenerator<'_>,
    f: &BoundGenerator<'_>,
    d_x: &BoundDiscriminator<'_>,
    d_y: &BoundDiscriminator<'_>,
    x: Var,
    y: Var,
    weights: &LossWeights,
    phase: Phase,
    rng: &mut R,
) -> Result<CycleTerms> {
    let fake_y = g.forward(tape, x, rng)?;
    let fake_x = f.forward(tape, y, rng)?;
    let mut out = CycleTerms::default();
    if phase.wants_d() {
        let (fy, fx) = if phase == Phase::Discriminator {
            (tape.detach(fake_y), tape.detach(fake_x))
        } else {
            (fake_y, fake_x)
        };
        let ry = d_y.scores(tape, y)?;
        let sy = d_y.scores(tape, fy)?;
        let loss_dy = cgan_d(tape, ry, sy)?;
        let rx = d_x.scores(tape, x)?;
        let sx = d_x.scores(tape, fx)?;
        let loss_dx = cgan_d(tape, rx, sx)?;
        let total = tape.add(loss_dx, loss_dy)?;
        out.loss_dx = Some(loss_dx);
        out.loss_dy = Some(loss_dy);
        out.terms.loss_d = Some(total);
        out.terms.components.push((KEY_D.into(), total));
    }
    if phase.wants_g() {
        let sy = d_y.scores(tape, fake_y)?;
        let sx = d_x.scores(tape, fake_x)?;
        let adv_g = cgan_g(tape, sy);
        let adv_f = cgan_g(tape, sx);
        let adv = tape.add(adv_g, adv_f)?;
        let rec_x = f.forward(tape, fake_y, rng)?;
        let rec_y = g.forward(tape, fake_x, rng)?;
        let cx = tape.l1(rec_x, x)?;
        let cy = tape.l1(rec_y, y)?;
        let cyc = tape.add(cx, cy)?;
        let scaled = weighted(tape, cyc, weights.lambda_cyc);
        out.terms.loss_g = Some(tape.add(adv, scaled)?);
        out.terms.components.push((KEY_ADV.into(), adv));
        out.terms.components.push((KEY_CYC.into(), cyc));
    }
    Ok(out)
}

/// RGB-stage objective over a two-scale discriminator. Per scale, the
/// generator pays an adversarial BCE term, the squared gap between mean
/// sigmoid scores on fake and (constant) real inputs, and a feature-matching
/// term: the mean over hidden blocks of the L1 gap to the real features.
#[allow(clippy::too_many_arguments)]
pub fn hd_objective<R: Rng>(
    tape: &mut Tape,
    g: &BoundGenerator<'_>,
    d: &MultiscaleDiscriminator,
    d_params: &[BoundParams],
    mask: Var,
    rgb_real: Var,
    weights: &LossWeights,
    phase: Phase,
    rng: &mut R,
) -> Result<(Terms, Var)> {
    if d.n_scales() != 2 {
        return Err(Error::invalid(format!(
            "the RGB objective needs a two-scale discriminator, got {} scale(s)",
            d.n_scales()
        )));
    }
    let fake = g.forward(tape, mask, rng)?;
    check_same(tape, fake, rgb_real, "generated vs real image")?;
    let fake_for_d = if phase == Phase::Discriminator {
        tape.detach(fake)
    } else {
        fake
    };
    let real_in = tape.concat(mask, rgb_real)?;
    let fake_in = tape.concat(mask, fake_for_d)?;
    let real_outs = d.forward::<R>(tape, d_params, real_in, None)?;
    let fake_outs = d.forward::<R>(tape, d_params, fake_in, None)?;
    let mut terms = Terms::default();
    if phase.wants_d() {
        let per_scale = real_outs
            .iter()
            .zip(&fake_outs)
            .map(|(r, f)| cgan_d(tape, r.scores, f.scores))
            .collect::<Result<Vec<_>>>()?;
        let loss_d = sum(tape, &per_scale)?;
        terms.loss_d = Some(loss_d);
        terms.components.push((KEY_D.into(), loss_d));
    }
    if phase.wants_g() {
        let (mut advs, mut mses, mut fms) = (Vec::new(), Vec::new(), Vec::new());
        for (r, f) in real_outs.iter().zip(&fake_outs) {
            advs.push(cgan_g(tape, f.scores));

            let sf = tape.sigmoid(f.scores);
            let mf = tape.mean(sf);
            let sr = tape.sigmoid(r.scores);
            let mr = tape.mean(sr);
            let mr = tape.detach(mr);
            let gap = tape.sub(mf, mr)?;
            mses.push(tape.square(gap));

            let layer_l1 = r
                .features
                .iter()
                .zip(&f.features)
                .map(|(&rf, &ff)| {
                    let rf = tape.detach(rf);
                    tape.l1(ff, rf)
                })
                .collect::<Result<Vec<_>>>()?;
            let total = sum(tape, &layer_l1)?;
            fms.push(tape.scale(total, 1.0 / layer_l1.len() as f64));
        }
        let adv = sum(tape, &advs)?;
        let mse = sum(tape, &mses)?;
        let fm = sum(tape, &fms)?;
        let parts = [
            weighted(tape, adv, weights.hd.bce),
            weighted(tape, mse, weights.hd.mse),
            weighted(tape, fm, weights.hd.feat_match),
        ];
        terms.loss_g = Some(sum(tape, &parts)?);
        terms.components.push((KEY_ADV.into(), adv));
        terms.components.push((KEY_MSE.into(), mse));
        terms.components.push((KEY_FM.into(), fm));
    }
    Ok((terms, fake))
}
