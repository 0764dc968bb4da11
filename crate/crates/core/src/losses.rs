//! The seven training losses and their weighted total.
//!
//! Every term is a differentiable scalar built on the same tape as the
//! forward pass, averaged over the batch. Gradient routing per term:
//!
//! | term      | extractor | classifier | localizer |
//! |-----------|-----------|------------|-----------|
//! | `cls`     | yes       | yes        | no        |
//! | `cls-fg`  | yes       | yes        | yes       |
//! | `ae`      | yes       | yes        | no        |
//! | `ae-fg`   | yes       | yes        | yes       |
//! | `pseudo`  | yes       | no         | yes       |
//! | `bas`     | yes       | no (configurable) | yes |
//! | `ac`      | yes       | no         | yes       |

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::masks::{self, MaskThresholds};
use crate::model::{ActivationBundle, BoundNet};

/// One of the seven loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Cls,
    ClsFg,
    Ae,
    AeFg,
    Pseudo,
    Bas,
    Ac,
}

impl Term {
    pub const ALL: [Term; 7] = [Term::Cls, Term::ClsFg, Term::Ae, Term::AeFg, Term::Pseudo, Term::Bas, Term::Ac];

    /// The six weighted terms, in weight order.
    pub const WEIGHTED: [Term; 6] = [Term::ClsFg, Term::Ae, Term::AeFg, Term::Pseudo, Term::Bas, Term::Ac];

    pub fn name(self) -> &'static str {
        match self {
            Term::Cls => "cls",
            Term::ClsFg => "cls-fg",
            Term::Ae => "ae",
            Term::AeFg => "ae-fg",
            Term::Pseudo => "pseudo",
            Term::Bas => "bas",
            Term::Ac => "ac",
        }
    }

    /// Position among the weighted terms; `None` for `cls`.
    pub fn weight_index(self) -> Option<usize> {
        Term::WEIGHTED.iter().position(|&t| t == self)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Term::ALL
            .into_iter()
            .find(|t| t.name() == s || t.name().replace('-', "_") == s)
            .ok_or_else(|| Error::Config(format!("unknown loss term `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub thresholds: MaskThresholds,
    /// Weights of `cls-fg`, `ae`, `ae-fg`, `pseudo`, `bas`, `ac`.
    pub gamma: [f64; 6],
    /// Added to the full-image score in the background ratio.
    pub epsilon: f64,
    /// Keep classifier parameters out of the background-suppression gradient.
    pub bas_detach_classifier: bool,
    /// Per weighted term; a disabled term contributes nothing and is not
    /// computed.
    pub enabled: [bool; 6],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            thresholds: MaskThresholds::default(),
            gamma: [0.5, 0.5, 0.1, 0.1, 1.0, 1.5],
            epsilon: 1e-8,
            bas_detach_classifier: true,
            enabled: [true; 6],
        }
    }
}

impl LossConfig {
    /// Classification, foreground classification, background suppression
    /// and area constraint only.
    pub fn baseline() -> Self {
        let mut cfg = LossConfig::default();
        for t in [Term::Ae, Term::AeFg, Term::Pseudo] {
            cfg.set_enabled(t, false);
        }
        cfg
    }

    pub fn is_enabled(&self, term: Term) -> bool {
        term.weight_index().is_none_or(|i| self.enabled[i])
    }

    /// Switches a weighted term on or off. `cls` is always on.
    pub fn set_enabled(&mut self, term: Term, on: bool) {
        if let Some(i) = term.weight_index() {
            self.enabled[i] = on;
        }
    }

    pub fn weight(&self, term: Term) -> f64 {
        term.weight_index().map_or(1.0, |i| self.gamma[i])
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        if let Some(g) = self.gamma.iter().find(|g| !(**g >= 0.0) || !g.is_finite()) {
            return Err(Error::Config(format!("loss weight {g} must be finite and non-negative")));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// Scalar values of every term from one evaluation of [`total_loss`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub cls_fg: f64,
    pub ae: f64,
    pub ae_fg: f64,
    pub pseudo: f64,
    pub psd_fg: f64,
    pub psd_bg: f64,
    pub bas: f64,
    pub ac: f64,
    pub total: f64,
    /// Full-image class score per sample.
    pub s_all: Vec<f64>,
    /// Background-only class score per sample.
    pub s_bg: Vec<f64>,
    /// Samples whose background term was ignored because `s_bg > s_all`.
    pub bas_skipped: Vec<bool>,
}

impl LossBreakdown {
    pub fn term(&self, term: Term) -> f64 {
        match term {
            Term::Cls => self.cls,
            Term::ClsFg => self.cls_fg,
            Term::Ae => self.ae,
            Term::AeFg => self.ae_fg,
            Term::Pseudo => self.pseudo,
            Term::Bas => self.bas,
            Term::Ac => self.ac,
        }
    }

    fn set(&mut self, term: Term, v: f64) {
        match term {
            Term::Cls => self.cls = v,
            Term::ClsFg => self.cls_fg = v,
            Term::Ae => self.ae = v,
            Term::AeFg => self.ae_fg = v,
            Term::Pseudo => self.pseudo = v,
            Term::Bas => self.bas = v,
            Term::Ac => self.ac = v,
        }
    }

    pub fn skipped_count(&self) -> usize {
        self.bas_skipped.iter().filter(|&&s| s).count()
    }

    /// First term whose value is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Term::ALL
            .into_iter()
            .find(|&t| !self.term(t).is_finite())
            .map(Term::name)
            .or((!self.total.is_finite()).then_some("total"))
    }
}

fn masked_cross_entropy<'t>(scores: Var<'t>, mask: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    scores.mul(mask)?.global_avg_pool()?.cross_entropy(labels)
}

/// Cross-entropy of the pooled class scores.
pub fn loss_cls<'t>(b: &ActivationBundle<'t>, labels: &[usize]) -> Result<Var<'t>> {
    b.scores.global_avg_pool()?.cross_entropy(labels)
}

/// Cross-entropy after weighting the score map by the downsampled
/// foreground mask. Reaches the localizer through the mask.
pub fn loss_cls_fg<'t>(b: &ActivationBundle<'t>, labels: &[usize]) -> Result<Var<'t>> {
    masked_cross_entropy(b.scores, masks::downsample_mask(b.foreground)?, labels)
}

/// Cross-entropy with the most confident foreground cells removed by a
/// binary mask. The mask is constant, so the localizer gets no gradient.
pub fn loss_ae<'t>(b: &ActivationBundle<'t>, labels: &[usize], t1: f64) -> Result<Var<'t>> {
    let erase = masks::erase_binary(b.foreground, t1);
    masked_cross_entropy(b.scores, masks::downsample_mask(erase)?, labels)
}

/// Cross-entropy weighted by the soft-erased foreground mask.
pub fn loss_ae_fg<'t>(b: &ActivationBundle<'t>, labels: &[usize], t2: f64) -> Result<Var<'t>> {
    let erase = masks::erase_soft(b.foreground, t2)?;
    masked_cross_entropy(b.scores, masks::downsample_mask(erase)?, labels)
}

/// Pseudo-label loss split into its foreground and background parts.
#[derive(Clone, Copy, Debug)]
pub struct PseudoLoss<'t> {
    pub total: Var<'t>,
    pub fg: Var<'t>,
    pub bg: Var<'t>,
}

/// L1 distance between the foreground map and its own thresholded pseudo
/// labels, counting only confident cells. Each part is normalised by the
/// total cell count.
pub fn loss_pseudo<'t>(b: &ActivationBundle<'t>, t3: f64, t4: f64) -> Result<PseudoLoss<'t>> {
    let fg_map = b.foreground;
    let labels = masks::pseudo_labels(fg_map, t3, t4)?;
    // |1 - f| = 1 - f and |0 - f| = f for f in [0, 1]
    let fg = labels.fg_mask.mul(fg_map.one_minus())?.mean();
    let bg = labels.bg_mask.mul(fg_map)?.mean();
    Ok(PseudoLoss { total: fg.add(bg)?, fg, bg })
}

/// Background-suppression loss with its per-sample diagnostics.
#[derive(Clone, Debug)]
pub struct BasLoss<'t> {
    pub value: Var<'t>,
    pub s_all: Vec<f64>,
    pub s_bg: Vec<f64>,
    pub skipped: Vec<bool>,
}

/// Per-sample `s_bg / (s_all + eps)`, averaged over the batch, where a
/// sample with `s_bg > s_all` contributes zero. Both inputs are `[N,1]`.
pub fn bas_ratio<'t>(s_all: Var<'t>, s_bg: Var<'t>, epsilon: f64) -> Result<BasLoss<'t>> {
    let (all_v, bg_v) = (s_all.value(), s_bg.value());
    let skipped = s_all.tape().branch(all_v.data().iter().zip(bg_v.data()).map(|(a, b)| b > a).collect());
    let keep = crate::autodiff::Tensor::new(
        all_v.shape().to_vec(),
        skipped.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect(),
    )?;
    let ratio = s_bg.div(s_all.add_scalar(epsilon))?;
    let value = ratio.mul(s_all.tape().constant(keep))?.mean();
    Ok(BasLoss {
        value,
        s_all: all_v.data().to_vec(),
        s_bg: bg_v.data().to_vec(),
        skipped,
    })
}

/// Ratio of the ground-truth class score computed from background-masked
/// features to the score from the full features. Scores are clamped at
/// zero before pooling.
pub fn loss_bas<'t>(
    b: &ActivationBundle<'t>,
    labels: &[usize],
    net: &BoundNet<'_, 't>,
    epsilon: f64,
    detach_classifier: bool,
) -> Result<BasLoss<'t>> {
    let full = if detach_classifier {
        net.classify_features(b.features, true)?
    } else {
        b.scores
    };
    let s_all = full.relu().select_channel(labels)?.global_avg_pool()?;
    let masked = b.features.mul(masks::background_mask(b.foreground))?;
    let s_bg = net
        .classify_features(masked, detach_classifier)?
        .relu()
        .select_channel(labels)?
        .global_avg_pool()?;
    bas_ratio(s_all, s_bg, epsilon)
}

/// Mean foreground activation.
pub fn loss_ac<'t>(b: &ActivationBundle<'t>) -> Var<'t> {
    b.foreground.mean()
}

/// The weighted total on the tape plus the scalar breakdown.
#[derive(Clone, Debug)]
pub struct TotalLoss<'t> {
    pub loss: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// Evaluates one loss term on the tape. `Pseudo` and `Bas` detail is
/// written into `breakdown`.
pub fn term_loss<'t>(
    term: Term,
    b: &ActivationBundle<'t>,
    labels: &[usize],
    net: &BoundNet<'_, 't>,
    config: &LossConfig,
    breakdown: &mut LossBreakdown,
) -> Result<Var<'t>> {
    let th = &config.thresholds;
    Ok(match term {
        Term::Cls => loss_cls(b, labels)?,
        Term::ClsFg => loss_cls_fg(b, labels)?,
        Term::Ae => loss_ae(b, labels, th.t1)?,
        Term::AeFg => loss_ae_fg(b, labels, th.t2)?,
        Term::Pseudo => {
            let p = loss_pseudo(b, th.t3, th.t4)?;
            breakdown.psd_fg = p.fg.item();
            breakdown.psd_bg = p.bg.item();
            p.total
        }
        Term::Bas => {
            let bas = loss_bas(b, labels, net, config.epsilon, config.bas_detach_classifier)?;
            breakdown.s_all = bas.s_all;
            breakdown.s_bg = bas.s_bg;
            breakdown.bas_skipped = bas.skipped;
            bas.value
        }
        Term::Ac => loss_ac(b),
    })
}

/// `cls + Σ γ_k · term_k` over the enabled weighted terms.
pub fn total_loss<'t>(
    b: &ActivationBundle<'t>,
    labels: &[usize],
    net: &BoundNet<'_, 't>,
    config: &LossConfig,
) -> Result<TotalLoss<'t>> {
    let mut breakdown = LossBreakdown::default();
    let mut total = term_loss(Term::Cls, b, labels, net, config, &mut breakdown)?;
    breakdown.cls = total.item();
    for term in Term::WEIGHTED {
        if !config.is_enabled(term) {
            continue;
        }
        let v = term_loss(term, b, labels, net, config, &mut breakdown)?;
        breakdown.set(term, v.item());
        total = total.add(v.scale(config.weight(term)))?;
    }
    breakdown.total = total.item();
    Ok(TotalLoss { loss: total, breakdown })
}
