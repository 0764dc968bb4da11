//! Mask constructions derived from the foreground map.
//!
//! All threshold decisions are taken on detached values: a hard threshold
//! has zero derivative almost everywhere, so gradient only ever flows
//! through retained foreground values, never through the selection itself.

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Thresholds for binary erasing, soft erasing and pseudo-labelling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskThresholds {
    /// Binary erase: cells with foreground `>= t1` are zeroed.
    pub t1: f64,
    /// Soft erase: cells with foreground `>= t2` are zeroed.
    pub t2: f64,
    /// Pseudo foreground: cells `>= t3`.
    pub t3: f64,
    /// Pseudo background: cells `<= t4`.
    pub t4: f64,
}

impl Default for MaskThresholds {
    fn default() -> Self {
        MaskThresholds { t1: 0.8, t2: 0.8, t3: 0.4, t4: 0.1 }
    }
}

impl MaskThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("t1", self.t1), ("t2", self.t2), ("t3", self.t3), ("t4", self.t4)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{name} = {t} is outside [0, 1]")));
            }
        }
        check_pseudo(self.t3, self.t4)
    }
}

fn check_pseudo(t3: f64, t4: f64) -> Result<()> {
    if t4 < t3 {
        Ok(())
    } else {
        Err(Error::Config(format!("t4 = {t4} must be below t3 = {t3}")))
    }
}

fn indicator<'t>(fg: Var<'t>, keep: impl Fn(f64) -> bool) -> Var<'t> {
    let v = fg.value();
    let tape = fg.tape();
    let bits = tape.branch(v.data().iter().map(|&x| keep(x)).collect());
    let data = bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
    tape.constant(Tensor::new(v.shape().to_vec(), data).expect("same shape"))
}

/// Binary mask that is 0 where the foreground is `>= t1` and 1 elsewhere.
/// The result is a constant.
pub fn erase_binary<'t>(fg: Var<'t>, t1: f64) -> Var<'t> {
    indicator(fg, |x| x < t1)
}

/// The foreground map with cells `>= t2` replaced by zero. Retained cells
/// keep their gradient path into `fg`.
pub fn erase_soft<'t>(fg: Var<'t>, t2: f64) -> Result<Var<'t>> {
    fg.mul(indicator(fg, |x| x < t2))
}

/// Pixel-level pseudo labels. Cells in neither mask are uncertain and carry
/// no label.
#[derive(Clone, Debug)]
pub struct PseudoLabels<'t> {
    /// 1 on pseudo foreground, 0 elsewhere; only meaningful where one of the
    /// masks is set.
    pub labels: Var<'t>,
    pub fg_mask: Var<'t>,
    pub bg_mask: Var<'t>,
}

pub fn pseudo_labels<'t>(fg: Var<'t>, t3: f64, t4: f64) -> Result<PseudoLabels<'t>> {
    check_pseudo(t3, t4)?;
    let fg_mask = indicator(fg, |x| x >= t3);
    let bg_mask = indicator(fg, |x| x <= t4);
    let labels = fg.tape().constant(fg_mask.value().as_ref().clone());
    Ok(PseudoLabels { labels, fg_mask, bg_mask })
}

/// `1 - fg`, the weight applied to features to keep only the background.
pub fn background_mask<'t>(fg: Var<'t>) -> Var<'t> {
    fg.one_minus()
}

/// Halves the spatial resolution with 2×2 average pooling.
pub fn downsample_mask<'t>(mask: Var<'t>) -> Result<Var<'t>> {
    let (_, _, h, w) = mask.value().dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("downsample_mask: {h}x{w} has an odd side")));
    }
    mask.avg_pool2d(2, 2)
}

/// Cell-count summary of a pseudo-label split, for logging.
pub fn pseudo_coverage(labels: &PseudoLabels<'_>) -> (usize, usize, usize) {
    let count = |t: &Tensor| t.data().iter().filter(|&&v| v == 1.0).count();
    let fg = count(&labels.fg_mask.value());
    let bg = count(&labels.bg_mask.value());
    (fg, bg, labels.fg_mask.value().len() - fg - bg)
}
